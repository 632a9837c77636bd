#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "verinet/tensor.hpp"

namespace verinet::ad {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Nodes are created in topological order; backward() walks
// them in reverse and accumulates into per-node gradient tensors.
class Tape {
 public:
  Var leaf(Tensor value) { return push(std::move(value), {}, nullptr); }

  const Tensor& value(Var v) const { return nodes_[check(v)].value; }
  const Tensor& grad(Var v) const { return nodes_[check(v)].grad; }

  std::size_t node_count() const { return nodes_.size(); }

  Var add(Var a, Var b) {
    detail::require_same_shape(value(a), value(b), "ad::add");
    Tensor out = verinet::add(value(a), value(b));
    return push(std::move(out), {a, b}, [](Tape& t, Node& n) {
      t.accumulate(n.parents[0], n.grad);
      t.accumulate(n.parents[1], n.grad);
    });
  }

  Var sub(Var a, Var b) {
    detail::require_same_shape(value(a), value(b), "ad::sub");
    Tensor out = verinet::sub(value(a), value(b));
    return push(std::move(out), {a, b}, [](Tape& t, Node& n) {
      t.accumulate(n.parents[0], n.grad);
      t.accumulate_scaled(n.parents[1], n.grad, -1.0);
    });
  }

  Var mul(Var a, Var b) {
    detail::require_same_shape(value(a), value(b), "ad::mul");
    Tensor out = verinet::mul(value(a), value(b));
    return push(std::move(out), {a, b}, [](Tape& t, Node& n) {
      t.accumulate_product(n.parents[0], n.grad, t.value(n.parents[1]));
      t.accumulate_product(n.parents[1], n.grad, t.value(n.parents[0]));
    });
  }

  Var scale(Var a, double s) {
    Tensor out = verinet::scale(value(a), s);
    return push(std::move(out), {a}, [s](Tape& t, Node& n) {
      t.accumulate_scaled(n.parents[0], n.grad, s);
    });
  }

  Var abs(Var a) {
    Tensor out = verinet::abs(value(a));
    return push(std::move(out), {a}, [](Tape& t, Node& n) {
      const Tensor& x = t.value(n.parents[0]);
      Tensor g(x.shape());
      // d|x|/dx at 0 defined as 0
      for (std::size_t i = 0; i < x.size(); ++i)
        g[i] = n.grad[i] * (x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0));
      t.accumulate(n.parents[0], g);
    });
  }

  Var relu(Var a) {
    Tensor out = verinet::relu(value(a));
    return push(std::move(out), {a}, [](Tape& t, Node& n) {
      const Tensor& x = t.value(n.parents[0]);
      Tensor g(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i)
        g[i] = x[i] > 0.0 ? n.grad[i] : 0.0;  // relu'(0) = 0
      t.accumulate(n.parents[0], g);
    });
  }

  Var sigmoid(Var a) {
    Tensor out = verinet::sigmoid(value(a));
    return push(std::move(out), {a}, [](Tape& t, Node& n) {
      const Tensor& y = n.value;
      Tensor g(y.shape());
      for (std::size_t i = 0; i < y.size(); ++i)
        g[i] = n.grad[i] * y[i] * (1.0 - y[i]);
      t.accumulate(n.parents[0], g);
    });
  }

  Var tanh(Var a) {
    Tensor out = verinet::tanh(value(a));
    return push(std::move(out), {a}, [](Tape& t, Node& n) {
      const Tensor& y = n.value;
      Tensor g(y.shape());
      for (std::size_t i = 0; i < y.size(); ++i)
        g[i] = n.grad[i] * (1.0 - y[i] * y[i]);
      t.accumulate(n.parents[0], g);
    });
  }

  Var softplus(Var a) {
    Tensor out = verinet::softplus(value(a));
    return push(std::move(out), {a}, [](Tape& t, Node& n) {
      const Tensor& x = t.value(n.parents[0]);
      Tensor g(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i)
        g[i] = n.grad[i] / (1.0 + std::exp(-x[i]));
      t.accumulate(n.parents[0], g);
    });
  }

  Var reshape(Var a, std::vector<std::size_t> shape) {
    Tensor out = value(a).reshaped(shape);
    return push(std::move(out), {a}, [](Tape& t, Node& n) {
      t.accumulate(n.parents[0],
                   n.grad.reshaped(t.value(n.parents[0]).shape()));
    });
  }

  Var matmul(Var a, Var b) {
    Tensor out = verinet::matmul(value(a), value(b));
    return push(std::move(out), {a, b}, [](Tape& t, Node& n) {
      const Tensor& av = t.value(n.parents[0]);
      const Tensor& bv = t.value(n.parents[1]);
      t.accumulate(n.parents[0], matmul_nt(n.grad, bv));   // g B^T
      t.accumulate(n.parents[1], matmul_tn(av, n.grad));   // A^T g
    });
  }

  // x [B x in] -> x W^T + b with W [out x in], b [out]
  Var linear(Var x, Var w, Var b) {
    const Tensor& xv = value(x);
    const Tensor& wv = value(w);
    const Tensor& bv = value(b);
    if (xv.rank() != 2 || wv.rank() != 2)
      throw ShapeError("linear: operands must be 2-axis");
    if (xv.extent(1) != wv.extent(1))
      throw ShapeError("linear: input extent mismatch");
    if (bv.size() != wv.extent(0))
      throw ShapeError("linear: bias length mismatch");
    Tensor out = matmul_nt(xv, wv);
    std::size_t batch = out.extent(0), n = out.extent(1);
    for (std::size_t i = 0; i < batch; ++i)
      for (std::size_t j = 0; j < n; ++j) out.at2(i, j) += bv[j];
    out.check_finite("linear");
    return push(std::move(out), {x, w, b}, [](Tape& t, Node& n_) {
      const Tensor& xv_ = t.value(n_.parents[0]);
      const Tensor& wv_ = t.value(n_.parents[1]);
      t.accumulate(n_.parents[0], verinet::matmul(n_.grad, wv_));  // g W
      t.accumulate(n_.parents[1], matmul_tn(n_.grad, xv_));        // g^T x
      std::size_t batch = n_.grad.extent(0), out_n = n_.grad.extent(1);
      Tensor gb({out_n});
      for (std::size_t i = 0; i < batch; ++i)
        for (std::size_t j = 0; j < out_n; ++j) gb[j] += n_.grad.at2(i, j);
      t.accumulate(n_.parents[2], gb);
    });
  }

  // x W^T without bias; used for the radius half of interval propagation
  Var linear_nobias(Var x, Var w) {
    Tensor out = matmul_nt(value(x), value(w));
    return push(std::move(out), {x, w}, [](Tape& t, Node& n) {
      t.accumulate(n.parents[0], verinet::matmul(n.grad, t.value(n.parents[1])));
      t.accumulate(n.parents[1], matmul_tn(n.grad, t.value(n.parents[0])));
    });
  }

  Var conv2d(Var x, Var w, Var b, std::size_t stride, std::size_t padding) {
    Tensor out = verinet::conv2d(value(x), value(w), value(b), stride, padding);
    return push(std::move(out), {x, w, b},
                [stride, padding](Tape& t, Node& n) {
                  conv2d_backward(t, n, stride, padding, true);
                });
  }

  Var conv2d_nobias(Var x, Var w, std::size_t stride, std::size_t padding) {
    Tensor zb({value(w).extent(0)});
    Tensor out = verinet::conv2d(value(x), value(w), zb, stride, padding);
    return push(std::move(out), {x, w},
                [stride, padding](Tape& t, Node& n) {
                  conv2d_backward(t, n, stride, padding, false);
                });
  }

  // Mean softmax cross-entropy over a batch of logits [B x N].
  Var cross_entropy_mean(Var logits, const std::vector<int>& labels) {
    const Tensor& z = value(logits);
    if (z.rank() != 2 || z.extent(0) != labels.size())
      throw ShapeError("cross_entropy_mean: logits/labels mismatch");
    std::size_t batch = z.extent(0), n = z.extent(1);
    double total = 0.0;
    for (std::size_t i = 0; i < batch; ++i) {
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= n)
        throw std::out_of_range("cross_entropy_mean: bad label");
      total += logsumexp_row(z, i) - z.at2(i, labels[i]);
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(batch));
    out.check_finite("cross_entropy_mean");
    return push(std::move(out), {logits}, [labels](Tape& t, Node& n) {
      const Tensor& z_ = t.value(n.parents[0]);
      std::size_t batch = z_.extent(0), nc = z_.extent(1);
      double g0 = n.grad[0] / static_cast<double>(batch);
      Tensor g(z_.shape());
      for (std::size_t i = 0; i < batch; ++i) {
        double lse = logsumexp_row(z_, i);
        for (std::size_t j = 0; j < nc; ++j)
          g.at2(i, j) = g0 * std::exp(z_.at2(i, j) - lse);
        g.at2(i, labels[i]) -= g0;
      }
      t.accumulate(n.parents[0], g);
    });
  }

  // Mean over y != y_true and over the batch of softplus(margin_y) where
  // margin_y = zhat_y - zhat_{y_true}.
  Var spec_softplus_mean(Var zhat, const std::vector<int>& labels) {
    return spec_margin_loss(zhat, labels, /*hinge=*/false, 0.0);
  }

  // Mean of max(0, margin_y + offset).
  Var spec_hinge_mean(Var zhat, const std::vector<int>& labels,
                      double offset) {
    return spec_margin_loss(zhat, labels, /*hinge=*/true, offset);
  }

  // Mean over the batch of max_{y != y_true} (z_y - z_{y_true}); gradient
  // routes through the arg-max class of each row.
  Var margin_max_mean(Var logits, const std::vector<int>& labels) {
    const Tensor& z = value(logits);
    if (z.rank() != 2 || z.extent(0) != labels.size())
      throw ShapeError("margin_max_mean: logits/labels mismatch");
    std::size_t batch = z.extent(0), nc = z.extent(1);
    if (nc < 2) throw ShapeError("margin_max_mean: needs at least 2 classes");
    std::vector<std::size_t> best(batch);
    double total = 0.0;
    for (std::size_t i = 0; i < batch; ++i) {
      std::size_t yt = static_cast<std::size_t>(labels[i]);
      std::size_t b = yt == 0 ? 1 : 0;
      for (std::size_t y = 0; y < nc; ++y)
        if (y != yt && z.at2(i, y) > z.at2(i, b)) b = y;
      best[i] = b;
      total += z.at2(i, b) - z.at2(i, yt);
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(batch));
    return push(std::move(out), {logits},
                [labels, best](Tape& t, Node& n) {
      const Tensor& z_ = t.value(n.parents[0]);
      double g0 = n.grad[0] / static_cast<double>(z_.extent(0));
      Tensor g(z_.shape());
      for (std::size_t i = 0; i < z_.extent(0); ++i) {
        g.at2(i, best[i]) += g0;
        g.at2(i, labels[i]) -= g0;
      }
      t.accumulate(n.parents[0], g);
    });
  }

  // Worst-case logit assembly from output bounds [B x N]: the true class
  // takes its lower bound, every other class its upper bound.
  Var worst_logits(Var lower, Var upper, const std::vector<int>& labels) {
    const Tensor& l = value(lower);
    const Tensor& u = value(upper);
    detail::require_same_shape(l, u, "worst_logits");
    if (l.rank() != 2 || l.extent(0) != labels.size())
      throw ShapeError("worst_logits: bounds/labels mismatch");
    Tensor out = u;
    for (std::size_t i = 0; i < l.extent(0); ++i)
      out.at2(i, labels[i]) = l.at2(i, labels[i]);
    return push(std::move(out), {lower, upper}, [labels](Tape& t, Node& n) {
      Tensor gl(n.grad.shape()), gu = n.grad;
      for (std::size_t i = 0; i < n.grad.extent(0); ++i) {
        gl.at2(i, labels[i]) = n.grad.at2(i, labels[i]);
        gu.at2(i, labels[i]) = 0.0;
      }
      t.accumulate(n.parents[0], gl);
      t.accumulate(n.parents[1], gu);
    });
  }

  // Worst-case logits with the last linear layer folded into the class
  // specifications. Inputs are the penultimate-layer bounds [B x H] and the
  // last layer W [N x H], b [N]. For y != y_true:
  //   zhat_y = sum_j max(c_j,0) u_j + min(c_j,0) l_j + b_y - b_ytrue,
  //   c = W_y - W_ytrue,  zhat_ytrue = 0.
  // Valid as cross-entropy input because softmax is shift-invariant.
  Var elided_worst_logits(Var lower, Var upper, Var w, Var b,
                          const std::vector<int>& labels) {
    const Tensor& l = value(lower);
    const Tensor& u = value(upper);
    const Tensor& wv = value(w);
    const Tensor& bv = value(b);
    detail::require_same_shape(l, u, "elided_worst_logits");
    if (l.rank() != 2 || wv.rank() != 2 || l.extent(1) != wv.extent(1))
      throw ShapeError("elided_worst_logits: shape mismatch");
    if (l.extent(0) != labels.size())
      throw ShapeError("elided_worst_logits: batch/labels mismatch");
    std::size_t batch = l.extent(0), nc = wv.extent(0), h = wv.extent(1);
    Tensor out({batch, nc});
    for (std::size_t i = 0; i < batch; ++i) {
      std::size_t yt = static_cast<std::size_t>(labels[i]);
      if (yt >= nc) throw std::out_of_range("elided_worst_logits: bad label");
      for (std::size_t y = 0; y < nc; ++y) {
        if (y == yt) continue;
        double s = bv[y] - bv[yt];
        for (std::size_t j = 0; j < h; ++j) {
          double c = wv.at2(y, j) - wv.at2(yt, j);
          s += c > 0.0 ? c * u.at2(i, j) : c * l.at2(i, j);
        }
        out.at2(i, y) = s;
      }
    }
    out.check_finite("elided_worst_logits");
    return push(std::move(out), {lower, upper, w, b},
                [labels](Tape& t, Node& n) {
      const Tensor& l_ = t.value(n.parents[0]);
      const Tensor& u_ = t.value(n.parents[1]);
      const Tensor& w_ = t.value(n.parents[2]);
      std::size_t batch = l_.extent(0), nc = w_.extent(0), h = w_.extent(1);
      Tensor gl(l_.shape()), gu(u_.shape()), gw(w_.shape());
      Tensor gb({nc});
      for (std::size_t i = 0; i < batch; ++i) {
        std::size_t yt = static_cast<std::size_t>(labels[i]);
        for (std::size_t y = 0; y < nc; ++y) {
          if (y == yt) continue;
          double g = n.grad.at2(i, y);
          if (g == 0.0) continue;
          gb[y] += g;
          gb[yt] -= g;
          for (std::size_t j = 0; j < h; ++j) {
            double c = w_.at2(y, j) - w_.at2(yt, j);
            // endpoint chosen by sign(c); the c=0 term contributes nothing
            double z = c > 0.0 ? u_.at2(i, j) : (c < 0.0 ? l_.at2(i, j) : 0.0);
            if (c > 0.0)
              gu.at2(i, j) += g * c;
            else if (c < 0.0)
              gl.at2(i, j) += g * c;
            gw.at2(y, j) += g * z;
            gw.at2(yt, j) -= g * z;
          }
        }
      }
      t.accumulate(n.parents[0], gl);
      t.accumulate(n.parents[1], gu);
      t.accumulate(n.parents[2], gw);
      t.accumulate(n.parents[3], gb);
    });
  }

  void zero_grad() {
    for (auto& n : nodes_) n.grad = Tensor(n.value.shape());
  }

  void backward(Var loss) {
    Node& last = nodes_[check(loss)];
    if (last.value.size() != 1)
      throw ShapeError("backward: loss must be scalar");
    zero_grad();
    last.grad[0] = 1.0;
    for (std::size_t i = nodes_.size(); i > 0; --i) {
      Node& n = nodes_[i - 1];
      if (n.backward) n.backward(*this, n);
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<Var> parents;
    std::function<void(Tape&, Node&)> backward;
  };

  int check(Var v) const {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw std::out_of_range("invalid tape variable");
    return v.id;
  }

  Var push(Tensor value, std::vector<Var> parents,
           std::function<void(Tape&, Node&)> backward) {
    Node n;
    n.grad = Tensor(value.shape());
    n.value = std::move(value);
    n.parents = std::move(parents);
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  void accumulate(Var v, const Tensor& g) {
    Tensor& dst = nodes_[check(v)].grad;
    detail::require_same_shape(dst, g, "ad::accumulate");
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }

  void accumulate_scaled(Var v, const Tensor& g, double s) {
    Tensor& dst = nodes_[check(v)].grad;
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += s * g[i];
  }

  void accumulate_product(Var v, const Tensor& g, const Tensor& other) {
    Tensor& dst = nodes_[check(v)].grad;
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * other[i];
  }

  static double logsumexp_row(const Tensor& z, std::size_t row) {
    std::size_t n = z.extent(1);
    double m = z.at2(row, 0);
    for (std::size_t j = 1; j < n; ++j) m = std::max(m, z.at2(row, j));
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(z.at2(row, j) - m);
    return m + std::log(s);
  }

  Var spec_margin_loss(Var zhat, const std::vector<int>& labels, bool hinge,
                       double offset) {
    const Tensor& z = value(zhat);
    if (z.rank() != 2 || z.extent(0) != labels.size())
      throw ShapeError("spec loss: logits/labels mismatch");
    std::size_t batch = z.extent(0), nc = z.extent(1);
    if (nc < 2) throw ShapeError("spec loss: needs at least 2 classes");
    double total = 0.0;
    for (std::size_t i = 0; i < batch; ++i) {
      std::size_t yt = static_cast<std::size_t>(labels[i]);
      double s = 0.0;
      for (std::size_t y = 0; y < nc; ++y) {
        if (y == yt) continue;
        double m = z.at2(i, y) - z.at2(i, yt);
        s += hinge ? std::max(0.0, m + offset) : softplus_scalar(m);
      }
      total += s / static_cast<double>(nc - 1);
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(batch));
    return push(std::move(out), {zhat},
                [labels, hinge, offset](Tape& t, Node& n) {
      const Tensor& z_ = t.value(n.parents[0]);
      std::size_t batch = z_.extent(0), nc = z_.extent(1);
      double g0 = n.grad[0] /
                  (static_cast<double>(batch) * static_cast<double>(nc - 1));
      Tensor g(z_.shape());
      for (std::size_t i = 0; i < batch; ++i) {
        std::size_t yt = static_cast<std::size_t>(labels[i]);
        for (std::size_t y = 0; y < nc; ++y) {
          if (y == yt) continue;
          double m = z_.at2(i, y) - z_.at2(i, yt);
          double d = hinge ? (m + offset > 0.0 ? 1.0 : 0.0)
                           : 1.0 / (1.0 + std::exp(-m));
          g.at2(i, y) += g0 * d;
          g.at2(i, yt) -= g0 * d;
        }
      }
      t.accumulate(n.parents[0], g);
    });
  }

  static void conv2d_backward(Tape& t, Node& n, std::size_t stride,
                              std::size_t padding, bool has_bias) {
    const Tensor& x = t.value(n.parents[0]);
    const Tensor& w = t.value(n.parents[1]);
    const Tensor& g = n.grad;
    std::size_t nb = g.extent(0), ko = g.extent(1), ho = g.extent(2),
                wo = g.extent(3);
    std::size_t ci = x.extent(1), hi = x.extent(2), wi = x.extent(3);
    std::size_t kh = w.extent(2), kw = w.extent(3);
    Tensor gx(x.shape()), gw(w.shape());
    long pad = static_cast<long>(padding);
    for (std::size_t bn = 0; bn < nb; ++bn)
      for (std::size_t k = 0; k < ko; ++k)
        for (std::size_t oy = 0; oy < ho; ++oy)
          for (std::size_t ox = 0; ox < wo; ++ox) {
            double gv = g.at4(bn, k, oy, ox);
            if (gv == 0.0) continue;
            long y0 = static_cast<long>(oy * stride) - pad;
            long x0 = static_cast<long>(ox * stride) - pad;
            for (std::size_t c = 0; c < ci; ++c)
              for (std::size_t fy = 0; fy < kh; ++fy) {
                long iy = y0 + static_cast<long>(fy);
                if (iy < 0 || iy >= static_cast<long>(hi)) continue;
                for (std::size_t fx = 0; fx < kw; ++fx) {
                  long ix = x0 + static_cast<long>(fx);
                  if (ix < 0 || ix >= static_cast<long>(wi)) continue;
                  auto uy = static_cast<std::size_t>(iy);
                  auto ux = static_cast<std::size_t>(ix);
                  gx.at4(bn, c, uy, ux) += gv * w.at4(k, c, fy, fx);
                  gw.at4(k, c, fy, fx) += gv * x.at4(bn, c, uy, ux);
                }
              }
          }
    t.accumulate(n.parents[0], gx);
    t.accumulate(n.parents[1], gw);
    if (has_bias) {
      Tensor gb({ko});
      for (std::size_t bn = 0; bn < nb; ++bn)
        for (std::size_t k = 0; k < ko; ++k)
          for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox)
              gb[k] += g.at4(bn, k, oy, ox);
      t.accumulate(n.parents[2], gb);
    }
  }

  std::vector<Node> nodes_;
};

}  // namespace verinet::ad
