#include <doctest.h>

#include <functional>

#include "verinet/autodiff.hpp"
#include "verinet/tensor.hpp"

using namespace verinet;
using ad::Tape;
using ad::Var;

namespace {

// Central finite differences on a scalar function of one tensor leaf.
Tensor numeric_grad(const std::function<double(const Tensor&)>& f,
                    const Tensor& x, double h = 1e-6) {
  Tensor g(x.shape());
  Tensor xp = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double orig = xp[i];
    xp[i] = orig + h;
    double fp = f(xp);
    xp[i] = orig - h;
    double fm = f(xp);
    xp[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

void check_close(const Tensor& got, const Tensor& want, double tol) {
  REQUIRE(got.same_shape(want));
  for (std::size_t i = 0; i < got.size(); ++i) {
    double denom = std::max(1.0, std::fabs(want[i]));
    CHECK(std::fabs(got[i] - want[i]) / denom < tol);
  }
}

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0,
                     double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("add/sub/mul/scale gradients") {
  Rng rng(3);
  Tensor a = random_tensor({4}, rng);
  Tensor b = random_tensor({4}, rng);
  Tensor w = random_tensor({4}, rng);

  auto scalarize = [&](Var v, Tape& t) {
    // weighted sum so each coordinate has a distinct gradient path
    Var wl = t.leaf(w);
    Var prod = t.mul(v, wl);
    // reduce by matmul against a ones row
    Tensor ones({1, 4});
    for (std::size_t i = 0; i < 4; ++i) ones[i] = 1.0;
    return t.matmul(t.leaf(ones), t.reshape(prod, {4, 1}));
  };

  Tape tape;
  Var av = tape.leaf(a);
  Var bv = tape.leaf(b);
  Var expr = tape.add(tape.scale(tape.mul(av, bv), 2.0),
                      tape.sub(av, tape.scale(bv, 0.5)));
  Var loss = scalarize(expr, tape);
  tape.backward(loss);

  auto f = [&](const Tensor& x, bool wrt_a) {
    double s = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      double ai = wrt_a ? x[i] : a[i];
      double bi = wrt_a ? b[i] : x[i];
      s += w[i] * (2.0 * ai * bi + ai - 0.5 * bi);
    }
    return s;
  };
  check_close(tape.grad(av),
              numeric_grad([&](const Tensor& x) { return f(x, true); }, a),
              1e-7);
  check_close(tape.grad(bv),
              numeric_grad([&](const Tensor& x) { return f(x, false); }, b),
              1e-7);
}

TEST_CASE("activation gradients at generic points") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({6}, rng, -2.0, 2.0);
    // keep away from the relu/abs kink
    for (std::size_t i = 0; i < x.size(); ++i)
      if (std::fabs(x[i]) < 0.05) x[i] = 0.1;

    for (int which = 0; which < 5; ++which) {
      Tape tape;
      Var xv = tape.leaf(x);
      Var y;
      std::function<double(double)> ref;
      switch (which) {
        case 0: y = tape.relu(xv); ref = [](double v) { return std::max(v, 0.0); }; break;
        case 1: y = tape.sigmoid(xv); ref = [](double v) { return 1.0 / (1.0 + std::exp(-v)); }; break;
        case 2: y = tape.tanh(xv); ref = [](double v) { return std::tanh(v); }; break;
        case 3: y = tape.softplus(xv); ref = softplus_scalar; break;
        case 4: y = tape.abs(xv); ref = [](double v) { return std::fabs(v); }; break;
      }
      Tensor ones({1, 6});
      for (std::size_t i = 0; i < 6; ++i) ones[i] = 1.0;
      Var loss = tape.matmul(tape.leaf(ones), tape.reshape(y, {6, 1}));
      tape.backward(loss);
      auto f = [&](const Tensor& t) {
        double s = 0.0;
        for (std::size_t i = 0; i < t.size(); ++i) s += ref(t[i]);
        return s;
      };
      check_close(tape.grad(xv), numeric_grad(f, x), 1e-6);
    }
  }
}

TEST_CASE("relu and abs subgradient at zero is zero") {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({0.0}));
  Var loss = tape.reshape(tape.relu(x), {1, 1});
  Var s = tape.matmul(tape.leaf(Tensor::matrix(1, 1, {1.0})), loss);
  tape.backward(s);
  CHECK(tape.grad(x)[0] == 0.0);

  Tape tape2;
  Var x2 = tape2.leaf(Tensor::vector({0.0}));
  Var s2 = tape2.matmul(tape2.leaf(Tensor::matrix(1, 1, {1.0})),
                        tape2.reshape(tape2.abs(x2), {1, 1}));
  tape2.backward(s2);
  CHECK(tape2.grad(x2)[0] == 0.0);
}

TEST_CASE("matmul and linear gradients") {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = random_tensor({3, 4}, rng);
    Tensor w = random_tensor({5, 4}, rng);
    Tensor b = random_tensor({5}, rng);
    Tensor probe = random_tensor({3, 5}, rng);

    auto f = [&](const Tensor& xx, const Tensor& ww, const Tensor& bb) {
      double s = 0.0;
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 5; ++j) {
          double z = bb[j];
          for (std::size_t k = 0; k < 4; ++k) z += xx.at2(i, k) * ww.at2(j, k);
          s += probe.at2(i, j) * z;
        }
      return s;
    };

    Tape tape;
    Var xv = tape.leaf(x), wv = tape.leaf(w), bv = tape.leaf(b);
    Var z = tape.linear(xv, wv, bv);
    Var loss = tape.matmul(tape.leaf(probe.reshaped({1, 15})),
                           tape.reshape(z, {15, 1}));
    tape.backward(loss);

    check_close(tape.grad(xv),
                numeric_grad([&](const Tensor& t) { return f(t, w, b); }, x),
                1e-6);
    check_close(tape.grad(wv),
                numeric_grad([&](const Tensor& t) { return f(x, t, b); }, w),
                1e-6);
    check_close(tape.grad(bv),
                numeric_grad([&](const Tensor& t) { return f(x, w, t); }, b),
                1e-6);
  }
}

TEST_CASE("conv2d gradients") {
  Rng rng(11);
  Tensor x = random_tensor({2, 2, 4, 4}, rng);
  Tensor w = random_tensor({3, 2, 2, 2}, rng);
  Tensor b = random_tensor({3}, rng);

  Tape tape;
  Var xv = tape.leaf(x), wv = tape.leaf(w), bv = tape.leaf(b);
  Var z = tape.conv2d(xv, wv, bv, 1, 1);
  std::size_t n = tape.value(z).size();
  Tensor probe = random_tensor({1, n}, rng);
  Var loss = tape.matmul(tape.leaf(probe), tape.reshape(z, {n, 1}));
  tape.backward(loss);

  auto f = [&](const Tensor& xx, const Tensor& ww, const Tensor& bb) {
    Tensor out = conv2d(xx, ww, bb, 1, 1);
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += probe[i] * out[i];
    return s;
  };
  check_close(tape.grad(xv),
              numeric_grad([&](const Tensor& t) { return f(t, w, b); }, x),
              1e-5);
  check_close(tape.grad(wv),
              numeric_grad([&](const Tensor& t) { return f(x, t, b); }, w),
              1e-5);
  check_close(tape.grad(bv),
              numeric_grad([&](const Tensor& t) { return f(x, w, t); }, b),
              1e-5);
}

TEST_CASE("cross_entropy_mean value and gradient") {
  // two logits, label 0: loss = log(1 + e^(z1-z0))
  Tape tape;
  Tensor z = Tensor::matrix(1, 2, {0.0, 0.0});
  Var zv = tape.leaf(z);
  Var loss = tape.cross_entropy_mean(zv, {0});
  CHECK(tape.value(loss)[0] == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  tape.backward(loss);
  CHECK(tape.grad(zv)[0] == doctest::Approx(-0.5).epsilon(1e-12));
  CHECK(tape.grad(zv)[1] == doctest::Approx(0.5).epsilon(1e-12));

  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor logits = random_tensor({4, 5}, rng, -3.0, 3.0);
    std::vector<int> labels = {1, 0, 4, 2};
    Tape t2;
    Var lv = t2.leaf(logits);
    Var l2 = t2.cross_entropy_mean(lv, labels);
    t2.backward(l2);
    auto f = [&](const Tensor& x) {
      double total = 0.0;
      for (std::size_t i = 0; i < 4; ++i) {
        double m = x.at2(i, 0);
        for (std::size_t j = 1; j < 5; ++j) m = std::max(m, x.at2(i, j));
        double s = 0.0;
        for (std::size_t j = 0; j < 5; ++j) s += std::exp(x.at2(i, j) - m);
        total += m + std::log(s) - x.at2(i, labels[i]);
      }
      return total / 4.0;
    };
    check_close(t2.grad(lv), numeric_grad(f, logits), 1e-6);
  }
}

TEST_CASE("spec softplus and hinge losses match definitions") {
  Rng rng(17);
  Tensor z = random_tensor({3, 4}, rng, -2.0, 2.0);
  std::vector<int> labels = {0, 2, 3};

  Tape tape;
  Var zv = tape.leaf(z);
  Var sp = tape.spec_softplus_mean(zv, labels);
  Var hg = tape.spec_hinge_mean(zv, labels, 1.0);

  double want_sp = 0.0, want_hg = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    double ssp = 0.0, shg = 0.0;
    for (std::size_t y = 0; y < 4; ++y) {
      if (y == static_cast<std::size_t>(labels[i])) continue;
      double m = z.at2(i, y) - z.at2(i, labels[i]);
      ssp += softplus_scalar(m);
      shg += std::max(0.0, m + 1.0);
    }
    want_sp += ssp / 3.0;
    want_hg += shg / 3.0;
  }
  CHECK(tape.value(sp)[0] == doctest::Approx(want_sp / 3.0).epsilon(1e-14));
  CHECK(tape.value(hg)[0] == doctest::Approx(want_hg / 3.0).epsilon(1e-14));

  tape.backward(sp);
  auto f = [&](const Tensor& x) {
    double total = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
      double s = 0.0;
      for (std::size_t y = 0; y < 4; ++y) {
        if (y == static_cast<std::size_t>(labels[i])) continue;
        s += softplus_scalar(x.at2(i, y) - x.at2(i, labels[i]));
      }
      total += s / 3.0;
    }
    return total / 3.0;
  };
  check_close(tape.grad(zv), numeric_grad(f, z), 1e-6);
}

TEST_CASE("worst_logits picks endpoints and routes gradients") {
  Tape tape;
  Tensor l = Tensor::matrix(2, 3, {-1, -2, -3, 0, 1, 2});
  Tensor u = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  Var lv = tape.leaf(l), uv = tape.leaf(u);
  Var z = tape.worst_logits(lv, uv, {0, 2});
  const Tensor& zt = tape.value(z);
  CHECK(zt.at2(0, 0) == -1.0);  // true class -> lower
  CHECK(zt.at2(0, 1) == 2.0);
  CHECK(zt.at2(0, 2) == 3.0);
  CHECK(zt.at2(1, 2) == 2.0);
  CHECK(zt.at2(1, 0) == 4.0);

  Var loss = tape.cross_entropy_mean(z, {0, 2});
  tape.backward(loss);
  const Tensor& gl = tape.grad(lv);
  const Tensor& gu = tape.grad(uv);
  // lower only gets gradient at true class entries, upper everywhere else
  CHECK(gl.at2(0, 1) == 0.0);
  CHECK(gl.at2(0, 2) == 0.0);
  CHECK(gu.at2(0, 0) == 0.0);
  CHECK(gl.at2(0, 0) != 0.0);
  CHECK(gu.at2(1, 0) != 0.0);
  CHECK(gu.at2(1, 2) == 0.0);
}

TEST_CASE("elided_worst_logits value equals per-class endpoint optimum") {
  Rng rng(19);
  for (int trial = 0; trial < 50; ++trial) {
    std::size_t h = 3 + rng.uniform_index(4);
    std::size_t nc = 2 + rng.uniform_index(3);
    Tensor l = random_tensor({1, h}, rng, -1.0, 0.0);
    Tensor u = add(l, random_tensor({1, h}, rng, 0.0, 1.0));
    Tensor w = random_tensor({nc, h}, rng);
    Tensor b = random_tensor({nc}, rng);
    int yt = static_cast<int>(rng.uniform_index(nc));

    Tape tape;
    Var z = tape.elided_worst_logits(tape.leaf(l), tape.leaf(u), tape.leaf(w),
                                     tape.leaf(b), {yt});
    const Tensor& zt = tape.value(z);
    CHECK(zt.at2(0, yt) == 0.0);
    for (std::size_t y = 0; y < nc; ++y) {
      if (y == static_cast<std::size_t>(yt)) continue;
      // independent oracle: maximize (W_y - W_yt) x + b_y - b_yt over the box
      double s = b[y] - b[yt];
      for (std::size_t j = 0; j < h; ++j) {
        double c = w.at2(y, j) - w.at2(yt, j);
        s += c >= 0.0 ? c * u.at2(0, j) : c * l.at2(0, j);
      }
      CHECK(zt.at2(0, y) == doctest::Approx(s).epsilon(1e-13));
    }
  }
}

TEST_CASE("elided_worst_logits gradients vs finite differences") {
  Rng rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    std::size_t h = 4, nc = 3;
    Tensor l = random_tensor({2, h}, rng, -1.0, -0.1);
    Tensor u = add(l, random_tensor({2, h}, rng, 0.3, 1.0));
    Tensor w = random_tensor({nc, h}, rng);
    Tensor b = random_tensor({nc}, rng);
    std::vector<int> labels = {0, 2};

    auto value = [&](const Tensor& ll, const Tensor& uu, const Tensor& ww,
                     const Tensor& bb) {
      // cross-entropy on the elided worst-case logits
      double total = 0.0;
      for (std::size_t i = 0; i < 2; ++i) {
        std::size_t yt = labels[i];
        std::vector<double> z(nc, 0.0);
        for (std::size_t y = 0; y < nc; ++y) {
          if (y == yt) continue;
          double s = bb[y] - bb[yt];
          for (std::size_t j = 0; j < h; ++j) {
            double c = ww.at2(y, j) - ww.at2(yt, j);
            s += c > 0.0 ? c * uu.at2(i, j) : c * ll.at2(i, j);
          }
          z[y] = s;
        }
        double m = z[0];
        for (std::size_t j = 1; j < nc; ++j) m = std::max(m, z[j]);
        double se = 0.0;
        for (std::size_t j = 0; j < nc; ++j) se += std::exp(z[j] - m);
        total += m + std::log(se) - z[yt];
      }
      return total / 2.0;
    };

    Tape tape;
    Var lv = tape.leaf(l), uv = tape.leaf(u), wv = tape.leaf(w),
        bv = tape.leaf(b);
    Var z = tape.elided_worst_logits(lv, uv, wv, bv, labels);
    Var loss = tape.cross_entropy_mean(z, labels);
    tape.backward(loss);

    check_close(
        tape.grad(lv),
        numeric_grad([&](const Tensor& t) { return value(t, u, w, b); }, l),
        1e-6);
    check_close(
        tape.grad(uv),
        numeric_grad([&](const Tensor& t) { return value(l, t, w, b); }, u),
        1e-6);
    check_close(
        tape.grad(wv),
        numeric_grad([&](const Tensor& t) { return value(l, u, t, b); }, w),
        1e-5);
    check_close(
        tape.grad(bv),
        numeric_grad([&](const Tensor& t) { return value(l, u, w, t); }, b),
        1e-6);
  }
}

TEST_CASE("margin_max_mean routes gradient through the argmax class") {
  Tape tape;
  Tensor z = Tensor::matrix(1, 3, {1.0, 3.0, 2.0});
  Var zv = tape.leaf(z);
  Var loss = tape.margin_max_mean(zv, {0});
  CHECK(tape.value(loss)[0] == doctest::Approx(2.0));
  tape.backward(loss);
  CHECK(tape.grad(zv)[0] == -1.0);
  CHECK(tape.grad(zv)[1] == 1.0);
  CHECK(tape.grad(zv)[2] == 0.0);
}

TEST_CASE("backward requires a scalar loss") {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({1.0, 2.0}));
  CHECK_THROWS_AS(tape.backward(x), ShapeError);
}

TEST_CASE("gradient accumulates over shared subexpressions") {
  // y = x * x evaluated as mul(x, x): dy/dx = 2x
  Tape tape;
  Var x = tape.leaf(Tensor::vector({3.0}));
  Var y = tape.mul(x, x);
  Var loss = tape.matmul(tape.leaf(Tensor::matrix(1, 1, {1.0})),
                         tape.reshape(y, {1, 1}));
  tape.backward(loss);
  CHECK(tape.grad(x)[0] == 6.0);
}
