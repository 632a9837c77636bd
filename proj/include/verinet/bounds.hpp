#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "verinet/network.hpp"
#include "verinet/tensor.hpp"

namespace verinet {

// Axis-aligned box over one layer's activations.
struct IntervalBounds {
  Tensor lower;
  Tensor upper;

  IntervalBounds() = default;
  IntervalBounds(Tensor l, Tensor u) : lower(std::move(l)), upper(std::move(u)) {
    detail::require_same_shape(lower, upper, "IntervalBounds");
    for (std::size_t i = 0; i < lower.size(); ++i)
      if (lower[i] > upper[i])
        throw NumericError("interval bounds: lower > upper");
    lower.check_finite("IntervalBounds lower");
    upper.check_finite("IntervalBounds upper");
  }

  static IntervalBounds point(const Tensor& x) { return {x, x}; }

  Tensor center() const { return scale(add(upper, lower), 0.5); }
  Tensor radius() const { return scale(sub(upper, lower), 0.5); }

  bool contains(const Tensor& x, double slack = 0.0) const {
    detail::require_same_shape(lower, x, "contains");
    for (std::size_t i = 0; i < x.size(); ++i)
      if (x[i] < lower[i] - slack || x[i] > upper[i] + slack) return false;
    return true;
  }
};

// Linear constraint c^T z + d over some layer's activations.
struct LinearSpecification {
  Tensor c;
  double d = 0.0;

  static LinearSpecification class_margin(std::size_t num_classes,
                                          std::size_t y, std::size_t y_true) {
    if (y >= num_classes || y_true >= num_classes || y == y_true)
      throw std::out_of_range("class_margin: bad class pair");
    Tensor c({num_classes});
    c[y] = 1.0;
    c[y_true] = -1.0;
    return {c, 0.0};
  }
};

struct DomainClip {
  double lo;
  double hi;
};

// [x0 - eps, x0 + eps], optionally intersected with a data-domain interval.
inline IntervalBounds input_box(const Tensor& x0, double epsilon,
                                std::optional<DomainClip> clip = {}) {
  if (epsilon < 0.0) throw std::invalid_argument("input_box: epsilon < 0");
  Tensor lo(x0.shape()), hi(x0.shape());
  for (std::size_t i = 0; i < x0.size(); ++i) {
    double l = x0[i] - epsilon, u = x0[i] + epsilon;
    if (clip) {
      l = std::max(l, clip->lo);
      u = std::min(u, clip->hi);
      if (l > u) throw NumericError("input_box: empty domain intersection");
    }
    lo[i] = l;
    hi[i] = u;
  }
  return {std::move(lo), std::move(hi)};
}

// Affine propagation in center/radius form: mu' = W mu + b, r' = |W| r.
inline IntervalBounds affine_interval(const Layer& layer,
                                      const IntervalBounds& in) {
  if (!layer.has_params())
    throw std::invalid_argument("affine_interval: layer is not affine");
  Tensor mu = in.center();
  Tensor r = in.radius();
  Tensor mu_out, r_out;
  if (layer.kind == Layer::Kind::Linear) {
    Tensor mu2 = mu.rank() == 2 ? mu : mu.reshaped({1, mu.size()});
    Tensor r2 = r.rank() == 2 ? r : r.reshaped({1, r.size()});
    mu_out = matmul_nt(mu2, layer.weight);
    for (std::size_t j = 0; j < layer.bias.size(); ++j)
      mu_out[j] += layer.bias[j];
    r_out = matmul_nt(r2, abs(layer.weight));
    mu_out = mu_out.reshaped({layer.weight.extent(0)});
    r_out = r_out.reshaped({layer.weight.extent(0)});
  } else {
    Tensor zero_bias({layer.weight.extent(0)});
    mu_out = conv2d(detail::with_batch_axis(mu), layer.weight, layer.bias,
                    layer.stride, layer.padding);
    r_out = conv2d(detail::with_batch_axis(r), abs(layer.weight), zero_bias,
                   layer.stride, layer.padding);
    std::vector<std::size_t> s(mu_out.shape().begin() + 1,
                               mu_out.shape().end());
    mu_out = mu_out.reshaped(s);
    r_out = r_out.reshaped(s);
  }
  return {sub(mu_out, r_out), add(mu_out, r_out)};
}

// Monotone activations map endpoints directly.
inline IntervalBounds activation_interval(ActivationFn fn,
                                          const IntervalBounds& in) {
  return {detail::apply_activation(fn, in.lower),
          detail::apply_activation(fn, in.upper)};
}

// Bounds for each layer 1..K (or 1..K-1 with stop_before_last, for use with
// elided specifications). Input bounds are per-example (no batch axis).
inline std::vector<IntervalBounds> propagate(const Network& net,
                                             const IntervalBounds& in,
                                             bool stop_before_last = false) {
  if (in.lower.shape() != net.input_shape)
    throw ShapeError("propagate: input shape mismatch");
  std::size_t upto = net.layers.size() - (stop_before_last ? 1 : 0);
  std::vector<IntervalBounds> out;
  out.reserve(upto);
  IntervalBounds cur = in;
  for (std::size_t i = 0; i < upto; ++i) {
    const Layer& l = net.layers[i];
    switch (l.kind) {
      case Layer::Kind::Linear:
      case Layer::Kind::Conv2D:
        cur = affine_interval(l, cur);
        break;
      case Layer::Kind::Activation:
        cur = activation_interval(l.activation_fn, cur);
        break;
      case Layer::Kind::Flatten:
        cur = IntervalBounds(cur.lower.reshaped({cur.lower.size()}),
                             cur.upper.reshaped({cur.upper.size()}));
        break;
    }
    out.push_back(cur);
  }
  return out;
}

// Fold the final linear layer into the specification: c' = W^T c,
// d' = c^T b + d.
inline LinearSpecification elide(const Layer& last,
                                 const LinearSpecification& spec) {
  if (last.kind != Layer::Kind::Linear)
    throw std::invalid_argument("elide: last layer must be linear");
  if (spec.c.size() != last.weight.extent(0))
    throw ShapeError("elide: spec length mismatch");
  std::size_t out_n = last.weight.extent(0), in_n = last.weight.extent(1);
  Tensor c2({in_n});
  double d2 = spec.d;
  for (std::size_t i = 0; i < out_n; ++i) {
    d2 += spec.c[i] * last.bias[i];
    for (std::size_t j = 0; j < in_n; ++j)
      c2[j] += last.weight.at2(i, j) * spec.c[i];
  }
  return {std::move(c2), d2};
}

// max of c^T z + d over the box: positive coefficients take the upper
// endpoint, negative ones the lower.
inline double spec_upper_bound(const IntervalBounds& bounds,
                               const LinearSpecification& spec) {
  if (spec.c.size() != bounds.lower.size())
    throw ShapeError("spec_upper_bound: length mismatch");
  double s = spec.d;
  for (std::size_t i = 0; i < spec.c.size(); ++i)
    s += spec.c[i] > 0.0 ? spec.c[i] * bounds.upper[i]
                         : spec.c[i] * bounds.lower[i];
  return s;
}

// Worst-case logits zhat(eps). Without elision this is Eq.-style endpoint
// selection on the output box; with elision each class margin is bounded at
// the penultimate layer and the true class entry is pinned to 0 (softmax
// cross-entropy is shift-invariant). epsilon == 0 short-circuits to the
// nominal forward pass so the two code paths agree bitwise.
inline Tensor worst_case_logits(const Network& net, const Tensor& x0,
                                double epsilon, std::size_t y_true,
                                bool use_elision,
                                std::optional<DomainClip> clip = {}) {
  if (y_true >= net.num_classes)
    throw std::out_of_range("worst_case_logits: bad class index");
  if (epsilon == 0.0) return forward(net, x0);
  IntervalBounds in = input_box(x0, epsilon, clip);
  if (!use_elision) {
    auto bounds = propagate(net, in, false);
    const IntervalBounds& out = bounds.back();
    Tensor zhat = out.upper;
    zhat[y_true] = out.lower[y_true];
    return zhat;
  }
  auto bounds = propagate(net, in, true);
  const IntervalBounds& pen = bounds.empty() ? in : bounds.back();
  const Layer& last = net.layers.back();
  Tensor zhat({net.num_classes});
  for (std::size_t y = 0; y < net.num_classes; ++y) {
    if (y == y_true) continue;
    auto spec = elide(last,
                      LinearSpecification::class_margin(net.num_classes, y,
                                                        y_true));
    zhat[y] = spec_upper_bound(pen, spec);
  }
  return zhat;
}

}  // namespace verinet
