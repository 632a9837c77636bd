#pragma once

#include <array>
#include <chrono>
#include <deque>
#include <optional>
#include <queue>
#include <vector>

#include "verinet/attack.hpp"
#include "verinet/bounds.hpp"
#include "verinet/network.hpp"

namespace verinet {

enum class VerificationStatus { Verified, Falsified, Unknown };

inline const char* status_name(VerificationStatus s) {
  switch (s) {
    case VerificationStatus::Verified: return "verified";
    case VerificationStatus::Falsified: return "falsified";
    case VerificationStatus::Unknown: return "unknown";
  }
  return "?";
}

struct VerificationOutcome {
  VerificationStatus status = VerificationStatus::Unknown;
  std::optional<Tensor> counterexample;
  double best_upper_bound = std::numeric_limits<double>::infinity();
  double best_lower_bound = -std::numeric_limits<double>::infinity();
  std::size_t nodes_explored = 0;
  double wall_time_s = 0.0;
};

struct BabConfig {
  std::size_t max_nodes = 20000;
  double time_budget_s = 60.0;
  double min_box_width = 1e-4;   // delta_split
  double decision_tol = 1e-6;    // delta_tol
  double gap_tol = 0.0;          // > 0: keep splitting until the bound bracket closes
  std::size_t attack_steps = 20;
  std::size_t attack_restarts = 1;
  std::uint64_t seed = 0;

  void validate() const {
    if (min_box_width <= 0.0 || decision_tol <= 0.0)
      throw std::invalid_argument("bab config: tolerances must be positive");
  }
};

struct IbpCheck {
  bool verified = false;
  Tensor margins;        // per-class bound on z_y - z_ytrue (0 at y_true)
  double worst_margin = 0.0;
};

// Upper bound on max_{y != y_true} (z_y - z_ytrue) over an input box, with
// the last layer elided into each class specification.
inline Tensor ibp_class_margins(const Network& net, const IntervalBounds& box,
                                std::size_t y_true, bool use_elision = true) {
  Tensor margins({net.num_classes});
  if (use_elision) {
    auto bounds = propagate(net, box, true);
    const IntervalBounds& pen = bounds.empty() ? box : bounds.back();
    const Layer& last = net.layers.back();
    for (std::size_t y = 0; y < net.num_classes; ++y) {
      if (y == y_true) continue;
      auto spec = elide(
          last, LinearSpecification::class_margin(net.num_classes, y, y_true));
      margins[y] = spec_upper_bound(pen, spec);
    }
  } else {
    auto bounds = propagate(net, box, false);
    const IntervalBounds& out = bounds.back();
    for (std::size_t y = 0; y < net.num_classes; ++y)
      if (y != y_true) margins[y] = out.upper[y] - out.lower[y_true];
  }
  return margins;
}

inline IbpCheck ibp_verified(const Network& net, const Tensor& x0,
                             std::size_t y_true, double epsilon,
                             bool use_elision = true,
                             std::optional<DomainClip> clip = DomainClip{0.0,
                                                                        1.0},
                             double decision_tol = 1e-6) {
  if (y_true >= net.num_classes)
    throw std::out_of_range("ibp_verified: bad class");
  IbpCheck res;
  if (predict(net, x0) != y_true) {
    res.verified = false;
    res.margins = Tensor({net.num_classes});
    res.worst_margin = std::numeric_limits<double>::infinity();
    return res;
  }
  IntervalBounds box = input_box(x0, epsilon, clip);
  res.margins = ibp_class_margins(net, box, y_true, use_elision);
  res.worst_margin = -std::numeric_limits<double>::infinity();
  for (std::size_t y = 0; y < net.num_classes; ++y)
    if (y != y_true) res.worst_margin = std::max(res.worst_margin, res.margins[y]);
  res.verified = res.worst_margin <= decision_tol;
  return res;
}

namespace detail {

inline double concrete_margin(const Network& net, const Tensor& x,
                              std::size_t y_true) {
  Tensor z = forward(net, x);
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t y = 0; y < z.size(); ++y)
    if (y != y_true) m = std::max(m, z[y] - z[y_true]);
  return m;
}

}  // namespace detail

// Input-splitting branch-and-bound over the epsilon-box: prune sub-boxes
// whose IBP margin bound certifies safety, hunt for concrete
// counterexamples at box centers and with short PGD runs, and split the
// widest coordinate otherwise. `witness_hint`, when given, is checked first
// (e.g. a counterexample already found by a full-strength attack).
inline VerificationOutcome bab_verify(
    const Network& net, const Tensor& x0, std::size_t y_true, double epsilon,
    const BabConfig& cfg,
    std::optional<DomainClip> clip = DomainClip{0.0, 1.0},
    std::optional<Tensor> witness_hint = {}) {
  cfg.validate();
  if (!net.relu_only())
    throw std::invalid_argument("bab_verify: only ReLU networks supported");
  if (y_true >= net.num_classes)
    throw std::out_of_range("bab_verify: bad class");
  auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&t0] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
        .count();
  };

  VerificationOutcome out;
  out.best_lower_bound = -std::numeric_limits<double>::infinity();

  auto finish = [&](VerificationStatus st) {
    out.status = st;
    out.wall_time_s = elapsed();
    return out;
  };

  auto try_point = [&](const Tensor& x) {
    double m = detail::concrete_margin(net, x, y_true);
    if (m > out.best_lower_bound) out.best_lower_bound = m;
    if (m > 0.0 && !out.counterexample) out.counterexample = x;
    return m > 0.0;
  };

  // nominal misclassification is the trivial counterexample
  if (try_point(x0)) {
    out.best_upper_bound = out.best_lower_bound;
    return finish(VerificationStatus::Falsified);
  }
  if (witness_hint) {
    IntervalBounds root = input_box(x0, epsilon, clip);
    if (root.contains(*witness_hint, 1e-12) && try_point(*witness_hint)) {
      out.best_upper_bound =
          std::max(out.best_upper_bound, out.best_lower_bound);
      return finish(VerificationStatus::Falsified);
    }
  }

  struct Node {
    IntervalBounds box;
    double upper;
    std::size_t id;
  };
  struct NodeOrder {
    bool operator()(const Node& a, const Node& b) const {
      if (a.upper != b.upper) return a.upper < b.upper;  // max-heap on bound
      return a.id > b.id;  // older node first on ties
    }
  };
  std::priority_queue<Node, std::vector<Node>, NodeOrder> queue;

  auto bound_of = [&](const IntervalBounds& box) {
    Tensor margins = ibp_class_margins(net, box, y_true, true);
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t y = 0; y < net.num_classes; ++y)
      if (y != y_true) m = std::max(m, margins[y]);
    return m;
  };

  IntervalBounds root = input_box(x0, epsilon, clip);
  std::size_t next_id = 0;
  double pruned_max = -std::numeric_limits<double>::infinity();
  bool any_unresolved = false;
  queue.push({root, bound_of(root), next_id++});

  AttackConfig ac;
  ac.steps = cfg.attack_steps;
  ac.restarts = cfg.attack_restarts;
  ac.loss = AttackLoss::Margin;
  ac.domain_clip = {};  // the node box already encodes the domain

  while (!queue.empty()) {
    if (out.nodes_explored >= cfg.max_nodes || elapsed() > cfg.time_budget_s) {
      // remaining nodes still carry valid bounds
      double rest = queue.top().upper;
      out.best_upper_bound = std::max(pruned_max, rest);
      return finish(VerificationStatus::Unknown);
    }
    Node node = queue.top();
    queue.pop();
    ++out.nodes_explored;

    // In gap-bracketing mode safe nodes keep refining until the bound
    // bracket closes; otherwise the decision slack prunes them immediately.
    if (cfg.gap_tol <= 0.0 && node.upper <= cfg.decision_tol) {
      pruned_max = std::max(pruned_max, node.upper);
      continue;
    }
    if (cfg.gap_tol > 0.0 &&
        node.upper <= out.best_lower_bound + cfg.gap_tol) {
      pruned_max = std::max(pruned_max, node.upper);
      continue;
    }

    // concrete search inside this node
    Tensor center = node.box.center();
    if (try_point(center)) {
      out.best_upper_bound = std::max(node.upper, out.best_lower_bound);
      return finish(VerificationStatus::Falsified);
    }
    if (cfg.attack_steps > 0) {
      ac.epsilon = 1.0;  // unused by pgd_attack_box
      ac.seed = cfg.seed + node.id;
      Tensor widths = sub(node.box.upper, node.box.lower);
      Tensor step = scale(widths, 1.0 / static_cast<double>(cfg.attack_steps));
      AttackResult ar = pgd_attack_box(net, node.box, center,
                                       static_cast<int>(y_true), ac, step);
      if (try_point(ar.x_adv)) {
        out.best_upper_bound = std::max(node.upper, out.best_lower_bound);
        return finish(VerificationStatus::Falsified);
      }
    }

    // split widest coordinate, lowest index on ties
    std::size_t axis = 0;
    double width = 0.0;
    for (std::size_t i = 0; i < node.box.lower.size(); ++i) {
      double w = node.box.upper[i] - node.box.lower[i];
      if (w > width) {
        width = w;
        axis = i;
      }
    }
    if (width <= cfg.min_box_width) {
      any_unresolved = true;
      pruned_max = std::max(pruned_max, node.upper);
      continue;
    }
    double mid = 0.5 * (node.box.lower[axis] + node.box.upper[axis]);
    Tensor lo1 = node.box.lower, hi1 = node.box.upper;
    Tensor lo2 = node.box.lower, hi2 = node.box.upper;
    hi1[axis] = mid;
    lo2[axis] = mid;
    IntervalBounds child1(std::move(lo1), std::move(hi1));
    IntervalBounds child2(std::move(lo2), std::move(hi2));
    queue.push({child1, std::min(node.upper, bound_of(child1)), next_id++});
    queue.push({child2, std::min(node.upper, bound_of(child2)), next_id++});
  }

  out.best_upper_bound = pruned_max;
  if (any_unresolved && pruned_max > cfg.decision_tol)
    return finish(VerificationStatus::Unknown);
  if (cfg.gap_tol > 0.0 && pruned_max > cfg.decision_tol)
    return finish(VerificationStatus::Unknown);  // bracketed but undecided
  return finish(VerificationStatus::Verified);
}

struct VerifiedErrorRates {
  double ibp_rate = 0.0;
  double bab_rate = 0.0;
  double pgd_rate = 0.0;
};

struct ExampleVerification {
  std::size_t index = 0;
  VerificationStatus bab_status = VerificationStatus::Unknown;
  bool ibp_ok = false;
  bool pgd_ok = false;  // attack failed (example counts as robust)
  double ibp_margin = 0.0;
  double bab_upper = 0.0;
  double bab_lower = 0.0;
  std::size_t nodes = 0;
  double time_ms = 0.0;
};

struct VerifiedErrorReport {
  VerifiedErrorRates rates;
  std::vector<ExampleVerification> examples;
};

// Three error rates with the guaranteed sandwich pgd <= bab <= ibp:
// PGD counterexamples are replayed into the branch-and-bound as witness
// hints, and IBP-verified examples prune at the BaB root.
inline VerifiedErrorReport verified_error(
    const Network& net, const Dataset& ds, double epsilon,
    const BabConfig& bab_cfg, const AttackConfig& attack_cfg,
    std::optional<DomainClip> clip = DomainClip{0.0, 1.0}) {
  if (ds.size() == 0) throw std::invalid_argument("verified_error: empty dataset");
  VerifiedErrorReport rep;
  std::size_t ibp_err = 0, bab_err = 0, pgd_err = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Tensor x = ds.example(i);
    auto y = static_cast<std::size_t>(ds.labels[i]);
    ExampleVerification ev;
    ev.index = i;

    bool nominal_ok = predict(net, x) == y;
    std::optional<Tensor> witness;
    if (!nominal_ok) {
      ev.pgd_ok = false;
      ev.ibp_ok = false;
      ev.bab_status = VerificationStatus::Falsified;
      witness = x;
    } else {
      AttackConfig ac = attack_cfg;
      ac.epsilon = epsilon;
      ac.domain_clip = clip;
      ac.seed = attack_cfg.seed + i;
      AttackResult ar = pgd_attack(net, x, static_cast<int>(y), ac);
      ev.pgd_ok = !ar.success;
      if (ar.success) witness = ar.x_adv;

      IbpCheck ic = ibp_verified(net, x, y, epsilon, true, clip,
                                 bab_cfg.decision_tol);
      ev.ibp_ok = ic.verified;
      ev.ibp_margin = ic.worst_margin;

      BabConfig bc = bab_cfg;
      bc.seed = bab_cfg.seed + i;
      VerificationOutcome vo =
          bab_verify(net, x, y, epsilon, bc, clip, witness);
      ev.bab_status = vo.status;
      ev.bab_upper = vo.best_upper_bound;
      ev.bab_lower = vo.best_lower_bound;
      ev.nodes = vo.nodes_explored;
      ev.time_ms = vo.wall_time_s * 1000.0;
    }

    if (!ev.ibp_ok) ++ibp_err;
    if (ev.bab_status != VerificationStatus::Verified) ++bab_err;
    if (!ev.pgd_ok) ++pgd_err;
    rep.examples.push_back(ev);
  }
  double n = static_cast<double>(ds.size());
  rep.rates.ibp_rate = ibp_err / n;
  rep.rates.bab_rate = bab_err / n;
  rep.rates.pgd_rate = pgd_err / n;
  return rep;
}

struct PolytopeSample {
  std::vector<std::array<double, 2>> points;
  IntervalBounds box;  // 2-D box at the sampled layer
};

// Dense grid over a 2-D input box mapped through the network to a 2-D layer,
// together with that layer's interval bounds.
inline PolytopeSample polytope_sample(const Network& net, const Tensor& x0,
                                      double epsilon,
                                      std::size_t samples_per_axis,
                                      std::size_t layer_index,
                                      std::optional<DomainClip> clip = {}) {
  if (net.input_shape != std::vector<std::size_t>{2})
    throw std::invalid_argument("polytope_sample: needs a 2-D input network");
  auto shapes = net.layer_output_shapes();
  if (layer_index >= net.layers.size())
    throw std::out_of_range("polytope_sample: bad layer index");
  if (Tensor::count(shapes[layer_index]) != 2)
    throw std::invalid_argument("polytope_sample: layer output must be 2-D");
  if (samples_per_axis < 1)
    throw std::invalid_argument("polytope_sample: samples_per_axis >= 1");

  IntervalBounds box = input_box(x0, epsilon, clip);
  auto bounds = propagate(net, box, false);

  auto layer_value = [&](const Tensor& x) {
    Tensor z = x;
    std::size_t batch = 1;
    Tensor zb = detail::with_batch_axis(z);
    for (std::size_t i = 0; i <= layer_index; ++i) {
      const Layer& l = net.layers[i];
      switch (l.kind) {
        case Layer::Kind::Linear: {
          if (zb.rank() != 2) zb = zb.reshaped({batch, zb.size()});
          Tensor o = matmul_nt(zb, l.weight);
          for (std::size_t j = 0; j < l.bias.size(); ++j) o[j] += l.bias[j];
          zb = o;
          break;
        }
        case Layer::Kind::Conv2D:
          zb = conv2d(zb, l.weight, l.bias, l.stride, l.padding);
          break;
        case Layer::Kind::Activation:
          zb = detail::apply_activation(l.activation_fn, zb);
          break;
        case Layer::Kind::Flatten:
          zb = zb.reshaped({batch, zb.size()});
          break;
      }
    }
    return zb;
  };

  PolytopeSample out;
  out.box = IntervalBounds(
      bounds[layer_index].lower.reshaped({2}),
      bounds[layer_index].upper.reshaped({2}));
  std::size_t n = samples_per_axis;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      Tensor x({2});
      x[0] = n == 1 ? box.lower[0]
                    : box.lower[0] + (box.upper[0] - box.lower[0]) *
                                         static_cast<double>(i) /
                                         static_cast<double>(n - 1);
      x[1] = n == 1 ? box.lower[1]
                    : box.lower[1] + (box.upper[1] - box.lower[1]) *
                                         static_cast<double>(j) /
                                         static_cast<double>(n - 1);
      Tensor z = layer_value(x);
      out.points.push_back({z[0], z[1]});
    }
  return out;
}

struct GapHuntFinding {
  std::size_t index = 0;
  double pgd_best_loss = 0.0;
  Tensor counterexample;
};

// Examples where the configured PGD attack fails but branch-and-bound still
// finds a concrete counterexample.
inline std::vector<GapHuntFinding> pgd_gap_hunt(
    const Network& net, const Dataset& ds, double epsilon,
    const AttackConfig& attack_cfg, const BabConfig& bab_cfg,
    std::optional<DomainClip> clip = DomainClip{0.0, 1.0}) {
  std::vector<GapHuntFinding> findings;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Tensor x = ds.example(i);
    auto y = static_cast<std::size_t>(ds.labels[i]);
    if (predict(net, x) != y) continue;
    AttackConfig ac = attack_cfg;
    ac.epsilon = epsilon;
    ac.domain_clip = clip;
    ac.seed = attack_cfg.seed + i;
    AttackResult ar = pgd_attack(net, x, static_cast<int>(y), ac);
    if (ar.success) continue;
    BabConfig bc = bab_cfg;
    bc.seed = bab_cfg.seed + i;
    VerificationOutcome vo = bab_verify(net, x, y, epsilon, bc, clip);
    if (vo.status == VerificationStatus::Falsified && vo.counterexample) {
      // replay before reporting
      if (predict(net, *vo.counterexample) == y)
        throw NumericError("pgd_gap_hunt: counterexample does not replay");
      findings.push_back({i, ar.loss, *vo.counterexample});
    }
  }
  return findings;
}

}  // namespace verinet
