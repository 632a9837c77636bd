#pragma once

#include <optional>
#include <vector>

#include "verinet/bounds.hpp"
#include "verinet/network.hpp"
#include "verinet/tensor.hpp"

namespace verinet {

enum class AttackLoss { CrossEntropyAscent, Margin };
enum class AttackStepRule { SignedGradient, Adam };

struct AttackConfig {
  double epsilon = 0.0;
  std::size_t steps = 200;
  std::size_t restarts = 10;
  AttackStepRule step_rule = AttackStepRule::SignedGradient;
  AttackLoss loss = AttackLoss::CrossEntropyAscent;
  double adam_lr = 0.1;  // used by the Adam step rule (training variant)
  std::optional<DomainClip> domain_clip = DomainClip{0.0, 1.0};
  std::uint64_t seed = 0;

  void validate() const {
    if (steps < 1 || restarts < 1 || epsilon < 0.0)
      throw std::invalid_argument("attack config: steps/restarts >= 1, eps >= 0");
  }
};

struct AttackResult {
  Tensor x_adv;
  bool success = false;
  double loss = 0.0;
  double linf_distance = 0.0;
};

namespace detail {

struct AttackGrad {
  double loss;
  Tensor grad;
};

inline AttackGrad attack_loss_grad(const Network& net, const Tensor& x,
                                   int y_true, AttackLoss loss_kind) {
  ad::Tape tape;
  ad::TapedNet tnet = ad::TapedNet::record(tape, net);
  ad::Var xv = tape.leaf(with_batch_axis(x));
  ad::Var logits = tnet.forward(tape, xv);
  std::vector<int> labels = {y_true};
  ad::Var loss = loss_kind == AttackLoss::CrossEntropyAscent
                     ? tape.cross_entropy_mean(logits, labels)
                     : tape.margin_max_mean(logits, labels);
  tape.backward(loss);
  return {tape.value(loss)[0], tape.grad(xv).reshaped(x.shape())};
}

}  // namespace detail

// PGD loss ascent inside an arbitrary input box. Restart 0 starts from
// `start` (projected into the box); further restarts draw uniformly from the
// box. Returns the highest-loss iterate visited; ties keep the earliest.
inline AttackResult pgd_attack_box(const Network& net,
                                   const IntervalBounds& box,
                                   const Tensor& start, int y_true,
                                   const AttackConfig& cfg,
                                   const Tensor& step_sizes) {
  cfg.validate();
  Rng rng(cfg.seed);
  Tensor best_x = start;
  double best_loss = -std::numeric_limits<double>::infinity();

  auto project = [&box](Tensor& x) {
    for (std::size_t i = 0; i < x.size(); ++i)
      x[i] = std::clamp(x[i], box.lower[i], box.upper[i]);
  };

  auto consider = [&](const Tensor& x, double loss) {
    if (loss > best_loss) {
      best_loss = loss;
      best_x = x;
    }
  };

  for (std::size_t restart = 0; restart < cfg.restarts; ++restart) {
    Tensor x = start;
    if (restart > 0)
      for (std::size_t i = 0; i < x.size(); ++i)
        x[i] = rng.uniform(box.lower[i], box.upper[i]);
    project(x);

    Tensor m(x.shape()), v(x.shape());  // Adam moments
    for (std::size_t step = 0; step < cfg.steps; ++step) {
      auto lg = detail::attack_loss_grad(net, x, y_true, cfg.loss);
      consider(x, lg.loss);
      if (cfg.step_rule == AttackStepRule::SignedGradient) {
        for (std::size_t i = 0; i < x.size(); ++i) {
          double g = lg.grad[i];
          double s = g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
          x[i] += step_sizes[step_sizes.size() == 1 ? 0 : i] * s;
        }
      } else {
        double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        double t = static_cast<double>(step + 1);
        for (std::size_t i = 0; i < x.size(); ++i) {
          m[i] = b1 * m[i] + (1.0 - b1) * lg.grad[i];
          v[i] = b2 * v[i] + (1.0 - b2) * lg.grad[i] * lg.grad[i];
          double mh = m[i] / (1.0 - std::pow(b1, t));
          double vh = v[i] / (1.0 - std::pow(b2, t));
          x[i] += cfg.adam_lr * mh / (std::sqrt(vh) + eps);  // ascent
        }
      }
      project(x);
    }
    auto lg = detail::attack_loss_grad(net, x, y_true, cfg.loss);
    consider(x, lg.loss);
  }

  AttackResult res;
  res.x_adv = best_x;
  res.loss = best_loss;
  res.linf_distance = linf_distance(best_x, start);
  res.success = predict(net, best_x) != static_cast<std::size_t>(y_true);
  return res;
}

// Untargeted PGD in the epsilon-ball around x0, intersected with the data
// domain. Step size 2*eps/steps with signed-gradient steps (evaluation rule).
inline AttackResult pgd_attack(const Network& net, const Tensor& x0,
                               int y_true, const AttackConfig& cfg) {
  cfg.validate();
  if (cfg.epsilon == 0.0) {
    AttackResult res;
    res.x_adv = x0;
    res.loss = detail::attack_loss_grad(net, x0, y_true, cfg.loss).loss;
    res.linf_distance = 0.0;
    res.success = predict(net, x0) != static_cast<std::size_t>(y_true);
    return res;
  }
  IntervalBounds box = input_box(x0, cfg.epsilon, cfg.domain_clip);
  Tensor step = Tensor::scalar(2.0 * cfg.epsilon /
                               static_cast<double>(cfg.steps));
  AttackResult res = pgd_attack_box(net, box, x0, y_true, cfg, step);
  // projection postconditions
  if (res.linf_distance > cfg.epsilon + 1e-12)
    throw NumericError("pgd_attack: projection violated");
  return res;
}

// Fraction of examples misclassified nominally or attacked successfully.
template <typename DatasetT>
inline double empirical_error(const Network& net, const DatasetT& ds,
                              const AttackConfig& cfg) {
  if (ds.size() == 0) throw std::invalid_argument("empirical_error: empty dataset");
  std::size_t errors = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Tensor x = ds.example(i);
    int y = ds.labels[i];
    if (predict(net, x) != static_cast<std::size_t>(y)) {
      ++errors;
      continue;
    }
    AttackConfig c = cfg;
    c.seed = cfg.seed + i;  // per-example stream, deterministic
    if (pgd_attack(net, x, y, c).success) ++errors;
  }
  return static_cast<double>(errors) / static_cast<double>(ds.size());
}

}  // namespace verinet
