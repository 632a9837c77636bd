#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "verinet/attack.hpp"
#include "verinet/bounds.hpp"
#include "verinet/data.hpp"
#include "verinet/network.hpp"

namespace verinet {

struct ScheduleConfig {
  std::size_t total_steps = 60000;
  std::size_t warmup_steps = 2000;
  std::size_t rampup_steps = 10000;
  double kappa_final = 0.5;
  double epsilon_train = 0.0;
  double lr_initial = 1e-3;
  std::vector<std::size_t> lr_decay_steps = {15000, 25000};
  double lr_decay_factor = 0.1;

  void validate() const {
    if (warmup_steps + rampup_steps > total_steps)
      throw std::invalid_argument("schedule: warmup + rampup > total_steps");
    if (kappa_final < 0.0 || kappa_final > 1.0)
      throw std::invalid_argument("schedule: kappa_final outside [0,1]");
    if (epsilon_train < 0.0)
      throw std::invalid_argument("schedule: epsilon_train < 0");
    if (lr_initial <= 0.0)
      throw std::invalid_argument("schedule: lr_initial <= 0");
    for (std::size_t i = 1; i < lr_decay_steps.size(); ++i)
      if (lr_decay_steps[i] <= lr_decay_steps[i - 1])
        throw std::invalid_argument("schedule: decay steps must increase");
  }
};

struct SchedulePoint {
  std::size_t step = 0;
  double kappa = 1.0;
  double epsilon = 0.0;
  double learning_rate = 0.0;
};

// kappa ramps 1 -> kappa_final and epsilon ramps 0 -> epsilon_train linearly
// over [warmup, warmup + rampup]; lr decays stepwise.
inline SchedulePoint schedule_at(const ScheduleConfig& cfg, std::size_t step) {
  cfg.validate();
  if (step > cfg.total_steps)
    throw std::out_of_range("schedule_at: step out of range");
  SchedulePoint p;
  p.step = step;
  if (step <= cfg.warmup_steps) {
    p.kappa = 1.0;
    p.epsilon = 0.0;
  } else if (cfg.rampup_steps > 0 &&
             step < cfg.warmup_steps + cfg.rampup_steps) {
    double t = static_cast<double>(step - cfg.warmup_steps) /
               static_cast<double>(cfg.rampup_steps);
    p.kappa = 1.0 + (cfg.kappa_final - 1.0) * t;
    p.epsilon = cfg.epsilon_train * t;
  } else {
    p.kappa = cfg.kappa_final;
    p.epsilon = cfg.epsilon_train;
  }
  p.learning_rate = cfg.lr_initial;
  for (std::size_t d : cfg.lr_decay_steps)
    if (step >= d) p.learning_rate *= cfg.lr_decay_factor;
  return p;
}

enum class TrainMethod { Nominal, Ibp, PgdAdversarial };
enum class LossVariant { CrossEntropy, Softplus, Hinge };

inline const char* train_method_name(TrainMethod m) {
  switch (m) {
    case TrainMethod::Nominal: return "nominal";
    case TrainMethod::Ibp: return "ibp";
    case TrainMethod::PgdAdversarial: return "pgd";
  }
  return "?";
}

inline const char* loss_variant_name(LossVariant v) {
  switch (v) {
    case LossVariant::CrossEntropy: return "xent";
    case LossVariant::Softplus: return "softplus";
    case LossVariant::Hinge: return "hinge";
  }
  return "?";
}

struct TrainConfig {
  TrainMethod method = TrainMethod::Ibp;
  LossVariant loss_variant = LossVariant::CrossEntropy;
  bool use_elision = true;
  bool use_eps_schedule = true;  // ablation: off trains at full eps from step 0
  std::size_t batch_size = 100;
  std::uint64_t seed = 0;
  ScheduleConfig schedule;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_stabilizer = 1e-8;
  double hinge_offset = 1.0;
  double epsilon_scale = 1.0;   // loss eps = schedule eps * scale
  double eval_epsilon = 0.0;    // metrics verified-error radius
  bool clip_input_boxes = true;
  DomainClip input_domain{0.0, 1.0};
  std::size_t log_every = 100;
  std::size_t eval_subset = 200;
  std::size_t pgd_train_steps = 7;  // adversarial-training inner attack
  double pgd_train_adam_lr = 0.1;
  double divergence_threshold = 1e6;

  void validate() const {
    schedule.validate();
    if (method == TrainMethod::Ibp && schedule.epsilon_train <= 0.0)
      throw std::invalid_argument("ibp training requires epsilon_train > 0");
    if (batch_size == 0) throw std::invalid_argument("batch_size must be > 0");
  }
};

// Per-example loss combining nominal fit and worst-case specification terms.
// Mirrors the taped batch loss; used for reporting and unit checks.
inline double ibp_loss(const Tensor& logits, const Tensor& worst_logits,
                       int y_true, double kappa, LossVariant variant,
                       double hinge_offset = 1.0) {
  if (logits.size() != worst_logits.size())
    throw ShapeError("ibp_loss: logit length mismatch");
  std::size_t n = logits.size();
  if (y_true < 0 || static_cast<std::size_t>(y_true) >= n)
    throw std::out_of_range("ibp_loss: bad class");
  if (kappa < 0.0 || kappa > 1.0)
    throw std::invalid_argument("ibp_loss: kappa outside [0,1]");
  auto xent = [n](const Tensor& z, std::size_t y) {
    double m = z[0];
    for (std::size_t j = 1; j < n; ++j) m = std::max(m, z[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(z[j] - m);
    return m + std::log(s) - z[y];
  };
  double fit = xent(logits, static_cast<std::size_t>(y_true));
  double spec;
  switch (variant) {
    case LossVariant::CrossEntropy:
      spec = xent(worst_logits, static_cast<std::size_t>(y_true));
      break;
    default: {
      spec = 0.0;
      for (std::size_t y = 0; y < n; ++y) {
        if (y == static_cast<std::size_t>(y_true)) continue;
        double m = worst_logits[y] - worst_logits[y_true];
        spec += variant == LossVariant::Softplus
                    ? softplus_scalar(m)
                    : std::max(0.0, m + hinge_offset);
      }
      spec /= static_cast<double>(n - 1);
    }
  }
  if (kappa == 1.0) return fit;
  return kappa * fit + (1.0 - kappa) * spec;
}

struct AdamState {
  Tensor m;
  Tensor v;
  std::size_t t = 0;
};

inline void adam_step(Tensor& param, const Tensor& grad, AdamState& state,
                      double lr, double beta1 = 0.9, double beta2 = 0.999,
                      double stabilizer = 1e-8) {
  detail::require_same_shape(param, grad, "adam_step");
  if (!grad.all_finite()) throw NumericError("adam_step: non-finite gradient");
  if (state.m.size() == 0) {
    state.m = Tensor(param.shape());
    state.v = Tensor(param.shape());
  }
  state.t += 1;
  double t = static_cast<double>(state.t);
  double c1 = 1.0 - std::pow(beta1, t);
  double c2 = 1.0 - std::pow(beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grad[i];
    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grad[i] * grad[i];
    param[i] -= lr * (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) +
                                          stabilizer);
  }
}

struct StepMetrics {
  std::size_t step = 0;
  double kappa = 0.0;
  double epsilon = 0.0;
  double lr = 0.0;
  double loss = 0.0;
  double nominal_err = 0.0;
  double ibp_verified_err = 0.0;
};

struct TrainResult {
  Network net;
  std::vector<StepMetrics> metrics;
};

namespace detail {

inline Tensor batch_inputs(const Dataset& ds,
                           const std::vector<std::size_t>& idx) {
  auto es = ds.example_shape();
  std::size_t per = Tensor::count(es);
  std::vector<std::size_t> s = {idx.size()};
  s.insert(s.end(), es.begin(), es.end());
  Tensor out(s);
  for (std::size_t k = 0; k < idx.size(); ++k)
    for (std::size_t j = 0; j < per; ++j)
      out[k * per + j] = ds.inputs[idx[k] * per + j];
  return out;
}

inline double nominal_error(const Network& net, const Dataset& ds) {
  std::size_t errors = 0;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (predict(net, ds.example(i)) !=
        static_cast<std::size_t>(ds.labels[i]))
      ++errors;
  return static_cast<double>(errors) / static_cast<double>(ds.size());
}

}  // namespace detail

inline double ibp_verified_error(const Network& net, const Dataset& ds,
                                 double epsilon,
                                 std::optional<DomainClip> clip,
                                 double decision_tol = 1e-6) {
  std::size_t errors = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Tensor x = ds.example(i);
    int y = ds.labels[i];
    if (predict(net, x) != static_cast<std::size_t>(y)) {
      ++errors;
      continue;
    }
    Tensor zhat = worst_case_logits(net, x, epsilon,
                                    static_cast<std::size_t>(y), true, clip);
    bool verified = true;
    for (std::size_t c = 0; c < net.num_classes; ++c) {
      if (c == static_cast<std::size_t>(y)) continue;
      double margin = epsilon == 0.0 ? zhat[c] - zhat[y] : zhat[c];
      if (margin > decision_tol) {
        verified = false;
        break;
      }
    }
    if (!verified) ++errors;
  }
  return static_cast<double>(errors) / static_cast<double>(ds.size());
}

// Full training loop. The network must already have initialized parameters.
inline TrainResult train(Network net, const Dataset& ds,
                         const TrainConfig& cfg, Rng& rng) {
  cfg.validate();
  if (ds.size() == 0) throw std::invalid_argument("train: empty dataset");
  net.validate();

  std::vector<AdamState> wstate(net.layers.size()), bstate(net.layers.size());
  std::vector<std::size_t> order(ds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  std::size_t cursor = 0;

  Dataset eval_slice = ds.head(std::min(cfg.eval_subset, ds.size()));
  std::optional<DomainClip> clip;
  if (cfg.clip_input_boxes) clip = cfg.input_domain;

  TrainResult result;

  for (std::size_t step = 0; step < cfg.schedule.total_steps; ++step) {
    SchedulePoint sched = schedule_at(cfg.schedule, step);
    double loss_eps = cfg.use_eps_schedule
                          ? sched.epsilon * cfg.epsilon_scale
                          : cfg.schedule.epsilon_train * cfg.epsilon_scale;

    // assemble batch, reshuffling at epoch boundaries
    std::vector<std::size_t> idx;
    idx.reserve(cfg.batch_size);
    for (std::size_t k = 0; k < std::min(cfg.batch_size, ds.size()); ++k) {
      if (cursor == order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    Tensor xb = detail::batch_inputs(ds, idx);
    std::vector<int> labels;
    labels.reserve(idx.size());
    for (std::size_t i : idx) labels.push_back(ds.labels[i]);

    if (cfg.method == TrainMethod::PgdAdversarial && loss_eps > 0.0) {
      AttackConfig ac;
      ac.epsilon = loss_eps;
      ac.steps = cfg.pgd_train_steps;
      ac.restarts = 1;
      ac.step_rule = AttackStepRule::Adam;
      ac.adam_lr = cfg.pgd_train_adam_lr;
      ac.domain_clip = clip;
      auto es = ds.example_shape();
      std::size_t per = Tensor::count(es);
      for (std::size_t k = 0; k < idx.size(); ++k) {
        Tensor x(es);
        for (std::size_t j = 0; j < per; ++j) x[j] = xb[k * per + j];
        ac.seed = cfg.seed ^ (0x9e3779b97f4a7c15ull * (step * 1000 + k + 1));
        AttackResult ar = pgd_attack(net, x, labels[k], ac);
        for (std::size_t j = 0; j < per; ++j) xb[k * per + j] = ar.x_adv[j];
      }
    }

    ad::Tape tape;
    ad::TapedNet tnet = ad::TapedNet::record(tape, net);
    ad::Var xv = tape.leaf(xb);
    ad::Var logits = tnet.forward(tape, xv);
    ad::Var fit = tape.cross_entropy_mean(logits, labels);
    ad::Var loss = fit;

    if (cfg.method == TrainMethod::Ibp && loss_eps > 0.0) {
      Tensor lo = xb, hi = xb;
      for (std::size_t i = 0; i < xb.size(); ++i) {
        lo[i] -= loss_eps;
        hi[i] += loss_eps;
        if (clip) {
          lo[i] = std::max(lo[i], clip->lo);
          hi[i] = std::min(hi[i], clip->hi);
        }
      }
      ad::Var lv = tape.leaf(lo);
      ad::Var uv = tape.leaf(hi);
      std::size_t upto = net.layers.size() - (cfg.use_elision ? 1 : 0);
      auto [bl, bu] = tnet.propagate_bounds(tape, lv, uv, upto);
      ad::Var zhat =
          cfg.use_elision
              ? tape.elided_worst_logits(bl, bu,
                                         tnet.weights[net.layers.size() - 1],
                                         tnet.biases[net.layers.size() - 1],
                                         labels)
              : tape.worst_logits(bl, bu, labels);
      ad::Var spec =
          cfg.loss_variant == LossVariant::CrossEntropy
              ? tape.cross_entropy_mean(zhat, labels)
              : (cfg.loss_variant == LossVariant::Softplus
                     ? tape.spec_softplus_mean(zhat, labels)
                     : tape.spec_hinge_mean(zhat, labels, cfg.hinge_offset));
      loss = tape.add(tape.scale(fit, sched.kappa),
                      tape.scale(spec, 1.0 - sched.kappa));
    }

    double loss_value = tape.value(loss)[0];
    if (!std::isfinite(loss_value) || loss_value > cfg.divergence_threshold)
      throw NumericError("training diverged at step " + std::to_string(step) +
                         ": loss=" + std::to_string(loss_value));

    tape.backward(loss);
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
      if (!net.layers[i].has_params()) continue;
      adam_step(net.layers[i].weight, tape.grad(tnet.weights[i]), wstate[i],
                sched.learning_rate, cfg.adam_beta1, cfg.adam_beta2,
                cfg.adam_stabilizer);
      adam_step(net.layers[i].bias, tape.grad(tnet.biases[i]), bstate[i],
                sched.learning_rate, cfg.adam_beta1, cfg.adam_beta2,
                cfg.adam_stabilizer);
    }

    if (step % cfg.log_every == 0 || step + 1 == cfg.schedule.total_steps) {
      StepMetrics m;
      m.step = step;
      m.kappa = sched.kappa;
      m.epsilon = loss_eps;
      m.lr = sched.learning_rate;
      m.loss = loss_value;
      m.nominal_err = detail::nominal_error(net, eval_slice);
      m.ibp_verified_err =
          ibp_verified_error(net, eval_slice, cfg.eval_epsilon, clip);
      result.metrics.push_back(m);
    }
  }

  result.net = std::move(net);
  return result;
}

}  // namespace verinet
