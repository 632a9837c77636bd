// verinet command-line tool: train / eval / attack / verify / tightness /
// polytope / hunt / export over toy and IDX datasets.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "verinet/attack.hpp"
#include "verinet/bounds.hpp"
#include "verinet/data.hpp"
#include "verinet/network.hpp"
#include "verinet/serialize.hpp"
#include "verinet/training.hpp"
#include "verinet/verify.hpp"

namespace fs = std::filesystem;
using verinet::json;

namespace {

struct CliError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Every key a config document may carry; anything else is a typo.
const std::set<std::string>& allowed_keys() {
  static const std::set<std::string> keys = {
      "dataset",        "arch",           "seed",
      "out",            "epsilon",        "method",
      "loss",           "elision",        "eps_schedule",
      "total_steps",    "warmup_steps",   "rampup_steps",
      "kappa_final",    "lr",             "lr_decay_steps",
      "lr_decay_factor","batch_size",     "eval_epsilon",
      "eval_subset",    "log_every",      "model",
      "limit",          "attack_steps",   "attack_restarts",
      "max_nodes",      "time_budget_s",  "min_box_width",
      "decision_tol",   "example_index",  "layer_index",
      "samples_per_axis","checkpoints",   "weights_csv",
      "clip_input",     "pgd_train_steps","pgd_train_adam_lr",
  };
  return keys;
}

void reject_unknown_keys(const json& cfg) {
  for (auto it = cfg.begin(); it != cfg.end(); ++it)
    if (!allowed_keys().count(it.key()))
      throw CliError("unknown config key: " + it.key());
}

template <typename T>
T get_or(const json& cfg, const std::string& key, T fallback) {
  if (!cfg.contains(key)) return fallback;
  return cfg.at(key).get<T>();
}

verinet::Dataset load_dataset(const json& cfg) {
  std::string spec = get_or<std::string>(cfg, "dataset", "toy");
  verinet::Dataset ds;
  if (spec == "toy") {
    verinet::ToySpec ts;
    ts.seed = get_or<std::uint64_t>(cfg, "seed", 0);
    ds = verinet::generate_toy(ts);
  } else if (spec.rfind("idx:", 0) == 0) {
    std::string rest = spec.substr(4);
    auto comma = rest.find(',');
    if (comma == std::string::npos)
      throw CliError("idx dataset spec must be idx:IMAGES,LABELS");
    ds = verinet::load_idx(rest.substr(0, comma), rest.substr(comma + 1));
  } else {
    throw CliError("unknown dataset spec: " + spec +
                   " (expected toy or idx:IMAGES,LABELS)");
  }
  if (cfg.contains("limit")) ds = ds.head(cfg.at("limit").get<std::size_t>());
  return ds;
}

fs::path out_dir(const json& cfg) {
  if (!cfg.contains("out")) throw CliError("--out is required");
  fs::path dir = cfg.at("out").get<std::string>();
  fs::create_directories(dir);
  return dir;
}

void echo_config(const json& cfg, const fs::path& dir,
                 const std::string& subcommand) {
  json echo = cfg;
  echo["subcommand"] = subcommand;
  std::ofstream f(dir / "config.json");
  f << echo.dump(2) << "\n";
}

verinet::Checkpoint load_model(const json& cfg) {
  if (!cfg.contains("model")) throw CliError("--model is required");
  return verinet::load_checkpoint(cfg.at("model").get<std::string>());
}

verinet::TrainMethod parse_method(const std::string& s) {
  if (s == "nominal") return verinet::TrainMethod::Nominal;
  if (s == "ibp") return verinet::TrainMethod::Ibp;
  if (s == "pgd") return verinet::TrainMethod::PgdAdversarial;
  throw CliError("unknown method: " + s + " (expected nominal|ibp|pgd)");
}

verinet::LossVariant parse_loss(const std::string& s) {
  if (s == "xent") return verinet::LossVariant::CrossEntropy;
  if (s == "softplus") return verinet::LossVariant::Softplus;
  if (s == "hinge") return verinet::LossVariant::Hinge;
  throw CliError("unknown loss: " + s + " (expected xent|softplus|hinge)");
}

verinet::AttackConfig attack_config(const json& cfg, double epsilon) {
  verinet::AttackConfig ac;
  ac.epsilon = epsilon;
  ac.steps = get_or<std::size_t>(cfg, "attack_steps", 200);
  ac.restarts = get_or<std::size_t>(cfg, "attack_restarts", 10);
  ac.seed = get_or<std::uint64_t>(cfg, "seed", 0);
  return ac;
}

verinet::BabConfig bab_config(const json& cfg) {
  verinet::BabConfig bc;
  bc.max_nodes = get_or<std::size_t>(cfg, "max_nodes", 20000);
  bc.time_budget_s = get_or<double>(cfg, "time_budget_s", 60.0);
  bc.min_box_width = get_or<double>(cfg, "min_box_width", 1e-4);
  bc.decision_tol = get_or<double>(cfg, "decision_tol", 1e-6);
  bc.seed = get_or<std::uint64_t>(cfg, "seed", 0);
  return bc;
}

void save_model(const fs::path& path, const verinet::Network& net,
                const json& cfg, std::size_t step, const std::string& rng_state) {
  verinet::CheckpointMeta meta;
  meta.arch = verinet::architecture_string(net);
  meta.seed = get_or<std::uint64_t>(cfg, "seed", 0);
  meta.step = step;
  meta.rng_state = rng_state;
  meta.training = cfg;
  verinet::save_checkpoint(path, net, meta);
}

int cmd_train(const json& cfg) {
  fs::path dir = out_dir(cfg);
  echo_config(cfg, dir, "train");
  verinet::Dataset ds = load_dataset(cfg);

  std::vector<std::size_t> input_shape = ds.example_shape();
  std::string arch = get_or<std::string>(cfg, "arch", "fc 100; fc 100; fc 100; fc 2");
  verinet::Network net = verinet::parse_architecture(arch, input_shape);
  if (net.num_classes != ds.class_count)
    throw CliError("architecture output (" + std::to_string(net.num_classes) +
                   " classes) does not match dataset (" +
                   std::to_string(ds.class_count) + ")");

  double epsilon = get_or<double>(cfg, "epsilon", 0.0);
  verinet::TrainConfig tc;
  tc.method = parse_method(get_or<std::string>(cfg, "method", "ibp"));
  tc.loss_variant = parse_loss(get_or<std::string>(cfg, "loss", "xent"));
  tc.use_elision = get_or<bool>(cfg, "elision", true);
  tc.use_eps_schedule = get_or<bool>(cfg, "eps_schedule", true);
  tc.batch_size = get_or<std::size_t>(cfg, "batch_size", 100);
  tc.seed = get_or<std::uint64_t>(cfg, "seed", 0);
  tc.schedule.total_steps = get_or<std::size_t>(cfg, "total_steps", 5000);
  tc.schedule.warmup_steps = get_or<std::size_t>(cfg, "warmup_steps", 500);
  tc.schedule.rampup_steps = get_or<std::size_t>(cfg, "rampup_steps", 2000);
  tc.schedule.kappa_final = get_or<double>(cfg, "kappa_final", 0.5);
  tc.schedule.epsilon_train = epsilon;
  tc.schedule.lr_initial = get_or<double>(cfg, "lr", 1e-3);
  if (cfg.contains("lr_decay_steps"))
    tc.schedule.lr_decay_steps =
        cfg.at("lr_decay_steps").get<std::vector<std::size_t>>();
  else
    tc.schedule.lr_decay_steps = {tc.schedule.total_steps * 3 / 5,
                                  tc.schedule.total_steps * 4 / 5};
  tc.schedule.lr_decay_factor = get_or<double>(cfg, "lr_decay_factor", 0.1);
  tc.eval_epsilon = get_or<double>(cfg, "eval_epsilon", epsilon);
  tc.eval_subset = get_or<std::size_t>(cfg, "eval_subset", 200);
  tc.log_every = get_or<std::size_t>(cfg, "log_every", 100);
  tc.clip_input_boxes = get_or<bool>(cfg, "clip_input", true);
  tc.pgd_train_steps = get_or<std::size_t>(cfg, "pgd_train_steps", 7);
  tc.pgd_train_adam_lr = get_or<double>(cfg, "pgd_train_adam_lr", 0.1);

  // re-echo with the effective (default-resolved) training settings
  {
    json resolved = cfg;
    resolved["arch"] = arch;
    resolved["method"] = verinet::train_method_name(tc.method);
    resolved["loss"] = verinet::loss_variant_name(tc.loss_variant);
    resolved["epsilon"] = epsilon;
    resolved["seed"] = tc.seed;
    resolved["batch_size"] = tc.batch_size;
    resolved["total_steps"] = tc.schedule.total_steps;
    resolved["warmup_steps"] = tc.schedule.warmup_steps;
    resolved["rampup_steps"] = tc.schedule.rampup_steps;
    resolved["kappa_final"] = tc.schedule.kappa_final;
    resolved["lr"] = tc.schedule.lr_initial;
    resolved["lr_decay_steps"] = tc.schedule.lr_decay_steps;
    resolved["lr_decay_factor"] = tc.schedule.lr_decay_factor;
    resolved["eval_epsilon"] = tc.eval_epsilon;
    resolved["log_every"] = tc.log_every;
    resolved["elision"] = tc.use_elision;
    resolved["eps_schedule"] = tc.use_eps_schedule;
    echo_config(resolved, dir, "train");
  }

  verinet::Rng rng(tc.seed);
  verinet::init_parameters(net, rng);
  save_model(dir / "init.json", net, cfg, 0, rng.save_state());

  verinet::TrainResult tr = verinet::train(std::move(net), ds, tc, rng);

  verinet::JsonlWriter metrics(dir / "metrics.jsonl");
  for (const auto& m : tr.metrics) {
    json line;
    line["step"] = m.step;
    line["kappa"] = m.kappa;
    line["epsilon"] = m.epsilon;
    line["lr"] = m.lr;
    line["loss"] = m.loss;
    line["nominal_err"] = m.nominal_err;
    line["ibp_verified_err"] = m.ibp_verified_err;
    metrics.write(line);
  }
  save_model(dir / "model.json", tr.net, cfg, tc.schedule.total_steps,
             rng.save_state());
  std::cout << "trained " << tc.schedule.total_steps << " steps; model at "
            << (dir / "model.json").string() << "\n";
  return 0;
}

int cmd_eval(const json& cfg) {
  fs::path dir = out_dir(cfg);
  echo_config(cfg, dir, "eval");
  verinet::Dataset ds = load_dataset(cfg);
  verinet::Checkpoint cp = load_model(cfg);

  std::size_t errors = 0;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (verinet::predict(cp.net, ds.example(i)) !=
        static_cast<std::size_t>(ds.labels[i]))
      ++errors;
  double nominal_err = double(errors) / double(ds.size());

  json summary;
  summary["examples"] = ds.size();
  summary["nominal_err"] = nominal_err;
  std::ofstream f(dir / "eval.json");
  f << summary.dump(2) << "\n";
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_attack(const json& cfg) {
  fs::path dir = out_dir(cfg);
  echo_config(cfg, dir, "attack");
  verinet::Dataset ds = load_dataset(cfg);
  verinet::Checkpoint cp = load_model(cfg);
  double epsilon = get_or<double>(cfg, "epsilon", 0.0);
  verinet::AttackConfig ac = attack_config(cfg, epsilon);

  verinet::JsonlWriter report(dir / "attack.jsonl");
  std::size_t errors = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    verinet::Tensor x = ds.example(i);
    int y = ds.labels[i];
    json line;
    line["index"] = i;
    if (verinet::predict(cp.net, x) != static_cast<std::size_t>(y)) {
      line["success"] = true;
      line["nominal_misclassified"] = true;
      line["linf"] = 0.0;
      ++errors;
    } else {
      verinet::AttackConfig c = ac;
      c.seed = ac.seed + i;
      verinet::AttackResult ar = verinet::pgd_attack(cp.net, x, y, c);
      line["success"] = ar.success;
      line["nominal_misclassified"] = false;
      line["loss"] = ar.loss;
      line["linf"] = ar.linf_distance;
      if (ar.success) ++errors;
    }
    report.write(line);
  }

  json summary;
  summary["epsilon"] = epsilon;
  summary["examples"] = ds.size();
  summary["pgd_rate"] = double(errors) / double(ds.size());
  std::ofstream f(dir / "summary.json");
  f << summary.dump(2) << "\n";
  std::cout << summary.dump() << "\n";
  return 0;
}

json run_verification(const json& cfg, const fs::path& dir,
                      const verinet::Network& net, const verinet::Dataset& ds,
                      double epsilon) {
  verinet::AttackConfig ac = attack_config(cfg, epsilon);
  verinet::BabConfig bc = bab_config(cfg);
  verinet::VerifiedErrorReport rep =
      verinet::verified_error(net, ds, epsilon, bc, ac);

  verinet::JsonlWriter report(dir / "report.jsonl");
  for (const auto& ev : rep.examples) {
    json line;
    line["index"] = ev.index;
    line["status"] = verinet::status_name(ev.bab_status);
    line["ibp_verified"] = ev.ibp_ok;
    line["pgd_robust"] = ev.pgd_ok;
    line["ibp_margin"] = ev.ibp_margin;
    line["bab_upper"] = ev.bab_upper;
    line["bab_lower"] = ev.bab_lower;
    line["nodes"] = ev.nodes;
    line["time_ms"] = ev.time_ms;
    report.write(line);
  }

  json summary;
  summary["epsilon"] = epsilon;
  summary["examples"] = ds.size();
  summary["ibp_rate"] = rep.rates.ibp_rate;
  summary["bab_rate"] = rep.rates.bab_rate;
  summary["pgd_rate"] = rep.rates.pgd_rate;
  return summary;
}

int cmd_verify(const json& cfg) {
  fs::path dir = out_dir(cfg);
  echo_config(cfg, dir, "verify");
  verinet::Dataset ds = load_dataset(cfg);
  verinet::Checkpoint cp = load_model(cfg);
  double epsilon = get_or<double>(cfg, "epsilon", 0.0);
  json summary = run_verification(cfg, dir, cp.net, ds, epsilon);
  std::ofstream f(dir / "summary.json");
  f << summary.dump(2) << "\n";
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_tightness(const json& cfg) {
  fs::path dir = out_dir(cfg);
  echo_config(cfg, dir, "tightness");
  verinet::Dataset ds = load_dataset(cfg);
  verinet::Checkpoint cp = load_model(cfg);
  double epsilon = get_or<double>(cfg, "epsilon", 0.0);

  std::size_t nominal = 0;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (verinet::predict(cp.net, ds.example(i)) !=
        static_cast<std::size_t>(ds.labels[i]))
      ++nominal;

  json summary = run_verification(cfg, dir, cp.net, ds, epsilon);
  summary["nominal_err"] = double(nominal) / double(ds.size());
  summary["ibp_minus_bab"] =
      summary["ibp_rate"].get<double>() - summary["bab_rate"].get<double>();
  std::ofstream f(dir / "tightness.json");
  f << summary.dump(2) << "\n";
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_polytope(const json& cfg) {
  fs::path dir = out_dir(cfg);
  echo_config(cfg, dir, "polytope");
  verinet::Dataset ds = load_dataset(cfg);
  double epsilon = get_or<double>(cfg, "epsilon", 0.0);
  std::size_t example_index = get_or<std::size_t>(cfg, "example_index", 0);
  std::size_t samples = get_or<std::size_t>(cfg, "samples_per_axis", 21);
  if (example_index >= ds.size()) throw CliError("example_index out of range");
  verinet::Tensor x0 = ds.example(example_index);

  std::vector<std::string> checkpoints;
  if (cfg.contains("checkpoints"))
    checkpoints = cfg.at("checkpoints").get<std::vector<std::string>>();
  else if (cfg.contains("model"))
    checkpoints = {cfg.at("model").get<std::string>()};
  else
    throw CliError("polytope needs --model or a checkpoints list");

  std::ofstream csv(dir / "polytope.csv");
  csv << "u,v,layer,checkpoint\n";
  csv.precision(17);
  json boxes = json::object();

  for (const std::string& path : checkpoints) {
    verinet::Checkpoint cp = verinet::load_checkpoint(path);
    std::string label = fs::path(path).stem().string();
    std::size_t layer_index = cfg.contains("layer_index")
                                  ? cfg.at("layer_index").get<std::size_t>()
                                  : cp.net.layers.size() - 1;
    verinet::PolytopeSample ps = verinet::polytope_sample(
        cp.net, x0, epsilon, samples, layer_index,
        verinet::DomainClip{0.0, 1.0});
    for (const auto& p : ps.points)
      csv << p[0] << "," << p[1] << "," << layer_index << "," << label << "\n";
    json box;
    box["lower"] = {ps.box.lower[0], ps.box.lower[1]};
    box["upper"] = {ps.box.upper[0], ps.box.upper[1]};
    box["layer"] = layer_index;
    boxes[label] = box;
  }

  std::ofstream bf(dir / "polytope_boxes.json");
  bf << boxes.dump(2) << "\n";
  std::cout << "polytope samples for " << checkpoints.size()
            << " checkpoint(s) at " << (dir / "polytope.csv").string() << "\n";
  return 0;
}

int cmd_hunt(const json& cfg) {
  fs::path dir = out_dir(cfg);
  echo_config(cfg, dir, "hunt");
  verinet::Dataset ds = load_dataset(cfg);
  verinet::Checkpoint cp = load_model(cfg);
  double epsilon = get_or<double>(cfg, "epsilon", 0.0);
  verinet::AttackConfig ac = attack_config(cfg, epsilon);
  verinet::BabConfig bc = bab_config(cfg);

  auto findings = verinet::pgd_gap_hunt(cp.net, ds, epsilon, ac, bc);
  verinet::JsonlWriter report(dir / "hunt.jsonl");
  for (const auto& f : findings) {
    json line;
    line["index"] = f.index;
    line["pgd_best_loss"] = f.pgd_best_loss;
    std::vector<double> ce(f.counterexample.data(),
                           f.counterexample.data() + f.counterexample.size());
    line["counterexample"] = ce;
    report.write(line);
  }
  json summary;
  summary["epsilon"] = epsilon;
  summary["examples"] = ds.size();
  summary["findings"] = findings.size();
  std::ofstream sf(dir / "summary.json");
  sf << summary.dump(2) << "\n";
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_export(const json& cfg) {
  fs::path dir = out_dir(cfg);
  echo_config(cfg, dir, "export");
  verinet::Checkpoint cp = load_model(cfg);
  verinet::save_checkpoint(dir / "model.json", cp.net, cp.meta);
  if (get_or<bool>(cfg, "weights_csv", false)) {
    std::ofstream csv(dir / "weights.csv");
    csv << "layer,kind,tensor,index,value\n";
    csv.precision(17);
    for (std::size_t i = 0; i < cp.net.layers.size(); ++i) {
      const verinet::Layer& l = cp.net.layers[i];
      if (!l.has_params()) continue;
      const char* kind = l.kind == verinet::Layer::Kind::Linear ? "linear"
                                                                : "conv2d";
      for (std::size_t j = 0; j < l.weight.size(); ++j)
        csv << i << "," << kind << ",weight," << j << "," << l.weight[j]
            << "\n";
      for (std::size_t j = 0; j < l.bias.size(); ++j)
        csv << i << "," << kind << ",bias," << j << "," << l.bias[j] << "\n";
    }
  }
  std::cout << "exported to " << (dir / "model.json").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"verinet: interval-bound training, attack, and verification"};
  app.require_subcommand(1);

  std::string config_path, out, dataset, arch, method, loss, model;
  std::uint64_t seed = 0;
  double epsilon = 0.0;
  bool no_elision = false, no_eps_schedule = false;
  bool seed_set = false, epsilon_set = false;

  struct SubcommandEntry {
    CLI::App* app;
    int (*run)(const json&);
  };
  std::vector<SubcommandEntry> entries;
  auto add_sub = [&](const char* name, const char* desc,
                     int (*run)(const json&)) {
    CLI::App* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", config_path, "JSON config file");
    sub->add_option("--seed", seed, "RNG seed")
        ->each([&](const std::string&) { seed_set = true; });
    sub->add_option("--out", out, "output directory");
    sub->add_option("--epsilon", epsilon, "l-infinity radius")
        ->each([&](const std::string&) { epsilon_set = true; });
    sub->add_option("--dataset", dataset, "toy or idx:IMAGES,LABELS");
    sub->add_option("--arch", arch, "architecture string");
    sub->add_option("--method", method, "nominal|ibp|pgd");
    sub->add_option("--loss", loss, "xent|softplus|hinge");
    sub->add_option("--model", model, "checkpoint manifest path");
    sub->add_flag("--no-elision", no_elision,
                  "bound the output box instead of eliding the last layer");
    sub->add_flag("--no-eps-schedule", no_eps_schedule,
                  "train at full epsilon from step 0");
    entries.push_back({sub, run});
    return sub;
  };

  add_sub("train", "train a model", cmd_train);
  add_sub("eval", "nominal test error", cmd_eval);
  add_sub("attack", "PGD attack report", cmd_attack);
  add_sub("verify", "per-example verification report", cmd_verify);
  add_sub("tightness", "compare IBP and branch-and-bound rates", cmd_tightness);
  add_sub("polytope", "2-D activation clouds with interval boxes", cmd_polytope);
  add_sub("hunt", "find PGD blind spots via branch-and-bound", cmd_hunt);
  add_sub("export", "re-serialize a checkpoint", cmd_export);

  CLI11_PARSE(app, argc, argv);

  try {
    json cfg = json::object();
    if (!config_path.empty()) {
      std::ifstream f(config_path);
      if (!f) throw CliError("cannot open config: " + config_path);
      cfg = json::parse(f);
      if (!cfg.is_object()) throw CliError("config must be a JSON object");
    }
    // flags override the config document
    if (seed_set) cfg["seed"] = seed;
    if (!out.empty()) cfg["out"] = out;
    if (epsilon_set) cfg["epsilon"] = epsilon;
    if (!dataset.empty()) cfg["dataset"] = dataset;
    if (!arch.empty()) cfg["arch"] = arch;
    if (!method.empty()) cfg["method"] = method;
    if (!loss.empty()) cfg["loss"] = loss;
    if (!model.empty()) cfg["model"] = model;
    if (no_elision) cfg["elision"] = false;
    if (no_eps_schedule) cfg["eps_schedule"] = false;
    reject_unknown_keys(cfg);

    for (const auto& e : entries)
      if (e.app->parsed()) return e.run(cfg);
    throw CliError("no subcommand selected");
  } catch (const std::exception& e) {
    json err;
    err["error"] = {{"type", typeid(e).name()}, {"message", e.what()}};
    std::cout << err.dump() << "\n";
    return 1;
  }
}
