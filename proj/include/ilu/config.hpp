#pragma once

// Experiment configuration: suite, model, unlearning knobs, environment
// assignment, per-phase training configs and seeds. Read from JSON; unknown
// keys are configuration errors.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ilu/datasets.hpp"
#include "ilu/error.hpp"
#include "ilu/json_util.hpp"
#include "ilu/models.hpp"
#include "ilu/objectives.hpp"
#include "ilu/trainer.hpp"

namespace ilu {

enum class Variant { kBase, kSingle, kMulti };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::kBase: return "base";
    case Variant::kSingle: return "single";
    case Variant::kMulti: return "multi";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "base") return Variant::kBase;
  if (s == "single") return Variant::kSingle;
  if (s == "multi") return Variant::kMulti;
  throw ConfigError("unknown variant '" + s + "' (expected base, single or multi)");
}

/// Row label in tables: "RMU", "RMU+ILU(single)", "RMU+ILU(multi)".
inline std::string approach_label(UnlearnMethod m, Variant v) {
  return v == Variant::kBase ? to_string(m) : to_string(m) + "+ILU(" + to_string(v) + ")";
}

struct UnlearnKnobs {
  double gamma = 1.0;
  double beta = 0.1;
  double steering = 6.5;
  double alpha = 1.0;
  std::size_t rmu_layer = 1;
  double lambda = 0.5;
  std::vector<double> lambda_grid{0.05, 0.1, 0.5, 1.0, 2.0};
  std::map<std::string, double> lr{{"GA", 3e-4}, {"NPO", 3e-4}, {"RMU", 1e-3}};
};

struct RelearnKnobs {
  std::size_t k = 60;
  std::size_t epochs = 1;
  std::size_t batch_size = 12;
};

struct SweepKnobs {
  bool enabled = true;
  std::string method = "NPO";
  std::string variant = "single";
  std::vector<std::string> tasks{"T1"};
  std::vector<std::uint64_t> seeds;  // empty: first seed of the matrix
};

struct PhaseConfigs {
  TrainConfig pretrain;
  TrainConfig unlearn;
  TrainConfig attack;

  PhaseConfigs() {
    pretrain.optimizer.lr = 3e-3;
    pretrain.steps = 2000;
    pretrain.batch_size = 48;
    pretrain.eval_every = 500;

    unlearn.steps = 300;
    unlearn.batch_size = 16;
    unlearn.accumulation = 4;
    unlearn.eval_every = 25;

    attack.optimizer.kind = OptimizerKind::kSgd;
    attack.optimizer.lr = 0.05;
    attack.max_epochs = 6;
    attack.batch_size = 48;
  }
};

struct ExperimentConfig {
  SyntheticSuiteConfig suite = [] {
    SyntheticSuiteConfig s;
    s.seed = 1;
    return s;
  }();
  ModelConfig model;
  std::string forget_domain = "forget";
  std::string retain_domain = "retain";
  UnlearnKnobs unlearn;
  std::vector<std::string> methods{"RMU", "NPO"};
  std::vector<std::string> variants{"base", "single", "multi"};
  std::vector<std::string> single_envs{"T1"};
  std::vector<std::string> multi_envs{"T1", "T2", "T3"};
  std::size_t single_env_batch = 48;
  std::size_t multi_env_batch = 16;
  std::vector<std::string> attack_tasks{"T1", "T2", "T3"};
  bool allow_seen = true;  // attack tasks may also be invariance envs
  std::string taskvec_task = "T1";
  RelearnKnobs relearn;
  SweepKnobs sweep;
  PhaseConfigs train;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::string out = "bundle";

  std::vector<UnlearnMethod> method_list() const {
    std::vector<UnlearnMethod> out;
    for (const auto& m : methods) out.push_back(parse_unlearn_method(m));
    return out;
  }
  std::vector<Variant> variant_list() const {
    std::vector<Variant> out;
    for (const auto& v : variants) out.push_back(parse_variant(v));
    return out;
  }
  std::vector<std::uint64_t> sweep_seeds() const {
    return sweep.seeds.empty() ? std::vector<std::uint64_t>{seeds.front()} : sweep.seeds;
  }

  void validate() const;
};

namespace detail {

inline void check_task_domain(const ExperimentConfig& c, const std::string& name,
                              const std::string& what) {
  bool found = false;
  for (const auto& d : c.suite.domains) found = found || d.name == name;
  if (!found) throw ConfigError(what + ": unknown domain '" + name + "'");
  if (name == c.forget_domain || name == c.retain_domain) {
    throw ConfigError(what + ": '" + name + "' is the forget or retain domain");
  }
}

}  // namespace detail

inline void ExperimentConfig::validate() const {
  try {
    suite.validate();
    model.validate();
    train.pretrain.validate();
    train.unlearn.validate();
    train.attack.validate();
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what());
  }
  if (!model.is_lm()) throw ConfigError("model.family: the experiment pipeline needs a tinylm");
  if (model.input_dim != suite.vocab) throw ConfigError("model.input_dim must equal suite.vocab");
  if (model.context < suite.seq_len) throw ConfigError("model.context must be >= suite.seq_len");
  if (unlearn.rmu_layer >= model.layers) throw ConfigError("unlearn.rmu_layer out of range");
  if (unlearn.beta <= 0.0 || unlearn.steering <= 0.0 || unlearn.gamma < 0.0 || unlearn.alpha < 0.0) {
    throw ConfigError("unlearn: beta and steering must be > 0, gamma and alpha >= 0");
  }
  if (unlearn.lambda <= 0.0) throw ConfigError("unlearn.lambda must be > 0 for the ILU variants");
  if (unlearn.lambda_grid.empty()) throw ConfigError("unlearn.lambda_grid is empty");
  for (double l : unlearn.lambda_grid) {
    if (!(l >= 0.0)) throw ConfigError("unlearn.lambda_grid entries must be >= 0");
  }
  for (const auto& [m, lr] : unlearn.lr) {
    try {
      parse_unlearn_method(m);
    } catch (const ArgumentError& e) {
      throw ConfigError(std::string("unlearn.lr: ") + e.what());
    }
    if (!(lr > 0.0)) throw ConfigError("unlearn.lr." + m + " must be > 0");
  }
  if (seeds.empty()) throw ConfigError("seeds: list must be nonempty");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw ConfigError("seeds: duplicate seed");
  }
  if (methods.empty() || variants.empty()) throw ConfigError("methods and variants must be nonempty");
  try {
    method_list();
  } catch (const ArgumentError& e) {
    throw ConfigError(std::string("methods: ") + e.what());
  }
  variant_list();
  for (const auto& d : {forget_domain, retain_domain}) {
    bool found = false;
    for (const auto& s : suite.domains) found = found || s.name == d;
    if (!found) throw ConfigError("unknown forget/retain domain '" + d + "'");
  }
  if (single_envs.empty() || multi_envs.empty()) throw ConfigError("environment lists must be nonempty");
  for (const auto& e : single_envs) detail::check_task_domain(*this, e, "single_envs");
  for (const auto& e : multi_envs) detail::check_task_domain(*this, e, "multi_envs");
  if (attack_tasks.empty()) throw ConfigError("attack_tasks: list must be nonempty");
  for (const auto& e : attack_tasks) detail::check_task_domain(*this, e, "attack_tasks");
  if (single_env_batch == 0 || multi_env_batch == 0) throw ConfigError("environment batch sizes must be >= 1");
  if (!allow_seen) {
    std::set<std::string> envs;
    const auto vs = variant_list();
    if (std::count(vs.begin(), vs.end(), Variant::kSingle)) envs.insert(single_envs.begin(), single_envs.end());
    if (std::count(vs.begin(), vs.end(), Variant::kMulti)) envs.insert(multi_envs.begin(), multi_envs.end());
    for (const auto& t : attack_tasks) {
      if (envs.count(t)) {
        throw ConfigError("attack task '" + t + "' is also an invariance environment; set allow_seen");
      }
    }
  }
  if (std::find(attack_tasks.begin(), attack_tasks.end(), taskvec_task) == attack_tasks.end()) {
    throw ConfigError("taskvec_task must be one of attack_tasks");
  }
  if (relearn.batch_size == 0) throw ConfigError("relearn.batch_size must be >= 1");
  if (relearn.k > suite.split_sizes.at("train")) {
    throw ConfigError("relearn.k exceeds the forget train split size");
  }
  try {
    parse_unlearn_method(sweep.method);
  } catch (const ArgumentError& e) {
    throw ConfigError(std::string("sweep.method: ") + e.what());
  }
  if (parse_variant(sweep.variant) == Variant::kBase) throw ConfigError("sweep.variant must be single or multi");
  if (sweep.tasks.empty()) throw ConfigError("sweep.tasks: list must be nonempty");
  for (const auto& t : sweep.tasks) detail::check_task_domain(*this, t, "sweep.tasks");
}

inline void to_json(nlohmann::json& j, const UnlearnKnobs& u) {
  j = {{"gamma", u.gamma},   {"beta", u.beta},     {"steering", u.steering},
       {"alpha", u.alpha},   {"rmu_layer", u.rmu_layer}, {"lambda", u.lambda},
       {"lambda_grid", u.lambda_grid}, {"lr", u.lr}};
}

inline void from_json(const nlohmann::json& j, UnlearnKnobs& u) {
  const std::string w = "unlearn";
  require_known_keys(j, {"gamma", "beta", "steering", "alpha", "rmu_layer", "lambda", "lambda_grid", "lr"}, w);
  read_optional(j, "gamma", u.gamma, w);
  read_optional(j, "beta", u.beta, w);
  read_optional(j, "steering", u.steering, w);
  read_optional(j, "alpha", u.alpha, w);
  read_optional(j, "rmu_layer", u.rmu_layer, w);
  read_optional(j, "lambda", u.lambda, w);
  read_optional(j, "lambda_grid", u.lambda_grid, w);
  if (j.contains("lr")) {
    std::map<std::string, double> lr;
    read_optional(j, "lr", lr, w);
    for (const auto& [k, v] : lr) u.lr[k] = v;
  }
}

inline void to_json(nlohmann::json& j, const RelearnKnobs& r) {
  j = {{"k", r.k}, {"epochs", r.epochs}, {"batch_size", r.batch_size}};
}

inline void from_json(const nlohmann::json& j, RelearnKnobs& r) {
  require_known_keys(j, {"k", "epochs", "batch_size"}, "relearn");
  read_optional(j, "k", r.k, "relearn");
  read_optional(j, "epochs", r.epochs, "relearn");
  read_optional(j, "batch_size", r.batch_size, "relearn");
}

inline void to_json(nlohmann::json& j, const SweepKnobs& s) {
  j = {{"enabled", s.enabled}, {"method", s.method}, {"variant", s.variant},
       {"tasks", s.tasks},     {"seeds", s.seeds}};
}

inline void from_json(const nlohmann::json& j, SweepKnobs& s) {
  require_known_keys(j, {"enabled", "method", "variant", "tasks", "seeds"}, "sweep");
  read_optional(j, "enabled", s.enabled, "sweep");
  read_optional(j, "method", s.method, "sweep");
  read_optional(j, "variant", s.variant, "sweep");
  read_optional(j, "tasks", s.tasks, "sweep");
  read_optional(j, "seeds", s.seeds, "sweep");
}

namespace detail {

// Phase configs start from the phase defaults; keys present in JSON override.
inline void merge_train(const nlohmann::json& j, const char* key, TrainConfig& c) {
  auto it = j.find(key);
  if (it == j.end()) return;
  nlohmann::json merged = c;
  if (!it->is_object()) throw ConfigError(std::string("train.") + key + ": expected an object");
  for (const auto& [k, v] : it->items()) {
    if (k == "optimizer" && v.is_object()) {
      for (const auto& [ok, ov] : v.items()) merged["optimizer"][ok] = ov;
    } else {
      merged[k] = v;
    }
  }
  from_json(merged, c);
}

// Nested sections update the current values in place, so omitted keys keep
// the experiment defaults.
template <typename T>
void merge_section(const nlohmann::json& j, const char* key, T& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    from_json(*it, out);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string(key) + ": " + e.what());
  }
}

inline ModelConfig merge_model(const nlohmann::json& j, const ModelConfig& base) {
  require_known_keys(j, {"family", "input_dim", "hidden_dim", "layers", "heads", "context", "classes"},
                     "model");
  nlohmann::json merged = base;
  for (const auto& [k, v] : j.items()) merged[k] = v;
  try {
    return merged.get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model: ") + e.what());
  } catch (const ArgumentError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"suite", c.suite},
       {"model", c.model},
       {"forget_domain", c.forget_domain},
       {"retain_domain", c.retain_domain},
       {"unlearn", c.unlearn},
       {"methods", c.methods},
       {"variants", c.variants},
       {"single_envs", c.single_envs},
       {"multi_envs", c.multi_envs},
       {"single_env_batch", c.single_env_batch},
       {"multi_env_batch", c.multi_env_batch},
       {"attack_tasks", c.attack_tasks},
       {"allow_seen", c.allow_seen},
       {"taskvec_task", c.taskvec_task},
       {"relearn", c.relearn},
       {"sweep", c.sweep},
       {"train", {{"pretrain", c.train.pretrain}, {"unlearn", c.train.unlearn}, {"attack", c.train.attack}}},
       {"seeds", c.seeds},
       {"out", c.out}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  const std::string w = "config";
  require_known_keys(j, {"suite", "model", "forget_domain", "retain_domain", "unlearn", "methods",
                         "variants", "single_envs", "multi_envs", "single_env_batch",
                         "multi_env_batch", "attack_tasks", "allow_seen", "taskvec_task", "relearn",
                         "sweep", "train", "seeds", "out"},
                     w);
  detail::merge_section(j, "suite", c.suite);
  if (j.contains("model")) c.model = detail::merge_model(j.at("model"), c.model);
  read_optional(j, "forget_domain", c.forget_domain, w);
  read_optional(j, "retain_domain", c.retain_domain, w);
  detail::merge_section(j, "unlearn", c.unlearn);
  read_optional(j, "methods", c.methods, w);
  read_optional(j, "variants", c.variants, w);
  read_optional(j, "single_envs", c.single_envs, w);
  read_optional(j, "multi_envs", c.multi_envs, w);
  read_optional(j, "single_env_batch", c.single_env_batch, w);
  read_optional(j, "multi_env_batch", c.multi_env_batch, w);
  read_optional(j, "attack_tasks", c.attack_tasks, w);
  read_optional(j, "allow_seen", c.allow_seen, w);
  read_optional(j, "taskvec_task", c.taskvec_task, w);
  detail::merge_section(j, "relearn", c.relearn);
  detail::merge_section(j, "sweep", c.sweep);
  if (j.contains("train")) {
    const auto& t = j.at("train");
    require_known_keys(t, {"pretrain", "unlearn", "attack"}, "train");
    detail::merge_train(t, "pretrain", c.train.pretrain);
    detail::merge_train(t, "unlearn", c.train.unlearn);
    detail::merge_train(t, "attack", c.train.attack);
  }
  read_optional(j, "seeds", c.seeds, w);
  read_optional(j, "out", c.out, w);
}

/// Parse and validate. Any problem is a ConfigError.
inline ExperimentConfig parse_experiment_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  try {
    c = j.get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_experiment_config(text);
}

}  // namespace ilu
