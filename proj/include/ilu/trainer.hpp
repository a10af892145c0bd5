#pragma once

// Optimization loops: unlearning (baseline or ILU) with gradient
// accumulation, and epoch-based fine-tuning with the FA convergence rule.
// Every evaluation runs on parameters rounded to checkpoint precision, so a
// saved checkpoint reproduces the logged metrics exactly.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "ilu/checkpoint.hpp"
#include "ilu/datasets.hpp"
#include "ilu/error.hpp"
#include "ilu/invariance.hpp"
#include "ilu/json_util.hpp"
#include "ilu/log.hpp"
#include "ilu/metrics.hpp"
#include "ilu/models.hpp"
#include "ilu/objectives.hpp"

namespace ilu {

inline constexpr std::string_view kCodeVersion = "ilu-lab 1.0.0";

enum class OptimizerKind { kSgd, kAdamW };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdamW;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  void validate() const {
    ILU_REQUIRE(lr > 0.0, "learning rate must be > 0");
    ILU_REQUIRE(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
                "Adam betas must be in [0, 1)");
    ILU_REQUIRE(eps > 0.0, "Adam eps must be > 0");
    ILU_REQUIRE(weight_decay >= 0.0, "weight decay must be >= 0");
  }
};

struct OptimizerState {
  DoubleBuffer m, v;
  std::size_t step = 0;
};

/// One update in place. sgd: theta -= lr g. adamw: bias-corrected moments
/// with decoupled weight decay.
inline void apply_update(ParameterVector& params, const ParameterVector& grads,
                         OptimizerState& state, const OptimizerConfig& config) {
  config.validate();
  if (!params.same_layout(grads)) throw ArgumentError("gradient layout differs from parameters");
  auto theta = params.values();
  auto g = grads.values();
  if (config.kind == OptimizerKind::kSgd) {
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= config.lr * g[i];
    ++state.step;
    return;
  }
  if (state.m.empty()) {
    state.m.assign(theta.size(), 0.0);
    state.v.assign(theta.size(), 0.0);
  }
  ILU_REQUIRE(state.m.size() == theta.size(), "optimizer state size differs from parameters");
  ++state.step;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g[i];
    state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g[i] * g[i];
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    theta[i] -= config.lr * (config.weight_decay * theta[i] + mhat / (std::sqrt(vhat) + config.eps));
  }
}

inline ParameterVector optimizer_step(const ParameterVector& params, const ParameterVector& grads,
                                      OptimizerState& state, const OptimizerConfig& config) {
  ParameterVector out = params;
  apply_update(out, grads, state, config);
  return out;
}

/// Cycles through shuffled passes over n items, reshuffling at each pass.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, RngStream rng) : n_(n), rng_(std::move(rng)) {
    ILU_REQUIRE(n > 0, "cannot sample from an empty dataset");
  }

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    out.reserve(batch);
    while (out.size() < batch) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    order_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
    rng_.shuffle(order_);
    pos_ = 0;
  }

  std::size_t n_;
  RngStream rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

struct TrainConfig {
  OptimizerConfig optimizer;
  std::size_t steps = 300;       // unlearning: forward/backward passes (micro-steps)
  std::size_t max_epochs = 8;    // fine-tuning
  std::size_t accumulation = 1;  // micro-steps per optimizer update
  std::size_t batch_size = 48;
  double convergence_threshold = 0.01;  // absolute change in FA (fraction)
  std::size_t convergence_window = 3;
  bool stop_on_convergence = true;
  std::size_t eval_every = 25;  // unlearning: optimizer updates between evaluations
  std::vector<std::string> trainable;  // parameter-name prefixes; empty = all
  bool split_estimator = false;
  std::uint64_t seed = 0;

  void validate() const {
    optimizer.validate();
    ILU_REQUIRE(accumulation >= 1, "accumulation factor must be >= 1");
    ILU_REQUIRE(batch_size >= 1, "batch size must be >= 1");
    ILU_REQUIRE(convergence_window >= 2, "convergence window must be >= 2");
    ILU_REQUIRE(convergence_threshold > 0.0, "convergence threshold must be > 0");
    ILU_REQUIRE(eval_every >= 1, "eval_every must be >= 1");
  }
};

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::kSgd ? "sgd" : "adamw"; }

inline void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = {{"kind", to_string(c.kind)}, {"lr", c.lr},   {"beta1", c.beta1},
       {"beta2", c.beta2},          {"eps", c.eps}, {"weight_decay", c.weight_decay}};
}

inline void from_json(const nlohmann::json& j, OptimizerConfig& c) {
  require_known_keys(j, {"kind", "lr", "beta1", "beta2", "eps", "weight_decay"}, "optimizer");
  std::string kind = to_string(c.kind);
  read_optional(j, "kind", kind, "optimizer");
  if (kind == "sgd") {
    c.kind = OptimizerKind::kSgd;
  } else if (kind == "adamw") {
    c.kind = OptimizerKind::kAdamW;
  } else {
    throw ConfigError("optimizer.kind: expected sgd or adamw, got '" + kind + "'");
  }
  read_optional(j, "lr", c.lr, "optimizer");
  read_optional(j, "beta1", c.beta1, "optimizer");
  read_optional(j, "beta2", c.beta2, "optimizer");
  read_optional(j, "eps", c.eps, "optimizer");
  read_optional(j, "weight_decay", c.weight_decay, "optimizer");
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"optimizer", c.optimizer},
       {"steps", c.steps},
       {"max_epochs", c.max_epochs},
       {"accumulation", c.accumulation},
       {"batch_size", c.batch_size},
       {"convergence_threshold", c.convergence_threshold},
       {"convergence_window", c.convergence_window},
       {"stop_on_convergence", c.stop_on_convergence},
       {"eval_every", c.eval_every},
       {"trainable", c.trainable},
       {"split_estimator", c.split_estimator},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  const std::string w = "train";
  require_known_keys(j, {"optimizer", "steps", "max_epochs", "accumulation", "batch_size",
                         "convergence_threshold", "convergence_window", "stop_on_convergence",
                         "eval_every", "trainable", "split_estimator", "seed"},
                     w);
  read_optional(j, "optimizer", c.optimizer, w);
  read_optional(j, "steps", c.steps, w);
  read_optional(j, "max_epochs", c.max_epochs, w);
  read_optional(j, "accumulation", c.accumulation, w);
  read_optional(j, "batch_size", c.batch_size, w);
  read_optional(j, "convergence_threshold", c.convergence_threshold, w);
  read_optional(j, "convergence_window", c.convergence_window, w);
  read_optional(j, "stop_on_convergence", c.stop_on_convergence, w);
  read_optional(j, "eval_every", c.eval_every, w);
  read_optional(j, "trainable", c.trainable, w);
  read_optional(j, "split_estimator", c.split_estimator, w);
  read_optional(j, "seed", c.seed, w);
}

/// One metrics CSV row. Unset optionals are written as empty cells.
struct MetricsRow {
  std::string run_id;
  std::string phase;
  std::size_t step_or_epoch = 0;
  std::optional<double> loss, fq, fa, utility;
  std::string env;
  std::optional<double> g, penalty;
};

inline constexpr std::string_view kMetricsHeader =
    "run_id,phase,step_or_epoch,loss,fq,fa,utility,env,g,penalty";

inline std::string format_number(double v) { return fmt::format("{:.17g}", v); }

inline std::string to_csv_line(const MetricsRow& r) {
  auto cell = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string(); };
  return fmt::format("{},{},{},{},{},{},{},{},{},{}", r.run_id, r.phase, r.step_or_epoch,
                     cell(r.loss), cell(r.fq), cell(r.fa), cell(r.utility), r.env, cell(r.g),
                     cell(r.penalty));
}

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << kMetricsHeader << '\n';
  for (const auto& r : rows) out << to_csv_line(r) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

enum class RunStatus { kOk, kNumericAbort };

inline std::string to_string(RunStatus s) { return s == RunStatus::kOk ? "ok" : "numeric_abort"; }

struct RunRecord {
  std::string run_id;
  nlohmann::json config;
  std::vector<MetricsRow> rows;
  Trajectory trajectory;  // fine-tuning runs only
  std::map<std::size_t, std::filesystem::path> checkpoints;  // epoch or step -> file
  RunStatus status = RunStatus::kOk;
  std::string message;
  std::optional<std::size_t> converged_epoch;
  ParameterVector final_params;  // at stored precision
  std::string started_at, finished_at;
  double seconds = 0.0;
};

namespace detail {

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

class RunClock {
 public:
  explicit RunClock(RunRecord& r) : record_(r), start_(std::chrono::steady_clock::now()) {
    record_.started_at = utc_now();
  }
  ~RunClock() {
    record_.finished_at = utc_now();
    record_.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  RunRecord& record_;
  std::chrono::steady_clock::time_point start_;
};

inline std::vector<bool> trainable_mask(const ParameterVector& p,
                                        const std::vector<std::string>& prefixes) {
  const auto& specs = p.layout().specs;
  std::vector<bool> mask(specs.size(), prefixes.empty());
  for (std::size_t i = 0; i < specs.size(); ++i) {
    for (const auto& pre : prefixes) {
      if (specs[i].name.rfind(pre, 0) == 0) mask[i] = true;
    }
  }
  if (std::find(mask.begin(), mask.end(), true) == mask.end()) {
    throw ArgumentError("trainable prefixes select no parameters");
  }
  return mask;
}

inline void apply_mask(ParameterVector& grad, const std::vector<bool>& mask) {
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) {
      for (double& v : grad.tensor(i)) v = 0.0;
    }
  }
}

inline void require_finite_loss(double loss, const std::string& where) {
  if (!std::isfinite(loss)) throw NumericError("non-finite loss " + where);
}

}  // namespace detail

/// Inputs to an unlearning run that stay fixed for its duration.
struct UnlearnData {
  const std::vector<LabeledSequence>* forget_train = nullptr;
  const std::vector<LabeledSequence>* retain_train = nullptr;
  const std::vector<LabeledSequence>* forget_eval = nullptr;
  const std::vector<LabeledSequence>* retain_eval = nullptr;
  std::vector<const std::vector<LabeledSequence>*> env_train;  // parallel to envs

  static UnlearnData from_suite(const SuiteData& suite, const std::vector<Environment>& envs,
                                const std::string& forget = "forget",
                                const std::string& retain = "retain") {
    UnlearnData d;
    d.forget_train = &suite.get(forget, "train");
    d.retain_train = &suite.get(retain, "train");
    d.forget_eval = &suite.get(forget, "eval");
    d.retain_eval = &suite.get(retain, "eval");
    for (const auto& e : envs) d.env_train.push_back(&suite.get(e.dataset, "train"));
    return d;
  }
};

inline nlohmann::json describe_unlearning(const UnlearnSpec& spec, double lambda,
                                          const std::vector<Environment>& envs,
                                          const TrainConfig& config) {
  nlohmann::json e = nlohmann::json::array();
  for (const auto& env : envs) {
    e.push_back({{"name", env.name}, {"dataset", env.dataset}, {"role", to_string(env.role)},
                 {"batch_size", env.batch_size}});
  }
  return {{"method", to_string(spec.method)},
          {"gamma", spec.gamma},
          {"beta", spec.beta},
          {"steering", spec.steering},
          {"alpha", spec.alpha},
          {"rmu_layer", spec.rmu_layer},
          {"direction_seed", spec.direction.seed},
          {"lambda", lambda},
          {"environments", e},
          {"train", config}};
}

/// Minimize unlearn_loss (lambda == 0) or ilu_loss from `base`.
/// `spec.reference` defaults to `base` when unset.
inline RunRecord run_unlearning(const ParameterVector& base, UnlearnSpec spec, double lambda,
                                const std::vector<Environment>& envs, const UnlearnData& data,
                                const TrainConfig& config, const std::string& run_id) {
  config.validate();
  ILU_REQUIRE(lambda >= 0.0, "lambda must be >= 0");
  if (lambda > 0.0 && envs.empty()) {
    throw ArgumentError("ILU (lambda > 0) needs at least one invariance environment");
  }
  ILU_REQUIRE(envs.size() == data.env_train.size(), "environment data missing");
  ILU_REQUIRE(data.forget_train && data.retain_train && data.forget_eval && data.retain_eval,
              "unlearning data incomplete");
  if (!spec.reference) spec.reference = std::make_shared<const ParameterVector>(base);
  if (spec.method == UnlearnMethod::kRMU && spec.direction.u.empty()) {
    spec.direction = RandomDirection::make(base.config().hidden_dim, config.seed);
  }
  spec.validate(base.config());

  RunRecord rec;
  rec.run_id = run_id;
  rec.config = describe_unlearning(spec, lambda, envs, config);
  detail::RunClock clock(rec);
  const auto mask = detail::trainable_mask(base, config.trainable);

  RngStream root(config.seed, detail::name_hash("unlearn"));
  BatchSampler forget_sampler(data.forget_train->size(), root.fork(1));
  BatchSampler retain_sampler(data.retain_train->size(), root.fork(2));
  std::vector<BatchSampler> env_samplers;
  for (std::size_t i = 0; i < envs.size(); ++i) {
    env_samplers.emplace_back(data.env_train[i]->size(), root.fork(100 + i));
  }

  ParameterVector params = base;
  OptimizerState state;
  PenaltyOptions popt{.split_estimator = config.split_estimator};

  auto evaluate = [&](std::size_t update, std::optional<double> loss) {
    const auto stored = to_stored_precision(params);
    MetricsRow row{run_id, "unlearn", update};
    row.loss = loss;
    row.fq = forget_quality(stored, *data.forget_eval);
    row.utility = utility_accuracy(stored, *data.retain_eval);
    logger().debug("{} update {} fq {:.3f} utility {:.3f}", run_id, update, *row.fq, *row.utility);
    rec.rows.push_back(row);
  };

  std::size_t update = 0;
  try {
    evaluate(0, std::nullopt);
    ParameterVector acc = params.zeros_like();
    std::size_t in_acc = 0;
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    std::vector<double> g_sum(envs.size(), 0.0), pen_sum(envs.size(), 0.0);
    for (std::size_t s = 0; s < config.steps; ++s) {
      const Batch fb = make_lm_batch(*data.forget_train, forget_sampler.next(config.batch_size));
      const Batch rb = make_lm_batch(*data.retain_train, retain_sampler.next(config.batch_size));
      double loss = 0.0;
      if (lambda == 0.0) {
        auto u = unlearn_loss(params, spec, fb, rb);
        loss = u.loss;
        acc += u.grad;
      } else {
        std::vector<EnvBatch> eb;
        for (std::size_t i = 0; i < envs.size(); ++i) {
          eb.push_back({envs[i].name,
                        make_lm_batch(*data.env_train[i], env_samplers[i].next(envs[i].batch_size))});
        }
        auto l = ilu_loss(params, spec, lambda, eb, fb, rb, popt);
        loss = l.loss;
        acc += l.grad;
        for (std::size_t i = 0; i < envs.size(); ++i) {
          g_sum[i] += l.penalty.g[i];
          pen_sum[i] += l.penalty.penalty[i];
        }
      }
      detail::require_finite_loss(loss, "at unlearning micro-step " + std::to_string(s));
      loss_sum += loss;
      ++loss_count;
      ++in_acc;
      if (in_acc == config.accumulation || s + 1 == config.steps) {
        acc *= 1.0 / static_cast<double>(in_acc);
        detail::apply_mask(acc, mask);
        apply_update(params, acc, state, config.optimizer);
        require_finite(params.values(), "parameters after update");
        ++update;
        if (lambda > 0.0) {
          for (std::size_t i = 0; i < envs.size(); ++i) {
            MetricsRow row{run_id, "unlearn", update};
            row.env = envs[i].name;
            row.g = g_sum[i] / static_cast<double>(in_acc);
            row.penalty = pen_sum[i] / static_cast<double>(in_acc);
            rec.rows.push_back(row);
            g_sum[i] = pen_sum[i] = 0.0;
          }
        }
        acc = params.zeros_like();
        in_acc = 0;
        if (update % config.eval_every == 0 || s + 1 == config.steps) {
          evaluate(update, loss_sum / static_cast<double>(loss_count));
          loss_sum = 0.0;
          loss_count = 0;
        }
      }
    }
  } catch (const NumericError& e) {
    rec.status = RunStatus::kNumericAbort;
    rec.message = e.what();
    logger().error("{}: {}", run_id, e.what());
  }
  rec.final_params = to_stored_precision(params);
  return rec;
}

struct FinetuneData {
  const std::vector<LabeledSequence>* train = nullptr;
  const std::vector<LabeledSequence>* eval = nullptr;         // FA
  const std::vector<LabeledSequence>* forget_eval = nullptr;  // FQ
};

struct FinetuneOptions {
  std::string phase = "finetune";
  std::optional<std::filesystem::path> checkpoint_dir;  // per-epoch checkpoints when set
  std::uint64_t stream = 0;  // distinguishes sample orders of different tasks
};

/// Epochs over `data.train` from `start` until FA converges or max_epochs.
inline RunRecord run_finetune(const ParameterVector& start, const FinetuneData& data,
                              const TrainConfig& config, const std::string& run_id,
                              const FinetuneOptions& options = {}) {
  config.validate();
  ILU_REQUIRE(data.train && data.eval && data.forget_eval, "fine-tuning data incomplete");
  ILU_REQUIRE(!data.train->empty(), "fine-tuning needs supervised task data");
  RunRecord rec;
  rec.run_id = run_id;
  rec.config = {{"phase", options.phase}, {"train", config}};
  detail::RunClock clock(rec);
  const auto mask = detail::trainable_mask(start, config.trainable);
  ParameterVector params = to_stored_precision(start);
  OptimizerState state;
  RngStream rng(config.seed, detail::name_hash("finetune") ^ options.stream);
  std::vector<double> fa_history;

  auto evaluate = [&](std::size_t epoch, std::optional<double> loss) {
    const auto stored = to_stored_precision(params);
    EpochRecord e{epoch, forget_quality(stored, *data.forget_eval), accuracy(stored, *data.eval)};
    rec.trajectory.records.push_back(e);
    MetricsRow row{run_id, options.phase, epoch};
    row.loss = loss;
    row.fq = e.fq;
    row.fa = e.fa;
    rec.rows.push_back(row);
    if (options.checkpoint_dir) {
      auto path = *options.checkpoint_dir / fmt::format("epoch_{:03d}.ckpt", epoch);
      save_checkpoint(stored, path);
      rec.checkpoints[epoch] = path;
    }
    logger().debug("{} epoch {} fq {:.3f} fa {:.3f}", run_id, epoch, e.fq, e.fa);
    return e;
  };

  try {
    evaluate(0, std::nullopt);
    std::vector<std::size_t> order(data.train->size());
    for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      rng.shuffle(order);
      // Micro-batch gradients are weighted by their supervised-position counts,
      // so an accumulated update equals the update of the pooled batch.
      ParameterVector acc = params.zeros_like();
      std::size_t in_acc = 0, acc_positions = 0;
      double loss_sum = 0.0;
      std::size_t batches = 0;
      for (std::size_t b0 = 0; b0 < order.size(); b0 += config.batch_size) {
        std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b0),
                                     order.begin() + static_cast<std::ptrdiff_t>(
                                                         std::min(order.size(), b0 + config.batch_size)));
        const Batch batch = make_lm_batch(*data.train, idx);
        auto r = retain_loss(params, batch);
        detail::require_finite_loss(r.loss, "at fine-tuning epoch " + std::to_string(epoch));
        loss_sum += r.loss;
        ++batches;
        const std::size_t positions = count_supervised(batch.targets);
        if (in_acc == 0) {
          acc = std::move(r.grad);
          acc *= static_cast<double>(positions);
        } else {
          acc.add_scaled(r.grad, static_cast<double>(positions));
        }
        acc_positions += positions;
        ++in_acc;
        if (in_acc == config.accumulation || b0 + config.batch_size >= order.size()) {
          acc *= 1.0 / static_cast<double>(acc_positions);
          detail::apply_mask(acc, mask);
          apply_update(params, acc, state, config.optimizer);
          require_finite(params.values(), "parameters after update");
          in_acc = 0;
          acc_positions = 0;
        }
      }
      auto e = evaluate(epoch, loss_sum / static_cast<double>(batches));
      fa_history.push_back(e.fa);
      if (config.stop_on_convergence &&
          converged(fa_history, config.convergence_threshold, config.convergence_window)) {
        rec.converged_epoch = epoch;
        break;
      }
    }
  } catch (const NumericError& e) {
    rec.status = RunStatus::kNumericAbort;
    rec.message = e.what();
    logger().error("{}: {}", run_id, e.what());
  }
  rec.final_params = to_stored_precision(params);
  return rec;
}

/// Plain next-token training on a mixture of record sets (the "Original"
/// model). Returns the final parameters at stored precision.
inline RunRecord run_pretrain(const ParameterVector& init,
                              const std::vector<const std::vector<LabeledSequence>*>& pools,
                              const std::vector<LabeledSequence>& retain_eval,
                              const std::vector<LabeledSequence>& forget_eval,
                              const TrainConfig& config, const std::string& run_id) {
  config.validate();
  ILU_REQUIRE(!pools.empty(), "pretraining needs data");
  std::vector<LabeledSequence> all;
  for (const auto* p : pools) all.insert(all.end(), p->begin(), p->end());
  RunRecord rec;
  rec.run_id = run_id;
  rec.config = {{"phase", "pretrain"}, {"train", config}};
  detail::RunClock clock(rec);
  ParameterVector params = init;
  OptimizerState state;
  BatchSampler sampler(all.size(), RngStream(config.seed, detail::name_hash("pretrain")));
  auto evaluate = [&](std::size_t step, std::optional<double> loss) {
    const auto stored = to_stored_precision(params);
    MetricsRow row{run_id, "pretrain", step};
    row.loss = loss;
    row.fq = forget_quality(stored, forget_eval);
    row.utility = utility_accuracy(stored, retain_eval);
    logger().info("{} step {} loss {} fq {:.3f} utility {:.3f}", run_id, step,
                  loss ? fmt::format("{:.4f}", *loss) : "-", *row.fq, *row.utility);
    rec.rows.push_back(row);
  };
  try {
    evaluate(0, std::nullopt);
    double loss_sum = 0.0;
    std::size_t count = 0;
    for (std::size_t s = 1; s <= config.steps; ++s) {
      auto r = retain_loss(params, make_lm_batch(all, sampler.next(config.batch_size)));
      detail::require_finite_loss(r.loss, "at pretraining step " + std::to_string(s));
      apply_update(params, r.grad, state, config.optimizer);
      loss_sum += r.loss;
      ++count;
      if (s % config.eval_every == 0 || s == config.steps) {
        evaluate(s, loss_sum / static_cast<double>(count));
        loss_sum = 0.0;
        count = 0;
      }
    }
  } catch (const NumericError& e) {
    rec.status = RunStatus::kNumericAbort;
    rec.message = e.what();
  }
  rec.final_params = to_stored_precision(params);
  return rec;
}

/// Run manifest: identity, configuration, input hashes and timing.
inline nlohmann::json run_manifest(const RunRecord& rec,
                                   const std::map<std::string, std::string>& dataset_hashes) {
  nlohmann::json ckpts = nlohmann::json::object();
  for (const auto& [k, p] : rec.checkpoints) ckpts[std::to_string(k)] = p.filename().string();
  return {{"run_id", rec.run_id},
          {"config", rec.config},
          {"dataset_hashes", dataset_hashes},
          {"code_version", std::string(kCodeVersion)},
          {"status", to_string(rec.status)},
          {"message", rec.message},
          {"checkpoints", ckpts},
          {"started_at", rec.started_at},
          {"finished_at", rec.finished_at},
          {"seconds", rec.seconds}};
}

}  // namespace ilu
