#pragma once

// The experiment matrix: pretrain an Original model per seed, unlearn it with
// every (method, variant) cell, attack each unlearned model, and write a
// bundle of CSVs, checkpoints and manifests.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "ilu/attacks.hpp"
#include "ilu/checkpoint.hpp"
#include "ilu/config.hpp"
#include "ilu/datasets.hpp"
#include "ilu/hashing.hpp"
#include "ilu/log.hpp"
#include "ilu/taskvec.hpp"
#include "ilu/trainer.hpp"

namespace ilu {

// ---------------------------------------------------------------------------
// Building blocks shared by the matrix and the single-step CLI commands.

/// Environments by name; batch size follows the single- or multi-environment
/// default by count, so a one-element list is the single-environment setup.
inline std::vector<Environment> named_envs(const ExperimentConfig& c, const std::vector<std::string>& names) {
  std::vector<Environment> out;
  const std::size_t batch = names.size() == 1 ? c.single_env_batch : c.multi_env_batch;
  for (const auto& n : names) {
    detail::check_task_domain(c, n, "--envs");
    out.push_back({n, n, EnvRole::kInvariance, batch});
  }
  return out;
}

inline std::vector<Environment> variant_envs(const ExperimentConfig& c, Variant v) {
  if (v == Variant::kSingle) return named_envs(c, c.single_envs);
  if (v == Variant::kMulti) return named_envs(c, c.multi_envs);
  return {};
}

inline UnlearnSpec make_spec(const ExperimentConfig& c, UnlearnMethod m, std::uint64_t seed) {
  UnlearnSpec s;
  s.method = m;
  s.gamma = c.unlearn.gamma;
  s.beta = c.unlearn.beta;
  s.steering = c.unlearn.steering;
  s.alpha = c.unlearn.alpha;
  s.rmu_layer = c.unlearn.rmu_layer;
  if (m == UnlearnMethod::kRMU) s.direction = RandomDirection::make(c.model.hidden_dim, seed);
  return s;
}

inline TrainConfig unlearn_train(const ExperimentConfig& c, UnlearnMethod m, std::uint64_t seed) {
  TrainConfig t = c.train.unlearn;
  if (auto it = c.unlearn.lr.find(to_string(m)); it != c.unlearn.lr.end()) t.optimizer.lr = it->second;
  t.seed = seed;
  return t;
}

inline TrainConfig attack_train(const ExperimentConfig& c, std::uint64_t seed) {
  TrainConfig t = c.train.attack;
  t.seed = seed;
  return t;
}

/// The relearning attack reuses the attack optimizer with its own batch size.
inline TrainConfig relearn_train(const ExperimentConfig& c, std::uint64_t seed) {
  TrainConfig t = attack_train(c, seed);
  t.batch_size = c.relearn.batch_size;
  return t;
}

inline Environment attack_env(const std::string& task) { return {task, task, EnvRole::kAttack, 0}; }

inline RunRecord pretrain_original(const ExperimentConfig& c, const SuiteData& suite, std::uint64_t seed,
                                   const std::string& run_id) {
  std::vector<const std::vector<LabeledSequence>*> pools;
  for (const auto& d : c.suite.domains) pools.push_back(&suite.get(d.name, "pretrain"));
  TrainConfig t = c.train.pretrain;
  t.seed = seed;
  const auto init = init_model(c.model, RngStream(seed, detail::name_hash("init")));
  return run_pretrain(init, pools, suite.get(c.retain_domain, "eval"), suite.get(c.forget_domain, "eval"),
                      t, run_id);
}

/// sha256 of every JSONL file of a dataset directory, keyed by file name.
inline std::map<std::string, std::string> dataset_hashes(const std::filesystem::path& dir) {
  std::map<std::string, std::string> out;
  if (!std::filesystem::is_directory(dir)) return out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.path().extension() == ".jsonl") out[e.path().filename().string()] = sha256_file(e.path());
  }
  return out;
}

/// Generate the suite into `dir` unless an identical one is already there.
inline SuiteData prepare_suite(const SyntheticSuiteConfig& config, const std::filesystem::path& dir) {
  bool reuse = std::filesystem::exists(dir / "suite.json");
  if (reuse) {
    try {
      reuse = nlohmann::json(load_suite_config(dir)) == nlohmann::json(config);
    } catch (const Error&) {
      reuse = false;
    }
  }
  if (!reuse) generate_suite(config, dir);
  return load_suite(dir);
}

/// Run `fn(i)` for i in [0, n) on up to `workers` threads. Exceptions are
/// rethrown after every task has finished (first by index).
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// ---------------------------------------------------------------------------
// CSV helpers.

namespace detail {

inline std::string num(double v) { return format_number(v); }
inline std::string num(const std::optional<double>& v) { return v ? format_number(*v) : std::string(); }

inline std::string join(const std::vector<std::string>& parts, char sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

inline void write_csv(const std::filesystem::path& path, const std::string& header,
                      const std::vector<std::vector<std::string>>& rows) {
  std::string text = header + "\n";
  for (const auto& r : rows) text += join(r, ',') + "\n";
  write_text(path, text);
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  write_text(path, j.dump(2) + "\n");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Results.

struct OriginalResult {
  std::uint64_t seed = 0;
  RunRecord pretrain;
  std::map<std::string, AttackReport> attacks;  // task -> fine-tune of the Original
};

struct CellResult {
  std::uint64_t seed = 0;
  UnlearnMethod method = UnlearnMethod::kNPO;
  Variant variant = Variant::kBase;
  double lambda = 0.0;
  std::vector<Environment> envs;
  RunRecord unlearn;
  double fq_unlearned = 0.0;
  double utility_unlearned = 0.0;
  std::vector<AttackReport> attacks;  // parallel to attack_tasks
  std::optional<AttackReport> relearn;
  std::optional<double> cos_u_ft, cos_uft_u;
  double norm_u = 0.0, norm_ft = 0.0, norm_uft = 0.0;
  std::optional<Projection> projection;
  std::string error;
  double seconds = 0.0;

  std::string slug() const { return to_string(method) + "-" + to_string(variant); }
  bool ok() const {
    if (!error.empty() || unlearn.status != RunStatus::kOk) return false;
    for (const auto& a : attacks) {
      if (a.status != RunStatus::kOk) return false;
    }
    return !relearn || relearn->status == RunStatus::kOk;
  }
};

struct SweepResult {
  std::uint64_t seed = 0;
  double lambda = 0.0;
  RunRecord unlearn;
  double fq_unlearned = 0.0;
  double utility = 0.0;
  std::vector<AttackReport> attacks;  // parallel to sweep.tasks
  std::string error;
  bool ok() const {
    if (!error.empty() || unlearn.status != RunStatus::kOk) return false;
    for (const auto& a : attacks) {
      if (a.status != RunStatus::kOk) return false;
    }
    return true;
  }
};

struct MatrixResult {
  std::filesystem::path bundle;
  bool complete = true;
  bool numeric_abort = false;
  std::vector<std::string> failures;
  std::vector<OriginalResult> originals;
  std::vector<CellResult> cells;
  std::vector<SweepResult> sweep;
};

// ---------------------------------------------------------------------------
// Pipeline stages.

namespace detail {

inline std::string seed_dir(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

inline CellResult run_cell(const ExperimentConfig& c, const SuiteData& suite, const OriginalResult& orig,
                           UnlearnMethod method, Variant variant, const std::filesystem::path& out) {
  CellResult cell;
  cell.seed = orig.seed;
  cell.method = method;
  cell.variant = variant;
  cell.lambda = variant == Variant::kBase ? 0.0 : c.unlearn.lambda;
  cell.envs = variant_envs(c, variant);
  const auto t0 = std::chrono::steady_clock::now();
  const std::string id = seed_dir(orig.seed) + "/" + cell.slug();
  const auto dir = out / "runs" / seed_dir(orig.seed) / cell.slug();
  std::filesystem::create_directories(dir);
  const auto& original = orig.pretrain.final_params;
  const auto data = UnlearnData::from_suite(suite, cell.envs, c.forget_domain, c.retain_domain);
  try {
    cell.unlearn = run_unlearning(original, make_spec(c, method, orig.seed), cell.lambda, cell.envs, data,
                                  unlearn_train(c, method, orig.seed), id + "/unlearn");
    const auto& theta_u = cell.unlearn.final_params;
    save_checkpoint(theta_u, dir / "unlearned.ckpt");
    cell.unlearn.checkpoints[c.train.unlearn.steps] = dir / "unlearned.ckpt";
    cell.fq_unlearned = forget_quality(theta_u, suite.get(c.forget_domain, "eval"));
    cell.utility_unlearned = utility_accuracy(theta_u, suite.get(c.retain_domain, "eval"));
    if (cell.unlearn.status != RunStatus::kOk) throw NumericError(cell.unlearn.message);

    const auto atk = attack_train(c, orig.seed);
    for (const auto& task : c.attack_tasks) {
      auto rep = downstream_attack(theta_u, id + "/unlearned.ckpt", attack_env(task), suite, atk,
                                   id + "/attack:" + task, nullptr, c.forget_domain);
      rep.original = orig.attacks.at(task).trajectory;
      write_json(dir / ("attack_" + task + ".json"), to_json(rep));
      if (task == c.taskvec_task) {
        save_checkpoint(rep.final_params, dir / ("attack_" + task + "_final.ckpt"));
        const auto& theta_ft = orig.attacks.at(task).final_params;
        const auto tu = task_vector(theta_u, original, "unlearn", "original");
        const auto tft = task_vector(theta_ft, original, "finetune", "original");
        const auto tuft = task_vector(rep.final_params, theta_u, "unlearn->finetune", "unlearned");
        const auto tuft_o = task_vector(rep.final_params, original, "unlearned+finetune", "original");
        cell.norm_u = tu.norm;
        cell.norm_ft = tft.norm;
        cell.norm_uft = tuft.norm;
        if (tu.norm > 0 && tft.norm > 0) cell.cos_u_ft = cosine(tu, tft);
        if (tu.norm > 0 && tuft.norm > 0) cell.cos_uft_u = cosine(tuft, tu);
        try {
          cell.projection = project_2d(tu, tft, {tuft_o});
        } catch (const ArgumentError& e) {
          logger().warn("{}: no projection ({})", id, e.what());
        }
      }
      cell.attacks.push_back(std::move(rep));
    }
    cell.relearn = relearning_attack(theta_u, id + "/unlearned.ckpt", suite.get(c.forget_domain, "train"),
                                     suite.get(c.forget_domain, "eval"), c.relearn.k, c.relearn.epochs,
                                     relearn_train(c, orig.seed), id + "/relearn");
    write_json(dir / "relearn.json", to_json(*cell.relearn));
  } catch (const NumericError& e) {
    cell.error = std::string("numeric abort: ") + e.what();
  } catch (const Error& e) {
    cell.error = e.what();
  }
  cell.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_json(dir / "manifest.json", run_manifest(cell.unlearn, dataset_hashes(out / "data")));
  logger().info("{} fq {:.3f} utility {:.3f} ({:.1f}s){}", id, cell.fq_unlearned, cell.utility_unlearned,
                cell.seconds, cell.error.empty() ? "" : " error: " + cell.error);
  return cell;
}

inline SweepResult run_sweep_point(const ExperimentConfig& c, const SuiteData& suite, const OriginalResult& orig,
                                   double lambda, const std::filesystem::path& out) {
  SweepResult r;
  r.seed = orig.seed;
  r.lambda = lambda;
  const auto method = parse_unlearn_method(c.sweep.method);
  const auto envs = variant_envs(c, parse_variant(c.sweep.variant));
  const std::string slug = fmt::format("lambda_{}", format_number(lambda));
  const std::string id = seed_dir(orig.seed) + "/sweep/" + slug;
  const auto dir = out / "sweep" / seed_dir(orig.seed) / slug;
  std::filesystem::create_directories(dir);
  try {
    const auto data = UnlearnData::from_suite(suite, envs, c.forget_domain, c.retain_domain);
    r.unlearn = run_unlearning(orig.pretrain.final_params, make_spec(c, method, orig.seed), lambda, envs, data,
                               unlearn_train(c, method, orig.seed), id + "/unlearn");
    save_checkpoint(r.unlearn.final_params, dir / "unlearned.ckpt");
    r.fq_unlearned = forget_quality(r.unlearn.final_params, suite.get(c.forget_domain, "eval"));
    r.utility = utility_accuracy(r.unlearn.final_params, suite.get(c.retain_domain, "eval"));
    if (r.unlearn.status != RunStatus::kOk) throw NumericError(r.unlearn.message);
    for (const auto& task : c.sweep.tasks) {
      r.attacks.push_back(downstream_attack(r.unlearn.final_params, id + "/unlearned.ckpt", attack_env(task),
                                            suite, attack_train(c, orig.seed), id + "/attack:" + task, nullptr,
                                            c.forget_domain));
    }
  } catch (const NumericError& e) {
    r.error = std::string("numeric abort: ") + e.what();
  } catch (const Error& e) {
    r.error = e.what();
  }
  write_json(dir / "manifest.json", run_manifest(r.unlearn, dataset_hashes(out / "data")));
  return r;
}

}  // namespace detail

/// Pretrain the Original of each seed and fine-tune it on every attack task.
inline std::vector<OriginalResult> run_originals(const ExperimentConfig& c, const SuiteData& suite,
                                                 const std::vector<std::uint64_t>& seeds,
                                                 const std::filesystem::path& out, std::size_t parallel) {
  std::vector<OriginalResult> res(seeds.size());
  parallel_for(seeds.size(), parallel, [&](std::size_t i) {
    res[i].seed = seeds[i];
    const auto dir = out / "runs" / detail::seed_dir(seeds[i]) / "original";
    std::filesystem::create_directories(dir);
    res[i].pretrain = pretrain_original(c, suite, seeds[i], detail::seed_dir(seeds[i]) + "/original");
    save_checkpoint(res[i].pretrain.final_params, dir / "original.ckpt");
    res[i].pretrain.checkpoints[c.train.pretrain.steps] = dir / "original.ckpt";
    detail::write_json(dir / "manifest.json", run_manifest(res[i].pretrain, dataset_hashes(out / "data")));
  });
  std::vector<std::pair<std::size_t, std::string>> jobs;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (res[i].pretrain.status != RunStatus::kOk) continue;
    for (const auto& t : c.attack_tasks) jobs.emplace_back(i, t);
  }
  std::vector<AttackReport> reports(jobs.size());
  parallel_for(jobs.size(), parallel, [&](std::size_t j) {
    const auto& [i, task] = jobs[j];
    const std::string id = detail::seed_dir(seeds[i]) + "/original";
    reports[j] = downstream_attack(res[i].pretrain.final_params, id + "/original.ckpt", attack_env(task), suite,
                                   attack_train(c, seeds[i]), id + "/attack:" + task, nullptr, c.forget_domain);
    const auto dir = out / "runs" / detail::seed_dir(seeds[i]) / "original";
    detail::write_json(dir / ("attack_" + task + ".json"), to_json(reports[j]));
    save_checkpoint(reports[j].final_params, dir / ("finetuned_" + task + ".ckpt"));
  });
  for (std::size_t j = 0; j < jobs.size(); ++j) res[jobs[j].first].attacks[jobs[j].second] = std::move(reports[j]);
  return res;
}

// ---------------------------------------------------------------------------
// Bundle writing.

namespace detail {

inline std::vector<std::string> attack_row(const std::string& run_id, std::uint64_t seed, const std::string& method,
                                           const std::string& variant, const std::string& task, bool seen,
                                           const AttackReport& a) {
  return {run_id, std::to_string(seed), method, variant, task, seen ? "1" : "0", num(a.fq_before),
          num(a.fq_after), num(a.fq_drop), num(a.ra), num(a.fa_final),
          std::to_string(a.trajectory.epochs()), to_string(a.status)};
}

inline constexpr std::string_view kAttacksHeader =
    "run_id,seed,method,variant,task,seen,fq_before,fq_after,fq_drop,ra,fa_final,epochs,status";

}  // namespace detail

/// Heatmap cell values: mean FQ over seeds, before any fine-tuning and after
/// the attack on each task. Rows follow (method, variant) order.
struct Heatmap {
  std::vector<std::string> rows;
  std::vector<std::string> columns;  // "no_finetune", then attack tasks
  std::vector<std::vector<std::optional<double>>> values;
};

inline Heatmap build_heatmap(const ExperimentConfig& c, const std::vector<CellResult>& cells) {
  Heatmap h;
  h.columns.push_back("no_finetune");
  for (const auto& t : c.attack_tasks) h.columns.push_back(t);
  for (auto m : c.method_list()) {
    for (auto v : c.variant_list()) {
      h.rows.push_back(approach_label(m, v));
      std::vector<double> sum(h.columns.size(), 0.0);
      std::vector<std::size_t> n(h.columns.size(), 0);
      for (const auto& cell : cells) {
        if (cell.method != m || cell.variant != v || !cell.ok()) continue;
        sum[0] += cell.fq_unlearned;
        ++n[0];
        for (std::size_t t = 0; t < cell.attacks.size(); ++t) {
          sum[t + 1] += cell.attacks[t].fq_after;
          ++n[t + 1];
        }
      }
      std::vector<std::optional<double>> row;
      for (std::size_t k = 0; k < sum.size(); ++k) {
        row.push_back(n[k] ? std::optional<double>(sum[k] / static_cast<double>(n[k])) : std::nullopt);
      }
      h.values.push_back(row);
    }
  }
  return h;
}

/// sha256 of every file under the bundle except manifest.json itself.
inline nlohmann::json bundle_file_list(const std::filesystem::path& bundle) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(bundle)) {
    if (!e.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(e.path(), bundle);
    if (rel == "manifest.json") continue;
    files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  nlohmann::json list = nlohmann::json::array();
  for (const auto& f : files) {
    list.push_back({{"path", f.generic_string()},
                    {"bytes", std::filesystem::file_size(bundle / f)},
                    {"sha256", sha256_file(bundle / f)}});
  }
  return list;
}

/// Paths whose current hash differs from the manifest (missing files included).
inline std::vector<std::string> verify_bundle(const std::filesystem::path& bundle) {
  std::ifstream in(bundle / "manifest.json", std::ios::binary);
  if (!in) throw IoError("bundle manifest missing in " + bundle.string());
  const auto m = nlohmann::json::parse(in);
  std::vector<std::string> bad;
  for (const auto& f : m.at("files")) {
    const auto p = bundle / f.at("path").get<std::string>();
    if (!std::filesystem::exists(p) || sha256_file(p) != f.at("sha256").get<std::string>()) {
      bad.push_back(f.at("path").get<std::string>());
    }
  }
  return bad;
}

inline void write_bundle(const ExperimentConfig& c, MatrixResult& r) {
  namespace fs = std::filesystem;
  const auto& out = r.bundle;
  using detail::num;
  std::vector<MetricsRow> metrics;
  std::vector<std::vector<std::string>> unlearn_rows, attack_rows, relearn_rows, tv_rows, sweep_rows;
  nlohmann::json timings = nlohmann::json::object();
  fs::create_directories(out / "taskvec");

  for (const auto& o : r.originals) {
    metrics.insert(metrics.end(), o.pretrain.rows.begin(), o.pretrain.rows.end());
    timings[detail::seed_dir(o.seed) + "/original"] = o.pretrain.seconds;
    for (const auto& task : c.attack_tasks) {
      auto it = o.attacks.find(task);
      if (it == o.attacks.end()) continue;
      metrics.insert(metrics.end(), it->second.rows.begin(), it->second.rows.end());
      attack_rows.push_back(detail::attack_row(detail::seed_dir(o.seed) + "/original/attack:" + task, o.seed,
                                               "Original", "-", task, false, it->second));
    }
    // Pairwise cosines of the Original's fine-tuning directions.
    std::vector<TaskVector> fts;
    for (const auto& task : c.attack_tasks) {
      auto it = o.attacks.find(task);
      if (it == o.attacks.end()) continue;
      fts.push_back(task_vector(it->second.final_params, o.pretrain.final_params, task, "original"));
    }
    if (!fts.empty()) {
      write_cosine_csv(out / "taskvec" / (detail::seed_dir(o.seed) + "_finetune_cosines.csv"), fts);
    }
  }
  for (const auto& cell : r.cells) {
    const std::string id = detail::seed_dir(cell.seed) + "/" + cell.slug();
    const std::string m = to_string(cell.method), v = to_string(cell.variant);
    metrics.insert(metrics.end(), cell.unlearn.rows.begin(), cell.unlearn.rows.end());
    timings[id] = cell.seconds;
    std::vector<std::string> env_names;
    for (const auto& e : cell.envs) env_names.push_back(e.name);
    const std::string status = cell.error.empty() ? to_string(cell.unlearn.status) : "error";
    unlearn_rows.push_back({id + "/unlearn", std::to_string(cell.seed), m, v, num(cell.lambda),
                            detail::join(env_names, '+'), num(cell.fq_unlearned), num(cell.utility_unlearned),
                            status});
    for (std::size_t t = 0; t < cell.attacks.size(); ++t) {
      const auto& a = cell.attacks[t];
      const bool seen = std::find(env_names.begin(), env_names.end(), a.dataset) != env_names.end();
      metrics.insert(metrics.end(), a.rows.begin(), a.rows.end());
      attack_rows.push_back(detail::attack_row(id + "/attack:" + a.dataset, cell.seed, m, v, a.dataset, seen, a));
    }
    if (cell.relearn) {
      const auto& a = *cell.relearn;
      metrics.insert(metrics.end(), a.rows.begin(), a.rows.end());
      relearn_rows.push_back({id + "/relearn", std::to_string(cell.seed), m, v, std::to_string(a.samples),
                              std::to_string(c.relearn.epochs), num(a.fq_before), num(a.fq_after),
                              num(a.fq_drop), to_string(a.status)});
    }
    if (cell.cos_u_ft || cell.cos_uft_u) {
      tv_rows.push_back({std::to_string(cell.seed), m, v, c.taskvec_task, num(cell.cos_u_ft), num(cell.cos_uft_u),
                         num(cell.norm_u), num(cell.norm_ft), num(cell.norm_uft)});
    }
    if (cell.projection) {
      write_projection_csv(out / "taskvec" / (detail::seed_dir(cell.seed) + "_" + cell.slug() + "_projection.csv"),
                           *cell.projection);
    }
  }
  for (const auto& s : r.sweep) {
    metrics.insert(metrics.end(), s.unlearn.rows.begin(), s.unlearn.rows.end());
    for (std::size_t t = 0; t < s.attacks.size(); ++t) {
      const auto& a = s.attacks[t];
      metrics.insert(metrics.end(), a.rows.begin(), a.rows.end());
      sweep_rows.push_back({fmt::format("{}/sweep/lambda_{}/attack:{}", detail::seed_dir(s.seed),
                                        format_number(s.lambda), a.dataset),
                            std::to_string(s.seed), c.sweep.method, num(s.lambda), a.dataset, num(s.fq_unlearned),
                            num(s.utility), num(a.fq_before), num(a.fq_after), num(a.fq_drop), num(a.ra),
                            num(a.fa_final), to_string(a.status)});
    }
    if (s.attacks.empty()) {
      sweep_rows.push_back({fmt::format("{}/sweep/lambda_{}", detail::seed_dir(s.seed), format_number(s.lambda)),
                            std::to_string(s.seed), c.sweep.method, num(s.lambda), "", num(s.fq_unlearned),
                            num(s.utility), "", "", "", "", "", "error"});
    }
  }

  write_metrics_csv(out / "metrics.csv", metrics);
  detail::write_csv(out / "unlearn.csv", "run_id,seed,method,variant,lambda,envs,fq,utility,status", unlearn_rows);
  detail::write_csv(out / "attacks.csv", std::string(detail::kAttacksHeader), attack_rows);
  detail::write_csv(out / "relearn.csv", "run_id,seed,method,variant,k,epochs,fq_before,fq_after,fq_drop,status",
                    relearn_rows);
  detail::write_csv(out / "taskvec.csv", "seed,method,variant,task,cos_u_ft,cos_uft_u,norm_u,norm_ft,norm_uft",
                    tv_rows);
  if (!r.sweep.empty()) {
    detail::write_csv(out / "sweep.csv",
                      "run_id,seed,method,lambda,task,fq_unlearned,utility,fq_before,fq_after,fq_drop,ra,fa_final,status",
                      sweep_rows);
  }
  const auto h = build_heatmap(c, r.cells);
  std::vector<std::vector<std::string>> hrows;
  for (std::size_t i = 0; i < h.rows.size(); ++i) {
    std::vector<std::string> row{h.rows[i]};
    for (const auto& v : h.values[i]) row.push_back(num(v));
    hrows.push_back(row);
  }
  detail::write_csv(out / "heatmap.csv", "approach," + detail::join(h.columns, ','), hrows);
  detail::write_json(out / "timings.json", timings);
  detail::write_json(out / "config.json", nlohmann::json(c));

  nlohmann::json manifest;
  manifest["status"] = r.complete ? "complete" : "partial";
  manifest["code_version"] = std::string(kCodeVersion);
  manifest["failures"] = r.failures;
  manifest["files"] = bundle_file_list(out);
  detail::write_json(out / "manifest.json", manifest);
}

/// Full matrix. Sub-run failures are recorded and the matrix continues; the
/// result is marked partial.
inline MatrixResult run_matrix(const ExperimentConfig& c, const std::filesystem::path& out, std::size_t parallel = 1) {
  c.validate();
  MatrixResult r;
  r.bundle = out;
  std::filesystem::create_directories(out);
  const auto suite = prepare_suite(c.suite, out / "data");

  std::vector<std::uint64_t> seeds = c.seeds;
  if (c.sweep.enabled) {
    for (auto s : c.sweep_seeds()) {
      if (std::find(seeds.begin(), seeds.end(), s) == seeds.end()) seeds.push_back(s);
    }
  }
  logger().info("pretraining {} original model(s)", seeds.size());
  r.originals = run_originals(c, suite, seeds, out, parallel);
  std::map<std::uint64_t, const OriginalResult*> by_seed;
  for (const auto& o : r.originals) {
    if (o.pretrain.status != RunStatus::kOk) {
      r.failures.push_back(detail::seed_dir(o.seed) + "/original: " + o.pretrain.message);
      r.numeric_abort = true;
      continue;
    }
    by_seed[o.seed] = &o;
  }

  struct Job {
    const OriginalResult* orig;
    UnlearnMethod m;
    Variant v;
  };
  std::vector<Job> jobs;
  for (auto s : c.seeds) {
    if (!by_seed.count(s)) continue;
    for (auto m : c.method_list()) {
      for (auto v : c.variant_list()) jobs.push_back({by_seed[s], m, v});
    }
  }
  r.cells.resize(jobs.size());
  parallel_for(jobs.size(), parallel, [&](std::size_t i) {
    r.cells[i] = detail::run_cell(c, suite, *jobs[i].orig, jobs[i].m, jobs[i].v, out);
  });
  for (const auto& cell : r.cells) {
    if (!cell.ok()) {
      r.failures.push_back(detail::seed_dir(cell.seed) + "/" + cell.slug() + ": " +
                           (cell.error.empty() ? std::string("numeric abort") : cell.error));
      r.numeric_abort = r.numeric_abort || cell.error.rfind("numeric", 0) == 0 ||
                        cell.unlearn.status == RunStatus::kNumericAbort;
    }
  }

  if (c.sweep.enabled) {
    std::vector<std::pair<const OriginalResult*, double>> points;
    for (auto s : c.sweep_seeds()) {
      if (!by_seed.count(s)) continue;
      for (double l : c.unlearn.lambda_grid) points.emplace_back(by_seed[s], l);
    }
    r.sweep.resize(points.size());
    parallel_for(points.size(), parallel, [&](std::size_t i) {
      r.sweep[i] = detail::run_sweep_point(c, suite, *points[i].first, points[i].second, out);
    });
    for (const auto& s : r.sweep) {
      if (!s.ok()) {
        r.failures.push_back(fmt::format("{}/sweep/lambda_{}: {}", detail::seed_dir(s.seed),
                                         format_number(s.lambda), s.error.empty() ? "numeric abort" : s.error));
      }
    }
  }
  r.complete = r.failures.empty();
  write_bundle(c, r);
  logger().info("bundle {} written ({})", out.string(), r.complete ? "complete" : "partial");
  return r;
}

/// Only the lambda sweep (plus the Original models it starts from).
inline MatrixResult run_lambda_sweep(ExperimentConfig c, const std::filesystem::path& out, std::size_t parallel = 1) {
  c.sweep.enabled = true;
  c.validate();
  MatrixResult r;
  r.bundle = out;
  std::filesystem::create_directories(out);
  const auto suite = prepare_suite(c.suite, out / "data");
  r.originals = run_originals(c, suite, c.sweep_seeds(), out, parallel);
  std::vector<std::pair<const OriginalResult*, double>> points;
  for (const auto& o : r.originals) {
    if (o.pretrain.status != RunStatus::kOk) {
      r.failures.push_back(detail::seed_dir(o.seed) + "/original: " + o.pretrain.message);
      r.numeric_abort = true;
      continue;
    }
    for (double l : c.unlearn.lambda_grid) points.emplace_back(&o, l);
  }
  r.sweep.resize(points.size());
  parallel_for(points.size(), parallel, [&](std::size_t i) {
    r.sweep[i] = detail::run_sweep_point(c, suite, *points[i].first, points[i].second, out);
  });
  for (const auto& s : r.sweep) {
    if (!s.ok()) r.failures.push_back(fmt::format("sweep lambda {}: {}", format_number(s.lambda), s.error));
  }
  r.complete = r.failures.empty();
  write_bundle(c, r);
  return r;
}

}  // namespace ilu
