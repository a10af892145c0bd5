// ilu: command-line entry point for the unlearning lab.
//
// Exit codes: 0 success, 1 partial matrix, 2 configuration or input error,
// 3 numeric abort (including a failed gradient check).

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "ilu/attacks.hpp"
#include "ilu/checkpoint.hpp"
#include "ilu/config.hpp"
#include "ilu/experiment.hpp"
#include "ilu/gradcheck.hpp"
#include "ilu/log.hpp"
#include "ilu/report.hpp"
#include "ilu/taskvec.hpp"

namespace fs = std::filesystem;
using namespace ilu;

namespace {

constexpr int kOk = 0, kPartial = 1, kInputError = 2, kNumericAbort = 3;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t parallel = 1;
};

struct Options {
  std::string data, model, original, unlearned, finetuned, attacked, bundle;
  std::string method = "NPO";
  std::optional<double> lambda;
  std::vector<std::string> envs, tasks;
  std::string task = "T1";
  std::optional<std::size_t> k, epochs;
};

ExperimentConfig load_config(const Globals& g) {
  ExperimentConfig c = g.config.empty() ? ExperimentConfig{} : load_experiment_config(g.config);
  if (g.seed) c.seeds = {*g.seed};
  if (!g.out.empty()) c.out = g.out;
  c.validate();
  return c;
}

std::uint64_t run_seed(const ExperimentConfig& c) { return c.seeds.front(); }

SuiteData load_data(const ExperimentConfig& c, const Options& o) {
  if (!o.data.empty()) return load_suite(o.data);
  return prepare_suite(c.suite, fs::path(c.out) / "data");
}

fs::path data_dir(const ExperimentConfig& c, const Options& o) {
  return o.data.empty() ? fs::path(c.out) / "data" : fs::path(o.data);
}

ParameterVector load_model(const std::string& path, const SuiteData& suite) {
  auto p = load_checkpoint(path);
  if (p.config().input_dim != suite.config.vocab) {
    throw ArgumentError("checkpoint " + path + " has vocabulary " + std::to_string(p.config().input_dim) +
                        ", data has " + std::to_string(suite.config.vocab));
  }
  return p;
}

int status_code(RunStatus s) { return s == RunStatus::kOk ? kOk : kNumericAbort; }

int cmd_gen_data(const Globals& g) {
  ExperimentConfig c = g.config.empty() ? ExperimentConfig{} : load_experiment_config(g.config);
  if (g.seed) c.suite.seed = *g.seed;
  const fs::path out = g.out.empty() ? fs::path(c.out) / "data" : fs::path(g.out);
  const auto files = generate_suite(c.suite, out);
  std::cout << "wrote " << files.size() << " dataset files to " << out.string() << "\n";
  return kOk;
}

int cmd_pretrain(const Globals& g, const Options& o) {
  const auto c = load_config(g);
  const auto suite = load_data(c, o);
  const fs::path out = c.out;
  fs::create_directories(out);
  const auto seed = run_seed(c);
  auto rec = pretrain_original(c, suite, seed, "seed_" + std::to_string(seed) + "/original");
  if (rec.status != RunStatus::kOk) {
    write_metrics_csv(out / "metrics.csv", rec.rows);
    std::cerr << "numeric abort: " << rec.message << "\n";
    return kNumericAbort;
  }
  save_checkpoint(rec.final_params, out / "original.ckpt");
  rec.checkpoints[c.train.pretrain.steps] = out / "original.ckpt";
  write_metrics_csv(out / "metrics.csv", rec.rows);
  detail::write_json(out / "manifest.json", run_manifest(rec, dataset_hashes(data_dir(c, o))));
  std::cout << fmt::format("original: fq {:.4f} utility {:.4f} -> {}\n", *rec.rows.back().fq,
                           *rec.rows.back().utility, (out / "original.ckpt").string());
  return kOk;
}

int cmd_unlearn(const Globals& g, const Options& o) {
  const auto c = load_config(g);
  const auto suite = load_data(c, o);
  const auto base = load_model(o.model, suite);
  const auto method = parse_unlearn_method(o.method);
  const auto envs = named_envs(c, o.envs);
  const double lambda = o.lambda.value_or(envs.empty() ? 0.0 : c.unlearn.lambda);
  const auto seed = run_seed(c);
  const fs::path out = c.out;
  fs::create_directories(out);
  const auto data = UnlearnData::from_suite(suite, envs, c.forget_domain, c.retain_domain);
  auto rec = run_unlearning(base, make_spec(c, method, seed), lambda, envs, data, unlearn_train(c, method, seed),
                            "unlearn");
  write_metrics_csv(out / "metrics.csv", rec.rows);
  if (rec.status != RunStatus::kOk) {
    std::cerr << "numeric abort: " << rec.message << "\n";
    return kNumericAbort;
  }
  save_checkpoint(rec.final_params, out / "unlearned.ckpt");
  rec.checkpoints[c.train.unlearn.steps] = out / "unlearned.ckpt";
  detail::write_json(out / "manifest.json", run_manifest(rec, dataset_hashes(data_dir(c, o))));
  std::cout << fmt::format("{} lambda {}: fq {:.4f} utility {:.4f} -> {}\n", to_string(method), lambda,
                           forget_quality(rec.final_params, suite.get(c.forget_domain, "eval")),
                           utility_accuracy(rec.final_params, suite.get(c.retain_domain, "eval")),
                           (out / "unlearned.ckpt").string());
  return kOk;
}

int cmd_attack(const Globals& g, const Options& o) {
  const auto c = load_config(g);
  const auto suite = load_data(c, o);
  const auto start = load_model(o.model, suite);
  std::optional<ParameterVector> original;
  if (!o.original.empty()) original = load_model(o.original, suite);
  auto cfg = attack_train(c, run_seed(c));
  if (o.epochs) cfg.max_epochs = *o.epochs;
  detail::check_task_domain(c, o.task, "--task");
  const fs::path out = c.out;
  fs::create_directories(out);
  auto rep = downstream_attack(start, o.model, attack_env(o.task), suite, cfg, "attack:" + o.task,
                               original ? &*original : nullptr, c.forget_domain);
  detail::write_json(out / ("attack_" + o.task + ".json"), to_json(rep));
  write_metrics_csv(out / "metrics.csv", rep.rows);
  save_checkpoint(rep.final_params, out / ("attack_" + o.task + "_final.ckpt"));
  std::cout << fmt::format("attack {}: fq {:.4f} -> {:.4f} (drop {:.4f}), ra {}, fa {:.4f}\n", o.task, rep.fq_before,
                           rep.fq_after, rep.fq_drop, rep.ra ? fmt::format("{:.4f}", *rep.ra) : "n/a", rep.fa_final);
  return status_code(rep.status);
}

int cmd_relearn(const Globals& g, const Options& o) {
  const auto c = load_config(g);
  const auto suite = load_data(c, o);
  const auto start = load_model(o.model, suite);
  const fs::path out = c.out;
  fs::create_directories(out);
  auto rep = relearning_attack(start, o.model, suite.get(c.forget_domain, "train"), suite.get(c.forget_domain, "eval"),
                               o.k.value_or(c.relearn.k), o.epochs.value_or(c.relearn.epochs),
                               relearn_train(c, run_seed(c)), "relearn");
  detail::write_json(out / "relearn.json", to_json(rep));
  write_metrics_csv(out / "metrics.csv", rep.rows);
  std::cout << fmt::format("relearn k={}: fq {:.4f} -> {:.4f} (drop {:.4f})\n", rep.samples, rep.fq_before,
                           rep.fq_after, rep.fq_drop);
  return status_code(rep.status);
}

int cmd_taskvec(const Globals& g, const Options& o) {
  const fs::path out = g.out.empty() ? fs::path("taskvec") : fs::path(g.out);
  fs::create_directories(out);
  const auto orig = load_checkpoint(o.original);
  const auto u = load_checkpoint(o.unlearned);
  const auto ft = load_checkpoint(o.finetuned);
  std::vector<TaskVector> vs{task_vector(u, orig, "unlearn", "original"), task_vector(ft, orig, "finetune", "original")};
  std::vector<TaskVector> others;
  if (!o.attacked.empty()) {
    const auto uft = load_checkpoint(o.attacked);
    vs.push_back(task_vector(uft, u, "unlearn->finetune", "unlearned"));
    others.push_back(task_vector(uft, orig, "unlearned+finetune", "original"));
  }
  write_cosine_csv(out / "cosines.csv", vs);
  write_projection_csv(out / "projection.csv", project_2d(vs[0], vs[1], others));
  for (std::size_t i = 0; i < vs.size(); ++i) {
    for (std::size_t j = i + 1; j < vs.size(); ++j) {
      if (vs[i].norm > 0 && vs[j].norm > 0) {
        std::cout << fmt::format("cos({}, {}) = {:.6f}\n", vs[i].target_id, vs[j].target_id, cosine(vs[i], vs[j]));
      }
    }
  }
  return kOk;
}

int finish_matrix(const MatrixResult& r) {
  std::cout << "bundle " << r.bundle.string() << ": " << (r.complete ? "complete" : "partial") << "\n";
  for (const auto& f : r.failures) std::cerr << "  failed: " << f << "\n";
  return r.complete ? kOk : kPartial;
}

int cmd_sweep(const Globals& g, const Options& o) {
  auto c = load_config(g);
  if (!o.method.empty()) c.sweep.method = o.method;
  if (!o.tasks.empty()) c.sweep.tasks = o.tasks;
  if (g.seed) c.sweep.seeds = {*g.seed};
  c.validate();
  return finish_matrix(run_lambda_sweep(c, c.out, g.parallel));
}

int cmd_matrix(const Globals& g) {
  const auto c = load_config(g);
  return finish_matrix(run_matrix(c, c.out, g.parallel));
}

int cmd_report(const Globals& g, const Options& o) {
  const fs::path bundle = !o.bundle.empty() ? fs::path(o.bundle) : fs::path(g.out);
  if (bundle.empty()) throw ArgumentError("report needs a bundle directory");
  for (const auto& f : write_report(bundle)) std::cout << f.string() << "\n";
  return kOk;
}

int cmd_gradcheck() {
  const auto s = run_gradient_checks();
  for (const auto& r : s.results) {
    std::cout << fmt::format("{:<26} dim {:>5}  rel err {:.3e}  {}\n", r.name, r.dimension, r.relative_error,
                             r.pass ? "ok" : "FAIL");
  }
  std::cout << fmt::format("{} checks in {:.2f}s: {}\n", s.results.size(), s.seconds, s.all_pass() ? "pass" : "FAIL");
  return s.all_pass() ? kOk : kNumericAbort;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Invariant unlearning lab"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  Options o;
  app.add_option("--config", g.config, "experiment config (JSON)")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "run seed (gen-data: suite seed)");
  app.add_option("--out", g.out, "output directory");
  app.add_option("--parallel", g.parallel, "concurrent runs")->check(CLI::PositiveNumber);
  auto add_data = [&](CLI::App* s) { s->add_option("--data", o.data, "dataset directory (default: generate)"); };
  auto add_model = [&](CLI::App* s) { s->add_option("--model", o.model, "start checkpoint")->required(); };

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic suite");
  auto* pre = app.add_subcommand("pretrain", "train the Original model");
  add_data(pre);
  auto* unl = app.add_subcommand("unlearn", "unlearn the forget domain (lambda > 0: ILU)");
  add_data(unl);
  add_model(unl);
  unl->add_option("--method", o.method, "GA, NPO or RMU");
  unl->add_option("--lambda", o.lambda, "invariance weight (default: 0, or the config value when --envs is set)");
  unl->add_option("--envs", o.envs, "invariance environments")->delimiter(',');
  auto* atk = app.add_subcommand("attack", "fine-tune on a downstream task");
  add_data(atk);
  add_model(atk);
  atk->add_option("--task", o.task, "attack task");
  atk->add_option("--epochs", o.epochs, "max epochs");
  atk->add_option("--original", o.original, "Original checkpoint for the reference curve");
  auto* rel = app.add_subcommand("relearn", "relearning attack on forget samples");
  add_data(rel);
  add_model(rel);
  rel->add_option("--k", o.k, "forget samples");
  rel->add_option("--epochs", o.epochs, "epochs");
  auto* tv = app.add_subcommand("taskvec", "task-vector cosines and 2D projection");
  tv->add_option("--original", o.original, "Original checkpoint")->required();
  tv->add_option("--unlearned", o.unlearned, "unlearned checkpoint")->required();
  tv->add_option("--finetuned", o.finetuned, "Original fine-tuned on the task")->required();
  tv->add_option("--attacked", o.attacked, "unlearned model fine-tuned on the task");
  auto* sw = app.add_subcommand("sweep-lambda", "sweep the invariance weight");
  sw->add_option("--method", o.method, "GA, NPO or RMU");
  sw->add_option("--task", o.tasks, "attack task(s)")->delimiter(',');
  auto* mat = app.add_subcommand("run-matrix", "full method x variant x seed matrix");
  auto* rep = app.add_subcommand("report", "render SVG charts and a summary from a bundle");
  rep->add_option("bundle", o.bundle, "bundle directory (default: --out)");
  auto* gc = app.add_subcommand("gradcheck", "finite-difference checks of every analytic gradient");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int r = app.exit(e);
    return r == 0 ? kOk : kInputError;
  }
  // sweep-lambda keeps the config's method unless --method is given.
  if (sw->parsed() && sw->count("--method") == 0) o.method.clear();

  try {
    if (gen->parsed()) return cmd_gen_data(g);
    if (pre->parsed()) return cmd_pretrain(g, o);
    if (unl->parsed()) return cmd_unlearn(g, o);
    if (atk->parsed()) return cmd_attack(g, o);
    if (rel->parsed()) return cmd_relearn(g, o);
    if (tv->parsed()) return cmd_taskvec(g, o);
    if (sw->parsed()) return cmd_sweep(g, o);
    if (mat->parsed()) return cmd_matrix(g);
    if (rep->parsed()) return cmd_report(g, o);
    if (gc->parsed()) return cmd_gradcheck();
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumericAbort;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kInputError;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInputError;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "filesystem error: " << e.what() << "\n";
    return kInputError;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "malformed input: " << e.what() << "\n";
    return kInputError;
  }
  return kInputError;
}
