#pragma once

// Attacks on an unlearned model: fine-tuning on an unrelated downstream task,
// and relearning on a handful of forget-set samples.

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ilu/error.hpp"
#include "ilu/invariance.hpp"
#include "ilu/metrics.hpp"
#include "ilu/trainer.hpp"

namespace ilu {

enum class AttackKind { kDownstream, kRelearning };

inline std::string to_string(AttackKind k) {
  return k == AttackKind::kDownstream ? "downstream" : "relearning";
}

struct AttackReport {
  AttackKind kind = AttackKind::kDownstream;
  std::string start_id;
  std::string dataset;
  Trajectory trajectory;
  double fq_before = 0.0;
  double fq_after = 0.0;
  double fq_drop = 0.0;  // fq_before - fq_after
  std::optional<double> ra;  // unset for zero-epoch attacks
  double fa_final = 0.0;
  std::optional<Trajectory> original;  // fine-tuning curve of the original model
  std::size_t samples = 0;             // relearning: k
  RunStatus status = RunStatus::kOk;
  std::string message;
  std::vector<MetricsRow> rows;
  ParameterVector final_params;
};

inline nlohmann::json trajectory_json(const Trajectory& t) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& r : t.records) a.push_back({{"epoch", r.epoch}, {"fq", r.fq}, {"fa", r.fa}});
  return a;
}

inline Trajectory trajectory_from_json(const nlohmann::json& a) {
  Trajectory t;
  for (const auto& r : a) {
    t.records.push_back({r.at("epoch").get<std::size_t>(), r.at("fq").get<double>(),
                         r.at("fa").get<double>()});
  }
  t.validate();
  return t;
}

inline nlohmann::json to_json(const AttackReport& r) {
  nlohmann::ordered_json j;
  j["kind"] = to_string(r.kind);
  j["start_checkpoint"] = r.start_id;
  j["dataset"] = r.dataset;
  j["fq_before"] = r.fq_before;
  j["fq_after"] = r.fq_after;
  j["fq_drop"] = r.fq_drop;
  j["ra"] = r.ra ? nlohmann::json(*r.ra) : nlohmann::json(nullptr);
  j["fa_final"] = r.fa_final;
  if (r.kind == AttackKind::kRelearning) j["samples"] = r.samples;
  j["status"] = to_string(r.status);
  if (!r.message.empty()) j["message"] = r.message;
  j["trajectory"] = trajectory_json(r.trajectory);
  if (r.original) j["original_trajectory"] = trajectory_json(*r.original);
  return j;
}

namespace detail {

inline void fill_report(AttackReport& rep, const RunRecord& run) {
  rep.trajectory = run.trajectory;
  rep.trajectory.validate();
  const auto& first = rep.trajectory.records.front();
  const auto& last = rep.trajectory.records.back();
  rep.fq_before = first.fq;
  rep.fq_after = last.fq;
  rep.fq_drop = rep.fq_before - rep.fq_after;
  rep.ra = robust_accuracy(rep.trajectory);
  rep.fa_final = last.fa;
  rep.status = run.status;
  rep.message = run.message;
  rep.rows = run.rows;
  rep.final_params = run.final_params;
}

}  // namespace detail

/// Fine-tune `unlearned` on `task` and, when `original` is given, the
/// original model under the same configuration for the reference curve.
inline AttackReport downstream_attack(const ParameterVector& unlearned, const std::string& start_id,
                                      const Environment& task, const SuiteData& suite,
                                      const TrainConfig& config, const std::string& run_id,
                                      const ParameterVector* original = nullptr,
                                      const std::string& forget_domain = "forget") {
  ILU_REQUIRE(task.role == EnvRole::kAttack, "downstream attack needs an attack-role task");
  ILU_REQUIRE(task.dataset != forget_domain, "attack task must differ from the forget domain");
  const FinetuneData data{&suite.get(task.dataset, "train"), &suite.get(task.dataset, "eval"),
                          &suite.get(forget_domain, "eval")};
  const FinetuneOptions opts{.phase = "attack:" + task.name,
                             .stream = detail::name_hash(task.dataset)};
  AttackReport rep;
  rep.kind = AttackKind::kDownstream;
  rep.start_id = start_id;
  rep.dataset = task.dataset;
  detail::fill_report(rep, run_finetune(unlearned, data, config, run_id, opts));
  if (original) {
    auto ref_opts = opts;
    ref_opts.phase = "original:" + task.name;
    auto ref = run_finetune(*original, data, config, run_id + "/original", ref_opts);
    rep.original = ref.trajectory;
    rep.rows.insert(rep.rows.end(), ref.rows.begin(), ref.rows.end());
  }
  return rep;
}

/// Indices of the k relearning samples, drawn from the run seed's own stream.
inline std::vector<std::size_t> relearning_sample(std::size_t population, std::size_t k,
                                                  std::uint64_t seed) {
  if (k > population) {
    throw ArgumentError("relearning sample k=" + std::to_string(k) + " exceeds the " +
                        std::to_string(population) + " available forget samples");
  }
  std::vector<std::size_t> idx(population);
  for (std::size_t i = 0; i < population; ++i) idx[i] = i;
  RngStream rng(seed, detail::name_hash("relearn"));
  rng.shuffle(idx);
  idx.resize(k);
  return idx;
}

/// Fine-tune on k forget-train samples for `epochs` epochs. FA is measured on
/// the forget eval split. k = 0 or epochs = 0 leaves the model untouched.
inline AttackReport relearning_attack(const ParameterVector& unlearned, const std::string& start_id,
                                      const std::vector<LabeledSequence>& forget_train,
                                      const std::vector<LabeledSequence>& forget_eval,
                                      std::size_t k, std::size_t epochs, TrainConfig config,
                                      const std::string& run_id) {
  const auto idx = relearning_sample(forget_train.size(), k, config.seed);
  AttackReport rep;
  rep.kind = AttackKind::kRelearning;
  rep.start_id = start_id;
  rep.dataset = "forget";
  rep.samples = k;
  if (k == 0 || epochs == 0) {
    const auto stored = to_stored_precision(unlearned);
    const double fq = forget_quality(stored, forget_eval);
    rep.trajectory.records.push_back({0, fq, 1.0 - fq});
    rep.fq_before = rep.fq_after = fq;
    rep.fa_final = rep.trajectory.records[0].fa;
    MetricsRow row{run_id, "relearn", 0};
    row.fq = fq;
    row.fa = rep.fa_final;
    rep.rows.push_back(row);
    rep.final_params = stored;
    return rep;
  }
  std::vector<LabeledSequence> subset;
  for (auto i : idx) subset.push_back(forget_train[i]);
  config.max_epochs = epochs;
  config.stop_on_convergence = false;
  const FinetuneData data{&subset, &forget_eval, &forget_eval};
  detail::fill_report(rep, run_finetune(unlearned, data, config, run_id, {.phase = "relearn"}));
  return rep;
}

}  // namespace ilu
