#pragma once

// Evaluation quantities. Accuracy is argmax exact match over supervised
// positions; forget quality is 1 - accuracy on the forget eval split; utility
// is accuracy on the retain eval split (the toy stand-in for MMLU).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "ilu/datasets.hpp"
#include "ilu/error.hpp"
#include "ilu/models.hpp"

namespace ilu {

struct AccuracyCount {
  std::size_t correct = 0;
  std::size_t total = 0;

  double fraction() const {
    if (total == 0) throw ArgumentError("accuracy over zero supervised positions");
    return static_cast<double>(correct) / static_cast<double>(total);
  }
  AccuracyCount& operator+=(const AccuracyCount& o) {
    correct += o.correct;
    total += o.total;
    return *this;
  }
};

/// Argmax matches at supervised rows; ties resolve to the lowest class id.
inline AccuracyCount count_correct(const Tensor& logits, std::span<const std::int32_t> targets) {
  check_targets(logits, targets);
  AccuracyCount c;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    if (targets[r] == kIgnoreTarget) continue;
    auto z = logits.row(r);
    const auto best = static_cast<std::int32_t>(std::max_element(z.begin(), z.end()) - z.begin());
    c.correct += best == targets[r];
    ++c.total;
  }
  return c;
}

inline AccuracyCount count_correct(const ParameterVector& params, const Batch& batch) {
  return count_correct(forward(params, batch, false).logits, batch.targets);
}

inline double accuracy(const ParameterVector& params, const Batch& batch) {
  if (batch.examples == 0) throw ArgumentError("accuracy over an empty batch");
  return count_correct(params, batch).fraction();
}

/// Accuracy over a record set, evaluated in chunks of `chunk` sequences.
inline double accuracy(const ParameterVector& params, const std::vector<LabeledSequence>& records,
                       std::size_t chunk = 128) {
  if (records.empty()) throw ArgumentError("accuracy over an empty evaluation set");
  AccuracyCount total;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < records.size(); start += chunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(records.size(), start + chunk); ++i) idx.push_back(i);
    total += count_correct(params, make_lm_batch(records, idx));
  }
  return total.fraction();
}

inline double forget_quality_from_accuracy(double acc) { return 1.0 - acc; }

inline double forget_quality(const ParameterVector& params,
                             const std::vector<LabeledSequence>& forget_eval) {
  return forget_quality_from_accuracy(accuracy(params, forget_eval));
}

inline double utility_accuracy(const ParameterVector& params,
                               const std::vector<LabeledSequence>& retain_eval) {
  return accuracy(params, retain_eval);
}

struct EpochRecord {
  std::size_t epoch = 0;  // 0 = before any fine-tuning
  double fq = 0.0;
  double fa = 0.0;
};

struct Trajectory {
  std::vector<EpochRecord> records;

  std::size_t epochs() const noexcept { return records.empty() ? 0 : records.size() - 1; }

  void validate() const {
    if (records.empty()) throw ArgumentError("empty trajectory");
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto& r = records[i];
      ILU_REQUIRE(r.epoch == i, "trajectory epochs must be contiguous from 0");
      ILU_REQUIRE(r.fq >= 0.0 && r.fq <= 1.0 && r.fa >= 0.0 && r.fa <= 1.0,
                  "trajectory values must be fractions in [0, 1]");
    }
  }
};

struct Milestones {
  std::size_t quartile = 0, median = 0, final = 0;
};

/// 1-based post-epoch milestones ceil(E/4), ceil(E/2), E.
inline Milestones milestone_epochs(std::size_t epochs) {
  ILU_REQUIRE(epochs >= 1, "milestones need at least one fine-tuning epoch");
  return {(epochs + 3) / 4, (epochs + 1) / 2, epochs};
}

/// Mean of FQ at the three milestones of fq_per_epoch (entry i is epoch i + 1).
inline double robust_accuracy(std::span<const double> fq_per_epoch) {
  if (fq_per_epoch.empty()) throw ArgumentError("robust accuracy of an empty trajectory");
  const auto m = milestone_epochs(fq_per_epoch.size());
  const double a = fq_per_epoch[m.quartile - 1], b = fq_per_epoch[m.median - 1],
               c = fq_per_epoch[m.final - 1];
  // The clamp only removes rounding in (x + x + x) / 3 != x.
  return std::clamp((a + b + c) / 3.0, std::min({a, b, c}), std::max({a, b, c}));
}

/// RA over the post-epoch records of a trajectory; nullopt when E = 0.
inline std::optional<double> robust_accuracy(const Trajectory& traj) {
  traj.validate();
  if (traj.epochs() == 0) return std::nullopt;
  std::vector<double> fq;
  for (std::size_t i = 1; i < traj.records.size(); ++i) fq.push_back(traj.records[i].fq);
  return robust_accuracy(fq);
}

/// True once each of the last `window` epoch-to-epoch changes in FA is below
/// `threshold` (absolute, same units as FA).
inline bool converged(std::span<const double> fa_history, double threshold, std::size_t window) {
  ILU_REQUIRE(window >= 1, "convergence window must be >= 1");
  ILU_REQUIRE(threshold > 0.0, "convergence threshold must be > 0");
  if (fa_history.size() < window + 1) return false;
  for (std::size_t i = fa_history.size() - window; i < fa_history.size(); ++i) {
    if (std::abs(fa_history[i] - fa_history[i - 1]) >= threshold) return false;
  }
  return true;
}

}  // namespace ilu
