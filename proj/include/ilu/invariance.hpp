#pragma once

// IRMv1-style invariance penalty. A scalar w multiplies every output logit;
// the penalty for an environment is g^2 with g = d/dw loss(w * z) at w = 1.
// For cross-entropy
//
//   g        = mean_t <p_t - y_t, z_t>
//   dg/dz_t  = [(p_t - y_t) + p_t * z_t - p_t (p_t . z_t)] / N
//
// so the parameter gradient of lambda * g^2 is one extra backward pass with
// logit gradient 2 lambda g dg/dz.

#include <cstddef>
#include <set>
#include <string>
#include <vector>

#include "ilu/error.hpp"
#include "ilu/models.hpp"
#include "ilu/numcore.hpp"
#include "ilu/objectives.hpp"

namespace ilu {

enum class EnvRole { kInvariance, kAttack, kForget, kRetain };

inline std::string to_string(EnvRole r) {
  switch (r) {
    case EnvRole::kInvariance: return "invariance";
    case EnvRole::kAttack: return "attack";
    case EnvRole::kForget: return "forget";
    case EnvRole::kRetain: return "retain";
  }
  return "?";
}

struct Environment {
  std::string name;
  std::string dataset;  // domain name in the suite
  EnvRole role = EnvRole::kInvariance;
  std::size_t batch_size = 48;
};

/// One mini-batch drawn from a named environment.
struct EnvBatch {
  std::string name;
  Batch batch;
};

struct PenaltyReport {
  double lambda = 0.0;
  std::vector<std::string> names;
  std::vector<double> g;
  std::vector<double> penalty;  // g_i^2 (or g_a g_b with the split estimator)
  double total = 0.0;           // lambda * sum(penalty)
};

struct WGradient {
  double g = 0.0;
  Tensor dg_dlogits;  // empty unless requested
  std::size_t supervised = 0;
};

namespace detail {

// g and dg/dz restricted to rows [begin, end); rows outside get zero gradient.
inline WGradient w_gradient_rows(const Tensor& logits, std::span<const std::int32_t> targets,
                                 std::size_t begin, std::size_t end, bool want_grad) {
  check_targets(logits, targets);
  WGradient out;
  for (std::size_t r = begin; r < end; ++r) out.supervised += targets[r] != kIgnoreTarget;
  if (out.supervised == 0) throw ArgumentError("environment batch has no supervised targets");
  const double inv = 1.0 / static_cast<double>(out.supervised);
  const std::size_t k = logits.cols();
  if (want_grad) out.dg_dlogits = Tensor::matrix(logits.rows(), k);
  std::vector<double> p(k);
  for (std::size_t r = begin; r < end; ++r) {
    const auto y = targets[r];
    if (y == kIgnoreTarget) continue;
    auto z = logits.row(r);
    softmax_row(z, p);
    const double pz = dot(p, z);
    out.g += (pz - z[static_cast<std::size_t>(y)]) * inv;
    if (want_grad) {
      auto d = out.dg_dlogits.row(r);
      for (std::size_t j = 0; j < k; ++j) d[j] = (p[j] + p[j] * z[j] - p[j] * pz) * inv;
      d[static_cast<std::size_t>(y)] -= inv;
    }
  }
  return out;
}

}  // namespace detail

/// g from logits directly.
inline double w_gradient(const Tensor& logits, std::span<const std::int32_t> targets) {
  return detail::w_gradient_rows(logits, targets, 0, logits.rows(), false).g;
}

inline double w_gradient(const ParameterVector& params, const Batch& env_batch) {
  if (env_batch.examples == 0) throw ArgumentError("empty environment batch");
  return w_gradient(forward(params, env_batch, false).logits, env_batch.targets);
}

inline WGradient penalty_logit_gradient(const Tensor& logits,
                                        std::span<const std::int32_t> targets) {
  return detail::w_gradient_rows(logits, targets, 0, logits.rows(), true);
}

inline WGradient penalty_logit_gradient(const ParameterVector& params, const Batch& env_batch) {
  if (env_batch.examples == 0) throw ArgumentError("empty environment batch");
  return penalty_logit_gradient(forward(params, env_batch, false).logits, env_batch.targets);
}

struct PenaltyOptions {
  // Estimate g^2 as g(first half) * g(second half) instead of g(batch)^2.
  bool split_estimator = false;
};

struct PenaltyResult {
  PenaltyReport report;
  ParameterVector grad;
};

/// lambda * sum_i g_i^2 over the given environment batches, with gradient.
inline PenaltyResult invariance_penalty(const ParameterVector& params, double lambda,
                                        const std::vector<EnvBatch>& envs,
                                        PenaltyOptions options = {}) {
  ILU_REQUIRE(lambda >= 0.0, "lambda must be >= 0");
  std::set<std::string> seen;
  PenaltyResult out{{}, params.zeros_like()};
  out.report.lambda = lambda;
  for (const auto& env : envs) {
    if (!seen.insert(env.name).second) {
      throw ArgumentError("duplicate environment name '" + env.name + "'");
    }
    const Batch& b = env.batch;
    if (b.examples == 0) throw ArgumentError("empty batch for environment '" + env.name + "'");
    auto tape = record(params, b);
    Tensor dlogits;
    double g = 0.0, pen = 0.0;
    if (options.split_estimator) {
      if (b.examples < 2) {
        throw ArgumentError("split estimator needs >= 2 examples in '" + env.name + "'");
      }
      const std::size_t mid = (b.examples / 2) * b.seq_len;
      auto a = detail::w_gradient_rows(tape.logits, b.targets, 0, mid, true);
      auto c = detail::w_gradient_rows(tape.logits, b.targets, mid, tape.logits.rows(), true);
      g = w_gradient(tape.logits, b.targets);
      pen = a.g * c.g;
      dlogits = std::move(a.dg_dlogits);
      for (std::size_t i = 0; i < dlogits.size(); ++i) {
        dlogits[i] = lambda * (c.g * dlogits[i] + a.g * c.dg_dlogits[i]);
      }
    } else {
      auto w = penalty_logit_gradient(tape.logits, b.targets);
      g = w.g;
      pen = g * g;
      dlogits = std::move(w.dg_dlogits);
      for (double& v : dlogits.data()) v *= 2.0 * lambda * g;
    }
    out.report.names.push_back(env.name);
    out.report.g.push_back(g);
    out.report.penalty.push_back(pen);
    if (lambda != 0.0) out.grad += backward(params, tape, dlogits);
  }
  double sum = 0.0;
  for (double p : out.report.penalty) sum += p;
  out.report.total = lambda * sum;
  return out;
}

struct IluLoss {
  double loss = 0.0;
  UnlearnLoss unlearn;  // grad moved into `grad` below
  PenaltyReport penalty;
  ParameterVector grad;
};

/// unlearn_loss + lambda * sum_i g_i^2. With lambda == 0 the penalty is not
/// evaluated at all, so the result is bit-identical to unlearn_loss.
inline IluLoss ilu_loss(const ParameterVector& params, const UnlearnSpec& spec, double lambda,
                        const std::vector<EnvBatch>& envs, const Batch& forget_batch,
                        const Batch& retain_batch, PenaltyOptions options = {}) {
  ILU_REQUIRE(lambda >= 0.0, "lambda must be >= 0");
  if (lambda > 0.0 && envs.empty()) {
    throw ArgumentError("ILU with lambda > 0 needs at least one invariance environment");
  }
  IluLoss out;
  out.unlearn = unlearn_loss(params, spec, forget_batch, retain_batch);
  out.grad = std::move(out.unlearn.grad);
  out.unlearn.grad = ParameterVector();
  out.loss = out.unlearn.loss;
  out.penalty.lambda = lambda;
  if (lambda == 0.0) return out;
  auto pen = invariance_penalty(params, lambda, envs, options);
  out.penalty = std::move(pen.report);
  out.loss += out.penalty.total;
  out.grad += pen.grad;
  return out;
}

}  // namespace ilu
