#pragma once

// Unlearning objectives. Every loss returns its value together with the exact
// parameter gradient, assembled from a logit- or activation-side gradient
// pushed through models::backward.
//
//   retain  : mean cross-entropy on D_r
//   GA      : -(mean cross-entropy on D_f)
//   NPO     : (2/beta) mean_s softplus(beta (log pi_theta(s) - log pi_ref(s)))
//   RMU     : mean_f ||h_l - c u||^2 / d  +  alpha mean_r ||h_l - h_l^frozen||^2 / d
//   combined: forget + gamma * retain     (RMU carries its own retain term)

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "ilu/error.hpp"
#include "ilu/models.hpp"
#include "ilu/numcore.hpp"

namespace ilu {

struct LossGrad {
  double loss = 0.0;
  ParameterVector grad;
};

enum class UnlearnMethod { kGA, kNPO, kRMU };

inline std::string to_string(UnlearnMethod m) {
  switch (m) {
    case UnlearnMethod::kGA: return "GA";
    case UnlearnMethod::kNPO: return "NPO";
    case UnlearnMethod::kRMU: return "RMU";
  }
  return "?";
}

inline UnlearnMethod parse_unlearn_method(const std::string& s) {
  if (s == "GA" || s == "ga") return UnlearnMethod::kGA;
  if (s == "NPO" || s == "npo") return UnlearnMethod::kNPO;
  if (s == "RMU" || s == "rmu") return UnlearnMethod::kRMU;
  throw ArgumentError("unknown unlearning method '" + s + "' (expected GA, NPO or RMU)");
}

/// Fixed unit-norm steering target for RMU, drawn once per run.
struct RandomDirection {
  std::vector<double> u;
  std::uint64_t seed = 0;

  static RandomDirection make(std::size_t dim, std::uint64_t seed) {
    ILU_REQUIRE(dim > 0, "random direction needs a positive dimension");
    RandomDirection d;
    d.seed = seed;
    RngStream rng(seed, 0x524D55);  // "RMU"
    d.u.resize(dim);
    double n = 0.0;
    do {
      for (double& v : d.u) v = rng.uniform();
      n = norm2(d.u);
    } while (n == 0.0);
    for (double& v : d.u) v /= n;
    return d;
  }
};

struct UnlearnSpec {
  UnlearnMethod method = UnlearnMethod::kNPO;
  double gamma = 1.0;   // retain weight (GA, NPO)
  double beta = 0.1;    // NPO temperature
  double steering = 6.5;  // RMU coefficient c
  double alpha = 1.0;   // RMU retain weight
  std::size_t rmu_layer = 0;
  std::shared_ptr<const ParameterVector> reference;  // frozen theta_ref for NPO/RMU
  RandomDirection direction;                         // RMU only

  void validate(const ModelConfig& config) const {
    ILU_REQUIRE(gamma >= 0.0, "gamma must be >= 0");
    if (method == UnlearnMethod::kNPO) {
      ILU_REQUIRE(beta > 0.0, "NPO requires beta > 0");
      ILU_REQUIRE(reference != nullptr, "NPO requires a reference model");
    }
    if (method == UnlearnMethod::kRMU) {
      ILU_REQUIRE(steering > 0.0, "RMU requires c > 0");
      ILU_REQUIRE(alpha >= 0.0, "RMU requires alpha >= 0");
      ILU_REQUIRE(rmu_layer < config.layers, "RMU layer " + std::to_string(rmu_layer) +
                                                 " out of range for " +
                                                 std::to_string(config.layers) + " layers");
      ILU_REQUIRE(reference != nullptr, "RMU requires a frozen model");
      ILU_REQUIRE(direction.u.size() == config.hidden_dim,
                  "RMU direction length must equal the hidden dim");
    }
    if (reference) ILU_REQUIRE(reference->config() == config, "reference model config differs");
  }
};

namespace detail {

inline void require_nonempty(const Batch& b, const char* what) {
  if (b.examples == 0) throw ArgumentError(std::string("empty ") + what + " batch");
}

// Per-sequence summed log-likelihood of supervised targets, plus d/dlogits of
// log pi for each row (onehot - softmax) left unscaled.
struct SequenceLogLik {
  std::vector<double> logpi;        // one per example
  std::vector<bool> supervised;     // example has at least one target
  Tensor dlogpi_dlogits;            // rows of (onehot - p)
};

inline SequenceLogLik sequence_loglik(const Tensor& logits, const Batch& batch, bool want_grad) {
  check_targets(logits, batch.targets);
  SequenceLogLik out;
  out.logpi.assign(batch.examples, 0.0);
  out.supervised.assign(batch.examples, false);
  if (want_grad) out.dlogpi_dlogits = Tensor::matrix(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto y = batch.targets[r];
    if (y == kIgnoreTarget) continue;
    const std::size_t e = r / batch.seq_len;
    auto z = logits.row(r);
    out.logpi[e] += z[static_cast<std::size_t>(y)] - log_sum_exp(z);
    out.supervised[e] = true;
    if (want_grad) {
      auto g = out.dlogpi_dlogits.row(r);
      softmax_row(z, g);
      for (double& v : g) v = -v;
      g[static_cast<std::size_t>(y)] += 1.0;
    }
  }
  return out;
}

}  // namespace detail

/// Mean cross-entropy on a retain batch.
inline LossGrad retain_loss(const ParameterVector& params, const Batch& retain_batch) {
  detail::require_nonempty(retain_batch, "retain");
  auto tape = record(params, retain_batch);
  auto ce = softmax_cross_entropy(tape.logits, retain_batch.targets);
  return {ce.loss, backward(params, tape, ce.logit_grad)};
}

/// Gradient-ascent forget loss: the negated cross-entropy.
inline LossGrad ga_forget_loss(const ParameterVector& params, const Batch& forget_batch) {
  detail::require_nonempty(forget_batch, "forget");
  auto tape = record(params, forget_batch);
  auto ce = softmax_cross_entropy(tape.logits, forget_batch.targets);
  for (double& v : ce.logit_grad.data()) v = -v;
  return {-ce.loss, backward(params, tape, ce.logit_grad)};
}

/// NPO forget loss against a frozen reference model.
inline LossGrad npo_forget_loss(const ParameterVector& params, const ParameterVector& reference,
                                const Batch& forget_batch, double beta) {
  ILU_REQUIRE(beta > 0.0, "NPO beta must be > 0");
  ILU_REQUIRE(params.config() == reference.config(), "NPO reference config differs");
  detail::require_nonempty(forget_batch, "forget");
  auto tape = record(params, forget_batch);
  auto cur = detail::sequence_loglik(tape.logits, forget_batch, true);
  auto ref = detail::sequence_loglik(forward(reference, forget_batch, false).logits, forget_batch,
                                     false);
  std::size_t count = 0;
  for (bool s : cur.supervised) count += s ? 1 : 0;
  if (count == 0) throw ArgumentError("NPO forget batch has no supervised targets");
  const double inv = 1.0 / static_cast<double>(count);
  double loss = 0.0;
  Tensor dlogits = std::move(cur.dlogpi_dlogits);
  std::vector<double> weight(forget_batch.examples, 0.0);
  for (std::size_t e = 0; e < forget_batch.examples; ++e) {
    if (!cur.supervised[e]) continue;
    const double r = cur.logpi[e] - ref.logpi[e];
    loss += (2.0 / beta) * softplus(beta * r) * inv;
    weight[e] = 2.0 * sigmoid(beta * r) * inv;  // d loss / d log pi_theta(s)
  }
  for (std::size_t row = 0; row < dlogits.rows(); ++row) {
    const double w = weight[row / forget_batch.seq_len];
    for (double& v : dlogits.row(row)) v *= w;
  }
  return {loss, backward(params, tape, dlogits)};
}

/// Mean over examples of the summed target log-likelihood, with gradient.
/// The small-beta limit of the NPO gradient points along this quantity's
/// gradient.
inline LossGrad mean_sequence_loglik(const ParameterVector& params, const Batch& batch) {
  auto tape = record(params, batch);
  auto ll = detail::sequence_loglik(tape.logits, batch, true);
  std::size_t count = 0;
  for (bool s : ll.supervised) count += s ? 1 : 0;
  ILU_REQUIRE(count > 0, "batch has no supervised targets");
  double value = 0.0;
  for (std::size_t e = 0; e < batch.examples; ++e) value += ll.logpi[e];
  value /= static_cast<double>(count);
  for (double& v : ll.dlogpi_dlogits.data()) v /= static_cast<double>(count);
  return {value, backward(params, tape, ll.dlogpi_dlogits)};
}

namespace detail {

// weight * mean_i ||diff_i||^2 / d, writing its gradient w.r.t. h into grad_out.
inline double weighted_mse(const RowMat& diff, double weight, Tensor& grad_out) {
  const double norm = 1.0 / static_cast<double>(diff.size());
  grad_out = Tensor::matrix(static_cast<std::size_t>(diff.rows()), static_cast<std::size_t>(diff.cols()));
  MMat(grad_out.data().data(), diff.rows(), diff.cols()) = (2.0 * weight * norm) * diff;
  return weight * diff.squaredNorm() * norm;
}

}  // namespace detail

struct RmuLoss {
  double loss = 0.0;
  double forget_term = 0.0;
  double retain_term = 0.0;
  ParameterVector grad;
};

/// RMU: steer forget activations at `layer` toward c*u and keep retain
/// activations on the frozen model's. Averages run over every position.
inline RmuLoss rmu_loss(const ParameterVector& params, const ParameterVector& frozen,
                        const Batch& forget_batch, const Batch& retain_batch,
                        const RandomDirection& direction, double steering, double alpha,
                        std::size_t layer) {
  const auto& c = params.config();
  ILU_REQUIRE(frozen.config() == c, "RMU frozen model config differs");
  ILU_REQUIRE(layer < c.layers, "RMU layer " + std::to_string(layer) + " out of range");
  ILU_REQUIRE(steering > 0.0, "RMU steering coefficient must be > 0");
  ILU_REQUIRE(alpha >= 0.0, "RMU alpha must be >= 0");
  ILU_REQUIRE(direction.u.size() == c.hidden_dim, "RMU direction length mismatch");
  detail::require_nonempty(forget_batch, "forget");
  detail::require_nonempty(retain_batch, "retain");

  RmuLoss out;
  auto ftape = record(params, forget_batch);
  TraceGrad ftrace;
  const Eigen::RowVectorXd target =
      steering * detail::CRow(direction.u.data(), static_cast<Eigen::Index>(direction.u.size()));
  out.forget_term = detail::weighted_mse(ftape.hidden_state(layer).rowwise() - target, 1.0,
                                         ftrace[layer]);
  out.grad = backward(params, ftape, Tensor(), ftrace);

  if (alpha > 0.0) {
    auto rtape = record(params, retain_batch);
    auto ref_tape = record(frozen, retain_batch);
    TraceGrad rtrace;
    out.retain_term = detail::weighted_mse(
        rtape.hidden_state(layer) - ref_tape.hidden_state(layer), alpha, rtrace[layer]);
    out.grad += backward(params, rtape, Tensor(), rtrace);
  }
  out.loss = out.forget_term + out.retain_term;
  return out;
}

struct UnlearnLoss {
  double loss = 0.0;
  double forget_term = 0.0;
  double retain_term = 0.0;  // already weighted (gamma * l_r, or RMU's alpha term)
  ParameterVector grad;
};

/// Combined objective forget + gamma * retain. For RMU the retain side is its
/// activation-matching term weighted by alpha and gamma is not used.
inline UnlearnLoss unlearn_loss(const ParameterVector& params, const UnlearnSpec& spec,
                                const Batch& forget_batch, const Batch& retain_batch) {
  spec.validate(params.config());
  UnlearnLoss out;
  if (spec.method == UnlearnMethod::kRMU) {
    auto r = rmu_loss(params, *spec.reference, forget_batch, retain_batch, spec.direction,
                      spec.steering, spec.alpha, spec.rmu_layer);
    out.loss = r.loss;
    out.forget_term = r.forget_term;
    out.retain_term = r.retain_term;
    out.grad = std::move(r.grad);
    return out;
  }
  LossGrad forget = spec.method == UnlearnMethod::kGA
                        ? ga_forget_loss(params, forget_batch)
                        : npo_forget_loss(params, *spec.reference, forget_batch, spec.beta);
  out.forget_term = forget.loss;
  out.grad = std::move(forget.grad);
  if (spec.gamma != 0.0) {
    auto retain = retain_loss(params, retain_batch);
    out.retain_term = spec.gamma * retain.loss;
    out.grad.add_scaled(retain.grad, spec.gamma);
  } else {
    detail::require_nonempty(retain_batch, "retain");
  }
  out.loss = out.forget_term + out.retain_term;
  return out;
}

}  // namespace ilu
