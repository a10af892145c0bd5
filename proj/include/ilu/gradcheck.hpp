#pragma once

// Central finite-difference checks of every analytic gradient on small
// models (<= 2000 parameters). Shared by the CLI and the acceptance runner.

#include <chrono>
#include <memory>
#include <string>
#include <vector>

#include "ilu/invariance.hpp"
#include "ilu/models.hpp"
#include "ilu/numcore.hpp"
#include "ilu/objectives.hpp"

namespace ilu {

struct GradCheckResult {
  std::string name;
  std::size_t dimension = 0;
  double relative_error = 0.0;
  bool pass = false;
};

struct GradCheckSuite {
  std::vector<GradCheckResult> results;
  double seconds = 0.0;
  bool all_pass() const {
    for (const auto& r : results) {
      if (!r.pass) return false;
    }
    return !results.empty();
  }
};

namespace detail {

inline ModelConfig check_lm() {
  ModelConfig c;
  c.family = ModelFamily::kTinyLm;
  c.input_dim = 10;
  c.hidden_dim = 8;
  c.layers = 2;
  c.heads = 2;
  c.context = 6;
  return c;
}

inline ModelConfig check_mlp() {
  ModelConfig c;
  c.family = ModelFamily::kMlp;
  c.input_dim = 5;
  c.hidden_dim = 7;
  c.layers = 2;
  c.classes = 3;
  return c;
}

inline Batch check_lm_batch(const ModelConfig& c, std::size_t examples, std::size_t len,
                            RngStream rng, bool sparse) {
  Batch b;
  b.examples = examples;
  b.seq_len = len;
  for (std::size_t i = 0; i < examples * len; ++i) {
    b.tokens.push_back(static_cast<std::int32_t>(rng.below(c.input_dim)));
  }
  for (std::size_t i = 0; i < examples * len; ++i) {
    const bool skip = sparse && i % 3 == 0;
    b.targets.push_back(skip ? kIgnoreTarget : static_cast<std::int32_t>(rng.below(c.input_dim)));
  }
  return b;
}

inline Batch check_mlp_batch(const ModelConfig& c, std::size_t examples, RngStream rng) {
  Batch b;
  b.examples = examples;
  b.seq_len = 1;
  b.features = Tensor::matrix(examples, c.input_dim);
  for (double& v : b.features.data()) v = rng.uniform(-1.0, 1.0);
  for (std::size_t i = 0; i < examples; ++i) {
    b.targets.push_back(static_cast<std::int32_t>(rng.below(c.classes)));
  }
  return b;
}

template <typename F>
std::vector<double> param_fd(const ParameterVector& p, F&& loss, double h) {
  return finite_difference_gradient(
      [&](std::span<const double> x) { return loss(ParameterVector(p.layout_ptr(), x)); },
      p.values(), h);
}

}  // namespace detail

inline GradCheckSuite run_gradient_checks(double tolerance = 1e-4, double h = 1e-4) {
  const auto start = std::chrono::steady_clock::now();
  GradCheckSuite suite;
  auto add = [&](std::string name, std::span<const double> fd, std::span<const double> analytic) {
    const double err = relative_error(fd, analytic);
    suite.results.push_back({std::move(name), fd.size(), err, err < tolerance});
  };

  const auto lm = detail::check_lm();
  const auto mlp = detail::check_mlp();
  const auto p = init_model(lm, RngStream(101, 0));
  const auto ref = std::make_shared<const ParameterVector>(init_model(lm, RngStream(102, 0)));
  const auto fb = detail::check_lm_batch(lm, 2, 5, RngStream(103, 0), false);
  const auto rb = detail::check_lm_batch(lm, 2, 5, RngStream(104, 0), true);
  const std::vector<EnvBatch> envs{{"T1", detail::check_lm_batch(lm, 2, 4, RngStream(105, 0), false)},
                                   {"T2", detail::check_lm_batch(lm, 3, 3, RngStream(106, 0), true)}};

  {
    RngStream rng(107, 0);
    Tensor z = Tensor::matrix(4, 5);
    for (double& v : z.data()) v = rng.uniform(-3.0, 3.0);
    const std::vector<std::int32_t> y{1, kIgnoreTarget, 4, 0};
    auto ce = softmax_cross_entropy(z, y);
    auto fd = finite_difference_gradient(
        [&](std::span<const double> x) { return softmax_cross_entropy(Tensor({4, 5}, x), y).loss; },
        z.data(), h);
    add("cross_entropy", fd, ce.logit_grad.data());

    // d/dw CE(w z) at w = 1, and d g / d z.
    const double g = w_gradient(z, y);
    auto scaled = [&](double w) {
      Tensor t = z;
      for (double& v : t.data()) v *= w;
      return softmax_cross_entropy(t, y).loss;
    };
    const std::vector<double> fd_w{(scaled(1.0 + h) - scaled(1.0 - h)) / (2.0 * h)};
    add("w_gradient", fd_w, std::vector<double>{g});
    auto pg = penalty_logit_gradient(z, y);
    auto fd_g = finite_difference_gradient(
        [&](std::span<const double> x) { return w_gradient(Tensor({4, 5}, x), y); }, z.data(), h);
    add("penalty_logit_gradient", fd_g, pg.dg_dlogits.data());
  }

  {
    auto r = retain_loss(p, rb);
    add("retain_loss/tinylm", detail::param_fd(p, [&](const auto& q) { return retain_loss(q, rb).loss; }, h),
        r.grad.values());
    const auto pm = init_model(mlp, RngStream(108, 0));
    const auto mb = detail::check_mlp_batch(mlp, 6, RngStream(109, 0));
    auto rm = retain_loss(pm, mb);
    add("retain_loss/mlp", detail::param_fd(pm, [&](const auto& q) { return retain_loss(q, mb).loss; }, h),
        rm.grad.values());
  }

  {
    auto ga = ga_forget_loss(p, fb);
    add("ga", detail::param_fd(p, [&](const auto& q) { return ga_forget_loss(q, fb).loss; }, h),
        ga.grad.values());
    auto npo = npo_forget_loss(p, *ref, fb, 0.7);
    add("npo", detail::param_fd(p, [&](const auto& q) { return npo_forget_loss(q, *ref, fb, 0.7).loss; }, h),
        npo.grad.values());
    const auto dir = RandomDirection::make(lm.hidden_dim, 110);
    for (std::size_t layer = 0; layer < lm.layers; ++layer) {
      auto rmu = rmu_loss(p, *ref, fb, rb, dir, 3.0, 0.8, layer);
      add("rmu/layer" + std::to_string(layer),
          detail::param_fd(p, [&](const auto& q) { return rmu_loss(q, *ref, fb, rb, dir, 3.0, 0.8, layer).loss; }, h),
          rmu.grad.values());
    }
  }

  {
    auto scaled = p;
    for (double& v : scaled.values()) v *= 2.0;  // keep g away from zero
    auto pen = invariance_penalty(scaled, 0.9, envs);
    add("invariance_penalty",
        detail::param_fd(scaled, [&](const auto& q) { return invariance_penalty(q, 0.9, envs).report.total; }, h),
        pen.grad.values());
    for (auto m : {UnlearnMethod::kGA, UnlearnMethod::kNPO, UnlearnMethod::kRMU}) {
      UnlearnSpec s;
      s.method = m;
      s.reference = ref;
      s.steering = 3.0;
      s.rmu_layer = 1;
      s.direction = RandomDirection::make(lm.hidden_dim, 111);
      auto l = ilu_loss(p, s, 1.3, envs, fb, rb);
      add("ilu_loss/" + to_string(m),
          detail::param_fd(p, [&](const auto& q) { return ilu_loss(q, s, 1.3, envs, fb, rb).loss; }, h),
          l.grad.values());
    }
  }
  suite.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return suite;
}

}  // namespace ilu
