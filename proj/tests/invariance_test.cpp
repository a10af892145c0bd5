#include <gtest/gtest.h>

#include <cmath>
#include <memory>

#include "ilu/invariance.hpp"
#include "test_support.hpp"

namespace ilu {
namespace {

using testing::small_lm;
using testing::small_mlp;

TEST(WGradient, ZeroLogitsGiveZero) {
  Tensor z({3, 4}, 0.0);
  std::vector<std::int32_t> y{0, 3, 1};
  EXPECT_EQ(w_gradient(z, y), 0.0);
}

TEST(WGradient, MatchesClosedFormAndScalarFiniteDifference) {
  Tensor z({1, 2}, {1.0, 0.0});
  std::vector<std::int32_t> y{0};
  const double g = w_gradient(z, y);
  EXPECT_NEAR(g, -0.268941421369995121, 1e-12);
  // d/dw CE(w z) at w = 1.
  auto scaled = [&](double w) {
    Tensor t({1, 2}, {w, 0.0});
    return softmax_cross_entropy(t, y).loss;
  };
  const double h = 1e-5;
  EXPECT_NEAR(g, (scaled(1 + h) - scaled(1 - h)) / (2 * h), 1e-9);
}

TEST(WGradient, InvariantToPerRowLogitShift) {
  RngStream rng(1, 0);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor z = testing::random_tensor(6, 5, rng.fork(trial));
    for (double& v : z.data()) v *= 4.0;
    std::vector<std::int32_t> y{0, 1, kIgnoreTarget, 4, 2, 3};
    Tensor shifted = z;
    for (std::size_t r = 0; r < 6; ++r) {
      const double c = rng.uniform(-30.0, 30.0);
      for (double& v : shifted.row(r)) v += c;
    }
    EXPECT_NEAR(w_gradient(shifted, y), w_gradient(z, y), 1e-12);
  }
}

TEST(PenaltyLogitGradient, MatchesClosedForm) {
  Tensor z({1, 2}, {1.0, 0.0});
  std::vector<std::int32_t> y{0};
  auto w = penalty_logit_gradient(z, y);
  EXPECT_NEAR(w.dg_dlogits(0, 0), -0.0723294881285133, 1e-12);
  EXPECT_NEAR(w.dg_dlogits(0, 1), 0.0723294881285133, 1e-12);
}

TEST(PenaltyLogitGradient, MatchesFiniteDifferencesOfG) {
  RngStream rng(2, 0);
  Tensor z = testing::random_tensor(5, 4, rng);
  std::vector<std::int32_t> y{3, kIgnoreTarget, 0, 1, 2};
  auto w = penalty_logit_gradient(z, y);
  auto fd = finite_difference_gradient(
      [&](std::span<const double> x) {
        return w_gradient(Tensor({5, 4}, std::vector<double>(x.begin(), x.end())), y);
      },
      z.data());
  EXPECT_LT(relative_error(fd, w.dg_dlogits.data()), 1e-8);
}

TEST(PenaltyLogitGradient, ZeroLogitsGiveZeroPenaltyGradient) {
  auto c = small_mlp(1, 4, 0, 2);
  ParameterVector p(make_layout(c));
  Batch b;
  b.examples = 1;
  b.seq_len = 1;
  b.features = Tensor::matrix(1, 1);
  b.targets = {0};
  auto w = penalty_logit_gradient(p, b);
  EXPECT_EQ(w.g, 0.0);
  EXPECT_NEAR(w.dg_dlogits(0, 0), -0.5, 1e-15);
  auto pen = invariance_penalty(p, 1.0, {{"T", b}});
  for (double v : pen.grad.values()) EXPECT_EQ(v, 0.0);
}

TEST(InvariancePenalty, SquaredGGradientMatchesFiniteDifferences) {
  auto c = small_lm();
  auto p = init_model(c, RngStream(3, 0));
  for (double& v : p.values()) v *= 3.0;  // push g away from zero
  auto b = testing::random_lm_batch(c, 3, 5, RngStream(4, 0), true);
  auto pen = invariance_penalty(p, 1.0, {{"T1", b}});
  auto fd = finite_difference_gradient(
      [&](std::span<const double> x) {
        return testing::at_flat(p, x, [&](const ParameterVector& q) {
          const double g = w_gradient(q, b);
          return g * g;
        });
      },
      p.values(), 1e-5);
  EXPECT_GT(std::abs(pen.report.g[0]), 1e-3);
  EXPECT_LT(relative_error(fd, pen.grad.values()), 1e-4);
}

TEST(InvariancePenalty, SplitEstimatorGradientMatchesFiniteDifferences) {
  auto c = small_mlp();
  auto p = init_model(c, RngStream(5, 0));
  for (double& v : p.values()) v *= 2.0;
  auto b = testing::random_mlp_batch(c, 6, RngStream(6, 0));
  PenaltyOptions opt{.split_estimator = true};
  auto pen = invariance_penalty(p, 0.7, {{"T", b}}, opt);
  auto fd = finite_difference_gradient(
      [&](std::span<const double> x) {
        return testing::at_flat(p, x, [&](const ParameterVector& q) {
          return invariance_penalty(q, 0.7, {{"T", b}}, opt).report.total;
        });
      },
      p.values(), 1e-5);
  EXPECT_LT(relative_error(fd, pen.grad.values()), 1e-4);
  Batch one = b;
  one.examples = 1;
  one.features = Tensor::matrix(1, c.input_dim);
  one.targets.resize(1);
  EXPECT_THROW(invariance_penalty(p, 0.7, {{"T", one}}, opt), ArgumentError);
}

TEST(InvariancePenalty, TotalIsLambdaTimesSumAndAdditiveOverEnvironments) {
  auto c = small_lm();
  auto p = init_model(c, RngStream(7, 0));
  auto a = testing::random_lm_batch(c, 2, 5, RngStream(8, 0));
  auto b = testing::random_lm_batch(c, 4, 3, RngStream(9, 0));
  const double lambda = 1.7;
  auto both = invariance_penalty(p, lambda, {{"A", a}, {"B", b}});
  auto only_a = invariance_penalty(p, lambda, {{"A", a}});
  auto only_b = invariance_penalty(p, lambda, {{"B", b}});
  EXPECT_NEAR(both.report.total, only_a.report.total + only_b.report.total, 1e-12);
  EXPECT_NEAR(both.report.total,
              lambda * (both.report.g[0] * both.report.g[0] + both.report.g[1] * both.report.g[1]),
              1e-12);
  EXPECT_GE(both.report.total, 0.0);
  EXPECT_THROW(invariance_penalty(p, lambda, {{"A", a}, {"A", b}}), ArgumentError);
  EXPECT_THROW(invariance_penalty(p, -1.0, {{"A", a}}), ArgumentError);
  EXPECT_THROW(invariance_penalty(p, lambda, {{"E", Batch{}}}), ArgumentError);
}

TEST(InvariancePenalty, VanishesAtStationaryPointOfEnvironmentLoss) {
  // Conflicting labels on repeated inputs give cross-entropy a finite
  // minimizer; gradient descent to it makes the w-derivative vanish because
  // the head can absorb any rescaling of the logits.
  auto c = small_mlp(2, 6, 1, 3);
  auto p = init_model(c, RngStream(10, 0));
  Batch b;
  b.seq_len = 1;
  const double xs[4][2] = {{1, 0}, {0, 1}, {-1, 0.5}, {0.3, -1}};
  for (int i = 0; i < 4; ++i) {
    for (int rep = 0; rep < 3; ++rep) {
      b.features.data().push_back(xs[i][0]);
      b.features.data().push_back(xs[i][1]);
      b.targets.push_back((i + (rep == 2 ? 1 : 0)) % 3);
    }
  }
  b.examples = b.targets.size();
  b.features = Tensor({b.examples, 2}, b.features.data());
  for (int step = 0; step < 20000; ++step) {
    auto r = retain_loss(p, b);
    p.add_scaled(r.grad, -0.5);
  }
  EXPECT_LT(std::abs(w_gradient(p, b)), 1e-3);
}

TEST(IluLoss, LambdaZeroIsExactlyUnlearnLoss) {
  auto c = small_lm();
  auto ref = std::make_shared<const ParameterVector>(init_model(c, RngStream(11, 0)));
  auto p = init_model(c, RngStream(12, 0));
  auto fb = testing::random_lm_batch(c, 2, 4, RngStream(13, 0));
  auto rb = testing::random_lm_batch(c, 2, 4, RngStream(14, 0));
  auto eb = testing::random_lm_batch(c, 2, 4, RngStream(15, 0));
  UnlearnSpec s;
  s.method = UnlearnMethod::kNPO;
  s.reference = ref;
  auto base = unlearn_loss(p, s, fb, rb);
  auto with_env = ilu_loss(p, s, 0.0, {{"T1", eb}}, fb, rb);
  auto no_env = ilu_loss(p, s, 0.0, {}, fb, rb);
  EXPECT_EQ(with_env.loss, base.loss);
  EXPECT_EQ(with_env.grad, base.grad);
  EXPECT_EQ(no_env.grad, base.grad);
  EXPECT_THROW(ilu_loss(p, s, 0.5, {}, fb, rb), ArgumentError);
}

TEST(IluLoss, TotalIsUnlearnPlusPenalty) {
  auto c = small_lm();
  auto ref = std::make_shared<const ParameterVector>(init_model(c, RngStream(16, 0)));
  auto p = init_model(c, RngStream(17, 0));
  auto fb = testing::random_lm_batch(c, 2, 4, RngStream(18, 0));
  auto rb = testing::random_lm_batch(c, 2, 4, RngStream(19, 0));
  auto eb = testing::random_lm_batch(c, 2, 4, RngStream(20, 0));
  UnlearnSpec s;
  s.method = UnlearnMethod::kGA;
  s.reference = ref;
  auto r = ilu_loss(p, s, 2.0, {{"T1", eb}}, fb, rb);
  const double g = r.penalty.g[0];
  EXPECT_NEAR(r.loss, r.unlearn.loss + 2.0 * g * g, 1e-14);
}

TEST(IluLoss, FullGradientMatchesFiniteDifferences) {
  auto c = small_lm();
  auto ref = std::make_shared<const ParameterVector>(init_model(c, RngStream(21, 0)));
  auto p = init_model(c, RngStream(22, 0));
  auto fb = testing::random_lm_batch(c, 2, 4, RngStream(23, 0));
  auto rb = testing::random_lm_batch(c, 2, 4, RngStream(24, 0), true);
  std::vector<EnvBatch> envs{{"T1", testing::random_lm_batch(c, 2, 4, RngStream(25, 0))},
                             {"T2", testing::random_lm_batch(c, 3, 3, RngStream(26, 0), true)}};
  for (auto m : {UnlearnMethod::kGA, UnlearnMethod::kNPO, UnlearnMethod::kRMU}) {
    UnlearnSpec s;
    s.method = m;
    s.reference = ref;
    s.steering = 3.0;
    s.rmu_layer = 0;
    s.direction = RandomDirection::make(c.hidden_dim, 27);
    auto r = ilu_loss(p, s, 1.3, envs, fb, rb);
    auto fd = finite_difference_gradient(
        [&](std::span<const double> x) {
          return testing::at_flat(
              p, x, [&](const ParameterVector& q) { return ilu_loss(q, s, 1.3, envs, fb, rb).loss; });
        },
        p.values(), 1e-5);
    EXPECT_LT(relative_error(fd, r.grad.values()), 1e-4) << to_string(m);
  }
}

TEST(IluLoss, SingleEnvironmentEqualsOneElementList) {
  auto c = small_mlp();
  auto ref = std::make_shared<const ParameterVector>(init_model(c, RngStream(28, 0)));
  auto p = init_model(c, RngStream(29, 0));
  auto fb = testing::random_mlp_batch(c, 4, RngStream(30, 0));
  auto rb = testing::random_mlp_batch(c, 4, RngStream(31, 0));
  auto eb = testing::random_mlp_batch(c, 4, RngStream(32, 0));
  UnlearnSpec s;
  s.method = UnlearnMethod::kNPO;
  s.reference = ref;
  auto single = ilu_loss(p, s, 0.5, {{"D", eb}}, fb, rb);
  auto multi = ilu_loss(p, s, 0.5, std::vector<EnvBatch>(1, EnvBatch{"D", eb}), fb, rb);
  EXPECT_EQ(single.loss, multi.loss);
  EXPECT_EQ(single.grad, multi.grad);
}

}  // namespace
}  // namespace ilu
