#include <gtest/gtest.h>

#include <vector>

#include "ilu/models.hpp"
#include "test_support.hpp"

namespace ilu {
namespace {

using testing::random_lm_batch;
using testing::random_mlp_batch;
using testing::random_tensor;
using testing::small_lm;
using testing::small_mlp;

double inner(const Tensor& a, const Tensor& b) { return dot(a.data(), b.data()); }

TEST(InitModel, MlpParameterCountMatchesDeclaredShapes) {
  auto c = small_mlp(8, 16, 2, 4);
  auto p = init_model(c, RngStream(1, 0));
  EXPECT_EQ(p.size(), 8u * 16 + 16 + 16 * 16 + 16 + 16 * 4 + 4);
  EXPECT_EQ(p.size(), 484u);
}

TEST(InitModel, TinyLmParameterCountMatchesEnumeration) {
  auto c = small_lm(64, 32, 2, 4, 32);
  auto p = init_model(c, RngStream(1, 0));
  // Enumerate declared tensors: embeddings, per block (2 LN, qkv, out, fc, proj),
  // final LN and head.
  const std::size_t V = 64, d = 32, T = 32;
  std::size_t per_block = (d + d) + (d * 3 * d + 3 * d) + (d * d + d) + (d + d) +
                          (d * 4 * d + 4 * d) + (4 * d * d + d);
  std::size_t expected = V * d + T * d + 2 * per_block + (d + d) + (d * V + V);
  EXPECT_EQ(p.size(), expected);
  EXPECT_EQ(p.size(), tinylm_parameter_count(V, d, 2, T));
  EXPECT_EQ(p.size(), 30656u);
}

TEST(InitModel, DeterministicAndScaled) {
  auto c = small_lm();
  auto a = init_model(c, RngStream(9, 3));
  auto b = init_model(c, RngStream(9, 3));
  auto other = init_model(c, RngStream(10, 3));
  EXPECT_EQ(a, b);
  EXPECT_FALSE(a == other);
  for (const auto& spec : a.layout().specs) {
    auto t = a.tensor(spec.name);
    if (spec.fan_in == 0) {
      for (double v : t) EXPECT_EQ(v, spec.init_value);
    } else {
      const double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
      for (double v : t) EXPECT_LE(std::abs(v), bound);
    }
  }
}

TEST(InitModel, RejectsInvalidConfig) {
  auto c = small_lm(12, 10, 1, 3, 4);  // 10 % 3 != 0
  EXPECT_THROW(init_model(c, RngStream(0, 0)), ArgumentError);
  auto m = small_mlp(0, 4, 1, 2);
  EXPECT_THROW(init_model(m, RngStream(0, 0)), ArgumentError);
}

TEST(Forward, ZeroWeightMlpGivesZeroLogits) {
  auto c = small_mlp();
  auto p = init_model(c, RngStream(0, 0));
  for (double& v : p.values()) v = 0.0;
  auto out = forward(p, random_mlp_batch(c, 4, RngStream(1, 1)), false);
  for (double v : out.logits.data()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, IdentityLinearLayer) {
  auto c = small_mlp(2, 1, 0, 2);
  auto p = init_model(c, RngStream(0, 0));
  auto w = p.tensor("linear.0.weight");
  w[0] = 1.0; w[1] = 0.0; w[2] = 0.0; w[3] = 1.0;
  auto bias = p.tensor("linear.0.bias");
  bias[0] = bias[1] = 0.0;
  Batch b;
  b.examples = 1;
  b.features = Tensor({1, 2}, {1.0, 2.0});
  b.targets = {0};
  auto out = forward(p, b, false);
  EXPECT_EQ(out.logits(0, 0), 1.0);
  EXPECT_EQ(out.logits(0, 1), 2.0);
}

TEST(Forward, DeterministicAcrossCalls) {
  auto c = small_lm();
  auto p = init_model(c, RngStream(4, 0));
  auto batch = random_lm_batch(c, 3, 6, RngStream(5, 0));
  auto a = forward(p, batch, true);
  auto b = forward(p, batch, true);
  EXPECT_EQ(a.logits, b.logits);
  ASSERT_TRUE(a.trace && b.trace);
  EXPECT_EQ(a.trace->layers.size(), c.layers);
  EXPECT_EQ(a.trace->layers.at(1), b.trace->layers.at(1));
  EXPECT_FALSE(forward(p, batch, false).trace.has_value());
}

TEST(Forward, CausalMaskIgnoresFutureTokens) {
  auto c = small_lm();
  auto p = init_model(c, RngStream(4, 0));
  RngStream rng(8, 8);
  for (int trial = 0; trial < 20; ++trial) {
    auto batch = random_lm_batch(c, 2, 6, rng.fork(trial));
    const std::size_t t = rng.below(6);
    auto changed = batch;
    for (std::size_t e = 0; e < 2; ++e)
      for (std::size_t s = t + 1; s < 6; ++s)
        changed.tokens[e * 6 + s] = static_cast<std::int32_t>(rng.below(c.input_dim));
    auto a = forward(p, batch, true);
    auto b = forward(p, changed, true);
    for (std::size_t e = 0; e < 2; ++e) {
      for (std::size_t s = 0; s <= t; ++s) {
        const std::size_t row = e * 6 + s;
        for (std::size_t k = 0; k < c.input_dim; ++k) ASSERT_EQ(a.logits(row, k), b.logits(row, k));
        for (std::size_t k = 0; k < c.hidden_dim; ++k)
          ASSERT_EQ(a.trace->layers.at(0)(row, k), b.trace->layers.at(0)(row, k));
      }
    }
  }
}

TEST(Forward, ShapeErrors) {
  auto c = small_lm();
  auto p = init_model(c, RngStream(4, 0));
  auto batch = random_lm_batch(c, 2, 6, RngStream(1, 1));
  batch.tokens[3] = static_cast<std::int32_t>(c.input_dim);
  EXPECT_THROW(forward(p, batch, false), ArgumentError);
  auto too_long = random_lm_batch(c, 1, 7, RngStream(1, 1));
  EXPECT_THROW(forward(p, too_long, false), ArgumentError);
  auto ok = random_lm_batch(c, 2, 6, RngStream(1, 1));
  EXPECT_THROW(backward(p, ok, Tensor::matrix(3, c.input_dim)), ArgumentError);
  TraceGrad bad;
  bad[5] = Tensor::matrix(12, c.hidden_dim);
  EXPECT_THROW(backward(p, ok, Tensor(), bad), ArgumentError);
}

TEST(Backward, ZeroLogitGradGivesZeroGradient) {
  auto c = small_lm();
  auto p = init_model(c, RngStream(4, 0));
  auto batch = random_lm_batch(c, 2, 5, RngStream(1, 1));
  auto g = backward(p, batch, Tensor::matrix(10, c.input_dim));
  for (double v : g.values()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, MlpMatchesFiniteDifferences) {
  auto c = small_mlp(5, 7, 2, 3);
  auto p = init_model(c, RngStream(2, 0));
  auto batch = random_mlp_batch(c, 6, RngStream(3, 0));
  Tensor g = random_tensor(6, 3, RngStream(4, 0));
  auto analytic = backward(p, batch, g);
  auto fd = finite_difference_gradient(
      [&](std::span<const double> x) {
        return testing::at_flat(p, x, [&](const ParameterVector& q) {
          return inner(g, forward(q, batch, false).logits);
        });
      },
      p.values());
  EXPECT_LT(relative_error(analytic.values(), fd), 1e-5);
}

TEST(Backward, MlpTraceGradMatchesFiniteDifferences) {
  auto c = small_mlp(4, 6, 3, 3);
  auto p = init_model(c, RngStream(2, 1));
  auto batch = random_mlp_batch(c, 5, RngStream(3, 1));
  for (std::size_t layer = 0; layer < c.layers; ++layer) {
    TraceGrad tg;
    tg[layer] = random_tensor(5, 6, RngStream(9, layer));
    auto analytic = backward(p, batch, Tensor(), tg);
    auto fd = finite_difference_gradient(
        [&](std::span<const double> x) {
          return testing::at_flat(p, x, [&](const ParameterVector& q) {
            return inner(tg[layer], forward(q, batch, true).trace->layers.at(layer));
          });
        },
        p.values());
    EXPECT_LT(relative_error(analytic.values(), fd), 1e-5) << "layer " << layer;
  }
}

TEST(Backward, TinyLmLogitsMatchFiniteDifferences) {
  auto c = small_lm();
  auto p = init_model(c, RngStream(12, 0));
  ASSERT_LE(p.size(), 2000u);
  auto batch = random_lm_batch(c, 2, 6, RngStream(13, 0));
  Tensor g = random_tensor(12, c.input_dim, RngStream(14, 0));
  auto analytic = backward(p, batch, g);
  auto fd = finite_difference_gradient(
      [&](std::span<const double> x) {
        return testing::at_flat(p, x, [&](const ParameterVector& q) {
          return inner(g, forward(q, batch, false).logits);
        });
      },
      p.values());
  EXPECT_LT(relative_error(analytic.values(), fd), 1e-5);
}

TEST(Backward, TinyLmTraceGradMatchesFiniteDifferences) {
  auto c = small_lm();
  auto p = init_model(c, RngStream(12, 1));
  auto batch = random_lm_batch(c, 2, 5, RngStream(13, 1));
  for (std::size_t layer = 0; layer < c.layers; ++layer) {
    TraceGrad tg;
    tg[layer] = random_tensor(10, c.hidden_dim, RngStream(15, layer));
    auto analytic = backward(p, batch, Tensor(), tg);
    auto fd = finite_difference_gradient(
        [&](std::span<const double> x) {
          return testing::at_flat(p, x, [&](const ParameterVector& q) {
            return inner(tg[layer], forward(q, batch, true).trace->layers.at(layer));
          });
        },
        p.values());
    EXPECT_LT(relative_error(analytic.values(), fd), 1e-5) << "layer " << layer;
    // Parameters above the traced layer receive no gradient.
    if (layer == 0) {
      for (double v : analytic.tensor("head.weight")) EXPECT_EQ(v, 0.0);
      for (double v : analytic.tensor("blocks.1.mlp.fc.weight")) EXPECT_EQ(v, 0.0);
    }
  }
}

TEST(Backward, IsLinearInUpstreamGradient) {
  auto c = small_lm();
  auto p = init_model(c, RngStream(21, 0));
  auto batch = random_lm_batch(c, 3, 6, RngStream(22, 0));
  Tensor g1 = random_tensor(18, c.input_dim, RngStream(23, 0));
  Tensor g2 = random_tensor(18, c.input_dim, RngStream(24, 0));
  const double a = 0.7, b = -1.9;
  Tensor mix = Tensor::matrix(18, c.input_dim);
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * g1[i] + b * g2[i];
  auto tape = record(p, batch);
  auto lhs = backward(p, tape, mix);
  auto rhs = backward(p, tape, g1);
  rhs *= a;
  rhs.add_scaled(backward(p, tape, g2), b);
  double worst = 0.0;
  for (std::size_t i = 0; i < lhs.size(); ++i)
    worst = std::max(worst, std::abs(lhs.values()[i] - rhs.values()[i]));
  EXPECT_LT(worst, 1e-10);
}

TEST(ParameterVector, FlattenUnflattenRoundTrip) {
  auto c = small_lm();
  auto p = init_model(c, RngStream(31, 0));
  auto q = unflatten(c, p.flatten());
  EXPECT_EQ(p, q);
  EXPECT_EQ(q.flatten(), p.flatten());
  EXPECT_THROW(unflatten(c, std::vector<double>(p.size() + 1)), ArgumentError);
}

}  // namespace
}  // namespace ilu
