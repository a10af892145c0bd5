#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "ilu/trainer.hpp"
#include "test_support.hpp"

namespace ilu {
namespace {

using testing::small_mlp;

ParameterVector scalar_params(double v) {
  auto p = init_model(small_mlp(1, 1, 0, 2), RngStream(0, 0));
  for (double& x : p.values()) x = v;
  return p;
}

TEST(Optimizer, SgdStep) {
  auto p = scalar_params(1.0);
  auto g = scalar_params(2.0);
  OptimizerState st;
  OptimizerConfig c{.kind = OptimizerKind::kSgd, .lr = 0.1};
  auto q = optimizer_step(p, g, st, c);
  for (double v : q.values()) EXPECT_DOUBLE_EQ(v, 0.8);
  EXPECT_EQ(st.step, 1u);
  for (double v : p.values()) EXPECT_EQ(v, 1.0);
}

TEST(Optimizer, AdamWFirstStepIsSignedLearningRate) {
  auto p = scalar_params(0.0);
  auto g = scalar_params(2.0);
  OptimizerState st;
  OptimizerConfig c{.kind = OptimizerKind::kAdamW, .lr = 0.1, .eps = 1e-8};
  auto q = optimizer_step(p, g, st, c);
  const double expected = -0.1 * (1.0 - 1e-8 / (2.0 + 1e-8));
  for (double v : q.values()) {
    EXPECT_NEAR(v, expected, 1e-15);
    EXPECT_NEAR(v, -0.1, 1e-8);
  }
}

TEST(Optimizer, ZeroGradientLeavesParametersUnchanged) {
  auto p = init_model(small_mlp(), RngStream(3, 1));
  auto g = p.zeros_like();
  for (auto kind : {OptimizerKind::kSgd, OptimizerKind::kAdamW}) {
    OptimizerState st;
    OptimizerConfig c{.kind = kind, .lr = 0.5};
    auto q = p;
    for (int i = 0; i < 3; ++i) q = optimizer_step(q, g, st, c);
    EXPECT_TRUE(q == p);
  }
}

TEST(Optimizer, DecoupledWeightDecay) {
  auto p = scalar_params(2.0);
  auto g = p.zeros_like();
  OptimizerState st;
  OptimizerConfig c{.kind = OptimizerKind::kAdamW, .lr = 0.1, .weight_decay = 0.5};
  auto q = optimizer_step(p, g, st, c);
  for (double v : q.values()) EXPECT_DOUBLE_EQ(v, 2.0 - 0.1 * 0.5 * 2.0);
}

TEST(Optimizer, RejectsBadConfig) {
  auto p = scalar_params(1.0);
  OptimizerState st;
  EXPECT_THROW(optimizer_step(p, p, st, OptimizerConfig{.lr = 0.0}), ArgumentError);
  EXPECT_THROW(optimizer_step(p, init_model(small_mlp(), RngStream(0, 0)), st, {}), ArgumentError);
}

TEST(BatchSampler, VisitsEveryIndexOncePerPass) {
  BatchSampler s(10, RngStream(5, 0));
  std::multiset<std::size_t> seen;
  for (int i = 0; i < 5; ++i) {
    for (auto k : s.next(4)) seen.insert(k);
  }
  for (std::size_t k = 0; k < 10; ++k) EXPECT_EQ(seen.count(k), 2u);
}

TEST(TrainConfig, ValidatesAndRoundTrips) {
  TrainConfig c;
  c.accumulation = 0;
  EXPECT_THROW(c.validate(), ArgumentError);
  c.accumulation = 2;
  c.convergence_window = 1;
  EXPECT_THROW(c.validate(), ArgumentError);
  c.convergence_window = 2;
  c.optimizer.kind = OptimizerKind::kSgd;
  c.trainable = {"blocks.0"};
  nlohmann::json j = c;
  auto back = j.get<TrainConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  j["learning_rate"] = 1.0;
  EXPECT_THROW(j.get<TrainConfig>(), ConfigError);
}

TEST(MetricsCsv, EmptyCellsForUnsetValues) {
  MetricsRow r{"run", "unlearn", 3};
  r.fq = 0.25;
  EXPECT_EQ(to_csv_line(r), "run,unlearn,3,,0.25,,,,,");
  r.env = "T1";
  r.g = -0.5;
  r.penalty = 0.25;
  EXPECT_EQ(to_csv_line(r), "run,unlearn,3,,0.25,,,T1,-0.5,0.25");
}

// Small suite and model shared by the loop tests.
class TrainerLoop : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    SyntheticSuiteConfig sc;
    sc.seed = 4;
    sc.split_sizes = {{"pretrain", 40}, {"train", 40}, {"eval", 24}};
    suite_ = new SuiteData(make_suite(sc));
    ModelConfig mc;
    mc.family = ModelFamily::kTinyLm;
    mc.input_dim = 64;
    mc.hidden_dim = 8;
    mc.layers = 2;
    mc.heads = 2;
    mc.context = 32;
    base_ = new ParameterVector(to_stored_precision(init_model(mc, RngStream(4, 1))));
  }
  static void TearDownTestSuite() {
    delete suite_;
    delete base_;
  }

  static TrainConfig unlearn_config() {
    TrainConfig c;
    c.steps = 6;
    c.accumulation = 2;
    c.batch_size = 4;
    c.eval_every = 1;
    c.seed = 11;
    return c;
  }

  static FinetuneData finetune_data() {
    return {&suite_->get("T1", "train"), &suite_->get("T1", "eval"), &suite_->get("forget", "eval")};
  }

  static SuiteData* suite_;
  static ParameterVector* base_;
};

SuiteData* TrainerLoop::suite_ = nullptr;
ParameterVector* TrainerLoop::base_ = nullptr;

std::vector<std::string> csv_lines(const RunRecord& r) {
  std::vector<std::string> out;
  for (const auto& row : r.rows) out.push_back(to_csv_line(row));
  return out;
}

TEST_F(TrainerLoop, UnlearningIsDeterministic) {
  std::vector<Environment> envs{{"T1", "T1", EnvRole::kInvariance, 4}};
  auto data = UnlearnData::from_suite(*suite_, envs);
  for (auto method : {UnlearnMethod::kNPO, UnlearnMethod::kRMU}) {
    UnlearnSpec spec;
    spec.method = method;
    auto a = run_unlearning(*base_, spec, 0.5, envs, data, unlearn_config(), "u");
    auto b = run_unlearning(*base_, spec, 0.5, envs, data, unlearn_config(), "u");
    EXPECT_EQ(encode_checkpoint(a.final_params), encode_checkpoint(b.final_params));
    EXPECT_EQ(csv_lines(a), csv_lines(b));
    EXPECT_FALSE(a.final_params == *base_);
    EXPECT_EQ(a.status, RunStatus::kOk);
  }
}

TEST_F(TrainerLoop, ZeroLambdaIluRunIsByteIdenticalToBaseline) {
  std::vector<Environment> envs{{"T1", "T1", EnvRole::kInvariance, 4}};
  auto with_env = UnlearnData::from_suite(*suite_, envs);
  auto without = UnlearnData::from_suite(*suite_, {});
  for (auto method : {UnlearnMethod::kNPO, UnlearnMethod::kRMU, UnlearnMethod::kGA}) {
    UnlearnSpec spec;
    spec.method = method;
    auto ilu = run_unlearning(*base_, spec, 0.0, envs, with_env, unlearn_config(), "run");
    auto baseline = run_unlearning(*base_, spec, 0.0, {}, without, unlearn_config(), "run");
    EXPECT_EQ(encode_checkpoint(ilu.final_params), encode_checkpoint(baseline.final_params));
    EXPECT_EQ(csv_lines(ilu), csv_lines(baseline));
  }
}

TEST_F(TrainerLoop, ZeroStepsReturnsInput) {
  auto data = UnlearnData::from_suite(*suite_, {});
  auto c = unlearn_config();
  c.steps = 0;
  auto r = run_unlearning(*base_, UnlearnSpec{}, 0.0, {}, data, c, "u");
  EXPECT_TRUE(r.final_params == *base_);
  ASSERT_EQ(r.rows.size(), 1u);
  EXPECT_EQ(r.rows[0].step_or_epoch, 0u);
}

TEST_F(TrainerLoop, PositiveLambdaNeedsEnvironments) {
  auto data = UnlearnData::from_suite(*suite_, {});
  EXPECT_THROW(run_unlearning(*base_, UnlearnSpec{}, 0.5, {}, data, unlearn_config(), "u"),
               ArgumentError);
}

TEST_F(TrainerLoop, IluRunLogsPenaltyRowsPerEnvironment) {
  std::vector<Environment> envs{{"T1", "T1", EnvRole::kInvariance, 4},
                                {"T2", "T2", EnvRole::kInvariance, 4}};
  auto data = UnlearnData::from_suite(*suite_, envs);
  auto r = run_unlearning(*base_, UnlearnSpec{}, 1.0, envs, data, unlearn_config(), "u");
  std::size_t t1 = 0, t2 = 0;
  for (const auto& row : r.rows) {
    if (row.env == "T1") ++t1;
    if (row.env == "T2") ++t2;
    if (!row.env.empty()) {
      ASSERT_TRUE(row.g && row.penalty);
      // Rows average over the accumulated micro-steps: mean(g^2) >= mean(g)^2.
      EXPECT_GE(*row.penalty * (1.0 + 1e-12), *row.g * *row.g);
    }
  }
  EXPECT_EQ(t1, 3u);
  EXPECT_EQ(t2, 3u);
}

TEST_F(TrainerLoop, TrainableMaskFreezesOtherTensors) {
  auto data = UnlearnData::from_suite(*suite_, {});
  auto c = unlearn_config();
  c.trainable = {"blocks.1."};
  auto r = run_unlearning(*base_, UnlearnSpec{}, 0.0, {}, data, c, "u");
  const auto& specs = base_->layout().specs;
  bool moved = false;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    auto a = base_->tensor(i);
    auto b = r.final_params.tensor(i);
    const bool same = std::equal(a.begin(), a.end(), b.begin());
    if (specs[i].name.rfind("blocks.1.", 0) == 0) {
      moved = moved || !same;
    } else {
      EXPECT_TRUE(same) << specs[i].name;
    }
  }
  EXPECT_TRUE(moved);
  c.trainable = {"nothing"};
  EXPECT_THROW(run_unlearning(*base_, UnlearnSpec{}, 0.0, {}, data, c, "u"), ArgumentError);
}

TEST_F(TrainerLoop, AccumulationMatchesPooledBatchUnderSgd) {
  TrainConfig a;
  a.optimizer = {.kind = OptimizerKind::kSgd, .lr = 0.05};
  a.max_epochs = 2;
  a.stop_on_convergence = false;
  a.seed = 9;
  a.batch_size = 3;
  a.accumulation = 4;
  TrainConfig b = a;
  b.batch_size = 12;
  b.accumulation = 1;
  auto ra = run_finetune(*base_, finetune_data(), a, "a");
  auto rb = run_finetune(*base_, finetune_data(), b, "b");
  // final_params are rounded to storage precision; compare the loss trail too.
  auto va = ra.final_params.values();
  auto vb = rb.final_params.values();
  for (std::size_t i = 0; i < va.size(); ++i) EXPECT_NEAR(va[i], vb[i], 1e-6);
  // Exact-arithmetic comparison on a single update.
  ParameterVector p = *base_;
  const auto& train = suite_->get("T1", "train");
  std::vector<std::size_t> all(12);
  for (std::size_t i = 0; i < 12; ++i) all[i] = i;
  auto pooled = retain_loss(p, make_lm_batch(train, all)).grad;
  ParameterVector acc = p.zeros_like();
  std::size_t n = 0;
  for (std::size_t k = 0; k < 4; ++k) {
    std::vector<std::size_t> idx{3 * k, 3 * k + 1, 3 * k + 2};
    auto batch = make_lm_batch(train, idx);
    const auto m = count_supervised(batch.targets);
    acc.add_scaled(retain_loss(p, batch).grad, static_cast<double>(m));
    n += m;
  }
  acc *= 1.0 / static_cast<double>(n);
  OptimizerState s1, s2;
  auto u1 = optimizer_step(p, pooled, s1, a.optimizer);
  auto u2 = optimizer_step(p, acc, s2, a.optimizer);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(u1.values()[i], u2.values()[i], 1e-10);
}

TEST_F(TrainerLoop, ZeroEpochFinetuneKeepsOnlyInitialRecord) {
  TrainConfig c;
  c.max_epochs = 0;
  auto r = run_finetune(*base_, finetune_data(), c, "ft");
  ASSERT_EQ(r.trajectory.records.size(), 1u);
  EXPECT_EQ(r.trajectory.epochs(), 0u);
  EXPECT_TRUE(r.final_params == *base_);
  EXPECT_FALSE(robust_accuracy(r.trajectory).has_value());
}

TEST_F(TrainerLoop, EpochCheckpointsReproduceLoggedMetrics) {
  const auto dir = std::filesystem::temp_directory_path() / "ilu_trainer_ckpt";
  std::filesystem::remove_all(dir);
  TrainConfig c;
  c.max_epochs = 3;
  c.batch_size = 8;
  c.stop_on_convergence = false;
  c.seed = 2;
  auto r = run_finetune(*base_, finetune_data(), c, "ft", {.checkpoint_dir = dir});
  ASSERT_EQ(r.checkpoints.size(), 4u);
  for (const auto& e : r.trajectory.records) {
    auto p = load_checkpoint(r.checkpoints.at(e.epoch));
    EXPECT_EQ(forget_quality(p, suite_->get("forget", "eval")), e.fq);
    EXPECT_EQ(accuracy(p, suite_->get("T1", "eval")), e.fa);
  }
  EXPECT_TRUE(load_checkpoint(r.checkpoints.at(3)) == r.final_params);
  std::filesystem::remove_all(dir);
}

TEST_F(TrainerLoop, StopsWhenFaSettles) {
  TrainConfig c;
  c.optimizer = {.kind = OptimizerKind::kSgd, .lr = 1e-9};
  c.max_epochs = 8;
  c.convergence_window = 3;
  c.batch_size = 20;
  auto r = run_finetune(*base_, finetune_data(), c, "ft");
  ASSERT_TRUE(r.converged_epoch.has_value());
  // Three epoch-to-epoch changes need four post-epoch values.
  EXPECT_EQ(*r.converged_epoch, 4u);
  EXPECT_EQ(r.trajectory.epochs(), 4u);
  c.convergence_window = 2;
  EXPECT_EQ(*run_finetune(*base_, finetune_data(), c, "ft").converged_epoch, 3u);
}

TEST_F(TrainerLoop, DivergenceAbortsWithStatus) {
  TrainConfig c;
  c.optimizer = {.kind = OptimizerKind::kSgd, .lr = 1e300};
  c.max_epochs = 3;
  auto r = run_finetune(*base_, finetune_data(), c, "ft");
  EXPECT_EQ(r.status, RunStatus::kNumericAbort);
  EXPECT_FALSE(r.message.empty());
}

TEST_F(TrainerLoop, ManifestCarriesIdentityAndHashes) {
  auto data = UnlearnData::from_suite(*suite_, {});
  auto r = run_unlearning(*base_, UnlearnSpec{}, 0.0, {}, data, unlearn_config(), "u7");
  auto m = run_manifest(r, {{"forget_train.jsonl", "abc"}});
  EXPECT_EQ(m["run_id"], "u7");
  EXPECT_EQ(m["code_version"], std::string(kCodeVersion));
  EXPECT_EQ(m["dataset_hashes"]["forget_train.jsonl"], "abc");
  EXPECT_EQ(m["config"]["method"], "NPO");
  EXPECT_FALSE(m["started_at"].get<std::string>().empty());
}

}  // namespace
}  // namespace ilu
