#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "ilu/attacks.hpp"
#include "ilu/hashing.hpp"
#include "test_support.hpp"

namespace ilu {
namespace {

class Attacks : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    SyntheticSuiteConfig sc;
    sc.seed = 8;
    sc.split_sizes = {{"pretrain", 30}, {"train", 30}, {"eval", 20}};
    suite_ = new SuiteData(make_suite(sc));
    ModelConfig mc;
    mc.family = ModelFamily::kTinyLm;
    mc.input_dim = 64;
    mc.hidden_dim = 8;
    mc.layers = 1;
    mc.heads = 2;
    mc.context = 32;
    model_ = new ParameterVector(to_stored_precision(init_model(mc, RngStream(8, 1))));
    other_ = new ParameterVector(to_stored_precision(init_model(mc, RngStream(8, 2))));
  }
  static void TearDownTestSuite() {
    delete suite_;
    delete model_;
    delete other_;
  }
  static TrainConfig config(std::size_t epochs) {
    TrainConfig c;
    c.max_epochs = epochs;
    c.batch_size = 10;
    c.seed = 3;
    c.optimizer.lr = 1e-2;
    c.stop_on_convergence = false;
    return c;
  }
  static SuiteData* suite_;
  static ParameterVector* model_;
  static ParameterVector* other_;
};

SuiteData* Attacks::suite_ = nullptr;
ParameterVector* Attacks::model_ = nullptr;
ParameterVector* Attacks::other_ = nullptr;

const Environment kT2{"T2", "T2", EnvRole::kAttack, 48};

TEST_F(Attacks, ZeroEpochDownstreamAttackIsIdentity) {
  auto r = downstream_attack(*model_, "m", kT2, *suite_, config(0), "a");
  EXPECT_EQ(r.fq_after, r.fq_before);
  EXPECT_EQ(r.fq_drop, 0.0);
  EXPECT_FALSE(r.ra.has_value());
  EXPECT_TRUE(r.final_params == *model_);
  EXPECT_TRUE(to_json(r)["ra"].is_null());
}

TEST_F(Attacks, ReportIsConsistentWithTrajectory) {
  auto r = downstream_attack(*model_, "m", kT2, *suite_, config(3), "a", other_);
  ASSERT_EQ(r.trajectory.records.size(), 4u);
  EXPECT_EQ(r.fq_before, r.trajectory.records.front().fq);
  EXPECT_EQ(r.fq_after, r.trajectory.records.back().fq);
  EXPECT_EQ(r.fq_drop, r.fq_before - r.fq_after);
  EXPECT_EQ(r.ra, robust_accuracy(r.trajectory));
  EXPECT_EQ(r.fa_final, r.trajectory.records.back().fa);
  ASSERT_TRUE(r.original.has_value());
  EXPECT_EQ(r.original->records.size(), 4u);
  const auto j = to_json(r);
  EXPECT_EQ(j["kind"], "downstream");
  EXPECT_EQ(j["dataset"], "T2");
  auto back = trajectory_from_json(j["trajectory"]);
  ASSERT_EQ(back.records.size(), r.trajectory.records.size());
  EXPECT_EQ(robust_accuracy(back), r.ra);
}

TEST_F(Attacks, SameSeedSameReport) {
  auto a = downstream_attack(*model_, "m", kT2, *suite_, config(2), "a");
  auto b = downstream_attack(*model_, "m", kT2, *suite_, config(2), "a");
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  EXPECT_TRUE(a.final_params == b.final_params);
}

TEST_F(Attacks, DownstreamPreconditions) {
  Environment inv{"T1", "T1", EnvRole::kInvariance, 48};
  EXPECT_THROW(downstream_attack(*model_, "m", inv, *suite_, config(1), "a"), ArgumentError);
  Environment fg{"F", "forget", EnvRole::kAttack, 48};
  EXPECT_THROW(downstream_attack(*model_, "m", fg, *suite_, config(1), "a"), ArgumentError);
}

TEST_F(Attacks, RelearningIdentityCases) {
  const auto& ft = suite_->get("forget", "train");
  const auto& fe = suite_->get("forget", "eval");
  for (auto [k, epochs] : {std::pair<std::size_t, std::size_t>{0, 1}, {10, 0}}) {
    auto r = relearning_attack(*model_, "m", ft, fe, k, epochs, config(1), "r");
    EXPECT_EQ(r.fq_drop, 0.0);
    EXPECT_EQ(r.fq_after, r.fq_before);
    EXPECT_TRUE(r.final_params == *model_);
    EXPECT_EQ(r.fq_before, forget_quality(*model_, fe));
  }
}

TEST_F(Attacks, RelearningTrainsOnKSamples) {
  const auto& ft = suite_->get("forget", "train");
  const auto& fe = suite_->get("forget", "eval");
  auto r = relearning_attack(*model_, "m", ft, fe, 12, 2, config(7), "r");
  EXPECT_EQ(r.trajectory.epochs(), 2u);
  EXPECT_EQ(r.samples, 12u);
  EXPECT_FALSE(r.final_params == *model_);
  EXPECT_EQ(to_json(r)["samples"], 12);
  EXPECT_THROW(relearning_attack(*model_, "m", ft, fe, ft.size() + 1, 1, config(1), "r"),
               ArgumentError);
}

TEST(RelearningSample, SeededAndWithoutRepeats) {
  auto a = relearning_sample(100, 60, 1), b = relearning_sample(100, 60, 1);
  auto c = relearning_sample(100, 60, 2);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  EXPECT_EQ(std::set<std::size_t>(a.begin(), a.end()).size(), 60u);
  EXPECT_TRUE(relearning_sample(5, 0, 1).empty());
  EXPECT_THROW(relearning_sample(5, 6, 1), ArgumentError);
}

TEST_F(Attacks, InputCheckpointFileIsNotModified) {
  const auto path = std::filesystem::temp_directory_path() / "ilu_attack_input.ckpt";
  save_checkpoint(*model_, path);
  const auto before = sha256_file(path);
  auto loaded = load_checkpoint(path);
  downstream_attack(loaded, path.string(), kT2, *suite_, config(1), "a");
  relearning_attack(loaded, path.string(), suite_->get("forget", "train"),
                    suite_->get("forget", "eval"), 5, 1, config(1), "r");
  EXPECT_EQ(sha256_file(path), before);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace ilu
