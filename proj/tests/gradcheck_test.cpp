#include <gtest/gtest.h>

#include "ilu/gradcheck.hpp"

namespace ilu {
namespace {

TEST(GradCheck, EveryAnalyticGradientMatchesFiniteDifferences) {
  const auto suite = run_gradient_checks();
  EXPECT_GE(suite.results.size(), 12u);
  for (const auto& r : suite.results) {
    EXPECT_LE(r.dimension, 2000u) << r.name;
    EXPECT_TRUE(r.pass) << r.name << " relative error " << r.relative_error;
  }
  EXPECT_TRUE(suite.all_pass());
  EXPECT_LT(suite.seconds, 60.0);
}

}  // namespace
}  // namespace ilu
