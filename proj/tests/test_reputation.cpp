#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "gfml/reputation.hpp"
#include "gfml/rng.hpp"
#include "support.hpp"

using namespace gfml;
using gfml::testing::code_of;

namespace {
const HeadSimilarity kZero = [](std::size_t, std::size_t) { return 0.0; };
const HeadSimilarity kHalf = [](std::size_t, std::size_t) { return 0.5; };
}  // namespace

TEST(Contribution, Examples) {
  EXPECT_EQ(contribution(-1.0, 20.0, 1.0, 2.0), 0.0);
  EXPECT_EQ(contribution(0.7, 3.0, 1.0, 2.0), 0.0);
  EXPECT_NEAR(contribution(1.0, std::numbers::e - 1.0, 0.0, 0.0), 2.0, 1e-15);
  // a missed deadline is clamped to zero rather than going negative
  EXPECT_EQ(contribution(1.0, 3.0, 4.0, 2.0), 0.0);
}

TEST(GlobalRep, GeometricRecencyWeights) {
  ReputationStore store(0.7, 0.2);
  EXPECT_EQ(store.global_rep(3), 0.0);
  store.record(3, 0, 1, 1.0);
  EXPECT_NEAR(store.global_rep(3), 0.7, 1e-15);
  store.record(3, 1, 4, 1.0);
  EXPECT_NEAR(store.global_rep(3), 1.19, 1e-15);
}

TEST(GlobalRep, OlderEntryContributesAtMostItsWeight) {
  Rng rng(5);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  for (int trial = 0; trial < 50; ++trial) {
    ReputationStore longer(0.7, 0.2), shorter(0.7, 0.2);
    const double oldest = u(rng);
    longer.record(0, 0, 0, oldest);
    const int n = 1 + trial % 6;
    for (int r = 1; r <= n; ++r) {
      const double th = u(rng);
      longer.record(0, 0, r, th);
      shorter.record(0, 0, r, th);
    }
    const double diff = longer.global_rep(0) - shorter.global_rep(0);
    EXPECT_LE(diff, std::pow(0.7, n + 1) * oldest + 1e-12);
    EXPECT_GE(diff, 0.0);
  }
}

TEST(TaskRep, SimilarityWeightsForeignHeads) {
  ReputationStore store(0.7, 0.2);
  store.record(0, 5, 0, 1.0);
  store.record(0, 5, 1, 2.0);
  EXPECT_NEAR(store.task_rep(0, 5, kZero), store.global_rep(0), 1e-15);

  ReputationStore other(0.7, 0.2);
  other.record(1, 9, 0, 1.0);
  EXPECT_EQ(other.task_rep(1, 5, kZero), 0.0);
  EXPECT_NEAR(other.task_rep(1, 5, kHalf), 0.35, 1e-15);
}

TEST(TaskRep, NeverExceedsGlobalWithBoundedSimilarity) {
  Rng rng(9);
  std::uniform_real_distribution<double> u(0.0, 2.0), s(-1.0, 1.0);
  std::uniform_int_distribution<std::size_t> head(0, 3);
  for (int trial = 0; trial < 100; ++trial) {
    ReputationStore store(0.7, 0.2);
    for (int r = 0; r < 8; ++r) store.record(0, head(rng), r, u(rng));
    const double sim = s(rng);
    const HeadSimilarity fn = [sim](std::size_t, std::size_t) { return sim; };
    EXPECT_LE(store.task_rep(0, head(rng), fn), store.global_rep(0) + 1e-12);
  }
}

TEST(OverallRep, WeightedBlend) {
  ReputationStore only_global(0.7, 1.0), only_task(0.7, 0.0), blend(0.5, 0.2);
  for (auto* s : {&only_global, &only_task}) {
    s->record(0, 1, 0, 1.0);
    s->record(0, 2, 1, 3.0);
  }
  EXPECT_EQ(only_global.overall_rep(0, 1, kHalf), only_global.global_rep(0));
  EXPECT_EQ(only_task.overall_rep(0, 1, kHalf), only_task.task_rep(0, 1, kHalf));
  // one same-head entry of 2 gives global = task = 1 with lambda 0.5; a foreign
  // entry of 0.5 older still and similarity 0 leaves global 1.125 vs task 1
  blend.record(0, 7, 0, 0.5);
  blend.record(0, 1, 1, 2.0);
  EXPECT_NEAR(blend.global_rep(0), 1.125, 1e-15);
  EXPECT_NEAR(blend.task_rep(0, 1, kZero), 1.0, 1e-15);
  EXPECT_NEAR(blend.overall_rep(0, 1, kZero), 0.2 * 1.125 + 0.8 * 1.0, 1e-15);
}

TEST(OverallRep, HandArithmetic) {
  // global 1.0 from one entry of 1/0.7; task 0.5 when similarity is 0.5
  ReputationStore store(0.7, 0.2);
  store.record(0, 3, 0, 1.0 / 0.7);
  const HeadSimilarity fn = [](std::size_t, std::size_t) { return 0.5; };
  EXPECT_NEAR(store.overall_rep(0, 4, fn), 0.6, 1e-12);
}

TEST(Store, RejectsBadInput) {
  ReputationStore store(0.7, 0.2);
  store.record(0, 0, 3, 1.0);
  EXPECT_EQ(code_of([&] { store.record(0, 1, 3, 1.0); }), Errc::NonMonotoneRound);
  EXPECT_EQ(code_of([&] { store.record(0, 1, 2, 1.0); }), Errc::NonMonotoneRound);
  EXPECT_EQ(code_of([&] { store.record(1, 1, 2, -0.1); }), Errc::InvalidParam);
  EXPECT_EQ(code_of([&] { store.record(1, 1, 2, NAN); }), Errc::InvalidParam);
  EXPECT_EQ(code_of([] { ReputationStore(1.5, 0.2); }), Errc::InvalidParam);
  EXPECT_EQ(code_of([] { ReputationStore(0.5, -0.2); }), Errc::InvalidParam);
  EXPECT_EQ(store.history(0).size(), 1u);
}

TEST(RepUtility, ContinuityPeakAndLowerBranch) {
  const RepParams p;
  EXPECT_EQ(rep_utility(p.r_th, 3.0, p), 0.5);
  EXPECT_NEAR(rep_utility(std::nextafter(p.r_th, 0.0), 3.0, p), 0.5, 1e-12);
  EXPECT_EQ(rep_utility(3.0, 3.0, p), 1.0);
  EXPECT_NEAR(rep_utility(p.r_th - 0.2, 3.0, p), 0.5 * std::exp(-0.2), 1e-15);
  EXPECT_NEAR(rep_utility(p.r_th - 0.2, 3.0, p), 0.40937, 1e-5);
  // r_bar at the threshold collapses the upper branch to gamma
  EXPECT_EQ(rep_utility(0.5, 0.5, p), 0.5);
}

TEST(RepUtility, StrictlyIncreasingAndInRange) {
  for (double gamma : {0.1, 0.5, 0.9}) {
    for (double r_bar : {0.6, 1.0, 4.0}) {
      const RepParams p{gamma, 0.5};
      double prev = -1.0;
      for (int i = 0; i <= 1000; ++i) {
        const double r = r_bar * i / 1000.0;
        const double h = rep_utility(r, r_bar, p);
        EXPECT_GT(h, prev);
        EXPECT_GT(h, 0.0);
        EXPECT_LE(h, 1.0 + 1e-15);
        prev = h;
      }
    }
  }
}
