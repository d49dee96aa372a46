#include <cmath>
#include <limits>
#include <map>
#include <vector>

#include <gtest/gtest.h>

#include "gfml/coalition.hpp"
#include "gfml/utility.hpp"
#include "instances.hpp"
#include "support.hpp"

using namespace gfml;
using gfml::testing::code_of;

TEST(Cosine, Examples) {
  const std::vector<double> a{1.0, 2.0, 3.0}, b{-2.0, 1.0, 0.0}, zero(3, 0.0);
  const std::vector<double> neg{-1.0, -2.0, -3.0};
  EXPECT_NEAR(cosine_similarity(a, a), 1.0, 1e-15);
  EXPECT_EQ(cosine_similarity(a, b), 0.0);
  EXPECT_NEAR(cosine_similarity(a, neg), -1.0, 1e-15);
  EXPECT_EQ(cosine_similarity(a, zero), 0.0);
  EXPECT_EQ(code_of([&] { cosine_similarity(a, std::vector<double>{1.0}); }), Errc::DimMismatch);
}

TEST(MmlUtility, Examples) {
  const std::vector<double> no_h{0.0, 0.0};
  UtilityInputs in{0.0, 1e7, 1e7, 1e9, 40.0, 80.0, no_h, 15.0, 5.0, 3e-7, 1e-9};
  EXPECT_NEAR(mml_utility(in), -(3e-7 + 1e-9), 1e-20);

  const std::vector<double> one{1.0};
  UtilityInputs best{1.0, 1e9, 1e7, 1e9, 40.0, 40.0, one, 15.0, 5.0, 4e-7, 1e-9};
  EXPECT_NEAR(mml_utility(best), 35.0, 1e-6);

  double prev = -std::numeric_limits<double>::infinity();
  for (double s = -1.0; s <= 1.0; s += 0.1) {
    in.similarity = s;
    EXPECT_GT(mml_utility(in), prev);
    prev = mml_utility(in);
  }
}

TEST(MmlUtility, CollapsedFrequencyRangeCountsAsFullShare) {
  const std::vector<double> h{0.5};
  UtilityInputs in{0.0, 5e8, 5e8, 5e8, 10.0, 40.0, h, 12.0, 0.0, 0.0, 0.0};
  EXPECT_NEAR(mml_utility(in), 0.25 * 12.0, 1e-12);
  in.delta_hi = 4e8;
  EXPECT_EQ(code_of([&] { mml_utility(in); }), Errc::DegenerateFrequencyRange);
}

TEST(SelectHeads, Examples) {
  PartitionState p;
  p.coalitions = {{0}, {1, 2}, {3, 4, 5}};
  const std::vector<double> rep{0.1, 2.0, 2.0, 1.0, 1.0, 1.0};
  const std::vector<double> tmax{15.0, 11.0, 20.0, 13.0, 13.0, 13.0};
  EXPECT_EQ(select_heads(p, rep, tmax), (std::vector<std::size_t>{0, 1, 3}));

  p.coalitions = {{}};
  EXPECT_EQ(code_of([&] { select_heads(p, rep, tmax); }), Errc::EmptyCoalition);
}

TEST(SelectHeads, ReputationTradesOffAgainstDeadline) {
  PartitionState p;
  p.coalitions = {{0, 1, 2}};
  // scores: 1·1 = 1, 3·0.5 = 1.5, 9·0 = 0
  const std::vector<double> rep{1.0, 3.0, 9.0};
  const std::vector<double> tmax{11.0, 15.5, 20.0};
  EXPECT_EQ(select_heads(p, rep, tmax), std::vector<std::size_t>{1});
}

TEST(Partition, ValidateCatchesBrokenStates) {
  PartitionState p;
  p.coalitions = {{0, 1}, {2}};
  p.heads = {0, 2};
  EXPECT_NO_THROW(p.validate(std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(code_of([&] { p.validate(std::vector<std::size_t>{0, 1, 2, 3}); }), Errc::InvalidParam);
  auto dup = p;
  dup.coalitions[1].push_back(1);
  EXPECT_EQ(code_of([&] { dup.validate(); }), Errc::InvalidParam);
  auto outside = p;
  outside.heads = {2, 0};
  EXPECT_EQ(code_of([&] { outside.validate(); }), Errc::InvalidParam);
}

namespace {

// Learners 0 and 1 head coalitions A=0 and B=1; learner 2 starts in A.
UtilityFn three_learner_game(double in_a, double in_b) {
  return [=](std::size_t learner, std::size_t coalition, std::span<const std::size_t>) {
    if (learner != 2) return 1.0;
    return coalition == 0 ? in_a : in_b;
  };
}

PartitionState three_learner_start() {
  PartitionState p;
  p.coalitions = {{0, 2}, {1}};
  p.heads = {0, 1};
  return p;
}

}  // namespace

TEST(FormCoalitions, SingleCoalitionIsReturnedUnchanged) {
  PartitionState p;
  p.coalitions = {{0, 1, 2, 3}};
  p.heads = {2};
  const auto fn = [](std::size_t, std::size_t, std::span<const std::size_t>) { return 1.0; };
  const auto r = form_coalitions(p, fn);
  EXPECT_EQ(r.partition, p);
  EXPECT_TRUE(r.switches.empty());
  EXPECT_TRUE(check_nash(r.partition, fn).stable);

  PartitionState lone;
  lone.coalitions = {{0}};
  lone.heads = {0};
  EXPECT_TRUE(check_nash(lone, fn).stable);
}

TEST(FormCoalitions, ThreeLearnerGameMatchesEnumeration) {
  const auto fn = three_learner_game(1.0, 3.0);
  const auto r = form_coalitions(three_learner_start(), fn);
  ASSERT_EQ(r.switches.size(), 1u);
  EXPECT_EQ(r.switches[0].learner, 2u);
  EXPECT_EQ(r.switches[0].from, 0u);
  EXPECT_EQ(r.switches[0].to, 1u);
  EXPECT_DOUBLE_EQ(r.switches[0].delta_utility, 2.0);
  const auto stable = gfml::testing::stable_assignments(fn, 3, 2);
  ASSERT_EQ(stable.size(), 1u);
  EXPECT_EQ(stable[0], gfml::testing::assignment_of(r.partition, 3));
}

TEST(FormCoalitions, NegativeEverywhereParksTheLearner) {
  const auto fn = three_learner_game(-1.0, -2.0);
  const auto r = form_coalitions(three_learner_start(), fn);
  EXPECT_EQ(r.partition.parked, std::vector<std::size_t>{2});
  EXPECT_EQ(r.partition.coalitions[0], std::vector<std::size_t>{0});
  EXPECT_TRUE(check_nash(r.partition, fn).stable);
  const auto stable = gfml::testing::stable_assignments(fn, 3, 2);
  ASSERT_EQ(stable.size(), 1u);
  EXPECT_EQ(stable[0][2], kParked);
}

TEST(FormCoalitions, NeverJoinsWhereUtilityIsNegative) {
  // staying at -1 is worse than -0.5 elsewhere, but both are negative
  const auto fn = three_learner_game(-1.0, -0.5);
  const auto r = form_coalitions(three_learner_start(), fn);
  EXPECT_EQ(r.partition.coalition_of(2), kParked);
}

TEST(FormCoalitions, RandomInstancesAreStableAndMatchTheOracle) {
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    const std::size_t n = 4 + seed % 5, m = 2 + seed % 2;
    const auto game = gfml::testing::random_game(seed, n, m);
    const auto fn = game.fn();
    const auto r = form_coalitions(game.round_robin(), fn);
    EXPECT_NO_THROW(r.partition.validate(game.round_robin().all_learners()));
    EXPECT_TRUE(check_nash(r.partition, fn).stable) << "seed " << seed;
    EXPECT_TRUE(gfml::testing::oracle_stable(game, gfml::testing::assignment_of(r.partition, n)))
        << "seed " << seed;
  }
}

TEST(FormCoalitions, EverySwitchStrictlyImprovesTheMover) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto game = gfml::testing::random_game(seed, 12, 3, 0.1);
    const auto fn = game.fn();
    auto p = game.round_robin();
    const auto r = form_coalitions(p, fn);
    // replay the trace on a copy and re-evaluate each move
    for (const auto& ev : r.switches) {
      const double before = ev.from == kParked ? 0.0 : fn(ev.learner, ev.from, p.coalitions[ev.from]);
      if (ev.from == kParked) {
        p.parked.erase(std::find(p.parked.begin(), p.parked.end(), ev.learner));
      } else {
        auto& src = p.coalitions[ev.from];
        src.erase(std::find(src.begin(), src.end(), ev.learner));
      }
      double after = 0.0;
      if (ev.to == kParked) {
        p.parked.insert(std::upper_bound(p.parked.begin(), p.parked.end(), ev.learner), ev.learner);
      } else {
        auto& dst = p.coalitions[ev.to];
        dst.insert(std::upper_bound(dst.begin(), dst.end(), ev.learner), ev.learner);
        after = fn(ev.learner, ev.to, dst);
        EXPECT_GE(after, 0.0);
      }
      EXPECT_GT(after, before) << "seed " << seed << " learner " << ev.learner;
      EXPECT_NEAR(after - before, ev.delta_utility, 1e-9 * (1.0 + std::abs(before)));
      EXPECT_NO_THROW(p.validate());
    }
    EXPECT_EQ(p, r.partition);
  }
}

TEST(FormCoalitions, HeadsNeverMove) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto game = gfml::testing::random_game(seed, 15, 4, 0.2);
    const auto r = form_coalitions(game.round_robin(), game.fn());
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(r.partition.coalition_of(j), j);
    for (const auto& ev : r.switches) EXPECT_GE(ev.learner, 4u);
  }
}

TEST(FormCoalitions, DeterministicForAGivenSeed) {
  const auto game = gfml::testing::random_game(7, 18, 3, 0.05);
  FormationOptions o;
  o.seed = 42;
  const auto a = form_coalitions(game.round_robin(), game.fn(), o);
  const auto b = form_coalitions(game.round_robin(), game.fn(), o);
  EXPECT_EQ(a.partition, b.partition);
  EXPECT_EQ(a.switches.size(), b.switches.size());
  EXPECT_EQ(trace_line(a).dump(), trace_line(b).dump());
}

TEST(FormCoalitions, SafetyBoundRaisesNonConvergence) {
  // with a budget of zero switches even the first move trips the bound
  FormationOptions o;
  o.max_switches = 0;
  EXPECT_EQ(code_of([&] { form_coalitions(three_learner_start(), three_learner_game(0.0, 1.0), o); }),
            Errc::NonConvergence);
}

TEST(FormCoalitions, CyclingGameFallsBackAndIsFlagged) {
  // Learners 2 and 3 chase each other: 2 wants to be with 3, 3 wants to be
  // away from 2. No stable partition exists.
  const UtilityFn chase = [](std::size_t learner, std::size_t, std::span<const std::size_t> members) {
    const bool with2 = std::find(members.begin(), members.end(), 2) != members.end();
    const bool with3 = std::find(members.begin(), members.end(), 3) != members.end();
    if (learner == 2) return with3 ? 2.0 : 1.0;
    if (learner == 3) return with2 ? 1.0 : 2.0;
    return 1.0;
  };
  PartitionState p;
  p.coalitions = {{0, 2}, {1, 3}};
  p.heads = {0, 1};
  EXPECT_TRUE(gfml::testing::stable_assignments(chase, 4, 2).empty());
  const auto r = form_coalitions(p, chase);
  EXPECT_TRUE(r.randomized);
  EXPECT_TRUE(r.history_limited);
  EXPECT_FALSE(check_nash(r.partition, chase).stable);
  const auto line = trace_line(r);
  EXPECT_TRUE(line.at("history_limited").get<bool>());
  EXPECT_EQ(line.at("switches").size(), r.switches.size());
}

TEST(CheckNash, WitnessForAConstructedDeviation) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto game = gfml::testing::random_game(seed, 8, 3);
    const auto fn = game.fn();
    const auto r = form_coalitions(game.round_robin(), fn);
    ASSERT_TRUE(check_nash(r.partition, fn).stable);
    // move the first non-head member into the coalition it likes least
    for (std::size_t j = 0; j < 3; ++j) {
      for (auto i : r.partition.coalitions[j]) {
        if (r.partition.is_head(i)) continue;
        const double stay = fn(i, j, r.partition.coalitions[j]);
        std::size_t worst = j;
        double worst_u = stay;
        for (std::size_t t = 0; t < 3; ++t) {
          if (t == j) continue;
          auto joined = r.partition.coalitions[t];
          joined.insert(std::upper_bound(joined.begin(), joined.end(), i), i);
          const double u = fn(i, t, joined);
          if (u < worst_u) {
            worst_u = u;
            worst = t;
          }
        }
        if (worst == j) continue;
        auto moved = r.partition;
        auto& src = moved.coalitions[j];
        src.erase(std::find(src.begin(), src.end(), i));
        auto& dst = moved.coalitions[worst];
        dst.insert(std::upper_bound(dst.begin(), dst.end(), i), i);
        const auto verdict = check_nash(moved, fn);
        EXPECT_EQ(verdict.stable, gfml::testing::oracle_stable(game, gfml::testing::assignment_of(moved, 8)));
        if (stay >= 0.0 && stay > worst_u + 1e-9) {
          // i itself can go back, so the partition is not stable
          EXPECT_FALSE(verdict.stable) << "seed " << seed;
        }
        goto next_seed;
      }
    }
  next_seed:;
  }
}

TEST(Trace, JsonShape) {
  const auto r = form_coalitions(three_learner_start(), three_learner_game(-1.0, -2.0));
  const auto line = trace_line(r);
  EXPECT_EQ(line.at("round"), 0);
  EXPECT_TRUE(line.at("switches")[0].at("to").is_null());
  EXPECT_EQ(line.at("final_partition").at("parked"), nlohmann::json::array({2}));
  EXPECT_FALSE(line.at("randomized").get<bool>());
}
