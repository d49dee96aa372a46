#pragma once

// Seeded random instances shared by unit tests and the acceptance suite,
// plus brute-force oracles that do not reuse the code under test.

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "gfml/coalition.hpp"
#include "gfml/ledger.hpp"
#include "gfml/rng.hpp"
#include "gfml/stackelberg.hpp"

namespace gfml::testing {

/// Follower drawn from the default operating ranges: frequency bounds
/// around [1e7, 1e9], rate in [5e6, 1e7], a few hundred samples.
inline FollowerSpec random_follower(Rng& rng, std::size_t learner) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  FollowerSpec f;
  f.learner = learner;
  f.similarity = 2.0 * unit(rng) - 1.0;
  f.data_size = 20.0 + std::floor(400.0 * unit(rng));
  f.h_value = 0.05 + 0.95 * unit(rng);
  f.delta_min = 1e7 * (0.5 + unit(rng));
  f.delta_max = 1e9 * (0.3 + 0.7 * unit(rng));
  f.cost.rate = 5e6 + 5e6 * unit(rng);
  return f;
}

/// Coalition whose deadline is drawn from [11, 20] s.
inline CoalitionContext random_context(Rng& rng, std::size_t n) {
  std::vector<FollowerSpec> members;
  for (std::size_t k = 0; k < n; ++k) members.push_back(random_follower(rng, k));
  std::uniform_real_distribution<double> t(11.0, 20.0);
  return CoalitionContext(std::move(members), t(rng));
}

// Three followers whose stationary point stays inside [1e7, 1e9] for every
// incentive in [5, 15]: comparable data shares and a capacitance large
// enough for the energy term to bite.
inline CoalitionContext interior_context(Rng& rng, std::size_t n) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<FollowerSpec> members;
  for (std::size_t k = 0; k < n; ++k) {
    auto f = random_follower(rng, k);
    f.delta_min = 1e7;
    f.delta_max = 1e9;
    f.data_size = 100.0 + 100.0 * unit(rng);
    f.cost.zeta = 2e-20 * (0.75 + 0.5 * unit(rng));
    members.push_back(f);
  }
  return CoalitionContext(std::move(members), 19.0);
}

/// Interior-type followers with a common upload time of one second and a
/// deadline whose compute allowance corresponds to a log-uniform frequency
/// in [1e7, 1e9], so some members end up deadline-bound.
inline CoalitionContext binding_context(Rng& rng, std::size_t n) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto ctx = interior_context(rng, n);
  std::vector<FollowerSpec> members(ctx.members().begin(), ctx.members().end());
  for (auto& f : members) f.cost.rate = f.cost.model_bits;
  const auto& f = members.front();
  const double work = f.tau * f.cost.cycles_per_sample * static_cast<double>(f.batch);
  const double critical = std::exp(std::log(1e7) + unit(rng) * (std::log(1e9) - std::log(1e7)));
  return CoalitionContext(std::move(members), 1.0 + work / critical);
}

/// Utility of a follower at frequency delta, written out from the
/// definition rather than through the library's utility helpers.
inline double direct_follower_utility(const CoalitionContext& ctx, std::size_t k, double delta,
                                      double i_comp, double i_rep) {
  const auto& m = ctx.members()[k];
  const double share = (delta - ctx.delta_lo()) / (ctx.delta_hi() - ctx.delta_lo());
  double data_total = 0.0, h_sum = 0.0;
  for (const auto& o : ctx.members()) {
    data_total += o.data_size;
    h_sum += o.h_value;
  }
  const double work = m.tau * m.cost.cycles_per_sample * static_cast<double>(m.batch);
  const double e_comp = m.cost.rho * work * m.cost.zeta * delta * delta;
  const double x = delta / (1.0 - m.cost.eps_loss);
  const double e_comm = m.cost.comm_a * x * x + m.cost.comm_b * x + m.cost.comm_z;
  return (m.similarity + share * m.data_size / data_total) * i_comp +
         h_sum / static_cast<double>(ctx.size()) * i_rep - e_comp - e_comm;
}

inline bool direct_feasible(const CoalitionContext& ctx, std::size_t k, double delta) {
  const auto& m = ctx.members()[k];
  const double work = m.tau * m.cost.cycles_per_sample * static_cast<double>(m.batch);
  return delta >= m.delta_min && delta <= m.delta_max &&
         work / delta + m.cost.model_bits / m.cost.rate <= ctx.t_max();
}

struct GridOptimum {
  double delta = 0.0;
  double utility = -std::numeric_limits<double>::infinity();
  bool any = false;
};

/// Best follower utility over `points` log-spaced frequencies in its own
/// bounds plus both endpoints, keeping only deadline-feasible points.
inline GridOptimum follower_grid(const CoalitionContext& ctx, std::size_t k, double i_comp,
                                 double i_rep, int points = 10000) {
  const auto& m = ctx.members()[k];
  GridOptimum best;
  auto probe = [&](double d) {
    if (!direct_feasible(ctx, k, d)) return;
    const double u = direct_follower_utility(ctx, k, d, i_comp, i_rep);
    if (u > best.utility) best = {d, u, true};
  };
  const double a = std::log(m.delta_min), b = std::log(m.delta_max);
  for (int g = 0; g < points; ++g) probe(std::exp(a + (b - a) * g / (points - 1)));
  probe(m.delta_min);
  probe(m.delta_max);
  return best;
}

/// Exact follower optimum: the utility is concave in delta on the feasible
/// interval [max(delta_min, deadline), delta_max], so ternary search on it
/// converges to the maximizer.
inline GridOptimum follower_ternary(const CoalitionContext& ctx, std::size_t k, double i_comp, double i_rep) {
  const auto& m = ctx.members()[k];
  const double work = m.tau * m.cost.cycles_per_sample * static_cast<double>(m.batch);
  const double room = ctx.t_max() - m.cost.model_bits / m.cost.rate;
  double a = room > 0.0 ? std::max(m.delta_min, work / room) : std::numeric_limits<double>::infinity();
  double b = m.delta_max;
  if (!(a <= b)) return {};
  const auto f = [&](double d) { return direct_follower_utility(ctx, k, d, i_comp, i_rep); };
  for (int it = 0; it < 300; ++it) {
    const double c = a + (b - a) / 3.0, d = b - (b - a) / 3.0;
    (f(c) < f(d) ? a : b) = f(c) < f(d) ? c : d;
  }
  const double x = 0.5 * (a + b);
  return {x, f(x), true};
}

/// Leader utility, written out from the definition, with every follower at
/// the supplied frequency.
inline double direct_msp_utility(const CoalitionContext& ctx, double eta, double i_rep, double i_comp,
                                 const std::vector<double>& deltas) {
  double gain = 0.0, reward = 0.0, h_sum = 0.0, data_total = 0.0;
  for (const auto& m : ctx.members()) data_total += m.data_size;
  for (std::size_t k = 0; k < ctx.size(); ++k) {
    const auto& m = ctx.members()[k];
    const double t = m.tau * m.cost.cycles_per_sample * static_cast<double>(m.batch) / deltas[k] +
                     m.cost.model_bits / m.cost.rate;
    gain += std::log(std::max(ctx.t_max() - t, 1e-9)) * m.h_value;
    reward += m.similarity + (deltas[k] - ctx.delta_lo()) / (ctx.delta_hi() - ctx.delta_lo()) *
                                 m.data_size / data_total;
    h_sum += m.h_value;
  }
  return eta * gain - reward * i_comp - h_sum / static_cast<double>(ctx.size()) * i_rep;
}

/// Hedonic game among N learners and M coalitions whose first M learners
/// are the pinned heads. A member's utility is its best-response payoff
/// inside the candidate coalition (similarity to that coalition's head,
/// data and reputation shares of the whole member set, the coalition's
/// deadline and incentive).
struct CoalitionGame {
  std::size_t n = 0;
  std::size_t m = 0;
  std::vector<FollowerSpec> learners;          // similarity field unused
  std::vector<std::vector<double>> similarity; // [learner][coalition]
  std::vector<double> t_max;                   // per coalition
  std::vector<double> i_comp;                  // per coalition
  double i_rep = 5.0;

  double utility(std::size_t learner, std::size_t coalition, std::span<const std::size_t> members) const {
    std::vector<FollowerSpec> specs;
    std::size_t self = 0;
    for (auto i : members) {
      if (i == learner) self = specs.size();
      auto f = learners[i];
      f.similarity = similarity[i][coalition];
      specs.push_back(f);
    }
    const CoalitionContext ctx(std::move(specs), t_max[coalition]);
    try {
      return follower_best_response(ctx, self, i_comp[coalition], i_rep).utility;
    } catch (const Error& e) {
      if (e.code() == Errc::Infeasible) return -std::numeric_limits<double>::infinity();
      throw;
    }
  }

  UtilityFn fn() const {
    return [this](std::size_t l, std::size_t c, std::span<const std::size_t> mem) { return utility(l, c, mem); };
  }

  /// Heads alone in their coalitions, every other learner in coalition i mod m.
  PartitionState round_robin() const {
    PartitionState p;
    p.coalitions.resize(m);
    for (std::size_t j = 0; j < m; ++j) p.heads.push_back(j);
    for (std::size_t i = 0; i < n; ++i) p.coalitions[i % m].push_back(i);
    return p;
  }
};

/// Similarities are uniform over [-spread, spread] around a common centre;
/// about a tenth of the learners dislike every coalition. A small spread
/// lets the data-share and reputation terms decide the moves.
inline CoalitionGame random_game(std::uint64_t seed, std::size_t n, std::size_t m, double spread = 1.0) {
  Rng rng(derive_seed(seed, 0xC0A1));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  CoalitionGame g;
  g.n = n;
  g.m = m;
  for (std::size_t i = 0; i < n; ++i) g.learners.push_back(random_follower(rng, i));
  for (std::size_t j = 0; j < m; ++j) {
    g.t_max.push_back(11.0 + 9.0 * unit(rng));
    g.i_comp.push_back(5.0 + 10.0 * unit(rng));
  }
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> row;
    const bool loner = unit(rng) < 0.1;
    for (std::size_t j = 0; j < m; ++j) {
      row.push_back(loner ? -1.0 + 0.1 * unit(rng)
                          : (spread < 1.0 ? 0.2 : 0.0) + spread * (2.0 * unit(rng) - 1.0));
    }
    g.similarity.push_back(row);
  }
  return g;
}

/// Exhaustive stability test for one assignment (coalition index per
/// learner, kParked for parked learners). Rules: a member with negative
/// utility would rather leave; a move is profitable when it lands at a
/// non-negative utility that strictly beats the current one, which is 0 for
/// a parked learner. Heads never move.
inline bool oracle_stable(const UtilityFn& utility, std::size_t n, std::size_t m,
                          const std::vector<std::size_t>& assignment) {
  std::vector<std::vector<std::size_t>> members(m);
  for (std::size_t i = 0; i < n; ++i) {
    if (assignment[i] != kParked) members[assignment[i]].push_back(i);
  }
  for (std::size_t i = m; i < n; ++i) {
    const std::size_t cur = assignment[i];
    double stay = 0.0;
    if (cur != kParked) {
      stay = utility(i, cur, members[cur]);
      if (stay < 0.0) return false;
    }
    for (std::size_t j = 0; j < m; ++j) {
      if (j == cur) continue;
      auto joined = members[j];
      joined.insert(std::upper_bound(joined.begin(), joined.end(), i), i);
      const double u = utility(i, j, joined);
      if (u >= 0.0 && u > stay + 1e-12 * (1.0 + std::abs(stay))) return false;
    }
  }
  return true;
}

inline std::vector<std::size_t> assignment_of(const PartitionState& p, std::size_t n) {
  std::vector<std::size_t> a(n, kParked);
  for (std::size_t j = 0; j < p.coalitions.size(); ++j) {
    for (auto i : p.coalitions[j]) a[i] = j;
  }
  return a;
}

inline bool oracle_stable(const CoalitionGame& g, const std::vector<std::size_t>& assignment) {
  return oracle_stable(g.fn(), g.n, g.m, assignment);
}

/// Stable assignments among all (m+1)^(n-m) placements of the non-head
/// learners 0..m-1 being the heads of coalitions 0..m-1.
inline std::vector<std::vector<std::size_t>> stable_assignments(const UtilityFn& utility, std::size_t n,
                                                                std::size_t m) {
  std::vector<std::size_t> a(n, 0);
  for (std::size_t j = 0; j < m; ++j) a[j] = j;
  const std::size_t free = n - m;
  std::size_t total = 1;
  for (std::size_t k = 0; k < free; ++k) total *= m + 1;
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t code = 0; code < total; ++code) {
    std::size_t c = code;
    for (std::size_t k = 0; k < free; ++k) {
      const std::size_t v = c % (m + 1);
      c /= m + 1;
      a[m + k] = v == m ? kParked : v;
    }
    if (oracle_stable(utility, n, m, a)) out.push_back(a);
  }
  return out;
}

/// Three blocks holding every record kind.
inline Chain sample_chain() {
  Chain chain;
  const std::vector<Record> genesis{RecruitmentRecord{0.5, 5.0, 15.0, 5.0},
                                    PartitionCommitRecord{{{0, 2}, {1, 3}}, {0, 1}, {4}, 3}};
  append(chain, 0, genesis);
  const std::vector<Record> round0{EquilibriumRecord{0, 0, 7.25, 812.5, {0, 2}, {9e8, 7.5e8}},
                                   ContributionRecord{2, 0, 4.1, 0.9, 0.0001, 1.3},
                                   ContributionRecord{3, 1, 3.7, 0.4, 0.0002, 1.9}};
  append(chain, 0, round0);
  const std::vector<Record> round1{ContributionRecord{2, 1, 2.2, -0.3, 0.0003, 1.1},
                                   ReputationUpdateRecord{2, 1.96}};
  append(chain, 1, round1);
  return chain;
}

/// True when the mutated dump is rejected, either while parsing or by
/// hash verification of the parsed chain.
inline bool mutation_detected(std::span<const std::uint8_t> bytes) {
  try {
    return !verify(load_bytes(bytes)).ok;
  } catch (const Error&) {
    return true;
  }
}

}  // namespace gfml::testing
