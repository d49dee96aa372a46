#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gfml/costmodel.hpp"
#include "gfml/error.hpp"
#include "gfml/utility.hpp"

namespace gfml {

/// One follower as seen by the leader of its coalition.
struct FollowerSpec {
  std::size_t learner = 0;
  double similarity = 0.0;
  double data_size = 1.0;
  double h_value = 0.0;
  double delta_min = 1e7;
  double delta_max = 1e9;
  DeviceCost cost;
  int tau = 10;
  std::size_t batch = 40;
};

/// A coalition's members plus the deadline imposed by its head. Aggregates
/// used by every utility evaluation are computed once on construction.
class CoalitionContext {
 public:
  CoalitionContext() = default;
  CoalitionContext(std::vector<FollowerSpec> members, double t_max)
      : members_(std::move(members)), t_max_(t_max) {
    if (!members_.empty()) {
      delta_lo_ = std::numeric_limits<double>::infinity();
      delta_hi_ = -std::numeric_limits<double>::infinity();
    }
    for (const auto& m : members_) {
      if (!(m.delta_min < m.delta_max) || !(m.delta_min > 0.0)) {
        throw Error(Errc::InvalidParam, "follower frequency bounds must satisfy 0 < min < max");
      }
      delta_lo_ = std::min(delta_lo_, m.delta_min);
      delta_hi_ = std::max(delta_hi_, m.delta_max);
      data_total_ += m.data_size;
      h_values_.push_back(m.h_value);
    }
  }

  const std::vector<FollowerSpec>& members() const noexcept { return members_; }
  std::size_t size() const noexcept { return members_.size(); }
  bool empty() const noexcept { return members_.empty(); }
  double t_max() const noexcept { return t_max_; }
  double delta_lo() const noexcept { return delta_lo_; }
  double delta_hi() const noexcept { return delta_hi_; }
  double data_total() const noexcept { return data_total_; }
  std::span<const double> h_values() const noexcept { return h_values_; }
  double avg_h() const { return mean_h(h_values_); }

  /// Same deadline, only the members at `keep`.
  CoalitionContext restricted(std::span<const std::size_t> keep) const {
    std::vector<FollowerSpec> sub;
    for (auto k : keep) sub.push_back(members_[k]);
    return CoalitionContext(std::move(sub), t_max_);
  }

 private:
  std::vector<FollowerSpec> members_;
  double t_max_ = 0.0;
  double delta_lo_ = 0.0;
  double delta_hi_ = 0.0;
  double data_total_ = 0.0;
  std::vector<double> h_values_;
};

struct LeaderParams {
  double eta = 25.0;
  double i_rep = 5.0;
  double i_comp_min = 5.0;
  double i_comp_max = 15.0;
};

inline double follower_utility(const CoalitionContext& ctx, std::size_t k, double delta,
                               double i_comp, double i_rep) {
  const auto& m = ctx.members()[k];
  return mml_utility({m.similarity, delta, ctx.delta_lo(), ctx.delta_hi(), m.data_size,
                      ctx.data_total(), ctx.h_values(), i_comp, i_rep,
                      comp_energy(m.cost, m.tau, m.batch, delta), comm_energy(m.cost, delta)});
}

/// dU/d(delta) for member k; comm energy is included so the stationary point
/// stays exact when its quadratic or linear coefficients are non-zero.
inline double follower_marginal(const CoalitionContext& ctx, std::size_t k, double delta,
                                double i_comp) {
  const auto& m = ctx.members()[k];
  const double range = ctx.delta_hi() - ctx.delta_lo();
  const double share = data_share(m.data_size, ctx.data_total());
  const double loss = 1.0 - m.cost.eps_loss;
  const double reward = range > 0.0 ? share * i_comp / range : 0.0;
  const double comp = 2.0 * m.cost.rho * m.tau * m.cost.cycles_per_sample *
                      static_cast<double>(m.batch) * m.cost.zeta * delta;
  const double comm = 2.0 * m.cost.comm_a * delta / (loss * loss) + m.cost.comm_b / loss;
  return reward - comp - comm;
}

/// Lowest frequency meeting the deadline: tau·c·batch/(T_max - T_comm).
/// Infinite when the upload alone overruns the deadline.
inline double deadline_frequency(const CoalitionContext& ctx, std::size_t k) {
  const auto& m = ctx.members()[k];
  const double room = ctx.t_max() - comm_time(m.cost);
  if (!(room > 0.0)) return std::numeric_limits<double>::infinity();
  return m.tau * m.cost.cycles_per_sample * static_cast<double>(m.batch) / room;
}

inline bool deadline_reachable(const CoalitionContext& ctx, std::size_t k) {
  return deadline_frequency(ctx, k) <= ctx.members()[k].delta_max * (1.0 + 1e-12);
}

/// Interior stationary point of the follower utility (unconstrained).
inline double interior_frequency(const CoalitionContext& ctx, std::size_t k, double i_comp) {
  const auto& m = ctx.members()[k];
  const double range = ctx.delta_hi() - ctx.delta_lo();
  const double share = data_share(m.data_size, ctx.data_total());
  const double loss = 1.0 - m.cost.eps_loss;
  const double linear = (range > 0.0 ? share * i_comp / range : 0.0) - m.cost.comm_b / loss;
  const double quadratic = 2.0 * m.cost.rho * m.tau * m.cost.cycles_per_sample *
                               static_cast<double>(m.batch) * m.cost.zeta +
                           2.0 * m.cost.comm_a / (loss * loss);
  if (quadratic > 0.0) return linear / quadratic;
  return linear > 0.0 ? std::numeric_limits<double>::infinity()
                      : -std::numeric_limits<double>::infinity();
}

struct BestResponse {
  double delta = 0.0;
  int kkt_case = 0;  // 1..6; 0 when the frequency was not chosen by the follower
  double utility = 0.0;
};

namespace detail {

inline bool same_point(double a, double b) { return std::abs(a - b) <= 1e-12 * std::max(std::abs(a), std::abs(b)); }

}  // namespace detail

/// Checks primal feasibility and the multiplier sign of the case `br`
/// claims. The deadline constraint is a lower bound on delta, so its
/// multiplier is non-negative when the marginal utility there is <= 0.
inline bool kkt_conditions_hold(const CoalitionContext& ctx, std::size_t k, double i_comp,
                                const BestResponse& br) {
  const auto& m = ctx.members()[k];
  const double dl = deadline_frequency(ctx, k);
  const double lo = std::max(m.delta_min, dl);
  const double tol = 1e-12 * std::max(1.0, m.delta_max);
  if (br.delta < lo - tol || br.delta > m.delta_max + tol) return false;
  const double marginal = follower_marginal(ctx, k, br.delta, i_comp);
  const double mtol = 1e-9 * (1.0 + std::abs(follower_marginal(ctx, k, 0.0, i_comp)));
  switch (br.kkt_case) {
    case 1: return br.delta > lo && br.delta < m.delta_max && std::abs(marginal) <= mtol;
    case 2: return detail::same_point(br.delta, dl) && marginal <= mtol;
    case 3: return detail::same_point(br.delta, m.delta_max) && marginal >= -mtol;
    case 4: return detail::same_point(br.delta, m.delta_min) && dl <= m.delta_min && marginal <= mtol;
    case 5: return detail::same_point(br.delta, m.delta_max) && detail::same_point(dl, m.delta_max);
    case 6: return detail::same_point(br.delta, m.delta_min) && detail::same_point(dl, m.delta_min) &&
                   marginal <= mtol;
    default: return false;
  }
}

/// Stage-II best response: evaluates the candidate frequency of each KKT
/// case (interior stationary point, deadline-binding point, upper bound,
/// lower bound), keeps those meeting primal and dual feasibility, and returns
/// the one with the highest utility.
inline BestResponse follower_best_response(const CoalitionContext& ctx, std::size_t k,
                                           double i_comp, double i_rep) {
  const auto& m = ctx.members()[k];
  const double dl = deadline_frequency(ctx, k);
  if (!deadline_reachable(ctx, k)) {
    throw Error(Errc::Infeasible, "learner " + std::to_string(m.learner) +
                                      " cannot meet the coalition deadline");
  }
  const double lo = std::max(m.delta_min, dl);
  const double hi = m.delta_max;

  std::vector<BestResponse> candidates;
  const double interior = interior_frequency(ctx, k, i_comp);
  if (interior > lo && interior < hi) candidates.push_back({interior, 1, 0.0});

  const bool dl_at_hi = detail::same_point(dl, hi);
  const bool dl_at_lo = detail::same_point(dl, m.delta_min);
  if (dl_at_hi) {
    candidates.push_back({hi, 5, 0.0});
  } else {
    if (follower_marginal(ctx, k, hi, i_comp) >= 0.0) candidates.push_back({hi, 3, 0.0});
    if (dl_at_lo) {
      if (follower_marginal(ctx, k, m.delta_min, i_comp) <= 0.0) {
        candidates.push_back({m.delta_min, 6, 0.0});
      }
    } else if (dl > m.delta_min) {
      if (follower_marginal(ctx, k, dl, i_comp) <= 0.0) candidates.push_back({dl, 2, 0.0});
    } else if (follower_marginal(ctx, k, m.delta_min, i_comp) <= 0.0) {
      candidates.push_back({m.delta_min, 4, 0.0});
    }
  }
  if (candidates.empty()) {
    // Only reachable through rounding at a boundary: fall back to the
    // projected stationary point.
    const double d = std::clamp(interior, lo, hi);
    candidates.push_back({d, d == hi ? 3 : (dl > m.delta_min ? 2 : 4), 0.0});
  }
  BestResponse best{0.0, 0, -std::numeric_limits<double>::infinity()};
  for (auto& c : candidates) {
    c.utility = follower_utility(ctx, k, c.delta, i_comp, i_rep);
    if (c.utility > best.utility) best = c;
  }
  return best;
}

/// Leader utility for a coalition at fixed follower frequencies. Members
/// missing the deadline contribute ln(1e-9) instead of a domain error.
inline double msp_utility(const CoalitionContext& ctx, const LeaderParams& leader, double i_comp,
                          std::span<const double> deltas) {
  if (ctx.empty()) return 0.0;
  if (deltas.size() != ctx.size()) throw Error(Errc::DimMismatch, "one frequency per member");
  constexpr double kSlackFloor = 1e-9;
  double time_gain = 0.0;
  double competition = 0.0;
  for (std::size_t k = 0; k < ctx.size(); ++k) {
    const auto& m = ctx.members()[k];
    const double slack = ctx.t_max() - comp_time(m.cost, m.tau, m.batch, deltas[k]) - comm_time(m.cost);
    time_gain += std::log(std::max(slack, kSlackFloor)) * m.h_value;
    competition += m.similarity + frequency_share(deltas[k], ctx.delta_lo(), ctx.delta_hi()) *
                                      data_share(m.data_size, ctx.data_total());
  }
  return leader.eta * time_gain - competition * i_comp - ctx.avg_h() * leader.i_rep;
}

struct EquilibriumResult {
  double i_comp_star = 0.0;
  std::vector<std::size_t> learners;  // followers that took part, in context order
  std::vector<double> deltas;
  std::vector<int> kkt_case;
  std::vector<double> u_mml;
  double u_msp = 0.0;
  std::vector<std::size_t> infeasible;   // could not meet the deadline at any frequency
  std::vector<std::size_t> nonpositive;  // utility <= 0 at equilibrium
  std::string method;
};

inline void to_json(nlohmann::json& j, const EquilibriumResult& r) {
  j = {{"i_comp_star", r.i_comp_star}, {"learners", r.learners},   {"deltas", r.deltas},
       {"kkt_case", r.kkt_case},       {"u_mml", r.u_mml},         {"u_msp", r.u_msp},
       {"infeasible", r.infeasible},   {"nonpositive", r.nonpositive}, {"method", r.method}};
}

namespace detail {

inline std::vector<double> best_deltas(const CoalitionContext& ctx, double i_comp, double i_rep,
                                       std::vector<int>* cases = nullptr) {
  std::vector<double> deltas(ctx.size());
  if (cases) cases->assign(ctx.size(), 0);
  for (std::size_t k = 0; k < ctx.size(); ++k) {
    const auto br = follower_best_response(ctx, k, i_comp, i_rep);
    deltas[k] = br.delta;
    if (cases) (*cases)[k] = br.kkt_case;
  }
  return deltas;
}

inline std::vector<std::size_t> feasible_members(const CoalitionContext& ctx,
                                                 std::vector<std::size_t>& infeasible) {
  std::vector<std::size_t> keep;
  for (std::size_t k = 0; k < ctx.size(); ++k) {
    if (deadline_reachable(ctx, k)) {
      keep.push_back(k);
    } else {
      infeasible.push_back(ctx.members()[k].learner);
    }
  }
  return keep;
}

inline EquilibriumResult finish(const CoalitionContext& ctx, const LeaderParams& leader,
                                double i_comp, std::vector<double> deltas, std::vector<int> cases,
                                EquilibriumResult r) {
  r.i_comp_star = i_comp;
  r.u_msp = msp_utility(ctx, leader, i_comp, deltas);
  for (std::size_t k = 0; k < ctx.size(); ++k) {
    const double u = follower_utility(ctx, k, deltas[k], i_comp, leader.i_rep);
    r.learners.push_back(ctx.members()[k].learner);
    r.u_mml.push_back(u);
    if (!(u > 0.0)) r.nonpositive.push_back(ctx.members()[k].learner);
  }
  r.deltas = std::move(deltas);
  r.kkt_case = std::move(cases);
  return r;
}

}  // namespace detail

/// Leader utility when every follower plays its best response to i_comp.
inline double msp_utility_at_best_response(const CoalitionContext& ctx, const LeaderParams& leader,
                                           double i_comp) {
  return msp_utility(ctx, leader, i_comp, detail::best_deltas(ctx, i_comp, leader.i_rep));
}

/// Followers best-respond to a fixed incentive (no leader optimization).
inline EquilibriumResult solve_followers(const CoalitionContext& ctx, const LeaderParams& leader,
                                         double i_comp) {
  EquilibriumResult r;
  const auto keep = detail::feasible_members(ctx, r.infeasible);
  const auto sub = ctx.restricted(keep);
  std::vector<int> cases;
  auto deltas = detail::best_deltas(sub, i_comp, leader.i_rep, &cases);
  r.method = "fixed";
  return detail::finish(sub, leader, i_comp, std::move(deltas), std::move(cases), std::move(r));
}

/// Externally chosen frequencies; members whose frequency misses the
/// deadline are dropped as infeasible.
inline EquilibriumResult evaluate_frequencies(const CoalitionContext& ctx, const LeaderParams& leader,
                                              double i_comp, std::span<const double> deltas) {
  if (deltas.size() != ctx.size()) throw Error(Errc::DimMismatch, "one frequency per member");
  EquilibriumResult r;
  std::vector<std::size_t> keep;
  std::vector<double> kept;
  for (std::size_t k = 0; k < ctx.size(); ++k) {
    const auto& m = ctx.members()[k];
    if (comp_time(m.cost, m.tau, m.batch, deltas[k]) + comm_time(m.cost) <= ctx.t_max()) {
      keep.push_back(k);
      kept.push_back(deltas[k]);
    } else {
      r.infeasible.push_back(m.learner);
    }
  }
  const auto sub = ctx.restricted(keep);
  r.method = "given";
  return detail::finish(sub, leader, i_comp, std::move(kept), std::vector<int>(keep.size(), 0),
                        std::move(r));
}

/// Stage-I leader problem. Bisects the central-difference derivative of the
/// leader utility (followers at best response) over [i_comp_min, i_comp_max];
/// when the derivative does not change sign a 64-point grid is searched
/// instead. The bisection answer is also compared against the grid and both
/// endpoints, since case switches among followers can put kinks in the curve.
inline EquilibriumResult leader_solve(const CoalitionContext& ctx, const LeaderParams& leader) {
  if (ctx.empty()) throw Error(Errc::EmptyCoalition, "leader_solve on an empty coalition");
  if (!(leader.i_comp_min < leader.i_comp_max)) {
    throw Error(Errc::InvalidParam, "i_comp_min must be below i_comp_max");
  }
  EquilibriumResult r;
  const auto keep = detail::feasible_members(ctx, r.infeasible);
  const auto sub = ctx.restricted(keep);
  if (sub.empty()) {
    r.method = "none";
    return detail::finish(sub, leader, leader.i_comp_min, {}, {}, std::move(r));
  }

  const auto utility = [&](double i) { return msp_utility_at_best_response(sub, leader, i); };
  const auto derivative = [&](double i) {
    const double h = 1e-4 * (1.0 + std::abs(i));
    return (utility(i + h) - utility(i - h)) / (2.0 * h);
  };

  const double lo = leader.i_comp_min;
  const double hi = leader.i_comp_max;
  double best_i = lo;
  double best_u = utility(lo);
  r.method = "endpoint";
  auto consider = [&](double i, const char* method) {
    const double u = utility(i);
    if (u > best_u) {
      best_u = u;
      best_i = i;
      r.method = method;
    }
  };

  const double d_lo = derivative(lo);
  const double d_hi = derivative(hi);
  if (d_lo > 0.0 && d_hi < 0.0) {
    double a = lo;
    double b = hi;
    for (int it = 0; it < 200 && b - a > 1e-8; ++it) {
      const double mid = 0.5 * (a + b);
      (derivative(mid) > 0.0 ? a : b) = mid;
    }
    consider(0.5 * (a + b), "bisection");
  }
  consider(hi, "endpoint");

  constexpr int kGrid = 64;
  const double step = (hi - lo) / (kGrid - 1);
  int g_best = 0;
  double g_u = -std::numeric_limits<double>::infinity();
  for (int g = 0; g < kGrid; ++g) {
    const double u = utility(lo + g * step);
    if (u > g_u) {
      g_u = u;
      g_best = g;
    }
  }
  if (g_u > best_u) {
    // golden-section refinement inside the neighbouring grid cells
    double a = lo + std::max(0, g_best - 1) * step;
    double b = lo + std::min(kGrid - 1, g_best + 1) * step;
    const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
    double c = b - phi * (b - a);
    double d = a + phi * (b - a);
    double fc = utility(c);
    double fd = utility(d);
    for (int it = 0; it < 200 && b - a > 1e-8; ++it) {
      if (fc >= fd) {
        b = d;
        d = c;
        fd = fc;
        c = b - phi * (b - a);
        fc = utility(c);
      } else {
        a = c;
        c = d;
        fc = fd;
        d = a + phi * (b - a);
        fd = utility(d);
      }
    }
    consider(lo + g_best * step, "grid");
    consider(0.5 * (a + b), "grid");
  }

  std::vector<int> cases;
  auto deltas = detail::best_deltas(sub, best_i, leader.i_rep, &cases);
  return detail::finish(sub, leader, best_i, std::move(deltas), std::move(cases), std::move(r));
}

}  // namespace gfml
