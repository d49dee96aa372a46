#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "gfml/costmodel.hpp"
#include "gfml/error.hpp"
#include "gfml/rng.hpp"

namespace gfml {

/// Cosine of the angle between two vectors; 0 if either is all zeros.
inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(Errc::DimMismatch, "cosine_similarity needs equal dims");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

/// Static description of a meta-learner device.
struct MmlProfile {
  std::size_t id = 0;
  std::size_t shard = 0;
  double t_max = 15.0;
  double delta_min = 1e7;
  double delta_max = 1e9;
  DeviceCost cost;
  bool honest = true;
  bool active = true;

  void validate() const {
    if (!(delta_min < delta_max)) throw Error(Errc::InvalidParam, "delta_min must be below delta_max");
    if (!(t_max > 0.0)) throw Error(Errc::InvalidParam, "t_max must be positive");
  }
};

inline constexpr std::size_t kParked = std::numeric_limits<std::size_t>::max();

struct PartitionState {
  std::vector<std::vector<std::size_t>> coalitions;  // each kept sorted
  std::vector<std::size_t> heads;
  std::vector<std::size_t> parked;  // active learners sitting this round out
  int round = 0;

  std::size_t coalition_of(std::size_t learner) const {
    for (std::size_t j = 0; j < coalitions.size(); ++j) {
      if (std::binary_search(coalitions[j].begin(), coalitions[j].end(), learner)) return j;
    }
    return kParked;
  }

  bool is_head(std::size_t learner) const {
    return std::find(heads.begin(), heads.end(), learner) != heads.end();
  }

  /// Learners in a coalition or parked, ascending.
  std::vector<std::size_t> all_learners() const {
    std::vector<std::size_t> out(parked.begin(), parked.end());
    for (const auto& c : coalitions) out.insert(out.end(), c.begin(), c.end());
    std::sort(out.begin(), out.end());
    return out;
  }

  /// Disjoint, heads in their own coalition, and (when given) covering
  /// exactly `expected` once parked learners are counted.
  void validate(std::span<const std::size_t> expected = {}) const {
    if (heads.size() != coalitions.size()) {
      throw Error(Errc::InvalidParam, "one head per coalition required");
    }
    auto all = all_learners();
    if (std::adjacent_find(all.begin(), all.end()) != all.end()) {
      throw Error(Errc::InvalidParam, "a learner appears twice in the partition");
    }
    for (std::size_t j = 0; j < coalitions.size(); ++j) {
      if (!std::binary_search(coalitions[j].begin(), coalitions[j].end(), heads[j])) {
        throw Error(Errc::InvalidParam, "head " + std::to_string(heads[j]) + " outside its coalition");
      }
    }
    if (!expected.empty()) {
      std::vector<std::size_t> want(expected.begin(), expected.end());
      std::sort(want.begin(), want.end());
      if (want != all) throw Error(Errc::InvalidParam, "partition does not cover the active set");
    }
  }

  friend bool operator==(const PartitionState&, const PartitionState&) = default;
};

inline void to_json(nlohmann::json& j, const PartitionState& p) {
  j = {{"round", p.round}, {"coalitions", p.coalitions}, {"heads", p.heads}, {"parked", p.parked}};
}

/// Head of each coalition: the member maximizing
/// r_global·(1 - (t_max - lowest)/(highest - lowest)) with the range taken
/// over the coalition; a flat range gives every member factor 1. Ties go to
/// the lowest id. Both spans are indexed by learner id.
inline std::vector<std::size_t> select_heads(const PartitionState& partition,
                                             std::span<const double> r_global,
                                             std::span<const double> t_max) {
  std::vector<std::size_t> heads;
  for (const auto& members : partition.coalitions) {
    if (members.empty()) throw Error(Errc::EmptyCoalition, "select_heads on an empty coalition");
    double t_lo = std::numeric_limits<double>::infinity();
    double t_hi = -t_lo;
    for (auto i : members) {
      t_lo = std::min(t_lo, t_max[i]);
      t_hi = std::max(t_hi, t_max[i]);
    }
    std::size_t best = members.front();
    double best_score = -std::numeric_limits<double>::infinity();
    for (auto i : members) {  // ascending ids, strict > keeps the lowest on ties
      const double factor = t_hi > t_lo ? 1.0 - (t_max[i] - t_lo) / (t_hi - t_lo) : 1.0;
      const double score = r_global[i] * factor;
      if (score > best_score) {
        best_score = score;
        best = i;
      }
    }
    heads.push_back(best);
  }
  return heads;
}

/// Utility of `learner` if it belonged to coalition `coalition` whose member
/// list would be `members` (sorted, includes the learner). Return -inf when
/// membership is impossible, e.g. an unreachable deadline.
using UtilityFn =
    std::function<double(std::size_t learner, std::size_t coalition, std::span<const std::size_t> members)>;

struct SwitchEvent {
  std::size_t learner = 0;
  std::size_t from = kParked;
  std::size_t to = kParked;
  double delta_utility = 0.0;
};

struct FormationResult {
  PartitionState partition;
  std::vector<SwitchEvent> switches;
  // Fixed-order switching revisited a partition and movers were then drawn
  // at random.
  bool randomized = false;
  // Random scheduling ran out of budget too and the per-learner history
  // rule ended the search; the result may admit a profitable deviation.
  bool history_limited = false;
};

inline void to_json(nlohmann::json& j, const SwitchEvent& s) {
  auto id = [](std::size_t c) { return c == kParked ? nlohmann::json(nullptr) : nlohmann::json(c); };
  j = {{"learner", s.learner}, {"from", id(s.from)}, {"to", id(s.to)}, {"delta_utility", s.delta_utility}};
}

/// One line of the partition trace.
inline nlohmann::json trace_line(const FormationResult& r) {
  return {{"round", r.partition.round},
          {"switches", r.switches},
          {"randomized", r.randomized},
          {"history_limited", r.history_limited},
          {"final_partition", r.partition}};
}

struct FormationOptions {
  std::size_t max_switches = 10000;
  std::size_t random_budget = 2000;  // switches allowed under random scheduling
  std::uint64_t seed = 0;            // drives the random scheduling
};

namespace detail {

inline bool strictly_better(double candidate, double reference) {
  return candidate > reference + 1e-12 * (1.0 + std::abs(reference));
}

inline std::vector<std::size_t> with_member(const std::vector<std::size_t>& members, std::size_t i) {
  std::vector<std::size_t> out = members;
  out.insert(std::upper_bound(out.begin(), out.end(), i), i);
  return out;
}

/// Memoized utility lookups keyed by (learner, coalition, member set).
class UtilityCache {
 public:
  explicit UtilityCache(const UtilityFn& fn) : fn_(fn) {}
  double operator()(std::size_t learner, std::size_t coalition, const std::vector<std::size_t>& members) {
    Key key{learner, coalition, members};
    auto it = seen_.find(key);
    if (it != seen_.end()) return it->second;
    const double u = fn_(learner, coalition, members);
    seen_.emplace(std::move(key), u);
    return u;
  }

 private:
  using Key = std::tuple<std::size_t, std::size_t, std::vector<std::size_t>>;
  const UtilityFn& fn_;
  std::map<Key, double> seen_;
};

struct BestMove {
  std::size_t target = kParked;  // kParked: no improving move
  double stay = 0.0;             // utility where the learner is now (0 when parked)
  double best = 0.0;
};

/// Most profitable unilateral move for a non-head learner. A move must land
/// at utility >= 0 and strictly beat staying; sitting out is worth 0 to a
/// parked learner. Coalitions scanned in ascending index.
using VisitedSets = std::set<std::vector<std::size_t>>;

inline BestMove best_move(const PartitionState& p, std::size_t learner, UtilityCache& u,
                          const VisitedSets* visited = nullptr) {
  const std::size_t cur = p.coalition_of(learner);
  BestMove m;
  if (cur != kParked) m.stay = u(learner, cur, p.coalitions[cur]);
  const double reference = m.stay;
  m.best = reference;
  for (std::size_t j = 0; j < p.coalitions.size(); ++j) {
    if (j == cur) continue;
    auto joined = with_member(p.coalitions[j], learner);
    if (visited && visited->count(joined)) continue;
    const double cand = u(learner, j, joined);
    if (!(cand >= 0.0)) continue;
    if (strictly_better(cand, m.best)) {
      m.target = j;
      m.best = cand;
    }
  }
  return m;
}

/// Every profitable move of one learner: each target that lands at >= 0 and
/// strictly beats staying, plus leaving when its current utility is negative
/// (target kParked).
inline std::vector<BestMove> profitable_moves(const PartitionState& p, std::size_t learner,
                                              UtilityCache& u, const VisitedSets* visited) {
  const std::size_t cur = p.coalition_of(learner);
  const double stay = cur == kParked ? 0.0 : u(learner, cur, p.coalitions[cur]);
  std::vector<BestMove> out;
  for (std::size_t j = 0; j < p.coalitions.size(); ++j) {
    if (j == cur) continue;
    auto joined = with_member(p.coalitions[j], learner);
    if (visited && visited->count(joined)) continue;
    const double cand = u(learner, j, joined);
    if (cand >= 0.0 && strictly_better(cand, stay)) out.push_back({j, stay, cand});
  }
  if (cur != kParked && stay < 0.0) out.push_back({kParked, stay, 0.0});
  return out;
}

}  // namespace detail

/// Hedonic switching from `start`. Heads are pinned. A learner moves to its
/// most profitable coalition when that strictly improves its utility
/// without going negative; a learner whose current utility is negative with
/// nowhere to go is parked, and a parked learner rejoins wherever it gains.
///
/// Learners are first scanned in ascending id, pass after pass, until
/// nobody moves. Utilities depend on the whole member set, so this can
/// cycle. On the first repeated partition the schedule turns random: each
/// step one profitable move of any learner is drawn uniformly and played.
/// If that exhausts `random_budget`, every learner from then on refuses
/// member sets it already belonged to during this call, which bounds the
/// number of moves; the result is then flagged history_limited.
inline FormationResult form_coalitions(PartitionState start, const UtilityFn& utility,
                                       const FormationOptions& options = {}) {
  if (start.coalitions.empty()) throw Error(Errc::InvalidParam, "need at least one coalition");
  for (auto& c : start.coalitions) std::sort(c.begin(), c.end());
  std::sort(start.parked.begin(), start.parked.end());
  start.validate();

  FormationResult result{std::move(start), {}, false, false};
  auto& p = result.partition;
  detail::UtilityCache cache(utility);
  std::set<std::pair<std::vector<std::vector<std::size_t>>, std::vector<std::size_t>>> seen_partitions;
  seen_partitions.insert({p.coalitions, p.parked});
  std::map<std::size_t, detail::VisitedSets> history;
  for (const auto& c : p.coalitions) {
    for (auto i : c) history[i].insert(c);
  }
  std::size_t random_moves = 0;
  Rng rng(derive_seed(options.seed, 0x5C4ED));

  const auto pending = [&](std::size_t learner) {
    const auto* visited = result.history_limited ? &history[learner] : nullptr;
    auto move = detail::best_move(p, learner, cache, visited);
    const bool leave = move.target == kParked && p.coalition_of(learner) != kParked && move.stay < 0.0;
    return std::pair{move, move.target != kParked || leave};
  };

  const auto apply = [&](std::size_t learner, const detail::BestMove& move) {
    const std::size_t cur = p.coalition_of(learner);
    SwitchEvent ev{learner, cur, move.target, 0.0};
    if (move.target != kParked) {
      ev.delta_utility = move.best - move.stay;
      auto& dst = p.coalitions[move.target];
      dst.insert(std::upper_bound(dst.begin(), dst.end(), learner), learner);
      history[learner].insert(dst);
    } else {
      ev.delta_utility = -move.stay;
      p.parked.insert(std::upper_bound(p.parked.begin(), p.parked.end(), learner), learner);
    }
    if (cur == kParked) {
      p.parked.erase(std::find(p.parked.begin(), p.parked.end(), learner));
    } else {
      auto& src = p.coalitions[cur];
      src.erase(std::find(src.begin(), src.end(), learner));
    }
    result.switches.push_back(ev);
    if (result.switches.size() > options.max_switches) {
      throw Error(Errc::NonConvergence, "coalition formation exceeded " +
                                            std::to_string(options.max_switches) + " switches");
    }
    if (!seen_partitions.insert({p.coalitions, p.parked}).second && !result.randomized) {
      result.randomized = true;
    }
  };

  for (bool moved = true; moved && !result.randomized;) {
    moved = false;
    for (auto learner : p.all_learners()) {
      if (p.is_head(learner)) continue;
      const auto [move, act] = pending(learner);
      if (!act) continue;
      apply(learner, move);
      moved = true;
      if (result.randomized) break;
    }
  }

  while (result.randomized) {
    std::vector<std::pair<std::size_t, detail::BestMove>> movers;
    for (auto learner : p.all_learners()) {
      if (p.is_head(learner)) continue;
      const auto* visited = result.history_limited ? &history[learner] : nullptr;
      for (const auto& move : detail::profitable_moves(p, learner, cache, visited)) {
        movers.emplace_back(learner, move);
      }
    }
    if (movers.empty()) break;
    std::uniform_int_distribution<std::size_t> pick(0, movers.size() - 1);
    const auto& [learner, move] = movers[pick(rng)];
    apply(learner, move);
    if (!result.history_limited && ++random_moves >= options.random_budget) result.history_limited = true;
  }
  p.validate();
  return result;
}

struct NashCheck {
  bool stable = true;
  std::size_t learner = kParked;  // witness
  std::size_t target = kParked;   // coalition it would rather join; kParked = leave
};

/// True when no non-head learner has a profitable unilateral deviation
/// under the same rules form_coalitions follows: a member with negative
/// utility would rather sit out, and any move that lands at >= 0 and
/// strictly beats the current utility (0 when parked) is profitable.
inline NashCheck check_nash(const PartitionState& partition, const UtilityFn& utility) {
  detail::UtilityCache cache(utility);
  for (auto learner : partition.all_learners()) {
    if (partition.is_head(learner)) continue;
    const auto move = detail::best_move(partition, learner, cache);
    if (move.target != kParked) return {false, learner, move.target};
    if (partition.coalition_of(learner) != kParked && move.stay < 0.0) return {false, learner, kParked};
  }
  return {};
}

}  // namespace gfml
