#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "gfml/coalition.hpp"
#include "gfml/config.hpp"
#include "gfml/costmodel.hpp"
#include "gfml/datasets.hpp"
#include "gfml/error.hpp"
#include "gfml/ledger.hpp"
#include "gfml/metalearner.hpp"
#include "gfml/model.hpp"
#include "gfml/reputation.hpp"
#include "gfml/rng.hpp"
#include "gfml/stackelberg.hpp"

namespace gfml {

// ---------------------------------------------------------------------------
// Strategies
// ---------------------------------------------------------------------------

enum class CoalitionMode { Hedonic, Random, BestEffort, Fixed };
enum class HeadMode { Reputation, LowestDeadline, Random };
enum class FrequencyMode { Stackelberg, FollowerOnly, Random };

struct Strategy {
  CoalitionMode coalitions = CoalitionMode::Hedonic;
  HeadMode heads = HeadMode::Reputation;
  FrequencyMode frequencies = FrequencyMode::Stackelberg;
};

inline Strategy parse_strategy(const std::string& id) {
  using C = CoalitionMode;
  using H = HeadMode;
  using F = FrequencyMode;
  if (id == "gfml") return {C::Hedonic, H::Reputation, F::Stackelberg};
  if (id == "gfml_opt_freq") return {C::Hedonic, H::LowestDeadline, F::FollowerOnly};
  if (id == "gfml_random_freq") return {C::Hedonic, H::Random, F::Random};
  if (id == "random_coalition_random") return {C::Random, H::Random, F::Random};
  if (id == "random_coalition_stackelberg") return {C::Random, H::Random, F::Stackelberg};
  if (id == "random_coalition_opt") return {C::Random, H::Random, F::FollowerOnly};
  if (id == "best_effort_random_head") return {C::BestEffort, H::Random, F::Random};
  if (id == "best_effort_stackelberg") return {C::BestEffort, H::LowestDeadline, F::Stackelberg};
  if (id == "best_effort_opt") return {C::BestEffort, H::LowestDeadline, F::FollowerOnly};
  if (id == "fixed_coalition_stackelberg") return {C::Fixed, H::Reputation, F::Stackelberg};
  if (id == "fixed_coalition_opt") return {C::Fixed, H::LowestDeadline, F::FollowerOnly};
  throw Error(Errc::ConfigInvalid, "unknown strategy '" + id + "'");
}

// ---------------------------------------------------------------------------
// World construction
// ---------------------------------------------------------------------------

// Named RNG streams, all derived from the experiment seed.
namespace streams {
inline constexpr std::uint64_t kData = 1;
inline constexpr std::uint64_t kShards = 2;
inline constexpr std::uint64_t kProfiles = 3;
inline constexpr std::uint64_t kInit = 4;
inline constexpr std::uint64_t kMisbehavior = 5;
inline constexpr std::uint64_t kActive = 6;
inline constexpr std::uint64_t kSubset = 7;
inline constexpr std::uint64_t kRoundBase = 0x1000;   // + round: strategy randomness
inline constexpr std::uint64_t kLocalBase = 0x20000;  // + round, then learner id
inline constexpr std::uint64_t kFormationBase = 0x40000;  // + round: switch scheduling
}  // namespace streams

/// Flags floor(ratio·|active|) active learners as dishonest, chosen
/// uniformly at random from the seed.
inline std::vector<MmlProfile> inject_misbehavior(std::vector<MmlProfile> profiles, double ratio,
                                                  std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw Error(Errc::InvalidParam, "ratio must lie in [0,1]");
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < profiles.size(); ++i) {
    profiles[i].honest = true;
    if (profiles[i].active) active.push_back(i);
  }
  const auto count = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(active.size())));
  Rng rng = make_rng(seed, streams::kMisbehavior);
  std::shuffle(active.begin(), active.end(), rng);
  for (std::size_t k = 0; k < count; ++k) profiles[active[k]].honest = false;
  return profiles;
}

struct World {
  ExperimentConfig config;
  Dataset data;
  std::vector<Shard> shards;
  std::vector<MmlProfile> profiles;
  std::vector<std::size_t> active;   // ascending
  std::vector<std::size_t> passive;  // ascending
  ModelShape shape;
  ModelParams initial;
};

inline Dataset load_dataset(const ExperimentConfig& cfg) {
  Dataset data;
  if (cfg.dataset == "idx") {
    data = load_idx(cfg.dataset_images, cfg.dataset_labels);
  } else {
    data = synth_blobs(cfg.blob_classes, cfg.blob_per_class, cfg.blob_dim, cfg.blob_sigma,
                       derive_seed(cfg.seed, streams::kData));
  }
  if (cfg.dataset_limit > 0 && cfg.dataset_limit < data.size()) {
    std::vector<std::size_t> rows(data.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    Rng rng = make_rng(cfg.seed, streams::kSubset);
    std::shuffle(rows.begin(), rows.end(), rng);
    rows.resize(cfg.dataset_limit);
    std::sort(rows.begin(), rows.end());
    data = data.subset(rows);
  }
  return data;
}

inline World build_world(const ExperimentConfig& cfg) {
  cfg.validate();
  World w;
  w.config = cfg;
  w.data = load_dataset(cfg);
  w.shards = partition_quantity_label(w.data, cfg.num_learners, cfg.classes_per_device,
                                      derive_seed(cfg.seed, streams::kShards),
                                      {cfg.dirichlet_alpha, cfg.test_fraction});

  Rng prof_rng = make_rng(cfg.seed, streams::kProfiles);
  std::uniform_real_distribution<double> t_dist(cfg.t_max_min, cfg.t_max_max);
  std::uniform_real_distribution<double> rate_dist(cfg.rate_min, cfg.rate_max);
  for (std::size_t i = 0; i < cfg.num_learners; ++i) {
    MmlProfile p;
    p.id = i;
    p.shard = i;
    p.t_max = cfg.t_max_min < cfg.t_max_max ? t_dist(prof_rng) : cfg.t_max_min;
    p.delta_min = cfg.delta_min;
    p.delta_max = cfg.delta_max;
    p.cost = {cfg.rho, cfg.zeta, cfg.cycles_per_sample, cfg.comm_a, cfg.comm_b, cfg.comm_z,
              cfg.eps_loss, cfg.model_bits, cfg.rate_min < cfg.rate_max ? rate_dist(prof_rng) : cfg.rate_min};
    p.active = false;
    w.profiles.push_back(p);
  }

  std::vector<std::size_t> order(cfg.num_learners);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng act_rng = make_rng(cfg.seed, streams::kActive);
  std::shuffle(order.begin(), order.end(), act_rng);
  const auto n_active =
      static_cast<std::size_t>(std::floor(cfg.active_fraction * static_cast<double>(cfg.num_learners)));
  for (std::size_t k = 0; k < n_active; ++k) w.profiles[order[k]].active = true;
  for (const auto& p : w.profiles) (p.active ? w.active : w.passive).push_back(p.id);

  w.profiles = inject_misbehavior(std::move(w.profiles), cfg.misbehavior_ratio, cfg.seed);

  w.shape = ModelShape{w.data.feature_dim, 80, 60, w.data.num_classes};
  Rng init_rng = make_rng(cfg.seed, streams::kInit);
  w.initial = ModelParams::glorot(w.shape, init_rng);
  return w;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct CoalitionRoundMetrics {
  std::size_t coalition = 0;
  std::size_t head = 0;
  std::size_t members = 0;
  std::size_t participants = 0;
  double accuracy_before = 0.0;
  double accuracy_after = 0.0;  // after personalization
  double loss = 0.0;
  double round_latency = 0.0;
  double u_msp = 0.0;
  double i_comp_star = 0.0;
};

struct LearnerRoundMetrics {
  std::size_t learner = 0;
  std::size_t coalition = kParked;
  bool honest = true;
  bool participated = false;
  double payoff = 0.0;
  double reputation = 0.0;  // global reputation after this round
  double delta = 0.0;
  int kkt_case = 0;
  double theta = 0.0;  // contribution as recorded
  double accuracy = 0.0;
};

struct RoundMetrics {
  int round = 0;
  std::vector<CoalitionRoundMetrics> coalitions;
  std::vector<LearnerRoundMetrics> learners;
  std::vector<std::size_t> parked;
  std::vector<std::size_t> excluded;
};

struct PassivePoint {
  std::size_t samples = 0;
  double accuracy = 0.0;
};

struct Summary {
  double mean_personalized_accuracy = 0.0;
  double mean_payoff = 0.0;
  double mean_round_latency = 0.0;
  double mean_u_msp = 0.0;
  double honest_accuracy = 0.0;
  double dishonest_accuracy = 0.0;
  double honest_payoff = 0.0;
  double dishonest_payoff = 0.0;
  std::size_t active = 0;
  std::size_t passive = 0;
  std::size_t dishonest = 0;
  std::vector<PassivePoint> passive_accuracy;
};

inline nlohmann::json summary_json(const Summary& s) {
  auto passive = nlohmann::json::array();
  for (const auto& p : s.passive_accuracy) passive.push_back({{"samples", p.samples}, {"accuracy", p.accuracy}});
  return {{"mean_personalized_accuracy", s.mean_personalized_accuracy},
          {"mean_payoff", s.mean_payoff},
          {"mean_round_latency", s.mean_round_latency},
          {"mean_u_msp", s.mean_u_msp},
          {"honest_accuracy", s.honest_accuracy},
          {"dishonest_accuracy", s.dishonest_accuracy},
          {"honest_payoff", s.honest_payoff},
          {"dishonest_payoff", s.dishonest_payoff},
          {"active", s.active},
          {"passive", s.passive},
          {"dishonest", s.dishonest},
          {"passive_accuracy", passive}};
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

/// Personalized test accuracy of each passive learner when adopting the
/// final coalition model whose head embedding is closest to its own, for
/// each support-set size. Averaged over passive learners with test data.
inline std::vector<PassivePoint> evaluate_passive(const World& world, std::span<const ModelParams> models,
                                                  std::span<const std::size_t> heads,
                                                  std::span<const std::size_t> sample_counts) {
  std::vector<PassivePoint> table;
  std::vector<std::size_t> learners;
  for (auto p : world.passive) {
    if (!world.shards[p].test.empty()) learners.push_back(p);
  }
  if (learners.empty()) return table;
  MetaHyper hyper;
  hyper.beta = world.config.beta;

  const auto delta_embed = [&](const ModelParams& m, const Dataset& d) -> Eigen::VectorXd {
    Eigen::VectorXd e = embed(m, d);
    const Eigen::VectorXd diff = e - embed(world.initial, d);
    return diff.norm() > 0.0 ? diff : e;
  };
  std::vector<std::size_t> pick(learners.size(), 0);
  for (std::size_t k = 0; k < learners.size(); ++k) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < models.size(); ++j) {
      const auto a = delta_embed(models[j], world.shards[learners[k]].train);
      const auto b = delta_embed(models[j], world.shards[heads[j]].train);
      const double s = cosine_similarity(std::span(a.data(), static_cast<std::size_t>(a.size())),
                                         std::span(b.data(), static_cast<std::size_t>(b.size())));
      if (s > best) {
        best = s;
        pick[k] = j;
      }
    }
  }
  for (auto n : sample_counts) {
    double sum = 0.0;
    for (std::size_t k = 0; k < learners.size(); ++k) {
      const auto& shard = world.shards[learners[k]];
      const auto& model = models[pick[k]];
      const std::size_t take = std::min(n, shard.train.size());
      ModelParams adapted = model;
      if (take > 0) {
        std::vector<std::size_t> rows(take);
        std::iota(rows.begin(), rows.end(), std::size_t{0});
        adapted = personalize(model, hyper, shard.train.subset(rows), 1);
      }
      sum += evaluate(adapted, shard.test).accuracy;
    }
    table.push_back({n, sum / static_cast<double>(learners.size())});
  }
  return table;
}

struct ExperimentResult {
  std::vector<RoundMetrics> rounds;
  Summary summary;
  std::vector<nlohmann::json> trace;
  Chain chain;
};

/// All mutable state of one experiment. run_round advances it by one
/// global round.
class Simulation {
 public:
  explicit Simulation(ExperimentConfig cfg) : Simulation(build_world(cfg)) {}

  explicit Simulation(World world)
      : w_(std::move(world)),
        cfg_(w_.config),
        strategy_(parse_strategy(cfg_.strategy)),
        reps_(cfg_.lambda, cfg_.phi) {
    const std::size_t n = cfg_.num_learners;
    const std::size_t m = strategy_.coalitions == CoalitionMode::BestEffort ? 1 : cfg_.num_coalitions;
    models_.assign(m, w_.initial);
    i_comp_.assign(m, cfg_.i_comp_max);
    hyper_.alpha = cfg_.alpha;
    hyper_.beta = cfg_.beta;
    hyper_.tau = cfg_.tau;
    hyper_.batch_size = cfg_.batch;
    hyper_.hvp = cfg_.hvp == "fd" ? HvpMode::FiniteDifference : HvpMode::Exact;
    leader_ = {cfg_.eta, cfg_.i_rep, cfg_.i_comp_min, cfg_.i_comp_max};
    rep_params_ = {cfg_.gamma, cfg_.r_th};

    base_embed_.resize(n);
    last_before_.assign(n, 0.0);
    last_after_.assign(n, 0.0);
    last_loss_.assign(n, 0.0);
    total_payoff_.assign(n, 0.0);
    for (auto i : w_.active) {
      base_embed_[i] = embed(w_.initial, w_.shards[i].train);
      score(i, w_.initial);
    }
    embeds_.assign(m, std::vector<Eigen::VectorXd>(n));
  }

  // cfg_ points into w_, so a copy would alias the source's config.
  Simulation(const Simulation&) = delete;
  Simulation& operator=(const Simulation&) = delete;

  const World& world() const noexcept { return w_; }
  const PartitionState& partition() const noexcept { return partition_; }
  const ReputationStore& reputations() const noexcept { return reps_; }
  const Chain& chain() const noexcept { return chain_; }
  const std::vector<ModelParams>& models() const noexcept { return models_; }
  const std::vector<nlohmann::json>& trace() const noexcept { return trace_; }
  int round() const noexcept { return round_; }

  RoundMetrics run_round() {
    const int k = round_;
    Rng rng = make_rng(cfg_.seed, streams::kRoundBase + static_cast<std::uint64_t>(k));

    // (1) embeddings
    if (k % cfg_.chi == 0) refresh_embeddings();

    // (2) partition and heads
    FormationResult formed = arrange(k, rng);
    partition_ = formed.partition;
    partition_.round = k;
    formed.partition.round = k;
    partition_.validate(w_.active);
    trace_.push_back(trace_line(formed));

    RoundMetrics out;
    out.round = k;
    out.parked = partition_.parked;
    const std::size_t m = partition_.coalitions.size();
    std::vector<EquilibriumResult> eq(m);
    std::vector<std::vector<std::size_t>> participants(m);

    // (3) incentives and frequencies
    for (std::size_t j = 0; j < m; ++j) {
      const auto ctx = context(j, partition_.coalitions[j]);
      switch (strategy_.frequencies) {
        case FrequencyMode::Stackelberg: eq[j] = leader_solve(ctx, leader_); break;
        case FrequencyMode::FollowerOnly: eq[j] = solve_followers(ctx, leader_, cfg_.i_comp_max); break;
        case FrequencyMode::Random: {
          std::vector<double> deltas;
          for (const auto& f : ctx.members()) {
            deltas.push_back(std::uniform_real_distribution<double>(f.delta_min, f.delta_max)(rng));
          }
          eq[j] = evaluate_frequencies(ctx, leader_, cfg_.i_comp_max, deltas);
          break;
        }
      }
      i_comp_[j] = eq[j].i_comp_star;
      for (std::size_t q = 0; q < eq[j].learners.size(); ++q) {
        const auto l = eq[j].learners[q];
        const bool unprofitable = strategy_.frequencies != FrequencyMode::Random && !(eq[j].u_mml[q] > 0.0);
        (unprofitable ? out.excluded : participants[j]).push_back(l);
      }
      out.excluded.insert(out.excluded.end(), eq[j].infeasible.begin(), eq[j].infeasible.end());
    }
    std::sort(out.excluded.begin(), out.excluded.end());

    // (4) local updates, (5) aggregation
    struct Trained {
      double delta = 0.0;
      int kkt_case = 0;
      double u_mml = 0.0;
      double u = 0.0;
      double t_comp = 0.0;
      double t_comm = 0.0;
      double theta = 0.0;
    };
    std::vector<std::optional<Trained>> trained(cfg_.num_learners);
    std::vector<double> latency(m, 0.0);
    for (std::size_t j = 0; j < m; ++j) {
      std::vector<ModelParams> updates;
      std::vector<MemberTiming> timing;
      const double deadline = w_.profiles[partition_.heads[j]].t_max;
      for (auto l : participants[j]) {
        const auto q = static_cast<std::size_t>(
            std::find(eq[j].learners.begin(), eq[j].learners.end(), l) - eq[j].learners.begin());
        const auto& prof = w_.profiles[l];
        MetaHyper hyper = hyper_;
        hyper.tau = prof.honest ? cfg_.tau : cfg_.misbehavior_tau;
        Rng local = make_rng(derive_seed(cfg_.seed, streams::kLocalBase + static_cast<std::uint64_t>(k)), l);
        auto upd = local_update(models_[j], hyper, w_.shards[l].train, local);
        updates.push_back(std::move(upd.params));

        Trained t;
        t.delta = eq[j].deltas[q];
        t.kkt_case = eq[j].kkt_case[q];
        t.u_mml = eq[j].u_mml[q];
        t.u = upd.contribution.u;
        t.t_comp = comp_time(prof.cost, hyper.tau, cfg_.batch, t.delta);
        t.t_comm = comm_time(prof.cost);
        t.theta = contribution(t.u, deadline, t.t_comp, t.t_comm);
        timing.push_back({t.t_comp, t.t_comm});
        trained[l] = t;
      }
      if (!updates.empty()) {
        models_[j] = aggregate(updates);
        latency[j] = round_latency(timing);
      }
    }

    // (6) contributions, ledger, reputations
    double best_honest = -1.0;
    for (auto l : w_.active) {
      if (trained[l] && w_.profiles[l].honest) best_honest = std::max(best_honest, trained[l]->theta);
    }
    std::vector<Record> records;
    if (k == 0) records.push_back(RecruitmentRecord{cfg_.r_th, cfg_.i_comp_min, cfg_.i_comp_max, cfg_.i_rep});
    {
      PartitionCommitRecord pc;
      for (const auto& c : partition_.coalitions) pc.coalitions.emplace_back(c.begin(), c.end());
      pc.heads.assign(partition_.heads.begin(), partition_.heads.end());
      pc.parked.assign(partition_.parked.begin(), partition_.parked.end());
      pc.switch_count = formed.switches.size();
      records.push_back(std::move(pc));
    }
    for (std::size_t j = 0; j < m; ++j) {
      EquilibriumRecord er;
      er.coalition = j;
      er.head = partition_.heads[j];
      er.i_comp = eq[j].i_comp_star;
      er.u_msp = eq[j].u_msp;
      er.learners.assign(eq[j].learners.begin(), eq[j].learners.end());
      er.deltas = eq[j].deltas;
      records.push_back(std::move(er));
    }
    for (std::size_t j = 0; j < m; ++j) {
      for (auto l : participants[j]) {
        auto& t = *trained[l];
        // Without the ledger a dishonest learner's self-report is all the
        // system sees, and it claims the best honest value of the round.
        if (!cfg_.ledger_on && !w_.profiles[l].honest && best_honest >= 0.0) {
          t.theta = std::max(t.theta, best_honest);
        }
        reps_.record(l, partition_.heads[j], k, t.theta);
        records.push_back(ContributionRecord{l, partition_.heads[j], t.theta, t.u, t.t_comp, t.t_comm});
      }
    }
    for (auto l : w_.active) records.push_back(ReputationUpdateRecord{l, reps_.global_rep(l)});
    if (cfg_.ledger_on) append(chain_, static_cast<std::uint64_t>(k), records);

    // (7) metrics
    for (std::size_t j = 0; j < m; ++j) {
      CoalitionRoundMetrics cm;
      cm.coalition = j;
      cm.head = partition_.heads[j];
      cm.members = partition_.coalitions[j].size();
      cm.participants = participants[j].size();
      cm.round_latency = latency[j];
      cm.u_msp = eq[j].u_msp;
      cm.i_comp_star = eq[j].i_comp_star;
      for (auto l : participants[j]) score(l, models_[j]);
      double before = 0.0, after = 0.0, loss = 0.0;
      std::size_t counted = 0;
      for (auto l : partition_.coalitions[j]) {
        if (w_.shards[l].test.empty()) continue;
        if (cfg_.exclude_inactive_accuracy && !trained[l]) continue;
        before += last_before_[l];
        after += last_after_[l];
        loss += last_loss_[l];
        ++counted;
      }
      if (counted > 0) {
        cm.accuracy_before = before / static_cast<double>(counted);
        cm.accuracy_after = after / static_cast<double>(counted);
        cm.loss = loss / static_cast<double>(counted);
      }
      out.coalitions.push_back(cm);
    }
    for (auto l : w_.active) {
      LearnerRoundMetrics lm;
      lm.learner = l;
      lm.coalition = partition_.coalition_of(l);
      lm.honest = w_.profiles[l].honest;
      lm.participated = trained[l].has_value();
      if (trained[l]) {
        lm.payoff = trained[l]->u_mml;
        lm.delta = trained[l]->delta;
        lm.kkt_case = trained[l]->kkt_case;
        lm.theta = trained[l]->theta;
      }
      lm.reputation = reps_.global_rep(l);
      lm.accuracy = last_after_[l];
      total_payoff_[l] += lm.payoff;
      out.learners.push_back(lm);
    }
    last_participated_.assign(cfg_.num_learners, false);
    for (auto l : w_.active) last_participated_[l] = trained[l].has_value();
    check_conservation(out);
    ++round_;
    return out;
  }

  Summary summarize(std::span<const RoundMetrics> rounds) const {
    Summary s;
    s.active = w_.active.size();
    s.passive = w_.passive.size();
    double acc = 0.0, acc_h = 0.0, acc_d = 0.0, pay_h = 0.0, pay_d = 0.0, pay = 0.0;
    std::size_t n_acc = 0, n_acc_h = 0, n_acc_d = 0, n_h = 0, n_d = 0;
    for (auto l : w_.active) {
      const bool honest = w_.profiles[l].honest;
      if (!honest) ++s.dishonest;
      pay += total_payoff_[l];
      (honest ? pay_h : pay_d) += total_payoff_[l];
      ++(honest ? n_h : n_d);
      if (w_.shards[l].test.empty()) continue;
      if (cfg_.exclude_inactive_accuracy && !last_participated_[l]) continue;
      acc += last_after_[l];
      ++n_acc;
      (honest ? acc_h : acc_d) += last_after_[l];
      ++(honest ? n_acc_h : n_acc_d);
    }
    auto mean = [](double sum, std::size_t n) { return n ? sum / static_cast<double>(n) : 0.0; };
    s.mean_personalized_accuracy = mean(acc, n_acc);
    s.honest_accuracy = mean(acc_h, n_acc_h);
    s.dishonest_accuracy = mean(acc_d, n_acc_d);
    s.mean_payoff = mean(pay, s.active);
    s.honest_payoff = mean(pay_h, n_h);
    s.dishonest_payoff = mean(pay_d, n_d);
    double lat = 0.0, msp = 0.0;
    std::size_t n_lat = 0;
    for (const auto& r : rounds) {
      for (const auto& c : r.coalitions) {
        msp += c.u_msp;
        if (c.participants > 0) {
          lat += c.round_latency;
          ++n_lat;
        }
      }
    }
    s.mean_round_latency = mean(lat, n_lat);
    s.mean_u_msp = mean(msp, rounds.size());
    s.passive_accuracy = evaluate_passive(w_, models_, partition_.heads, cfg_.passive_count_list());
    return s;
  }

  /// Similarity of learner `i` to the head of coalition `j` under the
  /// coalition's model.
  double similarity(std::size_t j, std::size_t i) const { return similarity_[j][i]; }

 private:
  // Evaluates learner `l` on its own test split with and without one
  // personalization step on its training data.
  void score(std::size_t l, const ModelParams& model) {
    const auto& shard = w_.shards[l];
    if (shard.test.empty()) return;
    last_before_[l] = evaluate(model, shard.test).accuracy;
    const auto adapted = personalize(model, hyper_, shard.train, cfg_.personalize_steps);
    const auto e = evaluate(adapted, shard.test);
    last_after_[l] = e.accuracy;
    last_loss_[l] = e.loss;
  }

  void refresh_embeddings() {
    for (std::size_t j = 0; j < models_.size(); ++j) {
      for (auto i : w_.active) embeds_[j][i] = embed(models_[j], w_.shards[i].train);
    }
  }

  Eigen::VectorXd embedding_delta(std::size_t j, std::size_t i) const {
    if (round_ == 0) return embeds_[j][i];
    return embeds_[j][i] - base_embed_[i];
  }

  void compute_similarity(const std::vector<std::size_t>& heads) {
    similarity_.assign(heads.size(), std::vector<double>(cfg_.num_learners, 0.0));
    for (std::size_t j = 0; j < heads.size(); ++j) {
      const Eigen::VectorXd h = embedding_delta(j, heads[j]);
      for (auto i : w_.active) {
        const Eigen::VectorXd e = embedding_delta(j, i);
        similarity_[j][i] = cosine_similarity(std::span(e.data(), static_cast<std::size_t>(e.size())),
                                              std::span(h.data(), static_cast<std::size_t>(h.size())));
      }
    }
    // overall reputation of every learner towards every head
    overall_.assign(heads.size(), std::vector<double>(cfg_.num_learners, 0.0));
    const auto head_sim = [&](std::size_t head, std::size_t other) {
      for (std::size_t j = 0; j < heads.size(); ++j) {
        if (heads[j] == head) return similarity_[j][other];
      }
      return 0.0;
    };
    for (std::size_t j = 0; j < heads.size(); ++j) {
      for (auto i : w_.active) overall_[j][i] = reps_.overall_rep(i, heads[j], head_sim);
    }
  }

  CoalitionContext context(std::size_t j, std::span<const std::size_t> members) const {
    double r_bar = -std::numeric_limits<double>::infinity();
    for (auto i : members) r_bar = std::max(r_bar, overall_[j][i]);
    std::vector<FollowerSpec> specs;
    specs.reserve(members.size());
    for (auto i : members) {
      const auto& p = w_.profiles[i];
      FollowerSpec f;
      f.learner = i;
      f.similarity = similarity_[j][i];
      f.data_size = static_cast<double>(w_.shards[i].train.size());
      f.h_value = rep_utility(overall_[j][i], r_bar, rep_params_);
      f.delta_min = p.delta_min;
      f.delta_max = p.delta_max;
      f.cost = p.cost;
      f.tau = cfg_.tau;
      f.batch = cfg_.batch;
      specs.push_back(f);
    }
    return CoalitionContext(std::move(specs), w_.profiles[partition_.heads[j]].t_max);
  }

  std::vector<std::size_t> pick_heads(const PartitionState& p, HeadMode mode, Rng& rng) const {
    switch (mode) {
      case HeadMode::Reputation: {
        std::vector<double> r(cfg_.num_learners, 0.0), t(cfg_.num_learners, 0.0);
        for (auto i : w_.active) {
          r[i] = reps_.global_rep(i);
          t[i] = w_.profiles[i].t_max;
        }
        return select_heads(p, r, t);
      }
      case HeadMode::LowestDeadline: {
        std::vector<std::size_t> heads;
        for (const auto& c : p.coalitions) {
          heads.push_back(*std::min_element(c.begin(), c.end(), [&](auto a, auto b) {
            return w_.profiles[a].t_max < w_.profiles[b].t_max;
          }));
        }
        return heads;
      }
      case HeadMode::Random: {
        std::vector<std::size_t> heads;
        for (const auto& c : p.coalitions) {
          heads.push_back(c[std::uniform_int_distribution<std::size_t>(0, c.size() - 1)(rng)]);
        }
        return heads;
      }
    }
    return {};
  }

  PartitionState random_partition(std::size_t m, Rng& rng) const {
    std::vector<std::size_t> order = w_.active;
    std::shuffle(order.begin(), order.end(), rng);
    PartitionState p;
    p.coalitions.resize(m);
    for (std::size_t k = 0; k < order.size(); ++k) {
      const std::size_t j = k < m ? k : std::uniform_int_distribution<std::size_t>(0, m - 1)(rng);
      p.coalitions[j].push_back(order[k]);
    }
    for (auto& c : p.coalitions) std::sort(c.begin(), c.end());
    return p;
  }

  // Farthest-point seeds on raw embedding similarity, then nearest seed.
  PartitionState similarity_clusters(std::size_t m) const {
    const auto sim = [&](std::size_t a, std::size_t b) {
      const auto& ea = embeds_[0][a];
      const auto& eb = embeds_[0][b];
      return cosine_similarity(std::span(ea.data(), static_cast<std::size_t>(ea.size())),
                               std::span(eb.data(), static_cast<std::size_t>(eb.size())));
    };
    std::vector<std::size_t> seeds{w_.active.front()};
    while (seeds.size() < m) {
      std::size_t pick = kParked;
      double lowest = std::numeric_limits<double>::infinity();
      for (auto i : w_.active) {
        if (std::find(seeds.begin(), seeds.end(), i) != seeds.end()) continue;
        double closest = -std::numeric_limits<double>::infinity();
        for (auto s : seeds) closest = std::max(closest, sim(i, s));
        if (closest < lowest) {
          lowest = closest;
          pick = i;
        }
      }
      seeds.push_back(pick);
    }
    PartitionState p;
    p.coalitions.resize(m);
    for (auto i : w_.active) {
      std::size_t best = 0;
      double best_s = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < m; ++j) {
        const double s = seeds[j] == i ? 2.0 : sim(i, seeds[j]);
        if (s > best_s) {
          best_s = s;
          best = j;
        }
      }
      p.coalitions[best].push_back(i);
    }
    return p;
  }

  FormationResult arrange(int k, Rng& rng) {
    const std::size_t m = models_.size();
    FormationResult r;
    switch (strategy_.coalitions) {
      case CoalitionMode::Random: {
        r.partition = random_partition(m, rng);
        r.partition.heads = pick_heads(r.partition, strategy_.heads, rng);
        compute_similarity(r.partition.heads);
        return r;
      }
      case CoalitionMode::BestEffort: {
        r.partition.coalitions = {w_.active};
        r.partition.heads = pick_heads(r.partition, strategy_.heads, rng);
        compute_similarity(r.partition.heads);
        return r;
      }
      case CoalitionMode::Fixed: {
        if (k == 0) fixed_ = similarity_clusters(m);
        r.partition = fixed_;
        r.partition.heads = pick_heads(r.partition, strategy_.heads, rng);
        compute_similarity(r.partition.heads);
        return r;
      }
      case CoalitionMode::Hedonic: break;
    }
    PartitionState start;
    if (k == 0) {
      start = random_partition(m, rng);
      start.heads = pick_heads(start, HeadMode::Random, rng);
    } else {
      start = partition_;
      start.heads = pick_heads(start, strategy_.heads, rng);
    }
    compute_similarity(start.heads);
    partition_ = start;  // context() reads the heads from here
    const UtilityFn utility = [this](std::size_t learner, std::size_t j, std::span<const std::size_t> members) {
      const auto ctx = context(j, members);
      const auto q = static_cast<std::size_t>(std::find(members.begin(), members.end(), learner) - members.begin());
      if (!deadline_reachable(ctx, q)) return -std::numeric_limits<double>::infinity();
      return follower_best_response(ctx, q, i_comp_[j], leader_.i_rep).utility;
    };
    FormationOptions options;
    options.max_switches = cfg_.max_switches;
    options.seed = derive_seed(cfg_.seed, streams::kFormationBase + static_cast<std::uint64_t>(k));
    return form_coalitions(std::move(start), utility, options);
  }

  void check_conservation(const RoundMetrics& r) const {
    std::vector<std::size_t> seen = partition_.all_learners();
    if (seen != w_.active) throw Error(Errc::InvalidParam, "learner conservation violated");
    for (auto e : r.excluded) {
      if (partition_.coalition_of(e) == kParked) throw Error(Errc::InvalidParam, "excluded learner outside coalitions");
    }
  }

  World w_;
  const ExperimentConfig& cfg_;
  Strategy strategy_;
  MetaHyper hyper_;
  LeaderParams leader_;
  RepParams rep_params_;
  ReputationStore reps_;
  Chain chain_;
  PartitionState partition_;
  PartitionState fixed_;
  std::vector<ModelParams> models_;
  std::vector<double> i_comp_;
  std::vector<Eigen::VectorXd> base_embed_;
  std::vector<std::vector<Eigen::VectorXd>> embeds_;
  std::vector<std::vector<double>> similarity_;
  std::vector<std::vector<double>> overall_;
  std::vector<double> last_before_, last_after_, last_loss_;
  std::vector<bool> last_participated_;
  std::vector<double> total_payoff_;
  std::vector<nlohmann::json> trace_;
  int round_ = 0;
};

inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  Simulation sim(cfg);
  ExperimentResult out;
  for (int k = 0; k < cfg.rounds; ++k) out.rounds.push_back(sim.run_round());
  out.summary = sim.summarize(out.rounds);
  out.trace = sim.trace();
  out.chain = sim.chain();
  return out;
}

// ---------------------------------------------------------------------------
// Output files
// ---------------------------------------------------------------------------

inline std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline constexpr const char* kMetricsHeader =
    "round,coalition,head,members,participants,accuracy_before,accuracy_after,loss,round_latency,u_msp,"
    "i_comp_star";

inline std::string metrics_csv(std::span<const RoundMetrics> rounds) {
  std::string s = std::string(kMetricsHeader) + "\n";
  for (const auto& r : rounds) {
    for (const auto& c : r.coalitions) {
      s += std::to_string(r.round) + "," + std::to_string(c.coalition) + "," + std::to_string(c.head) + "," +
           std::to_string(c.members) + "," + std::to_string(c.participants) + "," +
           format_number(c.accuracy_before) + "," + format_number(c.accuracy_after) + "," +
           format_number(c.loss) + "," + format_number(c.round_latency) + "," + format_number(c.u_msp) + "," +
           format_number(c.i_comp_star) + "\n";
    }
  }
  return s;
}

inline constexpr const char* kLearnerHeader =
    "round,learner,coalition,honest,participated,payoff,reputation,delta,kkt_case,theta,accuracy";

inline std::string learner_csv(std::span<const RoundMetrics> rounds) {
  std::string s = std::string(kLearnerHeader) + "\n";
  for (const auto& r : rounds) {
    for (const auto& l : r.learners) {
      s += std::to_string(r.round) + "," + std::to_string(l.learner) + "," +
           (l.coalition == kParked ? std::string("parked") : std::to_string(l.coalition)) + "," +
           (l.honest ? "1" : "0") + "," + (l.participated ? "1" : "0") + "," + format_number(l.payoff) + "," +
           format_number(l.reputation) + "," + format_number(l.delta) + "," + std::to_string(l.kkt_case) + "," +
           format_number(l.theta) + "," + format_number(l.accuracy) + "\n";
    }
  }
  return s;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::Io, "cannot write " + path.string());
  out << text;
}

/// metrics.csv, learners.csv, summary.json, partition_trace.jsonl, ledger.bin
inline void write_outputs(const ExperimentResult& r, const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text(dir / "metrics.csv", metrics_csv(r.rounds));
  write_text(dir / "learners.csv", learner_csv(r.rounds));
  nlohmann::json summary = summary_json(r.summary);
  summary["config"] = config_json(cfg);
  summary["ledger_blocks"] = r.chain.size();
  summary["ledger_verified"] = verify(r.chain).ok;
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  std::string trace;
  for (const auto& line : r.trace) trace += line.dump() + "\n";
  write_text(dir / "partition_trace.jsonl", trace);
  save_chain(r.chain, dir / "ledger.bin");
}

}  // namespace gfml
