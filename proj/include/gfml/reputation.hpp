#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "gfml/error.hpp"

namespace gfml {

/// Per-round contribution: (u + 1)·ln(1 + slack), where slack is the time
/// left before the deadline. A missed deadline contributes 0, never less.
inline double contribution(double u, double t_max, double t_comp, double t_comm) {
  const double arg = std::max(1.0, 1.0 + t_max - t_comp - t_comm);
  return (u + 1.0) * std::log(arg);
}

struct RepParams {
  double gamma = 0.5;  // default reputation utility
  double r_th = 0.5;   // reputation threshold
};

/// Reputation utility H. Below the threshold it decays as gamma·e^(r - r_th);
/// above it rises as gamma + (1 - gamma)·ln(1 + mu) with
/// mu = (e - 1)(r - r_th)/(r_bar - r_th), reaching exactly 1 at r = r_bar.
inline double rep_utility(double r, double r_bar, const RepParams& params) {
  if (r < params.r_th) return params.gamma * std::exp(r - params.r_th);
  double mu = 0.0;
  if (r_bar > params.r_th) mu = (std::numbers::e - 1.0) * (r - params.r_th) / (r_bar - params.r_th);
  // written as 1 - (1 - gamma)(1 - lift) so that r == r_bar lands on 1 exactly
  const double lift = r == r_bar && r_bar > params.r_th ? 1.0 : std::log1p(mu);
  return 1.0 - (1.0 - params.gamma) * (1.0 - lift);
}

struct ContributionEntry {
  std::size_t learner = 0;
  std::size_t head = 0;
  int round = 0;
  double theta = 0.0;  // contribution, >= 0

  friend bool operator==(const ContributionEntry&, const ContributionEntry&) = default;
};

/// Similarity between the task of `head` and that of `other_head`.
using HeadSimilarity = std::function<double(std::size_t head, std::size_t other_head)>;

/// History of contributions per (learner, head, round). Exponents of the
/// decay factor are assigned by recency within each learner's own history:
/// the most recent entry gets lambda^1, the one before lambda^2, and so on.
class ReputationStore {
 public:
  ReputationStore() = default;
  ReputationStore(double lambda, double phi) : lambda_(lambda), phi_(phi) {
    if (lambda < 0.0 || lambda > 1.0 || phi < 0.0 || phi > 1.0) {
      throw Error(Errc::InvalidParam, "lambda and phi must lie in [0,1]");
    }
  }

  double lambda() const noexcept { return lambda_; }
  double phi() const noexcept { return phi_; }

  void record(std::size_t learner, std::size_t head, int round, double theta) {
    if (!(theta >= 0.0) || !std::isfinite(theta)) {
      throw Error(Errc::InvalidParam, "contribution must be finite and non-negative");
    }
    if (learner >= per_learner_.size()) per_learner_.resize(learner + 1);
    auto& hist = per_learner_[learner];
    if (!hist.empty() && hist.back().round >= round) {
      throw Error(Errc::NonMonotoneRound, "learner " + std::to_string(learner) +
                                              " already has an entry for round " +
                                              std::to_string(hist.back().round));
    }
    hist.push_back({learner, head, round, theta});
  }

  /// Entries of one learner, oldest first.
  const std::vector<ContributionEntry>& history(std::size_t learner) const {
    static const std::vector<ContributionEntry> empty;
    return learner < per_learner_.size() ? per_learner_[learner] : empty;
  }

  double global_rep(std::size_t learner) const {
    const auto& hist = history(learner);
    double sum = 0.0;
    double weight = lambda_;
    for (auto it = hist.rbegin(); it != hist.rend(); ++it, weight *= lambda_) {
      sum += weight * it->theta;
    }
    return sum;
  }

  double task_rep(std::size_t learner, std::size_t head, const HeadSimilarity& similarity) const {
    const auto& hist = history(learner);
    double sum = 0.0;
    double weight = lambda_;
    for (auto it = hist.rbegin(); it != hist.rend(); ++it, weight *= lambda_) {
      const double s = it->head == head ? 1.0 : similarity(head, it->head);
      sum += weight * s * it->theta;
    }
    return sum;
  }

  double overall_rep(std::size_t learner, std::size_t head, const HeadSimilarity& similarity) const {
    return phi_ * global_rep(learner) + (1.0 - phi_) * task_rep(learner, head, similarity);
  }

 private:
  double lambda_ = 0.7;
  double phi_ = 0.2;
  std::vector<std::vector<ContributionEntry>> per_learner_;
};

}  // namespace gfml
