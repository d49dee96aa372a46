#pragma once

#include <numeric>
#include <span>

#include "gfml/error.hpp"

namespace gfml {

/// Everything the learner profit depends on inside one coalition.
struct UtilityInputs {
  double similarity = 0.0;  // S, cosine similarity to the head, in [-1,1]
  double delta = 0.0;       // chosen CPU frequency
  double delta_lo = 0.0;    // min of members' lower frequency bounds
  double delta_hi = 0.0;    // max of members' upper frequency bounds
  double data_size = 0.0;
  double data_total = 0.0;  // coalition data, mover included
  std::span<const double> h_values;  // H(R) of every coalition member
  double i_comp = 0.0;
  double i_rep = 0.0;
  double comp_energy = 0.0;
  double comm_energy = 0.0;
};

/// (delta - lo)/(hi - lo); a collapsed range counts as a full share.
inline double frequency_share(double delta, double lo, double hi) {
  if (hi < lo) throw Error(Errc::DegenerateFrequencyRange, "upper frequency bound below lower");
  if (hi == lo) return 1.0;
  return (delta - lo) / (hi - lo);
}

inline double data_share(double data_size, double data_total) {
  return data_total > 0.0 ? data_size / data_total : 0.0;
}

inline double mean_h(std::span<const double> h_values) {
  if (h_values.empty()) return 0.0;
  return std::accumulate(h_values.begin(), h_values.end(), 0.0) /
         static_cast<double>(h_values.size());
}

/// (S + freq-share·data-share)·I_comp + mean(H)·I_rep - comp energy - comm energy
inline double mml_utility(const UtilityInputs& in) {
  const double competition =
      in.similarity + frequency_share(in.delta, in.delta_lo, in.delta_hi) *
                          data_share(in.data_size, in.data_total);
  return competition * in.i_comp + mean_h(in.h_values) * in.i_rep - in.comp_energy -
         in.comm_energy;
}

}  // namespace gfml
