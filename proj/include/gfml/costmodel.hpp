#pragma once

#include <algorithm>
#include <span>
#include <utility>

#include "gfml/error.hpp"

namespace gfml {

/// Per-device energy and timing coefficients.
struct DeviceCost {
  double rho = 0.1;                // unit computation cost
  double zeta = 1e-27;             // effective capacitance
  double cycles_per_sample = 10.0;
  double comm_a = 0.0;
  double comm_b = 0.0;
  double comm_z = 1e-9;
  double eps_loss = 0.01;          // transmission loss rate, in [0,1)
  double model_bits = 1e7;         // W
  double rate = 5e6;               // mean transmission rate B, bit/s
};

inline void check_frequency(double delta) {
  if (!(delta > 0.0)) throw Error(Errc::InvalidFrequency, "CPU frequency must be positive");
}

/// rho·tau·c·batch·zeta·delta^2
inline double comp_energy(const DeviceCost& cost, int tau, std::size_t batch, double delta) {
  check_frequency(delta);
  return cost.rho * tau * cost.cycles_per_sample * static_cast<double>(batch) * cost.zeta * delta *
         delta;
}

/// tau·c·batch/delta
inline double comp_time(const DeviceCost& cost, int tau, std::size_t batch, double delta) {
  check_frequency(delta);
  return tau * cost.cycles_per_sample * static_cast<double>(batch) / delta;
}

/// a·x^2 + b·x + z with x = delta/(1 - eps)
inline double comm_energy(const DeviceCost& cost, double delta) {
  const double x = delta / (1.0 - cost.eps_loss);
  return cost.comm_a * x * x + cost.comm_b * x + cost.comm_z;
}

/// W/B
inline double comm_time(const DeviceCost& cost) {
  if (!(cost.rate > 0.0)) throw Error(Errc::InvalidParam, "transmission rate must be positive");
  return cost.model_bits / cost.rate;
}

struct MemberTiming {
  double comp_time = 0.0;
  double comm_time = 0.0;
};

/// Slowest member's compute + upload time.
inline double round_latency(std::span<const MemberTiming> members) {
  if (members.empty()) throw Error(Errc::EmptyCoalition, "round latency of an empty coalition");
  double worst = 0.0;
  for (const auto& m : members) worst = std::max(worst, m.comp_time + m.comm_time);
  return worst;
}

}  // namespace gfml
