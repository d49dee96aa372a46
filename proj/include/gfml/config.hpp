#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "gfml/error.hpp"

namespace gfml {

inline const std::vector<std::string>& strategy_ids() {
  static const std::vector<std::string> ids = {
      "gfml",
      "gfml_opt_freq",
      "gfml_random_freq",
      "random_coalition_random",
      "random_coalition_stackelberg",
      "random_coalition_opt",
      "best_effort_random_head",
      "best_effort_stackelberg",
      "best_effort_opt",
      "fixed_coalition_stackelberg",
      "fixed_coalition_opt",
  };
  return ids;
}

/// Every tunable of an experiment. Defaults follow the reference parameter
/// table; the config file keys are exactly these member names.
struct ExperimentConfig {
  // population and game
  std::size_t num_learners = 40;
  std::size_t num_coalitions = 4;
  double active_fraction = 0.9;
  // model and meta-training
  double model_bits = 1e7;
  double alpha = 1e-3;
  double beta = 1e-2;
  std::size_t batch = 40;
  int tau = 10;
  std::string hvp = "exact";  // exact | fd
  int personalize_steps = 1;
  // device cost
  double rho = 0.1;
  double zeta = 1e-27;
  double cycles_per_sample = 10.0;
  double delta_min = 1e7;
  double delta_max = 1e9;
  double rate_min = 5e6;
  double rate_max = 1e7;
  double t_max_min = 11.0;
  double t_max_max = 20.0;
  double comm_a = 0.0;
  double comm_b = 0.0;
  double comm_z = 1e-9;
  double eps_loss = 0.01;
  // reputation
  double lambda = 0.7;
  double phi = 0.2;
  int chi = 1;
  double gamma = 0.5;
  double r_th = 0.5;
  // incentives
  double i_comp_min = 5.0;
  double i_comp_max = 15.0;
  double i_rep = 5.0;
  double eta = 25.0;
  // run
  int rounds = 30;
  std::uint64_t seed = 0;
  std::string strategy = "gfml";
  double misbehavior_ratio = 0.0;
  int misbehavior_tau = 2;
  bool ledger_on = true;
  bool exclude_inactive_accuracy = false;
  std::size_t max_switches = 10000;
  std::string passive_counts = "0,1,5,20";
  // data
  std::string dataset = "blobs";  // blobs | idx
  std::string dataset_images;
  std::string dataset_labels;
  std::size_t dataset_limit = 0;  // 0 keeps every sample
  std::size_t blob_classes = 10;
  std::size_t blob_per_class = 200;
  std::size_t blob_dim = 20;
  double blob_sigma = 0.5;
  std::size_t classes_per_device = 2;
  double dirichlet_alpha = 0.5;
  double test_fraction = 0.1;

  std::vector<std::size_t> passive_count_list() const;
  void validate() const;
};

namespace config_detail {

// unsigned long and unsigned long long are distinct types everywhere, so size_t
// and uint64_t fields each bind to exactly one alternative.
using FieldRef =
    std::variant<double*, int*, unsigned long*, unsigned long long*, bool*, std::string*>;

struct Field {
  std::string_view name;
  FieldRef ref;
};

inline std::vector<Field> fields(ExperimentConfig& c) {
  return {
      {"num_learners", &c.num_learners},
      {"num_coalitions", &c.num_coalitions},
      {"active_fraction", &c.active_fraction},
      {"model_bits", &c.model_bits},
      {"alpha", &c.alpha},
      {"beta", &c.beta},
      {"batch", &c.batch},
      {"tau", &c.tau},
      {"hvp", &c.hvp},
      {"personalize_steps", &c.personalize_steps},
      {"rho", &c.rho},
      {"zeta", &c.zeta},
      {"cycles_per_sample", &c.cycles_per_sample},
      {"delta_min", &c.delta_min},
      {"delta_max", &c.delta_max},
      {"rate_min", &c.rate_min},
      {"rate_max", &c.rate_max},
      {"t_max_min", &c.t_max_min},
      {"t_max_max", &c.t_max_max},
      {"comm_a", &c.comm_a},
      {"comm_b", &c.comm_b},
      {"comm_z", &c.comm_z},
      {"eps_loss", &c.eps_loss},
      {"lambda", &c.lambda},
      {"phi", &c.phi},
      {"chi", &c.chi},
      {"gamma", &c.gamma},
      {"r_th", &c.r_th},
      {"i_comp_min", &c.i_comp_min},
      {"i_comp_max", &c.i_comp_max},
      {"i_rep", &c.i_rep},
      {"eta", &c.eta},
      {"rounds", &c.rounds},
      {"seed", &c.seed},
      {"strategy", &c.strategy},
      {"misbehavior_ratio", &c.misbehavior_ratio},
      {"misbehavior_tau", &c.misbehavior_tau},
      {"ledger_on", &c.ledger_on},
      {"exclude_inactive_accuracy", &c.exclude_inactive_accuracy},
      {"max_switches", &c.max_switches},
      {"passive_counts", &c.passive_counts},
      {"dataset", &c.dataset},
      {"dataset_images", &c.dataset_images},
      {"dataset_labels", &c.dataset_labels},
      {"dataset_limit", &c.dataset_limit},
      {"blob_classes", &c.blob_classes},
      {"blob_per_class", &c.blob_per_class},
      {"blob_dim", &c.blob_dim},
      {"blob_sigma", &c.blob_sigma},
      {"classes_per_device", &c.classes_per_device},
      {"dirichlet_alpha", &c.dirichlet_alpha},
      {"test_fraction", &c.test_fraction},
  };
}

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

template <class T>
T parse_number(std::string_view key, std::string_view text) {
  T value{};
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) {
    throw Error(Errc::ConfigInvalid, std::string(key) + ": cannot parse '" + std::string(text) + "'");
  }
  return value;
}

inline void assign(std::string_view key, const FieldRef& ref, std::string_view text) {
  std::visit(
      [&](auto* p) {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, std::string>) {
          *p = std::string(text);
        } else if constexpr (std::is_same_v<T, bool>) {
          if (text == "true" || text == "1" || text == "on" || text == "yes") {
            *p = true;
          } else if (text == "false" || text == "0" || text == "off" || text == "no") {
            *p = false;
          } else {
            throw Error(Errc::ConfigInvalid, std::string(key) + ": expected a boolean");
          }
        } else {
          if constexpr (std::is_unsigned_v<T>) {
            if (!text.empty() && text.front() == '-') {
              throw Error(Errc::ConfigInvalid, std::string(key) + " must be non-negative");
            }
          }
          *p = parse_number<T>(key, text);
        }
      },
      ref);
}

inline void require(bool ok, const std::string& what) {
  if (!ok) throw Error(Errc::ConfigInvalid, what);
}

}  // namespace config_detail

/// Sets one field by its key name; unknown keys are rejected.
inline void set_config_value(ExperimentConfig& cfg, std::string_view key, std::string_view value) {
  for (const auto& f : config_detail::fields(cfg)) {
    if (f.name == key) {
      config_detail::assign(key, f.ref, value);
      return;
    }
  }
  throw Error(Errc::ConfigInvalid, "unknown key '" + std::string(key) + "'");
}

/// key=value lines; '#' starts a comment. Unset keys keep their defaults.
inline ExperimentConfig parse_config(std::string_view text) {
  ExperimentConfig cfg;
  std::istringstream in{std::string(text)};
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    std::string_view sv = line;
    if (const auto hash = sv.find('#'); hash != std::string_view::npos) sv = sv.substr(0, hash);
    sv = config_detail::trim(sv);
    if (sv.empty()) continue;
    const auto eq = sv.find('=');
    if (eq == std::string_view::npos) {
      throw Error(Errc::ConfigInvalid, "line " + std::to_string(lineno) + ": expected key=value");
    }
    set_config_value(cfg, config_detail::trim(sv.substr(0, eq)), config_detail::trim(sv.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::ConfigInvalid, "cannot open config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

inline nlohmann::json config_json(const ExperimentConfig& cfg) {
  nlohmann::json j = nlohmann::json::object();
  auto copy = cfg;
  for (const auto& f : config_detail::fields(copy)) {
    std::visit([&](auto* p) { j[std::string(f.name)] = *p; }, f.ref);
  }
  return j;
}

inline std::vector<std::size_t> ExperimentConfig::passive_count_list() const {
  std::vector<std::size_t> out;
  std::string_view rest = passive_counts;
  while (!rest.empty()) {
    const auto comma = rest.find(',');
    const auto item = config_detail::trim(rest.substr(0, comma));
    if (!item.empty()) out.push_back(config_detail::parse_number<std::size_t>("passive_counts", item));
    if (comma == std::string_view::npos) break;
    rest = rest.substr(comma + 1);
  }
  return out;
}

inline void ExperimentConfig::validate() const {
  using config_detail::require;
  require(num_learners >= 1, "num_learners must be >= 1");
  require(num_coalitions >= 1, "num_coalitions must be >= 1");
  require(active_fraction > 0.0 && active_fraction <= 1.0, "active_fraction must be in (0,1]");
  const auto active = static_cast<std::size_t>(active_fraction * static_cast<double>(num_learners));
  require(active >= num_coalitions, "fewer active learners than coalitions");
  require(model_bits > 0.0, "model_bits must be positive");
  require(alpha > 0.0, "alpha must be positive");
  require(beta >= 0.0, "beta must be non-negative");
  require(batch >= 1, "batch must be >= 1");
  require(tau >= 1, "tau must be >= 1");
  require(hvp == "exact" || hvp == "fd", "hvp must be exact or fd");
  require(personalize_steps >= 0, "personalize_steps must be >= 0");
  require(rho > 0.0 && zeta > 0.0 && cycles_per_sample > 0.0, "rho, zeta, cycles_per_sample must be positive");
  require(delta_min > 0.0 && delta_min < delta_max, "need 0 < delta_min < delta_max");
  require(rate_min > 0.0 && rate_min <= rate_max, "need 0 < rate_min <= rate_max");
  require(t_max_min > 0.0 && t_max_min <= t_max_max, "need 0 < t_max_min <= t_max_max");
  require(comm_a >= 0.0 && comm_b >= 0.0 && comm_z >= 0.0, "communication energy terms must be >= 0");
  require(eps_loss >= 0.0 && eps_loss < 1.0, "eps_loss must be in [0,1)");
  require(lambda >= 0.0 && lambda <= 1.0, "lambda must be in [0,1]");
  require(phi >= 0.0 && phi <= 1.0, "phi must be in [0,1]");
  require(chi >= 1, "chi must be >= 1");
  require(gamma > 0.0 && gamma < 1.0, "gamma must be in (0,1)");
  require(r_th >= 0.0, "r_th must be >= 0");
  require(i_comp_min > 0.0 && i_comp_min < i_comp_max, "need 0 < i_comp_min < i_comp_max");
  require(i_rep >= 0.0, "i_rep must be >= 0");
  require(eta >= 0.0, "eta must be >= 0");
  require(rounds >= 1, "rounds must be >= 1");
  require(std::find(strategy_ids().begin(), strategy_ids().end(), strategy) != strategy_ids().end(),
          "unknown strategy '" + strategy + "'");
  require(misbehavior_ratio >= 0.0 && misbehavior_ratio <= 1.0, "misbehavior_ratio must be in [0,1]");
  require(misbehavior_tau >= 0, "misbehavior_tau must be >= 0");
  require(max_switches >= 1, "max_switches must be >= 1");
  require(dataset == "blobs" || dataset == "idx", "dataset must be blobs or idx");
  if (dataset == "idx") {
    require(!dataset_images.empty() && !dataset_labels.empty(), "idx dataset needs dataset_images and dataset_labels");
  } else {
    require(blob_classes >= 2 && blob_per_class >= 1 && blob_dim >= 1 && blob_sigma > 0.0,
            "blob parameters out of range");
  }
  require(classes_per_device >= 1, "classes_per_device must be >= 1");
  require(dirichlet_alpha > 0.0, "dirichlet_alpha must be positive");
  require(test_fraction >= 0.0 && test_fraction < 1.0, "test_fraction must be in [0,1)");
  (void)passive_count_list();
}

}  // namespace gfml
