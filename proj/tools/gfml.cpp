#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "gfml/gfml.hpp"

namespace {

int exit_code(gfml::Errc code) {
  switch (code) {
    case gfml::Errc::ConfigInvalid: return 2;
    case gfml::Errc::Infeasible:
    case gfml::Errc::NonConvergence: return 3;
    default: return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Coalition-based federated meta-learning simulator"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "run one experiment and write its outputs");
  std::string config_path;
  std::string out_dir;
  std::optional<std::string> strategy;
  std::optional<std::uint64_t> seed;
  std::optional<int> rounds;
  std::optional<double> ratio;
  bool no_ledger = false;
  run->add_option("--config", config_path, "key=value config file")->required();
  run->add_option("--out", out_dir, "output directory")->required();
  run->add_option("--strategy", strategy, "strategy id");
  run->add_option("--seed", seed, "experiment seed");
  run->add_option("--rounds", rounds, "number of global rounds");
  run->add_option("--misbehavior-ratio", ratio, "fraction of active learners that misbehave");
  run->add_flag("--no-ledger", no_ledger, "take contributions from self-reports");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    auto cfg = gfml::load_config(config_path);
    if (strategy) cfg.strategy = *strategy;
    if (seed) cfg.seed = *seed;
    if (rounds) cfg.rounds = *rounds;
    if (ratio) cfg.misbehavior_ratio = *ratio;
    if (no_ledger) cfg.ledger_on = false;
    cfg.validate();

    const auto result = gfml::run_experiment(cfg);
    gfml::write_outputs(result, cfg, out_dir);
    const auto& s = result.summary;
    std::cout << "strategy=" << cfg.strategy << " rounds=" << cfg.rounds
              << " accuracy=" << s.mean_personalized_accuracy << " payoff=" << s.mean_payoff
              << " latency=" << s.mean_round_latency << " u_msp=" << s.mean_u_msp << "\n";
    return 0;
  } catch (const gfml::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
