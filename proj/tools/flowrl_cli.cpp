#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "flowrl/harness.hpp"

namespace {

int dispatch(const CLI::App& app, const std::string& config_path,
             const std::string& out_flag, std::int64_t seed_override,
             int threads) {
  using namespace flowrl;
  const Config cfg = Config::from_file(config_path, known_config_keys());
  ExperimentSetup setup = load_setup(cfg);
  if (seed_override >= 0)
    setup.seeds = {static_cast<std::uint64_t>(seed_override)};
  const std::string out = out_flag.empty() ? default_out_root() : out_flag;

  if (app.got_subcommand("pretrain")) {
    cmd_pretrain(setup, out);
  } else if (app.got_subcommand("train-rl")) {
    cmd_train_rl(setup, out, threads);
  } else if (app.got_subcommand("ablation")) {
    cmd_ablation(setup, out, threads);
  } else if (app.got_subcommand("sensitivity")) {
    cmd_sensitivity(setup, out, threads);
  } else if (app.got_subcommand("decode-study")) {
    cmd_decode_study(setup, out);
  } else if (app.got_subcommand("plotdata")) {
    std::cout << cmd_plotdata(setup, out) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reward-guided noise search for RL fine-tuning of "
               "flow-matching models on synthetic tasks"};
  app.require_subcommand(1);
  app.fallthrough();  // accept global flags before or after the subcommand

  std::string config_path;
  std::string out_flag;
  std::int64_t seed_override = -1;
  int threads = 1;
  app.add_option("--config", config_path, "experiment config file")
      ->required();
  app.add_option("--out", out_flag,
                 "output root (default: $FLOWRL_OUT, else ./runs)");
  app.add_option("--seed-override", seed_override,
                 "replace run.seeds with this single seed");
  app.add_option("--threads", threads, "max parallel grid cells")
      ->check(CLI::PositiveNumber);

  app.add_subcommand("pretrain",
                     "fit the velocity field to the task by flow matching");
  app.add_subcommand("train-rl",
                     "run the RL grid over run.modes x run.seeds");
  app.add_subcommand("ablation",
                     "run the four-cell noise-selection strategy grid");
  app.add_subcommand("sensitivity",
                     "run reward-guided arms with search iterations 1, 3, 5");
  app.add_subcommand("decode-study",
                     "measure one-step decode error and reward rank fidelity "
                     "across timesteps");
  app.add_subcommand("plotdata",
                     "merge per-cell metrics into one long-format CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;  // help/version exit clean; bad usage is a config error
  }

  try {
    return dispatch(app, config_path, out_flag, seed_override, threads);
  } catch (const flowrl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const flowrl::MissingArtifact& e) {
    std::cerr << "missing prerequisite: " << e.what() << "\n";
    return 2;
  } catch (const flowrl::DivergenceAbort& e) {
    std::cerr << "divergence abort: " << e.what() << "\n";
    return 3;
  } catch (const flowrl::SearchFailure& e) {
    std::cerr << "divergence abort: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
