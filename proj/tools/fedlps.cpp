#include <CLI11.hpp>

#include "fedlps/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"fedlps - federated learnable-sparsification simulator"};
  app.require_subcommand(1);

  fedlps::CliOverrides ov;
  uint64_t seed = 0;
  unsigned threads = 0;
  auto* seed_opt = app.add_option("--seed", seed, "override the config seed");
  auto* threads_opt =
      app.add_option("--threads", threads, "override worker thread count (0 = hardware)");

  std::string run_config;
  auto* run = app.add_subcommand("run", "execute one experiment from a config file");
  run->add_option("config", run_config, "path to the run config")->required();

  std::string sweep_config, axis;
  auto* sweep = app.add_subcommand("sweep", "run a config across one experiment axis");
  sweep->add_option("config", sweep_config, "path to the base config")->required();
  sweep->add_option("--axis", axis, "ratio|pattern|heterogeneity|noniid")->required();

  app.add_subcommand("verify", "run the built-in oracle/invariant suite");

  CLI11_PARSE(app, argc, argv);
  if (seed_opt->count() > 0) ov.seed = seed;
  if (threads_opt->count() > 0) ov.threads = threads;

  if (run->parsed()) return fedlps::cmd_run(run_config, ov);
  if (sweep->parsed()) return fedlps::cmd_sweep(sweep_config, axis, ov);
  return fedlps::cmd_verify();
}
