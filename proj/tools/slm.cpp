// Command-line front end: solve, da-twin, complexity and sweep runs from JSON configs.

#include <CLI11.hpp>

#include "slm/app/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Stochastic Levenberg-Marquardt experiments"};
  app.require_subcommand(1);

  slm::app::RunOptions opt;
  std::uint64_t seed = 0;
  int workers = 0;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config_path, "JSON config file")->required();
    sub->add_option("--out", opt.out_dir, "output directory")->capture_default_str();
    sub->add_option("--seed", seed, "master seed (overrides the config)");
    sub->add_option("--workers", workers, "worker threads, 0 for one per hardware thread")
        ->check(CLI::NonNegativeNumber);
    sub->add_flag("--quiet", opt.quiet, "suppress progress output");
  };

  CLI::App* solve = app.add_subcommand("solve", "run the solver once and write its trace");
  CLI::App* twin = app.add_subcommand("da-twin", "Lorenz-63 twin experiment over seeds and ensemble sizes");
  CLI::App* complexity = app.add_subcommand("complexity", "Monte Carlo estimate of the stopping time");
  CLI::App* sweep = app.add_subcommand("sweep", "step-contract checks on random model snapshots");
  for (CLI::App* sub : {solve, twin, complexity, sweep}) add_common(sub);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : slm::app::kExitConfig;
  }

  CLI::App* chosen = app.get_subcommands().front();
  if (chosen->count("--seed")) opt.seed = seed;
  if (chosen->count("--workers")) opt.workers = workers;

  if (chosen == solve) return slm::app::cmd_solve(opt);
  if (chosen == twin) return slm::app::cmd_da_twin(opt);
  if (chosen == complexity) return slm::app::cmd_complexity(opt);
  return slm::app::cmd_sweep(opt);
}
