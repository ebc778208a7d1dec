#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "slm/app/config.hpp"
#include "slm/data_assim.hpp"
#include "slm/diagnostics.hpp"
#include "slm/io/csv.hpp"
#include "slm/lm_core.hpp"
#include "slm/subproblem.hpp"

namespace slm::app {

enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitRuntime = 2 };

/// Command-line options shared by every subcommand.
struct RunOptions {
  std::string config_path;
  std::string out_dir = "out";
  std::optional<std::uint64_t> seed;  ///< overrides the config's master_seed
  std::optional<int> workers;         ///< overrides the config (0 = hardware threads)
  bool quiet = false;
};

namespace detail {

inline std::filesystem::path prepare_out_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir))
    throw ConfigError("output directory " + dir + " is not writable: " + ec.message());
  return std::filesystem::path(dir);
}

inline std::string file(const std::filesystem::path& dir, const std::string& name) { return (dir / name).string(); }

inline void say(const RunOptions& opt, const std::string& line) {
  if (!opt.quiet) std::cout << line << '\n';
}

inline std::string size_label(int N) { return N == 0 ? std::string("inf") : std::to_string(N); }

/// Calls `body` and maps failures onto exit codes, with the message on standard error.
template <typename Body>
int guarded(Body&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.kind()) << "]: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------------------------
// solve

/// Per-iteration trace plus a terminal row for the final iterate (f0, f1, rho, step_norm and
/// success left empty there).
inline void write_trace_csv(const std::string& path, const RunTrace& trace, const ResidualProblem& problem) {
  io::CsvWriter w(path, {"iter", "f0", "f1", "rho", "mu", "step_norm", "success", "true_f", "grad_norm"});
  for (const auto& r : trace.records) {
    io::CsvRow row;
    row.add(r.iter).add(r.f0).add(r.f1).add(r.rho).add(r.mu_before).add(r.step_norm).add(r.success);
    row.add(r.true_f_before).add(r.true_grad_norm);
    w.write(row);
  }
  io::CsvRow last;
  last.add(static_cast<int>(trace.records.size())).add("").add("").add("").add(trace.mu_final).add("").add("");
  last.add(problem.value(trace.x_final)).add(problem.gradient(trace.x_final).norm());
  w.write(last);
}

inline int run_solve(const SolveConfig& cfg, const RunOptions& opt) {
  const auto out = detail::prepare_out_dir(opt.out_dir);
  const BuiltProblem built = build_problem(cfg.problem, cfg.x0);
  AnyOracle oracle = make_oracle(cfg.oracle, built);
  const std::uint64_t seed = opt.seed.value_or(cfg.master_seed);
  const RunTrace trace =
      cfg.subsolver == "exact"
          ? run(built.problem, oracle, oracle, ExactSolver{}, cfg.solver, built.x0, seed)
          : run(built.problem, oracle, oracle, TruncatedCg{cfg.solver.cg_tol, cfg.solver.cg_max_iters}, cfg.solver,
                built.x0, seed);
  write_trace_csv(detail::file(out, "trace.csv"), trace, built.problem);

  std::vector<std::string> header{"iterations", "stop_reason", "final_f", "final_grad_norm", "mu_final",
                                  "t_epsilon",  "warnings"};
  for (Index i = 0; i < trace.x_final.size(); ++i) header.push_back("x" + std::to_string(i));
  io::CsvWriter summary(detail::file(out, "summary.csv"), header);
  io::CsvRow row;
  const double gn = built.problem.gradient(trace.x_final).norm();
  row.add(static_cast<int>(trace.records.size())).add(to_string(trace.stop)).add(built.problem.value(trace.x_final));
  row.add(gn).add(trace.mu_final).add(trace.t_epsilon).add(trace.warnings);
  for (Index i = 0; i < trace.x_final.size(); ++i) row.add(trace.x_final[i]);
  summary.write(row);
  if (trace.warnings > 0)
    std::cerr << "warning: " << trace.warnings << " iteration(s) had a non-positive model decrease\n";

  std::ostringstream msg;
  msg << "solve: " << trace.records.size() << " iterations, stop " << to_string(trace.stop)
      << ", final grad norm " << io::format_double(gn);
  detail::say(opt, msg.str());
  return kExitOk;
}

inline int cmd_solve(const RunOptions& opt) {
  return detail::guarded([&] { return run_solve(parse_solve_config(load_json_file(opt.config_path)), opt); });
}

// ---------------------------------------------------------------------------------------------
// da-twin

inline int run_da_twin(TwinConfig cfg, const RunOptions& opt) {
  const auto out = detail::prepare_out_dir(opt.out_dir);
  if (opt.seed) cfg.master_seed = *opt.seed;
  if (opt.workers) cfg.workers = *opt.workers;
  const TwinReport report = twin_experiment(cfg);

  io::CsvWriter summary(detail::file(out, "twin_summary.csv"),
                        {"seed", "N", "status", "iterations", "successful_iterations", "stop_reason", "final_f0",
                         "final_true_f", "final_grad_norm", "distance_to_inf", "max_f0_increase", "x1", "x2", "x3"});
  io::CsvWriter failures(detail::file(out, "failures.csv"), {"seed", "N", "error"});
  int failed = 0;
  for (const auto& cell : report.cells) {
    const std::string label = detail::size_label(cell.N);
    io::CsvRow row;
    row.add(static_cast<unsigned long long>(cell.seed)).add(label);
    if (cell.error) {
      ++failed;
      std::cerr << "cell seed=" << cell.seed << " N=" << label << " failed: " << *cell.error << '\n';
      failures.write(io::CsvRow().add(static_cast<unsigned long long>(cell.seed)).add(label).add(*cell.error));
      row.add("failed");
      for (int i = 0; i < 11; ++i) row.add("");
      summary.write(row);
      continue;
    }
    io::CsvWriter trace(detail::file(out, "twin_seed" + std::to_string(cell.seed) + "_N" + label + ".csv"),
                        {"iteration", "f0", "true_f", "mu", "success"});
    int successes = 0;
    double max_increase = 0.0;
    std::optional<double> prev;
    for (const auto& r : cell.trace.records) {
      trace.write(io::CsvRow().add(r.iter).add(r.f0).add(r.true_f_before).add(r.mu_before).add(r.success));
      if (!r.success) continue;
      ++successes;
      if (prev) max_increase = std::max(max_increase, r.f0 - *prev);
      prev = r.f0;
    }
    const auto& recs = cell.trace.records;
    row.add("ok").add(static_cast<int>(recs.size())).add(successes).add(to_string(cell.trace.stop));
    row.add(recs.empty() ? std::optional<double>{} : std::optional<double>(recs.back().f0));
    row.add(cell.final_true_f).add(cell.final_true_grad_norm).add(cell.distance_to_exact).add(max_increase);
    for (Index i = 0; i < 3; ++i) row.add(cell.x_final[i]);
    summary.write(row);
  }

  std::ostringstream msg;
  msg << "da-twin: " << report.cells.size() - static_cast<std::size_t>(failed) << "/" << report.cells.size()
      << " cells completed";
  detail::say(opt, msg.str());
  return failed == 0 ? kExitOk : kExitRuntime;
}

inline int cmd_da_twin(const RunOptions& opt) {
  return detail::guarded([&] { return run_da_twin(parse_twin_config(load_json_file(opt.config_path)), opt); });
}

// ---------------------------------------------------------------------------------------------
// complexity

/// Certified theory constants for a complexity config, or the reason they are unavailable.
struct CertifiedTheory {
  std::optional<TheoryConstants> constants;
  std::string note;
};

inline CertifiedTheory certify(const ComplexityConfig& cfg, const BuiltProblem& built) {
  CertifiedTheory out;
  const std::optional<double> nu = cfg.nu ? cfg.nu : built.nu;
  const std::optional<double> kjm = cfg.kappa_Jm ? cfg.kappa_Jm : certified_kappa_Jm(cfg.oracle, built);
  if (!nu || !kjm) {
    out.note = "no certified nu or kappa_Jm for this problem; set theory.nu and theory.kappa_Jm";
    return out;
  }
  TheoryPrimitives p;
  p.nu = *nu;
  p.kappa_Jm = *kjm;
  p.kappa_ef = cfg.oracle.constants.kappa_ef;
  p.kappa_eg = cfg.oracle.constants.kappa_eg;
  p.eps_f = cfg.oracle.constants.eps_f;
  p.eta1 = cfg.solver.eta1;
  p.eta2 = cfg.solver.eta2;
  p.lambda = cfg.solver.lambda;
  try {
    out.constants = make_theory_constants(p);
    out.note = "certified";
  } catch (const Error& e) {
    out.note = e.what();
  }
  return out;
}

inline int run_complexity(const ComplexityConfig& cfg, const RunOptions& opt) {
  const auto out = detail::prepare_out_dir(opt.out_dir);
  const BuiltProblem built = build_problem(cfg.problem, cfg.x0);
  const CertifiedTheory theory = certify(cfg, built);

  ComplexitySetup setup;
  setup.cfg = cfg.solver;
  setup.epsilon_grid = cfg.epsilon_grid;
  setup.replications = cfg.replications;
  setup.master_seed = opt.seed.value_or(cfg.master_seed);
  setup.cap = cfg.cap;
  setup.workers = opt.workers.value_or(0);
  setup.theory = theory.constants;
  setup.p = cfg.oracle.constants.p;
  setup.q = cfg.oracle.constants.q;

  const BlockResidualProblem* blocks = built.blocks ? &*built.blocks : nullptr;
  const ComplexityEstimate est = estimate_T_epsilon(
      [&] { return ProblemInstance{built.problem, built.x0}; },
      [&](const ResidualProblem& problem) { return make_oracle(cfg.oracle, problem, blocks); }, setup);

  io::CsvWriter runs(detail::file(out, "complexity_runs.csv"), {"epsilon", "replication", "T", "capped"});
  for (const auto& row : est.rows)
    for (std::size_t r = 0; r < row.T.size(); ++r)
      runs.write(io::CsvRow().add(row.epsilon).add(static_cast<int>(r)).add(row.T[r]).add(bool(row.cap_hit[r])));

  io::CsvWriter summary(detail::file(out, "complexity_summary.csv"),
                        {"epsilon", "replications", "mean_T", "std_err", "capped", "in_fit", "bound", "below_bound",
                         "fitted_slope"});
  for (const auto& row : est.rows) {
    io::CsvRow line;
    line.add(row.epsilon).add(est.replications).add(row.mean_T).add(row.std_err).add(row.capped).add(row.in_fit);
    line.add(row.bound);
    if (row.bound) {
      line.add(row.mean_T < *row.bound);
    } else {
      line.add("");
    }
    line.add(est.fitted_slope);
    summary.write(line);
  }

  io::CsvWriter th(detail::file(out, "complexity_theory.csv"), {"name", "value"});
  th.write(io::CsvRow().add("status").add(theory.note));
  if (theory.constants) {
    const TheoryConstants& tc = *theory.constants;
    const auto put = [&](const char* name, double v) { th.write(io::CsvRow().add(name).add(v)); };
    put("nu", tc.prim.nu);
    put("kappa_Jm", tc.prim.kappa_Jm);
    put("kappa_efs", tc.kappa_efs);
    put("alpha", tc.alpha);
    put("kappa_mu_g", tc.kappa_mu_g);
    put("C1", tc.C1);
    put("C2", tc.C2);
    put("zeta_min", tc.zeta_min);
    put("C3", tc.C3);
    put("tau", tc.tau);
    put("sigma", tc.sigma);
    if (setup.p * setup.q < 1.0) {
      const ProbabilityReport pr = check_probability_conditions(tc, setup.p, setup.q);
      put("cond1_margin", pr.margin1);
      put("cond2_margin", pr.margin2);
    }
  } else {
    std::cerr << "warning: bound column left empty: " << theory.note << '\n';
  }

  std::ostringstream msg;
  msg << "complexity: fitted slope " << io::format_double(est.fitted_slope);
  detail::say(opt, msg.str());
  return kExitOk;
}

inline int cmd_complexity(const RunOptions& opt) {
  return detail::guarded(
      [&] { return run_complexity(parse_complexity_config(load_json_file(opt.config_path)), opt); });
}

// ---------------------------------------------------------------------------------------------
// sweep

inline int run_sweep(const SweepConfig& cfg, const RunOptions& opt) {
  const auto out = detail::prepare_out_dir(opt.out_dir);
  const auto samples = contract_sweep(cfg.snapshots, cfg.n_min, cfg.n_max, cfg.gamma_min, cfg.gamma_max,
                                      cfg.extra_rows, opt.seed.value_or(cfg.master_seed));
  io::CsvWriter w(detail::file(out, "sweep.csv"),
                  {"index", "n", "gamma", "cg_iterations", "decrease", "cauchy_bound", "step_times_mu",
                   "product_times_mu2", "product_bound", "fraction_of_cauchy", "step_size", "inner_product"});
  int bad_fcd = 0, bad_size = 0, bad_product = 0;
  for (const auto& s : samples) {
    const StepCheck& c = s.check;
    w.write(io::CsvRow()
                .add(s.index)
                .add(static_cast<long long>(s.n))
                .add(s.gamma)
                .add(s.cg_iterations)
                .add(c.decrease)
                .add(c.cauchy_bound)
                .add(c.step_times_mu)
                .add(c.product_times_mu2)
                .add(c.product_bound)
                .add(c.fraction_of_cauchy)
                .add(c.step_size)
                .add(c.inner_product));
    bad_fcd += !c.fraction_of_cauchy;
    bad_size += !c.step_size;
    bad_product += !c.inner_product;
  }
  io::CsvWriter summary(detail::file(out, "sweep_summary.csv"),
                        {"snapshots", "fraction_of_cauchy_violations", "step_size_violations",
                         "inner_product_violations"});
  summary.write(io::CsvRow().add(static_cast<int>(samples.size())).add(bad_fcd).add(bad_size).add(bad_product));

  std::ostringstream msg;
  msg << "sweep: " << samples.size() << " snapshots, " << bad_fcd + bad_size + bad_product << " violations";
  detail::say(opt, msg.str());
  return kExitOk;
}

inline int cmd_sweep(const RunOptions& opt) {
  return detail::guarded([&] { return run_sweep(parse_sweep_config(load_json_file(opt.config_path)), opt); });
}

}  // namespace slm::app
