#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "slm/model.hpp"
#include "slm/problem.hpp"
#include "slm/rng.hpp"
#include "slm/subproblem.hpp"
#include "slm/types.hpp"

namespace slm {

/// Constants of the outer loop. Defaults are the data-assimilation experiment values.
struct SolverConfig {
  double eta1 = 0.1;    ///< ratio threshold, in (0,1)
  double eta2 = 1.0;    ///< gradient-scale threshold: success needs ||g|| >= eta2 / mu
  double mu_min = 1e-16;
  double mu0 = 1.0;
  double lambda = 2.0;  ///< mu is multiplied or divided by lambda every iteration
  double mu_max = 1e16; ///< stop once mu exceeds this
  int max_iters = 10000;
  double cg_tol = 1e-10;
  int cg_max_iters = 0;  ///< 0 means n
  std::optional<double> grad_tol;  ///< optional stop on the true gradient norm
  bool record_truth = true;

  void validate() const {
    require(eta1 > 0.0 && eta1 < 1.0, ErrorKind::InvalidArgument, "eta1 must lie in (0,1)");
    require(eta2 > 0.0, ErrorKind::InvalidArgument, "eta2 must be positive");
    require(lambda > 1.0, ErrorKind::InvalidArgument, "lambda must exceed 1");
    require(mu_min > 0.0, ErrorKind::InvalidArgument, "mu_min must be positive");
    require(mu_min <= mu0 && mu0 < mu_max, ErrorKind::InvalidArgument, "need mu_min <= mu0 < mu_max");
    require(max_iters >= 0, ErrorKind::InvalidArgument, "max_iters must be non-negative");
    require(cg_tol >= 0.0, ErrorKind::InvalidArgument, "cg_tol must be non-negative");
    if (grad_tol) require(*grad_tol > 0.0, ErrorKind::InvalidArgument, "grad_tol must be positive");
  }
};

struct SolverState {
  Vector x;
  double mu = 1.0;
  int iter = 0;
};

struct IterationRecord {
  int iter = 0;
  double rho = 0.0;
  double model_decrease = 0.0;
  double step_norm = 0.0;
  double model_grad_norm = 0.0;
  bool success = false;
  bool degenerate = false;  ///< g != 0 but the model decrease was not positive
  double mu_before = 0.0;
  double mu_after = 0.0;
  double f0 = 0.0;
  double f1 = 0.0;
  std::optional<double> true_f_before;
  std::optional<double> true_f_after;  ///< true f at the trial point x + s
  std::optional<double> true_grad_norm;
  std::optional<bool> event_U;
  std::optional<bool> event_V;
};

enum class StopReason { MuExceeded, MaxIterations, GradientTolerance };

inline const char* to_string(StopReason r) {
  switch (r) {
    case StopReason::MuExceeded: return "mu_exceeded";
    case StopReason::MaxIterations: return "max_iterations";
    case StopReason::GradientTolerance: return "gradient_tolerance";
  }
  return "unknown";
}

struct RunTrace {
  std::vector<IterationRecord> records;
  Vector x0;
  Vector x_final;
  double mu_final = 0.0;
  StopReason stop = StopReason::MaxIterations;
  std::optional<int> t_epsilon;  ///< first j with ||grad f(x_j)|| <= grad_tol
  int warnings = 0;
  StepContract contract = kStepContract;
  SolverConfig config;
};

template <typename O>
concept ModelOracle = requires(O& o, const Vector& x, double mu) {
  { o.model(x, mu) } -> std::convertible_to<ModelEstimate>;
};

template <typename O>
concept EstimateOracle = requires(O& o, const Vector& x, const Vector& trial, double mu) {
  { o.estimates(x, trial, mu) } -> std::convertible_to<EstimatePair>;
};

template <typename O>
concept Reseedable = requires(O& o, std::uint64_t seed) { o.reseed(seed); };

template <typename S>
concept SubproblemSolver = requires(const S& s, const ModelSnapshot& snap) {
  { s(snap) } -> std::convertible_to<Vector>;
};

template <ModelOracle O>
ModelSnapshot build_model(O& oracle, const Vector& x, double mu) {
  return make_snapshot(oracle.model(x, mu), x, mu);
}

inline double compute_rho(double f0, double f1, double model_decrease) {
  if (!(model_decrease > 0.0))
    throw Error(ErrorKind::DegenerateSubproblem, "compute_rho: model decrease must be positive");
  return (f0 - f1) / model_decrease;
}

/// Acceptance rule: rho >= eta1 and ||g|| >= eta2 / mu.
inline bool is_successful(double rho, double model_grad_norm, double mu, const SolverConfig& cfg) {
  return rho >= cfg.eta1 && model_grad_norm >= cfg.eta2 / mu;
}

inline double next_mu(bool success, double mu, const SolverConfig& cfg) {
  return success ? std::max(mu / cfg.lambda, cfg.mu_min) : cfg.lambda * mu;
}

inline std::pair<SolverState, IterationRecord> apply_update(const SolverState& state, const ModelSnapshot& snap,
                                                            const Vector& s, double rho, const SolverConfig& cfg) {
  require_same_size(state.x.size(), s.size(), "apply_update: step");
  if (!all_finite(s) || std::isnan(rho)) throw Error(ErrorKind::Numerical, "apply_update: non-finite step or ratio");

  IterationRecord rec;
  rec.iter = state.iter;
  rec.rho = rho;
  rec.model_grad_norm = snap.g.norm();
  rec.step_norm = s.norm();
  rec.mu_before = state.mu;
  rec.success = is_successful(rho, rec.model_grad_norm, state.mu, cfg);
  rec.mu_after = next_mu(rec.success, state.mu, cfg);

  SolverState next;
  next.x = rec.success ? Vector(state.x + s) : state.x;
  next.mu = rec.mu_after;
  next.iter = state.iter + 1;
  return {std::move(next), rec};
}

namespace detail {

template <typename O>
void reseed_if_possible(O& oracle, std::uint64_t seed) {
  if constexpr (Reseedable<O>) oracle.reseed(seed);
}

}  // namespace detail

/// Runs the stochastic Levenberg-Marquardt loop from x0 until mu > mu_max, the iteration cap,
/// or (when configured) the true gradient tolerance.
///
/// The model oracle is seeded with stream (seed, 0) and a distinct estimate oracle with stream
/// (seed, 1); a single object serving both roles is seeded once.
template <ModelOracle MO, EstimateOracle EO, SubproblemSolver Sub>
RunTrace run(const ResidualProblem& problem, MO& model_oracle, EO& estimate_oracle, const Sub& subsolver,
             const SolverConfig& cfg, const Vector& x0, std::uint64_t seed) {
  cfg.validate();
  require_same_size(problem.dim, x0.size(), "run: x0");

  detail::reseed_if_possible(model_oracle, mix_seed(seed, 0));
  if (static_cast<const void*>(&model_oracle) != static_cast<const void*>(&estimate_oracle))
    detail::reseed_if_possible(estimate_oracle, mix_seed(seed, 1));

  RunTrace trace;
  trace.config = cfg;
  trace.x0 = x0;
  SolverState state{x0, cfg.mu0, 0};

  auto with_context = [&](const Error& e) {
    return Error(e.kind(), "iteration " + std::to_string(state.iter) + ": " + e.what());
  };

  while (true) {
    if (state.mu > cfg.mu_max) {
      trace.stop = StopReason::MuExceeded;
      break;
    }
    if (state.iter >= cfg.max_iters) {
      trace.stop = StopReason::MaxIterations;
      break;
    }

    std::optional<double> grad_norm;
    if (cfg.record_truth || cfg.grad_tol) grad_norm = problem.gradient(state.x).norm();
    if (cfg.grad_tol && *grad_norm <= *cfg.grad_tol) {
      trace.stop = StopReason::GradientTolerance;
      trace.t_epsilon = state.iter;
      break;
    }

    try {
      ModelEstimate est = model_oracle.model(state.x, state.mu);
      const bool model_accurate = est.accurate;
      const ModelSnapshot snap = make_snapshot(std::move(est), state.x, state.mu);
      const double gnorm = snap.g.norm();

      Vector s = Vector::Zero(state.x.size());
      double decrease = 0.0;
      bool degenerate = false;
      if (gnorm > 0.0) {
        s = subsolver(snap);
        if (!all_finite(s)) throw Error(ErrorKind::Numerical, "subproblem solver returned a non-finite step");
        decrease = model_decrease(snap, s);
        degenerate = !(decrease > 0.0);
      }
      const Vector trial = state.x + s;
      const EstimatePair est_pair = estimate_oracle.estimates(state.x, trial, state.mu);

      // A zero model gradient or a non-positive model decrease is an unsuccessful iteration.
      const double rho = (gnorm > 0.0 && !degenerate) ? compute_rho(est_pair.f0, est_pair.f1, decrease) : 0.0;
      auto [next, rec] = apply_update(state, snap, s, rho, cfg);
      if (gnorm == 0.0 || degenerate) {
        rec.success = false;
        rec.mu_after = next_mu(false, state.mu, cfg);
        next.x = state.x;
        next.mu = rec.mu_after;
      }
      rec.model_decrease = decrease;
      rec.degenerate = degenerate;
      if (degenerate) ++trace.warnings;
      rec.f0 = est_pair.f0;
      rec.f1 = est_pair.f1;
      rec.event_U = model_accurate;
      rec.event_V = est_pair.accurate;
      if (cfg.record_truth) {
        rec.true_f_before = problem.value(state.x);
        rec.true_f_after = problem.value(trial);
        rec.true_grad_norm = grad_norm;
      }
      trace.records.push_back(rec);
      state = std::move(next);
    } catch (const Error& e) {
      throw with_context(e);
    }
  }

  trace.x_final = state.x;
  trace.mu_final = state.mu;
  return trace;
}

/// Convenience overload: one oracle for both roles and truncated CG configured from cfg.
template <typename Oracle>
  requires ModelOracle<Oracle> && EstimateOracle<Oracle>
RunTrace run(const ResidualProblem& problem, Oracle& oracle, const SolverConfig& cfg, const Vector& x0,
             std::uint64_t seed) {
  return run(problem, oracle, oracle, TruncatedCg{cfg.cg_tol, cfg.cg_max_iters}, cfg, x0, seed);
}

/// mu_0, mu_1, ..., mu_final of a trace.
inline std::vector<double> mu_sequence(const RunTrace& trace) {
  std::vector<double> mu;
  mu.reserve(trace.records.size() + 1);
  for (const auto& r : trace.records) mu.push_back(r.mu_before);
  mu.push_back(trace.mu_final);
  return mu;
}

}  // namespace slm
