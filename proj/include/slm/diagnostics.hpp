#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include "slm/lm_core.hpp"
#include "slm/parallel.hpp"
#include "slm/problem.hpp"
#include "slm/rng.hpp"
#include "slm/types.hpp"

namespace slm {

/// Problem, solver and accuracy constants the convergence theory is stated in.
struct TheoryPrimitives {
  double nu = 1.0;        ///< Lipschitz constant of grad f
  double kappa_Jm = 1.0;  ///< uniform bound on ||J_m||
  double theta_fcd = kStepContract.theta_fcd;
  double theta_in = kStepContract.theta_in;
  double kappa_ef = 1.0;
  double kappa_eg = 1.0;
  double eps_f = 1.0;
  double eta1 = 0.1;
  double eta2 = 1.0;
  double lambda = 2.0;
};

/// Derived constants. zeta defaults to its lower bound zeta_min; tau is the midpoint between
/// its threshold tau_star and 1.
struct TheoryConstants {
  TheoryPrimitives prim;
  double kappa_efs = 0.0;
  double alpha = 0.0;
  double kappa_mu_g = 0.0;
  double M1 = 0.0;  ///< max{kappa_Jm^2, 8(kappa_ef + kappa_efs)/(eta1 theta_fcd)}
  double C1 = 0.0;
  double C2 = 0.0;
  double zeta_min = 0.0;
  bool eta2_strong = false;  ///< eta2 also meets the 6(kappa_ef + kappa_efs)/theta_fcd term
  double zeta = 0.0;
  double C3 = 0.0;
  double tau_star = 0.0;
  double tau = 0.0;
  double sigma = 0.0;
  std::optional<double> phi_max;  ///< empirical, filled by callers that ran traces
};

namespace detail {

inline void fill_zeta_dependent(TheoryConstants& tc, double zeta) {
  const auto& p = tc.prim;
  require(zeta >= tc.zeta_min * (1.0 - 1e-15), ErrorKind::InvalidArgument, "zeta is below its lower bound");
  tc.zeta = zeta;
  tc.C3 = 2.0 * (1.0 + p.nu / zeta);
  const double spread = p.lambda * p.lambda - 1.0 / (p.lambda * p.lambda);
  const double ratio =
      std::max({spread / (tc.C1 * zeta), spread / tc.C2, spread / (0.5 * (p.kappa_ef + tc.kappa_efs))});
  tc.tau_star = ratio / (1.0 + ratio);
  tc.tau = 0.5 * (tc.tau_star + 1.0);
  tc.sigma = 0.25 * (1.0 - tc.tau) * (1.0 - 1.0 / (p.lambda * p.lambda));
}

}  // namespace detail

/// Computes every derived constant; throws InvalidArgument when eta2 violates its lower bound
/// or the decrease constant C2 is not positive.
inline TheoryConstants make_theory_constants(const TheoryPrimitives& p, std::optional<double> zeta = std::nullopt) {
  require(p.nu > 0 && p.kappa_Jm > 0 && p.kappa_ef > 0 && p.kappa_eg > 0 && p.eps_f > 0 && p.theta_in > 0,
          ErrorKind::InvalidArgument, "theory primitives must be positive");
  require(p.theta_fcd > 0 && p.theta_fcd <= 1, ErrorKind::InvalidArgument, "theta_fcd must lie in (0,1]");
  require(p.eta1 > 0 && p.eta1 < 1 && p.eta2 > 0 && p.lambda > 1, ErrorKind::InvalidArgument,
          "invalid eta1, eta2 or lambda");
  const double kJ2 = p.kappa_Jm * p.kappa_Jm;
  const double eta2_floor = std::max(kJ2, 8.0 * p.eps_f / (p.eta1 * p.theta_fcd));
  require(p.eta2 >= eta2_floor, ErrorKind::InvalidArgument,
          "eta2 must be at least max{kappa_Jm^2, 8 eps_f/(eta1 theta_fcd)}");

  TheoryConstants tc;
  tc.prim = p;
  tc.kappa_efs = 0.5 * (p.kappa_ef + 2.0 * p.kappa_eg + p.nu + 4.0 * kJ2);
  tc.alpha = p.eps_f + p.kappa_eg + p.nu + 5.0 * kJ2 + 2.0 * p.theta_in;
  const double a = tc.alpha;
  tc.kappa_mu_g =
      std::max((a + std::sqrt(a * a + 4.0 * a * kJ2 * (1.0 - p.eta1))) / (2.0 * (1.0 - p.eta1)), p.eta2);
  const double efs_term = 8.0 * (p.kappa_ef + tc.kappa_efs) / (p.eta1 * p.theta_fcd);
  tc.M1 = std::max(kJ2, efs_term);
  tc.C1 = p.eta1 * p.theta_fcd / 8.0 * tc.M1 / (p.kappa_eg + tc.M1);
  tc.C2 = p.eta1 * p.eta2 * p.theta_fcd / 4.0 - 2.0 * p.eps_f;
  require(tc.C2 > 0.0, ErrorKind::InvalidArgument, "C2 = eta1 eta2 theta_fcd/4 - 2 eps_f must be positive");
  tc.eta2_strong = p.eta2 >= std::max({kJ2, 6.0 * (p.kappa_ef + tc.kappa_efs) / p.theta_fcd, eta2_floor});
  tc.zeta_min = p.kappa_eg + std::max({tc.kappa_mu_g, efs_term, kJ2, p.eta2});
  detail::fill_zeta_dependent(tc, zeta.value_or(tc.zeta_min));
  return tc;
}

/// zeta = mu0 lambda^s eps with s the smallest integer keeping zeta >= zeta_min; the matching
/// threshold mu_eps = zeta / eps = mu0 lambda^s lies on the mu lattice.
struct LatticeZeta {
  double zeta = 0.0;
  int s = 0;
  double mu_eps = 0.0;
};

inline LatticeZeta lattice_zeta(double zeta_min, double mu0, double lambda, double epsilon) {
  require(zeta_min > 0 && mu0 > 0 && lambda > 1 && epsilon > 0, ErrorKind::InvalidArgument,
          "lattice_zeta: arguments must be positive, lambda > 1");
  int s = static_cast<int>(std::ceil(std::log(zeta_min / (mu0 * epsilon)) / std::log(lambda)));
  auto zeta_at = [&](int k) { return mu0 * std::pow(lambda, k) * epsilon; };
  while (zeta_at(s) < zeta_min) ++s;
  while (zeta_at(s - 1) >= zeta_min) --s;
  return {zeta_at(s), s, mu0 * std::pow(lambda, s)};
}

/// Constants re-evaluated with the lattice-compatible zeta for a target epsilon.
inline TheoryConstants at_epsilon(const TheoryConstants& tc, double mu0, double epsilon) {
  TheoryConstants out = tc;
  detail::fill_zeta_dependent(out, lattice_zeta(tc.zeta_min, mu0, tc.prim.lambda, epsilon).zeta);
  return out;
}

/// Phi = tau f + (1 - tau) / mu^2.
inline double phi(double f_value, double mu, double tau) {
  require(mu > 0.0, ErrorKind::InvalidArgument, "phi: mu must be positive");
  require(tau > 0.0 && tau < 1.0, ErrorKind::InvalidArgument, "phi: tau must lie in (0,1)");
  return tau * f_value + (1.0 - tau) / (mu * mu);
}

/// kappa_s = (tau f(x0) + (1 - tau) mu0^-2) / sigma * zeta^2.
inline double kappa_s(const TheoryConstants& tc, double f_x0, double mu0) {
  return phi(f_x0, mu0, tc.tau) / tc.sigma * tc.zeta * tc.zeta;
}

/// Expected-complexity bound pq/(2pq - 1) (kappa_s eps^-2 + 1) - 1, using the lattice zeta for eps.
inline double complexity_bound(const TheoryConstants& tc, double f_x0, double mu0, double p, double q,
                             double epsilon) {
  const double pq = p * q;
  require(pq > 0.5, ErrorKind::InvalidArgument, "complexity bound requires pq > 1/2");
  const TheoryConstants te = at_epsilon(tc, mu0, epsilon);
  return pq / (2.0 * pq - 1.0) * (kappa_s(te, f_x0, mu0) / (epsilon * epsilon) + 1.0) - 1.0;
}

struct ProbabilityReport {
  double lhs1 = 0.0;  ///< (pq - 1/2) / ((1-p)(1-q)), infinite when the product vanishes
  double rhs1 = 0.0;  ///< C3 / C1
  double margin1 = 0.0;
  double lhs2 = 0.0;  ///< (1-p)(1-q)
  double rhs2 = 0.0;
  double margin2 = 0.0;
  bool cond1 = false;
  bool cond2 = false;

  bool both() const { return cond1 && cond2; }
};

/// Evaluates the two conditions on (p, q); margins are lhs - rhs for the first (>= 0 holds) and
/// rhs - lhs for the second.
inline ProbabilityReport check_probability_conditions(const TheoryConstants& tc, double p, double q) {
  require(p > 0.0 && p <= 1.0 && q > 0.0 && q <= 1.0, ErrorKind::InvalidArgument, "p and q must lie in (0,1]");
  require(p * q != 1.0, ErrorKind::InvalidArgument, "pq = 1 reduces to the deterministic method");
  const double lambda = tc.prim.lambda;
  ProbabilityReport r;
  r.lhs2 = (1.0 - p) * (1.0 - q);
  r.lhs1 = r.lhs2 == 0.0 ? std::numeric_limits<double>::infinity() : (p * q - 0.5) / r.lhs2;
  r.rhs1 = tc.C3 / tc.C1;
  r.margin1 = r.lhs1 - r.rhs1;
  r.rhs2 = (1.0 - tc.tau) * (1.0 - 1.0 / (lambda * lambda)) /
           (2.0 * (tc.tau * tc.C3 * tc.zeta + (1.0 - tc.tau) * (lambda * lambda - 1.0)));
  r.margin2 = r.rhs2 - r.lhs2;
  r.cond1 = r.margin1 >= 0.0;
  r.cond2 = r.margin2 >= 0.0;
  return r;
}

struct EventSummary {
  int iterations = 0;
  int count_U = 0;
  int count_V = 0;
  int count_UV = 0;
  double freq_U = 0.0;
  double freq_V = 0.0;
  int guarantee_candidates = 0;  ///< iterations with U, V and mu ||g_m|| >= kappa_mu_g
  std::vector<int> guarantee_violations;  ///< candidates that were nonetheless unsuccessful
};

/// Counts accuracy events and checks the success guarantee: an accurate model, accurate
/// estimates and mu >= kappa_mu_g / ||g_m|| force a successful iteration.
inline EventSummary track_events(const RunTrace& trace, const TheoryConstants& tc) {
  EventSummary s;
  for (const auto& r : trace.records) {
    if (!r.event_U || !r.event_V)
      throw Error(ErrorKind::MissingGroundTruth, "track_events: record without accuracy events");
    ++s.iterations;
    s.count_U += *r.event_U;
    s.count_V += *r.event_V;
    const bool both = *r.event_U && *r.event_V;
    s.count_UV += both;
    if (both && r.model_grad_norm > 0.0 && r.mu_before * r.model_grad_norm >= tc.kappa_mu_g) {
      ++s.guarantee_candidates;
      if (!r.success) s.guarantee_violations.push_back(r.iter);
    }
  }
  if (s.iterations > 0) {
    s.freq_U = static_cast<double>(s.count_U) / s.iterations;
    s.freq_V = static_cast<double>(s.count_V) / s.iterations;
  }
  return s;
}

/// Phi_{j+1} - Phi_j for one record: x moves to the trial point only on success.
inline double phi_increment(const IterationRecord& r, double tau) {
  if (!r.true_f_before || !r.true_f_after)
    throw Error(ErrorKind::MissingGroundTruth, "phi_increment: record without true f");
  const double f_next = r.success ? *r.true_f_after : *r.true_f_before;
  return phi(f_next, r.mu_after, tau) - phi(*r.true_f_before, r.mu_before, tau);
}

struct PhiDecreaseStat {
  std::size_t count = 0;
  double mean = 0.0;  ///< mean of (Phi_{j+1} - Phi_j) mu_j^2
  double std_err = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;  ///< 95% normal interval
  double sigma = 0.0;    ///< the theory predicts mean <= -sigma
  bool negative_with_confidence = false;
};

inline PhiDecreaseStat phi_decrease_check(const std::vector<RunTrace>& traces, const TheoryConstants& tc) {
  std::vector<double> values;
  for (const auto& t : traces)
    for (const auto& r : t.records) values.push_back(phi_increment(r, tc.tau) * r.mu_before * r.mu_before);
  PhiDecreaseStat st;
  st.sigma = tc.sigma;
  st.count = values.size();
  if (values.empty()) return st;
  double sum = 0.0;
  for (double v : values) sum += v;
  st.mean = sum / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - st.mean) * (v - st.mean);
  const double var = values.size() > 1 ? ss / static_cast<double>(values.size() - 1) : 0.0;
  st.std_err = std::sqrt(var / static_cast<double>(values.size()));
  st.ci_low = st.mean - 1.959963984540054 * st.std_err;
  st.ci_high = st.mean + 1.959963984540054 * st.std_err;
  st.negative_with_confidence = st.ci_high < 0.0;
  return st;
}

/// Largest Phi_j along a trace (x_j, mu_j before every iteration plus the final state).
inline double max_phi(const RunTrace& trace, double tau) {
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& r : trace.records) {
    if (!r.true_f_before) throw Error(ErrorKind::MissingGroundTruth, "max_phi: record without true f");
    best = std::max(best, phi(*r.true_f_before, r.mu_before, tau));
  }
  if (!trace.records.empty()) {
    const auto& last = trace.records.back();
    best = std::max(best, phi(last.success ? *last.true_f_after : *last.true_f_before, last.mu_after, tau));
  }
  return best;
}

/// Renewal times A_0 = 0, A_i = min{k > A_{i-1} : mu_k <= mu_eps}.
inline std::vector<int> renewal_times(const std::vector<double>& mu, double mu_eps) {
  std::vector<int> a{0};
  for (std::size_t k = 1; k < mu.size(); ++k)
    if (mu[k] <= mu_eps) a.push_back(static_cast<int>(k));
  return a;
}

/// N(j) = max{i : A_i <= j}.
inline int renewal_count(const std::vector<int>& times, int j) {
  require(!times.empty() && times.front() == 0, ErrorKind::InvalidArgument, "renewal times must start at A_0 = 0");
  return static_cast<int>(std::upper_bound(times.begin(), times.end(), j) - times.begin()) - 1;
}

/// True when mu = mu0 lambda^k for an integer k and mu >= mu_min. For lambda = 2 the test is
/// exact; otherwise it allows a relative rounding error of 1e-12.
inline bool on_mu_lattice(double mu, double mu0, double lambda, double mu_min) {
  if (!(mu > 0.0) || mu < mu_min) return false;
  const int k = static_cast<int>(std::lround(std::log(mu / mu0) / std::log(lambda)));
  if (lambda == 2.0) return mu == std::ldexp(mu0, k);
  const double expected = mu0 * std::pow(lambda, k);
  return std::abs(mu - expected) <= 1e-12 * expected;
}

/// Monte Carlo estimate of E[T_eps] over a grid of tolerances.
struct ComplexityRow {
  double epsilon = 0.0;
  double mean_T = 0.0;
  double std_err = 0.0;
  int capped = 0;
  bool in_fit = false;
  std::optional<double> bound;  ///< expected-complexity bound at the certified constants
  std::vector<int> T;           ///< per replication; capped runs hold the cap
  std::vector<bool> cap_hit;
};

struct ComplexityEstimate {
  std::vector<ComplexityRow> rows;
  int replications = 0;
  int cap = 0;
  double fitted_slope = std::numeric_limits<double>::quiet_NaN();  ///< slope of log mean_T vs log(1/eps)
};

struct ComplexitySetup {
  SolverConfig cfg;
  std::vector<double> epsilon_grid;
  int replications = 100;
  std::uint64_t master_seed = 0;
  int cap = 100000;
  int workers = 0;
  double max_capped_fraction = 0.05;
  std::optional<TheoryConstants> theory;  ///< when set, the bound column is filled
  double p = 1.0;
  double q = 1.0;
};

/// Ordinary least-squares slope of y on x.
inline double ols_slope(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size(), ErrorKind::DimensionMismatch, "ols_slope: size mismatch");
  if (x.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(y.size());
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxx > 0 ? sxy / sxx : std::numeric_limits<double>::quiet_NaN();
}

/// Stream seed of replication `rep` at grid index `eps_index`.
inline std::uint64_t replication_seed(std::uint64_t master, std::size_t eps_index, std::size_t rep) {
  return mix_seed(mix_seed(master, eps_index), rep);
}

/// Runs `replications` independent solves per tolerance with the true-gradient stop and
/// aggregates T_eps. `make_instance()` builds the problem and start point, `make_oracle(problem)`
/// a fresh oracle serving both roles (the solver reseeds it per replication).
template <typename InstanceFactory, typename OracleFactory>
ComplexityEstimate estimate_T_epsilon(InstanceFactory&& make_instance, OracleFactory&& make_oracle,
                                      const ComplexitySetup& setup) {
  require(!setup.epsilon_grid.empty(), ErrorKind::InvalidArgument, "estimate_T_epsilon: empty epsilon grid");
  require(setup.replications > 0 && setup.cap > 0, ErrorKind::InvalidArgument,
          "estimate_T_epsilon: replications and cap must be positive");
  require(setup.p * setup.q > 0.5, ErrorKind::InvalidArgument, "estimate_T_epsilon: requires pq > 1/2");
  for (double e : setup.epsilon_grid) require(e > 0.0, ErrorKind::InvalidArgument, "epsilon must be positive");

  const std::size_t reps = static_cast<std::size_t>(setup.replications);
  const std::size_t cells = setup.epsilon_grid.size() * reps;
  std::vector<int> T(cells, 0);
  std::vector<char> capped(cells, 0);
  parallel_for(cells, setup.workers, [&](std::size_t cell) {
    const std::size_t i = cell / reps;
    const std::size_t r = cell % reps;
    ProblemInstance inst = make_instance();
    auto oracle = make_oracle(inst.problem);
    SolverConfig cfg = setup.cfg;
    cfg.grad_tol = setup.epsilon_grid[i];
    cfg.max_iters = setup.cap;
    cfg.record_truth = false;
    const RunTrace trace = run(inst.problem, oracle, cfg, inst.x0, replication_seed(setup.master_seed, i, r));
    if (trace.t_epsilon) {
      T[cell] = *trace.t_epsilon;
    } else {
      T[cell] = setup.cap;
      capped[cell] = 1;
    }
  });

  ComplexityEstimate out;
  out.replications = setup.replications;
  out.cap = setup.cap;
  std::vector<double> xs, ys;
  const ProblemInstance ref = make_instance();
  const double f_x0 = ref.problem.value(ref.x0);
  for (std::size_t i = 0; i < setup.epsilon_grid.size(); ++i) {
    ComplexityRow row;
    row.epsilon = setup.epsilon_grid[i];
    double sum = 0.0;
    for (std::size_t r = 0; r < reps; ++r) {
      const std::size_t cell = i * reps + r;
      row.T.push_back(T[cell]);
      row.cap_hit.push_back(capped[cell] != 0);
      row.capped += capped[cell];
      sum += T[cell];
    }
    row.mean_T = sum / static_cast<double>(reps);
    double ss = 0.0;
    for (int t : row.T) ss += (t - row.mean_T) * (t - row.mean_T);
    row.std_err = reps > 1 ? std::sqrt(ss / static_cast<double>(reps - 1) / static_cast<double>(reps)) : 0.0;
    row.in_fit = row.capped <= setup.max_capped_fraction * static_cast<double>(reps) && row.mean_T > 0.0;
    if (setup.theory)
      row.bound = complexity_bound(*setup.theory, f_x0, setup.cfg.mu0, setup.p, setup.q, row.epsilon);
    if (row.in_fit) {
      xs.push_back(std::log(1.0 / row.epsilon));
      ys.push_back(std::log(row.mean_T));
    }
    out.rows.push_back(std::move(row));
  }
  out.fitted_slope = ols_slope(xs, ys);
  return out;
}

}  // namespace slm
