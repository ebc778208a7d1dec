#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "slm/model.hpp"
#include "slm/rng.hpp"
#include "slm/types.hpp"

namespace slm {

/// Constants of the step contract every subproblem solution honours:
///   Cauchy fraction   m(x) - m(x+s) >= theta_fcd/2 * ||g||^2 / (||J||^2 + gamma)
///   step bound        ||s|| <= 2 ||g|| / gamma = 2 / mu
///   product bound     |s'(gamma s + g)| <= (4 ||J||^2 + 2 theta_in) / mu^2
/// theta_fcd = 1 holds for CG from a zero start because its first iterate is the Cauchy
/// point; theta_in = 2 is the declared constant, certified by the invariant sweep.
struct StepContract {
  double theta_fcd = 1.0;
  double theta_in = 2.0;
};

inline constexpr StepContract kStepContract{};

/// Largest singular value of J by power iteration on J'J. Only used for contract checks.
inline double spectral_norm(const Matrix& J, int max_iters = 50, double tol = 1e-10) {
  if (J.size() == 0) return 0.0;
  Vector v = Vector::Ones(J.cols()) / std::sqrt(static_cast<double>(J.cols()));
  double sigma2 = 0.0;
  for (int k = 0; k < max_iters; ++k) {
    Vector w = J.transpose() * (J * v);
    const double norm = w.norm();
    if (norm == 0.0) {
      // v landed in the null space; restart along the column of largest norm
      Index col = 0;
      J.colwise().squaredNorm().maxCoeff(&col);
      if (J.col(col).squaredNorm() == 0.0) return 0.0;
      v.setZero();
      v[col] = 1.0;
      continue;
    }
    v = w / norm;
    const double next = norm;
    if (std::abs(next - sigma2) <= tol * next) {
      sigma2 = next;
      break;
    }
    sigma2 = next;
  }
  return std::sqrt((J * v).squaredNorm());
}

struct CgResult {
  Vector step;
  int iterations = 0;
  double residual_norm = 0.0;
  std::vector<double> decrease_history;  // model decrease after each CG iterate
};

/// Truncated CG on (J'J + gamma I) s = -g from s = 0. Stops when the residual drops to
/// tol * ||g|| or after max_iters iterations (max_iters <= 0 means n).
inline CgResult solve_cg_traced(const ModelSnapshot& snap, double tol, int max_iters, bool keep_history = true) {
  const Index n = snap.dim();
  require_same_size(n, snap.J.cols(), "solve_cg: Jacobian columns");
  if (max_iters <= 0) max_iters = static_cast<int>(n);

  auto apply = [&](const Vector& p) -> Vector { return snap.J.transpose() * (snap.J * p) + snap.gamma * p; };

  CgResult out;
  out.step = Vector::Zero(n);
  Vector r = -snap.g;
  Vector p = r;
  double rr = r.squaredNorm();
  const double stop = tol * snap.g.norm();
  while (out.iterations < max_iters && std::sqrt(rr) > stop && rr > 0.0) {
    Vector Ap = apply(p);
    const double pAp = p.dot(Ap);
    if (!(pAp > 0.0) || !std::isfinite(pAp))
      throw Error(ErrorKind::Numerical, "solve_cg: system matrix is not positive definite");
    const double alpha = rr / pAp;
    out.step += alpha * p;
    r -= alpha * Ap;
    const double rr_next = r.squaredNorm();
    p = r + (rr_next / rr) * p;
    rr = rr_next;
    ++out.iterations;
    if (keep_history) out.decrease_history.push_back(model_decrease(snap, out.step));
  }
  out.residual_norm = std::sqrt(rr);
  return out;
}

inline Vector solve_cg(const ModelSnapshot& snap, double tol = 1e-10, int max_iters = 0) {
  return solve_cg_traced(snap, tol, max_iters, false).step;
}

/// Dense solve of (J'J + gamma I) s = -g.
inline Vector solve_exact(const ModelSnapshot& snap) {
  require_same_size(snap.dim(), snap.J.cols(), "solve_exact: Jacobian columns");
  require(snap.gamma > 0.0, ErrorKind::InvalidArgument, "solve_exact: gamma must be positive");
  Matrix A = snap.J.transpose() * snap.J;
  A.diagonal().array() += snap.gamma;
  Eigen::LLT<Matrix> llt(A);
  if (llt.info() != Eigen::Success) throw Error(ErrorKind::Numerical, "solve_exact: factorization failed");
  Vector s = llt.solve(-snap.g);
  // one step of iterative refinement keeps the residual at the 1e-10 * ||g|| level for large gamma spreads
  Vector res = -snap.g - (snap.J.transpose() * (snap.J * s) + snap.gamma * s);
  s += llt.solve(res);
  return s;
}

/// -t g with t = ||g||^2 / g'(J'J + gamma I)g, the minimizer of the model along -g.
inline Vector cauchy_point(const ModelSnapshot& snap) {
  const double gg = snap.g.squaredNorm();
  require(gg > 0.0, ErrorKind::InvalidArgument, "cauchy_point: zero model gradient");
  const double curvature = (snap.J * snap.g).squaredNorm() + snap.gamma * gg;
  return -(gg / curvature) * snap.g;
}

struct StepCheck {
  double decrease = 0.0;
  double cauchy_bound = 0.0;   // theta_fcd/2 * ||g||^2 / (||J||^2 + gamma)
  double step_times_mu = 0.0;  // ||s|| mu, must be <= 2
  double product_times_mu2 = 0.0;
  double product_bound = 0.0;  // 4 ||J||^2 + 2 theta_in
  bool fraction_of_cauchy = false;
  bool step_size = false;
  bool inner_product = false;

  bool ok() const { return fraction_of_cauchy && step_size && inner_product; }
};

/// Evaluates the three step-contract inequalities for a computed step.
/// `rel_slack` absorbs floating-point rounding in the comparisons.
inline StepCheck check_step(const ModelSnapshot& snap, const Vector& s, const StepContract& contract = kStepContract,
                            double rel_slack = 1e-12) {
  StepCheck c;
  const double jn = spectral_norm(snap.J);
  const double gn = snap.g.norm();
  c.decrease = model_decrease(snap, s);
  c.cauchy_bound = 0.5 * contract.theta_fcd * gn * gn / (jn * jn + snap.gamma);
  c.step_times_mu = s.norm() * snap.mu;
  c.product_times_mu2 = std::abs(s.dot(snap.gamma * s + snap.g)) * snap.mu * snap.mu;
  c.product_bound = 4.0 * jn * jn + 2.0 * contract.theta_in;
  c.fraction_of_cauchy = c.decrease >= c.cauchy_bound * (1.0 - rel_slack);
  c.step_size = c.step_times_mu <= 2.0 + rel_slack;
  c.inner_product = c.product_times_mu2 <= c.product_bound * (1.0 + rel_slack);
  return c;
}

/// Random snapshot for contract sweeps: J is (n + extra_rows) x n Gaussian, g Gaussian, and
/// mu chosen so that gamma hits the requested value.
inline ModelSnapshot random_snapshot(Rng& rng, Index n, double gamma, Index extra_rows = 2) {
  ModelSnapshot snap;
  snap.center = Vector::Zero(n);
  snap.J = normal_matrix(rng, n + extra_rows, n);
  snap.g = normal_vector(rng, n);
  snap.m_at_center = 10.0 * uniform01(rng);
  snap.gamma = gamma;
  snap.mu = gamma / snap.g.norm();
  return snap;
}

/// Subproblem solver functors usable by the outer loop.
struct TruncatedCg {
  double tol = 1e-10;
  int max_iters = 0;

  Vector operator()(const ModelSnapshot& snap) const { return solve_cg(snap, tol, max_iters); }
};

struct ExactSolver {
  Vector operator()(const ModelSnapshot& snap) const { return solve_exact(snap); }
};

/// One snapshot of a step-contract sweep.
struct SweepSample {
  int index = 0;
  Index n = 0;
  double gamma = 0.0;
  int cg_iterations = 0;
  StepCheck check;
};

/// Solves `count` random snapshots with truncated CG and checks the step contract. Dimensions
/// are uniform on [n_min, n_max] and gamma log-uniform on [gamma_min, gamma_max]; snapshot i
/// draws from its own stream of `seed`.
inline std::vector<SweepSample> contract_sweep(int count, Index n_min, Index n_max, double gamma_min,
                                               double gamma_max, Index extra_rows, std::uint64_t seed,
                                               double cg_tol = 1e-10) {
  require(count >= 0 && n_min >= 1 && n_max >= n_min && extra_rows >= 0, ErrorKind::InvalidArgument,
          "contract_sweep: invalid sizes");
  require(gamma_min > 0.0 && gamma_max >= gamma_min, ErrorKind::InvalidArgument, "contract_sweep: invalid gamma range");
  std::vector<SweepSample> out;
  out.reserve(static_cast<std::size_t>(count));
  const double lo = std::log(gamma_min), hi = std::log(gamma_max);
  for (int i = 0; i < count; ++i) {
    Rng rng = make_stream(seed, static_cast<std::uint64_t>(i));
    SweepSample smp;
    smp.index = i;
    smp.n = std::uniform_int_distribution<Index>(n_min, n_max)(rng);
    smp.gamma = std::exp(lo + (hi - lo) * uniform01(rng));
    const ModelSnapshot snap = random_snapshot(rng, smp.n, smp.gamma, extra_rows);
    const CgResult cg = solve_cg_traced(snap, cg_tol, 0, false);
    smp.cg_iterations = cg.iterations;
    smp.check = check_step(snap, cg.step);
    out.push_back(smp);
  }
  return out;
}

}  // namespace slm
