#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "slm/lm_core.hpp"
#include "slm/model.hpp"
#include "slm/oracles.hpp"
#include "slm/parallel.hpp"
#include "slm/problem.hpp"
#include "slm/rng.hpp"
#include "slm/types.hpp"

namespace slm {

// ---------------------------------------------------------------------------------------------
// Lorenz-63 dynamics

struct Lorenz63Params {
  double sigma = 10.0;
  double rho = 28.0;
  double beta = 8.0 / 3.0;
  double dt = 0.01;
  int steps_per_window = 10;
};

inline Vector lorenz_field(const Vector& z, const Lorenz63Params& p) {
  Vector d(3);
  d << -p.sigma * (z[0] - z[1]), p.rho * z[0] - z[1] - z[0] * z[2], z[0] * z[1] - p.beta * z[2];
  return d;
}

/// One classical fourth-order Runge-Kutta step.
inline Vector lorenz_rk4_step(const Vector& z, const Lorenz63Params& p) {
  require(z.size() == 3, ErrorKind::DimensionMismatch, "lorenz_rk4_step: state must have 3 components");
  require(p.dt > 0.0, ErrorKind::InvalidArgument, "lorenz_rk4_step: dt must be positive");
  const double h = p.dt;
  const Vector k1 = lorenz_field(z, p);
  const Vector k2 = lorenz_field(z + 0.5 * h * k1, p);
  const Vector k3 = lorenz_field(z + 0.5 * h * k2, p);
  const Vector k4 = lorenz_field(z + h * k3, p);
  Vector out = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  if (!all_finite(out)) throw Error(ErrorKind::Numerical, "lorenz_rk4_step: non-finite state");
  return out;
}

// ---------------------------------------------------------------------------------------------
// Strong-constraint 4DVAR problem

/// Assimilation window: the state z0 is propagated by RK4 and observed through H_point at the
/// listed step indices (0 is the initial time).
struct DAProblem {
  Lorenz63Params lorenz;
  Vector z_b;
  Matrix B_inf;
  Vector y;
  Matrix R;
  std::vector<int> obs_steps;
  Matrix H_point;

  Index dim() const { return z_b.size(); }
  Index obs_dim() const { return H_point.rows() * static_cast<Index>(obs_steps.size()); }

  void validate() const {
    require(z_b.size() == 3, ErrorKind::DimensionMismatch, "DAProblem: Lorenz-63 state has 3 components");
    require(B_inf.rows() == 3 && B_inf.cols() == 3, ErrorKind::DimensionMismatch, "DAProblem: B_inf must be 3x3");
    require(H_point.cols() == 3 && H_point.rows() > 0, ErrorKind::DimensionMismatch, "DAProblem: H_point must be p x 3");
    require(!obs_steps.empty(), ErrorKind::InvalidArgument, "DAProblem: no observation times");
    require(std::is_sorted(obs_steps.begin(), obs_steps.end()) && obs_steps.front() >= 0,
            ErrorKind::InvalidArgument, "DAProblem: observation steps must be sorted and non-negative");
    require(y.size() == obs_dim(), ErrorKind::DimensionMismatch, "DAProblem: y does not match the observation count");
    require(R.rows() == obs_dim() && R.cols() == obs_dim(), ErrorKind::DimensionMismatch,
            "DAProblem: R does not match the observation count");
  }
};

/// Stacked observations (H_point M_k ... M_1 z0) over the observation steps.
inline Vector forward_H(const Vector& z0, const DAProblem& problem) {
  require(z0.size() == 3, ErrorKind::DimensionMismatch, "forward_H: state must have 3 components");
  const Index p = problem.H_point.rows();
  Vector out(p * static_cast<Index>(problem.obs_steps.size()));
  Vector z = z0;
  int step = 0;
  Index row = 0;
  for (int target : problem.obs_steps) {
    while (step < target) {
      z = lorenz_rk4_step(z, problem.lorenz);
      ++step;
    }
    out.segment(row, p) = problem.H_point * z;
    row += p;
  }
  if (!all_finite(out)) throw Error(ErrorKind::Numerical, "forward_H: non-finite propagation");
  return out;
}

/// Central finite-difference Jacobian of forward_H with h_i = max(1e-6, 1e-6 |z0_i|).
inline Matrix jacobian_H(const Vector& z0, const DAProblem& problem) {
  Matrix J(problem.obs_dim(), z0.size());
  for (Index i = 0; i < z0.size(); ++i) {
    const double h = std::max(1e-6, 1e-6 * std::abs(z0[i]));
    Vector plus = z0, minus = z0;
    plus[i] += h;
    minus[i] -= h;
    J.col(i) = (forward_H(plus, problem) - forward_H(minus, problem)) / (2.0 * h);
  }
  if (!all_finite(J)) throw Error(ErrorKind::Numerical, "jacobian_H: non-finite values");
  return J;
}

/// M^{-1/2} of a symmetric positive (semi)definite matrix; eigenvalues are floored at `floor`.
inline Matrix inverse_sqrt_spd(const Matrix& M, double floor = 1e-12) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(M);
  if (eig.info() != Eigen::Success) throw Error(ErrorKind::Numerical, "inverse_sqrt_spd: eigendecomposition failed");
  const Vector d = eig.eigenvalues().cwiseMax(floor).cwiseSqrt().cwiseInverse();
  return eig.eigenvectors() * d.asDiagonal() * eig.eigenvectors().transpose();
}

namespace detail {

inline Eigen::LLT<Matrix> spd_factor(const Matrix& M, const char* what) {
  Eigen::LLT<Matrix> llt(M);
  if (llt.info() != Eigen::Success) throw Error(ErrorKind::SingularMatrix, std::string(what) + ": matrix is not SPD");
  return llt;
}

}  // namespace detail

/// 1/2 ||x - z_b||^2_{C^-1} + 1/2 ||y - H(x)||^2_{R^-1} for a background covariance C.
inline double da_objective(const Vector& x, const DAProblem& problem, const Matrix& covariance) {
  const Vector dx = x - problem.z_b;
  const Vector d = problem.y - forward_H(x, problem);
  const auto C = detail::spd_factor(covariance, "da_objective covariance");
  const auto R = detail::spd_factor(problem.R, "da_objective R");
  return 0.5 * dx.dot(C.solve(dx)) + 0.5 * d.dot(R.solve(d));
}

/// Stacked residual r(x) = [C^{-1/2}(x - z_b); R^{-1/2}(H(x) - y)] so that 1/2 ||r||^2 is the
/// objective with covariance C.
inline ResidualProblem make_da_residual_problem(const DAProblem& problem, const Matrix& covariance) {
  problem.validate();
  const Matrix Ci = inverse_sqrt_spd(covariance);
  const Matrix Ri = inverse_sqrt_spd(problem.R);
  ResidualProblem p;
  p.dim = 3;
  p.residual = [problem, Ci, Ri](const Vector& x) -> Vector {
    Vector r(3 + problem.obs_dim());
    r.head(3) = Ci * (x - problem.z_b);
    r.tail(problem.obs_dim()) = Ri * (forward_H(x, problem) - problem.y);
    return r;
  };
  p.jacobian = [problem, Ci, Ri](const Vector& x) -> Matrix {
    Matrix J(3 + problem.obs_dim(), 3);
    J.topRows(3) = Ci;
    J.bottomRows(problem.obs_dim()) = Ri * jacobian_H(x, problem);
    return J;
  };
  return p;
}

// ---------------------------------------------------------------------------------------------
// Ensembles

enum class Centering {
  Recentred,  ///< shift the members so their sample mean equals z_b
  KnownMean,  ///< keep the raw draws around z_b
};

struct Ensemble {
  Matrix members;    ///< n x N, one member per column
  Matrix anomalies;  ///< (members - z_b) / sqrt(N - 1)
  Matrix B_N;        ///< anomalies anomalies'

  Index size() const { return members.cols(); }
};

inline Ensemble ensemble_from_members(const Matrix& members, const Vector& z_b) {
  require(members.rows() == z_b.size(), ErrorKind::DimensionMismatch, "ensemble: member dimension");
  require(members.cols() >= 2, ErrorKind::InvalidArgument, "ensemble: need at least 2 members");
  Ensemble e;
  e.members = members;
  e.anomalies = (members.colwise() - z_b) / std::sqrt(static_cast<double>(members.cols() - 1));
  e.B_N = e.anomalies * e.anomalies.transpose();
  return e;
}

/// N members drawn from N(z_b, B_inf), by default recentred on z_b.
inline Ensemble sample_ensemble(const Vector& z_b, const Matrix& B_inf, int N, Rng& rng,
                                Centering centering = Centering::Recentred) {
  const Index n = z_b.size();
  require(N >= n + 1, ErrorKind::InvalidArgument, "sample_ensemble: need N >= n + 1 members");
  const auto llt = detail::spd_factor(B_inf, "sample_ensemble B_inf");
  const Matrix L = llt.matrixL();
  Matrix members = (L * normal_matrix(rng, n, N)).colwise() + z_b;
  if (centering == Centering::Recentred) {
    const Vector mean = members.rowwise().mean();
    members.colwise() += z_b - mean;
  }
  return ensemble_from_members(members, z_b);
}

struct WishartReport {
  double expected_factor = 0.0;  ///< E[(B^N)^-1] = factor (B_inf)^-1
  Matrix mean_inverse;
  double rel_frobenius_error = 0.0;
  int used = 0;
  int skipped = 0;
};

/// Monte Carlo mean of (B^N)^-1 against its closed form. Draws around the known mean keep
/// N - 1 scaled degrees of freedom N, giving (N-1)/(N-1-n); recentred ensembles lose one
/// degree of freedom, giving (N-1)/(N-2-n).
inline WishartReport wishart_inverse_mean_check(const Matrix& B_inf, int N, int replications, Rng& rng,
                                                Centering centering = Centering::KnownMean) {
  const Index n = B_inf.rows();
  const int lost = centering == Centering::Recentred ? 1 : 0;
  require(N > n + 1 + lost, ErrorKind::InvalidArgument, "wishart_inverse_mean_check: ensemble too small");
  require(replications > 0, ErrorKind::InvalidArgument, "wishart_inverse_mean_check: replications must be positive");
  WishartReport rep;
  rep.expected_factor = static_cast<double>(N - 1) / static_cast<double>(N - 1 - n - lost);
  rep.mean_inverse = Matrix::Zero(n, n);
  const Vector zero = Vector::Zero(n);
  const Matrix I = Matrix::Identity(n, n);
  for (int r = 0; r < replications; ++r) {
    const Ensemble e = sample_ensemble(zero, B_inf, N, rng, centering);
    Eigen::LLT<Matrix> llt(e.B_N);
    if (llt.info() != Eigen::Success) {
      ++rep.skipped;
      continue;
    }
    rep.mean_inverse += llt.solve(I);
    ++rep.used;
  }
  require(rep.used > 0, ErrorKind::SingularMatrix, "wishart_inverse_mean_check: every sample was singular");
  rep.mean_inverse /= static_cast<double>(rep.used);
  const Matrix expected = rep.expected_factor * detail::spd_factor(B_inf, "B_inf").solve(I);
  rep.rel_frobenius_error = (rep.mean_inverse - expected).norm() / expected.norm();
  return rep;
}

// ---------------------------------------------------------------------------------------------
// EnKF gain and the regularized subproblem

/// K = B H' (H B H' + R)^-1.
inline Matrix enkf_gain(const Matrix& B, const Matrix& H, const Matrix& R) {
  const Matrix S = H * B * H.transpose() + R;
  const auto llt = detail::spd_factor(S, "enkf_gain innovation covariance");
  return llt.solve(H * B).transpose();
}

inline Matrix enkf_gain(const Ensemble& ensemble, const Matrix& H, const Matrix& R) {
  return enkf_gain(ensemble.B_N, H, R);
}

/// Mean update s^a = z_b - x + K (y - H(x) - H_x (z_b - x)), the minimizer of the linearized
/// subproblem without regularization.
inline Vector enkf_mean_update(const Vector& x, const DAProblem& problem, const Matrix& B, const Matrix& H_x,
                               const Vector& Hx) {
  const Matrix K = enkf_gain(B, H_x, problem.R);
  const Vector zb_minus_x = problem.z_b - x;
  return zb_minus_x + K * (problem.y - Hx - H_x * zb_minus_x);
}

/// Per-member updates s^{k,a} = z^k - x + K (y - H(x) - H_x (z^k - x) - v^k) with centred
/// observation perturbations v^k ~ N(0, R). Columns are members.
inline Matrix enkf_member_updates(const Vector& x, const DAProblem& problem, const Ensemble& ensemble,
                                  const Matrix& H_x, const Vector& Hx, Rng& rng) {
  const Matrix K = enkf_gain(ensemble.B_N, H_x, problem.R);
  const Index N = ensemble.size();
  const Matrix L = detail::spd_factor(problem.R, "R").matrixL();
  Matrix v = L * normal_matrix(rng, problem.obs_dim(), N);
  v.colwise() -= v.rowwise().mean();
  Matrix out(x.size(), N);
  for (Index k = 0; k < N; ++k) {
    const Vector zk_minus_x = ensemble.members.col(k) - x;
    out.col(k) = zk_minus_x + K * (problem.y - Hx - H_x * zk_minus_x - v.col(k));
  }
  return out;
}

/// Exact minimizer of 1/2 ||s + x - z_b||^2_{B^-1} + 1/2 ||y - H(x) - H_x s||^2_{R^-1} + gamma/2 ||s||^2.
inline Vector solve_da_subproblem(const Vector& x, const DAProblem& problem, const Matrix& B, double gamma) {
  require(gamma >= 0.0, ErrorKind::InvalidArgument, "solve_da_subproblem: gamma must be non-negative");
  const Matrix I = Matrix::Identity(x.size(), x.size());
  const Matrix Binv = detail::spd_factor(B, "solve_da_subproblem covariance").solve(I);
  const auto Rf = detail::spd_factor(problem.R, "R");
  const Matrix H = jacobian_H(x, problem);
  const Vector g = Binv * (x - problem.z_b) + H.transpose() * Rf.solve(forward_H(x, problem) - problem.y);
  Matrix A = Binv + H.transpose() * Rf.solve(H);
  A.diagonal().array() += gamma;
  Eigen::LLT<Matrix> llt(A);
  if (llt.info() != Eigen::Success) throw Error(ErrorKind::SingularMatrix, "solve_da_subproblem: singular system");
  return llt.solve(-g);
}

// ---------------------------------------------------------------------------------------------
// Oracle

/// Model and estimate oracle induced by an empirical covariance: f0 and m(x) are both the
/// objective with covariance B^N, g = J_m' r_m for the stacked residual. Accuracy flags are
/// judged against the objective with B_inf.
///
/// With `resample_members` > 0 a fresh recentred ensemble of that size is drawn at every model
/// call (the estimates of the same iteration reuse it); otherwise the covariance is fixed.
class DaOracle {
 public:
  DaOracle(const DAProblem& problem, const Matrix& covariance, AccuracyConstants constants = {},
           int resample_members = 0, std::uint64_t seed = 0)
      : problem_(&problem),
        truth_(make_da_residual_problem(problem, problem.B_inf)),
        c_(constants),
        resample_(resample_members),
        rng_(seed) {
    require(resample_members == 0 || resample_members >= problem.dim() + 1, ErrorKind::InvalidArgument,
            "DaOracle: resampled ensembles need N >= n + 1");
    set_covariance(covariance);
  }

  void reseed(std::uint64_t seed) { rng_.seed(seed); }

  const Matrix& covariance() const { return covariance_; }
  const ResidualProblem& truth() const { return truth_; }

  ModelEstimate model(const Vector& x, double mu) {
    if (resample_ > 0) set_covariance(sample_ensemble(problem_->z_b, problem_->B_inf, resample_, rng_).B_N);
    const Vector r = current_.residual(x);
    Matrix J = current_.jacobian(x);
    Vector g = J.transpose() * r;
    const double m = 0.5 * r.squaredNorm();
    const bool accurate = model_is_accurate(truth_.gradient(x), truth_.value(x), g, m, mu, c_);
    return {std::move(g), std::move(J), m, accurate};
  }

  EstimatePair estimates(const Vector& x, const Vector& trial, double mu) {
    const double f0 = current_.value(x);
    const double f1 = current_.value(trial);
    return {f0, f1, estimates_are_accurate(truth_.value(x), truth_.value(trial), f0, f1, mu, c_)};
  }

 private:
  void set_covariance(const Matrix& covariance) {
    detail::spd_factor(covariance, "DaOracle covariance");
    covariance_ = covariance;
    current_ = make_da_residual_problem(*problem_, covariance_);
  }

  const DAProblem* problem_;
  ResidualProblem truth_;
  ResidualProblem current_;
  Matrix covariance_;
  AccuracyConstants c_;
  int resample_;
  Rng rng_;
};

// ---------------------------------------------------------------------------------------------
// Chebyshev accuracy bounds

struct ChebyshevBounds {
  double mu_bar = 0.0;  ///< min(lambda^j mu0, mu_max)
  double bias_factor = 0.0;  ///< n / (N - 1 - n)
  double Theta = 0.0;
  double Theta_tilde = 0.0;
  double Upsilon = 0.0;
  double Upsilon_tilde = 0.0;
  double var0 = 0.0;  ///< Var ||x - z_b||^2_{(B^N)^-1}
  double var1 = 0.0;  ///< Var ||x + s - z_b||^2_{(B^N)^-1}
  double lambda_max = 0.0;  ///< largest eigenvalue of Cov((B^N)^-1 (x - z_b))
  double q_lower = 0.0;
  double p_lower = 0.0;
  bool q_vacuous = false;
  bool p_vacuous = false;
  double aleph = 0.0;
  double min_members = 0.0;  ///< N must exceed (aleph mu_bar^2 + 1) n + 1
  bool N_sufficient = false;
};

struct ChebyshevSetup {
  int N = 100;
  int resamples = 200;
  int iteration = 0;  ///< j
  double mu0 = 1.0;
  double lambda = 2.0;
  double mu_max = 1e16;
  AccuracyConstants constants;
};

/// Lower bounds on the probabilities of accurate estimates (q) and an accurate model (p) at a
/// point x with step s, with the variance terms estimated from fresh recentred ensembles.
inline ChebyshevBounds chebyshev_accuracy_bounds(const Vector& x, const Vector& s, const DAProblem& problem,
                                                 const ChebyshevSetup& setup, Rng& rng) {
  const Index n = problem.dim();
  require(setup.resamples >= 2, ErrorKind::InvalidArgument, "chebyshev_accuracy_bounds: need at least 2 resamples");
  require(setup.N > n + 1, ErrorKind::InvalidArgument, "chebyshev_accuracy_bounds: need N > n + 1");
  const auto& c = setup.constants;
  ChebyshevBounds b;
  b.mu_bar = std::min(std::pow(setup.lambda, setup.iteration) * setup.mu0, setup.mu_max);
  b.bias_factor = static_cast<double>(n) / static_cast<double>(setup.N - 1 - n);

  const Matrix I = Matrix::Identity(n, n);
  const Matrix Binf_inv = detail::spd_factor(problem.B_inf, "B_inf").solve(I);
  const Vector d0 = x - problem.z_b;
  const Vector d1 = x + s - problem.z_b;
  const double a0 = d0.dot(Binf_inv * d0);
  const double a1 = d1.dot(Binf_inv * d1);
  const double w = (Binf_inv * d0).norm();
  const double mb2 = b.mu_bar * b.mu_bar;
  b.Theta = 2.0 * c.eps_f / mb2 - b.bias_factor * a0;
  b.Theta_tilde = 2.0 * c.eps_f / mb2 - b.bias_factor * a1;
  b.Upsilon = 2.0 * c.kappa_ef / mb2 - b.bias_factor * a0;
  b.Upsilon_tilde = c.kappa_eg / b.mu_bar - b.bias_factor * w;

  const int M = setup.resamples;
  std::vector<double> v0(M), v1(M);
  Matrix grads(n, M);
  for (int k = 0; k < M; ++k) {
    const Ensemble e = sample_ensemble(problem.z_b, problem.B_inf, setup.N, rng);
    const auto llt = detail::spd_factor(e.B_N, "resampled B^N");
    const Vector u0 = llt.solve(d0);
    v0[k] = d0.dot(u0);
    v1[k] = d1.dot(llt.solve(d1));
    grads.col(k) = u0;
  }
  auto variance = [](const std::vector<double>& v) {
    double m = 0.0;
    for (double t : v) m += t;
    m /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double t : v) ss += (t - m) * (t - m);
    return ss / static_cast<double>(v.size() - 1);
  };
  b.var0 = variance(v0);
  b.var1 = variance(v1);
  const Matrix centred = grads.colwise() - grads.rowwise().mean();
  const Matrix cov = centred * centred.transpose() / static_cast<double>(M - 1);
  b.lambda_max = Eigen::SelfAdjointEigenSolver<Matrix>(cov, Eigen::EigenvaluesOnly).eigenvalues().maxCoeff();

  auto clamp = [](double raw, bool denominators_ok, bool& vacuous) {
    vacuous = !denominators_ok || !(raw > 0.0);
    return vacuous ? 0.0 : raw;
  };
  const double q_raw = 1.0 - b.var0 / (b.Theta * b.Theta) - b.var1 / (b.Theta_tilde * b.Theta_tilde);
  b.q_lower = clamp(q_raw, b.Theta > 0.0 && b.Theta_tilde > 0.0, b.q_vacuous);
  const double p_raw = 1.0 - b.var0 / (b.Upsilon * b.Upsilon) -
                       static_cast<double>(n) * b.lambda_max / (b.Upsilon_tilde * b.Upsilon_tilde);
  b.p_lower = clamp(p_raw, b.Upsilon > 0.0 && b.Upsilon_tilde > 0.0, b.p_vacuous);

  b.aleph = std::max({a0 / (2.0 * c.eps_f), a1 / (2.0 * c.eps_f), a0 / (2.0 * c.kappa_ef), w / (c.kappa_eg * b.mu_bar)});
  b.min_members = (b.aleph * mb2 + 1.0) * static_cast<double>(n) + 1.0;
  b.N_sufficient = static_cast<double>(setup.N) > b.min_members;
  return b;
}

// ---------------------------------------------------------------------------------------------
// Twin experiment

enum class ObservationMode {
  NoiseOnly,       ///< y ~ N(0, R)
  TruthPlusNoise,  ///< y = H(z_true) + N(0, R) with z_true ~ N(z_b, B_inf)
};

struct TwinConfig {
  Lorenz63Params lorenz;
  int obs_every = 1;                      ///< observe at steps 0, k, 2k, ... up to the window end
  std::vector<int> observed{0, 1, 2};     ///< observed state components
  double obs_variance = 0.1;              ///< R = obs_variance I
  double sigma_b = 1.0;                   ///< B_inf = sigma_b^2 I
  std::vector<int> ensemble_sizes{4, 100, 1000, 0};  ///< 0 stands for N = infinity (B_inf itself)
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  std::uint64_t master_seed = 0;
  ObservationMode y_mode = ObservationMode::NoiseOnly;
  bool resample_each_iteration = false;
  AccuracyConstants constants;
  SolverConfig solver;
  int workers = 0;
};

/// Problem instance of one twin seed: z_b ~ N(0, B_inf) and the observations.
inline DAProblem make_twin_problem(const TwinConfig& cfg, std::uint64_t seed) {
  require(cfg.obs_every > 0, ErrorKind::InvalidArgument, "twin: obs_every must be positive");
  require(cfg.obs_variance > 0.0 && cfg.sigma_b > 0.0, ErrorKind::InvalidArgument,
          "twin: obs_variance and sigma_b must be positive");
  require(!cfg.observed.empty(), ErrorKind::InvalidArgument, "twin: no observed components");
  require(cfg.lorenz.steps_per_window >= 0, ErrorKind::InvalidArgument, "twin: window must be non-negative");
  DAProblem p;
  p.lorenz = cfg.lorenz;
  p.B_inf = cfg.sigma_b * cfg.sigma_b * Matrix::Identity(3, 3);
  for (int k = 0; k <= cfg.lorenz.steps_per_window; k += cfg.obs_every) p.obs_steps.push_back(k);
  p.H_point = Matrix::Zero(static_cast<Index>(cfg.observed.size()), 3);
  for (std::size_t i = 0; i < cfg.observed.size(); ++i) {
    require(cfg.observed[i] >= 0 && cfg.observed[i] < 3, ErrorKind::InvalidArgument,
            "twin: observed component out of range");
    p.H_point(static_cast<Index>(i), cfg.observed[i]) = 1.0;
  }
  const Index m = p.obs_dim();
  p.R = cfg.obs_variance * Matrix::Identity(m, m);

  Rng rng = make_stream(cfg.master_seed, seed);
  p.z_b = cfg.sigma_b * normal_vector(rng, 3);
  const Vector noise = std::sqrt(cfg.obs_variance) * normal_vector(rng, m);
  if (cfg.y_mode == ObservationMode::NoiseOnly) {
    p.y = noise;
  } else {
    const Vector z_true = p.z_b + cfg.sigma_b * normal_vector(rng, 3);
    p.y = forward_H(z_true, p) + noise;
  }
  p.validate();
  return p;
}

struct TwinCell {
  std::uint64_t seed = 0;
  int N = 0;  ///< 0 is the exact-covariance run
  RunTrace trace;
  Vector x_final;
  double final_true_f = 0.0;
  double final_true_grad_norm = 0.0;
  double distance_to_exact = std::numeric_limits<double>::quiet_NaN();
  std::optional<std::string> error;
};

struct TwinReport {
  std::vector<TwinCell> cells;  ///< seed-major, ensemble sizes in config order
};

/// Stream for the ensemble of cell (seed, N).
inline std::uint64_t twin_ensemble_seed(std::uint64_t master, std::uint64_t seed, int N) {
  return mix_seed(mix_seed(master, seed), 1000003ULL + static_cast<std::uint64_t>(N));
}

/// Runs the algorithm with the ensemble oracle for every (seed, N) cell. Failed cells keep their
/// error message; distances are computed against the N = infinity cell of the same seed.
inline TwinReport twin_experiment(const TwinConfig& cfg) {
  cfg.solver.validate();
  cfg.constants.validate();
  for (int N : cfg.ensemble_sizes)
    require(N == 0 || N >= 4, ErrorKind::InvalidArgument, "twin: ensemble sizes must be 0 (infinity) or >= n + 1");
  const std::size_t ns = cfg.ensemble_sizes.size();
  TwinReport report;
  report.cells.resize(cfg.seeds.size() * ns);
  parallel_for(report.cells.size(), cfg.workers, [&](std::size_t idx) {
    TwinCell& cell = report.cells[idx];
    cell.seed = cfg.seeds[idx / ns];
    cell.N = cfg.ensemble_sizes[idx % ns];
    try {
      const DAProblem problem = make_twin_problem(cfg, cell.seed);
      const std::uint64_t stream = twin_ensemble_seed(cfg.master_seed, cell.seed, cell.N);
      Matrix cov = problem.B_inf;
      int resample = 0;
      if (cell.N > 0) {
        if (cfg.resample_each_iteration) {
          resample = cell.N;
        } else {
          Rng rng = make_stream(stream, 0);
          cov = sample_ensemble(problem.z_b, problem.B_inf, cell.N, rng).B_N;
        }
      }
      DaOracle oracle(problem, cov, cfg.constants, resample);
      cell.trace = run(oracle.truth(), oracle, cfg.solver, problem.z_b, stream);
      cell.x_final = cell.trace.x_final;
      cell.final_true_f = oracle.truth().value(cell.x_final);
      cell.final_true_grad_norm = oracle.truth().gradient(cell.x_final).norm();
    } catch (const std::exception& e) {
      cell.error = e.what();
    }
  });
  for (std::size_t s = 0; s < cfg.seeds.size(); ++s) {
    const TwinCell* exact = nullptr;
    for (std::size_t k = 0; k < ns; ++k) {
      const TwinCell& c = report.cells[s * ns + k];
      if (c.N == 0 && !c.error) exact = &c;
    }
    if (!exact) continue;
    for (std::size_t k = 0; k < ns; ++k) {
      TwinCell& c = report.cells[s * ns + k];
      if (!c.error) c.distance_to_exact = (c.x_final - exact->x_final).norm();
    }
  }
  return report;
}

/// (iteration, f0) at the successful iterations of a trace.
inline std::vector<std::pair<int, double>> successful_f0(const RunTrace& trace) {
  std::vector<std::pair<int, double>> out;
  for (const auto& r : trace.records)
    if (r.success) out.emplace_back(r.iter, r.f0);
  return out;
}

}  // namespace slm
