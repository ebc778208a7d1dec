#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include <boost/math/distributions/normal.hpp>

#include "slm/lm_core.hpp"
#include "slm/model.hpp"
#include "slm/problem.hpp"
#include "slm/rng.hpp"
#include "slm/types.hpp"

namespace slm {

/// Accuracy constants of the probabilistic model / estimate requirements.
struct AccuracyConstants {
  double kappa_ef = 1.0;  ///< |f(x) - m(x)| <= kappa_ef / mu^2
  double kappa_eg = 1.0;  ///< ||g - grad f(x)|| <= kappa_eg / mu
  double eps_f = 1.0;     ///< |f^i - f| <= eps_f / mu^2 at both points
  double p = 1.0;         ///< probability of an accurate model
  double q = 1.0;         ///< probability of accurate estimates

  void validate() const {
    require(kappa_ef > 0.0 && kappa_eg > 0.0 && eps_f > 0.0, ErrorKind::InvalidArgument,
            "accuracy constants must be positive");
    require(p > 0.0 && p <= 1.0 && q > 0.0 && q <= 1.0, ErrorKind::InvalidArgument, "p and q must lie in (0,1]");
  }
};

/// Model first-order accuracy (event U) for a model draw at (x, mu).
inline bool model_is_accurate(const Vector& true_grad, double true_f, const Vector& g, double m_at_center, double mu,
                              const AccuracyConstants& c) {
  return (g - true_grad).norm() <= c.kappa_eg / mu && std::abs(true_f - m_at_center) <= c.kappa_ef / (mu * mu);
}

/// Estimate accuracy (event V): both values within eps_f / mu^2.
inline bool estimates_are_accurate(double f_center, double f_trial, double f0, double f1, double mu,
                                   const AccuracyConstants& c) {
  const double tol = c.eps_f / (mu * mu);
  return std::abs(f0 - f_center) <= tol && std::abs(f1 - f_trial) <= tol;
}

/// Everything one oracle call produces, for inspection outside the solver loop.
struct OracleOutput {
  double f0 = 0.0;
  double f1 = 0.0;
  Vector g;
  Matrix J;
  double m_at_center = 0.0;
  bool was_accurate_model = true;
  bool was_accurate_estimates = true;
};

template <typename Oracle>
  requires ModelOracle<Oracle> && EstimateOracle<Oracle>
OracleOutput sample_oracle(Oracle& oracle, const Vector& x, const Vector& trial, double mu) {
  ModelEstimate m = oracle.model(x, mu);
  EstimatePair e = oracle.estimates(x, trial, mu);
  return {e.f0, e.f1, std::move(m.g), std::move(m.J), m.m_at_center, m.accurate, e.accurate};
}

/// Deterministic oracle: exact f, J'r and J.
class ExactOracle {
 public:
  explicit ExactOracle(const ResidualProblem& problem) : problem_(&problem) {}

  ModelEstimate model(const Vector& x, double /*mu*/) {
    const Vector r = problem_->residual(x);
    Matrix J = problem_->jacobian(x);
    if (!all_finite(r) || !all_finite(J)) throw Error(ErrorKind::NonFiniteModel, "exact oracle: non-finite residual");
    Vector g = J.transpose() * r;
    return {std::move(g), std::move(J), 0.5 * r.squaredNorm(), true};
  }

  EstimatePair estimates(const Vector& x, const Vector& trial, double /*mu*/) {
    return {problem_->value(x), problem_->value(trial), true};
  }

 private:
  const ResidualProblem* problem_;
};

/// Two-sided standard normal quantile z with P(|Z| <= z) = prob.
inline double two_sided_quantile(double prob) {
  require(prob > 0.0 && prob < 1.0, ErrorKind::InvalidArgument, "two_sided_quantile: probability must lie in (0,1)");
  static const boost::math::normal_distribution<double> standard(0.0, 1.0);
  return boost::math::quantile(standard, 0.5 * (1.0 + prob));
}

/// Gaussian noise calibrated so that each accuracy event holds with the designed probability.
///
/// Gradient and center value are perturbed independently, each marginal accurate with
/// probability sqrt(p) (joint p); f^0 and f^1 likewise with sqrt(q) each (joint q). The
/// Jacobian gets entrywise noise of std jacobian_noise / mu and is clipped to spectral norm
/// kappa_Jm.
class GaussianOracle {
 public:
  GaussianOracle(const ResidualProblem& problem, AccuracyConstants constants, double jacobian_noise = 0.0,
                 double kappa_Jm = std::numeric_limits<double>::infinity(), std::uint64_t seed = 0)
      : problem_(&problem), c_(constants), jacobian_noise_(jacobian_noise), kappa_Jm_(kappa_Jm), rng_(seed) {
    c_.validate();
    require(c_.p < 1.0 && c_.q < 1.0, ErrorKind::InvalidArgument,
            "gaussian oracle needs p, q < 1 (finite quantile)");
    require(jacobian_noise >= 0.0 && kappa_Jm > 0.0, ErrorKind::InvalidArgument, "invalid Jacobian noise settings");
    z_model_ = two_sided_quantile(std::sqrt(c_.p));
    z_est_ = two_sided_quantile(std::sqrt(c_.q));
  }

  void reseed(std::uint64_t seed) { rng_.seed(seed); }

  const AccuracyConstants& constants() const { return c_; }

  /// Standard deviation of each function estimate at mu.
  double estimate_sigma(double mu) const { return c_.eps_f / (mu * mu) / z_est_; }

  ModelEstimate model(const Vector& x, double mu) {
    const Vector r = problem_->residual(x);
    Matrix J = problem_->jacobian(x);
    const Vector grad = J.transpose() * r;
    const double f = 0.5 * r.squaredNorm();

    const double len_sigma = c_.kappa_eg / mu / z_model_;
    const double length = std::abs(len_sigma * standard_normal(rng_));
    Vector g = grad + length * uniform_direction(rng_, grad.size());
    const double m = f + c_.kappa_ef / (mu * mu) / z_model_ * standard_normal(rng_);

    if (jacobian_noise_ > 0.0) J += (jacobian_noise_ / mu) * normal_matrix(rng_, J.rows(), J.cols());
    if (std::isfinite(kappa_Jm_) && J.size() > 0) {
      const double norm = Eigen::JacobiSVD<Matrix>(J).singularValues()(0);
      if (norm > kappa_Jm_) J *= kappa_Jm_ / norm;
    }
    const bool accurate = model_is_accurate(grad, f, g, m, mu, c_);
    return {std::move(g), std::move(J), m, accurate};
  }

  EstimatePair estimates(const Vector& x, const Vector& trial, double mu) {
    const double fx = problem_->value(x);
    const double ft = problem_->value(trial);
    const double sigma = estimate_sigma(mu);
    const double f0 = fx + sigma * standard_normal(rng_);
    const double f1 = ft + sigma * standard_normal(rng_);
    return {f0, f1, estimates_are_accurate(fx, ft, f0, f1, mu, c_)};
  }

 private:
  const ResidualProblem* problem_;
  AccuracyConstants c_;
  double jacobian_noise_;
  double kappa_Jm_;
  double z_model_ = 1.0;
  double z_est_ = 1.0;
  Rng rng_;
};

/// Exact with probability p (model) / q (estimates), arbitrarily wrong otherwise: the gradient
/// becomes a random vector of norm `corruption`, estimates are shifted by +-corruption.
/// Model and estimate coins are independent.
class BernoulliOracle {
 public:
  BernoulliOracle(const ResidualProblem& problem, AccuracyConstants constants, double corruption,
                  std::uint64_t seed = 0)
      : problem_(&problem), c_(constants), corruption_(corruption), rng_(seed) {
    c_.validate();
    require(corruption >= 0.0, ErrorKind::InvalidArgument, "corruption must be non-negative");
  }

  void reseed(std::uint64_t seed) { rng_.seed(seed); }

  ModelEstimate model(const Vector& x, double mu) {
    const Vector r = problem_->residual(x);
    Matrix J = problem_->jacobian(x);
    const Vector grad = J.transpose() * r;
    const double f = 0.5 * r.squaredNorm();
    const bool keep = uniform01(rng_) < c_.p;
    Vector g = keep ? grad : Vector(corruption_ * uniform_direction(rng_, grad.size()));
    const bool accurate = model_is_accurate(grad, f, g, f, mu, c_);
    return {std::move(g), std::move(J), f, accurate};
  }

  EstimatePair estimates(const Vector& x, const Vector& trial, double mu) {
    const double fx = problem_->value(x);
    const double ft = problem_->value(trial);
    double f0 = fx;
    double f1 = ft;
    if (!(uniform01(rng_) < c_.q)) {
      f0 += uniform01(rng_) < 0.5 ? corruption_ : -corruption_;
      f1 += uniform01(rng_) < 0.5 ? corruption_ : -corruption_;
    }
    return {f0, f1, estimates_are_accurate(fx, ft, f0, f1, mu, c_)};
  }

 private:
  const ResidualProblem* problem_;
  AccuracyConstants c_;
  double corruption_;
  Rng rng_;
};

/// Function value, gradient and Jacobian built from a subset of residual blocks, rescaled by
/// B / |subset| so that f and g are unbiased and J'J is unbiased for the full Gauss-Newton matrix.
struct SubsampleValues {
  double f = 0.0;
  Vector g;
  Matrix J;
};

inline SubsampleValues subsample_values(const BlockResidualProblem& problem, const Vector& x,
                                        std::span<const std::size_t> subset) {
  require(!subset.empty(), ErrorKind::EmptyBatch, "subsample: empty batch");
  const double scale = static_cast<double>(problem.blocks) / static_cast<double>(subset.size());
  SubsampleValues out;
  out.g = Vector::Zero(problem.dim);
  std::vector<Matrix> rows;
  Index total = 0;
  for (std::size_t b : subset) {
    require(b < problem.blocks, ErrorKind::InvalidArgument, "subsample: block index out of range");
    const Vector r = problem.block_residual(x, b);
    const Matrix Jb = problem.block_jacobian(x, b);
    out.f += 0.5 * r.squaredNorm();
    out.g += Jb.transpose() * r;
    rows.push_back(Jb);
    total += Jb.rows();
  }
  out.f *= scale;
  out.g *= scale;
  out.J.resize(total, problem.dim);
  Index row = 0;
  const double root = std::sqrt(scale);
  for (const auto& Jb : rows) {
    out.J.middleRows(row, Jb.rows()) = root * Jb;
    row += Jb.rows();
  }
  return out;
}

/// Mini-batch oracle over a block-structured residual.
class SubsampleOracle {
 public:
  SubsampleOracle(const BlockResidualProblem& problem, double batch_fraction, AccuracyConstants constants = {},
                  std::uint64_t seed = 0)
      : problem_(&problem), truth_(problem.stacked()), c_(constants), rng_(seed) {
    require(problem.blocks > 0, ErrorKind::EmptyBatch, "subsample: problem has no blocks");
    batch_ = static_cast<std::size_t>(std::floor(batch_fraction * static_cast<double>(problem.blocks) + 0.5));
    require(batch_fraction > 0.0 && batch_ > 0, ErrorKind::EmptyBatch, "subsample: batch fraction gives an empty batch");
    batch_ = std::min(batch_, problem.blocks);
  }

  void reseed(std::uint64_t seed) { rng_.seed(seed); }

  std::size_t batch_size() const { return batch_; }

  ModelEstimate model(const Vector& x, double mu) {
    const auto subset = draw();
    SubsampleValues v = subsample_values(*problem_, x, subset);
    const bool accurate = model_is_accurate(truth_.gradient(x), truth_.value(x), v.g, v.f, mu, c_);
    return {std::move(v.g), std::move(v.J), v.f, accurate};
  }

  EstimatePair estimates(const Vector& x, const Vector& trial, double mu) {
    const auto subset = draw();
    const double f0 = subsample_values(*problem_, x, subset).f;
    const double f1 = subsample_values(*problem_, trial, subset).f;
    return {f0, f1, estimates_are_accurate(truth_.value(x), truth_.value(trial), f0, f1, mu, c_)};
  }

 private:
  std::vector<std::size_t> draw() {
    std::vector<std::size_t> idx(problem_->blocks);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    // partial Fisher-Yates
    for (std::size_t i = 0; i < batch_; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
      std::swap(idx[i], idx[pick(rng_)]);
    }
    idx.resize(batch_);
    std::sort(idx.begin(), idx.end());
    return idx;
  }

  const BlockResidualProblem* problem_;
  ResidualProblem truth_;
  AccuracyConstants c_;
  std::size_t batch_ = 0;
  Rng rng_;
};

}  // namespace slm
