#pragma once

#include <cmath>
#include <string>

#include "slm/types.hpp"

namespace slm {

/// What a model oracle returns at (x, mu): gradient and Jacobian estimates, the model value at
/// the center, and whether the draw was first-order accurate against the ground truth.
struct ModelEstimate {
  Vector g;
  Matrix J;
  double m_at_center = 0.0;
  bool accurate = true;
};

/// What an estimate oracle returns for a step: f^0 at the center, f^1 at the trial point,
/// and whether both were within eps_f / mu^2 of the truth.
struct EstimatePair {
  double f0 = 0.0;
  double f1 = 0.0;
  bool accurate = true;
};

/// Regularized Gauss-Newton model of one iteration:
///   m(x + s) = m(x) + g's + 1/2 s'(J'J + gamma I)s,  gamma = mu ||g||.
struct ModelSnapshot {
  Vector center;
  double m_at_center = 0.0;
  Vector g;
  Matrix J;
  double gamma = 0.0;
  double mu = 0.0;

  Index dim() const { return g.size(); }
};

inline ModelSnapshot make_snapshot(ModelEstimate est, const Vector& x, double mu) {
  require(mu > 0.0 && std::isfinite(mu), ErrorKind::InvalidArgument, "make_snapshot: mu must be positive and finite");
  require_same_size(x.size(), est.g.size(), "make_snapshot: model gradient");
  require_same_size(x.size(), est.J.cols(), "make_snapshot: model Jacobian columns");
  if (!all_finite(est.g) || !all_finite(est.J) || !std::isfinite(est.m_at_center))
    throw Error(ErrorKind::NonFiniteModel, "oracle produced non-finite model values");
  ModelSnapshot snap;
  snap.center = x;
  snap.m_at_center = est.m_at_center;
  snap.g = std::move(est.g);
  snap.J = std::move(est.J);
  snap.mu = mu;
  snap.gamma = mu * snap.g.norm();
  return snap;
}

/// m(x) - m(x + s), evaluated without forming m(x + s) to avoid cancellation.
inline double model_decrease(const ModelSnapshot& snap, const Vector& s) {
  require_same_size(snap.dim(), s.size(), "model_decrease: step");
  const double curvature = (snap.J * s).squaredNorm() + snap.gamma * s.squaredNorm();
  return -(snap.g.dot(s) + 0.5 * curvature);
}

inline double model_value(const ModelSnapshot& snap, const Vector& s) {
  return snap.m_at_center - model_decrease(snap, s);
}

}  // namespace slm
