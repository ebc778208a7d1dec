#include <gtest/gtest.h>

#include <cmath>

#include "slm/diagnostics.hpp"
#include "slm/lm_core.hpp"
#include "slm/oracles.hpp"

namespace slm {
namespace {

ModelSnapshot small_snapshot(double mu) {
  ModelEstimate est;
  est.J = Matrix(3, 2);
  est.J << 2, 1, 0, 1, 1, 0;
  est.g = Vector(2);
  est.g << 1, 0;
  est.m_at_center = 3.0;
  return make_snapshot(est, Vector::Zero(2), mu);
}

// Model that always reports g = 0: every iteration must be unsuccessful.
struct ZeroGradientOracle {
  ModelEstimate model(const Vector& x, double) { return {Vector::Zero(x.size()), Matrix::Identity(x.size(), x.size()), 0.0, true}; }
  EstimatePair estimates(const Vector&, const Vector&, double) { return {1.0, 1.0, true}; }
};

TEST(ComputeRho, RatioOfActualToPredicted) {
  EXPECT_DOUBLE_EQ(compute_rho(2.0, 1.5, 0.25), 2.0);
  EXPECT_DOUBLE_EQ(compute_rho(1.0, 1.25, 0.5), -0.5);
}

TEST(ComputeRho, RejectsNonPositiveDecrease) {
  try {
    compute_rho(1.0, 0.5, 0.0);
    FAIL() << "expected DegenerateSubproblem";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DegenerateSubproblem);
  }
  EXPECT_THROW(compute_rho(1.0, 0.5, -1e-3), Error);
}

TEST(ModelSnapshot, GammaIsMuTimesGradientNorm) {
  const ModelSnapshot snap = small_snapshot(4.0);
  EXPECT_DOUBLE_EQ(snap.gamma, 4.0);
}

TEST(ModelSnapshot, ModelValueAtExactStep) {
  // s = -(J'J + I/2)^{-1} g = (-10/39, 8/39), decrease 5/39
  const ModelSnapshot snap = small_snapshot(0.5);
  Vector s(2);
  s << -10.0 / 39.0, 8.0 / 39.0;
  EXPECT_NEAR(model_decrease(snap, s), 5.0 / 39.0, 1e-15);
  EXPECT_NEAR(model_value(snap, s), 112.0 / 39.0, 1e-14);
  EXPECT_DOUBLE_EQ(model_value(snap, Vector::Zero(2)), 3.0);
}

TEST(ModelSnapshot, RejectsNonFiniteModel) {
  ModelEstimate est{Vector::Constant(2, NAN), Matrix::Identity(2, 2), 0.0, true};
  try {
    make_snapshot(est, Vector::Zero(2), 1.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NonFiniteModel);
  }
}

TEST(UpdateRule, SuccessNeedsRatioAndGradientScale) {
  SolverConfig cfg;
  EXPECT_TRUE(is_successful(0.1, 1.0, 1.0, cfg));
  EXPECT_FALSE(is_successful(0.0999, 1.0, 1.0, cfg));
  EXPECT_FALSE(is_successful(0.5, 0.4, 2.0, cfg));  // ||g|| < eta2 / mu
  EXPECT_TRUE(is_successful(0.5, 0.5, 2.0, cfg));
}

TEST(UpdateRule, MuMovesByLambdaAndRespectsFloor) {
  SolverConfig cfg;
  EXPECT_DOUBLE_EQ(next_mu(true, 8.0, cfg), 4.0);
  EXPECT_DOUBLE_EQ(next_mu(false, 8.0, cfg), 16.0);
  EXPECT_DOUBLE_EQ(next_mu(true, cfg.mu_min, cfg), cfg.mu_min);
}

TEST(UpdateRule, ApplyUpdateMovesOnlyOnSuccess) {
  SolverConfig cfg;
  const ModelSnapshot snap = small_snapshot(2.0);
  const SolverState st{Vector::Zero(2), 2.0, 7};
  const Vector s = Vector::Constant(2, 0.1);
  auto [ok, rec_ok] = apply_update(st, snap, s, 0.9, cfg);
  EXPECT_TRUE(rec_ok.success);
  EXPECT_EQ(ok.x, s);
  EXPECT_DOUBLE_EQ(ok.mu, 1.0);
  EXPECT_EQ(ok.iter, 8);
  auto [bad, rec_bad] = apply_update(st, snap, s, 0.01, cfg);
  EXPECT_FALSE(rec_bad.success);
  EXPECT_EQ(bad.x, st.x);
  EXPECT_DOUBLE_EQ(bad.mu, 4.0);
}

TEST(SolverConfig, ValidateRejectsBadConstants) {
  SolverConfig cfg;
  cfg.eta1 = 1.0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = {};
  cfg.lambda = 1.0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = {};
  cfg.mu0 = 1e-20;
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(Run, ExactOracleReachesNormalEquationsSolution) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const LinearData d = random_linear_data(10, 5, seed);
    const ResidualProblem problem = make_linear_problem(d.A, d.b);
    const Vector x_normal = (d.A.transpose() * d.A).ldlt().solve(d.A.transpose() * d.b);
    ExactOracle oracle(problem);
    SolverConfig cfg;
    cfg.eta2 = 1e-8;
    cfg.grad_tol = 1e-10;
    cfg.max_iters = 50;
    const RunTrace trace = run(problem, oracle, cfg, Vector::Zero(5), seed);
    EXPECT_EQ(trace.stop, StopReason::GradientTolerance) << "seed " << seed;
    EXPECT_LE((trace.x_final - x_normal).norm(), 1e-8) << "seed " << seed;
  }
}

TEST(Run, MuStaysOnLatticeAndStopsAboveMuMax) {
  const ResidualProblem problem = make_rosenbrock();
  Vector x0(2);
  x0 << -1.2, 1.0;
  GaussianOracle oracle(problem, {0.5, 0.5, 0.05, 0.8, 0.8});
  SolverConfig cfg;
  cfg.mu_max = 1e6;
  const RunTrace trace = run(problem, oracle, cfg, x0, 3);
  EXPECT_EQ(trace.stop, StopReason::MuExceeded);
  EXPECT_GT(trace.mu_final, cfg.mu_max);
  for (double mu : mu_sequence(trace)) EXPECT_TRUE(on_mu_lattice(mu, cfg.mu0, cfg.lambda, cfg.mu_min)) << mu;
}

TEST(Run, IterateChangesOnlyOnSuccess) {
  const LinearData d = random_linear_data(8, 3, 11);
  const ResidualProblem problem = make_linear_problem(d.A, d.b);
  BernoulliOracle oracle(problem, {1, 1, 1, 0.7, 0.7}, 5.0);
  SolverConfig cfg;
  cfg.max_iters = 200;
  const RunTrace trace = run(problem, oracle, cfg, Vector::Zero(3), 9);
  for (std::size_t j = 0; j + 1 < trace.records.size(); ++j) {
    const auto& r = trace.records[j];
    EXPECT_EQ(r.mu_after, r.success ? std::max(r.mu_before / 2, cfg.mu_min) : 2 * r.mu_before);
    EXPECT_EQ(trace.records[j + 1].mu_before, r.mu_after);
    EXPECT_EQ(*trace.records[j + 1].true_f_before, r.success ? *r.true_f_after : *r.true_f_before);
  }
}

TEST(Run, ZeroModelGradientIsUnsuccessful) {
  const ResidualProblem problem = make_rosenbrock();
  ZeroGradientOracle oracle;
  SolverConfig cfg;
  cfg.max_iters = 5;
  const RunTrace trace = run(problem, oracle, oracle, TruncatedCg{}, cfg, Vector::Zero(2), 0);
  ASSERT_EQ(trace.records.size(), 5u);
  for (const auto& r : trace.records) EXPECT_FALSE(r.success);
  EXPECT_DOUBLE_EQ(trace.mu_final, 32.0);
  EXPECT_EQ(trace.x_final, Vector::Zero(2));
}

TEST(Run, SameSeedSameTrace) {
  const ResidualProblem problem = make_rosenbrock();
  GaussianOracle a(problem, {0.5, 0.5, 0.05, 0.8, 0.8}), b(problem, {0.5, 0.5, 0.05, 0.8, 0.8});
  SolverConfig cfg;
  cfg.max_iters = 300;
  const RunTrace ta = run(problem, a, cfg, Vector::Zero(2), 42);
  const RunTrace tb = run(problem, b, cfg, Vector::Zero(2), 42);
  ASSERT_EQ(ta.records.size(), tb.records.size());
  for (std::size_t i = 0; i < ta.records.size(); ++i) {
    EXPECT_EQ(ta.records[i].f0, tb.records[i].f0);
    EXPECT_EQ(ta.records[i].mu_before, tb.records[i].mu_before);
  }
  EXPECT_EQ(ta.x_final, tb.x_final);
  const RunTrace tc = run(problem, a, cfg, Vector::Zero(2), 43);
  EXPECT_NE(ta.records.front().f0, tc.records.front().f0);
}

TEST(Run, RejectsMismatchedStart) {
  const ResidualProblem problem = make_rosenbrock();
  ExactOracle oracle(problem);
  EXPECT_THROW(run(problem, oracle, SolverConfig{}, Vector::Zero(3), 0), Error);
}

}  // namespace
}  // namespace slm
