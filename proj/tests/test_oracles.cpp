#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "slm/oracles.hpp"

namespace slm {
namespace {

ResidualProblem quadratic() {
  Vector d(2), xs(2);
  d << 1.0, 0.5;
  xs << 0.0, 0.0;
  return make_diagonal_quadratic(d, xs);
}

Vector point(double a, double b) {
  Vector x(2);
  x << a, b;
  return x;
}

TEST(Quantile, TwoSidedNormal) {
  // scipy.stats.norm.ppf((1 + p) / 2)
  EXPECT_NEAR(two_sided_quantile(0.95), 1.959963984540054, 1e-12);
  EXPECT_NEAR(two_sided_quantile(std::sqrt(0.9)), 1.9488218625070588, 1e-12);
}

TEST(ExactOracle, MatchesProblem) {
  const ResidualProblem p = make_rosenbrock();
  ExactOracle o(p);
  const Vector x = point(-1.2, 1.0);
  const ModelEstimate m = o.model(x, 3.0);
  EXPECT_EQ(m.g, p.gradient(x));
  EXPECT_EQ(m.J, p.jacobian(x));
  EXPECT_DOUBLE_EQ(m.m_at_center, p.value(x));
  const EstimatePair e = o.estimates(x, point(1, 1), 3.0);
  EXPECT_DOUBLE_EQ(e.f0, p.value(x));
  EXPECT_DOUBLE_EQ(e.f1, 0.0);
  EXPECT_TRUE(m.accurate && e.accurate);
}

TEST(GaussianOracle, FrequenciesMatchDesign) {
  const ResidualProblem p = quadratic();
  GaussianOracle o(p, {0.1, 0.1, 0.01, 0.8, 0.7}, 0.0, 1.0, 17);
  const int n = 20000;
  int u = 0, v = 0;
  for (int i = 0; i < n; ++i) {
    const double mu = std::ldexp(1.0, i % 9 - 4);
    u += o.model(point(3, -2), mu).accurate;
    v += o.estimates(point(3, -2), point(2, -1), mu).accurate;
  }
  const auto within = [&](int hits, double prob) {
    return std::abs(hits / double(n) - prob) <= 3.0 * std::sqrt(prob * (1 - prob) / n);
  };
  EXPECT_TRUE(within(u, 0.8)) << u;
  EXPECT_TRUE(within(v, 0.7)) << v;
}

TEST(GaussianOracle, EstimateNoiseScalesWithMu) {
  const ResidualProblem p = quadratic();
  GaussianOracle o(p, {0.1, 0.1, 0.01, 0.9, 0.9});
  EXPECT_DOUBLE_EQ(o.estimate_sigma(2.0) * 4.0, o.estimate_sigma(1.0));
}

TEST(GaussianOracle, JacobianClippedToKappaJm) {
  const ResidualProblem p = make_rosenbrock();
  GaussianOracle o(p, {1, 1, 1, 0.9, 0.9}, 5.0, 2.0, 3);
  for (int i = 0; i < 50; ++i) {
    const Matrix J = o.model(point(1.5, -0.5), 0.5).J;
    EXPECT_LE(Eigen::JacobiSVD<Matrix>(J).singularValues()(0), 2.0 * (1 + 1e-12));
  }
}

TEST(GaussianOracle, RejectsUnitProbability) {
  const ResidualProblem p = quadratic();
  EXPECT_THROW(GaussianOracle(p, {1, 1, 1, 1.0, 0.9}), Error);
}

TEST(BernoulliOracle, FrequenciesMatchDesign) {
  const ResidualProblem p = quadratic();
  BernoulliOracle o(p, {0.1, 0.1, 0.01, 0.6, 0.85}, 100.0, 23);
  const int n = 10000;
  int u = 0, v = 0;
  for (int i = 0; i < n; ++i) {
    u += o.model(point(3, -2), 1.0).accurate;
    v += o.estimates(point(3, -2), point(1, 1), 1.0).accurate;
  }
  EXPECT_NEAR(u / double(n), 0.6, 0.02);
  EXPECT_NEAR(v / double(n), 0.85, 0.02);
}

TEST(Subsample, FullBatchIsExact) {
  const LinearData d = random_linear_data(12, 3, 4);
  const BlockResidualProblem blocks = make_linear_block_problem(d.A, d.b);
  const ResidualProblem full = make_linear_problem(d.A, d.b);
  std::vector<std::size_t> all(12);
  std::iota(all.begin(), all.end(), std::size_t{0});
  const Vector x = Vector::Constant(3, 0.3);
  const SubsampleValues v = subsample_values(blocks, x, all);
  EXPECT_NEAR(v.f, full.value(x), 1e-12);
  EXPECT_LE((v.g - full.gradient(x)).norm(), 1e-12);
  EXPECT_LE((v.J.transpose() * v.J - d.A.transpose() * d.A).norm(), 1e-12);
}

TEST(Subsample, UnbiasedOverAllPairs) {
  // Averaging the rescaled estimate over every 2-subset of 4 blocks recovers f exactly.
  const LinearData d = random_linear_data(4, 2, 8);
  const BlockResidualProblem blocks = make_linear_block_problem(d.A, d.b);
  const Vector x = Vector::Constant(2, -0.7);
  double sum = 0.0;
  int count = 0;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = i + 1; j < 4; ++j) {
      const std::vector<std::size_t> s{i, j};
      sum += subsample_values(blocks, x, s).f;
      ++count;
    }
  EXPECT_NEAR(sum / count, make_linear_problem(d.A, d.b).value(x), 1e-12);
}

TEST(Subsample, EmptyBatchRejected) {
  const LinearData d = random_linear_data(10, 2, 1);
  const BlockResidualProblem blocks = make_linear_block_problem(d.A, d.b);
  try {
    SubsampleOracle(blocks, 0.01);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyBatch);
  }
  EXPECT_THROW(subsample_values(blocks, Vector::Zero(2), std::vector<std::size_t>{}), Error);
}

TEST(Subsample, EstimatesShareOneBatch) {
  const LinearData d = random_linear_data(20, 2, 6);
  const BlockResidualProblem blocks = make_linear_block_problem(d.A, d.b);
  SubsampleOracle o(blocks, 0.5, {}, 2);
  EXPECT_EQ(o.batch_size(), 10u);
  // Same point twice: one shared subset gives f0 == f1.
  for (int i = 0; i < 10; ++i) {
    const EstimatePair e = o.estimates(Vector::Ones(2), Vector::Ones(2), 1.0);
    EXPECT_EQ(e.f0, e.f1);
  }
}

TEST(SampleOracle, BundlesBothRoles) {
  const ResidualProblem p = quadratic();
  ExactOracle o(p);
  const OracleOutput out = sample_oracle(o, point(1, 1), point(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(out.f0, 0.625);
  EXPECT_DOUBLE_EQ(out.f1, 0.0);
  EXPECT_TRUE(out.was_accurate_model && out.was_accurate_estimates);
}

}  // namespace
}  // namespace slm
