#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "slm/rng.hpp"
#include "slm/types.hpp"

namespace slm {

/// Nonlinear least-squares objective f(x) = 1/2 ||r(x)||^2 given by its residual and Jacobian.
///
/// The problem handed to the solver is always the ground truth; oracles decide what the
/// algorithm actually gets to see.
struct ResidualProblem {
  Index dim = 0;
  std::function<Vector(const Vector&)> residual;
  std::function<Matrix(const Vector&)> jacobian;

  double value(const Vector& x) const { return 0.5 * residual(x).squaredNorm(); }

  Vector gradient(const Vector& x) const { return jacobian(x).transpose() * residual(x); }
};

/// A problem together with its starting point.
struct ProblemInstance {
  ResidualProblem problem;
  Vector x0;
};

/// r(x) = A x - b.
inline ResidualProblem make_linear_problem(Matrix A, Vector b) {
  require_same_size(A.rows(), b.size(), "make_linear_problem: b");
  ResidualProblem p;
  p.dim = A.cols();
  p.residual = [A, b](const Vector& x) -> Vector {
    require_same_size(A.cols(), x.size(), "linear residual");
    return A * x - b;
  };
  p.jacobian = [A](const Vector&) -> Matrix { return A; };
  return p;
}

/// r(x) = D (x - x*) with D = diag(d): a strongly convex quadratic with grad f Lipschitz
/// constant max d_i^2 and ||J|| = max |d_i|.
inline ResidualProblem make_diagonal_quadratic(const Vector& d, const Vector& x_star) {
  require_same_size(d.size(), x_star.size(), "make_diagonal_quadratic: x_star");
  return make_linear_problem(d.asDiagonal().toDenseMatrix(), d.cwiseProduct(x_star));
}

/// r(x) = (10 (x2 - x1^2), 1 - x1), minimum 0 at (1, 1).
inline ResidualProblem make_rosenbrock() {
  ResidualProblem p;
  p.dim = 2;
  p.residual = [](const Vector& x) -> Vector {
    require_same_size(2, x.size(), "rosenbrock residual");
    Vector r(2);
    r << 10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0];
    return r;
  };
  p.jacobian = [](const Vector& x) -> Matrix {
    Matrix J(2, 2);
    J << -20.0 * x[0], 10.0, -1.0, 0.0;
    return J;
  };
  return p;
}

/// Residual stacked from B independent blocks r_b(x); f = 1/2 sum_b ||r_b(x)||^2.
struct BlockResidualProblem {
  Index dim = 0;
  std::size_t blocks = 0;
  std::function<Vector(const Vector&, std::size_t)> block_residual;
  std::function<Matrix(const Vector&, std::size_t)> block_jacobian;

  ResidualProblem stacked() const {
    ResidualProblem p;
    p.dim = dim;
    auto self = *this;
    p.residual = [self](const Vector& x) -> Vector {
      std::vector<Vector> parts;
      Index total = 0;
      for (std::size_t b = 0; b < self.blocks; ++b) {
        parts.push_back(self.block_residual(x, b));
        total += parts.back().size();
      }
      Vector r(total);
      Index row = 0;
      for (const auto& part : parts) {
        r.segment(row, part.size()) = part;
        row += part.size();
      }
      return r;
    };
    p.jacobian = [self](const Vector& x) -> Matrix {
      std::vector<Matrix> parts;
      Index total = 0;
      for (std::size_t b = 0; b < self.blocks; ++b) {
        parts.push_back(self.block_jacobian(x, b));
        total += parts.back().rows();
      }
      Matrix J(total, self.dim);
      Index row = 0;
      for (const auto& part : parts) {
        J.middleRows(row, part.rows()) = part;
        row += part.rows();
      }
      return J;
    };
    return p;
  }
};

/// Gaussian A (rows x cols) and b from a seed; full column rank with probability one.
struct LinearData {
  Matrix A;
  Vector b;
};

inline LinearData random_linear_data(Index rows, Index cols, std::uint64_t seed) {
  require(rows >= cols && cols > 0, ErrorKind::InvalidArgument, "random_linear_data: need rows >= cols > 0");
  Rng rng = make_stream(seed, 0x11a7);
  LinearData d;
  d.A = normal_matrix(rng, rows, cols);
  d.b = normal_vector(rng, rows);
  return d;
}

/// One block per row of A.
inline BlockResidualProblem make_linear_block_problem(Matrix A, Vector b) {
  require_same_size(A.rows(), b.size(), "make_linear_block_problem: b");
  BlockResidualProblem p;
  p.dim = A.cols();
  p.blocks = static_cast<std::size_t>(A.rows());
  p.block_residual = [A, b](const Vector& x, std::size_t i) -> Vector {
    Vector r(1);
    r[0] = A.row(static_cast<Index>(i)).dot(x) - b[static_cast<Index>(i)];
    return r;
  };
  p.block_jacobian = [A](const Vector&, std::size_t i) -> Matrix { return A.row(static_cast<Index>(i)); };
  return p;
}

}  // namespace slm
