#pragma once

#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace slm {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

enum class ErrorKind {
  InvalidArgument,
  DimensionMismatch,
  NonFiniteModel,
  DegenerateSubproblem,
  Numerical,
  SingularMatrix,
  MissingGroundTruth,
  EmptyBatch,
  Io,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "invalid argument";
    case ErrorKind::DimensionMismatch: return "dimension mismatch";
    case ErrorKind::NonFiniteModel: return "non-finite model";
    case ErrorKind::DegenerateSubproblem: return "degenerate subproblem";
    case ErrorKind::Numerical: return "numerical error";
    case ErrorKind::SingularMatrix: return "singular matrix";
    case ErrorKind::MissingGroundTruth: return "missing ground truth";
    case ErrorKind::EmptyBatch: return "empty batch";
    case ErrorKind::Io: return "i/o error";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.allFinite();
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) throw Error(kind, message);
}

inline void require_same_size(Index a, Index b, const char* what) {
  if (a != b)
    throw Error(ErrorKind::DimensionMismatch,
                std::string(what) + ": expected size " + std::to_string(a) + ", got " + std::to_string(b));
}

}  // namespace slm
