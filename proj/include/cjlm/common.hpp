#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace cjlm {

// Parameters are stored row-major so tensors serialize in the order they are
// laid out in memory.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

using WordId = std::int32_t;

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Bad input text: alignment lines, head lines, n-best lines, corpus files.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t column)
      : Error(what + " (column " + std::to_string(column) + ")"), column_(column) {}
  explicit ParseError(const std::string& what) : Error(what), column_(0) {}
  std::size_t column() const { return column_; }

 private:
  std::size_t column_;
};

// Inconsistent architecture / shape settings.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what) {}
};

// A caller-supplied input cannot satisfy what the model requires (missing
// alignment, missing heads file, ...). The CLI reports these as usage errors.
class PreconditionError : public Error {
 public:
  explicit PreconditionError(const std::string& what) : Error(what) {}
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

template <typename Derived>
auto sigmoid(const Eigen::MatrixBase<Derived>& x) {
  return x.unaryExpr([](double v) { return sigmoid(v); });
}

// Rounds every entry to the nearest float32 value. Parameters live in double
// for arithmetic but are kept representable in the on-disk precision.
template <typename Derived>
void round_to_storage(Eigen::DenseBase<Derived>& x) {
  x = x.unaryExpr([](double v) { return static_cast<double>(static_cast<float>(v)); });
}

// Fully connected layer y = w x + b.
struct Affine {
  Matrix w;
  Vector b;

  Affine() = default;
  Affine(std::size_t out, std::size_t in) : w(Matrix::Zero(out, in)), b(Vector::Zero(out)) {}
};

}  // namespace cjlm
