#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace selfcons {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Inputs are stored row-major so that the non-overlapping convolution
/// windows of all samples form a contiguous (n*N) x S block.
using InputMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using VecX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using MatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// K + sigma^2 I could not be factorized even after jitter escalation.
class SpdFailure : public Error {
 public:
  SpdFailure(const std::string& what, double final_jitter)
      : Error(what), final_jitter_(final_jitter) {}
  double final_jitter() const { return final_jitter_; }

 private:
  double final_jitter_;
};

/// A matrix that must stay positive definite (log-det argument, resummation
/// bracket) left its domain. `margin` is the smallest eigenvalue observed.
class DomainError : public Error {
 public:
  DomainError(const std::string& what, double margin) : Error(what), margin_(margin) {}
  double margin() const { return margin_; }

 private:
  double margin_;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

}  // namespace selfcons
