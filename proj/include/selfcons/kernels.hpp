#pragma once

#include "selfcons/datagen.hpp"
#include "selfcons/types.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <optional>
#include <variant>

namespace selfcons {

/// NNGP kernel of one of the two models.
///   cnn_linear: K(x, x') = sigma_a2 sigma_w2 / (N S) x . x'
///   quad:       K(x, x') = 2 sigma_w2^2 / M (x . x')^2
struct KernelSpec {
  std::variant<CnnArch, QuadArch> arch;

  static KernelSpec cnn(const CnnArch& a) { return {a}; }
  static KernelSpec quad(const QuadArch& a) { return {a}; }

  bool is_cnn() const { return std::holds_alternative<CnnArch>(arch); }
  int input_dim() const;
  /// Prefactor multiplying (x . x')^p.
  double scale() const;
};

template <typename DerivedA, typename DerivedB>
double kernel_eval(const KernelSpec& spec, const Eigen::MatrixBase<DerivedA>& x,
                   const Eigen::MatrixBase<DerivedB>& y) {
  require_shape(x.size() == y.size() && x.size() == spec.input_dim(),
                "kernel_eval: dimension mismatch");
  const double dot = x.reshaped().dot(y.reshaped());
  return spec.is_cnn() ? spec.scale() * dot : spec.scale() * dot * dot;
}

Mat gram(const KernelSpec& spec, const InputMatrix& X);
/// n x n_test block K(x_mu, x*_j).
Mat cross_gram(const KernelSpec& spec, const InputMatrix& X, const InputMatrix& X_test);
/// Diagonal K(x*_j, x*_j) for a test set.
Vec kernel_diag(const KernelSpec& spec, const InputMatrix& X);

struct FactorizeOptions {
  /// Clamp eigenvalues at 0 and use an eigendecomposition when jitter escalation fails.
  bool allow_eigen_fallback = false;
};

/// Factorized K~ = K + sigma2 I (+ jitter I). Immutable after construction.
class RegularizedGram {
 public:
  static RegularizedGram factorize(const Mat& K, double sigma2, const FactorizeOptions& opts = {});

  Eigen::Index size() const { return K_.rows(); }
  const Mat& K() const { return K_; }
  double sigma2() const { return sigma2_; }
  /// Diagonal jitter actually added on top of sigma2 (0 when none was needed).
  double jitter() const { return jitter_; }
  bool eigen_fallback() const { return eig_.has_value(); }

  /// K~^{-1} b for a vector or matrix right-hand side.
  Mat solve(const Mat& b) const;
  Vec solve(const Vec& b) const;
  Mat inverse() const;
  /// K~ u with the jitter included, for residual checks.
  Vec apply(const Vec& u) const;

 private:
  RegularizedGram() = default;

  Mat K_;
  double sigma2_ = 0.0;
  double jitter_ = 0.0;
  Eigen::LLT<Mat> llt_;
  struct EigenFactor {
    Mat vectors;
    Vec inv_values;
  };
  std::optional<EigenFactor> eig_;
};

struct CnnEkParameters {
  double lambda;
};

/// The quadratic kernel under x_i ~ N(0, 1/d) has two distinct eigenvalues:
/// lambda0 (|x|^2 mode) > lambda2 (traceless quadratic modes).
struct QuadEkParameters {
  double lambda0;
  double lambda2;
};

CnnEkParameters ek_parameters(const CnnArch& arch);
QuadEkParameters ek_parameters(const QuadArch& arch);

}  // namespace selfcons
