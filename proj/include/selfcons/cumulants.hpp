#pragma once

#include "selfcons/datagen.hpp"
#include "selfcons/types.hpp"

#include <Eigen/LU>

#include <complex>
#include <functional>
#include <sstream>

namespace selfcons {

// Linear CNN.
//
// With dual variables v (v = delta g / sigma2) define per window the source
//   y_i = sum_mu v_mu xtilde_i^mu          (an S-vector; Y stacks them as N x S)
//   B   = sum_i y_i y_i^T = Y^T Y,  A = (lambda / C) B.
// The cumulant generating function is C(v) = -(C/2) log det(I - A), whose
// gradient is K v + Delta g with
//   Delta g_nu = lambda sum_i xtilde_i^nu . (I - A)^{-1} A y_i
//              = sum_{k>=1} lambda (lambda/C)^k sum_i xtilde_i^nu . B^k y_i.
// The k-th term is the order-(2k+2) cumulant contracted with 2k+1 copies of v
// and 1/(2k+1)!.

/// N x S matrix Y with rows y_i = sum_mu v_mu xtilde_i^mu.
template <typename Scalar>
MatX<Scalar> window_sources(const InputMatrix& X, const CnnArch& arch, const VecX<Scalar>& v) {
  require_shape(X.cols() == arch.d(), "window_sources: input dimension != N*S");
  require_shape(v.size() == X.rows(), "window_sources: dual length != n");
  const VecX<Scalar> flat = X.transpose().template cast<Scalar>() * v;
  using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  return Eigen::Map<const RowMat>(flat.data(), arch.N, arch.S);
}

/// out_nu = sum_i xtilde_i^nu . z_i for an N x S matrix Z with rows z_i.
template <typename Scalar>
VecX<Scalar> contract_windows(const InputMatrix& X_eval, const MatX<Scalar>& Z) {
  require_shape(X_eval.cols() == Z.size(), "contract_windows: dimension mismatch");
  using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const RowMat Zr = Z;
  const Eigen::Map<const VecX<Scalar>> flat(Zr.data(), Zr.size());
  return X_eval.template cast<Scalar>() * flat;
}

/// (1/3!) sum kappa4(nu, mu1, mu2, mu3) v_mu1 v_mu2 v_mu3 with nu ranging over X_eval.
Vec cnn_kappa4_contract(const InputMatrix& X, const CnnArch& arch, const Vec& v,
                        const InputMatrix& X_eval);
inline Vec cnn_kappa4_contract(const InputMatrix& X, const CnnArch& arch, const Vec& v) {
  return cnn_kappa4_contract(X, arch, v, X);
}

/// (1/5!) sum kappa6(nu, mu1..mu5) v_mu1 ... v_mu5.
Vec cnn_kappa6_contract(const InputMatrix& X, const CnnArch& arch, const Vec& v,
                        const InputMatrix& X_eval);
inline Vec cnn_kappa6_contract(const InputMatrix& X, const CnnArch& arch, const Vec& v) {
  return cnn_kappa6_contract(X, arch, v, X);
}

/// Largest eigenvalue of A = (lambda/C) Y^T Y. The resummed shift exists iff < 1.
double cnn_resummation_radius(const InputMatrix& X, const CnnArch& arch, const Vec& v);

/// Closed-form shift. Real and complex Scalar share this code so the Taylor
/// coefficients can be read off on a complex contour. No domain check here.
template <typename Scalar>
VecX<Scalar> cnn_delta_g_resummed_unchecked(const InputMatrix& X, const CnnArch& arch,
                                            const VecX<Scalar>& v, const InputMatrix& X_eval) {
  const MatX<Scalar> Y = window_sources<Scalar>(X, arch, v);
  const Scalar ratio = Scalar(arch.lambda() / arch.C);
  const MatX<Scalar> A = ratio * (Y.transpose() * Y);
  MatX<Scalar> I_minus_A = -A;
  I_minus_A.diagonal().array() += Scalar(1);
  const MatX<Scalar> GA = I_minus_A.partialPivLu().solve(A);  // (I - A)^{-1} A = G - I
  const MatX<Scalar> Z = Y * GA;
  return Scalar(arch.lambda()) * contract_windows<Scalar>(X_eval, Z);
}

enum class DeltaGMode { series, resummed };

struct CnnDeltaGOptions {
  DeltaGMode mode = DeltaGMode::resummed;
  /// 4 keeps only the kappa4 term, 6 adds kappa6.
  int series_order = 6;
};

/// Delta g on X_eval (train or test points). Resummed mode throws DomainError
/// when the resummation radius reaches 1.
Vec cnn_delta_g(const InputMatrix& X, const CnnArch& arch, const Vec& v,
                const CnnDeltaGOptions& opts, const InputMatrix& X_eval);
inline Vec cnn_delta_g(const InputMatrix& X, const CnnArch& arch, const Vec& v,
                       const CnnDeltaGOptions& opts = {}) {
  return cnn_delta_g(X, arch, v, opts, X);
}

/// -(C/2) log det(I - A). Throws DomainError outside the resummation radius.
double cnn_cgf(const InputMatrix& X, const CnnArch& arch, const Vec& v);

struct TaylorMatch {
  double err3 = 0.0;     // |c3 - kappa4 term|_inf / |kappa4 term|_inf
  double err5 = 0.0;     // same for the v^5 coefficient against the kappa6 term
  double err_even = 0.0; // largest even coefficient relative to the kappa4 term
  double radius = 0.0;   // contour radius in units of v

  bool passed(double tol = 1e-8) const { return err3 <= tol && err5 <= tol; }
};

/// Reads the v^3 and v^5 Taylor coefficients of eps -> Delta g(eps v) off a
/// complex circle inside the resummation radius and compares with the series terms.
TaylorMatch cnn_taylor_match(const InputMatrix& X, const CnnArch& arch, const Vec& v,
                             int points = 64);

// Quadratic FCN.
//
// Bracket B = I - (2 sigma_w2 / M) sum_mu v_mu x_mu x_mu^T, and
//   C(v) = -(M/2) log det B - sigma_w2 sum_mu v_mu |x_mu|^2,
//   Delta g_nu = -(K v)_nu + sigma_w2 x_nu^T B^{-1} x_nu - sigma_w2 |x_nu|^2.

class QuadBracket {
 public:
  /// Throws DomainError (margin = smallest eigenvalue) unless B is positive definite.
  QuadBracket(const Vec& v, const InputMatrix& X, const QuadArch& arch);

  const Mat& B() const { return B_; }
  /// I - B = c X^T diag(v) X.
  const Mat& E() const { return E_; }
  Vec solve(const Vec& b) const { return llt_.solve(b); }
  Mat solve(const Mat& b) const { return llt_.solve(b); }
  double logdet() const;
  double smallest_eigenvalue() const;

 private:
  Mat B_;
  Mat E_;
  Eigen::LLT<Mat> llt_;
};

double quad_cgf(const Vec& v, const InputMatrix& X, const QuadArch& arch);

/// Delta g on X_eval. Evaluated as sigma_w2 (E x)^T B^{-1} (E x), which equals the
/// formula above without the first-order cancellation.
Vec quad_delta_g(const Vec& v, const InputMatrix& X, const QuadArch& arch,
                 const InputMatrix& X_eval);
inline Vec quad_delta_g(const Vec& v, const InputMatrix& X, const QuadArch& arch) {
  return quad_delta_g(v, X, arch, X);
}

/// dK_{mu nu} = d Delta g_nu / d v_mu = (2 sigma_w2^2 / M) (x_mu^T B^{-1} x_nu)^2 - K_{mu nu}.
Mat quad_delta_K(const Vec& v, const InputMatrix& X, const QuadArch& arch);

/// T_mu = sum_{nu eta} (d_nu d_eta Delta g_mu) W_{nu eta} for symmetric W,
/// with d_eta d_nu Delta g_mu = (8 sigma_w2^3 / M^2) P_{mu nu} P_{mu eta} P_{eta nu}, P = X B^{-1} X^T.
Vec quad_second_derivative_contraction(const Vec& v, const InputMatrix& X, const QuadArch& arch,
                                       const Mat& W);

// Finite-difference helpers shared by both models.

using VectorMap = std::function<Vec(const Vec&)>;

/// Central-difference Jacobian J_{mu nu} = d f_nu / d v_mu with step h_rel (1 + |v_mu|).
Mat fd_jacobian_transposed(const VectorMap& f, const Vec& v, double h_rel = 1e-5);

/// sum_{nu eta} (d_nu d_eta f_mu) W_{nu eta} via second directional differences
/// along the eigenvectors of W.
Vec fd_second_derivative_contraction(const VectorMap& f, const Vec& v, const Mat& W,
                                     double h_rel = 1e-3);

/// CNN dK by central differences of cnn_delta_g.
Mat cnn_delta_K(const Vec& v, const InputMatrix& X, const CnnArch& arch,
                const CnnDeltaGOptions& opts = {}, double h_rel = 1e-5);

}  // namespace selfcons
