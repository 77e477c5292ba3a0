#include "selfcons/cumulants.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <numbers>

namespace selfcons {

namespace {

Mat window_moment(const Mat& Y) { return Y.transpose() * Y; }

}  // namespace

Vec cnn_kappa4_contract(const InputMatrix& X, const CnnArch& arch, const Vec& v,
                        const InputMatrix& X_eval) {
  arch.validate();
  const Mat Y = window_sources<double>(X, arch, v);
  const Mat B = window_moment(Y);
  const double lam = arch.lambda();
  return (lam * lam / arch.C) * contract_windows<double>(X_eval, Mat(Y * B));
}

Vec cnn_kappa6_contract(const InputMatrix& X, const CnnArch& arch, const Vec& v,
                        const InputMatrix& X_eval) {
  arch.validate();
  const Mat Y = window_sources<double>(X, arch, v);
  const Mat B = window_moment(Y);
  const double lam = arch.lambda();
  const double r = lam / arch.C;
  return (lam * r * r) * contract_windows<double>(X_eval, Mat(Y * (B * B)));
}

double cnn_resummation_radius(const InputMatrix& X, const CnnArch& arch, const Vec& v) {
  const Mat Y = window_sources<double>(X, arch, v);
  const Mat A = (arch.lambda() / arch.C) * window_moment(Y);
  Eigen::SelfAdjointEigenSolver<Mat> es(A, Eigen::EigenvaluesOnly);
  return es.eigenvalues().maxCoeff();
}

namespace {

void check_radius(const InputMatrix& X, const CnnArch& arch, const Vec& v) {
  const double rho = cnn_resummation_radius(X, arch, v);
  if (!(rho < 1.0)) {
    std::ostringstream os;
    os << "cnn Delta g diverges: resummation radius " << rho
       << " >= 1 (duals beyond the alpha_pole bound)";
    throw DomainError(os.str(), 1.0 - rho);
  }
}

}  // namespace

Vec cnn_delta_g(const InputMatrix& X, const CnnArch& arch, const Vec& v,
                const CnnDeltaGOptions& opts, const InputMatrix& X_eval) {
  arch.validate();
  if (opts.mode == DeltaGMode::resummed) {
    check_radius(X, arch, v);
    return cnn_delta_g_resummed_unchecked<double>(X, arch, v, X_eval);
  }
  if (opts.series_order != 4 && opts.series_order != 6)
    throw ArgumentError("cnn_delta_g: series order must be 4 or 6");
  const Mat Y = window_sources<double>(X, arch, v);
  const Mat B = window_moment(Y);
  const double lam = arch.lambda();
  const double r = lam / arch.C;
  Mat Z = r * (Y * B);
  if (opts.series_order == 6) Z += r * r * (Y * (B * B));
  return lam * contract_windows<double>(X_eval, Z);
}

double cnn_cgf(const InputMatrix& X, const CnnArch& arch, const Vec& v) {
  const Mat Y = window_sources<double>(X, arch, v);
  const Mat A = (arch.lambda() / arch.C) * window_moment(Y);
  Eigen::SelfAdjointEigenSolver<Mat> es(A, Eigen::EigenvaluesOnly);
  const Vec& ev = es.eigenvalues();
  if (!(ev.maxCoeff() < 1.0))
    throw DomainError("cnn_cgf: I - A is not positive definite", 1.0 - ev.maxCoeff());
  double s = 0.0;
  for (Eigen::Index k = 0; k < ev.size(); ++k) s += std::log1p(-ev(k));
  return -0.5 * arch.C * s;
}

TaylorMatch cnn_taylor_match(const InputMatrix& X, const CnnArch& arch, const Vec& v,
                             int points) {
  using Cplx = std::complex<double>;
  if (points < 8) throw ArgumentError("cnn_taylor_match: need at least 8 contour points");
  TaylorMatch out;
  const Vec k4 = cnn_kappa4_contract(X, arch, v);
  const Vec k6 = cnn_kappa6_contract(X, arch, v);
  const double rho = cnn_resummation_radius(X, arch, v);
  // rho scales as eps^2; stay at half the convergence radius
  out.radius = rho > 0.0 ? 0.5 / std::sqrt(rho) : 1.0;

  const Eigen::Index n = X.rows();
  Eigen::MatrixXcd coeff = Eigen::MatrixXcd::Zero(n, 6);
  const VecX<Cplx> vc = v.cast<Cplx>();
  for (int j = 0; j < points; ++j) {
    const double theta = 2.0 * std::numbers::pi * j / points;
    const Cplx eps = std::polar(out.radius, theta);
    const VecX<Cplx> f = cnn_delta_g_resummed_unchecked<Cplx>(X, arch, VecX<Cplx>(eps * vc), X);
    for (int k = 0; k < 6; ++k) coeff.col(k) += f * std::polar(1.0, -k * theta);
  }
  for (int k = 0; k < 6; ++k) coeff.col(k) /= points * std::pow(out.radius, k);

  const double s4 = k4.cwiseAbs().maxCoeff();
  const double s6 = k6.cwiseAbs().maxCoeff();
  const auto rel = [](double num, double den) { return den > 0.0 ? num / den : num; };
  out.err3 = rel((coeff.col(3) - k4.cast<Cplx>()).cwiseAbs().maxCoeff(), s4);
  out.err5 = rel((coeff.col(5) - k6.cast<Cplx>()).cwiseAbs().maxCoeff(), s6);
  double even = 0.0;
  for (int k : {0, 2, 4}) even = std::max(even, coeff.col(k).cwiseAbs().maxCoeff());
  out.err_even = rel(even, s4);
  return out;
}

QuadBracket::QuadBracket(const Vec& v, const InputMatrix& X, const QuadArch& arch) {
  arch.validate();
  require_shape(X.cols() == arch.d, "QuadBracket: input dimension != d");
  require_shape(v.size() == X.rows(), "QuadBracket: dual length != n");
  const double c = 2.0 * arch.sigma_w2 / arch.M;
  E_ = c * (X.transpose() * v.asDiagonal() * X);
  E_ = 0.5 * (E_ + E_.transpose()).eval();
  B_ = -E_;
  B_.diagonal().array() += 1.0;
  llt_.compute(B_);
  if (llt_.info() != Eigen::Success) {
    const double lmin = smallest_eigenvalue();
    std::ostringstream os;
    os << "quadratic bracket is not positive definite (smallest eigenvalue " << lmin << ")";
    throw DomainError(os.str(), lmin);
  }
  // LLT can succeed on a barely indefinite matrix through rounding
  const double min_pivot = Vec(llt_.matrixLLT().diagonal()).minCoeff();
  if (!(min_pivot > 0.0)) throw DomainError("quadratic bracket is singular", 0.0);
}

double QuadBracket::logdet() const {
  return 2.0 * llt_.matrixLLT().diagonal().array().log().sum();
}

double QuadBracket::smallest_eigenvalue() const {
  Eigen::SelfAdjointEigenSolver<Mat> es(B_, Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

double quad_cgf(const Vec& v, const InputMatrix& X, const QuadArch& arch) {
  const QuadBracket br(v, X, arch);
  const Vec sq = X.rowwise().squaredNorm();
  return -0.5 * arch.M * br.logdet() - arch.sigma_w2 * v.dot(sq);
}

Vec quad_delta_g(const Vec& v, const InputMatrix& X, const QuadArch& arch,
                 const InputMatrix& X_eval) {
  require_shape(X_eval.cols() == arch.d, "quad_delta_g: eval dimension != d");
  const QuadBracket br(v, X, arch);
  const Mat U = br.E() * X_eval.transpose();  // column e = E x_e
  const Mat BU = br.solve(U);
  return arch.sigma_w2 * U.cwiseProduct(BU).colwise().sum().transpose();
}

Mat quad_delta_K(const Vec& v, const InputMatrix& X, const QuadArch& arch) {
  const QuadBracket br(v, X, arch);
  const Mat Q = X * X.transpose();
  // P - Q = X B^{-1} E X^T, so P o P - Q o Q = (P - Q) o (P + Q)
  Mat R = X * br.solve(Mat(br.E() * X.transpose()));
  R = 0.5 * (R + R.transpose()).eval();
  const Mat P = Q + R;
  Mat dK = (2.0 * arch.sigma_w2 * arch.sigma_w2 / arch.M) * R.cwiseProduct(P + Q);
  return 0.5 * (dK + dK.transpose());
}

Vec quad_second_derivative_contraction(const Vec& v, const InputMatrix& X, const QuadArch& arch,
                                       const Mat& W) {
  require_shape(W.rows() == X.rows() && W.cols() == X.rows(),
                "quad_second_derivative_contraction: W must be n x n");
  const QuadBracket br(v, X, arch);
  Mat P = X * br.solve(Mat(X.transpose()));
  P = 0.5 * (P + P.transpose()).eval();
  const double s3 = arch.sigma_w2 * arch.sigma_w2 * arch.sigma_w2;
  const double pref = 8.0 * s3 / (static_cast<double>(arch.M) * arch.M);
  const Mat PWP = P * P.cwiseProduct(W) * P;
  return pref * PWP.diagonal();
}

Mat fd_jacobian_transposed(const VectorMap& f, const Vec& v, double h_rel) {
  const Eigen::Index n = v.size();
  Mat J;
  for (Eigen::Index mu = 0; mu < n; ++mu) {
    const double h = h_rel * (1.0 + std::abs(v(mu)));
    Vec vp = v, vm = v;
    vp(mu) += h;
    vm(mu) -= h;
    const Vec d = (f(vp) - f(vm)) / (2.0 * h);
    if (mu == 0) J.resize(n, d.size());
    J.row(mu) = d.transpose();
  }
  return J;
}

Vec fd_second_derivative_contraction(const VectorMap& f, const Vec& v, const Mat& W,
                                     double h_rel) {
  require_shape(W.rows() == v.size() && W.cols() == v.size(),
                "fd_second_derivative_contraction: W must be n x n");
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (W + W.transpose()));
  const Vec f0 = f(v);
  const double scale = 1.0 + (v.size() ? v.cwiseAbs().maxCoeff() : 0.0);
  const double h = h_rel * scale;
  if (!(h > 0.0) || !std::isfinite(h))
    throw Error("fd_second_derivative_contraction: step underflow");
  Vec out = Vec::Zero(f0.size());
  for (Eigen::Index k = 0; k < v.size(); ++k) {
    const double wk = es.eigenvalues()(k);
    if (wk == 0.0) continue;
    const Vec u = es.eigenvectors().col(k);
    const Vec d2 = (f(v + h * u) - 2.0 * f0 + f(v - h * u)) / (h * h);
    out += wk * d2;
  }
  return out;
}

Mat cnn_delta_K(const Vec& v, const InputMatrix& X, const CnnArch& arch,
                const CnnDeltaGOptions& opts, double h_rel) {
  const VectorMap f = [&](const Vec& u) { return cnn_delta_g(X, arch, u, opts); };
  return fd_jacobian_transposed(f, v, h_rel);
}

}  // namespace selfcons
