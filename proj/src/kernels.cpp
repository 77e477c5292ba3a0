#include "selfcons/kernels.hpp"

#include <sstream>

namespace selfcons {

int KernelSpec::input_dim() const {
  return std::visit(
      [](const auto& a) {
        if constexpr (std::is_same_v<std::decay_t<decltype(a)>, CnnArch>)
          return a.d();
        else
          return a.d;
      },
      arch);
}

double KernelSpec::scale() const {
  if (const auto* c = std::get_if<CnnArch>(&arch)) return c->lambda();
  const auto& q = std::get<QuadArch>(arch);
  return 2.0 * q.sigma_w2 * q.sigma_w2 / q.M;
}

Mat cross_gram(const KernelSpec& spec, const InputMatrix& X, const InputMatrix& X_test) {
  require_shape(X.cols() == spec.input_dim() && X_test.cols() == spec.input_dim(),
                "cross_gram: dimension mismatch");
  Mat dots = X * X_test.transpose();
  if (spec.is_cnn()) return spec.scale() * dots;
  return spec.scale() * dots.array().square().matrix();
}

Mat gram(const KernelSpec& spec, const InputMatrix& X) {
  Mat K = cross_gram(spec, X, X);
  // exact symmetry regardless of the product kernel's summation order
  K = 0.5 * (K + K.transpose()).eval();
  return K;
}

Vec kernel_diag(const KernelSpec& spec, const InputMatrix& X) {
  require_shape(X.cols() == spec.input_dim(), "kernel_diag: dimension mismatch");
  Vec sq = X.rowwise().squaredNorm();
  if (spec.is_cnn()) return spec.scale() * sq;
  return spec.scale() * sq.array().square().matrix();
}

RegularizedGram RegularizedGram::factorize(const Mat& K, double sigma2,
                                           const FactorizeOptions& opts) {
  require_shape(K.rows() == K.cols(), "factorize: K must be square");
  if (!(sigma2 > 0.0)) throw ArgumentError("factorize: sigma2 must be positive");

  RegularizedGram out;
  out.K_ = K;
  out.sigma2_ = sigma2;
  const Eigen::Index n = K.rows();
  if (n == 0) return out;

  const double mean_diag = K.trace() / static_cast<double>(n);
  const double unit = mean_diag > 0.0 ? mean_diag : 1.0;

  Mat Kt = K;
  Kt.diagonal().array() += sigma2;
  out.llt_.compute(Kt);
  if (out.llt_.info() == Eigen::Success) return out;

  // Escalating jitter 1e-12 .. 1e-6 of the mean diagonal.
  double jitter = 1e-12 * unit;
  for (; jitter <= 1e-6 * unit * (1.0 + 1e-9); jitter *= 10.0) {
    Mat Kj = Kt;
    Kj.diagonal().array() += jitter;
    out.llt_.compute(Kj);
    if (out.llt_.info() == Eigen::Success) {
      out.jitter_ = jitter;
      return out;
    }
  }
  const double final_jitter = jitter / 10.0;

  if (opts.allow_eigen_fallback) {
    Eigen::SelfAdjointEigenSolver<Mat> es(Kt);
    Vec vals = es.eigenvalues().cwiseMax(0.0).array() + final_jitter;
    out.eig_ = EigenFactor{es.eigenvectors(), vals.cwiseInverse()};
    out.jitter_ = final_jitter;
    return out;
  }
  std::ostringstream os;
  os << "K + sigma2 I is not positive definite after jitter escalation (final jitter "
     << final_jitter << ")";
  throw SpdFailure(os.str(), final_jitter);
}

Mat RegularizedGram::solve(const Mat& b) const {
  require_shape(b.rows() == size(), "RegularizedGram::solve: size mismatch");
  if (size() == 0) return b;
  if (eig_) return eig_->vectors * (eig_->inv_values.asDiagonal() * (eig_->vectors.transpose() * b));
  return llt_.solve(b);
}

Vec RegularizedGram::solve(const Vec& b) const {
  require_shape(b.size() == size(), "RegularizedGram::solve: size mismatch");
  if (size() == 0) return b;
  if (eig_) return eig_->vectors * (eig_->inv_values.asDiagonal() * (eig_->vectors.transpose() * b));
  return llt_.solve(b);
}

Mat RegularizedGram::inverse() const {
  return solve(Mat(Mat::Identity(size(), size())));
}

Vec RegularizedGram::apply(const Vec& u) const {
  return K_ * u + (sigma2_ + jitter_) * u;
}

CnnEkParameters ek_parameters(const CnnArch& arch) { return {arch.lambda()}; }

QuadEkParameters ek_parameters(const QuadArch& arch) {
  const double pref = 2.0 * arch.sigma_w2 * arch.sigma_w2 / arch.M;
  const double d = arch.d;
  return {pref * (2.0 / (d * d) + 1.0 / d), pref * 2.0 / (d * d)};
}

}  // namespace selfcons
