#include "selfcons/gp.hpp"

#include <Eigen/LU>

namespace selfcons {

GpFit::GpFit(std::shared_ptr<const RegularizedGram> gram, Vec g, std::optional<Vec> shift_train)
    : gram_(std::move(gram)), g_(std::move(g)) {
  if (!gram_) throw ArgumentError("GpFit: null gram");
  require_shape(g_.size() == gram_->size(), "GpFit: target length != gram size");
  if (shift_train) {
    require_shape(shift_train->size() == g_.size(), "GpFit: shift length != target length");
    shift_ = std::move(*shift_train);
    has_shift_ = true;
  } else {
    shift_ = Vec::Zero(g_.size());
  }
  weights_ = gram_->solve(Vec(g_ - shift_));
}

GpFit fit_gp(const Mat& K, double sigma2, const Vec& g, std::optional<Vec> shift_train) {
  auto gram = std::make_shared<const RegularizedGram>(RegularizedGram::factorize(K, sigma2));
  return GpFit(std::move(gram), g, std::move(shift_train));
}

Vec gp_mean_test(const GpFit& fit, const Mat& cross, const Vec& shift_test) {
  require_shape(cross.rows() == fit.gram().size(), "gp_mean_test: cross-gram rows != n");
  Vec mean = cross.transpose() * fit.weights();
  if (shift_test.size() != 0) {
    require_shape(shift_test.size() == cross.cols(), "gp_mean_test: test shift length");
    mean += shift_test;
  }
  return mean;
}

Discrepancies gp_discrepancies_train(const GpFit& fit) {
  const double s = fit.gram().sigma2() + fit.gram().jitter();
  return Discrepancies::from_values(s * fit.weights(), fit.gram().sigma2());
}

Discrepancies gp_discrepancies_train_explicit(const GpFit& fit) {
  const Vec mean = fit.shift() + fit.gram().K() * fit.weights();
  return Discrepancies::from_values(fit.targets() - mean, fit.gram().sigma2());
}

Mat posterior_cov_test_gp(const GpFit& fit, const Mat& cross, const Mat& K_star_star) {
  require_shape(cross.rows() == fit.gram().size(), "posterior_cov_test_gp: cross-gram rows != n");
  require_shape(K_star_star.rows() == cross.cols() && K_star_star.cols() == cross.cols(),
                "posterior_cov_test_gp: K** shape");
  Mat cov = K_star_star - cross.transpose() * fit.gram().solve(cross);
  return 0.5 * (cov + cov.transpose());
}

Mat posterior_cov_train_shifted(const Mat& K, const Mat& delta_K, double sigma2) {
  require_shape(K.rows() == K.cols() && delta_K.rows() == K.rows() && delta_K.cols() == K.cols(),
                "posterior_cov_train_shifted: shapes");
  Mat A = K + delta_K;
  A.diagonal().array() += sigma2;
  Eigen::FullPivLU<Mat> lu(A);
  if (!lu.isInvertible()) throw Error("posterior_cov_train_shifted: sigma2 I + K + dK is singular");
  Mat cov = -sigma2 * sigma2 * lu.inverse();
  cov.diagonal().array() += sigma2;
  return 0.5 * (cov + cov.transpose());
}

double empirical_alpha(const Vec& predictions, const Vec& targets) {
  require_shape(predictions.size() == targets.size(), "empirical_alpha: length mismatch");
  const double gg = targets.squaredNorm();
  if (!(gg > 0.0)) throw ArgumentError("empirical_alpha: zero target vector");
  return 1.0 - predictions.dot(targets) / gg;
}

}  // namespace selfcons
