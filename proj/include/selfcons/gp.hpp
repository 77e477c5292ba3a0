#pragma once

#include "selfcons/kernels.hpp"
#include "selfcons/types.hpp"

#include <memory>
#include <optional>

namespace selfcons {

/// Delta g on the training points and (optionally) on test points.
struct TargetShift {
  Vec train;
  Vec test;
};

/// delta g = g - <f> on the training set, and its dual delta g / sigma2.
struct Discrepancies {
  Vec values;
  Vec dual;

  static Discrepancies from_values(const Vec& values, double sigma2) {
    return {values, values / sigma2};
  }
};

/// GP regression on the target g - Delta g. weights = K~^{-1}(g - Delta g).
class GpFit {
 public:
  GpFit(std::shared_ptr<const RegularizedGram> gram, Vec g, std::optional<Vec> shift_train = {});

  const RegularizedGram& gram() const { return *gram_; }
  std::shared_ptr<const RegularizedGram> gram_ptr() const { return gram_; }
  const Vec& targets() const { return g_; }
  /// Zero vector when no shift was given.
  const Vec& shift() const { return shift_; }
  bool shifted() const { return has_shift_; }
  const Vec& weights() const { return weights_; }

 private:
  std::shared_ptr<const RegularizedGram> gram_;
  Vec g_;
  Vec shift_;
  bool has_shift_ = false;
  Vec weights_;
};

GpFit fit_gp(const Mat& K, double sigma2, const Vec& g, std::optional<Vec> shift_train = {});

/// <f*> = Delta g* + K*^T K~^{-1}(g - Delta g). `cross` is n x n_test.
Vec gp_mean_test(const GpFit& fit, const Mat& cross, const Vec& shift_test = Vec());

/// Uses delta g = (sigma2 + jitter) K~^{-1}(g - Delta g).
Discrepancies gp_discrepancies_train(const GpFit& fit);
/// Same quantity through the explicit K K~^{-1} product; kept as the reference path.
Discrepancies gp_discrepancies_train_explicit(const GpFit& fit);

/// Sigma** = K** - K*^T K~^{-1} K*.
Mat posterior_cov_test_gp(const GpFit& fit, const Mat& cross, const Mat& K_star_star);

/// Sigma = sigma2 I - sigma2^2 [sigma2 I + K + dK]^{-1}.
Mat posterior_cov_train_shifted(const Mat& K, const Mat& delta_K, double sigma2);

/// 1 - <f, g> / <g, g>.
double empirical_alpha(const Vec& predictions, const Vec& targets);

}  // namespace selfcons
