#pragma once

#include "selfcons/types.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>

namespace selfcons {

/// Two-layer linear CNN with N non-overlapping windows of length S and C channels.
/// Prior: a ~ N(0, sigma_a2 / (C N)), w_c ~ N(0, sigma_w2 / S I_S).
struct CnnArch {
  int N = 1;
  int S = 1;
  int C = 1;
  double sigma_a2 = 1.0;
  double sigma_w2 = 1.0;

  int d() const { return N * S; }
  /// Eigenvalue of the linear kernel on isotropic inputs: sigma_a2 sigma_w2 / (N S).
  double lambda() const { return sigma_a2 * sigma_w2 / (static_cast<double>(N) * S); }
  void validate() const;
};

struct CnnParams {
  Mat a;  // N x C readout
  Mat w;  // S x C filters, one column per channel
};

/// f(x) = sum_m (w_m . x)^2 - sigma_w2 |x|^2 with w_{m,i} ~ N(0, sigma_w2 / M).
struct QuadArch {
  int d = 1;
  int M = 1;
  double sigma_w2 = 1.0;

  void validate() const;
};

enum class MeasureKind { gaussian_unit, gaussian_1_over_d, hypersphere };

struct Measure {
  MeasureKind kind = MeasureKind::gaussian_unit;
  double radius = 1.0;  // hypersphere only

  static Measure gaussian_unit() { return {MeasureKind::gaussian_unit, 1.0}; }
  static Measure gaussian_1_over_d() { return {MeasureKind::gaussian_1_over_d, 1.0}; }
  static Measure hypersphere(double r = 1.0) { return {MeasureKind::hypersphere, r}; }

  /// Accepts "gaussian_unit", "gaussian_1_over_d", "hypersphere" or "hypersphere(r)".
  static Measure parse(const std::string& tag);
  std::string name() const;
};

struct Dataset {
  InputMatrix X;
  Vec g;
  Measure measure;
  std::uint64_t seed = 0;
  nlohmann::json teacher = nlohmann::json::object();

  Eigen::Index n() const { return X.rows(); }
  Eigen::Index d() const { return X.cols(); }
};

/// n x d inputs drawn i.i.d. from `measure`; bitwise deterministic in (n, d, measure, seed).
InputMatrix sample_inputs(Eigen::Index n, Eigen::Index d, const Measure& measure,
                          std::uint64_t seed);

/// All window vectors of all samples as an (n N) x S row-major view.
inline Eigen::Map<const InputMatrix> window_view(const InputMatrix& X, int S) {
  return {X.data(), X.rows() * (X.cols() / S), S};
}

/// Teacher with C* = 1 drawn from the layer priors. With `normalize`,
/// |w*|^2 = 1 and sum_i (a*_i)^2 = 1.
CnnParams make_cnn_teacher(const CnnArch& arch, std::uint64_t seed, bool normalize = true);

CnnParams sample_cnn_prior(const CnnArch& arch, std::uint64_t seed);

Vec eval_cnn(const CnnArch& arch, const CnnParams& params, const InputMatrix& X);

/// Teacher vector for the quadratic model, i.i.d. N(0, 1) entries.
Vec make_quadratic_teacher(int d, std::uint64_t seed);

/// weights: M x d, one hidden unit per row.
Vec eval_quadratic(const Mat& weights, double sigma_w2, const InputMatrix& X);

/// g(x) = (w* . x)^2 - sigma_w2 |x|^2.
Vec quadratic_teacher_targets(const Vec& w_star, double sigma_w2, const InputMatrix& X);

}  // namespace selfcons
