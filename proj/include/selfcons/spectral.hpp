#pragma once

#include "selfcons/langevin.hpp"
#include "selfcons/types.hpp"

#include <Eigen/Eigenvalues>

#include <optional>
#include <vector>

namespace selfcons {

/// Sigma_W = (S / C) W W^T for W of shape S x C.
template <typename Derived>
MatX<typename Derived::Scalar> sigma_w(const Eigen::MatrixBase<Derived>& W) {
  using Scalar = typename Derived::Scalar;
  if (W.cols() == 0) throw ArgumentError("sigma_w: W has no columns");
  const Scalar scale = Scalar(W.rows()) / Scalar(W.cols());
  MatX<Scalar> out = MatX<Scalar>::Zero(W.rows(), W.rows());
  out.template selfadjointView<Eigen::Lower>().rankUpdate(W.derived(), scale);
  out.template triangularView<Eigen::StrictlyUpper>() = out.transpose();
  return out;
}

struct MpEdges {
  double lower = 0.0;
  double upper = 0.0;
};

/// (1 -+ sqrt(S / C))^2.
MpEdges mp_edges(int S, int C);

/// Continuous part of the Marchenko-Pastur law for ratio S / C and unit variance.
/// For S > C there is in addition an atom of mass 1 - C / S at zero, see mp_atom().
Vec mp_density(int S, int C, const Vec& grid);
double mp_atom(int S, int C);
/// Cumulative distribution, atom included.
double mp_cdf(int S, int C, double x);

/// Kolmogorov-Smirnov distance between a sample of eigenvalues and the MP law.
double mp_ks_distance(std::vector<double> eigenvalues, int S, int C);

/// w*^T Sigma w* with w* rescaled to unit norm.
template <typename Derived, typename DerivedW>
typename Derived::Scalar q_statistic(const Eigen::MatrixBase<Derived>& sigma,
                                     const Eigen::MatrixBase<DerivedW>& w_star) {
  require_shape(sigma.rows() == sigma.cols() && sigma.rows() == w_star.size(),
                "q_statistic: dimension mismatch");
  const auto norm = w_star.norm();
  if (!(norm > 0)) throw ArgumentError("q_statistic: zero teacher vector");
  const auto u = (w_star / norm).eval();
  return u.dot(sigma * u);
}

/// 4 lambda^2 / (S (lambda + sigma2/n)^4) (1 + (1/lambda + n/sigma2)^{-1}), lambda = 1/(N S).
/// For N = S this is the square-kernel expression; N != S is an extension.
double c_crit(int S, int N, double n, double sigma2);

/// (1 + (1/lambda + n/sigma2)^{-1}) I + (2/C) lambda / (lambda + sigma2/n)^2 w* w*^T.
Mat predicted_sigma_w(int S, int N, double n, double sigma2, double C, const Vec& w_star);

struct SpectralReport {
  std::vector<double> eigenvalues;  // pooled over snapshots
  std::vector<int> snapshot_ids;    // owner of each eigenvalue
  MpEdges mp;
  double Q = 0.0;
  double Q_stderr = 0.0;
  double c_crit = 0.0;
  bool in_bulk = true;  // Q <= lambda_plus
  int S = 0;
  int C = 0;
};

/// Pools eigenvalues of Sigma_W over all snapshots; Q is the snapshot average and
/// its error bar comes from the spread of per-seed means (or 4 blocks for one seed).
SpectralReport spectral_report(const std::vector<WeightSnapshot>& snapshots, const Vec& w_star,
                               int N, double n, double sigma2);

struct Histogram {
  std::vector<double> edges;  // size bins + 1
  std::vector<long> counts;
  double bin_width = 0.0;
};

/// Bin width 2 IQR / cbrt(count).
Histogram freedman_diaconis_histogram(std::vector<double> values);

/// Fraction of values inside [lower - margin, upper + margin].
double bulk_mass_fraction(const std::vector<double>& values, const MpEdges& edges,
                          double margin);

/// C where log(Q / lambda_plus) changes sign, interpolated linearly in log C.
/// Scans from large C downwards and returns the first crossing found.
std::optional<double> q_crossing(const std::vector<double>& C, const std::vector<double>& Q,
                                 const std::vector<double>& lambda_plus);

}  // namespace selfcons
