#include "selfcons/diagnostics.hpp"

#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <limits>

namespace selfcons {

std::string to_string(Verdict v) {
  switch (v) {
    case Verdict::valid: return "valid";
    case Verdict::marginal: return "marginal";
    case Verdict::invalid: return "invalid";
  }
  return "invalid";
}

namespace {

std::vector<double> scaled_squares(const Vec& dg, double sigma2) {
  std::vector<double> s(dg.size());
  for (Eigen::Index k = 0; k < dg.size(); ++k) {
    const double u = dg(k) / sigma2;
    s[k] = u * u;
  }
  return s;
}

double median(std::vector<double> x) {
  if (x.empty()) return 0.0;
  const std::size_t m = x.size() / 2;
  std::nth_element(x.begin(), x.begin() + m, x.end());
  if (x.size() % 2) return x[m];
  const double hi = x[m];
  std::nth_element(x.begin(), x.begin() + m - 1, x.end());
  return 0.5 * (hi + x[m - 1]);
}

double rms(const Vec& x) { return x.size() ? x.norm() / std::sqrt(double(x.size())) : 0.0; }

}  // namespace

double sp_criterion_simple(const Vec& discrepancies, double sigma2, Eigen::Index n) {
  if (!(sigma2 > 0.0)) throw ArgumentError("sp_criterion_simple: sigma2 must be positive");
  return static_cast<double>(n) * median(scaled_squares(discrepancies, sigma2));
}

double sp_heuristic_error(double dg_over_sigma2, double n, double delta_g_scale) {
  const double u = std::abs(dg_over_sigma2);
  if (!(u > 0.0) || !(n > 0.0)) return std::numeric_limits<double>::infinity();
  return delta_g_scale / (n * u * u) / u;
}

Vec sp_correction_leading(const SaddleModel& model, const SaddleSolution& solution) {
  const Eigen::Index n = model.n();
  require_shape(solution.dual.size() == n, "sp_correction_leading: solution does not match model");
  if (model.gaussian()) return Vec::Zero(n);
  const Vec& v = solution.dual;
  Mat Kt = model.K() + model.delta_K(v);
  Kt = 0.5 * (Kt + Kt.transpose()).eval();
  Kt.diagonal().array() += solution.sigma2;
  const Eigen::PartialPivLU<Mat> lu(Kt);
  const Mat Kinv = lu.inverse();
  const Vec T = model.second_derivative_contraction(v, Kinv);
  return 0.5 * lu.solve(T);
}

SpValidityReport sp_validity(const SaddleModel& model, const SaddleSolution& solution,
                             const Vec& g, const ValidityThresholds& th) {
  SpValidityReport r;
  const Vec& dg = solution.discrepancies.values;
  const Eigen::Index n = dg.size();
  const auto sq = scaled_squares(dg, solution.sigma2);
  r.criterion_simple = sp_criterion_simple(dg, solution.sigma2, n);
  r.criterion_simple_min = sq.empty() ? 0.0 : n * *std::min_element(sq.begin(), sq.end());
  r.heuristic_error = sp_heuristic_error(std::sqrt(median(sq)), static_cast<double>(n));
  r.correction = sp_correction_leading(model, solution);
  const double gs = rms(g);
  r.criterion_full = gs > 0.0 ? rms(solution.sigma2 * r.correction) / gs : 0.0;
  if (r.criterion_simple >= th.min_simple && r.criterion_full <= th.max_correction)
    r.verdict = Verdict::valid;
  else if (r.criterion_simple < th.invalid_simple || r.criterion_full > th.invalid_correction)
    r.verdict = Verdict::invalid;
  else
    r.verdict = Verdict::marginal;
  return r;
}

double gp_convergence_slope(const std::vector<std::pair<double, double>>& pts) {
  if (pts.size() < 3) throw ArgumentError("gp_convergence_slope: need at least three points");
  for (std::size_t k = 0; k < pts.size(); ++k) {
    if (!(pts[k].first > 0.0)) throw ArgumentError("gp_convergence_slope: C must be positive");
    if (!(pts[k].second > 0.0))
      throw ArgumentError("gp_convergence_slope: mse must be positive for a log-log fit");
    if (k && !(pts[k].first > pts[k - 1].first))
      throw ArgumentError("gp_convergence_slope: C must be strictly ascending");
  }
  const std::size_t m = std::max<std::size_t>(2, (pts.size() + 1) / 2);
  const std::size_t start = pts.size() - m;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t k = start; k < pts.size(); ++k) {
    const double x = std::log(pts[k].first), y = std::log(pts[k].second);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double mm = static_cast<double>(m);
  return (mm * sxy - sx * sy) / (mm * sxx - sx * sx);
}

}  // namespace selfcons
