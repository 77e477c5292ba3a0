#include "selfcons/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

namespace selfcons {

namespace {

void check_sc(int S, int C) {
  if (S < 1 || C < 1) throw ArgumentError("marchenko-pastur: S and C must be positive");
}

double ratio(int S, int C) { return static_cast<double>(S) / C; }

/// Continuous MP mass in [lower, x] via x = c - h cos(phi), which removes the
/// square-root endpoints and leaves a smooth integrand in phi.
double mp_continuous_mass(int S, int C, double x) {
  const auto e = mp_edges(S, C);
  if (x <= e.lower) return 0.0;
  const double y = ratio(S, C);
  const double c = 0.5 * (e.upper + e.lower), h = 0.5 * (e.upper - e.lower);
  const double cont = std::min(1.0, 1.0 / y);
  if (x >= e.upper) return cont;
  const double phi_x = std::acos(std::clamp((c - x) / h, -1.0, 1.0));
  const auto f = [&](double phi) {
    const double s = std::sin(phi);
    const double den = c - h * std::cos(phi);
    return den > 0.0 ? h * h * s * s / (2.0 * std::numbers::pi * y * den) : 0.0;
  };
  const int panels = 2048;  // even
  const double step = phi_x / panels;
  double acc = f(0.0) + f(phi_x);
  for (int k = 1; k < panels; ++k) acc += (k % 2 ? 4.0 : 2.0) * f(k * step);
  return std::min(cont, acc * step / 3.0);
}

}  // namespace

MpEdges mp_edges(int S, int C) {
  check_sc(S, C);
  const double r = std::sqrt(ratio(S, C));
  return {(1.0 - r) * (1.0 - r), (1.0 + r) * (1.0 + r)};
}

double mp_atom(int S, int C) {
  check_sc(S, C);
  return S > C ? 1.0 - static_cast<double>(C) / S : 0.0;
}

Vec mp_density(int S, int C, const Vec& grid) {
  const auto e = mp_edges(S, C);
  const double y = ratio(S, C);
  Vec out(grid.size());
  for (Eigen::Index k = 0; k < grid.size(); ++k) {
    const double x = grid(k);
    out(k) = (x > e.lower && x < e.upper && x > 0.0)
                 ? std::sqrt((e.upper - x) * (x - e.lower)) / (2.0 * std::numbers::pi * y * x)
                 : 0.0;
  }
  return out;
}

double mp_cdf(int S, int C, double x) {
  if (x < 0.0) return 0.0;
  return mp_atom(S, C) + mp_continuous_mass(S, C, x);
}

double mp_ks_distance(std::vector<double> eigenvalues, int S, int C) {
  if (eigenvalues.empty()) throw ArgumentError("mp_ks_distance: empty sample");
  std::sort(eigenvalues.begin(), eigenvalues.end());
  const double m = static_cast<double>(eigenvalues.size());
  double d = 0.0;
  for (std::size_t k = 0; k < eigenvalues.size(); ++k) {
    const double F = mp_cdf(S, C, eigenvalues[k]);
    d = std::max({d, std::abs((k + 1) / m - F), std::abs(F - k / m)});
  }
  return d;
}

double c_crit(int S, int N, double n, double sigma2) {
  if (S < 1 || N < 1 || !(n > 0.0) || !(sigma2 > 0.0))
    throw ArgumentError("c_crit: S, N, n and sigma2 must be positive");
  const double lam = 1.0 / (static_cast<double>(N) * S);
  const double t = lam + sigma2 / n;
  return 4.0 * lam * lam / (S * t * t * t * t) * (1.0 + 1.0 / (1.0 / lam + n / sigma2));
}

Mat predicted_sigma_w(int S, int N, double n, double sigma2, double C, const Vec& w_star) {
  require_shape(w_star.size() == S, "predicted_sigma_w: teacher length != S");
  const double norm = w_star.norm();
  if (!(norm > 0.0)) throw ArgumentError("predicted_sigma_w: zero teacher vector");
  const double lam = 1.0 / (static_cast<double>(N) * S);
  const double t = lam + sigma2 / n;
  const Vec u = w_star / norm;
  Mat out = (2.0 / C) * lam / (t * t) * (u * u.transpose());
  out.diagonal().array() += 1.0 + 1.0 / (1.0 / lam + n / sigma2);
  return out;
}

SpectralReport spectral_report(const std::vector<WeightSnapshot>& snapshots, const Vec& w_star,
                               int N, double n, double sigma2) {
  if (snapshots.empty()) throw ArgumentError("spectral_report: no snapshots");
  SpectralReport r;
  r.S = static_cast<int>(snapshots.front().W.rows());
  r.C = static_cast<int>(snapshots.front().W.cols());
  r.mp = mp_edges(r.S, r.C);
  r.c_crit = c_crit(r.S, N, n, sigma2);

  std::map<int, std::pair<double, long>> per_seed;  // ordered for a fixed reduction
  std::vector<double> qs;
  qs.reserve(snapshots.size());
  for (std::size_t k = 0; k < snapshots.size(); ++k) {
    const Mat& W = snapshots[k].W;
    require_shape(W.rows() == r.S && W.cols() == r.C, "spectral_report: snapshot shapes differ");
    const Mat sig = sigma_w(W);
    Eigen::SelfAdjointEigenSolver<Mat> es(sig, Eigen::EigenvaluesOnly);
    for (Eigen::Index j = 0; j < es.eigenvalues().size(); ++j) {
      r.eigenvalues.push_back(es.eigenvalues()(j));
      r.snapshot_ids.push_back(static_cast<int>(k));
    }
    const double q = q_statistic(sig, w_star);
    qs.push_back(q);
    auto& acc = per_seed[snapshots[k].seed];
    acc.first += q;
    ++acc.second;
  }
  double sum = 0.0;
  for (double q : qs) sum += q;
  r.Q = sum / qs.size();

  std::vector<double> group_means;
  if (per_seed.size() >= 2) {
    for (const auto& [seed, acc] : per_seed) group_means.push_back(acc.first / acc.second);
  } else if (qs.size() >= 4) {
    const std::size_t B = 4;
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t lo = b * qs.size() / B, hi = (b + 1) * qs.size() / B;
      double s = 0.0;
      for (std::size_t k = lo; k < hi; ++k) s += qs[k];
      group_means.push_back(s / (hi - lo));
    }
  }
  if (group_means.size() >= 2) {
    double m = 0.0, v = 0.0;
    for (double x : group_means) m += x;
    m /= group_means.size();
    for (double x : group_means) v += (x - m) * (x - m);
    v /= group_means.size() - 1;
    r.Q_stderr = std::sqrt(v / group_means.size());
  }
  r.in_bulk = r.Q <= r.mp.upper;
  return r;
}

Histogram freedman_diaconis_histogram(std::vector<double> values) {
  if (values.size() < 2) throw ArgumentError("histogram: need at least two values");
  std::sort(values.begin(), values.end());
  const auto quantile = [&](double p) {
    const double pos = p * (values.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (pos - lo) * (values[hi] - values[lo]);
  };
  const double lo = values.front(), hi = values.back();
  Histogram h;
  double width = 2.0 * (quantile(0.75) - quantile(0.25)) / std::cbrt(values.size());
  if (!(width > 0.0)) width = hi > lo ? (hi - lo) / 10.0 : 1.0;
  const std::size_t bins = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil((hi - lo) / width)));
  h.bin_width = width;
  for (std::size_t b = 0; b <= bins; ++b) h.edges.push_back(lo + b * width);
  h.counts.assign(bins, 0);
  for (double x : values) {
    auto b = static_cast<std::size_t>((x - lo) / width);
    ++h.counts[std::min(b, bins - 1)];
  }
  return h;
}

double bulk_mass_fraction(const std::vector<double>& values, const MpEdges& edges,
                          double margin) {
  if (values.empty()) return 0.0;
  long inside = 0;
  for (double x : values) inside += x >= edges.lower - margin && x <= edges.upper + margin;
  return static_cast<double>(inside) / values.size();
}

std::optional<double> q_crossing(const std::vector<double>& C, const std::vector<double>& Q,
                                 const std::vector<double>& lambda_plus) {
  require_shape(C.size() == Q.size() && C.size() == lambda_plus.size(),
                "q_crossing: length mismatch");
  std::vector<std::size_t> idx(C.size());
  for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = k;
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return C[a] > C[b]; });
  for (std::size_t k = 0; k + 1 < idx.size(); ++k) {
    const auto i = idx[k], j = idx[k + 1];
    if (!(Q[i] > 0.0 && Q[j] > 0.0 && C[i] > 0.0 && C[j] > 0.0)) continue;
    const double a = std::log(Q[i] / lambda_plus[i]), b = std::log(Q[j] / lambda_plus[j]);
    if (a == 0.0) return C[i];
    if ((a < 0.0) != (b < 0.0) || b == 0.0) {
      const double t = a / (a - b);
      return std::exp(std::log(C[i]) + t * (std::log(C[j]) - std::log(C[i])));
    }
  }
  return std::nullopt;
}

}  // namespace selfcons
