#pragma once

#include "selfcons/saddle.hpp"

#include <string>
#include <utility>
#include <vector>

namespace selfcons {

enum class Verdict { valid, marginal, invalid };
std::string to_string(Verdict v);

struct ValidityThresholds {
  double min_simple = 10.0;       // valid needs n (dg/sigma2)^2 >= this
  double max_correction = 0.1;    // ... and relative correction <= this
  double invalid_simple = 1.0;    // below: invalid
  double invalid_correction = 1.0;
};

struct SpValidityReport {
  double criterion_simple = 0.0;      // n median((dg/sigma2)^2)
  double criterion_simple_min = 0.0;  // n min((dg/sigma2)^2)
  /// Heuristic relative error of the discrepancy, 1 / (n (dg/sigma2)^2) sigma2 / |dg|.
  double heuristic_error = 0.0;
  Vec correction;                     // leading beyond-saddle shift of dg/sigma2
  double criterion_full = 0.0;        // rms(sigma2 correction) / rms(g)
  Verdict verdict = Verdict::invalid;
};

/// n median((dg/sigma2)^2).
double sp_criterion_simple(const Vec& discrepancies, double sigma2, Eigen::Index n);

/// Order-of-magnitude relative error of the discrepancy implied by the simple
/// criterion: delta_g_scale / (n (dg/sigma2)^2) in dual units, over |dg| / sigma2.
double sp_heuristic_error(double dg_over_sigma2, double n, double delta_g_scale = 1.0);

/// 1/2 K~^{-1} T with T_mu = sum_{nu eta} (d_nu d_eta Delta g_mu) (K~^{-1})_{nu eta},
/// K~ = sigma2 I + K + Delta K, all at the saddle point.
Vec sp_correction_leading(const SaddleModel& model, const SaddleSolution& solution);

SpValidityReport sp_validity(const SaddleModel& model, const SaddleSolution& solution,
                             const Vec& g, const ValidityThresholds& thresholds = {});

/// Least-squares slope of log mse against log C over the largest-C half
/// (at least two points). Needs >= 3 points with C strictly ascending.
double gp_convergence_slope(const std::vector<std::pair<double, double>>& mse_by_C);

}  // namespace selfcons
