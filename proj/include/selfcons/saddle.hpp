#pragma once

#include "selfcons/cumulants.hpp"
#include "selfcons/gp.hpp"
#include "selfcons/kernels.hpp"

#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace selfcons {

/// A finite network seen through its cumulant generating function C(v) on a
/// fixed training set. C(v) = 1/2 v^T K v + higher cumulants, and
/// grad C(v) = K v + Delta g(v).
class SaddleModel {
 public:
  virtual ~SaddleModel() = default;

  virtual std::string name() const = 0;
  const InputMatrix& X() const { return X_; }
  Eigen::Index n() const { return X_.rows(); }
  const Mat& K() const { return K_; }

  virtual Mat cross_gram(const InputMatrix& X_test) const = 0;
  /// Throws DomainError outside the domain of the generating function.
  virtual Vec delta_g(const Vec& v) const { return delta_g_at(v, X_); }
  virtual Vec delta_g_at(const Vec& v, const InputMatrix& X_eval) const = 0;
  virtual double cgf(const Vec& v) const = 0;
  virtual Mat delta_K(const Vec& v) const = 0;
  /// q -> dK(v) q. The default uses central differences of delta_g.
  virtual std::function<Vec(const Vec&)> linearize(const Vec& v) const;
  /// sum_{nu eta} (d_nu d_eta Delta g_mu) W_{nu eta}; nested finite differences by default.
  virtual Vec second_derivative_contraction(const Vec& v, const Mat& W) const;
  /// True when all cumulants beyond the second vanish.
  virtual bool gaussian() const { return false; }

 protected:
  SaddleModel(InputMatrix X, Mat K) : X_(std::move(X)), K_(std::move(K)) {}

 private:
  InputMatrix X_;
  Mat K_;
};

/// Plain GP: Delta g = 0.
class GpLimitModel final : public SaddleModel {
 public:
  GpLimitModel(const KernelSpec& spec, const InputMatrix& X);
  std::string name() const override { return "gp_limit"; }
  Mat cross_gram(const InputMatrix& X_test) const override;
  Vec delta_g_at(const Vec& v, const InputMatrix& X_eval) const override;
  double cgf(const Vec& v) const override;
  Mat delta_K(const Vec& v) const override;
  std::function<Vec(const Vec&)> linearize(const Vec& v) const override;
  Vec second_derivative_contraction(const Vec& v, const Mat& W) const override;
  bool gaussian() const override { return true; }

 private:
  KernelSpec spec_;
};

class CnnSaddleModel final : public SaddleModel {
 public:
  /// In resummed mode the closed form is checked against the kappa4/kappa6 series
  /// on a probe dual vector; on mismatch the model falls back to series mode.
  CnnSaddleModel(const CnnArch& arch, const InputMatrix& X, CnnDeltaGOptions opts = {},
                 bool verify_resummation = true);
  std::string name() const override { return "cnn"; }
  const CnnArch& arch() const { return arch_; }
  const CnnDeltaGOptions& options() const { return opts_; }
  const std::optional<TaylorMatch>& taylor_match() const { return taylor_; }
  bool fell_back_to_series() const { return fell_back_; }

  Mat cross_gram(const InputMatrix& X_test) const override;
  Vec delta_g_at(const Vec& v, const InputMatrix& X_eval) const override;
  double cgf(const Vec& v) const override;
  Mat delta_K(const Vec& v) const override;

 private:
  CnnArch arch_;
  CnnDeltaGOptions opts_;
  std::optional<TaylorMatch> taylor_;
  bool fell_back_ = false;
};

class QuadSaddleModel final : public SaddleModel {
 public:
  QuadSaddleModel(const QuadArch& arch, const InputMatrix& X);
  std::string name() const override { return "quad"; }
  const QuadArch& arch() const { return arch_; }

  Mat cross_gram(const InputMatrix& X_test) const override;
  Vec delta_g_at(const Vec& v, const InputMatrix& X_eval) const override;
  double cgf(const Vec& v) const override;
  Mat delta_K(const Vec& v) const override;
  std::function<Vec(const Vec&)> linearize(const Vec& v) const override;
  Vec second_derivative_contraction(const Vec& v, const Mat& W) const override;

 private:
  QuadArch arch_;
};

enum class SaddleMethod { damped_fixed_point, newton_krylov };

struct SaddleConfig {
  SaddleMethod method = SaddleMethod::damped_fixed_point;
  double damping = 0.5;
  double tol = 1e-10;
  /// Tolerance for the intermediate annealing stages.
  double stage_tol = 1e-8;
  int max_iter = 500;
  /// Descending sigma2 values ending at the target. Empty: default_annealing().
  std::vector<double> annealing;
  /// Warm start for the dual vector v = delta g / sigma2.
  std::optional<Vec> seed_solution;
  int stall_window = 10;
  double stall_ratio = 0.99;
  int gmres_restart = 60;
  double fd_step = 1e-6;
};

/// Geometric schedule of `stages` values from `start` down to `target`.
std::vector<double> default_annealing(double target, double start = 1.0, int stages = 12);

struct AnnealStage {
  double sigma2 = 0.0;
  int iterations = 0;
  double start_residual = 0.0;
  double final_residual = 0.0;
  bool converged = false;
  std::string method;
};

struct SaddleSolution {
  double sigma2 = 0.0;
  Vec dual;  // v at the saddle point
  Discrepancies discrepancies;
  TargetShift shift;
  Vec test_mean;
  /// |v - K~^{-1}(g - Delta g(v))| / |v|, i.e. the relative change of delta g under one more iteration.
  double residual = std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool converged = false;
  std::string status;
  std::vector<AnnealStage> anneal_trace;
  std::vector<double> residual_trace;
  double wall_seconds = 0.0;
  std::shared_ptr<const RegularizedGram> gram;
  Vec weights;  // K~^{-1}(g - Delta g)
};

SaddleSolution solve_saddle(const SaddleModel& model, const Vec& g, double sigma2,
                            const SaddleConfig& config = {});

/// <f*> = Delta g*(v) + K*^T K~^{-1}(g - Delta g).
Vec predict_test(const SaddleSolution& solution, const SaddleModel& model,
                 const InputMatrix& X_test);

/// Relative self-consistency residual of a dual vector.
double saddle_residual(const SaddleModel& model, const RegularizedGram& gram, const Vec& g,
                       const Vec& v);

// Equivalent-kernel limit of the CNN.

struct EkSolution {
  double alpha_train = 0.0;
  double alpha_test = 0.0;
  double q_train = 1.0;
  double q_test = 1.0;
  double alpha_pole = 0.0;
  bool found = false;
  /// All sign-change brackets seen in [0, alpha_pole).
  std::vector<std::pair<double, double>> brackets;
  std::string branch_report;
};

/// Right-hand side of the scalar alpha equation; C = +inf drops the cubic term.
double ek_alpha_rhs(double alpha, double lambda, double n, double sigma2, double C, double q);

/// (sigma2 / n) sqrt(C / lambda).
double ek_alpha_pole(double lambda, double n, double sigma2, double C);

EkSolution ek_alpha_solve(double lambda, double n, double sigma2, double C, double q_train,
                          double q_test);

/// lambda^{-1} (1 - alpha_hat) (lambda + sigma2 / n) with alpha_hat from GP predictions.
double estimate_q_empirical(const Vec& gp_predictions, const Vec& targets, double lambda,
                            double n, double sigma2);

struct AnalyticQ {
  double alpha_ek = 0.0;
  double alpha_train = 0.0;
  double q_train = 0.0;
};

/// alpha_train = alpha_EK (1 - alpha_EK / sigma2 + 3/4 alpha_EK^2 / sigma2^2).
AnalyticQ analytic_q_train(double lambda, double n, double sigma2);

struct QuadEkAsymptotics {
  double alpha = 0.0;
  double beta = 0.0;
  double alpha_closed = 0.0;  // (5/18) sigma2 / (lambda0 n)
  double beta_closed = 0.0;   // (4/18) sigma2 / (lambda0 n)
  /// beta - (-alpha - alpha / (d (1 - alpha)) + sigma2 / (2 lambda0 n)), relative to |beta|.
  double beta_relation_error = 0.0;
  bool converged = false;
  /// sigma2 / (n lambda0) <= 1e-2.
  bool asymptotic_regime = false;
  int iterations = 0;
  double residual = 0.0;
};

/// Residuals (eq1, eq2) of the coupled alpha/beta equations of the quadratic model.
std::pair<double, double> quad_ek_residual(double alpha, double beta, double lambda0,
                                           double lambda2, double n, double sigma2, double d);

QuadEkAsymptotics ek_quad_asymptotics(double lambda0, double lambda2, double n, double sigma2,
                                      double d);

}  // namespace selfcons
