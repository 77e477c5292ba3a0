#include "selfcons/saddle.hpp"

#include "selfcons/rng.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

namespace selfcons {

// ---------------------------------------------------------------- models

std::function<Vec(const Vec&)> SaddleModel::linearize(const Vec& v) const {
  return [this, v](const Vec& q) -> Vec {
    const double qn = q.norm();
    if (qn == 0.0) return Vec::Zero(v.size());
    double h = 1e-6 * (1.0 + v.cwiseAbs().maxCoeff()) / qn;
    for (int attempt = 0;; ++attempt) {
      try {
        return (delta_g(v + h * q) - delta_g(v - h * q)) / (2.0 * h);
      } catch (const DomainError&) {
        if (attempt >= 6) throw;
        h *= 0.1;
      }
    }
  };
}

Vec SaddleModel::second_derivative_contraction(const Vec& v, const Mat& W) const {
  return fd_second_derivative_contraction([this](const Vec& u) { return delta_g(u); }, v, W);
}

GpLimitModel::GpLimitModel(const KernelSpec& spec, const InputMatrix& X)
    : SaddleModel(X, gram(spec, X)), spec_(spec) {}

Mat GpLimitModel::cross_gram(const InputMatrix& X_test) const {
  return selfcons::cross_gram(spec_, X(), X_test);
}

Vec GpLimitModel::delta_g_at(const Vec& v, const InputMatrix& X_eval) const {
  require_shape(v.size() == n(), "delta_g: dual length != n");
  return Vec::Zero(X_eval.rows());
}

double GpLimitModel::cgf(const Vec& v) const { return 0.5 * v.dot(K() * v); }

Mat GpLimitModel::delta_K(const Vec& v) const {
  require_shape(v.size() == n(), "delta_K: dual length != n");
  return Mat::Zero(n(), n());
}

std::function<Vec(const Vec&)> GpLimitModel::linearize(const Vec&) const {
  return [](const Vec& q) -> Vec { return Vec::Zero(q.size()); };
}

Vec GpLimitModel::second_derivative_contraction(const Vec&, const Mat&) const {
  return Vec::Zero(n());
}

CnnSaddleModel::CnnSaddleModel(const CnnArch& arch, const InputMatrix& X, CnnDeltaGOptions opts,
                               bool verify_resummation)
    : SaddleModel(X, gram(KernelSpec::cnn(arch), X)), arch_(arch), opts_(opts) {
  arch_.validate();
  if (opts_.mode == DeltaGMode::resummed && verify_resummation && X.rows() > 0) {
    Vec probe(X.rows());
    Rng rng(0, "taylor_probe");
    rng.fill_normal(probe);
    taylor_ = cnn_taylor_match(X, arch_, probe);
    if (!taylor_->passed()) {
      fell_back_ = true;
      opts_.mode = DeltaGMode::series;
    }
  }
}

Mat CnnSaddleModel::cross_gram(const InputMatrix& X_test) const {
  return selfcons::cross_gram(KernelSpec::cnn(arch_), X(), X_test);
}

Vec CnnSaddleModel::delta_g_at(const Vec& v, const InputMatrix& X_eval) const {
  return cnn_delta_g(X(), arch_, v, opts_, X_eval);
}

double CnnSaddleModel::cgf(const Vec& v) const {
  if (opts_.mode == DeltaGMode::resummed) return cnn_cgf(X(), arch_, v);
  // series: C(v) = 1/2 v.Kv + (1/4) v.kappa4-term + (1/6) v.kappa6-term (homogeneous degrees 4, 6)
  double c = 0.5 * v.dot(K() * v) + 0.25 * v.dot(cnn_kappa4_contract(X(), arch_, v));
  if (opts_.series_order == 6) c += v.dot(cnn_kappa6_contract(X(), arch_, v)) / 6.0;
  return c;
}

Mat CnnSaddleModel::delta_K(const Vec& v) const {
  return cnn_delta_K(v, X(), arch_, opts_);
}

QuadSaddleModel::QuadSaddleModel(const QuadArch& arch, const InputMatrix& X)
    : SaddleModel(X, gram(KernelSpec::quad(arch), X)), arch_(arch) {
  arch_.validate();
}

Mat QuadSaddleModel::cross_gram(const InputMatrix& X_test) const {
  return selfcons::cross_gram(KernelSpec::quad(arch_), X(), X_test);
}

Vec QuadSaddleModel::delta_g_at(const Vec& v, const InputMatrix& X_eval) const {
  return quad_delta_g(v, X(), arch_, X_eval);
}

double QuadSaddleModel::cgf(const Vec& v) const { return quad_cgf(v, X(), arch_); }

Mat QuadSaddleModel::delta_K(const Vec& v) const { return quad_delta_K(v, X(), arch_); }

std::function<Vec(const Vec&)> QuadSaddleModel::linearize(const Vec& v) const {
  // dK q = (2 s^2/M) diag(X B^{-1} X^T diag(q) X B^{-1} X^T) - K q
  const QuadBracket br(v, X(), arch_);
  Mat XBinv = br.solve(Mat(X().transpose())).transpose();  // n x d
  const double pref = 2.0 * arch_.sigma_w2 * arch_.sigma_w2 / arch_.M;
  return [this, XBinv = std::move(XBinv), pref](const Vec& q) -> Vec {
    const Mat Mq = X().transpose() * q.asDiagonal() * X();
    const Vec pp = (XBinv * Mq).cwiseProduct(XBinv).rowwise().sum();
    return pref * pp - K() * q;
  };
}

Vec QuadSaddleModel::second_derivative_contraction(const Vec& v, const Mat& W) const {
  return quad_second_derivative_contraction(v, X(), arch_, W);
}

// ---------------------------------------------------------------- solver

std::vector<double> default_annealing(double target, double start, int stages) {
  if (!(target > 0.0)) throw ArgumentError("default_annealing: target sigma2 must be positive");
  if (target >= start || stages <= 1) return {target};
  std::vector<double> out(stages);
  const double ratio = std::log(target / start);
  for (int k = 0; k < stages; ++k) out[k] = start * std::exp(ratio * k / (stages - 1));
  out.back() = target;
  return out;
}

double saddle_residual(const SaddleModel& model, const RegularizedGram& gram, const Vec& g,
                       const Vec& v) {
  const Vec update = gram.solve(Vec(g - model.delta_g(v)));
  const double scale = std::max(v.norm(), update.norm());
  if (scale == 0.0) return 0.0;
  return (v - update).norm() / scale;
}

namespace {

/// Restarted GMRES for A x = b with A given as a function. Returns x; `rel`
/// receives the achieved relative residual.
Vec gmres(const std::function<Vec(const Vec&)>& A, const Vec& b, double tol, int restart,
          int max_restarts, double* rel) {
  const Eigen::Index n = b.size();
  Vec x = Vec::Zero(n);
  const double bnorm = b.norm();
  if (bnorm == 0.0) {
    if (rel) *rel = 0.0;
    return x;
  }
  const int m = static_cast<int>(std::min<Eigen::Index>(restart, n));
  double res = 1.0;
  for (int cycle = 0; cycle <= max_restarts; ++cycle) {
    const Vec r = b - A(x);
    double beta = r.norm();
    res = beta / bnorm;
    if (res <= tol) break;
    Mat V(n, m + 1);
    Mat H = Mat::Zero(m + 1, m);
    Vec cs = Vec::Zero(m), sn = Vec::Zero(m), e = Vec::Zero(m + 1);
    V.col(0) = r / beta;
    e(0) = beta;
    int k = 0;
    for (; k < m; ++k) {
      Vec w = A(V.col(k));
      for (int j = 0; j <= k; ++j) {  // modified Gram-Schmidt
        H(j, k) = w.dot(V.col(j));
        w -= H(j, k) * V.col(j);
      }
      H(k + 1, k) = w.norm();
      if (H(k + 1, k) > 1e-300) V.col(k + 1) = w / H(k + 1, k);
      for (int j = 0; j < k; ++j) {
        const double t = cs(j) * H(j, k) + sn(j) * H(j + 1, k);
        H(j + 1, k) = -sn(j) * H(j, k) + cs(j) * H(j + 1, k);
        H(j, k) = t;
      }
      const double denom = std::hypot(H(k, k), H(k + 1, k));
      cs(k) = denom > 0.0 ? H(k, k) / denom : 1.0;
      sn(k) = denom > 0.0 ? H(k + 1, k) / denom : 0.0;
      H(k, k) = denom;
      H(k + 1, k) = 0.0;
      e(k + 1) = -sn(k) * e(k);
      e(k) = cs(k) * e(k);
      res = std::abs(e(k + 1)) / bnorm;
      if (res <= tol || H(k, k) == 0.0) {
        ++k;
        break;
      }
    }
    if (k > m) k = m;
    const Vec y = H.topLeftCorner(k, k).triangularView<Eigen::Upper>().solve(e.head(k));
    x += V.leftCols(k) * y;
    if (res <= tol) break;
  }
  if (rel) *rel = (b - A(x)).norm() / bnorm;
  return x;
}

struct StageResult {
  Vec v;
  double residual = 0.0;
  int iterations = 0;
  bool converged = false;
  std::string method;
};

class StageSolver {
 public:
  StageSolver(const SaddleModel& model, const RegularizedGram& gram, const Vec& g,
              const SaddleConfig& cfg, std::vector<double>& trace)
      : model_(model), gram_(gram), g_(g), cfg_(cfg), trace_(trace) {}

  StageResult run(Vec v, double tol) {
    StageResult out;
    out.method = cfg_.method == SaddleMethod::newton_krylov ? "newton_krylov" : "damped_fixed_point";
    double r = residual(v);
    trace_.push_back(r);
    if (r <= tol) {
      out.v = std::move(v);
      out.residual = r;
      out.converged = true;
      out.iterations = 1;
      return out;
    }
    int it = 0;
    if (cfg_.method == SaddleMethod::damped_fixed_point) {
      std::vector<double> hist{r};
      bool stalled = false;
      while (it < cfg_.max_iter) {
        ++it;
        v = fixed_point_step(v);
        r = residual(v);
        trace_.push_back(r);
        hist.push_back(r);
        if (r <= tol) break;
        const int w = cfg_.stall_window;
        if (static_cast<int>(hist.size()) > w &&
            (!(r < cfg_.stall_ratio * hist[hist.size() - 1 - w]) || !std::isfinite(r))) {
          stalled = true;
          break;
        }
      }
      if (stalled) out.method = "damped_fixed_point+newton_krylov";
      if (!(r <= tol) && stalled) {
        int nk_it = 0;
        v = newton_krylov(std::move(v), tol, cfg_.max_iter - it, &nk_it, &r);
        it += nk_it;
      }
    } else {
      v = newton_krylov(std::move(v), tol, cfg_.max_iter, &it, &r);
    }
    out.v = std::move(v);
    out.residual = r;
    out.iterations = std::max(it, 1);
    out.converged = r <= tol;
    return out;
  }

 private:
  double residual(const Vec& v) const { return saddle_residual(model_, gram_, g_, v); }

  /// v <- (1 - w) v + w K~^{-1}(g - Delta g(v)), halving w when the step leaves the domain.
  Vec fixed_point_step(const Vec& v) const {
    const Vec target = gram_.solve(Vec(g_ - model_.delta_g(v)));
    double w = cfg_.damping;
    for (int k = 0; k < 60; ++k, w *= 0.5) {
      Vec next = (1.0 - w) * v + w * target;
      try {
        (void)model_.delta_g(next);
        return next;
      } catch (const DomainError&) {
      }
    }
    return v;
  }

  /// Phi(v) = 1/2 (sigma2 + jitter) |v|^2 + C(v) - g.v, convex with gradient K~ v + Delta g - g.
  double merit(const Vec& v) const {
    try {
      return 0.5 * (gram_.sigma2() + gram_.jitter()) * v.squaredNorm() + model_.cgf(v) - g_.dot(v);
    } catch (const DomainError&) {
      return std::numeric_limits<double>::infinity();
    }
  }

  Vec newton_krylov(Vec v, double tol, int budget, int* iters, double* res) const {
    *iters = 0;
    *res = residual(v);
    while (*iters < budget && *res > tol) {
      ++*iters;
      Vec dg = model_.delta_g(v);
      const Vec F = gram_.apply(v) + dg - g_;
      const Vec G = gram_.solve(F);  // preconditioned residual
      const auto dK = model_.linearize(v);
      const auto J = [&](const Vec& q) -> Vec { return q + gram_.solve(Vec(dK(q))); };
      const double forcing = std::clamp(*res, 1e-12, 0.1);
      double achieved = 0.0;
      Vec p = gmres(J, Vec(-G), forcing, cfg_.gmres_restart, 3, &achieved);
      const double slope = F.dot(p);
      if (!(slope < 0.0) || !p.allFinite()) p = -G;

      const double phi0 = merit(v);
      const double gnorm0 = G.norm();
      double t = 1.0;
      bool accepted = false;
      for (int k = 0; k < 50; ++k, t *= 0.5) {
        const Vec trial = v + t * p;
        double phi = merit(trial);
        if (!std::isfinite(phi)) continue;
        const bool armijo = phi <= phi0 + 1e-4 * t * F.dot(p);
        bool decrease = false;
        if (!armijo) {
          const Vec Gt = gram_.solve(Vec(gram_.apply(trial) + model_.delta_g(trial) - g_));
          decrease = Gt.norm() <= (1.0 - 1e-4 * t) * gnorm0;
        }
        if (armijo || decrease) {
          v = trial;
          accepted = true;
          break;
        }
      }
      const double r_new = residual(v);
      trace_.push_back(r_new);
      *res = r_new;
      if (!accepted) break;
    }
    return v;
  }

  const SaddleModel& model_;
  const RegularizedGram& gram_;
  const Vec& g_;
  const SaddleConfig& cfg_;
  std::vector<double>& trace_;
};

}  // namespace

SaddleSolution solve_saddle(const SaddleModel& model, const Vec& g, double sigma2,
                            const SaddleConfig& config) {
  const auto t0 = std::chrono::steady_clock::now();
  require_shape(g.size() == model.n(), "solve_saddle: target length != n");
  if (!(sigma2 > 0.0)) throw ArgumentError("solve_saddle: sigma2 must be positive");
  if (!(config.damping > 0.0 && config.damping <= 1.0))
    throw ArgumentError("solve_saddle: damping must lie in (0, 1]");
  std::vector<double> schedule =
      config.annealing.empty() ? default_annealing(sigma2) : config.annealing;
  if (std::abs(schedule.back() - sigma2) > 1e-12 * sigma2)
    throw ArgumentError("solve_saddle: annealing schedule must end at the requested sigma2");
  for (std::size_t k = 1; k < schedule.size(); ++k)
    if (!(schedule[k] < schedule[k - 1]))
      throw ArgumentError("solve_saddle: annealing schedule must be strictly descending");
  if (model.gaussian()) schedule = {sigma2};

  SaddleSolution sol;
  sol.sigma2 = sigma2;
  Vec v;
  for (std::size_t k = 0; k < schedule.size(); ++k) {
    const double s2 = schedule[k];
    const bool last = k + 1 == schedule.size();
    auto gram = std::make_shared<const RegularizedGram>(RegularizedGram::factorize(model.K(), s2));
    if (k == 0) {
      v = config.seed_solution ? *config.seed_solution : gram->solve(g);
      require_shape(v.size() == model.n(), "solve_saddle: seed solution length != n");
      for (int shrink = 0;; ++shrink) {
        try {
          (void)model.delta_g(v);
          break;
        } catch (const DomainError&) {
          if (shrink > 200) throw;
          v *= 0.5;
        }
      }
    }
    StageSolver solver(model, *gram, g, config, sol.residual_trace);
    AnnealStage stage;
    stage.sigma2 = s2;
    stage.start_residual = saddle_residual(model, *gram, g, v);
    StageResult res = solver.run(std::move(v), last ? config.tol : std::max(config.tol, config.stage_tol));
    v = std::move(res.v);
    stage.iterations = res.iterations;
    stage.final_residual = res.residual;
    stage.converged = res.converged;
    stage.method = res.method;
    sol.iterations += res.iterations;
    sol.anneal_trace.push_back(stage);
    if (last) {
      sol.gram = gram;
      sol.residual = res.residual;
      sol.converged = res.converged;
    }
  }

  sol.dual = v;
  sol.shift.train = model.delta_g(v);
  sol.weights = sol.gram->solve(Vec(g - sol.shift.train));
  const double s = sol.gram->sigma2() + sol.gram->jitter();
  sol.discrepancies = Discrepancies::from_values(s * sol.weights, sigma2);
  std::ostringstream os;
  os << (sol.converged ? "converged" : "not converged") << " after " << sol.iterations
     << " iterations, residual " << sol.residual;
  sol.status = os.str();
  sol.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return sol;
}

Vec predict_test(const SaddleSolution& solution, const SaddleModel& model,
                 const InputMatrix& X_test) {
  if (!solution.gram) throw ArgumentError("predict_test: solution has no factorization");
  if (X_test.rows() == 0) return Vec();
  const Mat cross = model.cross_gram(X_test);
  return model.delta_g_at(solution.dual, X_test) + cross.transpose() * solution.weights;
}

// ---------------------------------------------------------------- EK limit

double ek_alpha_pole(double lambda, double n, double sigma2, double C) {
  return (sigma2 / n) * std::sqrt(C / lambda);
}

double ek_alpha_rhs(double alpha, double lambda, double n, double sigma2, double C, double q) {
  const double s = sigma2 / n;
  const double base = s / (lambda + s) + (1.0 - q) * lambda / (lambda + s);
  if (std::isinf(C)) return base;
  const double a = alpha / s;
  const double r = lambda / C;
  const double cubic = lambda * r * a * a * a / (1.0 - r * a * a);
  return base + (q * lambda / (lambda + s) - 1.0) * cubic;
}

EkSolution ek_alpha_solve(double lambda, double n, double sigma2, double C, double q_train,
                          double q_test) {
  if (!(C > 0.0)) throw ArgumentError("ek_alpha_solve: C must be positive");
  if (q_train < 0.0 || q_test < 0.0) throw ArgumentError("ek_alpha_solve: q must be >= 0");
  if (!(lambda > 0.0 && n > 0.0 && sigma2 > 0.0))
    throw ArgumentError("ek_alpha_solve: lambda, n, sigma2 must be positive");
  EkSolution out;
  out.q_train = q_train;
  out.q_test = q_test;
  out.alpha_pole = ek_alpha_pole(lambda, n, sigma2, C);

  const double inf = std::numeric_limits<double>::infinity();
  const double alpha_gp = ek_alpha_rhs(0.0, lambda, n, sigma2, inf, q_train);
  const auto h = [&](double a) { return ek_alpha_rhs(a, lambda, n, sigma2, C, q_train) - a; };

  // scan [0, hi]; hi is the pole or, when the pole is far, a generous multiple of the GP root
  const double hi = std::min(out.alpha_pole * (1.0 - 1e-9),
                             std::max(4.0 * std::abs(alpha_gp), 1.0) + 1.0);
  const int grid = 4000;
  double a_prev = 0.0, h_prev = h(0.0);
  std::ostringstream report;
  for (int k = 1; k <= grid; ++k) {
    const double a = hi * k / grid;
    const double hv = h(a);
    if (h_prev == 0.0) out.brackets.emplace_back(a_prev, a_prev);
    else if ((h_prev < 0.0) != (hv < 0.0)) out.brackets.emplace_back(a_prev, a);
    a_prev = a;
    h_prev = hv;
  }
  if (out.brackets.empty()) {
    report << "no sign change of rhs(alpha) - alpha on [0, " << hi << "]; h(0) = " << h(0.0)
           << ", h(hi) = " << h(hi);
    out.branch_report = report.str();
    return out;
  }
  // continuation from the C -> infinity root
  std::size_t best = 0;
  double best_dist = inf;
  for (std::size_t k = 0; k < out.brackets.size(); ++k) {
    const double mid = 0.5 * (out.brackets[k].first + out.brackets[k].second);
    if (std::abs(mid - alpha_gp) < best_dist) {
      best_dist = std::abs(mid - alpha_gp);
      best = k;
    }
  }
  double lo = out.brackets[best].first, up = out.brackets[best].second;
  double hlo = h(lo);
  for (int it = 0; it < 200 && up - lo > 0.0; ++it) {
    const double mid = 0.5 * (lo + up);
    if (mid <= lo || mid >= up) break;
    const double hm = h(mid);
    if (hm == 0.0) {
      lo = up = mid;
      break;
    }
    if ((hm < 0.0) == (hlo < 0.0)) {
      lo = mid;
      hlo = hm;
    } else {
      up = mid;
    }
  }
  out.alpha_train = 0.5 * (lo + up);
  out.alpha_test = ek_alpha_rhs(out.alpha_train, lambda, n, sigma2, C, q_test);
  out.found = true;
  report << out.brackets.size() << " bracket(s); chose [" << out.brackets[best].first << ", "
         << out.brackets[best].second << "] nearest the GP root " << alpha_gp;
  out.branch_report = report.str();
  return out;
}

double estimate_q_empirical(const Vec& gp_predictions, const Vec& targets, double lambda,
                            double n, double sigma2) {
  const double alpha = empirical_alpha(gp_predictions, targets);
  return (1.0 - alpha) * (lambda + sigma2 / n) / lambda;
}

AnalyticQ analytic_q_train(double lambda, double n, double sigma2) {
  if (!(lambda > 0.0 && n > 0.0 && sigma2 > 0.0))
    throw ArgumentError("analytic_q_train: inputs must be positive");
  const double s = sigma2 / n;
  AnalyticQ out;
  out.alpha_ek = s / (lambda + s);
  const double a = out.alpha_ek / sigma2;
  out.alpha_train = out.alpha_ek * (1.0 - a + 0.75 * a * a);
  out.q_train = (lambda + s) / lambda * (1.0 - out.alpha_train);
  return out;
}

// ---------------------------------------------------------------- quadratic EK

std::pair<double, double> quad_ek_residual(double alpha, double beta, double lambda0,
                                           double lambda2, double n, double sigma2, double d) {
  const double s = sigma2 / n;
  const double L = n / sigma2;
  const double D1 = 1.0 - L * (alpha * lambda2 + 2.0 * (beta + alpha) * lambda0);
  const double D2 = 1.0 + L * (alpha * lambda2 - 2.0 * beta * lambda0);
  const double e1 = alpha - (s - alpha * lambda2 / D1 + alpha * lambda2) / (lambda2 + s);
  const double inner = beta * (d + 2.0) / (2.0 * alpha) + alpha * L * d * lambda2 / D1;
  const double e2 =
      beta + ((2.0 * alpha * lambda0 / (d + 2.0)) / D2 * inner - beta * lambda0) / (lambda0 + s);
  return {e1, e2};
}

QuadEkAsymptotics ek_quad_asymptotics(double lambda0, double lambda2, double n, double sigma2,
                                      double d) {
  if (!(lambda0 > lambda2 && lambda2 > 0.0 && n > 0.0 && sigma2 > 0.0 && d > 0.0))
    throw ArgumentError("ek_quad_asymptotics: need lambda0 > lambda2 > 0 and positive n, sigma2, d");
  QuadEkAsymptotics out;
  const double u = sigma2 / (lambda0 * n);
  out.alpha_closed = 5.0 / 18.0 * u;
  out.beta_closed = 4.0 / 18.0 * u;
  out.asymptotic_regime = u <= 1e-2;

  // Newton in units of u on the equations multiplied through by their
  // denominators (alpha, D1, D2); roots with alpha = 0 are spurious and rejected.
  const double s = sigma2 / n;
  const double L = n / sigma2;
  const auto F = [&](const Eigen::Vector2d& x) {
    const double a = x(0) * u, b = x(1) * u;
    const double D1 = 1.0 - L * (a * lambda2 + 2.0 * (b + a) * lambda0);
    const double D2 = 1.0 + L * (a * lambda2 - 2.0 * b * lambda0);
    const double p1 = s * (a - 1.0) * D1 + a * lambda2;
    const double p2 = b * s * D1 * D2 + lambda0 * b * D1 +
                      2.0 * a * a * lambda0 * L * d * lambda2 / (d + 2.0);
    return Eigen::Vector2d(p1 / s, p2 / (lambda0 * u));
  };
  const auto newton = [&](Eigen::Vector2d x, int* iters, double* res) {
    Eigen::Vector2d f = F(x);
    *res = f.norm();
    for (*iters = 0; *iters < 200 && *res > 1e-13; ++*iters) {
      Eigen::Matrix2d J;
      for (int j = 0; j < 2; ++j) {
        const double h = 1e-7 * (1.0 + std::abs(x(j)));
        Eigen::Vector2d xp = x, xm = x;
        xp(j) += h;
        xm(j) -= h;
        J.col(j) = (F(xp) - F(xm)) / (2.0 * h);
      }
      Eigen::Vector2d step = J.fullPivLu().solve(-f);
      if (!step.allFinite()) break;
      double t = 1.0;
      bool moved = false;
      for (int k = 0; k < 40; ++k, t *= 0.5) {
        const Eigen::Vector2d trial = x + t * step;
        const Eigen::Vector2d ft = F(trial);
        if (ft.allFinite() && ft.norm() < (1.0 - 1e-4 * t) * *res) {
          x = trial;
          f = ft;
          *res = ft.norm();
          moved = true;
          break;
        }
      }
      if (!moved) break;
    }
    return x;
  };
  const auto genuine = [&](const Eigen::Vector2d& x, double r) {
    if (!(r <= 1e-10) || std::abs(x(0)) < 1e-6) return false;
    const auto [e1, e2] = quad_ek_residual(x(0) * u, x(1) * u, lambda0, lambda2, n, sigma2, d);
    return std::abs(e1) + std::abs(e2) <= 1e-8 * u;
  };

  // start at the closed form; otherwise scan starts and keep the genuine root nearest it
  const Eigen::Vector2d closed(5.0 / 18.0, 4.0 / 18.0);
  int iters = 0;
  double res = 0.0;
  Eigen::Vector2d x = newton(closed, &iters, &res);
  out.iterations = iters;
  if (!genuine(x, res)) {
    double best = std::numeric_limits<double>::infinity();
    res = std::numeric_limits<double>::infinity();
    for (double a0 = -3.0; a0 <= 3.0001; a0 += 0.25) {
      for (double b0 = -3.0; b0 <= 3.0001; b0 += 0.25) {
        int it = 0;
        double r = 0.0;
        const Eigen::Vector2d xr = newton(Eigen::Vector2d(a0, b0), &it, &r);
        out.iterations += it;
        if (genuine(xr, r) && (xr - closed).norm() < best) {
          best = (xr - closed).norm();
          x = xr;
          res = r;
        }
      }
    }
  }
  out.alpha = x(0) * u;
  out.beta = x(1) * u;
  out.residual = res;
  out.converged = std::isfinite(res) && res <= 1e-10;
  const double beta_rel =
      -out.alpha - out.alpha / (d * (1.0 - out.alpha)) + sigma2 / (2.0 * lambda0 * n);
  out.beta_relation_error = std::abs(out.beta - beta_rel) / std::max(std::abs(out.beta), 1e-300);
  return out;
}

}  // namespace selfcons
