#include "selfcons/datagen.hpp"

#include "selfcons/rng.hpp"

#include <cmath>
#include <sstream>

namespace selfcons {

void CnnArch::validate() const {
  if (N < 1 || S < 1 || C < 1) throw ArgumentError("CnnArch: N, S, C must be >= 1");
  if (!(sigma_a2 > 0.0) || !(sigma_w2 > 0.0))
    throw ArgumentError("CnnArch: prior variances must be positive");
}

void QuadArch::validate() const {
  if (d < 1 || M < 1) throw ArgumentError("QuadArch: d, M must be >= 1");
  if (!(sigma_w2 > 0.0)) throw ArgumentError("QuadArch: sigma_w2 must be positive");
}

Measure Measure::parse(const std::string& tag) {
  if (tag == "gaussian_unit") return gaussian_unit();
  if (tag == "gaussian_1_over_d") return gaussian_1_over_d();
  if (tag == "hypersphere") return hypersphere(1.0);
  const std::string prefix = "hypersphere(";
  if (tag.rfind(prefix, 0) == 0 && tag.back() == ')') {
    const std::string inner = tag.substr(prefix.size(), tag.size() - prefix.size() - 1);
    std::size_t used = 0;
    double r = 0.0;
    try {
      r = std::stod(inner, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == inner.size() && r > 0.0) return hypersphere(r);
  }
  throw ArgumentError("unknown measure tag: " + tag);
}

std::string Measure::name() const {
  switch (kind) {
    case MeasureKind::gaussian_unit:
      return "gaussian_unit";
    case MeasureKind::gaussian_1_over_d:
      return "gaussian_1_over_d";
    case MeasureKind::hypersphere: {
      if (radius == 1.0) return "hypersphere";
      std::ostringstream os;
      os.precision(17);
      os << "hypersphere(" << radius << ")";
      return os.str();
    }
  }
  return "unknown";
}

InputMatrix sample_inputs(Eigen::Index n, Eigen::Index d, const Measure& measure,
                          std::uint64_t seed) {
  if (n < 1 || d < 1) throw ArgumentError("sample_inputs: n and d must be >= 1");
  Rng rng(seed, "inputs");
  InputMatrix X(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) X(i, j) = rng.normal();

  switch (measure.kind) {
    case MeasureKind::gaussian_unit:
      break;
    case MeasureKind::gaussian_1_over_d:
      X /= std::sqrt(static_cast<double>(d));
      break;
    case MeasureKind::hypersphere:
      for (Eigen::Index i = 0; i < n; ++i) {
        double norm = X.row(i).norm();
        while (norm == 0.0) {  // measure-zero event, redraw
          for (Eigen::Index j = 0; j < d; ++j) X(i, j) = rng.normal();
          norm = X.row(i).norm();
        }
        X.row(i) *= measure.radius / norm;
      }
      break;
  }
  return X;
}

CnnParams sample_cnn_prior(const CnnArch& arch, std::uint64_t seed) {
  arch.validate();
  Rng rng(seed, "cnn_prior");
  CnnParams p{Mat(arch.N, arch.C), Mat(arch.S, arch.C)};
  rng.fill_normal(p.a, std::sqrt(arch.sigma_a2 / (static_cast<double>(arch.C) * arch.N)));
  rng.fill_normal(p.w, std::sqrt(arch.sigma_w2 / arch.S));
  return p;
}

CnnParams make_cnn_teacher(const CnnArch& arch, std::uint64_t seed, bool normalize) {
  if (arch.C != 1) throw ArgumentError("make_cnn_teacher: teacher must have a single channel");
  CnnParams p = sample_cnn_prior(arch, derive_seed(seed, "cnn_teacher"));
  if (normalize) {
    p.a /= p.a.norm();
    p.w /= p.w.norm();
  }
  return p;
}

Vec eval_cnn(const CnnArch& arch, const CnnParams& params, const InputMatrix& X) {
  require_shape(X.cols() == arch.d(), "eval_cnn: input dimension != N*S");
  require_shape(params.a.rows() == arch.N && params.w.rows() == arch.S &&
                    params.a.cols() == params.w.cols(),
                "eval_cnn: parameter shapes do not match architecture");
  const Eigen::Index n = X.rows();
  // Z(mu*N + i, c) = w_c . xtilde_i^mu
  const Mat Z = window_view(X, arch.S) * params.w;
  Vec f(n);
  for (Eigen::Index mu = 0; mu < n; ++mu)
    f(mu) = Z.middleRows(mu * arch.N, arch.N).cwiseProduct(params.a).sum();
  return f;
}

Vec make_quadratic_teacher(int d, std::uint64_t seed) {
  if (d < 1) throw ArgumentError("make_quadratic_teacher: d must be >= 1");
  Rng rng(seed, "quad_teacher");
  Vec w(d);
  rng.fill_normal(w);
  return w;
}

Vec eval_quadratic(const Mat& weights, double sigma_w2, const InputMatrix& X) {
  require_shape(weights.cols() == X.cols(), "eval_quadratic: weight width != input dimension");
  const Mat Z = X * weights.transpose();
  return Z.rowwise().squaredNorm() - sigma_w2 * X.rowwise().squaredNorm();
}

Vec quadratic_teacher_targets(const Vec& w_star, double sigma_w2, const InputMatrix& X) {
  return eval_quadratic(w_star.transpose(), sigma_w2, X);
}

}  // namespace selfcons
