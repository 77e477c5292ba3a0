#include "selfcons/langevin.hpp"

#include "selfcons/rng.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <thread>

namespace selfcons {

void LangevinConfig::validate() const {
  if (!(eta > 0.0)) throw ArgumentError("langevin: eta must be positive");
  if (!(sigma2 >= 0.0)) throw ArgumentError("langevin: sigma2 must be >= 0");
  if (sigma2 == 0.0 && gammas.empty())
    throw ArgumentError("langevin: sigma2 = 0 needs explicit weight decays");
  if (steps < 1) throw ArgumentError("langevin: steps must be >= 1");
  if (effective_burn_in() >= steps) throw ArgumentError("langevin: burn_in must be < steps");
  if (thin < 1) throw ArgumentError("langevin: thin must be >= 1");
  if (n_seeds < 1) throw ArgumentError("langevin: n_seeds must be >= 1");
  if (blocks_per_seed < 1) throw ArgumentError("langevin: blocks_per_seed must be >= 1");
  for (double g : gammas)
    if (!(g >= 0.0)) throw ArgumentError("langevin: weight decays must be >= 0");
}

CnnWeightDecay derive_weight_decay(const CnnArch& arch, double sigma2) {
  arch.validate();
  if (!(sigma2 > 0.0)) throw ArgumentError("derive_weight_decay: sigma2 must be positive");
  return {2.0 * sigma2 * arch.C * arch.N / arch.sigma_a2, 2.0 * sigma2 * arch.S / arch.sigma_w2};
}

double derive_weight_decay(const QuadArch& arch, double sigma2) {
  arch.validate();
  if (!(sigma2 > 0.0)) throw ArgumentError("derive_weight_decay: sigma2 must be positive");
  return 2.0 * arch.M * sigma2 / arch.sigma_w2;
}

int worker_count() {
  if (const char* env = std::getenv("SELFCONS_WORKERS")) {
    const int w = std::atoi(env);
    if (w >= 1) return w;
  }
  return 1;
}

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Moments {
  double s1 = 0, s2 = 0, s3 = 0, s4 = 0;
  long count = 0;

  void add(const Mat& m) {
    for (Eigen::Index k = 0; k < m.size(); ++k) {
      const double x = m.data()[k];
      const double x2 = x * x;
      s1 += x;
      s2 += x2;
      s3 += x2 * x;
      s4 += x2 * x2;
    }
    count += m.size();
  }
  void merge(const Moments& o) {
    s1 += o.s1;
    s2 += o.s2;
    s3 += o.s3;
    s4 += o.s4;
    count += o.count;
  }
};

/// Model-specific state; one instance per seed.
class Student {
 public:
  virtual ~Student() = default;
  virtual int groups() const = 0;
  virtual Mat& param(int k) = 0;
  virtual std::string group_name(int k) const = 0;
  /// Writes outputs on the training set and the loss gradient per group.
  virtual void forward_backward(const Vec& g, Vec& f, std::vector<Mat>& grads) = 0;
  virtual Vec predict(const InputMatrix& X) const = 0;
  virtual bool rao_blackwell_available() const { return false; }
  virtual void rao_blackwell(const Vec&, Vec&, Vec&) const {}
  virtual Mat hidden() const = 0;
  virtual Vec train_outputs() const = 0;
};

class CnnStudent final : public Student {
 public:
  CnnStudent(const CnnArch& arch, const InputMatrix& X, const InputMatrix& X_test,
             double var_a, double sigma2)
      : arch_(arch), X_(X), X_test_(X_test), var_a_(var_a), sigma2_(sigma2),
        a_(Mat::Zero(arch.N, arch.C)), w_(Mat::Zero(arch.S, arch.C)) {}

  int groups() const override { return 2; }
  Mat& param(int k) override { return k == 0 ? a_ : w_; }
  std::string group_name(int k) const override { return k == 0 ? "a" : "w"; }

  void forward_backward(const Vec& g, Vec& f, std::vector<Mat>& grads) override {
    f = predict(X_);
    if (X_.rows() == 0) {
      grads[0].setZero(a_.rows(), a_.cols());
      grads[1].setZero(w_.rows(), w_.cols());
      return;
    }
    const Vec r = 2.0 * (f - g);
    // Yr = sum_mu r_mu xtilde^mu (N x S)
    const Vec flat = X_.transpose() * r;
    const Eigen::Map<const RowMat> Yr(flat.data(), arch_.N, arch_.S);
    grads[0].noalias() = Yr * w_;
    grads[1].noalias() = Yr.transpose() * a_;
  }

  Vec predict(const InputMatrix& X) const override {
    if (X.rows() == 0) return Vec();
    // f_mu = <xtilde^mu, a W^T>
    const RowMat U = a_ * w_.transpose();
    const Eigen::Map<const Vec> u(U.data(), U.size());
    return X * u;
  }

  bool rao_blackwell_available() const override { return true; }

  /// E[f | W] = K_W (K_W + sigma2 I)^{-1} g, K_W = var_a Phi Phi^T.
  void rao_blackwell(const Vec& g, Vec& train, Vec& test) const override {
    const Eigen::Index n = X_.rows();
    const int NC = arch_.N * arch_.C;
    const RowMat Z = window_view(X_, arch_.S) * w_;
    const Eigen::Map<const RowMat> Phi(Z.data(), n, NC);
    Mat Kw = var_a_ * (Phi * Phi.transpose());
    Mat Kt = Kw;
    Kt.diagonal().array() += sigma2_;
    const Vec alpha = Kt.llt().solve(g);
    train = Kw * alpha;
    if (X_test_.rows() > 0) {
      const RowMat Zt = window_view(X_test_, arch_.S) * w_;
      const Eigen::Map<const RowMat> Phit(Zt.data(), X_test_.rows(), NC);
      test = var_a_ * (Phit * (Phi.transpose() * alpha));
    } else {
      test = Vec();
    }
  }

  Mat hidden() const override { return w_; }
  Vec train_outputs() const override { return predict(X_); }

 private:
  CnnArch arch_;
  const InputMatrix& X_;
  const InputMatrix& X_test_;
  double var_a_;
  double sigma2_;
  Mat a_;
  Mat w_;
};

class QuadStudent final : public Student {
 public:
  QuadStudent(const QuadArch& arch, const InputMatrix& X)
      : arch_(arch), X_(X), w_(Mat::Zero(arch.M, arch.d)) {}

  int groups() const override { return 1; }
  Mat& param(int) override { return w_; }
  std::string group_name(int) const override { return "w"; }

  void forward_backward(const Vec& g, Vec& f, std::vector<Mat>& grads) override {
    if (X_.rows() == 0) {
      f = Vec();
      grads[0].setZero(w_.rows(), w_.cols());
      return;
    }
    const Mat Z = X_ * w_.transpose();  // n x M
    f = Z.rowwise().squaredNorm() - arch_.sigma_w2 * X_.rowwise().squaredNorm();
    const Vec r = 2.0 * (f - g);
    grads[0].noalias() = 2.0 * (r.asDiagonal() * Z).transpose() * X_;
  }

  Vec predict(const InputMatrix& X) const override {
    if (X.rows() == 0) return Vec();
    return eval_quadratic(w_, arch_.sigma_w2, X);
  }

  Mat hidden() const override { return w_; }
  Vec train_outputs() const override { return predict(X_); }

 private:
  QuadArch arch_;
  const InputMatrix& X_;
  Mat w_;
};

struct SeedResult {
  Mat block_train, block_test, rb_block_train, rb_block_test;
  std::vector<long> block_counts;
  std::vector<WeightSnapshot> snapshots;
  std::vector<Moments> moments;
  std::vector<TrajectoryRow> trajectory;
  bool diverged = false;
  std::string message;
};

SeedResult run_seed(Student& st, int seed, const Vec& g, const InputMatrix& X_test,
                    const std::vector<double>& gammas, const LangevinConfig& cfg) {
  const int G = st.groups();
  const double gmin = *std::min_element(gammas.begin(), gammas.end());
  std::vector<double> eta(G), noise(G), prior_sd(G);
  for (int k = 0; k < G; ++k) {
    eta[k] = cfg.preconditioned && gmin > 0.0 ? cfg.eta * gmin / gammas[k] : cfg.eta;
    noise[k] = 2.0 * std::sqrt(cfg.sigma2 * eta[k]);
    // no prior (gamma = 0 or sigma = 0): start and divergence scale are unit variance
    const double var = 2.0 * cfg.sigma2 / gammas[k];
    prior_sd[k] = std::isfinite(var) && var > 0.0 ? std::sqrt(var) : 1.0;
  }

  Rng init_rng(cfg.master_seed, "langevin_init", seed);
  Rng noise_rng(cfg.master_seed, "langevin_noise", seed);
  for (int k = 0; k < G; ++k) {
    if (cfg.cold_start) st.param(k).setZero();
    else init_rng.fill_normal(st.param(k), prior_sd[k]);
  }

  const long burn = cfg.effective_burn_in();
  const long K = (cfg.steps - burn) / cfg.thin;
  const int B = static_cast<int>(std::min<long>(cfg.blocks_per_seed, std::max<long>(K, 1)));
  const Eigen::Index n = g.size(), nt = X_test.rows();
  const bool rb = cfg.rao_blackwell && st.rao_blackwell_available() && n > 0;

  SeedResult out;
  out.block_train = Mat::Zero(n, B);
  out.block_test = Mat::Zero(nt, B);
  if (rb) {
    out.rb_block_train = Mat::Zero(n, B);
    out.rb_block_test = Mat::Zero(nt, B);
  }
  out.block_counts.assign(B, 0);
  out.moments.resize(G);

  Vec f, running = Vec::Zero(n), rb_train, rb_test;
  long sampled = 0;
  std::vector<Mat> grads(G);
  const double gg = g.squaredNorm();

  for (long t = 1; t <= cfg.steps; ++t) {
    st.forward_backward(g, f, grads);
    for (int k = 0; k < G; ++k) {
      Mat& p = st.param(k);
      p -= eta[k] * (gammas[k] * p + grads[k]);
      for (Eigen::Index j = 0; j < p.size(); ++j) p.data()[j] += noise[k] * noise_rng.normal();
    }

    if (t % 100 == 0 || t == cfg.steps) {
      for (int k = 0; k < G; ++k) {
        const Mat& p = st.param(k);
        const double limit = 1e6 * prior_sd[k] * std::sqrt(static_cast<double>(p.size()));
        if (!p.allFinite() || p.norm() > limit) {
          std::ostringstream os;
          os << "langevin diverged: seed " << seed << ", step " << t << ", group "
             << st.group_name(k) << ", |theta| = " << p.norm() << " > " << limit;
          out.diverged = true;
          out.message = os.str();
          return out;
        }
      }
    }

    const bool sample = t > burn && (t - burn) % cfg.thin == 0 && sampled < K;
    const bool traj = cfg.trajectory_stride > 0 && t % cfg.trajectory_stride == 0;
    if (!sample && !traj) continue;

    const Vec ftrain = st.train_outputs();
    if (sample) {
      const int b = static_cast<int>(sampled * B / K);
      out.block_train.col(b) += ftrain;
      if (nt > 0) out.block_test.col(b) += st.predict(X_test);
      if (rb) {
        st.rao_blackwell(g, rb_train, rb_test);
        out.rb_block_train.col(b) += rb_train;
        if (nt > 0) out.rb_block_test.col(b) += rb_test;
      }
      ++out.block_counts[b];
      for (int k = 0; k < G; ++k) out.moments[k].add(st.param(k));
      if (cfg.record_snapshots) out.snapshots.push_back({seed, t, st.hidden()});
      running += ftrain;
      ++sampled;
    }
    if (traj) {
      TrajectoryRow row;
      row.seed = seed;
      row.step = t;
      row.train_mse = n > 0 ? (ftrain - g).squaredNorm() / n : 0.0;
      if (gg > 0.0) {
        const Vec m = sampled > 0 ? Vec(running / sampled) : ftrain;
        row.alpha_running = 1.0 - m.dot(g) / gg;
      }
      out.trajectory.push_back(row);
    }
  }
  for (int b = 0; b < B; ++b) {
    if (out.block_counts[b] == 0) continue;
    const double c = static_cast<double>(out.block_counts[b]);
    out.block_train.col(b) /= c;
    if (nt > 0) out.block_test.col(b) /= c;
    if (rb) {
      out.rb_block_train.col(b) /= c;
      if (nt > 0) out.rb_block_test.col(b) /= c;
    }
  }
  return out;
}

Vec pooled_mean(const Mat& blocks, const std::vector<long>& counts) {
  Vec m = Vec::Zero(blocks.rows());
  double total = 0.0;
  for (Eigen::Index b = 0; b < blocks.cols(); ++b) {
    m += static_cast<double>(counts[b]) * blocks.col(b);
    total += static_cast<double>(counts[b]);
  }
  return total > 0.0 ? Vec(m / total) : m;
}

/// Concatenate per-seed block columns, dropping empty blocks.
Mat stack_blocks(const std::vector<SeedResult>& rs, Mat SeedResult::*field,
                 std::vector<long>* counts) {
  Eigen::Index rows = 0, cols = 0;
  for (const auto& r : rs) {
    rows = (r.*field).rows();
    for (long c : r.block_counts) cols += c > 0;
  }
  Mat out(rows, cols);
  Eigen::Index j = 0;
  if (counts) counts->clear();
  for (const auto& r : rs) {
    for (std::size_t b = 0; b < r.block_counts.size(); ++b) {
      if (r.block_counts[b] == 0) continue;
      out.col(j++) = (r.*field).col(b);
      if (counts) counts->push_back(r.block_counts[b]);
    }
  }
  return out;
}

EnsembleStats run_ensemble(const std::function<std::unique_ptr<Student>()>& make,
                           const std::string& model, const Vec& g, const InputMatrix& X_test,
                           const Vec& g_test, const std::vector<double>& gammas,
                           const LangevinConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<SeedResult> results(cfg.n_seeds);
  const int workers = std::max(1, std::min(worker_count(), cfg.n_seeds));
  auto work = [&](int w) {
    for (int s = w; s < cfg.n_seeds; s += workers) {
      auto st = make();
      results[s] = run_seed(*st, s, g, X_test, gammas, cfg);
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& th : pool) th.join();
  }
  for (const auto& r : results)
    if (r.diverged) throw DivergenceError(r.message);

  EnsembleStats st;
  st.model = model;
  st.n_seeds = cfg.n_seeds;
  st.samples_per_seed = (cfg.steps - cfg.effective_burn_in()) / cfg.thin;
  std::vector<long> counts;
  st.block_train_means = stack_blocks(results, &SeedResult::block_train, &counts);
  st.block_test_means = stack_blocks(results, &SeedResult::block_test, nullptr);
  st.mean_train_output = pooled_mean(st.block_train_means, counts);
  st.mean_test_output = pooled_mean(st.block_test_means, counts);
  if (cfg.rao_blackwell && results.front().rb_block_train.size() > 0) {
    st.rb_block_train_means = stack_blocks(results, &SeedResult::rb_block_train, nullptr);
    st.rb_block_test_means = stack_blocks(results, &SeedResult::rb_block_test, nullptr);
    st.rb_train_output = pooled_mean(st.rb_block_train_means, counts);
    st.rb_test_output = pooled_mean(st.rb_block_test_means, counts);
  }
  if (g.size() > 0 && g.squaredNorm() > 0.0) {
    const auto a = empirical_alpha_trace(st.mean_train_output, st.block_train_means, g);
    st.alpha_train = a.alpha;
    st.alpha_train_stderr = a.stderr_;
  }
  if (g_test.size() > 0 && g_test.squaredNorm() > 0.0) {
    const auto a = empirical_alpha_trace(st.mean_test_output, st.block_test_means, g_test);
    st.alpha_test = a.alpha;
    st.alpha_test_stderr = a.stderr_;
  }

  const auto probe = make();
  for (int k = 0; k < probe->groups(); ++k) {
    Moments m;
    for (const auto& r : results) m.merge(r.moments[k]);
    GroupMoments gm;
    gm.name = probe->group_name(k);
    gm.gamma = gammas[k];
    gm.target_variance = gammas[k] > 0.0 ? 2.0 * cfg.sigma2 / gammas[k]
                                         : std::numeric_limits<double>::infinity();
    gm.samples = m.count;
    if (m.count > 0) {
      const double N = static_cast<double>(m.count);
      const double mu = m.s1 / N, e2 = m.s2 / N, e3 = m.s3 / N, e4 = m.s4 / N;
      gm.mean = mu;
      gm.variance = e2 - mu * mu;
      const double c4 = e4 - 4.0 * mu * e3 + 6.0 * mu * mu * e2 - 3.0 * mu * mu * mu * mu;
      gm.excess_kurtosis = gm.variance > 0.0 ? c4 / (gm.variance * gm.variance) - 3.0 : 0.0;
    }
    st.moments.push_back(gm);
  }
  for (auto& r : results) {
    for (auto& s : r.snapshots) st.weight_snapshots.push_back(std::move(s));
    for (auto& row : r.trajectory) st.trajectory.push_back(row);
  }
  st.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return st;
}

}  // namespace

EnsembleStats train_ensemble(const CnnArch& arch, const InputMatrix& X, const Vec& g,
                             const InputMatrix& X_test, const Vec& g_test,
                             const LangevinConfig& config) {
  arch.validate();
  require_shape(X.rows() == g.size(), "train_ensemble: targets length != n");
  require_shape(X.rows() == 0 || X.cols() == arch.d(), "train_ensemble: input dimension != N*S");
  require_shape(X_test.rows() == 0 || X_test.cols() == arch.d(), "train_ensemble: test dimension");
  std::vector<double> gammas = config.gammas;
  if (gammas.empty()) {
    const auto wd = derive_weight_decay(arch, config.sigma2);
    gammas = {wd.gamma_a, wd.gamma_w};
  }
  if (gammas.size() != 2) throw ArgumentError("train_ensemble: cnn needs two weight decays (a, w)");
  const double var_a = 2.0 * config.sigma2 / gammas[0];
  return run_ensemble(
      [&]() -> std::unique_ptr<Student> {
        return std::make_unique<CnnStudent>(arch, X, X_test, var_a, config.sigma2);
      },
      "cnn", g, X_test, g_test, gammas, config);
}

EnsembleStats train_ensemble(const QuadArch& arch, const InputMatrix& X, const Vec& g,
                             const InputMatrix& X_test, const Vec& g_test,
                             const LangevinConfig& config) {
  arch.validate();
  require_shape(X.rows() == g.size(), "train_ensemble: targets length != n");
  require_shape(X.rows() == 0 || X.cols() == arch.d, "train_ensemble: input dimension != d");
  if (config.rao_blackwell)
    throw ArgumentError("train_ensemble: Rao-Blackwell averaging is only available for the cnn");
  std::vector<double> gammas = config.gammas;
  if (gammas.empty()) gammas = {derive_weight_decay(arch, config.sigma2)};
  if (gammas.size() != 1) throw ArgumentError("train_ensemble: quad needs one weight decay");
  return run_ensemble(
      [&]() -> std::unique_ptr<Student> { return std::make_unique<QuadStudent>(arch, X); },
      "quad", g, X_test, g_test, gammas, config);
}

AlphaEstimate empirical_alpha_trace(const Vec& mean_output, const Mat& block_means,
                                    const Vec& targets) {
  require_shape(mean_output.size() == targets.size(), "empirical_alpha_trace: length mismatch");
  const double gg = targets.squaredNorm();
  if (!(gg > 0.0)) throw ArgumentError("empirical_alpha_trace: zero target vector");
  AlphaEstimate out;
  out.alpha = 1.0 - mean_output.dot(targets) / gg;
  const Eigen::Index B = block_means.cols();
  if (B >= 2) {
    const Vec a = Vec::Ones(B) - block_means.transpose() * targets / gg;
    const double var = (a.array() - a.mean()).square().sum() / (B - 1);
    out.stderr_ = std::sqrt(var / B);
  }
  return out;
}

const std::vector<WeightSnapshot>& snapshot_hidden_weights(const EnsembleStats& run) {
  if (run.model != "cnn") throw ArgumentError("snapshot_hidden_weights: run is not a cnn ensemble");
  return run.weight_snapshots;
}

MseEstimate ensemble_mse(const Vec& mean_output, const Mat& block_means, const Vec& reference) {
  require_shape(mean_output.size() == reference.size(), "ensemble_mse: length mismatch");
  MseEstimate out;
  const Eigen::Index n = reference.size();
  if (n == 0) return out;
  out.raw = (mean_output - reference).squaredNorm() / n;
  const Eigen::Index B = block_means.cols();
  if (B >= 2) {
    const Vec mu = block_means.rowwise().mean();
    const double var = (block_means.colwise() - mu).squaredNorm() / (B - 1);
    out.mc_variance = var / B / n;
  }
  out.corrected = out.raw - out.mc_variance;
  return out;
}

}  // namespace selfcons
