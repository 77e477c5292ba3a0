#pragma once

#include "selfcons/datagen.hpp"
#include "selfcons/types.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace selfcons {

/// theta <- theta - eta_g (gamma_g theta + dL/dtheta) + 2 sigma sqrt(eta_g) xi, with
/// L = sum_mu (f_mu - g_mu)^2. The Gibbs measure is exp(-gamma theta^2 / (4 sigma^2) - L / (2 sigma^2)).
struct LangevinConfig {
  double eta = 1e-6;
  double sigma2 = 1.0;  // injected noise is 2 sigma sqrt(eta) xi
  long steps = 1000;
  /// Negative: discard the first half.
  long burn_in = -1;
  long thin = 1;
  int n_seeds = 1;
  std::uint64_t master_seed = 0;
  /// Per-group step eta_g = eta * min(gamma) / gamma_g. Same Gibbs target; equalizes
  /// the stiffness of the layers whose weight decays differ by a factor C.
  bool preconditioned = true;
  /// Also average E[f | conv filters] (exact for the CNN, whose readout is Gaussian given W).
  bool rao_blackwell = false;
  bool record_snapshots = true;
  /// Start from zero weights instead of a prior draw.
  bool cold_start = false;
  /// Split every seed's post-burn-in samples into this many blocks for error bars.
  int blocks_per_seed = 4;
  /// Record a trajectory row every this many steps (0: none).
  long trajectory_stride = 0;
  /// Overrides of the derived weight decays, in group order (a, w) or (w).
  /// Required when sigma2 = 0. A zero decay or zero noise means no prior; such
  /// groups start from unit-variance weights.
  std::vector<double> gammas;

  long effective_burn_in() const { return burn_in < 0 ? steps / 2 : burn_in; }
  void validate() const;
};

struct CnnWeightDecay {
  double gamma_a;
  double gamma_w;
};

/// gamma_a = 2 sigma2 C N / sigma_a2, gamma_w = 2 sigma2 S / sigma_w2.
CnnWeightDecay derive_weight_decay(const CnnArch& arch, double sigma2);
/// gamma = 2 M sigma2 / sigma_w2.
double derive_weight_decay(const QuadArch& arch, double sigma2);

struct WeightSnapshot {
  int seed = 0;
  long step = 0;
  Mat W;  // S x C for the CNN, M x d for the quadratic model
};

/// Pooled moments of one parameter group over post-burn-in samples.
struct GroupMoments {
  std::string name;
  double gamma = 0.0;
  double target_variance = 0.0;  // 2 sigma2 / gamma
  double mean = 0.0;
  double variance = 0.0;
  double excess_kurtosis = 0.0;
  long samples = 0;
};

struct TrajectoryRow {
  int seed = 0;
  long step = 0;
  double train_mse = 0.0;
  double alpha_running = 0.0;
};

struct EnsembleStats {
  Vec mean_train_output;
  Vec mean_test_output;
  /// Columns are per-(seed, block) means; used for error bars.
  Mat block_train_means;
  Mat block_test_means;
  /// Rao-Blackwellized means (empty unless requested).
  Vec rb_train_output;
  Vec rb_test_output;
  Mat rb_block_train_means;
  Mat rb_block_test_means;

  double alpha_train = 0.0;
  double alpha_train_stderr = 0.0;
  double alpha_test = 0.0;
  double alpha_test_stderr = 0.0;

  std::vector<WeightSnapshot> weight_snapshots;
  std::vector<GroupMoments> moments;
  std::vector<TrajectoryRow> trajectory;
  long samples_per_seed = 0;
  int n_seeds = 0;
  std::string model;
  double wall_seconds = 0.0;
};

/// Ensemble of CNN students. X_test may have zero rows; X may have zero rows (prior sampling).
EnsembleStats train_ensemble(const CnnArch& arch, const InputMatrix& X, const Vec& g,
                             const InputMatrix& X_test, const Vec& g_test,
                             const LangevinConfig& config);

EnsembleStats train_ensemble(const QuadArch& arch, const InputMatrix& X, const Vec& g,
                             const InputMatrix& X_test, const Vec& g_test,
                             const LangevinConfig& config);

struct AlphaEstimate {
  double alpha = 0.0;
  double stderr_ = 0.0;
};

/// alpha = 1 - <f>.g / g.g from the pooled mean, stderr from the spread of block means.
AlphaEstimate empirical_alpha_trace(const Vec& mean_output, const Mat& block_means,
                                    const Vec& targets);

/// Hidden-layer snapshots of a CNN run.
const std::vector<WeightSnapshot>& snapshot_hidden_weights(const EnsembleStats& run);

struct MseEstimate {
  double raw = 0.0;
  /// raw minus the estimated Monte-Carlo variance of the ensemble mean.
  double corrected = 0.0;
  double mc_variance = 0.0;
};

/// Mean squared difference between an ensemble mean and a reference predictor.
MseEstimate ensemble_mse(const Vec& mean_output, const Mat& block_means, const Vec& reference);

/// Worker count from SELFCONS_WORKERS (default 1).
int worker_count();

}  // namespace selfcons
