#include "experiments.hpp"

#include "selfcons/diagnostics.hpp"
#include "selfcons/io.hpp"
#include "selfcons/langevin.hpp"
#include "selfcons/rng.hpp"
#include "selfcons/saddle.hpp"
#include "selfcons/spectral.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <iomanip>
#include <limits>
#include <map>
#include <mutex>
#include <ostream>
#include <thread>

namespace selfcons::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

/// Runs f(0..count-1) on a bounded pool. Results must be written by index;
/// the first exception in index order is rethrown after all workers join.
template <typename F>
void parallel_for(std::size_t count, F&& f) {
  const std::size_t workers =
      std::max<std::size_t>(1, std::min<std::size_t>(worker_count(), count));
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  auto body = [&] {
    for (std::size_t k; (k = next++) < count;) {
      try {
        f(k);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    body();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(body);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// Data

struct DataPoint {
  int S = 0;
  int N = 0;
  long n = 0;
  double n_over_d = kNan;
  int seed = 0;

  std::string tag() const {
    return "S" + std::to_string(S) + "_n" + std::to_string(n) + "_s" + std::to_string(seed);
  }
};

struct Data {
  InputMatrix X, X_test;
  Vec g, g_test;
  Vec w_star;  // CNN teacher filter or quadratic teacher vector
  std::uint64_t train_seed = 0, test_seed = 0, teacher_seed = 0;
};

bool is_cnn(const ExperimentConfig& c) { return c.model.kind == "cnn"; }

std::vector<DataPoint> data_points(const ExperimentConfig& c) {
  std::vector<DataPoint> base;
  if (!is_cnn(c)) {
    const int d = c.model.d;
    if (!c.data.n_over_d.empty()) {
      for (double r : c.data.n_over_d)
        base.push_back({d, d, std::max(1L, std::lround(r * d)), r, 0});
    } else {
      for (long n : c.data.n) base.push_back({d, d, n, static_cast<double>(n) / d, 0});
    }
  } else if (c.model.S.size() > 1) {
    for (std::size_t k = 0; k < c.model.S.size(); ++k)
      base.push_back({c.model.S[k], c.model.N.value_or(c.model.S[k]), c.data.n[k], kNan, 0});
  } else {
    const int S = c.model.S.front();
    for (long n : c.data.n) base.push_back({S, c.model.N.value_or(S), n, kNan, 0});
  }
  std::vector<DataPoint> out;
  for (const auto& b : base)
    for (int s = 0; s < c.data.seeds; ++s) {
      DataPoint p = b;
      p.seed = s;
      out.push_back(p);
    }
  return out;
}

CnnArch cnn_arch(const ExperimentConfig& c, const DataPoint& p, int C) {
  return {p.N, p.S, C, c.model.sigma_a2, c.model.sigma_w2};
}

QuadArch quad_arch(const ExperimentConfig& c) { return {c.model.d, c.model.M, c.model.sigma_w2}; }

InputMatrix sample_or_empty(long n, Eigen::Index d, const Measure& m, std::uint64_t seed) {
  return n > 0 ? sample_inputs(n, d, m, seed) : InputMatrix(0, d);
}

Data make_data(const ExperimentConfig& c, const DataPoint& p) {
  Data d;
  const std::string key = p.tag();
  d.train_seed = derive_seed(c.seed, "train:" + key);
  d.test_seed = derive_seed(c.seed, "test:" + key);
  d.teacher_seed = derive_seed(c.seed, "teacher", p.seed);
  const Measure measure = Measure::parse(c.data.measure);
  if (is_cnn(c)) {
    const CnnArch t = cnn_arch(c, p, 1);
    const CnnParams teacher = make_cnn_teacher(t, d.teacher_seed, c.data.teacher_normalize);
    d.X = sample_inputs(p.n, t.d(), measure, d.train_seed);
    d.X_test = sample_or_empty(c.data.n_test, t.d(), measure, d.test_seed);
    d.g = c.data.target_scale * eval_cnn(t, teacher, d.X);
    d.g_test = c.data.target_scale * eval_cnn(t, teacher, d.X_test);
    d.w_star = teacher.w.col(0);
  } else {
    d.w_star = make_quadratic_teacher(c.model.d, d.teacher_seed);
    if (c.data.teacher_normalize) d.w_star.normalize();
    d.X = sample_inputs(p.n, c.model.d, measure, d.train_seed);
    d.X_test = sample_or_empty(c.data.n_test, c.model.d, measure, d.test_seed);
    d.g = c.data.target_scale * quadratic_teacher_targets(d.w_star, c.model.sigma_w2, d.X);
    d.g_test = c.data.target_scale * quadratic_teacher_targets(d.w_star, c.model.sigma_w2, d.X_test);
  }
  return d;
}

Dataset as_dataset(const ExperimentConfig& c, const Data& d, bool test) {
  Dataset ds;
  ds.X = test ? d.X_test : d.X;
  ds.g = test ? d.g_test : d.g;
  ds.measure = Measure::parse(c.data.measure);
  ds.seed = test ? d.test_seed : d.train_seed;
  ds.teacher = {{"model", c.model.kind},
                {"seed", d.teacher_seed},
                {"normalized", c.data.teacher_normalize},
                {"target_scale", c.data.target_scale}};
  return ds;
}

/// Widths swept: C for the CNN; the quadratic model has the single width M.
std::vector<int> widths(const ExperimentConfig& c) {
  return is_cnn(c) ? c.model.C : std::vector<int>{c.model.M};
}

KernelSpec kernel_spec(const ExperimentConfig& c, const DataPoint& p) {
  return is_cnn(c) ? KernelSpec::cnn(cnn_arch(c, p, c.model.C.front()))
                   : KernelSpec::quad(quad_arch(c));
}

std::unique_ptr<SaddleModel> saddle_model(const ExperimentConfig& c, const DataPoint& p, int C,
                                          const InputMatrix& X) {
  if (!is_cnn(c)) return std::make_unique<QuadSaddleModel>(quad_arch(c), X);
  CnnDeltaGOptions opts;
  opts.mode = c.solver.cnn_mode == "series" ? DeltaGMode::series : DeltaGMode::resummed;
  return std::make_unique<CnnSaddleModel>(cnn_arch(c, p, C), X, opts);
}

SaddleConfig saddle_config(const SolverBlock& s) {
  SaddleConfig cfg;
  cfg.method = s.method == "newton_krylov" ? SaddleMethod::newton_krylov
                                           : SaddleMethod::damped_fixed_point;
  cfg.damping = s.damping;
  cfg.tol = s.tol;
  cfg.stage_tol = s.stage_tol;
  cfg.max_iter = s.max_iter;
  cfg.annealing = default_annealing(s.sigma2, s.anneal_start, s.anneal_stages);
  return cfg;
}

double alpha_of(const Vec& f, const Vec& g) {
  return g.size() == 0 ? kNan : empirical_alpha(f, g);
}

double mse(const Vec& a, const Vec& b) {
  return a.size() == 0 ? kNan : (a - b).squaredNorm() / static_cast<double>(a.size());
}

double median(std::vector<double> v) {
  if (v.empty()) return kNan;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

struct GpResult {
  Vec train;  // posterior mean on the training points
  Vec test;
  double q_train = kNan, q_test = kNan;
};

GpResult gp_predict(const ExperimentConfig& c, const DataPoint& p, const Data& d) {
  const KernelSpec spec = kernel_spec(c, p);
  const GpFit fit = fit_gp(gram(spec, d.X), c.solver.sigma2, d.g);
  GpResult r;
  r.train = d.g - gp_discrepancies_train(fit).values;
  r.test = d.X_test.rows() ? gp_mean_test(fit, cross_gram(spec, d.X, d.X_test)) : Vec();
  if (is_cnn(c)) {
    const double lambda = cnn_arch(c, p, 1).lambda();
    if (c.solver.q) {
      r.q_train = r.q_test = *c.solver.q;
    } else {
      r.q_train = estimate_q_empirical(r.train, d.g, lambda, p.n, c.solver.sigma2);
      r.q_test = d.X_test.rows()
                     ? estimate_q_empirical(r.test, d.g_test, lambda, p.n, c.solver.sigma2)
                     : r.q_train;
    }
  }
  return r;
}

// Run bookkeeping

class Run {
 public:
  explicit Run(const ExperimentConfig& c)
      : cfg(c), hash(config_hash(c.canonical)), dir(run_directory(c)) {
    fs::create_directories(dir);
  }

  void csv(const std::string& name, const CsvTable& t) {
    write_csv(dir / name, t, hash);
    files.push_back({{"name", name}, {"kind", "csv"}, {"rows", t.rows.size()}});
  }

  void matrices(const std::string& name, const std::vector<Mat>& m) {
    write_matrices(dir / name, m);
    files.push_back({{"name", name}, {"kind", "matrices"}, {"rows", m.size()}});
  }

  void dataset(const std::string& base, const Dataset& ds) {
    save_dataset(dir / "data" / base, ds);
    files.push_back({{"name", "data/" + base + ".bin"}, {"kind", "dataset"}, {"rows", ds.n()}});
  }

  void json_file(const std::string& name, const json& j) {
    write_json(dir / name, j);
    files.push_back({{"name", name}, {"kind", "json"}, {"rows", j.is_array() ? j.size() : 1}});
  }

  void record_seeds(const DataPoint& p, const Data& d) {
    seeds.push_back({{"point", p.tag()},
                     {"train", d.train_seed},
                     {"test", d.test_seed},
                     {"teacher", d.teacher_seed}});
  }

  int finish(double wall_seconds, std::ostream& log) {
    const int code = diverged ? exit_divergence : nonconverged ? exit_nonconvergence : exit_ok;
    const char* status = diverged ? "diverged" : nonconverged ? "nonconverged" : "ok";
    json manifest = {{"experiment", to_string(cfg.experiment)},
                     {"config", cfg.canonical},
                     {"config_hash", hash},
                     {"version", code_version()},
                     {"master_seed", cfg.seed},
                     {"workers", worker_count()},
                     {"seeds", seeds},
                     {"wall_seconds", wall_seconds},
                     {"points", points},
                     {"summary", summary},
                     {"files", files},
                     {"divergence", divergence},
                     {"status", status},
                     {"exit_code", code}};
    write_json(dir / "manifest.json", manifest);
    log << to_string(cfg.experiment) << ": " << status << ", " << files.size() << " files in "
        << dir.string() << "\n";
    return code;
  }

  const ExperimentConfig& cfg;
  const std::string hash;
  const fs::path dir;
  json files = json::array();
  json seeds = json::array();
  json points = json::array();
  json summary = json::object();
  json divergence = json::array();
  bool nonconverged = false;
  bool diverged = false;
};

std::vector<Data> build_data(Run& run, const std::vector<DataPoint>& pts) {
  std::vector<Data> data(pts.size());
  parallel_for(pts.size(), [&](std::size_t k) { data[k] = make_data(run.cfg, pts[k]); });
  for (std::size_t k = 0; k < pts.size(); ++k) {
    run.record_seeds(pts[k], data[k]);
    run.dataset(pts[k].tag() + "_train", as_dataset(run.cfg, data[k], false));
    if (data[k].X_test.rows()) run.dataset(pts[k].tag() + "_test", as_dataset(run.cfg, data[k], true));
  }
  return data;
}

const std::vector<std::string> kSweepColumns = {
    "C", "n", "S", "N", "sigma2", "alpha_pred_train", "alpha_pred_test", "q_train", "q_test",
    "converged"};

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// Experiments

void gp_baseline(Run& run) {
  const auto& c = run.cfg;
  const auto pts = data_points(c);
  const auto data = build_data(run, pts);
  std::vector<GpResult> res(pts.size());
  parallel_for(pts.size(), [&](std::size_t k) { res[k] = gp_predict(c, pts[k], data[k]); });

  CsvTable summary{{"S", "N", "n", "seed", "sigma2", "alpha_train", "alpha_test", "test_mse",
                    "q_train", "q_test"},
                   {}};
  for (std::size_t k = 0; k < pts.size(); ++k) {
    const auto& p = pts[k];
    run.csv("gp_train_" + p.tag() + ".csv", gp_table(data[k].g, res[k].train));
    if (res[k].test.size())
      run.csv("gp_test_" + p.tag() + ".csv", gp_table(data[k].g_test, res[k].test));
    summary.add({(long long)p.S, (long long)p.N, (long long)p.n, (long long)p.seed,
                 c.solver.sigma2, alpha_of(res[k].train, data[k].g),
                 alpha_of(res[k].test, data[k].g_test), mse(res[k].test, data[k].g_test),
                 res[k].q_train, res[k].q_test});
    run.points.push_back(p.tag());
  }
  run.csv("gp_summary.csv", summary);
}

struct SaddlePoint {
  std::size_t data_index = 0;
  int C = 0;
  SaddleSolution sol;
  Vec train, test;
  GpResult gp;
  SpValidityReport validity;
  bool solved = false;
  std::string error;
};

std::vector<SaddlePoint> solve_points(Run& run, const std::vector<DataPoint>& pts,
                                      const std::vector<Data>& data, bool with_validity) {
  const auto& c = run.cfg;
  std::vector<SaddlePoint> out;
  for (std::size_t k = 0; k < pts.size(); ++k)
    for (int C : widths(c)) {
      SaddlePoint sp;
      sp.data_index = k;
      sp.C = C;
      out.push_back(std::move(sp));
    }
  const SaddleConfig scfg = saddle_config(c.solver);
  const ValidityThresholds thr{c.diagnostics.min_simple, c.diagnostics.max_correction};
  parallel_for(out.size(), [&](std::size_t j) {
    auto& sp = out[j];
    const auto& p = pts[sp.data_index];
    const auto& d = data[sp.data_index];
    sp.gp = gp_predict(c, p, d);
    try {
      const auto model = saddle_model(c, p, sp.C, d.X);
      sp.sol = solve_saddle(*model, d.g, c.solver.sigma2, scfg);
      sp.train = d.g - sp.sol.discrepancies.values;
      sp.test = d.X_test.rows() ? predict_test(sp.sol, *model, d.X_test) : Vec();
      if (with_validity) sp.validity = sp_validity(*model, sp.sol, d.g, thr);
      sp.solved = true;
    } catch (const DomainError& e) {
      sp.error = e.what();
    }
  });
  for (const auto& sp : out)
    if (!sp.solved || !sp.sol.converged) run.nonconverged = true;
  return out;
}

json solver_report(const ExperimentConfig& c, const DataPoint& p, const SaddlePoint& sp) {
  json j = {{"point", p.tag()}, {"C", sp.C}};
  j["config"] = {{"solver", c.canonical["solver"]}, {"model", c.model.kind}};
  if (!sp.solved) {
    j["error"] = sp.error;
    return j;
  }
  j["solution"] = to_json(sp.sol);
  j["diagnostics"] = to_json(sp.validity);
  return j;
}

void saddle_solve(Run& run, bool diagnostics_only) {
  const auto& c = run.cfg;
  const auto pts = data_points(c);
  const auto data = build_data(run, pts);
  const auto sps = solve_points(run, pts, data, true);

  CsvTable sweep{with(kSweepColumns, {"seed", "residual", "iterations", "test_mse",
                                      "mse_vs_gp_test", "alpha_gp_train", "verdict"}),
                 {}};
  CsvTable validity{{"S", "N", "n", "seed", "C", "sigma2", "criterion_simple",
                     "criterion_simple_min", "heuristic_error", "criterion_full", "verdict"},
                    {}};
  json reports = json::array();
  for (const auto& sp : sps) {
    const auto& p = pts[sp.data_index];
    const auto& d = data[sp.data_index];
    const std::string verdict = sp.solved ? to_string(sp.validity.verdict) : "failed";
    sweep.add({(long long)sp.C, (long long)p.n, (long long)p.S, (long long)p.N, c.solver.sigma2,
               sp.solved ? alpha_of(sp.train, d.g) : kNan,
               sp.solved ? alpha_of(sp.test, d.g_test) : kNan, sp.gp.q_train, sp.gp.q_test,
               (long long)(sp.solved && sp.sol.converged), (long long)p.seed,
               sp.solved ? sp.sol.residual : kNan, (long long)(sp.solved ? sp.sol.iterations : 0),
               sp.solved ? mse(sp.test, d.g_test) : kNan,
               sp.solved ? mse(sp.test, sp.gp.test) : kNan, alpha_of(sp.gp.train, d.g), verdict});
    validity.add({(long long)p.S, (long long)p.N, (long long)p.n, (long long)p.seed,
                  (long long)sp.C, c.solver.sigma2,
                  sp.solved ? sp.validity.criterion_simple : kNan,
                  sp.solved ? sp.validity.criterion_simple_min : kNan,
                  sp.solved ? sp.validity.heuristic_error : kNan,
                  sp.solved ? sp.validity.criterion_full : kNan, verdict});
    reports.push_back(solver_report(c, p, sp));
    if (!diagnostics_only && sp.solved)
      run.csv("saddle_train_" + p.tag() + "_C" + std::to_string(sp.C) + ".csv",
              gp_table(d.g, sp.train));
    run.points.push_back(p.tag() + "_C" + std::to_string(sp.C));
  }
  if (diagnostics_only) {
    run.csv("validity.csv", validity);
  } else {
    run.csv("sweep.csv", sweep);
    run.csv("validity.csv", validity);
  }
  run.json_file("solver_reports.json", reports);
}

void ek_sweep(Run& run) {
  const auto& c = run.cfg;
  const auto pts = data_points(c);
  const auto data = build_data(run, pts);
  std::vector<GpResult> gps(pts.size());
  parallel_for(pts.size(), [&](std::size_t k) { gps[k] = gp_predict(c, pts[k], data[k]); });

  CsvTable sweep{with(kSweepColumns, {"seed", "alpha_pole", "brackets", "alpha_gp_train"}), {}};
  json reports = json::array();
  for (std::size_t k = 0; k < pts.size(); ++k) {
    const auto& p = pts[k];
    const double lambda = cnn_arch(c, p, 1).lambda();
    std::vector<double> Cs(c.model.C.begin(), c.model.C.end());
    Cs.push_back(std::numeric_limits<double>::infinity());
    for (double C : Cs) {
      const EkSolution e = ek_alpha_solve(lambda, static_cast<double>(p.n), c.solver.sigma2, C,
                                          gps[k].q_train, gps[k].q_test);
      if (!e.found) run.nonconverged = true;
      sweep.add({C, (long long)p.n, (long long)p.S, (long long)p.N, c.solver.sigma2,
                 e.alpha_train, e.alpha_test, e.q_train, e.q_test, (long long)e.found,
                 (long long)p.seed, e.alpha_pole, (long long)e.brackets.size(),
                 alpha_of(gps[k].train, data[k].g)});
      json r = to_json(e);
      r["point"] = p.tag();
      r["C"] = C;
      reports.push_back(r);
    }
    run.points.push_back(p.tag());
  }
  run.csv("sweep.csv", sweep);
  run.json_file("ek_reports.json", reports);
}

LangevinConfig langevin_config(const ExperimentConfig& c, const DataPoint& p, int C) {
  const auto& l = c.langevin;
  LangevinConfig cfg;
  cfg.sigma2 = c.solver.sigma2;
  const int C_min = *std::min_element(c.model.C.begin(), c.model.C.end());
  cfg.steps = l.scale_steps_with_C && is_cnn(c) ? l.steps * C / C_min : l.steps;
  cfg.burn_in = l.burn_in;
  cfg.thin = l.thin;
  cfg.n_seeds = l.seeds;
  cfg.master_seed = derive_seed(c.seed, "langevin:" + p.tag(), C);
  cfg.preconditioned = l.preconditioned;
  cfg.rao_blackwell = l.rao_blackwell && is_cnn(c);
  cfg.record_snapshots = l.save_snapshots || c.experiment == Experiment::spectrum_sweep;
  cfg.cold_start = l.cold_start;
  cfg.blocks_per_seed = l.blocks_per_seed;
  cfg.trajectory_stride = l.trajectory_stride;
  std::vector<double> gammas;
  if (is_cnn(c)) {
    const auto wd = derive_weight_decay(cnn_arch(c, p, C), cfg.sigma2);
    gammas = {wd.gamma_a, wd.gamma_w};
  } else {
    gammas = {derive_weight_decay(quad_arch(c), cfg.sigma2)};
  }
  const double gamma_ref = l.preconditioned ? *std::min_element(gammas.begin(), gammas.end())
                                            : *std::max_element(gammas.begin(), gammas.end());
  cfg.eta = l.eta ? *l.eta : l.eta_gamma / gamma_ref;
  return cfg;
}

struct LangevinPoint {
  std::size_t data_index = 0;
  int C = 0;
  EnsembleStats stats;
  bool ok = false;
  std::string error;
  double eta = 0.0;
  long steps = 0;
};

std::vector<LangevinPoint> run_langevin_points(Run& run, const std::vector<DataPoint>& pts,
                                               const std::vector<Data>& data, std::ostream& log) {
  const auto& c = run.cfg;
  std::vector<LangevinPoint> out;
  // Sequential over points: every ensemble already spreads its seeds over the worker pool.
  for (std::size_t k = 0; k < pts.size(); ++k)
    for (int C : widths(c)) {
      LangevinPoint lp;
      lp.data_index = k;
      lp.C = C;
      const auto lcfg = langevin_config(c, pts[k], C);
      lp.eta = lcfg.eta;
      lp.steps = lcfg.steps;
      const auto& d = data[k];
      try {
        lp.stats = is_cnn(c) ? train_ensemble(cnn_arch(c, pts[k], C), d.X, d.g, d.X_test,
                                              d.g_test, lcfg)
                             : train_ensemble(quad_arch(c), d.X, d.g, d.X_test, d.g_test, lcfg);
        lp.ok = true;
      } catch (const DivergenceError& e) {
        lp.error = e.what();
        run.diverged = true;
        run.divergence.push_back({{"point", pts[k].tag()}, {"C", C}, {"message", e.what()}});
      }
      log << "  " << pts[k].tag() << " C=" << C << (lp.ok ? " done" : " diverged") << " ("
          << std::fixed << std::setprecision(1) << lp.stats.wall_seconds << " s)\n"
          << std::defaultfloat;
      out.push_back(std::move(lp));
    }
  return out;
}

std::string point_tag(const DataPoint& p, int C) { return p.tag() + "_C" + std::to_string(C); }

void write_langevin_extras(Run& run, const DataPoint& p, const LangevinPoint& lp) {
  const auto& c = run.cfg;
  if (c.langevin.trajectory_stride > 0) {
    CsvTable t{{"seed", "step", "train_mse", "alpha_running"}, {}};
    for (const auto& r : lp.stats.trajectory)
      t.add({(long long)r.seed, (long long)r.step, r.train_mse, r.alpha_running});
    run.csv("trajectory_" + point_tag(p, lp.C) + ".csv", t);
  }
  if (c.langevin.save_snapshots) {
    std::vector<Mat> mats;
    for (const auto& s : lp.stats.weight_snapshots) mats.push_back(s.W);
    run.matrices("snapshots_" + point_tag(p, lp.C) + ".bin", mats);
  }
}

void langevin_sweep(Run& run, std::ostream& log) {
  const auto& c = run.cfg;
  const auto pts = data_points(c);
  const auto data = build_data(run, pts);
  const auto sps = solve_points(run, pts, data, false);
  const auto lps = run_langevin_points(run, pts, data, log);

  CsvTable alpha{{"S", "N", "n", "seed", "C", "alpha_pred_train", "alpha_pred_test", "alpha_ek_train",
                  "alpha_emp_train", "alpha_emp_train_stderr", "alpha_emp_test",
                  "alpha_emp_test_stderr", "alpha_gp_train", "rel_diff_train"},
                 {}};
  CsvTable mse_t{{"S", "N", "n", "seed", "C", "steps", "eta", "mse_raw", "mse_corrected",
                  "mc_variance", "mse_saddle_vs_gp", "rao_blackwell"},
                 {}};
  CsvTable moments{{"S", "N", "n", "seed", "C", "group", "gamma", "target_variance", "mean",
                    "variance", "excess_kurtosis", "samples"},
                   {}};
  std::map<std::size_t, std::vector<std::pair<double, double>>> by_point;
  json slopes = json::object();
  for (std::size_t j = 0; j < lps.size(); ++j) {
    const auto& lp = lps[j];
    const auto& sp = sps[j];
    const auto& p = pts[lp.data_index];
    const auto& d = data[lp.data_index];
    run.points.push_back(point_tag(p, lp.C));
    if (!lp.ok) continue;
    const auto& st = lp.stats;

    double alpha_ek = kNan;
    if (is_cnn(c)) {
      const auto e = ek_alpha_solve(cnn_arch(c, p, lp.C).lambda(), static_cast<double>(p.n),
                                    c.solver.sigma2, lp.C, sp.gp.q_train, sp.gp.q_test);
      if (e.found) alpha_ek = e.alpha_train;
    }
    const double pred = sp.solved ? alpha_of(sp.train, d.g) : kNan;
    alpha.add({(long long)p.S, (long long)p.N, (long long)p.n, (long long)p.seed,
               (long long)lp.C, pred, sp.solved ? alpha_of(sp.test, d.g_test) : kNan, alpha_ek,
               st.alpha_train, st.alpha_train_stderr, st.alpha_test, st.alpha_test_stderr,
               alpha_of(sp.gp.train, d.g), std::abs(pred - st.alpha_train) / std::abs(st.alpha_train)});

    const bool rb = st.rb_train_output.size() > 0;
    const bool use_test = d.X_test.rows() > 0;
    const Vec& mean = use_test ? (rb ? st.rb_test_output : st.mean_test_output)
                               : (rb ? st.rb_train_output : st.mean_train_output);
    const Mat& blocks = use_test ? (rb ? st.rb_block_test_means : st.block_test_means)
                                 : (rb ? st.rb_block_train_means : st.block_train_means);
    const Vec& ref = use_test ? sp.gp.test : sp.gp.train;
    const auto m = ensemble_mse(mean, blocks, ref);
    const double sp_gp = sp.solved ? (use_test ? mse(sp.test, sp.gp.test) : mse(sp.train, sp.gp.train))
                                   : kNan;
    mse_t.add({(long long)p.S, (long long)p.N, (long long)p.n, (long long)p.seed,
               (long long)lp.C, (long long)lp.steps, lp.eta, m.raw, m.corrected, m.mc_variance,
               sp_gp, (long long)rb});
    if (m.corrected > 0) by_point[lp.data_index].push_back({double(lp.C), m.corrected});

    for (const auto& g : st.moments)
      moments.add({(long long)p.S, (long long)p.N, (long long)p.n, (long long)p.seed,
                   (long long)lp.C, g.name, g.gamma, g.target_variance, g.mean, g.variance,
                   g.excess_kurtosis, (long long)g.samples});
    write_langevin_extras(run, p, lp);
  }
  for (auto& [k, series] : by_point) {
    std::sort(series.begin(), series.end());
    if (series.size() >= 3) slopes[pts[k].tag()] = gp_convergence_slope(series);
  }
  run.summary["mse_slope"] = slopes;
  run.csv("alpha.csv", alpha);
  run.csv("mse.csv", mse_t);
  run.csv("moments.csv", moments);
}

void spectrum_sweep(Run& run, std::ostream& log) {
  const auto& c = run.cfg;
  const auto pts = data_points(c);
  const auto data = build_data(run, pts);
  const auto lps = run_langevin_points(run, pts, data, log);

  CsvTable q{{"C", "Q", "Q_stderr", "lambda_plus", "c_crit", "S", "N", "n", "seed",
              "lambda_minus", "Q_over_lambda_plus", "in_bulk", "alpha_emp_train"},
             {}};
  json reports = json::array();
  std::map<std::size_t, std::vector<std::array<double, 3>>> curves;
  for (const auto& lp : lps) {
    const auto& p = pts[lp.data_index];
    const std::string tag = point_tag(p, lp.C);
    run.points.push_back(tag);
    if (!lp.ok) continue;
    const auto r = spectral_report(snapshot_hidden_weights(lp.stats), data[lp.data_index].w_star,
                                   p.N, static_cast<double>(p.n), c.solver.sigma2);
    CsvTable eig{{"snapshot_id", "eigenvalue"}, {}};
    for (std::size_t k = 0; k < r.eigenvalues.size(); ++k)
      eig.add({(long long)r.snapshot_ids[k], r.eigenvalues[k]});
    run.csv("eigenvalues_" + tag + ".csv", eig);

    const auto h = freedman_diaconis_histogram(r.eigenvalues);
    CsvTable hist{{"left", "right", "count", "density", "mp_density"}, {}};
    const double total = static_cast<double>(r.eigenvalues.size());
    for (std::size_t b = 0; b < h.counts.size(); ++b) {
      const double mid = 0.5 * (h.edges[b] + h.edges[b + 1]);
      hist.add({h.edges[b], h.edges[b + 1], (long long)h.counts[b],
                h.counts[b] / (total * h.bin_width), mp_density(p.S, lp.C, Vec::Constant(1, mid))(0)});
    }
    run.csv("histogram_" + tag + ".csv", hist);

    q.add({(long long)lp.C, r.Q, r.Q_stderr, r.mp.upper, r.c_crit, (long long)p.S,
           (long long)p.N, (long long)p.n, (long long)p.seed, r.mp.lower, r.Q / r.mp.upper,
           (long long)r.in_bulk, lp.stats.alpha_train});
    json j = to_json(r);
    j["point"] = tag;
    j["ks_distance_bulk"] = mp_ks_distance(r.eigenvalues, p.S, lp.C);
    reports.push_back(j);
    curves[lp.data_index].push_back({double(lp.C), r.Q, r.mp.upper});
    write_langevin_extras(run, p, lp);
  }
  json crossings = json::object();
  for (auto& [k, pts_c] : curves) {
    std::sort(pts_c.begin(), pts_c.end());
    std::vector<double> Cs, Qs, lp;
    for (const auto& a : pts_c) {
      Cs.push_back(a[0]);
      Qs.push_back(a[1]);
      lp.push_back(a[2]);
    }
    const auto x = q_crossing(Cs, Qs, lp);
    const auto& p = pts[k];
    crossings[p.tag()] = {{"crossing", x ? json(*x) : json(nullptr)},
                          {"c_crit", c_crit(p.S, p.N, static_cast<double>(p.n), c.solver.sigma2)}};
  }
  run.summary["q_crossing"] = crossings;
  run.csv("q_sweep.csv", q);
  run.json_file("spectral_reports.json", reports);
}

void phase_retrieval(Run& run) {
  const auto& c = run.cfg;
  const auto pts = data_points(c);
  const auto data = build_data(run, pts);
  const auto sps = solve_points(run, pts, data, false);

  CsvTable per{{"n_over_d", "n", "seed", "test_mse", "train_mse", "converged", "residual"}, {}};
  std::map<double, std::vector<double>> by_ratio;
  std::map<double, long> conv, n_of;
  json reports = json::array();
  for (const auto& sp : sps) {
    const auto& p = pts[sp.data_index];
    const auto& d = data[sp.data_index];
    const double test = sp.solved ? mse(sp.test, d.g_test) : kNan;
    per.add({p.n_over_d, (long long)p.n, (long long)p.seed, test,
             sp.solved ? mse(sp.train, d.g) : kNan, (long long)(sp.solved && sp.sol.converged),
             sp.solved ? sp.sol.residual : kNan});
    if (sp.solved) by_ratio[p.n_over_d].push_back(test);
    conv[p.n_over_d] += sp.solved && sp.sol.converged;
    n_of[p.n_over_d] = p.n;
    reports.push_back(solver_report(c, p, sp));
    run.points.push_back(p.tag());
  }
  CsvTable med{{"n_over_d", "n", "median_test_mse", "seeds", "converged"}, {}};
  json medians = json::object();
  for (const auto& [r, v] : by_ratio) {
    const double m = median(v);
    med.add({r, (long long)n_of[r], m, (long long)v.size(), (long long)conv[r]});
    medians[format_double(r)] = m;
  }
  run.summary["median_test_mse"] = medians;
  run.csv("phase_mse.csv", per);
  run.csv("phase_median.csv", med);
  run.json_file("solver_reports.json", reports);
}

}  // namespace

fs::path run_directory(const ExperimentConfig& config) {
  return fs::path(config.output) / to_string(config.experiment) / config_hash(config.canonical);
}

int run_experiment(const ExperimentConfig& config, std::ostream& log) {
  const auto t0 = std::chrono::steady_clock::now();
  Run run(config);
  log << "running " << to_string(config.experiment) << " (config " << run.hash << ", "
      << worker_count() << " workers)\n";
  switch (config.experiment) {
    case Experiment::gp_baseline: gp_baseline(run); break;
    case Experiment::saddle_solve: saddle_solve(run, false); break;
    case Experiment::diagnostics: saddle_solve(run, true); break;
    case Experiment::ek_sweep: ek_sweep(run); break;
    case Experiment::langevin_sweep: langevin_sweep(run, log); break;
    case Experiment::spectrum_sweep: spectrum_sweep(run, log); break;
    case Experiment::phase_retrieval: phase_retrieval(run); break;
  }
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return run.finish(wall, log);
}

namespace {

std::vector<fs::path> find_manifests(const fs::path& dir) {
  std::vector<fs::path> out;
  if (fs::is_regular_file(dir / "manifest.json")) return {dir / "manifest.json"};
  if (fs::is_directory(dir))
    for (const auto& e : fs::recursive_directory_iterator(dir))
      if (e.is_regular_file() && e.path().filename() == "manifest.json") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

long actual_rows(const fs::path& path, const std::string& kind) {
  if (!fs::exists(path)) return -1;
  if (kind == "csv") return static_cast<long>(read_csv(path).rows.size());
  if (kind == "matrices") return static_cast<long>(read_matrices(path).size());
  if (kind == "dataset") {
    const auto m = read_matrices(path);
    return m.empty() ? -1 : static_cast<long>(m.front().rows());
  }
  const json j = read_json(path);
  return j.is_array() ? static_cast<long>(j.size()) : 1;
}

}  // namespace

int report(const fs::path& dir, std::ostream& out) {
  const auto manifests = find_manifests(dir);
  if (manifests.empty()) throw Error("no manifest found under " + dir.string());
  int code = exit_ok;
  for (const auto& mpath : manifests) {
    const json m = read_json(mpath);
    const fs::path base = mpath.parent_path();
    out << "== " << m.at("experiment").get<std::string>() << "  " << m.at("config_hash").get<std::string>()
        << "  status=" << m.at("status").get<std::string>() << "  wall=" << std::fixed
        << std::setprecision(1) << m.at("wall_seconds").get<double>() << "s" << std::defaultfloat
        << "  points=" << m.at("points").size() << "\n";
    long total = 0;
    out << "  " << std::left << std::setw(48) << "file" << std::right << std::setw(10) << "rows"
        << std::setw(10) << "found" << "\n";
    for (const auto& f : m.at("files")) {
      const auto name = f.at("name").get<std::string>();
      const long rows = f.at("rows").get<long>();
      const long found = actual_rows(base / name, f.at("kind").get<std::string>());
      total += rows;
      out << "  " << std::left << std::setw(48) << name << std::right << std::setw(10) << rows
          << std::setw(10) << found << (found == rows ? "" : "  MISMATCH") << "\n";
      if (found != rows) code = exit_usage;
    }
    out << "  total rows " << total << "\n";
    if (!m.at("summary").empty()) out << "  summary " << m.at("summary").dump() << "\n";
    if (!m.at("divergence").empty()) out << "  divergence " << m.at("divergence").dump() << "\n";
  }
  return code;
}

}  // namespace selfcons::cli
