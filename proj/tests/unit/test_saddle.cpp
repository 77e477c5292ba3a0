#include "helpers.hpp"

#include "selfcons/datagen.hpp"
#include "selfcons/saddle.hpp"

#include <Eigen/LU>
#include <doctest.h>

#include <limits>

using namespace selfcons;
using namespace testing;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Instance {
  InputMatrix X, Xt;
  Vec g;
};

Instance cnn_instance(const CnnArch& arch, int n, int nt, std::uint64_t seed) {
  Instance in;
  in.X = sample_inputs(n, arch.d(), Measure::gaussian_unit(), derive_seed(seed, "train"));
  if (nt > 0) in.Xt = sample_inputs(nt, arch.d(), Measure::gaussian_unit(), derive_seed(seed, "test"));
  CnnArch t = arch;
  t.C = 1;
  const auto teacher = make_cnn_teacher(t, derive_seed(seed, "teacher"));
  in.g = eval_cnn(t, teacher, in.X);
  return in;
}

Instance quad_instance(const QuadArch& arch, int n, int nt, std::uint64_t seed) {
  Instance in;
  in.X = sample_inputs(n, arch.d, Measure::hypersphere(), derive_seed(seed, "train"));
  if (nt > 0) in.Xt = sample_inputs(nt, arch.d, Measure::hypersphere(), derive_seed(seed, "test"));
  const Vec w = make_quadratic_teacher(arch.d, derive_seed(seed, "teacher"));
  in.g = quadratic_teacher_targets(w, arch.sigma_w2, in.X);
  return in;
}

// Quadratic-model Delta g from the generating function as printed, with a dense inverse.
Vec printed_quad_delta_g(const Vec& v, const InputMatrix& X, const QuadArch& a,
                         const InputMatrix& Xe) {
  Mat B = Mat::Identity(a.d, a.d);
  for (Eigen::Index m = 0; m < X.rows(); ++m)
    B -= (2.0 * a.sigma_w2 / a.M) * v(m) * X.row(m).transpose() * X.row(m);
  const Mat Binv = B.fullPivLu().inverse();
  const Mat Kc = (Xe * X.transpose()).array().square().matrix() * (2.0 * a.sigma_w2 * a.sigma_w2 / a.M);
  Vec out(Xe.rows());
  for (Eigen::Index k = 0; k < Xe.rows(); ++k) {
    const Vec x = Xe.row(k).transpose();
    out(k) = -(Kc.row(k) * v)(0) + a.sigma_w2 * x.dot(Binv * x) - a.sigma_w2 * x.squaredNorm();
  }
  return out;
}

}  // namespace

TEST_CASE("gaussian model: one iteration, plain GP discrepancies and test mean") {
  const CnnArch arch{3, 4, 1, 1.0, 1.0};
  const auto in = cnn_instance(arch, 15, 6, 1);
  const GpLimitModel model(KernelSpec::cnn(arch), in.X);
  const auto sol = solve_saddle(model, in.g, 0.3);
  CHECK(sol.converged);
  CHECK(sol.iterations <= 1);
  const auto fit = fit_gp(model.K(), 0.3, in.g);
  CHECK(rel_err(sol.discrepancies.values, gp_discrepancies_train(fit).values) < 1e-12);
  const Vec mean = gp_mean_test(fit, model.cross_gram(in.Xt));
  CHECK(rel_err(predict_test(sol, model, in.Xt), mean) < 1e-12);
}

TEST_CASE("quad model at M = 1e9 reproduces the plain GP") {
  const QuadArch huge{6, 1000000000, 1.0};
  const auto in = quad_instance(huge, 12, 8, 2);
  const QuadSaddleModel model(huge, in.X);
  const auto sol = solve_saddle(model, in.g, 0.1);
  REQUIRE(sol.converged);
  const auto fit = fit_gp(model.K(), 0.1, in.g);
  CHECK(rel_err(predict_test(sol, model, in.Xt), gp_mean_test(fit, model.cross_gram(in.Xt))) < 1e-6);
}

TEST_CASE("interpolation as sigma2 -> 0") {
  SUBCASE("quad") {
    const QuadArch arch{6, 24, 1.0};
    const auto in = quad_instance(arch, 5, 0, 3);
    const QuadSaddleModel model(arch, in.X);
    SaddleConfig cfg;
    cfg.method = SaddleMethod::newton_krylov;
    const auto sol = solve_saddle(model, in.g, 1e-8, cfg);
    REQUIRE(sol.converged);
    CHECK(rel_err(predict_test(sol, model, in.X), in.g) < 1e-6);
  }
  SUBCASE("cnn") {
    const CnnArch arch{4, 5, 4, 1.0, 1.0};
    const auto in = cnn_instance(arch, 6, 0, 4);
    const CnnSaddleModel model(arch, in.X);
    SaddleConfig cfg;
    cfg.method = SaddleMethod::newton_krylov;
    const auto sol = solve_saddle(model, in.g, 1e-8, cfg);
    REQUIRE(sol.converged);
    CHECK(rel_err(predict_test(sol, model, in.X), in.g) < 1e-6);
  }
}

TEST_CASE("quad model against an independent damped fixed point") {
  const QuadArch arch{5, 20, 1.0};
  const auto in = quad_instance(arch, 8, 6, 5);
  const double s2 = 0.5;
  const QuadSaddleModel model(arch, in.X);
  const auto sol = solve_saddle(model, in.g, s2);
  REQUIRE(sol.converged);

  const Mat K = model.K();
  Mat Kt = K;
  Kt.diagonal().array() += s2;
  const Mat Ktinv = Kt.fullPivLu().inverse();
  Vec dg = in.g - K * Ktinv * in.g;
  for (int it = 0; it < 5000; ++it) {
    const Vec shift = printed_quad_delta_g(Vec(dg / s2), in.X, arch, in.X);
    const Vec next = (in.g - shift) - K * Ktinv * (in.g - shift);
    const double change = (next - dg).norm();
    dg = 0.5 * dg + 0.5 * next;
    if (change < 1e-15 * dg.norm()) break;
  }
  CHECK(rel_err(sol.discrepancies.values, dg) < 1e-8);

  const Vec shift = printed_quad_delta_g(Vec(dg / s2), in.X, arch, in.X);
  const Mat Kc = (in.Xt * in.X.transpose()).array().square().matrix() * (2.0 * arch.sigma_w2 * arch.sigma_w2 / arch.M);
  const Vec oracle = printed_quad_delta_g(Vec(dg / s2), in.X, arch, in.Xt) + Kc * Ktinv * (in.g - shift);
  CHECK(rel_err(predict_test(sol, model, in.Xt), oracle) < 1e-8);
}

TEST_CASE("self-consistency of returned solutions (property)") {
  Rng rng(90);
  int converged = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = uniform_int(rng, 2, 10);
    const double s2 = 0.1 + 0.9 * rng.uniform();
    std::unique_ptr<SaddleModel> model;
    Vec g;
    if (trial % 2 == 0) {
      const CnnArch arch{uniform_int(rng, 1, 4), uniform_int(rng, 1, 5), uniform_int(rng, 4, 64), 1.0, 1.0};
      const auto in = cnn_instance(arch, n, 0, 900 + trial);
      model = std::make_unique<CnnSaddleModel>(arch, in.X);
      g = in.g;
    } else {
      const int d = uniform_int(rng, 2, 6);
      const QuadArch arch{d, uniform_int(rng, 2 * d, 8 * d), 1.0};
      const auto in = quad_instance(arch, n, 0, 900 + trial);
      model = std::make_unique<QuadSaddleModel>(arch, in.X);
      g = in.g;
    }
    SaddleConfig cfg;
    cfg.method = trial % 4 < 2 ? SaddleMethod::damped_fixed_point : SaddleMethod::newton_krylov;
    const auto sol = solve_saddle(*model, g, s2, cfg);
    if (!sol.converged) continue;
    ++converged;
    CHECK(sol.residual <= cfg.tol);
    // one more full iteration, computed here
    const Mat K = model->K();
    Mat Kt = K;
    Kt.diagonal().array() += s2;
    const Vec r = g - model->delta_g(Vec(sol.discrepancies.values / s2));
    const Vec again = r - K * Kt.fullPivLu().solve(r);
    CHECK((again - sol.discrepancies.values).norm() <= 1e-9 * sol.discrepancies.values.norm());
  }
  CHECK(converged >= 95);
}

TEST_CASE("distance to the GP shrinks as the width grows") {
  SUBCASE("cnn") {
    const CnnArch base{3, 4, 1, 1.0, 1.0};
    const auto in = cnn_instance(base, 10, 0, 6);
    const auto gp = fit_gp(gram(KernelSpec::cnn(base), in.X), 0.2, in.g);
    const Vec ref = gp_discrepancies_train(gp).values;
    double prev = kInf;
    for (int C : {2, 8, 32, 128, 512, 2048}) {
      CnnArch a = base;
      a.C = C;
      const CnnSaddleModel model(a, in.X);
      SaddleConfig cfg;
      cfg.method = SaddleMethod::newton_krylov;
      const auto sol = solve_saddle(model, in.g, 0.2, cfg);
      REQUIRE(sol.converged);
      const double dist = (sol.discrepancies.values - ref).norm();
      CHECK(dist < prev);
      prev = dist;
    }
  }
  SUBCASE("quad") {
    const QuadArch base{4, 8, 1.0};
    const auto in = quad_instance(base, 9, 0, 7);
    double prev = kInf;
    // the quad kernel scales as 1/M, so compare each width with its own GP
    // (Delta g relative to the GP mean is O(|g| / (sigma2 M)))
    for (int M : {8, 32, 128, 512, 2048}) {
      const QuadArch a{4, M, 1.0};
      const QuadSaddleModel model(a, in.X);
      const double s2 = 0.2;
      const Vec ref = gp_discrepancies_train(fit_gp(model.K(), s2, in.g)).values;
      const auto sol = solve_saddle(model, in.g, s2);
      REQUIRE(sol.converged);
      const double dist = (sol.discrepancies.values - ref).norm() / ref.norm();
      CHECK(dist < prev);
      prev = dist;
    }
  }
}

TEST_CASE("annealing trace") {
  const QuadArch arch{6, 24, 1.0};
  const auto in = quad_instance(arch, 20, 0, 8);
  const QuadSaddleModel model(arch, in.X);
  SaddleConfig cfg;
  cfg.method = SaddleMethod::newton_krylov;
  const auto sol = solve_saddle(model, in.g, 1e-4, cfg);
  REQUIRE(sol.anneal_trace.size() == 12);
  CHECK(sol.anneal_trace.front().sigma2 == doctest::Approx(1.0));
  CHECK(sol.anneal_trace.back().sigma2 == doctest::Approx(1e-4));
  for (std::size_t k = 0; k < sol.anneal_trace.size(); ++k) {
    const auto& st = sol.anneal_trace[k];
    CHECK(std::isfinite(st.start_residual));
    if (k > 0) CHECK(st.sigma2 < sol.anneal_trace[k - 1].sigma2);
  }
  CHECK(sol.anneal_trace.back().final_residual <= cfg.tol);
  CHECK(sol.converged);

  const auto sched = default_annealing(2.76e-6);
  CHECK(sched.size() == 12);
  CHECK(sched.back() == 2.76e-6);
  cfg.annealing = {1.0, 0.5};
  CHECK_THROWS_AS(solve_saddle(model, in.g, 0.1, cfg), ArgumentError);
  cfg.annealing = {0.1, 0.5, 0.1};
  CHECK_THROWS_AS(solve_saddle(model, in.g, 0.1, cfg), ArgumentError);
}

TEST_CASE("non-convergence is reported, not thrown") {
  const QuadArch arch{6, 24, 1.0};
  const auto in = quad_instance(arch, 20, 0, 8);
  const QuadSaddleModel model(arch, in.X);
  SaddleConfig cfg;
  cfg.max_iter = 1;
  cfg.annealing = {1e-4};
  const auto sol = solve_saddle(model, in.g, 1e-4, cfg);
  CHECK_FALSE(sol.converged);
  CHECK(std::isfinite(sol.residual));
  CHECK(sol.discrepancies.values.allFinite());
  CHECK(sol.status.find("not converged") != std::string::npos);
}

// ---------------------------------------------------------------- EK limit

TEST_CASE("EK root in the C -> infinity limit") {
  Rng rng(91);
  for (int trial = 0; trial < 100; ++trial) {
    const double lambda = std::exp(-8.0 * rng.uniform()), n = 1.0 + 1000.0 * rng.uniform();
    const double s2 = 0.01 + rng.uniform(), q = 2.0 * rng.uniform();
    const double s = s2 / n;
    const double expect = s / (lambda + s) + (1.0 - q) * lambda / (lambda + s);
    if (expect < 0.0) continue;
    const auto exact = ek_alpha_solve(lambda, n, s2, kInf, q, q);
    REQUIRE(exact.found);
    CHECK(exact.alpha_train == doctest::Approx(expect).epsilon(1e-12));
    // at C = 1e18 the cubic term is lambda^2 / C (alpha / s)^3, tiny but not zero when s is small
    const auto sol = ek_alpha_solve(lambda, n, s2, 1e18, q, q);
    REQUIRE(sol.found);
    const double cubic = lambda * lambda / 1e18 * std::pow(expect / s, 3);
    CHECK(std::abs(sol.alpha_train - expect) <= 1e-12 + 10.0 * cubic);
  }
}

TEST_CASE("EK golden value") {
  const auto sol = ek_alpha_solve(1.0 / 900, 200, 1.0, kInf, 1.0, 1.0);
  CHECK(sol.alpha_train == doctest::Approx(0.818).epsilon(5e-4 / 0.818));
}

TEST_CASE("finite-C EK root against a damped iteration of the scalar map") {
  const double lambda = 1.0 / 900, n = 200, s2 = 1.0;
  for (double C : {30.0, 100.0, 1000.0}) {
    for (double q : {1.0, 2.4255}) {
      const auto sol = ek_alpha_solve(lambda, n, s2, C, q, q);
      REQUIRE(sol.found);
      double a = ek_alpha_rhs(0.0, lambda, n, s2, kInf, q);
      for (int it = 0; it < 100000; ++it) {
        const double next = 0.5 * a + 0.5 * ek_alpha_rhs(a, lambda, n, s2, C, q);
        if (next == a) break;
        a = next;
      }
      CHECK(std::abs(sol.alpha_train - a) <= 1e-12);
      CHECK(sol.alpha_test == doctest::Approx(sol.alpha_train).epsilon(1e-12));
    }
  }
}

TEST_CASE("EK test alpha uses the train root with q_test") {
  const double lambda = 1.0 / 900, n = 200, s2 = 1.0, C = 50;
  const auto sol = ek_alpha_solve(lambda, n, s2, C, 2.4, 1.7);
  REQUIRE(sol.found);
  CHECK(sol.alpha_test == doctest::Approx(ek_alpha_rhs(sol.alpha_train, lambda, n, s2, C, 1.7)).epsilon(1e-14));
}

TEST_CASE("EK root stays below the pole (property)") {
  Rng rng(92);
  for (int trial = 0; trial < 100; ++trial) {
    const double lambda = std::exp(-8.0 * rng.uniform()), n = 1.0 + 1000.0 * rng.uniform();
    const double s2 = 0.01 + rng.uniform(), C = 1.0 + 500.0 * rng.uniform();
    const double q = 3.0 * rng.uniform();
    const auto sol = ek_alpha_solve(lambda, n, s2, C, q, q);
    CHECK(sol.alpha_pole == doctest::Approx(ek_alpha_pole(lambda, n, s2, C)).epsilon(1e-15));
    CHECK(sol.alpha_pole == doctest::Approx(s2 / n * std::sqrt(C / lambda)).epsilon(1e-14));
    if (!sol.found) {
      CHECK_FALSE(sol.branch_report.empty());
      continue;
    }
    CHECK(sol.alpha_train >= 0.0);
    CHECK(sol.alpha_train < sol.alpha_pole);
  }
}

TEST_CASE("empirical q") {
  const double lambda = 1.0 / 900, n = 200, s2 = 1.0, s = s2 / n;
  const Vec g = Vec::LinSpaced(7, -1.0, 2.0);
  CHECK(estimate_q_empirical(Vec::Zero(7), g, lambda, n, s2) == doctest::Approx(0.0));
  const Vec pure = g * (1.0 - s / (lambda + s));
  CHECK(estimate_q_empirical(pure, g, lambda, n, s2) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS(estimate_q_empirical(g, Vec::Zero(7), lambda, n, s2));
}

TEST_CASE("empirical q on an N = S = 30, n = 200 CNN") {
  const CnnArch arch{30, 30, 1, 1.0, 1.0};
  double mean = 0.0;
  for (int seed = 0; seed < 5; ++seed) {
    const auto in = cnn_instance(arch, 200, 0, 930 + seed);
    const auto fit = fit_gp(gram(KernelSpec::cnn(arch), in.X), 1.0, in.g);
    const Vec f = in.g - gp_discrepancies_train(fit).values;
    mean += estimate_q_empirical(f, in.g, arch.lambda(), 200, 1.0) / 5.0;
  }
  CHECK(mean == doctest::Approx(2.90).epsilon(0.03));
}

TEST_CASE("analytic q_train") {
  const auto a = analytic_q_train(1.0 / 900, 200, 1.0);
  CHECK(a.alpha_train == doctest::Approx(0.559).epsilon(2e-3 / 0.559));
  CHECK(a.q_train == doctest::Approx(2.4255).epsilon(0.01 / 2.4255));

  const double lambda = 1.0 / 900;
  const auto far = analytic_q_train(lambda, 1e12, 1.0);
  CHECK(far.alpha_train < 1e-8);
  CHECK(far.q_train == doctest::Approx((lambda + 1e-12) / lambda).epsilon(1e-7));

  Rng rng(93);
  for (int trial = 0; trial < 100; ++trial) {
    const double l = std::exp(-8.0 * rng.uniform()), n = 1.0 + 1000.0 * rng.uniform();
    const double s2 = 0.01 + rng.uniform();
    const auto r = analytic_q_train(l, n, s2);
    if (r.q_train < 0.0) continue;
    const auto back = ek_alpha_solve(l, n, s2, kInf, r.q_train, r.q_train);
    REQUIRE(back.found);
    CHECK(std::abs(back.alpha_train - r.alpha_train) <= 1e-12);
  }
}

TEST_CASE("quad EK: closed-form asymptote and the linearized beta relation") {
  const double d = 100, s2 = 1.0;
  const auto e = ek_parameters(QuadArch{100, 400, 1.0});
  for (double ratio : {1e3, 1e4, 1e5}) {
    const double n = ratio * s2 / e.lambda0;
    const auto q = ek_quad_asymptotics(e.lambda0, e.lambda2, n, s2, d);
    CHECK(q.converged);
    CHECK(q.alpha_closed == doctest::Approx(5.0 / 18.0 / ratio));
    CHECK(q.beta_closed == doctest::Approx(4.0 / 18.0 / ratio));
    CHECK(q.asymptotic_regime == (ratio >= 1e2));
    const auto [r1, r2] = quad_ek_residual(q.alpha, q.beta, e.lambda0, e.lambda2, n, s2, d);
    CHECK(std::abs(r1) < 1e-10);
    CHECK(std::abs(r2) < 1e-10);
    const double rel = q.beta - (-q.alpha - q.alpha / (d * (1 - q.alpha)) + s2 / (2 * e.lambda0 * n));
    CHECK(std::abs(q.beta_relation_error - std::abs(rel) / std::abs(q.beta)) < 1e-12);
    CHECK(q.beta_relation_error < 0.01);
  }
}
