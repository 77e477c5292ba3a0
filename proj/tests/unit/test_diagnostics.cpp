#include "helpers.hpp"

#include "selfcons/diagnostics.hpp"

#include <doctest.h>

#include <cmath>

using namespace selfcons;
using namespace testing;

namespace {

QuadSaddleModel quad_model(int d, int M, int n, std::uint64_t seed, Vec* g) {
  const QuadArch arch{d, M, 1.0};
  const InputMatrix X = sample_inputs(n, d, Measure::hypersphere(), seed);
  *g = quadratic_teacher_targets(make_quadratic_teacher(d, seed + 1), 1.0, X);
  return QuadSaddleModel(arch, X);
}

}  // namespace

TEST_CASE("simple criterion") {
  CHECK(sp_criterion_simple(Vec::Constant(650, 0.5), 0.5, 650) == doctest::Approx(650.0));
  Rng rng(130);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = uniform_int(rng, 1, 50);
    const double s2 = 0.01 + rng.uniform();
    const Vec dg = random_vector(rng, n);
    const double one = sp_criterion_simple(dg, s2, n);
    CHECK(sp_criterion_simple(dg, s2, 3 * n) == doctest::Approx(3 * one).epsilon(1e-14));
    CHECK(sp_criterion_simple(Vec(-dg), s2, n) == doctest::Approx(one).epsilon(1e-14));
  }
  // median of (dg / sigma2)^2 over {1, 4, 9}
  CHECK(sp_criterion_simple(Vec((Vec(3) << 1, -3, 2).finished()), 1.0, 10) == doctest::Approx(40.0));
}

TEST_CASE("worked estimate: n = 650, discrepancy 0.3") {
  // O(g) = 3, dg = 0.1 g: n (dg/sigma2)^2 = 58.5, correction about 1/60, about 5% of 0.3
  const double n = 650, u = 0.3;
  CHECK(1.0 / (n * u * u) == doctest::Approx(1.0 / 60).epsilon(0.03));
  const double err = sp_heuristic_error(u, n);
  MESSAGE("relative error " << err);
  CHECK(err == doctest::Approx(0.057).epsilon(0.01));
  CHECK(err > 0.04);
  CHECK(err < 0.06);
  CHECK(sp_heuristic_error(u, n, 2.0) == doctest::Approx(2 * err));
  CHECK(std::isinf(sp_heuristic_error(0.0, n)));
}

TEST_CASE("leading correction vanishes in the GP limit and as 1/M") {
  Vec g;
  const auto base = quad_model(4, 8, 9, 131, &g);
  const GpLimitModel gp(KernelSpec::quad(base.arch()), base.X());
  const auto sol_gp = solve_saddle(gp, g, 0.3);
  CHECK(sp_correction_leading(gp, sol_gp).cwiseAbs().maxCoeff() == 0.0);

  // fixed sigma2 M so the Gaussian part is width independent in dual units
  std::vector<double> norms;
  for (int M : {100, 1000, 10000}) {
    const QuadSaddleModel model(QuadArch{4, M, 1.0}, base.X());
    const auto sol = solve_saddle(model, g, 30.0 / M);
    REQUIRE(sol.converged);
    norms.push_back((sol.sigma2 * sp_correction_leading(model, sol)).norm());
  }
  MESSAGE("correction norms " << norms[0] << " " << norms[1] << " " << norms[2]);
  CHECK(norms[1] / norms[0] == doctest::Approx(0.1).epsilon(0.2));
  CHECK(norms[2] / norms[1] == doctest::Approx(0.1).epsilon(0.05));
}

TEST_CASE("analytic second-derivative contraction against nested finite differences") {
  Rng rng(132);
  for (int trial = 0; trial < 20; ++trial) {
    Vec g;
    const auto model = quad_model(uniform_int(rng, 2, 5), uniform_int(rng, 8, 30), uniform_int(rng, 2, 6),
                                  140 + trial, &g);
    const auto sol = solve_saddle(model, g, 0.5);
    REQUIRE(sol.converged);
    const Mat A = random_matrix(rng, model.n(), model.n());
    const Mat W = A * A.transpose();
    const Vec analytic = model.second_derivative_contraction(sol.dual, W);
    const Vec fd = model.SaddleModel::second_derivative_contraction(sol.dual, W);
    CHECK(rel_err(analytic, fd) < 1e-4);
  }
}

TEST_CASE("verdicts follow the documented thresholds") {
  Vec g;
  const auto model = quad_model(4, 16, 12, 150, &g);
  const GpLimitModel gp(KernelSpec::quad(model.arch()), model.X());

  // gaussian model: no correction, so the simple criterion alone decides
  const auto tight = solve_saddle(gp, g, 1e-4);
  const auto r_valid = sp_validity(gp, tight, g);
  CHECK(r_valid.criterion_full == 0.0);
  CHECK(r_valid.criterion_simple >= 10.0);
  CHECK(r_valid.verdict == Verdict::valid);

  ValidityThresholds strict;
  strict.min_simple = 2.0 * r_valid.criterion_simple;
  CHECK(sp_validity(gp, tight, g, strict).verdict == Verdict::marginal);
  strict.invalid_simple = 1.5 * r_valid.criterion_simple;
  CHECK(sp_validity(gp, tight, g, strict).verdict == Verdict::invalid);

  const auto r = sp_validity(model, solve_saddle(model, g, 0.05), g);
  CHECK(r.criterion_simple_min <= r.criterion_simple);
  CHECK(r.correction.size() == 12);
  CHECK(r.criterion_full > 0.0);
  CHECK(to_string(r.verdict).size() > 0);
}

TEST_CASE("convergence slope") {
  std::vector<std::pair<double, double>> sq, lin;
  for (double C : {16.0, 32.0, 64.0, 128.0, 256.0}) {
    sq.emplace_back(C, 3.0 / (C * C));
    lin.emplace_back(C, 3.0 / C);
  }
  CHECK(gp_convergence_slope(sq) == doctest::Approx(-2.0).epsilon(1e-12));
  CHECK(gp_convergence_slope(lin) == doctest::Approx(-1.0).epsilon(1e-12));
  // only the largest-C half enters
  auto bent = sq;
  bent[0].second = 1.0;
  CHECK(gp_convergence_slope(bent) == doctest::Approx(-2.0).epsilon(1e-12));

  CHECK_THROWS_AS(gp_convergence_slope({{1, 1}, {2, 1}}), ArgumentError);
  CHECK_THROWS_AS(gp_convergence_slope({{1, 1}, {2, 0}, {3, 1}}), ArgumentError);
  CHECK_THROWS_AS(gp_convergence_slope({{1, 1}, {3, 1}, {2, 1}}), ArgumentError);
}
