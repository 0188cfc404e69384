#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "doctest.h"

#include "ctsl/rng.hpp"
#include "ctsl/survival.hpp"

using namespace ctsl;
using namespace ctsl::survival;

namespace {

struct Problem {
  Eigen::MatrixXd x;
  Eigen::VectorXd time;
  Eigen::VectorXi event;
};

Problem random_problem(int n, int p, std::uint64_t seed) {
  Rng rng(seed);
  Problem pr{Eigen::MatrixXd(n, p), Eigen::VectorXd(n), Eigen::VectorXi(n)};
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < p; ++j) pr.x(i, j) = rng.normal();
    pr.time[i] = std::round(rng.exponential(1.0) * 4.0) / 4.0 + 0.25;  // coarse, so ties occur
    pr.event[i] = rng.uniform() < 0.7 ? 1 : 0;
  }
  pr.event[0] = 1;
  return pr;
}

// Exponential hazards exp(beta x) with independent exponential censoring.
Problem exponential_data(int n, double beta, double censor_rate, std::uint64_t seed) {
  Rng rng(seed);
  Problem pr{Eigen::MatrixXd(n, 1), Eigen::VectorXd(n), Eigen::VectorXi(n)};
  for (int i = 0; i < n; ++i) {
    const double xi = rng.normal();
    const double t = rng.exponential(std::exp(beta * xi));
    const double c = rng.exponential(censor_rate);
    pr.x(i, 0) = xi;
    pr.time[i] = std::min(t, c);
    pr.event[i] = t <= c ? 1 : 0;
  }
  return pr;
}

}  // namespace

TEST_CASE("objective at zero for two subjects is log 2") {
  Eigen::MatrixXd x(2, 1);
  x << 1.0, 0.0;
  Eigen::VectorXd t(2);
  t << 1.0, 2.0;
  Eigen::VectorXi e(2);
  e << 1, 1;
  CHECK(cox_objective(x, t, e, Eigen::VectorXd::Zero(1), 0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  // first failure has x = 1, so the likelihood rewards beta > 0
  Eigen::VectorXd g;
  cox_objective(x, t, e, Eigen::VectorXd::Zero(1), 0.0, &g);
  CHECK(g[0] == doctest::Approx(-0.5).epsilon(1e-15));
  // penalty enters as lambda |theta|^2
  Eigen::VectorXd th(1);
  th << 0.5;
  const double base = std::log(std::exp(0.5) + 1.0) - 0.5;
  CHECK(cox_objective(x, t, e, th, 0.2) == doctest::Approx(base + 0.2 * 0.25).epsilon(1e-14));
}

TEST_CASE("Breslow ties: tied events share the risk set") {
  Eigen::MatrixXd x(3, 1);
  x << 1.0, 0.0, 2.0;
  Eigen::VectorXd t(3);
  t << 1.0, 1.0, 3.0;
  Eigen::VectorXi e(3);
  e << 1, 1, 0;
  Eigen::VectorXd th(1);
  th << 0.3;
  const double denom = std::exp(0.3) + 1.0 + std::exp(0.6);
  const double expected = -(0.3 + 0.0) + 2.0 * std::log(denom);
  CHECK(cox_objective(x, t, e, th, 0.0) == doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("objective gradient and Hessian match finite differences") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Problem p = random_problem(10, 3, seed);
    Rng rng(seed + 100);
    Eigen::VectorXd th(3);
    for (int j = 0; j < 3; ++j) th[j] = rng.normal(0.0, 0.5);
    Eigen::VectorXd g;
    Eigen::MatrixXd h;
    cox_objective(p.x, p.time, p.event, th, 0.1, &g, &h);
    Eigen::VectorXd num(3);
    Eigen::MatrixXd num_h(3, 3);
    const double step = 1e-5;
    for (int j = 0; j < 3; ++j) {
      Eigen::VectorXd up = th, down = th;
      up[j] += step;
      down[j] -= step;
      num[j] = (cox_objective(p.x, p.time, p.event, up, 0.1) - cox_objective(p.x, p.time, p.event, down, 0.1)) /
               (2 * step);
      Eigen::VectorXd gu, gd;
      cox_objective(p.x, p.time, p.event, up, 0.1, &gu);
      cox_objective(p.x, p.time, p.event, down, 0.1, &gd);
      num_h.col(j) = (gu - gd) / (2 * step);
    }
    CHECK((g - num).norm() / num.norm() < 1e-5);
    CHECK((h - num_h).norm() / num_h.norm() < 1e-5);
  }
}

TEST_CASE("all-zero covariates give theta = 0") {
  Problem p = random_problem(20, 3, 7);
  p.x.setZero();
  CoxConfig cfg;
  cfg.filter = false;
  // constant columns cannot be standardised, so zero design goes in unfiltered
  // and unscaled through the objective
  Eigen::VectorXd g;
  cox_objective(p.x, p.time, p.event, Eigen::VectorXd::Zero(3), 0.01, &g);
  CHECK(g.lpNorm<Eigen::Infinity>() == 0.0);
  cfg.filter = true;
  const CoxModel m = fit_cox(p.x, p.time, p.event, cfg);
  CHECK(m.kept.empty());
  CHECK(m.raw_coefficients().isZero());
  CHECK(predict_risk(m, std::vector<double>{1.0, -2.0, 3.0}) == 0.0);
}

TEST_CASE("Newton iterations descend monotonically and converge") {
  const Problem p = random_problem(60, 4, 8);
  CoxConfig cfg;
  cfg.filter = false;
  const CoxModel m = fit_cox(p.x, p.time, p.event, cfg);
  CHECK(m.converged);
  REQUIRE(m.objective_trace.size() >= 2);
  for (std::size_t i = 1; i < m.objective_trace.size(); ++i) CHECK(m.objective_trace[i] <= m.objective_trace[i - 1]);
  Eigen::VectorXd g;
  cox_objective(m.standardize(p.x), p.time, p.event, m.theta, m.penalizer, &g);
  CHECK(g.lpNorm<Eigen::Infinity>() < 1e-6);
}

TEST_CASE("coefficient recovery on exponential hazards") {
  // censoring rate 0.25 against unit-median hazards gives about 20% censoring
  const Problem p = exponential_data(500, 1.0, 0.25, 9);
  const double censored = 1.0 - double(p.event.sum()) / 500.0;
  MESSAGE("censored fraction " << censored);
  CHECK(censored > 0.12);
  CHECK(censored < 0.28);
  CoxConfig cfg;
  cfg.filter = false;
  const CoxModel m = fit_cox(p.x, p.time, p.event, cfg);
  const double beta = m.raw_coefficients()[0];
  MESSAGE("beta hat " << beta);
  CHECK(beta >= 0.8);
  CHECK(beta <= 1.2);
}

TEST_CASE("fit errors") {
  Problem p = random_problem(10, 2, 10);
  p.event.setZero();
  CHECK_THROWS_AS(fit_cox(p.x, p.time, p.event), std::invalid_argument);
  Problem q = random_problem(10, 2, 11);
  q.x(3, 1) = std::nan("");
  CHECK_THROWS_AS(fit_cox(q.x, q.time, q.event), std::invalid_argument);
  CoxModel empty;
  CHECK_THROWS(predict_risk(empty, std::vector<double>{1.0}));
  const CoxModel m = fit_cox(random_problem(10, 2, 12).x, random_problem(10, 2, 12).time,
                             random_problem(10, 2, 12).event);
  CHECK_THROWS_AS(predict_risk(m, std::vector<double>{1.0}), std::invalid_argument);
}

TEST_CASE("risk prediction arithmetic") {
  Eigen::VectorXd th(2);
  th << 1.0, -1.0;
  Eigen::VectorXd z(2);
  z << 0.5, 0.25;
  CHECK(linear_predictor(th, z) == 0.25);
  CHECK(linear_predictor(2.0 * th, z) == 0.5);
  CHECK(linear_predictor(Eigen::VectorXd::Zero(2), z) == 0.0);
}

TEST_CASE("risk ranking ignores positive rescaling of a raw feature") {
  Problem p = random_problem(40, 3, 13);
  CoxConfig cfg;
  cfg.filter = false;
  const CoxModel a = fit_cox(p.x, p.time, p.event, cfg);
  Eigen::MatrixXd scaled = p.x;
  scaled.col(1) *= 37.5;
  const CoxModel b = fit_cox(scaled, p.time, p.event, cfg);
  const Eigen::VectorXd ra = predict_risk(a, p.x), rb = predict_risk(b, scaled);
  std::vector<int> ia(40), ib(40);
  std::iota(ia.begin(), ia.end(), 0);
  std::iota(ib.begin(), ib.end(), 0);
  std::sort(ia.begin(), ia.end(), [&](int i, int j) { return ra[i] < ra[j]; });
  std::sort(ib.begin(), ib.end(), [&](int i, int j) { return rb[i] < rb[j]; });
  CHECK(ia == ib);
  CHECK((ra - rb).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("correlation filter") {
  Rng rng(14);
  Eigen::MatrixXd x(200, 6);
  for (int i = 0; i < 200; ++i)
    for (int j = 0; j < 6; ++j) x(i, j) = rng.normal();
  CHECK(correlation_filter(x, 0.9) == std::vector<std::size_t>{0, 1, 2, 3, 4, 5});

  Eigen::MatrixXd dup(200, 3);
  dup.col(0) = x.col(0);
  dup.col(1) = x.col(0);
  dup.col(2) = x.col(1);
  CHECK(correlation_filter(dup, 0.9) == std::vector<std::size_t>{0, 2});
  CHECK(correlation_filter(dup, 1.0) == std::vector<std::size_t>{0, 2});

  // strongly but not perfectly correlated survives only at threshold 1
  Eigen::MatrixXd near(200, 2);
  near.col(0) = x.col(0);
  near.col(1) = x.col(0) + 0.1 * x.col(1);
  CHECK(correlation_filter(near, 0.9) == std::vector<std::size_t>{0});
  CHECK(correlation_filter(near, 1.0) == std::vector<std::size_t>{0, 1});

  Eigen::MatrixXd konst = x.leftCols(3);
  konst.col(0).setConstant(2.5);
  CHECK(correlation_filter(konst, 0.9) == std::vector<std::size_t>{1, 2});

  CHECK_THROWS_AS(correlation_filter(Eigen::MatrixXd(10, 0), 0.9), std::invalid_argument);
  CHECK_THROWS_AS(correlation_filter(x, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(correlation_filter(x.topRows(2), 0.9), std::invalid_argument);
}

TEST_CASE("linear attribution hand table") {
  // theta (2, -1) on standardised features; the table below uses z directly.
  CoxModel m;
  m.n_features = 2;
  m.kept = {0, 1};
  m.means = Eigen::VectorXd::Zero(2);
  m.scales = Eigen::VectorXd::Ones(2);
  m.theta = Eigen::Vector2d(2.0, -1.0);
  Eigen::MatrixXd x(3, 2);
  x << 1, 4, 2, 0, 3, 2;  // column means 2 and 2
  const Attribution a = linear_attribution(m, x, 1, 5);
  Eigen::MatrixXd expected(3, 2);
  expected << -2, -2, 0, 2, 2, 0;
  CHECK((a.phi - expected).cwiseAbs().maxCoeff() < 1e-14);
  // image block is feature 1 alone
  CHECK(a.image_positive == std::vector<double>{0.0, 2.0, 0.0});
  CHECK(a.image_negative == std::vector<double>{-2.0, 0.0, 0.0});
  REQUIRE(a.ranking.size() == 2);
  CHECK(a.ranking[0].feature == 0);
  CHECK(a.ranking[0].mean_abs == doctest::Approx(4.0 / 3.0));
  CHECK(a.ranking[1].mean_abs == doctest::Approx(4.0 / 3.0));
}

TEST_CASE("linear attribution local accuracy and zero coefficients") {
  const Problem p = random_problem(50, 8, 15);
  CoxConfig cfg;
  cfg.filter = false;
  CoxModel m = fit_cox(p.x, p.time, p.event, cfg);
  const Attribution a = linear_attribution(m, p.x, 3, 5);
  const double mean_risk = a.risk.mean();
  for (int i = 0; i < 50; ++i) CHECK(std::abs(a.phi.row(i).sum() - (a.risk[i] - mean_risk)) < 1e-10);
  for (int i = 0; i < 50; ++i) {
    CHECK(a.image_positive[i] >= 0.0);
    CHECK(a.image_negative[i] <= 0.0);
  }
  for (std::size_t k = 1; k < a.ranking.size(); ++k) CHECK(a.ranking[k - 1].mean_abs >= a.ranking[k].mean_abs);

  m.theta[2] = 0.0;
  const Attribution z = linear_attribution(m, p.x, 3, 5);
  CHECK(z.phi.col(2).isZero());
  CHECK_THROWS(linear_attribution(CoxModel(), p.x, 3, 5));
}

TEST_CASE("Breslow baseline is a non-decreasing step function on event times") {
  const Problem p = random_problem(80, 2, 16);
  const CoxModel m = fit_cox(p.x, p.time, p.event);
  REQUIRE_FALSE(m.baseline_times.empty());
  for (std::size_t k = 0; k < m.baseline_times.size(); ++k) {
    CHECK(m.baseline_increments[k] > 0.0);
    if (k > 0) {
      CHECK(m.baseline_times[k] > m.baseline_times[k - 1]);
      CHECK(m.baseline_cumulative[k] >= m.baseline_cumulative[k - 1]);
    }
    // every jump sits on an observed event time
    bool found = false;
    for (int i = 0; i < 80; ++i) found = found || (p.event[i] == 1 && p.time[i] == m.baseline_times[k]);
    CHECK(found);
  }
  CHECK(cumulative_baseline_hazard(m, 0.0) == 0.0);
  const double t0 = m.baseline_times.front();
  CHECK(cumulative_baseline_hazard(m, t0) == m.baseline_cumulative.front());
  CHECK(cumulative_baseline_hazard(m, 1e9) == m.baseline_cumulative.back());
  const std::vector<double> x0(2, 0.0);
  CHECK(hazard_at(m, x0, t0 + 1e-7) == 0.0);
  CHECK(hazard_at(m, x0, t0) == doctest::Approx(m.baseline_increments.front() * std::exp(predict_risk(m, x0))));
}

TEST_CASE("fit on fused samples matches the matrix overload") {
  const Problem p = random_problem(30, 3, 17);
  std::vector<FusedSample> samples;
  for (int i = 0; i < 30; ++i)
    samples.push_back({"s" + std::to_string(i), {p.x(i, 0), p.x(i, 1), p.x(i, 2)}, p.time[i], p.event[i]});
  const CoxModel a = fit_cox(samples), b = fit_cox(p.x, p.time, p.event);
  CHECK((a.theta - b.theta).norm() == 0.0);
  samples[4].x.pop_back();
  CHECK_THROWS_AS(fit_cox(samples), std::invalid_argument);
}
