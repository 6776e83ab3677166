#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>

#include "medfpca/simulate.hpp"

using namespace medfpca;

namespace {

// asymptotic Kolmogorov-Smirnov p-value
double ks_pvalue(double d, int n) {
  const double lambda = (std::sqrt(n) + 0.12 + 0.11 / std::sqrt(n)) * d;
  double p = 0.0;
  for (int k = 1; k <= 100; ++k)
    p += 2.0 * ((k % 2 == 1) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lambda * lambda);
  return std::clamp(p, 0.0, 1.0);
}

double std_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

}  // namespace

TEST_CASE("truth curves: closed-form integrals and identities") {
  CHECK(SimTruth::acme_integral == 1.2);
  CHECK(SimTruth::te_integral == Catch::Approx(2.7667).margin(5e-5));
  CHECK(SimTruth::acme(0.0) == Catch::Approx(0.2).margin(1e-15));

  // decomposition invariant pointwise
  for (int g = 0; g <= 100; ++g) {
    const double t = g / 100.0;
    const double direct = std::cos(2 * std::numbers::pi * t) + 0.2 * t * t + 3 * t;
    CHECK(std::abs(SimTruth::te(t) - SimTruth::acme(t) - direct) < 1e-12);
  }

  // 201-point trapezoid quadrature within 1e-3 of the closed forms
  Eigen::VectorXd grid(201);
  for (int g = 0; g < 201; ++g) grid(g) = g / 200.0;
  const TruthCurves c = truth_curves(grid);
  double acme_q = 0.0, te_q = 0.0;
  for (int g = 0; g + 1 < 201; ++g) {
    acme_q += 0.5 * (c.acme(g) + c.acme(g + 1)) / 200.0;
    te_q += 0.5 * (c.te(g) + c.te(g + 1)) / 200.0;
  }
  CHECK(acme_q == Catch::Approx(1.2).margin(1e-3));
  CHECK(te_q == Catch::Approx(SimTruth::te_integral).margin(1e-3));
}

TEST_CASE("noise-free structural means difference to the truth curves") {
  for (double t : {0.0, 0.13, 0.5, 0.77, 1.0}) {
    const double dm = sim_mediator_mean(t, 1, 0.3, -0.4) - sim_mediator_mean(t, 0, 0.3, -0.4);
    CHECK(dm == Catch::Approx(SimTruth::acme(t)).margin(1e-14));
    // outcome difference with the mediator shift passed through (gamma = 1)
    const double m0 = sim_mediator_mean(t, 0, 0.3, -0.4);
    const double m1 = sim_mediator_mean(t, 1, 0.3, -0.4);
    const double dy = sim_outcome_mean(t, 1, m1, -0.4, 0.9) -
                      sim_outcome_mean(t, 0, m0, -0.4, 0.9);
    CHECK(dy == Catch::Approx(SimTruth::te(t)).margin(1e-13));
  }
}

TEST_CASE("gp_draw marginals and correlation match the kernel") {
  RngStream rng(31);
  // single point: sd = sqrt(variance)
  Eigen::VectorXd one(1);
  one << 0.4;
  double sumsq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) sumsq += std::pow(gp_draw(one, 2.0, 8.0, rng)(0), 2);
  CHECK(std::sqrt(sumsq / n) == Catch::Approx(std::sqrt(2.0)).epsilon(0.03));

  // pair at delta = 0.25, bandwidth 8: correlation exp(-0.5)
  Eigen::VectorXd two(2);
  two << 0.3, 0.55;
  double s11 = 0, s22 = 0, s12 = 0;
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd g = gp_draw(two, 1.0, 8.0, rng);
    s11 += g(0) * g(0);
    s22 += g(1) * g(1);
    s12 += g(0) * g(1);
  }
  CHECK(s12 / std::sqrt(s11 * s22) == Catch::Approx(std::exp(-0.5)).margin(0.05));

  CHECK_THROWS_AS(gp_draw(one, -1.0, 8.0, rng), DomainError);
}

TEST_CASE("gp_draw standardized pairs pass a KS normality check") {
  RngStream rng(47);
  Eigen::VectorXd two(2);
  two << 0.2, 0.45;
  const double rho = std::exp(-8.0 * 0.25 * 0.25);
  const int n = 10000;
  std::vector<double> u;
  u.reserve(2 * n);
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd g = gp_draw(two, 1.0, 8.0, rng);
    u.push_back(std_normal_cdf(g(0)));
    u.push_back(std_normal_cdf((g(1) - rho * g(0)) / std::sqrt(1.0 - rho * rho)));
  }
  std::sort(u.begin(), u.end());
  double d = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double lo = static_cast<double>(i) / u.size();
    const double hi = static_cast<double>(i + 1) / u.size();
    d = std::max({d, std::abs(u[i] - lo), std::abs(u[i] - hi)});
  }
  CHECK(ks_pvalue(d, static_cast<int>(u.size())) > 0.01);
}

TEST_CASE("generate_dataset basics") {
  SimConfig cfg;
  cfg.n_subjects = 400;
  cfg.mean_obs = 15.0;
  cfg.seed = 5;
  auto [ds, truth] = generate_dataset(cfg);
  (void)truth;
  CHECK(ds.subjects.size() == 400);
  CHECK(validate(ds).ok());
  for (const auto& s : ds.subjects) CHECK(s.n_obs() >= 3);

  // determinism: bitwise-identical regeneration
  auto [ds2, t2] = generate_dataset(cfg);
  (void)t2;
  for (std::size_t i = 0; i < ds.subjects.size(); ++i) {
    CHECK(ds.subjects[i].times == ds2.subjects[i].times);
    CHECK(ds.subjects[i].mediator == ds2.subjects[i].mediator);
    CHECK(ds.subjects[i].outcome == ds2.subjects[i].outcome);
  }

  cfg.seed = 6;
  auto [ds3, t3] = generate_dataset(cfg);
  (void)t3;
  CHECK(ds.subjects[0].mediator != ds3.subjects[0].mediator);
}

TEST_CASE("observation counts track the Poisson mean") {
  SimConfig cfg;
  cfg.n_subjects = 10000;
  cfg.mean_obs = 15.0;
  cfg.seed = 8;
  auto [ds, truth] = generate_dataset(cfg);
  (void)truth;
  double total = 0.0;
  for (const auto& s : ds.subjects) total += s.n_obs();
  CHECK(total / ds.subjects.size() ==
        Catch::Approx(15.0).epsilon(0.02));  // floor at 3 is negligible here
}

TEST_CASE("config validation names offending fields") {
  SimConfig cfg;
  cfg.sigma_m = -1.0;
  CHECK_THROWS_WITH(cfg.check(), Catch::Matchers::ContainsSubstring("sigma_m"));
  cfg = SimConfig{};
  cfg.n_subjects = 1;
  CHECK_THROWS_AS(cfg.check(), ConfigError);
}
