#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "medfpca/study.hpp"

using namespace medfpca;

TEST_CASE("metric summaries on worked examples") {
  // every estimate equal to the truth, intervals containing it
  const MetricSummary exact = summarize_metrics({1.2, 1.2}, {1.0, 1.0}, {1.4, 1.4}, 1.2);
  CHECK(exact.abs_bias == 0.0);
  CHECK(exact.rmse == 0.0);
  CHECK(exact.coverage == 1.0);

  // estimates 1.0 and 1.4 around truth 1.2 with intervals missing it on both
  // sides: symmetric errors cancel in the signed mean but not in these metrics
  const MetricSummary sym =
      summarize_metrics({1.0, 1.4}, {0.9, 1.3}, {1.1, 1.5}, 1.2);
  CHECK(sym.abs_bias == Catch::Approx(0.2).margin(1e-12));
  CHECK(sym.rmse == Catch::Approx(0.2).margin(1e-12));
  CHECK(sym.coverage == 0.0);

  // one-sided miss
  const MetricSummary one =
      summarize_metrics({2.0}, {1.5}, {2.5}, 1.0);
  CHECK(one.abs_bias == 1.0);
  CHECK(one.rmse == 1.0);
  CHECK(one.coverage == 0.0);

  CHECK_THROWS_AS(summarize_metrics({1.0}, {}, {2.0}, 1.0), DomainError);
  const MetricSummary empty = summarize_metrics({}, {}, {}, 1.0);
  CHECK(empty.rmse == 0.0);
}

TEST_CASE("rmse dominates mean absolute error") {
  RngStream rng(61);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> est, lo, hi;
    for (int i = 0; i < 20; ++i) {
      const double e = rng.normal(1.2, 0.5);
      est.push_back(e);
      lo.push_back(e - 0.3);
      hi.push_back(e + 0.3);
    }
    const MetricSummary m = summarize_metrics(est, lo, hi, 1.2);
    CHECK(m.rmse >= m.abs_bias - 1e-12);
    CHECK(m.coverage >= 0.0);
    CHECK(m.coverage <= 1.0);
  }
}

namespace {

SimConfig small_sim() {
  SimConfig sim;
  sim.n_subjects = 40;
  sim.mean_obs = 6;
  return sim;
}

}  // namespace

TEST_CASE("replication study with the regression baseline") {
  const ReplicationReport rep = run_replication(
      small_sim(), MediationConfig{}, {Method::gee}, 8, 1, 99);
  CHECK(rep.n_requested == 8);
  CHECK(rep.n_failed == 0);
  CHECK(rep.valid);
  REQUIRE(rep.cells.size() == 2);  // gee x {acme, te}
  const auto& acme = rep.cell("gee", "acme");
  CHECK(acme.n_reps == 8);
  CHECK(acme.sparsity_T == 6.0);
  CHECK(acme.estimates.size() == 8);
  CHECK_THROWS_AS(rep.cell("mfpca", "acme"), DomainError);
}

TEST_CASE("per-replicate results do not depend on the parallelism degree") {
  const ReplicationReport seq = run_replication(
      small_sim(), MediationConfig{}, {Method::gee}, 6, 1, 123);
  const ReplicationReport par = run_replication(
      small_sim(), MediationConfig{}, {Method::gee}, 6, 3, 123);
  for (std::size_t c = 0; c < seq.cells.size(); ++c) {
    REQUIRE(par.cells[c].estimates.size() == seq.cells[c].estimates.size());
    for (std::size_t i = 0; i < seq.cells[c].estimates.size(); ++i) {
      CHECK(par.cells[c].estimates[i] == seq.cells[c].estimates[i]);
      CHECK(par.cells[c].lowers[i] == seq.cells[c].lowers[i]);
      CHECK(par.cells[c].uppers[i] == seq.cells[c].uppers[i]);
    }
  }
  CHECK(report_csv({seq}) == report_csv({par}));
}

TEST_CASE("failures are recorded and can invalidate a report") {
  // impossible fit configuration: far more basis parameters than observations
  SimConfig sim = small_sim();
  sim.n_subjects = 4;
  sim.mean_obs = 3;
  MediationConfig cfg;
  cfg.chain.n_knots = 30;
  cfg.chain.n_iter = 20;
  cfg.chain.n_burn = 10;
  const ReplicationReport rep =
      run_replication(sim, cfg, {Method::mfpca}, 3, 1, 7);
  CHECK(rep.n_failed == 3);
  CHECK_FALSE(rep.valid);
  REQUIRE(rep.failures.size() == 3);
  CHECK(rep.cell("mfpca", "te").n_reps == 0);
}

TEST_CASE("report rendering") {
  const ReplicationReport rep = run_replication(
      small_sim(), MediationConfig{}, {Method::gee}, 4, 1, 5);
  const std::string csv = report_csv({rep});
  CHECK(csv.rfind("method,estimand,sparsity_T,n_reps,abs_bias,rmse,coverage,n_failed\n",
                  0) == 0);
  CHECK(csv.find("gee,acme,6,4,") != std::string::npos);
  CHECK(csv.find("gee,te,6,4,") != std::string::npos);
  CHECK(csv.find("mfpca") == std::string::npos);

  const std::string txt = report_text({rep});
  CHECK(txt.find("sparsity T = 6 (4 replicates)") != std::string::npos);
  CHECK(txt.find("INVALID") == std::string::npos);

  CHECK_THROWS_AS(
      run_replication(small_sim(), MediationConfig{}, {Method::gee}, 0, 1, 5),
      ConfigError);
}
