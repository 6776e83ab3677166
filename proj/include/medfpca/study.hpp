#pragma once

#include <atomic>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "medfpca/errors.hpp"
#include "medfpca/gee.hpp"
#include "medfpca/mediation.hpp"
#include "medfpca/simulate.hpp"

namespace medfpca {

enum class Method { mfpca, gee };

inline std::string method_name(Method m) {
  return m == Method::mfpca ? "mfpca" : "gee";
}

struct ReplicateResult {
  bool ok = false;
  std::string error;
  // indexed [method][estimand]: estimand 0 = acme, 1 = te
  double estimate[2][2] = {{0, 0}, {0, 0}};
  double lower[2][2] = {{0, 0}, {0, 0}};
  double upper[2][2] = {{0, 0}, {0, 0}};
};

struct ReplicationCell {
  std::string method;
  std::string estimand;  // "acme" or "te"
  double sparsity_T = 0.0;
  int n_reps = 0;  // successful replicates
  double abs_bias = 0.0, rmse = 0.0, coverage = 0.0;
  int n_failed = 0;
  std::vector<double> estimates, lowers, uppers;
};

struct ReplicationReport {
  std::vector<ReplicationCell> cells;
  int n_requested = 0;
  int n_failed = 0;
  bool valid = true;  // false when failures exceed 5% of requested
  std::uint64_t seed = 0;
  std::vector<std::string> failures;

  const ReplicationCell& cell(const std::string& method,
                              const std::string& estimand) const {
    for (const auto& c : cells)
      if (c.method == method && c.estimand == estimand) return c;
    throw DomainError("ReplicationReport: no cell " + method + "/" + estimand);
  }
};

struct MetricSummary {
  double abs_bias = 0.0, rmse = 0.0, coverage = 0.0;
};

// abs_bias is the mean absolute error of the estimates: unlike the signed
// mean error it does not let symmetric errors cancel, so it always sits
// between 0 and rmse.
inline MetricSummary summarize_metrics(const std::vector<double>& estimates,
                                       const std::vector<double>& lowers,
                                       const std::vector<double>& uppers,
                                       double truth) {
  if (estimates.size() != lowers.size() || estimates.size() != uppers.size())
    throw DomainError("summarize_metrics: misaligned inputs");
  MetricSummary m;
  if (estimates.empty()) return m;
  double sumabs = 0.0, sumsq = 0.0;
  int covered = 0;
  for (std::size_t i = 0; i < estimates.size(); ++i) {
    const double err = estimates[i] - truth;
    sumabs += std::abs(err);
    sumsq += err * err;
    if (lowers[i] <= truth && truth <= uppers[i]) ++covered;
  }
  const double n = static_cast<double>(estimates.size());
  m.abs_bias = sumabs / n;
  m.rmse = std::sqrt(sumsq / n);
  m.coverage = covered / n;
  return m;
}

namespace detail {

inline ReplicateResult run_one_replicate(const SimConfig& sim_tpl,
                                         const MediationConfig& fit_tpl,
                                         const std::vector<Method>& methods,
                                         std::uint64_t master_seed, int rep) {
  ReplicateResult res;
  try {
    SimConfig sim = sim_tpl;
    sim.seed = derive_seed(master_seed, "replicate", static_cast<std::uint64_t>(rep));
    auto [ds, truth] = generate_dataset(sim);
    (void)truth;
    for (Method m : methods) {
      const int mi = m == Method::mfpca ? 0 : 1;
      if (m == Method::mfpca) {
        MediationConfig cfg = fit_tpl;
        cfg.seed = derive_seed(master_seed, "fit", static_cast<std::uint64_t>(rep));
        const MediationFit fit = fit_mediation(ds, cfg);
        const EffectIntegral acme =
            integrate_effect(acme_curve(fit, fit.report_grid));
        const EffectIntegral te = integrate_effect(te_curve(fit, fit.report_grid));
        res.estimate[mi][0] = acme.mean;
        res.lower[mi][0] = acme.ci.first;
        res.upper[mi][0] = acme.ci.second;
        res.estimate[mi][1] = te.mean;
        res.lower[mi][1] = te.ci.first;
        res.upper[mi][1] = te.ci.second;
      } else {
        const GeeMediation g = gee_mediation(ds, GeeCorr::ar1);
        res.estimate[mi][0] = g.acme;
        res.lower[mi][0] = g.acme_ci.first;
        res.upper[mi][0] = g.acme_ci.second;
        res.estimate[mi][1] = g.te;
        res.lower[mi][1] = g.te_ci.first;
        res.upper[mi][1] = g.te_ci.second;
      }
    }
    res.ok = true;
  } catch (const std::exception& e) {
    res.error = e.what();
  }
  return res;
}

}  // namespace detail

// Run n_reps simulated replicates through the requested methods and compute
// Table-style metrics for the integrated estimands. Deterministic given the
// master seed: replicate r always uses the same derived seeds regardless of
// parallelism degree.
inline ReplicationReport run_replication(const SimConfig& sim_cfg,
                                         const MediationConfig& fit_cfg,
                                         const std::vector<Method>& methods,
                                         int n_reps, int parallelism,
                                         std::uint64_t seed) {
  if (n_reps < 1) throw ConfigError("study.n_reps must be >= 1");
  if (parallelism < 1) throw ConfigError("study.parallelism must be >= 1");
  sim_cfg.check();
  fit_cfg.check();

  std::vector<ReplicateResult> results(static_cast<std::size_t>(n_reps));
  std::atomic<int> next{0};
  auto worker = [&] {
    for (;;) {
      const int r = next.fetch_add(1);
      if (r >= n_reps) return;
      results[static_cast<std::size_t>(r)] =
          detail::run_one_replicate(sim_cfg, fit_cfg, methods, seed, r);
    }
  };
  const int nthreads = std::min(parallelism, n_reps);
  if (nthreads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < nthreads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  ReplicationReport rep;
  rep.n_requested = n_reps;
  rep.seed = seed;
  for (int r = 0; r < n_reps; ++r)
    if (!results[static_cast<std::size_t>(r)].ok) {
      ++rep.n_failed;
      rep.failures.push_back("replicate " + std::to_string(r) + ": " +
                             results[static_cast<std::size_t>(r)].error);
    }
  rep.valid = rep.n_failed <= n_reps / 20;

  const double truth[2] = {SimTruth::acme_integral, SimTruth::te_integral};
  for (Method m : methods) {
    const int mi = m == Method::mfpca ? 0 : 1;
    for (int ei = 0; ei < 2; ++ei) {
      ReplicationCell c;
      c.method = method_name(m);
      c.estimand = ei == 0 ? "acme" : "te";
      c.sparsity_T = sim_cfg.mean_obs;
      c.n_failed = rep.n_failed;
      for (const auto& r : results) {
        if (!r.ok) continue;
        c.estimates.push_back(r.estimate[mi][ei]);
        c.lowers.push_back(r.lower[mi][ei]);
        c.uppers.push_back(r.upper[mi][ei]);
      }
      c.n_reps = static_cast<int>(c.estimates.size());
      const MetricSummary m =
          summarize_metrics(c.estimates, c.lowers, c.uppers, truth[ei]);
      c.abs_bias = m.abs_bias;
      c.rmse = m.rmse;
      c.coverage = m.coverage;
      rep.cells.push_back(std::move(c));
    }
  }
  return rep;
}

// CSV rendering: one row per method x estimand cell, grouped by the sparsity
// level of each report, 3-decimal formatting.
inline std::string report_csv(const std::vector<ReplicationReport>& reports) {
  std::ostringstream out;
  out << "method,estimand,sparsity_T,n_reps,abs_bias,rmse,coverage,n_failed\n";
  char buf[128];
  for (const auto& rep : reports)
    for (const auto& c : rep.cells) {
      std::snprintf(buf, sizeof(buf), "%s,%s,%g,%d,%.3f,%.3f,%.3f,%d\n",
                    c.method.c_str(), c.estimand.c_str(), c.sparsity_T, c.n_reps,
                    c.abs_bias, c.rmse, c.coverage, c.n_failed);
      out << buf;
    }
  return out.str();
}

// Aligned text table for terminal display, same grouping and precision.
inline std::string report_text(const std::vector<ReplicationReport>& reports) {
  std::ostringstream out;
  char buf[160];
  for (const auto& rep : reports) {
    if (!rep.cells.empty()) {
      std::snprintf(buf, sizeof(buf), "sparsity T = %g (%d replicates%s)\n",
                    rep.cells.front().sparsity_T, rep.n_requested,
                    rep.valid ? "" : ", INVALID: >5% failures");
      out << buf;
    }
    std::snprintf(buf, sizeof(buf), "  %-8s %-8s %10s %10s %10s %8s\n", "method",
                  "estimand", "abs_bias", "rmse", "coverage", "failed");
    out << buf;
    for (const auto& c : rep.cells) {
      std::snprintf(buf, sizeof(buf), "  %-8s %-8s %10.3f %10.3f %10.3f %8d\n",
                    c.method.c_str(), c.estimand.c_str(), c.abs_bias, c.rmse,
                    c.coverage, c.n_failed);
      out << buf;
    }
  }
  return out.str();
}

}  // namespace medfpca
