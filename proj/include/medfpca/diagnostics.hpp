#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "medfpca/errors.hpp"
#include "medfpca/stats.hpp"

namespace medfpca {

// Effective sample size via Geyer's initial positive sequence: sum
// autocovariance pairs until a pair sum goes non-positive.
inline double effective_sample_size(const std::vector<double>& x) {
  const std::size_t n = x.size();
  if (n < 4) return static_cast<double>(n);
  const double mu = mean_of(x);
  std::vector<double> acov;
  const std::size_t max_lag = n - 2;
  for (std::size_t k = 0; k <= max_lag; ++k) {
    double s = 0.0;
    for (std::size_t t = 0; t + k < n; ++t) s += (x[t] - mu) * (x[t + k] - mu);
    acov.push_back(s / static_cast<double>(n));
  }
  if (!(acov[0] > 0.0)) return static_cast<double>(n);  // constant chain
  double rho_sum = 0.0;
  for (std::size_t k = 1; k + 1 < acov.size(); k += 2) {
    const double pair = (acov[k] + acov[k + 1]) / acov[0];
    if (pair <= 0.0) break;
    rho_sum += pair;
  }
  const double ess = static_cast<double>(n) / (1.0 + 2.0 * rho_sum);
  return std::clamp(ess, 1.0, static_cast<double>(n));
}

// Split-chain potential scale reduction factor (one chain split in halves).
inline double split_rhat(const std::vector<double>& x) {
  const std::size_t n2 = x.size() / 2;
  if (n2 < 2) return 1.0;
  std::vector<double> a(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(n2));
  std::vector<double> b(x.end() - static_cast<std::ptrdiff_t>(n2), x.end());
  const double ma = mean_of(a), mb = mean_of(b);
  const double va = variance_of(a), vb = variance_of(b);
  const double w = 0.5 * (va + vb);
  const double mbar = 0.5 * (ma + mb);
  const double bvar = static_cast<double>(n2) *
                      ((ma - mbar) * (ma - mbar) + (mb - mbar) * (mb - mbar));
  if (!(w > 0.0)) return 1.0;
  const double var_plus =
      (static_cast<double>(n2) - 1.0) / static_cast<double>(n2) * w +
      bvar / static_cast<double>(n2);
  return std::sqrt(var_plus / w);
}

struct ScalarDiagnostic {
  std::string name;
  double ess = 0.0;
  double rhat = 1.0;
  bool flagged = false;  // rhat > 1.1 or degenerate chain
};

struct ChainReport {
  std::vector<ScalarDiagnostic> scalars;
  bool any_flagged = false;
};

inline ScalarDiagnostic diagnose_scalar(const std::string& name,
                                        const std::vector<double>& x) {
  ScalarDiagnostic d;
  d.name = name;
  d.ess = effective_sample_size(x);
  d.rhat = split_rhat(x);
  const bool degenerate = x.size() >= 4 && !(variance_of(x) > 0.0);
  d.flagged = d.rhat > 1.1 || degenerate;
  return d;
}

inline ChainReport diagnose_chain(
    const std::vector<std::pair<std::string, std::vector<double>>>& traces) {
  ChainReport rep;
  for (const auto& [name, x] : traces) {
    rep.scalars.push_back(diagnose_scalar(name, x));
    rep.any_flagged = rep.any_flagged || rep.scalars.back().flagged;
  }
  return rep;
}

}  // namespace medfpca
