#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "medfpca/data.hpp"
#include "medfpca/errors.hpp"
#include "medfpca/fpca.hpp"
#include "medfpca/splines.hpp"
#include "medfpca/stats.hpp"

namespace medfpca {

enum class MediatorPlugin { posterior_mean, observed };

struct MediationConfig {
  FpcaConfig chain;          // final-chain settings (n_components is selected)
  int pilot_iter = 600;
  int pilot_burn = 300;
  int pilot_thin = 3;
  int max_components = 8;    // pilot truncation upper bound
  MediatorPlugin plugin = MediatorPlugin::posterior_mean;
  int report_grid_size = 201;
  std::uint64_t seed = 1;

  void check() const {
    chain.check();
    if (pilot_iter <= pilot_burn || pilot_burn < 0 || pilot_thin < 1)
      throw ConfigError("mediation: invalid pilot chain settings");
    if (max_components < 1)
      throw ConfigError("mediation.max_components must be >= 1");
    if (report_grid_size < 2)
      throw ConfigError("mediation.report_grid_size must be >= 2");
  }
};

struct MediationFit {
  FpcaDraws mediator;  // final mediator chain (R components)
  FpcaDraws outcome;   // final outcome chain (S components)
  int n_mediator_components = 0;
  int n_outcome_components = 0;
  double time_scale = 1.0;  // T_max divided out of the raw times
  Eigen::VectorXd report_grid;
};

namespace detail {

inline FpcaConfig pilot_config(const MediationConfig& cfg, std::uint64_t seed) {
  FpcaConfig p = cfg.chain;
  p.n_components = cfg.max_components;
  p.n_iter = cfg.pilot_iter;
  p.n_burn = cfg.pilot_burn;
  p.thin = cfg.pilot_thin;
  p.seed = seed;
  return p;
}

template <typename Fn>
auto staged(const std::string& stage, Fn&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    throw NumericalError(stage + ": " + e.what());
  }
}

}  // namespace detail

// Two-stage fit: mediator pilot chain at the truncation upper bound, FEV
// selection of R, final mediator chain, mediator plug-in column (posterior
// mean fitted values by default), then the same pilot/select/final pass for
// the outcome model with the concurrent mediator regressor appended.
inline MediationFit fit_mediation(const Dataset& raw, const MediationConfig& cfg) {
  cfg.check();
  auto rep = validate(raw);
  if (!rep.ok()) {
    std::string msg = "fit_mediation: invalid dataset:";
    for (std::size_t i = 0; i < rep.violations.size() && i < 5; ++i)
      msg += " ['" + rep.violations[i].subject + "' " + rep.violations[i].message + "]";
    throw ValidationError(msg);
  }
  auto [ds, scale] = normalize_time(raw);

  std::vector<double> pooled;
  for (const auto& s : ds.subjects)
    pooled.insert(pooled.end(), s.times.begin(), s.times.end());
  const Eigen::VectorXd knots = place_knots(pooled, cfg.chain.n_knots);
  const SplineBasis basis = make_basis(knots, cfg.chain.grid_size);

  MediationFit fit;
  fit.time_scale = scale;

  auto med_design = std::make_shared<const ResponseDesign>(mediator_design(ds));
  const FpcaDraws med_pilot = detail::staged("mediator pilot chain", [&] {
    return run_chain(med_design, basis,
                     detail::pilot_config(cfg, derive_seed(cfg.seed, "mediator-pilot")));
  });
  fit.n_mediator_components = select_truncation(med_pilot, cfg.chain.fev_threshold);
  FpcaConfig med_cfg = cfg.chain;
  med_cfg.n_components = fit.n_mediator_components;
  med_cfg.seed = derive_seed(cfg.seed, "mediator-final");
  fit.mediator = detail::staged("mediator final chain", [&] {
    return run_chain(med_design, basis, med_cfg);
  });

  std::vector<Eigen::VectorXd> plugin_col;
  if (cfg.plugin == MediatorPlugin::posterior_mean) {
    plugin_col = fit.mediator.posterior_mean_fitted();
  } else {
    for (const auto& s : ds.subjects)
      plugin_col.emplace_back(
          Eigen::Map<const Eigen::VectorXd>(s.mediator.data(), s.n_obs()));
  }
  auto out_design =
      std::make_shared<const ResponseDesign>(outcome_design(ds, plugin_col));
  const FpcaDraws out_pilot = detail::staged("outcome pilot chain", [&] {
    return run_chain(out_design, basis,
                     detail::pilot_config(cfg, derive_seed(cfg.seed, "outcome-pilot")));
  });
  fit.n_outcome_components = select_truncation(out_pilot, cfg.chain.fev_threshold);
  FpcaConfig out_cfg = cfg.chain;
  out_cfg.n_components = fit.n_outcome_components;
  out_cfg.seed = derive_seed(cfg.seed, "outcome-final");
  fit.outcome = detail::staged("outcome final chain", [&] {
    return run_chain(out_design, basis, out_cfg);
  });

  fit.report_grid.resize(cfg.report_grid_size);
  for (int g = 0; g < cfg.report_grid_size; ++g)
    fit.report_grid(g) = static_cast<double>(g) / (cfg.report_grid_size - 1);
  return fit;
}

// Pointwise posterior summary of a time-varying effect: per-draw curves on a
// grid, their mean and central 95% band, and per-draw trapezoid integrals.
struct EffectCurve {
  Eigen::VectorXd grid;
  Eigen::VectorXd mean, lower, upper;
  Eigen::MatrixXd draws;           // n_draws x grid_size
  Eigen::VectorXd integral_draws;  // n_draws
};

namespace detail {

inline Eigen::VectorXd trapezoid_weights(const Eigen::VectorXd& grid) {
  const Eigen::Index g = grid.size();
  Eigen::VectorXd w = Eigen::VectorXd::Zero(g);
  for (Eigen::Index j = 0; j + 1 < g; ++j) {
    const double h = 0.5 * (grid(j + 1) - grid(j));
    w(j) += h;
    w(j + 1) += h;
  }
  return w;
}

inline void summarize_effect(EffectCurve& c) {
  const Eigen::Index nd = c.draws.rows(), g = c.draws.cols();
  c.mean.resize(g);
  c.lower.resize(g);
  c.upper.resize(g);
  std::vector<double> col(static_cast<std::size_t>(nd));
  for (Eigen::Index j = 0; j < g; ++j) {
    for (Eigen::Index d = 0; d < nd; ++d)
      col[static_cast<std::size_t>(d)] = c.draws(d, j);
    c.mean(j) = mean_of(col);
    c.lower(j) = quantile(col, 0.025);
    c.upper(j) = quantile(col, 0.975);
  }
  const Eigen::VectorXd w = trapezoid_weights(c.grid);
  c.integral_draws = c.draws * w;
}

inline int paired_draws(const MediationFit& fit) {
  const int n = std::min(fit.mediator.n_draws(), fit.outcome.n_draws());
  if (n == 0) throw DomainError("effect curve: no retained draws");
  return n;
}

}  // namespace detail

// ACME(t) = gamma * sum_r (chi1_r - chi0_r) psi_r(t); mediator-model draw d
// paired with outcome-model draw d.
inline EffectCurve acme_curve(const MediationFit& fit, const Eigen::VectorXd& grid) {
  const int nd = detail::paired_draws(fit);
  EffectCurve c;
  c.grid = grid;
  c.draws.resize(nd, grid.size());
  const Eigen::MatrixXd B = fit.mediator.basis.eval_rows(grid);
  for (int d = 0; d < nd; ++d) {
    const auto& m = fit.mediator.draws[static_cast<std::size_t>(d)];
    const double gamma = fit.outcome.draws[static_cast<std::size_t>(d)].gamma();
    c.draws.row(d) =
        gamma * (B * (m.basis_coeffs * (m.chi1 - m.chi0))).transpose();
  }
  detail::summarize_effect(c);
  return c;
}

// TE(t) = ACME(t) + sum_s (xi1_s - xi0_s) eta_s(t) using the outcome model's
// own components for the direct part.
inline EffectCurve te_curve(const MediationFit& fit, const Eigen::VectorXd& grid) {
  const int nd = detail::paired_draws(fit);
  EffectCurve c;
  c.grid = grid;
  c.draws.resize(nd, grid.size());
  const Eigen::MatrixXd Bm = fit.mediator.basis.eval_rows(grid);
  const Eigen::MatrixXd By = fit.outcome.basis.eval_rows(grid);
  for (int d = 0; d < nd; ++d) {
    const auto& m = fit.mediator.draws[static_cast<std::size_t>(d)];
    const auto& o = fit.outcome.draws[static_cast<std::size_t>(d)];
    c.draws.row(d) =
        (o.gamma() * (Bm * (m.basis_coeffs * (m.chi1 - m.chi0))) +
         By * (o.basis_coeffs * (o.chi1 - o.chi0)))
            .transpose();
  }
  detail::summarize_effect(c);
  return c;
}

// ANDE(t) = TE(t) - ACME(t) draw by draw, so the decomposition holds exactly.
inline EffectCurve ande_curve(const MediationFit& fit, const Eigen::VectorXd& grid) {
  EffectCurve acme = acme_curve(fit, grid);
  EffectCurve te = te_curve(fit, grid);
  EffectCurve c;
  c.grid = grid;
  c.draws = te.draws - acme.draws;
  detail::summarize_effect(c);
  return c;
}

struct EffectIntegral {
  double mean = 0.0;
  std::pair<double, double> ci{0.0, 0.0};
  Eigen::VectorXd draws;
};

// Posterior of the scalar aggregate: trapezoid integral over [0,1] per draw.
inline EffectIntegral integrate_effect(const EffectCurve& c) {
  if (c.grid.size() < 2 || c.grid(0) > 1e-9 ||
      c.grid(c.grid.size() - 1) < 1.0 - 1e-9)
    throw DomainError("integrate_effect: grid must cover [0,1]");
  EffectIntegral out;
  out.draws = c.integral_draws;
  std::vector<double> v(out.draws.data(), out.draws.data() + out.draws.size());
  out.mean = mean_of(v);
  out.ci = {quantile(v, 0.025), quantile(v, 0.975)};
  return out;
}

struct TrajectorySummary {
  std::string id;
  Eigen::VectorXd grid, mean, lower, upper;
};

// Posterior latent trajectories (denoised, covariates at the subject mean) on
// a grid, for the requested subjects of one fitted response model.
inline std::vector<TrajectorySummary> impute_trajectories(
    const FpcaDraws& draws, const std::vector<std::string>& ids,
    const Eigen::VectorXd& grid) {
  if (draws.n_draws() == 0)
    throw DomainError("impute_trajectories: no retained draws");
  std::vector<TrajectorySummary> out;
  for (const auto& id : ids) {
    int subject = -1;
    for (int i = 0; i < draws.design->n_subjects(); ++i)
      if (draws.design->ids[static_cast<std::size_t>(i)] == id) {
        subject = i;
        break;
      }
    if (subject < 0)
      throw DomainError("impute_trajectories: unknown subject id '" + id + "'");
    Eigen::MatrixXd curves(draws.n_draws(), grid.size());
    for (int d = 0; d < draws.n_draws(); ++d)
      curves.row(d) = draws.trajectory(d, subject, grid).transpose();
    TrajectorySummary s;
    s.id = id;
    s.grid = grid;
    s.mean.resize(grid.size());
    s.lower.resize(grid.size());
    s.upper.resize(grid.size());
    std::vector<double> col(static_cast<std::size_t>(draws.n_draws()));
    for (Eigen::Index j = 0; j < grid.size(); ++j) {
      for (int d = 0; d < draws.n_draws(); ++d)
        col[static_cast<std::size_t>(d)] = curves(d, j);
      s.mean(j) = mean_of(col);
      s.lower(j) = quantile(col, 0.025);
      s.upper(j) = quantile(col, 0.975);
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace medfpca
