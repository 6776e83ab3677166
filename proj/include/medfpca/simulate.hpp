#pragma once

#include <cmath>
#include <numbers>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "medfpca/data.hpp"
#include "medfpca/errors.hpp"
#include "medfpca/rng.hpp"

namespace medfpca {

struct SimConfig {
  int n_subjects = 200;
  double mean_obs = 25.0;       // Poisson mean for per-subject counts
  // GP and random-intercept scales; 0.5 keeps the irreducible between-arm
  // noise small enough that N = 200 studies estimate the integrated total
  // effect with rmse near 0.1.
  double sigma_x = 1.0;
  double sigma_m = 0.5;
  double sigma_y = 0.5;
  double kernel_bandwidth = 8.0;
  double obs_noise_sd = 1.0;
  std::uint64_t seed = 1;

  void check() const {
    if (n_subjects < 2) throw ConfigError("sim.n_subjects must be >= 2");
    if (!(mean_obs > 0)) throw ConfigError("sim.mean_obs must be positive");
    if (!(sigma_x > 0)) throw ConfigError("sim.sigma_x must be positive");
    if (!(sigma_m > 0)) throw ConfigError("sim.sigma_m must be positive");
    if (!(sigma_y > 0)) throw ConfigError("sim.sigma_y must be positive");
    if (!(kernel_bandwidth > 0)) throw ConfigError("sim.kernel_bandwidth must be positive");
    if (!(obs_noise_sd > 0)) throw ConfigError("sim.obs_noise_sd must be positive");
  }
};

// Closed-form truth for the simulated design. The treatment shifts the
// mediator mean by 0.2 + 2t + sin(2*pi*t) (passed through to the outcome with
// unit concurrent slope) and adds a direct term cos(2*pi*t) + 0.2t^2 + 3t.
struct SimTruth {
  static double acme(double t) {
    return 0.2 + 2.0 * t + std::sin(2.0 * std::numbers::pi * t);
  }
  static double direct(double t) {
    return std::cos(2.0 * std::numbers::pi * t) + 0.2 * t * t + 3.0 * t;
  }
  static double te(double t) { return acme(t) + direct(t); }

  // Exact integrals over [0,1]; the second is conventionally rounded to 2.77.
  static constexpr double acme_integral = 1.2;
  static constexpr double te_integral = 1.2 + 0.2 / 3.0 + 1.5;
};

// Noise-free structural means of the design; the generator adds GP residuals,
// random intercepts, and observation noise on top of these.
inline double sim_mediator_mean(double t, int z, double x1, double x2) {
  return 0.2 + (0.2 + 2.0 * t + std::sin(2.0 * std::numbers::pi * t)) * (z + 1) -
         x1 + 0.5 * x2;
}

inline double sim_outcome_mean(double t, int z, double m_latent, double x2,
                               double x3) {
  const double two_pi = 2.0 * std::numbers::pi;
  return m_latent + std::cos(two_pi * t) + 0.1 * t * t + 2.0 * t +
         (std::cos(two_pi * t) + 0.2 * t * t + 3.0 * t) * z - 0.5 * x2 + x3;
}

// Zero-mean Gaussian process draw with covariance
// variance * exp(-bandwidth (s-t)^2), diagonal jitter 1e-8.
inline Eigen::VectorXd gp_draw(const Eigen::VectorXd& times, double variance,
                               double bandwidth, RngStream& rng) {
  if (!(variance > 0.0)) throw DomainError("gp_draw: variance must be positive");
  const Eigen::Index n = times.size();
  Eigen::MatrixXd K(n, n);
  for (Eigen::Index a = 0; a < n; ++a)
    for (Eigen::Index b = 0; b < n; ++b) {
      const double d = times(a) - times(b);
      K(a, b) = variance * std::exp(-bandwidth * d * d);
    }
  K.diagonal().array() += 1e-8 * variance;
  Eigen::LLT<Eigen::MatrixXd> llt(K);
  if (llt.info() != Eigen::Success) {
    K.diagonal().array() += 1e-6 * variance;
    llt.compute(K);
    if (llt.info() != Eigen::Success)
      throw NumericalError("gp_draw: covariance not positive definite after jitter");
  }
  return llt.matrixL() * rng.normal_vector(n);
}

// One replicate of the simulation design: per-subject Poisson observation
// counts (floored at 3), uniform sorted times on [0,1], treatment from the
// sign of a standard normal, GP residuals, and unit-variance observation
// noise by default.
inline std::pair<Dataset, SimTruth> generate_dataset(const SimConfig& cfg) {
  cfg.check();
  Dataset ds;
  ds.covariate_names = {"x1", "x2", "x3"};
  ds.time_range = {0.0, 1.0};
  for (int i = 0; i < cfg.n_subjects; ++i) {
    RngStream rng = RngStream(cfg.seed).derived("subject", static_cast<std::uint64_t>(i));
    SubjectSeries s;
    s.id = "s" + std::to_string(i);
    const int ti = std::max(3, rng.poisson(cfg.mean_obs));
    Eigen::VectorXd times(ti);
    for (int j = 0; j < ti; ++j) times(j) = rng.uniform();
    std::sort(times.data(), times.data() + ti);
    // continuous draws; nudge the pathological exact tie
    for (int j = 1; j < ti; ++j)
      if (times(j) <= times(j - 1)) times(j) = std::nextafter(times(j - 1), 2.0);
    const double c1 = rng.normal();
    s.z = c1 > 0.0 ? 1 : 0;
    const double c2 = rng.normal(0.0, cfg.sigma_m);
    const double c3 = rng.normal(0.0, cfg.sigma_y);
    s.covariates.resize(ti, 3);
    for (int j = 0; j < ti; ++j)
      for (int c = 0; c < 3; ++c) s.covariates(j, c) = rng.normal(0.0, cfg.sigma_x);
    const Eigen::VectorXd gp_m =
        gp_draw(times, cfg.sigma_m * cfg.sigma_m, cfg.kernel_bandwidth, rng);
    const Eigen::VectorXd gp_y =
        gp_draw(times, cfg.sigma_y * cfg.sigma_y, cfg.kernel_bandwidth, rng);
    s.times.resize(ti);
    s.mediator.resize(ti);
    s.outcome.resize(ti);
    for (int j = 0; j < ti; ++j) {
      const double t = times(j);
      const double x1 = s.covariates(j, 0), x2 = s.covariates(j, 1),
                   x3 = s.covariates(j, 2);
      const double m_latent = sim_mediator_mean(t, s.z, x1, x2) + gp_m(j) + c2;
      const double y_latent = sim_outcome_mean(t, s.z, m_latent, x2, x3) + gp_y(j) + c3;
      s.times[j] = t;
      s.mediator[j] = m_latent + rng.normal(0.0, cfg.obs_noise_sd);
      s.outcome[j] = y_latent + rng.normal(0.0, cfg.obs_noise_sd);
    }
    ds.subjects.push_back(std::move(s));
  }
  return {std::move(ds), SimTruth{}};
}

struct TruthCurves {
  Eigen::VectorXd grid, acme, te;
};

inline TruthCurves truth_curves(const Eigen::VectorXd& grid) {
  TruthCurves c;
  c.grid = grid;
  c.acme.resize(grid.size());
  c.te.resize(grid.size());
  for (Eigen::Index i = 0; i < grid.size(); ++i) {
    c.acme(i) = SimTruth::acme(grid(i));
    c.te(i) = SimTruth::te(grid(i));
  }
  return c;
}

}  // namespace medfpca
