#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "medfpca/data.hpp"
#include "medfpca/errors.hpp"
#include "medfpca/stats.hpp"

namespace medfpca {

enum class GeeEquation { mediator, outcome };
enum class GeeCorr { independence, ar1 };

struct GeeFit {
  std::vector<std::string> names;
  Eigen::VectorXd coefficients;
  Eigen::MatrixXd robust_cov;  // sandwich
  double rho = 0.0;            // working AR(1) parameter on observation rank
  int n_iter_used = 0;
  bool converged = false;

  int index_of(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return static_cast<int>(i);
    throw DomainError("GeeFit: unknown coefficient '" + name + "'");
  }
  double coef(const std::string& name) const {
    return coefficients(index_of(name));
  }
  double var(const std::string& name) const {
    const int i = index_of(name);
    return robust_cov(i, i);
  }
};

namespace detail {

// Working AR(1) correlation on observation rank: [R]_{jk} = rho^|j-k|.
inline Eigen::MatrixXd ar1_corr(int n, double rho) {
  Eigen::MatrixXd R(n, n);
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b) R(a, b) = std::pow(rho, std::abs(a - b));
  return R;
}

}  // namespace detail

// Marginal mean models: mediator E(M|X,Z) = intercept + X'beta + tau_m Z,
// outcome E(Y|M,X,Z) = intercept + X'beta + tau_y Z + gamma M. Iterated
// generalized least squares: coefficient update under the current working
// correlation, then moment re-estimation of rho from lag-1 standardized
// residual products, until the max coefficient change drops below tol.
inline GeeFit fit_gee(const Dataset& ds, GeeEquation eq,
                      GeeCorr corr = GeeCorr::ar1, double tol = 1e-8,
                      int max_iter = 50) {
  auto rep = validate(ds);
  if (!rep.ok())
    throw ValidationError("fit_gee: invalid dataset ('" +
                          rep.violations.front().subject +
                          "': " + rep.violations.front().message + ")");
  const int ncov = static_cast<int>(ds.covariate_names.size());
  const int p = 2 + ncov + (eq == GeeEquation::outcome ? 1 : 0);

  GeeFit fit;
  fit.names.push_back("intercept");
  for (const auto& n : ds.covariate_names) fit.names.push_back(n);
  fit.names.push_back(eq == GeeEquation::mediator ? "tau_m" : "tau_y");
  if (eq == GeeEquation::outcome) fit.names.push_back("gamma");

  std::vector<Eigen::MatrixXd> X;
  std::vector<Eigen::VectorXd> y;
  for (const auto& s : ds.subjects) {
    const int n = s.n_obs();
    Eigen::MatrixXd Xi(n, p);
    Xi.col(0).setOnes();
    Xi.middleCols(1, ncov) = s.covariates;
    Xi.col(1 + ncov).setConstant(static_cast<double>(s.z));
    if (eq == GeeEquation::outcome)
      Xi.col(2 + ncov) = Eigen::Map<const Eigen::VectorXd>(s.mediator.data(), n);
    X.push_back(std::move(Xi));
    y.emplace_back(Eigen::Map<const Eigen::VectorXd>(
        eq == GeeEquation::mediator ? s.mediator.data() : s.outcome.data(), n));
  }

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  double rho = 0.0;
  Eigen::MatrixXd bread(p, p);
  std::vector<Eigen::MatrixXd> Rinv(X.size());

  for (int iter = 1; iter <= max_iter; ++iter) {
    bread.setZero();
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(p);
    for (std::size_t i = 0; i < X.size(); ++i) {
      const int n = static_cast<int>(y[i].size());
      if (corr == GeeCorr::ar1 && std::abs(rho) > 1e-14 && n > 1) {
        Rinv[i] = detail::ar1_corr(n, rho).llt().solve(
            Eigen::MatrixXd::Identity(n, n));
      } else {
        Rinv[i] = Eigen::MatrixXd::Identity(n, n);
      }
      bread += X[i].transpose() * Rinv[i] * X[i];
      rhs += X[i].transpose() * Rinv[i] * y[i];
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(bread);
    if (es.eigenvalues()(0) <= 1e-10 * std::max(es.eigenvalues()(p - 1), 1.0))
      throw DomainError("fit_gee: rank-deficient design matrix");
    const Eigen::VectorXd beta_new = bread.ldlt().solve(rhs);
    const double delta = (beta_new - beta).cwiseAbs().maxCoeff();
    beta = beta_new;
    fit.n_iter_used = iter;

    if (corr == GeeCorr::ar1) {
      double rss = 0.0, lag1 = 0.0;
      long nobs = 0, npairs = 0;
      for (std::size_t i = 0; i < X.size(); ++i) {
        const Eigen::VectorXd r = y[i] - X[i] * beta;
        rss += r.squaredNorm();
        nobs += r.size();
        for (Eigen::Index j = 0; j + 1 < r.size(); ++j) lag1 += r(j) * r(j + 1);
        npairs += std::max<long>(r.size() - 1, 0);
      }
      const double sigma2 = rss / std::max<double>(static_cast<double>(nobs - p), 1.0);
      double rho_new = 0.0;
      if (npairs > p && sigma2 > 0.0)
        rho_new = lag1 / (static_cast<double>(npairs - p) * sigma2);
      rho_new = std::clamp(rho_new, -0.99, 0.99);
      if (delta < tol && std::abs(rho_new - rho) < tol) {
        rho = rho_new;
        fit.converged = true;
        break;
      }
      rho = rho_new;
    } else if (delta < tol) {
      fit.converged = true;
      break;
    }
  }

  // sandwich covariance at the final iterate (scale parameter cancels)
  bread.setZero();
  Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(p, p);
  for (std::size_t i = 0; i < X.size(); ++i) {
    const int n = static_cast<int>(y[i].size());
    Eigen::MatrixXd Ri = Eigen::MatrixXd::Identity(n, n);
    if (corr == GeeCorr::ar1 && std::abs(rho) > 1e-14 && n > 1)
      Ri = detail::ar1_corr(n, rho).llt().solve(Ri).eval();
    const Eigen::VectorXd r = y[i] - X[i] * beta;
    const Eigen::MatrixXd xr = X[i].transpose() * Ri;
    bread += xr * X[i];
    const Eigen::VectorXd g = xr * r;
    meat += g * g.transpose();
  }
  const Eigen::MatrixXd binv =
      bread.ldlt().solve(Eigen::MatrixXd::Identity(p, p));
  fit.coefficients = beta;
  fit.robust_cov = binv * meat * binv;
  fit.robust_cov = 0.5 * (fit.robust_cov + fit.robust_cov.transpose()).eval();
  fit.rho = rho;
  return fit;
}

struct GeeMediation {
  GeeFit mediator_fit, outcome_fit;
  double acme = 0.0, te = 0.0;
  double acme_se = 0.0, te_se = 0.0;
  std::pair<double, double> acme_ci{0.0, 0.0};
  std::pair<double, double> te_ci{0.0, 0.0};
};

// Product-of-coefficients estimates: acme = gamma * tau_m, te = acme + tau_y.
// Delta-method variances treat the two equation fits as independent; the
// gamma/tau_y covariance within the outcome fit is retained.
inline GeeMediation gee_mediation(const Dataset& ds, GeeCorr corr = GeeCorr::ar1,
                                  double tol = 1e-8, int max_iter = 50) {
  GeeMediation out;
  out.mediator_fit = fit_gee(ds, GeeEquation::mediator, corr, tol, max_iter);
  out.outcome_fit = fit_gee(ds, GeeEquation::outcome, corr, tol, max_iter);
  const double tau_m = out.mediator_fit.coef("tau_m");
  const double tau_y = out.outcome_fit.coef("tau_y");
  const double gamma = out.outcome_fit.coef("gamma");
  const double v_tau_m = out.mediator_fit.var("tau_m");
  const double v_tau_y = out.outcome_fit.var("tau_y");
  const double v_gamma = out.outcome_fit.var("gamma");
  const int iy = out.outcome_fit.index_of("tau_y");
  const int ig = out.outcome_fit.index_of("gamma");
  const double c_gy = out.outcome_fit.robust_cov(ig, iy);

  out.acme = gamma * tau_m;
  out.te = out.acme + tau_y;
  const double v_acme = gamma * gamma * v_tau_m + tau_m * tau_m * v_gamma;
  const double v_te = v_acme + v_tau_y + 2.0 * tau_m * c_gy;
  out.acme_se = std::sqrt(std::max(v_acme, 0.0));
  out.te_se = std::sqrt(std::max(v_te, 0.0));
  out.acme_ci = {out.acme - kZ975 * out.acme_se, out.acme + kZ975 * out.acme_se};
  out.te_ci = {out.te - kZ975 * out.te_se, out.te + kZ975 * out.te_se};
  return out;
}

}  // namespace medfpca
