#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "medfpca/data.hpp"
#include "medfpca/errors.hpp"
#include "medfpca/gaussian.hpp"
#include "medfpca/rng.hpp"
#include "medfpca/splines.hpp"
#include "medfpca/stats.hpp"

namespace medfpca {

struct FpcaConfig {
  int n_components = 4;       // R (S in the outcome run)
  int n_knots = 10;           // L
  int grid_size = 50;         // G
  int n_iter = 4000;
  int n_burn = 2000;
  int thin = 2;
  std::uint64_t seed = 1;
  double fev_threshold = 0.90;
  double t_mixing_dof = 30.0;  // v; large v approximates Gaussian scores
  double mh_step = 0.3;        // log-scale random-walk step for a-updates
  double h_upper = 1e4;
  double sigma_prior_shape = 0.0;  // 0/0 reproduces the flat 1/sigma^2 update
  double sigma_prior_rate = 0.0;
  double rate_floor = 1e-10;
  bool update_eigenfunctions = true;

  void check() const {
    if (n_components < 1) throw ConfigError("fpca.n_components must be >= 1");
    if (n_knots < 1) throw ConfigError("fpca.n_knots must be >= 1");
    if (n_iter <= 0 || n_burn < 0 || n_iter < n_burn)
      throw ConfigError("fpca.n_iter must exceed n_burn >= 0");
    if (thin < 1) throw ConfigError("fpca.thin must be >= 1");
    if (!(fev_threshold > 0.0 && fev_threshold <= 1.0))
      throw ConfigError("fpca.fev_threshold must lie in (0,1]");
    if (!(t_mixing_dof > 0.0)) throw ConfigError("fpca.t_mixing_dof must be positive");
    if (!(mh_step > 0.0)) throw ConfigError("fpca.mh_step must be positive");
  }
};

// One response model's data: per-subject response vectors and regression
// designs over a shared treatment indicator and time grid. The same sampler
// fits the mediator model and (with the mediator appended as the last design
// column) the outcome model.
struct ResponseDesign {
  std::vector<std::string> ids;
  std::vector<int> z;
  std::vector<Eigen::VectorXd> times;
  std::vector<Eigen::VectorXd> response;
  std::vector<Eigen::MatrixXd> design;
  bool has_concurrent_column = false;  // true in the outcome run

  int n_subjects() const { return static_cast<int>(ids.size()); }
  int n_covariates() const {
    return design.empty() ? 0 : static_cast<int>(design.front().cols());
  }
  int total_obs() const {
    int n = 0;
    for (const auto& t : times) n += static_cast<int>(t.size());
    return n;
  }
};

inline ResponseDesign mediator_design(const Dataset& ds) {
  ResponseDesign d;
  for (const auto& s : ds.subjects) {
    d.ids.push_back(s.id);
    d.z.push_back(s.z);
    d.times.push_back(Eigen::Map<const Eigen::VectorXd>(s.times.data(), s.n_obs()));
    d.response.push_back(
        Eigen::Map<const Eigen::VectorXd>(s.mediator.data(), s.n_obs()));
    d.design.push_back(s.covariates);
  }
  return d;
}

// Outcome design: covariates plus the concurrent mediator column (imputed
// posterior-mean values or the raw observations).
inline ResponseDesign outcome_design(const Dataset& ds,
                                     const std::vector<Eigen::VectorXd>& mediator_col) {
  if (mediator_col.size() != ds.subjects.size())
    throw DomainError("outcome_design: mediator column count mismatch");
  ResponseDesign d;
  for (std::size_t i = 0; i < ds.subjects.size(); ++i) {
    const auto& s = ds.subjects[i];
    if (mediator_col[i].size() != s.n_obs())
      throw DomainError("outcome_design: mediator column length mismatch for '" +
                        s.id + "'");
    d.ids.push_back(s.id);
    d.z.push_back(s.z);
    d.times.push_back(Eigen::Map<const Eigen::VectorXd>(s.times.data(), s.n_obs()));
    d.response.push_back(
        Eigen::Map<const Eigen::VectorXd>(s.outcome.data(), s.n_obs()));
    Eigen::MatrixXd X(s.n_obs(), s.covariates.cols() + 1);
    X.leftCols(s.covariates.cols()) = s.covariates;
    X.rightCols(1) = mediator_col[i];
    d.design.push_back(std::move(X));
  }
  d.has_concurrent_column = true;
  return d;
}

// Full Gibbs state of one FPCA model.
struct FpcaState {
  Eigen::MatrixXd basis_coeffs;  // (L+2) x R, column r is p_r
  Eigen::MatrixXd scores;        // N x R
  Eigen::VectorXd group_mean0, group_mean1;  // chi_0, chi_1 (R)
  Eigen::VectorXd score_vars;    // lambda_r^2
  Eigen::VectorXd smoothness;    // h_r
  double noise_var = 1.0;        // sigma^2
  Eigen::VectorXd reg_coeffs;    // beta (gamma is the last entry in outcome runs)
  Eigen::MatrixXd mix_weights;   // xi_{i,r}
  Eigen::VectorXd shrink_delta, shrink_delta_chi;  // multiplicative increments
  double a1 = 2.0, a2 = 3.0, achi1 = 2.0, achi2 = 3.0;
  std::array<long, 4> mh_accept{}, mh_total{};

  int n_components() const { return static_cast<int>(score_vars.size()); }

  double chi_var(int r) const {
    double prec = 1.0;
    for (int l = 0; l <= r; ++l) prec *= shrink_delta_chi(l);
    return std::clamp(1.0 / prec, 1e-12, 1e12);
  }
};

struct FpcaDrawEntry {
  Eigen::MatrixXd basis_coeffs;
  Eigen::MatrixXd scores;
  Eigen::VectorXd chi0, chi1, lambda2, h;
  double sigma2 = 1.0;
  Eigen::VectorXd beta;

  double gamma() const { return beta.size() ? beta(beta.size() - 1) : 0.0; }
};

struct FpcaDraws {
  std::shared_ptr<const ResponseDesign> design;
  SplineBasis basis;
  FpcaConfig config;
  std::vector<FpcaDrawEntry> draws;
  std::string warning;
  double max_orthonormality_dev = 0.0;
  std::array<double, 4> mh_acceptance{};  // a1, a2, achi1, achi2

  int n_draws() const { return static_cast<int>(draws.size()); }

  Eigen::VectorXd posterior_mean_lambda2() const {
    Eigen::VectorXd m = Eigen::VectorXd::Zero(config.n_components);
    for (const auto& d : draws) m += d.lambda2;
    if (!draws.empty()) m /= static_cast<double>(draws.size());
    return m;
  }

  // Fitted latent trajectory of one subject for one retained draw, evaluated
  // at arbitrary times; the regression part uses the subject's mean covariate
  // row.
  Eigen::VectorXd trajectory(int draw, int subject, const Eigen::VectorXd& at) const {
    const auto& e = draws.at(static_cast<std::size_t>(draw));
    const Eigen::MatrixXd B = basis.eval_rows(at);
    Eigen::VectorXd out =
        B * (e.basis_coeffs * e.scores.row(subject).transpose());
    const auto& X = design->design[static_cast<std::size_t>(subject)];
    if (X.cols() > 0) {
      const Eigen::RowVectorXd xbar = X.colwise().mean();
      out.array() += xbar.dot(e.beta);
    }
    return out;
  }

  // Posterior-mean fitted values at each subject's observed times (the
  // imputed latent process used as the outcome model's mediator column).
  std::vector<Eigen::VectorXd> posterior_mean_fitted() const {
    std::vector<Eigen::VectorXd> out;
    const int n = design->n_subjects();
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      const auto& t = design->times[static_cast<std::size_t>(i)];
      const auto& X = design->design[static_cast<std::size_t>(i)];
      const Eigen::MatrixXd B = basis.eval_rows(t);
      Eigen::VectorXd acc = Eigen::VectorXd::Zero(t.size());
      for (const auto& e : draws) {
        acc += B * (e.basis_coeffs * e.scores.row(i).transpose());
        if (X.cols() > 0) acc += X * e.beta;
      }
      if (!draws.empty()) acc /= static_cast<double>(draws.size());
      out.push_back(std::move(acc));
    }
    return out;
  }
};

// Gibbs sampler for one FPCA response model. Sweep steps follow the order:
// eigenfunctions (+ smoothness), scores, group means, regression, variances.
class FpcaSampler {
 public:
  FpcaSampler(std::shared_ptr<const ResponseDesign> design, SplineBasis basis,
              FpcaConfig cfg)
      : design_(std::move(design)), basis_(std::move(basis)), cfg_(cfg) {
    cfg_.check();
    const int n = design_->n_subjects();
    if (n == 0) throw ValidationError("fpca: empty design");
    bt_.reserve(static_cast<std::size_t>(n));
    btb_.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      Eigen::MatrixXd B = basis_.eval_rows(design_->times[static_cast<std::size_t>(i)]);
      btb_.push_back(B.transpose() * B);
      bt_.push_back(std::move(B));
    }
  }

  const SplineBasis& basis() const { return basis_; }
  const ResponseDesign& design() const { return *design_; }
  const FpcaConfig& config() const { return cfg_; }

  // Initialization: pooled least squares for beta, per-subject ridge
  // projection of residual trajectories onto the basis, top-R eigenvectors of
  // the projected coefficient covariance in the Gram metric, least-squares
  // scores, and moment-based variances.
  FpcaState init_state() const {
    const int n = design_->n_subjects();
    const int p = design_->n_covariates();
    const int dim = basis_.dim;
    const int R = cfg_.n_components;
    if (design_->total_obs() < dim + p)
      throw ValidationError("fpca: insufficient data (" +
                            std::to_string(design_->total_obs()) +
                            " observations for " + std::to_string(dim + p) +
                            " parameters)");
    FpcaState st;
    st.reg_coeffs = Eigen::VectorXd::Zero(p);
    if (p > 0) {
      Eigen::MatrixXd xtx = Eigen::MatrixXd::Zero(p, p);
      Eigen::VectorXd xty = Eigen::VectorXd::Zero(p);
      for (int i = 0; i < n; ++i) {
        const auto& X = design_->design[static_cast<std::size_t>(i)];
        xtx += X.transpose() * X;
        xty += X.transpose() * design_->response[static_cast<std::size_t>(i)];
      }
      xtx.diagonal().array() += 1e-8 * std::max(xtx.diagonal().mean(), 1.0);
      st.reg_coeffs = xtx.ldlt().solve(xty);
    }

    // ridge-project each residual trajectory onto the basis
    Eigen::MatrixXd coef(dim, n);
    const double kappa = 1e-2;
    for (int i = 0; i < n; ++i) {
      Eigen::VectorXd r = design_->response[static_cast<std::size_t>(i)];
      if (p > 0) r -= design_->design[static_cast<std::size_t>(i)] * st.reg_coeffs;
      Eigen::MatrixXd A = btb_[static_cast<std::size_t>(i)];
      A.diagonal().array() += kappa;
      coef.col(i) = A.ldlt().solve(bt_[static_cast<std::size_t>(i)].transpose() * r);
    }
    const Eigen::MatrixXd S = coef * coef.transpose() / static_cast<double>(n);

    // eigenfunctions orthonormal in the Gram metric: with G = LL', solve the
    // ordinary eigenproblem for L' S L and map back via p = L^-T q
    Eigen::MatrixXd G = basis_.gram;
    G.diagonal().array() += 1e-12 * std::max(G.diagonal().mean(), 1.0);
    Eigen::LLT<Eigen::MatrixXd> llt(G);
    if (llt.info() != Eigen::Success)
      throw NumericalError("fpca init: Gram matrix not positive definite");
    const Eigen::MatrixXd L = llt.matrixL();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(L.transpose() * S * L);
    st.basis_coeffs.resize(dim, R);
    for (int r = 0; r < R; ++r) {
      const Eigen::VectorXd q = eig.eigenvectors().col(dim - 1 - r);
      st.basis_coeffs.col(r) =
          L.transpose().triangularView<Eigen::Upper>().solve(q);
    }

    // least-squares scores on the initialized components
    st.scores.resize(n, R);
    for (int i = 0; i < n; ++i) {
      const Eigen::MatrixXd psi = bt_[static_cast<std::size_t>(i)] * st.basis_coeffs;
      Eigen::MatrixXd A = psi.transpose() * psi;
      A.diagonal().array() += 1e-8;
      Eigen::VectorXd r = design_->response[static_cast<std::size_t>(i)];
      if (p > 0) r -= design_->design[static_cast<std::size_t>(i)] * st.reg_coeffs;
      st.scores.row(i) = A.ldlt().solve(psi.transpose() * r).transpose();
    }

    st.group_mean0 = Eigen::VectorXd::Zero(R);
    st.group_mean1 = Eigen::VectorXd::Zero(R);
    int n0 = 0, n1 = 0;
    for (int i = 0; i < n; ++i) {
      if (design_->z[static_cast<std::size_t>(i)] == 1) {
        st.group_mean1 += st.scores.row(i).transpose();
        ++n1;
      } else {
        st.group_mean0 += st.scores.row(i).transpose();
        ++n0;
      }
    }
    if (n0 > 0) st.group_mean0 /= n0;
    if (n1 > 0) st.group_mean1 /= n1;

    Eigen::VectorXd lam2(R);
    for (int r = 0; r < R; ++r) {
      std::vector<double> col(st.scores.col(r).data(), st.scores.col(r).data() + n);
      lam2(r) = std::max(variance_of(col), 1e-4);
    }
    st.shrink_delta.resize(R);
    st.shrink_delta(0) = std::clamp(1.0 / lam2(0), 1e-6, 1e6);
    for (int r = 1; r < R; ++r)
      st.shrink_delta(r) = std::clamp(lam2(r - 1) / lam2(r), 1e-6, 1e6);
    st.score_vars = lambda2_from_deltas(st.shrink_delta);

    st.shrink_delta_chi.resize(R);
    Eigen::VectorXd chivar(R);
    for (int r = 0; r < R; ++r)
      chivar(r) = std::max(1.0, st.group_mean0(r) * st.group_mean0(r) +
                                    st.group_mean1(r) * st.group_mean1(r));
    st.shrink_delta_chi(0) = std::clamp(1.0 / chivar(0), 1e-6, 1e6);
    for (int r = 1; r < R; ++r)
      st.shrink_delta_chi(r) = std::clamp(chivar(r - 1) / chivar(r), 1e-6, 1e6);

    double rss = 0.0;
    for (int i = 0; i < n; ++i) {
      Eigen::VectorXd r = design_->response[static_cast<std::size_t>(i)];
      if (p > 0) r -= design_->design[static_cast<std::size_t>(i)] * st.reg_coeffs;
      r -= (bt_[static_cast<std::size_t>(i)] * st.basis_coeffs) *
           st.scores.row(i).transpose();
      rss += r.squaredNorm();
    }
    st.noise_var = std::max(rss / std::max(design_->total_obs(), 1), 1e-6);

    st.mix_weights = Eigen::MatrixXd::Ones(n, R);
    st.smoothness.resize(R);
    for (int r = 0; r < R; ++r)
      st.smoothness(r) =
          std::clamp(10.0 * st.score_vars(r), st.score_vars(r), cfg_.h_upper);
    return st;
  }

  // --- full-conditional moments (shared by the sweeps and the test oracles) ---

  // N(mean, var) full conditional of score zeta_{i,r}.
  std::pair<double, double> score_conditional(const FpcaState& st, int i, int r) const {
    const Eigen::VectorXd psi_r = bt_[static_cast<std::size_t>(i)] * st.basis_coeffs.col(r);
    const Eigen::VectorXd e = residual_excluding(st, i, r);
    const double lam2 = st.score_vars(r);
    const double xi = st.mix_weights(i, r);
    const double chi = design_->z[static_cast<std::size_t>(i)] == 1
                           ? st.group_mean1(r)
                           : st.group_mean0(r);
    const double prec = psi_r.squaredNorm() / st.noise_var + xi / lam2;
    const double num = e.dot(psi_r) / st.noise_var + chi * xi / lam2;
    return {num / prec, 1.0 / prec};
  }

  // N(mean, var) full conditional of chi_z^r.
  std::pair<double, double> group_mean_conditional(const FpcaState& st, int z,
                                                   int r) const {
    const double lam2 = st.score_vars(r);
    double prec = 1.0 / st.chi_var(r);
    double num = 0.0;
    for (int i = 0; i < design_->n_subjects(); ++i) {
      if (design_->z[static_cast<std::size_t>(i)] != z) continue;
      prec += st.mix_weights(i, r) / lam2;
      num += st.scores(i, r) * st.mix_weights(i, r) / lam2;
    }
    return {num / prec, 1.0 / prec};
  }

  // Gaussian full conditional of beta: returns (precision, linear term).
  std::pair<Eigen::MatrixXd, Eigen::VectorXd> regression_conditional(
      const FpcaState& st) const {
    const int p = design_->n_covariates();
    Eigen::MatrixXd Q = Eigen::MatrixXd::Identity(p, p) * 1e-4;  // N(0, 100^2 I)
    Eigen::VectorXd l = Eigen::VectorXd::Zero(p);
    for (int i = 0; i < design_->n_subjects(); ++i) {
      const auto& X = design_->design[static_cast<std::size_t>(i)];
      Eigen::VectorXd r = design_->response[static_cast<std::size_t>(i)] -
                          (bt_[static_cast<std::size_t>(i)] * st.basis_coeffs) *
                              st.scores.row(i).transpose();
      Q += X.transpose() * X / st.noise_var;
      l += X.transpose() * r / st.noise_var;
    }
    return {Q, l};
  }

  // Gamma(shape, rate) full conditional of sigma^-2.
  std::pair<double, double> sigma_conditional(const FpcaState& st) const {
    double rss = 0.0;
    int nobs = 0;
    for (int i = 0; i < design_->n_subjects(); ++i) {
      rss += full_residual(st, i).squaredNorm();
      nobs += static_cast<int>(design_->times[static_cast<std::size_t>(i)].size());
    }
    const double shape = 0.5 * nobs + cfg_.sigma_prior_shape;
    const double rate =
        std::max(0.5 * rss + cfg_.sigma_prior_rate, cfg_.rate_floor);
    return {shape, rate};
  }

  // Gamma(shape, rate) full conditional of xi_{i,r}.
  std::pair<double, double> xi_conditional(const FpcaState& st, int i, int r) const {
    const double v = cfg_.t_mixing_dof;
    const double chi = design_->z[static_cast<std::size_t>(i)] == 1
                           ? st.group_mean1(r)
                           : st.group_mean0(r);
    const double d = st.scores(i, r) - chi;
    return {0.5 * (v + 1.0), 0.5 * (v + d * d / st.score_vars(r))};
  }

  // Gamma(shape, rate) full conditional of the l-th score-variance increment
  // delta_l (0-based).
  std::pair<double, double> delta_conditional(const FpcaState& st, int l) const {
    const int R = st.n_components();
    const int n = design_->n_subjects();
    const double shape = (l == 0 ? st.a1 : st.a2) +
                         0.5 * static_cast<double>(R - l) * n;
    double rate = 1.0;
    for (int r = l; r < R; ++r) {
      double prod = 1.0;
      for (int j = 0; j <= r; ++j)
        if (j != l) prod *= st.shrink_delta(j);
      double s = 0.0;
      for (int i = 0; i < n; ++i) {
        const double chi = design_->z[static_cast<std::size_t>(i)] == 1
                               ? st.group_mean1(r)
                               : st.group_mean0(r);
        const double d = st.scores(i, r) - chi;
        s += st.mix_weights(i, r) * d * d;
      }
      rate += 0.5 * prod * s;
    }
    return {shape, rate};
  }

  // Gamma(shape, rate) full conditional of delta_chi_l (0-based).
  std::pair<double, double> delta_chi_conditional(const FpcaState& st, int l) const {
    const int R = st.n_components();
    const double shape = (l == 0 ? st.achi1 : st.achi2) + static_cast<double>(R - l);
    double rate = 1.0;
    for (int r = l; r < R; ++r) {
      double prod = 1.0;
      for (int j = 0; j <= r; ++j)
        if (j != l) prod *= st.shrink_delta_chi(j);
      rate += 0.5 * prod *
              (st.group_mean0(r) * st.group_mean0(r) +
               st.group_mean1(r) * st.group_mean1(r));
    }
    return {shape, rate};
  }

  // --- sweep steps ---

  void sweep_eigenfunctions(FpcaState& st, RngStream& rng) const {
    const int R = st.n_components();
    const int dim = basis_.dim;
    for (int r = 0; r < R; ++r) {
      Eigen::MatrixXd Q = st.smoothness(r) * basis_.penalty_psd;
      Eigen::VectorXd l = Eigen::VectorXd::Zero(dim);
      for (int i = 0; i < design_->n_subjects(); ++i) {
        const double zeta = st.scores(i, r);
        Q += btb_[static_cast<std::size_t>(i)] * (zeta * zeta / st.noise_var);
        const Eigen::VectorXd e = residual_excluding(st, i, r);
        l += bt_[static_cast<std::size_t>(i)].transpose() * e * (zeta / st.noise_var);
      }
      Eigen::MatrixXd C(R - 1, dim);
      int row = 0;
      for (int r2 = 0; r2 < R; ++r2) {
        if (r2 == r) continue;
        C.row(row++) = (basis_.gram * st.basis_coeffs.col(r2)).transpose();
      }
      Eigen::VectorXd p = constrained_gaussian_draw(Q, l, C, rng);
      const double norm = std::sqrt(std::max(grid_integral(basis_, p, p), 0.0));
      if (!(norm > 1e-150))
        throw NumericalError("eigenfunction draw collapsed to zero norm");
      p /= norm;
      st.basis_coeffs.col(r) = p;
      st.scores.col(r) *= norm;  // keeps the likelihood term unchanged

      const double rate = std::max(p.dot(basis_.penalty_psd * p), 1e-12);
      const double lo = std::min(st.score_vars(r), cfg_.h_upper * (1.0 - 1e-12));
      st.smoothness(r) = truncated_gamma(rng, 0.5 * (basis_.dim - 1), rate, lo,
                                         cfg_.h_upper);
    }
  }

  void sweep_scores(FpcaState& st, RngStream& rng) const {
    for (int i = 0; i < design_->n_subjects(); ++i)
      for (int r = 0; r < st.n_components(); ++r) {
        auto [mean, var] = score_conditional(st, i, r);
        st.scores(i, r) = rng.normal(mean, std::sqrt(var));
      }
  }

  void sweep_group_means(FpcaState& st, RngStream& rng) const {
    for (int z = 0; z < 2; ++z)
      for (int r = 0; r < st.n_components(); ++r) {
        auto [mean, var] = group_mean_conditional(st, z, r);
        const double draw = rng.normal(mean, std::sqrt(var));
        if (z == 0)
          st.group_mean0(r) = draw;
        else
          st.group_mean1(r) = draw;
      }
  }

  void sweep_regression(FpcaState& st, RngStream& rng) const {
    if (design_->n_covariates() == 0) return;
    auto [Q, l] = regression_conditional(st);
    st.reg_coeffs = constrained_gaussian_draw(Q, l, Eigen::MatrixXd(0, Q.rows()), rng);
  }

  void sweep_variances(FpcaState& st, RngStream& rng) const {
    const int R = st.n_components();
    // (a) observation noise
    auto [sh, ra] = sigma_conditional(st);
    st.noise_var = std::clamp(1.0 / rng.gamma(sh, ra), 1e-12, 1e12);
    // (b) group-mean shrinkage increments
    for (int l = 0; l < R; ++l) {
      auto [s, r] = delta_chi_conditional(st, l);
      st.shrink_delta_chi(l) = rng.gamma(s, r);
    }
    // (c) score-variance shrinkage increments
    for (int l = 0; l < R; ++l) {
      auto [s, r] = delta_conditional(st, l);
      st.shrink_delta(l) = rng.gamma(s, r);
    }
    st.score_vars = lambda2_from_deltas(st.shrink_delta);
    // (d) t-mixing weights
    for (int i = 0; i < design_->n_subjects(); ++i)
      for (int r = 0; r < R; ++r) {
        auto [s, ra2] = xi_conditional(st, i, r);
        st.mix_weights(i, r) = rng.gamma(s, ra2);
      }
    // (e) Metropolis-Hastings on the shrinkage shapes, log-scale random walk
    mh_shape_update(st, 0, st.a1, 2.0, {st.shrink_delta(0)}, rng);
    mh_shape_update(st, 1, st.a2, 3.0, tail_of(st.shrink_delta), rng);
    mh_shape_update(st, 2, st.achi1, 2.0, {st.shrink_delta_chi(0)}, rng);
    mh_shape_update(st, 3, st.achi2, 3.0, tail_of(st.shrink_delta_chi), rng);
  }

  void sweep(FpcaState& st, RngStream& rng) const {
    if (cfg_.update_eigenfunctions) sweep_eigenfunctions(st, rng);
    sweep_scores(st, rng);
    sweep_group_means(st, rng);
    sweep_regression(st, rng);
    sweep_variances(st, rng);
  }

  // Max deviation of the component Gram matrix from the identity.
  double orthonormality_deviation(const FpcaState& st) const {
    const Eigen::MatrixXd M =
        st.basis_coeffs.transpose() * basis_.gram * st.basis_coeffs;
    return (M - Eigen::MatrixXd::Identity(M.rows(), M.cols()))
        .cwiseAbs()
        .maxCoeff();
  }

  Eigen::VectorXd full_residual(const FpcaState& st, int i) const {
    Eigen::VectorXd r = design_->response[static_cast<std::size_t>(i)];
    if (design_->n_covariates() > 0)
      r -= design_->design[static_cast<std::size_t>(i)] * st.reg_coeffs;
    r -= (bt_[static_cast<std::size_t>(i)] * st.basis_coeffs) *
         st.scores.row(i).transpose();
    return r;
  }

  Eigen::VectorXd residual_excluding(const FpcaState& st, int i, int r) const {
    Eigen::VectorXd e = full_residual(st, i);
    e += (bt_[static_cast<std::size_t>(i)] * st.basis_coeffs.col(r)) * st.scores(i, r);
    return e;
  }

  static Eigen::VectorXd lambda2_from_deltas(const Eigen::VectorXd& deltas) {
    Eigen::VectorXd lam2(deltas.size());
    double prec = 1.0;
    for (Eigen::Index r = 0; r < deltas.size(); ++r) {
      prec *= deltas(r);
      lam2(r) = std::clamp(1.0 / prec, 1e-12, 1e12);
    }
    return lam2;
  }

 private:
  static std::vector<double> tail_of(const Eigen::VectorXd& v) {
    std::vector<double> out;
    for (Eigen::Index i = 1; i < v.size(); ++i) out.push_back(v(i));
    return out;
  }

  void mh_shape_update(FpcaState& st, int which, double& a, double prior_shape,
                       const std::vector<double>& deltas, RngStream& rng) const {
    auto logpost = [&](double x) {
      // density of log(a): Ga(a; prior_shape, 1) with Jacobian a
      double lp = gamma_logpdf(x, prior_shape, 1.0) + std::log(x);
      for (double d : deltas) lp += gamma_logpdf(d, x, 1.0);
      return lp;
    };
    const double prop = a * std::exp(cfg_.mh_step * rng.normal());
    ++st.mh_total[static_cast<std::size_t>(which)];
    if (std::log(rng.uniform()) < logpost(prop) - logpost(a)) {
      a = prop;
      ++st.mh_accept[static_cast<std::size_t>(which)];
    }
  }

  std::shared_ptr<const ResponseDesign> design_;
  SplineBasis basis_;
  FpcaConfig cfg_;
  std::vector<Eigen::MatrixXd> bt_;   // per-subject basis rows
  std::vector<Eigen::MatrixXd> btb_;  // cached B_i' B_i
};

// Relabel retained draws: components sorted by posterior-mean lambda^2
// (descending) with the sign fixed so the grid integral of each component is
// non-negative. Effect curves are invariant to this; it only stabilizes
// reporting.
inline void postprocess_draws(FpcaDraws& d) {
  if (d.draws.empty()) return;
  const int R = d.config.n_components;
  Eigen::VectorXd mean_l2 = d.posterior_mean_lambda2();
  std::vector<int> order(static_cast<std::size_t>(R));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return mean_l2(a) > mean_l2(b); });
  const Eigen::VectorXd integ =
      d.basis.basis_on_grid.transpose() * d.basis.quad_weights;  // dim
  for (auto& e : d.draws) {
    FpcaDrawEntry out = e;
    for (int k = 0; k < R; ++k) {
      const int r = order[static_cast<std::size_t>(k)];
      double sign = integ.dot(e.basis_coeffs.col(r)) < 0.0 ? -1.0 : 1.0;
      out.basis_coeffs.col(k) = sign * e.basis_coeffs.col(r);
      out.scores.col(k) = sign * e.scores.col(r);
      out.chi0(k) = sign * e.chi0(r);
      out.chi1(k) = sign * e.chi1(r);
      out.lambda2(k) = e.lambda2(r);
      out.h(k) = e.h(r);
    }
    e = std::move(out);
  }
}

// Run a full chain: init, n_iter sweeps, post-burn thinned retention.
// Deterministic given cfg.seed.
inline FpcaDraws run_chain(std::shared_ptr<const ResponseDesign> design,
                           const SplineBasis& basis, const FpcaConfig& cfg) {
  FpcaSampler sampler(design, basis, cfg);
  FpcaDraws out;
  out.design = std::move(design);
  out.basis = basis;
  out.config = cfg;
  FpcaState st = sampler.init_state();
  RngStream rng = RngStream(cfg.seed).derived("fpca-chain");
  for (int iter = 1; iter <= cfg.n_iter; ++iter) {
    try {
      sampler.sweep(st, rng);
    } catch (const NumericalError& e) {
      throw NumericalError("chain aborted at sweep " + std::to_string(iter) +
                           ": " + e.what());
    }
    if (iter > cfg.n_burn && (iter - cfg.n_burn - 1) % cfg.thin == 0) {
      const double dev = sampler.orthonormality_deviation(st);
      out.max_orthonormality_dev = std::max(out.max_orthonormality_dev, dev);
      if (dev > 1e-6)
        throw NumericalError("orthonormality drift " + std::to_string(dev) +
                             " at sweep " + std::to_string(iter));
      FpcaDrawEntry e;
      e.basis_coeffs = st.basis_coeffs;
      e.scores = st.scores;
      e.chi0 = st.group_mean0;
      e.chi1 = st.group_mean1;
      e.lambda2 = st.score_vars;
      e.h = st.smoothness.cwiseMax(st.score_vars).cwiseMin(cfg.h_upper);
      e.sigma2 = st.noise_var;
      e.beta = st.reg_coeffs;
      out.draws.push_back(std::move(e));
    }
  }
  for (int k = 0; k < 4; ++k)
    out.mh_acceptance[static_cast<std::size_t>(k)] =
        st.mh_total[static_cast<std::size_t>(k)] > 0
            ? static_cast<double>(st.mh_accept[static_cast<std::size_t>(k)]) /
                  static_cast<double>(st.mh_total[static_cast<std::size_t>(k)])
            : 0.0;
  if (out.draws.empty())
    out.warning = "no retained draws: n_iter does not exceed n_burn";
  postprocess_draws(out);
  return out;
}

// Smallest R whose cumulative posterior-mean lambda^2 share reaches the
// threshold, components sorted by posterior-mean lambda^2 descending.
inline int select_truncation(const FpcaDraws& pilot, double threshold) {
  Eigen::VectorXd l2 = pilot.posterior_mean_lambda2();
  std::vector<double> v(l2.data(), l2.data() + l2.size());
  std::sort(v.begin(), v.end(), std::greater<>());
  const double total = std::accumulate(v.begin(), v.end(), 0.0);
  if (!(total > 0.0)) return 1;
  double cum = 0.0;
  for (std::size_t r = 0; r < v.size(); ++r) {
    cum += v[r];
    if (cum / total >= threshold - 1e-12) return static_cast<int>(r) + 1;
  }
  return static_cast<int>(v.size());
}

}  // namespace medfpca
