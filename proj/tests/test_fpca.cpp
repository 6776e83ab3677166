#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <vector>

#include "medfpca/fpca.hpp"
#include "medfpca/simulate.hpp"

using namespace medfpca;

namespace {

// Small randomized design + state for oracle checks.
struct Instance {
  std::shared_ptr<const ResponseDesign> design;
  SplineBasis basis;
  FpcaConfig cfg;
  FpcaState state;
};

Instance random_instance(RngStream& rng, int n_cov = 2) {
  const int N = 6, R = 2, L = 3;
  auto d = std::make_shared<ResponseDesign>();
  for (int i = 0; i < N; ++i) {
    const int T = 3 + static_cast<int>(rng.uniform() * 4);
    Eigen::VectorXd t(T);
    for (int j = 0; j < T; ++j) t(j) = rng.uniform();
    std::sort(t.data(), t.data() + T);
    d->ids.push_back("s" + std::to_string(i));
    d->z.push_back(i % 2);
    d->times.push_back(t);
    d->response.push_back(rng.normal_vector(T) * 2.0);
    Eigen::MatrixXd X(T, n_cov);
    for (int j = 0; j < T; ++j)
      for (int c = 0; c < n_cov; ++c) X(j, c) = rng.normal();
    d->design.push_back(X);
  }
  Eigen::VectorXd knots(L);
  knots << 0.25, 0.5, 0.75;
  Instance inst;
  inst.design = d;
  inst.basis = make_basis(knots, 30);
  inst.cfg.n_components = R;
  inst.cfg.n_knots = L;
  inst.cfg.seed = 1;

  FpcaState& st = inst.state;
  const int dim = L + 2;
  st.basis_coeffs.resize(dim, R);
  for (int r = 0; r < R; ++r)
    for (int k = 0; k < dim; ++k) st.basis_coeffs(k, r) = rng.normal();
  st.scores.resize(N, R);
  st.mix_weights.resize(N, R);
  for (int i = 0; i < N; ++i)
    for (int r = 0; r < R; ++r) {
      st.scores(i, r) = rng.normal();
      st.mix_weights(i, r) = rng.uniform(0.5, 2.0);
    }
  st.group_mean0 = rng.normal_vector(R);
  st.group_mean1 = rng.normal_vector(R);
  st.shrink_delta.resize(R);
  st.shrink_delta_chi.resize(R);
  for (int r = 0; r < R; ++r) {
    st.shrink_delta(r) = rng.uniform(0.5, 2.0);
    st.shrink_delta_chi(r) = rng.uniform(0.5, 2.0);
  }
  st.score_vars = FpcaSampler::lambda2_from_deltas(st.shrink_delta);
  st.smoothness = Eigen::VectorXd::Constant(R, 5.0);
  st.noise_var = rng.uniform(0.5, 2.0);
  st.reg_coeffs = rng.normal_vector(n_cov);
  st.a1 = rng.uniform(1.0, 4.0);
  st.a2 = rng.uniform(1.0, 4.0);
  st.achi1 = rng.uniform(1.0, 4.0);
  st.achi2 = rng.uniform(1.0, 4.0);
  return inst;
}

// Residual of subject i excluding component r, computed with plain loops.
Eigen::VectorXd oracle_residual_excl(const Instance& inst, int i, int r) {
  const auto& d = *inst.design;
  const Eigen::VectorXd& t = d.times[i];
  Eigen::VectorXd e(t.size());
  for (Eigen::Index j = 0; j < t.size(); ++j) {
    double fit = 0.0;
    const Eigen::VectorXd b = inst.basis.eval(t(j));
    for (int r2 = 0; r2 < inst.state.n_components(); ++r2) {
      if (r2 == r) continue;
      fit += inst.state.scores(i, r2) * b.dot(inst.state.basis_coeffs.col(r2));
    }
    for (Eigen::Index c = 0; c < d.design[i].cols(); ++c)
      fit += d.design[i](j, c) * inst.state.reg_coeffs(c);
    e(j) = d.response[i](j) - fit;
  }
  return e;
}

}  // namespace

TEST_CASE("conjugate full conditionals match independent oracles") {
  RngStream rng(101);
  const double tol = 1e-10;
  for (int trial = 0; trial < 1000; ++trial) {
    Instance inst = random_instance(rng);
    FpcaSampler sampler(inst.design, inst.basis, inst.cfg);
    const FpcaState& st = inst.state;
    const auto& d = *inst.design;
    const int N = d.n_subjects(), R = st.n_components();
    const int i = trial % N, r = trial % R;

    {  // score zeta_{i,r}
      const Eigen::VectorXd e = oracle_residual_excl(inst, i, r);
      double prec = st.mix_weights(i, r) / st.score_vars(r);
      double num = (d.z[i] ? st.group_mean1(r) : st.group_mean0(r)) *
                   st.mix_weights(i, r) / st.score_vars(r);
      for (Eigen::Index j = 0; j < d.times[i].size(); ++j) {
        const double psi =
            inst.basis.eval(d.times[i](j)).dot(st.basis_coeffs.col(r));
        prec += psi * psi / st.noise_var;
        num += psi * e(j) / st.noise_var;
      }
      auto [mean, var] = sampler.score_conditional(st, i, r);
      CHECK(std::abs(mean - num / prec) < tol);
      CHECK(std::abs(var - 1.0 / prec) < tol);
    }

    {  // group mean chi_z^r
      const int z = trial % 2;
      double chi_var = 1.0;
      for (int l = 0; l <= r; ++l) chi_var *= st.shrink_delta_chi(l);
      chi_var = 1.0 / chi_var;
      double prec = 1.0 / chi_var, num = 0.0;
      for (int ii = 0; ii < N; ++ii) {
        if (d.z[ii] != z) continue;
        prec += st.mix_weights(ii, r) / st.score_vars(r);
        num += st.scores(ii, r) * st.mix_weights(ii, r) / st.score_vars(r);
      }
      auto [mean, var] = sampler.group_mean_conditional(st, z, r);
      CHECK(std::abs(mean - num / prec) < tol);
      CHECK(std::abs(var - 1.0 / prec) < tol);
    }

    {  // regression block
      const int p = d.n_covariates();
      Eigen::MatrixXd Q = Eigen::MatrixXd::Identity(p, p) / (100.0 * 100.0);
      Eigen::VectorXd l = Eigen::VectorXd::Zero(p);
      for (int ii = 0; ii < N; ++ii)
        for (Eigen::Index j = 0; j < d.times[ii].size(); ++j) {
          const Eigen::VectorXd x = d.design[ii].row(j).transpose();
          double fit = 0.0;
          const Eigen::VectorXd b = inst.basis.eval(d.times[ii](j));
          for (int r2 = 0; r2 < R; ++r2)
            fit += st.scores(ii, r2) * b.dot(st.basis_coeffs.col(r2));
          Q += x * x.transpose() / st.noise_var;
          l += x * (d.response[ii](j) - fit) / st.noise_var;
        }
      auto [Qs, ls] = sampler.regression_conditional(st);
      CHECK((Qs - Q).cwiseAbs().maxCoeff() < tol);
      CHECK((ls - l).cwiseAbs().maxCoeff() < tol);
    }

    {  // noise precision
      double rss = 0.0;
      int nobs = 0;
      for (int ii = 0; ii < N; ++ii) {
        const Eigen::VectorXd e = oracle_residual_excl(inst, ii, -1);
        rss += e.squaredNorm();
        nobs += static_cast<int>(e.size());
      }
      auto [shape, rate] = sampler.sigma_conditional(st);
      CHECK(std::abs(shape - 0.5 * nobs) < tol);
      CHECK(std::abs(rate - 0.5 * rss) < tol * std::max(1.0, rss));
    }

    {  // t-mixing weight
      const double v = inst.cfg.t_mixing_dof;
      const double chi = d.z[i] ? st.group_mean1(r) : st.group_mean0(r);
      const double dev = st.scores(i, r) - chi;
      auto [shape, rate] = sampler.xi_conditional(st, i, r);
      CHECK(std::abs(shape - 0.5 * (v + 1.0)) < tol);
      CHECK(std::abs(rate - 0.5 * (v + dev * dev / st.score_vars(r))) < tol);
    }

    for (int l = 0; l < R; ++l) {  // score-variance increments
      double rate = 1.0;
      for (int r2 = l; r2 < R; ++r2) {
        double prod = 1.0;
        for (int j = 0; j <= r2; ++j)
          if (j != l) prod *= st.shrink_delta(j);
        double s = 0.0;
        for (int ii = 0; ii < N; ++ii) {
          const double chi = d.z[ii] ? st.group_mean1(r2) : st.group_mean0(r2);
          s += st.mix_weights(ii, r2) * std::pow(st.scores(ii, r2) - chi, 2);
        }
        rate += 0.5 * prod * s;
      }
      const double shape =
          (l == 0 ? st.a1 : st.a2) + 0.5 * (R - l) * N;
      auto [sh, ra] = sampler.delta_conditional(st, l);
      CHECK(std::abs(sh - shape) < tol);
      CHECK(std::abs(ra - rate) < tol * std::max(1.0, rate));
    }

    for (int l = 0; l < R; ++l) {  // group-mean shrinkage increments
      double rate = 1.0;
      for (int r2 = l; r2 < R; ++r2) {
        double prod = 1.0;
        for (int j = 0; j <= r2; ++j)
          if (j != l) prod *= st.shrink_delta_chi(j);
        rate += 0.5 * prod *
                (st.group_mean0(r2) * st.group_mean0(r2) +
                 st.group_mean1(r2) * st.group_mean1(r2));
      }
      const double shape = (l == 0 ? st.achi1 : st.achi2) + (R - l);
      auto [sh, ra] = sampler.delta_chi_conditional(st, l);
      CHECK(std::abs(sh - shape) < tol);
      CHECK(std::abs(ra - rate) < tol * std::max(1.0, rate));
    }
  }
}

TEST_CASE("lambda2_from_deltas forms running products") {
  Eigen::VectorXd deltas(3);
  deltas << 2.0, 4.0, 0.5;
  const Eigen::VectorXd l2 = FpcaSampler::lambda2_from_deltas(deltas);
  CHECK(l2(0) == Catch::Approx(0.5).epsilon(1e-14));
  CHECK(l2(1) == Catch::Approx(0.125).epsilon(1e-14));
  CHECK(l2(2) == Catch::Approx(0.25).epsilon(1e-14));
}

TEST_CASE("init_state produces gram-orthonormal components") {
  SimConfig sim;
  sim.n_subjects = 60;
  sim.mean_obs = 12;
  sim.seed = 4;
  auto [ds, truth] = generate_dataset(sim);
  (void)truth;
  std::vector<double> pooled;
  for (auto& s : ds.subjects) pooled.insert(pooled.end(), s.times.begin(), s.times.end());
  const SplineBasis basis = make_basis(place_knots(pooled, 6), 50);
  auto design = std::make_shared<const ResponseDesign>(mediator_design(ds));
  FpcaConfig cfg;
  cfg.n_components = 3;
  cfg.n_knots = 6;
  FpcaSampler sampler(design, basis, cfg);
  const FpcaState st = sampler.init_state();
  CHECK(sampler.orthonormality_deviation(st) < 1e-8);
  CHECK(st.noise_var > 0.0);
  for (int r = 0; r < 3; ++r) CHECK(st.score_vars(r) > 0.0);
}

TEST_CASE("init_state rejects insufficient data") {
  auto d = std::make_shared<ResponseDesign>();
  Eigen::VectorXd t(3);
  t << 0.1, 0.5, 0.9;
  d->ids = {"a"};
  d->z = {1};
  d->times = {t};
  d->response = {Eigen::VectorXd::Zero(3)};
  d->design = {Eigen::MatrixXd(3, 0)};
  Eigen::VectorXd knots(4);
  knots << 0.2, 0.4, 0.6, 0.8;
  FpcaConfig cfg;
  cfg.n_components = 1;
  FpcaSampler sampler(d, make_basis(knots), cfg);
  CHECK_THROWS_WITH(sampler.init_state(),
                    Catch::Matchers::ContainsSubstring("insufficient"));
}

namespace {

FpcaDraws quick_chain(std::uint64_t seed, int n_iter = 400, int n_burn = 200) {
  SimConfig sim;
  sim.n_subjects = 40;
  sim.mean_obs = 10;
  sim.seed = 9;
  auto [ds, truth] = generate_dataset(sim);
  (void)truth;
  std::vector<double> pooled;
  for (auto& s : ds.subjects) pooled.insert(pooled.end(), s.times.begin(), s.times.end());
  auto design = std::make_shared<const ResponseDesign>(mediator_design(ds));
  FpcaConfig cfg;
  cfg.n_components = 3;
  cfg.n_knots = 6;
  cfg.n_iter = n_iter;
  cfg.n_burn = n_burn;
  cfg.thin = 2;
  cfg.seed = seed;
  return run_chain(design, make_basis(place_knots(pooled, 6), 50), cfg);
}

}  // namespace

TEST_CASE("run_chain retention, orthonormality, and determinism") {
  const FpcaDraws a = quick_chain(21);
  CHECK(a.n_draws() == 100);  // (400-200)/2
  CHECK(a.max_orthonormality_dev <= 1e-6);
  CHECK(a.warning.empty());

  const FpcaDraws b = quick_chain(21);
  REQUIRE(b.n_draws() == a.n_draws());
  for (int k : {0, 50, 99}) {
    CHECK((a.draws[k].lambda2 - b.draws[k].lambda2).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.draws[k].scores - b.draws[k].scores).cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.draws[k].sigma2 == b.draws[k].sigma2);
  }

  const FpcaDraws c = quick_chain(22);
  CHECK(a.draws[0].sigma2 != c.draws[0].sigma2);
}

TEST_CASE("retained draws keep invariants") {
  const FpcaDraws d = quick_chain(33);
  const Eigen::VectorXd integ =
      d.basis.basis_on_grid.transpose() * d.basis.quad_weights;
  Eigen::VectorXd prev = Eigen::VectorXd::Constant(d.config.n_components, 1e30);
  for (const auto& e : d.draws) {
    CHECK(e.sigma2 > 0.0);
    for (int r = 0; r < d.config.n_components; ++r) {
      CHECK(e.lambda2(r) > 0.0);
      CHECK(e.h(r) >= e.lambda2(r));
      CHECK(e.h(r) <= d.config.h_upper);
    }
  }
  // component relabeling: posterior-mean lambda2 descending, signs fixed
  const Eigen::VectorXd ml2 = d.posterior_mean_lambda2();
  for (int r = 1; r < d.config.n_components; ++r) CHECK(ml2(r) <= ml2(r - 1));
  for (const auto& e : d.draws)
    for (int r = 0; r < d.config.n_components; ++r)
      CHECK(integ.dot(e.basis_coeffs.col(r)) >= 0.0);
  (void)prev;
}

TEST_CASE("empty retention produces a warning") {
  SimConfig sim;
  sim.n_subjects = 20;
  sim.mean_obs = 6;
  sim.seed = 2;
  auto [ds, truth] = generate_dataset(sim);
  (void)truth;
  std::vector<double> pooled;
  for (auto& s : ds.subjects) pooled.insert(pooled.end(), s.times.begin(), s.times.end());
  auto design = std::make_shared<const ResponseDesign>(mediator_design(ds));
  FpcaConfig cfg;
  cfg.n_components = 2;
  cfg.n_knots = 4;
  cfg.n_iter = 50;
  cfg.n_burn = 50;
  const FpcaDraws d = run_chain(design, make_basis(place_knots(pooled, 4), 50), cfg);
  CHECK(d.n_draws() == 0);
  CHECK_FALSE(d.warning.empty());
}

TEST_CASE("MH acceptance rates are in a healthy range") {
  const FpcaDraws d = quick_chain(55, 600, 300);
  for (double a : d.mh_acceptance) {
    CHECK(a > 0.1);
    CHECK(a < 0.95);
  }
}

TEST_CASE("posterior-mean fitted trajectories denoise the observations") {
  // custom design with known latent curves and unit observation noise
  RngStream rng(77);
  auto d = std::make_shared<ResponseDesign>();
  const int N = 50, T = 20;
  std::vector<Eigen::VectorXd> latent;
  for (int i = 0; i < N; ++i) {
    Eigen::VectorXd t(T);
    for (int j = 0; j < T; ++j) t(j) = rng.uniform();
    std::sort(t.data(), t.data() + T);
    const double a0 = rng.normal(), b0 = rng.normal(), c0 = rng.normal();
    Eigen::VectorXd f(T);
    for (int j = 0; j < T; ++j)
      f(j) = a0 + 2.0 * b0 * t(j) + c0 * std::sin(2.0 * std::numbers::pi * t(j));
    latent.push_back(f);
    d->ids.push_back("s" + std::to_string(i));
    d->z.push_back(i % 2);
    d->times.push_back(t);
    d->response.push_back(f + rng.normal_vector(T));
    d->design.emplace_back(T, 0);
  }
  std::vector<double> pooled;
  for (auto& t : d->times) pooled.insert(pooled.end(), t.data(), t.data() + t.size());
  FpcaConfig cfg;
  cfg.n_components = 3;
  cfg.n_knots = 6;
  cfg.n_iter = 600;
  cfg.n_burn = 300;
  cfg.seed = 7;
  const FpcaDraws draws =
      run_chain(d, make_basis(place_knots(pooled, 6), 50), cfg);
  const auto fitted = draws.posterior_mean_fitted();
  double mse_fit = 0.0, mse_obs = 0.0;
  int n = 0;
  for (int i = 0; i < N; ++i) {
    mse_fit += (fitted[i] - latent[i]).squaredNorm();
    mse_obs += (d->response[i] - latent[i]).squaredNorm();
    n += T;
  }
  CHECK(mse_fit / n < 0.5 * (mse_obs / n));
}

TEST_CASE("select_truncation applies the explained-variance rule") {
  FpcaDraws d;
  d.config.n_components = 4;
  FpcaDrawEntry e;
  e.lambda2.resize(4);
  e.lambda2 << 6.0, 2.5, 1.0, 0.5;  // shares: 0.6, 0.85, 0.95, 1.0
  d.draws = {e};
  CHECK(select_truncation(d, 0.90) == 3);
  CHECK(select_truncation(d, 0.50) == 1);
  CHECK(select_truncation(d, 1.00) == 4);
  CHECK(select_truncation(d, 0.85) == 2);
}
