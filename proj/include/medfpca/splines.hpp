#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "medfpca/errors.hpp"
#include "medfpca/stats.hpp"

namespace medfpca {

// Thin-plate basis b(t) = (1, t, |t-k_1|^3, ..., |t-k_L|^3) on [0,1] with its
// roughness penalty and a trapezoid-rule Gram matrix on an equally spaced grid.
struct SplineBasis {
  Eigen::VectorXd knots;          // L strictly increasing points in (0,1)
  int dim = 0;                    // L + 2
  int grid_size = 0;              // G
  Eigen::VectorXd grid;           // G points on [0,1]
  Eigen::VectorXd quad_weights;   // trapezoid weights, sums to 1
  Eigen::MatrixXd basis_on_grid;  // G x (L+2)
  Eigen::MatrixXd gram;           // (L+2) x (L+2), f' gram g ~ integral fg
  Eigen::MatrixXd penalty;        // (L+2) x (L+2), zero first two rows/cols
  Eigen::MatrixXd penalty_psd;    // nearest PSD projection, used as precision

  Eigen::VectorXd eval(double t) const {
    if (t < -1e-12 || t > 1.0 + 1e-12)
      throw DomainError("SplineBasis::eval: t outside [0,1]");
    Eigen::VectorXd b(dim);
    b(0) = 1.0;
    b(1) = t;
    for (Eigen::Index l = 0; l < knots.size(); ++l) {
      const double d = std::abs(t - knots(l));
      b(2 + l) = d * d * d;
    }
    return b;
  }

  Eigen::MatrixXd eval_rows(const Eigen::VectorXd& times) const {
    Eigen::MatrixXd B(times.size(), dim);
    for (Eigen::Index j = 0; j < times.size(); ++j)
      B.row(j) = eval(times(j)).transpose();
    return B;
  }
};

// Roughness penalty: [Omega]_{l,l'} = (k_{l-2} - k_{l'-2})^2 for l,l' > 2
// (1-based), zero elsewhere.
inline Eigen::MatrixXd penalty_matrix(const Eigen::VectorXd& knots) {
  const Eigen::Index L = knots.size();
  Eigen::MatrixXd omega = Eigen::MatrixXd::Zero(L + 2, L + 2);
  for (Eigen::Index a = 0; a < L; ++a)
    for (Eigen::Index b = 0; b < L; ++b) {
      const double d = knots(a) - knots(b);
      omega(2 + a, 2 + b) = d * d;
    }
  return omega;
}

inline SplineBasis make_basis(const Eigen::VectorXd& knots, int grid_size = 50) {
  if (grid_size < 2) throw DomainError("make_basis: grid_size < 2");
  for (Eigen::Index l = 0; l < knots.size(); ++l) {
    if (!(knots(l) > 0.0 && knots(l) < 1.0))
      throw DomainError("make_basis: knot outside (0,1)");
    if (l > 0 && !(knots(l) > knots(l - 1)))
      throw DomainError("make_basis: knots not strictly increasing");
  }
  SplineBasis b;
  b.knots = knots;
  b.dim = static_cast<int>(knots.size()) + 2;
  b.grid_size = grid_size;
  b.grid.resize(grid_size);
  const double dt = 1.0 / static_cast<double>(grid_size - 1);
  for (int g = 0; g < grid_size; ++g) b.grid(g) = g * dt;
  b.quad_weights = Eigen::VectorXd::Constant(grid_size, dt);
  b.quad_weights(0) *= 0.5;
  b.quad_weights(grid_size - 1) *= 0.5;
  b.basis_on_grid = b.eval_rows(b.grid);
  b.gram = b.basis_on_grid.transpose() * b.quad_weights.asDiagonal() * b.basis_on_grid;
  b.penalty = penalty_matrix(knots);
  // The quadratic-in-knot-distance penalty is indefinite (for any contrast v
  // with sum zero, v' Omega v = -2 (k'v)^2), so the Gibbs updates use its
  // nearest positive semidefinite projection as the smoothing precision.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(b.penalty);
  b.penalty_psd = es.eigenvectors() *
                  es.eigenvalues().cwiseMax(0.0).asDiagonal() *
                  es.eigenvectors().transpose();
  return b;
}

// Knots at the l/(L+1) empirical quantiles of the pooled observation times,
// linear interpolation between order statistics.
inline Eigen::VectorXd place_knots(const std::vector<double>& times, int L) {
  if (L < 1) throw DomainError("place_knots: L < 1");
  std::vector<double> distinct = times;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (static_cast<int>(distinct.size()) < L)
    throw DomainError("place_knots: fewer distinct times than knots requested");
  Eigen::VectorXd knots(L);
  for (int l = 1; l <= L; ++l)
    knots(l - 1) = quantile(times, static_cast<double>(l) / (L + 1));
  for (int l = 1; l < L; ++l)
    if (!(knots(l) > knots(l - 1)))
      throw DomainError("place_knots: coincident knots (degenerate quantiles)");
  return knots;
}

// Quadrature approximation of the L2 inner product of two basis expansions.
inline double grid_integral(const SplineBasis& basis, const Eigen::VectorXd& f,
                            const Eigen::VectorXd& g) {
  if (f.size() != basis.dim || g.size() != basis.dim)
    throw DomainError("grid_integral: coefficient length mismatch");
  return f.dot(basis.gram * g);
}

}  // namespace medfpca
