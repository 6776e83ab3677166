#pragma once

#include <string>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "medfpca/errors.hpp"
#include "medfpca/rng.hpp"

namespace medfpca {

// Cholesky with jitter escalation 1e-10 -> 1e-8 -> 1e-6 (relative to the
// mean diagonal) before giving up.
inline Eigen::LLT<Eigen::MatrixXd> chol_with_jitter(const Eigen::MatrixXd& Q) {
  Eigen::LLT<Eigen::MatrixXd> llt(Q);
  if (llt.info() == Eigen::Success) return llt;
  const double scale = std::max(Q.diagonal().mean(), 1.0);
  std::string tried;
  for (double j : {1e-10, 1e-8, 1e-6}) {
    Eigen::MatrixXd Qj = Q;
    Qj.diagonal().array() += j * scale;
    llt.compute(Qj);
    if (llt.info() == Eigen::Success) return llt;
    tried += (tried.empty() ? "" : ", ") + std::to_string(j);
  }
  throw NumericalError("Cholesky failed after jitter escalation (tried " + tried + ")");
}

// Draw from N(Q^-1 l, Q^-1), optionally conditioned on C x = 0 (C with full
// row rank). Empty C means an ordinary Gaussian draw.
inline Eigen::VectorXd constrained_gaussian_draw(const Eigen::MatrixXd& Q,
                                                 const Eigen::VectorXd& l,
                                                 const Eigen::MatrixXd& C,
                                                 RngStream& rng) {
  const Eigen::Index n = Q.rows();
  if (Q.cols() != n || l.size() != n)
    throw DomainError("constrained_gaussian_draw: dimension mismatch");
  auto llt = chol_with_jitter(Q);
  const Eigen::VectorXd mu = llt.solve(l);
  // x = mu + L^-T z has covariance Q^-1
  Eigen::VectorXd x =
      mu + llt.matrixU().solve(rng.normal_vector(n));
  if (C.rows() == 0) return x;
  if (C.cols() != n)
    throw DomainError("constrained_gaussian_draw: constraint width mismatch");
  if (C.rows() >= n) {
    // full (or over-) constraint: the feasible set is {0}
    return Eigen::VectorXd::Zero(n);
  }
  // condition by projection: x <- x - Sigma C' (C Sigma C')^-1 C x
  const Eigen::MatrixXd V = llt.solve(C.transpose());  // Sigma C', n x m
  Eigen::MatrixXd S = C * V;                           // m x m
  Eigen::LDLT<Eigen::MatrixXd> sl(S);
  if (sl.info() != Eigen::Success) {
    S.diagonal().array() += 1e-12 * std::max(S.diagonal().mean(), 1.0);
    sl.compute(S);
    if (sl.info() != Eigen::Success)
      throw NumericalError("constrained_gaussian_draw: singular constraint block");
  }
  x -= V * sl.solve(C * x);
  return x;
}

}  // namespace medfpca
