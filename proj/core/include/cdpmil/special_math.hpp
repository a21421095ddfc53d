#pragma once

#include <Eigen/Dense>

#include "cdpmil/errors.hpp"

namespace cdpmil {

// Digamma function Psi(x) = d/dx ln Gamma(x) for x > 0.
// Accurate to ~1e-12 absolute error; throws DomainError for x <= 0.
[[nodiscard]] double digamma(double x);

// Sum of digammas Psi(a) + Psi(a - 1/2) + ... + Psi(a - (p-1)/2),
// the derivative of log_multivariate_gamma with respect to a.
[[nodiscard]] double multivariate_digamma(int p, double a);

// ln Gamma_p(a) = p(p-1)/4 ln(pi) + sum_{j=1..p} ln Gamma(a + (1-j)/2).
// Requires a > (p-1)/2.
[[nodiscard]] double log_multivariate_gamma(int p, double a);

// Symmetric positive definite matrix stored by its lower Cholesky factor.
// The factor has strictly positive diagonal; the dense matrix is L * L^T.
class SpdMatrix {
 public:
  // Empty (0 x 0) placeholder so owning aggregates can be default built.
  SpdMatrix() = default;

  // Factorizes a dense symmetric matrix.  The input is symmetrized as
  // (A + A^T) / 2 after checking symmetry within `sym_tol`; the first
  // non-positive pivot aborts with DecompositionError carrying its index.
  [[nodiscard]] static SpdMatrix from_dense(const Eigen::MatrixXd &a,
                                            double sym_tol = 1e-10);

  // Wraps an existing lower-triangular factor with positive diagonal.
  [[nodiscard]] static SpdMatrix from_cholesky(const Eigen::MatrixXd &lower);

  // Identity scaled by `scale` (> 0).
  [[nodiscard]] static SpdMatrix identity(int dim, double scale = 1.0);

  [[nodiscard]] int dim() const { return static_cast<int>(lower_.rows()); }
  [[nodiscard]] const Eigen::MatrixXd &factor() const { return lower_; }

  // log |L L^T| = 2 sum_i ln L_ii.
  [[nodiscard]] double log_det() const;

  // Solves (L L^T) x = b.
  [[nodiscard]] Eigen::VectorXd solve(const Eigen::VectorXd &b) const;

  // Solves L y = B column-wise (forward substitution only).
  [[nodiscard]] Eigen::MatrixXd forward_solve(const Eigen::MatrixXd &b) const;

  // Dense reconstruction L * L^T.
  [[nodiscard]] Eigen::MatrixXd reconstruct() const;

  // The matrix scaled by s > 0 (factor scaled by sqrt(s)).
  [[nodiscard]] SpdMatrix scaled(double s) const;

  // Dense inverse (L^-T L^-1), for callers that need an explicit precision.
  [[nodiscard]] Eigen::MatrixXd inverse() const;

 private:
  explicit SpdMatrix(Eigen::MatrixXd lower) : lower_(std::move(lower)) {}
  Eigen::MatrixXd lower_;
};

// log-determinant of a dense SPD matrix (factorizes internally).
[[nodiscard]] double log_det(const Eigen::MatrixXd &a);

// Solves A x = b for dense SPD `a`; relative residual <= 1e-10 on
// well-conditioned systems.
[[nodiscard]] Eigen::VectorXd spd_solve(const Eigen::MatrixXd &a,
                                        const Eigen::VectorXd &b);

// tr(V^-1 M) for SPD V and M, computed as |V_L^-1 M_L|_F^2 without
// forming either inverse.
[[nodiscard]] double trace_spd_inverse_product(const SpdMatrix &v,
                                               const SpdMatrix &m);

// log-sum-exp of a vector; -inf input entries are permitted.
[[nodiscard]] double log_sum_exp(const Eigen::VectorXd &x);

}  // namespace cdpmil
