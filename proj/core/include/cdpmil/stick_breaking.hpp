#pragma once

#include <Eigen/Dense>

#include "cdpmil/errors.hpp"

namespace cdpmil {

// Variational posterior over the first T-1 stick proportions of a truncated
// stick-breaking process; the final stick is pinned at 1 so the weights
// always sum to 1.  gamma1/gamma2 hold Beta(gamma1_t, gamma2_t) parameters
// for t = 0..T-1 (the entry for t = T-1 is carried but its stick is fixed).
struct StickPosterior {
  Eigen::VectorXd gamma1;
  Eigen::VectorXd gamma2;
  double eta = 1.0;

  [[nodiscard]] int truncation() const {
    return static_cast<int>(gamma1.size());
  }
};

// Mixture weights from stick proportions beta (length T-1, each in (0, 1)):
// pi_t = beta_t prod_{l<t} (1 - beta_l), with the last weight absorbing the
// remaining mass.  Returns a length-T vector summing to 1.
[[nodiscard]] Eigen::VectorXd stick_weights(const Eigen::VectorXd &beta);

// Posterior update from responsibilities `phi` (n x T, rows on the simplex):
//   gamma1_t = 1 + sum_j phi_jt
//   gamma2_t = eta + sum_j sum_{r>t} phi_jr
// An empty phi (n = 0) returns the prior (gamma1 = 1, gamma2 = eta).
[[nodiscard]] StickPosterior update_gamma(const Eigen::MatrixXd &phi,
                                          double eta);

// E[ln pi_t] under the posterior:
//   [Psi(g1_t) - Psi(g1_t + g2_t)] + sum_{l<t} [Psi(g2_l) - Psi(g1_l + g2_l)]
// with the first bracket dropped at t = T-1 (that stick is fixed at 1).
[[nodiscard]] Eigen::VectorXd expected_log_pi(const StickPosterior &sticks);

// Plug-in weights from posterior stick means g1 / (g1 + g2), with the final
// stick at 1; sums to 1.
[[nodiscard]] Eigen::VectorXd expected_weights(const StickPosterior &sticks);

}  // namespace cdpmil
