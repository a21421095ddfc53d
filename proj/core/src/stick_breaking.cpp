#include "cdpmil/stick_breaking.hpp"

#include <cmath>
#include <string>

#include "cdpmil/special_math.hpp"

namespace cdpmil {

namespace {

void throw_if(bool condition, const std::string &message) {
  if (condition) {
    throw ShapeError(message);
  }
}

void check_rows_on_simplex(const Eigen::MatrixXd &phi) {
  for (Eigen::Index j = 0; j < phi.rows(); ++j) {
    double sum = 0.0;
    for (Eigen::Index t = 0; t < phi.cols(); ++t) {
      const double v = phi(j, t);
      if (!(v >= 0.0 && v <= 1.0 + 1e-12)) {
        throw DomainError("update_gamma: responsibility out of [0, 1] at row " +
                          std::to_string(j));
      }
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-8) {
      throw DomainError("update_gamma: responsibility row " +
                        std::to_string(j) + " sums to " + std::to_string(sum));
    }
  }
}

}  // namespace

Eigen::VectorXd stick_weights(const Eigen::VectorXd &beta) {
  const int t = static_cast<int>(beta.size()) + 1;
  Eigen::VectorXd weights(t);
  double remaining = 1.0;
  for (int i = 0; i + 1 < t; ++i) {
    if (!(beta[i] > 0.0 && beta[i] < 1.0)) {
      throw DomainError("stick_weights: proportions must lie in (0, 1)");
    }
    weights[i] = beta[i] * remaining;
    remaining *= 1.0 - beta[i];
  }
  weights[t - 1] = remaining;
  return weights;
}

StickPosterior update_gamma(const Eigen::MatrixXd &phi, double eta) {
  throw_if(phi.cols() < 1, "update_gamma: need at least one component");
  if (!(eta > 0.0)) {
    throw DomainError("update_gamma: eta must be positive");
  }
  check_rows_on_simplex(phi);
  const int t = static_cast<int>(phi.cols());
  const Eigen::VectorXd mass = phi.colwise().sum().transpose();
  StickPosterior sticks;
  sticks.eta = eta;
  sticks.gamma1 = Eigen::VectorXd::Ones(t) + mass;
  sticks.gamma2 = Eigen::VectorXd::Constant(t, eta);
  // gamma2 accumulates the responsibility mass of all later components.
  double tail = 0.0;
  for (int i = t - 1; i >= 0; --i) {
    sticks.gamma2[i] += tail;
    tail += mass[i];
  }
  return sticks;
}

Eigen::VectorXd expected_log_pi(const StickPosterior &sticks) {
  const int t = sticks.truncation();
  throw_if(t < 1, "expected_log_pi: empty posterior");
  Eigen::VectorXd elp(t);
  double carried = 0.0;  // sum over earlier sticks of E[ln(1 - beta_l)]
  for (int i = 0; i < t; ++i) {
    const double g1 = sticks.gamma1[i];
    const double g2 = sticks.gamma2[i];
    const double own =
        (i + 1 == t) ? 0.0 : digamma(g1) - digamma(g1 + g2);
    elp[i] = own + carried;
    carried += digamma(g2) - digamma(g1 + g2);
  }
  return elp;
}

Eigen::VectorXd expected_weights(const StickPosterior &sticks) {
  const int t = sticks.truncation();
  throw_if(t < 1, "expected_weights: empty posterior");
  Eigen::VectorXd weights(t);
  double remaining = 1.0;
  for (int i = 0; i + 1 < t; ++i) {
    const double mean = sticks.gamma1[i] / (sticks.gamma1[i] + sticks.gamma2[i]);
    weights[i] = mean * remaining;
    remaining *= 1.0 - mean;
  }
  weights[t - 1] = remaining;
  return weights;
}

}  // namespace cdpmil
