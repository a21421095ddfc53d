#pragma once

#include <Eigen/Dense>

#include "cdpmil/special_math.hpp"

namespace cdpmil {

struct GaussianParams {
  Eigen::VectorXd mean;
  SpdMatrix cov;

  [[nodiscard]] int dim() const { return cov.dim(); }
};

// Normal-inverse-Wishart prior over a Gaussian's mean and covariance:
// mu | Sigma ~ N(m, Sigma / kappa), Sigma^-1 ~ Wishart(kappa, v).
// A single kappa acts as both the mean concentration and the Wishart
// degrees of freedom, so it must satisfy kappa > dim - 1.
struct NIWParams {
  Eigen::VectorXd m;
  double kappa = 0.0;
  SpdMatrix v;

  [[nodiscard]] int dim() const { return v.dim(); }
};

struct BetaParams {
  double a;
  double b;
};

// log N(x; mean, cov).
[[nodiscard]] double mvn_logpdf(const Eigen::VectorXd &x,
                                const GaussianParams &params);

// log Wishart(lambda; kappa, v) =
//   -(kappa p / 2) ln 2 - (kappa / 2) ln|v| - ln Gamma_p(kappa / 2)
//   + ((kappa - p - 1) / 2) ln|lambda| - tr(v^-1 lambda) / 2.
// Requires kappa > p - 1.
[[nodiscard]] double wishart_logpdf(const SpdMatrix &lambda, double kappa,
                                    const SpdMatrix &v);

// Joint prior density: log N(mu; m, sigma/kappa) + log W(sigma^-1; kappa, v).
[[nodiscard]] double niw_logpdf(const Eigen::VectorXd &mu,
                                const SpdMatrix &sigma,
                                const NIWParams &prior);

// Differential entropy (p/2)(1 + ln 2 pi) + ln|sigma| / 2.
[[nodiscard]] double gaussian_entropy(const SpdMatrix &sigma);

// KL(Beta(q) || Beta(p)); parameters must be positive.
[[nodiscard]] double kl_beta(const BetaParams &q, const BetaParams &p);

// KL(N(q) || N(p)) in closed form.
[[nodiscard]] double kl_gaussian(const GaussianParams &q,
                                 const GaussianParams &p);

// KL(Wishart(kappa_q, v_q) || Wishart(kappa_p, v_p)), same dimension.
[[nodiscard]] double kl_wishart(double kappa_q, const SpdMatrix &v_q,
                                double kappa_p, const SpdMatrix &v_p);

// KL(q || p) for finite categorical distributions.  Both inputs must be
// non-negative and sum to 1 within 1e-8; 0 ln 0 counts as 0, and q_i > 0
// where p_i = 0 is a domain error.
[[nodiscard]] double kl_categorical(const Eigen::VectorXd &q,
                                    const Eigen::VectorXd &p);

// One-hot vector for `index` smoothed as (1 - eps) onehot + eps / size,
// the target form used for supervised assignment penalties.
[[nodiscard]] Eigen::VectorXd smoothed_onehot(int size, int index,
                                              double eps = 1e-6);

}  // namespace cdpmil
