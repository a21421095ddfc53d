#include "cdpmil/distributions.hpp"

#include <cmath>
#include <string>

namespace cdpmil {

namespace {

constexpr double kLogTwoPi = 1.8378770664093453;

void throw_if(bool condition, const std::string &message) {
  if (condition) {
    throw ShapeError(message);
  }
}

}  // namespace

double mvn_logpdf(const Eigen::VectorXd &x, const GaussianParams &params) {
  const int p = params.dim();
  throw_if(params.mean.size() != p,
           "mvn_logpdf: mean dimension " + std::to_string(params.mean.size()) +
               " does not match covariance dimension " + std::to_string(p));
  throw_if(x.size() != p, "mvn_logpdf: point dimension " +
                              std::to_string(x.size()) +
                              " does not match distribution dimension " +
                              std::to_string(p));
  const Eigen::VectorXd v = params.cov.forward_solve(x - params.mean);
  return -0.5 * (p * kLogTwoPi + params.cov.log_det() + v.squaredNorm());
}

double wishart_logpdf(const SpdMatrix &lambda, double kappa,
                      const SpdMatrix &v) {
  const int p = v.dim();
  throw_if(lambda.dim() != p, "wishart_logpdf: dimension mismatch");
  if (!(kappa > p - 1)) {
    throw DomainError("wishart_logpdf: need kappa > p - 1, got kappa = " +
                      std::to_string(kappa) + " with p = " + std::to_string(p));
  }
  return -0.5 * kappa * p * std::log(2.0) - 0.5 * kappa * v.log_det() -
         log_multivariate_gamma(p, 0.5 * kappa) +
         0.5 * (kappa - p - 1) * lambda.log_det() -
         0.5 * trace_spd_inverse_product(v, lambda);
}

double niw_logpdf(const Eigen::VectorXd &mu, const SpdMatrix &sigma,
                  const NIWParams &prior) {
  const int p = prior.dim();
  throw_if(sigma.dim() != p || prior.m.size() != p,
           "niw_logpdf: dimension mismatch");
  if (!(prior.kappa > p - 1)) {
    throw DomainError("niw_logpdf: need kappa > dim - 1, got kappa = " +
                      std::to_string(prior.kappa));
  }
  const GaussianParams mean_dist{prior.m, sigma.scaled(1.0 / prior.kappa)};
  const SpdMatrix precision = SpdMatrix::from_dense(sigma.inverse());
  return mvn_logpdf(mu, mean_dist) +
         wishart_logpdf(precision, prior.kappa, prior.v);
}

double gaussian_entropy(const SpdMatrix &sigma) {
  return 0.5 * sigma.dim() * (1.0 + kLogTwoPi) + 0.5 * sigma.log_det();
}

double kl_beta(const BetaParams &q, const BetaParams &p) {
  if (!(q.a > 0.0 && q.b > 0.0 && p.a > 0.0 && p.b > 0.0)) {
    throw DomainError("kl_beta: parameters must be positive");
  }
  return std::lgamma(q.a + q.b) - std::lgamma(q.a) - std::lgamma(q.b) -
         std::lgamma(p.a + p.b) + std::lgamma(p.a) + std::lgamma(p.b) +
         (q.a - p.a) * digamma(q.a) + (q.b - p.b) * digamma(q.b) +
         (p.a - q.a + p.b - q.b) * digamma(q.a + q.b);
}

double kl_gaussian(const GaussianParams &q, const GaussianParams &p) {
  const int dim = q.dim();
  throw_if(p.dim() != dim, "kl_gaussian: dimension mismatch");
  const double trace =
      p.cov.forward_solve(q.cov.factor()).squaredNorm();
  const Eigen::VectorXd w = p.cov.forward_solve(p.mean - q.mean);
  return 0.5 * (trace + w.squaredNorm() - dim + p.cov.log_det() -
                q.cov.log_det());
}

double kl_wishart(double kappa_q, const SpdMatrix &v_q, double kappa_p,
                  const SpdMatrix &v_p) {
  const int p = v_q.dim();
  throw_if(v_p.dim() != p, "kl_wishart: dimension mismatch");
  if (!(kappa_q > p - 1 && kappa_p > p - 1)) {
    throw DomainError("kl_wishart: need both kappa > p - 1");
  }
  const double trace = trace_spd_inverse_product(v_p, v_q);
  return 0.5 * kappa_p * (v_p.log_det() - v_q.log_det()) +
         log_multivariate_gamma(p, 0.5 * kappa_p) -
         log_multivariate_gamma(p, 0.5 * kappa_q) +
         0.5 * (kappa_q - kappa_p) * multivariate_digamma(p, 0.5 * kappa_q) +
         0.5 * kappa_q * (trace - p);
}

double kl_categorical(const Eigen::VectorXd &q, const Eigen::VectorXd &p) {
  throw_if(q.size() != p.size() || q.size() == 0,
           "kl_categorical: distributions must share a non-empty support");
  if (q.minCoeff() < 0.0 || p.minCoeff() < 0.0) {
    throw DomainError("kl_categorical: probabilities must be non-negative");
  }
  if (std::abs(q.sum() - 1.0) > 1e-8 || std::abs(p.sum() - 1.0) > 1e-8) {
    throw DomainError("kl_categorical: probabilities must sum to 1");
  }
  double kl = 0.0;
  for (Eigen::Index i = 0; i < q.size(); ++i) {
    if (q[i] == 0.0) {
      continue;  // 0 ln 0 = 0
    }
    if (p[i] == 0.0) {
      throw DomainError("kl_categorical: q has mass outside p's support at " +
                        std::to_string(i));
    }
    kl += q[i] * std::log(q[i] / p[i]);
  }
  return kl;
}

Eigen::VectorXd smoothed_onehot(int size, int index, double eps) {
  throw_if(size < 1, "smoothed_onehot: size must be >= 1");
  throw_if(index < 0 || index >= size,
           "smoothed_onehot: index " + std::to_string(index) +
               " out of range for size " + std::to_string(size));
  if (!(eps >= 0.0 && eps < 1.0)) {
    throw DomainError("smoothed_onehot: eps must be in [0, 1)");
  }
  Eigen::VectorXd v = Eigen::VectorXd::Constant(size, eps / size);
  v[index] += 1.0 - eps;
  return v;
}

}  // namespace cdpmil
