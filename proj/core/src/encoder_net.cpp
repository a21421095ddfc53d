#include "cdpmil/encoder_net.hpp"

#include <cmath>
#include <random>
#include <string>

namespace cdpmil {

namespace {

void throw_if(bool condition, const std::string &message) {
  if (condition) {
    throw ShapeError(message);
  }
}

double softplus(double x) {
  if (x > 30.0) {
    return x;
  }
  if (x < -30.0) {
    return std::exp(x);
  }
  return std::log1p(std::exp(x));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

int chol_head_size(int p) { return p * (p + 1) / 2; }

void check_encoder_shapes(const EncoderParams &params) {
  const int p = params.input_dim();
  const int h = params.hidden_dim();
  const int out = p + chol_head_size(p);
  throw_if(p < 1 || h < 1, "encoder: dimensions must be positive");
  throw_if(params.b1.size() != h || params.w2.rows() != out ||
               params.w2.cols() != h || params.b2.size() != out,
           "encoder: inconsistent parameter shapes");
}

// Gradients of the data terms with respect to one sample's encoded mean and
// Cholesky factor, pushed back through the network into `grad`.
void backprop_sample(const Eigen::VectorXd &x, const EncoderForward &fwd,
                     const EncoderParams &params, const Eigen::VectorXd &d_mean,
                     const Eigen::MatrixXd &d_lower, EncoderGrad &grad) {
  const int p = params.input_dim();
  const int s = chol_head_size(p);
  Eigen::VectorXd d_out(p + s);
  d_out.head(p) = d_mean;
  int k = p;
  for (int i = 0; i < p; ++i) {
    for (int c = 0; c < i; ++c) {
      d_out[k++] = d_lower(i, c);
    }
    // Diagonal entries pass through softplus; chain its derivative.
    d_out[k] = d_lower(i, i) * sigmoid(fwd.raw[k]);
    ++k;
  }
  grad.w2.noalias() += d_out * fwd.hidden.transpose();
  grad.b2 += d_out;
  Eigen::VectorXd d_hidden = params.w2.transpose() * d_out;
  d_hidden.array() *= 1.0 - fwd.hidden.array().square();
  grad.w1.noalias() += d_hidden * x.transpose();
  grad.b1 += d_hidden;
}

struct NiwValueGrad {
  double value = 0.0;
  Eigen::VectorXd d_mean;   // gradient with respect to the averaged mean
  Eigen::MatrixXd d_cov;    // symmetric gradient with respect to the
                            // averaged covariance
};

// niw_logpdf at (mean, cov) together with its gradients; `with_grad` skips
// the gradient work for value-only callers.
NiwValueGrad niw_value_grad(const Eigen::VectorXd &mean,
                            const Eigen::MatrixXd &cov, const NIWParams &prior,
                            bool with_grad) {
  const int p = prior.dim();
  const SpdMatrix cov_spd = SpdMatrix::from_dense(cov);
  NiwValueGrad out;
  out.value = niw_logpdf(mean, cov_spd, prior);
  if (!with_grad) {
    return out;
  }
  const Eigen::MatrixXd cov_inv = cov_spd.inverse();
  const Eigen::MatrixXd prior_inv = prior.v.inverse();
  const Eigen::VectorXd r = cov_inv * (mean - prior.m);
  out.d_mean = -prior.kappa * r;
  out.d_cov = -0.5 * (prior.kappa - p) * cov_inv +
              0.5 * prior.kappa * r * r.transpose() +
              0.5 * cov_inv * prior_inv * cov_inv;
  return out;
}

void check_phi(const Eigen::MatrixXd &x, const Eigen::MatrixXd &phi,
               std::size_t components) {
  throw_if(phi.rows() != x.rows(),
           "network elbo: phi rows must match data rows");
  throw_if(static_cast<std::size_t>(phi.cols()) != components,
           "network elbo: phi columns must match component count");
}

}  // namespace

EncoderParams EncoderParams::zero(int input_dim, int hidden_dim) {
  throw_if(input_dim < 1 || hidden_dim < 1,
           "encoder: dimensions must be positive");
  const int out = input_dim + chol_head_size(input_dim);
  EncoderParams params;
  params.w1 = Eigen::MatrixXd::Zero(hidden_dim, input_dim);
  params.b1 = Eigen::VectorXd::Zero(hidden_dim);
  params.w2 = Eigen::MatrixXd::Zero(out, hidden_dim);
  params.b2 = Eigen::VectorXd::Zero(out);
  return params;
}

EncoderParams EncoderParams::random(int input_dim, int hidden_dim,
                                    std::uint64_t seed) {
  EncoderParams params = zero(input_dim, hidden_dim);
  std::mt19937_64 rng(seed);
  const double bound1 = 1.0 / std::sqrt(static_cast<double>(input_dim));
  const double bound2 = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
  std::uniform_real_distribution<double> u1(-bound1, bound1);
  std::uniform_real_distribution<double> u2(-bound2, bound2);
  for (Eigen::Index i = 0; i < params.w1.rows(); ++i) {
    for (Eigen::Index j = 0; j < params.w1.cols(); ++j) {
      params.w1(i, j) = u1(rng);
    }
  }
  for (Eigen::Index i = 0; i < params.w2.rows(); ++i) {
    for (Eigen::Index j = 0; j < params.w2.cols(); ++j) {
      params.w2(i, j) = u2(rng);
    }
  }
  return params;
}

EncoderForward encode_forward(const Eigen::VectorXd &x,
                              const EncoderParams &params) {
  check_encoder_shapes(params);
  const int p = params.input_dim();
  throw_if(x.size() != p, "encode: input dimension " +
                              std::to_string(x.size()) + " does not match " +
                              std::to_string(p));
  EncoderForward fwd;
  fwd.hidden = ((params.w1 * x + params.b1).array().tanh()).matrix();
  if (!fwd.hidden.allFinite()) {
    throw NumericError("encode: non-finite activation in layer 1");
  }
  fwd.raw = params.w2 * fwd.hidden + params.b2;
  if (!fwd.raw.allFinite()) {
    throw NumericError("encode: non-finite activation in layer 2");
  }
  fwd.mean = fwd.raw.head(p);
  fwd.lower = Eigen::MatrixXd::Zero(p, p);
  int k = p;
  for (int i = 0; i < p; ++i) {
    for (int c = 0; c < i; ++c) {
      fwd.lower(i, c) = fwd.raw[k++];
    }
    fwd.lower(i, i) = softplus(fwd.raw[k++]) + kCholeskyDiagFloor;
  }
  return fwd;
}

GaussianParams encode(const Eigen::VectorXd &x, const EncoderParams &params) {
  EncoderForward fwd = encode_forward(x, params);
  return GaussianParams{std::move(fwd.mean),
                        SpdMatrix::from_cholesky(fwd.lower)};
}

EncoderGrad EncoderGrad::zero_like(const EncoderParams &params) {
  EncoderGrad grad;
  grad.w1 = Eigen::MatrixXd::Zero(params.w1.rows(), params.w1.cols());
  grad.b1 = Eigen::VectorXd::Zero(params.b1.size());
  grad.w2 = Eigen::MatrixXd::Zero(params.w2.rows(), params.w2.cols());
  grad.b2 = Eigen::VectorXd::Zero(params.b2.size());
  return grad;
}

double EncoderGrad::squared_norm() const {
  return w1.squaredNorm() + b1.squaredNorm() + w2.squaredNorm() +
         b2.squaredNorm();
}

GaussianParams batch_averaged_params(const Eigen::MatrixXd &x,
                                     const EncoderParams &params) {
  throw_if(x.rows() == 0, "batch_averaged_params: empty batch");
  const int p = params.input_dim();
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(p);
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(p, p);
  for (Eigen::Index j = 0; j < x.rows(); ++j) {
    const EncoderForward fwd = encode_forward(x.row(j).transpose(), params);
    mean += fwd.mean;
    cov.noalias() += fwd.lower * fwd.lower.transpose();
  }
  const double inv_n = 1.0 / static_cast<double>(x.rows());
  return GaussianParams{inv_n * mean,
                        SpdMatrix::from_dense(inv_n * cov)};
}

double elbo_network_terms(const Eigen::MatrixXd &x, const Eigen::MatrixXd &phi,
                          const std::vector<EncoderParams> &encoders,
                          const NIWParams &prior) {
  check_phi(x, phi, encoders.size());
  double total = 0.0;
  for (std::size_t t = 0; t < encoders.size(); ++t) {
    const double mass = phi.col(static_cast<Eigen::Index>(t)).sum();
    if (mass == 0.0) {
      continue;
    }
    for (Eigen::Index j = 0; j < x.rows(); ++j) {
      const double w = phi(j, static_cast<Eigen::Index>(t));
      if (w == 0.0) {
        continue;
      }
      const Eigen::VectorXd xj = x.row(j).transpose();
      const GaussianParams g = encode(xj, encoders[t]);
      total += w * (mvn_logpdf(xj, g) + gaussian_entropy(g.cov));
    }
    const GaussianParams avg = batch_averaged_params(x, encoders[t]);
    total += kEncoderPriorScale * mass *
             niw_value_grad(avg.mean, avg.cov.reconstruct(), prior,
                            /*with_grad=*/false)
                 .value;
  }
  return total;
}

std::vector<EncoderGrad> grad_elbo_wrt_params(
    const Eigen::MatrixXd &x, const Eigen::MatrixXd &phi,
    const std::vector<EncoderParams> &encoders, const NIWParams &prior) {
  check_phi(x, phi, encoders.size());
  const Eigen::Index n = x.rows();
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<EncoderGrad> grads;
  grads.reserve(encoders.size());
  for (std::size_t t = 0; t < encoders.size(); ++t) {
    const EncoderParams &params = encoders[t];
    EncoderGrad grad = EncoderGrad::zero_like(params);
    const double mass = phi.col(static_cast<Eigen::Index>(t)).sum();
    if (mass == 0.0) {
      grads.push_back(std::move(grad));
      continue;
    }
    const int p = params.input_dim();

    // Forward pass once per sample; accumulate the batch averages.
    std::vector<EncoderForward> fwds(static_cast<std::size_t>(n));
    Eigen::VectorXd avg_mean = Eigen::VectorXd::Zero(p);
    Eigen::MatrixXd avg_cov = Eigen::MatrixXd::Zero(p, p);
    for (Eigen::Index j = 0; j < n; ++j) {
      fwds[static_cast<std::size_t>(j)] =
          encode_forward(x.row(j).transpose(), params);
      const EncoderForward &fwd = fwds[static_cast<std::size_t>(j)];
      avg_mean += fwd.mean;
      avg_cov.noalias() += fwd.lower * fwd.lower.transpose();
    }
    avg_mean *= inv_n;
    avg_cov *= inv_n;
    const NiwValueGrad niw =
        niw_value_grad(avg_mean, avg_cov, prior, /*with_grad=*/true);

    for (Eigen::Index j = 0; j < n; ++j) {
      const EncoderForward &fwd = fwds[static_cast<std::size_t>(j)];
      const Eigen::VectorXd xj = x.row(j).transpose();
      const double w = phi(j, static_cast<Eigen::Index>(t));

      // Data terms: d(logpdf + entropy)/d mean = u, /d L = u v^T; the
      // determinant pulls of the two terms cancel.  Only the lower
      // triangle of d_lower is ever read downstream.
      Eigen::VectorXd d_mean = Eigen::VectorXd::Zero(p);
      Eigen::MatrixXd d_lower = Eigen::MatrixXd::Zero(p, p);
      if (w != 0.0) {
        const Eigen::VectorXd v =
            fwd.lower.triangularView<Eigen::Lower>().solve(xj - fwd.mean);
        const Eigen::VectorXd u =
            fwd.lower.transpose().triangularView<Eigen::Upper>().solve(v);
        d_mean = w * u;
        d_lower.noalias() = w * u * v.transpose();
      }

      // Prior term routed through the batch averages.
      const double pw = kEncoderPriorScale * mass * inv_n;
      d_mean += pw * niw.d_mean;
      d_lower.noalias() += (2.0 * pw) * (niw.d_cov * fwd.lower);

      backprop_sample(xj, fwd, params, d_mean, d_lower, grad);
    }
    grads.push_back(std::move(grad));
  }
  return grads;
}

void apply_ascent_step(std::vector<EncoderParams> &encoders,
                       const std::vector<EncoderGrad> &grads, double lr,
                       double clip) {
  throw_if(encoders.size() != grads.size(),
           "apply_ascent_step: component count mismatch");
  if (!(lr >= 0.0) || !(clip > 0.0)) {
    throw DomainError("apply_ascent_step: need lr >= 0 and clip > 0");
  }
  for (std::size_t t = 0; t < encoders.size(); ++t) {
    const double norm = std::sqrt(grads[t].squared_norm());
    if (norm == 0.0) {
      continue;
    }
    const double step = norm > clip ? lr * clip / norm : lr;
    encoders[t].w1 += step * grads[t].w1;
    encoders[t].b1 += step * grads[t].b1;
    encoders[t].w2 += step * grads[t].w2;
    encoders[t].b2 += step * grads[t].b2;
  }
}

}  // namespace cdpmil
