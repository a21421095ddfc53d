#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "cdpmil/distributions.hpp"

namespace cdpmil {

// Additive floor on the Cholesky diagonal keeping encoded covariances
// positive definite.
inline constexpr double kCholeskyDiagFloor = 1e-4;

// Default scale on the occupancy-weighted prior regularizer inside the
// network objective.  The weight must stay proportional to column mass (so
// empty components stay gradient-free and the objective is additive over
// duplicated batches); the scale then sets how hard batch moments are
// pulled toward the prior.  The default is strong enough to contain the
// covariance growth the entropy term otherwise rewards, yet well below the
// kappa pseudo-observations a full-strength prior would add per unit of
// mass.  Fits that steer few rows with labels want it much weaker; see
// FitConfig::prior_scale.
inline constexpr double kEncoderPriorScale = 0.5;

// One-hidden-layer network mapping an instance x (dim p) to the parameters
// of a Gaussian: a mean head (p outputs) and a Cholesky head (p(p+1)/2
// outputs packed row-major over the lower triangle).  Hidden activation is
// tanh; Cholesky diagonal entries pass through softplus plus a small floor.
struct EncoderParams {
  Eigen::MatrixXd w1;  // hidden x input
  Eigen::VectorXd b1;  // hidden
  Eigen::MatrixXd w2;  // (input + input(input+1)/2) x hidden
  Eigen::VectorXd b2;

  [[nodiscard]] int input_dim() const { return static_cast<int>(w1.cols()); }
  [[nodiscard]] int hidden_dim() const { return static_cast<int>(w1.rows()); }

  // All weights and biases zero: encodes mean 0 and L = (ln 2 + floor) I.
  [[nodiscard]] static EncoderParams zero(int input_dim, int hidden_dim);

  // Weights uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], biases zero.
  [[nodiscard]] static EncoderParams random(int input_dim, int hidden_dim,
                                            std::uint64_t seed);
};

// Conventional hidden width used when none is configured.
[[nodiscard]] inline int default_hidden_dim(int input_dim) {
  return 2 * input_dim;
}

// Forward pass with the intermediates needed for backpropagation.
struct EncoderForward {
  Eigen::VectorXd hidden;    // tanh activations
  Eigen::VectorXd raw;       // head outputs before the diagonal transform
  Eigen::VectorXd mean;
  Eigen::MatrixXd lower;     // Cholesky factor of the encoded covariance
};

[[nodiscard]] EncoderForward encode_forward(const Eigen::VectorXd &x,
                                            const EncoderParams &params);

// Encoded Gaussian at x.  Throws NumericError naming the layer if any
// activation is non-finite.
[[nodiscard]] GaussianParams encode(const Eigen::VectorXd &x,
                                    const EncoderParams &params);

// Gradient accumulator mirroring EncoderParams.
struct EncoderGrad {
  Eigen::MatrixXd w1;
  Eigen::VectorXd b1;
  Eigen::MatrixXd w2;
  Eigen::VectorXd b2;

  [[nodiscard]] static EncoderGrad zero_like(const EncoderParams &params);
  [[nodiscard]] double squared_norm() const;
};

// Mean and covariance of the encoded Gaussians averaged over the rows of x.
[[nodiscard]] GaussianParams batch_averaged_params(const Eigen::MatrixXd &x,
                                                   const EncoderParams &params);

// The encoder-dependent part of the evidence bound:
//
//   sum_{j,t} phi_jt [ log N(x_j; mu_t(x_j), Sigma_t(x_j))
//                      + entropy(Sigma_t(x_j)) ]
//   + kEncoderPriorScale * sum_t (sum_j phi_jt)
//                        * niw_logpdf(mean_t, cov_t; prior)
//
// where (mean_t, cov_t) = batch_averaged_params for component t.  Weighting
// the prior term by column mass keeps unoccupied components gradient-free
// and makes the whole objective additive over duplicated batches.
[[nodiscard]] double elbo_network_terms(
    const Eigen::MatrixXd &x, const Eigen::MatrixXd &phi,
    const std::vector<EncoderParams> &encoders, const NIWParams &prior);

// Exact gradient of elbo_network_terms with respect to every parameter of
// every component network.
[[nodiscard]] std::vector<EncoderGrad> grad_elbo_wrt_params(
    const Eigen::MatrixXd &x, const Eigen::MatrixXd &phi,
    const std::vector<EncoderParams> &encoders, const NIWParams &prior);

// One gradient-ascent step per component: params += lr * g, with each
// component's gradient rescaled to norm <= clip beforehand.
void apply_ascent_step(std::vector<EncoderParams> &encoders,
                       const std::vector<EncoderGrad> &grads, double lr,
                       double clip);

}  // namespace cdpmil
