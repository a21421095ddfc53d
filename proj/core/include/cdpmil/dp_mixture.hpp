#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cdpmil/distributions.hpp"
#include "cdpmil/encoder_net.hpp"
#include "cdpmil/stick_breaking.hpp"

namespace cdpmil {

// Truncated variational DP Gaussian mixture with network-encoded
// components.  Responsibilities are stored in log domain; exp(log_phi)
// rows sum to 1 within 1e-8.
struct DPMixtureState {
  Eigen::MatrixXd log_phi;  // n x T
  StickPosterior sticks;
  std::vector<EncoderParams> encoders;  // one per component
  NIWParams prior;
  double eta = 1.0;

  int truncation() const { return static_cast<int>(encoders.size()); }

  // exp(log_phi) with rows renormalized exactly.
  Eigen::MatrixXd responsibilities() const;
};

struct FitConfig {
  int max_iters = 200;
  double rel_tol = 1e-6;  // relative ELBO change
  double learning_rate = 1e-3;
  double grad_clip = 10.0;
  int inner_grad_steps = 1;  // encoder ascent steps per sweep; 0 freezes
  std::uint64_t seed = 0;
  double init_noise = 1e-3;
  double label_smoothing = 1e-6;
};

// Additive pieces of the bound; total() is what fit_dp traces.
struct ElboBreakdown {
  double mixing = 0.0;              // sum_jt phi E[ln pi_t]
  double data_loglik = 0.0;         // sum_jt phi ln N(x_j; encoded_t)
  double component_entropy = 0.0;   // sum_jt phi H[encoded_t(x_j)]
  double assignment_entropy = 0.0;  // -sum phi ln phi
  double beta_kl = 0.0;             // sum_t KL(q(beta_t) || Beta(1, eta))
  double prior_logpdf = 0.0;        // sum_t ln NIW(batch-averaged moments)
  double supervised_kl = 0.0;       // sum_labeled KL(phi_j || smoothed y_j)

  double total() const {
    return mixing + data_loglik + component_entropy + assignment_entropy -
           beta_kl + prior_logpdf - supervised_kl;
  }
};

struct FitResult {
  DPMixtureState state;
  std::vector<double> elbo_trace;  // one entry per sweep
  int iterations = 0;
  bool converged = false;
};

// Uniform rows 1/T plus seeded noise in [0, noise], renormalized.  The
// noise breaks the symmetric fixed point; it enters the first gamma
// update only through column sums, so downstream state is independent
// of row order.
Eigen::MatrixXd initial_responsibilities(int n, int T, std::uint64_t seed,
                                         double noise = 1e-3);

// Farthest-point index selection: starts at the lexicographically
// smallest row, then repeatedly takes the row maximizing the minimum
// distance to the chosen set (lowest index on ties).  Used to place
// component means on the data so the mixture starts with full support
// coverage.
std::vector<int> data_spread_indices(const Eigen::MatrixXd& X, int count);

// One responsibility sweep: log phi_jt = E[ln pi_t] + ln N + entropy,
// plus the log smoothed-one-hot label logit for labeled rows, rows
// normalized by log-sum-exp.  labels may be null; entries of -1 mean
// unlabeled.
Eigen::MatrixXd update_responsibilities(const Eigen::MatrixXd& X,
                                        const DPMixtureState& state,
                                        const std::vector<int>* labels = nullptr,
                                        double label_smoothing = 1e-6);

ElboBreakdown compute_elbo_terms(const Eigen::MatrixXd& X,
                                 const DPMixtureState& state,
                                 const std::vector<int>* labels = nullptr,
                                 double label_smoothing = 1e-6);

double compute_elbo(const Eigen::MatrixXd& X, const DPMixtureState& state,
                    const std::vector<int>* labels = nullptr,
                    double label_smoothing = 1e-6);

// Coordinate ascent: per sweep, gamma update from the current
// responsibilities, expected log weights, responsibility update, ELBO
// record, then inner_grad_steps encoder ascent steps.  Stops when the
// relative ELBO change drops below rel_tol or after max_iters sweeps;
// non-convergence is flagged, not an error.
FitResult fit_dp(const Eigen::MatrixXd& X, const Eigen::MatrixXd& phi0,
                 std::vector<EncoderParams> encoders, const NIWParams& prior,
                 double eta, const FitConfig& config,
                 const std::vector<int>* labels = nullptr);

// Unit-scale NIW prior: zero mean, kappa = dim + 2, identity scale.
[[nodiscard]] NIWParams default_component_prior(int dim);

// Same shape with the mean at the column average of the data, so the
// regularizer pulls components toward the shared centroid instead of
// the origin.  Preferred whenever the data is not origin-centered:
// shrink toward the centroid moves decision boundaries far less than
// shrink toward an arbitrary outside point.
[[nodiscard]] NIWParams default_component_prior(const Eigen::MatrixXd& data);

// Random-weight encoders with each mean head biased onto an anchor row
// and the covariance diagonal opened to roughly `spread` per dimension,
// so components start broad enough to claim whole clusters rather than
// their nearest few points.
std::vector<EncoderParams> anchored_encoders(const Eigen::MatrixXd& X,
                                             const std::vector<int>& anchors,
                                             int hidden, std::uint64_t seed,
                                             double spread = 2.0);

// Cleanup passes appended by fit_dp_refined.
struct RefineConfig {
  double purge_fraction = 0.35;  // drop components under this share of the largest mass
  int refit_iters = 150;         // frozen-encoder sweeps after each cleanup
  double merge_distance = 3.0;   // coalesce components closer than this; 0 disables
};

// fit_dp, then drop low-mass components and re-converge the survivors
// with encoders frozen.  The learning phase finds the clusters; the
// purge removes near-empty components and broad duplicates that would
// otherwise keep a small stable share of every point, and the frozen
// pass reassigns their mass.  A final coalescence step folds together
// occupied components whose weighted means sit within merge_distance
// Mahalanobis radii, measured in the sharper component's metric so a
// broad component cannot look close to everything.  elbo_trace
// concatenates the phases, so it jumps at each splice where cleanup
// changes the model.
FitResult fit_dp_refined(const Eigen::MatrixXd& X, const Eigen::MatrixXd& phi0,
                         std::vector<EncoderParams> encoders,
                         const NIWParams& prior, double eta,
                         const FitConfig& config,
                         const RefineConfig& refine = RefineConfig{},
                         const std::vector<int>* labels = nullptr);

// ln E[pi_t] + ln N(x; encoded_t); softmax of this is the predictive
// cluster distribution.
Eigen::VectorXd component_log_scores(const Eigen::VectorXd& x,
                                     const DPMixtureState& state);

Eigen::VectorXd posterior_predictive(const Eigen::VectorXd& x,
                                     const DPMixtureState& state);

// Components whose responsibility column mass meets the threshold.
std::vector<int> occupied_clusters(const DPMixtureState& state,
                                   double threshold = 1.0);

// Row-wise argmax of log_phi, lowest index on ties.
std::vector<int> cluster_assignments(const DPMixtureState& state);

// Two-column table "iteration,elbo", one row per sweep.
void write_elbo_trace(const std::vector<double>& trace,
                      const std::string& path);

}  // namespace cdpmil
