#include "cdpmil/dp_mixture.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>
#include <string>

#include "cdpmil/errors.hpp"
#include "cdpmil/special_math.hpp"

namespace cdpmil {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

void validate_rows_on_simplex(const Eigen::MatrixXd &phi) {
  for (Eigen::Index j = 0; j < phi.rows(); ++j) {
    double sum = 0.0;
    for (Eigen::Index t = 0; t < phi.cols(); ++t) {
      const double v = phi(j, t);
      if (!(v >= 0.0 && v <= 1.0 + 1e-12)) {
        throw ShapeError("responsibility entries must lie in [0, 1]");
      }
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-8) {
      throw ShapeError("responsibility rows must sum to 1 (row " +
                       std::to_string(j) + " sums to " + std::to_string(sum) +
                       ")");
    }
  }
}

void validate_labels(const std::vector<int> *labels, Eigen::Index n, int T) {
  if (labels == nullptr) return;
  if (static_cast<Eigen::Index>(labels->size()) != n) {
    throw ShapeError("label vector length must match the number of rows");
  }
  for (int y : *labels) {
    if (y < -1 || y >= T) {
      throw DomainError("label " + std::to_string(y) +
                        " outside [-1, truncation)");
    }
  }
}

}  // namespace

Eigen::MatrixXd DPMixtureState::responsibilities() const {
  Eigen::MatrixXd phi = log_phi.array().exp();
  for (Eigen::Index j = 0; j < phi.rows(); ++j) {
    phi.row(j) /= phi.row(j).sum();
  }
  return phi;
}

Eigen::MatrixXd initial_responsibilities(int n, int T, std::uint64_t seed,
                                         double noise) {
  if (T < 1) throw DomainError("truncation must be at least 1");
  if (n < 0) throw ShapeError("row count must be non-negative");
  if (noise < 0.0) throw DomainError("init noise must be non-negative");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jitter(0.0, noise);
  Eigen::MatrixXd phi(n, T);
  const double base = 1.0 / T;
  for (int j = 0; j < n; ++j) {
    for (int t = 0; t < T; ++t) phi(j, t) = base + jitter(rng);
    phi.row(j) /= phi.row(j).sum();
  }
  return phi;
}

std::vector<int> data_spread_indices(const Eigen::MatrixXd &X, int count) {
  const Eigen::Index n = X.rows();
  if (n < 1) throw ShapeError("cannot select init points from an empty matrix");
  if (count < 1) throw DomainError("init point count must be at least 1");

  auto row_less = [&X](Eigen::Index a, Eigen::Index b) {
    for (Eigen::Index c = 0; c < X.cols(); ++c) {
      if (X(a, c) < X(b, c)) return true;
      if (X(a, c) > X(b, c)) return false;
    }
    return a < b;
  };
  Eigen::Index start = 0;
  for (Eigen::Index j = 1; j < n; ++j) {
    if (row_less(j, start)) start = j;
  }

  std::vector<int> chosen;
  chosen.reserve(static_cast<std::size_t>(count));
  chosen.push_back(static_cast<int>(start));
  Eigen::VectorXd min_dist(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    min_dist(j) = (X.row(j) - X.row(start)).squaredNorm();
  }
  const Eigen::Index distinct = std::min<Eigen::Index>(count, n);
  for (Eigen::Index picked = 1; picked < distinct; ++picked) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < n; ++j) {
      if (min_dist(j) > min_dist(best)) best = j;
    }
    chosen.push_back(static_cast<int>(best));
    for (Eigen::Index j = 0; j < n; ++j) {
      min_dist(j) =
          std::min(min_dist(j), (X.row(j) - X.row(best)).squaredNorm());
    }
  }
  // More points requested than rows available: cycle through the selection.
  const std::size_t wrap = chosen.size();
  for (std::size_t i = wrap; i < static_cast<std::size_t>(count); ++i) {
    chosen.push_back(chosen[i % wrap]);
  }
  return chosen;
}

Eigen::MatrixXd update_responsibilities(const Eigen::MatrixXd &X,
                                        const DPMixtureState &state,
                                        const std::vector<int> *labels,
                                        double label_smoothing) {
  const Eigen::Index n = X.rows();
  const int T = state.truncation();
  if (T < 1) throw ShapeError("state has no components");
  validate_labels(labels, n, T);

  const Eigen::VectorXd log_pi = expected_log_pi(state.sticks);
  if (log_pi.size() != T) {
    throw ShapeError("stick posterior size does not match component count");
  }

  Eigen::MatrixXd logits(n, T);
  for (Eigen::Index j = 0; j < n; ++j) {
    const Eigen::VectorXd x = X.row(j).transpose();
    const bool labeled = labels != nullptr && (*labels)[j] >= 0;
    Eigen::VectorXd log_target;
    if (labeled) {
      log_target =
          smoothed_onehot(T, (*labels)[j], label_smoothing).array().log();
    }
    for (int t = 0; t < T; ++t) {
      double logit;
      try {
        const GaussianParams g = encode(x, state.encoders[t]);
        logit = log_pi(t) + mvn_logpdf(x, g) + gaussian_entropy(g.cov);
      } catch (const NumericError &e) {
        throw NumericError(std::string(e.what()) + " (row " +
                           std::to_string(j) + ", component " +
                           std::to_string(t) + ")");
      }
      if (labeled) logit += log_target(t);
      if (!std::isfinite(logit)) {
        throw NumericError("non-finite responsibility logit at row " +
                           std::to_string(j) + ", component " +
                           std::to_string(t));
      }
      logits(j, t) = logit;
    }
    const double lse = log_sum_exp(logits.row(j).transpose());
    logits.row(j).array() -= lse;
  }
  return logits;
}

ElboBreakdown compute_elbo_terms(const Eigen::MatrixXd &X,
                                 const DPMixtureState &state,
                                 const std::vector<int> *labels,
                                 double label_smoothing) {
  const Eigen::Index n = X.rows();
  const int T = state.truncation();
  validate_labels(labels, n, T);

  ElboBreakdown out;
  const Eigen::MatrixXd phi = state.responsibilities();
  const Eigen::VectorXd log_pi = expected_log_pi(state.sticks);

  for (Eigen::Index j = 0; j < n; ++j) {
    const Eigen::VectorXd x = X.row(j).transpose();
    for (int t = 0; t < T; ++t) {
      const double w = phi(j, t);
      if (w > 0.0) {
        const GaussianParams g = encode(x, state.encoders[t]);
        out.mixing += w * log_pi(t);
        out.data_loglik += w * mvn_logpdf(x, g);
        out.component_entropy += w * gaussian_entropy(g.cov);
        out.assignment_entropy -= w * state.log_phi(j, t);
      }
    }
    if (labels != nullptr && (*labels)[j] >= 0) {
      out.supervised_kl += kl_categorical(
          phi.row(j).transpose(), smoothed_onehot(T, (*labels)[j],
                                                  label_smoothing));
    }
  }

  // Only the first T-1 sticks carry a Beta posterior; the last is fixed.
  for (int t = 0; t + 1 < T; ++t) {
    out.beta_kl += kl_beta({state.sticks.gamma1(t), state.sticks.gamma2(t)},
                           {1.0, state.eta});
  }

  // The prior enters through the batch-averaged encoded moments; with the
  // encoders held fixed this term is constant across coordinate sweeps.
  if (n > 0) {
    for (int t = 0; t < T; ++t) {
      const GaussianParams avg = batch_averaged_params(X, state.encoders[t]);
      out.prior_logpdf += niw_logpdf(avg.mean, avg.cov, state.prior);
    }
  }
  return out;
}

double compute_elbo(const Eigen::MatrixXd &X, const DPMixtureState &state,
                    const std::vector<int> *labels, double label_smoothing) {
  return compute_elbo_terms(X, state, labels, label_smoothing).total();
}

FitResult fit_dp(const Eigen::MatrixXd &X, const Eigen::MatrixXd &phi0,
                 std::vector<EncoderParams> encoders, const NIWParams &prior,
                 double eta, const FitConfig &config,
                 const std::vector<int> *labels) {
  const Eigen::Index n = X.rows();
  const Eigen::Index p = X.cols();
  const int T = static_cast<int>(encoders.size());
  if (n < 1) throw ShapeError("fit requires at least one row");
  if (T < 1) throw ShapeError("fit requires at least one component");
  if (!X.allFinite()) throw DomainError("features must be finite");
  if (phi0.rows() != n || phi0.cols() != T) {
    throw ShapeError("initial responsibilities must be n x T");
  }
  if (eta <= 0.0) throw DomainError("concentration must be positive");
  if (config.max_iters < 1) throw DomainError("max_iters must be at least 1");
  if (config.rel_tol < 0.0) throw DomainError("rel_tol must be non-negative");
  if (config.learning_rate < 0.0 || config.grad_clip <= 0.0) {
    throw DomainError("learning rate must be non-negative, clip positive");
  }
  if (config.inner_grad_steps < 0) {
    throw DomainError("inner_grad_steps must be non-negative");
  }
  for (const EncoderParams &e : encoders) {
    if (e.input_dim() != p) {
      throw ShapeError("encoder input dimension does not match features");
    }
  }
  if (prior.dim() != p) {
    throw ShapeError("prior dimension does not match features");
  }
  validate_rows_on_simplex(phi0);
  validate_labels(labels, n, T);

  DPMixtureState state;
  state.log_phi = phi0.array().max(1e-300).log();
  state.encoders = std::move(encoders);
  state.prior = prior;
  state.eta = eta;

  FitResult result;
  Eigen::MatrixXd phi = phi0;
  double prev = std::numeric_limits<double>::quiet_NaN();
  for (int iter = 0; iter < config.max_iters; ++iter) {
    state.sticks = update_gamma(phi, eta);
    state.log_phi =
        update_responsibilities(X, state, labels, config.label_smoothing);
    phi = state.responsibilities();
    const double elbo =
        compute_elbo(X, state, labels, config.label_smoothing);
    result.elbo_trace.push_back(elbo);
    if (iter > 0 && std::abs(elbo - prev) / (1.0 + std::abs(prev)) <
                        config.rel_tol) {
      result.converged = true;
      break;
    }
    prev = elbo;
    for (int s = 0; s < config.inner_grad_steps; ++s) {
      const std::vector<EncoderGrad> grads =
          grad_elbo_wrt_params(X, phi, state.encoders, state.prior);
      apply_ascent_step(state.encoders, grads, config.learning_rate,
                        config.grad_clip);
    }
  }
  result.iterations = static_cast<int>(result.elbo_trace.size());
  result.state = std::move(state);
  return result;
}

namespace {

// Keep set after folding occupied components whose weighted means sit
// within merge_distance of each other, measured in the sharper
// component's average covariance metric.  The heaviest member of each
// group survives; sub-occupancy columns are left alone.
std::vector<int> coalesced_keep_set(const Eigen::MatrixXd &X,
                                    const DPMixtureState &state,
                                    double merge_distance) {
  const int n = static_cast<int>(X.rows());
  const int p = static_cast<int>(X.cols());
  const int T = state.truncation();
  const Eigen::MatrixXd phi = state.responsibilities();
  const Eigen::VectorXd mass = phi.colwise().sum();

  std::vector<int> considered;
  for (int t = 0; t < T; ++t) {
    if (mass(t) >= 1.0) considered.push_back(t);
  }
  // Component extent is the weighted scatter of its members, not the
  // encoded covariance: an input-dependent mean head can spread its
  // members arbitrarily wide while every per-point covariance stays
  // sharp.  The ridge keeps near-point components unmergeable instead
  // of singular.
  std::vector<Eigen::VectorXd> means(considered.size());
  std::vector<Eigen::MatrixXd> covs(considered.size());
  for (std::size_t c = 0; c < considered.size(); ++c) {
    const int t = considered[c];
    const Eigen::VectorXd mu =
        (X.transpose() * phi.col(t)) / mass(t);
    Eigen::MatrixXd scatter = Eigen::MatrixXd::Zero(p, p);
    for (int j = 0; j < n; ++j) {
      const Eigen::VectorXd d = X.row(j).transpose() - mu;
      scatter.noalias() += phi(j, t) * (d * d.transpose());
    }
    means[c] = mu;
    covs[c] = scatter / mass(t) + 1e-2 * Eigen::MatrixXd::Identity(p, p);
  }

  // Union-find over the considered components.
  std::vector<int> parent(considered.size());
  for (std::size_t c = 0; c < parent.size(); ++c) parent[c] = static_cast<int>(c);
  const auto find = [&parent](int a) {
    while (parent[static_cast<std::size_t>(a)] != a) a = parent[static_cast<std::size_t>(a)];
    return a;
  };
  for (std::size_t a = 0; a < considered.size(); ++a) {
    for (std::size_t b = a + 1; b < considered.size(); ++b) {
      const Eigen::MatrixXd &sharp =
          covs[a].trace() <= covs[b].trace() ? covs[a] : covs[b];
      const Eigen::VectorXd delta = means[a] - means[b];
      const double d2 = delta.dot(sharp.llt().solve(delta));
      if (d2 < merge_distance * merge_distance) {
        parent[static_cast<std::size_t>(find(static_cast<int>(a)))] =
            find(static_cast<int>(b));
      }
    }
  }

  std::vector<char> drop(static_cast<std::size_t>(T), 0);
  for (std::size_t c = 0; c < considered.size(); ++c) {
    const int root = find(static_cast<int>(c));
    std::size_t heaviest = c;
    for (std::size_t o = 0; o < considered.size(); ++o) {
      if (find(static_cast<int>(o)) == root &&
          mass(considered[o]) > mass(considered[heaviest])) {
        heaviest = o;
      }
    }
    if (heaviest != c) drop[static_cast<std::size_t>(considered[c])] = 1;
  }
  std::vector<int> keep;
  for (int t = 0; t < T; ++t) {
    if (!drop[static_cast<std::size_t>(t)]) keep.push_back(t);
  }
  return keep;
}

}  // namespace

NIWParams default_component_prior(int dim) {
  return NIWParams{Eigen::VectorXd::Zero(dim), static_cast<double>(dim) + 2.0,
                   SpdMatrix::identity(dim)};
}

NIWParams default_component_prior(const Eigen::MatrixXd &data) {
  if (data.rows() < 1 || data.cols() < 1) {
    throw ShapeError("prior needs a non-empty data matrix");
  }
  NIWParams prior = default_component_prior(static_cast<int>(data.cols()));
  prior.m = data.colwise().mean().transpose();
  return prior;
}

std::vector<EncoderParams> anchored_encoders(const Eigen::MatrixXd &X,
                                             const std::vector<int> &anchors,
                                             int hidden, std::uint64_t seed,
                                             double spread) {
  const int p = static_cast<int>(X.cols());
  const int h = hidden > 0 ? hidden : default_hidden_dim(p);
  // softplus inverse, so the diagonal head starts at spread exactly
  const double raw = spread > 0.0 ? std::log(std::expm1(spread)) : 0.0;
  std::vector<EncoderParams> encoders;
  encoders.reserve(anchors.size());
  for (std::size_t t = 0; t < anchors.size(); ++t) {
    EncoderParams e = EncoderParams::random(
        p, h, splitmix64(seed ^ (0x51ed2701ULL + t)));
    e.b2.head(p) = X.row(anchors[t]).transpose();
    if (spread > 0.0) {
      for (int r = 0; r < p; ++r) {
        e.b2(p + r * (r + 1) / 2 + r) = raw;
      }
    }
    encoders.push_back(std::move(e));
  }
  return encoders;
}

FitResult fit_dp_refined(const Eigen::MatrixXd &X, const Eigen::MatrixXd &phi0,
                         std::vector<EncoderParams> encoders,
                         const NIWParams &prior, double eta,
                         const FitConfig &config, const RefineConfig &refine,
                         const std::vector<int> *labels) {
  if (refine.purge_fraction < 0.0 || refine.purge_fraction >= 1.0) {
    throw DomainError("purge fraction must lie in [0, 1)");
  }
  if (refine.refit_iters < 1) throw DomainError("refit_iters must be at least 1");
  FitResult learned =
      fit_dp(X, phi0, std::move(encoders), prior, eta, config, labels);
  const int n = static_cast<int>(X.rows());
  const int T = learned.state.truncation();

  const Eigen::MatrixXd phi = learned.state.responsibilities();
  const Eigen::VectorXd mass = phi.colwise().sum();
  const double cut = refine.purge_fraction * mass.maxCoeff();
  std::vector<int> keep;
  for (int t = 0; t < T; ++t) {
    if (mass(t) >= cut) keep.push_back(t);
  }
  // the largest column always survives its own cut
  const int kept = static_cast<int>(keep.size());

  Eigen::MatrixXd kept_phi(n, kept);
  std::vector<EncoderParams> kept_encoders;
  kept_encoders.reserve(keep.size());
  for (int k = 0; k < kept; ++k) {
    kept_phi.col(k) = phi.col(keep[static_cast<std::size_t>(k)]);
    kept_encoders.push_back(
        learned.state.encoders[static_cast<std::size_t>(keep[static_cast<std::size_t>(k)])]);
  }
  for (int j = 0; j < n; ++j) {
    const double s = kept_phi.row(j).sum();
    if (s > 0.0) {
      kept_phi.row(j) /= s;
    } else {
      kept_phi.row(j).setConstant(1.0 / static_cast<double>(kept));
    }
  }

  // Component indices shift when columns are dropped, so steering
  // labels must be remapped; rows whose target was purged run free.
  std::vector<int> remapped;
  const std::vector<int> *phase2_labels = labels;
  if (labels != nullptr && kept != T) {
    std::vector<int> new_index(static_cast<std::size_t>(T), -1);
    for (int k = 0; k < kept; ++k) {
      new_index[static_cast<std::size_t>(keep[static_cast<std::size_t>(k)])] = k;
    }
    remapped.reserve(labels->size());
    for (const int lab : *labels) {
      remapped.push_back(lab < 0 ? -1 : new_index[static_cast<std::size_t>(lab)]);
    }
    phase2_labels = &remapped;
  }

  FitConfig frozen = config;
  frozen.inner_grad_steps = 0;
  frozen.max_iters = refine.refit_iters;
  FitResult out = fit_dp(X, kept_phi, std::move(kept_encoders), prior, eta,
                         frozen, phase2_labels);

  if (refine.merge_distance > 0.0) {
    const std::vector<int> close =
        coalesced_keep_set(X, out.state, refine.merge_distance);
    if (static_cast<int>(close.size()) < out.state.truncation()) {
      const Eigen::MatrixXd phi2 = out.state.responsibilities();
      const int n2 = static_cast<int>(close.size());
      Eigen::MatrixXd merged_phi(n, n2);
      std::vector<EncoderParams> merged_encoders;
      merged_encoders.reserve(close.size());
      for (int k = 0; k < n2; ++k) {
        merged_phi.col(k) = phi2.col(close[static_cast<std::size_t>(k)]);
        merged_encoders.push_back(
            out.state.encoders[static_cast<std::size_t>(close[static_cast<std::size_t>(k)])]);
      }
      for (int j = 0; j < n; ++j) {
        const double s = merged_phi.row(j).sum();
        if (s > 0.0) {
          merged_phi.row(j) /= s;
        } else {
          merged_phi.row(j).setConstant(1.0 / static_cast<double>(n2));
        }
      }
      std::vector<int> remap2;
      const std::vector<int> *phase3_labels = phase2_labels;
      if (phase2_labels != nullptr) {
        std::vector<int> new_index(
            static_cast<std::size_t>(out.state.truncation()), -1);
        for (int k = 0; k < n2; ++k) {
          new_index[static_cast<std::size_t>(close[static_cast<std::size_t>(k)])] = k;
        }
        remap2.reserve(phase2_labels->size());
        for (const int lab : *phase2_labels) {
          remap2.push_back(lab < 0 ? -1
                                   : new_index[static_cast<std::size_t>(lab)]);
        }
        phase3_labels = &remap2;
      }
      FitResult folded = fit_dp(X, merged_phi, std::move(merged_encoders),
                                prior, eta, frozen, phase3_labels);
      folded.iterations += out.iterations;
      folded.elbo_trace.insert(folded.elbo_trace.begin(),
                               out.elbo_trace.begin(), out.elbo_trace.end());
      out = std::move(folded);
    }
  }

  out.iterations += learned.iterations;
  out.elbo_trace.insert(out.elbo_trace.begin(), learned.elbo_trace.begin(),
                        learned.elbo_trace.end());
  return out;
}

Eigen::VectorXd component_log_scores(const Eigen::VectorXd &x,
                                     const DPMixtureState &state) {
  const int T = state.truncation();
  if (T < 1) throw ShapeError("state has no components");
  const Eigen::VectorXd weights = expected_weights(state.sticks);
  Eigen::VectorXd scores(T);
  for (int t = 0; t < T; ++t) {
    scores(t) =
        std::log(weights(t)) + mvn_logpdf(x, encode(x, state.encoders[t]));
  }
  return scores;
}

Eigen::VectorXd posterior_predictive(const Eigen::VectorXd &x,
                                     const DPMixtureState &state) {
  Eigen::VectorXd scores = component_log_scores(x, state);
  scores.array() -= log_sum_exp(scores);
  Eigen::VectorXd probs = scores.array().exp();
  probs /= probs.sum();
  return probs;
}

std::vector<int> occupied_clusters(const DPMixtureState &state,
                                   double threshold) {
  const Eigen::VectorXd mass = state.responsibilities().colwise().sum();
  std::vector<int> occupied;
  for (int t = 0; t < state.truncation(); ++t) {
    if (mass(t) >= threshold) occupied.push_back(t);
  }
  return occupied;
}

std::vector<int> cluster_assignments(const DPMixtureState &state) {
  std::vector<int> z(static_cast<std::size_t>(state.log_phi.rows()));
  for (Eigen::Index j = 0; j < state.log_phi.rows(); ++j) {
    int best = 0;
    for (int t = 1; t < state.truncation(); ++t) {
      if (state.log_phi(j, t) > state.log_phi(j, best)) best = t;
    }
    z[static_cast<std::size_t>(j)] = best;
  }
  return z;
}

void write_elbo_trace(const std::vector<double> &trace,
                      const std::string &path) {
  std::ofstream out(path);
  if (!out) throw DatasetError("cannot open " + path + " for writing");
  out << "iteration,elbo\n";
  char buf[64];
  for (std::size_t i = 0; i < trace.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", i, trace[i]);
    out << buf;
  }
  if (!out) throw DatasetError("failed writing " + path);
}

}  // namespace cdpmil
