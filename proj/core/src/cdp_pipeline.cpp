#include "cdpmil/cdp_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>
#include <string>

#include "cdpmil/errors.hpp"
#include "cdpmil/parallel.hpp"
#include "cdpmil/special_math.hpp"

namespace cdpmil {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Within-bag purge cut as a share of the largest component.  Kept well
// below the smallest minority-population share a bag is expected to
// carry, so cleanup removes stray near-empty components, never a small
// genuine cluster.
constexpr double kPatchPurgeFraction = 0.15;

std::uint64_t fnv1a(const unsigned char *bytes, std::size_t len) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

void validate_bag(const Bag &bag) {
  if (bag.features.rows() < 1) {
    throw ShapeError("bag " + bag.bag_id + " has no instances");
  }
  if (!bag.features.allFinite()) {
    throw DomainError("bag " + bag.bag_id + " contains non-finite features");
  }
  if (!bag.coords.empty() &&
      static_cast<Eigen::Index>(bag.coords.size()) != bag.features.rows()) {
    throw ShapeError("bag " + bag.bag_id +
                     " coordinate count does not match instance count");
  }
}

// Indices that visit the rows of X in lexicographic order.
std::vector<int> sorted_row_order(const Eigen::MatrixXd &X) {
  std::vector<int> order(static_cast<std::size_t>(X.rows()));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&X](int a, int b) {
    for (Eigen::Index c = 0; c < X.cols(); ++c) {
      if (X(a, c) < X(b, c)) return true;
      if (X(a, c) > X(b, c)) return false;
    }
    return a < b;
  });
  return order;
}

int argmax_lowest(const Eigen::VectorXd &v) {
  int best = 0;
  for (int i = 1; i < v.size(); ++i) {
    if (v(i) > v(best)) best = i;
  }
  return best;
}

}  // namespace

Eigen::VectorXd class_probabilities(const Eigen::VectorXd &cluster_probs,
                                    const std::vector<int> &cluster_to_class,
                                    int n_classes) {
  if (n_classes < 1) throw DomainError("class count must be positive");
  if (cluster_probs.size() !=
      static_cast<Eigen::Index>(cluster_to_class.size())) {
    throw ShapeError("cluster probability vector length " +
                     std::to_string(cluster_probs.size()) +
                     " does not match the cluster map size " +
                     std::to_string(cluster_to_class.size()));
  }
  Eigen::VectorXd out = Eigen::VectorXd::Zero(n_classes);
  for (int k = 0; k < static_cast<int>(cluster_to_class.size()); ++k) {
    const int cls = cluster_to_class[static_cast<std::size_t>(k)];
    if (cls < 0 || cls >= n_classes) {
      throw DomainError("cluster " + std::to_string(k) + " maps to class " +
                        std::to_string(cls) + " outside [0, " +
                        std::to_string(n_classes) + ")");
    }
    out(cls) += cluster_probs(k);
  }
  return out;
}

std::uint64_t bag_content_seed(const Eigen::MatrixXd &features,
                               std::uint64_t model_seed) {
  std::uint64_t sum = 0;
  Eigen::VectorXd row(features.cols());
  for (Eigen::Index j = 0; j < features.rows(); ++j) {
    row = features.row(j).transpose();
    sum += fnv1a(reinterpret_cast<const unsigned char *>(row.data()),
                 static_cast<std::size_t>(row.size()) * sizeof(double));
  }
  return splitmix64(sum ^ model_seed);
}

BagAggregation aggregate_bag_full(const Bag &bag,
                                  const PipelineConfig &config) {
  validate_bag(bag);
  if (config.patch_truncation < 1) {
    throw ConfigError("patch truncation must be at least 1");
  }
  const int n = static_cast<int>(bag.features.rows());
  const int p = static_cast<int>(bag.features.cols());
  const int T = config.patch_truncation;

  // Canonical row order makes every internal reduction independent of the
  // instance order the caller happened to use.
  const std::vector<int> order = sorted_row_order(bag.features);
  Eigen::MatrixXd sorted(n, p);
  for (int i = 0; i < n; ++i) sorted.row(i) = bag.features.row(order[i]);

  const std::uint64_t seed = bag_content_seed(bag.features, config.seed);
  const Eigen::MatrixXd phi0 =
      initial_responsibilities(n, T, seed, config.patch_fit.init_noise);
  const std::vector<int> anchors = data_spread_indices(sorted, T);
  std::vector<EncoderParams> encoders =
      anchored_encoders(sorted, anchors, config.patch_hidden, seed);

  RefineConfig refine;
  refine.purge_fraction = kPatchPurgeFraction;
  refine.refit_iters = std::max(config.patch_fit.max_iters, 1);
  FitResult fit = fit_dp_refined(sorted, phi0, std::move(encoders),
                                 default_component_prior(sorted),
                                 config.patch_eta, config.patch_fit, refine);
  const int Tp = fit.state.truncation();

  const std::vector<int> sorted_assign = cluster_assignments(fit.state);
  const Eigen::VectorXd mass =
      fit.state.responsibilities().colwise().sum().transpose();

  BagAggregation out;
  out.converged = fit.converged;
  out.centroids.converged = fit.converged;
  out.centroids.assignments.assign(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    out.centroids.assignments[static_cast<std::size_t>(order[i])] =
        sorted_assign[static_cast<std::size_t>(i)];
  }

  std::vector<std::vector<int>> members(static_cast<std::size_t>(Tp));
  for (int i = 0; i < n; ++i) {
    members[static_cast<std::size_t>(sorted_assign[static_cast<std::size_t>(i)])]
        .push_back(i);
  }
  int m = 0;
  for (int t = 0; t < Tp; ++t) {
    if (!members[static_cast<std::size_t>(t)].empty()) ++m;
  }
  out.centroids.centroids.resize(m, p);
  out.centroids.mean_responsibility.resize(m);
  out.centroids.cluster_ids.reserve(static_cast<std::size_t>(m));
  int row = 0;
  for (int t = 0; t < Tp; ++t) {
    const std::vector<int> &group = members[static_cast<std::size_t>(t)];
    if (group.empty()) continue;
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(p);
    for (int i : group) mean += sorted.row(i).transpose();
    out.centroids.centroids.row(row) =
        (mean / static_cast<double>(group.size())).transpose();
    out.centroids.mean_responsibility(row) = mass(t) / n;
    out.centroids.cluster_ids.push_back(t);
    ++row;
  }

  // Hand the mixture back in the caller's row order.
  Eigen::MatrixXd log_phi(n, Tp);
  for (int i = 0; i < n; ++i) {
    log_phi.row(order[i]) = fit.state.log_phi.row(i);
  }
  fit.state.log_phi = std::move(log_phi);
  out.state = std::move(fit.state);
  return out;
}

CentroidSet aggregate_bag(const Bag &bag, const PipelineConfig &config) {
  return aggregate_bag_full(bag, config).centroids;
}

Eigen::MatrixXd project_features(const Eigen::MatrixXd &x,
                                 const TrainedModel &model) {
  if (model.projection.size() == 0) return x;
  if (x.cols() != model.projection.cols()) {
    throw ShapeError("feature dimension " + std::to_string(x.cols()) +
                     " does not match model input dimension " +
                     std::to_string(model.projection.cols()));
  }
  return x * model.projection.transpose();
}

TrainedModel train(const std::vector<Bag> &bags, const PipelineConfig &config) {
  if (bags.empty()) throw DatasetError("training requires at least one bag");
  const int p_raw = static_cast<int>(bags.front().features.cols());
  int n_classes = 0;
  for (const Bag &bag : bags) {
    validate_bag(bag);
    if (bag.label < 0) {
      throw DatasetError("bag " + bag.bag_id + " is unlabeled");
    }
    if (bag.features.cols() != p_raw) {
      throw DatasetError("bag " + bag.bag_id +
                         " feature dimension differs from the rest");
    }
    n_classes = std::max(n_classes, bag.label + 1);
  }
  bool multi_class = false;
  for (const Bag &bag : bags) {
    if (bag.label != bags.front().label) multi_class = true;
  }
  if (!multi_class || n_classes < 2) {
    throw ConfigError("training requires at least two classes");
  }
  const int K =
      config.slide_truncation == 0 ? n_classes : config.slide_truncation;
  if (K < n_classes) {
    throw ConfigError("slide truncation " + std::to_string(K) +
                      " is below the class count " +
                      std::to_string(n_classes));
  }
  if (config.epochs < 1) throw ConfigError("epochs must be at least 1");

  TrainedModel model;
  model.config = config;
  model.config.slide_truncation = K;
  model.input_dim = p_raw;
  model.n_classes = n_classes;

  // Wide features pass through a seeded Gaussian projection, which keeps
  // full covariances tractable.
  if (p_raw > config.projection_threshold) {
    const int d = std::min(config.projection_dim, p_raw);
    if (d < 1) throw ConfigError("projection dimension must be positive");
    std::mt19937_64 rng(splitmix64(config.seed ^ 0x70726f6aULL));
    std::normal_distribution<double> gauss(0.0, 1.0 / std::sqrt(d));
    model.projection.resize(d, p_raw);
    for (int i = 0; i < d; ++i) {
      for (int j = 0; j < p_raw; ++j) model.projection(i, j) = gauss(rng);
    }
    model.feature_dim = d;
  } else {
    model.feature_dim = p_raw;
  }

  std::vector<Bag> working(bags);
  if (model.projection.size() != 0) {
    for (Bag &bag : working) {
      bag.features = project_features(bag.features, model);
    }
  }
  const int p = model.feature_dim;
  const int B = static_cast<int>(working.size());

  std::vector<CentroidSet> per_bag(static_cast<std::size_t>(B));
  DPMixtureState slide;
  bool have_state = false;
  Eigen::Index prev_rows = -1;
  double best_accuracy = -1.0;
  int plateau = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    if (epoch == 0 || !config.cache_aggregation) {
      parallel_for(B, [&](int b) {
        per_bag[static_cast<std::size_t>(b)] =
            aggregate_bag(working[static_cast<std::size_t>(b)], model.config);
      });
    }

    Eigen::Index total = 0;
    for (const CentroidSet &cs : per_bag) total += cs.centroids.rows();
    Eigen::MatrixXd C(total, p);
    std::vector<int> labels(static_cast<std::size_t>(total));
    std::vector<std::pair<Eigen::Index, Eigen::Index>> spans(
        static_cast<std::size_t>(B));
    Eigen::Index at = 0;
    for (int b = 0; b < B; ++b) {
      const CentroidSet &cs = per_bag[static_cast<std::size_t>(b)];
      const Eigen::Index m = cs.centroids.rows();
      C.middleRows(at, m) = cs.centroids;
      for (Eigen::Index i = 0; i < m; ++i) {
        labels[static_cast<std::size_t>(at + i)] =
            working[static_cast<std::size_t>(b)].label;
      }
      spans[static_cast<std::size_t>(b)] = {at, m};
      at += m;
    }

    Eigen::MatrixXd phi0;
    std::vector<EncoderParams> encoders;
    if (have_state && prev_rows == total) {
      phi0 = slide.responsibilities();
      encoders = slide.encoders;
    } else {
      phi0 = initial_responsibilities(static_cast<int>(total), K,
                                      splitmix64(config.seed ^ 0x736c6964ULL),
                                      config.slide_fit.init_noise);
      // Components that stand for a class start at that class's centroid
      // mean; any spares are spread over the data.
      const std::vector<int> spread = data_spread_indices(C, K);
      encoders = anchored_encoders(C, spread, config.slide_hidden,
                                   splitmix64(config.seed ^ 0x757073ULL));
      for (int k = 0; k < n_classes && k < K; ++k) {
        Eigen::VectorXd mean = Eigen::VectorXd::Zero(p);
        int count = 0;
        for (Eigen::Index i = 0; i < total; ++i) {
          if (labels[static_cast<std::size_t>(i)] == k) {
            mean += C.row(i).transpose();
            ++count;
          }
        }
        if (count > 0) encoders[static_cast<std::size_t>(k)].b2.head(p) =
            mean / static_cast<double>(count);
      }
    }

    FitResult fit = fit_dp(C, phi0, std::move(encoders), default_component_prior(C),
                           config.slide_eta, config.slide_fit, &labels);
    slide = std::move(fit.state);
    have_state = true;
    prev_rows = total;
    model.elbo_trace.insert(model.elbo_trace.end(), fit.elbo_trace.begin(),
                            fit.elbo_trace.end());

    // Surplus clusters adopt the class holding most of their mass.
    model.cluster_to_class.assign(static_cast<std::size_t>(K), 0);
    const Eigen::MatrixXd phi = slide.responsibilities();
    for (int k = 0; k < K; ++k) {
      if (k < n_classes) {
        model.cluster_to_class[static_cast<std::size_t>(k)] = k;
        continue;
      }
      Eigen::VectorXd mass = Eigen::VectorXd::Zero(n_classes);
      for (Eigen::Index i = 0; i < total; ++i) {
        mass(labels[static_cast<std::size_t>(i)]) += phi(i, k);
      }
      model.cluster_to_class[static_cast<std::size_t>(k)] =
          argmax_lowest(mass);
    }

    int correct = 0;
    for (int b = 0; b < B; ++b) {
      const auto [start, m] = spans[static_cast<std::size_t>(b)];
      Eigen::VectorXd mean_probs = Eigen::VectorXd::Zero(K);
      for (Eigen::Index i = 0; i < m; ++i) {
        mean_probs += phi.row(start + i).transpose();
      }
      mean_probs /= static_cast<double>(m);
      const Eigen::VectorXd class_probs =
          class_probabilities(mean_probs, model.cluster_to_class, n_classes);
      if (argmax_lowest(class_probs) ==
          working[static_cast<std::size_t>(b)].label) {
        ++correct;
      }
    }
    const double accuracy = static_cast<double>(correct) / B;
    if (accuracy > best_accuracy + 1e-12) {
      best_accuracy = accuracy;
      plateau = 0;
    } else if (++plateau >= config.patience) {
      break;
    }
  }

  model.slide = std::move(slide);
  return model;
}

std::pair<int, Eigen::VectorXd> predict_bag(const Bag &bag,
                                            const TrainedModel &model) {
  validate_bag(bag);
  if (bag.features.cols() != model.input_dim) {
    throw ShapeError("bag " + bag.bag_id + " has feature dimension " +
                     std::to_string(bag.features.cols()) +
                     " but the model expects " +
                     std::to_string(model.input_dim));
  }
  Bag projected = bag;
  projected.features = project_features(bag.features, model);
  const CentroidSet cs = aggregate_bag(projected, model.config);

  Eigen::VectorXd mean_class = Eigen::VectorXd::Zero(model.n_classes);
  for (Eigen::Index i = 0; i < cs.centroids.rows(); ++i) {
    const Eigen::VectorXd cluster_probs =
        posterior_predictive(cs.centroids.row(i).transpose(), model.slide);
    mean_class += class_probabilities(cluster_probs, model.cluster_to_class,
                                      model.n_classes);
  }
  mean_class /= static_cast<double>(cs.centroids.rows());
  return {argmax_lowest(mean_class), mean_class};
}

}  // namespace cdpmil
