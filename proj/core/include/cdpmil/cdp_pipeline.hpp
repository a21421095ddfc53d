#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "cdpmil/dp_mixture.hpp"

namespace cdpmil {

// One labeled collection of instances.  Coordinates are optional grid
// positions carried through to patch score exports.
struct Bag {
  std::string bag_id;
  Eigen::MatrixXd features;  // N x p, N >= 1
  int label = -1;            // class index, -1 when unlabeled
  std::vector<std::pair<std::uint32_t, std::uint32_t>> coords;  // empty or N
};

// Result of collapsing a bag to the means of its occupied clusters.
struct CentroidSet {
  Eigen::MatrixXd centroids;            // M x p, one row per occupied cluster
  std::vector<int> assignments;         // N, cluster id per instance
  std::vector<int> cluster_ids;         // M, cluster id behind each centroid
  Eigen::VectorXd mean_responsibility;  // M, bag-mean responsibility
  bool converged = true;
};

[[nodiscard]] inline FitConfig default_patch_fit() {
  FitConfig f;
  f.max_iters = 60;
  return f;
}

struct PipelineConfig {
  int patch_truncation = 10;      // within-bag component budget
  double patch_eta = 1.0;
  int slide_truncation = 0;       // cluster count at bag level; 0 = classes
  double slide_eta = 1.0;
  int epochs = 10;
  int patience = 3;               // early-stop plateau length
  int patch_hidden = 0;           // 0 = twice the feature dimension
  int slide_hidden = 0;
  int projection_threshold = 64;  // project features wider than this
  int projection_dim = 32;
  bool cache_aggregation = false;  // reuse epoch-1 centroids
  std::uint64_t seed = 7;
  FitConfig patch_fit = default_patch_fit();
  FitConfig slide_fit;
};

struct TrainedModel {
  PipelineConfig config;  // with slide_truncation resolved
  int input_dim = 0;      // raw feature dimension
  int feature_dim = 0;    // dimension the model operates in
  int n_classes = 0;
  Eigen::MatrixXd projection;  // feature_dim x input_dim; empty when unused
  DPMixtureState slide;        // fitted bag-level mixture over centroids
  std::vector<int> cluster_to_class;

  // Per-epoch ELBO traces of the bag-level fit, concatenated.
  std::vector<double> elbo_trace;
};

// Order-independent content hash combined with the model seed; drives
// per-bag initialisation so results do not depend on instance order.
[[nodiscard]] std::uint64_t bag_content_seed(const Eigen::MatrixXd &features,
                                             std::uint64_t model_seed);

// Aggregation plus the fitted within-bag mixture (responsibilities in the
// bag's original instance order), for callers that score instances.
struct BagAggregation {
  CentroidSet centroids;
  DPMixtureState state;
  bool converged = true;
};

// Fits the within-bag mixture (unsupervised), assigns each instance to its
// argmax cluster (lowest index on ties) and returns the mean of every
// nonempty cluster.  Rows are processed in a canonical sorted order
// internally, so the output is bitwise invariant to instance order.
// Non-convergence is flagged in the result, not an error.
[[nodiscard]] BagAggregation aggregate_bag_full(const Bag &bag,
                                                const PipelineConfig &config);

[[nodiscard]] CentroidSet aggregate_bag(const Bag &bag,
                                        const PipelineConfig &config);

// Per epoch: aggregate every bag, concatenate the centroids (each tagged
// with its bag's label), and fit the supervised bag-level mixture, warm
// starting from the previous epoch.  Stops early when training accuracy
// stops improving for `patience` epochs.
[[nodiscard]] TrainedModel train(const std::vector<Bag> &bags,
                                 const PipelineConfig &config);

// Aggregates the bag under the model's patch settings, runs the predictive
// cluster distribution on each centroid, maps clusters to classes and
// averages.  Returns the argmax class (lowest index on ties) and the
// averaged class probabilities.
[[nodiscard]] std::pair<int, Eigen::VectorXd> predict_bag(
    const Bag &bag, const TrainedModel &model);

// Applies the model's random projection; identity when the model has none.
[[nodiscard]] Eigen::MatrixXd project_features(const Eigen::MatrixXd &x,
                                               const TrainedModel &model);

// Folds a cluster-level probability vector into class probabilities via
// the cluster-to-class map.
[[nodiscard]] Eigen::VectorXd class_probabilities(
    const Eigen::VectorXd &cluster_probs,
    const std::vector<int> &cluster_to_class, int n_classes);

}  // namespace cdpmil
