#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "cdpmil/cdp_pipeline.hpp"

namespace cdpmil {

// Per-instance log scores for one bag.  Scores weight each within-bag
// cluster's density by the bag's mean responsibility and by how strongly
// the bag-level mixture ties that cluster's centroid to a non-reference
// class, so high scores mark instances likely to drive the bag label.
struct PatchScoreReport {
  std::string bag_id;
  Eigen::VectorXd scores;      // log domain, one per instance
  Eigen::VectorXd normalized;  // per-bag min-max rescale of scores
  std::vector<std::pair<std::uint32_t, std::uint32_t>> coords;  // from the bag
  // True when every cluster's non-reference mass fell below 1e-4; the
  // scores then fall back to the unweighted mixture likelihood.
  bool degenerate_weighting = false;
  bool raw_likelihood = false;
};

// raw_likelihood = true skips the class re-weighting and scores by the
// plain within-bag mixture density.
[[nodiscard]] PatchScoreReport patch_scores(const Bag &bag,
                                            const TrainedModel &model,
                                            bool raw_likelihood = false);

// Everything the slide-level mixture says about one bag, computed from a
// single aggregation pass.
struct SlideEvaluation {
  double loglik = 0.0;           // mean centroid log density under the mixture
  Eigen::VectorXd class_probs;   // averaged mapped predictive distribution
  Eigen::VectorXd mean_cluster_responsibility;  // length K
  GaussianParams top_component;  // encoded at the centroid mean, argmax cluster
};

[[nodiscard]] SlideEvaluation evaluate_slide(const Bag &bag,
                                             const TrainedModel &model);

// Log of the posterior mixture density averaged over the bag's centroids;
// the primary out-of-distribution score (larger = in-distribution).
[[nodiscard]] double slide_loglik(const Bag &bag, const TrainedModel &model);

struct OodScore {
  std::string measure;
  double value = 0.0;
  bool larger_in_distribution = false;
};

// The reference uncertainty measures: max_confidence (larger =
// in-distribution), predictive entropy and the argmax component's
// differential entropy (both larger = out-of-distribution).
[[nodiscard]] std::vector<OodScore> baseline_measures(
    const Eigen::VectorXd &class_probs, const GaussianParams &component);

// Comma-separated table `bag_id,instance_index,row,col,score,score_norm`
// with six-decimal scores; row/col are blank for bags without coordinates.
void write_patch_scores(const std::vector<PatchScoreReport> &reports,
                        const std::string &path);

}  // namespace cdpmil
