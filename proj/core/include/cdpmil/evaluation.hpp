#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "cdpmil/cdp_pipeline.hpp"
#include "cdpmil/uncertainty.hpp"

namespace cdpmil {

// Rank-based AUROC (ties count one half).  Labels must be 0/1 with both
// classes present; scores must be finite.
[[nodiscard]] double auroc(const std::vector<double> &scores,
                           const std::vector<int> &labels);

// Average precision: step-wise precision-recall summation over descending
// score thresholds, tied scores handled as one block.  Needs at least one
// positive.
[[nodiscard]] double aupr(const std::vector<double> &scores,
                          const std::vector<int> &labels);

[[nodiscard]] double accuracy(const std::vector<int> &preds,
                              const std::vector<int> &labels);

// Unweighted mean of per-class F1 = 2tp / (2tp + fp + fn); classes absent
// from both predictions and labels are excluded.
[[nodiscard]] double macro_f1(const std::vector<int> &preds,
                              const std::vector<int> &labels, int n_classes);

// Seeded class-stratified fold assignment; per-fold class counts differ by
// at most one.
struct FoldSplit {
  std::unordered_map<std::string, int> fold_of;  // bag_id -> fold
  int folds = 0;
  std::uint64_t seed = 0;
};

[[nodiscard]] FoldSplit kfold_split(const std::vector<Bag> &bags, int folds,
                                    std::uint64_t seed);

struct OodResultRow {
  std::string measure;
  double auroc = 0.0;
  double aupr = 0.0;
};

// Scores every bag in both sets with the mixture log-density and each
// baseline measure, flips signs so that larger always means
// in-distribution, labels the in-distribution set 1, and reports AUROC and
// AUPR per measure.
[[nodiscard]] std::vector<OodResultRow> run_ood_experiment(
    const std::vector<Bag> &in_dist, const std::vector<Bag> &ood,
    const TrainedModel &model);

}  // namespace cdpmil
