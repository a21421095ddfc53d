#include "cdpmil/evaluation.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "cdpmil/errors.hpp"
#include "cdpmil/parallel.hpp"

namespace cdpmil {

namespace {

void validate_binary_scores(const std::vector<double> &scores,
                            const std::vector<int> &labels) {
  if (scores.empty()) throw UndefinedMetricError("empty input");
  if (scores.size() != labels.size()) {
    throw ShapeError("scores and labels must have equal length");
  }
  for (double s : scores) {
    if (!std::isfinite(s)) throw DomainError("scores must be finite");
  }
  for (int y : labels) {
    if (y != 0 && y != 1) throw DomainError("labels must be 0 or 1");
  }
}

std::vector<int> order_by_score(const std::vector<double> &scores,
                                bool descending) {
  std::vector<int> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (scores[static_cast<std::size_t>(a)] !=
        scores[static_cast<std::size_t>(b)]) {
      return descending ? scores[static_cast<std::size_t>(a)] >
                              scores[static_cast<std::size_t>(b)]
                        : scores[static_cast<std::size_t>(a)] <
                              scores[static_cast<std::size_t>(b)];
    }
    return a < b;
  });
  return idx;
}

}  // namespace

double auroc(const std::vector<double> &scores,
             const std::vector<int> &labels) {
  validate_binary_scores(scores, labels);
  long long pos = 0;
  for (int y : labels) pos += y;
  const long long neg = static_cast<long long>(labels.size()) - pos;
  if (pos == 0 || neg == 0) {
    throw UndefinedMetricError("AUROC needs both classes present");
  }

  const std::vector<int> idx = order_by_score(scores, false);
  const std::size_t n = idx.size();
  double positive_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[static_cast<std::size_t>(idx[j])] ==
                        scores[static_cast<std::size_t>(idx[i])]) {
      ++j;
    }
    // 1-based ranks i+1 .. j share the average rank of the tie block.
    const double avg_rank = (static_cast<double>(i) + 1.0 +
                             static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) {
      if (labels[static_cast<std::size_t>(idx[k])] == 1) {
        positive_rank_sum += avg_rank;
      }
    }
    i = j;
  }
  const double numerator =
      positive_rank_sum - static_cast<double>(pos) *
                              (static_cast<double>(pos) + 1.0) / 2.0;
  return numerator / static_cast<double>(pos * neg);
}

double aupr(const std::vector<double> &scores, const std::vector<int> &labels) {
  validate_binary_scores(scores, labels);
  long long total_pos = 0;
  for (int y : labels) total_pos += y;
  if (total_pos == 0) {
    throw UndefinedMetricError("AUPR needs at least one positive");
  }

  const std::vector<int> idx = order_by_score(scores, true);
  const std::size_t n = idx.size();
  long long tp = 0;
  long long fp = 0;
  double area = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    long long block_tp = 0;
    long long block_fp = 0;
    while (j < n && scores[static_cast<std::size_t>(idx[j])] ==
                        scores[static_cast<std::size_t>(idx[i])]) {
      if (labels[static_cast<std::size_t>(idx[j])] == 1) {
        ++block_tp;
      } else {
        ++block_fp;
      }
      ++j;
    }
    tp += block_tp;
    fp += block_fp;
    if (block_tp > 0) {
      area += static_cast<double>(block_tp * tp) /
              static_cast<double>((tp + fp) * total_pos);
    }
    i = j;
  }
  return area;
}

double accuracy(const std::vector<int> &preds, const std::vector<int> &labels) {
  if (preds.empty()) throw UndefinedMetricError("empty input");
  if (preds.size() != labels.size()) {
    throw ShapeError("predictions and labels must have equal length");
  }
  long long correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

double macro_f1(const std::vector<int> &preds, const std::vector<int> &labels,
                int n_classes) {
  if (preds.empty()) throw UndefinedMetricError("empty input");
  if (preds.size() != labels.size()) {
    throw ShapeError("predictions and labels must have equal length");
  }
  if (n_classes < 1) throw DomainError("class count must be positive");
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] < 0 || preds[i] >= n_classes || labels[i] < 0 ||
        labels[i] >= n_classes) {
      throw DomainError("class index outside [0, n_classes)");
    }
  }

  double sum = 0.0;
  int counted = 0;
  for (int c = 0; c < n_classes; ++c) {
    long long tp = 0;
    long long fp = 0;
    long long fn = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const bool predicted = preds[i] == c;
      const bool actual = labels[i] == c;
      if (predicted && actual) {
        ++tp;
      } else if (predicted) {
        ++fp;
      } else if (actual) {
        ++fn;
      }
    }
    if (tp + fp + fn == 0) continue;  // class absent everywhere
    sum += static_cast<double>(2 * tp) / static_cast<double>(2 * tp + fp + fn);
    ++counted;
  }
  return sum / counted;
}

FoldSplit kfold_split(const std::vector<Bag> &bags, int folds,
                      std::uint64_t seed) {
  if (folds < 2) throw DomainError("fold count must be at least 2");
  if (folds > static_cast<int>(bags.size())) {
    throw DomainError("fold count exceeds the number of bags");
  }

  std::map<int, std::vector<std::string>> by_class;
  FoldSplit split;
  split.folds = folds;
  split.seed = seed;
  for (const Bag &bag : bags) {
    if (bag.label < 0) {
      throw DatasetError("bag " + bag.bag_id + " is unlabeled");
    }
    if (split.fold_of.count(bag.bag_id) != 0) {
      throw DatasetError("duplicate bag_id " + bag.bag_id);
    }
    split.fold_of.emplace(bag.bag_id, -1);
    by_class[bag.label].push_back(bag.bag_id);
  }

  std::mt19937_64 rng(seed);
  int offset = 0;
  for (auto &[label, ids] : by_class) {
    std::shuffle(ids.begin(), ids.end(), rng);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      split.fold_of[ids[i]] =
          (offset + static_cast<int>(i)) % folds;
    }
    offset = (offset + static_cast<int>(ids.size())) % folds;
  }
  return split;
}

std::vector<OodResultRow> run_ood_experiment(const std::vector<Bag> &in_dist,
                                             const std::vector<Bag> &ood,
                                             const TrainedModel &model) {
  if (in_dist.empty() || ood.empty()) {
    throw DatasetError("both bag sets must be nonempty");
  }
  const int n_in = static_cast<int>(in_dist.size());
  const int total = n_in + static_cast<int>(ood.size());

  // Four scores per bag, oriented so larger means in-distribution.
  std::vector<std::array<double, 4>> scored(
      static_cast<std::size_t>(total));
  parallel_for(total, [&](int i) {
    const Bag &bag = i < n_in ? in_dist[static_cast<std::size_t>(i)]
                              : ood[static_cast<std::size_t>(i - n_in)];
    const SlideEvaluation ev = evaluate_slide(bag, model);
    const std::vector<OodScore> baselines =
        baseline_measures(ev.class_probs, ev.top_component);
    std::array<double, 4> row;
    row[0] = ev.loglik;
    for (std::size_t b = 0; b < baselines.size(); ++b) {
      row[b + 1] = baselines[b].larger_in_distribution ? baselines[b].value
                                                       : -baselines[b].value;
    }
    scored[static_cast<std::size_t>(i)] = row;
  });

  std::vector<int> labels(static_cast<std::size_t>(total), 0);
  for (int i = 0; i < n_in; ++i) labels[static_cast<std::size_t>(i)] = 1;

  const std::array<std::string, 4> names = {
      "log_responsibility", "max_confidence", "entropy",
      "differential_entropy"};
  std::vector<OodResultRow> rows;
  rows.reserve(names.size());
  for (std::size_t m = 0; m < names.size(); ++m) {
    std::vector<double> scores(static_cast<std::size_t>(total));
    for (int i = 0; i < total; ++i) {
      scores[static_cast<std::size_t>(i)] =
          scored[static_cast<std::size_t>(i)][m];
    }
    rows.push_back({names[m], auroc(scores, labels), aupr(scores, labels)});
  }
  return rows;
}

}  // namespace cdpmil
