#include "cdpmil/uncertainty.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>

#include "cdpmil/errors.hpp"
#include "cdpmil/special_math.hpp"

namespace cdpmil {

namespace {

constexpr double kDegenerateWeight = 1e-4;

void require_trained(const TrainedModel &model) {
  if (model.slide.encoders.empty() || model.cluster_to_class.empty() ||
      model.n_classes < 2) {
    throw ConfigError("model is untrained");
  }
}

int argmax_lowest(const Eigen::VectorXd &v) {
  int best = 0;
  for (int i = 1; i < v.size(); ++i) {
    if (v(i) > v(best)) best = i;
  }
  return best;
}

}  // namespace

PatchScoreReport patch_scores(const Bag &bag, const TrainedModel &model,
                              bool raw_likelihood) {
  require_trained(model);
  Bag projected = bag;
  projected.features = project_features(bag.features, model);
  const BagAggregation agg = aggregate_bag_full(projected, model.config);
  const int m = static_cast<int>(agg.centroids.centroids.rows());
  const Eigen::Index n = projected.features.rows();

  // How much bag-level responsibility each within-bag cluster's centroid
  // puts on non-reference classes.
  Eigen::VectorXd class_weight(m);
  for (int i = 0; i < m; ++i) {
    const Eigen::VectorXd resp = posterior_predictive(
        agg.centroids.centroids.row(i).transpose(), model.slide);
    double w = 0.0;
    for (int k = 0; k < static_cast<int>(model.cluster_to_class.size()); ++k) {
      if (model.cluster_to_class[static_cast<std::size_t>(k)] != 0) {
        w += resp(k);
      }
    }
    class_weight(i) = w;
  }

  PatchScoreReport report;
  report.bag_id = bag.bag_id;
  report.coords = bag.coords;
  report.raw_likelihood = raw_likelihood;
  report.degenerate_weighting = class_weight.maxCoeff() < kDegenerateWeight;
  const bool weighted = !raw_likelihood && !report.degenerate_weighting;

  report.scores.resize(n);
  Eigen::VectorXd terms(m);
  for (Eigen::Index j = 0; j < n; ++j) {
    const Eigen::VectorXd x = projected.features.row(j).transpose();
    for (int i = 0; i < m; ++i) {
      const int cluster = agg.centroids.cluster_ids[static_cast<std::size_t>(i)];
      double term =
          std::log(agg.centroids.mean_responsibility(i)) +
          mvn_logpdf(x, encode(x, agg.state.encoders[
                                      static_cast<std::size_t>(cluster)]));
      if (weighted) term += std::log(class_weight(i));
      terms(i) = term;
    }
    report.scores(j) = log_sum_exp(terms);
  }

  report.normalized.resize(n);
  const double lo = report.scores.minCoeff();
  const double hi = report.scores.maxCoeff();
  if (hi - lo > 1e-300) {
    report.normalized = (report.scores.array() - lo) / (hi - lo);
  } else {
    report.normalized.setZero();
  }
  return report;
}

SlideEvaluation evaluate_slide(const Bag &bag, const TrainedModel &model) {
  require_trained(model);
  Bag projected = bag;
  projected.features = project_features(bag.features, model);
  const CentroidSet cs = aggregate_bag(projected, model.config);
  const int m = static_cast<int>(cs.centroids.rows());
  const int K = model.slide.truncation();

  Eigen::MatrixXd log_density(m, K);
  const Eigen::VectorXd log_weights =
      expected_weights(model.slide.sticks).array().log();
  for (int i = 0; i < m; ++i) {
    const Eigen::VectorXd c = cs.centroids.row(i).transpose();
    for (int k = 0; k < K; ++k) {
      log_density(i, k) = mvn_logpdf(
          c, encode(c, model.slide.encoders[static_cast<std::size_t>(k)]));
    }
  }

  Eigen::MatrixXd resp(m, K);
  Eigen::VectorXd class_sum = Eigen::VectorXd::Zero(model.n_classes);
  for (int i = 0; i < m; ++i) {
    Eigen::VectorXd row = log_weights + log_density.row(i).transpose();
    row.array() -= log_sum_exp(row);
    Eigen::VectorXd probs = row.array().exp();
    probs /= probs.sum();
    resp.row(i) = probs.transpose();
    class_sum +=
        class_probabilities(probs, model.cluster_to_class, model.n_classes);
  }

  SlideEvaluation out;
  out.mean_cluster_responsibility = resp.colwise().mean().transpose();
  out.class_probs = class_sum / m;

  const Eigen::VectorXd log_mean_resp =
      out.mean_cluster_responsibility.array().log();
  double total = 0.0;
  for (int i = 0; i < m; ++i) {
    total += log_sum_exp(log_mean_resp + log_density.row(i).transpose());
  }
  out.loglik = total / m;

  const Eigen::VectorXd centroid_mean = cs.centroids.colwise().mean();
  const int top = argmax_lowest(out.mean_cluster_responsibility);
  out.top_component = encode(
      centroid_mean, model.slide.encoders[static_cast<std::size_t>(top)]);
  return out;
}

double slide_loglik(const Bag &bag, const TrainedModel &model) {
  return evaluate_slide(bag, model).loglik;
}

std::vector<OodScore> baseline_measures(const Eigen::VectorXd &class_probs,
                                        const GaussianParams &component) {
  if (class_probs.size() < 1) {
    throw DomainError("probability vector must be nonempty");
  }
  double sum = 0.0;
  for (Eigen::Index i = 0; i < class_probs.size(); ++i) {
    if (!(class_probs(i) >= 0.0)) {
      throw DomainError("probabilities must be non-negative");
    }
    sum += class_probs(i);
  }
  if (std::abs(sum - 1.0) > 1e-8) {
    throw DomainError("probability vector must sum to 1");
  }

  double entropy = 0.0;
  for (Eigen::Index i = 0; i < class_probs.size(); ++i) {
    if (class_probs(i) > 0.0) {
      entropy -= class_probs(i) * std::log(class_probs(i));
    }
  }
  return {
      {"max_confidence", class_probs.maxCoeff(), true},
      {"entropy", entropy, false},
      {"differential_entropy", gaussian_entropy(component.cov), false},
  };
}

void write_patch_scores(const std::vector<PatchScoreReport> &reports,
                        const std::string &path) {
  std::ofstream out(path);
  if (!out) throw DatasetError("cannot open " + path + " for writing");
  out << "bag_id,instance_index,row,col,score,score_norm\n";
  char buf[128];
  for (const PatchScoreReport &report : reports) {
    for (Eigen::Index j = 0; j < report.scores.size(); ++j) {
      out << report.bag_id << ',' << j << ',';
      if (!report.coords.empty()) {
        out << report.coords[static_cast<std::size_t>(j)].first << ','
            << report.coords[static_cast<std::size_t>(j)].second;
      } else {
        out << ',';
      }
      std::snprintf(buf, sizeof(buf), ",%.6f,%.6f\n", report.scores(j),
                    report.normalized(j));
      out << buf;
    }
  }
  if (!out) throw DatasetError("failed writing " + path);
}

}  // namespace cdpmil
