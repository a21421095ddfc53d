#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "cdpmil/cdp_pipeline.hpp"
#include "cdpmil/data_io.hpp"
#include "cdpmil/errors.hpp"
#include "cdpmil/evaluation.hpp"
#include "cdpmil/parallel.hpp"
#include "cdpmil/uncertainty.hpp"

namespace fs = std::filesystem;
using namespace cdpmil;

namespace {

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_text(const std::string &path, const std::string &content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetError("cannot open " + path + " for writing");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  out.flush();
  if (!out.good()) throw DatasetError("failed writing " + path);
}

// Labels live next to the features by convention; an explicit --labels
// wins, and prediction-style commands fall back to unlabeled loading.
std::vector<Bag> load_bags(const std::string &data, const std::string &labels,
                           bool need_labels) {
  std::string labels_path = labels;
  if (labels_path.empty()) {
    const fs::path candidate = fs::path(data) / "labels.tsv";
    if (need_labels || fs::exists(candidate)) {
      labels_path = candidate.string();
    }
  }
  if (!labels_path.empty()) return load_dataset(data, labels_path);
  return load_feature_directory(data);
}

std::vector<std::pair<int, Eigen::VectorXd>> predict_all(
    const std::vector<Bag> &bags, const TrainedModel &model) {
  std::vector<std::pair<int, Eigen::VectorXd>> out(bags.size());
  parallel_for(static_cast<int>(bags.size()),
               [&](int i) { out[static_cast<std::size_t>(i)] =
                                predict_bag(bags[static_cast<std::size_t>(i)],
                                            model); });
  return out;
}

struct SynthFlags {
  std::string out;
  SynthConfig config;
};

void run_synth(const SynthFlags &f) {
  const SynthData data = generate_synthetic(f.config);
  save_dataset(data.train, (fs::path(f.out) / "train").string());
  save_dataset(data.test, (fs::path(f.out) / "test").string());
  save_instance_labels(data.instance_truth,
                       (fs::path(f.out) / "instance_labels.tsv").string());
  std::printf("wrote %zu train bags and %zu test bags under %s\n",
              data.train.size(), data.test.size(), f.out.c_str());
}

struct TrainFlags {
  std::string data;
  std::string labels;
  std::string out = "model.cdpm";
  std::string elbo_trace;
  int truncation = 10;
  int clusters = 0;  // 0 picks the class count
  double eta1 = 1.0;
  double eta2 = 1.0;
  int epochs = 10;
  int patience = 3;
  std::uint64_t seed = 7;
  double lr = 0.0;    // 0 keeps the library default
  int max_iters = 0;  // 0 keeps the library defaults
  int hidden = 0;
  int proj_dim = 32;
  int proj_threshold = 64;
  bool cache_aggregation = false;
  int folds = 10;  // crossval only
};

PipelineConfig pipeline_config(const TrainFlags &f) {
  PipelineConfig cfg;
  cfg.patch_truncation = f.truncation;
  cfg.slide_truncation = f.clusters;
  cfg.patch_eta = f.eta1;
  cfg.slide_eta = f.eta2;
  cfg.epochs = f.epochs;
  cfg.patience = f.patience;
  cfg.seed = f.seed;
  cfg.patch_hidden = f.hidden;
  cfg.slide_hidden = f.hidden;
  cfg.projection_dim = f.proj_dim;
  cfg.projection_threshold = f.proj_threshold;
  cfg.cache_aggregation = f.cache_aggregation;
  if (f.max_iters > 0) {
    cfg.patch_fit.max_iters = f.max_iters;
    cfg.slide_fit.max_iters = f.max_iters;
  }
  if (f.lr > 0.0) {
    cfg.patch_fit.learning_rate = f.lr;
    cfg.slide_fit.learning_rate = f.lr;
  }
  return cfg;
}

void run_train(const TrainFlags &f) {
  const std::vector<Bag> bags = load_bags(f.data, f.labels, true);
  const TrainedModel model = train(bags, pipeline_config(f));
  save_model(model, f.out);
  if (!f.elbo_trace.empty()) write_elbo_trace(model.elbo_trace, f.elbo_trace);
  std::printf(
      "trained on %zu bags: %d classes, %zu bag-level clusters, input dim "
      "%d\n",
      bags.size(), model.n_classes, model.slide.encoders.size(),
      model.input_dim);
  std::printf("model written to %s\n", f.out.c_str());
}

struct PredictFlags {
  std::string model;
  std::string data;
  std::string labels;
  std::string out = "predictions.csv";
  bool raw_likelihood = false;  // score-patches only
};

void run_predict(const PredictFlags &f) {
  const TrainedModel model = load_model(f.model);
  const std::vector<Bag> bags = load_bags(f.data, f.labels, false);
  const auto preds = predict_all(bags, model);

  std::string csv = "bag_id,predicted_class";
  for (int c = 0; c < model.n_classes; ++c) {
    csv += ",prob_" + std::to_string(c);
  }
  csv += '\n';
  for (std::size_t i = 0; i < bags.size(); ++i) {
    csv += bags[i].bag_id;
    csv += ',';
    csv += std::to_string(preds[i].first);
    for (int c = 0; c < model.n_classes; ++c) {
      csv += ',';
      csv += fmt17(preds[i].second(c));
    }
    csv += '\n';
  }
  write_text(f.out, csv);
  std::printf("wrote %zu predictions to %s\n", bags.size(), f.out.c_str());
}

void run_score_patches(const PredictFlags &f) {
  const TrainedModel model = load_model(f.model);
  const std::vector<Bag> bags = load_bags(f.data, f.labels, false);

  std::vector<PatchScoreReport> reports(bags.size());
  parallel_for(static_cast<int>(bags.size()), [&](int i) {
    reports[static_cast<std::size_t>(i)] = patch_scores(
        bags[static_cast<std::size_t>(i)], model, f.raw_likelihood);
  });
  write_patch_scores(reports, f.out);

  int degenerate = 0;
  for (const auto &r : reports) {
    if (r.degenerate_weighting) ++degenerate;
  }
  if (degenerate > 0 && !f.raw_likelihood) {
    std::fprintf(stderr,
                 "note: %d bag(s) carried no class-informative mass and fell "
                 "back to unweighted scores\n",
                 degenerate);
  }
  std::printf("wrote patch scores for %zu bags to %s\n", bags.size(),
              f.out.c_str());
}

struct OodFlags {
  std::string model;
  std::string in_data;
  std::string in_labels;
  std::string ood_data;
  std::string ood_labels;
  std::string out = "ood_report.csv";
};

void run_ood(const OodFlags &f) {
  const TrainedModel model = load_model(f.model);
  const std::vector<Bag> in_dist = load_bags(f.in_data, f.in_labels, false);
  const std::vector<Bag> ood = load_bags(f.ood_data, f.ood_labels, false);
  const auto rows = run_ood_experiment(in_dist, ood, model);

  std::string csv = "measure,auroc,aupr\n";
  for (const OodResultRow &row : rows) {
    csv += row.measure + ',' + fmt17(row.auroc) + ',' + fmt17(row.aupr) + '\n';
  }
  write_text(f.out, csv);
  for (const OodResultRow &row : rows) {
    std::printf("%-22s auroc %.4f  aupr %.4f\n", row.measure.c_str(),
                row.auroc, row.aupr);
  }
}

void run_eval(const PredictFlags &f) {
  const TrainedModel model = load_model(f.model);
  const std::vector<Bag> bags = load_bags(f.data, f.labels, true);
  for (const Bag &bag : bags) {
    if (bag.label >= model.n_classes) {
      throw DatasetError("bag '" + bag.bag_id + "' has label " +
                         std::to_string(bag.label) + " but the model knows " +
                         std::to_string(model.n_classes) + " classes");
    }
  }

  const auto preds = predict_all(bags, model);
  std::vector<int> predicted(bags.size());
  std::vector<int> truth(bags.size());
  for (std::size_t i = 0; i < bags.size(); ++i) {
    predicted[i] = preds[i].first;
    truth[i] = bags[i].label;
  }

  std::string csv = "metric,value\n";
  const double acc = accuracy(predicted, truth);
  const double f1 = macro_f1(predicted, truth, model.n_classes);
  csv += "accuracy," + fmt17(acc) + '\n';
  csv += "macro_f1," + fmt17(f1) + '\n';
  std::printf("accuracy  %.4f\nmacro_f1  %.4f\n", acc, f1);
  if (model.n_classes == 2) {
    std::vector<double> scores(bags.size());
    for (std::size_t i = 0; i < bags.size(); ++i) {
      scores[i] = preds[i].second(1);
    }
    const double roc = auroc(scores, truth);
    const double pr = aupr(scores, truth);
    csv += "auroc," + fmt17(roc) + '\n';
    csv += "aupr," + fmt17(pr) + '\n';
    std::printf("auroc     %.4f\naupr      %.4f\n", roc, pr);
  }
  csv += "n_bags," + std::to_string(bags.size()) + '\n';
  write_text(f.out, csv);
}

void run_crossval(const TrainFlags &f) {
  const std::vector<Bag> bags = load_bags(f.data, f.labels, true);
  int n_classes = 0;
  for (const Bag &bag : bags) n_classes = std::max(n_classes, bag.label + 1);

  const FoldSplit split = kfold_split(bags, f.folds, f.seed);
  std::string csv = "fold,n_bags,accuracy,macro_f1\n";
  double acc_sum = 0.0;
  double f1_sum = 0.0;
  for (int fold = 0; fold < f.folds; ++fold) {
    std::vector<Bag> train_bags;
    std::vector<Bag> held_out;
    for (const Bag &bag : bags) {
      if (split.fold_of.at(bag.bag_id) == fold) {
        held_out.push_back(bag);
      } else {
        train_bags.push_back(bag);
      }
    }
    const TrainedModel model = train(train_bags, pipeline_config(f));
    const auto preds = predict_all(held_out, model);
    std::vector<int> predicted(held_out.size());
    std::vector<int> truth(held_out.size());
    for (std::size_t i = 0; i < held_out.size(); ++i) {
      predicted[i] = preds[i].first;
      truth[i] = held_out[i].label;
    }
    const double acc = accuracy(predicted, truth);
    const double f1 = macro_f1(predicted, truth, n_classes);
    acc_sum += acc;
    f1_sum += f1;
    csv += std::to_string(fold) + ',' + std::to_string(held_out.size()) + ',' +
           fmt17(acc) + ',' + fmt17(f1) + '\n';
    std::printf("fold %d: %zu bags, accuracy %.4f, macro_f1 %.4f\n", fold,
                held_out.size(), acc, f1);
  }
  const double folds = static_cast<double>(f.folds);
  csv += "mean,," + fmt17(acc_sum / folds) + ',' + fmt17(f1_sum / folds) +
         '\n';
  std::printf("mean: accuracy %.4f, macro_f1 %.4f\n", acc_sum / folds,
              f1_sum / folds);
  write_text(f.out, csv);
}

void add_train_flags(CLI::App *sub, TrainFlags &f) {
  sub->add_option("--data", f.data, "Directory of .fbag feature files")
      ->required();
  sub->add_option("--labels", f.labels,
                  "Label table (default: <data>/labels.tsv)");
  sub->add_option("--T", f.truncation, "Within-bag component budget");
  sub->add_option("--K", f.clusters,
                  "Bag-level cluster count (0 = class count)");
  sub->add_option("--eta1", f.eta1, "Within-bag concentration");
  sub->add_option("--eta2", f.eta2, "Bag-level concentration");
  sub->add_option("--epochs", f.epochs, "Training epochs");
  sub->add_option("--patience", f.patience, "Early-stop plateau length");
  sub->add_option("--seed", f.seed, "Random seed");
  sub->add_option("--lr", f.lr, "Encoder learning rate (0 = default)");
  sub->add_option("--max-iters", f.max_iters,
                  "Coordinate ascent iteration cap (0 = default)");
  sub->add_option("--hidden", f.hidden,
                  "Encoder hidden width (0 = twice the input)");
  sub->add_option("--proj-dim", f.proj_dim, "Projected feature dimension");
  sub->add_option("--proj-threshold", f.proj_threshold,
                  "Project features wider than this");
  sub->add_flag("--cache-aggregation", f.cache_aggregation,
                "Reuse first-epoch centroids in later epochs");
}

}  // namespace

int run_cli(int argc, char **argv) {
  CLI::App app{"Cascaded nonparametric multiple-instance learning", "cdpmil"};
  app.set_config("--config", "", "Read options from a key = value file");
  app.require_subcommand(1);

  SynthFlags synth;
  auto *synth_cmd =
      app.add_subcommand("synth", "Generate a synthetic benchmark dataset");
  synth_cmd->add_option("--out", synth.out, "Output directory")->required();
  synth_cmd->add_option("--seed", synth.config.seed, "Random seed");
  synth_cmd->add_option("--bags", synth.config.n_bags, "Total bag count");
  synth_cmd->add_option("--dim", synth.config.dim, "Feature dimension");
  synth_cmd->add_option("--classes", synth.config.n_classes, "Class count");
  synth_cmd->add_option("--min-instances", synth.config.min_instances,
                        "Smallest bag size");
  synth_cmd->add_option("--max-instances", synth.config.max_instances,
                        "Largest bag size");
  synth_cmd->add_option("--tumor-min", synth.config.tumor_fraction_min,
                        "Lower lesion fraction for positive bags");
  synth_cmd->add_option("--tumor-max", synth.config.tumor_fraction_max,
                        "Upper lesion fraction for positive bags");
  synth_cmd->add_option("--separation", synth.config.separation,
                        "Lesion mode distance in noise units");
  synth_cmd->add_option("--modes", synth.config.tumor_modes,
                        "Lesion modes per positive class");
  synth_cmd->add_option("--test-fraction", synth.config.test_fraction,
                        "Held-out fraction per class");
  synth_cmd->callback([&] { run_synth(synth); });

  TrainFlags train_flags;
  auto *train_cmd = app.add_subcommand("train", "Fit a model to labeled bags");
  add_train_flags(train_cmd, train_flags);
  train_cmd->add_option("--out", train_flags.out, "Model output path");
  train_cmd->add_option("--elbo-trace", train_flags.elbo_trace,
                        "Write the bag-level ELBO trace to this CSV");
  train_cmd->callback([&] { run_train(train_flags); });

  PredictFlags predict_flags;
  auto *predict_cmd =
      app.add_subcommand("predict", "Predict bag classes with a saved model");
  predict_cmd->add_option("--model", predict_flags.model, "Model file")
      ->required();
  predict_cmd->add_option("--data", predict_flags.data, "Feature directory")
      ->required();
  predict_cmd->add_option("--labels", predict_flags.labels,
                          "Optional label table");
  predict_cmd->add_option("--out", predict_flags.out, "Predictions CSV");
  predict_cmd->callback([&] { run_predict(predict_flags); });

  PredictFlags score_flags;
  score_flags.out = "patch_scores.csv";
  auto *score_cmd = app.add_subcommand(
      "score-patches", "Score every instance for lesion evidence");
  score_cmd->add_option("--model", score_flags.model, "Model file")
      ->required();
  score_cmd->add_option("--data", score_flags.data, "Feature directory")
      ->required();
  score_cmd->add_option("--labels", score_flags.labels,
                        "Optional label table");
  score_cmd->add_option("--out", score_flags.out, "Score CSV");
  score_cmd->add_flag("--raw-likelihood", score_flags.raw_likelihood,
                      "Skip class weighting and report plain likelihoods");
  score_cmd->callback([&] { run_score_patches(score_flags); });

  OodFlags ood_flags;
  auto *ood_cmd = app.add_subcommand(
      "ood", "Compare uncertainty measures on in- and out-of-distribution "
             "data");
  ood_cmd->add_option("--model", ood_flags.model, "Model file")->required();
  ood_cmd->add_option("--in-data", ood_flags.in_data,
                      "In-distribution feature directory")
      ->required();
  ood_cmd->add_option("--in-labels", ood_flags.in_labels,
                      "Optional in-distribution labels");
  ood_cmd->add_option("--ood-data", ood_flags.ood_data,
                      "Out-of-distribution feature directory")
      ->required();
  ood_cmd->add_option("--ood-labels", ood_flags.ood_labels,
                      "Optional out-of-distribution labels");
  ood_cmd->add_option("--out", ood_flags.out, "Report CSV");
  ood_cmd->callback([&] { run_ood(ood_flags); });

  PredictFlags eval_flags;
  eval_flags.out = "metrics.csv";
  auto *eval_cmd =
      app.add_subcommand("eval", "Score predictions against labels");
  eval_cmd->add_option("--model", eval_flags.model, "Model file")->required();
  eval_cmd->add_option("--data", eval_flags.data, "Feature directory")
      ->required();
  eval_cmd->add_option("--labels", eval_flags.labels,
                       "Label table (default: <data>/labels.tsv)");
  eval_cmd->add_option("--out", eval_flags.out, "Metrics CSV");
  eval_cmd->callback([&] { run_eval(eval_flags); });

  TrainFlags cv_flags;
  cv_flags.out = "crossval.csv";
  auto *cv_cmd = app.add_subcommand(
      "crossval", "Stratified k-fold cross-validation");
  add_train_flags(cv_cmd, cv_flags);
  cv_cmd->add_option("--folds", cv_flags.folds, "Fold count");
  cv_cmd->add_option("--out", cv_flags.out, "Per-fold metrics CSV");
  cv_cmd->callback([&] { run_crossval(cv_flags); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  return 0;
}

int main(int argc, char **argv) {
  try {
    return run_cli(argc, argv);
  } catch (const ConfigError &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const DomainError &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (...) {
    std::cerr << "error: unknown failure\n";
    return 2;
  }
}
