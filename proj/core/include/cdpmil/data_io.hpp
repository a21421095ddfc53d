#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cdpmil/cdp_pipeline.hpp"

namespace cdpmil {

// Bag feature files (.fbag) hold one instance matrix in binary form:
//   magic "FBAG", u32 version (currently 1), u32 n_instances, u32 dim,
//   n_instances * dim little-endian float32 values in row major order,
//   then an optional block: u8 flag, and if the flag is 1, n_instances
//   (row, col) pairs of u32 spatial coordinates.
// A file that ends right after the feature block is valid and simply
// carries no coordinates.
void save_bag_features(const Bag &bag, const std::string &path);
[[nodiscard]] Bag load_bag_features(const std::string &path,
                                    const std::string &bag_id);

// Label tables are TSV files with one "bag_id<TAB>label" row per bag.
// Blank lines and lines starting with '#' are skipped; trailing carriage
// returns are tolerated so Windows-edited files load unchanged.
void save_label_table(const std::vector<Bag> &bags, const std::string &path);
[[nodiscard]] std::vector<std::pair<std::string, int>>
load_label_table(const std::string &path);

// Loads <dir>/<bag_id>.fbag for every row of the label table and attaches
// the labels.  Bags come back in table order.
[[nodiscard]] std::vector<Bag> load_dataset(const std::string &dir,
                                            const std::string &labels_path);

// Loads every *.fbag file in a directory, sorted by bag id, with no labels
// attached.  Used for prediction on unlabeled data.
[[nodiscard]] std::vector<Bag> load_feature_directory(const std::string &dir);

// Writes one .fbag per bag plus a labels.tsv into the directory, creating
// it if needed.
void save_dataset(const std::vector<Bag> &bags, const std::string &dir);

// Per-instance ground truth, "bag_id<TAB>instance_index<TAB>label" rows.
void save_instance_labels(
    const std::unordered_map<std::string, std::vector<int>> &labels,
    const std::string &path);
[[nodiscard]] std::unordered_map<std::string, std::vector<int>>
load_instance_labels(const std::string &path);

struct SynthConfig {
  int n_bags = 200;
  int min_instances = 40;
  int max_instances = 120;
  int dim = 8;
  int n_classes = 2;
  // Fraction of a positive bag drawn from the lesion modes.
  double tumor_fraction_min = 0.05;
  double tumor_fraction_max = 0.30;
  // Distance from the origin to each lesion mode centre.
  double separation = 8.0;
  // Lesion modes per positive class, spread over random unit directions.
  int tumor_modes = 4;
  double test_fraction = 0.2;
  std::uint64_t seed = 7;
};

struct SynthData {
  std::vector<Bag> train;
  std::vector<Bag> test;
  // 1 where the instance was drawn from a lesion mode, 0 elsewhere,
  // keyed by bag id and aligned with the stored instance order.
  std::unordered_map<std::string, std::vector<int>> instance_truth;
};

// Benchmark generator.  Class 0 bags are pure background (standard normal
// around the origin); bags of class c >= 1 mix background with a small
// fraction of instances from that class's lesion modes.  Bags carry square
// grid coordinates and the output is split into stratified train and test
// sets.  Identical configs produce byte-identical datasets.
[[nodiscard]] SynthData generate_synthetic(const SynthConfig &config);

// Model files (.cdpm) start with magic "CDPM", u32 version, u32 section
// count, then a table of {tag[4], u64 offset, u64 size} entries.  Sections:
// HYPR (scalar hyperparameters), PROJ (projection matrix, optional), STCK
// (stick posteriors), CMAP (cluster to class map), ENCS (per-component
// encoder weights).  Loading an unknown version fails with an
// incompatibility error naming both versions.
void save_model(const TrainedModel &model, const std::string &path);
[[nodiscard]] TrainedModel load_model(const std::string &path);

}  // namespace cdpmil
