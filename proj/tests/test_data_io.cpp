#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "cdpmil/data_io.hpp"
#include "cdpmil/errors.hpp"
#include "doctest.h"
#include "test_helpers.hpp"

using namespace cdpmil;
namespace th = test_helpers;

namespace {

// Feature files store float32, so round-trippable features must already
// sit on the float grid.
Eigen::MatrixXd float_rounded(const Eigen::MatrixXd &x) {
  Eigen::MatrixXd out = x;
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    out.data()[i] = static_cast<double>(static_cast<float>(out.data()[i]));
  }
  return out;
}

Bag sample_bag(const std::string &id, int n, int dim, unsigned seed,
               bool with_coords) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  Bag b;
  b.bag_id = id;
  b.features = Eigen::MatrixXd(n, dim);
  for (int j = 0; j < n; ++j) {
    for (int d = 0; d < dim; ++d) b.features(j, d) = noise(rng);
  }
  b.features = float_rounded(b.features);
  if (with_coords) {
    for (int j = 0; j < n; ++j) {
      b.coords.emplace_back(static_cast<std::uint32_t>(j / 3),
                            static_cast<std::uint32_t>(j % 3));
    }
  }
  return b;
}

TrainedModel tiny_model(unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<Bag> bags;
  for (int c = 0; c < 2; ++c) {
    for (int i = 0; i < 4; ++i) {
      Eigen::MatrixXd x(14, 3);
      for (int j = 0; j < 14; ++j) {
        for (int d = 0; d < 3; ++d) x(j, d) = noise(rng);
        if (c == 1 && j < 5) x(j, 0) += 8.0;
      }
      Bag b;
      b.bag_id = "m" + std::to_string(c * 4 + i);
      b.features = x;
      b.label = c;
      bags.push_back(b);
    }
  }
  PipelineConfig cfg;
  cfg.patch_truncation = 4;
  cfg.epochs = 2;
  cfg.patch_fit.max_iters = 20;
  cfg.slide_fit.max_iters = 30;
  cfg.seed = 1234567890123456789ULL;  // exercises the wide-seed path
  return train(bags, cfg);
}

}  // namespace

TEST_CASE("feature files round-trip bitwise, coordinates included") {
  th::TempDir dir;
  const Bag original = sample_bag("bag_x", 9, 4, 261, true);
  const std::string path = dir.file("bag_x.fbag");
  save_bag_features(original, path);

  const Bag loaded = load_bag_features(path, "bag_x");
  CHECK(loaded.bag_id == "bag_x");
  CHECK(loaded.label == -1);
  CHECK(loaded.features == original.features);
  CHECK(loaded.coords == original.coords);

  // a second save of the loaded bag is byte-identical
  const std::string again = dir.file("again.fbag");
  save_bag_features(loaded, again);
  CHECK(th::read_file(path) == th::read_file(again));
}

TEST_CASE("feature files without coordinates round-trip") {
  th::TempDir dir;
  const Bag original = sample_bag("plain", 5, 2, 263, false);
  const std::string path = dir.file("plain.fbag");
  save_bag_features(original, path);
  const Bag loaded = load_bag_features(path, "plain");
  CHECK(loaded.features == original.features);
  CHECK(loaded.coords.empty());

  // the coordinate flag byte is optional on read: a file cut right after
  // the feature block still loads
  const std::string bytes = th::read_file(path);
  const std::string cut = bytes.substr(0, bytes.size() - 1);
  const std::string cut_path = dir.file("cut.fbag");
  th::write_file(cut_path, cut);
  const Bag from_cut = load_bag_features(cut_path, "plain");
  CHECK(from_cut.features == original.features);
  CHECK(from_cut.coords.empty());
}

TEST_CASE("feature file corruption is reported as a format error") {
  th::TempDir dir;
  const Bag bag = sample_bag("c", 4, 3, 269, true);
  const std::string path = dir.file("c.fbag");
  save_bag_features(bag, path);
  const std::string bytes = th::read_file(path);

  auto write_variant = [&](const std::string &content) {
    const std::string p = dir.file("variant.fbag");
    th::write_file(p, content);
    return p;
  };

  // wrong magic
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS((void)load_bag_features(write_variant(bad_magic), "c"),
                  FormatError);

  // unsupported version
  std::string bad_version = bytes;
  bad_version[4] = 2;
  CHECK_THROWS_AS((void)load_bag_features(write_variant(bad_version), "c"),
                  FormatError);

  // truncated inside the feature matrix
  const std::string truncated = bytes.substr(0, 16 + 7);
  CHECK_THROWS_WITH_AS(
      (void)load_bag_features(write_variant(truncated), "c"),
      doctest::Contains("truncated"), FormatError);

  // trailing garbage after a complete file
  CHECK_THROWS_AS((void)load_bag_features(write_variant(bytes + "zz"), "c"),
                  FormatError);

  // flag byte outside {0, 1}
  std::string bad_flag = bytes;
  bad_flag[16 + 4 * 3 * 4] = 7;
  CHECK_THROWS_AS((void)load_bag_features(write_variant(bad_flag), "c"),
                  FormatError);

  // zero instances or zero dimensions
  std::string zero_n = bytes;
  zero_n[8] = zero_n[9] = zero_n[10] = zero_n[11] = 0;
  CHECK_THROWS_AS((void)load_bag_features(write_variant(zero_n), "c"),
                  FormatError);

  CHECK_THROWS_AS((void)load_bag_features(dir.file("absent.fbag"), "c"),
                  DatasetError);
}

TEST_CASE("feature saving validates the bag") {
  th::TempDir dir;
  Bag empty;
  empty.bag_id = "e";
  empty.features = Eigen::MatrixXd(0, 3);
  CHECK_THROWS_AS(save_bag_features(empty, dir.file("e.fbag")), ShapeError);

  Bag nan_bag = sample_bag("n", 3, 2, 271, false);
  nan_bag.features(1, 1) = std::nan("");
  CHECK_THROWS_AS(save_bag_features(nan_bag, dir.file("n.fbag")),
                  DomainError);

  Bag short_coords = sample_bag("s", 4, 2, 277, true);
  short_coords.coords.pop_back();
  CHECK_THROWS_AS(save_bag_features(short_coords, dir.file("s.fbag")),
                  ShapeError);
}

TEST_CASE("label tables survive comments, blanks and CRLF") {
  th::TempDir dir;
  const std::string path = dir.file("labels.tsv");
  th::write_file(path,
                 "# bag_id\tlabel\r\n"
                 "\r\n"
                 "alpha\t0\r\n"
                 "beta\t2\n"
                 "\n"
                 "gamma\t1\n");
  const auto rows = load_label_table(path);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0] == std::make_pair(std::string("alpha"), 0));
  CHECK(rows[1] == std::make_pair(std::string("beta"), 2));
  CHECK(rows[2] == std::make_pair(std::string("gamma"), 1));

  // writer output loads back unchanged
  Bag a = sample_bag("alpha", 2, 2, 281, false);
  a.label = 0;
  Bag b = sample_bag("beta", 2, 2, 283, false);
  b.label = 2;
  const std::string out = dir.file("written.tsv");
  save_label_table({a, b}, out);
  const auto reread = load_label_table(out);
  REQUIRE(reread.size() == 2);
  CHECK(reread[0] == std::make_pair(std::string("alpha"), 0));
  CHECK(reread[1] == std::make_pair(std::string("beta"), 2));
}

TEST_CASE("label table rejects malformed content") {
  th::TempDir dir;
  const std::string path = dir.file("bad.tsv");

  th::write_file(path, "only_id_no_tab\n");
  CHECK_THROWS_AS((void)load_label_table(path), FormatError);

  th::write_file(path, "x\tnot_a_number\n");
  CHECK_THROWS_AS((void)load_label_table(path), FormatError);

  th::write_file(path, "x\t-3\n");
  CHECK_THROWS_AS((void)load_label_table(path), FormatError);

  th::write_file(path, "x\t1\nx\t0\n");
  CHECK_THROWS_AS((void)load_label_table(path), DatasetError);

  th::write_file(path, "# nothing but comments\n");
  CHECK_THROWS_AS((void)load_label_table(path), DatasetError);

  Bag unlabeled = sample_bag("u", 2, 2, 293, false);
  CHECK_THROWS_AS(save_label_table({unlabeled}, dir.file("u.tsv")),
                  DatasetError);
}

TEST_CASE("datasets round-trip through a directory") {
  th::TempDir dir;
  std::vector<Bag> bags;
  for (int i = 0; i < 4; ++i) {
    Bag b = sample_bag("bag_" + std::to_string(i), 6 + i, 3, 300 + i,
                       i % 2 == 0);
    b.label = i % 2;
    bags.push_back(b);
  }
  const std::string root = dir.file("data");
  save_dataset(bags, root);

  const std::vector<Bag> loaded =
      load_dataset(root, root + "/labels.tsv");
  REQUIRE(loaded.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(loaded[i].bag_id == bags[i].bag_id);
    CHECK(loaded[i].label == bags[i].label);
    CHECK(loaded[i].features == bags[i].features);
    CHECK(loaded[i].coords == bags[i].coords);
  }

  // unlabeled directory listing comes back sorted by id
  const std::vector<Bag> unlabeled = load_feature_directory(root);
  REQUIRE(unlabeled.size() == 4);
  CHECK(std::is_sorted(unlabeled.begin(), unlabeled.end(),
                       [](const Bag &l, const Bag &r) {
                         return l.bag_id < r.bag_id;
                       }));
  CHECK(unlabeled[0].label == -1);

  CHECK_THROWS_AS((void)load_feature_directory(dir.file("missing")),
                  DatasetError);
}

TEST_CASE("missing feature files are reported together") {
  th::TempDir dir;
  std::vector<Bag> bags;
  for (int i = 0; i < 3; ++i) {
    Bag b = sample_bag("bag_" + std::to_string(i), 4, 2, 310 + i, false);
    b.label = i % 2;
    bags.push_back(b);
  }
  const std::string root = dir.file("data");
  save_dataset(bags, root);
  std::remove((root + "/bag_0.fbag").c_str());
  std::remove((root + "/bag_2.fbag").c_str());

  CHECK_THROWS_WITH_AS((void)load_dataset(root, root + "/labels.tsv"),
                       doctest::Contains("bag_0, bag_2"), DatasetError);
}

TEST_CASE("mixed feature dimensions across a dataset are rejected") {
  th::TempDir dir;
  Bag a = sample_bag("a", 4, 2, 320, false);
  a.label = 0;
  Bag b = sample_bag("b", 4, 3, 321, false);
  b.label = 1;
  const std::string root = dir.file("data");
  save_dataset({a, b}, root);
  CHECK_THROWS_AS((void)load_dataset(root, root + "/labels.tsv"),
                  DatasetError);
}

TEST_CASE("instance label tables round-trip and validate") {
  th::TempDir dir;
  std::unordered_map<std::string, std::vector<int>> truth;
  truth["bag_b"] = {0, 1, 0};
  truth["bag_a"] = {1, 0};
  const std::string path = dir.file("instances.tsv");
  save_instance_labels(truth, path);
  CHECK(load_instance_labels(path) == truth);

  th::write_file(path, "b\t0\t1\nb\t0\t0\n");
  CHECK_THROWS_AS((void)load_instance_labels(path), DatasetError);

  // a hole in the instance indices
  th::write_file(path, "b\t0\t1\nb\t2\t0\n");
  CHECK_THROWS_AS((void)load_instance_labels(path), DatasetError);

  th::write_file(path, "b\t0\n");
  CHECK_THROWS_AS((void)load_instance_labels(path), FormatError);
}

TEST_CASE("synthetic generation is deterministic and splits 160/40") {
  SynthConfig cfg;  // defaults: 200 bags, 20% test
  const SynthData a = generate_synthetic(cfg);
  const SynthData b = generate_synthetic(cfg);

  CHECK(a.train.size() == 160);
  CHECK(a.test.size() == 40);
  REQUIRE(b.train.size() == 160);

  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].bag_id == b.train[i].bag_id);
    CHECK(a.train[i].label == b.train[i].label);
    CHECK(a.train[i].features == b.train[i].features);
    CHECK(a.train[i].coords == b.train[i].coords);
  }
  CHECK(a.instance_truth == b.instance_truth);

  SynthConfig other = cfg;
  other.seed = 8;
  const SynthData c = generate_synthetic(other);
  CHECK(c.train[0].features != a.train[0].features);

  // stratified: test split carries both classes at the overall ratio
  std::map<int, int> test_counts;
  for (const Bag &bag : a.test) ++test_counts[bag.label];
  CHECK(test_counts[0] == 20);
  CHECK(test_counts[1] == 20);

  // instance counts stay in the configured band, features sit on the
  // float grid, and every bag has grid coordinates
  for (const Bag &bag : a.train) {
    const int n = static_cast<int>(bag.features.rows());
    CHECK(n >= cfg.min_instances);
    CHECK(n <= cfg.max_instances);
    CHECK(bag.features == float_rounded(bag.features));
    REQUIRE(static_cast<int>(bag.coords.size()) == n);
    const std::uint32_t w = static_cast<std::uint32_t>(
        std::ceil(std::sqrt(static_cast<double>(n))));
    for (int j = 0; j < n; ++j) {
      CHECK(bag.coords[static_cast<std::size_t>(j)].first ==
            static_cast<std::uint32_t>(j) / w);
      CHECK(bag.coords[static_cast<std::size_t>(j)].second ==
            static_cast<std::uint32_t>(j) % w);
    }
    // truth rows align with the stored instance order
    const auto it = a.instance_truth.find(bag.bag_id);
    REQUIRE(it != a.instance_truth.end());
    CHECK(static_cast<int>(it->second.size()) == n);
  }
}

TEST_CASE("positive bags are separable from background by instance norm") {
  SynthConfig cfg;
  cfg.n_bags = 120;
  const SynthData data = generate_synthetic(cfg);

  // lesion modes sit at distance 8 from the origin while background is
  // standard normal, so thresholding the largest instance norm recovers
  // the bag label almost perfectly
  int correct = 0, total = 0;
  auto judge = [&](const std::vector<Bag> &bags) {
    for (const Bag &bag : bags) {
      double max_norm = 0.0;
      for (Eigen::Index j = 0; j < bag.features.rows(); ++j) {
        max_norm = std::max(max_norm, bag.features.row(j).norm());
      }
      const int guess = max_norm > 6.5 ? 1 : 0;
      if (guess == bag.label) ++correct;
      ++total;
    }
  };
  judge(data.train);
  judge(data.test);
  CHECK(total == 120);
  CHECK(static_cast<double>(correct) / total >= 0.99);

  // instance truth marks exactly the lesion draws: all flagged instances
  // in positive bags, none in negative bags
  for (const Bag &bag : data.train) {
    const std::vector<int> &truth = data.instance_truth.at(bag.bag_id);
    const int flagged =
        static_cast<int>(std::count(truth.begin(), truth.end(), 1));
    if (bag.label == 0) {
      CHECK(flagged == 0);
    } else {
      CHECK(flagged >= cfg.tumor_modes);
      const double f = static_cast<double>(flagged) /
                       static_cast<double>(truth.size());
      CHECK(f <= cfg.tumor_fraction_max + 0.05);
      // the single farthest instance must be a lesion draw
      Eigen::Index far = 0;
      for (Eigen::Index j = 1; j < bag.features.rows(); ++j) {
        if (bag.features.row(j).norm() > bag.features.row(far).norm()) {
          far = j;
        }
      }
      CHECK(truth[static_cast<std::size_t>(far)] == 1);
    }
  }
}

TEST_CASE("zero lesion fraction produces pure background for every class") {
  SynthConfig cfg;
  cfg.n_bags = 40;
  cfg.tumor_fraction_min = 0.0;
  cfg.tumor_fraction_max = 0.0;
  const SynthData data = generate_synthetic(cfg);
  for (const auto &[id, truth] : data.instance_truth) {
    CHECK(std::count(truth.begin(), truth.end(), 1) == 0);
  }
  // both classes now look statistically identical: no instance strays far
  for (const Bag &bag : data.train) {
    for (Eigen::Index j = 0; j < bag.features.rows(); ++j) {
      CHECK(bag.features.row(j).norm() < 7.0);
    }
  }
}

TEST_CASE("synthetic config is validated") {
  auto expect_config_error = [](SynthConfig cfg) {
    CHECK_THROWS_AS((void)generate_synthetic(cfg), ConfigError);
  };
  SynthConfig cfg;

  SynthConfig bad = cfg;
  bad.n_bags = 0;
  expect_config_error(bad);

  bad = cfg;
  bad.min_instances = 50;
  bad.max_instances = 40;
  expect_config_error(bad);

  bad = cfg;
  bad.dim = 0;
  expect_config_error(bad);

  bad = cfg;
  bad.n_classes = 1;
  expect_config_error(bad);

  bad = cfg;
  bad.tumor_fraction_min = 0.4;
  bad.tumor_fraction_max = 0.2;
  expect_config_error(bad);

  bad = cfg;
  bad.test_fraction = 1.0;
  expect_config_error(bad);

  bad = cfg;
  bad.tumor_modes = 0;
  expect_config_error(bad);
}

TEST_CASE("model files round-trip the full predict path") {
  th::TempDir dir;
  const TrainedModel model = tiny_model(331);
  const std::string path = dir.file("model.cdpm");
  save_model(model, path);

  const TrainedModel loaded = load_model(path);
  CHECK(loaded.input_dim == model.input_dim);
  CHECK(loaded.feature_dim == model.feature_dim);
  CHECK(loaded.n_classes == model.n_classes);
  CHECK(loaded.cluster_to_class == model.cluster_to_class);
  CHECK(loaded.config.seed == model.config.seed);
  CHECK(loaded.config.patch_truncation == model.config.patch_truncation);
  CHECK(loaded.config.patch_fit.max_iters == model.config.patch_fit.max_iters);
  CHECK(loaded.config.patch_fit.learning_rate ==
        model.config.patch_fit.learning_rate);
  CHECK(loaded.slide.sticks.gamma1 == model.slide.sticks.gamma1);
  CHECK(loaded.slide.sticks.gamma2 == model.slide.sticks.gamma2);
  CHECK(loaded.slide.eta == model.slide.eta);
  REQUIRE(loaded.slide.encoders.size() == model.slide.encoders.size());
  for (std::size_t t = 0; t < model.slide.encoders.size(); ++t) {
    CHECK(loaded.slide.encoders[t].w1 == model.slide.encoders[t].w1);
    CHECK(loaded.slide.encoders[t].b1 == model.slide.encoders[t].b1);
    CHECK(loaded.slide.encoders[t].w2 == model.slide.encoders[t].w2);
    CHECK(loaded.slide.encoders[t].b2 == model.slide.encoders[t].b2);
  }

  // identical predictions, bit for bit
  const Bag probe = sample_bag("probe", 10, 3, 337, false);
  const auto [c1, p1] = predict_bag(probe, model);
  const auto [c2, p2] = predict_bag(probe, loaded);
  CHECK(c1 == c2);
  CHECK(p1 == p2);

  // a save of the loaded model reproduces the file byte for byte
  const std::string second = dir.file("second.cdpm");
  save_model(loaded, second);
  CHECK(th::read_file(path) == th::read_file(second));
}

TEST_CASE("projected models reload with their projection") {
  th::TempDir dir;
  std::mt19937_64 rng(347);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<Bag> bags;
  for (int c = 0; c < 2; ++c) {
    for (int i = 0; i < 3; ++i) {
      Eigen::MatrixXd x(10, 70);
      for (int j = 0; j < 10; ++j) {
        for (int d = 0; d < 70; ++d) x(j, d) = noise(rng);
        if (c == 1 && j < 4) x(j, 0) += 9.0;
      }
      Bag b;
      b.bag_id = "p" + std::to_string(c * 3 + i);
      b.features = x;
      b.label = c;
      bags.push_back(b);
    }
  }
  PipelineConfig cfg;
  cfg.patch_truncation = 3;
  cfg.epochs = 2;
  cfg.patch_fit.max_iters = 15;
  cfg.slide_fit.max_iters = 20;
  cfg.projection_threshold = 64;
  cfg.projection_dim = 6;
  const TrainedModel model = train(bags, cfg);
  REQUIRE(model.projection.size() > 0);

  const std::string path = dir.file("wide.cdpm");
  save_model(model, path);
  const TrainedModel loaded = load_model(path);
  CHECK(loaded.projection == model.projection);
  const auto [c1, p1] = predict_bag(bags[0], model);
  const auto [c2, p2] = predict_bag(bags[0], loaded);
  CHECK(c1 == c2);
  CHECK(p1 == p2);
}

TEST_CASE("model file corruption and version drift are told apart") {
  th::TempDir dir;
  const TrainedModel model = tiny_model(353);
  const std::string path = dir.file("m.cdpm");
  save_model(model, path);
  const std::string bytes = th::read_file(path);

  auto variant = [&](const std::string &content) {
    const std::string p = dir.file("variant.cdpm");
    th::write_file(p, content);
    return p;
  };

  std::string bad_magic = bytes;
  bad_magic[0] = 'Z';
  CHECK_THROWS_AS((void)load_model(variant(bad_magic)), FormatError);

  // future version: incompatibility, naming both versions
  std::string future = bytes;
  future[4] = 2;
  CHECK_THROWS_WITH_AS((void)load_model(variant(future)),
                       doctest::Contains("2"), IncompatibilityError);

  CHECK_THROWS_AS((void)load_model(variant(bytes.substr(0, 40))),
                  FormatError);

  CHECK_THROWS_AS((void)load_model(dir.file("nope.cdpm")), DatasetError);

  TrainedModel blank;
  CHECK_THROWS_AS(save_model(blank, dir.file("blank.cdpm")), ConfigError);
}
