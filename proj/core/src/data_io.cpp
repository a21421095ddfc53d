#include "cdpmil/data_io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_set>

#include "cdpmil/errors.hpp"

namespace fs = std::filesystem;

namespace cdpmil {

namespace {

std::string read_file(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw DatasetError("failed reading " + path);
  return std::move(buf).str();
}

void write_file(const std::string &path, const std::string &data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetError("cannot open " + path + " for writing");
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  out.flush();
  if (!out.good()) throw DatasetError("failed writing " + path);
}

// Little-endian primitives, independent of host byte order.
void put_u8(std::string &out, std::uint8_t v) {
  out.push_back(static_cast<char>(v));
}

void put_u32(std::string &out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) {
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
}

void put_u64(std::string &out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
}

void put_f32(std::string &out, float v) {
  put_u32(out, std::bit_cast<std::uint32_t>(v));
}

void put_f64(std::string &out, double v) {
  put_u64(out, std::bit_cast<std::uint64_t>(v));
}

// Bounds-checked cursor over a loaded file.
class ByteReader {
 public:
  ByteReader(const std::string &data, std::string path)
      : data_(data), path_(std::move(path)) {}

  void require(std::size_t count, const char *what) const {
    if (count > data_.size() - pos_) {
      throw FormatError(path_ + ": truncated file, " + what + " needs " +
                        std::to_string(pos_ + count) +
                        " bytes but the file has " +
                        std::to_string(data_.size()));
    }
  }

  std::uint8_t take_u8(const char *what) {
    require(1, what);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }

  std::uint32_t take_u32(const char *what) {
    require(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(
               static_cast<std::uint8_t>(data_[pos_ + i]))
           << (8 * i);
    }
    pos_ += 4;
    return v;
  }

  std::uint64_t take_u64(const char *what) {
    require(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(
               static_cast<std::uint8_t>(data_[pos_ + i]))
           << (8 * i);
    }
    pos_ += 8;
    return v;
  }

  float take_f32(const char *what) {
    return std::bit_cast<float>(take_u32(what));
  }

  std::string take_bytes(std::size_t count, const char *what) {
    require(count, what);
    std::string out = data_.substr(pos_, count);
    pos_ += count;
    return out;
  }

  [[nodiscard]] bool at_end() const { return pos_ == data_.size(); }
  [[nodiscard]] std::size_t remaining() const { return data_.size() - pos_; }
  [[nodiscard]] std::size_t size() const { return data_.size(); }
  [[nodiscard]] const std::string &path() const { return path_; }

 private:
  const std::string &data_;
  std::string path_;
  std::size_t pos_ = 0;
};

std::string printable_tag(const std::string &tag) {
  std::string out = tag;
  for (char &c : out) {
    if (c < 0x20 || c > 0x7e) c = '?';
  }
  return out;
}

// Strict nonnegative integer parse; the whole field must be digits.
int parse_int_field(const std::string &text, const std::string &context) {
  int value = 0;
  const char *first = text.data();
  const char *last = first + text.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (text.empty() || ec != std::errc{} || ptr != last || value < 0) {
    throw FormatError(context + ": expected a nonnegative integer, got '" +
                      text + "'");
  }
  return value;
}

void append_matrix(std::string &out, const Eigen::MatrixXd &m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) put_f64(out, m(i, j));
  }
}

void append_vector(std::string &out, const Eigen::VectorXd &v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) put_f64(out, v(i));
}

void push_seed(std::vector<double> &h, std::uint64_t seed) {
  h.push_back(static_cast<double>(seed >> 32));
  h.push_back(static_cast<double>(seed & 0xffffffffULL));
}

void push_fit(std::vector<double> &h, const FitConfig &f) {
  h.push_back(static_cast<double>(f.max_iters));
  h.push_back(f.rel_tol);
  h.push_back(f.learning_rate);
  h.push_back(f.grad_clip);
  h.push_back(static_cast<double>(f.inner_grad_steps));
  push_seed(h, f.seed);
  h.push_back(f.init_noise);
  h.push_back(f.label_smoothing);
}

// HYPR section layout; bump the format version if this ever changes.
constexpr std::size_t kHyperCount = 36;

}  // namespace

void save_bag_features(const Bag &bag, const std::string &path) {
  const Eigen::Index n = bag.features.rows();
  const Eigen::Index p = bag.features.cols();
  if (n < 1 || p < 1) {
    throw ShapeError("bag '" + bag.bag_id + "' has no instances to save");
  }
  if (!bag.features.allFinite()) {
    throw DomainError("bag '" + bag.bag_id + "' has non-finite features");
  }
  if (!bag.coords.empty() &&
      bag.coords.size() != static_cast<std::size_t>(n)) {
    throw ShapeError("bag '" + bag.bag_id + "' has " +
                     std::to_string(bag.coords.size()) + " coordinates for " +
                     std::to_string(n) + " instances");
  }

  std::string out;
  out.reserve(17 + static_cast<std::size_t>(n) * p * 4 +
              bag.coords.size() * 8);
  out.append("FBAG", 4);
  put_u32(out, 1u);
  put_u32(out, static_cast<std::uint32_t>(n));
  put_u32(out, static_cast<std::uint32_t>(p));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < p; ++j) {
      put_f32(out, static_cast<float>(bag.features(i, j)));
    }
  }
  if (bag.coords.empty()) {
    put_u8(out, 0);
  } else {
    put_u8(out, 1);
    for (const auto &[row, col] : bag.coords) {
      put_u32(out, row);
      put_u32(out, col);
    }
  }
  write_file(path, out);
}

Bag load_bag_features(const std::string &path, const std::string &bag_id) {
  const std::string data = read_file(path);
  ByteReader r(data, path);
  if (r.take_bytes(4, "magic") != "FBAG") {
    throw FormatError(path + ": bad magic, expected a bag feature file");
  }
  const std::uint32_t version = r.take_u32("version");
  if (version != 1) {
    throw FormatError(path + ": feature file version " +
                      std::to_string(version) +
                      " is not supported, this build reads version 1");
  }
  const std::uint32_t n = r.take_u32("instance count");
  const std::uint32_t p = r.take_u32("feature dimension");
  if (n == 0) throw FormatError(path + ": feature file declares no instances");
  if (p == 0) {
    throw FormatError(path + ": feature file declares zero-width features");
  }

  Bag bag;
  bag.bag_id = bag_id;
  r.require(static_cast<std::size_t>(n) * p * 4, "feature values");
  bag.features.resize(n, p);
  for (std::uint32_t i = 0; i < n; ++i) {
    for (std::uint32_t j = 0; j < p; ++j) {
      const double v = static_cast<double>(r.take_f32("feature values"));
      if (!std::isfinite(v)) {
        throw FormatError(path + ": non-finite feature at row " +
                          std::to_string(i) + ", column " + std::to_string(j));
      }
      bag.features(i, j) = v;
    }
  }

  // Older writers stopped right after the features; that is still valid.
  if (!r.at_end()) {
    const std::uint8_t flag = r.take_u8("coordinate flag");
    if (flag > 1) {
      throw FormatError(path + ": coordinate flag must be 0 or 1, found " +
                        std::to_string(flag));
    }
    if (flag == 1) {
      bag.coords.reserve(n);
      for (std::uint32_t i = 0; i < n; ++i) {
        const std::uint32_t row = r.take_u32("coordinates");
        const std::uint32_t col = r.take_u32("coordinates");
        bag.coords.emplace_back(row, col);
      }
    }
    if (!r.at_end()) {
      throw FormatError(path + ": " + std::to_string(r.remaining()) +
                        " trailing bytes after the payload");
    }
  }
  return bag;
}

void save_label_table(const std::vector<Bag> &bags, const std::string &path) {
  std::string out = "# bag_id\tlabel\n";
  for (const Bag &bag : bags) {
    if (bag.label < 0) {
      throw DatasetError("bag '" + bag.bag_id +
                         "' has no label, cannot write a label table");
    }
    out += bag.bag_id;
    out += '\t';
    out += std::to_string(bag.label);
    out += '\n';
  }
  write_file(path, out);
}

std::vector<std::pair<std::string, int>> load_label_table(
    const std::string &path) {
  const std::string text = read_file(path);
  std::vector<std::pair<std::string, int>> rows;
  std::unordered_set<std::string> seen;

  std::size_t pos = 0;
  int line_no = 0;
  while (pos <= text.size()) {
    if (pos == text.size()) break;
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;

    const std::string context = path + " line " + std::to_string(line_no);
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos) {
      throw FormatError(context + ": expected '<bag_id><TAB><label>'");
    }
    std::string id = line.substr(0, tab);
    if (id.empty()) throw FormatError(context + ": empty bag id");
    const int label = parse_int_field(line.substr(tab + 1), context);
    if (!seen.insert(id).second) {
      throw DatasetError(path + ": duplicate bag id '" + id + "'");
    }
    rows.emplace_back(std::move(id), label);
  }
  if (rows.empty()) throw DatasetError(path + ": label table has no records");
  return rows;
}

std::vector<Bag> load_dataset(const std::string &dir,
                              const std::string &labels_path) {
  const auto table = load_label_table(labels_path);
  const fs::path base(dir);

  std::string missing;
  for (const auto &[id, label] : table) {
    if (!fs::exists(base / (id + ".fbag"))) {
      if (!missing.empty()) missing += ", ";
      missing += id;
    }
  }
  if (!missing.empty()) {
    throw DatasetError("missing feature files for bag ids: " + missing);
  }

  std::vector<Bag> bags;
  bags.reserve(table.size());
  for (const auto &[id, label] : table) {
    Bag bag = load_bag_features((base / (id + ".fbag")).string(), id);
    bag.label = label;
    if (!bags.empty() && bag.features.cols() != bags.front().features.cols()) {
      throw DatasetError("bag '" + id + "' has feature dimension " +
                         std::to_string(bag.features.cols()) + " but bag '" +
                         bags.front().bag_id + "' has " +
                         std::to_string(bags.front().features.cols()));
    }
    bags.push_back(std::move(bag));
  }
  return bags;
}

std::vector<Bag> load_feature_directory(const std::string &dir) {
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) {
    throw DatasetError("'" + dir + "' is not a directory");
  }
  std::vector<std::string> ids;
  for (const auto &entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".fbag") {
      ids.push_back(entry.path().stem().string());
    }
  }
  if (ids.empty()) {
    throw DatasetError("no .fbag files found in '" + dir + "'");
  }
  std::sort(ids.begin(), ids.end());

  std::vector<Bag> bags;
  bags.reserve(ids.size());
  for (const std::string &id : ids) {
    Bag bag = load_bag_features((fs::path(dir) / (id + ".fbag")).string(), id);
    if (!bags.empty() && bag.features.cols() != bags.front().features.cols()) {
      throw DatasetError("bag '" + id + "' has feature dimension " +
                         std::to_string(bag.features.cols()) + " but bag '" +
                         bags.front().bag_id + "' has " +
                         std::to_string(bags.front().features.cols()));
    }
    bags.push_back(std::move(bag));
  }
  return bags;
}

void save_dataset(const std::vector<Bag> &bags, const std::string &dir) {
  if (bags.empty()) throw DatasetError("refusing to save an empty dataset");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) {
    throw DatasetError("cannot create directory '" + dir +
                       "': " + ec.message());
  }
  for (const Bag &bag : bags) {
    save_bag_features(bag, (fs::path(dir) / (bag.bag_id + ".fbag")).string());
  }
  save_label_table(bags, (fs::path(dir) / "labels.tsv").string());
}

void save_instance_labels(
    const std::unordered_map<std::string, std::vector<int>> &labels,
    const std::string &path) {
  std::vector<std::string> ids;
  ids.reserve(labels.size());
  for (const auto &[id, values] : labels) ids.push_back(id);
  std::sort(ids.begin(), ids.end());

  std::string out = "# bag_id\tinstance\tlabel\n";
  for (const std::string &id : ids) {
    const std::vector<int> &values = labels.at(id);
    for (std::size_t i = 0; i < values.size(); ++i) {
      out += id;
      out += '\t';
      out += std::to_string(i);
      out += '\t';
      out += std::to_string(values[i]);
      out += '\n';
    }
  }
  write_file(path, out);
}

std::unordered_map<std::string, std::vector<int>> load_instance_labels(
    const std::string &path) {
  const std::string text = read_file(path);
  std::unordered_map<std::string, std::vector<int>> out;

  std::size_t pos = 0;
  int line_no = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;

    const std::string context = path + " line " + std::to_string(line_no);
    const std::size_t tab1 = line.find('\t');
    const std::size_t tab2 =
        tab1 == std::string::npos ? std::string::npos
                                  : line.find('\t', tab1 + 1);
    if (tab1 == std::string::npos || tab2 == std::string::npos) {
      throw FormatError(context +
                        ": expected '<bag_id><TAB><instance><TAB><label>'");
    }
    const std::string id = line.substr(0, tab1);
    if (id.empty()) throw FormatError(context + ": empty bag id");
    const int index =
        parse_int_field(line.substr(tab1 + 1, tab2 - tab1 - 1), context);
    const int label = parse_int_field(line.substr(tab2 + 1), context);

    std::vector<int> &values = out[id];
    if (index >= static_cast<int>(values.size())) {
      values.resize(static_cast<std::size_t>(index) + 1, -1);
    }
    if (values[static_cast<std::size_t>(index)] != -1) {
      throw DatasetError(path + ": duplicate entry for bag '" + id +
                         "' instance " + std::to_string(index));
    }
    values[static_cast<std::size_t>(index)] = label;
  }

  for (const auto &[id, values] : out) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (values[i] == -1) {
        throw DatasetError(path + ": bag '" + id +
                           "' is missing a label for instance " +
                           std::to_string(i));
      }
    }
  }
  if (out.empty()) throw DatasetError(path + ": no instance labels found");
  return out;
}

SynthData generate_synthetic(const SynthConfig &config) {
  if (config.n_bags < 1) throw ConfigError("n_bags must be positive");
  if (config.min_instances < 1) {
    throw ConfigError("min_instances must be positive");
  }
  if (config.max_instances < config.min_instances) {
    throw ConfigError("max_instances must be at least min_instances");
  }
  if (config.dim < 1) throw ConfigError("dim must be positive");
  if (config.n_classes < 2) throw ConfigError("n_classes must be at least 2");
  if (config.tumor_fraction_min < 0.0 || config.tumor_fraction_max > 1.0 ||
      config.tumor_fraction_max < config.tumor_fraction_min) {
    throw ConfigError("tumor fraction range must satisfy 0 <= min <= max <= 1");
  }
  if (config.separation < 0.0) throw ConfigError("separation must be >= 0");
  if (config.tumor_modes < 1) throw ConfigError("tumor_modes must be positive");
  if (config.test_fraction < 0.0 || config.test_fraction >= 1.0) {
    throw ConfigError("test_fraction must lie in [0, 1)");
  }

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_int_distribution<int> size_dist(config.min_instances,
                                               config.max_instances);
  std::uniform_real_distribution<double> frac_dist(config.tumor_fraction_min,
                                                   config.tumor_fraction_max);

  // Lesion mode centres: per positive class, unit directions scaled to the
  // configured separation so modes sit on a sphere around the background.
  const int p = config.dim;
  std::vector<std::vector<Eigen::VectorXd>> modes(
      static_cast<std::size_t>(config.n_classes - 1));
  for (int c = 1; c < config.n_classes; ++c) {
    for (int m = 0; m < config.tumor_modes; ++m) {
      Eigen::VectorXd v(p);
      for (int j = 0; j < p; ++j) v(j) = gauss(rng);
      double norm = v.norm();
      if (norm < 1e-12) {
        v.setZero();
        v(0) = 1.0;
        norm = 1.0;
      }
      modes[static_cast<std::size_t>(c - 1)].push_back(config.separation * v /
                                                       norm);
    }
  }

  std::vector<Bag> all;
  all.reserve(static_cast<std::size_t>(config.n_bags));
  SynthData out;
  for (int b = 0; b < config.n_bags; ++b) {
    const int label = b % config.n_classes;
    const int n = size_dist(rng);

    int n_tumor = 0;
    if (label > 0) {
      const double f = frac_dist(rng);
      if (f > 0.0) {
        // Small bags still visit every mode; the fraction drives big bags.
        const long target = std::lround(f * n);
        n_tumor = static_cast<int>(std::min<long>(
            n, std::max<long>(config.tumor_modes, target)));
      }
    }

    Bag bag;
    char name[32];
    std::snprintf(name, sizeof(name), "bag_%04d", b);
    bag.bag_id = name;
    bag.label = label;
    bag.features.resize(n, p);
    std::vector<int> truth(static_cast<std::size_t>(n), 0);
    for (int i = 0; i < n; ++i) {
      const Eigen::VectorXd *centre = nullptr;
      if (i < n_tumor) {
        centre = &modes[static_cast<std::size_t>(label - 1)]
                       [static_cast<std::size_t>(i % config.tumor_modes)];
        truth[static_cast<std::size_t>(i)] = 1;
      }
      for (int j = 0; j < p; ++j) {
        double v = gauss(rng);
        if (centre != nullptr) v += (*centre)(j);
        // Round through float so files reproduce memory bit for bit.
        bag.features(i, j) = static_cast<double>(static_cast<float>(v));
      }
    }

    // Shuffle instance order so lesions are not clumped at the front.
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Eigen::MatrixXd shuffled(n, p);
    std::vector<int> shuffled_truth(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      shuffled.row(i) = bag.features.row(perm[static_cast<std::size_t>(i)]);
      shuffled_truth[static_cast<std::size_t>(i)] =
          truth[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    }
    bag.features = std::move(shuffled);

    const int w =
        static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
    bag.coords.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      bag.coords.emplace_back(static_cast<std::uint32_t>(i / w),
                              static_cast<std::uint32_t>(i % w));
    }

    out.instance_truth[bag.bag_id] = std::move(shuffled_truth);
    all.push_back(std::move(bag));
  }

  // Stratified split, deterministic for a given seed.
  std::map<int, std::vector<int>> by_class;
  for (int b = 0; b < config.n_bags; ++b) by_class[all[b].label].push_back(b);
  std::vector<char> is_test(static_cast<std::size_t>(config.n_bags), 0);
  for (auto &[label, idxs] : by_class) {
    std::shuffle(idxs.begin(), idxs.end(), rng);
    const long n_test =
        std::lround(config.test_fraction * static_cast<double>(idxs.size()));
    for (long i = 0; i < n_test; ++i) {
      is_test[static_cast<std::size_t>(idxs[static_cast<std::size_t>(i)])] = 1;
    }
  }
  for (int b = 0; b < config.n_bags; ++b) {
    auto &dest = is_test[static_cast<std::size_t>(b)] ? out.test : out.train;
    dest.push_back(std::move(all[static_cast<std::size_t>(b)]));
  }
  if (out.train.empty()) {
    throw ConfigError("test_fraction leaves no training bags");
  }
  return out;
}

void save_model(const TrainedModel &model, const std::string &path) {
  const int K = static_cast<int>(model.slide.encoders.size());
  if (K == 0 || static_cast<int>(model.cluster_to_class.size()) != K ||
      model.n_classes < 2) {
    throw ConfigError("model is untrained, nothing to save");
  }
  if (model.slide.sticks.truncation() != K ||
      model.slide.sticks.gamma2.size() != K) {
    throw ShapeError("model stick posterior does not match " +
                     std::to_string(K) + " components");
  }
  const int p = model.feature_dim;
  for (const EncoderParams &enc : model.slide.encoders) {
    if (enc.input_dim() != p) {
      throw ShapeError("model encoder input dimension " +
                       std::to_string(enc.input_dim()) +
                       " does not match feature dimension " +
                       std::to_string(p));
    }
  }
  const int hidden = model.slide.encoders.front().hidden_dim();

  std::vector<double> h;
  h.reserve(kHyperCount);
  h.push_back(static_cast<double>(model.input_dim));
  h.push_back(static_cast<double>(model.feature_dim));
  h.push_back(static_cast<double>(model.n_classes));
  h.push_back(static_cast<double>(K));
  h.push_back(static_cast<double>(hidden));
  h.push_back(static_cast<double>(model.config.patch_truncation));
  h.push_back(static_cast<double>(model.config.slide_truncation));
  h.push_back(model.config.patch_eta);
  h.push_back(model.config.slide_eta);
  h.push_back(static_cast<double>(model.config.epochs));
  h.push_back(static_cast<double>(model.config.patience));
  h.push_back(static_cast<double>(model.config.patch_hidden));
  h.push_back(static_cast<double>(model.config.slide_hidden));
  h.push_back(static_cast<double>(model.config.projection_threshold));
  h.push_back(static_cast<double>(model.config.projection_dim));
  h.push_back(model.config.cache_aggregation ? 1.0 : 0.0);
  push_seed(h, model.config.seed);
  push_fit(h, model.config.patch_fit);
  push_fit(h, model.config.slide_fit);
  if (h.size() != kHyperCount) {
    throw ShapeError("hyperparameter block has unexpected size");
  }

  std::string hypr;
  for (double v : h) put_f64(hypr, v);

  std::string proj;
  append_matrix(proj, model.projection);

  std::string stck;
  append_vector(stck, model.slide.sticks.gamma1);
  append_vector(stck, model.slide.sticks.gamma2);

  std::string cmap;
  for (int k = 0; k < K; ++k) {
    put_f64(cmap,
            static_cast<double>(model.cluster_to_class[
                static_cast<std::size_t>(k)]));
  }

  std::string encs;
  for (const EncoderParams &enc : model.slide.encoders) {
    append_matrix(encs, enc.w1);
    append_vector(encs, enc.b1);
    append_matrix(encs, enc.w2);
    append_vector(encs, enc.b2);
  }

  struct Entry {
    const char *tag;
    const std::string *payload;
  };
  std::vector<Entry> sections = {{"HYPR", &hypr}};
  if (!proj.empty()) sections.push_back({"PROJ", &proj});
  sections.push_back({"STCK", &stck});
  sections.push_back({"CMAP", &cmap});
  sections.push_back({"ENCS", &encs});

  std::string out;
  out.append("CDPM", 4);
  put_u32(out, 1u);
  put_u32(out, static_cast<std::uint32_t>(sections.size()));
  std::size_t offset = 4 + 4 + 4 + sections.size() * 20;
  for (const Entry &s : sections) {
    out.append(s.tag, 4);
    put_u64(out, offset);
    put_u64(out, s.payload->size());
    offset += s.payload->size();
  }
  for (const Entry &s : sections) out += *s.payload;
  write_file(path, out);
}

TrainedModel load_model(const std::string &path) {
  const std::string data = read_file(path);
  ByteReader r(data, path);
  if (r.take_bytes(4, "magic") != "CDPM") {
    throw FormatError(path + ": bad magic, expected a model file");
  }
  const std::uint32_t version = r.take_u32("format version");
  if (version != 1) {
    throw IncompatibilityError(path + ": model file has format version " +
                               std::to_string(version) +
                               " but this build supports version 1");
  }
  const std::uint32_t n_sections = r.take_u32("section count");
  if (n_sections == 0 || n_sections > 64) {
    throw FormatError(path + ": implausible section count " +
                      std::to_string(n_sections));
  }

  std::map<std::string, std::pair<std::size_t, std::size_t>> sections;
  for (std::uint32_t i = 0; i < n_sections; ++i) {
    const std::string tag = r.take_bytes(4, "section table");
    const std::uint64_t off = r.take_u64("section table");
    const std::uint64_t size = r.take_u64("section table");
    if (off > data.size() || size > data.size() - off) {
      throw FormatError(path + ": section " + printable_tag(tag) +
                        " extends past the end of the file");
    }
    if (!sections.emplace(tag, std::make_pair(off, size)).second) {
      throw FormatError(path + ": duplicate section " + printable_tag(tag));
    }
  }

  auto section_doubles = [&](const char *tag,
                             bool required) -> std::vector<double> {
    const auto it = sections.find(tag);
    if (it == sections.end()) {
      if (required) throw FormatError(path + ": missing section " +
                                      std::string(tag));
      return {};
    }
    const auto [off, size] = it->second;
    if (size % 8 != 0) {
      throw FormatError(path + ": section " + std::string(tag) +
                        " size is not a multiple of 8");
    }
    std::vector<double> values(size / 8);
    for (std::size_t i = 0; i < values.size(); ++i) {
      std::uint64_t bits = 0;
      std::memcpy(&bits, data.data() + off + i * 8, 8);
      values[i] = std::bit_cast<double>(bits);
    }
    return values;
  };
  auto expect_count = [&](const char *tag, const std::vector<double> &values,
                          std::size_t expected) {
    if (values.size() != expected) {
      throw FormatError(path + ": section " + std::string(tag) + " holds " +
                        std::to_string(values.size()) + " values but " +
                        std::to_string(expected) + " were expected");
    }
  };
  auto as_int = [&](double v, const char *name) -> long long {
    if (!std::isfinite(v) || v != std::floor(v) || std::abs(v) > 9e15) {
      throw FormatError(path + ": field " + std::string(name) +
                        " is not an integer");
    }
    return static_cast<long long>(v);
  };
  auto as_seed = [&](double hi, double lo, const char *name) -> std::uint64_t {
    const long long h = as_int(hi, name);
    const long long l = as_int(lo, name);
    if (h < 0 || h > 0xffffffffLL || l < 0 || l > 0xffffffffLL) {
      throw FormatError(path + ": field " + std::string(name) +
                        " is out of range");
    }
    return (static_cast<std::uint64_t>(h) << 32) |
           static_cast<std::uint64_t>(l);
  };

  const std::vector<double> h = section_doubles("HYPR", true);
  expect_count("HYPR", h, kHyperCount);

  TrainedModel model;
  model.input_dim = static_cast<int>(as_int(h[0], "input_dim"));
  model.feature_dim = static_cast<int>(as_int(h[1], "feature_dim"));
  model.n_classes = static_cast<int>(as_int(h[2], "n_classes"));
  const int K = static_cast<int>(as_int(h[3], "n_components"));
  const int hidden = static_cast<int>(as_int(h[4], "encoder_hidden"));
  model.config.patch_truncation =
      static_cast<int>(as_int(h[5], "patch_truncation"));
  model.config.slide_truncation =
      static_cast<int>(as_int(h[6], "slide_truncation"));
  model.config.patch_eta = h[7];
  model.config.slide_eta = h[8];
  model.config.epochs = static_cast<int>(as_int(h[9], "epochs"));
  model.config.patience = static_cast<int>(as_int(h[10], "patience"));
  model.config.patch_hidden = static_cast<int>(as_int(h[11], "patch_hidden"));
  model.config.slide_hidden = static_cast<int>(as_int(h[12], "slide_hidden"));
  model.config.projection_threshold =
      static_cast<int>(as_int(h[13], "projection_threshold"));
  model.config.projection_dim =
      static_cast<int>(as_int(h[14], "projection_dim"));
  model.config.cache_aggregation = as_int(h[15], "cache_aggregation") != 0;
  model.config.seed = as_seed(h[16], h[17], "seed");

  auto read_fit = [&](std::size_t base, const char *name) -> FitConfig {
    FitConfig f;
    f.max_iters = static_cast<int>(as_int(h[base + 0], name));
    f.rel_tol = h[base + 1];
    f.learning_rate = h[base + 2];
    f.grad_clip = h[base + 3];
    f.inner_grad_steps = static_cast<int>(as_int(h[base + 4], name));
    f.seed = as_seed(h[base + 5], h[base + 6], name);
    f.init_noise = h[base + 7];
    f.label_smoothing = h[base + 8];
    return f;
  };
  model.config.patch_fit = read_fit(18, "patch_fit");
  model.config.slide_fit = read_fit(27, "slide_fit");

  const int p = model.feature_dim;
  if (model.input_dim < 1 || p < 1 || model.n_classes < 2 || K < 1 ||
      hidden < 1 || model.config.patch_truncation < 1) {
    throw FormatError(path + ": hyperparameter block fails basic sanity");
  }
  if (!(model.config.patch_eta > 0.0) || !(model.config.slide_eta > 0.0) ||
      !std::isfinite(model.config.patch_eta) ||
      !std::isfinite(model.config.slide_eta)) {
    throw FormatError(path + ": concentrations must be positive and finite");
  }

  const std::vector<double> proj = section_doubles("PROJ", false);
  if (proj.empty()) {
    if (model.feature_dim != model.input_dim) {
      throw FormatError(path +
                        ": missing PROJ section for a projected model");
    }
  } else {
    expect_count("PROJ", proj,
                 static_cast<std::size_t>(p) *
                     static_cast<std::size_t>(model.input_dim));
    model.projection.resize(p, model.input_dim);
    for (int i = 0; i < p; ++i) {
      for (int j = 0; j < model.input_dim; ++j) {
        model.projection(i, j) =
            proj[static_cast<std::size_t>(i) * model.input_dim + j];
      }
    }
  }

  const std::vector<double> stck = section_doubles("STCK", true);
  expect_count("STCK", stck, 2 * static_cast<std::size_t>(K));
  model.slide.sticks.gamma1.resize(K);
  model.slide.sticks.gamma2.resize(K);
  for (int k = 0; k < K; ++k) {
    const double g1 = stck[static_cast<std::size_t>(k)];
    const double g2 = stck[static_cast<std::size_t>(K + k)];
    if (!(g1 > 0.0) || !(g2 > 0.0) || !std::isfinite(g1) ||
        !std::isfinite(g2)) {
      throw FormatError(path + ": stick parameters must be positive finite");
    }
    model.slide.sticks.gamma1(k) = g1;
    model.slide.sticks.gamma2(k) = g2;
  }
  model.slide.sticks.eta = model.config.slide_eta;
  model.slide.eta = model.config.slide_eta;

  const std::vector<double> cmap = section_doubles("CMAP", true);
  expect_count("CMAP", cmap, static_cast<std::size_t>(K));
  model.cluster_to_class.resize(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    const long long cls = as_int(cmap[static_cast<std::size_t>(k)], "CMAP");
    if (cls < 0 || cls >= model.n_classes) {
      throw FormatError(path + ": cluster " + std::to_string(k) +
                        " maps to class " + std::to_string(cls) +
                        " outside [0, " + std::to_string(model.n_classes) +
                        ")");
    }
    model.cluster_to_class[static_cast<std::size_t>(k)] =
        static_cast<int>(cls);
  }

  const std::vector<double> encs = section_doubles("ENCS", true);
  const std::size_t s =
      static_cast<std::size_t>(p) * (static_cast<std::size_t>(p) + 1) / 2;
  const std::size_t out_dim = static_cast<std::size_t>(p) + s;
  const std::size_t per_enc = static_cast<std::size_t>(hidden) * p + hidden +
                              out_dim * hidden + out_dim;
  expect_count("ENCS", encs, static_cast<std::size_t>(K) * per_enc);

  model.slide.encoders.reserve(static_cast<std::size_t>(K));
  std::size_t c = 0;
  for (int k = 0; k < K; ++k) {
    EncoderParams enc;
    enc.w1.resize(hidden, p);
    enc.b1.resize(hidden);
    enc.w2.resize(static_cast<Eigen::Index>(out_dim), hidden);
    enc.b2.resize(static_cast<Eigen::Index>(out_dim));
    for (int i = 0; i < hidden; ++i) {
      for (int j = 0; j < p; ++j) enc.w1(i, j) = encs[c++];
    }
    for (int i = 0; i < hidden; ++i) enc.b1(i) = encs[c++];
    for (std::size_t i = 0; i < out_dim; ++i) {
      for (int j = 0; j < hidden; ++j) {
        enc.w2(static_cast<Eigen::Index>(i), j) = encs[c++];
      }
    }
    for (std::size_t i = 0; i < out_dim; ++i) {
      enc.b2(static_cast<Eigen::Index>(i)) = encs[c++];
    }
    model.slide.encoders.push_back(std::move(enc));
  }

  model.slide.log_phi.resize(0, K);
  model.slide.prior = default_component_prior(p);
  return model;
}

}  // namespace cdpmil
