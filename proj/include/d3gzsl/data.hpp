#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <concepts>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "d3gzsl/error.hpp"
#include "d3gzsl/rng.hpp"
#include "d3gzsl/tensor.hpp"

namespace d3gzsl {

using ClassId = std::size_t;

struct SyntheticSpec {
  std::size_t seen_classes = 10;
  std::size_t unseen_classes = 5;
  std::size_t feature_dim = 32;
  std::size_t attribute_dim = 8;
  std::size_t train_per_class = 100;
  std::size_t seen_test_per_class = 30;
  std::size_t unseen_test_per_class = 30;
  double separation = 3.0;
  double noise_sigma = 0.3;
  std::uint64_t map_seed = 7;
  std::uint64_t seed = 1;

  void validate() const {
    auto positive = [](std::size_t v, const char* what) {
      if (v < 1) throw ParameterError(std::string("synthetic spec: ") + what + " must be >= 1");
    };
    positive(seen_classes, "seen_classes");
    positive(unseen_classes, "unseen_classes");
    positive(feature_dim, "feature_dim");
    positive(attribute_dim, "attribute_dim");
    positive(train_per_class, "train_per_class");
    positive(seen_test_per_class, "seen_test_per_class");
    positive(unseen_test_per_class, "unseen_test_per_class");
    if (!(noise_sigma > 0.0)) throw ParameterError("synthetic spec: noise_sigma must be > 0");
    if (!(separation > 0.0)) throw ParameterError("synthetic spec: separation must be > 0");
  }
};

// Generating process of a synthetic dataset: class mean = mean_map * a.
struct GroundTruth {
  Tensor mean_map;  // [d, d_a]
  double sigma = 0.0;

  Tensor class_means(const Tensor& attrs) const { return matmul(attrs, transpose(mean_map)); }
};

struct GzslDataset {
  Tensor features;                 // [rows, d]
  std::vector<ClassId> labels;     // one per feature row
  Tensor attributes;               // [S+U, d_a]; row k belongs to class k
  std::vector<ClassId> seen_classes;
  std::vector<ClassId> unseen_classes;
  std::vector<std::size_t> train_index;  // seen rows only
  std::vector<std::size_t> test_index;   // seen and unseen rows
  std::optional<GroundTruth> truth;

  std::size_t num_classes() const { return attributes.rows(); }
  std::size_t feature_dim() const { return features.cols(); }
  std::size_t attribute_dim() const { return attributes.cols(); }

  bool is_seen(ClassId c) const { return std::find(seen_classes.begin(), seen_classes.end(), c) != seen_classes.end(); }
  bool is_unseen(ClassId c) const {
    return std::find(unseen_classes.begin(), unseen_classes.end(), c) != unseen_classes.end();
  }

  void validate() const {
    const std::size_t K = num_classes();
    if (features.rank() != 2 || features.rows() != labels.size())
      throw ValidationError("dataset: " + std::to_string(labels.size()) + " labels for features " + shape_str(features.shape()));
    std::set<ClassId> seen(seen_classes.begin(), seen_classes.end());
    for (ClassId c : unseen_classes)
      if (seen.count(c)) throw ValidationError("dataset: class " + std::to_string(c) + " is both seen and unseen");
    if (seen.size() != seen_classes.size()) throw ValidationError("dataset: duplicate seen class id");
    for (ClassId c : seen_classes)
      if (c >= K) throw ValidationError("dataset: class " + std::to_string(c) + " has no attribute row");
    for (ClassId c : unseen_classes)
      if (c >= K) throw ValidationError("dataset: class " + std::to_string(c) + " has no attribute row");
    for (std::size_t r : train_index) {
      if (r >= labels.size()) throw ValidationError("dataset: train row " + std::to_string(r) + " out of range");
      if (!seen.count(labels[r]))
        throw ValidationError("dataset: train row " + std::to_string(r) + " has non-seen class " + std::to_string(labels[r]));
    }
    for (std::size_t r : test_index) {
      if (r >= labels.size()) throw ValidationError("dataset: test row " + std::to_string(r) + " out of range");
      if (!seen.count(labels[r]) && !is_unseen(labels[r]))
        throw ValidationError("dataset: test row " + std::to_string(r) + " has class " + std::to_string(labels[r]) +
                              " that is neither seen nor unseen");
    }
    if (seen_classes.size() + unseen_classes.size() != K)
      throw ValidationError("dataset: " + std::to_string(K) + " attribute rows but " +
                            std::to_string(seen_classes.size() + unseen_classes.size()) + " seen+unseen classes");
  }
};

inline bool operator==(const GzslDataset& a, const GzslDataset& b) {
  auto same = [](const Tensor& x, const Tensor& y) {
    return x.shape() == y.shape() && std::equal(x.data().begin(), x.data().end(), y.data().begin());
  };
  return same(a.features, b.features) && a.labels == b.labels && same(a.attributes, b.attributes) &&
         a.seen_classes == b.seen_classes && a.unseen_classes == b.unseen_classes && a.train_index == b.train_index &&
         a.test_index == b.test_index;
}

// Attributes uniform on the unit sphere; class means mean_map * a with
// mean_map = separation * W, W_ij ~ N(0, 1/d); features ~ N(mean, sigma^2 I).
// Row layout: all train rows (seen classes), then seen test rows, then unseen
// test rows, each grouped by class.
inline GzslDataset make_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t S = spec.seen_classes, U = spec.unseen_classes, K = S + U;
  const std::size_t d = spec.feature_dim, da = spec.attribute_dim;

  Rng map_rng(spec.map_seed);
  Tensor mean_map = Tensor::randn({d, da}, map_rng, spec.separation / std::sqrt(static_cast<double>(d)));

  Rng rng(spec.seed);
  std::vector<double> attr(K * da);
  for (std::size_t k = 0; k < K; ++k) {
    double norm = 0.0;
    do {
      norm = 0.0;
      for (std::size_t j = 0; j < da; ++j) {
        attr[k * da + j] = rng.normal();
        norm += attr[k * da + j] * attr[k * da + j];
      }
      norm = std::sqrt(norm);
    } while (norm < 1e-6);
    for (std::size_t j = 0; j < da; ++j) attr[k * da + j] /= norm;
  }

  GzslDataset ds;
  ds.attributes = Tensor::from_data({K, da}, std::move(attr));
  std::vector<ClassId> perm(K);
  for (std::size_t k = 0; k < K; ++k) perm[k] = k;
  rng.shuffle(perm);
  ds.seen_classes.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(S));
  ds.unseen_classes.assign(perm.begin() + static_cast<std::ptrdiff_t>(S), perm.end());
  std::sort(ds.seen_classes.begin(), ds.seen_classes.end());
  std::sort(ds.unseen_classes.begin(), ds.unseen_classes.end());

  GroundTruth truth{mean_map, spec.noise_sigma};
  Tensor means = truth.class_means(ds.attributes);

  std::vector<double> feats;
  auto emit = [&](ClassId c, std::size_t count) {
    for (std::size_t n = 0; n < count; ++n) {
      for (std::size_t j = 0; j < d; ++j) feats.push_back(means.at(c, j) + spec.noise_sigma * rng.normal());
      ds.labels.push_back(c);
    }
  };
  for (ClassId c : ds.seen_classes) emit(c, spec.train_per_class);
  const std::size_t n_train = ds.labels.size();
  for (ClassId c : ds.seen_classes) emit(c, spec.seen_test_per_class);
  for (ClassId c : ds.unseen_classes) emit(c, spec.unseen_test_per_class);

  ds.features = Tensor::from_data({ds.labels.size(), d}, std::move(feats));
  for (std::size_t r = 0; r < ds.labels.size(); ++r) (r < n_train ? ds.train_index : ds.test_index).push_back(r);
  ds.truth = truth;
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// Text file format

namespace detail {

inline std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <class T>
T parse_number(const std::string& tok, const std::string& file, std::size_t line) {
  T v{};
  auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size())
    throw ParseError(file, line, "invalid number '" + tok + "'");
  return v;
}

inline std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::string> out;
  for (std::string t; is >> t;) out.push_back(t);
  return out;
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  return lines;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << text;
  if (!out) throw IoError("failed writing " + path);
}

// Parses "<cols> <rows>" then rows of "class_id v1 .. v_cols".
inline std::pair<Tensor, std::vector<ClassId>> read_labeled_matrix(const std::string& path) {
  auto lines = read_lines(path);
  std::size_t ln = 0;
  while (ln < lines.size() && split_ws(lines[ln]).empty()) ++ln;
  if (ln == lines.size()) throw ParseError(path, 1, "missing header");
  auto head = split_ws(lines[ln]);
  if (head.size() != 2) throw ParseError(path, ln + 1, "header must be '<dim> <rows>'");
  const auto cols = parse_number<std::size_t>(head[0], path, ln + 1);
  const auto rows = parse_number<std::size_t>(head[1], path, ln + 1);
  std::vector<double> data;
  data.reserve(rows * cols);
  std::vector<ClassId> ids;
  for (++ln; ln < lines.size(); ++ln) {
    auto tok = split_ws(lines[ln]);
    if (tok.empty()) continue;
    if (tok.size() != cols + 1)
      throw ParseError(path, ln + 1, "record " + std::to_string(ids.size()) + ": expected " + std::to_string(cols + 1) +
                                         " fields, got " + std::to_string(tok.size()));
    ids.push_back(parse_number<ClassId>(tok[0], path, ln + 1));
    for (std::size_t j = 1; j < tok.size(); ++j) data.push_back(parse_number<double>(tok[j], path, ln + 1));
  }
  if (ids.size() != rows)
    throw ParseError(path, lines.size(), "header declares " + std::to_string(rows) + " rows, found " + std::to_string(ids.size()));
  return {Tensor::from_data({rows, cols}, std::move(data)), std::move(ids)};
}

}  // namespace detail

struct DatasetPaths {
  std::string features, attributes, split;

  static DatasetPaths in_dir(const std::filesystem::path& dir) {
    return {(dir / "features.txt").string(), (dir / "attributes.txt").string(), (dir / "split.txt").string()};
  }
};

inline void save_dataset(const GzslDataset& ds, const DatasetPaths& paths) {
  auto row_text = [](std::ostringstream& os, ClassId id, std::span<const double> row) {
    os << id;
    for (double v : row) os << ' ' << detail::format_double(v);
    os << '\n';
  };
  {
    std::ostringstream os;
    const std::size_t d = ds.feature_dim();
    os << d << ' ' << ds.labels.size() << '\n';
    for (std::size_t r = 0; r < ds.labels.size(); ++r) row_text(os, ds.labels[r], ds.features.data().subspan(r * d, d));
    detail::write_text(paths.features, os.str());
  }
  {
    std::ostringstream os;
    const std::size_t da = ds.attribute_dim();
    os << da << ' ' << ds.num_classes() << '\n';
    for (std::size_t k = 0; k < ds.num_classes(); ++k) row_text(os, k, ds.attributes.data().subspan(k * da, da));
    detail::write_text(paths.attributes, os.str());
  }
  {
    std::ostringstream os;
    auto list = [&os](const char* key, const auto& v) {
      os << key << ':';
      for (auto x : v) os << ' ' << x;
      os << '\n';
    };
    list("seen", ds.seen_classes);
    list("unseen", ds.unseen_classes);
    list("test", ds.test_index);
    detail::write_text(paths.split, os.str());
  }
}

inline GzslDataset load_feature_file(const std::string& features_path, const std::string& attributes_path,
                                     const std::string& split_path) {
  GzslDataset ds;
  auto [features, labels] = detail::read_labeled_matrix(features_path);
  ds.features = std::move(features);
  ds.labels = std::move(labels);

  auto [attr_rows, attr_ids] = detail::read_labeled_matrix(attributes_path);
  std::size_t K = 0;
  for (auto id : attr_ids) K = std::max(K, id + 1);

  std::optional<std::vector<ClassId>> seen, unseen;
  std::optional<std::vector<std::size_t>> test;
  auto lines = detail::read_lines(split_path);
  for (std::size_t ln = 0; ln < lines.size(); ++ln) {
    auto tok = detail::split_ws(lines[ln]);
    if (tok.empty()) continue;
    std::vector<std::size_t> values;
    for (std::size_t j = 1; j < tok.size(); ++j) values.push_back(detail::parse_number<std::size_t>(tok[j], split_path, ln + 1));
    if (tok[0] == "seen:") seen = values;
    else if (tok[0] == "unseen:") unseen = values;
    else if (tok[0] == "test:") test = values;
    else throw ParseError(split_path, ln + 1, "unknown split key '" + tok[0] + "'");
  }
  if (!seen || !unseen || !test) throw ParseError(split_path, lines.size(), "split file needs seen:, unseen: and test: lines");
  ds.seen_classes = *seen;
  ds.unseen_classes = *unseen;

  std::set<ClassId> referenced(seen->begin(), seen->end());
  referenced.insert(unseen->begin(), unseen->end());
  referenced.insert(ds.labels.begin(), ds.labels.end());
  for (auto c : referenced) K = std::max(K, c + 1);

  std::vector<int> row_of(K, -1);
  for (std::size_t i = 0; i < attr_ids.size(); ++i) {
    if (row_of[attr_ids[i]] != -1)
      throw ParseError(attributes_path, i + 2, "duplicate attribute row for class " + std::to_string(attr_ids[i]));
    row_of[attr_ids[i]] = static_cast<int>(i);
  }
  for (ClassId c = 0; c < K; ++c)
    if (row_of[c] == -1) throw ValidationError("attributes file has no row for class " + std::to_string(c));
  std::vector<std::size_t> order(K);
  for (ClassId c = 0; c < K; ++c) order[c] = static_cast<std::size_t>(row_of[c]);
  ds.attributes = select_rows(attr_rows, order);

  std::set<std::size_t> test_rows;
  for (auto r : *test) {
    if (r >= ds.labels.size())
      throw ValidationError("split: test row " + std::to_string(r) + " out of range (" + std::to_string(ds.labels.size()) + " rows)");
    if (!test_rows.insert(r).second) throw ValidationError("split: test row " + std::to_string(r) + " listed twice");
  }
  ds.test_index = *test;
  for (std::size_t r = 0; r < ds.labels.size(); ++r)
    if (!test_rows.count(r)) ds.train_index.push_back(r);
  ds.validate();
  return ds;
}

inline GzslDataset load_dataset(const DatasetPaths& paths) {
  return load_feature_file(paths.features, paths.attributes, paths.split);
}

// ---------------------------------------------------------------------------
// Batching

// Real seen rows x' followed by generated unseen rows x''.
struct Batch {
  Tensor seen_features;
  std::vector<ClassId> seen_labels;
  Tensor generated_features;
  std::vector<ClassId> generated_labels;

  std::size_t n_a() const { return seen_labels.size(); }
  std::size_t n_b() const { return seen_labels.size() + generated_labels.size(); }

  Tensor features() const {
    if (generated_labels.empty()) return seen_features;
    return concat_rows({seen_features, generated_features});
  }
  std::vector<ClassId> labels() const {
    auto out = seen_labels;
    out.insert(out.end(), generated_labels.begin(), generated_labels.end());
    return out;
  }
};

// x'' = G(a, w) for one attribute row per output row.
template <class G>
concept FeatureGenerator = requires(const G& g, const Tensor& attrs, Rng& rng) {
  { g(attrs, rng) } -> std::convertible_to<Tensor>;
};

// Shuffled partition of `rows` into batches; the last one may be short.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::vector<std::size_t> rows, std::size_t batch_size, Rng& rng) {
  if (batch_size == 0) throw ParameterError("batch_size must be >= 1");
  rng.shuffle(rows);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < rows.size(); i += batch_size)
    out.emplace_back(rows.begin() + static_cast<std::ptrdiff_t>(i),
                     rows.begin() + static_cast<std::ptrdiff_t>(std::min(rows.size(), i + batch_size)));
  return out;
}

// Attribute rows for `per_class` samples of each class, in class order.
inline std::pair<Tensor, std::vector<ClassId>> repeat_class_attributes(const GzslDataset& ds,
                                                                      const std::vector<ClassId>& classes,
                                                                      std::size_t per_class) {
  std::vector<std::size_t> rows;
  std::vector<ClassId> labels;
  for (ClassId c : classes)
    for (std::size_t n = 0; n < per_class; ++n) {
      rows.push_back(c);
      labels.push_back(c);
    }
  if (rows.empty()) return {Tensor::zeros({0, ds.attribute_dim()}), {}};
  return {select_rows(ds.attributes, rows), labels};
}

inline std::vector<ClassId> labels_of(const GzslDataset& ds, const std::vector<std::size_t>& rows) {
  std::vector<ClassId> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(ds.labels.at(r));
  return out;
}

template <FeatureGenerator Gen>
Batch make_batch(const GzslDataset& ds, const std::vector<std::size_t>& seen_rows, const Gen& generator, int syn_per_class,
                 Rng& rng) {
  if (syn_per_class < 0) throw ParameterError("syn_per_class must be >= 0, got " + std::to_string(syn_per_class));
  Batch b;
  b.seen_features = select_rows(ds.features, seen_rows);
  b.seen_labels = labels_of(ds, seen_rows);
  auto [attrs, labels] = repeat_class_attributes(ds, ds.unseen_classes, static_cast<std::size_t>(syn_per_class));
  if (labels.empty()) {
    b.generated_features = Tensor::zeros({0, ds.feature_dim()});
  } else {
    b.generated_features = generator(attrs, rng);
    if (b.generated_features.rows() != labels.size() || b.generated_features.cols() != ds.feature_dim())
      throw ShapeError("generator returned " + shape_str(b.generated_features.shape()));
  }
  b.generated_labels = std::move(labels);
  return b;
}

// One batch: batch_size seen train rows drawn without replacement plus
// syn_per_class generated rows per unseen class.
template <FeatureGenerator Gen>
Batch sample_batch(const GzslDataset& ds, const Gen& generator, std::size_t batch_size, int syn_per_class, Rng& rng) {
  if (syn_per_class < 0) throw ParameterError("syn_per_class must be >= 0, got " + std::to_string(syn_per_class));
  if (batch_size == 0 || batch_size > ds.train_index.size())
    throw ParameterError("batch_size must be in [1, " + std::to_string(ds.train_index.size()) + "]");
  auto rows = ds.train_index;
  rng.shuffle(rows);
  rows.resize(batch_size);
  return make_batch(ds, rows, generator, syn_per_class, rng);
}

}  // namespace d3gzsl
