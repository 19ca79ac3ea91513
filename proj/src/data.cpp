#include "deinforeg/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace deinforeg {

std::vector<std::size_t> Dataset::rows(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < split.size(); ++i) {
    if (split[i] == s) out.push_back(i);
  }
  return out;
}

void Dataset::validate() const {
  if (features.rows() != labels.size()) {
    throw DomainError("dataset: " + std::to_string(features.rows()) + " feature rows but " +
                      std::to_string(labels.size()) + " labels");
  }
  if (split.size() != labels.size()) throw DomainError("dataset: split tags do not cover rows");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) {
      throw DomainError("dataset: label " + std::to_string(labels[i]) + " at row " +
                        std::to_string(i) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

namespace {

std::vector<std::string> default_names(std::size_t k) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < k; ++i) names.push_back(std::to_string(i));
  return names;
}

}  // namespace

void stratified_split(Dataset& ds, Rng& rng, double train, double val) {
  ds.split.assign(ds.size(), Split::Test);
  for (std::size_t k = 0; k < ds.classes; ++k) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (ds.labels[i] == k) idx.push_back(i);
    }
    rng.shuffle(idx);
    const auto n = static_cast<double>(idx.size());
    const auto n_train = static_cast<std::size_t>(std::llround(train * n));
    const auto n_val = std::min(idx.size() - n_train, static_cast<std::size_t>(std::llround(val * n)));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      ds.split[idx[i]] = i < n_train ? Split::Train : (i < n_train + n_val ? Split::Val : Split::Test);
    }
  }
}

Dataset gen_blobs(std::size_t classes, std::size_t per_class, std::size_t dim, double separation,
                  Rng& rng, double cluster_std) {
  if (classes < 2) throw DomainError("gen_blobs: need at least 2 classes");
  if (dim == 0) throw DomainError("gen_blobs: dim must be >= 1");
  // Centers: scaled simplex vertices when dim >= K (pairwise distance
  // exactly `separation`), otherwise a regular polygon / evenly spaced line.
  Matrix centers(classes, dim);
  if (dim >= classes) {
    for (std::size_t k = 0; k < classes; ++k) centers(k, k) = separation / std::numbers::sqrt2;
  } else if (dim >= 2) {
    const double r = separation / (2.0 * std::sin(std::numbers::pi / static_cast<double>(classes)));
    for (std::size_t k = 0; k < classes; ++k) {
      const double a = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(classes);
      centers(k, 0) = r * std::cos(a);
      centers(k, 1) = r * std::sin(a);
    }
  } else {
    for (std::size_t k = 0; k < classes; ++k) centers(k, 0) = separation * static_cast<double>(k);
  }
  Dataset ds;
  ds.classes = classes;
  ds.class_names = default_names(classes);
  ds.features = Matrix(classes * per_class, dim);
  for (std::size_t k = 0; k < classes; ++k) {
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::size_t row = k * per_class + i;
      for (std::size_t d = 0; d < dim; ++d) {
        ds.features(row, d) = centers(k, d) + rng.normal(0.0, cluster_std);
      }
      ds.labels.push_back(k);
    }
  }
  stratified_split(ds, rng);
  return ds;
}

Dataset gen_spirals(std::size_t arms, std::size_t per_arm, double noise_std, Rng& rng,
                    double turns) {
  if (arms < 2) throw DomainError("gen_spirals: need at least 2 arms");
  Dataset ds;
  ds.classes = arms;
  ds.class_names = default_names(arms);
  ds.features = Matrix(arms * per_arm, 2);
  for (std::size_t k = 0; k < arms; ++k) {
    const double phase = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(arms);
    for (std::size_t i = 0; i < per_arm; ++i) {
      const double t = per_arm == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(per_arm - 1);
      const double r = 0.1 + 0.9 * t;
      const double a = phase + 2.0 * std::numbers::pi * turns * t;
      const std::size_t row = k * per_arm + i;
      ds.features(row, 0) = r * std::cos(a) + rng.normal(0.0, noise_std);
      ds.features(row, 1) = r * std::sin(a) + rng.normal(0.0, noise_std);
      ds.labels.push_back(k);
    }
  }
  stratified_split(ds, rng);
  return ds;
}

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

bool parse_double(const std::string& s, double& out) {
  const std::string t = trim(s);
  if (t.empty()) return false;
  const auto* end = t.data() + t.size();
  auto [p, ec] = std::from_chars(t.data(), end, out);
  return ec == std::errc() && p == end && std::isfinite(out);
}

bool parse_index(const std::string& s, std::size_t& out) {
  const std::string t = trim(s);
  if (t.empty()) return false;
  const auto* end = t.data() + t.size();
  auto [p, ec] = std::from_chars(t.data(), end, out);
  return ec == std::errc() && p == end;
}

}  // namespace

Dataset load_csv(const std::filesystem::path& path, const std::string& label_column,
                 bool has_header) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_numbers;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty() || trim(line) == "\r") continue;
    auto fields = split_fields(line);
    if (has_header && header.empty()) {
      for (auto& f : fields) header.push_back(trim(f));
      continue;
    }
    rows.push_back(std::move(fields));
    line_numbers.push_back(lineno);
  }
  if (rows.empty()) throw std::runtime_error(path.string() + ": no data rows");

  const std::size_t width = has_header ? header.size() : rows.front().size();
  std::size_t label_idx = width;
  if (has_header) {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == label_column) label_idx = i;
    }
  }
  if (label_idx == width && !parse_index(label_column, label_idx)) {
    throw std::runtime_error(path.string() + ": no label column '" + label_column + "'");
  }
  if (label_idx >= width) {
    throw std::runtime_error(path.string() + ": label column " + label_column + " out of range");
  }
  auto column_name = [&](std::size_t c) {
    return has_header ? header[c] : "column " + std::to_string(c);
  };

  Dataset ds;
  ds.features = Matrix(rows.size(), width - 1);
  std::vector<std::string> raw_labels;
  bool integral = true;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& f = rows[r];
    if (f.size() != width) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_numbers[r]) +
                               ": expected " + std::to_string(width) + " fields, found " +
                               std::to_string(f.size()));
    }
    std::size_t out_col = 0;
    for (std::size_t c = 0; c < width; ++c) {
      if (c == label_idx) continue;
      double v = 0.0;
      if (!parse_double(f[c], v)) {
        throw std::runtime_error(path.string() + ":" + std::to_string(line_numbers[r]) +
                                 ": non-numeric value '" + trim(f[c]) + "' in feature column '" +
                                 column_name(c) + "'");
      }
      ds.features(r, out_col++) = v;
    }
    raw_labels.push_back(trim(f[label_idx]));
    std::size_t tmp = 0;
    integral = integral && parse_index(raw_labels.back(), tmp);
  }

  if (integral) {
    std::size_t max_label = 0;
    for (const auto& s : raw_labels) {
      std::size_t v = 0;
      parse_index(s, v);
      ds.labels.push_back(v);
      max_label = std::max(max_label, v);
    }
    ds.classes = max_label + 1;
    ds.class_names = default_names(ds.classes);
  } else {
    std::unordered_map<std::string, std::size_t> index;
    for (const auto& s : raw_labels) {
      auto [it, inserted] = index.try_emplace(s, ds.class_names.size());
      if (inserted) ds.class_names.push_back(s);
      ds.labels.push_back(it->second);
    }
    ds.classes = ds.class_names.size();
  }
  ds.split.assign(ds.labels.size(), Split::Train);
  return ds;
}

void save_csv(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (std::size_t c = 0; c < ds.features.cols(); ++c) out << 'f' << c << ',';
  out << "label\n";
  out.precision(17);
  for (std::size_t r = 0; r < ds.size(); ++r) {
    for (double v : ds.features.row(r)) out << v << ',';
    out << ds.labels[r] << '\n';
  }
}

void save_label_mapping(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "index,label\n";
  for (std::size_t i = 0; i < ds.class_names.size(); ++i) out << i << ',' << ds.class_names[i] << '\n';
}

NoisyDataset inject_label_noise(const Dataset& ds, const NoiseSpec& spec) {
  if (!(spec.theta >= 0.0 && spec.theta <= 1.0)) {
    throw DomainError("label noise ratio must lie in [0, 1]");
  }
  if (ds.classes < 2 && spec.theta > 0.0) throw DomainError("label noise needs at least 2 classes");
  NoisyDataset out{ds, std::vector<bool>(ds.size(), false)};
  Rng rng(spec.seed);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.split[i] != Split::Train) continue;
    if (rng.uniform() < spec.theta) {
      std::size_t r = rng.index(ds.classes - 1);
      if (r >= ds.labels[i]) ++r;
      out.data.labels[i] = r;
      out.flipped[i] = true;
    }
  }
  return out;
}

Matrix Standardizer::apply(const Matrix& x) const {
  Matrix out = x;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] = (r[j] - means(0, j)) / stds(0, j);
  }
  return out;
}

Standardizer standardize(Dataset& ds) {
  const auto train = ds.rows(Split::Train);
  if (train.empty()) throw DomainError("standardize: empty training split");
  const std::size_t d = ds.features.cols();
  Standardizer s{Matrix(1, d), Matrix(1, d)};
  for (auto i : train) {
    for (std::size_t j = 0; j < d; ++j) s.means(0, j) += ds.features(i, j);
  }
  for (std::size_t j = 0; j < d; ++j) s.means(0, j) /= static_cast<double>(train.size());
  for (auto i : train) {
    for (std::size_t j = 0; j < d; ++j) {
      const double v = ds.features(i, j) - s.means(0, j);
      s.stds(0, j) += v * v;
    }
  }
  for (std::size_t j = 0; j < d; ++j) {
    const double sd = std::sqrt(s.stds(0, j) / static_cast<double>(train.size()));
    s.stds(0, j) = sd > 0.0 ? sd : 1.0;
  }
  ds.features = s.apply(ds.features);
  return s;
}

Matrix one_hot(const std::vector<std::size_t>& labels, std::size_t classes) {
  Matrix out(labels.size(), classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) throw DomainError("one_hot: label out of range");
    out(i, labels[i]) = 1.0;
  }
  return out;
}

namespace {

Batch gather(const Dataset& ds, const std::vector<std::size_t>& idx, std::size_t begin,
             std::size_t end) {
  const std::size_t d = ds.features.cols();
  Batch b{Matrix(end - begin, d), Matrix(end - begin, ds.classes)};
  for (std::size_t r = begin; r < end; ++r) {
    auto src = ds.features.row(idx[r]);
    std::copy(src.begin(), src.end(), b.x.row(r - begin).begin());
    b.y(r - begin, ds.labels[idx[r]]) = 1.0;
  }
  return b;
}

}  // namespace

std::vector<Batch> batches(const Dataset& ds, Split split, std::size_t batch_size, bool shuffle,
                           Rng& rng) {
  if (batch_size == 0) throw DomainError("batches: batch size must be >= 1");
  auto idx = ds.rows(split);
  if (idx.empty()) throw DomainError("batches: empty split");
  if (shuffle) rng.shuffle(idx);
  std::vector<Batch> out;
  for (std::size_t b = 0; b < idx.size(); b += batch_size) {
    out.push_back(gather(ds, idx, b, std::min(idx.size(), b + batch_size)));
  }
  return out;
}

Batch split_matrix(const Dataset& ds, Split split) {
  auto idx = ds.rows(split);
  if (idx.empty()) throw DomainError("split_matrix: empty split");
  return gather(ds, idx, 0, idx.size());
}

}  // namespace deinforeg
