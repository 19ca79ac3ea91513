// Datasets for the desk-scale experiments: synthetic generators, CSV
// ingestion, label noise, standardization and batching.

#ifndef DEINFOREG_DATA_HPP
#define DEINFOREG_DATA_HPP

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "deinforeg/network.hpp"
#include "deinforeg/tensor.hpp"

namespace deinforeg {

enum class Split : std::uint8_t { Train, Val, Test };

struct Dataset {
  Matrix features;                   // N x D
  std::vector<std::size_t> labels;   // N, each in [0, classes)
  std::size_t classes = 0;
  std::vector<Split> split;          // N
  std::vector<std::string> class_names;  // index -> original label text

  std::size_t size() const noexcept { return labels.size(); }
  std::vector<std::size_t> rows(Split s) const;
  /// Throws DomainError on any broken invariant.
  void validate() const;
};

/// Assigns a per-class 70/15/15 train/val/test split.
void stratified_split(Dataset& ds, Rng& rng, double train = 0.70, double val = 0.15);

/// K Gaussian clusters (per-coordinate std `cluster_std`) whose centers are
/// pairwise at least `separation` apart.
Dataset gen_blobs(std::size_t classes, std::size_t per_class, std::size_t dim, double separation,
                  Rng& rng, double cluster_std = 1.0);

/// K interleaved 2-D spiral arms, one class per arm, radius in [0.1, 1].
Dataset gen_spirals(std::size_t arms, std::size_t per_arm, double noise_std, Rng& rng,
                    double turns = 1.0);

/// `label_column` is a header name (with has_header) or a 0-based index.
/// Integral labels are used as class indices; any other label text maps to
/// indices in first-appearance order. All rows are tagged Train.
Dataset load_csv(const std::filesystem::path& path, const std::string& label_column,
                 bool has_header);
/// Writes f0..f{D-1},label with a header; reals in round-trip precision.
void save_csv(const Dataset& ds, const std::filesystem::path& path);
/// Two-column sidecar: index,label.
void save_label_mapping(const Dataset& ds, const std::filesystem::path& path);

struct NoiseSpec {
  double theta = 0.0;
  std::uint64_t seed = 0;
};

struct NoisyDataset {
  Dataset data;
  std::vector<bool> flipped;  // per row; only train rows can be set
};

/// Each training row independently, with probability theta, gets a label
/// drawn uniformly from the other K-1 classes.
NoisyDataset inject_label_noise(const Dataset& ds, const NoiseSpec& spec);

struct Standardizer {
  Matrix means;  // 1 x D
  Matrix stds;   // 1 x D (zero-variance columns use 1)
  Matrix apply(const Matrix& x) const;
};

/// Column z-scoring fitted on the training split and applied to all rows.
Standardizer standardize(Dataset& ds);

Matrix one_hot(const std::vector<std::size_t>& labels, std::size_t classes);

/// Rows of `split` in order (or shuffled), cut into batches; the final
/// partial batch is kept.
std::vector<Batch> batches(const Dataset& ds, Split split, std::size_t batch_size, bool shuffle,
                           Rng& rng);

/// All rows of a split as one (features, one-hot) pair.
Batch split_matrix(const Dataset& ds, Split split);

}  // namespace deinforeg

#endif  // DEINFOREG_DATA_HPP
