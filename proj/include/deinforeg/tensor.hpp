// Dense row-major matrices and a portable deterministic random source.
//
// Matrix is the single value type of the engine: batches, weights, bias
// rows, similarity matrices and scalar losses (1x1) are all Matrix values.

#ifndef DEINFOREG_TENSOR_HPP
#define DEINFOREG_TENSOR_HPP

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace deinforeg {

/// Raised when operand shapes do not conform.
class ShapeError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an argument lies outside an operation's domain.
class DomainError : public std::domain_error {
public:
  using std::domain_error::domain_error;
};

class Matrix {
public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);
  static Matrix scalar(double v) { return Matrix(1, 1, v); }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  bool same_shape(const Matrix& o) const noexcept {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  /// Value of a 1x1 matrix.
  double item() const;

  bool all_finite() const noexcept;

  /// "RxC" for diagnostics.
  std::string shape_string() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

std::string shape_of(const Matrix& m);

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& m);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& m, double s);

/// Per-column means and standard deviations of an NxC matrix.
///
/// Variance uses the population divisor N; the std of column j is
/// sqrt(var_j + kVarianceEpsilon).
struct ColumnStats {
  Matrix means;  // 1xC
  Matrix stds;   // 1xC
};

inline constexpr double kVarianceEpsilon = 1e-7;

ColumnStats column_mean_std(const Matrix& m);

/// Divides every row by (its L2 norm + eps).
Matrix row_l2_normalize(const Matrix& m, double eps);

/// Largest absolute entrywise difference; shapes must match.
double max_abs_diff(const Matrix& a, const Matrix& b);

/// Seeded generator producing the same stream on every platform.
///
/// std::normal_distribution is implementation-defined, so Gaussian samples
/// are produced here with Box-Muller on top of mt19937_64 (whose output
/// sequence the standard pins down exactly).
class Rng {
public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  /// Uniform in [0, 1).
  double uniform();
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n);
  double normal(double mean = 0.0, double std = 1.0);

  /// Derives an independent child generator (for per-component streams).
  Rng fork(std::uint64_t salt);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[index(i)]);
    }
  }

private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

Matrix rng_normal(Rng& rng, std::size_t rows, std::size_t cols, double mean, double std);

}  // namespace deinforeg

#endif  // DEINFOREG_TENSOR_HPP
