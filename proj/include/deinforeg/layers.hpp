// Parameterized building blocks: dense layers, activations, batch norm, and
// the optimizers that update them.

#ifndef DEINFOREG_LAYERS_HPP
#define DEINFOREG_LAYERS_HPP

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "deinforeg/autodiff.hpp"
#include "deinforeg/tensor.hpp"

namespace deinforeg {

enum class LayerKind { Dense, BatchNorm, Relu, Tanh };

struct LayerSpec {
  LayerKind kind = LayerKind::Dense;
  std::size_t units = 0;  // Dense only

  static LayerSpec dense(std::size_t units) { return {LayerKind::Dense, units}; }
  static LayerSpec batchnorm() { return {LayerKind::BatchNorm, 0}; }
  static LayerSpec relu() { return {LayerKind::Relu, 0}; }
  static LayerSpec tanh() { return {LayerKind::Tanh, 0}; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// An ordered layer stack; empty means identity.
using StackSpec = std::vector<LayerSpec>;

std::size_t output_width(const StackSpec& stack, std::size_t input_width);

struct Parameter {
  std::string name;
  Matrix value;
  Matrix velocity;  // SGD momentum buffer, or Adam first moment
  Matrix second;    // Adam second moment
};

/// Ordered named parameters with their optimizer slots.
class ParamSet {
public:
  /// Throws std::invalid_argument on a duplicate name.
  std::size_t add(std::string name, Matrix value);

  std::size_t size() const noexcept { return params_.size(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  const Parameter* find(const std::string& name) const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  /// Total scalar count.
  std::size_t count() const;

  bool all_finite() const;

  /// Bitwise comparison of names and values (optimizer state ignored).
  bool same_values(const ParamSet& other) const;

private:
  std::vector<Parameter> params_;
};

// Dense ------------------------------------------------------------------

/// x*W + b with b broadcast over rows.
NodeId dense_forward(Graph& g, NodeId x, NodeId weight, NodeId bias);

// Batch norm -------------------------------------------------------------

enum class Mode { Train, Eval };

struct BatchNorm1d {
  static constexpr double kEpsilon = 1e-5;
  static constexpr double kMomentum = 0.1;

  explicit BatchNorm1d(std::size_t width = 0)
      : running_mean(1, width, 0.0), running_var(1, width, 1.0) {}

  Matrix running_mean;
  Matrix running_var;
  double momentum = kMomentum;
  double eps = kEpsilon;
};

/// Train mode normalizes with batch statistics (and, when update_stats is
/// set, folds them into the running estimates); eval mode uses the running
/// estimates only. Train mode needs at least two rows.
NodeId batchnorm_forward(Graph& g, BatchNorm1d& bn, NodeId x, NodeId gamma, NodeId beta,
                         Mode mode, bool update_stats = true);

// Stacks -----------------------------------------------------------------

/// A layer stack with its own parameters and batch-norm state.
class Block {
public:
  Block() = default;
  /// Dense weights ~ N(0, sqrt(2/in)) when followed by relu (directly or
  /// through batch norm), N(0, sqrt(1/in)) otherwise; biases zero; BN
  /// gamma=1, beta=0.
  Block(StackSpec spec, std::size_t input_width, Rng& rng, const std::string& prefix);

  const StackSpec& spec() const noexcept { return spec_; }
  std::size_t input_width() const noexcept { return in_; }
  std::size_t output_width() const noexcept { return out_; }
  bool is_identity() const noexcept { return spec_.empty(); }

  ParamSet& params() noexcept { return params_; }
  const ParamSet& params() const noexcept { return params_; }
  std::vector<BatchNorm1d>& norms() noexcept { return norms_; }
  const std::vector<BatchNorm1d>& norms() const noexcept { return norms_; }

  /// Adds every parameter as a requires-grad leaf; order matches params().
  std::vector<NodeId> bind(Graph& g) const;

  NodeId forward(Graph& g, std::span<const NodeId> bound, NodeId x, Mode mode,
                 bool update_stats = true);

  /// Eval-mode inference without building a graph.
  Matrix infer(const Matrix& x) const;

private:
  StackSpec spec_;
  std::size_t in_ = 0;
  std::size_t out_ = 0;
  ParamSet params_;
  std::vector<BatchNorm1d> norms_;
};

// Optimizers -------------------------------------------------------------

enum class OptimizerKind { Sgd, Adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Sgd;
  double lr = 0.05;
  double momentum = 0.9;  // SGD
  double weight_decay = 0.0;
  double beta1 = 0.9;  // Adam
  double beta2 = 0.999;
  double adam_eps = 1e-8;
};

/// v <- momentum*v + grad + weight_decay*param;  param <- param - lr*v
void sgd_step(ParamSet& params, std::span<const Matrix> grads, double lr, double momentum,
              double weight_decay);

/// Bias-corrected Adam; `step` is the 1-based update count.
void adam_step(ParamSet& params, std::span<const Matrix> grads, const OptimizerConfig& cfg,
               std::size_t step);

/// Per-owner optimizer: one instance per module, never shared.
///
/// A step may span several parameter sets (encoder, projector, classifier):
/// call tick() once, then update() for each set.
class Optimizer {
public:
  Optimizer() = default;
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}
  void tick() noexcept { ++steps_; }
  void update(ParamSet& params, std::span<const Matrix> grads) const;
  const OptimizerConfig& config() const noexcept { return cfg_; }
  std::size_t steps() const noexcept { return steps_; }

private:
  OptimizerConfig cfg_;
  std::size_t steps_ = 0;
};

// Checkpoints ------------------------------------------------------------
//
// JSON object: { "<name>": { "shape": [rows, cols], "data": [row-major...] } }.
// Doubles are written in shortest round-trip form, so reload is lossless.

nlohmann::json params_to_json(const ParamSet& params);
/// Overwrites values of `params` by name; every name must be present with a
/// matching shape.
void params_from_json(ParamSet& params, const nlohmann::json& j);
void save_params(const ParamSet& params, const std::filesystem::path& path);
void load_params(ParamSet& params, const std::filesystem::path& path);

}  // namespace deinforeg

#endif  // DEINFOREG_LAYERS_HPP
