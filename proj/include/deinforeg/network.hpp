// A stack of decoupled modules (encoder -> projector -> classifier) and the
// end-to-end backpropagation baseline over the same encoders.
//
// Gradient flow in decoupled mode, per module l:
//   local loss       -> projector, encoder
//   cross-entropy    -> classifier, projector (cut before the encoder)
//   module l+1 loss  -> nothing in module l (input is detached)

#ifndef DEINFOREG_NETWORK_HPP
#define DEINFOREG_NETWORK_HPP

#include <cstddef>
#include <filesystem>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "deinforeg/autodiff.hpp"
#include "deinforeg/layers.hpp"
#include "deinforeg/losses.hpp"

namespace deinforeg {

enum class TrainingMode { DeInfoReg, Bp };

std::string_view to_string(TrainingMode m);
TrainingMode training_mode_from(std::string_view s);

struct ModuleSpec {
  StackSpec encoder;
  StackSpec projector;  // empty = identity
  StackSpec classifier;
  LossConfig loss;
};

struct NetworkSpec {
  std::vector<ModuleSpec> modules;
  std::size_t input_width = 0;
  std::size_t classes = 0;
  TrainingMode mode = TrainingMode::DeInfoReg;
  OptimizerConfig optimizer;

  /// Throws ShapeError naming the first inconsistent boundary.
  void validate() const;
};

// JSON forms of the configuration types; unknown keys are rejected and
// absent keys keep their defaults.
nlohmann::json to_json(const LossConfig& cfg);
LossConfig loss_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const OptimizerConfig& cfg);
OptimizerConfig optimizer_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const StackSpec& stack);
StackSpec stack_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const NetworkSpec& spec);
NetworkSpec network_spec_from_json(const nlohmann::json& j);

enum class ProjectorKind { Identity, Linear, Mlp };

std::string_view to_string(ProjectorKind k);
ProjectorKind projector_kind_from(std::string_view s);

/// Uniform MLP stack: each module's encoder is dense(width) + activation
/// (optionally BN before the activation), the classifier is activation +
/// dense(K), and the projector is identity, dense(p), or
/// [dense(width)-BN-relu] x2 + dense(p), with p = projector_width (0: width).
struct StackRecipe {
  std::size_t depth = 4;
  std::size_t input_width = 2;
  std::size_t width = 64;
  std::size_t classes = 3;
  LayerKind activation = LayerKind::Tanh;
  bool batchnorm = false;
  ProjectorKind projector = ProjectorKind::Identity;
  std::size_t projector_width = 0;
  LossConfig loss;
  TrainingMode mode = TrainingMode::DeInfoReg;
  OptimizerConfig optimizer;
};

NetworkSpec make_network_spec(const StackRecipe& r);

struct TrainStepReport {
  std::vector<LossBreakdown> losses;         // per module
  std::vector<double> encoder_grad_mean_abs;  // per module
  double batch_accuracy = 0.0;               // final classifier, train-mode forward
};

/// One module's parameters, batch-norm state and optimizer.
class Module {
public:
  Module(const ModuleSpec& spec, std::size_t input_width, std::size_t classes,
         const OptimizerConfig& opt, Rng& rng, std::size_t index);

  Block& encoder() noexcept { return encoder_; }
  Block& projector() noexcept { return projector_; }
  Block& classifier() noexcept { return classifier_; }
  const Block& encoder() const noexcept { return encoder_; }
  const Block& projector() const noexcept { return projector_; }
  const Block& classifier() const noexcept { return classifier_; }
  const LossConfig& loss_config() const noexcept { return loss_; }
  void set_loss_config(const LossConfig& cfg);
  Optimizer& optimizer() noexcept { return opt_; }

  /// Graph handles of one module's training computation.
  struct Nodes {
    std::vector<NodeId> encoder_params, projector_params, classifier_params;
    NodeId hidden;  // encoder output
    NodeId logits;
    LocalLossNodes local;
    NodeId cross_entropy;
    NodeId total;
  };

  /// Appends this module's training graph on top of `input`. The caller
  /// decides whether `input` is detached.
  Nodes append_train_graph(Graph& g, NodeId input, const Matrix& labels, bool update_stats = true);

  /// Gradient sets for encoder, projector, classifier (in that order).
  struct Grads {
    std::vector<Matrix> encoder, projector, classifier;
  };
  static Grads collect(const GradientMap& gm, const Nodes& n);

  /// Applies one optimizer step across all three blocks.
  void apply(const Grads& grads);

  /// Mean |g| over all encoder parameter entries (0 for an empty encoder).
  static double mean_abs(const std::vector<Matrix>& grads);

  LossBreakdown breakdown(const Graph& g, const Nodes& n) const;

  /// Eval-mode logits of this module's classifier given the encoder output.
  Matrix head_logits(const Matrix& hidden) const;

  nlohmann::json params_json() const;
  void load_params_json(const nlohmann::json& j);
  /// Bitwise parameter comparison (optimizer state excluded).
  bool same_params(const Module& other) const;

private:
  Block encoder_, projector_, classifier_;
  LossConfig loss_;
  Optimizer opt_;
};

/// Result of the per-module work of one decoupled training step.
struct ModuleStepResult {
  Matrix output;  // detached encoder output handed to the next module
  LossBreakdown losses;
  double encoder_grad_mean_abs = 0.0;
  Matrix logits;
};

/// First half of a per-module step: forward pass and loss graph.
struct PendingModuleStep {
  Graph graph;
  Module::Nodes nodes;
  const Matrix& output() const { return graph.value(nodes.hidden); }
};

PendingModuleStep begin_module_step(Module& module, const Matrix& input, const Matrix& labels);
/// Second half: backward pass and optimizer update.
ModuleStepResult finish_module_step(Module& module, PendingModuleStep&& pending);

/// Forward, loss, backward and update of a single module on its own graph.
/// This is the unit of work the pipeline executor runs on each worker.
ModuleStepResult train_module_step(Module& module, const Matrix& input, const Matrix& labels);

class Network {
public:
  Network(NetworkSpec spec, Rng& rng);

  const NetworkSpec& spec() const noexcept { return spec_; }
  std::size_t depth() const noexcept { return modules_.size(); }
  Module& module(std::size_t l) { return modules_.at(l); }
  const Module& module(std::size_t l) const { return modules_.at(l); }
  std::vector<Module>& modules() noexcept { return modules_; }

  /// Dispatches on spec().mode.
  TrainStepReport train_step(const Matrix& x, const Matrix& y);
  TrainStepReport train_step_deinforeg(const Matrix& x, const Matrix& y);
  TrainStepReport train_step_bp(const Matrix& x, const Matrix& y);

  /// Eval-mode logits of the final module.
  Matrix logits(const Matrix& x) const;
  /// Eval-mode logits of every module's classifier.
  std::vector<Matrix> module_logits(const Matrix& x) const;
  std::vector<std::size_t> predict(const Matrix& x) const;

  /// Per-module encoder gradient magnitudes for one batch, without updating
  /// parameters or batch-norm statistics.
  std::vector<double> encoder_gradients(const Matrix& x, const Matrix& y) const;

  nlohmann::json checkpoint() const;
  void restore(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static Network load(const std::filesystem::path& path);

  /// Bitwise comparison of all module parameters.
  bool same_params(const Network& other) const;

private:
  NetworkSpec spec_;
  std::vector<Module> modules_;
};

/// Row-wise argmax, ties toward the lowest index.
std::vector<std::size_t> argmax_rows(const Matrix& logits);

struct Batch {
  Matrix x;
  Matrix y;  // one-hot
};

/// Mean over batches of per-module encoder gradient magnitudes.
std::vector<double> encoder_gradient_profile(const Network& net, const std::vector<Batch>& batches);

}  // namespace deinforeg

#endif  // DEINFOREG_NETWORK_HPP
