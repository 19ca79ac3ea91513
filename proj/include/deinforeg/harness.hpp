// Experiment configuration, the training/evaluation loop, and the scripted
// experiment suite. Every run writes metrics.jsonl (one line per epoch per
// seed per variant) and summary.csv (mean and sample std across seeds).
// Wall-clock readings go to timing.jsonl so that metrics.jsonl is
// reproducible byte for byte.

#ifndef DEINFOREG_HARNESS_HPP
#define DEINFOREG_HARNESS_HPP

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "deinforeg/data.hpp"
#include "deinforeg/network.hpp"
#include "deinforeg/pipeline.hpp"

namespace deinforeg {

enum class ExperimentKind {
  Train,
  GradProfile,
  NoiseSweep,
  AlphaSweep,
  Ablation,
  DepthSweep,
  PipelineSim,
  Speedup,
};

std::string_view to_string(ExperimentKind k);
ExperimentKind experiment_kind_from(std::string_view s);

struct DatasetConfig {
  std::string kind = "spirals";  // spirals | blobs | csv
  std::size_t classes = 3;
  std::size_t points = 3000;     // total, split evenly over classes
  double noise = 0.02;           // spirals
  double turns = 1.0;            // spirals
  std::size_t dim = 2;           // blobs
  double separation = 10.0;      // blobs
  double cluster_std = 1.0;      // blobs
  std::string path;              // csv
  std::string label_column = "label";
  bool has_header = true;
  bool standardize = true;
};

struct ArchConfig {
  std::size_t depth = 4;
  std::size_t width = 64;
  LayerKind activation = LayerKind::Tanh;
  bool batchnorm = false;
  ProjectorKind projector = ProjectorKind::Identity;
  std::size_t projector_width = 0;  // 0: same as width
};

struct PipelineSimConfig {
  StageCost costs;
  std::size_t devices = 4;
  std::size_t batches = 1;
};

struct SpeedupConfig {
  std::vector<std::size_t> workers{1, 4};
  double pad_ms = 10.0;
  std::string pad_kind = "sleep";  // sleep | spin
  std::size_t queue_capacity = 2;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::Train;
  DatasetConfig dataset;
  ArchConfig network;
  LossConfig loss;
  OptimizerConfig optimizer;
  TrainingMode mode = TrainingMode::DeInfoReg;
  std::size_t epochs = 100;
  std::size_t batch_size = 128;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::size_t workers = 1;

  std::vector<double> thetas{0.0, 0.2, 0.4, 0.6};
  std::vector<double> alphas{1e0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5};
  std::vector<std::size_t> depths{4, 8, 12};
  std::vector<TrainingMode> modes{TrainingMode::Bp, TrainingMode::DeInfoReg};

  PipelineSimConfig pipeline;
  SpeedupConfig speedup;

  /// Throws std::invalid_argument (or ShapeError) on any inconsistency;
  /// performs no training.
  void validate() const;
};

ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// One training run inside an experiment: the base config plus overrides.
struct Variant {
  std::string name;           // e.g. "mode=bp,theta=0.4"
  nlohmann::json tags;        // same information as JSON fields
  TrainingMode mode = TrainingMode::DeInfoReg;
  double theta = 0.0;
  std::optional<double> alpha;
  std::optional<LossTerms> terms;
  std::optional<std::size_t> depth;
};

/// Training variants an experiment kind expands to (empty for
/// pipeline-sim and speedup).
std::vector<Variant> expand_variants(const ExperimentConfig& cfg);

/// The seven non-empty subsets of {variance, invariance, covariance}.
std::vector<LossTerms> ablation_subsets();
std::string terms_name(const LossTerms& t);

/// Final-epoch figures of one (variant, seed) run, all derivable from its
/// metrics lines.
using RunSummary = std::map<std::string, double>;

struct SummaryRow {
  std::string run;
  std::string metric;
  double mean = 0.0;
  double std = 0.0;  // sample std; 0 for a single seed
  std::size_t n = 0;
};

struct ExperimentResult {
  std::vector<nlohmann::json> metrics;  // metrics.jsonl lines
  std::vector<nlohmann::json> timing;   // timing.jsonl lines
  std::vector<SummaryRow> summary;
  std::vector<ScheduleEvent> gantt;     // pipeline-sim only (deinforeg mode)
};

/// Prepared data for one seed: dataset with splits, standardized if
/// configured. Label noise is applied per variant by train_run.
Dataset make_dataset(const DatasetConfig& cfg, std::uint64_t seed);

/// Trains one variant for one seed, appending metrics lines.
RunSummary train_run(const ExperimentConfig& cfg, const Variant& v, std::uint64_t seed,
                     std::vector<nlohmann::json>& metrics, std::vector<nlohmann::json>& timing);

/// Runs the whole experiment in memory.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

/// Runs and writes metrics.jsonl, timing.jsonl, summary.csv (and the gantt
/// traces for pipeline-sim) into `out_dir`.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir);

/// Mean and sample std per (run, metric) over the given per-seed values.
std::vector<SummaryRow> summarize(
    const std::vector<std::pair<std::string, RunSummary>>& per_seed);

std::string summary_csv(const std::vector<SummaryRow>& rows);
std::vector<SummaryRow> parse_summary_csv(const std::string& csv);

/// Looks up a summary row; throws std::out_of_range if absent.
const SummaryRow& find_row(const std::vector<SummaryRow>& rows, const std::string& run,
                           const std::string& metric);

/// Smallest per-column std of the final module's row-normalized projector
/// output (eval mode) over `x`.
double embedding_min_std(const Network& net, const Matrix& x);

double accuracy(const std::vector<std::size_t>& pred, const std::vector<std::size_t>& truth);

}  // namespace deinforeg

#endif  // DEINFOREG_HARNESS_HPP
