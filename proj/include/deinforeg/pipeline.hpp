// Schedule simulation for bp / naive model parallel / decoupled training,
// and a real multi-worker executor for decoupled training.

#ifndef DEINFOREG_PIPELINE_HPP
#define DEINFOREG_PIPELINE_HPP

#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <deque>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "deinforeg/network.hpp"

namespace deinforeg {

// Simulator ----------------------------------------------------------------

struct ModuleCost {
  double forward = 0.0;
  double loss = 0.0;
  double backward = 0.0;
  double update = 0.0;
};

struct StageCost {
  std::vector<ModuleCost> modules;
  double transfer = 0.0;  // between adjacent devices

  /// Same cost for each of `depth` modules.
  static StageCost uniform(std::size_t depth, ModuleCost c, double transfer = 0.0);
  /// Throws DomainError on a negative or non-finite duration.
  void validate() const;
};

enum class StageKind { FW, LOSS, BW, UP, XFER };
std::string_view to_string(StageKind k);
StageKind stage_kind_from(std::string_view s);

enum class ScheduleMode { Bp, Nmp, DeInfoReg };
std::string_view to_string(ScheduleMode m);
ScheduleMode schedule_mode_from(std::string_view s);

/// XFER events sit on the link into `device` and do not occupy it.
struct ScheduleEvent {
  std::size_t device = 0;
  StageKind stage = StageKind::FW;
  std::size_t module = 0;  // 0-based
  std::size_t batch = 0;   // 0-based
  double start = 0.0;
  double end = 0.0;

  friend bool operator==(const ScheduleEvent&, const ScheduleEvent&) = default;
};

struct Schedule {
  double makespan = 0.0;
  std::vector<ScheduleEvent> events;
};

/// Device holding module l when L modules are split contiguously over
/// min(devices, L) devices.
std::size_t device_of(std::size_t module, std::size_t modules, std::size_t devices);

/// bp: everything on device 0; per batch FW_1..FW_L, LOSS (last module's
///     cost), BW_L..BW_1, UP_1..UP_L; batch b+1 starts after batch b.
/// nmp: the bp chain with each stage on its module's device and a transfer
///     on every device crossing of FW or BW.
/// deinforeg: a device runs FW for its modules once the upstream output has
///     arrived, hands the output on, then LOSS/BW/UP per module; the next
///     batch's FW waits for this device's last UP.
Schedule simulate(ScheduleMode mode, const StageCost& costs, std::size_t devices,
                  std::size_t batches = 1);

/// CSV: device,stage,module,batch,start,end sorted by start time.
void emit_gantt(const std::vector<ScheduleEvent>& events, const std::filesystem::path& path);
std::string gantt_csv(const std::vector<ScheduleEvent>& events);
std::vector<ScheduleEvent> parse_gantt(const std::string& csv);
std::vector<ScheduleEvent> load_gantt(const std::filesystem::path& path);

// Executor -----------------------------------------------------------------

/// Blocking FIFO with a fixed capacity. close() lets consumers drain what is
/// left; abort() also discards it and wakes everyone.
template <class T>
class BoundedQueue {
public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(capacity == 0 ? 1 : capacity) {}

  /// False if the queue was closed or aborted.
  bool push(T item) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return closed_ || items_.size() < capacity_; });
    if (closed_) return false;
    items_.push_back(std::move(item));
    not_empty_.notify_one();
    return true;
  }

  /// nullopt once closed and empty (or aborted).
  std::optional<T> pop() {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return closed_ || !items_.empty(); });
    if (items_.empty()) return std::nullopt;
    T item = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return item;
  }

  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    not_empty_.notify_all();
    not_full_.notify_all();
  }

  void abort() {
    std::lock_guard lock(mu_);
    closed_ = true;
    items_.clear();
    not_empty_.notify_all();
    not_full_.notify_all();
  }

  std::size_t capacity() const noexcept { return capacity_; }

private:
  std::size_t capacity_;
  std::mutex mu_;
  std::condition_variable not_empty_, not_full_;
  std::deque<T> items_;
  bool closed_ = false;
};

/// What travels between workers. The activation is a plain value, so it
/// has no link to the producing module's graph.
struct HandoffPacket {
  std::size_t batch = 0;
  Matrix activation;
  Matrix labels;
};

enum class PadKind { Sleep, Spin };

struct PipelineOptions {
  std::size_t workers = 1;
  std::size_t queue_capacity = 2;
  /// Extra per-module, per-batch compute time. Sleep stands in for work on
  /// a separate device; Spin burns the calling core.
  std::chrono::microseconds pad{0};
  PadKind pad_kind = PadKind::Sleep;
};

struct ModuleBatchMetrics {
  std::size_t module = 0;
  std::size_t batch = 0;
  LossBreakdown losses;
  double encoder_grad_mean_abs = 0.0;
};

struct PipelineStats {
  double seconds = 0.0;
  std::vector<double> epoch_seconds;
  std::size_t batches = 0;
  std::size_t workers = 0;
  std::vector<ModuleBatchMetrics> metrics;  // ordered by (batch, module)
};

/// Contiguous split of L modules over `workers` groups: [first, last).
std::vector<std::pair<std::size_t, std::size_t>> partition_modules(std::size_t modules,
                                                                   std::size_t workers);

/// Trains `net` (decoupled mode) over `epochs`, each a batch sequence, with
/// one thread per module group. Throws std::runtime_error naming the worker
/// if any worker fails; the network then holds whatever state it reached.
PipelineStats run_pipelined(Network& net, const std::vector<std::vector<Batch>>& epochs,
                            const PipelineOptions& opts);

/// Reference: the same batch sequence through Network::train_step_deinforeg,
/// with the same per-module padding.
PipelineStats run_sequential(Network& net, const std::vector<std::vector<Batch>>& epochs,
                             const PipelineOptions& opts);

}  // namespace deinforeg

#endif  // DEINFOREG_PIPELINE_HPP
