#include "deinforeg/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace deinforeg {

// Costs / names ------------------------------------------------------------

StageCost StageCost::uniform(std::size_t depth, ModuleCost c, double transfer) {
  StageCost s;
  s.modules.assign(depth, c);
  s.transfer = transfer;
  return s;
}

void StageCost::validate() const {
  auto check = [](double v, const char* what) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw DomainError(std::string("stage cost ") + what + " must be finite and >= 0");
    }
  };
  for (const auto& m : modules) {
    check(m.forward, "forward");
    check(m.loss, "loss");
    check(m.backward, "backward");
    check(m.update, "update");
  }
  check(transfer, "transfer");
}

std::string_view to_string(StageKind k) {
  switch (k) {
    case StageKind::FW: return "FW";
    case StageKind::LOSS: return "LOSS";
    case StageKind::BW: return "BW";
    case StageKind::UP: return "UP";
    case StageKind::XFER: return "XFER";
  }
  return "?";
}

StageKind stage_kind_from(std::string_view s) {
  for (auto k : {StageKind::FW, StageKind::LOSS, StageKind::BW, StageKind::UP, StageKind::XFER}) {
    if (to_string(k) == s) return k;
  }
  throw std::invalid_argument("unknown stage kind '" + std::string(s) + "'");
}

std::string_view to_string(ScheduleMode m) {
  switch (m) {
    case ScheduleMode::Bp: return "bp";
    case ScheduleMode::Nmp: return "nmp";
    case ScheduleMode::DeInfoReg: return "deinforeg";
  }
  return "?";
}

ScheduleMode schedule_mode_from(std::string_view s) {
  for (auto m : {ScheduleMode::Bp, ScheduleMode::Nmp, ScheduleMode::DeInfoReg}) {
    if (to_string(m) == s) return m;
  }
  throw std::invalid_argument("unknown schedule mode '" + std::string(s) + "'");
}

std::size_t device_of(std::size_t module, std::size_t modules, std::size_t devices) {
  const std::size_t d = std::min(devices, modules);
  return module * d / modules;
}

// Simulator ----------------------------------------------------------------
//
// Tasks are emitted in an order that is both topological and consistent with
// each device's execution order, so one pass of earliest-start assignment
// gives the schedule.

namespace {

class Sim {
public:
  explicit Sim(std::size_t devices) : free_(devices, 0.0) {}

  /// Runs a stage on `device` after `ready`; returns its end time.
  double run(std::size_t device, StageKind kind, std::size_t module, std::size_t batch,
             double duration, double ready) {
    const double start = std::max(free_[device], ready);
    const double end = start + duration;
    free_[device] = end;
    events_.push_back({device, kind, module, batch, start, end});
    return end;
  }

  /// Moves data produced at `ready` from device `from` to `to`.
  double transfer(std::size_t from, std::size_t to, std::size_t module, std::size_t batch,
                  double duration, double ready) {
    if (from == to) return ready;
    events_.push_back({to, StageKind::XFER, module, batch, ready, ready + duration});
    return ready + duration;
  }

  Schedule finish() {
    Schedule s;
    for (const auto& e : events_) s.makespan = std::max(s.makespan, e.end);
    s.events = std::move(events_);
    return s;
  }

private:
  std::vector<double> free_;
  std::vector<ScheduleEvent> events_;
};

// bp and nmp share one chain; bp puts every stage on device 0.
Schedule simulate_chain(const StageCost& c, std::size_t devices, std::size_t batches, bool spread) {
  const std::size_t L = c.modules.size();
  auto dev = [&](std::size_t l) { return spread ? device_of(l, L, devices) : 0; };
  Sim sim(spread ? std::min(devices, L) : 1);
  double t = 0.0;
  for (std::size_t b = 0; b < batches; ++b) {
    for (std::size_t l = 0; l < L; ++l) {
      if (l > 0) t = sim.transfer(dev(l - 1), dev(l), l, b, c.transfer, t);
      t = sim.run(dev(l), StageKind::FW, l, b, c.modules[l].forward, t);
    }
    t = sim.run(dev(L - 1), StageKind::LOSS, L - 1, b, c.modules[L - 1].loss, t);
    for (std::size_t l = L; l-- > 0;) {
      if (l + 1 < L) t = sim.transfer(dev(l + 1), dev(l), l, b, c.transfer, t);
      t = sim.run(dev(l), StageKind::BW, l, b, c.modules[l].backward, t);
    }
    for (std::size_t l = 0; l < L; ++l) {
      t = sim.run(dev(l), StageKind::UP, l, b, c.modules[l].update, t);
    }
  }
  return sim.finish();
}

Schedule simulate_decoupled(const StageCost& c, std::size_t devices, std::size_t batches) {
  const std::size_t L = c.modules.size();
  const std::size_t D = std::min(devices, L);
  Sim sim(D);
  for (std::size_t b = 0; b < batches; ++b) {
    double arrived = 0.0;  // upstream output of batch b on its way down
    std::size_t l = 0;
    for (std::size_t d = 0; d < D; ++d) {
      const std::size_t first = l;
      while (l < L && device_of(l, L, devices) == d) ++l;
      if (first > 0) arrived = sim.transfer(d - 1, d, first, b, c.transfer, arrived);
      double t = arrived;
      for (std::size_t m = first; m < l; ++m) {
        t = sim.run(d, StageKind::FW, m, b, c.modules[m].forward, t);
      }
      arrived = t;
      for (std::size_t m = first; m < l; ++m) {
        t = sim.run(d, StageKind::LOSS, m, b, c.modules[m].loss, t);
        t = sim.run(d, StageKind::BW, m, b, c.modules[m].backward, t);
        t = sim.run(d, StageKind::UP, m, b, c.modules[m].update, t);
      }
    }
  }
  return sim.finish();
}

}  // namespace

Schedule simulate(ScheduleMode mode, const StageCost& costs, std::size_t devices,
                  std::size_t batches) {
  if (costs.modules.empty()) throw DomainError("simulate: zero modules");
  if (devices == 0) throw DomainError("simulate: zero devices");
  costs.validate();
  switch (mode) {
    case ScheduleMode::Bp: return simulate_chain(costs, devices, batches, false);
    case ScheduleMode::Nmp: return simulate_chain(costs, devices, batches, true);
    case ScheduleMode::DeInfoReg: return simulate_decoupled(costs, devices, batches);
  }
  throw DomainError("simulate: bad mode");
}

// Gantt --------------------------------------------------------------------

std::string gantt_csv(const std::vector<ScheduleEvent>& events) {
  std::vector<ScheduleEvent> sorted = events;
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const auto& a, const auto& b) { return a.start < b.start; });
  std::string out = "device,stage,module,batch,start,end\n";
  char buf[64];
  for (const auto& e : sorted) {
    out += std::to_string(e.device) + ',' + std::string(to_string(e.stage)) + ',' +
           std::to_string(e.module) + ',' + std::to_string(e.batch) + ',';
    std::snprintf(buf, sizeof buf, "%.17g", e.start);
    out += buf;
    out += ',';
    std::snprintf(buf, sizeof buf, "%.17g", e.end);
    out += buf;
    out += '\n';
  }
  return out;
}

void emit_gantt(const std::vector<ScheduleEvent>& events, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write gantt trace '" + path.string() + "'");
  f << gantt_csv(events);
  if (!f) throw std::runtime_error("write failed for gantt trace '" + path.string() + "'");
}

std::vector<ScheduleEvent> parse_gantt(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line != "device,stage,module,batch,start,end") {
    throw std::invalid_argument("gantt trace: missing header");
  }
  std::vector<ScheduleEvent> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 6) {
      throw std::invalid_argument("gantt trace line " + std::to_string(lineno) +
                                  ": expected 6 fields");
    }
    try {
      out.push_back({std::stoul(f[0]), stage_kind_from(f[1]), std::stoul(f[2]), std::stoul(f[3]),
                     std::stod(f[4]), std::stod(f[5])});
    } catch (const std::exception& e) {
      throw std::invalid_argument("gantt trace line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::vector<ScheduleEvent> load_gantt(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read gantt trace '" + path.string() + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_gantt(ss.str());
}

// Executor -----------------------------------------------------------------

std::vector<std::pair<std::size_t, std::size_t>> partition_modules(std::size_t modules,
                                                                   std::size_t workers) {
  if (workers == 0) throw DomainError("pipeline needs at least one worker");
  if (modules == 0) throw DomainError("pipeline needs at least one module");
  const std::size_t w = std::min(workers, modules);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t first = 0;
  for (std::size_t i = 0; i < w; ++i) {
    std::size_t last = first;
    while (last < modules && device_of(last, modules, w) == i) ++last;
    out.emplace_back(first, last);
    first = last;
  }
  return out;
}

namespace {

void pad_for(std::chrono::microseconds d, PadKind kind) {
  if (d.count() <= 0) return;
  if (kind == PadKind::Sleep) {
    std::this_thread::sleep_for(d);
    return;
  }
  const auto until = std::chrono::steady_clock::now() + d;
  while (std::chrono::steady_clock::now() < until) {
  }
}

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0, Clock::time_point t) {
  return std::chrono::duration<double>(t - t0).count();
}

// Turns completion times of each epoch's last batch into per-epoch spans.
std::vector<double> epoch_spans(const std::vector<double>& ends) {
  std::vector<double> out;
  double prev = 0.0;
  for (double e : ends) {
    out.push_back(e - prev);
    prev = e;
  }
  return out;
}

// Single collector for per-module metrics from all workers.
class Collector {
public:
  void add(ModuleBatchMetrics m) {
    std::lock_guard lock(mu_);
    items_.push_back(std::move(m));
  }
  std::vector<ModuleBatchMetrics> take() {
    std::lock_guard lock(mu_);
    auto out = std::move(items_);
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
      return a.batch != b.batch ? a.batch < b.batch : a.module < b.module;
    });
    return out;
  }

private:
  std::mutex mu_;
  std::vector<ModuleBatchMetrics> items_;
};

}  // namespace

PipelineStats run_pipelined(Network& net, const std::vector<std::vector<Batch>>& epochs,
                            const PipelineOptions& opts) {
  if (net.spec().mode != TrainingMode::DeInfoReg) {
    throw DomainError("run_pipelined needs a deinforeg-mode network");
  }
  const auto groups = partition_modules(net.depth(), opts.workers);
  const std::size_t W = groups.size();

  std::vector<std::size_t> epoch_last;  // global index of each epoch's last batch
  std::size_t total = 0;
  for (const auto& e : epochs) {
    total += e.size();
    epoch_last.push_back(total);  // one past
  }

  // queues[w] feeds worker w.
  std::vector<std::unique_ptr<BoundedQueue<HandoffPacket>>> queues;
  for (std::size_t w = 0; w < W; ++w) {
    queues.push_back(std::make_unique<BoundedQueue<HandoffPacket>>(opts.queue_capacity));
  }
  auto abort_all = [&] {
    for (auto& q : queues) q->abort();
  };

  // Each worker owns its modules for the duration of the run.
  std::vector<std::vector<Module>> owned(W);
  for (std::size_t w = 0; w < W; ++w) {
    for (std::size_t l = groups[w].first; l < groups[w].second; ++l) {
      owned[w].push_back(std::move(net.modules()[l]));
    }
  }

  Collector collector;
  std::mutex err_mu;
  std::string error;
  std::vector<double> finished(total, 0.0);  // written by the last worker only
  const auto t0 = Clock::now();

  auto worker = [&](std::size_t w) {
    try {
      auto& mods = owned[w];
      BoundedQueue<HandoffPacket>* out = w + 1 < W ? queues[w + 1].get() : nullptr;
      while (auto pkt = queues[w]->pop()) {
        std::vector<PendingModuleStep> pending;
        pending.reserve(mods.size());
        const Matrix* x = &pkt->activation;
        for (auto& m : mods) {
          pending.push_back(begin_module_step(m, *x, pkt->labels));
          x = &pending.back().output();
        }
        if (out && !out->push({pkt->batch, *x, pkt->labels})) return;
        for (std::size_t i = 0; i < mods.size(); ++i) {
          auto r = finish_module_step(mods[i], std::move(pending[i]));
          pad_for(opts.pad, opts.pad_kind);
          collector.add({groups[w].first + i, pkt->batch, r.losses, r.encoder_grad_mean_abs});
        }
        if (!out) finished[pkt->batch] = since(t0, Clock::now());
      }
      if (out) out->close();
    } catch (const std::exception& e) {
      {
        std::lock_guard lock(err_mu);
        if (error.empty()) error = "pipeline worker " + std::to_string(w) + " failed: " + e.what();
      }
      abort_all();
    }
  };

  {
    std::vector<std::jthread> threads;
    threads.reserve(W);
    for (std::size_t w = 0; w < W; ++w) threads.emplace_back(worker, w);
    std::size_t index = 0;
    for (const auto& e : epochs) {
      for (const auto& b : e) {
        if (!queues[0]->push({index++, b.x, b.y})) break;
      }
    }
    queues[0]->close();
  }  // join

  for (std::size_t w = 0; w < W; ++w) {
    for (std::size_t i = 0; i < owned[w].size(); ++i) {
      net.modules()[groups[w].first + i] = std::move(owned[w][i]);
    }
  }
  if (!error.empty()) throw std::runtime_error(error);

  PipelineStats st;
  st.seconds = since(t0, Clock::now());
  st.batches = total;
  st.workers = W;
  std::vector<double> ends;
  for (std::size_t last : epoch_last) ends.push_back(last == 0 ? 0.0 : finished[last - 1]);
  st.epoch_seconds = epoch_spans(ends);
  st.metrics = collector.take();
  return st;
}

PipelineStats run_sequential(Network& net, const std::vector<std::vector<Batch>>& epochs,
                             const PipelineOptions& opts) {
  PipelineStats st;
  st.workers = 1;
  const auto t0 = Clock::now();
  std::vector<double> ends;
  std::size_t index = 0;
  for (const auto& e : epochs) {
    for (const auto& b : e) {
      auto rep = net.train_step_deinforeg(b.x, b.y);
      for (std::size_t l = 0; l < net.depth(); ++l) {
        pad_for(opts.pad, opts.pad_kind);
        st.metrics.push_back({l, index, rep.losses[l], rep.encoder_grad_mean_abs[l]});
      }
      ++index;
    }
    ends.push_back(since(t0, Clock::now()));
  }
  st.seconds = since(t0, Clock::now());
  st.batches = index;
  st.epoch_seconds = epoch_spans(ends);
  return st;
}

}  // namespace deinforeg
