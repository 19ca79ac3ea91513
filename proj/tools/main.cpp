// Command-line entry point for the experiment suite.

#include <cstdio>
#include <exception>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "deinforeg/gradcheck.hpp"
#include "deinforeg/harness.hpp"

using namespace deinforeg;

namespace {

struct Common {
  std::string config;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "experiment config (JSON)")->check(CLI::ExistingFile);
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_option("--seed", c.seed, "run a single seed instead of the config's list");
  cmd->add_option("--workers", c.workers, "pipeline workers for decoupled training")
      ->check(CLI::PositiveNumber);
}

int run(ExperimentKind kind, const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_experiment_config(c.config);
  cfg.kind = kind;
  if (c.seed) cfg.seeds = {*c.seed};
  if (c.workers) {
    cfg.workers = *c.workers;
    if (kind == ExperimentKind::Speedup) cfg.speedup.workers = {1, *c.workers};
    if (kind == ExperimentKind::PipelineSim) cfg.pipeline.devices = *c.workers;
  }
  const auto res = run_experiment(cfg, c.out);
  std::fputs(summary_csv(res.summary).c_str(), stdout);
  return 0;
}

int gradcheck(const Common& c) {
  const std::uint64_t first = c.seed.value_or(1);
  const std::uint64_t count = c.seed ? 1 : 20;
  double worst = 0.0;
  std::string worst_name;
  for (std::uint64_t s = first; s < first + count; ++s) {
    for (const auto& r : gradcheck_suite(s)) {
      if (r.error > worst || worst_name.empty()) {
        worst = r.error;
        worst_name = r.name;
      }
      if (r.error >= 1e-4) {
        std::printf("seed %llu N=%zu C=%zu %-40s %.3e FAIL\n",
                    static_cast<unsigned long long>(s), r.rows, r.cols, r.name.c_str(), r.error);
      }
    }
  }
  std::printf("gradcheck: %llu seed(s), worst relative error %.3e (%s)\n",
              static_cast<unsigned long long>(count), worst, worst_name.c_str());
  return worst < 1e-4 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decoupled training with local information regularization"};
  app.require_subcommand(1);
  Common common;

  struct Sub {
    const char* name;
    const char* help;
    std::optional<ExperimentKind> kind;
  };
  const Sub subs[] = {
      {"train", "train one configuration over all seeds", ExperimentKind::Train},
      {"gradprofile", "per-module encoder gradient magnitudes per epoch", ExperimentKind::GradProfile},
      {"noise-sweep", "bp vs decoupled under label noise", ExperimentKind::NoiseSweep},
      {"alpha-sweep", "decoupled training over cross-entropy weights", ExperimentKind::AlphaSweep},
      {"ablation", "the seven local-loss term subsets", ExperimentKind::Ablation},
      {"depth-sweep", "bp vs decoupled over module counts", ExperimentKind::DepthSweep},
      {"pipeline-sim", "simulated schedules and Gantt traces", ExperimentKind::PipelineSim},
      {"speedup", "pipelined executor wall-clock vs one worker", ExperimentKind::Speedup},
      {"gradcheck", "finite-difference check of every op and loss", std::nullopt},
  };
  std::vector<std::pair<CLI::App*, std::optional<ExperimentKind>>> cmds;
  for (const auto& s : subs) {
    auto* cmd = app.add_subcommand(s.name, s.help);
    add_common(cmd, common);
    cmds.emplace_back(cmd, s.kind);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    for (const auto& [cmd, kind] : cmds) {
      if (!cmd->parsed()) continue;
      return kind ? run(*kind, common) : gradcheck(common);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
