#include "deinforeg/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json_util.hpp"

namespace deinforeg {

using nlohmann::json;

namespace {

constexpr std::pair<ExperimentKind, std::string_view> kKindNames[] = {
    {ExperimentKind::Train, "train"},
    {ExperimentKind::GradProfile, "gradprofile"},
    {ExperimentKind::NoiseSweep, "noise-sweep"},
    {ExperimentKind::AlphaSweep, "alpha-sweep"},
    {ExperimentKind::Ablation, "ablation"},
    {ExperimentKind::DepthSweep, "depth-sweep"},
    {ExperimentKind::PipelineSim, "pipeline-sim"},
    {ExperimentKind::Speedup, "speedup"},
};

std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace

std::string_view to_string(ExperimentKind k) {
  for (auto [kind, name] : kKindNames) {
    if (kind == k) return name;
  }
  return "?";
}

ExperimentKind experiment_kind_from(std::string_view s) {
  for (auto [kind, name] : kKindNames) {
    if (name == s) return kind;
  }
  throw std::invalid_argument("unknown experiment kind '" + std::string(s) + "'");
}

// Config JSON --------------------------------------------------------------

namespace {

DatasetConfig dataset_from_json(const json& j) {
  detail::check_keys(j,
                     {"kind", "classes", "points", "noise", "turns", "dim", "separation",
                      "cluster_std", "path", "label_column", "has_header", "standardize"},
                     "dataset");
  DatasetConfig d;
  detail::read_opt(j, "kind", d.kind);
  detail::read_opt(j, "classes", d.classes);
  detail::read_opt(j, "points", d.points);
  detail::read_opt(j, "noise", d.noise);
  detail::read_opt(j, "turns", d.turns);
  detail::read_opt(j, "dim", d.dim);
  detail::read_opt(j, "separation", d.separation);
  detail::read_opt(j, "cluster_std", d.cluster_std);
  detail::read_opt(j, "path", d.path);
  if (j.contains("label_column")) {
    const auto& c = j.at("label_column");
    d.label_column = c.is_number_unsigned() ? std::to_string(c.get<std::size_t>())
                                            : c.get<std::string>();
  }
  detail::read_opt(j, "has_header", d.has_header);
  detail::read_opt(j, "standardize", d.standardize);
  return d;
}

json to_json(const DatasetConfig& d) {
  return {{"kind", d.kind},
          {"classes", d.classes},
          {"points", d.points},
          {"noise", d.noise},
          {"turns", d.turns},
          {"dim", d.dim},
          {"separation", d.separation},
          {"cluster_std", d.cluster_std},
          {"path", d.path},
          {"label_column", d.label_column},
          {"has_header", d.has_header},
          {"standardize", d.standardize}};
}

LayerKind activation_from(const std::string& s) {
  if (s == "tanh") return LayerKind::Tanh;
  if (s == "relu") return LayerKind::Relu;
  throw std::invalid_argument("network: activation must be 'tanh' or 'relu', got '" + s + "'");
}

ArchConfig arch_from_json(const json& j) {
  detail::check_keys(j, {"depth", "width", "activation", "batchnorm", "projector", "projector_width"},
                     "network");
  ArchConfig a;
  detail::read_opt(j, "depth", a.depth);
  detail::read_opt(j, "width", a.width);
  if (j.contains("activation")) a.activation = activation_from(j.at("activation").get<std::string>());
  detail::read_opt(j, "batchnorm", a.batchnorm);
  if (j.contains("projector")) a.projector = projector_kind_from(j.at("projector").get<std::string>());
  detail::read_opt(j, "projector_width", a.projector_width);
  return a;
}

json to_json(const ArchConfig& a) {
  return {{"depth", a.depth},
          {"width", a.width},
          {"activation", a.activation == LayerKind::Relu ? "relu" : "tanh"},
          {"batchnorm", a.batchnorm},
          {"projector", to_string(a.projector)},
          {"projector_width", a.projector_width}};
}

ModuleCost module_cost_from_json(const json& j) {
  detail::check_keys(j, {"forward", "loss", "backward", "update"}, "pipeline cost");
  ModuleCost c;
  detail::read_opt(j, "forward", c.forward);
  detail::read_opt(j, "loss", c.loss);
  detail::read_opt(j, "backward", c.backward);
  detail::read_opt(j, "update", c.update);
  return c;
}

json to_json(const ModuleCost& c) {
  return {{"forward", c.forward}, {"loss", c.loss}, {"backward", c.backward}, {"update", c.update}};
}

PipelineSimConfig pipeline_from_json(const json& j) {
  detail::check_keys(j, {"modules", "uniform", "depth", "transfer", "devices", "batches"},
                     "pipeline");
  PipelineSimConfig p;
  if (j.contains("modules") && j.contains("uniform")) {
    throw std::invalid_argument("pipeline: give either 'modules' or 'uniform', not both");
  }
  if (j.contains("modules")) {
    for (const auto& m : j.at("modules")) p.costs.modules.push_back(module_cost_from_json(m));
  } else if (j.contains("uniform")) {
    const auto c = module_cost_from_json(j.at("uniform"));
    p.costs.modules.assign(j.value("depth", std::size_t{4}), c);
  } else if (j.contains("depth")) {
    throw std::invalid_argument("pipeline: 'depth' needs 'uniform'");
  }
  detail::read_opt(j, "transfer", p.costs.transfer);
  detail::read_opt(j, "devices", p.devices);
  detail::read_opt(j, "batches", p.batches);
  return p;
}

json to_json(const PipelineSimConfig& p) {
  json mods = json::array();
  for (const auto& m : p.costs.modules) mods.push_back(to_json(m));
  return {{"modules", mods},
          {"transfer", p.costs.transfer},
          {"devices", p.devices},
          {"batches", p.batches}};
}

SpeedupConfig speedup_from_json(const json& j) {
  detail::check_keys(j, {"workers", "pad_ms", "pad_kind", "queue_capacity"}, "speedup");
  SpeedupConfig s;
  detail::read_opt(j, "workers", s.workers);
  detail::read_opt(j, "pad_ms", s.pad_ms);
  detail::read_opt(j, "pad_kind", s.pad_kind);
  detail::read_opt(j, "queue_capacity", s.queue_capacity);
  return s;
}

json to_json(const SpeedupConfig& s) {
  return {{"workers", s.workers},
          {"pad_ms", s.pad_ms},
          {"pad_kind", s.pad_kind},
          {"queue_capacity", s.queue_capacity}};
}

std::size_t dataset_input_width(const DatasetConfig& d, std::size_t& classes) {
  if (d.kind == "spirals") {
    classes = d.classes;
    return 2;
  }
  if (d.kind == "blobs") {
    classes = d.classes;
    return d.dim;
  }
  const Dataset ds = load_csv(d.path, d.label_column, d.has_header);
  classes = ds.classes;
  return ds.features.cols();
}

NetworkSpec variant_spec(const ExperimentConfig& cfg, const Variant& v, std::size_t input_width,
                         std::size_t classes) {
  StackRecipe r;
  r.depth = v.depth.value_or(cfg.network.depth);
  r.input_width = input_width;
  r.width = cfg.network.width;
  r.classes = classes;
  r.activation = cfg.network.activation;
  r.batchnorm = cfg.network.batchnorm;
  r.projector = cfg.network.projector;
  r.projector_width = cfg.network.projector_width;
  r.loss = cfg.loss;
  if (v.alpha) r.loss.alpha = *v.alpha;
  if (v.terms) r.loss.terms = *v.terms;
  r.mode = v.mode;
  r.optimizer = cfg.optimizer;
  return make_network_spec(r);
}

}  // namespace

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("config: " + m); };
  if (dataset.kind != "spirals" && dataset.kind != "blobs" && dataset.kind != "csv") {
    fail("dataset.kind must be spirals, blobs or csv");
  }
  if (dataset.kind != "csv") {
    if (dataset.classes < 2) fail("dataset.classes must be >= 2");
    if (dataset.points < dataset.classes) fail("dataset.points must be >= dataset.classes");
    if (dataset.noise < 0.0 || dataset.cluster_std < 0.0) fail("dataset noise must be >= 0");
    if (dataset.kind == "blobs" && dataset.dim == 0) fail("dataset.dim must be >= 1");
  } else if (dataset.path.empty()) {
    fail("dataset.path is required for csv");
  }
  if (batch_size == 0) fail("batch_size must be >= 1");
  if (seeds.empty()) fail("seeds must not be empty");
  if (workers == 0) fail("workers must be >= 1");
  if (network.depth == 0 || network.width == 0) fail("network depth and width must be >= 1");
  for (double t : thetas) {
    if (!(t >= 0.0 && t <= 1.0)) fail("thetas must lie in [0, 1]");
  }
  for (double a : alphas) {
    if (!(a >= 0.0)) fail("alphas must be >= 0");
  }
  for (auto d : depths) {
    if (d == 0) fail("depths must be >= 1");
  }
  if (modes.empty()) fail("modes must not be empty");
  loss.validate();
  (void)optimizer_config_from_json(deinforeg::to_json(optimizer));

  if (kind == ExperimentKind::PipelineSim) {
    if (pipeline.costs.modules.empty()) fail("pipeline needs at least one module cost");
    if (pipeline.devices == 0) fail("pipeline.devices must be >= 1");
    pipeline.costs.validate();
    return;
  }
  if (kind == ExperimentKind::Speedup) {
    if (speedup.workers.empty()) fail("speedup.workers must not be empty");
    for (auto w : speedup.workers) {
      if (w == 0) fail("speedup.workers entries must be >= 1");
    }
    if (speedup.pad_ms < 0.0) fail("speedup.pad_ms must be >= 0");
    if (speedup.pad_kind != "sleep" && speedup.pad_kind != "spin") {
      fail("speedup.pad_kind must be sleep or spin");
    }
  }
  std::size_t classes = 0;
  const std::size_t in = dataset_input_width(dataset, classes);
  for (const auto& v : expand_variants(*this)) variant_spec(*this, v, in, classes).validate();
  if (kind == ExperimentKind::Speedup) {
    Variant v;
    variant_spec(*this, v, in, classes).validate();
  }
}

ExperimentConfig experiment_config_from_json(const json& j) {
  detail::check_keys(j,
                     {"kind", "dataset", "network", "loss", "optimizer", "mode", "epochs",
                      "batch_size", "seeds", "workers", "thetas", "alphas", "depths", "modes",
                      "pipeline", "speedup"},
                     "config");
  ExperimentConfig c;
  if (j.contains("kind")) c.kind = experiment_kind_from(j.at("kind").get<std::string>());
  if (j.contains("dataset")) c.dataset = dataset_from_json(j.at("dataset"));
  if (j.contains("network")) c.network = arch_from_json(j.at("network"));
  if (j.contains("loss")) c.loss = loss_config_from_json(j.at("loss"));
  if (j.contains("optimizer")) c.optimizer = optimizer_config_from_json(j.at("optimizer"));
  if (j.contains("mode")) c.mode = training_mode_from(j.at("mode").get<std::string>());
  detail::read_opt(j, "epochs", c.epochs);
  detail::read_opt(j, "batch_size", c.batch_size);
  detail::read_opt(j, "seeds", c.seeds);
  detail::read_opt(j, "workers", c.workers);
  detail::read_opt(j, "thetas", c.thetas);
  detail::read_opt(j, "alphas", c.alphas);
  detail::read_opt(j, "depths", c.depths);
  if (j.contains("modes")) {
    c.modes.clear();
    for (const auto& m : j.at("modes")) c.modes.push_back(training_mode_from(m.get<std::string>()));
  }
  if (j.contains("pipeline")) c.pipeline = pipeline_from_json(j.at("pipeline"));
  if (j.contains("speedup")) c.speedup = speedup_from_json(j.at("speedup"));
  return c;
}

json to_json(const ExperimentConfig& c) {
  json modes = json::array();
  for (auto m : c.modes) modes.push_back(to_string(m));
  return {{"kind", to_string(c.kind)},
          {"dataset", to_json(c.dataset)},
          {"network", to_json(c.network)},
          {"loss", deinforeg::to_json(c.loss)},
          {"optimizer", deinforeg::to_json(c.optimizer)},
          {"mode", to_string(c.mode)},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"seeds", c.seeds},
          {"workers", c.workers},
          {"thetas", c.thetas},
          {"alphas", c.alphas},
          {"depths", c.depths},
          {"modes", modes},
          {"pipeline", to_json(c.pipeline)},
          {"speedup", to_json(c.speedup)}};
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config '" + path.string() + "': " + e.what());
  }
  return experiment_config_from_json(j);
}

// Variants -----------------------------------------------------------------

std::vector<LossTerms> ablation_subsets() {
  // Order of the ablation table: singles, pairs, all three.
  return {{true, false, false}, {false, true, false}, {false, false, true}, {true, true, false},
          {true, false, true},  {false, true, true},  {true, true, true}};
}

std::string terms_name(const LossTerms& t) {
  std::string s;
  if (t.variance) s += "V";
  if (t.invariance) s += "I";
  if (t.covariance) s += "C";
  return s.empty() ? "none" : s;
}

std::vector<Variant> expand_variants(const ExperimentConfig& cfg) {
  std::vector<Variant> out;
  auto base = [](TrainingMode m) {
    Variant v;
    v.mode = m;
    v.name = "mode=" + std::string(to_string(m));
    v.tags = {{"mode", to_string(m)}};
    return v;
  };
  switch (cfg.kind) {
    case ExperimentKind::Train:
    case ExperimentKind::GradProfile:
      out.push_back(base(cfg.mode));
      break;
    case ExperimentKind::NoiseSweep:
      for (auto m : cfg.modes) {
        for (double t : cfg.thetas) {
          Variant v = base(m);
          v.theta = t;
          v.name += ",theta=" + fmt(t);
          v.tags["theta"] = t;
          out.push_back(v);
        }
      }
      break;
    case ExperimentKind::AlphaSweep:
      for (double a : cfg.alphas) {
        Variant v = base(TrainingMode::DeInfoReg);
        v.alpha = a;
        v.name += ",alpha=" + fmt(a);
        v.tags["alpha"] = a;
        out.push_back(v);
      }
      break;
    case ExperimentKind::Ablation:
      for (const auto& t : ablation_subsets()) {
        Variant v = base(TrainingMode::DeInfoReg);
        v.terms = t;
        v.name += ",terms=" + terms_name(t);
        v.tags["terms"] = terms_name(t);
        out.push_back(v);
      }
      break;
    case ExperimentKind::DepthSweep:
      for (auto m : cfg.modes) {
        for (auto d : cfg.depths) {
          Variant v = base(m);
          v.depth = d;
          v.name += ",depth=" + std::to_string(d);
          v.tags["depth"] = d;
          out.push_back(v);
        }
      }
      break;
    case ExperimentKind::PipelineSim:
    case ExperimentKind::Speedup:
      break;
  }
  return out;
}

// Training loop ------------------------------------------------------------

namespace {

// Independent random streams per seed.
struct Streams {
  Rng data, init, shuffle;
  std::uint64_t noise;
};

Streams streams(std::uint64_t seed) {
  Rng root(seed);
  return {root.fork(1), root.fork(2), root.fork(3), seed ^ 0x9E3779B97F4A7C15ULL};
}

// Batches that the loss can use (covariance and batch norm need 2+ rows).
std::vector<Batch> usable(std::vector<Batch> bs) {
  std::erase_if(bs, [](const Batch& b) { return b.x.rows() < 2; });
  return bs;
}

json losses_json(const LossBreakdown& b) {
  return {{"variance", b.variance},
          {"invariance", b.invariance},
          {"covariance", b.covariance},
          {"local", b.local_total},
          {"cross_entropy", b.cross_entropy},
          {"total", b.module_total}};
}

void accumulate(LossBreakdown& acc, const LossBreakdown& b) {
  acc.variance += b.variance;
  acc.invariance += b.invariance;
  acc.covariance += b.covariance;
  acc.local_total += b.local_total;
  acc.cross_entropy += b.cross_entropy;
  acc.module_total += b.module_total;
}

LossBreakdown divided(LossBreakdown b, double n) {
  b.variance /= n;
  b.invariance /= n;
  b.covariance /= n;
  b.local_total /= n;
  b.cross_entropy /= n;
  b.module_total /= n;
  return b;
}

std::vector<std::size_t> labels_of(const Dataset& ds, Split s) {
  std::vector<std::size_t> out;
  for (auto i : ds.rows(s)) out.push_back(ds.labels[i]);
  return out;
}

double now_seconds(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

double accuracy(const std::vector<std::size_t>& pred, const std::vector<std::size_t>& truth) {
  if (pred.size() != truth.size()) throw ShapeError("accuracy: length mismatch");
  if (pred.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

double embedding_min_std(const Network& net, const Matrix& x) {
  Matrix h = x;
  for (std::size_t l = 0; l < net.depth(); ++l) h = net.module(l).encoder().infer(h);
  const Matrix z = row_l2_normalize(net.module(net.depth() - 1).projector().infer(h),
                                    net.module(net.depth() - 1).loss_config().eps_norm);
  const double n = static_cast<double>(z.rows());
  double best = INFINITY;
  for (std::size_t j = 0; j < z.cols(); ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < z.rows(); ++i) mean += z(i, j);
    mean /= n;
    double var = 0.0;
    for (std::size_t i = 0; i < z.rows(); ++i) var += (z(i, j) - mean) * (z(i, j) - mean);
    best = std::min(best, std::sqrt(var / n));
  }
  return best;
}

Dataset make_dataset(const DatasetConfig& cfg, std::uint64_t seed) {
  Rng rng = streams(seed).data;
  Dataset ds;
  if (cfg.kind == "spirals") {
    ds = gen_spirals(cfg.classes, cfg.points / cfg.classes, cfg.noise, rng, cfg.turns);
  } else if (cfg.kind == "blobs") {
    ds = gen_blobs(cfg.classes, cfg.points / cfg.classes, cfg.dim, cfg.separation, rng,
                   cfg.cluster_std);
  } else if (cfg.kind == "csv") {
    ds = load_csv(cfg.path, cfg.label_column, cfg.has_header);
    stratified_split(ds, rng);
  } else {
    throw std::invalid_argument("unknown dataset kind '" + cfg.kind + "'");
  }
  if (cfg.standardize) standardize(ds);
  return ds;
}

RunSummary train_run(const ExperimentConfig& cfg, const Variant& v, std::uint64_t seed,
                     std::vector<json>& metrics, std::vector<json>& timing) {
  Streams st = streams(seed);
  Dataset ds = make_dataset(cfg.dataset, seed);
  if (v.theta > 0.0) ds = inject_label_noise(ds, {v.theta, st.noise}).data;

  Network net(variant_spec(cfg, v, ds.features.cols(), ds.classes), st.init);
  const Batch train_all = split_matrix(ds, Split::Train);
  const Batch val_all = split_matrix(ds, Split::Val);
  const Batch test_all = split_matrix(ds, Split::Test);
  const auto train_y = labels_of(ds, Split::Train);
  const auto val_y = labels_of(ds, Split::Val);
  const auto test_y = labels_of(ds, Split::Test);
  const auto in_order = usable(batches(ds, Split::Train, cfg.batch_size, false, st.shuffle));
  const bool pipelined = v.mode == TrainingMode::DeInfoReg && cfg.workers > 1;

  RunSummary summary;
  double best_test = 0.0;
  const auto t0 = std::chrono::steady_clock::now();

  auto record = [&](std::size_t epoch, const std::vector<LossBreakdown>& losses,
                    const std::vector<double>& grads) {
    json line = {{"experiment", to_string(cfg.kind)}, {"run", v.name}, {"seed", seed},
                 {"epoch", epoch}};
    for (const auto& [k, val] : v.tags.items()) line[k] = val;
    const double train_acc = accuracy(net.predict(train_all.x), train_y);
    const double val_acc = accuracy(net.predict(val_all.x), val_y);
    const double test_acc = accuracy(net.predict(test_all.x), test_y);
    json mod_acc = json::array();
    for (const auto& lg : net.module_logits(test_all.x)) mod_acc.push_back(accuracy(argmax_rows(lg), test_y));
    json lj = json::array();
    for (const auto& b : losses) lj.push_back(losses_json(b));
    const double min_std = embedding_min_std(net, test_all.x);
    line["train_acc"] = train_acc;
    line["val_acc"] = val_acc;
    line["test_acc"] = test_acc;
    line["module_test_acc"] = mod_acc;
    line["losses"] = lj;
    line["grad"] = grads;
    line["embed_min_std"] = min_std;
    metrics.push_back(std::move(line));
    timing.push_back({{"experiment", to_string(cfg.kind)}, {"run", v.name}, {"seed", seed},
                      {"epoch", epoch}, {"seconds", now_seconds(t0)}});

    best_test = std::max(best_test, test_acc);
    summary = RunSummary{{"train_acc", train_acc},
                         {"val_acc", val_acc},
                         {"test_acc", test_acc},
                         {"best_test_acc", best_test},
                         {"embed_min_std", min_std},
                         {"grad_first", grads.front()},
                         {"grad_last", grads.back()}};
  };

  // Epoch 0: the untrained network, with gradient magnitudes measured
  // without updating anything.
  record(0, {}, encoder_gradient_profile(net, in_order));

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto bs = usable(batches(ds, Split::Train, cfg.batch_size, true, st.shuffle));
    std::vector<LossBreakdown> loss_sum(net.depth());
    std::vector<double> grad_sum(net.depth(), 0.0);
    if (pipelined) {
      PipelineOptions opts;
      opts.workers = cfg.workers;
      const auto stats = run_pipelined(net, {bs}, opts);
      for (const auto& m : stats.metrics) {
        accumulate(loss_sum[m.module], m.losses);
        grad_sum[m.module] += m.encoder_grad_mean_abs;
      }
    } else {
      for (const auto& b : bs) {
        const auto rep = net.train_step(b.x, b.y);
        for (std::size_t l = 0; l < net.depth(); ++l) {
          accumulate(loss_sum[l], rep.losses[l]);
          grad_sum[l] += rep.encoder_grad_mean_abs[l];
        }
      }
    }
    const double n = static_cast<double>(std::max<std::size_t>(bs.size(), 1));
    for (auto& b : loss_sum) b = divided(b, n);
    for (auto& g : grad_sum) g /= n;
    record(epoch, loss_sum, grad_sum);
  }
  return summary;
}

// Summaries ----------------------------------------------------------------

std::vector<SummaryRow> summarize(const std::vector<std::pair<std::string, RunSummary>>& per_seed) {
  std::vector<std::string> runs;
  for (const auto& [run, _] : per_seed) {
    if (std::find(runs.begin(), runs.end(), run) == runs.end()) runs.push_back(run);
  }
  std::vector<SummaryRow> out;
  for (const auto& run : runs) {
    std::map<std::string, std::vector<double>> values;
    for (const auto& [r, s] : per_seed) {
      if (r != run) continue;
      for (const auto& [k, v] : s) values[k].push_back(v);
    }
    for (const auto& [metric, xs] : values) {
      SummaryRow row{run, metric, 0.0, 0.0, xs.size()};
      for (double x : xs) row.mean += x;
      row.mean /= static_cast<double>(xs.size());
      if (xs.size() > 1) {
        double ss = 0.0;
        for (double x : xs) ss += (x - row.mean) * (x - row.mean);
        row.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
      }
      out.push_back(row);
    }
  }
  return out;
}

std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::string out = "run,metric,mean,std,n\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%zu\n", r.mean, r.std, r.n);
    out += '"' + r.run + "\"," + r.metric + buf;
  }
  return out;
}

std::vector<SummaryRow> parse_summary_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line != "run,metric,mean,std,n") {
    throw std::invalid_argument("summary: missing header");
  }
  std::vector<SummaryRow> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.front() != '"') throw std::invalid_argument("summary: unquoted run field");
    const auto close = line.find('"', 1);
    if (close == std::string::npos) throw std::invalid_argument("summary: unterminated run field");
    SummaryRow r;
    r.run = line.substr(1, close - 1);
    std::stringstream ss(line.substr(close + 2));
    std::string f;
    std::getline(ss, r.metric, ',');
    std::getline(ss, f, ',');
    r.mean = std::stod(f);
    std::getline(ss, f, ',');
    r.std = std::stod(f);
    std::getline(ss, f, ',');
    r.n = std::stoul(f);
    out.push_back(r);
  }
  return out;
}

const SummaryRow& find_row(const std::vector<SummaryRow>& rows, const std::string& run,
                           const std::string& metric) {
  for (const auto& r : rows) {
    if (r.run == run && r.metric == metric) return r;
  }
  throw std::out_of_range("summary has no row run='" + run + "' metric='" + metric + "'");
}

// Experiments --------------------------------------------------------------

namespace {

ExperimentResult run_pipeline_sim(const ExperimentConfig& cfg) {
  ExperimentResult res;
  std::vector<std::pair<std::string, RunSummary>> per;
  for (auto mode : {ScheduleMode::Bp, ScheduleMode::Nmp, ScheduleMode::DeInfoReg}) {
    const auto s = simulate(mode, cfg.pipeline.costs, cfg.pipeline.devices, cfg.pipeline.batches);
    const std::string run = "mode=" + std::string(to_string(mode));
    res.metrics.push_back({{"experiment", "pipeline-sim"},
                           {"run", run},
                           {"mode", to_string(mode)},
                           {"devices", cfg.pipeline.devices},
                           {"batches", cfg.pipeline.batches},
                           {"makespan", s.makespan},
                           {"events", s.events.size()}});
    per.push_back({run, {{"makespan", s.makespan}}});
    if (mode == ScheduleMode::DeInfoReg) res.gantt = s.events;
  }
  res.summary = summarize(per);
  return res;
}

ExperimentResult run_speedup(const ExperimentConfig& cfg) {
  ExperimentResult res;
  std::vector<std::pair<std::string, RunSummary>> per;
  PipelineOptions opts;
  opts.queue_capacity = cfg.speedup.queue_capacity;
  opts.pad = std::chrono::microseconds(static_cast<long long>(cfg.speedup.pad_ms * 1000.0));
  opts.pad_kind = cfg.speedup.pad_kind == "spin" ? PadKind::Spin : PadKind::Sleep;
  Variant v;
  v.mode = TrainingMode::DeInfoReg;

  for (auto seed : cfg.seeds) {
    Streams st = streams(seed);
    const Dataset ds = make_dataset(cfg.dataset, seed);
    const Network initial(variant_spec(cfg, v, ds.features.cols(), ds.classes), st.init);
    std::vector<std::vector<Batch>> epochs;
    for (std::size_t e = 0; e < std::max<std::size_t>(cfg.epochs, 1); ++e) {
      epochs.push_back(usable(batches(ds, Split::Train, cfg.batch_size, true, st.shuffle)));
    }
    const Batch test = split_matrix(ds, Split::Test);
    const auto test_y = labels_of(ds, Split::Test);

    std::optional<Network> reference;
    double base_seconds = 0.0;
    for (auto w : cfg.speedup.workers) {
      Network net = initial;
      opts.workers = w;
      const auto stats = run_pipelined(net, epochs, opts);
      double epoch_mean = 0.0;
      for (double s : stats.epoch_seconds) epoch_mean += s;
      epoch_mean /= static_cast<double>(stats.epoch_seconds.size());
      if (!reference) {
        reference = net;
        base_seconds = epoch_mean;
      }
      const std::string run = "workers=" + std::to_string(w);
      res.metrics.push_back({{"experiment", "speedup"},
                             {"run", run},
                             {"seed", seed},
                             {"workers", w},
                             {"epochs", epochs.size()},
                             {"test_acc", accuracy(net.predict(test.x), test_y)},
                             {"params_match_first", net.same_params(*reference)}});
      res.timing.push_back({{"experiment", "speedup"},
                            {"run", run},
                            {"seed", seed},
                            {"workers", w},
                            {"epoch_seconds", stats.epoch_seconds},
                            {"seconds", stats.seconds}});
      per.push_back({run, {{"epoch_seconds", epoch_mean}, {"speedup", base_seconds / epoch_mean}}});
    }
  }
  res.summary = summarize(per);
  return res;
}

void write_lines(const std::vector<json>& lines, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write '" + path.string() + "'");
  for (const auto& l : lines) f << l.dump() << '\n';
  if (!f) throw std::runtime_error("write failed for '" + path.string() + "'");
}

void write_text(const std::string& text, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write '" + path.string() + "'");
  f << text;
  if (!f) throw std::runtime_error("write failed for '" + path.string() + "'");
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.kind == ExperimentKind::PipelineSim) return run_pipeline_sim(cfg);
  if (cfg.kind == ExperimentKind::Speedup) return run_speedup(cfg);
  ExperimentResult res;
  std::vector<std::pair<std::string, RunSummary>> per;
  for (const auto& v : expand_variants(cfg)) {
    for (auto seed : cfg.seeds) {
      per.push_back({v.name, train_run(cfg, v, seed, res.metrics, res.timing)});
    }
  }
  res.summary = summarize(per);
  return res;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create '" + out_dir.string() + "': " + ec.message());
  ExperimentResult res = run_experiment(cfg);
  write_lines(res.metrics, out_dir / "metrics.jsonl");
  write_lines(res.timing, out_dir / "timing.jsonl");
  write_text(summary_csv(res.summary), out_dir / "summary.csv");
  if (cfg.kind == ExperimentKind::PipelineSim) {
    emit_gantt(res.gantt, out_dir / "gantt.csv");
    for (auto mode : {ScheduleMode::Bp, ScheduleMode::Nmp}) {
      const auto s = simulate(mode, cfg.pipeline.costs, cfg.pipeline.devices, cfg.pipeline.batches);
      emit_gantt(s.events, out_dir / ("gantt_" + std::string(to_string(mode)) + ".csv"));
    }
  }
  return res;
}

}  // namespace deinforeg
