#include "deinforeg/network.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

#include "json_util.hpp"

namespace deinforeg {

using nlohmann::json;

std::string_view to_string(TrainingMode m) { return m == TrainingMode::Bp ? "bp" : "deinforeg"; }

TrainingMode training_mode_from(std::string_view s) {
  if (s == "bp") return TrainingMode::Bp;
  if (s == "deinforeg") return TrainingMode::DeInfoReg;
  throw std::invalid_argument("unknown training mode '" + std::string(s) + "'");
}

void NetworkSpec::validate() const {
  if (modules.empty()) throw ShapeError("network needs at least one module");
  if (input_width == 0) throw ShapeError("network input width is zero");
  if (classes < 2) throw ShapeError("network needs at least two classes");
  std::size_t w = input_width;
  for (std::size_t l = 0; l < modules.size(); ++l) {
    const auto& m = modules[l];
    const std::size_t h = output_width(m.encoder, w);
    const std::size_t e = output_width(m.projector, h);
    const std::size_t k = output_width(m.classifier, e);
    if (k != classes) {
      throw ShapeError("module " + std::to_string(l + 1) + ": classifier emits " +
                       std::to_string(k) + " logits for " + std::to_string(classes) +
                       " classes");
    }
    m.loss.validate();
    w = h;
  }
}

// JSON ---------------------------------------------------------------------

json to_json(const LossConfig& c) {
  return {{"gamma", c.gamma},
          {"eps_norm", c.eps_norm},
          {"alpha", c.alpha},
          {"variance_divisor", to_string(c.variance_divisor)},
          {"invariance_divisor", to_string(c.invariance_divisor)},
          {"center_before_sim", c.center_before_sim},
          {"terms",
           {{"variance", c.terms.variance},
            {"invariance", c.terms.invariance},
            {"covariance", c.terms.covariance}}}};
}

LossConfig loss_config_from_json(const json& j) {
  detail::check_keys(j,
                     {"gamma", "eps_norm", "alpha", "variance_divisor", "invariance_divisor",
                      "center_before_sim", "terms"},
                     "loss");
  LossConfig c;
  detail::read_opt(j, "gamma", c.gamma);
  detail::read_opt(j, "eps_norm", c.eps_norm);
  detail::read_opt(j, "alpha", c.alpha);
  detail::read_opt(j, "center_before_sim", c.center_before_sim);
  if (j.contains("variance_divisor")) {
    c.variance_divisor = variance_divisor_from(j.at("variance_divisor").get<std::string>());
  }
  if (j.contains("invariance_divisor")) {
    c.invariance_divisor = invariance_divisor_from(j.at("invariance_divisor").get<std::string>());
  }
  if (j.contains("terms")) {
    const auto& t = j.at("terms");
    detail::check_keys(t, {"variance", "invariance", "covariance"}, "loss.terms");
    detail::read_opt(t, "variance", c.terms.variance);
    detail::read_opt(t, "invariance", c.terms.invariance);
    detail::read_opt(t, "covariance", c.terms.covariance);
  }
  c.validate();
  return c;
}

json to_json(const OptimizerConfig& c) {
  return {{"kind", c.kind == OptimizerKind::Sgd ? "sgd" : "adam"},
          {"lr", c.lr},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.adam_eps}};
}

OptimizerConfig optimizer_config_from_json(const json& j) {
  detail::check_keys(j, {"kind", "lr", "momentum", "weight_decay", "beta1", "beta2", "eps"},
                     "optimizer");
  OptimizerConfig c;
  if (j.contains("kind")) {
    const auto k = j.at("kind").get<std::string>();
    if (k == "sgd") c.kind = OptimizerKind::Sgd;
    else if (k == "adam") c.kind = OptimizerKind::Adam;
    else throw std::invalid_argument("optimizer: unknown kind '" + k + "'");
  }
  detail::read_opt(j, "lr", c.lr);
  detail::read_opt(j, "momentum", c.momentum);
  detail::read_opt(j, "weight_decay", c.weight_decay);
  detail::read_opt(j, "beta1", c.beta1);
  detail::read_opt(j, "beta2", c.beta2);
  detail::read_opt(j, "eps", c.adam_eps);
  if (!(c.lr > 0.0)) throw std::invalid_argument("optimizer: lr must be positive");
  if (c.momentum < 0.0 || c.momentum >= 1.0) {
    throw std::invalid_argument("optimizer: momentum must be in [0,1)");
  }
  return c;
}

json to_json(const StackSpec& stack) {
  json out = json::array();
  for (const auto& l : stack) {
    switch (l.kind) {
      case LayerKind::Dense: out.push_back("dense:" + std::to_string(l.units)); break;
      case LayerKind::BatchNorm: out.push_back("batchnorm"); break;
      case LayerKind::Relu: out.push_back("relu"); break;
      case LayerKind::Tanh: out.push_back("tanh"); break;
    }
  }
  return out;
}

StackSpec stack_spec_from_json(const json& j) {
  if (!j.is_array()) throw std::invalid_argument("layer stack must be a JSON array");
  StackSpec out;
  for (const auto& e : j) {
    const auto s = e.get<std::string>();
    if (s == "batchnorm") out.push_back(LayerSpec::batchnorm());
    else if (s == "relu") out.push_back(LayerSpec::relu());
    else if (s == "tanh") out.push_back(LayerSpec::tanh());
    else if (s.rfind("dense:", 0) == 0) {
      std::size_t pos = 0;
      const auto units = std::stoul(s.substr(6), &pos);
      if (pos != s.size() - 6 || units == 0) {
        throw std::invalid_argument("bad dense layer '" + s + "'");
      }
      out.push_back(LayerSpec::dense(units));
    } else {
      throw std::invalid_argument("unknown layer '" + s + "'");
    }
  }
  return out;
}

json to_json(const NetworkSpec& spec) {
  json mods = json::array();
  for (const auto& m : spec.modules) {
    mods.push_back({{"encoder", to_json(m.encoder)},
                    {"projector", to_json(m.projector)},
                    {"classifier", to_json(m.classifier)},
                    {"loss", to_json(m.loss)}});
  }
  return {{"input_width", spec.input_width},
          {"classes", spec.classes},
          {"mode", to_string(spec.mode)},
          {"optimizer", to_json(spec.optimizer)},
          {"modules", mods}};
}

NetworkSpec network_spec_from_json(const json& j) {
  detail::check_keys(j, {"input_width", "classes", "mode", "optimizer", "modules"}, "network");
  NetworkSpec s;
  s.input_width = j.at("input_width").get<std::size_t>();
  s.classes = j.at("classes").get<std::size_t>();
  if (j.contains("mode")) s.mode = training_mode_from(j.at("mode").get<std::string>());
  if (j.contains("optimizer")) s.optimizer = optimizer_config_from_json(j.at("optimizer"));
  for (const auto& m : j.at("modules")) {
    detail::check_keys(m, {"encoder", "projector", "classifier", "loss"}, "module");
    ModuleSpec ms;
    ms.encoder = stack_spec_from_json(m.at("encoder"));
    if (m.contains("projector")) ms.projector = stack_spec_from_json(m.at("projector"));
    ms.classifier = stack_spec_from_json(m.at("classifier"));
    if (m.contains("loss")) ms.loss = loss_config_from_json(m.at("loss"));
    s.modules.push_back(std::move(ms));
  }
  s.validate();
  return s;
}

std::string_view to_string(ProjectorKind k) {
  switch (k) {
    case ProjectorKind::Identity: return "identity";
    case ProjectorKind::Linear: return "linear";
    case ProjectorKind::Mlp: return "mlp";
  }
  return "?";
}

ProjectorKind projector_kind_from(std::string_view s) {
  for (auto k : {ProjectorKind::Identity, ProjectorKind::Linear, ProjectorKind::Mlp}) {
    if (to_string(k) == s) return k;
  }
  throw std::invalid_argument("unknown projector kind '" + std::string(s) + "'");
}

NetworkSpec make_network_spec(const StackRecipe& r) {
  NetworkSpec s;
  s.input_width = r.input_width;
  s.classes = r.classes;
  s.mode = r.mode;
  s.optimizer = r.optimizer;
  auto activation = [&](StackSpec& st) {
    if (r.batchnorm) st.push_back(LayerSpec::batchnorm());
    st.push_back(r.activation == LayerKind::Relu ? LayerSpec::relu() : LayerSpec::tanh());
  };
  for (std::size_t l = 0; l < r.depth; ++l) {
    ModuleSpec m;
    m.encoder.push_back(LayerSpec::dense(r.width));
    activation(m.encoder);
    const std::size_t p = r.projector_width == 0 ? r.width : r.projector_width;
    if (r.projector == ProjectorKind::Mlp) {
      for (int i = 0; i < 2; ++i) {
        m.projector.push_back(LayerSpec::dense(r.width));
        m.projector.push_back(LayerSpec::batchnorm());
        m.projector.push_back(LayerSpec::relu());
      }
    }
    if (r.projector != ProjectorKind::Identity) m.projector.push_back(LayerSpec::dense(p));
    activation(m.classifier);
    m.classifier.push_back(LayerSpec::dense(r.classes));
    m.loss = r.loss;
    s.modules.push_back(std::move(m));
  }
  s.validate();
  return s;
}

// Module -------------------------------------------------------------------

Module::Module(const ModuleSpec& spec, std::size_t input_width, std::size_t /*classes*/,
               const OptimizerConfig& opt, Rng& rng, std::size_t index)
    : loss_(spec.loss), opt_(opt) {
  const std::string p = "m" + std::to_string(index + 1);
  encoder_ = Block(spec.encoder, input_width, rng, p + ".encoder");
  projector_ = Block(spec.projector, encoder_.output_width(), rng, p + ".projector");
  classifier_ = Block(spec.classifier, projector_.output_width(), rng, p + ".classifier");
}

void Module::set_loss_config(const LossConfig& cfg) {
  cfg.validate();
  loss_ = cfg;
}

Module::Nodes Module::append_train_graph(Graph& g, NodeId input, const Matrix& labels,
                                         bool update_stats) {
  Nodes n;
  n.encoder_params = encoder_.bind(g);
  n.projector_params = projector_.bind(g);
  n.classifier_params = classifier_.bind(g);
  n.hidden = encoder_.forward(g, n.encoder_params, input, Mode::Train, update_stats);
  NodeId embedding = projector_.forward(g, n.projector_params, n.hidden, Mode::Train, update_stats);
  n.local = local_loss(g, embedding, labels, loss_);
  // The classifier sees the same embedding, recomputed from a detached
  // encoder output so cross-entropy reaches the projector but not the encoder.
  NodeId ce_embedding =
      projector_.forward(g, n.projector_params, g.detach(n.hidden), Mode::Train, false);
  n.logits = classifier_.forward(g, n.classifier_params, ce_embedding, Mode::Train, update_stats);
  n.cross_entropy = cross_entropy_loss(g, n.logits, labels);
  n.total = module_total(g, n.local.total, n.cross_entropy, loss_);
  return n;
}

Module::Grads Module::collect(const GradientMap& gm, const Nodes& n) {
  Grads out;
  for (auto id : n.encoder_params) out.encoder.push_back(gm[id]);
  for (auto id : n.projector_params) out.projector.push_back(gm[id]);
  for (auto id : n.classifier_params) out.classifier.push_back(gm[id]);
  return out;
}

void Module::apply(const Grads& grads) {
  opt_.tick();
  if (!grads.encoder.empty()) opt_.update(encoder_.params(), grads.encoder);
  if (!grads.projector.empty()) opt_.update(projector_.params(), grads.projector);
  if (!grads.classifier.empty()) opt_.update(classifier_.params(), grads.classifier);
}

double Module::mean_abs(const std::vector<Matrix>& grads) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& g : grads) {
    for (double v : g.values()) sum += std::abs(v);
    n += g.size();
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

LossBreakdown Module::breakdown(const Graph& g, const Nodes& n) const {
  LossBreakdown b;
  b.variance = g.value(n.local.variance).item();
  b.invariance = g.value(n.local.invariance).item();
  b.covariance = g.value(n.local.covariance).item();
  b.local_total = g.value(n.local.total).item();
  b.cross_entropy = g.value(n.cross_entropy).item();
  b.module_total = g.value(n.total).item();
  return b;
}

Matrix Module::head_logits(const Matrix& hidden) const {
  return classifier_.infer(projector_.infer(hidden));
}

namespace {

json block_json(const Block& b) {
  json norms = json::array();
  for (const auto& n : b.norms()) {
    norms.push_back({{"running_mean", n.running_mean.data()}, {"running_var", n.running_var.data()}});
  }
  return {{"params", params_to_json(b.params())}, {"batchnorm", norms}};
}

void load_block(Block& b, const json& j) {
  params_from_json(b.params(), j.at("params"));
  const auto& norms = j.at("batchnorm");
  if (norms.size() != b.norms().size()) throw std::runtime_error("checkpoint batchnorm count");
  for (std::size_t i = 0; i < norms.size(); ++i) {
    auto& n = b.norms()[i];
    const auto w = n.running_mean.cols();
    n.running_mean = Matrix(1, w, norms[i].at("running_mean").get<std::vector<double>>());
    n.running_var = Matrix(1, w, norms[i].at("running_var").get<std::vector<double>>());
  }
}

bool same_block(const Block& a, const Block& b) {
  if (!a.params().same_values(b.params())) return false;
  if (a.norms().size() != b.norms().size()) return false;
  for (std::size_t i = 0; i < a.norms().size(); ++i) {
    if (!(a.norms()[i].running_mean == b.norms()[i].running_mean) ||
        !(a.norms()[i].running_var == b.norms()[i].running_var)) {
      return false;
    }
  }
  return true;
}

}  // namespace

json Module::params_json() const {
  return {{"encoder", block_json(encoder_)},
          {"projector", block_json(projector_)},
          {"classifier", block_json(classifier_)}};
}

void Module::load_params_json(const json& j) {
  load_block(encoder_, j.at("encoder"));
  load_block(projector_, j.at("projector"));
  load_block(classifier_, j.at("classifier"));
}

bool Module::same_params(const Module& other) const {
  return same_block(encoder_, other.encoder_) && same_block(projector_, other.projector_) &&
         same_block(classifier_, other.classifier_);
}

PendingModuleStep begin_module_step(Module& module, const Matrix& input, const Matrix& labels) {
  PendingModuleStep p;
  NodeId in = p.graph.constant(input);
  p.nodes = module.append_train_graph(p.graph, in, labels);
  return p;
}

ModuleStepResult finish_module_step(Module& module, PendingModuleStep&& pending) {
  const Graph& g = pending.graph;
  ModuleStepResult r;
  r.output = g.value(pending.nodes.hidden);
  r.logits = g.value(pending.nodes.logits);
  r.losses = module.breakdown(g, pending.nodes);
  auto grads = Module::collect(g.backward(pending.nodes.total), pending.nodes);
  r.encoder_grad_mean_abs = Module::mean_abs(grads.encoder);
  module.apply(grads);
  return r;
}

ModuleStepResult train_module_step(Module& module, const Matrix& input, const Matrix& labels) {
  return finish_module_step(module, begin_module_step(module, input, labels));
}

// Network ------------------------------------------------------------------

Network::Network(NetworkSpec spec, Rng& rng) : spec_(std::move(spec)) {
  spec_.validate();
  std::size_t w = spec_.input_width;
  modules_.reserve(spec_.modules.size());
  for (std::size_t l = 0; l < spec_.modules.size(); ++l) {
    modules_.emplace_back(spec_.modules[l], w, spec_.classes, spec_.optimizer, rng, l);
    w = modules_.back().encoder().output_width();
  }
}

std::vector<std::size_t> argmax_rows(const Matrix& logits) {
  std::vector<std::size_t> out(logits.rows(), 0);
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto r = logits.row(i);
    std::size_t best = 0;
    for (std::size_t j = 1; j < r.size(); ++j) {
      if (r[j] > r[best]) best = j;
    }
    out[i] = best;
  }
  return out;
}

namespace {

double accuracy(const Matrix& logits, const Matrix& onehot) {
  const auto pred = argmax_rows(logits);
  const auto truth = argmax_rows(onehot);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == truth[i];
  return pred.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(pred.size());
}

void require_batch(const NetworkSpec& spec, const Matrix& x, const Matrix& y) {
  if (x.cols() != spec.input_width) {
    throw ShapeError("input batch " + x.shape_string() + " for network input width " +
                     std::to_string(spec.input_width));
  }
  if (y.rows() != x.rows() || y.cols() != spec.classes) {
    throw ShapeError("labels " + y.shape_string() + " for batch " + x.shape_string() + " and " +
                     std::to_string(spec.classes) + " classes");
  }
}

}  // namespace

TrainStepReport Network::train_step(const Matrix& x, const Matrix& y) {
  return spec_.mode == TrainingMode::Bp ? train_step_bp(x, y) : train_step_deinforeg(x, y);
}

TrainStepReport Network::train_step_deinforeg(const Matrix& x, const Matrix& y) {
  if (spec_.mode != TrainingMode::DeInfoReg) {
    throw DomainError("train_step_deinforeg on a bp-mode network");
  }
  require_batch(spec_, x, y);
  // One tape for the whole stack; each module reads a detached copy of the
  // previous encoder output, so every module root reaches only its own
  // parameters.
  Graph g;
  NodeId input = g.constant(x);
  std::vector<Module::Nodes> nodes;
  nodes.reserve(modules_.size());
  for (std::size_t l = 0; l < modules_.size(); ++l) {
    NodeId in = l == 0 ? input : g.detach(nodes.back().hidden);
    nodes.push_back(modules_[l].append_train_graph(g, in, y));
  }
  TrainStepReport rep;
  for (std::size_t l = 0; l < modules_.size(); ++l) {
    rep.losses.push_back(modules_[l].breakdown(g, nodes[l]));
    auto grads = Module::collect(g.backward(nodes[l].total), nodes[l]);
    rep.encoder_grad_mean_abs.push_back(Module::mean_abs(grads.encoder));
    modules_[l].apply(grads);
  }
  rep.batch_accuracy = accuracy(g.value(nodes.back().logits), y);
  return rep;
}

TrainStepReport Network::train_step_bp(const Matrix& x, const Matrix& y) {
  if (spec_.mode != TrainingMode::Bp) throw DomainError("train_step_bp on a deinforeg-mode network");
  require_batch(spec_, x, y);
  Graph g;
  NodeId h = g.constant(x);
  std::vector<std::vector<NodeId>> enc(modules_.size());
  for (std::size_t l = 0; l < modules_.size(); ++l) {
    enc[l] = modules_[l].encoder().bind(g);
    h = modules_[l].encoder().forward(g, enc[l], h, Mode::Train);
  }
  Module& last = modules_.back();
  auto proj = last.projector().bind(g);
  auto cls = last.classifier().bind(g);
  NodeId logits = last.classifier().forward(
      g, cls, last.projector().forward(g, proj, h, Mode::Train), Mode::Train);
  NodeId ce = cross_entropy_loss(g, logits, y);
  const GradientMap gm = g.backward(ce);

  TrainStepReport rep;
  for (std::size_t l = 0; l < modules_.size(); ++l) {
    Module::Grads grads;
    for (auto id : enc[l]) grads.encoder.push_back(gm[id]);
    if (l + 1 == modules_.size()) {
      for (auto id : proj) grads.projector.push_back(gm[id]);
      for (auto id : cls) grads.classifier.push_back(gm[id]);
    }
    LossBreakdown b;
    if (l + 1 == modules_.size()) {
      b.cross_entropy = g.value(ce).item();
      b.module_total = b.cross_entropy;
    }
    rep.losses.push_back(b);
    rep.encoder_grad_mean_abs.push_back(Module::mean_abs(grads.encoder));
    modules_[l].apply(grads);
  }
  rep.batch_accuracy = accuracy(g.value(logits), y);
  return rep;
}

Matrix Network::logits(const Matrix& x) const {
  Matrix h = x;
  for (const auto& m : modules_) h = m.encoder().infer(h);
  return modules_.back().head_logits(h);
}

std::vector<Matrix> Network::module_logits(const Matrix& x) const {
  std::vector<Matrix> out;
  Matrix h = x;
  for (const auto& m : modules_) {
    h = m.encoder().infer(h);
    out.push_back(m.head_logits(h));
  }
  return out;
}

std::vector<std::size_t> Network::predict(const Matrix& x) const { return argmax_rows(logits(x)); }

std::vector<double> Network::encoder_gradients(const Matrix& x, const Matrix& y) const {
  require_batch(spec_, x, y);
  Network scratch = *this;  // forward passes may touch batch-norm state
  std::vector<double> out;
  Graph g;
  NodeId input = g.constant(x);
  if (spec_.mode == TrainingMode::DeInfoReg) {
    std::vector<Module::Nodes> nodes;
    for (std::size_t l = 0; l < modules_.size(); ++l) {
      NodeId in = l == 0 ? input : g.detach(nodes.back().hidden);
      nodes.push_back(scratch.modules_[l].append_train_graph(g, in, y, false));
    }
    for (const auto& n : nodes) {
      out.push_back(Module::mean_abs(Module::collect(g.backward(n.total), n).encoder));
    }
    return out;
  }
  NodeId h = input;
  std::vector<std::vector<NodeId>> enc(modules_.size());
  for (std::size_t l = 0; l < modules_.size(); ++l) {
    enc[l] = scratch.modules_[l].encoder().bind(g);
    h = scratch.modules_[l].encoder().forward(g, enc[l], h, Mode::Train, false);
  }
  Module& last = scratch.modules_.back();
  auto proj = last.projector().bind(g);
  auto cls = last.classifier().bind(g);
  NodeId logits = last.classifier().forward(
      g, cls, last.projector().forward(g, proj, h, Mode::Train, false), Mode::Train, false);
  const GradientMap gm = g.backward(cross_entropy_loss(g, logits, y));
  for (const auto& ids : enc) {
    std::vector<Matrix> grads;
    for (auto id : ids) grads.push_back(gm[id]);
    out.push_back(Module::mean_abs(grads));
  }
  return out;
}

std::vector<double> encoder_gradient_profile(const Network& net, const std::vector<Batch>& batches) {
  std::vector<double> acc(net.depth(), 0.0);
  if (batches.empty()) return acc;
  for (const auto& b : batches) {
    const auto g = net.encoder_gradients(b.x, b.y);
    for (std::size_t l = 0; l < acc.size(); ++l) acc[l] += g[l];
  }
  for (double& v : acc) v /= static_cast<double>(batches.size());
  return acc;
}

json Network::checkpoint() const {
  json mods = json::array();
  for (const auto& m : modules_) mods.push_back(m.params_json());
  return {{"spec", to_json(spec_)}, {"modules", mods}};
}

void Network::restore(const json& j) {
  const auto& mods = j.at("modules");
  if (mods.size() != modules_.size()) throw std::runtime_error("checkpoint module count mismatch");
  for (std::size_t l = 0; l < modules_.size(); ++l) modules_[l].load_params_json(mods[l]);
}

void Network::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << checkpoint().dump(1) << '\n';
}

Network Network::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  const json j = json::parse(in);
  Rng rng(0);
  Network net(network_spec_from_json(j.at("spec")), rng);
  net.restore(j);
  return net;
}

bool Network::same_params(const Network& other) const {
  if (modules_.size() != other.modules_.size()) return false;
  for (std::size_t l = 0; l < modules_.size(); ++l) {
    if (!modules_[l].same_params(other.modules_[l])) return false;
  }
  return true;
}

}  // namespace deinforeg
