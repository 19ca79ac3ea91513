#include "deinforeg/layers.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace deinforeg {

std::size_t output_width(const StackSpec& stack, std::size_t input_width) {
  std::size_t w = input_width;
  for (const auto& l : stack) {
    if (l.kind == LayerKind::Dense) {
      if (l.units == 0) throw ShapeError("dense layer with zero units");
      w = l.units;
    }
  }
  return w;
}

std::size_t ParamSet::add(std::string name, Matrix value) {
  if (find(name) != nullptr) throw std::invalid_argument("duplicate parameter name " + name);
  Parameter p;
  p.velocity = Matrix(value.rows(), value.cols());
  p.second = Matrix(value.rows(), value.cols());
  p.name = std::move(name);
  p.value = std::move(value);
  params_.push_back(std::move(p));
  return params_.size() - 1;
}

const Parameter* ParamSet::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

std::size_t ParamSet::count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

bool ParamSet::all_finite() const {
  for (const auto& p : params_) {
    if (!p.value.all_finite()) return false;
  }
  return true;
}

bool ParamSet::same_values(const ParamSet& other) const {
  if (size() != other.size()) return false;
  for (std::size_t i = 0; i < size(); ++i) {
    const auto& a = params_[i];
    const auto& b = other.params_[i];
    if (a.name != b.name || !a.value.same_shape(b.value)) return false;
    if (std::memcmp(a.value.data().data(), b.value.data().data(),
                    a.value.size() * sizeof(double)) != 0) {
      return false;
    }
  }
  return true;
}

NodeId dense_forward(Graph& g, NodeId x, NodeId weight, NodeId bias) {
  return g.row_broadcast_add(g.matmul(x, weight), bias);
}

NodeId batchnorm_forward(Graph& g, BatchNorm1d& bn, NodeId x, NodeId gamma, NodeId beta,
                         Mode mode, bool update_stats) {
  const Matrix& xv = g.value(x);
  if (xv.cols() != bn.running_mean.cols()) {
    throw ShapeError("batchnorm: input " + xv.shape_string() + " but layer width " +
                     std::to_string(bn.running_mean.cols()));
  }
  NodeId normalized;
  if (mode == Mode::Train) {
    if (xv.rows() < 2) throw DomainError("batchnorm: train mode needs at least 2 rows");
    NodeId mean = g.mean_columns(x);
    NodeId centered = g.row_broadcast_sub(x, mean);
    NodeId var = g.mean_columns(g.square(centered));
    NodeId inv_std = g.reciprocal(g.sqrt(g.add_scalar(var, bn.eps)));
    normalized = g.row_broadcast_mul(centered, inv_std);
    if (update_stats) {
      const double n = static_cast<double>(xv.rows());
      const Matrix& m = g.value(mean);
      const Matrix& v = g.value(var);
      for (std::size_t j = 0; j < m.cols(); ++j) {
        bn.running_mean(0, j) = (1.0 - bn.momentum) * bn.running_mean(0, j) + bn.momentum * m(0, j);
        // running variance tracks the unbiased estimate
        bn.running_var(0, j) =
            (1.0 - bn.momentum) * bn.running_var(0, j) + bn.momentum * v(0, j) * n / (n - 1.0);
      }
    }
  } else {
    Matrix inv(1, bn.running_var.cols());
    for (std::size_t j = 0; j < inv.cols(); ++j) {
      inv(0, j) = 1.0 / std::sqrt(bn.running_var(0, j) + bn.eps);
    }
    NodeId centered = g.row_broadcast_sub(x, g.constant(bn.running_mean));
    normalized = g.row_broadcast_mul(centered, g.constant(std::move(inv)));
  }
  return g.row_broadcast_add(g.row_broadcast_mul(normalized, gamma), beta);
}

namespace {

// He scaling when the dense output feeds a relu, possibly through BN.
bool feeds_relu(const StackSpec& spec, std::size_t i) {
  for (std::size_t k = i + 1; k < spec.size(); ++k) {
    if (spec[k].kind == LayerKind::BatchNorm) continue;
    return spec[k].kind == LayerKind::Relu;
  }
  return false;
}

}  // namespace

Block::Block(StackSpec spec, std::size_t input_width, Rng& rng, const std::string& prefix)
    : spec_(std::move(spec)), in_(input_width) {
  std::size_t w = input_width;
  for (std::size_t i = 0; i < spec_.size(); ++i) {
    const auto& l = spec_[i];
    const std::string base = prefix + "." + std::to_string(i);
    switch (l.kind) {
      case LayerKind::Dense: {
        if (l.units == 0) throw ShapeError(base + ": dense layer with zero units");
        const double gain = feeds_relu(spec_, i) ? 2.0 : 1.0;
        const double std = std::sqrt(gain / static_cast<double>(w));
        params_.add(base + ".weight", rng_normal(rng, w, l.units, 0.0, std));
        params_.add(base + ".bias", Matrix(1, l.units));
        w = l.units;
        break;
      }
      case LayerKind::BatchNorm:
        params_.add(base + ".gamma", Matrix(1, w, 1.0));
        params_.add(base + ".beta", Matrix(1, w, 0.0));
        norms_.emplace_back(w);
        break;
      case LayerKind::Relu:
      case LayerKind::Tanh:
        break;
    }
  }
  out_ = w;
}

std::vector<NodeId> Block::bind(Graph& g) const {
  std::vector<NodeId> ids;
  ids.reserve(params_.size());
  for (const auto& p : params_) ids.push_back(g.leaf(p.value, true));
  return ids;
}

NodeId Block::forward(Graph& g, std::span<const NodeId> bound, NodeId x, Mode mode,
                      bool update_stats) {
  if (bound.size() != params_.size()) {
    throw std::invalid_argument("block forward: " + std::to_string(bound.size()) +
                                " bound parameters for " + std::to_string(params_.size()));
  }
  if (g.value(x).cols() != in_) {
    throw ShapeError("block expects width " + std::to_string(in_) + ", got " +
                     g.value(x).shape_string());
  }
  std::size_t p = 0, bn = 0;
  NodeId h = x;
  for (const auto& l : spec_) {
    switch (l.kind) {
      case LayerKind::Dense:
        h = dense_forward(g, h, bound[p], bound[p + 1]);
        p += 2;
        break;
      case LayerKind::BatchNorm:
        h = batchnorm_forward(g, norms_[bn++], h, bound[p], bound[p + 1], mode, update_stats);
        p += 2;
        break;
      case LayerKind::Relu:
        h = g.relu(h);
        break;
      case LayerKind::Tanh:
        h = g.tanh(h);
        break;
    }
  }
  return h;
}

Matrix Block::infer(const Matrix& x) const {
  if (x.cols() != in_) {
    throw ShapeError("block expects width " + std::to_string(in_) + ", got " + x.shape_string());
  }
  Matrix h = x;
  std::size_t p = 0, bn = 0;
  for (const auto& l : spec_) {
    switch (l.kind) {
      case LayerKind::Dense: {
        h = matmul(h, params_[p].value);
        const Matrix& b = params_[p + 1].value;
        for (std::size_t i = 0; i < h.rows(); ++i) {
          auto r = h.row(i);
          for (std::size_t j = 0; j < r.size(); ++j) r[j] += b(0, j);
        }
        p += 2;
        break;
      }
      case LayerKind::BatchNorm: {
        const BatchNorm1d& n = norms_[bn++];
        const Matrix& gamma = params_[p].value;
        const Matrix& beta = params_[p + 1].value;
        for (std::size_t j = 0; j < h.cols(); ++j) {
          const double inv = 1.0 / std::sqrt(n.running_var(0, j) + n.eps);
          for (std::size_t i = 0; i < h.rows(); ++i) {
            h(i, j) = (h(i, j) - n.running_mean(0, j)) * inv * gamma(0, j) + beta(0, j);
          }
        }
        p += 2;
        break;
      }
      case LayerKind::Relu:
        for (double& v : h.values()) v = v > 0.0 ? v : 0.0;
        break;
      case LayerKind::Tanh:
        for (double& v : h.values()) v = std::tanh(v);
        break;
    }
  }
  return h;
}

namespace {

void check_grads(const ParamSet& params, std::span<const Matrix> grads) {
  if (grads.size() != params.size()) {
    throw ShapeError("optimizer: " + std::to_string(grads.size()) + " gradients for " +
                     std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!grads[i].same_shape(params[i].value)) {
      throw ShapeError("optimizer: gradient " + grads[i].shape_string() + " for parameter " +
                       params[i].name + " " + params[i].value.shape_string());
    }
  }
}

}  // namespace

void sgd_step(ParamSet& params, std::span<const Matrix> grads, double lr, double momentum,
              double weight_decay) {
  if (!(lr > 0.0)) throw DomainError("sgd: learning rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw DomainError("sgd: momentum must be in [0,1)");
  check_grads(params, grads);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].value.values();
    auto v = params[i].velocity.values();
    auto gr = grads[i].values();
    for (std::size_t k = 0; k < w.size(); ++k) {
      v[k] = momentum * v[k] + gr[k] + weight_decay * w[k];
      w[k] -= lr * v[k];
    }
  }
}

void adam_step(ParamSet& params, std::span<const Matrix> grads, const OptimizerConfig& cfg,
               std::size_t step) {
  if (!(cfg.lr > 0.0)) throw DomainError("adam: learning rate must be positive");
  if (step == 0) throw DomainError("adam: step count is 1-based");
  check_grads(params, grads);
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].value.values();
    auto m = params[i].velocity.values();
    auto s = params[i].second.values();
    auto gr = grads[i].values();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = gr[k] + cfg.weight_decay * w[k];
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
      s[k] = cfg.beta2 * s[k] + (1.0 - cfg.beta2) * gk * gk;
      w[k] -= cfg.lr * (m[k] / c1) / (std::sqrt(s[k] / c2) + cfg.adam_eps);
    }
  }
}

void Optimizer::update(ParamSet& params, std::span<const Matrix> grads) const {
  if (cfg_.kind == OptimizerKind::Sgd) {
    sgd_step(params, grads, cfg_.lr, cfg_.momentum, cfg_.weight_decay);
  } else {
    adam_step(params, grads, cfg_, steps_);
  }
}

nlohmann::json params_to_json(const ParamSet& params) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& p : params) {
    j[p.name] = {{"shape", {p.value.rows(), p.value.cols()}}, {"data", p.value.data()}};
  }
  return j;
}

void params_from_json(ParamSet& params, const nlohmann::json& j) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params[i];
    if (!j.contains(p.name)) throw std::runtime_error("checkpoint lacks parameter " + p.name);
    const auto& e = j.at(p.name);
    const auto rows = e.at("shape").at(0).get<std::size_t>();
    const auto cols = e.at("shape").at(1).get<std::size_t>();
    Matrix m(rows, cols, e.at("data").get<std::vector<double>>());
    if (!m.same_shape(p.value)) {
      throw ShapeError("checkpoint shape " + m.shape_string() + " for " + p.name + ", expected " +
                       p.value.shape_string());
    }
    p.value = std::move(m);
  }
}

void save_params(const ParamSet& params, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << params_to_json(params).dump() << '\n';
}

void load_params(ParamSet& params, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  params_from_json(params, nlohmann::json::parse(in));
}

}  // namespace deinforeg
