#include "deinforeg/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace deinforeg {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Detach: return "detach";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Hadamard: return "hadamard";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add-scalar";
    case OpKind::Transpose: return "transpose";
    case OpKind::Relu: return "relu";
    case OpKind::Tanh: return "tanh";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::Square: return "square";
    case OpKind::Reciprocal: return "reciprocal";
    case OpKind::SumAll: return "sum-all";
    case OpKind::MeanColumns: return "mean-columns";
    case OpKind::MeanRows: return "mean-rows";
    case OpKind::RowL2Normalize: return "row-l2-normalize";
    case OpKind::RowBroadcastAdd: return "row-broadcast-add";
    case OpKind::RowBroadcastSub: return "row-broadcast-sub";
    case OpKind::RowBroadcastMul: return "row-broadcast-mul";
    case OpKind::ColBroadcastSub: return "col-broadcast-sub";
    case OpKind::Hinge: return "hinge";
    case OpKind::SoftmaxRows: return "softmax-rows";
    case OpKind::SoftmaxCrossEntropy: return "softmax-cross-entropy";
    case OpKind::SelectOffDiagonal: return "select-off-diagonal";
  }
  return "unknown";
}

bool GradientMap::contains(NodeId id) const {
  return id.index < slots_.size() && slots_[id.index].has_value();
}

const Matrix& GradientMap::operator[](NodeId id) const {
  if (!contains(id)) {
    throw std::out_of_range("no gradient slot for node " + std::to_string(id.index));
  }
  return *slots_[id.index];
}

std::size_t GradientMap::size() const {
  return static_cast<std::size_t>(
      std::count_if(slots_.begin(), slots_.end(), [](const auto& s) { return s.has_value(); }));
}

namespace {

template <class F>
Matrix map(const Matrix& x, F f) {
  Matrix out(x.rows(), x.cols());
  auto in = x.values();
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(in[i]);
  return out;
}

Matrix column_sums(const Matrix& g) {
  Matrix out(1, g.cols());
  for (std::size_t i = 0; i < g.rows(); ++i) {
    for (std::size_t j = 0; j < g.cols(); ++j) out(0, j) += g(i, j);
  }
  return out;
}

Matrix row_sums(const Matrix& g) {
  Matrix out(g.rows(), 1);
  for (std::size_t i = 0; i < g.rows(); ++i) {
    double s = 0.0;
    for (double v : g.row(i)) s += v;
    out(i, 0) = s;
  }
  return out;
}

Matrix softmax(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double z = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) {
      out(i, j) = std::exp(r[j] - mx);
      z += out(i, j);
    }
    for (double& v : out.row(i)) v /= z;
  }
  return out;
}

void accumulate(std::optional<Matrix>& slot, Matrix contribution) {
  if (!slot) {
    slot = std::move(contribution);
    return;
  }
  auto dst = slot->values();
  auto src = contribution.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

constexpr double kSqrtClamp = 1e-12;

}  // namespace

const Graph::Node& Graph::node(NodeId id) const {
  if (id.index >= nodes_.size()) {
    throw std::out_of_range("node " + std::to_string(id.index) + " is not in this graph");
  }
  return nodes_[id.index];
}

NodeId Graph::push(Node n) {
  for (std::size_t i = 0; i < n.arity; ++i) {
    if (n.inputs[i] >= nodes_.size()) {
      throw std::out_of_range("input node " + std::to_string(n.inputs[i]) +
                              " is not in this graph");
    }
  }
  if (n.kind != OpKind::Leaf && n.kind != OpKind::Detach) {
    n.requires_grad = false;
    for (std::size_t i = 0; i < n.arity; ++i) {
      n.requires_grad = n.requires_grad || nodes_[n.inputs[i]].requires_grad;
    }
  }
  try {
    if (n.kind != OpKind::Leaf) n.value = evaluate(n);
  } catch (const ShapeError& e) {
    throw ShapeError("node " + std::to_string(nodes_.size()) + " (" +
                     std::string(op_name(n.kind)) + "): " + e.what());
  }
  nodes_.push_back(std::move(n));
  return NodeId{nodes_.size() - 1};
}

Matrix Graph::evaluate(const Node& n) const {
  const Matrix& a = nodes_[n.inputs[0]].value;
  const Matrix& b = n.arity > 1 ? nodes_[n.inputs[1]].value : a;
  auto need_row = [&](const char* what) {
    if (b.rows() != 1 || b.cols() != a.cols()) {
      throw ShapeError(std::string(what) + " needs a 1x" + std::to_string(a.cols()) +
                       " row, got " + b.shape_string());
    }
  };
  switch (n.kind) {
    case OpKind::Leaf:
      return n.value;
    case OpKind::Detach:
      return a;
    case OpKind::MatMul:
      return deinforeg::matmul(a, b);
    case OpKind::Add:
      return deinforeg::add(a, b);
    case OpKind::Sub:
      return deinforeg::sub(a, b);
    case OpKind::Hadamard:
      return deinforeg::hadamard(a, b);
    case OpKind::Scale:
      return deinforeg::scale(a, n.param);
    case OpKind::AddScalar:
      return map(a, [s = n.param](double v) { return v + s; });
    case OpKind::Transpose:
      return deinforeg::transpose(a);
    case OpKind::Relu:
      return map(a, [](double v) { return v > 0.0 ? v : 0.0; });
    case OpKind::Tanh:
      return map(a, [](double v) { return std::tanh(v); });
    case OpKind::Exp:
      return map(a, [](double v) { return std::exp(v); });
    case OpKind::Log:
      return map(a, [](double v) { return std::log(v); });
    case OpKind::Sqrt:
      return map(a, [](double v) { return std::sqrt(std::max(v, 0.0)); });
    case OpKind::Square:
      return map(a, [](double v) { return v * v; });
    case OpKind::Reciprocal:
      return map(a, [](double v) { return 1.0 / v; });
    case OpKind::SumAll: {
      double s = 0.0;
      for (double v : a.values()) s += v;
      return Matrix::scalar(s);
    }
    case OpKind::MeanColumns: {
      if (a.rows() == 0) throw ShapeError("mean over zero rows");
      return deinforeg::scale(column_sums(a), 1.0 / static_cast<double>(a.rows()));
    }
    case OpKind::MeanRows: {
      if (a.cols() == 0) throw ShapeError("mean over zero columns");
      return deinforeg::scale(row_sums(a), 1.0 / static_cast<double>(a.cols()));
    }
    case OpKind::RowL2Normalize:
      return deinforeg::row_l2_normalize(a, n.param);
    case OpKind::RowBroadcastAdd:
    case OpKind::RowBroadcastSub:
    case OpKind::RowBroadcastMul: {
      need_row(op_name(n.kind).data());
      Matrix out = a;
      for (std::size_t i = 0; i < a.rows(); ++i) {
        auto r = out.row(i);
        for (std::size_t j = 0; j < a.cols(); ++j) {
          if (n.kind == OpKind::RowBroadcastAdd) r[j] += b(0, j);
          else if (n.kind == OpKind::RowBroadcastSub) r[j] -= b(0, j);
          else r[j] *= b(0, j);
        }
      }
      return out;
    }
    case OpKind::ColBroadcastSub: {
      if (b.cols() != 1 || b.rows() != a.rows()) {
        throw ShapeError("col-broadcast-sub needs a " + std::to_string(a.rows()) +
                         "x1 column, got " + b.shape_string());
      }
      Matrix out = a;
      for (std::size_t i = 0; i < a.rows(); ++i) {
        for (double& v : out.row(i)) v -= b(i, 0);
      }
      return out;
    }
    case OpKind::Hinge:
      return map(a, [g = n.param](double v) { return v < g ? g - v : 0.0; });
    case OpKind::SoftmaxRows:
      return softmax(a);
    case OpKind::SoftmaxCrossEntropy: {
      if (!a.same_shape(n.aux)) {
        throw ShapeError("logits " + a.shape_string() + " vs labels " + n.aux.shape_string());
      }
      if (a.rows() == 0) throw ShapeError("cross-entropy over an empty batch");
      double total = 0.0;
      for (std::size_t i = 0; i < a.rows(); ++i) {
        auto r = a.row(i);
        const double mx = *std::max_element(r.begin(), r.end());
        double z = 0.0;
        for (double v : r) z += std::exp(v - mx);
        const double lse = mx + std::log(z);
        for (std::size_t j = 0; j < a.cols(); ++j) {
          if (n.aux(i, j) != 0.0) total -= n.aux(i, j) * (r[j] - lse);
        }
      }
      return Matrix::scalar(total / static_cast<double>(a.rows()));
    }
    case OpKind::SelectOffDiagonal: {
      if (a.rows() != a.cols()) throw ShapeError("off-diagonal of non-square " + a.shape_string());
      Matrix out = a;
      for (std::size_t i = 0; i < a.rows(); ++i) out(i, i) = 0.0;
      return out;
    }
  }
  throw std::logic_error("unhandled op kind");
}

NodeId Graph::leaf(Matrix value, bool requires_grad) {
  Node n;
  n.kind = OpKind::Leaf;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

#define DEINFOREG_UNARY(fn, KIND)             \
  NodeId Graph::fn(NodeId x) {                \
    Node n;                                   \
    n.kind = OpKind::KIND;                    \
    n.inputs = {x.index, 0};                  \
    n.arity = 1;                              \
    return push(std::move(n));                \
  }
#define DEINFOREG_BINARY(fn, KIND)            \
  NodeId Graph::fn(NodeId a, NodeId b) {      \
    Node n;                                   \
    n.kind = OpKind::KIND;                    \
    n.inputs = {a.index, b.index};            \
    n.arity = 2;                              \
    return push(std::move(n));                \
  }
#define DEINFOREG_PARAM(fn, KIND)             \
  NodeId Graph::fn(NodeId x, double p) {      \
    Node n;                                   \
    n.kind = OpKind::KIND;                    \
    n.inputs = {x.index, 0};                  \
    n.arity = 1;                              \
    n.param = p;                              \
    return push(std::move(n));                \
  }

DEINFOREG_UNARY(detach, Detach)
DEINFOREG_BINARY(matmul, MatMul)
DEINFOREG_BINARY(add, Add)
DEINFOREG_BINARY(sub, Sub)
DEINFOREG_BINARY(hadamard, Hadamard)
DEINFOREG_PARAM(scale, Scale)
DEINFOREG_PARAM(add_scalar, AddScalar)
DEINFOREG_UNARY(transpose, Transpose)
DEINFOREG_UNARY(relu, Relu)
DEINFOREG_UNARY(tanh, Tanh)
DEINFOREG_UNARY(exp, Exp)
DEINFOREG_UNARY(log, Log)
DEINFOREG_UNARY(sqrt, Sqrt)
DEINFOREG_UNARY(square, Square)
DEINFOREG_UNARY(reciprocal, Reciprocal)
DEINFOREG_UNARY(sum_all, SumAll)
DEINFOREG_UNARY(mean_columns, MeanColumns)
DEINFOREG_UNARY(mean_rows, MeanRows)
DEINFOREG_PARAM(row_l2_normalize, RowL2Normalize)
DEINFOREG_BINARY(row_broadcast_add, RowBroadcastAdd)
DEINFOREG_BINARY(row_broadcast_sub, RowBroadcastSub)
DEINFOREG_BINARY(row_broadcast_mul, RowBroadcastMul)
DEINFOREG_BINARY(col_broadcast_sub, ColBroadcastSub)
DEINFOREG_PARAM(hinge, Hinge)
DEINFOREG_UNARY(softmax_rows, SoftmaxRows)
DEINFOREG_UNARY(select_off_diagonal, SelectOffDiagonal)

#undef DEINFOREG_UNARY
#undef DEINFOREG_BINARY
#undef DEINFOREG_PARAM

NodeId Graph::softmax_cross_entropy(NodeId logits, const Matrix& onehot) {
  Node n;
  n.kind = OpKind::SoftmaxCrossEntropy;
  n.inputs = {logits.index, 0};
  n.arity = 1;
  n.aux = onehot;
  return push(std::move(n));
}

void Graph::set_leaf(NodeId id, Matrix value) {
  Node& n = nodes_.at(id.index);
  if (n.kind != OpKind::Leaf) {
    throw std::invalid_argument("node " + std::to_string(id.index) + " (" +
                                std::string(op_name(n.kind)) + ") is not a leaf");
  }
  n.value = std::move(value);
}

void Graph::recompute() {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    if (n.kind == OpKind::Leaf) continue;
    try {
      n.value = evaluate(n);
    } catch (const ShapeError& e) {
      throw ShapeError("node " + std::to_string(i) + " (" + std::string(op_name(n.kind)) +
                       "): " + e.what());
    }
  }
}

void Graph::forward(const std::vector<std::pair<NodeId, Matrix>>& bindings) {
  for (const auto& [id, v] : bindings) set_leaf(id, v);
  recompute();
}

void Graph::accumulate_inputs(const Node& n, const Matrix& g,
                              std::vector<std::optional<Matrix>>& adj) const {
  const std::size_t ia = n.inputs[0];
  const std::size_t ib = n.inputs[1];
  const Matrix& a = nodes_[ia].value;
  const Matrix& b = n.arity > 1 ? nodes_[ib].value : a;
  const bool ga = nodes_[ia].requires_grad;
  const bool gb = n.arity > 1 && nodes_[ib].requires_grad;
  const Matrix& y = n.value;

  auto elementwise = [&](auto dfdx) {
    Matrix out(a.rows(), a.cols());
    auto o = out.values();
    auto gv = g.values();
    auto av = a.values();
    auto yv = y.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = gv[i] * dfdx(av[i], yv[i]);
    accumulate(adj[ia], std::move(out));
  };

  switch (n.kind) {
    case OpKind::Leaf:
    case OpKind::Detach:
      return;
    case OpKind::MatMul:
      if (ga) accumulate(adj[ia], deinforeg::matmul(g, deinforeg::transpose(b)));
      if (gb) accumulate(adj[ib], deinforeg::matmul(deinforeg::transpose(a), g));
      return;
    case OpKind::Add:
      if (ga) accumulate(adj[ia], g);
      if (gb) accumulate(adj[ib], g);
      return;
    case OpKind::Sub:
      if (ga) accumulate(adj[ia], g);
      if (gb) accumulate(adj[ib], deinforeg::scale(g, -1.0));
      return;
    case OpKind::Hadamard:
      if (ga) accumulate(adj[ia], deinforeg::hadamard(g, b));
      if (gb) accumulate(adj[ib], deinforeg::hadamard(g, a));
      return;
    case OpKind::Scale:
      if (ga) accumulate(adj[ia], deinforeg::scale(g, n.param));
      return;
    case OpKind::AddScalar:
      if (ga) accumulate(adj[ia], g);
      return;
    case OpKind::Transpose:
      if (ga) accumulate(adj[ia], deinforeg::transpose(g));
      return;
    case OpKind::Relu:
      if (ga) elementwise([](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
      return;
    case OpKind::Tanh:
      if (ga) elementwise([](double, double t) { return 1.0 - t * t; });
      return;
    case OpKind::Exp:
      if (ga) elementwise([](double, double e) { return e; });
      return;
    case OpKind::Log:
      if (ga) elementwise([](double x, double) { return 1.0 / x; });
      return;
    case OpKind::Sqrt:
      if (ga) {
        elementwise([](double x, double) { return 0.5 / std::sqrt(std::max(x, kSqrtClamp)); });
      }
      return;
    case OpKind::Square:
      if (ga) elementwise([](double x, double) { return 2.0 * x; });
      return;
    case OpKind::Reciprocal:
      if (ga) elementwise([](double x, double) { return -1.0 / (x * x); });
      return;
    case OpKind::Hinge:
      if (ga) elementwise([gam = n.param](double x, double) { return x < gam ? -1.0 : 0.0; });
      return;
    case OpKind::SumAll:
      if (ga) accumulate(adj[ia], Matrix(a.rows(), a.cols(), g.item()));
      return;
    case OpKind::MeanColumns:
      if (ga) {
        Matrix out(a.rows(), a.cols());
        const double inv = 1.0 / static_cast<double>(a.rows());
        for (std::size_t i = 0; i < a.rows(); ++i) {
          for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = g(0, j) * inv;
        }
        accumulate(adj[ia], std::move(out));
      }
      return;
    case OpKind::MeanRows:
      if (ga) {
        Matrix out(a.rows(), a.cols());
        const double inv = 1.0 / static_cast<double>(a.cols());
        for (std::size_t i = 0; i < a.rows(); ++i) {
          for (double& v : out.row(i)) v = g(i, 0) * inv;
        }
        accumulate(adj[ia], std::move(out));
      }
      return;
    case OpKind::RowL2Normalize:
      if (ga) {
        // y = x / (|x| + eps); dx = g/d - x (g.x) / (|x| d^2)
        Matrix out(a.rows(), a.cols());
        for (std::size_t i = 0; i < a.rows(); ++i) {
          auto x = a.row(i);
          auto gr = g.row(i);
          double sq = 0.0, gx = 0.0;
          for (std::size_t j = 0; j < x.size(); ++j) {
            sq += x[j] * x[j];
            gx += gr[j] * x[j];
          }
          const double norm = std::sqrt(sq);
          const double d = norm + n.param;
          if (d == 0.0) continue;
          const double k = norm > 0.0 ? gx / (norm * d * d) : 0.0;
          for (std::size_t j = 0; j < x.size(); ++j) out(i, j) = gr[j] / d - x[j] * k;
        }
        accumulate(adj[ia], std::move(out));
      }
      return;
    case OpKind::RowBroadcastAdd:
      if (ga) accumulate(adj[ia], g);
      if (gb) accumulate(adj[ib], column_sums(g));
      return;
    case OpKind::RowBroadcastSub:
      if (ga) accumulate(adj[ia], g);
      if (gb) accumulate(adj[ib], deinforeg::scale(column_sums(g), -1.0));
      return;
    case OpKind::RowBroadcastMul:
      if (ga) {
        Matrix out = g;
        for (std::size_t i = 0; i < g.rows(); ++i) {
          auto r = out.row(i);
          for (std::size_t j = 0; j < g.cols(); ++j) r[j] *= b(0, j);
        }
        accumulate(adj[ia], std::move(out));
      }
      if (gb) accumulate(adj[ib], column_sums(deinforeg::hadamard(g, a)));
      return;
    case OpKind::ColBroadcastSub:
      if (ga) accumulate(adj[ia], g);
      if (gb) accumulate(adj[ib], deinforeg::scale(row_sums(g), -1.0));
      return;
    case OpKind::SoftmaxRows:
      if (ga) {
        Matrix out(a.rows(), a.cols());
        for (std::size_t i = 0; i < a.rows(); ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < a.cols(); ++j) dot += g(i, j) * y(i, j);
          for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = y(i, j) * (g(i, j) - dot);
        }
        accumulate(adj[ia], std::move(out));
      }
      return;
    case OpKind::SoftmaxCrossEntropy:
      if (ga) {
        Matrix out = softmax(a);
        const double k = g.item() / static_cast<double>(a.rows());
        auto o = out.values();
        auto lab = n.aux.values();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = (o[i] - lab[i]) * k;
        accumulate(adj[ia], std::move(out));
      }
      return;
    case OpKind::SelectOffDiagonal:
      if (ga) {
        Matrix out = g;
        for (std::size_t i = 0; i < out.rows(); ++i) out(i, i) = 0.0;
        accumulate(adj[ia], std::move(out));
      }
      return;
  }
}

GradientMap Graph::backward(NodeId root) const {
  const Node& r = node(root);
  if (r.value.rows() != 1 || r.value.cols() != 1) {
    throw DomainError("backward: root node " + std::to_string(root.index) + " (" +
                      std::string(op_name(r.kind)) + ") is " + r.value.shape_string() +
                      ", expected a 1x1 scalar");
  }
  std::vector<std::optional<Matrix>> adj(nodes_.size());
  if (r.requires_grad) adj[root.index] = Matrix::scalar(1.0);
  for (std::size_t i = root.index + 1; i-- > 0;) {
    if (!adj[i]) continue;
    const Node& n = nodes_[i];
    if (n.kind == OpKind::Leaf) continue;
    accumulate_inputs(n, *adj[i], adj);
    adj[i].reset();  // interior adjoints are not part of the result
  }
  GradientMap out;
  out.slots_.resize(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (n.kind != OpKind::Leaf || !n.requires_grad) continue;
    out.slots_[i] = adj[i] ? std::move(*adj[i]) : Matrix(n.value.rows(), n.value.cols());
  }
  return out;
}

double fd_check(const Graph& graph, NodeId root, NodeId leaf, double h) {
  if (h <= 0.0) throw DomainError("fd_check: step must be positive");
  const GradientMap grads = graph.backward(root);
  const Matrix& analytic = grads[leaf];
  Graph g = graph;
  const Matrix base = g.value(leaf);
  double worst = 0.0;
  for (std::size_t k = 0; k < base.size(); ++k) {
    Matrix plus = base, minus = base;
    plus.values()[k] += h;
    minus.values()[k] -= h;
    g.set_leaf(leaf, plus);
    g.recompute();
    const double fp = g.value(root).item();
    g.set_leaf(leaf, minus);
    g.recompute();
    const double fm = g.value(root).item();
    const double numeric = (fp - fm) / (2.0 * h);
    const double err = std::abs(analytic.values()[k] - numeric) / std::max(1.0, std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace deinforeg
