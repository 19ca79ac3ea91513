// Define-by-run reverse-mode automatic differentiation over Matrix values.
//
// A Graph is an append-only tape: every op appends a node whose inputs have
// smaller indices, so index order is a topological order. Values are
// computed eagerly when a node is appended; recompute() re-evaluates the
// whole tape after leaves are rebound (used by the finite-difference check).

#ifndef DEINFOREG_AUTODIFF_HPP
#define DEINFOREG_AUTODIFF_HPP

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "deinforeg/tensor.hpp"

namespace deinforeg {

enum class OpKind {
  Leaf,
  Detach,
  MatMul,
  Add,
  Sub,
  Hadamard,
  Scale,
  AddScalar,
  Transpose,
  Relu,
  Tanh,
  Exp,
  Log,
  Sqrt,
  Square,
  Reciprocal,
  SumAll,
  MeanColumns,
  MeanRows,
  RowL2Normalize,
  RowBroadcastAdd,
  RowBroadcastSub,
  RowBroadcastMul,
  ColBroadcastSub,
  Hinge,
  SoftmaxRows,
  SoftmaxCrossEntropy,
  SelectOffDiagonal,
};

std::string_view op_name(OpKind kind);

struct NodeId {
  std::size_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

/// Adjoints of the requires-grad leaves of one backward pass.
class GradientMap {
public:
  bool contains(NodeId id) const;
  /// Throws std::out_of_range for leaves without a gradient slot.
  const Matrix& operator[](NodeId id) const;
  std::size_t size() const;

  friend bool operator==(const GradientMap&, const GradientMap&) = default;

private:
  friend class Graph;
  std::vector<std::optional<Matrix>> slots_;
};

class Graph {
public:
  /// Appends a leaf. Parameters use requires_grad=true; data and labels false.
  NodeId leaf(Matrix value, bool requires_grad = false);
  NodeId constant(Matrix value) { return leaf(std::move(value), false); }

  /// Same value as `x`, but no adjoint ever flows back through it.
  NodeId detach(NodeId x);

  NodeId matmul(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId hadamard(NodeId a, NodeId b);
  NodeId scale(NodeId x, double s);
  NodeId add_scalar(NodeId x, double s);
  NodeId transpose(NodeId x);
  NodeId relu(NodeId x);
  NodeId tanh(NodeId x);
  NodeId exp(NodeId x);
  NodeId log(NodeId x);
  NodeId sqrt(NodeId x);
  NodeId square(NodeId x);
  NodeId reciprocal(NodeId x);
  NodeId sum_all(NodeId x);
  /// NxC -> 1xC
  NodeId mean_columns(NodeId x);
  /// NxC -> Nx1
  NodeId mean_rows(NodeId x);
  NodeId row_l2_normalize(NodeId x, double eps);
  /// NxC (op) 1xC, the row vector applied to every row.
  NodeId row_broadcast_add(NodeId x, NodeId row);
  NodeId row_broadcast_sub(NodeId x, NodeId row);
  NodeId row_broadcast_mul(NodeId x, NodeId row);
  /// NxC minus Nx1, the column applied to every column.
  NodeId col_broadcast_sub(NodeId x, NodeId col);
  /// Elementwise max(0, gamma - x).
  NodeId hinge(NodeId x, double gamma);
  NodeId softmax_rows(NodeId x);
  /// Mean over rows of -sum_j y_ij log softmax(x)_ij; `onehot` is constant.
  NodeId softmax_cross_entropy(NodeId logits, const Matrix& onehot);
  /// Square matrix with its diagonal zeroed.
  NodeId select_off_diagonal(NodeId x);

  const Matrix& value(NodeId id) const { return node(id).value; }
  OpKind kind(NodeId id) const { return node(id).kind; }
  bool requires_grad(NodeId id) const { return node(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Rebinds leaves and re-evaluates every node in tape order.
  void forward(const std::vector<std::pair<NodeId, Matrix>>& bindings);
  void set_leaf(NodeId id, Matrix value);
  void recompute();

  /// Reverse-mode sweep from a 1x1 root.
  ///
  /// The result holds an adjoint for every requires-grad leaf; leaves with no
  /// path to the root get an exact zero matrix.
  GradientMap backward(NodeId root) const;

private:
  struct Node {
    OpKind kind = OpKind::Leaf;
    std::array<std::size_t, 2> inputs{};
    std::size_t arity = 0;
    double param = 0.0;
    Matrix aux;  // constant operand (one-hot labels)
    Matrix value;
    bool requires_grad = false;  // leaf flag, or "some input requires grad"
  };

  const Node& node(NodeId id) const;
  NodeId push(Node n);
  Matrix evaluate(const Node& n) const;
  void accumulate_inputs(const Node& n, const Matrix& adj,
                         std::vector<std::optional<Matrix>>& adjoints) const;

  std::vector<Node> nodes_;
};

/// Central-difference verification of backward() for one leaf.
///
/// Returns the max over leaf entries of |analytic - numeric| / max(1, |numeric|).
/// The graph is copied; the caller's tape is not modified.
double fd_check(const Graph& graph, NodeId root, NodeId leaf, double h = 1e-4);

}  // namespace deinforeg

#endif  // DEINFOREG_AUTODIFF_HPP
