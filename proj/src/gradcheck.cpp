#include "deinforeg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "deinforeg/autodiff.hpp"
#include "deinforeg/data.hpp"
#include "deinforeg/losses.hpp"

namespace deinforeg {

namespace {

// N(0,1) entries at least `gap` away from `kink`, so piecewise ops are
// differentiable at every checked point.
Matrix normal_matrix(Rng& rng, std::size_t r, std::size_t c, double kink = NAN, double gap = 0.0) {
  Matrix m(r, c);
  for (auto& v : m.values()) {
    do {
      v = rng.normal(0.0, 1.0);
    } while (!std::isnan(kink) && std::abs(v - kink) < gap);
  }
  return m;
}

// Uniform entries in [lo, hi], for ops with a restricted domain.
Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double lo, double hi,
                     double kink = NAN, double gap = 0.0) {
  Matrix m(r, c);
  for (auto& v : m.values()) {
    do {
      v = lo + (hi - lo) * rng.uniform();
    } while (!std::isnan(kink) && std::abs(v - kink) < gap);
  }
  return m;
}

// Loss inputs: rows whose raw and mean-centered norms are both >= 0.2, and
// whose row-normalized columns have std >= 0.05. Near those singular points
// (normalizing a near-zero row, sqrt of a near-zero variance) the central
// difference truncation error grows without bound while the adjoint stays
// exact.
bool well_conditioned(const Matrix& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double mean = 0.0, raw = 0.0, centered = 0.0;
    for (double v : m.row(i)) {
      mean += v;
      raw += v * v;
    }
    mean /= static_cast<double>(m.cols());
    for (double v : m.row(i)) centered += (v - mean) * (v - mean);
    if (std::sqrt(raw) < 0.2 || std::sqrt(centered) < 0.2) return false;
  }
  const Matrix z = row_l2_normalize(m, 1e-8);
  for (std::size_t j = 0; j < z.cols(); ++j) {
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 0; i < z.rows(); ++i) mean += z(i, j);
    mean /= static_cast<double>(z.rows());
    for (std::size_t i = 0; i < z.rows(); ++i) var += (z(i, j) - mean) * (z(i, j) - mean);
    if (std::sqrt(var / static_cast<double>(z.rows())) < 0.05) return false;
  }
  return true;
}

Matrix embedding_matrix(Rng& rng, std::size_t r, std::size_t c) {
  for (;;) {
    Matrix m(r, c);
    for (auto& v : m.values()) v = rng.normal(0.0, 1.0);
    if (well_conditioned(m)) return m;
  }
}

Matrix random_onehot(Rng& rng, std::size_t n, std::size_t k) {
  std::vector<std::size_t> labels(n);
  for (auto& l : labels) l = rng.index(k);
  return one_hot(labels, k);
}

using Build = std::function<NodeId(Graph&, const std::vector<NodeId>&)>;

// Reduces the op output to a scalar with a random weighting so every output
// entry contributes a distinct adjoint.
double check(Rng& rng, const std::vector<Matrix>& inputs, const Build& build) {
  Graph g;
  std::vector<NodeId> leaves;
  for (const auto& m : inputs) leaves.push_back(g.leaf(m, true));
  NodeId out = build(g, leaves);
  const Matrix& v = g.value(out);
  NodeId root = out;
  if (v.rows() != 1 || v.cols() != 1) {
    NodeId w = g.constant(random_matrix(rng, v.rows(), v.cols(), -1.0, 1.0));
    root = g.sum_all(g.hadamard(out, w));
  }
  double worst = 0.0;
  for (auto leaf : leaves) worst = std::max(worst, fd_check(g, root, leaf));
  return worst;
}

}  // namespace

std::vector<GradcheckResult> gradcheck_suite(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t N = 2 + rng.index(7);
  const std::size_t C = 2 + rng.index(7);
  const std::size_t K = 2 + rng.index(C - 1);
  std::vector<GradcheckResult> out;
  auto add = [&](std::string name, double err) { out.push_back({std::move(name), N, C, err}); };

  auto nc = [&] { return normal_matrix(rng, N, C); };
  auto emb = [&] { return embedding_matrix(rng, N, C); };
  auto pos = [&] { return random_matrix(rng, N, C, 0.5, 2.0); };
  auto op1 = [&](OpKind k, Matrix a, const Build& b) {
    add(std::string(op_name(k)), check(rng, {std::move(a)}, b));
  };
  auto op2 = [&](OpKind k, Matrix a, Matrix c, const Build& b) {
    add(std::string(op_name(k)), check(rng, {std::move(a), std::move(c)}, b));
  };

  op1(OpKind::Leaf, nc(), [](Graph&, const auto& x) { return x[0]; });
  {
    Graph g;
    NodeId a = g.leaf(nc(), true);
    NodeId root = g.sum_all(g.square(g.detach(a)));
    const GradientMap grads = g.backward(root);
    const Matrix& grad = grads[a];
    const bool zero = std::all_of(grad.values().begin(), grad.values().end(),
                                  [](double v) { return v == 0.0; });
    add(std::string(op_name(OpKind::Detach)), zero ? 0.0 : 1.0);
  }
  op2(OpKind::MatMul, nc(), normal_matrix(rng, C, K),
      [](Graph& g, const auto& x) { return g.matmul(x[0], x[1]); });
  op2(OpKind::Add, nc(), nc(), [](Graph& g, const auto& x) { return g.add(x[0], x[1]); });
  op2(OpKind::Sub, nc(), nc(), [](Graph& g, const auto& x) { return g.sub(x[0], x[1]); });
  op2(OpKind::Hadamard, nc(), nc(), [](Graph& g, const auto& x) { return g.hadamard(x[0], x[1]); });
  op1(OpKind::Scale, nc(), [](Graph& g, const auto& x) { return g.scale(x[0], -1.7); });
  op1(OpKind::AddScalar, nc(), [](Graph& g, const auto& x) { return g.add_scalar(x[0], 0.3); });
  op1(OpKind::Transpose, nc(), [](Graph& g, const auto& x) { return g.transpose(x[0]); });
  op1(OpKind::Relu, normal_matrix(rng, N, C, 0.0, 1e-2),
      [](Graph& g, const auto& x) { return g.relu(x[0]); });
  op1(OpKind::Tanh, nc(), [](Graph& g, const auto& x) { return g.tanh(x[0]); });
  op1(OpKind::Exp, nc(), [](Graph& g, const auto& x) { return g.exp(x[0]); });
  op1(OpKind::Log, pos(), [](Graph& g, const auto& x) { return g.log(x[0]); });
  op1(OpKind::Sqrt, pos(), [](Graph& g, const auto& x) { return g.sqrt(x[0]); });
  op1(OpKind::Square, nc(), [](Graph& g, const auto& x) { return g.square(x[0]); });
  op1(OpKind::Reciprocal, pos(), [](Graph& g, const auto& x) { return g.reciprocal(x[0]); });
  op1(OpKind::SumAll, nc(), [](Graph& g, const auto& x) { return g.sum_all(x[0]); });
  op1(OpKind::MeanColumns, nc(), [](Graph& g, const auto& x) { return g.mean_columns(x[0]); });
  op1(OpKind::MeanRows, nc(), [](Graph& g, const auto& x) { return g.mean_rows(x[0]); });
  op1(OpKind::RowL2Normalize, emb(),
      [](Graph& g, const auto& x) { return g.row_l2_normalize(x[0], 1e-8); });
  op2(OpKind::RowBroadcastAdd, nc(), normal_matrix(rng, 1, C),
      [](Graph& g, const auto& x) { return g.row_broadcast_add(x[0], x[1]); });
  op2(OpKind::RowBroadcastSub, nc(), normal_matrix(rng, 1, C),
      [](Graph& g, const auto& x) { return g.row_broadcast_sub(x[0], x[1]); });
  op2(OpKind::RowBroadcastMul, nc(), normal_matrix(rng, 1, C),
      [](Graph& g, const auto& x) { return g.row_broadcast_mul(x[0], x[1]); });
  op2(OpKind::ColBroadcastSub, nc(), normal_matrix(rng, N, 1),
      [](Graph& g, const auto& x) { return g.col_broadcast_sub(x[0], x[1]); });
  op1(OpKind::Hinge, normal_matrix(rng, N, C, 1.0, 1e-2),
      [](Graph& g, const auto& x) { return g.hinge(x[0], 1.0); });
  op1(OpKind::SoftmaxRows, nc(), [](Graph& g, const auto& x) { return g.softmax_rows(x[0]); });
  {
    const Matrix y = random_onehot(rng, N, C);
    op1(OpKind::SoftmaxCrossEntropy, nc(),
        [y](Graph& g, const auto& x) { return g.softmax_cross_entropy(x[0], y); });
  }
  op1(OpKind::SelectOffDiagonal, normal_matrix(rng, C, C),
      [](Graph& g, const auto& x) { return g.select_off_diagonal(x[0]); });

  // Composed losses, under every divisor combination where one applies.
  const Matrix labels = random_onehot(rng, N, K);
  for (auto vd : {VarianceDivisor::Eq4, VarianceDivisor::Algorithm1}) {
    for (auto id : {InvarianceDivisor::Eq5, InvarianceDivisor::MseAllEntries}) {
      for (bool center : {false, true}) {
        LossConfig cfg;
        cfg.variance_divisor = vd;
        cfg.invariance_divisor = id;
        cfg.center_before_sim = center;
        const std::string modes = std::string(to_string(vd)) + "," + std::string(to_string(id)) +
                                  (center ? ",centered" : "");
        add("loss:variance:" + modes, check(rng, {emb()}, [cfg](Graph& g, const auto& x) {
              NodeId z = g.row_l2_normalize(x[0], cfg.eps_norm);
              return variance_loss(g, g.row_broadcast_sub(z, g.mean_columns(z)), cfg);
            }));
        add("loss:invariance:" + modes, check(rng, {emb()}, [cfg, labels](Graph& g, const auto& x) {
              return invariance_loss(g, x[0], labels, cfg);
            }));
        add("loss:local:" + modes, check(rng, {emb()}, [cfg, labels](Graph& g, const auto& x) {
              return local_loss(g, x[0], labels, cfg).total;
            }));
        add("loss:module_total:" + modes,
            check(rng, {emb(), normal_matrix(rng, N, K)},
                  [cfg, labels](Graph& g, const auto& x) {
                    NodeId local = local_loss(g, x[0], labels, cfg).total;
                    return module_total(g, local, cross_entropy_loss(g, x[1], labels), cfg);
                  }));
      }
    }
  }
  add("loss:covariance", check(rng, {emb()}, [](Graph& g, const auto& x) {
        NodeId z = g.row_l2_normalize(x[0], 1e-8);
        return covariance_loss(g, g.row_broadcast_sub(z, g.mean_columns(z)));
      }));
  add("loss:cross_entropy", check(rng, {normal_matrix(rng, N, K)},
                                  [labels](Graph& g, const auto& x) {
                                    return cross_entropy_loss(g, x[0], labels);
                                  }));
  return out;
}

}  // namespace deinforeg
