#include "deinforeg/losses.hpp"

#include <stdexcept>
#include <string>

namespace deinforeg {

void LossConfig::validate() const {
  // gamma = 0 is allowed: it switches the variance hinge off entirely.
  if (!(gamma >= 0.0)) throw DomainError("loss config: gamma must be >= 0");
  if (!(eps_norm > 0.0)) throw DomainError("loss config: eps_norm must be > 0");
  if (!(alpha >= 0.0)) throw DomainError("loss config: alpha must be >= 0");
}

std::string_view to_string(VarianceDivisor d) {
  return d == VarianceDivisor::Eq4 ? "eq4" : "algorithm1";
}

std::string_view to_string(InvarianceDivisor d) {
  return d == InvarianceDivisor::Eq5 ? "eq5" : "mse_all_entries";
}

VarianceDivisor variance_divisor_from(std::string_view s) {
  if (s == "eq4") return VarianceDivisor::Eq4;
  if (s == "algorithm1") return VarianceDivisor::Algorithm1;
  throw std::invalid_argument("unknown variance divisor '" + std::string(s) + "'");
}

InvarianceDivisor invariance_divisor_from(std::string_view s) {
  if (s == "eq5") return InvarianceDivisor::Eq5;
  if (s == "mse_all_entries") return InvarianceDivisor::MseAllEntries;
  throw std::invalid_argument("unknown invariance divisor '" + std::string(s) + "'");
}

void require_one_hot(const Matrix& labels) {
  for (std::size_t i = 0; i < labels.rows(); ++i) {
    int ones = 0;
    for (double v : labels.row(i)) {
      if (v == 1.0) {
        ++ones;
      } else if (v != 0.0) {
        ones = -1;
        break;
      }
    }
    if (ones != 1) {
      throw DomainError("labels row " + std::to_string(i) + " is not one-hot");
    }
  }
}

NodeId variance_loss(Graph& g, NodeId centered, const LossConfig& cfg) {
  const Matrix& e = g.value(centered);
  NodeId var = g.mean_columns(g.square(centered));
  NodeId std = g.sqrt(g.add_scalar(var, kVarianceEpsilon));
  double divisor = static_cast<double>(e.cols());
  if (cfg.variance_divisor == VarianceDivisor::Algorithm1) divisor *= static_cast<double>(e.rows());
  return g.scale(g.sum_all(g.hinge(std, cfg.gamma)), 1.0 / divisor);
}

namespace {

NodeId invariance_on_unit_rows(Graph& g, NodeId unit, const Matrix& labels,
                               const LossConfig& cfg) {
  const double n = static_cast<double>(labels.rows());
  NodeId label_sim = g.constant(matmul(labels, transpose(labels)));
  NodeId emb_sim = g.matmul(unit, g.transpose(unit));
  NodeId sq = g.sum_all(g.square(g.sub(label_sim, emb_sim)));
  const double divisor = cfg.invariance_divisor == InvarianceDivisor::Eq5 ? n : n * n;
  return g.scale(sq, 1.0 / divisor);
}

NodeId row_centered(Graph& g, NodeId x) { return g.col_broadcast_sub(x, g.mean_rows(x)); }

void require_rows(const Graph& g, NodeId x, const Matrix& labels) {
  if (g.value(x).rows() != labels.rows()) {
    throw ShapeError("embeddings " + g.value(x).shape_string() + " vs labels " +
                     labels.shape_string());
  }
}

}  // namespace

NodeId invariance_loss(Graph& g, NodeId embeddings, const Matrix& labels, const LossConfig& cfg) {
  require_one_hot(labels);
  require_rows(g, embeddings, labels);
  NodeId base = cfg.center_before_sim ? row_centered(g, embeddings) : embeddings;
  return invariance_on_unit_rows(g, g.row_l2_normalize(base, cfg.eps_norm), labels, cfg);
}

NodeId covariance_loss(Graph& g, NodeId embeddings) {
  const Matrix& e = g.value(embeddings);
  if (e.rows() < 2) throw DomainError("covariance loss needs at least 2 rows");
  NodeId centered = g.row_broadcast_sub(embeddings, g.mean_columns(embeddings));
  NodeId cov = g.scale(g.matmul(g.transpose(centered), centered),
                       1.0 / static_cast<double>(e.rows()));
  return g.scale(g.sum_all(g.square(g.select_off_diagonal(cov))),
                 1.0 / static_cast<double>(e.cols()));
}

NodeId cross_entropy_loss(Graph& g, NodeId logits, const Matrix& labels) {
  require_one_hot(labels);
  return g.softmax_cross_entropy(logits, labels);
}

LocalLossNodes local_loss(Graph& g, NodeId projected, const Matrix& labels,
                          const LossConfig& cfg) {
  require_one_hot(labels);
  require_rows(g, projected, labels);
  LocalLossNodes out{};
  out.normalized = g.row_l2_normalize(projected, cfg.eps_norm);
  NodeId zero = g.constant(Matrix::scalar(0.0));

  if (cfg.terms.variance) {
    NodeId centered = g.row_broadcast_sub(out.normalized, g.mean_columns(out.normalized));
    out.variance = variance_loss(g, centered, cfg);
  } else {
    out.variance = zero;
  }

  if (cfg.terms.invariance) {
    NodeId unit = cfg.center_before_sim
                      ? g.row_l2_normalize(row_centered(g, out.normalized), cfg.eps_norm)
                      : out.normalized;
    out.invariance = invariance_on_unit_rows(g, unit, labels, cfg);
  } else {
    out.invariance = zero;
  }

  out.covariance = cfg.terms.covariance ? covariance_loss(g, out.normalized) : zero;
  out.total = g.add(g.add(out.variance, out.invariance), out.covariance);
  return out;
}

NodeId module_total(Graph& g, NodeId local, NodeId ce, const LossConfig& cfg) {
  return g.add(local, g.scale(ce, cfg.alpha));
}

}  // namespace deinforeg
