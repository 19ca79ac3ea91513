// Local information-regularization losses and cross-entropy, expressed as
// autodiff graphs.
//
// Shapes: embeddings are N x C (C = embedding width), labels are N x K one-hot
// (K = class count).

#ifndef DEINFOREG_LOSSES_HPP
#define DEINFOREG_LOSSES_HPP

#include <string_view>

#include "deinforeg/autodiff.hpp"

namespace deinforeg {

/// How the variance hinge sum is averaged.
enum class VarianceDivisor {
  Eq4,         // (1/C) * sum_j hinge_j
  Algorithm1,  // additionally divided by batch size N
};

/// How the squared similarity difference is averaged.
enum class InvarianceDivisor {
  Eq5,            // ||.||^2 / N
  MseAllEntries,  // ||.||^2 / N^2
};

struct LossTerms {
  bool variance = true;
  bool invariance = true;
  bool covariance = true;
  friend bool operator==(const LossTerms&, const LossTerms&) = default;
};

struct LossConfig {
  double gamma = 1.0;      // variance threshold
  double eps_norm = 1e-8;  // row-normalization guard
  double alpha = 0.001;    // cross-entropy weight in the module objective
  VarianceDivisor variance_divisor = VarianceDivisor::Algorithm1;
  InvarianceDivisor invariance_divisor = InvarianceDivisor::MseAllEntries;
  bool center_before_sim = false;
  LossTerms terms;

  /// Throws DomainError unless gamma >= 0, eps_norm > 0, alpha >= 0.
  void validate() const;

  friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

std::string_view to_string(VarianceDivisor d);
std::string_view to_string(InvarianceDivisor d);
VarianceDivisor variance_divisor_from(std::string_view s);
InvarianceDivisor invariance_divisor_from(std::string_view s);

/// Throws DomainError unless every row has exactly one 1 and zeros elsewhere.
void require_one_hot(const Matrix& labels);

/// Expects already-centered embeddings.
NodeId variance_loss(Graph& g, NodeId centered, const LossConfig& cfg);

NodeId invariance_loss(Graph& g, NodeId embeddings, const Matrix& labels, const LossConfig& cfg);

/// (1/C) * sum of squared off-diagonal covariance entries; N >= 2.
NodeId covariance_loss(Graph& g, NodeId embeddings);

NodeId cross_entropy_loss(Graph& g, NodeId logits, const Matrix& labels);

struct LocalLossNodes {
  NodeId normalized;
  NodeId variance;
  NodeId invariance;
  NodeId covariance;
  NodeId total;
};

/// Row-normalizes `projected` once and computes the enabled terms on it.
/// Disabled terms are constant zero nodes.
LocalLossNodes local_loss(Graph& g, NodeId projected, const Matrix& labels, const LossConfig& cfg);

/// local + alpha * ce
NodeId module_total(Graph& g, NodeId local, NodeId ce, const LossConfig& cfg);

struct LossBreakdown {
  double variance = 0.0;
  double invariance = 0.0;
  double covariance = 0.0;
  double local_total = 0.0;
  double cross_entropy = 0.0;
  double module_total = 0.0;
};

}  // namespace deinforeg

#endif  // DEINFOREG_LOSSES_HPP
