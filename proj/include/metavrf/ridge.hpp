#pragma once

#include <vector>

#include "metavrf/autodiff.hpp"
#include "metavrf/tensor.hpp"

namespace metavrf::ridge {

/// Dual-coefficient solution of kernel ridge regression: alpha = Y (lambda I + K)^{-1}.
struct RidgeSolution {
  Tensor alpha;  // (C_out, n)
  double lambda = 1.0;
};

/// K: (n, n) Gram matrix, Y: (C_out, n) targets (real rows or one-hot columns),
/// lambda >= 0 (zero allowed only for nonsingular K). Throws on a numerically
/// singular system, advising a positive regularizer.
RidgeSolution fit(const Tensor& k, const Tensor& y, double lambda);

/// K_cross: (n, m) support-vs-query Gram -> predictions (C_out, m): real
/// targets for regression, logits for classification.
Tensor predict(const RidgeSolution& sol, const Tensor& k_cross);

/// Mean of squared elementwise differences.
double mse_loss(const Tensor& pred, const Tensor& target);

/// logits: (C, m); labels: length-m class indices in [0, C). Mean over columns
/// of -log softmax(logits)[label] (numerically stabilized).
double softmax_xent_loss(const Tensor& logits, const std::vector<int64_t>& labels);

// ---- graph builders ----

/// alpha = Y (lambda I + K)^{-1}, realized as solve((lambda I + K)^T, Y^T)^T so
/// the engine's adjoint-solve rule provides gradients. lambda is a scalar node.
ad::NodeId build_fit(ad::Graph& g, ad::NodeId k, ad::NodeId y, ad::NodeId lambda);

/// alpha . K_cross.
ad::NodeId build_predict(ad::Graph& g, ad::NodeId alpha, ad::NodeId k_cross);

/// Mean of squared elementwise differences (scalar node).
ad::NodeId build_mse(ad::Graph& g, ad::NodeId pred, ad::NodeId target);

/// Softmax cross-entropy of logits (C, m) against one-hot targets (C, m),
/// averaged over the m columns.
ad::NodeId build_softmax_xent(ad::Graph& g, ad::NodeId logits, ad::NodeId onehot);

}  // namespace metavrf::ridge
