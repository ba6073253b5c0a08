#include "metavrf/ridge.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

namespace metavrf::ridge {

namespace {
using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CEMap = Eigen::Map<const EMat>;
using EMap = Eigen::Map<EMat>;
}  // namespace

RidgeSolution fit(const Tensor& k, const Tensor& y, double lambda) {
  if (k.rank() != 2 || k.shape[0] != k.shape[1]) {
    throw std::invalid_argument("fit requires a square Gram matrix, got " + shape_to_string(k.shape));
  }
  if (lambda < 0.0) throw std::invalid_argument("fit requires lambda >= 0");
  const int64_t n = k.shape[0];
  if (y.rank() != 2 || y.shape[1] != n) {
    throw std::invalid_argument("fit targets must be (C_out, " + std::to_string(n) + "), got " +
                                shape_to_string(y.shape));
  }
  EMat a = CEMap(k.data.data(), n, n);
  for (int64_t i = 0; i < n; ++i) a(i, i) += lambda;
  Eigen::FullPivLU<EMat> lu(a.transpose());
  if (!lu.isInvertible()) {
    throw std::runtime_error("ridge system (lambda I + K) is numerically singular; use a positive lambda");
  }
  RidgeSolution sol;
  sol.lambda = lambda;
  sol.alpha = Tensor({y.shape[0], n});
  // alpha = Y (lambda I + K)^{-1}  <=>  A^T alpha^T = Y^T.
  EMap(sol.alpha.data.data(), y.shape[0], n).transpose() =
      lu.solve(EMat(CEMap(y.data.data(), y.shape[0], n).transpose()));
  return sol;
}

Tensor predict(const RidgeSolution& sol, const Tensor& k_cross) {
  const int64_t n = sol.alpha.shape[1];
  if (k_cross.rank() != 2 || k_cross.shape[0] != n) {
    throw std::invalid_argument("predict needs a (" + std::to_string(n) + ", m) cross Gram, got " +
                                shape_to_string(k_cross.shape));
  }
  Tensor out({sol.alpha.shape[0], k_cross.shape[1]});
  EMap(out.data.data(), out.shape[0], out.shape[1]).noalias() =
      CEMap(sol.alpha.data.data(), sol.alpha.shape[0], n) *
      CEMap(k_cross.data.data(), n, k_cross.shape[1]);
  return out;
}

double mse_loss(const Tensor& pred, const Tensor& target) {
  if (!pred.same_shape(target)) {
    throw std::invalid_argument("mse_loss shape mismatch: " + shape_to_string(pred.shape) + " vs " +
                                shape_to_string(target.shape));
  }
  double s = 0.0;
  for (size_t i = 0; i < pred.data.size(); ++i) {
    const double d = pred.data[i] - target.data[i];
    s += d * d;
  }
  return s / static_cast<double>(pred.numel());
}

double softmax_xent_loss(const Tensor& logits, const std::vector<int64_t>& labels) {
  if (logits.rank() != 2) throw std::invalid_argument("softmax_xent_loss expects (C, m) logits");
  const int64_t c_count = logits.shape[0], m = logits.shape[1];
  if (static_cast<int64_t>(labels.size()) != m) {
    throw std::invalid_argument("label count " + std::to_string(labels.size()) + " != column count " +
                                std::to_string(m));
  }
  double total = 0.0;
  for (int64_t j = 0; j < m; ++j) {
    const int64_t label = labels[static_cast<size_t>(j)];
    if (label < 0 || label >= c_count) {
      throw std::invalid_argument("label " + std::to_string(label) + " outside [0, " +
                                  std::to_string(c_count) + ")");
    }
    double mx = logits.at(0, j);
    for (int64_t r = 1; r < c_count; ++r) mx = std::max(mx, logits.at(r, j));
    double lse = 0.0;
    for (int64_t r = 0; r < c_count; ++r) lse += std::exp(logits.at(r, j) - mx);
    total += std::log(lse) + mx - logits.at(label, j);
  }
  return total / static_cast<double>(m);
}

ad::NodeId build_fit(ad::Graph& g, ad::NodeId k, ad::NodeId y, ad::NodeId lambda) {
  const Shape& sk = g.shape_of(k);
  const int64_t n = sk[0];
  Tensor identity({n, n}, 0.0);
  for (int64_t i = 0; i < n; ++i) identity.at(i, i) = 1.0;
  ad::NodeId a = g.add(g.mul(lambda, g.constant(std::move(identity))), k);
  return g.transpose(g.solve(g.transpose(a), g.transpose(y)));
}

ad::NodeId build_predict(ad::Graph& g, ad::NodeId alpha, ad::NodeId k_cross) {
  return g.matmul(alpha, k_cross);
}

ad::NodeId build_mse(ad::Graph& g, ad::NodeId pred, ad::NodeId target) {
  ad::NodeId diff = g.sub(pred, target);
  return g.reduce_mean(g.mul(diff, diff), -1);
}

ad::NodeId build_softmax_xent(ad::Graph& g, ad::NodeId logits, ad::NodeId onehot) {
  ad::NodeId lse = g.log(g.reduce_sum(g.exp(logits), 0));       // (1, m)
  ad::NodeId picked = g.reduce_sum(g.mul(logits, onehot), 0);   // (1, m)
  return g.reduce_mean(g.sub(lse, picked), -1);
}

}  // namespace metavrf::ridge
