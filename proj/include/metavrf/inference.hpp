#pragma once

#include <utility>
#include <vector>

#include "metavrf/autodiff.hpp"
#include "metavrf/rng.hpp"
#include "metavrf/tensor.hpp"

namespace metavrf::inference {

/// Diagonal Gaussian over frequency vectors: mu and log-variance rows (1, d).
struct GaussianPosterior {
  Tensor mu;       // (1, d)
  Tensor log_var;  // (1, d)
};

/// Bound applied to network log-variance outputs before exponentiation.
constexpr double kLogVarBound = 10.0;

/// KL(q || p) for diagonal Gaussians: sum over coordinates of
/// log(sigma_p/sigma_q) + (sigma_q^2 + (mu_q - mu_p)^2) / (2 sigma_p^2) - 1/2.
double kl_diag_gaussians(const GaussianPosterior& q, const GaussianPosterior& p);

/// Attention weights = softmax over keys of the negative L1 distance to the
/// query; returns weights^T . values. query: (1, d), keys/values: (C, d).
Tensor laplace_attention(const Tensor& query, const Tensor& keys, const Tensor& values);

/// D rows of mu + sigma (*) eps with eps ~ N(0, I) drawn from rng.
Tensor reparameterize(const GaussianPosterior& post, int64_t basis_count, Rng& rng);

// ---- graph builders ----

/// Static sizes for the posterior / prior heads: a stack of ELU hidden layers
/// followed by linear projections to mu and log-variance (clamped to
/// [-kLogVarBound, kLogVarBound]).
struct HeadNodes {
  std::vector<ad::NodeId> hidden_w, hidden_b;  // hidden_w[i]: (d_i, d_{i+1}); hidden_b[i]: (1, d_{i+1})
  ad::NodeId w_mu = ad::kNoNode, b_mu = ad::kNoNode;
  ad::NodeId w_log_var = ad::kNoNode, b_log_var = ad::kNoNode;
};

/// Applies the head to every row of x: returns (mu, log_var) with x's row count.
std::pair<ad::NodeId, ad::NodeId> build_gaussian_head(ad::Graph& g, ad::NodeId x,
                                                      const HeadNodes& nodes);

/// Rowwise Laplace-kernel cross attention: queries (m, d) against keys/values
/// (C, d) -> (m, d).
ad::NodeId build_laplace_attention(ad::Graph& g, ad::NodeId queries, ad::NodeId keys,
                                   ad::NodeId values);

/// mu (1, d) + exp(log_var/2) (*) eps, eps an input leaf of shape (D, d).
ad::NodeId build_reparameterize(ad::Graph& g, ad::NodeId mu, ad::NodeId log_var, ad::NodeId eps);

/// Mean over the m rows of the per-row diagonal-Gaussian KL between the shared
/// q = (mu_q, log_var_q) (1, d) and rowwise prior (mu_p, log_var_p) (m, d).
ad::NodeId build_kl_mean(ad::Graph& g, ad::NodeId mu_q, ad::NodeId log_var_q, ad::NodeId mu_p,
                         ad::NodeId log_var_p);

}  // namespace metavrf::inference
