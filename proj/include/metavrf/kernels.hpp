#pragma once

#include "metavrf/autodiff.hpp"
#include "metavrf/rng.hpp"
#include "metavrf/tensor.hpp"

namespace metavrf::kernels {

/// ModelScale uses s = 1/sqrt(D) (the form the model trains with; the learned
/// regularizer absorbs the constant). UnbiasedScale uses s = sqrt(2/D) so that
/// z(x)·z(x') is an unbiased estimate of the Gaussian kernel.
enum class ScaleMode { kModelScale, kUnbiasedScale };

double scale_factor(ScaleMode mode, int64_t basis_count);

/// A realization of random cosine features: D frequency rows plus D phase
/// offsets in [0, 2pi].
struct SpectralBasis {
  Tensor frequencies;  // (D, d_feat)
  Tensor biases;       // (1, D), each in [0, 2pi]
  ScaleMode scale_mode = ScaleMode::kModelScale;

  int64_t basis_count() const { return frequencies.shape[0]; }
  int64_t feature_dim() const { return frequencies.shape[1]; }
  void validate() const;
};

/// Frequencies ~ N(0, freq_stddev^2 I), biases ~ U[0, 2pi]. freq_stddev = 1/sigma
/// targets the Gaussian kernel with bandwidth sigma.
SpectralBasis sample_basis(Rng& rng, int64_t basis_count, int64_t feature_dim, ScaleMode mode,
                           double freq_stddev = 1.0);

/// Row i, column j = s * cos(omega_j . x_i + b_j). X: (n, d_feat) -> (n, D).
Tensor feature_map(const SpectralBasis& basis, const Tensor& x);

/// Z_left (n, D) x Z_right (m, D) -> (n, m) Gram matrix of feature dot products.
Tensor gram(const Tensor& z_left, const Tensor& z_right);

/// Exact Gaussian kernel: entry (i,j) = exp(-|x_i - x'_j|^2 / (2 sigma^2)).
Tensor rbf_exact(const Tensor& x, const Tensor& x_prime, double sigma);

/// Mean Euclidean distance over all unordered distinct row pairs of X (n >= 2).
double mean_pairwise_bandwidth(const Tensor& x);

// ---- graph builders (differentiable counterparts used inside the model) ----

/// cos(X . freqs^T + biases) * scale_factor(mode, D).
ad::NodeId build_feature_map(ad::Graph& g, ad::NodeId x, ad::NodeId frequencies, ad::NodeId biases,
                             ScaleMode mode, int64_t basis_count);

/// Z_left . Z_right^T.
ad::NodeId build_gram(ad::Graph& g, ad::NodeId z_left, ad::NodeId z_right);

/// exp(-sqdist(X, X') / (2 sigma^2)) with sigma supplied as a graph node;
/// sqdist assembled from matmuls and row/column norms (differentiable).
ad::NodeId build_rbf_exact(ad::Graph& g, ad::NodeId x, ad::NodeId x_prime, ad::NodeId sigma);

/// Differentiable mean pairwise distance of X's rows: distances computed as
/// sqrt(sqdist + eps) with a small eps guarding the zero-diagonal gradient.
ad::NodeId build_mean_pairwise_bandwidth(ad::Graph& g, ad::NodeId x, double eps = 1e-12);

}  // namespace metavrf::kernels
