#include "metavrf/kernels.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

namespace metavrf::kernels {

namespace {
using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CEMap = Eigen::Map<const EMat>;
using EMap = Eigen::Map<EMat>;

CEMap as_matrix(const Tensor& t) { return CEMap(t.data.data(), t.shape[0], t.shape[1]); }
}  // namespace

double scale_factor(ScaleMode mode, int64_t basis_count) {
  if (basis_count < 1) throw std::invalid_argument("basis count must be >= 1");
  const double d = static_cast<double>(basis_count);
  return mode == ScaleMode::kModelScale ? 1.0 / std::sqrt(d) : std::sqrt(2.0 / d);
}

void SpectralBasis::validate() const {
  if (frequencies.rank() != 2 || biases.rank() != 2 || biases.shape[0] != 1) {
    throw std::invalid_argument("spectral basis needs (D, d) frequencies and (1, D) biases");
  }
  if (frequencies.shape[0] < 1) throw std::invalid_argument("basis count must be >= 1");
  if (biases.shape[1] != frequencies.shape[0]) {
    throw std::invalid_argument("bias count " + std::to_string(biases.shape[1]) +
                                " != basis count " + std::to_string(frequencies.shape[0]));
  }
  if (!frequencies.all_finite()) throw std::invalid_argument("non-finite frequency in spectral basis");
  for (double b : biases.data) {
    if (!(b >= 0.0 && b <= 2.0 * M_PI)) {
      throw std::invalid_argument("bias " + std::to_string(b) + " outside [0, 2pi]");
    }
  }
}

SpectralBasis sample_basis(Rng& rng, int64_t basis_count, int64_t feature_dim, ScaleMode mode,
                           double freq_stddev) {
  SpectralBasis basis;
  basis.scale_mode = mode;
  basis.frequencies = Tensor({basis_count, feature_dim});
  for (double& v : basis.frequencies.data) v = rng.normal() * freq_stddev;
  basis.biases = Tensor({1, basis_count});
  for (double& v : basis.biases.data) v = rng.uniform(0.0, 2.0 * M_PI);
  return basis;
}

Tensor feature_map(const SpectralBasis& basis, const Tensor& x) {
  basis.validate();
  if (x.rank() != 2 || x.shape[1] != basis.feature_dim()) {
    throw std::invalid_argument("feature_map input " + shape_to_string(x.shape) +
                                " incompatible with basis feature dim " +
                                std::to_string(basis.feature_dim()));
  }
  const int64_t n = x.shape[0];
  const int64_t d_bases = basis.basis_count();
  Tensor z({n, d_bases});
  EMap zm(z.data.data(), n, d_bases);
  zm.noalias() = as_matrix(x) * as_matrix(basis.frequencies).transpose();
  const double s = scale_factor(basis.scale_mode, d_bases);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < d_bases; ++j) {
      z.at(i, j) = s * std::cos(z.at(i, j) + basis.biases.data[static_cast<size_t>(j)]);
    }
  }
  return z;
}

Tensor gram(const Tensor& z_left, const Tensor& z_right) {
  if (z_left.rank() != 2 || z_right.rank() != 2 || z_left.shape[1] != z_right.shape[1]) {
    throw std::invalid_argument("gram requires matching feature counts, got " +
                                shape_to_string(z_left.shape) + " and " + shape_to_string(z_right.shape));
  }
  Tensor k({z_left.shape[0], z_right.shape[0]});
  EMap km(k.data.data(), k.shape[0], k.shape[1]);
  km.noalias() = as_matrix(z_left) * as_matrix(z_right).transpose();
  return k;
}

Tensor rbf_exact(const Tensor& x, const Tensor& x_prime, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("rbf_exact requires sigma > 0");
  if (x.rank() != 2 || x_prime.rank() != 2 || x.shape[1] != x_prime.shape[1]) {
    throw std::invalid_argument("rbf_exact requires matching feature dims, got " +
                                shape_to_string(x.shape) + " and " + shape_to_string(x_prime.shape));
  }
  const int64_t n = x.shape[0], m = x_prime.shape[0], d = x.shape[1];
  Tensor k({n, m});
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < m; ++j) {
      double sq = 0.0;
      for (int64_t c = 0; c < d; ++c) {
        const double diff = x.at(i, c) - x_prime.at(j, c);
        sq += diff * diff;
      }
      k.at(i, j) = std::exp(-sq * inv);
    }
  }
  return k;
}

double mean_pairwise_bandwidth(const Tensor& x) {
  if (x.rank() != 2 || x.shape[0] < 2) {
    throw std::invalid_argument("mean_pairwise_bandwidth requires at least 2 rows, got " +
                                shape_to_string(x.shape));
  }
  const int64_t n = x.shape[0], d = x.shape[1];
  double sum = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = i + 1; j < n; ++j) {
      double sq = 0.0;
      for (int64_t c = 0; c < d; ++c) {
        const double diff = x.at(i, c) - x.at(j, c);
        sq += diff * diff;
      }
      sum += std::sqrt(sq);
    }
  }
  return sum / (static_cast<double>(n) * static_cast<double>(n - 1) / 2.0);
}

ad::NodeId build_feature_map(ad::Graph& g, ad::NodeId x, ad::NodeId frequencies, ad::NodeId biases,
                             ScaleMode mode, int64_t basis_count) {
  ad::NodeId proj = g.matmul(x, g.transpose(frequencies));
  ad::NodeId shifted = g.add(proj, biases);
  return g.mul_scalar(g.cos(shifted), scale_factor(mode, basis_count));
}

ad::NodeId build_gram(ad::Graph& g, ad::NodeId z_left, ad::NodeId z_right) {
  return g.matmul(z_left, g.transpose(z_right));
}

namespace {
/// Squared pairwise distances |x_i - x'_j|^2 as row-norms - 2 X X'^T + col-norms.
ad::NodeId build_sqdist(ad::Graph& g, ad::NodeId x, ad::NodeId x_prime) {
  ad::NodeId row_norms = g.reduce_sum(g.mul(x, x), 1);                           // (n, 1)
  ad::NodeId col_norms = g.transpose(g.reduce_sum(g.mul(x_prime, x_prime), 1));  // (1, m)
  ad::NodeId cross = g.mul_scalar(g.matmul(x, g.transpose(x_prime)), -2.0);
  return g.add(g.add(cross, row_norms), col_norms);
}
}  // namespace

ad::NodeId build_rbf_exact(ad::Graph& g, ad::NodeId x, ad::NodeId x_prime, ad::NodeId sigma) {
  ad::NodeId sqdist = build_sqdist(g, x, x_prime);
  ad::NodeId denom = g.mul_scalar(g.mul(sigma, sigma), 2.0);
  return g.exp(g.neg(g.divide(sqdist, denom)));
}

ad::NodeId build_mean_pairwise_bandwidth(ad::Graph& g, ad::NodeId x, double eps) {
  const Shape& sx = g.shape_of(x);
  const int64_t n = sx[0];
  ad::NodeId sqdist = build_sqdist(g, x, x);
  ad::NodeId dist = g.sqrt(g.add_scalar(sqdist, eps));
  // Kill the diagonal (structurally zero distances) with a constant mask so
  // roundoff there neither biases the mean nor leaks gradient.
  Tensor mask({n, n}, 1.0);
  for (int64_t i = 0; i < n; ++i) mask.at(i, i) = 0.0;
  ad::NodeId masked = g.mul(dist, g.constant(std::move(mask), "offdiag_mask"));
  const double pairs = static_cast<double>(n) * static_cast<double>(n - 1);
  return g.mul_scalar(g.reduce_sum(masked, -1), 1.0 / pairs);
}

}  // namespace metavrf::kernels
