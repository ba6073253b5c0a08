#include "metavrf/inference.hpp"

#include <cmath>
#include <stdexcept>

namespace metavrf::inference {

double kl_diag_gaussians(const GaussianPosterior& q, const GaussianPosterior& p) {
  if (!q.mu.same_shape(p.mu) || !q.log_var.same_shape(p.log_var) || !q.mu.same_shape(q.log_var)) {
    throw std::invalid_argument("kl_diag_gaussians dimension mismatch");
  }
  double kl = 0.0;
  for (size_t i = 0; i < q.mu.data.size(); ++i) {
    const double lvq = q.log_var.data[i];
    const double lvp = p.log_var.data[i];
    const double dmu = q.mu.data[i] - p.mu.data[i];
    kl += 0.5 * (lvp - lvq + (std::exp(lvq) + dmu * dmu) * std::exp(-lvp) - 1.0);
  }
  return kl;
}

Tensor laplace_attention(const Tensor& query, const Tensor& keys, const Tensor& values) {
  if (keys.rank() != 2 || keys.shape[0] < 1) {
    throw std::invalid_argument("laplace_attention requires at least one key");
  }
  if (!keys.same_shape(values)) {
    throw std::invalid_argument("laplace_attention keys/values shapes differ: " +
                                shape_to_string(keys.shape) + " vs " + shape_to_string(values.shape));
  }
  if (query.numel() != keys.shape[1]) {
    throw std::invalid_argument("laplace_attention query dim " + std::to_string(query.numel()) +
                                " != key dim " + std::to_string(keys.shape[1]));
  }
  const int64_t c_count = keys.shape[0], d = keys.shape[1];
  std::vector<double> scores(static_cast<size_t>(c_count));
  double mx = -1e300;
  for (int64_t j = 0; j < c_count; ++j) {
    double l1 = 0.0;
    for (int64_t c = 0; c < d; ++c) l1 += std::abs(query[c] - keys.at(j, c));
    scores[static_cast<size_t>(j)] = -l1;
    mx = std::max(mx, -l1);
  }
  double z = 0.0;
  for (double& s : scores) z += (s = std::exp(s - mx));
  Tensor out({1, d}, 0.0);
  for (int64_t j = 0; j < c_count; ++j) {
    const double w = scores[static_cast<size_t>(j)] / z;
    for (int64_t c = 0; c < d; ++c) out[c] += w * values.at(j, c);
  }
  return out;
}

Tensor reparameterize(const GaussianPosterior& post, int64_t basis_count, Rng& rng) {
  if (basis_count < 1) throw std::invalid_argument("reparameterize requires D >= 1");
  const int64_t d = post.mu.numel();
  Tensor out({basis_count, d});
  for (int64_t l = 0; l < basis_count; ++l) {
    for (int64_t c = 0; c < d; ++c) {
      const double sigma = std::exp(0.5 * post.log_var.data[static_cast<size_t>(c)]);
      out.at(l, c) = post.mu.data[static_cast<size_t>(c)] + sigma * rng.normal();
    }
  }
  return out;
}

std::pair<ad::NodeId, ad::NodeId> build_gaussian_head(ad::Graph& g, ad::NodeId x,
                                                      const HeadNodes& nodes) {
  ad::NodeId h = x;
  for (size_t i = 0; i < nodes.hidden_w.size(); ++i) {
    h = g.elu(g.add(g.matmul(h, nodes.hidden_w[i]), nodes.hidden_b[i]));
  }
  ad::NodeId mu = g.add(g.matmul(h, nodes.w_mu), nodes.b_mu);
  ad::NodeId log_var =
      g.clamp(g.add(g.matmul(h, nodes.w_log_var), nodes.b_log_var), -kLogVarBound, kLogVarBound);
  return {mu, log_var};
}

ad::NodeId build_laplace_attention(ad::Graph& g, ad::NodeId queries, ad::NodeId keys,
                                   ad::NodeId values) {
  const Shape& sk = g.shape_of(keys);
  const int64_t c_count = sk[0], d = sk[1];
  // One column of L1 distances per key; broadcasting handles the m query rows.
  std::vector<ad::NodeId> dist_cols;
  dist_cols.reserve(static_cast<size_t>(c_count));
  for (int64_t j = 0; j < c_count; ++j) {
    ad::NodeId key_row = g.slice(keys, {j, 0}, {j + 1, d});            // (1, d)
    ad::NodeId l1 = g.reduce_sum(g.abs(g.sub(queries, key_row)), 1);   // (m, 1)
    dist_cols.push_back(l1);
  }
  ad::NodeId dist = c_count == 1 ? dist_cols[0] : g.concat(dist_cols, 1);  // (m, C)
  ad::NodeId weights = g.softmax(g.neg(dist), 1);                          // (m, C)
  return g.matmul(weights, values);                                        // (m, d)
}

ad::NodeId build_reparameterize(ad::Graph& g, ad::NodeId mu, ad::NodeId log_var, ad::NodeId eps) {
  ad::NodeId sigma = g.exp(g.mul_scalar(log_var, 0.5));  // (1, d)
  return g.add(mu, g.mul(eps, sigma));                   // (D, d)
}

ad::NodeId build_kl_mean(ad::Graph& g, ad::NodeId mu_q, ad::NodeId log_var_q, ad::NodeId mu_p,
                         ad::NodeId log_var_p) {
  ad::NodeId dmu = g.sub(mu_q, mu_p);                                        // (m, d)
  ad::NodeId num = g.add(g.exp(log_var_q), g.mul(dmu, dmu));                 // (m, d)
  ad::NodeId term = g.add(g.sub(log_var_p, log_var_q), g.mul(num, g.exp(g.neg(log_var_p))));
  ad::NodeId per_row = g.mul_scalar(g.reduce_sum(g.add_scalar(term, -1.0), 1), 0.5);  // (m, 1)
  return g.reduce_mean(per_row, -1);
}

}  // namespace metavrf::inference
