#include <cmath>
#include <vector>

#include "doctest.h"
#include "metavrf/autodiff.hpp"
#include "metavrf/inference.hpp"
#include "metavrf/rng.hpp"

using namespace metavrf;
using inference::GaussianPosterior;

namespace {

Tensor rand_matrix(int64_t r, int64_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t({r, c});
  for (auto& v : t.data) v = lo + (hi - lo) * rng.uniform();
  return t;
}

/// Monte Carlo KL for 1-D Gaussians: E_{x~q}[log q(x) - log p(x)].
double mc_kl_1d(double mu_q, double var_q, double mu_p, double var_p, int64_t samples,
                uint64_t seed) {
  Rng rng(seed);
  double acc = 0.0;
  for (int64_t i = 0; i < samples; ++i) {
    const double x = mu_q + std::sqrt(var_q) * rng.normal();
    const double lq = -0.5 * std::log(2 * M_PI * var_q) - (x - mu_q) * (x - mu_q) / (2 * var_q);
    const double lp = -0.5 * std::log(2 * M_PI * var_p) - (x - mu_p) * (x - mu_p) / (2 * var_p);
    acc += lq - lp;
  }
  return acc / static_cast<double>(samples);
}

}  // namespace

TEST_SUITE("inference") {

  TEST_CASE("kl of identical gaussians is zero to 1e-12") {
    Rng rng(1);
    for (int trial = 0; trial < 10; ++trial) {
      GaussianPosterior q{rand_matrix(1, 6, rng, -2, 2), rand_matrix(1, 6, rng, -1, 1)};
      CHECK(std::fabs(inference::kl_diag_gaussians(q, q)) <= 1e-12);
    }
  }

  TEST_CASE("unit-shift kl equals one half") {
    GaussianPosterior q{Tensor::row({1.0}), Tensor::row({0.0})};
    GaussianPosterior p{Tensor::row({0.0}), Tensor::row({0.0})};
    CHECK(inference::kl_diag_gaussians(q, p) == doctest::Approx(0.5).epsilon(1e-14));
  }

  TEST_CASE("variance-4 kl equals 3/2 minus log 2") {
    GaussianPosterior q{Tensor::row({0.0}), Tensor::row({std::log(4.0)})};
    GaussianPosterior p{Tensor::row({0.0}), Tensor::row({0.0})};
    CHECK(inference::kl_diag_gaussians(q, p) ==
          doctest::Approx(1.5 - std::log(2.0)).epsilon(1e-13));
  }

  TEST_CASE("closed-form kl matches the monte carlo estimate") {
    CHECK(std::fabs(mc_kl_1d(1.0, 1.0, 0.0, 1.0, 200000, 5) - 0.5) < 1e-2);
    CHECK(std::fabs(mc_kl_1d(0.0, 4.0, 0.0, 1.0, 200000, 6) - (1.5 - std::log(2.0))) < 1e-2);
    Rng rng(7);
    for (int trial = 0; trial < 5; ++trial) {
      const double mq = 2.0 * rng.uniform() - 1.0, mp = 2.0 * rng.uniform() - 1.0;
      const double vq = 0.5 + rng.uniform(), vp = 0.5 + rng.uniform();
      GaussianPosterior q{Tensor::row({mq}), Tensor::row({std::log(vq)})};
      GaussianPosterior p{Tensor::row({mp}), Tensor::row({std::log(vp)})};
      const double closed = inference::kl_diag_gaussians(q, p);
      CHECK(closed >= 0.0);
      CHECK(std::fabs(closed - mc_kl_1d(mq, vq, mp, vp, 200000, 100 + trial)) < 2e-2);
    }
  }

  TEST_CASE("laplace attention: single key passes its value through") {
    Tensor q = Tensor::row({0.3, -0.7});
    Tensor keys = Tensor::matrix(1, 2, {5.0, 5.0});
    Tensor values = Tensor::matrix(1, 2, {2.0, -3.0});
    Tensor out = inference::laplace_attention(q, keys, values);
    CHECK(out.at(0, 0) == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(out.at(0, 1) == doctest::Approx(-3.0).epsilon(1e-14));
  }

  TEST_CASE("laplace attention: equidistant keys average their values") {
    Tensor q = Tensor::row({0.0});
    Tensor keys = Tensor::matrix(2, 1, {1.0, -1.0});
    Tensor values = Tensor::matrix(2, 1, {4.0, -2.0});
    Tensor out = inference::laplace_attention(q, keys, values);
    CHECK(out.item() == doctest::Approx(1.0).epsilon(1e-13));
  }

  TEST_CASE("laplace attention: hand-evaluated two-key softmax") {
    Tensor q = Tensor::row({0.0});
    Tensor keys = Tensor::matrix(2, 1, {0.0, 2.0});
    Tensor values = Tensor::matrix(2, 1, {1.0, 3.0});
    Tensor out = inference::laplace_attention(q, keys, values);
    const double w0 = 1.0 / (1.0 + std::exp(-2.0));  // softmax(0, -2)
    CHECK(w0 == doctest::Approx(0.880797077978).epsilon(1e-10));
    CHECK(out.item() == doctest::Approx(w0 * 1.0 + (1.0 - w0) * 3.0).epsilon(1e-12));
    CHECK(out.item() == doctest::Approx(1.238405844044).epsilon(1e-10));
  }

  TEST_CASE("five-class attention weights match a brute-force enumeration") {
    Rng rng(2);
    Tensor q = rand_matrix(1, 4, rng);
    Tensor keys = rand_matrix(5, 4, rng);
    Tensor values = rand_matrix(5, 4, rng);
    Tensor out = inference::laplace_attention(q, keys, values);

    std::vector<double> neg_l1(5);
    for (int64_t j = 0; j < 5; ++j) {
      double d = 0.0;
      for (int64_t c = 0; c < 4; ++c) d += std::fabs(q.at(0, c) - keys.at(j, c));
      neg_l1[static_cast<size_t>(j)] = -d;
    }
    double mx = neg_l1[0];
    for (double v : neg_l1) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : neg_l1) z += std::exp(v - mx);
    for (int64_t c = 0; c < 4; ++c) {
      double expect = 0.0;
      for (int64_t j = 0; j < 5; ++j)
        expect += std::exp(neg_l1[static_cast<size_t>(j)] - mx) / z * values.at(j, c);
      CHECK(std::fabs(out.at(0, c) - expect) <= 1e-10);
    }
  }

  TEST_CASE("reparameterize: collapsed variance returns mu rows") {
    GaussianPosterior post{Tensor::row({2.0, -1.0, 0.5}), Tensor::row({-700.0, -700.0, -700.0})};
    Rng rng(3);
    Tensor draws = inference::reparameterize(post, 6, rng);
    CHECK(draws.shape == Shape{6, 3});
    for (int64_t l = 0; l < 6; ++l) {
      CHECK(draws.at(l, 0) == 2.0);
      CHECK(draws.at(l, 1) == -1.0);
      CHECK(draws.at(l, 2) == 0.5);
    }
  }

  TEST_CASE("reparameterize: sample mean concentrates on mu") {
    GaussianPosterior post{Tensor::row({1.0, -2.0}), Tensor::row({std::log(0.25), 0.0})};
    Rng rng(4);
    const int64_t n = 100000;
    Tensor draws = inference::reparameterize(post, n, rng);
    for (int64_t c = 0; c < 2; ++c) {
      double mean = 0.0;
      for (int64_t l = 0; l < n; ++l) mean += draws.at(l, c);
      mean /= static_cast<double>(n);
      const double sigma = std::exp(post.log_var.at(0, c) / 2.0);
      CHECK(std::fabs(mean - post.mu.at(0, c)) <= 3.0 * sigma / std::sqrt(double(n)));
    }
  }

  TEST_CASE("zero-weight head maps any input to a standard normal") {
    ad::Graph g;
    const int64_t d_in = 5, d_hidden = 4, d_out = 3;
    inference::HeadNodes head;
    head.hidden_w.push_back(g.constant(Tensor({d_in, d_hidden}, 0.0), "w0"));
    head.hidden_b.push_back(g.constant(Tensor({1, d_hidden}, 0.0), "b0"));
    head.w_mu = g.constant(Tensor({d_hidden, d_out}, 0.0), "wm");
    head.b_mu = g.constant(Tensor({1, d_out}, 0.0), "bm");
    head.w_log_var = g.constant(Tensor({d_hidden, d_out}, 0.0), "wl");
    head.b_log_var = g.constant(Tensor({1, d_out}, 0.0), "bl");
    Rng rng(5);
    ad::NodeId x = g.constant(rand_matrix(2, d_in, rng, -3, 3), "x");
    auto [mu, lv] = inference::build_gaussian_head(g, x, head);
    g.forward();
    for (double v : g.value(mu).data) CHECK(v == 0.0);
    for (double v : g.value(lv).data) CHECK(v == 0.0);  // sigma = exp(0/2) = 1
  }

  TEST_CASE("head log-variance saturates at the clamp bound") {
    ad::Graph g;
    inference::HeadNodes head;
    head.w_mu = g.constant(Tensor({1, 1}, 0.0), "wm");
    head.b_mu = g.constant(Tensor({1, 1}, 0.0), "bm");
    head.w_log_var = g.constant(Tensor({1, 1}, 1000.0), "wl");
    head.b_log_var = g.constant(Tensor({1, 1}, 0.0), "bl");
    ad::NodeId x = g.constant(Tensor::matrix(2, 1, {1.0, -1.0}), "x");
    auto [mu, lv] = inference::build_gaussian_head(g, x, head);
    (void)mu;
    g.forward();
    CHECK(g.value(lv).at(0, 0) == inference::kLogVarBound);
    CHECK(g.value(lv).at(1, 0) == -inference::kLogVarBound);
  }

  TEST_CASE("head outputs respond smoothly to the context vector") {
    ad::Graph g;
    Rng rng(6);
    inference::HeadNodes head;
    head.hidden_w.push_back(g.constant(rand_matrix(4, 4, rng, -0.5, 0.5), "w0"));
    head.hidden_b.push_back(g.constant(rand_matrix(1, 4, rng, 0.1, 0.3), "b0"));
    head.w_mu = g.constant(rand_matrix(4, 2, rng, -0.5, 0.5), "wm");
    head.b_mu = g.constant(rand_matrix(1, 2, rng, -0.2, 0.2), "bm");
    head.w_log_var = g.constant(rand_matrix(4, 2, rng, -0.5, 0.5), "wl");
    head.b_log_var = g.constant(rand_matrix(1, 2, rng, -0.2, 0.2), "bl");
    ad::NodeId h = g.param(rand_matrix(1, 4, rng), "h");
    auto [mu, lv] = inference::build_gaussian_head(g, h, head);
    ad::NodeId loss = g.reduce_sum(g.concat({mu, lv}, 1), -1);
    CHECK(g.grad_check(loss, 1e-5) <= 1e-4);
  }

  TEST_CASE("graph reparameterization: zero eps returns mu, unit eps adds sigma") {
    ad::Graph g;
    Tensor mu = Tensor::row({0.5, -1.5});
    Tensor lv = Tensor::row({std::log(4.0), std::log(9.0)});
    ad::NodeId eps = g.input({3, 2}, "eps");
    ad::NodeId draws = inference::build_reparameterize(g, g.constant(mu, "mu"),
                                                       g.constant(lv, "lv"), eps);
    g.forward({{eps, Tensor({3, 2}, 0.0)}});
    for (int64_t l = 0; l < 3; ++l) {
      CHECK(g.value(draws).at(l, 0) == doctest::Approx(0.5).epsilon(1e-15));
      CHECK(g.value(draws).at(l, 1) == doctest::Approx(-1.5).epsilon(1e-15));
    }
    g.forward({{eps, Tensor({3, 2}, 1.0)}});
    CHECK(g.value(draws).at(0, 0) == doctest::Approx(0.5 + 2.0).epsilon(1e-14));
    CHECK(g.value(draws).at(0, 1) == doctest::Approx(-1.5 + 3.0).epsilon(1e-14));
  }

  TEST_CASE("graph kl mean equals the averaged closed form over prior rows") {
    Rng rng(8);
    Tensor mu_q = rand_matrix(1, 3, rng), lv_q = rand_matrix(1, 3, rng, -1, 1);
    Tensor mu_p = rand_matrix(4, 3, rng), lv_p = rand_matrix(4, 3, rng, -1, 1);
    double expect = 0.0;
    for (int64_t r = 0; r < 4; ++r) {
      Tensor mp({1, 3}), lp({1, 3});
      for (int64_t c = 0; c < 3; ++c) {
        mp.at(0, c) = mu_p.at(r, c);
        lp.at(0, c) = lv_p.at(r, c);
      }
      expect += inference::kl_diag_gaussians({mu_q, lv_q}, {mp, lp});
    }
    expect /= 4.0;

    ad::Graph g;
    ad::NodeId kl = inference::build_kl_mean(g, g.constant(mu_q, "mq"), g.constant(lv_q, "lq"),
                                             g.constant(mu_p, "mp"), g.constant(lv_p, "lp"));
    g.forward();
    CHECK(g.value(kl).item() == doctest::Approx(expect).epsilon(1e-12));
  }
}
