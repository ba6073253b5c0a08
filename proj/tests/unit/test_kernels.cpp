#include <Eigen/Dense>
#include <cmath>

#include "doctest.h"
#include "metavrf/autodiff.hpp"
#include "metavrf/kernels.hpp"
#include "metavrf/rng.hpp"

using namespace metavrf;
using kernels::ScaleMode;

namespace {

Tensor rand_matrix(int64_t r, int64_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t({r, c});
  for (auto& v : t.data) v = lo + (hi - lo) * rng.uniform();
  return t;
}

}  // namespace

TEST_SUITE("kernels") {

  TEST_CASE("zero frequencies and biases give the flat 1/sqrt(D) map") {
    kernels::SpectralBasis basis;
    basis.frequencies = Tensor({4, 3}, 0.0);
    basis.biases = Tensor({1, 4}, 0.0);
    basis.scale_mode = ScaleMode::kModelScale;
    Rng rng(1);
    Tensor z = kernels::feature_map(basis, rand_matrix(5, 3, rng));
    CHECK(z.shape == Shape{5, 4});
    for (double v : z.data) CHECK(v == doctest::Approx(0.5).epsilon(1e-15));
  }

  TEST_CASE("a pi bias flips every feature to -1") {
    kernels::SpectralBasis basis;
    basis.frequencies = Tensor({1, 2}, 0.0);
    basis.biases = Tensor({1, 1}, std::acos(-1.0));
    basis.scale_mode = ScaleMode::kModelScale;
    Rng rng(2);
    Tensor z = kernels::feature_map(basis, rand_matrix(3, 2, rng));
    for (double v : z.data) CHECK(v == doctest::Approx(-1.0).epsilon(1e-12));
  }

  TEST_CASE("unbiased-scale features estimate the Gaussian kernel") {
    // 2e4 independent single-frequency draws, batched as one wide basis.
    Rng rng(33);
    auto basis = kernels::sample_basis(rng, 20000, 2, ScaleMode::kUnbiasedScale);
    for (int trial = 0; trial < 5; ++trial) {
      Tensor pts = rand_matrix(2, 2, rng, -1.5, 1.5);
      Tensor z = kernels::feature_map(basis, pts);
      double est = 0.0;
      for (int64_t j = 0; j < z.cols(); ++j) est += z.at(0, j) * z.at(1, j);
      Tensor x0({1, 2}, {pts.at(0, 0), pts.at(0, 1)});
      Tensor x1({1, 2}, {pts.at(1, 0), pts.at(1, 1)});
      double exact = kernels::rbf_exact(x0, x1, 1.0).item();
      CHECK(std::fabs(est - exact) < 0.04);
    }
  }

  TEST_CASE("paper-scale gram is exactly half the unbiased-scale gram") {
    Rng rng(4);
    auto basis = kernels::sample_basis(rng, 16, 3, ScaleMode::kModelScale);
    Tensor x = rand_matrix(6, 3, rng);
    Tensor z_paper = kernels::feature_map(basis, x);
    basis.scale_mode = ScaleMode::kUnbiasedScale;
    Tensor z_unb = kernels::feature_map(basis, x);
    Tensor g_paper = kernels::gram(z_paper, z_paper);
    Tensor g_unb = kernels::gram(z_unb, z_unb);
    for (int64_t i = 0; i < g_paper.numel(); ++i)
      CHECK(g_paper[i] == doctest::Approx(0.5 * g_unb[i]).epsilon(1e-12));
  }

  TEST_CASE("gram of identity-like rows and of orthogonal rows") {
    Tensor eye = Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor g = kernels::gram(eye, eye);
    for (int64_t i = 0; i < 3; ++i)
      for (int64_t j = 0; j < 3; ++j) CHECK(g.at(i, j) == (i == j ? 1.0 : 0.0));
    Tensor a = Tensor::matrix(1, 2, {1, 0});
    Tensor b = Tensor::matrix(1, 2, {0, 1});
    CHECK(kernels::gram(a, b).item() == 0.0);
  }

  TEST_CASE("gram matches a brute-force double loop") {
    Rng rng(5);
    Tensor zl = rand_matrix(5, 8, rng);
    Tensor zr = rand_matrix(7, 8, rng);
    Tensor g = kernels::gram(zl, zr);
    for (int64_t i = 0; i < 5; ++i) {
      for (int64_t j = 0; j < 7; ++j) {
        double dot = 0.0;
        for (int64_t d = 0; d < 8; ++d) dot += zl.at(i, d) * zr.at(j, d);
        CHECK(std::fabs(g.at(i, j) - dot) <= 1e-12);
      }
    }
  }

  TEST_CASE("gram of identical features is symmetric positive semi-definite") {
    Rng rng(6);
    Tensor z = rand_matrix(9, 5, rng);
    Tensor g = kernels::gram(z, z);
    for (int64_t i = 0; i < 9; ++i)
      for (int64_t j = 0; j < 9; ++j) CHECK(std::fabs(g.at(i, j) - g.at(j, i)) <= 1e-12);
    Eigen::MatrixXd m(9, 9);
    for (int64_t i = 0; i < 9; ++i)
      for (int64_t j = 0; j < 9; ++j) m(i, j) = g.at(i, j);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    CHECK(es.eigenvalues().minCoeff() >= -1e-8);
  }

  TEST_CASE("exact rbf: unit diagonal and the e^-1 point") {
    Rng rng(7);
    Tensor x = rand_matrix(4, 3, rng);
    Tensor k = kernels::rbf_exact(x, x, 0.8);
    for (int64_t i = 0; i < 4; ++i) CHECK(k.at(i, i) == doctest::Approx(1.0).epsilon(1e-15));
    const double sigma = 1.3;
    Tensor a = Tensor::matrix(1, 1, {0.0});
    Tensor b = Tensor::matrix(1, 1, {sigma * std::sqrt(2.0)});
    CHECK(kernels::rbf_exact(a, b, sigma).item() ==
          doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
  }

  TEST_CASE("rbf rejects non-positive bandwidth") {
    Tensor x = Tensor::matrix(1, 1, {0.0});
    CHECK_THROWS(kernels::rbf_exact(x, x, 0.0));
    CHECK_THROWS(kernels::rbf_exact(x, x, -1.0));
  }

  TEST_CASE("mean pairwise bandwidth: hand values and a brute-force audit") {
    Tensor two = Tensor::matrix(2, 1, {1.0, 4.0});
    CHECK(kernels::mean_pairwise_bandwidth(two) == doctest::Approx(3.0).epsilon(1e-15));
    Tensor collinear = Tensor::matrix(3, 1, {0.0, 1.0, 2.0});
    CHECK(kernels::mean_pairwise_bandwidth(collinear) ==
          doctest::Approx(4.0 / 3.0).epsilon(1e-15));
    Rng rng(8);
    Tensor pts = rand_matrix(10, 3, rng);
    double brute = 0.0;
    int64_t pairs = 0;
    for (int64_t i = 0; i < 10; ++i) {
      for (int64_t j = i + 1; j < 10; ++j) {
        double sq = 0.0;
        for (int64_t d = 0; d < 3; ++d) {
          double diff = pts.at(i, d) - pts.at(j, d);
          sq += diff * diff;
        }
        brute += std::sqrt(sq);
        ++pairs;
      }
    }
    brute /= static_cast<double>(pairs);
    CHECK(kernels::mean_pairwise_bandwidth(pts) == doctest::Approx(brute).epsilon(1e-12));
    CHECK_THROWS(kernels::mean_pairwise_bandwidth(Tensor::matrix(1, 2, {1.0, 2.0})));
  }

  TEST_CASE("bandwidth of a 5-point support set feeds the rbf baseline") {
    Rng rng(9);
    Tensor support = rand_matrix(5, 2, rng, -2.0, 2.0);
    double sigma = kernels::mean_pairwise_bandwidth(support);
    Tensor k = kernels::rbf_exact(support, support, sigma);
    // A hand-checkable consequence: entries are exp(-d^2 / (2 sigma^2)).
    double d01 = std::hypot(support.at(0, 0) - support.at(1, 0),
                            support.at(0, 1) - support.at(1, 1));
    CHECK(k.at(0, 1) == doctest::Approx(std::exp(-d01 * d01 / (2 * sigma * sigma))).epsilon(1e-12));
  }

  TEST_CASE("graph builders reproduce the plain oracles") {
    Rng rng(10);
    auto basis = kernels::sample_basis(rng, 12, 3, ScaleMode::kModelScale);
    Tensor x = rand_matrix(6, 3, rng);
    Tensor z_ref = kernels::feature_map(basis, x);
    Tensor g_ref = kernels::gram(z_ref, z_ref);
    double bw_ref = kernels::mean_pairwise_bandwidth(x);
    Tensor k_ref = kernels::rbf_exact(x, x, bw_ref);

    ad::Graph g;
    ad::NodeId xn = g.constant(x, "x");
    ad::NodeId fn = g.constant(basis.frequencies, "freqs");
    ad::NodeId bn = g.constant(basis.biases, "biases");
    ad::NodeId zn = kernels::build_feature_map(g, xn, fn, bn, ScaleMode::kModelScale, 12);
    ad::NodeId gn = kernels::build_gram(g, zn, zn);
    ad::NodeId bwn = kernels::build_mean_pairwise_bandwidth(g, xn);
    ad::NodeId kn = kernels::build_rbf_exact(g, xn, xn, bwn);
    g.forward();
    CHECK(g.value(zn).max_abs_diff(z_ref) <= 1e-12);
    CHECK(g.value(gn).max_abs_diff(g_ref) <= 1e-12);
    CHECK(std::fabs(g.value(bwn).item() - bw_ref) <= 1e-9);
    CHECK(g.value(kn).max_abs_diff(k_ref) <= 1e-9);
  }

  TEST_CASE("sampled bases respect the declared ranges") {
    Rng rng(11);
    auto basis = kernels::sample_basis(rng, 500, 4, ScaleMode::kUnbiasedScale);
    basis.validate();
    for (int64_t j = 0; j < 500; ++j) {
      CHECK(basis.biases.at(0, j) >= 0.0);
      CHECK(basis.biases.at(0, j) <= 2.0 * std::acos(-1.0));
    }
    CHECK(kernels::scale_factor(ScaleMode::kModelScale, 4) == doctest::Approx(0.5));
    CHECK(kernels::scale_factor(ScaleMode::kUnbiasedScale, 2) == doctest::Approx(1.0));
  }
}
