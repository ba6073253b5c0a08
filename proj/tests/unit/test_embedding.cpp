#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "metavrf/autodiff.hpp"
#include "metavrf/embedding.hpp"
#include "metavrf/model.hpp"
#include "metavrf/rng.hpp"

using namespace metavrf;
using embedding::CnnNodes;
using embedding::MlpNodes;

namespace {

Tensor rand_tensor(Shape shape, Rng& rng, double lo = -0.5, double hi = 0.5) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = lo + (hi - lo) * rng.uniform();
  return t;
}

}  // namespace

TEST_SUITE("embedding") {

  TEST_CASE("mlp with zero weights embeds everything to zero") {
    ad::Graph g;
    MlpNodes mlp;
    mlp.weights = {g.constant(Tensor({1, 40}, 0.0), "w0"), g.constant(Tensor({40, 40}, 0.0), "w1")};
    mlp.biases = {g.constant(Tensor({1, 40}, 0.0), "b0"), g.constant(Tensor({1, 40}, 0.0), "b1")};
    ad::NodeId x = g.constant(Tensor::matrix(3, 1, {-2.0, 0.0, 5.0}), "x");
    ad::NodeId emb = embedding::build_mlp_embedder(g, x, mlp);
    g.forward();
    CHECK(g.shape_of(emb) == Shape{3, 40});
    CHECK(g.value(emb).max_abs() == 0.0);
  }

  TEST_CASE("identity-like weights pass a positive input through the first coordinate") {
    ad::Graph g;
    Tensor w0({1, 40}, 0.0);
    w0.at(0, 0) = 1.0;
    Tensor w1({40, 40}, 0.0);
    for (int64_t i = 0; i < 40; ++i) w1.at(i, i) = 1.0;
    MlpNodes mlp;
    mlp.weights = {g.constant(w0, "w0"), g.constant(w1, "w1")};
    mlp.biases = {g.constant(Tensor({1, 40}, 0.0), "b0"), g.constant(Tensor({1, 40}, 0.0), "b1")};
    ad::NodeId x = g.constant(Tensor::matrix(2, 1, {3.25, 0.5}), "x");
    ad::NodeId emb = embedding::build_mlp_embedder(g, x, mlp);
    g.forward();
    CHECK(g.value(emb).at(0, 0) == 3.25);
    CHECK(g.value(emb).at(1, 0) == 0.5);
    for (int64_t c = 1; c < 40; ++c) {
      CHECK(g.value(emb).at(0, c) == 0.0);
      CHECK(g.value(emb).at(1, c) == 0.0);
    }
  }

  TEST_CASE("mlp forward matches a plain-double loop oracle") {
    Rng rng(21);
    const int64_t n = 4, d0 = 3, d1 = 5, d2 = 2;
    Tensor x = rand_tensor({n, d0}, rng, -1, 1);
    Tensor w0 = rand_tensor({d0, d1}, rng), b0 = rand_tensor({1, d1}, rng);
    Tensor w1 = rand_tensor({d1, d2}, rng), b1 = rand_tensor({1, d2}, rng);

    auto relu = [](double v) { return v > 0 ? v : 0.0; };
    Tensor expect({n, d2});
    for (int64_t r = 0; r < n; ++r) {
      std::vector<double> h1(static_cast<size_t>(d1));
      for (int64_t j = 0; j < d1; ++j) {
        double acc = b0[j];
        for (int64_t k = 0; k < d0; ++k) acc += x.at(r, k) * w0.at(k, j);
        h1[static_cast<size_t>(j)] = relu(acc);
      }
      for (int64_t j = 0; j < d2; ++j) {
        double acc = b1[j];
        for (int64_t k = 0; k < d1; ++k) acc += h1[static_cast<size_t>(k)] * w1.at(k, j);
        expect.at(r, j) = relu(acc);
      }
    }

    ad::Graph g;
    MlpNodes mlp;
    mlp.weights = {g.constant(w0, "w0"), g.constant(w1, "w1")};
    mlp.biases = {g.constant(b0, "b0"), g.constant(b1, "b1")};
    ad::NodeId emb = embedding::build_mlp_embedder(g, g.constant(x, "x"), mlp);
    g.forward();
    CHECK(g.value(emb).max_abs_diff(expect) <= 1e-12);
  }

  TEST_CASE("regression embedder holds 1*40+40 + 40*40+40 = 1720 scalars") {
    model::ModelSpec spec;
    spec.family = model::TaskFamily::kSine;
    spec.kind = model::ModelKind::kMetaVrf;
    spec.mode = model::InferenceMode::kBilstm;
    spec.ways = 1;
    spec.shots = 5;
    spec.query_per_class = 10;
    spec.bases = 16;
    model::ParamSet params = model::init_params(spec, 1);
    int64_t embed_scalars = 0;
    for (const auto& e : params.entries) {
      if (e.name.rfind("embed/", 0) == 0) embed_scalars += e.value.numel();
    }
    CHECK(embed_scalars == 1720);
  }

  TEST_CASE("cnn spatial trace runs 28 -> 14 -> 7 -> 4 -> 2 and flattens to 256") {
    Rng rng(22);
    ad::Graph g;
    CnnNodes cnn;
    for (int block = 0; block < 4; ++block) {
      const int64_t c_in = block == 0 ? 1 : 64;
      cnn.conv_w.push_back(g.constant(rand_tensor({3, 3, c_in, 64}, rng, -0.05, 0.05),
                                      "cw" + std::to_string(block)));
      cnn.conv_b.push_back(g.constant(Tensor({64}, 0.0), "cb" + std::to_string(block)));
    }
    ad::NodeId images = g.constant(rand_tensor({2, 28, 28, 1}, rng, 0, 1), "img");
    auto res = embedding::build_cnn_embedder(g, images, cnn, /*train_mode=*/true, "t");
    CHECK(g.shape_of(res.features) == Shape{2, 256});
    REQUIRE(res.dropout_mask_shapes.size() == 4);
    CHECK(res.dropout_mask_shapes[0] == Shape{2, 28, 28, 64});
    CHECK(res.dropout_mask_shapes[1] == Shape{2, 14, 14, 64});
    CHECK(res.dropout_mask_shapes[2] == Shape{2, 7, 7, 64});
    CHECK(res.dropout_mask_shapes[3] == Shape{2, 4, 4, 64});
  }

  TEST_CASE("odd spatial sizes pool with ceiling semantics") {
    Rng rng(23);
    ad::Graph g;
    CnnNodes cnn;
    cnn.conv_w.push_back(g.constant(rand_tensor({3, 3, 1, 2}, rng), "cw"));
    cnn.conv_b.push_back(g.constant(Tensor({2}, 0.0), "cb"));
    ad::NodeId images = g.constant(rand_tensor({1, 5, 5, 1}, rng), "img");
    auto res = embedding::build_cnn_embedder(g, images, cnn, false, "t");
    CHECK(g.shape_of(res.features) == Shape{1, 3 * 3 * 2});
  }

  TEST_CASE("zero conv weights embed every image to zero") {
    Rng rng(24);
    ad::Graph g;
    CnnNodes cnn;
    cnn.conv_w.push_back(g.constant(Tensor({3, 3, 1, 4}, 0.0), "cw"));
    cnn.conv_b.push_back(g.constant(Tensor({4}, 0.0), "cb"));
    auto res = embedding::build_cnn_embedder(
        g, g.constant(rand_tensor({2, 6, 6, 1}, rng, 0, 1), "img"), cnn, false, "t");
    g.forward();
    CHECK(g.value(res.features).max_abs() == 0.0);
  }

  TEST_CASE("single center-tap block reduces to relu-plus-maxpool by hand") {
    ad::Graph g;
    Tensor w({3, 3, 1, 1}, 0.0);
    // Center tap at (kh=1, kw=1): conv output equals the input image.
    w.data[(1 * 3 + 1) * 1] = 1.0;
    CnnNodes cnn;
    cnn.conv_w.push_back(g.constant(w, "cw"));
    cnn.conv_b.push_back(g.constant(Tensor({1}, 0.25), "cb"));
    Tensor img({1, 2, 2, 1}, {1.0, -2.0, 3.0, 0.5});
    auto res = embedding::build_cnn_embedder(g, g.constant(img, "img"), cnn, false, "t");
    g.forward();
    // relu(img + 0.25) = {1.25, 0, 3.25, 0.75}; 2x2 max -> 3.25.
    CHECK(g.shape_of(res.features) == Shape{1, 1});
    CHECK(g.value(res.features).item() == doctest::Approx(3.25).epsilon(1e-15));
  }

  TEST_CASE("eval mode creates no mask inputs and repeats bitwise") {
    Rng rng(25);
    ad::Graph g;
    CnnNodes cnn;
    cnn.conv_w.push_back(g.constant(rand_tensor({3, 3, 1, 3}, rng), "cw"));
    cnn.conv_b.push_back(g.constant(rand_tensor({3}, rng), "cb"));
    auto res = embedding::build_cnn_embedder(
        g, g.constant(rand_tensor({2, 4, 4, 1}, rng, 0, 1), "img"), cnn, false, "t");
    CHECK(res.dropout_mask_inputs.empty());
    CHECK(res.dropout_mask_shapes.empty());
    g.forward();
    Tensor first = g.value(res.features);
    g.forward();
    CHECK(first.max_abs_diff(g.value(res.features)) == 0.0);
  }

  TEST_CASE("all-ones dropout masks reproduce the eval-mode embedding") {
    Rng rng(26);
    Tensor w = rand_tensor({3, 3, 1, 3}, rng), b = rand_tensor({3}, rng);
    Tensor img = rand_tensor({2, 5, 5, 1}, rng, 0, 1);

    ad::Graph ge;
    CnnNodes ce;
    ce.conv_w.push_back(ge.constant(w, "cw"));
    ce.conv_b.push_back(ge.constant(b, "cb"));
    auto re = embedding::build_cnn_embedder(ge, ge.constant(img, "img"), ce, false, "t");
    ge.forward();

    ad::Graph gt;
    CnnNodes ct;
    ct.conv_w.push_back(gt.constant(w, "cw"));
    ct.conv_b.push_back(gt.constant(b, "cb"));
    auto rt = embedding::build_cnn_embedder(gt, gt.constant(img, "img"), ct, true, "t");
    REQUIRE(rt.dropout_mask_inputs.size() == 1);
    gt.forward({{rt.dropout_mask_inputs[0], Tensor(rt.dropout_mask_shapes[0], 1.0)}});

    CHECK(ge.value(re.features).max_abs_diff(gt.value(rt.features)) == 0.0);
  }

  TEST_CASE("a zeroed mask entry silences exactly its activation") {
    ad::Graph g;
    Tensor w({3, 3, 1, 1}, 0.0);
    w.data[(1 * 3 + 1) * 1] = 1.0;  // center tap again: conv = identity
    CnnNodes cnn;
    cnn.conv_w.push_back(g.constant(w, "cw"));
    cnn.conv_b.push_back(g.constant(Tensor({1}, 0.0), "cb"));
    Tensor img({1, 2, 2, 1}, {4.0, 3.0, 2.0, 1.0});
    auto res = embedding::build_cnn_embedder(g, g.constant(img, "img"), cnn, true, "t");
    Tensor mask(res.dropout_mask_shapes[0], 1.0);
    mask.data[0] = 0.0;  // kill the 4.0 activation
    g.forward({{res.dropout_mask_inputs[0], mask}});
    CHECK(g.value(res.features).item() == 3.0);  // max of {0, 3, 2, 1}
  }

  TEST_CASE("gradients flow through both embedders") {
    Rng rng(27);
    {
      ad::Graph g;
      MlpNodes mlp;
      mlp.weights = {g.param(rand_tensor({3, 4}, rng), "w0"),
                     g.param(rand_tensor({4, 2}, rng), "w1")};
      mlp.biases = {g.param(rand_tensor({1, 4}, rng, 0.1, 0.4), "b0"),
                    g.param(rand_tensor({1, 2}, rng, 0.1, 0.4), "b1")};
      ad::NodeId emb = embedding::build_mlp_embedder(g, g.constant(rand_tensor({2, 3}, rng), "x"), mlp);
      CHECK(g.grad_check(g.reduce_sum(emb, -1), 5e-6) <= 1e-4);
    }
    {
      ad::Graph g;
      CnnNodes cnn;
      cnn.conv_w.push_back(g.param(rand_tensor({3, 3, 1, 2}, rng), "cw"));
      cnn.conv_b.push_back(g.param(rand_tensor({2}, rng, 0.1, 0.4), "cb"));
      auto res = embedding::build_cnn_embedder(
          g, g.constant(rand_tensor({1, 4, 4, 1}, rng, 0.2, 1.0), "img"), cnn, false, "t");
      CHECK(g.grad_check(g.reduce_sum(res.features, -1), 5e-6) <= 1e-4);
    }
  }
}
