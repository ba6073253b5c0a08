#include "metavrf/gradcheck.hpp"

#include <cmath>
#include <functional>

#include "metavrf/autodiff.hpp"
#include "metavrf/context.hpp"
#include "metavrf/inference.hpp"
#include "metavrf/kernels.hpp"
#include "metavrf/model.hpp"
#include "metavrf/ridge.hpp"
#include "metavrf/rng.hpp"
#include "metavrf/tasks.hpp"

namespace metavrf::gradcheck {
namespace {

using ad::Graph;
using ad::NodeId;

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t;
  t.shape = std::move(shape);
  int64_t n = 1;
  for (int64_t d : t.shape) n *= d;
  t.data.resize(static_cast<size_t>(n));
  for (auto& v : t.data) v = lo + (hi - lo) * rng.uniform();
  return t;
}

/// Weighted-sum readout: distinct weights per element catch transposed or
/// permuted gradients that a plain sum would miss.
NodeId weighted_sum(Graph& g, NodeId out, Rng& rng) {
  if (g.shape_of(out).empty()) return out;
  Tensor w = random_tensor(g.shape_of(out), rng, 0.25, 1.75);
  return g.reduce_sum(g.mul(out, g.constant(w, "readout_w")), -1);
}

struct Case {
  std::string name;
  std::function<double()> run;  // returns max relative gradient error
};

double check_unary(const std::string&, const std::function<NodeId(Graph&, NodeId)>& build,
                   uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Graph g;
  Rng rng(seed);
  NodeId x = g.param(random_tensor({2, 3}, rng, lo, hi), "x");
  NodeId out = build(g, x);
  NodeId loss = weighted_sum(g, out, rng);
  return g.grad_check(loss, 1e-5);
}

double check_binary(const std::string&, Shape sa, Shape sb,
                    const std::function<NodeId(Graph&, NodeId, NodeId)>& build, uint64_t seed,
                    double lo = -1.0, double hi = 1.0) {
  Graph g;
  Rng rng(seed);
  NodeId a = g.param(random_tensor(std::move(sa), rng, lo, hi), "a");
  NodeId b = g.param(random_tensor(std::move(sb), rng, lo, hi), "b");
  NodeId out = build(g, a, b);
  NodeId loss = weighted_sum(g, out, rng);
  return g.grad_check(loss, 1e-5);
}

double check_solve() {
  Graph g;
  Rng rng(11);
  // Diagonally dominant system: stays comfortably invertible under the
  // finite-difference perturbations.
  Tensor a = random_tensor({3, 3}, rng, -0.4, 0.4);
  for (int64_t i = 0; i < 3; ++i) a.at(i, i) += 4.0;
  NodeId an = g.param(a, "a");
  NodeId bn = g.param(random_tensor({3, 2}, rng), "b");
  NodeId out = g.solve(an, bn);
  NodeId loss = weighted_sum(g, out, rng);
  return g.grad_check(loss, 1e-5);
}

double check_maxpool() {
  Graph g;
  Rng rng(12);
  // Well-separated values so the argmax never flips under perturbation.
  Tensor x;
  x.shape = {1, 3, 3, 2};
  x.data.resize(18);
  std::vector<size_t> order(18);
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  for (size_t i = 0; i < order.size(); ++i) x.data[order[i]] = 0.1 * static_cast<double>(i);
  NodeId xn = g.param(x, "x");
  NodeId out = g.maxpool2x2(xn);
  NodeId loss = weighted_sum(g, out, rng);
  return g.grad_check(loss, 1e-5);
}

double check_lstm_cell() {
  Graph g;
  Rng rng(13);
  context::LstmNodes cell;
  cell.hidden = 3;
  cell.w = g.param(random_tensor({5, 12}, rng, -0.5, 0.5), "w");
  cell.b = g.param(random_tensor({1, 12}, rng, -0.2, 0.2), "b");
  context::StateNodes st;
  st.h = g.param(random_tensor({1, 3}, rng), "h0");
  st.c = g.param(random_tensor({1, 3}, rng), "c0");
  NodeId x = g.param(random_tensor({1, 2}, rng), "x");
  context::StateNodes next = context::build_lstm_cell(g, x, st, cell);
  NodeId out = g.concat({next.h, next.c}, 1);
  NodeId loss = weighted_sum(g, out, rng);
  return g.grad_check(loss, 1e-5);
}

double check_attention_kl() {
  Graph g;
  Rng rng(14);
  NodeId q = g.param(random_tensor({1, 3}, rng), "q");
  NodeId keys = g.param(random_tensor({4, 3}, rng), "keys");
  NodeId attended = inference::build_laplace_attention(g, q, keys, keys);
  NodeId mu_q = g.param(random_tensor({1, 3}, rng), "mu_q");
  NodeId lv_q = g.param(random_tensor({1, 3}, rng, -0.5, 0.5), "lv_q");
  NodeId lv_p = g.param(random_tensor({4, 3}, rng, -0.5, 0.5), "lv_p");
  NodeId kl = inference::build_kl_mean(g, mu_q, lv_q, attended, lv_p);
  return g.grad_check(kl, 1e-5);
}

double check_ridge_chain() {
  Graph g;
  Rng rng(15);
  NodeId z_s = g.param(random_tensor({4, 3}, rng), "z_s");
  NodeId z_q = g.param(random_tensor({2, 3}, rng), "z_q");
  NodeId y = g.param(random_tensor({2, 4}, rng), "y");
  NodeId lambda = g.param(Tensor::scalar(0.7), "lambda");
  NodeId alpha = ridge::build_fit(g, kernels::build_gram(g, z_s, z_s), y, lambda);
  NodeId preds = ridge::build_predict(g, alpha, kernels::build_gram(g, z_s, z_q));
  NodeId target = g.constant(random_tensor({2, 2}, rng), "target");
  NodeId loss = ridge::build_mse(g, preds, target);
  return g.grad_check(loss, 1e-5);
}

double check_rbf_bandwidth() {
  Graph g;
  Rng rng(16);
  NodeId x = g.param(random_tensor({4, 3}, rng), "x");
  NodeId xp = g.param(random_tensor({2, 3}, rng), "xp");
  NodeId sigma = kernels::build_mean_pairwise_bandwidth(g, x);
  NodeId k = kernels::build_rbf_exact(g, x, xp, sigma);
  NodeId loss = weighted_sum(g, k, rng);
  return g.grad_check(loss, 1e-5);
}

double check_toy_objective() {
  model::ModelSpec spec;
  spec.family = model::TaskFamily::kBlobs;
  spec.kind = model::ModelKind::kMetaVrf;
  spec.mode = model::InferenceMode::kLstm;
  spec.ways = 2;
  spec.shots = 1;
  spec.query_per_class = 3;
  spec.bases = 4;
  spec.vec_dim = 3;
  model::ParamSet params = model::init_params(spec, 17);
  // Training init keeps biases at zero, which parks many ReLU preactivations
  // within finite-difference range of their kink; refill with moderate
  // nonzero values so every unit sits firmly on one side.
  Rng prng(20);
  for (auto& e : params.entries) {
    if (e.name == "rho") continue;
    for (auto& v : e.value.data) v = -0.15 + 0.3 * prng.uniform();
  }
  model::EpisodeGraph eg = model::build_episode_graph(spec, params, 1, true);

  Rng data_rng(18);
  tasks::DatasetSplit split = tasks::make_blob_dataset(2, 3, 2.0, data_rng, 8);
  Rng task_rng(19);
  tasks::Task task = tasks::sample_classification_episode(split, tasks::Partition::kTrain, 2, 1, 3,
                                                          task_rng);

  Graph::Bindings bind;
  eg.bind_params(params, bind);
  eg.bind_state(context::ContextState::zeros(context::Direction::kVanilla, eg.hyper.lstm_hidden),
                bind);
  eg.bind_task(0, task, task_rng, bind);
  // 5e-6 clears the curvature floor comfortably while staying well under the
  // distance to the nearest piecewise-linear breakpoint at this init.
  return eg.g.grad_check(eg.total_loss, 5e-6, bind);
}

}  // namespace

std::vector<CheckResult> run_all(double tol) {
  std::vector<Case> cases;
  auto unary = [&](std::string name, std::function<NodeId(Graph&, NodeId)> b, uint64_t seed,
                   double lo = -1.0, double hi = 1.0) {
    cases.push_back({name, [=] { return check_unary(name, b, seed, lo, hi); }});
  };
  auto binary = [&](std::string name, Shape sa, Shape sb,
                    std::function<NodeId(Graph&, NodeId, NodeId)> b, uint64_t seed,
                    double lo = -1.0, double hi = 1.0) {
    cases.push_back({name, [=] { return check_binary(name, sa, sb, b, seed, lo, hi); }});
  };

  binary("add", {2, 3}, {2, 3}, [](Graph& g, NodeId a, NodeId b) { return g.add(a, b); }, 1);
  binary("add_broadcast", {2, 3}, {1, 3}, [](Graph& g, NodeId a, NodeId b) { return g.add(a, b); },
         2);
  binary("sub", {2, 3}, {2, 3}, [](Graph& g, NodeId a, NodeId b) { return g.sub(a, b); }, 3);
  binary("mul", {2, 3}, {2, 3}, [](Graph& g, NodeId a, NodeId b) { return g.mul(a, b); }, 4);
  binary("mul_broadcast", {2, 3}, {2, 1}, [](Graph& g, NodeId a, NodeId b) { return g.mul(a, b); },
         5);
  binary("div", {2, 3}, {2, 3}, [](Graph& g, NodeId a, NodeId b) { return g.divide(a, b); }, 6,
         0.5, 1.5);
  unary("neg", [](Graph& g, NodeId x) { return g.neg(x); }, 21);
  unary("abs", [](Graph& g, NodeId x) { return g.abs(x); }, 22, 0.2, 1.2);
  unary("exp", [](Graph& g, NodeId x) { return g.exp(x); }, 23);
  unary("log", [](Graph& g, NodeId x) { return g.log(x); }, 24, 0.5, 2.0);
  unary("sqrt", [](Graph& g, NodeId x) { return g.sqrt(x); }, 25, 0.5, 2.0);
  unary("cos", [](Graph& g, NodeId x) { return g.cos(x); }, 26);
  unary("tanh", [](Graph& g, NodeId x) { return g.tanh(x); }, 27);
  unary("sigmoid", [](Graph& g, NodeId x) { return g.sigmoid(x); }, 28);
  unary("relu", [](Graph& g, NodeId x) { return g.relu(x); }, 29, 0.2, 1.2);
  unary("relu_negative", [](Graph& g, NodeId x) { return g.relu(x); }, 30, -1.2, -0.2);
  unary("elu", [](Graph& g, NodeId x) { return g.elu(x); }, 31);
  unary("clamp_interior", [](Graph& g, NodeId x) { return g.clamp(x, -5.0, 5.0); }, 32);
  unary("add_scalar", [](Graph& g, NodeId x) { return g.add_scalar(x, 2.5); }, 33);
  unary("mul_scalar", [](Graph& g, NodeId x) { return g.mul_scalar(x, -1.7); }, 34);
  binary("matmul", {2, 3}, {3, 4}, [](Graph& g, NodeId a, NodeId b) { return g.matmul(a, b); }, 7);
  unary("transpose", [](Graph& g, NodeId x) { return g.transpose(x); }, 35);
  cases.push_back({"solve", check_solve});
  unary("softmax_rows", [](Graph& g, NodeId x) { return g.softmax(x, 1); }, 36);
  unary("softmax_cols", [](Graph& g, NodeId x) { return g.softmax(x, 0); }, 37);
  unary("reduce_sum_all", [](Graph& g, NodeId x) { return g.reduce_sum(x, -1); }, 38);
  unary("reduce_sum_rows", [](Graph& g, NodeId x) { return g.reduce_sum(x, 0); }, 39);
  unary("reduce_sum_cols", [](Graph& g, NodeId x) { return g.reduce_sum(x, 1); }, 40);
  unary("reduce_mean_all", [](Graph& g, NodeId x) { return g.reduce_mean(x, -1); }, 41);
  unary("reduce_mean_rows", [](Graph& g, NodeId x) { return g.reduce_mean(x, 0); }, 42);
  unary("reduce_mean_cols", [](Graph& g, NodeId x) { return g.reduce_mean(x, 1); }, 43);
  binary("concat_rows", {2, 3}, {1, 3},
         [](Graph& g, NodeId a, NodeId b) { return g.concat({a, b}, 0); }, 8);
  binary("concat_cols", {2, 3}, {2, 2},
         [](Graph& g, NodeId a, NodeId b) { return g.concat({a, b}, 1); }, 9);
  unary("slice", [](Graph& g, NodeId x) { return g.slice(x, {0, 1}, {2, 3}); }, 44);
  unary("reshape", [](Graph& g, NodeId x) { return g.reshape(x, {3, 2}); }, 45);
  binary("conv2d_same", {1, 4, 4, 2}, {3, 3, 2, 3},
         [](Graph& g, NodeId a, NodeId b) { return g.conv2d_same(a, b); }, 10, -0.6, 0.6);
  cases.push_back({"maxpool2x2", check_maxpool});
  cases.push_back({"lstm_cell", check_lstm_cell});
  cases.push_back({"attention_kl", check_attention_kl});
  cases.push_back({"ridge_chain", check_ridge_chain});
  cases.push_back({"rbf_bandwidth", check_rbf_bandwidth});
  cases.push_back({"toy_objective", check_toy_objective});

  std::vector<CheckResult> results;
  results.reserve(cases.size());
  for (auto& c : cases) {
    CheckResult r;
    r.name = c.name;
    r.max_rel_err = c.run();
    r.passed = std::isfinite(r.max_rel_err) && r.max_rel_err <= tol;
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace metavrf::gradcheck
