#include "metavrf/model.hpp"

#include <cmath>
#include <stdexcept>

#include "metavrf/embedding.hpp"
#include "metavrf/inference.hpp"
#include "metavrf/kernels.hpp"
#include "metavrf/ridge.hpp"

namespace metavrf::model {

const char* family_name(TaskFamily f) {
  switch (f) {
    case TaskFamily::kSine: return "sine";
    case TaskFamily::kOmniglot: return "omniglot";
    case TaskFamily::kBlobs: return "blobs";
  }
  return "?";
}

const char* mode_name(InferenceMode m) {
  switch (m) {
    case InferenceMode::kNone: return "none";
    case InferenceMode::kLstm: return "lstm";
    case InferenceMode::kBilstm: return "bilstm";
  }
  return "?";
}

const char* kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::kMetaVrf: return "metavrf";
    case ModelKind::kFixedRff: return "fixed-rff";
    case ModelKind::kExactRbf: return "exact-rbf";
  }
  return "?";
}

ModelHyper derive_hyper(const ModelSpec& spec) {
  ModelHyper h;
  if (spec.family == TaskFamily::kOmniglot) {
    h.d_emb = 256;
    h.lstm_hidden = 256;
    h.post_hidden = {256, 256, 256};
    h.prior_hidden = {256, 256};
  } else {
    h.d_emb = 40;
    h.lstm_hidden = 40;
    h.embed_hidden = {40, 40};
    h.post_hidden = {40, 40};
    h.prior_hidden = {40, 40};
  }
  return h;
}

int64_t ParamSet::index_of(const std::string& name) const {
  for (size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].name == name) return static_cast<int64_t>(i);
  }
  return -1;
}

Tensor& ParamSet::at(const std::string& name) {
  const int64_t i = index_of(name);
  if (i < 0) throw std::out_of_range("no parameter named '" + name + "'");
  return entries[static_cast<size_t>(i)].value;
}

const Tensor& ParamSet::at(const std::string& name) const {
  const int64_t i = index_of(name);
  if (i < 0) throw std::out_of_range("no parameter named '" + name + "'");
  return entries[static_cast<size_t>(i)].value;
}

int64_t ParamSet::total_scalars() const {
  int64_t n = 0;
  for (const auto& e : entries) n += e.value.numel();
  return n;
}

uint64_t ParamSet::checksum() const {
  uint64_t h = 1469598103934665603ULL;
  auto mix_bytes = [&h](const void* p, size_t len) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < len; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& e : entries) {
    mix_bytes(e.name.data(), e.name.size());
    mix_bytes(e.value.data.data(), e.value.data.size() * sizeof(double));
  }
  return h;
}

namespace {

Tensor trunc_normal(Rng& rng, Shape shape, double stddev) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.truncated_normal(stddev);
  return t;
}

void add_linear(ParamSet& p, Rng& rng, const std::string& prefix, int64_t in, int64_t out) {
  p.entries.push_back({prefix + "/w", trunc_normal(rng, {in, out}, 0.02), true});
  p.entries.push_back({prefix + "/b", Tensor({1, out}, 0.0), true});
}

}  // namespace

ParamSet init_params(const ModelSpec& spec, uint64_t seed) {
  const ModelHyper h = derive_hyper(spec);
  Rng rng(derive_seed(seed, /*phase=*/0xA11CE, 0, 0));
  ParamSet p;

  if (spec.is_image()) {
    int64_t c_in = 1;
    for (int64_t block = 0; block < h.conv_blocks; ++block) {
      p.entries.push_back({"embed/conv_w" + std::to_string(block),
                           trunc_normal(rng, {3, 3, c_in, h.conv_channels}, 0.02), true});
      p.entries.push_back(
          {"embed/conv_b" + std::to_string(block), Tensor({h.conv_channels}, 0.0), true});
      c_in = h.conv_channels;
    }
  } else {
    int64_t in = spec.vec_dim;
    for (size_t i = 0; i < h.embed_hidden.size(); ++i) {
      add_linear(p, rng, "embed/l" + std::to_string(i), in, h.embed_hidden[i]);
      in = h.embed_hidden[i];
    }
  }

  if (spec.kind == ModelKind::kMetaVrf) {
    if (spec.mode != InferenceMode::kNone) {
      const int64_t hid = h.lstm_hidden;
      p.entries.push_back({"lstm/w", trunc_normal(rng, {h.d_emb + hid, 4 * hid}, 0.02), true});
      p.entries.push_back({"lstm/b", Tensor({1, 4 * hid}, 0.0), true});
    }
    int64_t post_in = h.d_emb;
    if (spec.mode == InferenceMode::kLstm) post_in = h.lstm_hidden;
    if (spec.mode == InferenceMode::kBilstm) post_in = 2 * h.lstm_hidden;
    int64_t in = post_in;
    for (size_t i = 0; i < h.post_hidden.size(); ++i) {
      add_linear(p, rng, "post/l" + std::to_string(i), in, h.post_hidden[i]);
      in = h.post_hidden[i];
    }
    add_linear(p, rng, "post/mu", in, h.d_emb);
    add_linear(p, rng, "post/logvar", in, h.d_emb);

    in = h.d_emb;
    for (size_t i = 0; i < h.prior_hidden.size(); ++i) {
      add_linear(p, rng, "prior/l" + std::to_string(i), in, h.prior_hidden[i]);
      in = h.prior_hidden[i];
    }
    add_linear(p, rng, "prior/mu", in, h.d_emb);
    add_linear(p, rng, "prior/logvar", in, h.d_emb);
  }

  if (spec.kind == ModelKind::kFixedRff) {
    Tensor freqs({spec.bases, h.d_emb});
    for (double& v : freqs.data) v = rng.normal();
    Tensor phases({1, spec.bases});
    for (double& v : phases.data) v = rng.uniform(0.0, 2.0 * M_PI);
    p.entries.push_back({"rff/freqs", std::move(freqs), false});
    p.entries.push_back({"rff/phases", std::move(phases), false});
  }

  p.entries.push_back({"rho", Tensor::scalar(0.0), true});  // lambda = exp(rho) = 1
  return p;
}

// ---------------------------------------------------------------------------
// Graph assembly
// ---------------------------------------------------------------------------

namespace {

struct ParamNodeMap {
  const EpisodeGraph* eg;
  const ParamSet* params;
  ad::NodeId operator()(const std::string& name) const {
    const int64_t i = params->index_of(name);
    if (i < 0) throw std::out_of_range("graph build: missing parameter '" + name + "'");
    return eg->param_nodes[static_cast<size_t>(i)];
  }
};

inference::HeadNodes head_nodes(const ParamNodeMap& pn, const std::string& prefix,
                                size_t hidden_layers) {
  inference::HeadNodes nodes;
  for (size_t i = 0; i < hidden_layers; ++i) {
    nodes.hidden_w.push_back(pn(prefix + "/l" + std::to_string(i) + "/w"));
    nodes.hidden_b.push_back(pn(prefix + "/l" + std::to_string(i) + "/b"));
  }
  nodes.w_mu = pn(prefix + "/mu/w");
  nodes.b_mu = pn(prefix + "/mu/b");
  nodes.w_log_var = pn(prefix + "/logvar/w");
  nodes.b_log_var = pn(prefix + "/logvar/b");
  return nodes;
}

}  // namespace

EpisodeGraph build_episode_graph(const ModelSpec& spec, const ParamSet& params, int64_t batch,
                                 bool train_mode) {
  if (batch < 1) throw std::invalid_argument("episode graph needs batch >= 1");
  EpisodeGraph eg;
  eg.spec = spec;
  eg.hyper = derive_hyper(spec);
  eg.batch = batch;
  eg.train_mode = train_mode;
  ad::Graph& g = eg.g;
  const ModelHyper& h = eg.hyper;

  // Leaves for every canonical parameter: trainable entries become bindable
  // Param leaves; fixed entries are baked in as constants.
  for (const auto& e : params.entries) {
    if (e.trainable) {
      eg.param_nodes.push_back(g.param(e.value, e.name));
      eg.param_bindable.push_back(true);
    } else {
      eg.param_nodes.push_back(g.constant(e.value, e.name));
      eg.param_bindable.push_back(false);
    }
  }
  ParamNodeMap pn{&eg, &params};

  const int64_t n = spec.support_rows();
  const int64_t m = spec.query_rows();
  const int64_t rows = n + m;
  const int64_t label_rows = spec.label_rows();

  // Phase 1: embed each slot's combined support+query batch and pool supports.
  std::vector<ad::NodeId> pooled, z_s_emb, z_q_emb;
  eg.slots.resize(static_cast<size_t>(batch));
  for (int64_t t = 0; t < batch; ++t) {
    TaskSlotNodes& slot = eg.slots[static_cast<size_t>(t)];
    const std::string tag = "task" + std::to_string(t);
    ad::NodeId features;
    if (spec.is_image()) {
      slot.x_all = g.input({rows, 28, 28, 1}, tag + "/x");
      embedding::CnnNodes cnn;
      for (int64_t b = 0; b < h.conv_blocks; ++b) {
        cnn.conv_w.push_back(pn("embed/conv_w" + std::to_string(b)));
        cnn.conv_b.push_back(pn("embed/conv_b" + std::to_string(b)));
      }
      embedding::CnnResult res = embedding::build_cnn_embedder(g, slot.x_all, cnn, train_mode, tag);
      slot.dropout_masks = res.dropout_mask_inputs;
      slot.dropout_mask_shapes = res.dropout_mask_shapes;
      features = res.features;
    } else {
      slot.x_all = g.input({rows, spec.vec_dim}, tag + "/x");
      embedding::MlpNodes mlp;
      for (size_t i = 0; i < h.embed_hidden.size(); ++i) {
        mlp.weights.push_back(pn("embed/l" + std::to_string(i) + "/w"));
        mlp.biases.push_back(pn("embed/l" + std::to_string(i) + "/b"));
      }
      features = embedding::build_mlp_embedder(g, slot.x_all, mlp);
    }
    const int64_t d_emb = g.shape_of(features)[1];
    if (d_emb != h.d_emb) {
      throw ad::GraphError("embedder output dim " + std::to_string(d_emb) + " != expected " +
                           std::to_string(h.d_emb));
    }
    z_s_emb.push_back(g.slice(features, {0, 0}, {n, h.d_emb}));
    z_q_emb.push_back(g.slice(features, {n, 0}, {rows, h.d_emb}));
    pooled.push_back(context::build_pool_support(g, z_s_emb.back()));
  }

  // Phase 2: context inference across the batch sequence.
  std::vector<ad::NodeId> ctx = pooled;  // mode none: posterior sees the pooled embedding
  const bool uses_lstm = spec.kind == ModelKind::kMetaVrf && spec.mode != InferenceMode::kNone;
  if (uses_lstm) {
    context::LstmNodes lstm{pn("lstm/w"), pn("lstm/b"), h.lstm_hidden};
    eg.h0 = g.input({1, h.lstm_hidden}, "context/h0");
    eg.c0 = g.input({1, h.lstm_hidden}, "context/c0");
    const auto direction = spec.mode == InferenceMode::kBilstm ? context::Direction::kBidirectional
                                                               : context::Direction::kVanilla;
    context::SequenceNodes seq =
        context::build_step_sequence(g, pooled, {eg.h0, eg.c0}, lstm, direction);
    ctx = seq.h;
    eg.h_final_fwd = seq.final_fwd.h;
    eg.c_final_fwd = seq.final_fwd.c;
    eg.h_final_bwd = seq.final_bwd.h;
    eg.c_final_bwd = seq.final_bwd.c;
  }

  // Phase 3: per-slot heads — posterior, bases, ridge fit/predict, prior KL.
  ad::NodeId lambda = g.exp(pn("rho"));

  std::vector<ad::NodeId> slot_losses;
  for (int64_t t = 0; t < batch; ++t) {
    TaskSlotNodes& slot = eg.slots[static_cast<size_t>(t)];
    const std::string tag = "task" + std::to_string(t);
    slot.support_y = g.input({label_rows, n}, tag + "/support_y");
    slot.query_y = g.input({label_rows, m}, tag + "/query_y");

    ad::NodeId k_support, k_cross;
    if (spec.kind == ModelKind::kExactRbf) {
      ad::NodeId sigma = kernels::build_mean_pairwise_bandwidth(g, z_s_emb[static_cast<size_t>(t)]);
      k_support = kernels::build_rbf_exact(g, z_s_emb[static_cast<size_t>(t)],
                                           z_s_emb[static_cast<size_t>(t)], sigma);
      k_cross = kernels::build_rbf_exact(g, z_s_emb[static_cast<size_t>(t)],
                                         z_q_emb[static_cast<size_t>(t)], sigma);
    } else if (spec.kind == ModelKind::kFixedRff) {
      ad::NodeId z_s = kernels::build_feature_map(g, z_s_emb[static_cast<size_t>(t)],
                                                  pn("rff/freqs"), pn("rff/phases"),
                                                  kernels::ScaleMode::kModelScale, spec.bases);
      ad::NodeId z_q = kernels::build_feature_map(g, z_q_emb[static_cast<size_t>(t)],
                                                  pn("rff/freqs"), pn("rff/phases"),
                                                  kernels::ScaleMode::kModelScale, spec.bases);
      k_support = kernels::build_gram(g, z_s, z_s);
      k_cross = kernels::build_gram(g, z_s, z_q);
    } else {
      inference::HeadNodes post = head_nodes(pn, "post", h.post_hidden.size());
      auto [mu_q, log_var_q] = inference::build_gaussian_head(g, ctx[static_cast<size_t>(t)], post);
      slot.mu_q = mu_q;
      slot.log_var_q = log_var_q;
      slot.eps = g.input({spec.bases, h.d_emb}, tag + "/eps");
      slot.rff_phase = g.input({1, spec.bases}, tag + "/rff_phase");
      ad::NodeId omega = inference::build_reparameterize(g, mu_q, log_var_q, slot.eps);
      ad::NodeId z_s = kernels::build_feature_map(g, z_s_emb[static_cast<size_t>(t)], omega,
                                                  slot.rff_phase,
                                                  kernels::ScaleMode::kModelScale, spec.bases);
      ad::NodeId z_q = kernels::build_feature_map(g, z_q_emb[static_cast<size_t>(t)], omega,
                                                  slot.rff_phase,
                                                  kernels::ScaleMode::kModelScale, spec.bases);
      k_support = kernels::build_gram(g, z_s, z_s);
      k_cross = kernels::build_gram(g, z_s, z_q);
    }

    ad::NodeId alpha = ridge::build_fit(g, k_support, slot.support_y, lambda);
    slot.preds = ridge::build_predict(g, alpha, k_cross);
    slot.data_term = spec.is_classification()
                         ? ridge::build_softmax_xent(g, slot.preds, slot.query_y)
                         : ridge::build_mse(g, slot.preds, slot.query_y);

    if (spec.kind == ModelKind::kMetaVrf) {
      // Prior attention keys: per-class prototypes (classification) or the
      // support embeddings themselves (regression).
      ad::NodeId keys;
      if (spec.is_classification() && spec.shots > 1) {
        std::vector<ad::NodeId> protos;
        for (int64_t c = 0; c < spec.ways; ++c) {
          ad::NodeId rows_c = g.slice(z_s_emb[static_cast<size_t>(t)], {c * spec.shots, 0},
                                      {(c + 1) * spec.shots, h.d_emb});
          protos.push_back(g.reduce_mean(rows_c, 0));
        }
        keys = g.concat(protos, 0);
      } else {
        keys = z_s_emb[static_cast<size_t>(t)];
      }
      ad::NodeId attended =
          inference::build_laplace_attention(g, z_q_emb[static_cast<size_t>(t)], keys, keys);
      inference::HeadNodes prior = head_nodes(pn, "prior", h.prior_hidden.size());
      auto [mu_p, log_var_p] = inference::build_gaussian_head(g, attended, prior);
      slot.kl_term = inference::build_kl_mean(g, slot.mu_q, slot.log_var_q, mu_p, log_var_p);
      slot.loss = g.add(slot.data_term, slot.kl_term);
    } else {
      slot.loss = slot.data_term;
    }
    slot_losses.push_back(slot.loss);
  }

  ad::NodeId total = slot_losses[0];
  for (size_t t = 1; t < slot_losses.size(); ++t) total = g.add(total, slot_losses[t]);
  eg.total_loss = g.mul_scalar(total, 1.0 / static_cast<double>(batch));
  return eg;
}

void EpisodeGraph::bind_params(const ParamSet& params, ad::Graph::Bindings& out) const {
  if (params.entries.size() != param_nodes.size()) {
    throw std::invalid_argument("parameter store does not match graph layout");
  }
  for (size_t i = 0; i < params.entries.size(); ++i) {
    if (param_bindable[i]) out.emplace_back(param_nodes[i], params.entries[i].value);
  }
}

void EpisodeGraph::bind_state(const context::ContextState& state, ad::Graph::Bindings& out) const {
  if (h0 == ad::kNoNode) return;
  out.emplace_back(h0, state.h_fwd);
  out.emplace_back(c0, state.c_fwd);
}

void EpisodeGraph::bind_task(int64_t slot_idx, const tasks::Task& task, Rng& task_rng,
                             ad::Graph::Bindings& out) const {
  const TaskSlotNodes& slot = slots.at(static_cast<size_t>(slot_idx));
  const int64_t n = spec.support_rows();
  const int64_t m = spec.query_rows();
  if (task.support_x.shape[0] != n || task.query_x.shape[0] != m) {
    throw std::invalid_argument("task of " + std::to_string(task.support_x.shape[0]) + "+" +
                                std::to_string(task.query_x.shape[0]) +
                                " rows does not fit a graph built for " + std::to_string(n) + "+" +
                                std::to_string(m));
  }
  Tensor x_all(g.shape_of(slot.x_all));
  std::copy(task.support_x.data.begin(), task.support_x.data.end(), x_all.data.begin());
  std::copy(task.query_x.data.begin(), task.query_x.data.end(),
            x_all.data.begin() + task.support_x.numel());
  out.emplace_back(slot.x_all, std::move(x_all));

  if (spec.is_classification()) {
    out.emplace_back(slot.support_y, one_hot(task.support_labels, spec.ways));
    out.emplace_back(slot.query_y, one_hot(task.query_labels, spec.ways));
  } else {
    out.emplace_back(slot.support_y, task.support_y);
    out.emplace_back(slot.query_y, task.query_y);
  }

  // Stochastic slot inputs, drawn in a fixed order for reproducibility:
  // basis eps, then phases, then dropout masks.
  if (slot.eps != ad::kNoNode) {
    Tensor eps(g.shape_of(slot.eps));
    task_rng.fill_normal(eps);
    out.emplace_back(slot.eps, std::move(eps));
    Tensor phases(g.shape_of(slot.rff_phase));
    task_rng.fill_uniform(phases, 0.0, 2.0 * M_PI);
    out.emplace_back(slot.rff_phase, std::move(phases));
  }
  const double keep = hyper.dropout_keep;
  for (size_t i = 0; i < slot.dropout_masks.size(); ++i) {
    Tensor mask(slot.dropout_mask_shapes[i]);
    for (double& v : mask.data) v = task_rng.uniform() < keep ? 1.0 / keep : 0.0;
    out.emplace_back(slot.dropout_masks[i], std::move(mask));
  }
}

context::ContextState EpisodeGraph::read_final_state() const {
  context::ContextState state;
  if (h_final_fwd == ad::kNoNode) return state;
  state.direction = spec.mode == InferenceMode::kBilstm ? context::Direction::kBidirectional
                                                        : context::Direction::kVanilla;
  state.h_fwd = g.value(h_final_fwd);
  state.c_fwd = g.value(c_final_fwd);
  if (h_final_bwd != ad::kNoNode) {
    state.h_bwd = g.value(h_final_bwd);
    state.c_bwd = g.value(c_final_bwd);
  }
  return state;
}

Tensor one_hot(const std::vector<int64_t>& labels, int64_t ways) {
  Tensor y({ways, static_cast<int64_t>(labels.size())}, 0.0);
  for (size_t j = 0; j < labels.size(); ++j) {
    const int64_t c = labels[j];
    if (c < 0 || c >= ways) throw std::invalid_argument("label " + std::to_string(c) + " out of range");
    y.at(c, static_cast<int64_t>(j)) = 1.0;
  }
  return y;
}

double accuracy_from_logits(const Tensor& logits, const std::vector<int64_t>& labels) {
  const int64_t c_count = logits.shape[0], m = logits.shape[1];
  if (static_cast<int64_t>(labels.size()) != m) throw std::invalid_argument("label count mismatch");
  int64_t correct = 0;
  for (int64_t j = 0; j < m; ++j) {
    int64_t best = 0;
    for (int64_t r = 1; r < c_count; ++r) {
      if (logits.at(r, j) > logits.at(best, j)) best = r;
    }
    if (best == labels[static_cast<size_t>(j)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(m);
}

}  // namespace metavrf::model
