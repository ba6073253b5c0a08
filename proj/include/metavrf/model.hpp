#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metavrf/autodiff.hpp"
#include "metavrf/context.hpp"
#include "metavrf/rng.hpp"
#include "metavrf/tasks.hpp"
#include "metavrf/tensor.hpp"

namespace metavrf::model {

enum class TaskFamily { kSine, kOmniglot, kBlobs };
enum class InferenceMode { kNone, kLstm, kBilstm };
/// kMetaVrf: adaptive bases from the variational posterior. kFixedRff: bases
/// drawn once at init and never adapted (embeddings and lambda still train).
/// kExactRbf: closed-form Gaussian kernel with mean-pairwise bandwidth.
enum class ModelKind { kMetaVrf, kFixedRff, kExactRbf };

const char* family_name(TaskFamily f);
const char* mode_name(InferenceMode m);
const char* kind_name(ModelKind k);

/// Everything the graph builder needs to shape one episode.
struct ModelSpec {
  TaskFamily family = TaskFamily::kSine;
  ModelKind kind = ModelKind::kMetaVrf;
  InferenceMode mode = InferenceMode::kBilstm;
  int64_t ways = 5;             // C (1 for regression)
  int64_t shots = 1;            // k
  int64_t query_per_class = 15; // m per class (total m for regression)
  int64_t bases = 780;          // D
  int64_t vec_dim = 1;          // input dim for vector families

  int64_t support_rows() const { return ways * shots; }
  int64_t query_rows() const { return ways * query_per_class; }
  int64_t label_rows() const { return family == TaskFamily::kSine ? 1 : ways; }
  bool is_classification() const { return family != TaskFamily::kSine; }
  bool is_image() const { return family == TaskFamily::kOmniglot; }
};

/// Architecture sizes derived from the task family.
struct ModelHyper {
  int64_t d_emb = 40;
  int64_t lstm_hidden = 40;
  std::vector<int64_t> embed_hidden;  // MLP families only
  std::vector<int64_t> post_hidden, prior_hidden;
  int64_t conv_blocks = 4;            // image family
  int64_t conv_channels = 64;
  double dropout_keep = 0.9;
};

ModelHyper derive_hyper(const ModelSpec& spec);

/// Canonical named parameter storage (the graph binds these every pass).
struct ParamSet {
  struct Entry {
    std::string name;
    Tensor value;
    bool trainable = true;
  };
  std::vector<Entry> entries;

  int64_t index_of(const std::string& name) const;
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  int64_t total_scalars() const;
  /// Bit-level FNV-1a over every entry (names + raw doubles); used by the
  /// "meta-test mutates nothing" audit.
  uint64_t checksum() const;
};

/// Truncated-normal (std 0.02, cut at 2 std) weights, zero biases, rho = 0
/// (lambda = 1). Fixed-RFF models additionally hold non-trainable bases
/// (frequencies ~ N(0, I), phases ~ U[0, 2pi]) drawn once here.
ParamSet init_params(const ModelSpec& spec, uint64_t seed);

/// Per-task-slot node handles inside an episode graph.
struct TaskSlotNodes {
  ad::NodeId x_all = ad::kNoNode;      // support rows then query rows
  ad::NodeId support_y = ad::kNoNode;  // (label_rows, n)
  ad::NodeId query_y = ad::kNoNode;    // (label_rows, m)
  ad::NodeId eps = ad::kNoNode;        // (D, d_emb) standard-normal draws
  ad::NodeId rff_phase = ad::kNoNode;  // (1, D) uniform [0, 2pi)
  std::vector<ad::NodeId> dropout_masks;
  std::vector<Shape> dropout_mask_shapes;
  ad::NodeId loss = ad::kNoNode, data_term = ad::kNoNode, kl_term = ad::kNoNode;
  ad::NodeId preds = ad::kNoNode;      // (label_rows, m)
  ad::NodeId mu_q = ad::kNoNode, log_var_q = ad::kNoNode;
};

/// A built episode graph: `batch` task slots chained through the context LSTM,
/// ending in the batch-mean loss and the carry state.
struct EpisodeGraph {
  ad::Graph g;
  ModelSpec spec;
  ModelHyper hyper;
  int64_t batch = 1;
  bool train_mode = true;
  std::vector<ad::NodeId> param_nodes;  // aligned with ParamSet entries; constants when fixed
  std::vector<bool> param_bindable;     // true for trainable (Param) leaves
  ad::NodeId h0 = ad::kNoNode, c0 = ad::kNoNode;  // forward-direction initial state
  std::vector<TaskSlotNodes> slots;
  ad::NodeId total_loss = ad::kNoNode;
  ad::NodeId h_final_fwd = ad::kNoNode, c_final_fwd = ad::kNoNode;
  ad::NodeId h_final_bwd = ad::kNoNode, c_final_bwd = ad::kNoNode;

  /// Bindings for all trainable parameters from the canonical store.
  void bind_params(const ParamSet& params, ad::Graph::Bindings& out) const;
  /// Bindings for the initial context state (LSTM modes only).
  void bind_state(const context::ContextState& state, ad::Graph::Bindings& out) const;
  /// Bindings for one task slot: inputs, targets, and the slot's stochastic
  /// draws (eps, phases, dropout masks) taken from task_rng in a fixed order.
  void bind_task(int64_t slot, const tasks::Task& task, Rng& task_rng,
                 ad::Graph::Bindings& out) const;
  /// Reads the carry state out of a completed forward pass.
  context::ContextState read_final_state() const;
};

EpisodeGraph build_episode_graph(const ModelSpec& spec, const ParamSet& params, int64_t batch,
                                 bool train_mode);

/// One-hot (C, n) matrix from class labels.
Tensor one_hot(const std::vector<int64_t>& labels, int64_t ways);

/// Fraction of query columns whose argmax logit matches the label.
double accuracy_from_logits(const Tensor& logits, const std::vector<int64_t>& labels);

}  // namespace metavrf::model
