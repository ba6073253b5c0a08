#pragma once

#include <utility>
#include <vector>

#include "metavrf/autodiff.hpp"
#include "metavrf/tensor.hpp"

namespace metavrf::context {

enum class Direction { kVanilla, kBidirectional };

/// Carried LSTM state. For the bidirectional variant the emitted context
/// vector is [h_fwd, h_bwd]; only the forward half seeds later sequences (the
/// backward sweep is scoped to each batch and restarts from zeros).
struct ContextState {
  Direction direction = Direction::kVanilla;
  Tensor h_fwd, c_fwd;  // (1, H)
  Tensor h_bwd, c_bwd;  // (1, H); zero-size for vanilla

  static ContextState zeros(Direction dir, int64_t hidden);
};

/// Combined-gate LSTM cell parameters: one (I+H, 4H) weight matrix and a
/// (1, 4H) bias, gate order [input, forget, output, candidate].
struct LstmNodes {
  ad::NodeId w = ad::kNoNode;  // (input_dim + hidden, 4 * hidden)
  ad::NodeId b = ad::kNoNode;  // (1, 4 * hidden)
  int64_t hidden = 0;
};

struct StateNodes {
  ad::NodeId h = ad::kNoNode;  // (1, H)
  ad::NodeId c = ad::kNoNode;  // (1, H)
};

/// Mean over support-embedding rows: (n, d_emb) -> (1, d_emb).
ad::NodeId build_pool_support(ad::Graph& g, ad::NodeId support_embeddings);

/// One LSTM step: i,f,o = sigmoid gates, g~ = tanh candidate,
/// c' = f (*) c + i (*) g~, h' = o (*) tanh(c').
StateNodes build_lstm_cell(ad::Graph& g, ad::NodeId x, StateNodes state, const LstmNodes& params);

struct SequenceNodes {
  std::vector<ad::NodeId> h;  // per-step context vector (hidden or 2x hidden wide)
  StateNodes final_fwd;       // forward-direction carry state
  StateNodes final_bwd;       // backward-direction state at the sequence head (bidirectional only)
};

/// Vanilla: left-to-right recurrence from `initial`, emitting h_t per step.
/// Bidirectional: an additional independent right-to-left pass from
/// `initial_bwd`, emitting [h_fwd_t, h_bwd_t].
SequenceNodes build_step_sequence(ad::Graph& g, const std::vector<ad::NodeId>& pooled,
                                  StateNodes initial, const LstmNodes& params, Direction direction,
                                  StateNodes initial_bwd = {});

}  // namespace metavrf::context
