#include "metavrf/context.hpp"

#include <stdexcept>

namespace metavrf::context {

ContextState ContextState::zeros(Direction dir, int64_t hidden) {
  ContextState s;
  s.direction = dir;
  s.h_fwd = Tensor({1, hidden}, 0.0);
  s.c_fwd = Tensor({1, hidden}, 0.0);
  if (dir == Direction::kBidirectional) {
    s.h_bwd = Tensor({1, hidden}, 0.0);
    s.c_bwd = Tensor({1, hidden}, 0.0);
  }
  return s;
}

ad::NodeId build_pool_support(ad::Graph& g, ad::NodeId support_embeddings) {
  const Shape& s = g.shape_of(support_embeddings);
  if (s.size() != 2 || s[0] < 1) {
    throw ad::GraphError("pool_support requires a non-empty (n, d_emb) matrix, got " +
                         shape_to_string(s));
  }
  return g.reduce_mean(support_embeddings, 0);
}

StateNodes build_lstm_cell(ad::Graph& g, ad::NodeId x, StateNodes state, const LstmNodes& params) {
  const int64_t hidden = params.hidden;
  const Shape& sw = g.shape_of(params.w);
  const Shape& sx = g.shape_of(x);
  if (sw[1] != 4 * hidden || sx[1] + hidden != sw[0]) {
    throw ad::GraphError("lstm_cell dimension mismatch: x " + shape_to_string(sx) + ", W " +
                         shape_to_string(sw) + ", hidden " + std::to_string(hidden));
  }
  ad::NodeId z = g.concat({x, state.h}, 1);                       // (1, I+H)
  ad::NodeId gates = g.add(g.matmul(z, params.w), params.b);      // (1, 4H)
  ad::NodeId gi = g.sigmoid(g.slice(gates, {0, 0}, {1, hidden}));
  ad::NodeId gf = g.sigmoid(g.slice(gates, {0, hidden}, {1, 2 * hidden}));
  ad::NodeId go = g.sigmoid(g.slice(gates, {0, 2 * hidden}, {1, 3 * hidden}));
  ad::NodeId gc = g.tanh(g.slice(gates, {0, 3 * hidden}, {1, 4 * hidden}));
  StateNodes next;
  next.c = g.add(g.mul(gf, state.c), g.mul(gi, gc));
  next.h = g.mul(go, g.tanh(next.c));
  return next;
}

SequenceNodes build_step_sequence(ad::Graph& g, const std::vector<ad::NodeId>& pooled,
                                  StateNodes initial, const LstmNodes& params, Direction direction,
                                  StateNodes initial_bwd) {
  if (pooled.empty()) throw ad::GraphError("step_sequence requires a non-empty sequence");
  SequenceNodes out;
  std::vector<StateNodes> fwd;
  fwd.reserve(pooled.size());
  StateNodes state = initial;
  for (ad::NodeId x : pooled) {
    state = build_lstm_cell(g, x, state, params);
    fwd.push_back(state);
  }
  out.final_fwd = state;
  if (direction == Direction::kVanilla) {
    for (const StateNodes& s : fwd) out.h.push_back(s.h);
    return out;
  }
  if (initial_bwd.h == ad::kNoNode) {
    initial_bwd.h = g.constant(Tensor({1, params.hidden}, 0.0));
    initial_bwd.c = g.constant(Tensor({1, params.hidden}, 0.0));
  }
  std::vector<ad::NodeId> bwd_h(pooled.size());
  StateNodes bstate = initial_bwd;
  for (size_t i = pooled.size(); i-- > 0;) {
    bstate = build_lstm_cell(g, pooled[i], bstate, params);
    bwd_h[i] = bstate.h;
  }
  out.final_bwd = bstate;
  for (size_t i = 0; i < pooled.size(); ++i) {
    out.h.push_back(g.concat({fwd[i].h, bwd_h[i]}, 1));
  }
  return out;
}

}  // namespace metavrf::context
