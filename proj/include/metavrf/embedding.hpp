#pragma once

#include <vector>

#include "metavrf/autodiff.hpp"
#include "metavrf/tensor.hpp"

namespace metavrf::embedding {

/// Feature-extractor MLP: fc stacks with ReLU after every layer.
/// Weight i: (d_i, d_{i+1}); bias i: (1, d_{i+1}).
struct MlpNodes {
  std::vector<ad::NodeId> weights, biases;
};

/// x: (n, d_in) -> (n, d_out); ReLU applied after every layer.
ad::NodeId build_mlp_embedder(ad::Graph& g, ad::NodeId x, const MlpNodes& nodes);

/// Convolutional feature extractor: per block, 3x3 same-padded conv to 64
/// channels + bias, ReLU, optional dropout mask multiply (train mode), 2x2
/// stride-2 ceiling max-pool. conv_w[i]: (3, 3, c_in, 64); conv_b[i]: (64).
/// dropout_masks (train mode only) multiply the post-ReLU activations and are
/// expected pre-scaled by 1/keep (inverted dropout).
struct CnnNodes {
  std::vector<ad::NodeId> conv_w, conv_b;
};

struct CnnResult {
  ad::NodeId features = ad::kNoNode;             // (n, d_flat)
  std::vector<Shape> dropout_mask_shapes;        // one per block (train mode)
  std::vector<ad::NodeId> dropout_mask_inputs;   // input leaves (train mode)
};

/// images: (n, h, w, c) -> (n, flattened features). In train mode a dropout
/// mask input leaf is created per block; in eval mode no mask nodes exist and
/// the forward is deterministic.
CnnResult build_cnn_embedder(ad::Graph& g, ad::NodeId images, const CnnNodes& nodes,
                             bool train_mode, const std::string& mask_prefix);

}  // namespace metavrf::embedding
