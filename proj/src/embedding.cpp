#include "metavrf/embedding.hpp"

namespace metavrf::embedding {

ad::NodeId build_mlp_embedder(ad::Graph& g, ad::NodeId x, const MlpNodes& nodes) {
  ad::NodeId h = x;
  for (size_t i = 0; i < nodes.weights.size(); ++i) {
    h = g.relu(g.add(g.matmul(h, nodes.weights[i]), nodes.biases[i]));
  }
  return h;
}

CnnResult build_cnn_embedder(ad::Graph& g, ad::NodeId images, const CnnNodes& nodes,
                             bool train_mode, const std::string& mask_prefix) {
  CnnResult result;
  ad::NodeId h = images;
  for (size_t block = 0; block < nodes.conv_w.size(); ++block) {
    h = g.relu(g.add(g.conv2d_same(h, nodes.conv_w[block]), nodes.conv_b[block]));
    if (train_mode) {
      const Shape& s = g.shape_of(h);
      ad::NodeId mask =
          g.input(s, mask_prefix + "/dropout_mask" + std::to_string(block));
      result.dropout_mask_shapes.push_back(s);
      result.dropout_mask_inputs.push_back(mask);
      h = g.mul(h, mask);
    }
    h = g.maxpool2x2(h);
  }
  const Shape& s = g.shape_of(h);
  result.features = g.reshape(h, {s[0], s[1] * s[2] * s[3]});
  return result;
}

}  // namespace metavrf::embedding
