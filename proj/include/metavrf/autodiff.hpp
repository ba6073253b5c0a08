#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "metavrf/tensor.hpp"

namespace metavrf::ad {

using NodeId = int32_t;
constexpr NodeId kNoNode = -1;

/// Structured failure raised by graph construction or evaluation; the message
/// names the offending node and the expected/actual shapes.
struct GraphError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Op : uint8_t {
  kInput,
  kConstant,
  kParam,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kAbs,
  kExp,
  kLog,
  kSqrt,
  kCos,
  kTanh,
  kSigmoid,
  kRelu,
  kElu,
  kClamp,
  kMatMul,
  kTranspose,
  kSolve,
  kSoftmax,
  kReduceSum,
  kReduceMean,
  kConcat,
  kSlice,
  kReshape,
  kConv2dSame,
  kMaxPool2x2,
};

struct Node {
  Op op = Op::kInput;
  std::vector<NodeId> inputs;
  Shape shape;
  std::string name;
  bool trainable = false;
  bool has_default = false;
  Tensor default_value;
  // Op-specific attributes.
  int axis = -1;                       // softmax / reductions / concat (-1 = all for reductions)
  double lo = 0.0, hi = 0.0;           // clamp bounds
  std::vector<int64_t> starts, stops;  // slice ranges, one per dimension
  // Cached broadcast strides (per output dimension; 0 marks a broadcast axis).
  std::vector<int64_t> stride_a, stride_b;
};

/// Reverse-mode differentiation over a statically shaped, topologically
/// ordered operation list. Build the graph once, then run forward/backward
/// repeatedly with fresh leaf bindings. A single Graph instance must not be
/// evaluated from multiple threads concurrently.
class Graph {
 public:
  using Bindings = std::vector<std::pair<NodeId, Tensor>>;

  // ----- leaves -----
  NodeId input(Shape shape, std::string name);
  NodeId input_with_default(Tensor default_value, std::string name);
  NodeId constant(Tensor value, std::string name = "");
  NodeId constant(double value, std::string name = "");
  NodeId param(Tensor init, std::string name);

  // ----- elementwise -----
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId divide(NodeId a, NodeId b);
  NodeId neg(NodeId a);
  NodeId abs(NodeId a);
  NodeId exp(NodeId a);
  NodeId log(NodeId a);
  NodeId sqrt(NodeId a);
  NodeId cos(NodeId a);
  NodeId tanh(NodeId a);
  NodeId sigmoid(NodeId a);
  NodeId relu(NodeId a);
  NodeId elu(NodeId a);
  NodeId clamp(NodeId a, double lo, double hi);
  NodeId add_scalar(NodeId a, double v);
  NodeId mul_scalar(NodeId a, double v);

  // ----- linear algebra (rank-2) -----
  NodeId matmul(NodeId a, NodeId b);
  NodeId transpose(NodeId a);
  /// X = A^{-1} B via LU factorization; differentiated with the adjoint rule
  /// (never materializes A^{-1}).
  NodeId solve(NodeId a, NodeId b);

  // ----- shape / reductions -----
  NodeId softmax(NodeId a, int axis);
  NodeId reduce_sum(NodeId a, int axis = -1);   // axis -1 reduces all entries to a scalar
  NodeId reduce_mean(NodeId a, int axis = -1);  // axis reductions keep the reduced dim as 1
  NodeId concat(const std::vector<NodeId>& parts, int axis);
  NodeId slice(NodeId a, std::vector<int64_t> starts, std::vector<int64_t> stops);
  NodeId reshape(NodeId a, Shape shape);

  // ----- network blocks (NHWC) -----
  /// 2-D convolution, stride 1, zero padding that preserves spatial size.
  /// x: (n, h, w, c_in), w: (kh, kw, c_in, c_out) with odd kh, kw.
  NodeId conv2d_same(NodeId x, NodeId w);
  /// 2x2 max pooling, stride 2, ceiling padding: (n,h,w,c) -> (n,ceil(h/2),ceil(w/2),c).
  NodeId maxpool2x2(NodeId x);

  // ----- evaluation -----
  void forward(const Bindings& bindings = {});
  void backward(NodeId loss);
  /// Worst guarded relative error between analytic gradients and central
  /// finite differences over every trainable leaf.
  double grad_check(NodeId loss, double eps, const Bindings& bindings = {});

  const Tensor& value(NodeId id) const;
  const Tensor& grad(NodeId id) const;
  const Shape& shape_of(NodeId id) const { return node(id).shape; }
  const Node& node(NodeId id) const;
  std::vector<NodeId> parameters() const;
  /// Read or overwrite the stored default of a leaf (shape must match).
  const Tensor& leaf_value(NodeId id) const;
  void set_leaf_value(NodeId id, Tensor v);
  int64_t num_nodes() const { return static_cast<int64_t>(nodes_.size()); }

 private:
  NodeId push(Node n);
  Node& mutable_node(NodeId id) { return nodes_[static_cast<size_t>(id)]; }
  NodeId binary(Op op, NodeId a, NodeId b);
  NodeId unary(Op op, NodeId a);
  void check_exists(NodeId id, const char* where) const;
  [[noreturn]] void fail(NodeId id, const std::string& msg) const;

  void eval_node(NodeId id);
  void backprop_node(NodeId id);

  std::vector<Node> nodes_;
  std::vector<Tensor> values_;
  std::vector<Tensor> grads_;
  std::vector<uint8_t> has_value_;
  std::unordered_map<NodeId, std::vector<int64_t>> pool_argmax_;
  bool forward_done_ = false;
  bool backward_done_ = false;
};

}  // namespace metavrf::ad
