#include "metavrf/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace metavrf::ad {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using CEMap = Eigen::Map<const EMat>;

CEMap as_matrix(const Tensor& t) { return CEMap(t.data.data(), t.shape[0], t.shape[1]); }
EMap as_matrix(Tensor& t) { return EMap(t.data.data(), t.shape[0], t.shape[1]); }

/// numpy-style broadcast result shape; empty optional on incompatibility.
bool broadcast_shape(const Shape& a, const Shape& b, Shape& out) {
  const size_t r = std::max(a.size(), b.size());
  out.assign(r, 1);
  for (size_t i = 0; i < r; ++i) {
    const int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da == db || da == 1 || db == 1) {
      out[i] = std::max(da, db);
    } else {
      return false;
    }
  }
  return true;
}

/// Row-major strides of `in` aligned to the (right-aligned) broadcast output
/// shape; 0 where the input dimension is broadcast.
std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<int64_t> strides(out.size(), 0);
  int64_t s = 1;
  for (size_t k = 0; k < in.size(); ++k) {
    const size_t di = in.size() - 1 - k;        // input dim, right to left
    const size_t do_ = out.size() - 1 - k;      // aligned output dim
    strides[do_] = (in[di] == 1 && out[do_] != 1) ? 0 : s;
    s *= in[di];
  }
  return strides;
}

/// Iterate every output element of a broadcast binary op, invoking
/// f(out_index, a_index, b_index).
template <typename F>
void for_each_broadcast(const Shape& out_shape, const std::vector<int64_t>& sa,
                        const std::vector<int64_t>& sb, F&& f) {
  const int64_t n = shape_numel(out_shape);
  const int r = static_cast<int>(out_shape.size());
  if (r == 0) {
    f(int64_t{0}, int64_t{0}, int64_t{0});
    return;
  }
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  int64_t ao = 0, bo = 0;
  for (int64_t i = 0; i < n; ++i) {
    f(i, ao, bo);
    for (int d = r - 1; d >= 0; --d) {
      idx[static_cast<size_t>(d)]++;
      ao += sa[static_cast<size_t>(d)];
      bo += sb[static_cast<size_t>(d)];
      if (idx[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
      ao -= sa[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
      bo -= sb[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
      idx[static_cast<size_t>(d)] = 0;
    }
  }
}

const char* op_name(Op op) {
  switch (op) {
    case Op::kInput: return "input";
    case Op::kConstant: return "constant";
    case Op::kParam: return "param";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kNeg: return "neg";
    case Op::kAbs: return "abs";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSqrt: return "sqrt";
    case Op::kCos: return "cos";
    case Op::kTanh: return "tanh";
    case Op::kSigmoid: return "sigmoid";
    case Op::kRelu: return "relu";
    case Op::kElu: return "elu";
    case Op::kClamp: return "clamp";
    case Op::kMatMul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kSolve: return "solve";
    case Op::kSoftmax: return "softmax";
    case Op::kReduceSum: return "reduce_sum";
    case Op::kReduceMean: return "reduce_mean";
    case Op::kConcat: return "concat";
    case Op::kSlice: return "slice";
    case Op::kReshape: return "reshape";
    case Op::kConv2dSame: return "conv2d_same";
    case Op::kMaxPool2x2: return "maxpool2x2";
  }
  return "?";
}

}  // namespace

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

NodeId Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  values_.emplace_back();
  grads_.emplace_back();
  has_value_.push_back(0);
  return static_cast<NodeId>(nodes_.size() - 1);
}

const Node& Graph::node(NodeId id) const {
  check_exists(id, "node");
  return nodes_[static_cast<size_t>(id)];
}

void Graph::check_exists(NodeId id, const char* where) const {
  if (id < 0 || id >= static_cast<NodeId>(nodes_.size())) {
    throw GraphError(std::string(where) + ": node id " + std::to_string(id) + " out of range");
  }
}

void Graph::fail(NodeId id, const std::string& msg) const {
  std::string label = "node#" + std::to_string(id);
  if (id >= 0 && id < static_cast<NodeId>(nodes_.size())) {
    const Node& n = nodes_[static_cast<size_t>(id)];
    label += std::string(" (") + op_name(n.op) + (n.name.empty() ? "" : ", '" + n.name + "'") + ")";
  }
  throw GraphError(label + ": " + msg);
}

NodeId Graph::input(Shape shape, std::string name) {
  Node n;
  n.op = Op::kInput;
  n.shape = std::move(shape);
  n.name = std::move(name);
  return push(std::move(n));
}

NodeId Graph::input_with_default(Tensor default_value, std::string name) {
  Node n;
  n.op = Op::kInput;
  n.shape = default_value.shape;
  n.name = std::move(name);
  n.has_default = true;
  n.default_value = std::move(default_value);
  return push(std::move(n));
}

NodeId Graph::constant(Tensor value, std::string name) {
  Node n;
  n.op = Op::kConstant;
  n.shape = value.shape;
  n.name = std::move(name);
  n.has_default = true;
  n.default_value = std::move(value);
  return push(std::move(n));
}

NodeId Graph::constant(double value, std::string name) {
  return constant(Tensor::scalar(value), std::move(name));
}

NodeId Graph::param(Tensor init, std::string name) {
  Node n;
  n.op = Op::kParam;
  n.shape = init.shape;
  n.name = std::move(name);
  n.trainable = true;
  n.has_default = true;
  n.default_value = std::move(init);
  return push(std::move(n));
}

NodeId Graph::binary(Op op, NodeId a, NodeId b) {
  check_exists(a, op_name(op));
  check_exists(b, op_name(op));
  Node n;
  n.op = op;
  n.inputs = {a, b};
  if (!broadcast_shape(node(a).shape, node(b).shape, n.shape)) {
    fail(a, std::string(op_name(op)) + ": shapes " + shape_to_string(node(a).shape) + " and " +
                shape_to_string(node(b).shape) + " do not broadcast");
  }
  n.stride_a = broadcast_strides(node(a).shape, n.shape);
  n.stride_b = broadcast_strides(node(b).shape, n.shape);
  return push(std::move(n));
}

NodeId Graph::unary(Op op, NodeId a) {
  check_exists(a, op_name(op));
  Node n;
  n.op = op;
  n.inputs = {a};
  n.shape = node(a).shape;
  return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) { return binary(Op::kAdd, a, b); }
NodeId Graph::sub(NodeId a, NodeId b) { return binary(Op::kSub, a, b); }
NodeId Graph::mul(NodeId a, NodeId b) { return binary(Op::kMul, a, b); }
NodeId Graph::divide(NodeId a, NodeId b) { return binary(Op::kDiv, a, b); }
NodeId Graph::neg(NodeId a) { return unary(Op::kNeg, a); }
NodeId Graph::abs(NodeId a) { return unary(Op::kAbs, a); }
NodeId Graph::exp(NodeId a) { return unary(Op::kExp, a); }
NodeId Graph::log(NodeId a) { return unary(Op::kLog, a); }
NodeId Graph::sqrt(NodeId a) { return unary(Op::kSqrt, a); }
NodeId Graph::cos(NodeId a) { return unary(Op::kCos, a); }
NodeId Graph::tanh(NodeId a) { return unary(Op::kTanh, a); }
NodeId Graph::sigmoid(NodeId a) { return unary(Op::kSigmoid, a); }
NodeId Graph::relu(NodeId a) { return unary(Op::kRelu, a); }
NodeId Graph::elu(NodeId a) { return unary(Op::kElu, a); }

NodeId Graph::clamp(NodeId a, double lo, double hi) {
  if (!(lo < hi)) fail(a, "clamp: lo must be < hi");
  NodeId id = unary(Op::kClamp, a);
  mutable_node(id).lo = lo;
  mutable_node(id).hi = hi;
  return id;
}

NodeId Graph::add_scalar(NodeId a, double v) { return add(a, constant(v)); }
NodeId Graph::mul_scalar(NodeId a, double v) { return mul(a, constant(v)); }

NodeId Graph::matmul(NodeId a, NodeId b) {
  check_exists(a, "matmul");
  check_exists(b, "matmul");
  const Shape& sa = node(a).shape;
  const Shape& sb = node(b).shape;
  if (sa.size() != 2 || sb.size() != 2) {
    fail(a, "matmul requires rank-2 operands, got " + shape_to_string(sa) + " x " + shape_to_string(sb));
  }
  if (sa[1] != sb[0]) {
    fail(a, "matmul inner dimensions disagree: " + shape_to_string(sa) + " x " + shape_to_string(sb));
  }
  Node n;
  n.op = Op::kMatMul;
  n.inputs = {a, b};
  n.shape = {sa[0], sb[1]};
  return push(std::move(n));
}

NodeId Graph::transpose(NodeId a) {
  check_exists(a, "transpose");
  const Shape& s = node(a).shape;
  if (s.size() != 2) fail(a, "transpose requires a rank-2 operand, got " + shape_to_string(s));
  Node n;
  n.op = Op::kTranspose;
  n.inputs = {a};
  n.shape = {s[1], s[0]};
  return push(std::move(n));
}

NodeId Graph::solve(NodeId a, NodeId b) {
  check_exists(a, "solve");
  check_exists(b, "solve");
  const Shape& sa = node(a).shape;
  const Shape& sb = node(b).shape;
  if (sa.size() != 2 || sa[0] != sa[1]) {
    fail(a, "solve requires a square rank-2 left operand, got " + shape_to_string(sa));
  }
  if (sb.size() != 2 || sb[0] != sa[0]) {
    fail(b, "solve right operand must be (" + std::to_string(sa[0]) + ", m), got " + shape_to_string(sb));
  }
  Node n;
  n.op = Op::kSolve;
  n.inputs = {a, b};
  n.shape = sb;
  return push(std::move(n));
}

NodeId Graph::softmax(NodeId a, int axis) {
  check_exists(a, "softmax");
  const Shape& s = node(a).shape;
  if (s.size() != 2 || (axis != 0 && axis != 1)) {
    fail(a, "softmax supports rank-2 operands with axis 0 or 1, got " + shape_to_string(s) +
                " axis " + std::to_string(axis));
  }
  NodeId id = unary(Op::kSoftmax, a);
  mutable_node(id).axis = axis;
  return id;
}

NodeId Graph::reduce_sum(NodeId a, int axis) {
  check_exists(a, "reduce_sum");
  const Shape& s = node(a).shape;
  Node n;
  n.op = Op::kReduceSum;
  n.inputs = {a};
  n.axis = axis;
  if (axis == -1) {
    n.shape = {};
  } else {
    if (s.size() != 2 || (axis != 0 && axis != 1)) {
      fail(a, "axis reduction supports rank-2 operands with axis 0 or 1, got " + shape_to_string(s));
    }
    n.shape = s;
    n.shape[static_cast<size_t>(axis)] = 1;
  }
  return push(std::move(n));
}

NodeId Graph::reduce_mean(NodeId a, int axis) {
  NodeId id = reduce_sum(a, axis);
  mutable_node(id).op = Op::kReduceMean;
  return id;
}

NodeId Graph::concat(const std::vector<NodeId>& parts, int axis) {
  if (parts.empty()) throw GraphError("concat: no inputs");
  for (NodeId p : parts) check_exists(p, "concat");
  const Shape& first = node(parts[0]).shape;
  if (first.size() != 2 || (axis != 0 && axis != 1)) {
    fail(parts[0], "concat supports rank-2 operands with axis 0 or 1");
  }
  Shape out = first;
  for (size_t i = 1; i < parts.size(); ++i) {
    const Shape& s = node(parts[i]).shape;
    if (s.size() != 2 || s[static_cast<size_t>(1 - axis)] != first[static_cast<size_t>(1 - axis)]) {
      fail(parts[i], "concat operand shape " + shape_to_string(s) + " incompatible with " +
                         shape_to_string(first) + " on axis " + std::to_string(axis));
    }
    out[static_cast<size_t>(axis)] += s[static_cast<size_t>(axis)];
  }
  Node n;
  n.op = Op::kConcat;
  n.inputs = parts;
  n.axis = axis;
  n.shape = out;
  return push(std::move(n));
}

NodeId Graph::slice(NodeId a, std::vector<int64_t> starts, std::vector<int64_t> stops) {
  check_exists(a, "slice");
  const Shape& s = node(a).shape;
  if (starts.size() != s.size() || stops.size() != s.size()) {
    fail(a, "slice needs one (start, stop) pair per dimension of " + shape_to_string(s));
  }
  Shape out(s.size());
  for (size_t d = 0; d < s.size(); ++d) {
    if (starts[d] < 0 || stops[d] > s[d] || starts[d] >= stops[d]) {
      fail(a, "slice range [" + std::to_string(starts[d]) + ", " + std::to_string(stops[d]) +
                  ") invalid for dimension " + std::to_string(d) + " of " + shape_to_string(s));
    }
    out[d] = stops[d] - starts[d];
  }
  Node n;
  n.op = Op::kSlice;
  n.inputs = {a};
  n.shape = std::move(out);
  n.starts = std::move(starts);
  n.stops = std::move(stops);
  return push(std::move(n));
}

NodeId Graph::reshape(NodeId a, Shape shape) {
  check_exists(a, "reshape");
  if (shape_numel(shape) != shape_numel(node(a).shape)) {
    fail(a, "reshape from " + shape_to_string(node(a).shape) + " to " + shape_to_string(shape) +
                " changes element count");
  }
  Node n;
  n.op = Op::kReshape;
  n.inputs = {a};
  n.shape = std::move(shape);
  return push(std::move(n));
}

NodeId Graph::conv2d_same(NodeId x, NodeId w) {
  check_exists(x, "conv2d_same");
  check_exists(w, "conv2d_same");
  const Shape& sx = node(x).shape;
  const Shape& sw = node(w).shape;
  if (sx.size() != 4) fail(x, "conv2d_same input must be (n, h, w, c_in), got " + shape_to_string(sx));
  if (sw.size() != 4) fail(w, "conv2d_same weight must be (kh, kw, c_in, c_out), got " + shape_to_string(sw));
  if (sw[0] % 2 != 1 || sw[1] % 2 != 1) fail(w, "conv2d_same requires odd kernel sizes");
  if (sw[2] != sx[3]) {
    fail(w, "conv2d_same channel mismatch: input " + shape_to_string(sx) + ", weight " + shape_to_string(sw));
  }
  Node n;
  n.op = Op::kConv2dSame;
  n.inputs = {x, w};
  n.shape = {sx[0], sx[1], sx[2], sw[3]};
  return push(std::move(n));
}

NodeId Graph::maxpool2x2(NodeId x) {
  check_exists(x, "maxpool2x2");
  const Shape& s = node(x).shape;
  if (s.size() != 4) fail(x, "maxpool2x2 input must be (n, h, w, c), got " + shape_to_string(s));
  Node n;
  n.op = Op::kMaxPool2x2;
  n.inputs = {x};
  n.shape = {s[0], (s[1] + 1) / 2, (s[2] + 1) / 2, s[3]};
  return push(std::move(n));
}

std::vector<NodeId> Graph::parameters() const {
  std::vector<NodeId> out;
  for (NodeId i = 0; i < static_cast<NodeId>(nodes_.size()); ++i) {
    if (nodes_[static_cast<size_t>(i)].trainable) out.push_back(i);
  }
  return out;
}

const Tensor& Graph::leaf_value(NodeId id) const {
  const Node& n = node(id);
  if (!n.has_default) fail(id, "leaf has no stored value");
  return n.default_value;
}

void Graph::set_leaf_value(NodeId id, Tensor v) {
  check_exists(id, "set_leaf_value");
  Node& n = mutable_node(id);
  if (n.op != Op::kInput && n.op != Op::kParam && n.op != Op::kConstant) {
    fail(id, "set_leaf_value target is not a leaf");
  }
  if (v.shape != n.shape) {
    fail(id, "set_leaf_value shape " + shape_to_string(v.shape) + " != declared " + shape_to_string(n.shape));
  }
  n.default_value = std::move(v);
  n.has_default = true;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

void Graph::forward(const Bindings& bindings) {
  std::fill(has_value_.begin(), has_value_.end(), 0);
  // Seed leaves from defaults, then overlay bindings.
  for (size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (n.op == Op::kInput || n.op == Op::kParam || n.op == Op::kConstant) {
      if (n.has_default) {
        values_[i] = n.default_value;
        has_value_[i] = 1;
      }
    }
  }
  for (const auto& [id, t] : bindings) {
    check_exists(id, "forward binding");
    const Node& n = nodes_[static_cast<size_t>(id)];
    if (n.op != Op::kInput && n.op != Op::kParam) {
      fail(id, "binding target is not an input or parameter leaf");
    }
    if (t.shape != n.shape) {
      fail(id, "binding shape " + shape_to_string(t.shape) + " != declared " + shape_to_string(n.shape));
    }
    values_[static_cast<size_t>(id)] = t;
    has_value_[static_cast<size_t>(id)] = 1;
  }
  for (NodeId i = 0; i < static_cast<NodeId>(nodes_.size()); ++i) {
    const Node& n = nodes_[static_cast<size_t>(i)];
    if (n.op == Op::kInput || n.op == Op::kParam || n.op == Op::kConstant) {
      if (!has_value_[static_cast<size_t>(i)]) fail(i, "leaf is unbound and has no default value");
      continue;
    }
    eval_node(i);
    has_value_[static_cast<size_t>(i)] = 1;
  }
  forward_done_ = true;
  backward_done_ = false;
}

const Tensor& Graph::value(NodeId id) const {
  check_exists(id, "value");
  if (!forward_done_ || !has_value_[static_cast<size_t>(id)]) fail(id, "value requested before forward");
  return values_[static_cast<size_t>(id)];
}

const Tensor& Graph::grad(NodeId id) const {
  check_exists(id, "grad");
  if (!backward_done_) fail(id, "gradient requested before backward");
  return grads_[static_cast<size_t>(id)];
}

void Graph::eval_node(NodeId id) {
  const Node& n = nodes_[static_cast<size_t>(id)];
  Tensor& out = values_[static_cast<size_t>(id)];
  out.resize(n.shape);
  auto in = [&](int k) -> const Tensor& { return values_[static_cast<size_t>(n.inputs[static_cast<size_t>(k)])]; };

  switch (n.op) {
    case Op::kInput:
    case Op::kConstant:
    case Op::kParam:
      return;  // handled in forward()

    case Op::kAdd:
    case Op::kSub:
    case Op::kMul:
    case Op::kDiv: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.same_shape(b)) {
        const size_t m = a.data.size();
        switch (n.op) {
          case Op::kAdd: for (size_t i = 0; i < m; ++i) out.data[i] = a.data[i] + b.data[i]; break;
          case Op::kSub: for (size_t i = 0; i < m; ++i) out.data[i] = a.data[i] - b.data[i]; break;
          case Op::kMul: for (size_t i = 0; i < m; ++i) out.data[i] = a.data[i] * b.data[i]; break;
          default:       for (size_t i = 0; i < m; ++i) out.data[i] = a.data[i] / b.data[i]; break;
        }
      } else {
        switch (n.op) {
          case Op::kAdd:
            for_each_broadcast(n.shape, n.stride_a, n.stride_b,
                               [&](int64_t i, int64_t ia, int64_t ib) { out[i] = a[ia] + b[ib]; });
            break;
          case Op::kSub:
            for_each_broadcast(n.shape, n.stride_a, n.stride_b,
                               [&](int64_t i, int64_t ia, int64_t ib) { out[i] = a[ia] - b[ib]; });
            break;
          case Op::kMul:
            for_each_broadcast(n.shape, n.stride_a, n.stride_b,
                               [&](int64_t i, int64_t ia, int64_t ib) { out[i] = a[ia] * b[ib]; });
            break;
          default:
            for_each_broadcast(n.shape, n.stride_a, n.stride_b,
                               [&](int64_t i, int64_t ia, int64_t ib) { out[i] = a[ia] / b[ib]; });
            break;
        }
      }
      return;
    }

    case Op::kNeg: {
      const Tensor& a = in(0);
      for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = -a.data[i];
      return;
    }
    case Op::kAbs: {
      const Tensor& a = in(0);
      for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = std::abs(a.data[i]);
      return;
    }
    case Op::kExp: {
      const Tensor& a = in(0);
      for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = std::exp(a.data[i]);
      return;
    }
    case Op::kLog: {
      const Tensor& a = in(0);
      for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = std::log(a.data[i]);
      return;
    }
    case Op::kSqrt: {
      const Tensor& a = in(0);
      for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = std::sqrt(a.data[i]);
      return;
    }
    case Op::kCos: {
      const Tensor& a = in(0);
      for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = std::cos(a.data[i]);
      return;
    }
    case Op::kTanh: {
      const Tensor& a = in(0);
      for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = std::tanh(a.data[i]);
      return;
    }
    case Op::kSigmoid: {
      const Tensor& a = in(0);
      for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = 1.0 / (1.0 + std::exp(-a.data[i]));
      return;
    }
    case Op::kRelu: {
      const Tensor& a = in(0);
      for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] > 0.0 ? a.data[i] : 0.0;
      return;
    }
    case Op::kElu: {
      const Tensor& a = in(0);
      for (size_t i = 0; i < a.data.size(); ++i) {
        out.data[i] = a.data[i] > 0.0 ? a.data[i] : std::expm1(a.data[i]);
      }
      return;
    }
    case Op::kClamp: {
      const Tensor& a = in(0);
      for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = std::clamp(a.data[i], n.lo, n.hi);
      return;
    }

    case Op::kMatMul: {
      as_matrix(out).noalias() = as_matrix(in(0)) * as_matrix(in(1));
      return;
    }
    case Op::kTranspose: {
      as_matrix(out) = as_matrix(in(0)).transpose();
      return;
    }
    case Op::kSolve: {
      Eigen::FullPivLU<EMat> lu(as_matrix(in(0)));
      if (!lu.isInvertible()) {
        fail(id, "matrix is numerically singular; if this is a ridge system, use a positive regularizer");
      }
      as_matrix(out) = lu.solve(EMat(as_matrix(in(1))));
      return;
    }

    case Op::kSoftmax: {
      const Tensor& a = in(0);
      const int64_t rows = a.shape[0], cols = a.shape[1];
      if (n.axis == 1) {
        for (int64_t r = 0; r < rows; ++r) {
          double mx = -std::numeric_limits<double>::infinity();
          for (int64_t c = 0; c < cols; ++c) mx = std::max(mx, a.at(r, c));
          double s = 0.0;
          for (int64_t c = 0; c < cols; ++c) s += (out.at(r, c) = std::exp(a.at(r, c) - mx));
          for (int64_t c = 0; c < cols; ++c) out.at(r, c) /= s;
        }
      } else {
        for (int64_t c = 0; c < cols; ++c) {
          double mx = -std::numeric_limits<double>::infinity();
          for (int64_t r = 0; r < rows; ++r) mx = std::max(mx, a.at(r, c));
          double s = 0.0;
          for (int64_t r = 0; r < rows; ++r) s += (out.at(r, c) = std::exp(a.at(r, c) - mx));
          for (int64_t r = 0; r < rows; ++r) out.at(r, c) /= s;
        }
      }
      return;
    }

    case Op::kReduceSum:
    case Op::kReduceMean: {
      const Tensor& a = in(0);
      if (n.axis == -1) {
        double s = 0.0;
        for (double v : a.data) s += v;
        if (n.op == Op::kReduceMean) s /= static_cast<double>(a.numel());
        out.data[0] = s;
      } else {
        const int64_t rows = a.shape[0], cols = a.shape[1];
        std::fill(out.data.begin(), out.data.end(), 0.0);
        if (n.axis == 0) {
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < cols; ++c) out.data[static_cast<size_t>(c)] += a.at(r, c);
          if (n.op == Op::kReduceMean)
            for (double& v : out.data) v /= static_cast<double>(rows);
        } else {
          for (int64_t r = 0; r < rows; ++r) {
            double s = 0.0;
            for (int64_t c = 0; c < cols; ++c) s += a.at(r, c);
            out.data[static_cast<size_t>(r)] = n.op == Op::kReduceMean ? s / static_cast<double>(cols) : s;
          }
        }
      }
      return;
    }

    case Op::kConcat: {
      const int64_t rows = n.shape[0], cols = n.shape[1];
      if (n.axis == 0) {
        int64_t r0 = 0;
        for (NodeId pid : n.inputs) {
          const Tensor& p = values_[static_cast<size_t>(pid)];
          std::memcpy(out.data.data() + r0 * cols, p.data.data(), p.data.size() * sizeof(double));
          r0 += p.shape[0];
        }
      } else {
        int64_t c0 = 0;
        for (NodeId pid : n.inputs) {
          const Tensor& p = values_[static_cast<size_t>(pid)];
          const int64_t pc = p.shape[1];
          for (int64_t r = 0; r < rows; ++r) {
            std::memcpy(out.data.data() + r * cols + c0, p.data.data() + r * pc,
                        static_cast<size_t>(pc) * sizeof(double));
          }
          c0 += pc;
        }
      }
      return;
    }

    case Op::kSlice: {
      const Tensor& a = in(0);
      const Shape& sa = a.shape;
      const size_t r = sa.size();
      std::vector<int64_t> in_strides(r, 1);
      for (size_t d = r - 1; d-- > 0;) in_strides[d] = in_strides[d + 1] * sa[d + 1];
      std::vector<int64_t> idx(r, 0);
      const int64_t count = out.numel();
      for (int64_t i = 0; i < count; ++i) {
        int64_t off = 0;
        for (size_t d = 0; d < r; ++d) off += (n.starts[d] + idx[d]) * in_strides[d];
        out[i] = a[off];
        for (size_t d = r; d-- > 0;) {
          if (++idx[d] < n.shape[d]) break;
          idx[d] = 0;
        }
      }
      return;
    }

    case Op::kReshape: {
      out.data = in(0).data;
      out.shape = n.shape;
      return;
    }

    case Op::kConv2dSame: {
      const Tensor& x = in(0);
      const Tensor& w = in(1);
      const int64_t N = x.shape[0], H = x.shape[1], W = x.shape[2], Ci = x.shape[3];
      const int64_t KH = w.shape[0], KW = w.shape[1], Co = w.shape[3];
      const int64_t ph = KH / 2, pw = KW / 2;
      const int64_t cols = KH * KW * Ci;
      CEMap wm(w.data.data(), cols, Co);
      EMat col(H * W, cols);
      for (int64_t img = 0; img < N; ++img) {
        const double* xim = x.data.data() + img * H * W * Ci;
        col.setZero();
        for (int64_t y = 0; y < H; ++y) {
          for (int64_t xx = 0; xx < W; ++xx) {
            double* crow = col.data() + (y * W + xx) * cols;
            for (int64_t ky = 0; ky < KH; ++ky) {
              const int64_t sy = y + ky - ph;
              if (sy < 0 || sy >= H) continue;
              for (int64_t kx = 0; kx < KW; ++kx) {
                const int64_t sx = xx + kx - pw;
                if (sx < 0 || sx >= W) continue;
                std::memcpy(crow + (ky * KW + kx) * Ci, xim + (sy * W + sx) * Ci,
                            static_cast<size_t>(Ci) * sizeof(double));
              }
            }
          }
        }
        EMap om(out.data.data() + img * H * W * Co, H * W, Co);
        om.noalias() = col * wm;
      }
      return;
    }

    case Op::kMaxPool2x2: {
      const Tensor& x = in(0);
      const int64_t N = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3];
      const int64_t HO = n.shape[1], WO = n.shape[2];
      auto& argmax = pool_argmax_[id];
      argmax.assign(static_cast<size_t>(out.numel()), 0);
      int64_t o = 0;
      for (int64_t img = 0; img < N; ++img) {
        for (int64_t y = 0; y < HO; ++y) {
          for (int64_t xx = 0; xx < WO; ++xx) {
            for (int64_t c = 0; c < C; ++c, ++o) {
              double best = -std::numeric_limits<double>::infinity();
              int64_t best_idx = -1;
              for (int64_t dy = 0; dy < 2; ++dy) {
                const int64_t sy = 2 * y + dy;
                if (sy >= H) continue;
                for (int64_t dx = 0; dx < 2; ++dx) {
                  const int64_t sx = 2 * xx + dx;
                  if (sx >= W) continue;
                  const int64_t idx_in = ((img * H + sy) * W + sx) * C + c;
                  if (x[idx_in] > best) {
                    best = x[idx_in];
                    best_idx = idx_in;
                  }
                }
              }
              out[o] = best;
              argmax[static_cast<size_t>(o)] = best_idx;
            }
          }
        }
      }
      return;
    }
  }
  fail(id, "unhandled op in forward");
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

void Graph::backward(NodeId loss) {
  check_exists(loss, "backward");
  if (!forward_done_) fail(loss, "backward called before forward");
  if (values_[static_cast<size_t>(loss)].numel() != 1) {
    fail(loss, "loss node must be scalar, got shape " + shape_to_string(nodes_[static_cast<size_t>(loss)].shape));
  }
  for (size_t i = 0; i < nodes_.size(); ++i) {
    grads_[i].resize(nodes_[i].shape);
    std::fill(grads_[i].data.begin(), grads_[i].data.end(), 0.0);
  }
  grads_[static_cast<size_t>(loss)].data[0] = 1.0;
  for (NodeId i = loss; i >= 0; --i) backprop_node(i);
  backward_done_ = true;
}

void Graph::backprop_node(NodeId id) {
  const Node& n = nodes_[static_cast<size_t>(id)];
  if (n.inputs.empty()) return;
  const Tensor& g = grads_[static_cast<size_t>(id)];
  auto inv = [&](int k) -> const Tensor& { return values_[static_cast<size_t>(n.inputs[static_cast<size_t>(k)])]; };
  auto ing = [&](int k) -> Tensor& { return grads_[static_cast<size_t>(n.inputs[static_cast<size_t>(k)])]; };
  const Tensor& y = values_[static_cast<size_t>(id)];

  switch (n.op) {
    case Op::kAdd: {
      const Tensor& a = inv(0);
      const Tensor& b = inv(1);
      Tensor& ga = ing(0);
      Tensor& gb = ing(1);
      if (a.same_shape(b)) {
        for (size_t i = 0; i < g.data.size(); ++i) {
          ga.data[i] += g.data[i];
          gb.data[i] += g.data[i];
        }
      } else {
        for_each_broadcast(n.shape, n.stride_a, n.stride_b, [&](int64_t i, int64_t ia, int64_t ib) {
          ga[ia] += g[i];
          gb[ib] += g[i];
        });
      }
      return;
    }
    case Op::kSub: {
      const Tensor& a = inv(0);
      const Tensor& b = inv(1);
      Tensor& ga = ing(0);
      Tensor& gb = ing(1);
      if (a.same_shape(b)) {
        for (size_t i = 0; i < g.data.size(); ++i) {
          ga.data[i] += g.data[i];
          gb.data[i] -= g.data[i];
        }
      } else {
        for_each_broadcast(n.shape, n.stride_a, n.stride_b, [&](int64_t i, int64_t ia, int64_t ib) {
          ga[ia] += g[i];
          gb[ib] -= g[i];
        });
      }
      return;
    }
    case Op::kMul: {
      const Tensor& a = inv(0);
      const Tensor& b = inv(1);
      Tensor& ga = ing(0);
      Tensor& gb = ing(1);
      if (a.same_shape(b)) {
        for (size_t i = 0; i < g.data.size(); ++i) {
          ga.data[i] += g.data[i] * b.data[i];
          gb.data[i] += g.data[i] * a.data[i];
        }
      } else {
        for_each_broadcast(n.shape, n.stride_a, n.stride_b, [&](int64_t i, int64_t ia, int64_t ib) {
          ga[ia] += g[i] * b[ib];
          gb[ib] += g[i] * a[ia];
        });
      }
      return;
    }
    case Op::kDiv: {
      const Tensor& a = inv(0);
      const Tensor& b = inv(1);
      Tensor& ga = ing(0);
      Tensor& gb = ing(1);
      if (a.same_shape(b)) {
        for (size_t i = 0; i < g.data.size(); ++i) {
          ga.data[i] += g.data[i] / b.data[i];
          gb.data[i] -= g.data[i] * a.data[i] / (b.data[i] * b.data[i]);
        }
      } else {
        for_each_broadcast(n.shape, n.stride_a, n.stride_b, [&](int64_t i, int64_t ia, int64_t ib) {
          ga[ia] += g[i] / b[ib];
          gb[ib] -= g[i] * a[ia] / (b[ib] * b[ib]);
        });
      }
      return;
    }

    case Op::kNeg: {
      Tensor& ga = ing(0);
      for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] -= g.data[i];
      return;
    }
    case Op::kAbs: {
      const Tensor& a = inv(0);
      Tensor& ga = ing(0);
      for (size_t i = 0; i < g.data.size(); ++i) {
        ga.data[i] += g.data[i] * (a.data[i] > 0.0 ? 1.0 : (a.data[i] < 0.0 ? -1.0 : 0.0));
      }
      return;
    }
    case Op::kExp: {
      Tensor& ga = ing(0);
      for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * y.data[i];
      return;
    }
    case Op::kLog: {
      const Tensor& a = inv(0);
      Tensor& ga = ing(0);
      for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] / a.data[i];
      return;
    }
    case Op::kSqrt: {
      Tensor& ga = ing(0);
      for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * 0.5 / y.data[i];
      return;
    }
    case Op::kCos: {
      const Tensor& a = inv(0);
      Tensor& ga = ing(0);
      for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] -= g.data[i] * std::sin(a.data[i]);
      return;
    }
    case Op::kTanh: {
      Tensor& ga = ing(0);
      for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * (1.0 - y.data[i] * y.data[i]);
      return;
    }
    case Op::kSigmoid: {
      Tensor& ga = ing(0);
      for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * y.data[i] * (1.0 - y.data[i]);
      return;
    }
    case Op::kRelu: {
      const Tensor& a = inv(0);
      Tensor& ga = ing(0);
      for (size_t i = 0; i < g.data.size(); ++i) {
        if (a.data[i] > 0.0) ga.data[i] += g.data[i];
      }
      return;
    }
    case Op::kElu: {
      const Tensor& a = inv(0);
      Tensor& ga = ing(0);
      for (size_t i = 0; i < g.data.size(); ++i) {
        ga.data[i] += g.data[i] * (a.data[i] > 0.0 ? 1.0 : y.data[i] + 1.0);
      }
      return;
    }
    case Op::kClamp: {
      const Tensor& a = inv(0);
      Tensor& ga = ing(0);
      for (size_t i = 0; i < g.data.size(); ++i) {
        if (a.data[i] > n.lo && a.data[i] < n.hi) ga.data[i] += g.data[i];
      }
      return;
    }

    case Op::kMatMul: {
      as_matrix(ing(0)).noalias() += as_matrix(g) * as_matrix(inv(1)).transpose();
      as_matrix(ing(1)).noalias() += as_matrix(inv(0)).transpose() * as_matrix(g);
      return;
    }
    case Op::kTranspose: {
      as_matrix(ing(0)) += as_matrix(g).transpose();
      return;
    }
    case Op::kSolve: {
      // X = A^{-1} B. With upstream gradient G on X:
      //   dB = A^{-T} G,  dA = -dB X^T.
      Eigen::FullPivLU<EMat> lu(EMat(as_matrix(inv(0)).transpose()));
      EMat s = lu.solve(EMat(as_matrix(g)));
      as_matrix(ing(1)).noalias() += s;
      as_matrix(ing(0)).noalias() -= s * as_matrix(y).transpose();
      return;
    }

    case Op::kSoftmax: {
      Tensor& ga = ing(0);
      const int64_t rows = n.shape[0], cols = n.shape[1];
      if (n.axis == 1) {
        for (int64_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (int64_t c = 0; c < cols; ++c) dot += g.at(r, c) * y.at(r, c);
          for (int64_t c = 0; c < cols; ++c) ga.at(r, c) += (g.at(r, c) - dot) * y.at(r, c);
        }
      } else {
        for (int64_t c = 0; c < cols; ++c) {
          double dot = 0.0;
          for (int64_t r = 0; r < rows; ++r) dot += g.at(r, c) * y.at(r, c);
          for (int64_t r = 0; r < rows; ++r) ga.at(r, c) += (g.at(r, c) - dot) * y.at(r, c);
        }
      }
      return;
    }

    case Op::kReduceSum:
    case Op::kReduceMean: {
      const Tensor& a = inv(0);
      Tensor& ga = ing(0);
      if (n.axis == -1) {
        const double scale = n.op == Op::kReduceMean ? 1.0 / static_cast<double>(a.numel()) : 1.0;
        const double gv = g.data[0] * scale;
        for (double& v : ga.data) v += gv;
      } else {
        const int64_t rows = a.shape[0], cols = a.shape[1];
        if (n.axis == 0) {
          const double scale = n.op == Op::kReduceMean ? 1.0 / static_cast<double>(rows) : 1.0;
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < cols; ++c) ga.at(r, c) += g.data[static_cast<size_t>(c)] * scale;
        } else {
          const double scale = n.op == Op::kReduceMean ? 1.0 / static_cast<double>(cols) : 1.0;
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < cols; ++c) ga.at(r, c) += g.data[static_cast<size_t>(r)] * scale;
        }
      }
      return;
    }

    case Op::kConcat: {
      const int64_t cols = n.shape[1];
      if (n.axis == 0) {
        int64_t r0 = 0;
        for (NodeId pid : n.inputs) {
          Tensor& gp = grads_[static_cast<size_t>(pid)];
          const int64_t pr = gp.shape[0];
          for (int64_t i = 0; i < pr * cols; ++i) gp[i] += g[r0 * cols + i];
          r0 += pr;
        }
      } else {
        int64_t c0 = 0;
        const int64_t rows = n.shape[0];
        for (NodeId pid : n.inputs) {
          Tensor& gp = grads_[static_cast<size_t>(pid)];
          const int64_t pc = gp.shape[1];
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < pc; ++c) gp.at(r, c) += g.at(r, c0 + c);
          c0 += pc;
        }
      }
      return;
    }

    case Op::kSlice: {
      const Tensor& a = inv(0);
      Tensor& ga = ing(0);
      const Shape& sa = a.shape;
      const size_t r = sa.size();
      std::vector<int64_t> in_strides(r, 1);
      for (size_t d = r - 1; d-- > 0;) in_strides[d] = in_strides[d + 1] * sa[d + 1];
      std::vector<int64_t> idx(r, 0);
      const int64_t count = g.numel();
      for (int64_t i = 0; i < count; ++i) {
        int64_t off = 0;
        for (size_t d = 0; d < r; ++d) off += (n.starts[d] + idx[d]) * in_strides[d];
        ga[off] += g[i];
        for (size_t d = r; d-- > 0;) {
          if (++idx[d] < n.shape[d]) break;
          idx[d] = 0;
        }
      }
      return;
    }

    case Op::kReshape: {
      Tensor& ga = ing(0);
      for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
      return;
    }

    case Op::kConv2dSame: {
      const Tensor& x = inv(0);
      const Tensor& w = inv(1);
      Tensor& gx = ing(0);
      Tensor& gw = ing(1);
      const int64_t N = x.shape[0], H = x.shape[1], W = x.shape[2], Ci = x.shape[3];
      const int64_t KH = w.shape[0], KW = w.shape[1], Co = w.shape[3];
      const int64_t ph = KH / 2, pw = KW / 2;
      const int64_t cols = KH * KW * Ci;
      CEMap wm(w.data.data(), cols, Co);
      EMap gwm(gw.data.data(), cols, Co);
      EMat col(H * W, cols);
      EMat gcol(H * W, cols);
      for (int64_t img = 0; img < N; ++img) {
        const double* xim = x.data.data() + img * H * W * Ci;
        double* gxim = gx.data.data() + img * H * W * Ci;
        col.setZero();
        for (int64_t y2 = 0; y2 < H; ++y2) {
          for (int64_t xx = 0; xx < W; ++xx) {
            double* crow = col.data() + (y2 * W + xx) * cols;
            for (int64_t ky = 0; ky < KH; ++ky) {
              const int64_t sy = y2 + ky - ph;
              if (sy < 0 || sy >= H) continue;
              for (int64_t kx = 0; kx < KW; ++kx) {
                const int64_t sx = xx + kx - pw;
                if (sx < 0 || sx >= W) continue;
                std::memcpy(crow + (ky * KW + kx) * Ci, xim + (sy * W + sx) * Ci,
                            static_cast<size_t>(Ci) * sizeof(double));
              }
            }
          }
        }
        CEMap gom(g.data.data() + img * H * W * Co, H * W, Co);
        gwm.noalias() += col.transpose() * gom;
        gcol.noalias() = gom * wm.transpose();
        for (int64_t y2 = 0; y2 < H; ++y2) {
          for (int64_t xx = 0; xx < W; ++xx) {
            const double* crow = gcol.data() + (y2 * W + xx) * cols;
            for (int64_t ky = 0; ky < KH; ++ky) {
              const int64_t sy = y2 + ky - ph;
              if (sy < 0 || sy >= H) continue;
              for (int64_t kx = 0; kx < KW; ++kx) {
                const int64_t sx = xx + kx - pw;
                if (sx < 0 || sx >= W) continue;
                double* dst = gxim + (sy * W + sx) * Ci;
                const double* src = crow + (ky * KW + kx) * Ci;
                for (int64_t c = 0; c < Ci; ++c) dst[c] += src[c];
              }
            }
          }
        }
      }
      return;
    }

    case Op::kMaxPool2x2: {
      Tensor& gx = ing(0);
      const auto& argmax = pool_argmax_.at(id);
      for (size_t i = 0; i < g.data.size(); ++i) gx[argmax[i]] += g.data[i];
      return;
    }

    case Op::kInput:
    case Op::kConstant:
    case Op::kParam:
      return;
  }
  fail(id, "unhandled op in backward");
}

// ---------------------------------------------------------------------------
// Finite-difference audit
// ---------------------------------------------------------------------------

double Graph::grad_check(NodeId loss, double eps, const Bindings& bindings) {
  if (!(eps > 0.0 && eps <= 1e-2)) throw GraphError("grad_check: eps must lie in (0, 1e-2]");
  forward(bindings);
  backward(loss);

  // Snapshot analytic gradients before finite differencing clobbers state.
  std::vector<NodeId> params = parameters();
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (NodeId p : params) analytic.push_back(grads_[static_cast<size_t>(p)]);

  // Finite differences perturb whichever value source is active: the binding
  // if present, otherwise the stored default.
  Bindings work = bindings;
  auto value_slot = [&](NodeId p) -> Tensor* {
    for (auto& [id, t] : work) {
      if (id == p) return &t;
    }
    return nullptr;
  };

  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    const NodeId p = params[pi];
    Tensor* bound = value_slot(p);
    Tensor base = bound ? *bound : nodes_[static_cast<size_t>(p)].default_value;
    for (size_t k = 0; k < base.data.size(); ++k) {
      const double orig = base.data[k];
      auto eval_at = [&](double v) {
        base.data[k] = v;
        if (bound) {
          *bound = base;
          forward(work);
        } else {
          mutable_node(p).default_value = base;
          forward(work);
        }
        return values_[static_cast<size_t>(loss)].data[0];
      };
      const double lp = eval_at(orig + eps);
      const double lm = eval_at(orig - eps);
      base.data[k] = orig;
      if (bound) {
        *bound = base;
      } else {
        mutable_node(p).default_value = base;
      }
      const double fd = (lp - lm) / (2.0 * eps);
      const double an = analytic[pi].data[k];
      const double rel = std::fabs(an - fd) / std::max({1.0, std::fabs(an), std::fabs(fd)});
      worst = std::max(worst, rel);
    }
  }
  // Restore a consistent forward/backward state for the caller.
  forward(bindings);
  backward(loss);
  for (size_t pi = 0; pi < params.size(); ++pi) {
    grads_[static_cast<size_t>(params[pi])] = analytic[pi];
  }
  return worst;
}

}  // namespace metavrf::ad
