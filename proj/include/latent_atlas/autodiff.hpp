#pragma once

// Static computation graph with reverse-mode differentiation.
//
// A Graph is built once from leaves (named inputs and constants) and
// primitive operations, then evaluated any number of times with forward()
// and differentiated with backward(). Nodes are stored in creation order,
// which is a topological order, so the graph is acyclic by construction.
// Shapes are checked when a node is created.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "latent_atlas/tensor.hpp"

namespace latent_atlas::ad {

/// Handle to a node inside one Graph.
struct Var {
  std::size_t id = 0;
};

enum class OpKind {
  kInput,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kScale,
  kMatMul,
  kConv2d,
  kUpsample2x,
  kAvgPool2x,
  kLeakyRelu,
  kSigmoid,
  kModulate,
  kL2Norm,
  kSum,
  kMean,
  kMse,
  kPow,
  kReshape,
  kCustom,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::kInput: return "input";
    case OpKind::kConstant: return "constant";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kUpsample2x: return "upsample2x";
    case OpKind::kAvgPool2x: return "avgpool2x";
    case OpKind::kLeakyRelu: return "leaky_relu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kModulate: return "modulate";
    case OpKind::kL2Norm: return "l2_norm";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kMse: return "mse";
    case OpKind::kPow: return "pow";
    case OpKind::kReshape: return "reshape";
    case OpKind::kCustom: return "custom";
  }
  return "?";
}

/// User-supplied primitive with a hand-coded gradient.
struct CustomOp {
  std::string name;
  Shape output_shape;
  std::function<Tensor(const std::vector<const Tensor*>&)> forward;
  /// Returns one adjoint per input, given inputs, output and output adjoint.
  std::function<std::vector<Tensor>(const std::vector<const Tensor*>&, const Tensor&,
                                    const Tensor&)>
      backward;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  // ---- leaves ---------------------------------------------------------

  Var input(std::string name, Shape shape, bool trainable = false) {
    if (by_name_.count(name)) throw ConfigError("graph: duplicate input '" + name + "'");
    Node n;
    n.op = OpKind::kInput;
    n.shape = std::move(shape);
    n.name = name;
    n.trainable = trainable;
    n.requires_grad = trainable;
    Var v = push(std::move(n));
    by_name_[name] = v.id;
    return v;
  }

  Var constant(Tensor value) {
    return constant(std::make_shared<const Tensor>(std::move(value)));
  }

  Var constant(std::shared_ptr<const Tensor> value) {
    Node n;
    n.op = OpKind::kConstant;
    n.shape = value->shape();
    n.bound = std::move(value);
    return push(std::move(n));
  }

  void bind(const std::string& name, Tensor value) {
    bind(name, std::make_shared<const Tensor>(std::move(value)));
  }

  void bind(const std::string& name, std::shared_ptr<const Tensor> value) {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw ConfigError("graph: no input named '" + name + "'");
    Node& n = nodes_[it->second];
    if (value->shape() != n.shape) {
      throw ShapeError("bind '" + name + "': expected " + shape_str(n.shape) + ", got " +
                       shape_str(value->shape()));
    }
    n.bound = std::move(value);
    forwarded_ = false;
  }

  bool has_input(const std::string& name) const { return by_name_.count(name) > 0; }

  Var input_var(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw ConfigError("graph: no input named '" + name + "'");
    return Var{it->second};
  }

  // ---- primitives -----------------------------------------------------

  Var add(Var a, Var b) { return binary_same(OpKind::kAdd, a, b); }
  Var sub(Var a, Var b) { return binary_same(OpKind::kSub, a, b); }

  /// Elementwise product; either operand may be a one-element scalar.
  Var mul(Var a, Var b) {
    const Shape& sa = shape(a);
    const Shape& sb = shape(b);
    Shape out;
    if (sa == sb) {
      out = sa;
    } else if (shape_size(sa) == 1) {
      out = sb;
    } else if (shape_size(sb) == 1) {
      out = sa;
    } else {
      throw ShapeError(std::string("mul: shape mismatch ") + shape_str(sa) + " vs " +
                       shape_str(sb));
    }
    return push_op(OpKind::kMul, {a, b}, std::move(out));
  }

  Var scale(Var a, double c) { return push_op(OpKind::kScale, {a}, shape(a), c); }

  /// (m x k)(k x n) -> (m x n), or (m x k)(k) -> (m).
  Var matmul(Var a, Var b) {
    const Shape& sa = shape(a);
    const Shape& sb = shape(b);
    bool ok = sa.size() == 2 && (sb.size() == 1 || sb.size() == 2) && sa[1] == sb[0];
    if (!ok) {
      throw ShapeError("matmul: shape mismatch " + shape_str(sa) + " vs " + shape_str(sb));
    }
    Shape out = sb.size() == 1 ? Shape{sa[0]} : Shape{sa[0], sb[1]};
    return push_op(OpKind::kMatMul, {a, b}, std::move(out));
  }

  /// Stride-1 same-padded convolution. x: (C,H,W), w: (O,C,K,K) with odd K,
  /// optional bias (O).
  Var conv2d(Var x, Var w, std::optional<Var> bias = std::nullopt) {
    const Shape& sx = shape(x);
    const Shape& sw = shape(w);
    bool ok = sx.size() == 3 && sw.size() == 4 && sw[1] == sx[0] && sw[2] == sw[3] &&
              sw[2] % 2 == 1;
    if (!ok) {
      throw ShapeError("conv2d: shape mismatch " + shape_str(sx) + " vs " + shape_str(sw));
    }
    std::vector<Var> ins{x, w};
    if (bias) {
      if (shape(*bias) != Shape{sw[0]}) {
        throw ShapeError("conv2d: bias shape " + shape_str(shape(*bias)) + " vs " +
                         shape_str(sw));
      }
      ins.push_back(*bias);
    }
    return push_op(OpKind::kConv2d, std::move(ins), Shape{sw[0], sx[1], sx[2]});
  }

  Var upsample2x(Var x) {
    const Shape& s = shape(x);
    if (s.size() != 3) throw ShapeError("upsample2x: expected (C,H,W), got " + shape_str(s));
    return push_op(OpKind::kUpsample2x, {x}, Shape{s[0], 2 * s[1], 2 * s[2]});
  }

  Var avgpool2x(Var x) {
    const Shape& s = shape(x);
    if (s.size() != 3 || s[1] % 2 || s[2] % 2) {
      throw ShapeError("avgpool2x: expected (C,H,W) with even H,W, got " + shape_str(s));
    }
    return push_op(OpKind::kAvgPool2x, {x}, Shape{s[0], s[1] / 2, s[2] / 2});
  }

  Var leaky_relu(Var x, double slope = 0.2) {
    return push_op(OpKind::kLeakyRelu, {x}, shape(x), slope);
  }

  Var sigmoid(Var x) { return push_op(OpKind::kSigmoid, {x}, shape(x)); }

  /// Per-channel scale and bias: y[c] = x[c] * s[c] + s[C + c].
  Var modulate(Var x, Var style) {
    const Shape& sx = shape(x);
    const Shape& ss = shape(style);
    if (sx.size() != 3 || ss.size() != 1 || ss[0] != 2 * sx[0]) {
      throw ShapeError("modulate: shape mismatch " + shape_str(sx) + " vs " + shape_str(ss));
    }
    return push_op(OpKind::kModulate, {x, style}, sx);
  }

  Var l2_norm(Var x) { return push_op(OpKind::kL2Norm, {x}, Shape{}); }
  Var sum(Var x) { return push_op(OpKind::kSum, {x}, Shape{}); }
  Var mean(Var x) { return push_op(OpKind::kMean, {x}, Shape{}); }

  Var mse(Var a, Var b) {
    if (shape(a) != shape(b)) {
      throw ShapeError("mse: shape mismatch " + shape_str(shape(a)) + " vs " +
                       shape_str(shape(b)));
    }
    return push_op(OpKind::kMse, {a, b}, Shape{});
  }

  Var pow(Var x, double exponent) {
    return push_op(OpKind::kPow, {x}, shape(x), exponent);
  }

  Var reshape(Var x, Shape s) {
    if (shape_size(s) != shape_size(shape(x))) {
      throw ShapeError("reshape: " + shape_str(shape(x)) + " -> " + shape_str(s));
    }
    return push_op(OpKind::kReshape, {x}, std::move(s));
  }

  Var custom(std::shared_ptr<const CustomOp> op, std::vector<Var> ins) {
    Shape s = op->output_shape;
    Var v = push_op(OpKind::kCustom, std::move(ins), std::move(s));
    nodes_[v.id].custom = std::move(op);
    return v;
  }

  // ---- evaluation -----------------------------------------------------

  const Shape& shape(Var v) const { return nodes_.at(v.id).shape; }
  std::size_t size() const { return nodes_.size(); }

  void set_output(Var v) { output_ = v.id; }
  Var output() const {
    if (nodes_.empty()) throw ConfigError("graph: empty");
    return Var{output_.value_or(nodes_.size() - 1)};
  }

  /// Binds the given inputs, evaluates every node and returns the output.
  const Tensor& forward(const std::map<std::string, Tensor>& inputs = {}) {
    for (const auto& [name, t] : inputs) bind(name, t);
    for (const Node& n : nodes_) {
      if (n.op == OpKind::kInput && !n.bound) {
        throw ConfigError("forward: input '" + n.name + "' is not bound");
      }
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) eval(i);
    forwarded_ = true;
    return value(output());
  }

  const Tensor& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.op == OpKind::kInput || n.op == OpKind::kConstant) {
      if (!n.bound) throw ConfigError("value: input '" + n.name + "' is not bound");
      return *n.bound;
    }
    if (!forwarded_) throw ConfigError("value: forward has not been executed");
    return n.value;
  }

  /// Propagates the output adjoint; returns gradients of trainable inputs.
  std::map<std::string, Tensor> backward(const Tensor& output_adjoint) {
    if (!forwarded_) throw ConfigError("backward: forward has not been executed");
    const std::size_t out = output().id;
    if (output_adjoint.shape() != nodes_[out].shape) {
      throw ShapeError("backward: adjoint shape " + shape_str(output_adjoint.shape()) +
                       " vs output " + shape_str(nodes_[out].shape));
    }
    for (Node& n : nodes_) {
      if (n.requires_grad) {
        if (n.adjoint.shape() != n.shape) {
          n.adjoint = Tensor(n.shape);
        } else {
          std::fill(n.adjoint.data().begin(), n.adjoint.data().end(), 0.0);
        }
      }
    }
    std::map<std::string, Tensor> grads;
    if (nodes_[out].requires_grad) {
      std::copy(output_adjoint.data().begin(), output_adjoint.data().end(),
                nodes_[out].adjoint.data().begin());
      for (std::size_t i = out + 1; i-- > 0;) {
        if (nodes_[i].requires_grad) propagate(i);
      }
    }
    for (const Node& n : nodes_) {
      if (n.op == OpKind::kInput && n.trainable) {
        grads.emplace(n.name, n.requires_grad ? n.adjoint : Tensor(n.shape));
      }
    }
    backwarded_ = true;
    return grads;
  }

  std::map<std::string, Tensor> backward() { return backward(Tensor::filled(shape(output()), 1.0)); }

  /// Sign bits (x >= 0) of every leaky-relu input after the last forward.
  std::vector<bool> activation_pattern() const {
    std::vector<bool> bits;
    for (const Node& n : nodes_) {
      if (n.op != OpKind::kLeakyRelu) continue;
      for (double v : val(n.inputs[0]).data()) bits.push_back(v >= 0.0);
    }
    return bits;
  }

  /// Adjoint of any node after backward; zero for nodes off the gradient path.
  Tensor gradient(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (!backwarded_ || !n.requires_grad) return Tensor(n.shape);
    return n.adjoint;
  }

  std::vector<std::string> trainable_inputs() const {
    std::vector<std::string> names;
    for (const Node& n : nodes_) {
      if (n.op == OpKind::kInput && n.trainable) names.push_back(n.name);
    }
    return names;
  }

  std::size_t trainable_scalar_count() const {
    std::size_t c = 0;
    for (const Node& n : nodes_) {
      if (n.op == OpKind::kInput && n.trainable) c += shape_size(n.shape);
    }
    return c;
  }

  const Tensor& bound_value(const std::string& name) const {
    const Node& n = nodes_.at(input_var(name).id);
    if (!n.bound) throw ConfigError("graph: input '" + name + "' is not bound");
    return *n.bound;
  }

 private:
  struct Node {
    OpKind op = OpKind::kInput;
    std::vector<std::size_t> inputs;
    double attr = 0.0;
    Shape shape;
    std::string name;
    bool trainable = false;
    bool requires_grad = false;
    std::shared_ptr<const Tensor> bound;
    Tensor value;
    Tensor adjoint;
    std::shared_ptr<const CustomOp> custom;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    forwarded_ = false;
    backwarded_ = false;
    return Var{nodes_.size() - 1};
  }

  Var push_op(OpKind op, std::vector<Var> ins, Shape out, double attr = 0.0) {
    Node n;
    n.op = op;
    n.attr = attr;
    n.shape = std::move(out);
    for (Var v : ins) {
      if (v.id >= nodes_.size()) throw ConfigError("graph: dangling node reference");
      n.inputs.push_back(v.id);
      n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
    }
    return push(std::move(n));
  }

  Var binary_same(OpKind op, Var a, Var b) {
    if (shape(a) != shape(b)) {
      throw ShapeError(std::string(op_name(op)) + ": shape mismatch " + shape_str(shape(a)) +
                       " vs " + shape_str(shape(b)));
    }
    return push_op(op, {a, b}, shape(a));
  }

  const Tensor& val(std::size_t i) const {
    const Node& n = nodes_[i];
    if (n.op == OpKind::kInput || n.op == OpKind::kConstant) return *n.bound;
    return n.value;
  }

  void eval(std::size_t i);
  void propagate(std::size_t i);

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> by_name_;
  std::optional<std::size_t> output_;
  bool forwarded_ = false;
  bool backwarded_ = false;
};

// ---------------------------------------------------------------------------
// Kernels.

namespace detail {

/// Unfolds x (C, H, W) into rows indexed by (c, ky, kx) and columns by pixel,
/// zero outside the image.
inline void im2col(const double* x, std::size_t c_in, std::size_t h, std::size_t wd, std::size_t k,
                   double* cols) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  const std::ptrdiff_t H = static_cast<std::ptrdiff_t>(h);
  const std::ptrdiff_t W = static_cast<std::ptrdiff_t>(wd);
  const std::size_t plane = h * wd;
  for (std::size_t c = 0; c < c_in; ++c) {
    const double* xp = x + c * plane;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = cols + ((c * k + ky) * k + kx) * plane;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
        for (std::ptrdiff_t y = 0; y < H; ++y) {
          double* r = row + y * W;
          const std::ptrdiff_t sy = y + dy;
          if (sy < 0 || sy >= H) {
            std::fill(r, r + W, 0.0);
            continue;
          }
          const double* src = xp + sy * W;
          for (std::ptrdiff_t xx = 0; xx < W; ++xx) {
            const std::ptrdiff_t sx = xx + dx;
            r[xx] = (sx >= 0 && sx < W) ? src[sx] : 0.0;
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters column gradients back onto the image.
inline void col2im_add(const double* cols, std::size_t c_in, std::size_t h, std::size_t wd, std::size_t k,
                       double* gx) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  const std::ptrdiff_t H = static_cast<std::ptrdiff_t>(h);
  const std::ptrdiff_t W = static_cast<std::ptrdiff_t>(wd);
  const std::size_t plane = h * wd;
  for (std::size_t c = 0; c < c_in; ++c) {
    double* gp = gx + c * plane;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* row = cols + ((c * k + ky) * k + kx) * plane;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
        const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx);
        const std::ptrdiff_t x1 = std::min(W, W - dx);
        for (std::ptrdiff_t y = std::max<std::ptrdiff_t>(0, -dy); y < std::min(H, H - dy); ++y) {
          const double* r = row + y * W;
          double* dst = gp + (y + dy) * W + dx;
          for (std::ptrdiff_t xx = x0; xx < x1; ++xx) dst[xx] += r[xx];
        }
      }
    }
  }
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstRowMap = Eigen::Map<const RowMat>;
using RowMap = Eigen::Map<RowMat>;

inline void conv2d_forward(std::span<const double> x, std::span<const double> w,
                           const double* bias, std::span<double> out, std::size_t c_in,
                           std::size_t c_out, std::size_t h, std::size_t wd, std::size_t k) {
  const std::size_t plane = h * wd, rows = c_in * k * k;
  RowMap o(out.data(), static_cast<Eigen::Index>(c_out), static_cast<Eigen::Index>(plane));
  const ConstRowMap wm(w.data(), static_cast<Eigen::Index>(c_out), static_cast<Eigen::Index>(rows));
  if (k == 1) {
    o.noalias() = wm * ConstRowMap(x.data(), static_cast<Eigen::Index>(c_in), static_cast<Eigen::Index>(plane));
  } else {
    thread_local std::vector<double> cols;
    if (cols.size() < rows * plane) cols.resize(rows * plane);
    im2col(x.data(), c_in, h, wd, k, cols.data());
    o.noalias() = wm * ConstRowMap(cols.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(plane));
  }
  if (bias) {
    for (std::size_t c = 0; c < c_out; ++c) o.row(static_cast<Eigen::Index>(c)).array() += bias[c];
  }
}

inline void conv2d_backward(std::span<const double> x, std::span<const double> w,
                            std::span<const double> gout, double* gx, double* gw, double* gb,
                            std::size_t c_in, std::size_t c_out, std::size_t h,
                            std::size_t wd, std::size_t k) {
  const auto plane = static_cast<Eigen::Index>(h * wd);
  const auto rows = static_cast<Eigen::Index>(c_in * k * k);
  const auto co = static_cast<Eigen::Index>(c_out);
  const ConstRowMap g(gout.data(), co, plane);
  const ConstRowMap wm(w.data(), co, rows);
  if (gb) {
    for (Eigen::Index c = 0; c < co; ++c) gb[c] += g.row(c).sum();
  }
  if (k == 1) {
    if (gw) RowMap(gw, co, rows).noalias() += g * ConstRowMap(x.data(), rows, plane).transpose();
    if (gx) RowMap(gx, rows, plane).noalias() += wm.transpose() * g;
    return;
  }
  thread_local std::vector<double> cols;
  if (cols.size() < static_cast<std::size_t>(rows * plane)) cols.resize(static_cast<std::size_t>(rows * plane));
  if (gw) {
    im2col(x.data(), c_in, h, wd, k, cols.data());
    RowMap(gw, co, rows).noalias() += g * ConstRowMap(cols.data(), rows, plane).transpose();
  }
  if (gx) {
    RowMap(cols.data(), rows, plane).noalias() = wm.transpose() * g;
    col2im_add(cols.data(), c_in, h, wd, k, gx);
  }
}

}  // namespace detail

inline void Graph::eval(std::size_t i) {
  Node& n = nodes_[i];
  if (n.op == OpKind::kInput || n.op == OpKind::kConstant) return;
  if (n.value.shape() != n.shape) n.value = Tensor(n.shape);
  std::span<double> out = n.value.data();
  auto in = [&](std::size_t k) -> const Tensor& { return val(n.inputs[k]); };

  switch (n.op) {
    case OpKind::kAdd: {
      const auto a = in(0).data(), b = in(1).data();
      for (std::size_t j = 0; j < out.size(); ++j) out[j] = a[j] + b[j];
      break;
    }
    case OpKind::kSub: {
      const auto a = in(0).data(), b = in(1).data();
      for (std::size_t j = 0; j < out.size(); ++j) out[j] = a[j] - b[j];
      break;
    }
    case OpKind::kMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.size() == b.size()) {
        for (std::size_t j = 0; j < out.size(); ++j) out[j] = a[j] * b[j];
      } else if (a.size() == 1) {
        for (std::size_t j = 0; j < out.size(); ++j) out[j] = a[0] * b[j];
      } else {
        for (std::size_t j = 0; j < out.size(); ++j) out[j] = a[j] * b[0];
      }
      break;
    }
    case OpKind::kScale: {
      const auto a = in(0).data();
      for (std::size_t j = 0; j < out.size(); ++j) out[j] = n.attr * a[j];
      break;
    }
    case OpKind::kMatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const std::size_t m = a.dim(0), k = a.dim(1);
      const std::size_t cols = b.rank() == 1 ? 1 : b.dim(1);
      std::fill(out.begin(), out.end(), 0.0);
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t q = 0; q < k; ++q) {
          const double av = a[r * k + q];
          const double* brow = b.data().data() + q * cols;
          double* orow = out.data() + r * cols;
          for (std::size_t c = 0; c < cols; ++c) orow[c] += av * brow[c];
        }
      }
      break;
    }
    case OpKind::kConv2d: {
      const Tensor& x = in(0);
      const Tensor& w = in(1);
      const double* bias = n.inputs.size() > 2 ? in(2).data().data() : nullptr;
      detail::conv2d_forward(x.data(), w.data(), bias, out, x.dim(0), w.dim(0), x.dim(1),
                             x.dim(2), w.dim(2));
      break;
    }
    case OpKind::kUpsample2x: {
      const Tensor& x = in(0);
      const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < 2 * h; ++y) {
          for (std::size_t xx = 0; xx < 2 * w; ++xx) {
            out[(ch * 2 * h + y) * 2 * w + xx] = x[(ch * h + y / 2) * w + xx / 2];
          }
        }
      }
      break;
    }
    case OpKind::kAvgPool2x: {
      const Tensor& x = in(0);
      const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
      const std::size_t ho = h / 2, wo = w / 2;
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < ho; ++y) {
          for (std::size_t xx = 0; xx < wo; ++xx) {
            const double* p = x.data().data() + (ch * h + 2 * y) * w + 2 * xx;
            out[(ch * ho + y) * wo + xx] = 0.25 * (p[0] + p[1] + p[w] + p[w + 1]);
          }
        }
      }
      break;
    }
    case OpKind::kLeakyRelu: {
      const auto a = in(0).data();
      for (std::size_t j = 0; j < out.size(); ++j) out[j] = a[j] >= 0.0 ? a[j] : n.attr * a[j];
      break;
    }
    case OpKind::kSigmoid: {
      const auto a = in(0).data();
      for (std::size_t j = 0; j < out.size(); ++j) out[j] = 1.0 / (1.0 + std::exp(-a[j]));
      break;
    }
    case OpKind::kModulate: {
      const Tensor& x = in(0);
      const Tensor& s = in(1);
      const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double sc = s[ch], bi = s[c + ch];
        for (std::size_t j = 0; j < plane; ++j) out[ch * plane + j] = x[ch * plane + j] * sc + bi;
      }
      break;
    }
    case OpKind::kL2Norm: {
      out[0] = in(0).norm();
      break;
    }
    case OpKind::kSum: {
      double s = 0.0;
      for (double v : in(0).data()) s += v;
      out[0] = s;
      break;
    }
    case OpKind::kMean: {
      double s = 0.0;
      for (double v : in(0).data()) s += v;
      out[0] = s / static_cast<double>(in(0).size());
      break;
    }
    case OpKind::kMse: {
      const auto a = in(0).data(), b = in(1).data();
      double s = 0.0;
      for (std::size_t j = 0; j < a.size(); ++j) {
        const double d = a[j] - b[j];
        s += d * d;
      }
      out[0] = s / static_cast<double>(a.size());
      break;
    }
    case OpKind::kPow: {
      const auto a = in(0).data();
      for (std::size_t j = 0; j < out.size(); ++j) out[j] = std::pow(a[j], n.attr);
      break;
    }
    case OpKind::kReshape: {
      const auto a = in(0).data();
      std::copy(a.begin(), a.end(), out.begin());
      break;
    }
    case OpKind::kCustom: {
      std::vector<const Tensor*> ins;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) ins.push_back(&in(k));
      Tensor r = n.custom->forward(ins);
      if (r.shape() != n.shape) {
        throw ShapeError("custom '" + n.custom->name + "': produced " + shape_str(r.shape()) +
                         ", declared " + shape_str(n.shape));
      }
      n.value = std::move(r);
      break;
    }
    case OpKind::kInput:
    case OpKind::kConstant:
      break;
  }
}

inline void Graph::propagate(std::size_t i) {
  Node& n = nodes_[i];
  if (n.op == OpKind::kInput || n.op == OpKind::kConstant) return;
  const std::span<const double> g = n.adjoint.data();
  auto in = [&](std::size_t k) -> const Tensor& { return val(n.inputs[k]); };
  auto wants = [&](std::size_t k) { return nodes_[n.inputs[k]].requires_grad; };
  auto adj = [&](std::size_t k) -> std::span<double> { return nodes_[n.inputs[k]].adjoint.data(); };

  switch (n.op) {
    case OpKind::kAdd: {
      for (std::size_t k = 0; k < 2; ++k) {
        if (!wants(k)) continue;
        auto ga = adj(k);
        for (std::size_t j = 0; j < g.size(); ++j) ga[j] += g[j];
      }
      break;
    }
    case OpKind::kSub: {
      if (wants(0)) {
        auto ga = adj(0);
        for (std::size_t j = 0; j < g.size(); ++j) ga[j] += g[j];
      }
      if (wants(1)) {
        auto gb = adj(1);
        for (std::size_t j = 0; j < g.size(); ++j) gb[j] -= g[j];
      }
      break;
    }
    case OpKind::kMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.size() == b.size()) {
        if (wants(0)) {
          auto ga = adj(0);
          for (std::size_t j = 0; j < g.size(); ++j) ga[j] += g[j] * b[j];
        }
        if (wants(1)) {
          auto gb = adj(1);
          for (std::size_t j = 0; j < g.size(); ++j) gb[j] += g[j] * a[j];
        }
      } else {
        // One side is a scalar.
        const bool a_scalar = a.size() == 1;
        const Tensor& s = a_scalar ? a : b;
        const Tensor& t = a_scalar ? b : a;
        const std::size_t si = a_scalar ? 0 : 1;
        const std::size_t ti = a_scalar ? 1 : 0;
        if (wants(si)) {
          double acc = 0.0;
          for (std::size_t j = 0; j < g.size(); ++j) acc += g[j] * t[j];
          adj(si)[0] += acc;
        }
        if (wants(ti)) {
          auto gt = adj(ti);
          for (std::size_t j = 0; j < g.size(); ++j) gt[j] += g[j] * s[0];
        }
      }
      break;
    }
    case OpKind::kScale: {
      if (wants(0)) {
        auto ga = adj(0);
        for (std::size_t j = 0; j < g.size(); ++j) ga[j] += n.attr * g[j];
      }
      break;
    }
    case OpKind::kMatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const std::size_t m = a.dim(0), k = a.dim(1);
      const std::size_t cols = b.rank() == 1 ? 1 : b.dim(1);
      if (wants(0)) {
        auto ga = adj(0);
        for (std::size_t r = 0; r < m; ++r) {
          for (std::size_t q = 0; q < k; ++q) {
            double acc = 0.0;
            for (std::size_t c = 0; c < cols; ++c) acc += g[r * cols + c] * b[q * cols + c];
            ga[r * k + q] += acc;
          }
        }
      }
      if (wants(1)) {
        auto gb = adj(1);
        for (std::size_t r = 0; r < m; ++r) {
          for (std::size_t q = 0; q < k; ++q) {
            const double av = a[r * k + q];
            for (std::size_t c = 0; c < cols; ++c) gb[q * cols + c] += av * g[r * cols + c];
          }
        }
      }
      break;
    }
    case OpKind::kConv2d: {
      const Tensor& x = in(0);
      const Tensor& w = in(1);
      double* gx = wants(0) ? adj(0).data() : nullptr;
      double* gw = wants(1) ? adj(1).data() : nullptr;
      double* gb = (n.inputs.size() > 2 && wants(2)) ? adj(2).data() : nullptr;
      detail::conv2d_backward(x.data(), w.data(), g, gx, gw, gb, x.dim(0), w.dim(0), x.dim(1),
                              x.dim(2), w.dim(2));
      break;
    }
    case OpKind::kUpsample2x: {
      if (!wants(0)) break;
      const Tensor& x = in(0);
      const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
      auto ga = adj(0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < 2 * h; ++y) {
          for (std::size_t xx = 0; xx < 2 * w; ++xx) {
            ga[(ch * h + y / 2) * w + xx / 2] += g[(ch * 2 * h + y) * 2 * w + xx];
          }
        }
      }
      break;
    }
    case OpKind::kAvgPool2x: {
      if (!wants(0)) break;
      const Tensor& x = in(0);
      const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
      const std::size_t ho = h / 2, wo = w / 2;
      auto ga = adj(0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < ho; ++y) {
          for (std::size_t xx = 0; xx < wo; ++xx) {
            const double q = 0.25 * g[(ch * ho + y) * wo + xx];
            double* p = ga.data() + (ch * h + 2 * y) * w + 2 * xx;
            p[0] += q;
            p[1] += q;
            p[w] += q;
            p[w + 1] += q;
          }
        }
      }
      break;
    }
    case OpKind::kLeakyRelu: {
      if (!wants(0)) break;
      const auto a = in(0).data();
      auto ga = adj(0);
      for (std::size_t j = 0; j < g.size(); ++j) ga[j] += a[j] >= 0.0 ? g[j] : n.attr * g[j];
      break;
    }
    case OpKind::kSigmoid: {
      if (!wants(0)) break;
      const auto y = n.value.data();
      auto ga = adj(0);
      for (std::size_t j = 0; j < g.size(); ++j) ga[j] += g[j] * y[j] * (1.0 - y[j]);
      break;
    }
    case OpKind::kModulate: {
      const Tensor& x = in(0);
      const Tensor& s = in(1);
      const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
      if (wants(0)) {
        auto gx = adj(0);
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double sc = s[ch];
          for (std::size_t j = 0; j < plane; ++j) gx[ch * plane + j] += g[ch * plane + j] * sc;
        }
      }
      if (wants(1)) {
        auto gs = adj(1);
        for (std::size_t ch = 0; ch < c; ++ch) {
          double gsc = 0.0, gbi = 0.0;
          for (std::size_t j = 0; j < plane; ++j) {
            gsc += g[ch * plane + j] * x[ch * plane + j];
            gbi += g[ch * plane + j];
          }
          gs[ch] += gsc;
          gs[c + ch] += gbi;
        }
      }
      break;
    }
    case OpKind::kL2Norm: {
      if (!wants(0)) break;
      const double nv = n.value[0];
      if (nv == 0.0) break;
      const auto a = in(0).data();
      auto ga = adj(0);
      for (std::size_t j = 0; j < a.size(); ++j) ga[j] += g[0] * a[j] / nv;
      break;
    }
    case OpKind::kSum: {
      if (!wants(0)) break;
      auto ga = adj(0);
      for (double& v : ga) v += g[0];
      break;
    }
    case OpKind::kMean: {
      if (!wants(0)) break;
      auto ga = adj(0);
      const double q = g[0] / static_cast<double>(ga.size());
      for (double& v : ga) v += q;
      break;
    }
    case OpKind::kMse: {
      const auto a = in(0).data(), b = in(1).data();
      const double q = 2.0 * g[0] / static_cast<double>(a.size());
      if (wants(0)) {
        auto ga = adj(0);
        for (std::size_t j = 0; j < a.size(); ++j) ga[j] += q * (a[j] - b[j]);
      }
      if (wants(1)) {
        auto gb = adj(1);
        for (std::size_t j = 0; j < a.size(); ++j) gb[j] -= q * (a[j] - b[j]);
      }
      break;
    }
    case OpKind::kPow: {
      if (!wants(0)) break;
      const auto a = in(0).data();
      auto ga = adj(0);
      for (std::size_t j = 0; j < a.size(); ++j) {
        ga[j] += g[j] * n.attr * std::pow(a[j], n.attr - 1.0);
      }
      break;
    }
    case OpKind::kReshape: {
      if (!wants(0)) break;
      auto ga = adj(0);
      for (std::size_t j = 0; j < g.size(); ++j) ga[j] += g[j];
      break;
    }
    case OpKind::kCustom: {
      std::vector<const Tensor*> ins;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) ins.push_back(&in(k));
      std::vector<Tensor> gs = n.custom->backward(ins, n.value, n.adjoint);
      if (gs.size() != n.inputs.size()) {
        throw ShapeError("custom '" + n.custom->name + "': wrong adjoint count");
      }
      for (std::size_t k = 0; k < gs.size(); ++k) {
        if (!wants(k)) continue;
        auto ga = adj(k);
        if (gs[k].size() != ga.size()) {
          throw ShapeError("custom '" + n.custom->name + "': adjoint shape mismatch");
        }
        for (std::size_t j = 0; j < ga.size(); ++j) ga[j] += gs[k][j];
      }
      break;
    }
    case OpKind::kInput:
    case OpKind::kConstant:
      break;
  }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check.

struct LeafCheck {
  std::string name;
  std::size_t scalars = 0;
  std::size_t skipped = 0;  // probes that crossed a leaky-relu kink
  double max_rel_error = 0.0;
  bool passed = true;
};

struct GradcheckReport {
  std::vector<LeafCheck> leaves;
  double tolerance = 0.0;
  bool passed = true;

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& l : leaves) m = std::max(m, l.max_rel_error);
    return m;
  }
};

/// Compares backward() against central differences of sum(output) for every
/// trainable input. The error of a leaf is max|analytic - numeric| divided by
/// max(max|analytic|, max|numeric|, 1e-6). All inputs must already be bound.
///
/// A probe whose +-step moves any leaky-relu input across zero measures a
/// mix of one-sided slopes, not the derivative. Such probes are retried with
/// steps down to step / 1000; coordinates still crossing are skipped and
/// counted. A leaf fails if more than max(1, scalars / 20) are skipped.
inline GradcheckReport gradcheck(Graph& graph, double tolerance, double step = 1e-5) {
  GradcheckReport report;
  report.tolerance = tolerance;
  const auto names = graph.trainable_inputs();
  if (names.empty()) return report;

  auto objective = [&graph]() {
    const Tensor& out = graph.forward();
    double s = 0.0;
    for (double v : out.data()) s += v;
    return s;
  };

  objective();
  const std::vector<bool> base_pattern = graph.activation_pattern();
  const auto analytic = graph.backward();

  for (const auto& name : names) {
    const Tensor original = graph.bound_value(name);
    const Tensor& a = analytic.at(name);
    LeafCheck leaf;
    leaf.name = name;
    leaf.scalars = original.size();
    double max_diff = 0.0, max_a = 0.0, max_n = 0.0;
    for (std::size_t j = 0; j < original.size(); ++j) {
      max_a = std::max(max_a, std::abs(a[j]));
      std::optional<double> numeric;
      Tensor probe = original;
      for (double h = step; !numeric && h >= step * 1e-3; h *= 0.1) {
        probe[j] = original[j] + h;
        graph.bind(name, probe);
        const double fp = objective();
        bool crossed = graph.activation_pattern() != base_pattern;
        probe[j] = original[j] - h;
        graph.bind(name, probe);
        const double fm = objective();
        crossed = crossed || graph.activation_pattern() != base_pattern;
        if (!crossed) numeric = (fp - fm) / (2.0 * h);
      }
      if (!numeric) {
        ++leaf.skipped;
        continue;
      }
      max_diff = std::max(max_diff, std::abs(*numeric - a[j]));
      max_n = std::max(max_n, std::abs(*numeric));
    }
    graph.bind(name, original);
    leaf.max_rel_error = max_diff / std::max({max_a, max_n, 1e-6});
    leaf.passed = leaf.max_rel_error < tolerance && leaf.skipped <= std::max<std::size_t>(1, leaf.scalars / 20);
    report.passed = report.passed && leaf.passed;
    report.leaves.push_back(std::move(leaf));
  }
  graph.forward();
  return report;
}

}  // namespace latent_atlas::ad
