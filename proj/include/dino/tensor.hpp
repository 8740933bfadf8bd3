#pragma once

// Dense float64 tensor with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap handle to a graph node. Operations on tensors that
// require gradients record their inputs and a backward closure; calling
// backward() on a scalar result linearizes the reachable graph into a Tape
// (topological order) and runs the closures in reverse. Each graph supports
// a single backward pass; closures are released afterwards.

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace dino {

using Index = Eigen::Index;
using Shape = std::vector<Index>;
using Buffer = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::string shape_to_string(const Shape& shape);
Index shape_numel(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;  // empty until touched by backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;  // accumulates this->grad into parents

  Buffer& grad_buffer() {
    if (grad.size() != value.size()) grad = Buffer::Zero(value.size());
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor();

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_buffer(Shape shape, Buffer data, bool requires_grad = false);
  static Tensor from_matrix(const RowMatrix& m, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index dim(Index axis) const;
  Index numel() const { return node_->value.size(); }

  const Buffer& data() const { return node_->value; }
  /// Writable storage; intended for leaves (parameters, inputs).
  Buffer& mutable_data() { return node_->value; }
  double item() const;
  double at(Index i) const { return node_->value[i]; }

  /// Row-major 2-D view; requires rank 2.
  Eigen::Map<const RowMatrix> mat() const;
  RowMatrix to_matrix() const { return mat(); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const { return !node_->backward; }

  /// Gradient accumulated by backward(); zeros when the tensor was not on
  /// any path to the differentiated scalar.
  Buffer grad() const;
  void zero_grad();

  /// Reverse-mode pass from this scalar.
  void backward() const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }
  const std::shared_ptr<detail::Node>& node() const { return node_; }

  // Used by op implementations.
  static Tensor make_result(Shape shape, Buffer value,
                            std::vector<Tensor> inputs,
                            std::function<void(detail::Node&)> backward);

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

/// Topologically ordered record of every gradient-carrying node reachable
/// from a root. Inputs always precede the operations that consume them.
class Tape {
 public:
  static Tape record(const Tensor& root);

  std::span<const std::shared_ptr<detail::Node>> nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }

  /// Seeds the root with d(root)/d(root) = 1 and runs every closure in
  /// reverse order, then drops the closures.
  void run_backward();

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

// ---------------------------------------------------------------------------
// Elementwise (operands must have identical shapes; scalars are doubles)

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sin(const Tensor& x);
Tensor cos(const Tensor& x);
Tensor pow(const Tensor& x, double exponent);
Tensor sqrt(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
/// log(p / (1 - p)) after clamping p into [eps, 1 - eps].
Tensor inverse_sigmoid(const Tensor& p, double eps = 1e-3);
Tensor clamp(const Tensor& x, double lo, double hi);

/// Value copy that blocks gradient flow to x's ancestors.
Tensor detach(const Tensor& x);

/// What a forward pass decided that backward() treats as fixed: the values
/// leaving detach() and the branch taken by every piecewise primitive
/// (relu, abs, maximum, minimum, clamp, inverse_sigmoid's clamp, bilinear
/// cell) and discrete selection. While a PieceRecord is alive on this
/// thread, each decision is appended in call order; while a PieceReplay is
/// alive, each is taken from the trace instead. A replayed pass evaluates the
/// smooth extension of the recorded piece, which is the function backward()
/// differentiates, so finite differences can be compared with it directly.
struct PieceTrace {
  std::vector<Buffer> detached;
  std::vector<std::uint64_t> branches;
};

class PieceRecord {
 public:
  explicit PieceRecord(PieceTrace& trace);
  ~PieceRecord();
  PieceRecord(const PieceRecord&) = delete;
  PieceRecord& operator=(const PieceRecord&) = delete;
};

class PieceReplay {
 public:
  explicit PieceReplay(const PieceTrace& trace);
  ~PieceReplay();
  PieceReplay(const PieceReplay&) = delete;
  PieceReplay& operator=(const PieceReplay&) = delete;
};

/// A discrete choice: returns `natural`, records it, or substitutes the
/// recorded one, depending on the active trace.
std::uint64_t take_branch(std::uint64_t natural);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }
inline Tensor operator*(double s, const Tensor& x) { return scale(x, s); }
inline Tensor operator*(const Tensor& x, double s) { return scale(x, s); }
inline Tensor operator+(const Tensor& x, double s) { return add_scalar(x, s); }
inline Tensor operator+(double s, const Tensor& x) { return add_scalar(x, s); }
inline Tensor operator-(const Tensor& x, double s) { return add_scalar(x, -s); }
inline Tensor operator-(double s, const Tensor& x) { return add_scalar(neg(x), s); }

// ---------------------------------------------------------------------------
// Linear algebra and reductions

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
/// x[N, D] + bias[D] added to every row.
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x, Index axis);
Tensor mean(const Tensor& x, Index axis);
Tensor softmax(const Tensor& x, Index axis);

// ---------------------------------------------------------------------------
// Structural

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(std::span<const Tensor> parts, Index axis);
Tensor concat(std::initializer_list<Tensor> parts, Index axis);
/// Half-open range [begin, end) along axis.
Tensor slice(const Tensor& x, Index axis, Index begin, Index end);
/// Selects entries along axis 0; indices may repeat.
Tensor gather(const Tensor& x, std::span<const Index> indices);

// ---------------------------------------------------------------------------
// Network primitives

/// Per-row normalization over the last axis of a rank-2 tensor.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Convolution of an [H, W, Cin] map with weights laid out as
/// [k*k*Cin, Cout] (row index (ky*k + kx)*Cin + c) and bias [Cout].
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              Index kernel, Index stride, Index padding);

struct LevelShape {
  Index height;
  Index width;
};

/// Multi-scale deformable sampling core.
///
/// value:     [S, heads*head_dim], levels flattened row-major and concatenated
/// locations: [Q, heads*levels*points*2] normalized (x, y), pixel centers at
///            (i + 0.5) / extent; samples outside a map read zero
/// weights:   [Q, heads*levels*points]
/// returns    [Q, heads*head_dim], out[q, h] = sum_{l,p} w * bilinear(value_l,h, loc)
Tensor ms_deform_sample(const Tensor& value, std::span<const LevelShape> levels,
                        const Tensor& locations, const Tensor& weights, Index heads,
                        Index points);

/// Bilinear sampling of a single [H, W, C] map at normalized (x, y) rows of
/// locations[N, 2]; returns [N, C].
Tensor bilinear_sample(const Tensor& map, const Tensor& locations);

}  // namespace dino
