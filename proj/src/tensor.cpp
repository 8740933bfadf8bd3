#include "dino/tensor.hpp"

#include "dino/errors.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace dino {

using detail::Node;

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_to_string(shape));
    n *= d;
  }
  return n;
}

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                     " vs " + shape_to_string(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& x, Index rank) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_to_string(x.shape()));
  }
}

Index normalize_axis(const char* op, const Tensor& x, Index axis) {
  const Index r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError(std::string(op) + ": axis out of range for shape " +
                     shape_to_string(x.shape()));
  }
  return axis;
}

// [outer, n, inner] factorization around an axis.
struct AxisSplit {
  Index outer = 1;
  Index n = 1;
  Index inner = 1;
};

AxisSplit split_at(const Shape& shape, Index axis) {
  AxisSplit s;
  for (Index i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (Index i = axis + 1; i < static_cast<Index>(shape.size()); ++i) s.inner *= shape[i];
  return s;
}

Eigen::Map<RowMatrix> as_matrix(Buffer& b, Index rows, Index cols) {
  return Eigen::Map<RowMatrix>(b.data(), rows, cols);
}

Eigen::Map<const RowMatrix> as_matrix(const Buffer& b, Index rows, Index cols) {
  return Eigen::Map<const RowMatrix>(b.data(), rows, cols);
}

bool wants_grad(const Node& self, std::size_t i) { return self.parents[i]->requires_grad; }

Buffer& parent_grad(Node& self, std::size_t i) { return self.parents[i]->grad_buffer(); }

const Buffer& parent_value(const Node& self, std::size_t i) { return self.parents[i]->value; }

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : node_(std::make_shared<Node>()) { node_->shape = {0}; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const Index n = shape_numel(shape);
  return from_buffer(std::move(shape), Buffer::Constant(n, value), requires_grad);
}

Tensor Tensor::from_buffer(Shape shape, Buffer data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("buffer of length " + std::to_string(data.size()) +
                     " does not fill shape " + shape_to_string(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from_matrix(const RowMatrix& m, bool requires_grad) {
  Buffer data = Eigen::Map<const Buffer>(m.data(), m.size());
  return from_buffer({m.rows(), m.cols()}, std::move(data), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from_buffer({}, Buffer::Constant(1, v), requires_grad);
}

Index Tensor::dim(Index axis) const {
  const Index r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError("dim: axis out of range for shape " + shape_to_string(shape()));
  }
  return node_->shape[axis];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_to_string(shape()) + " is not a scalar");
  return node_->value[0];
}

Eigen::Map<const RowMatrix> Tensor::mat() const {
  require_rank("mat", *this, 2);
  const Buffer& v = node_->value;
  return as_matrix(v, node_->shape[0], node_->shape[1]);
}

Tensor& Tensor::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

Buffer Tensor::grad() const {
  if (node_->grad.size() == node_->value.size()) return node_->grad;
  return Buffer::Zero(node_->value.size());
}

void Tensor::zero_grad() { node_->grad.resize(0); }

void Tensor::backward() const {
  if (numel() != 1) throw ShapeError("backward: root must be a scalar, got " + shape_to_string(shape()));
  Tape::record(*this).run_backward();
}

Tensor Tensor::make_result(Shape shape, Buffer value, std::vector<Tensor> inputs,
                           std::function<void(Node&)> backward) {
  Tensor out = from_buffer(std::move(shape), std::move(value), false);
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  if (any) {
    out.node_->requires_grad = true;
    out.node_->parents.reserve(inputs.size());
    for (auto& t : inputs) out.node_->parents.push_back(t.node_);
    out.node_->backward = std::move(backward);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tape

Tape Tape::record(const Tensor& root) {
  Tape tape;
  if (!root.requires_grad()) return tape;
  std::unordered_set<const Node*> visited;
  // Iterative post-order DFS; each frame is (node, next parent index).
  std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      const auto& parent = node->parents[next++];
      if (parent->requires_grad && visited.insert(parent.get()).second) {
        stack.emplace_back(parent, 0);
      }
      continue;
    }
    tape.nodes_.push_back(node);
    stack.pop_back();
  }
  return tape;
}

void Tape::run_backward() {
  if (nodes_.empty()) return;
  auto& root = nodes_.back();
  root->grad_buffer().setConstant(1.0);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& node = **it;
    if (node.backward && node.grad.size() == node.value.size()) node.backward(node);
  }
  for (auto& node : nodes_) {
    if (node->backward) {
      node->backward = nullptr;
      node->parents.clear();
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  return Tensor::make_result(a.shape(), a.data() + b.data(), {a, b}, [](Node& self) {
    if (wants_grad(self, 0)) parent_grad(self, 0) += self.grad;
    if (wants_grad(self, 1)) parent_grad(self, 1) += self.grad;
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  return Tensor::make_result(a.shape(), a.data() - b.data(), {a, b}, [](Node& self) {
    if (wants_grad(self, 0)) parent_grad(self, 0) += self.grad;
    if (wants_grad(self, 1)) parent_grad(self, 1) -= self.grad;
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Buffer v = a.data().array() * b.data().array();
  return Tensor::make_result(a.shape(), std::move(v), {a, b}, [](Node& self) {
    if (wants_grad(self, 0))
      parent_grad(self, 0).array() += self.grad.array() * parent_value(self, 1).array();
    if (wants_grad(self, 1))
      parent_grad(self, 1).array() += self.grad.array() * parent_value(self, 0).array();
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape("div", a, b);
  Buffer v = a.data().array() / b.data().array();
  return Tensor::make_result(a.shape(), std::move(v), {a, b}, [](Node& self) {
    const auto& bv = parent_value(self, 1).array();
    if (wants_grad(self, 0)) parent_grad(self, 0).array() += self.grad.array() / bv;
    if (wants_grad(self, 1))
      parent_grad(self, 1).array() -= self.grad.array() * self.value.array() / bv;
  });
}

namespace {
thread_local PieceTrace* recording = nullptr;
thread_local const PieceTrace* replaying = nullptr;
thread_local std::size_t detach_cursor = 0;
thread_local std::size_t branch_cursor = 0;

bool tracing() { return recording != nullptr || replaying != nullptr; }
}  // namespace

PieceRecord::PieceRecord(PieceTrace& trace) {
  trace.detached.clear();
  trace.branches.clear();
  recording = &trace;
}
PieceRecord::~PieceRecord() { recording = nullptr; }

PieceReplay::PieceReplay(const PieceTrace& trace) {
  replaying = &trace;
  detach_cursor = 0;
  branch_cursor = 0;
}
PieceReplay::~PieceReplay() { replaying = nullptr; }

std::uint64_t take_branch(std::uint64_t natural) {
  if (replaying != nullptr) {
    if (branch_cursor >= replaying->branches.size())
      throw ShapeError("piece replay: more branches than were recorded");
    return replaying->branches[branch_cursor++];
  }
  if (recording != nullptr) recording->branches.push_back(natural);
  return natural;
}

Tensor detach(const Tensor& x) {
  if (replaying != nullptr) {
    if (detach_cursor >= replaying->detached.size() || replaying->detached[detach_cursor].size() != x.numel())
      throw ShapeError("piece replay: detach " + std::to_string(detach_cursor) + " does not match the recording");
    return Tensor::from_buffer(x.shape(), replaying->detached[detach_cursor++], false);
  }
  if (recording != nullptr) recording->detached.push_back(x.data());
  return Tensor::from_buffer(x.shape(), x.data(), false);
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  require_same_shape("maximum", a, b);
  Buffer v = a.data().array().max(b.data().array());
  if (tracing())
    for (Index i = 0; i < v.size(); ++i) v[i] = take_branch(a.data()[i] >= b.data()[i]) ? a.data()[i] : b.data()[i];
  return Tensor::make_result(a.shape(), std::move(v), {a, b}, [](Node& self) {
    const auto& av = parent_value(self, 0);
    const auto& bv = parent_value(self, 1);
    for (Index i = 0; i < self.grad.size(); ++i) {
      const std::size_t winner = av[i] >= bv[i] ? 0 : 1;
      if (wants_grad(self, winner)) parent_grad(self, winner)[i] += self.grad[i];
    }
  });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  require_same_shape("minimum", a, b);
  Buffer v = a.data().array().min(b.data().array());
  if (tracing())
    for (Index i = 0; i < v.size(); ++i) v[i] = take_branch(a.data()[i] <= b.data()[i]) ? a.data()[i] : b.data()[i];
  return Tensor::make_result(a.shape(), std::move(v), {a, b}, [](Node& self) {
    const auto& av = parent_value(self, 0);
    const auto& bv = parent_value(self, 1);
    for (Index i = 0; i < self.grad.size(); ++i) {
      const std::size_t winner = av[i] <= bv[i] ? 0 : 1;
      if (wants_grad(self, winner)) parent_grad(self, winner)[i] += self.grad[i];
    }
  });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor scale(const Tensor& x, double s) {
  return Tensor::make_result(x.shape(), x.data() * s, {x}, [s](Node& self) {
    parent_grad(self, 0) += self.grad * s;
  });
}

Tensor add_scalar(const Tensor& x, double s) {
  Buffer v = x.data().array() + s;
  return Tensor::make_result(x.shape(), std::move(v), {x},
                             [](Node& self) { parent_grad(self, 0) += self.grad; });
}

Tensor exp(const Tensor& x) {
  Buffer v = x.data().array().exp();
  return Tensor::make_result(x.shape(), std::move(v), {x}, [](Node& self) {
    parent_grad(self, 0).array() += self.grad.array() * self.value.array();
  });
}

Tensor sin(const Tensor& x) {
  Buffer v = x.data().array().sin();
  return Tensor::make_result(x.shape(), std::move(v), {x}, [](Node& self) {
    parent_grad(self, 0).array() += self.grad.array() * parent_value(self, 0).array().cos();
  });
}

Tensor cos(const Tensor& x) {
  Buffer v = x.data().array().cos();
  return Tensor::make_result(x.shape(), std::move(v), {x}, [](Node& self) {
    parent_grad(self, 0).array() -= self.grad.array() * parent_value(self, 0).array().sin();
  });
}

Tensor log(const Tensor& x) {
  Buffer v = x.data().array().log();
  return Tensor::make_result(x.shape(), std::move(v), {x}, [](Node& self) {
    parent_grad(self, 0).array() += self.grad.array() / parent_value(self, 0).array();
  });
}

Tensor pow(const Tensor& x, double exponent) {
  Buffer v = x.data().array().pow(exponent);
  return Tensor::make_result(x.shape(), std::move(v), {x}, [exponent](Node& self) {
    if (exponent == 0.0) return;
    const auto& xv = parent_value(self, 0).array();
    parent_grad(self, 0).array() += self.grad.array() * exponent * xv.pow(exponent - 1.0);
  });
}

Tensor sqrt(const Tensor& x) {
  Buffer v = x.data().array().sqrt();
  return Tensor::make_result(x.shape(), std::move(v), {x}, [](Node& self) {
    parent_grad(self, 0).array() += self.grad.array() * 0.5 / self.value.array();
  });
}

Tensor abs(const Tensor& x) {
  Buffer v = x.data().array().abs();
  if (tracing())
    for (Index i = 0; i < v.size(); ++i) v[i] = take_branch(x.data()[i] < 0) ? -x.data()[i] : x.data()[i];
  return Tensor::make_result(x.shape(), std::move(v), {x}, [](Node& self) {
    const auto& xv = parent_value(self, 0);
    auto& g = parent_grad(self, 0);
    for (Index i = 0; i < g.size(); ++i) {
      if (xv[i] > 0) g[i] += self.grad[i];
      else if (xv[i] < 0) g[i] -= self.grad[i];
    }
  });
}

Tensor relu(const Tensor& x) {
  Buffer v = x.data().array().max(0.0);
  if (tracing())
    for (Index i = 0; i < v.size(); ++i) v[i] = take_branch(x.data()[i] > 0) ? x.data()[i] : 0.0;
  return Tensor::make_result(x.shape(), std::move(v), {x}, [](Node& self) {
    const auto& xv = parent_value(self, 0);
    auto& g = parent_grad(self, 0);
    for (Index i = 0; i < g.size(); ++i)
      if (xv[i] > 0) g[i] += self.grad[i];
  });
}

Tensor sigmoid(const Tensor& x) {
  Buffer v = (1.0 + (-x.data().array()).exp()).inverse();
  return Tensor::make_result(x.shape(), std::move(v), {x}, [](Node& self) {
    const auto& y = self.value.array();
    parent_grad(self, 0).array() += self.grad.array() * y * (1.0 - y);
  });
}

Tensor inverse_sigmoid(const Tensor& p, double eps) {
  Buffer c = p.data().array().max(eps).min(1.0 - eps);
  if (tracing())
    for (Index i = 0; i < c.size(); ++i) {
      const double q = p.data()[i];
      const auto region = take_branch(q < eps ? 1 : q > 1.0 - eps ? 2 : 0);
      c[i] = region == 1 ? eps : region == 2 ? 1.0 - eps : q;
    }
  Buffer v = (c.array() / (1.0 - c.array())).log();
  return Tensor::make_result(p.shape(), std::move(v), {p}, [eps](Node& self) {
    const auto& pv = parent_value(self, 0);
    auto& g = parent_grad(self, 0);
    for (Index i = 0; i < g.size(); ++i) {
      const double q = pv[i];
      if (q > eps && q < 1.0 - eps) g[i] += self.grad[i] / (q * (1.0 - q));
    }
  });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  Buffer v = x.data().array().max(lo).min(hi);
  if (tracing())
    for (Index i = 0; i < v.size(); ++i) {
      const double q = x.data()[i];
      const auto region = take_branch(q < lo ? 1 : q > hi ? 2 : 0);
      v[i] = region == 1 ? lo : region == 2 ? hi : q;
    }
  return Tensor::make_result(x.shape(), std::move(v), {x}, [lo, hi](Node& self) {
    const auto& xv = parent_value(self, 0);
    auto& g = parent_grad(self, 0);
    for (Index i = 0; i < g.size(); ++i)
      if (xv[i] >= lo && xv[i] <= hi) g[i] += self.grad[i];
  });
}


// ---------------------------------------------------------------------------
// Linear algebra and reductions

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: dimension mismatch " + shape_to_string(a.shape()) + " x " +
                     shape_to_string(b.shape()));
  }
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Buffer v(m * n);
  as_matrix(v, m, n).noalias() = a.mat() * b.mat();
  return Tensor::make_result({m, n}, std::move(v), {a, b}, [m, k, n](Node& self) {
    const auto g = as_matrix(self.grad, m, n);
    if (wants_grad(self, 0))
      as_matrix(parent_grad(self, 0), m, k).noalias() +=
          g * as_matrix(parent_value(self, 1), k, n).transpose();
    if (wants_grad(self, 1))
      as_matrix(parent_grad(self, 1), k, n).noalias() +=
          as_matrix(parent_value(self, 0), m, k).transpose() * g;
  });
}

Tensor transpose(const Tensor& x) {
  require_rank("transpose", x, 2);
  const Index r = x.dim(0), c = x.dim(1);
  Buffer v(r * c);
  as_matrix(v, c, r) = x.mat().transpose();
  return Tensor::make_result({c, r}, std::move(v), {x}, [r, c](Node& self) {
    as_matrix(parent_grad(self, 0), r, c) += as_matrix(self.grad, c, r).transpose();
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank("add_bias", x, 2);
  if (bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
    throw ShapeError("add_bias: bias " + shape_to_string(bias.shape()) + " does not match rows of " +
                     shape_to_string(x.shape()));
  }
  const Index r = x.dim(0), c = x.dim(1);
  Buffer v = x.data();
  as_matrix(v, r, c).rowwise() += bias.data().transpose();
  return Tensor::make_result(x.shape(), std::move(v), {x, bias}, [r, c](Node& self) {
    if (wants_grad(self, 0)) parent_grad(self, 0) += self.grad;
    if (wants_grad(self, 1))
      parent_grad(self, 1) += as_matrix(self.grad, r, c).colwise().sum().transpose();
  });
}

Tensor sum(const Tensor& x) {
  return Tensor::make_result({}, Buffer::Constant(1, x.data().sum()), {x}, [](Node& self) {
    parent_grad(self, 0).array() += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  const Index n = x.numel();
  if (n == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Tensor sum(const Tensor& x, Index axis) {
  axis = normalize_axis("sum", x, axis);
  const AxisSplit s = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + axis);
  Buffer v = Buffer::Zero(s.outer * s.inner);
  const Buffer& xv = x.data();
  for (Index o = 0; o < s.outer; ++o)
    for (Index k = 0; k < s.n; ++k)
      for (Index i = 0; i < s.inner; ++i) v[o * s.inner + i] += xv[(o * s.n + k) * s.inner + i];
  return Tensor::make_result(std::move(out_shape), std::move(v), {x}, [s](Node& self) {
    auto& g = parent_grad(self, 0);
    for (Index o = 0; o < s.outer; ++o)
      for (Index k = 0; k < s.n; ++k)
        for (Index i = 0; i < s.inner; ++i) g[(o * s.n + k) * s.inner + i] += self.grad[o * s.inner + i];
  });
}

Tensor mean(const Tensor& x, Index axis) {
  const Index n = x.dim(axis);
  if (n == 0) throw ShapeError("mean: empty axis in " + shape_to_string(x.shape()));
  return scale(sum(x, axis), 1.0 / static_cast<double>(n));
}

Tensor softmax(const Tensor& x, Index axis) {
  axis = normalize_axis("softmax", x, axis);
  const AxisSplit s = split_at(x.shape(), axis);
  const Buffer& xv = x.data();
  Buffer v(xv.size());
  for (Index o = 0; o < s.outer; ++o) {
    for (Index i = 0; i < s.inner; ++i) {
      auto at = [&](Index k) { return (o * s.n + k) * s.inner + i; };
      double m = -std::numeric_limits<double>::infinity();
      for (Index k = 0; k < s.n; ++k) m = std::max(m, xv[at(k)]);
      double z = 0.0;
      for (Index k = 0; k < s.n; ++k) {
        v[at(k)] = std::exp(xv[at(k)] - m);
        z += v[at(k)];
      }
      for (Index k = 0; k < s.n; ++k) v[at(k)] /= z;
    }
  }
  return Tensor::make_result(x.shape(), std::move(v), {x}, [s](Node& self) {
    auto& g = parent_grad(self, 0);
    const Buffer& y = self.value;
    for (Index o = 0; o < s.outer; ++o) {
      for (Index i = 0; i < s.inner; ++i) {
        auto at = [&](Index k) { return (o * s.n + k) * s.inner + i; };
        double dot = 0.0;
        for (Index k = 0; k < s.n; ++k) dot += self.grad[at(k)] * y[at(k)];
        for (Index k = 0; k < s.n; ++k) g[at(k)] += y[at(k)] * (self.grad[at(k)] - dot);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Structural

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_to_string(x.shape()) + " as " +
                     shape_to_string(shape));
  }
  return Tensor::make_result(std::move(shape), x.data(), {x},
                             [](Node& self) { parent_grad(self, 0) += self.grad; });
}

Tensor concat(std::initializer_list<Tensor> parts, Index axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor concat(std::span<const Tensor> parts, Index axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  axis = normalize_axis("concat", parts.front(), axis);
  Shape out_shape = parts.front().shape();
  Index total = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = out_shape;
    if (a.size() != b.size()) throw ShapeError("concat: rank mismatch " + shape_to_string(a) + " vs " + shape_to_string(b));
    a[axis] = b[axis] = 0;
    if (a != b) throw ShapeError("concat: shape mismatch " + shape_to_string(p.shape()) + " vs " + shape_to_string(out_shape));
    total += p.dim(axis);
  }
  out_shape[axis] = total;
  const AxisSplit s = split_at(out_shape, axis);
  std::vector<Index> widths;
  Buffer v(shape_numel(out_shape));
  Index offset = 0;
  for (const auto& p : parts) {
    const Index w = p.dim(axis);
    widths.push_back(w);
    for (Index o = 0; o < s.outer; ++o)
      v.segment((o * total + offset) * s.inner, w * s.inner) = p.data().segment(o * w * s.inner, w * s.inner);
    offset += w;
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return Tensor::make_result(std::move(out_shape), std::move(v), std::move(inputs),
                             [s, total, widths](Node& self) {
                               Index off = 0;
                               for (std::size_t j = 0; j < widths.size(); ++j) {
                                 const Index w = widths[j];
                                 if (wants_grad(self, j)) {
                                   auto& g = parent_grad(self, j);
                                   for (Index o = 0; o < s.outer; ++o)
                                     g.segment(o * w * s.inner, w * s.inner) +=
                                         self.grad.segment((o * total + off) * s.inner, w * s.inner);
                                 }
                                 off += w;
                               }
                             });
}

Tensor slice(const Tensor& x, Index axis, Index begin, Index end) {
  axis = normalize_axis("slice", x, axis);
  const Index n = x.dim(axis);
  if (begin < 0 || end > n || begin > end) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of bounds for " + shape_to_string(x.shape()));
  }
  const AxisSplit s = split_at(x.shape(), axis);
  const Index w = end - begin;
  Shape out_shape = x.shape();
  out_shape[axis] = w;
  Buffer v(s.outer * w * s.inner);
  for (Index o = 0; o < s.outer; ++o)
    v.segment(o * w * s.inner, w * s.inner) = x.data().segment((o * n + begin) * s.inner, w * s.inner);
  return Tensor::make_result(std::move(out_shape), std::move(v), {x}, [s, w, begin](Node& self) {
    auto& g = parent_grad(self, 0);
    for (Index o = 0; o < s.outer; ++o)
      g.segment((o * s.n + begin) * s.inner, w * s.inner) += self.grad.segment(o * w * s.inner, w * s.inner);
  });
}

Tensor gather(const Tensor& x, std::span<const Index> indices) {
  if (x.rank() < 1) throw ShapeError("gather: scalar input");
  const Index rows = x.dim(0);
  const Index row = rows == 0 ? 0 : x.numel() / rows;
  std::vector<Index> idx(indices.begin(), indices.end());
  for (Index i : idx)
    if (i < 0 || i >= rows)
      throw ShapeError("gather: index " + std::to_string(i) + " out of range for " + shape_to_string(x.shape()));
  Shape out_shape = x.shape();
  out_shape[0] = static_cast<Index>(idx.size());
  Buffer v(static_cast<Index>(idx.size()) * row);
  for (std::size_t j = 0; j < idx.size(); ++j) v.segment(static_cast<Index>(j) * row, row) = x.data().segment(idx[j] * row, row);
  return Tensor::make_result(std::move(out_shape), std::move(v), {x}, [idx, row](Node& self) {
    auto& g = parent_grad(self, 0);
    for (std::size_t j = 0; j < idx.size(); ++j)
      g.segment(idx[j] * row, row) += self.grad.segment(static_cast<Index>(j) * row, row);
  });
}

// ---------------------------------------------------------------------------
// Network primitives

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank("layer_norm", x, 2);
  const Index n = x.dim(0), d = x.dim(1);
  if (gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("layer_norm: affine parameters do not match " + shape_to_string(x.shape()));
  }
  auto xm = x.mat();
  RowMatrix xhat(n, d);
  Eigen::VectorXd inv_std(n);
  for (Index r = 0; r < n; ++r) {
    const double mu = xm.row(r).mean();
    const double var = (xm.row(r).array() - mu).square().mean();
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xm.row(r).array() - mu) * inv_std[r];
  }
  Buffer v(n * d);
  as_matrix(v, n, d) = (xhat.array().rowwise() * gamma.data().transpose().array()).rowwise() +
                       beta.data().transpose().array();
  return Tensor::make_result(x.shape(), std::move(v), {x, gamma, beta},
                             [n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                               const auto g = as_matrix(self.grad, n, d);
                               if (wants_grad(self, 1))
                                 parent_grad(self, 1) += (g.array() * xhat.array()).colwise().sum().transpose().matrix();
                               if (wants_grad(self, 2)) parent_grad(self, 2) += g.colwise().sum().transpose();
                               if (wants_grad(self, 0)) {
                                 const auto& gam = parent_value(self, 1);
                                 auto gx = as_matrix(parent_grad(self, 0), n, d);
                                 for (Index r = 0; r < n; ++r) {
                                   Eigen::ArrayXd gy = g.row(r).transpose().array() * gam.array();
                                   Eigen::ArrayXd xh = xhat.row(r).transpose().array();
                                   const double m1 = gy.mean();
                                   const double m2 = (gy * xh).mean();
                                   gx.row(r) += (inv_std[r] * (gy - m1 - xh * m2)).matrix().transpose();
                                 }
                               }
                             });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Index kernel, Index stride,
              Index padding) {
  require_rank("conv2d", x, 3);
  require_rank("conv2d", weight, 2);
  const Index h = x.dim(0), w = x.dim(1), cin = x.dim(2);
  const Index cout = weight.dim(1);
  if (weight.dim(0) != kernel * kernel * cin || bias.numel() != cout) {
    throw ShapeError("conv2d: weights " + shape_to_string(weight.shape()) + " / bias " +
                     shape_to_string(bias.shape()) + " incompatible with input " + shape_to_string(x.shape()));
  }
  const Index ho = (h + 2 * padding - kernel) / stride + 1;
  const Index wo = (w + 2 * padding - kernel) / stride + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: input " + shape_to_string(x.shape()) + " too small");
  const Index kk = kernel * kernel * cin;
  RowMatrix cols = RowMatrix::Zero(ho * wo, kk);
  const Buffer& xv = x.data();
  for (Index oy = 0; oy < ho; ++oy)
    for (Index ox = 0; ox < wo; ++ox)
      for (Index ky = 0; ky < kernel; ++ky) {
        const Index iy = oy * stride + ky - padding;
        if (iy < 0 || iy >= h) continue;
        for (Index kx = 0; kx < kernel; ++kx) {
          const Index ix = ox * stride + kx - padding;
          if (ix < 0 || ix >= w) continue;
          cols.row(oy * wo + ox).segment((ky * kernel + kx) * cin, cin) =
              xv.segment((iy * w + ix) * cin, cin).transpose();
        }
      }
  Buffer v(ho * wo * cout);
  auto out = as_matrix(v, ho * wo, cout);
  out.noalias() = cols * weight.mat();
  out.rowwise() += bias.data().transpose();
  return Tensor::make_result(
      {ho, wo, cout}, std::move(v), {x, weight, bias},
      [=, cols = std::move(cols)](Node& self) {
        const auto g = as_matrix(self.grad, ho * wo, cout);
        if (wants_grad(self, 1)) as_matrix(parent_grad(self, 1), kk, cout).noalias() += cols.transpose() * g;
        if (wants_grad(self, 2)) parent_grad(self, 2) += g.colwise().sum().transpose();
        if (wants_grad(self, 0)) {
          RowMatrix gcols = g * as_matrix(parent_value(self, 1), kk, cout).transpose();
          auto& gx = parent_grad(self, 0);
          for (Index oy = 0; oy < ho; ++oy)
            for (Index ox = 0; ox < wo; ++ox)
              for (Index ky = 0; ky < kernel; ++ky) {
                const Index iy = oy * stride + ky - padding;
                if (iy < 0 || iy >= h) continue;
                for (Index kx = 0; kx < kernel; ++kx) {
                  const Index ix = ox * stride + kx - padding;
                  if (ix < 0 || ix >= w) continue;
                  gx.segment((iy * w + ix) * cin, cin) +=
                      gcols.row(oy * wo + ox).segment((ky * kernel + kx) * cin, cin).transpose();
                }
              }
        }
      });
}

namespace {

struct Corner {
  Index row;  // value row, -1 when outside the map
  double weight;
  double dx;  // d weight / d pixel x
  double dy;
};

// Bilinear corners at normalized (lx, ly) for a map of extent (h, w) whose
// rows start at `start`. Pixel centers sit at (i + 0.5) / extent.
std::array<Corner, 4> bilinear_corners(double lx, double ly, Index h, Index w, Index start) {
  std::array<Corner, 4> c{};
  for (auto& k : c) k.row = -1;
  const double x = lx * static_cast<double>(w) - 0.5;
  const double y = ly * static_cast<double>(h) - 0.5;
  const bool inside = x > -1.0 && x < static_cast<double>(w) && y > -1.0 && y < static_cast<double>(h);
  double fx = inside ? std::floor(x) : 0.0, fy = inside ? std::floor(y) : 0.0;
  if (tracing()) {
    // Cell (fx, fy) in [-1, 2^20) packed with the inside flag.
    constexpr std::uint64_t kOutside = ~0ULL;
    const auto cell = take_branch(inside ? static_cast<std::uint64_t>((fx + 1) * 1048576 + (fy + 1)) : kOutside);
    if (cell == kOutside) return c;
    fx = static_cast<double>(cell / 1048576) - 1;
    fy = static_cast<double>(cell % 1048576) - 1;
  } else if (!inside) {
    return c;
  }
  const double ax = x - fx, ay = y - fy;
  const Index x0 = static_cast<Index>(fx), y0 = static_cast<Index>(fy);
  const Index xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const Index ys[4] = {y0, y0, y0 + 1, y0 + 1};
  const double ws[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
  const double dxs[4] = {-(1 - ay), (1 - ay), -ay, ay};
  const double dys[4] = {-(1 - ax), -ax, (1 - ax), ax};
  for (int i = 0; i < 4; ++i) {
    if (xs[i] < 0 || xs[i] >= w || ys[i] < 0 || ys[i] >= h) continue;
    c[i] = Corner{start + ys[i] * w + xs[i], ws[i], dxs[i], dys[i]};
  }
  return c;
}

}  // namespace

Tensor ms_deform_sample(const Tensor& value, std::span<const LevelShape> levels_in,
                        const Tensor& locations, const Tensor& weights, Index heads, Index points) {
  require_rank("ms_deform_sample", value, 2);
  require_rank("ms_deform_sample", locations, 2);
  require_rank("ms_deform_sample", weights, 2);
  std::vector<LevelShape> levels(levels_in.begin(), levels_in.end());
  const Index nl = static_cast<Index>(levels.size());
  const Index q = locations.dim(0);
  const Index channels = value.dim(1);
  std::vector<Index> starts;
  Index total = 0;
  for (const auto& l : levels) {
    starts.push_back(total);
    total += l.height * l.width;
  }
  if (heads <= 0 || channels % heads != 0 || value.dim(0) != total ||
      locations.dim(1) != heads * nl * points * 2 || weights.dim(0) != q ||
      weights.dim(1) != heads * nl * points) {
    throw ShapeError("ms_deform_sample: value " + shape_to_string(value.shape()) + ", locations " +
                     shape_to_string(locations.shape()) + ", weights " + shape_to_string(weights.shape()) +
                     " inconsistent with " + std::to_string(heads) + " heads, " + std::to_string(nl) +
                     " levels, " + std::to_string(points) + " points");
  }
  const Index dh = channels / heads;
  const auto vm = value.mat();
  const auto lm = locations.mat();
  const auto wm = weights.mat();
  Buffer out = Buffer::Zero(q * channels);
  auto om = as_matrix(out, q, channels);
  for (Index qi = 0; qi < q; ++qi)
    for (Index h = 0; h < heads; ++h)
      for (Index l = 0; l < nl; ++l)
        for (Index p = 0; p < points; ++p) {
          const Index s = (h * nl + l) * points + p;
          const double aw = wm(qi, s);
          const auto corners = bilinear_corners(lm(qi, 2 * s), lm(qi, 2 * s + 1), levels[l].height,
                                                levels[l].width, starts[l]);
          for (const auto& c : corners) {
            if (c.row < 0) continue;
            om.row(qi).segment(h * dh, dh) += (aw * c.weight) * vm.row(c.row).segment(h * dh, dh);
          }
        }
  return Tensor::make_result(
      {q, channels}, std::move(out), {value, locations, weights},
      [=, levels = std::move(levels), starts = std::move(starts)](Node& self) {
        const auto g = as_matrix(self.grad, q, channels);
        const auto vv = as_matrix(parent_value(self, 0), total, channels);
        const auto lv = as_matrix(parent_value(self, 1), q, heads * nl * points * 2);
        const auto wv = as_matrix(parent_value(self, 2), q, heads * nl * points);
        const bool gv = wants_grad(self, 0), gl = wants_grad(self, 1), gw = wants_grad(self, 2);
        Buffer* gvb = gv ? &parent_grad(self, 0) : nullptr;
        Buffer* glb = gl ? &parent_grad(self, 1) : nullptr;
        Buffer* gwb = gw ? &parent_grad(self, 2) : nullptr;
        for (Index qi = 0; qi < q; ++qi)
          for (Index h = 0; h < heads; ++h)
            for (Index l = 0; l < nl; ++l)
              for (Index p = 0; p < points; ++p) {
                const Index s = (h * nl + l) * points + p;
                const double aw = wv(qi, s);
                const auto corners = bilinear_corners(lv(qi, 2 * s), lv(qi, 2 * s + 1), levels[l].height,
                                                      levels[l].width, starts[l]);
                const auto gseg = g.row(qi).segment(h * dh, dh);
                double d_w = 0.0, d_x = 0.0, d_y = 0.0;
                for (const auto& c : corners) {
                  if (c.row < 0) continue;
                  const double proj = gseg.dot(vv.row(c.row).segment(h * dh, dh));
                  d_w += c.weight * proj;
                  d_x += c.dx * proj;
                  d_y += c.dy * proj;
                  if (gv) {
                    as_matrix(*gvb, total, channels).row(c.row).segment(h * dh, dh) += (aw * c.weight) * gseg;
                  }
                }
                if (gw) (*gwb)[qi * heads * nl * points + s] += d_w;
                if (gl) {
                  (*glb)[qi * heads * nl * points * 2 + 2 * s] += aw * d_x * static_cast<double>(levels[l].width);
                  (*glb)[qi * heads * nl * points * 2 + 2 * s + 1] += aw * d_y * static_cast<double>(levels[l].height);
                }
              }
      });
}

Tensor bilinear_sample(const Tensor& map, const Tensor& locations) {
  require_rank("bilinear_sample", map, 3);
  if (locations.rank() != 2 || locations.dim(1) != 2) {
    throw ShapeError("bilinear_sample: locations must be [N, 2], got " + shape_to_string(locations.shape()));
  }
  const LevelShape level{map.dim(0), map.dim(1)};
  const Tensor value = reshape(map, {map.dim(0) * map.dim(1), map.dim(2)});
  const Tensor ones = Tensor::full({locations.dim(0), 1}, 1.0);
  return ms_deform_sample(value, std::span<const LevelShape>(&level, 1), locations, ones, 1, 1);
}

}  // namespace dino
