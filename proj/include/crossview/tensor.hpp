#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// A Tensor<Scalar> is a shared handle to a node holding a flat row-major
// value buffer plus a shape. Ops are free functions that produce new nodes;
// when gradients are enabled and any input requires them, the op records its
// inputs and a backward closure. backward(loss) replays the recorded graph
// in reverse topological order and accumulates gradients into every node
// that requires them. Values are never mutated once an op has produced them
// (parameters are updated between passes), so forward evaluation of a frozen
// graph is safe from many threads.

#include <Eigen/Core>

#include <atomic>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "crossview/rng.hpp"

namespace crossview {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename S>
using ArrayX = Eigen::Array<S, Eigen::Dynamic, 1>;
template <typename S>
using MatrixRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapMat = Eigen::Map<MatrixRM<S>>;
template <typename S>
using MapConstMat = Eigen::Map<const MatrixRM<S>>;

inline Index numel(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {
inline std::string msg(const char* fmt, ...) {
  char buf[512];
  va_list args;
  va_start(args, fmt);
  std::vsnprintf(buf, sizeof(buf), fmt, args);
  va_end(args);
  return std::string(buf);
}
}  // namespace detail

/// Thread-local switch: with gradients disabled, ops keep no inputs and no
/// backward closures, so inference builds no graph.
struct GradMode {
  static bool& enabled() {
    thread_local bool on = true;
    return on;
  }
};

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(GradMode::enabled()) { GradMode::enabled() = false; }
  ~NoGradGuard() { GradMode::enabled() = prev; }
};

template <typename Scalar>
struct TensorNode {
  Shape shape;
  ArrayX<Scalar> value;
  ArrayX<Scalar> grad;  // empty until a backward pass touches this node
  bool requires_grad = false;
  bool is_leaf = true;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<TensorNode>> inputs;
  std::function<void(TensorNode&)> backward_op;

  static std::uint64_t fresh_id() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
  }
  void ensure_grad() {
    if (grad.size() != value.size()) grad = ArrayX<Scalar>::Zero(value.size());
  }
};

template <typename Scalar>
class Tensor {
 public:
  using Node = TensorNode<Scalar>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor from_array(Shape shape, ArrayX<Scalar> data, bool requires_grad = false) {
    if (numel(shape) != data.size())
      throw std::invalid_argument(detail::msg(
          "tensor: shape %s does not match %lld values", shape_str(shape).c_str(),
          static_cast<long long>(data.size())));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    n->id = Node::fresh_id();
    return Tensor(std::move(n));
  }

  static Tensor from_data(Shape shape, const std::vector<Scalar>& data,
                          bool requires_grad = false) {
    ArrayX<Scalar> a(static_cast<Index>(data.size()));
    for (Index i = 0; i < a.size(); ++i) a[i] = data[static_cast<std::size_t>(i)];
    return from_array(std::move(shape), std::move(a), requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return from_array(shape, ArrayX<Scalar>::Zero(numel(shape)), requires_grad);
  }
  static Tensor ones(Shape shape, bool requires_grad = false) {
    return from_array(shape, ArrayX<Scalar>::Ones(numel(shape)), requires_grad);
  }
  static Tensor constant(Shape shape, Scalar v, bool requires_grad = false) {
    return from_array(shape, ArrayX<Scalar>::Constant(numel(shape), v), requires_grad);
  }
  /// Draws in double then casts, so float and double builds see the same
  /// underlying sample sequence.
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi,
                        bool requires_grad = false) {
    ArrayX<Scalar> a(numel(shape));
    for (Index i = 0; i < a.size(); ++i)
      a[i] = static_cast<Scalar>(rng.uniform(lo, hi));
    return from_array(std::move(shape), std::move(a), requires_grad);
  }
  static Tensor normal(Shape shape, Rng& rng, double mean = 0.0, double stddev = 1.0,
                       bool requires_grad = false) {
    ArrayX<Scalar> a(numel(shape));
    for (Index i = 0; i < a.size(); ++i)
      a[i] = static_cast<Scalar>(mean + stddev * rng.normal());
    return from_array(std::move(shape), std::move(a), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index size() const { return node_->value.size(); }
  Index dim(Index i) const { return node_->shape[static_cast<std::size_t>(i)]; }

  const ArrayX<Scalar>& values() const { return node_->value; }
  /// Mutable access for leaves (parameter updates, buffer writes). Mutating a
  /// non-leaf would invalidate recorded closures, so it is rejected.
  ArrayX<Scalar>& values_mut() {
    if (!node_->is_leaf)
      throw std::logic_error("tensor: only leaf values may be mutated in place");
    return node_->value;
  }

  Scalar item() const {
    if (size() != 1)
      throw std::invalid_argument(detail::msg("tensor: item() on shape %s",
                                              shape_str(shape()).c_str()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) {
    if (!node_->is_leaf) throw std::logic_error("tensor: requires_grad is leaf-only");
    node_->requires_grad = b;
  }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  const ArrayX<Scalar>& grad() const {
    if (!has_grad()) throw std::logic_error("tensor: gradient not populated");
    return node_->grad;
  }
  ArrayX<Scalar>& grad_mut() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    node_->ensure_grad();
    node_->grad.setZero();
  }

  /// Rank-2 view of the flat buffer.
  MapConstMat<Scalar> mat() const {
    if (rank() != 2)
      throw std::invalid_argument(detail::msg("tensor: mat() on shape %s",
                                              shape_str(shape()).c_str()));
    return MapConstMat<Scalar>(node_->value.data(), dim(0), dim(1));
  }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

template <typename Scalar>
Tensor<Scalar> make_op(Shape shape, ArrayX<Scalar> value,
                       std::vector<Tensor<Scalar>> inputs,
                       std::function<void(TensorNode<Scalar>&)> backward_op) {
  auto n = std::make_shared<TensorNode<Scalar>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->is_leaf = false;
  n->id = TensorNode<Scalar>::fresh_id();
  bool track = false;
  if (GradMode::enabled()) {
    for (const auto& t : inputs)
      if (t.node()->requires_grad) {
        track = true;
        break;
      }
  }
  if (track) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (auto& t : inputs) n->inputs.push_back(t.node());
    n->backward_op = std::move(backward_op);
  }
  return Tensor<Scalar>(std::move(n));
}

template <typename Scalar>
void check_same_shape(const char* op, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(msg("%s: shape mismatch %s vs %s", op,
                                    shape_str(a.shape()).c_str(),
                                    shape_str(b.shape()).c_str()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Graph replay

/// Reverse topological ordering of every node reachable from one output.
/// Node ids increase monotonically with creation and inputs are always
/// created before their consumers, so descending-id order is a valid
/// (and deterministic) reverse topological order.
template <typename Scalar>
class ComputeGraph {
 public:
  explicit ComputeGraph(const Tensor<Scalar>& output) : output_(output.node()) {
    std::unordered_set<const TensorNode<Scalar>*> seen;
    std::vector<std::shared_ptr<TensorNode<Scalar>>> stack{output_};
    seen.insert(output_.get());
    while (!stack.empty()) {
      auto n = stack.back();
      stack.pop_back();
      ordered_.push_back(n);
      for (const auto& in : n->inputs)
        if (seen.insert(in.get()).second) stack.push_back(in);
    }
    std::sort(ordered_.begin(), ordered_.end(),
              [](const auto& a, const auto& b) { return a->id > b->id; });
  }

  std::size_t size() const { return ordered_.size(); }

  /// Seeds d(output) = 1 and accumulates into every requires_grad node.
  /// Repeated calls without zero_grad keep accumulating.
  void backward() {
    if (output_->value.size() != 1)
      throw std::invalid_argument(detail::msg("backward: loss must be scalar, got %s",
                                              shape_str(output_->shape).c_str()));
    output_->ensure_grad();
    output_->grad[0] += Scalar(1);
    for (const auto& n : ordered_) {
      if (!n->backward_op) continue;
      if (n->grad.size() != n->value.size()) continue;  // no contribution reached it
      n->backward_op(*n);
    }
  }

 private:
  std::shared_ptr<TensorNode<Scalar>> output_;
  std::vector<std::shared_ptr<TensorNode<Scalar>>> ordered_;
};

template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  ComputeGraph<Scalar>(loss).backward();
}

// ---------------------------------------------------------------------------
// Elementwise ops

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::check_same_shape("add", a, b);
  ArrayX<Scalar> v = a.values() + b.values();
  return detail::make_op<Scalar>(a.shape(), std::move(v), {a, b},
                                 [](TensorNode<Scalar>& self) {
                                   for (int i = 0; i < 2; ++i)
                                     if (self.inputs[i]->requires_grad) {
                                       self.inputs[i]->ensure_grad();
                                       self.inputs[i]->grad += self.grad;
                                     }
                                 });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::check_same_shape("sub", a, b);
  ArrayX<Scalar> v = a.values() - b.values();
  return detail::make_op<Scalar>(a.shape(), std::move(v), {a, b},
                                 [](TensorNode<Scalar>& self) {
                                   if (self.inputs[0]->requires_grad) {
                                     self.inputs[0]->ensure_grad();
                                     self.inputs[0]->grad += self.grad;
                                   }
                                   if (self.inputs[1]->requires_grad) {
                                     self.inputs[1]->ensure_grad();
                                     self.inputs[1]->grad -= self.grad;
                                   }
                                 });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::check_same_shape("mul", a, b);
  ArrayX<Scalar> v = a.values() * b.values();
  return detail::make_op<Scalar>(a.shape(), std::move(v), {a, b},
                                 [](TensorNode<Scalar>& self) {
                                   if (self.inputs[0]->requires_grad) {
                                     self.inputs[0]->ensure_grad();
                                     self.inputs[0]->grad += self.grad * self.inputs[1]->value;
                                   }
                                   if (self.inputs[1]->requires_grad) {
                                     self.inputs[1]->ensure_grad();
                                     self.inputs[1]->grad += self.grad * self.inputs[0]->value;
                                   }
                                 });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar c) {
  ArrayX<Scalar> v = a.values() * c;
  return detail::make_op<Scalar>(a.shape(), std::move(v), {a},
                                 [c](TensorNode<Scalar>& self) {
                                   if (self.inputs[0]->requires_grad) {
                                     self.inputs[0]->ensure_grad();
                                     self.inputs[0]->grad += self.grad * c;
                                   }
                                 });
}

template <typename Scalar>
Tensor<Scalar> add_scalar(const Tensor<Scalar>& a, Scalar c) {
  ArrayX<Scalar> v = a.values() + c;
  return detail::make_op<Scalar>(a.shape(), std::move(v), {a},
                                 [](TensorNode<Scalar>& self) {
                                   if (self.inputs[0]->requires_grad) {
                                     self.inputs[0]->ensure_grad();
                                     self.inputs[0]->grad += self.grad;
                                   }
                                 });
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& a) {
  ArrayX<Scalar> v = a.values().max(Scalar(0));
  return detail::make_op<Scalar>(a.shape(), std::move(v), {a},
                                 [](TensorNode<Scalar>& self) {
                                   if (!self.inputs[0]->requires_grad) return;
                                   self.inputs[0]->ensure_grad();
                                   self.inputs[0]->grad +=
                                       self.grad * (self.value > Scalar(0)).template cast<Scalar>();
                                 });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a) {
  ArrayX<Scalar> v(1);
  v[0] = a.values().sum();
  return detail::make_op<Scalar>(Shape{1}, std::move(v), {a},
                                 [](TensorNode<Scalar>& self) {
                                   if (!self.inputs[0]->requires_grad) return;
                                   self.inputs[0]->ensure_grad();
                                   self.inputs[0]->grad += self.grad[0];
                                 });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& a) {
  const Scalar inv = Scalar(1) / static_cast<Scalar>(a.size());
  ArrayX<Scalar> v(1);
  v[0] = a.values().sum() * inv;
  return detail::make_op<Scalar>(Shape{1}, std::move(v), {a},
                                 [inv](TensorNode<Scalar>& self) {
                                   if (!self.inputs[0]->requires_grad) return;
                                   self.inputs[0]->ensure_grad();
                                   self.inputs[0]->grad += self.grad[0] * inv;
                                 });
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& a, Shape shape) {
  if (numel(shape) != a.size())
    throw std::invalid_argument(detail::msg("reshape: %s has %lld values, target %s",
                                            shape_str(a.shape()).c_str(),
                                            static_cast<long long>(a.size()),
                                            shape_str(shape).c_str()));
  ArrayX<Scalar> v = a.values();
  return detail::make_op<Scalar>(std::move(shape), std::move(v), {a},
                                 [](TensorNode<Scalar>& self) {
                                   if (!self.inputs[0]->requires_grad) return;
                                   self.inputs[0]->ensure_grad();
                                   self.inputs[0]->grad += self.grad;
                                 });
}

template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, Index axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  const Index rank = static_cast<Index>(s0.size());
  if (axis < 0 || axis >= rank)
    throw std::invalid_argument(detail::msg("concat: axis %lld out of range for rank %lld",
                                            static_cast<long long>(axis),
                                            static_cast<long long>(rank)));
  Index axis_total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (static_cast<Index>(s.size()) != rank)
      throw std::invalid_argument("concat: rank mismatch");
    for (Index d = 0; d < rank; ++d)
      if (d != axis && s[static_cast<std::size_t>(d)] != s0[static_cast<std::size_t>(d)])
        throw std::invalid_argument(detail::msg("concat: shape mismatch %s vs %s",
                                                shape_str(s0).c_str(), shape_str(s).c_str()));
    axis_total += s[static_cast<std::size_t>(axis)];
  }
  Shape out = s0;
  out[static_cast<std::size_t>(axis)] = axis_total;

  Index outer = 1, inner = 1;
  for (Index d = 0; d < axis; ++d) outer *= s0[static_cast<std::size_t>(d)];
  for (Index d = axis + 1; d < rank; ++d) inner *= s0[static_cast<std::size_t>(d)];

  ArrayX<Scalar> v(numel(out));
  std::vector<Index> blocks;  // per-part contiguous block length at the axis
  blocks.reserve(parts.size());
  for (const auto& p : parts)
    blocks.push_back(p.shape()[static_cast<std::size_t>(axis)] * inner);
  const Index out_stride = axis_total * inner;
  for (Index o = 0; o < outer; ++o) {
    Index off = o * out_stride;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
      const Index blk = blocks[pi];
      const Scalar* src = parts[pi].values().data() + o * blk;
      std::copy(src, src + blk, v.data() + off);
      off += blk;
    }
  }

  std::function<void(TensorNode<Scalar>&)> back =
      [outer, inner, blocks, out_stride](TensorNode<Scalar>& self) {
        for (Index o = 0; o < outer; ++o) {
          Index off = o * out_stride;
          for (std::size_t pi = 0; pi < self.inputs.size(); ++pi) {
            const Index blk = blocks[pi];
            auto& in = *self.inputs[pi];
            if (in.requires_grad) {
              in.ensure_grad();
              for (Index k = 0; k < blk; ++k) in.grad[o * blk + k] += self.grad[off + k];
            }
            off += blk;
          }
        }
      };
  (void)inner;
  return detail::make_op<Scalar>(std::move(out), std::move(v), parts, std::move(back));
}

/// out[j] = x[indices[j], :], x rank-2. Backward scatters with accumulation,
/// so repeated indices sum.
template <typename Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& x, std::vector<Index> indices) {
  if (x.rank() != 2)
    throw std::invalid_argument(detail::msg("gather_rows: need rank-2, got %s",
                                            shape_str(x.shape()).c_str()));
  const Index rows = x.dim(0), cols = x.dim(1);
  for (Index i : indices)
    if (i < 0 || i >= rows)
      throw std::invalid_argument(detail::msg("gather_rows: index %lld out of [0,%lld)",
                                              static_cast<long long>(i),
                                              static_cast<long long>(rows)));
  const Index n = static_cast<Index>(indices.size());
  ArrayX<Scalar> v(n * cols);
  for (Index j = 0; j < n; ++j) {
    const Scalar* src = x.values().data() + indices[static_cast<std::size_t>(j)] * cols;
    std::copy(src, src + cols, v.data() + j * cols);
  }
  return detail::make_op<Scalar>(
      Shape{n, cols}, std::move(v), {x},
      [indices = std::move(indices), cols](TensorNode<Scalar>& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        for (std::size_t j = 0; j < indices.size(); ++j)
          for (Index k = 0; k < cols; ++k)
            in.grad[indices[j] * cols + k] += self.grad[static_cast<Index>(j) * cols + k];
      });
}

/// [N,F] -> [N*times, F], each row repeated `times` consecutively.
template <typename Scalar>
Tensor<Scalar> repeat_rows(const Tensor<Scalar>& x, Index times) {
  if (x.rank() != 2) throw std::invalid_argument("repeat_rows: need rank-2 input");
  const Index n = x.dim(0), f = x.dim(1);
  ArrayX<Scalar> v(n * times * f);
  for (Index i = 0; i < n; ++i) {
    const Scalar* src = x.values().data() + i * f;
    for (Index t = 0; t < times; ++t)
      std::copy(src, src + f, v.data() + (i * times + t) * f);
  }
  return detail::make_op<Scalar>(Shape{n * times, f}, std::move(v), {x},
                                 [n, times, f](TensorNode<Scalar>& self) {
                                   auto& in = *self.inputs[0];
                                   if (!in.requires_grad) return;
                                   in.ensure_grad();
                                   for (Index i = 0; i < n; ++i)
                                     for (Index t = 0; t < times; ++t)
                                       for (Index k = 0; k < f; ++k)
                                         in.grad[i * f + k] +=
                                             self.grad[(i * times + t) * f + k];
                                 });
}

/// x [R*repeats, F] plus b tiled `repeats` times; b is [R,F] or a flat [F].
template <typename Scalar>
Tensor<Scalar> add_tiled_rows(const Tensor<Scalar>& x, const Tensor<Scalar>& b) {
  if (x.rank() != 2) throw std::invalid_argument("add_tiled_rows: need rank-2 input");
  const Index f = x.dim(1);
  Index brows;
  if (b.rank() == 1)
    brows = 1;
  else if (b.rank() == 2)
    brows = b.dim(0);
  else
    throw std::invalid_argument("add_tiled_rows: bias must be rank-1 or rank-2");
  if (b.size() != brows * f || x.dim(0) % brows != 0)
    throw std::invalid_argument(detail::msg("add_tiled_rows: %s does not tile into %s",
                                            shape_str(b.shape()).c_str(),
                                            shape_str(x.shape()).c_str()));
  const Index repeats = x.dim(0) / brows;
  ArrayX<Scalar> v = x.values();
  const Index blk = brows * f;
  for (Index r = 0; r < repeats; ++r)
    for (Index k = 0; k < blk; ++k) v[r * blk + k] += b.values()[k];
  return detail::make_op<Scalar>(x.shape(), std::move(v), {x, b},
                                 [repeats, blk](TensorNode<Scalar>& self) {
                                   auto& xin = *self.inputs[0];
                                   auto& bin = *self.inputs[1];
                                   if (xin.requires_grad) {
                                     xin.ensure_grad();
                                     xin.grad += self.grad;
                                   }
                                   if (bin.requires_grad) {
                                     bin.ensure_grad();
                                     for (Index r = 0; r < repeats; ++r)
                                       for (Index k = 0; k < blk; ++k)
                                         bin.grad[k] += self.grad[r * blk + k];
                                   }
                                 });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument(detail::msg("matmul: incompatible shapes %s x %s",
                                            shape_str(a.shape()).c_str(),
                                            shape_str(b.shape()).c_str()));
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  ArrayX<Scalar> v(m * n);
  MapMat<Scalar>(v.data(), m, n).noalias() =
      MapConstMat<Scalar>(a.values().data(), m, k) *
      MapConstMat<Scalar>(b.values().data(), k, n);
  return detail::make_op<Scalar>(
      Shape{m, n}, std::move(v), {a, b}, [m, k, n](TensorNode<Scalar>& self) {
        MapConstMat<Scalar> g(self.grad.data(), m, n);
        auto& an = *self.inputs[0];
        auto& bn = *self.inputs[1];
        if (an.requires_grad) {
          an.ensure_grad();
          MapMat<Scalar>(an.grad.data(), m, k).noalias() +=
              g * MapConstMat<Scalar>(bn.value.data(), k, n).transpose();
        }
        if (bn.requires_grad) {
          bn.ensure_grad();
          MapMat<Scalar>(bn.grad.data(), k, n).noalias() +=
              MapConstMat<Scalar>(an.value.data(), m, k).transpose() * g;
        }
      });
}

/// Per-item matrix product: a [N,R,C] x b [N,C,K] -> [N,R,K].
template <typename Scalar>
Tensor<Scalar> bmm(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw std::invalid_argument(detail::msg("bmm: incompatible shapes %s x %s",
                                            shape_str(a.shape()).c_str(),
                                            shape_str(b.shape()).c_str()));
  const Index n = a.dim(0), r = a.dim(1), c = a.dim(2), k = b.dim(2);
  ArrayX<Scalar> v(n * r * k);
  for (Index i = 0; i < n; ++i)
    MapMat<Scalar>(v.data() + i * r * k, r, k).noalias() =
        MapConstMat<Scalar>(a.values().data() + i * r * c, r, c) *
        MapConstMat<Scalar>(b.values().data() + i * c * k, c, k);
  return detail::make_op<Scalar>(
      Shape{n, r, k}, std::move(v), {a, b}, [n, r, c, k](TensorNode<Scalar>& self) {
        auto& an = *self.inputs[0];
        auto& bn = *self.inputs[1];
        for (Index i = 0; i < n; ++i) {
          MapConstMat<Scalar> g(self.grad.data() + i * r * k, r, k);
          if (an.requires_grad) {
            an.ensure_grad();
            MapMat<Scalar>(an.grad.data() + i * r * c, r, c).noalias() +=
                g * MapConstMat<Scalar>(bn.value.data() + i * c * k, c, k).transpose();
          }
          if (bn.requires_grad) {
            bn.ensure_grad();
            MapMat<Scalar>(bn.grad.data() + i * c * k, c, k).noalias() +=
                MapConstMat<Scalar>(an.value.data() + i * r * c, r, c).transpose() * g;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Softmax / cross-entropy

/// Max-subtracted softmax along `axis`; each slice sums to one.
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, Index axis) {
  const Index rank = x.rank();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank)
    throw std::invalid_argument(detail::msg("softmax: axis out of range for %s",
                                            shape_str(x.shape()).c_str()));
  Index outer = 1, inner = 1;
  const Index n = x.dim(axis);
  for (Index d = 0; d < axis; ++d) outer *= x.dim(d);
  for (Index d = axis + 1; d < rank; ++d) inner *= x.dim(d);

  ArrayX<Scalar> y(x.size());
  const Scalar* xv = x.values().data();
  for (Index o = 0; o < outer; ++o)
    for (Index i = 0; i < inner; ++i) {
      const Index base = o * n * inner + i;
      Scalar mx = xv[base];
      for (Index j = 1; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      Scalar denom = 0;
      for (Index j = 0; j < n; ++j) {
        const Scalar e = std::exp(xv[base + j * inner] - mx);
        y[base + j * inner] = e;
        denom += e;
      }
      const Scalar inv = Scalar(1) / denom;
      for (Index j = 0; j < n; ++j) y[base + j * inner] *= inv;
    }

  return detail::make_op<Scalar>(
      x.shape(), std::move(y), {x}, [outer, inner, n](TensorNode<Scalar>& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        const Scalar* yv = self.value.data();
        const Scalar* gv = self.grad.data();
        for (Index o = 0; o < outer; ++o)
          for (Index i = 0; i < inner; ++i) {
            const Index base = o * n * inner + i;
            Scalar dot = 0;
            for (Index j = 0; j < n; ++j) dot += gv[base + j * inner] * yv[base + j * inner];
            for (Index j = 0; j < n; ++j)
              in.grad[base + j * inner] +=
                  yv[base + j * inner] * (gv[base + j * inner] - dot);
          }
      });
}

/// Mean over rows of -sum_k target * log softmax(pred). `pred` are logits
/// [n,K]; each target row must sum to one (within 1e-5). Gradients flow into
/// pred only; the target is treated as a constant.
template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& pred, const Tensor<Scalar>& target) {
  if (pred.rank() != 2 || target.rank() != 2 || pred.shape() != target.shape())
    throw std::invalid_argument(detail::msg("cross_entropy: shapes %s vs %s",
                                            shape_str(pred.shape()).c_str(),
                                            shape_str(target.shape()).c_str()));
  const Index n = pred.dim(0), k = pred.dim(1);
  const Scalar* pv = pred.values().data();
  const Scalar* tv = target.values().data();
  ArrayX<Scalar> lse(n);
  Scalar loss = 0;
  for (Index r = 0; r < n; ++r) {
    Scalar rowsum = 0;
    for (Index j = 0; j < k; ++j) rowsum += tv[r * k + j];
    if (std::abs(rowsum - Scalar(1)) > Scalar(1e-5))
      throw std::invalid_argument(detail::msg(
          "cross_entropy: target row %lld sums to %g, expected 1",
          static_cast<long long>(r), static_cast<double>(rowsum)));
    Scalar mx = pv[r * k];
    for (Index j = 1; j < k; ++j) mx = std::max(mx, pv[r * k + j]);
    Scalar denom = 0;
    for (Index j = 0; j < k; ++j) denom += std::exp(pv[r * k + j] - mx);
    lse[r] = mx + std::log(denom);
    Scalar dot = 0;
    for (Index j = 0; j < k; ++j) dot += tv[r * k + j] * pv[r * k + j];
    loss += lse[r] - dot;
  }
  loss /= static_cast<Scalar>(n);

  ArrayX<Scalar> v(1);
  v[0] = loss;
  return detail::make_op<Scalar>(
      Shape{1}, std::move(v), {pred, target},
      [n, k, lse = std::move(lse)](TensorNode<Scalar>& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        const Scalar g0 = self.grad[0] / static_cast<Scalar>(n);
        const Scalar* pv = in.value.data();
        const Scalar* tv = self.inputs[1]->value.data();
        for (Index r = 0; r < n; ++r)
          for (Index j = 0; j < k; ++j)
            in.grad[r * k + j] +=
                g0 * (std::exp(pv[r * k + j] - lse[r]) - tv[r * k + j]);
      });
}

// ---------------------------------------------------------------------------
// Convolution

/// x [N,Cin,H,W], w [Cout,Cin,kh,kw], optional bias [Cout].
/// Zero padding, positive stride; output [N,Cout,Ho,Wo].
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w,
                      const Tensor<Scalar>& bias, Index stride, Index pad) {
  if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1))
    throw std::invalid_argument(detail::msg("conv2d: incompatible shapes %s, %s",
                                            shape_str(x.shape()).c_str(),
                                            shape_str(w.shape()).c_str()));
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  const Index n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const Index cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const bool with_bias = bias.defined();
  if (with_bias && (bias.rank() != 1 || bias.dim(0) != cout))
    throw std::invalid_argument("conv2d: bias shape mismatch");
  const Index ho = (h + 2 * pad - kh) / stride + 1;
  const Index wo = (wd + 2 * pad - kw) / stride + 1;
  if (ho < 1 || wo < 1)
    throw std::invalid_argument(detail::msg("conv2d: kernel %s does not fit input %s",
                                            shape_str(w.shape()).c_str(),
                                            shape_str(x.shape()).c_str()));
  const Index ckk = cin * kh * kw;
  const Index owo = ho * wo;

  // im2col buffers are kept for the backward pass.
  auto cols = std::make_shared<std::vector<MatrixRM<Scalar>>>();
  cols->reserve(static_cast<std::size_t>(n));
  ArrayX<Scalar> v(n * cout * owo);
  MapConstMat<Scalar> wm(w.values().data(), cout, ckk);
  for (Index ni = 0; ni < n; ++ni) {
    MatrixRM<Scalar> col(ckk, owo);
    const Scalar* img = x.values().data() + ni * cin * h * wd;
    for (Index c = 0; c < cin; ++c)
      for (Index ky = 0; ky < kh; ++ky)
        for (Index kx = 0; kx < kw; ++kx) {
          const Index row = (c * kh + ky) * kw + kx;
          Scalar* dst = col.data() + row * owo;
          for (Index oy = 0; oy < ho; ++oy) {
            const Index iy = oy * stride + ky - pad;
            for (Index ox = 0; ox < wo; ++ox) {
              const Index ix = ox * stride + kx - pad;
              dst[oy * wo + ox] = (iy >= 0 && iy < h && ix >= 0 && ix < wd)
                                      ? img[(c * h + iy) * wd + ix]
                                      : Scalar(0);
            }
          }
        }
    MapMat<Scalar> out(v.data() + ni * cout * owo, cout, owo);
    out.noalias() = wm * col;
    if (with_bias)
      for (Index co = 0; co < cout; ++co) out.row(co).array() += bias.values()[co];
    cols->push_back(std::move(col));
  }

  std::vector<Tensor<Scalar>> inputs{x, w};
  if (with_bias) inputs.push_back(bias);
  return detail::make_op<Scalar>(
      Shape{n, cout, ho, wo}, std::move(v), std::move(inputs),
      [n, cin, h, wd, cout, kh, kw, ho, wo, stride, pad, ckk, owo, with_bias,
       cols](TensorNode<Scalar>& self) {
        auto& xn = *self.inputs[0];
        auto& wn = *self.inputs[1];
        for (Index ni = 0; ni < n; ++ni) {
          MapConstMat<Scalar> g(self.grad.data() + ni * cout * owo, cout, owo);
          if (wn.requires_grad) {
            wn.ensure_grad();
            MapMat<Scalar>(wn.grad.data(), cout, ckk).noalias() +=
                g * (*cols)[static_cast<std::size_t>(ni)].transpose();
          }
          if (with_bias && self.inputs[2]->requires_grad) {
            auto& bn = *self.inputs[2];
            bn.ensure_grad();
            for (Index co = 0; co < cout; ++co) bn.grad[co] += g.row(co).sum();
          }
          if (xn.requires_grad) {
            xn.ensure_grad();
            MatrixRM<Scalar> dcol(ckk, owo);
            dcol.noalias() =
                MapConstMat<Scalar>(wn.value.data(), cout, ckk).transpose() * g;
            Scalar* dimg = xn.grad.data() + ni * cin * h * wd;
            for (Index c = 0; c < cin; ++c)
              for (Index ky = 0; ky < kh; ++ky)
                for (Index kx = 0; kx < kw; ++kx) {
                  const Index row = (c * kh + ky) * kw + kx;
                  const Scalar* src = dcol.data() + row * owo;
                  for (Index oy = 0; oy < ho; ++oy) {
                    const Index iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    for (Index ox = 0; ox < wo; ++ox) {
                      const Index ix = ox * stride + kx - pad;
                      if (ix < 0 || ix >= wd) continue;
                      dimg[(c * h + iy) * wd + ix] += src[oy * wo + ox];
                    }
                  }
                }
          }
        }
      });
}

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w, Index stride,
                      Index pad) {
  return conv2d(x, w, Tensor<Scalar>(), stride, pad);
}

// ---------------------------------------------------------------------------
// Bilinear sampling

/// Samples x [N,C,H,W] at P normalized locations (u,v) in [0,1]^2, shared by
/// all items, producing [N,P,C]. Coordinates map to pixel centers
/// (u -> u*W - 0.5) and clamp to the border. Differentiable in x only.
template <typename Scalar>
Tensor<Scalar> bilinear_sample(const Tensor<Scalar>& x, const MatrixRM<Scalar>& points) {
  if (x.rank() != 4)
    throw std::invalid_argument(detail::msg("bilinear_sample: need [N,C,H,W], got %s",
                                            shape_str(x.shape()).c_str()));
  if (points.cols() != 2)
    throw std::invalid_argument("bilinear_sample: points must be [P,2] (u,v)");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index p = points.rows();

  struct Corner {
    Index x0, x1, y0, y1;
    Scalar fx, fy;
  };
  auto corners = std::make_shared<std::vector<Corner>>();
  corners->reserve(static_cast<std::size_t>(p));
  auto clampf = [](Scalar v, Scalar lo, Scalar hi) {
    return v < lo ? lo : (v > hi ? hi : v);
  };
  for (Index i = 0; i < p; ++i) {
    const Scalar px = clampf(points(i, 0) * static_cast<Scalar>(w) - Scalar(0.5),
                             Scalar(0), static_cast<Scalar>(w - 1));
    const Scalar py = clampf(points(i, 1) * static_cast<Scalar>(h) - Scalar(0.5),
                             Scalar(0), static_cast<Scalar>(h - 1));
    Corner cr;
    cr.x0 = static_cast<Index>(std::floor(px));
    cr.y0 = static_cast<Index>(std::floor(py));
    cr.x1 = std::min(cr.x0 + 1, w - 1);
    cr.y1 = std::min(cr.y0 + 1, h - 1);
    cr.fx = px - static_cast<Scalar>(cr.x0);
    cr.fy = py - static_cast<Scalar>(cr.y0);
    corners->push_back(cr);
  }

  ArrayX<Scalar> v(n * p * c);
  const Scalar* xv = x.values().data();
  for (Index ni = 0; ni < n; ++ni)
    for (Index pi = 0; pi < p; ++pi) {
      const Corner& cr = (*corners)[static_cast<std::size_t>(pi)];
      for (Index ci = 0; ci < c; ++ci) {
        const Scalar* plane = xv + (ni * c + ci) * h * w;
        const Scalar v00 = plane[cr.y0 * w + cr.x0];
        const Scalar v01 = plane[cr.y0 * w + cr.x1];
        const Scalar v10 = plane[cr.y1 * w + cr.x0];
        const Scalar v11 = plane[cr.y1 * w + cr.x1];
        const Scalar top = v00 + cr.fx * (v01 - v00);
        const Scalar bot = v10 + cr.fx * (v11 - v10);
        v[(ni * p + pi) * c + ci] = top + cr.fy * (bot - top);
      }
    }

  return detail::make_op<Scalar>(
      Shape{n, p, c}, std::move(v), {x},
      [n, c, h, w, p, corners](TensorNode<Scalar>& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        for (Index ni = 0; ni < n; ++ni)
          for (Index pi = 0; pi < p; ++pi) {
            const Corner& cr = (*corners)[static_cast<std::size_t>(pi)];
            const Scalar w00 = (1 - cr.fx) * (1 - cr.fy);
            const Scalar w01 = cr.fx * (1 - cr.fy);
            const Scalar w10 = (1 - cr.fx) * cr.fy;
            const Scalar w11 = cr.fx * cr.fy;
            for (Index ci = 0; ci < c; ++ci) {
              const Scalar g = self.grad[(ni * p + pi) * c + ci];
              Scalar* plane = in.grad.data() + (ni * c + ci) * h * w;
              plane[cr.y0 * w + cr.x0] += w00 * g;
              plane[cr.y0 * w + cr.x1] += w01 * g;
              plane[cr.y1 * w + cr.x0] += w10 * g;
              plane[cr.y1 * w + cr.x1] += w11 * g;
            }
          }
      });
}

inline bool all_finite_d(const double* p, Index n) {
  for (Index i = 0; i < n; ++i)
    if (!std::isfinite(p[i])) return false;
  return true;
}

template <typename Scalar>
bool all_finite(const Tensor<Scalar>& t) {
  const Scalar* p = t.values().data();
  for (Index i = 0; i < t.size(); ++i)
    if (!std::isfinite(static_cast<double>(p[i]))) return false;
  return true;
}

}  // namespace crossview
