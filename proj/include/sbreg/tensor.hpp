#pragma once

// Dense 64-bit tensors with define-by-run reverse-mode differentiation.
//
// Every op returns a new Tensor whose node keeps its parents alive; the graph
// is dropped when the last Tensor referencing it goes out of scope. Leaves
// created with requires_grad=true are the trainable parameters; everything
// else is a constant as far as backward() is concerned.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace sbreg {

using Shape = std::vector<std::size_t>;
using NodeId = std::uint64_t;

enum class OpKind {
  Leaf,
  Matmul,
  Add,
  Sub,
  ScalarMul,
  ElementwiseMul,
  MeanOverAxis,
  Concat,
  SliceRows,
  SliceCols,
  GatherRows,
  Softmax,
  LayerNorm,
  Gelu,
  Relu,
  Square,
  Sum,
  Log,
  CrossEntropyWithLogits,
  Transpose,
  Reshape,
};

inline const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Matmul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::ScalarMul: return "scalar_mul";
    case OpKind::ElementwiseMul: return "elementwise_mul";
    case OpKind::MeanOverAxis: return "mean_over_axis";
    case OpKind::Concat: return "concat";
    case OpKind::SliceRows: return "slice_rows";
    case OpKind::SliceCols: return "slice_cols";
    case OpKind::GatherRows: return "gather_rows";
    case OpKind::Softmax: return "softmax";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::Gelu: return "gelu";
    case OpKind::Relu: return "relu";
    case OpKind::Square: return "square";
    case OpKind::Sum: return "sum";
    case OpKind::Log: return "log";
    case OpKind::CrossEntropyWithLogits: return "cross_entropy_with_logits";
    case OpKind::Transpose: return "transpose";
    case OpKind::Reshape: return "reshape";
  }
  return "unknown";
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
}  // namespace detail

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// Receives the gradient of this node's output and accumulates into the
// gradient buffers of its parents. A null buffer marks a parent that does not
// require a gradient.
using BackwardFn =
    std::function<void(std::span<const double> grad_out, std::span<std::vector<double>*> parent_grads)>;

struct Node {
  OpKind op = OpKind::Leaf;
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  NodeId id = 0;
  std::vector<NodePtr> parents;
  BackwardFn backward;
};

inline NodeId next_node_id() {
  static std::atomic<NodeId> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape.empty()) throw ShapeError("tensor: empty shape");
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_str(shape));
    }
    if (shape_size(shape) != data.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " needs " + std::to_string(shape_size(shape)) +
                       " values, got " + std::to_string(data.size()));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    node->id = detail::next_node_id();
    return Tensor(std::move(node));
  }
  static Tensor constant(Shape shape, std::vector<double> data) { return from(std::move(shape), std::move(data)); }
  static Tensor parameter(Shape shape, std::vector<double> data) {
    return from(std::move(shape), std::move(data), true);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_size(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor scalar(double v) { return from({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rows() const { return ndim() == 1 ? 1 : node_->shape[0]; }
  std::size_t cols() const { return node_->shape.back(); }
  std::span<const double> data() const { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  double item() const {
    if (size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not scalar");
    return node_->value[0];
  }
  std::vector<double> row(std::size_t r) const {
    auto c = cols();
    return {node_->value.begin() + static_cast<std::ptrdiff_t>(r * c),
            node_->value.begin() + static_cast<std::ptrdiff_t>((r + 1) * c)};
  }

  bool requires_grad() const { return node_->requires_grad; }
  NodeId id() const { return node_->id; }
  OpKind op() const { return node_->op; }

  // In-place access is only granted on leaves, i.e. between graph lifetimes.
  std::span<double> mutable_data() {
    if (node_->op != OpKind::Leaf) throw std::logic_error("mutable_data: only leaf tensors are mutable");
    return node_->value;
  }
  void set_requires_grad(bool flag) {
    if (node_->op != OpKind::Leaf) throw std::logic_error("set_requires_grad: only leaf tensors");
    node_->requires_grad = flag;
  }

  // Fresh leaf holding a copy of the values.
  Tensor clone(bool requires_grad) const { return from(shape(), node_->value, requires_grad); }
  Tensor detach() const { return clone(false); }

  const detail::NodePtr& node() const { return node_; }
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

 private:
  detail::NodePtr node_;
};

namespace detail {

inline Tensor make_result(OpKind op, Shape shape, std::vector<double> value, std::vector<NodePtr> parents,
                          BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->op = op;
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->id = next_node_id();
  node->requires_grad = std::any_of(parents.begin(), parents.end(), [](const NodePtr& p) { return p->requires_grad; });
  if (node->requires_grad) {
    node->parents = std::move(parents);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

[[noreturn]] inline void shape_fail(OpKind op, const std::string& what) {
  throw ShapeError(std::string(op_name(op)) + ": " + what);
}

inline void require_2d(OpKind op, const Tensor& t, const char* which) {
  if (t.ndim() != 2) shape_fail(op, std::string(which) + " must be 2-d, got " + shape_str(t.shape()));
}

// Broadcast classes for binary elementwise ops.
enum class Broadcast { Same, Row, Scalar };

inline Broadcast classify(OpKind op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Broadcast::Same;
  if (b.size() == 1) return Broadcast::Scalar;
  if (b.size() == a.cols() && (b.ndim() == 1 || (b.ndim() == 2 && b.rows() == 1))) return Broadcast::Row;
  shape_fail(op, "incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

inline std::size_t bidx(Broadcast bc, std::size_t i, std::size_t cols) {
  switch (bc) {
    case Broadcast::Same: return i;
    case Broadcast::Row: return i % cols;
    case Broadcast::Scalar: return 0;
  }
  return 0;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops

/// a (n×k) times b (k×m); with transpose_rhs, b is (m×k) and b^T is used.
inline Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_rhs = false) {
  constexpr auto op = OpKind::Matmul;
  detail::require_2d(op, a, "lhs");
  detail::require_2d(op, b, "rhs");
  const std::size_t n = a.rows(), k = a.cols();
  const std::size_t kb = transpose_rhs ? b.cols() : b.rows();
  const std::size_t m = transpose_rhs ? b.rows() : b.cols();
  if (k != kb) {
    detail::shape_fail(op, "inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                               (transpose_rhs ? "^T" : ""));
  }
  std::vector<double> out(n * m, 0.0);
  using detail::RowMat;
  using CMap = Eigen::Map<const RowMat>;
  using MMap = Eigen::Map<RowMat>;
  CMap A(a.data().data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k));
  CMap B(b.data().data(), b.rows(), b.cols());
  MMap O(out.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m));
  if (transpose_rhs) {
    O.noalias() = A * B.transpose();
  } else {
    O.noalias() = A * B;
  }
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result(
      op, {n, m}, std::move(out), {an, bn},
      [an, bn, n, k, m, transpose_rhs](std::span<const double> g, std::span<std::vector<double>*> pg) {
        const auto ni = static_cast<Eigen::Index>(n), ki = static_cast<Eigen::Index>(k),
                   mi = static_cast<Eigen::Index>(m);
        CMap A(an->value.data(), ni, ki);
        CMap G(g.data(), ni, mi);
        if (auto* ga = pg[0]) {
          MMap GA(ga->data(), ni, ki);
          if (transpose_rhs) {
            GA.noalias() += G * CMap(bn->value.data(), mi, ki);
          } else {
            GA.noalias() += G * CMap(bn->value.data(), ki, mi).transpose();
          }
        }
        if (auto* gb = pg[1]) {
          if (transpose_rhs) {
            MMap(gb->data(), mi, ki).noalias() += G.transpose() * A;
          } else {
            MMap(gb->data(), ki, mi).noalias() += A.transpose() * G;
          }
        }
      });
}

namespace detail {

template <class Fwd, class Da, class Db>
Tensor binary(OpKind op, const Tensor& a, const Tensor& b, Fwd fwd, Da da, Db db) {
  const Broadcast bc = classify(op, a, b);
  const std::size_t cols = a.cols();
  std::vector<double> out(a.size());
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(A[i], B[bidx(bc, i, cols)]);
  auto an = a.node();
  auto bn = b.node();
  return make_result(op, a.shape(), std::move(out), {an, bn},
                     [an, bn, bc, cols, da, db](std::span<const double> g, std::span<std::vector<double>*> pg) {
                       const auto& A = an->value;
                       const auto& B = bn->value;
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         const std::size_t j = bidx(bc, i, cols);
                         if (pg[0]) (*pg[0])[i] += g[i] * da(A[i], B[j]);
                         if (pg[1]) (*pg[1])[j] += g[i] * db(A[i], B[j]);
                       }
                     });
}

template <class Fwd, class Dx>
Tensor unary(OpKind op, const Tensor& a, Fwd fwd, Dx dx) {
  std::vector<double> out(a.size());
  auto A = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(A[i]);
  auto an = a.node();
  return make_result(op, a.shape(), std::move(out), {an},
                     [an, dx](std::span<const double> g, std::span<std::vector<double>*> pg) {
                       const auto& A = an->value;
                       for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * dx(A[i]);
                     });
}

}  // namespace detail

/// Elementwise a + b. b may match a, be a row vector over a's last axis, or a scalar.
inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      OpKind::Add, a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      OpKind::Sub, a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor elementwise_mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      OpKind::ElementwiseMul, a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor scalar_mul(const Tensor& a, double s) {
  return detail::unary(
      OpKind::ScalarMul, a, [s](double x) { return s * x; }, [s](double) { return s; });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      OpKind::Relu, a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

/// tanh approximation of GELU.
inline Tensor gelu(const Tensor& a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  return detail::unary(
      OpKind::Gelu, a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x))); },
      [](double x) {
        const double u = c * (x + k * x * x * x);
        const double th = std::tanh(u);
        const double du = c * (1.0 + 3.0 * k * x * x);
        return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
      });
}

inline Tensor square(const Tensor& a) {
  return detail::unary(
      OpKind::Square, a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

inline Tensor log(const Tensor& a) {
  for (double v : a.data()) {
    if (!(v > 0.0)) throw std::domain_error("log: non-positive input");
  }
  return detail::unary(
      OpKind::Log, a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto an = a.node();
  return detail::make_result(OpKind::Sum, {1}, {s}, {an},
                             [](std::span<const double> g, std::span<std::vector<double>*> pg) {
                               for (double& x : *pg[0]) x += g[0];
                             });
}

/// Mean of a 2-d tensor over axis 0 (result 1×cols) or axis 1 (result rows×1).
inline Tensor mean_over_axis(const Tensor& a, std::size_t axis) {
  constexpr auto op = OpKind::MeanOverAxis;
  detail::require_2d(op, a, "input");
  if (axis > 1) detail::shape_fail(op, "axis " + std::to_string(axis) + " out of range for 2-d input");
  const std::size_t n = a.rows(), m = a.cols();
  auto A = a.data();
  Shape out_shape = axis == 0 ? Shape{1, m} : Shape{n, 1};
  std::vector<double> out(axis == 0 ? m : n, 0.0);
  if (axis == 0) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) out[j] += A[i * m + j];
    for (auto& v : out) v /= static_cast<double>(n);
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += A[i * m + j];
      out[i] = s / static_cast<double>(m);
    }
  }
  return detail::make_result(op, std::move(out_shape), std::move(out), {a.node()},
                             [n, m, axis](std::span<const double> g, std::span<std::vector<double>*> pg) {
                               auto& ga = *pg[0];
                               const double inv = 1.0 / static_cast<double>(axis == 0 ? n : m);
                               for (std::size_t i = 0; i < n; ++i)
                                 for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += g[axis == 0 ? j : i] * inv;
                             });
}

/// Concatenate 2-d tensors along axis 0 (rows) or 1 (columns).
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  constexpr auto op = OpKind::Concat;
  if (parts.empty()) detail::shape_fail(op, "no inputs");
  if (axis > 1) detail::shape_fail(op, "axis must be 0 or 1");
  for (const auto& p : parts) detail::require_2d(op, p, "input");
  const std::size_t keep = axis == 0 ? parts[0].cols() : parts[0].rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    const std::size_t k = axis == 0 ? p.cols() : p.rows();
    if (k != keep) {
      detail::shape_fail(op, "mismatched " + std::string(axis == 0 ? "columns" : "rows") + ": " + shape_str(parts[0].shape()) +
                                 " vs " + shape_str(p.shape()));
    }
    total += axis == 0 ? p.rows() : p.cols();
  }
  Shape out_shape = axis == 0 ? Shape{total, keep} : Shape{keep, total};
  std::vector<double> out;
  out.reserve(total * keep);
  std::vector<detail::NodePtr> parents;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    parents.push_back(p.node());
    extents.push_back(axis == 0 ? p.rows() : p.cols());
  }
  if (axis == 0) {
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  } else {
    for (std::size_t r = 0; r < keep; ++r)
      for (const auto& p : parts) {
        auto d = p.data();
        out.insert(out.end(), d.begin() + static_cast<std::ptrdiff_t>(r * p.cols()),
                   d.begin() + static_cast<std::ptrdiff_t>((r + 1) * p.cols()));
      }
  }
  return detail::make_result(
      op, std::move(out_shape), std::move(out), std::move(parents),
      [extents, keep, axis, total](std::span<const double> g, std::span<std::vector<double>*> pg) {
        if (axis == 0) {
          std::size_t offset = 0;
          for (std::size_t k = 0; k < extents.size(); ++k) {
            const std::size_t len = extents[k] * keep;
            if (pg[k])
              for (std::size_t i = 0; i < len; ++i) (*pg[k])[i] += g[offset + i];
            offset += len;
          }
        } else {
          for (std::size_t r = 0; r < keep; ++r) {
            std::size_t col = 0;
            for (std::size_t k = 0; k < extents.size(); ++k) {
              if (pg[k])
                for (std::size_t c = 0; c < extents[k]; ++c) (*pg[k])[r * extents[k] + c] += g[r * total + col + c];
              col += extents[k];
            }
          }
        }
      });
}

/// Rows [begin, end) of a 2-d tensor.
inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  constexpr auto op = OpKind::SliceRows;
  detail::require_2d(op, a, "input");
  if (begin >= end || end > a.rows()) {
    detail::shape_fail(op, "range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                               shape_str(a.shape()));
  }
  const std::size_t m = a.cols();
  auto d = a.data();
  std::vector<double> out(d.begin() + static_cast<std::ptrdiff_t>(begin * m),
                          d.begin() + static_cast<std::ptrdiff_t>(end * m));
  return detail::make_result(op, {end - begin, m}, std::move(out), {a.node()},
                             [begin, m](std::span<const double> g, std::span<std::vector<double>*> pg) {
                               for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[begin * m + i] += g[i];
                             });
}

/// Columns [begin, end) of a 2-d tensor.
inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  constexpr auto op = OpKind::SliceCols;
  detail::require_2d(op, a, "input");
  if (begin >= end || end > a.cols()) {
    detail::shape_fail(op, "range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                               shape_str(a.shape()));
  }
  const std::size_t n = a.rows(), m = a.cols(), w = end - begin;
  auto d = a.data();
  std::vector<double> out(n * w);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = d[i * m + begin + j];
  return detail::make_result(op, {n, w}, std::move(out), {a.node()},
                             [n, m, w, begin](std::span<const double> g, std::span<std::vector<double>*> pg) {
                               for (std::size_t i = 0; i < n; ++i)
                                 for (std::size_t j = 0; j < w; ++j) (*pg[0])[i * m + begin + j] += g[i * w + j];
                             });
}

/// Rows of a table picked by index (embedding lookup).
inline Tensor gather_rows(const Tensor& table, std::span<const int> indices) {
  constexpr auto op = OpKind::GatherRows;
  detail::require_2d(op, table, "table");
  if (indices.empty()) detail::shape_fail(op, "no indices");
  const std::size_t m = table.cols();
  std::vector<std::size_t> idx;
  idx.reserve(indices.size());
  for (int i : indices) {
    if (i < 0 || static_cast<std::size_t>(i) >= table.rows()) {
      detail::shape_fail(op, "index " + std::to_string(i) + " out of range for " + shape_str(table.shape()));
    }
    idx.push_back(static_cast<std::size_t>(i));
  }
  std::vector<double> out(idx.size() * m);
  auto d = table.data();
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(d.begin() + static_cast<std::ptrdiff_t>(idx[r] * m), m, out.begin() + static_cast<std::ptrdiff_t>(r * m));
  return detail::make_result(op, {idx.size(), m}, std::move(out), {table.node()},
                             [idx, m](std::span<const double> g, std::span<std::vector<double>*> pg) {
                               for (std::size_t r = 0; r < idx.size(); ++r)
                                 for (std::size_t j = 0; j < m; ++j) (*pg[0])[idx[r] * m + j] += g[r * m + j];
                             });
}

/// Row-wise softmax over the last axis.
inline Tensor softmax(const Tensor& a) {
  const std::size_t m = a.cols();
  const std::size_t n = a.size() / m;
  auto A = a.data();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < n; ++i) {
    double mx = A[i * m];
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, A[i * m + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += (out[i * m + j] = std::exp(A[i * m + j] - mx));
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] /= s;
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return detail::make_result(OpKind::Softmax, a.shape(), std::move(out), {a.node()},
                             [y, n, m](std::span<const double> g, std::span<std::vector<double>*> pg) {
                               const auto& Y = *y;
                               for (std::size_t i = 0; i < n; ++i) {
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < m; ++j) dot += g[i * m + j] * Y[i * m + j];
                                 for (std::size_t j = 0; j < m; ++j)
                                   (*pg[0])[i * m + j] += Y[i * m + j] * (g[i * m + j] - dot);
                               }
                             });
}

/// Row-wise normalization to zero mean and unit variance (no affine part).
inline Tensor layer_norm(const Tensor& a, double eps = 1e-5) {
  const std::size_t m = a.cols();
  const std::size_t n = a.size() / m;
  auto A = a.data();
  std::vector<double> out(a.size());
  auto inv_std = std::make_shared<std::vector<double>>(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < m; ++j) mu += A[i * m + j];
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t j = 0; j < m; ++j) var += (A[i * m + j] - mu) * (A[i * m + j] - mu);
    var /= static_cast<double>(m);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = (A[i * m + j] - mu) * is;
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return detail::make_result(OpKind::LayerNorm, a.shape(), std::move(out), {a.node()},
                             [y, inv_std, n, m](std::span<const double> g, std::span<std::vector<double>*> pg) {
                               const auto& Y = *y;
                               const double md = static_cast<double>(m);
                               for (std::size_t i = 0; i < n; ++i) {
                                 double gs = 0.0, gy = 0.0;
                                 for (std::size_t j = 0; j < m; ++j) {
                                   gs += g[i * m + j];
                                   gy += g[i * m + j] * Y[i * m + j];
                                 }
                                 for (std::size_t j = 0; j < m; ++j) {
                                   (*pg[0])[i * m + j] +=
                                       (*inv_std)[i] * (g[i * m + j] - gs / md - Y[i * m + j] * gy / md);
                                 }
                               }
                             });
}

/// -log softmax(logits)[target] for a single row of logits.
inline Tensor cross_entropy_with_logits(const Tensor& logits, std::size_t target) {
  constexpr auto op = OpKind::CrossEntropyWithLogits;
  if (logits.size() != logits.cols()) detail::shape_fail(op, "expects one row of logits, got " + shape_str(logits.shape()));
  const std::size_t m = logits.cols();
  if (target >= m) detail::shape_fail(op, "target " + std::to_string(target) + " out of range " + std::to_string(m));
  auto A = logits.data();
  double mx = *std::max_element(A.begin(), A.end());
  double s = 0.0;
  for (double v : A) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  auto an = logits.node();
  return detail::make_result(op, {1}, {lse - A[target]}, {an},
                             [an, lse, target](std::span<const double> g, std::span<std::vector<double>*> pg) {
                               const auto& A = an->value;
                               for (std::size_t j = 0; j < A.size(); ++j) {
                                 const double p = std::exp(A[j] - lse);
                                 (*pg[0])[j] += g[0] * (p - (j == target ? 1.0 : 0.0));
                               }
                             });
}

inline Tensor transpose(const Tensor& a) {
  constexpr auto op = OpKind::Transpose;
  detail::require_2d(op, a, "input");
  const std::size_t n = a.rows(), m = a.cols();
  auto A = a.data();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j * n + i] = A[i * m + j];
  return detail::make_result(op, {m, n}, std::move(out), {a.node()},
                             [n, m](std::span<const double> g, std::span<std::vector<double>*> pg) {
                               for (std::size_t i = 0; i < n; ++i)
                                 for (std::size_t j = 0; j < m; ++j) (*pg[0])[i * m + j] += g[j * n + i];
                             });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    detail::shape_fail(OpKind::Reshape, "cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return detail::make_result(OpKind::Reshape, std::move(shape), std::move(out), {a.node()},
                             [](std::span<const double> g, std::span<std::vector<double>*> pg) {
                               for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
                             });
}

// ---------------------------------------------------------------------------
// Generic dispatch, used where op kinds are enumerated (gradient suites, tooling).

struct OpAttrs {
  std::size_t axis = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
  double scalar = 1.0;
  double eps = 1e-5;
  bool transpose_rhs = false;
  std::vector<int> indices;
  std::size_t target = 0;
  Shape shape;
};

inline Tensor apply(OpKind kind, const std::vector<Tensor>& in, const OpAttrs& attrs = {}) {
  auto need = [&](std::size_t n) {
    if (in.size() != n) {
      throw ShapeError(std::string(op_name(kind)) + ": expected " + std::to_string(n) + " inputs, got " +
                       std::to_string(in.size()));
    }
  };
  switch (kind) {
    case OpKind::Leaf: throw std::invalid_argument("apply: leaf is not an op");
    case OpKind::Matmul: need(2); return matmul(in[0], in[1], attrs.transpose_rhs);
    case OpKind::Add: need(2); return add(in[0], in[1]);
    case OpKind::Sub: need(2); return sub(in[0], in[1]);
    case OpKind::ScalarMul: need(1); return scalar_mul(in[0], attrs.scalar);
    case OpKind::ElementwiseMul: need(2); return elementwise_mul(in[0], in[1]);
    case OpKind::MeanOverAxis: need(1); return mean_over_axis(in[0], attrs.axis);
    case OpKind::Concat: return concat(in, attrs.axis);
    case OpKind::SliceRows: need(1); return slice_rows(in[0], attrs.begin, attrs.end);
    case OpKind::SliceCols: need(1); return slice_cols(in[0], attrs.begin, attrs.end);
    case OpKind::GatherRows: need(1); return gather_rows(in[0], attrs.indices);
    case OpKind::Softmax: need(1); return softmax(in[0]);
    case OpKind::LayerNorm: need(1); return layer_norm(in[0], attrs.eps);
    case OpKind::Gelu: need(1); return gelu(in[0]);
    case OpKind::Relu: need(1); return relu(in[0]);
    case OpKind::Square: need(1); return square(in[0]);
    case OpKind::Sum: need(1); return sum(in[0]);
    case OpKind::Log: need(1); return log(in[0]);
    case OpKind::CrossEntropyWithLogits: need(1); return cross_entropy_with_logits(in[0], attrs.target);
    case OpKind::Transpose: need(1); return transpose(in[0]);
    case OpKind::Reshape: need(1); return reshape(in[0], attrs.shape);
  }
  throw std::invalid_argument("apply: unknown op");
}

// ---------------------------------------------------------------------------
// Backward

/// Gradients keyed by node id. Only nodes that require a gradient appear.
class Gradients {
 public:
  bool contains(const Tensor& t) const { return grads_.count(t.id()) != 0; }
  const Tensor* find(const Tensor& t) const {
    auto it = grads_.find(t.id());
    return it == grads_.end() ? nullptr : &it->second;
  }
  const Tensor& at(const Tensor& t) const {
    auto it = grads_.find(t.id());
    if (it == grads_.end()) throw std::out_of_range("gradients: no entry for node " + std::to_string(t.id()));
    return it->second;
  }
  Tensor* find_mutable(const Tensor& t) {
    auto it = grads_.find(t.id());
    return it == grads_.end() ? nullptr : &it->second;
  }
  std::size_t size() const { return grads_.size(); }
  void insert(NodeId id, Tensor g) { grads_.insert_or_assign(id, std::move(g)); }

 private:
  std::unordered_map<NodeId, Tensor> grads_;
};

inline Gradients backward(const Tensor& root) {
  if (root.size() != 1) throw ShapeError("backward: root must be scalar, got " + shape_str(root.shape()));
  Gradients result;
  if (!root.requires_grad()) return result;

  // Iterative post-order DFS; parents precede children in `order`.
  std::vector<detail::Node*> order;
  std::unordered_map<detail::Node*, std::size_t> slot;
  {
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{root.node().get(), 0}};
    std::unordered_map<detail::Node*, bool> seen{{root.node().get(), true}};
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        detail::Node* p = node->parents[next++].get();
        if (p->requires_grad && !seen[p]) {
          seen[p] = true;
          stack.emplace_back(p, 0);
        }
      } else {
        slot[node] = order.size();
        order.push_back(node);
        stack.pop_back();
      }
    }
  }
  std::vector<std::vector<double>> grads(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) grads[i].assign(order[i]->value.size(), 0.0);
  grads.back()[0] = 1.0;

  std::vector<std::vector<double>*> parent_grads;
  for (std::size_t i = order.size(); i-- > 0;) {
    detail::Node* node = order[i];
    if (!node->backward) continue;
    parent_grads.assign(node->parents.size(), nullptr);
    for (std::size_t k = 0; k < node->parents.size(); ++k) {
      detail::Node* p = node->parents[k].get();
      if (p->requires_grad) parent_grads[k] = &grads[slot.at(p)];
    }
    node->backward(grads[i], parent_grads);
  }
  for (std::size_t i = 0; i < order.size(); ++i) {
    result.insert(order[i]->id, Tensor::from(order[i]->shape, std::move(grads[i])));
  }
  return result;
}

}  // namespace sbreg
