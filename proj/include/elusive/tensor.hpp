#pragma once

// Dense tensors with reverse-mode differentiation.
//
// A tensor of shape [d0, ..., dn-1] is stored as a row-major Eigen matrix with
// d0*...*dn-2 rows and dn-1 columns, so "last dimension" operations are row
// operations. Graphs are built dynamically by the free functions in this
// header and released once the root tensor goes out of scope.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "elusive/errors.hpp"

namespace elusive::ad {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

// Rows of the row-major storage matrix: product of all but the last dimension.
inline Index shape_rows(const Shape& shape) {
  if (shape.empty()) return 1;
  return std::accumulate(shape.begin(), shape.end() - 1, Index{1}, std::multiplies<>());
}

inline Index shape_cols(const Shape& shape) { return shape.empty() ? 1 : shape.back(); }

template <typename Scalar>
struct Node {
  Shape shape;
  Matrix<Scalar> value;
  Matrix<Scalar> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Pushes this node's grad into its parents' grads.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return parents.empty(); }

  void accumulate(const Matrix<Scalar>& delta) {
    if (grad.size() == 0) {
      grad = delta;
    } else {
      grad += delta;
    }
  }

  template <typename Expr>
  void accumulate_expr(const Expr& delta) {
    if (grad.size() == 0) {
      grad = delta;
    } else {
      grad += delta;
    }
  }
};

template <typename Scalar>
class Tensor {
 public:
  using NodePtr = std::shared_ptr<Node<Scalar>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor leaf(Shape shape, Matrix<Scalar> value, bool requires_grad = false) {
    if (value.rows() != shape_rows(shape) || value.cols() != shape_cols(shape)) {
      throw DimensionError("tensor storage " + std::to_string(value.rows()) + "x" +
                           std::to_string(value.cols()) + " does not match shape " +
                           shape_string(shape));
    }
    auto node = std::make_shared<Node<Scalar>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Matrix<Scalar> value = Matrix<Scalar>::Zero(shape_rows(shape), shape_cols(shape));
    return leaf(std::move(shape), std::move(value), requires_grad);
  }

  static Tensor scalar(Scalar v, bool requires_grad = false) {
    Matrix<Scalar> value(1, 1);
    value(0, 0) = v;
    return leaf({}, std::move(value), requires_grad);
  }

  // Row-major construction from a flat buffer.
  static Tensor from_data(Shape shape, std::span<const Scalar> data, bool requires_grad = false) {
    if (static_cast<Index>(data.size()) != shape_numel(shape)) {
      throw DimensionError("data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_string(shape));
    }
    Matrix<Scalar> value(shape_rows(shape), shape_cols(shape));
    std::copy(data.begin(), data.end(), value.data());
    return leaf(std::move(shape), std::move(value), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  Index numel() const { return shape_numel(node_->shape); }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }

  const Matrix<Scalar>& value() const { return node_->value; }
  Matrix<Scalar>& mutable_value() { return node_->value; }
  std::span<const Scalar> data() const {
    return {node_->value.data(), static_cast<std::size_t>(node_->value.size())};
  }

  bool has_grad() const { return node_->grad.size() != 0; }
  const Matrix<Scalar>& grad() const { return node_->grad; }
  Matrix<Scalar>& mutable_grad() { return node_->grad; }
  void zero_grad() { node_->grad.resize(0, 0); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  Scalar item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_string(shape()));
    return node_->value(0, 0);
  }

  // New leaf sharing nothing with this graph.
  Tensor detach() const { return leaf(shape(), value(), false); }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

namespace detail {

// Creates the output node of an op; parents and the backward closure are only
// recorded when some parent needs a gradient.
template <typename Scalar>
Tensor<Scalar> make_result(Shape shape, Matrix<Scalar> value,
                           std::initializer_list<Tensor<Scalar>> parents,
                           std::function<void(Node<Scalar>&)> backward) {
  auto node = std::make_shared<Node<Scalar>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  for (const auto& p : parents) {
    if (p.requires_grad()) {
      node->requires_grad = true;
      break;
    }
  }
  if (node->requires_grad) {
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return Tensor<Scalar>(std::move(node));
}

// Numerically stable softmax of one row; denominator accumulated in double.
template <typename Scalar, typename Row>
void softmax_row(Row&& row) {
  const Index n = row.size();
  if (n == 0) return;
  const Scalar max = row.maxCoeff();
  double denom = 0.0;
  for (Index j = 0; j < n; ++j) {
    const double e = std::exp(static_cast<double>(row(j) - max));
    row(j) = static_cast<Scalar>(e);
    denom += e;
  }
  for (Index j = 0; j < n; ++j) row(j) = static_cast<Scalar>(static_cast<double>(row(j)) / denom);
}

inline void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                         shape_string(b));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

// Topologically ordered view of the graph below a root. Each node appears once;
// parents precede children.
template <typename Scalar>
class ComputationTape {
 public:
  explicit ComputationTape(const Tensor<Scalar>& root) {
    std::unordered_set<const Node<Scalar>*> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<Node<Scalar>*, std::size_t>> stack;
    if (root.requires_grad()) {
      stack.emplace_back(root.node().get(), 0);
      seen.insert(root.node().get());
    }
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node<Scalar>* parent = node->parents[next++].get();
        if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  const std::vector<Node<Scalar>*>& order() const { return order_; }

  // Runs the recorded backward closures from the root down. Interior gradients
  // are released once propagated; leaf gradients are kept.
  void run_backward() {
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      Node<Scalar>* node = *it;
      if (node->backward && node->grad.size() != 0) {
        node->backward(*node);
        node->grad.resize(0, 0);
      }
    }
  }

 private:
  std::vector<Node<Scalar>*> order_;
};

template <typename Scalar>
void backward(const Tensor<Scalar>& root) {
  if (root.numel() != 1) {
    throw ContractError("backward: root must be scalar, got shape " + shape_string(root.shape()));
  }
  if (!root.requires_grad()) {
    throw ContractError("backward: root does not depend on any tensor requiring grad");
  }
  ComputationTape<Scalar> tape(root);
  root.node()->accumulate(Matrix<Scalar>::Ones(1, 1));
  tape.run_backward();
}

// ---------------------------------------------------------------------------
// Elementwise and reductions
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape("add", a.shape(), b.shape());
  auto an = a.node(), bn = b.node();
  return detail::make_result<Scalar>(a.shape(), a.value() + b.value(), {a, b},
                                     [an, bn](Node<Scalar>& out) {
                                       if (an->requires_grad) an->accumulate(out.grad);
                                       if (bn->requires_grad) bn->accumulate(out.grad);
                                     });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape("mul", a.shape(), b.shape());
  auto an = a.node(), bn = b.node();
  return detail::make_result<Scalar>(
      a.shape(), a.value().cwiseProduct(b.value()), {a, b}, [an, bn](Node<Scalar>& out) {
        if (an->requires_grad) an->accumulate_expr(out.grad.cwiseProduct(bn->value));
        if (bn->requires_grad) bn->accumulate_expr(out.grad.cwiseProduct(an->value));
      });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor) {
  auto an = a.node();
  return detail::make_result<Scalar>(a.shape(), a.value() * factor, {a},
                                     [an, factor](Node<Scalar>& out) {
                                       an->accumulate_expr(out.grad * factor);
                                     });
}

// Sum of all entries as a scalar tensor (accumulated in double).
template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a) {
  Matrix<Scalar> value(1, 1);
  value(0, 0) = static_cast<Scalar>(a.value().template cast<double>().sum());
  auto an = a.node();
  return detail::make_result<Scalar>({}, std::move(value), {a}, [an](Node<Scalar>& out) {
    an->accumulate_expr(Matrix<Scalar>::Constant(an->value.rows(), an->value.cols(),
                                                 out.grad(0, 0)));
  });
}

template <typename Scalar>
Tensor<Scalar> silu(const Tensor<Scalar>& x) {
  const Matrix<Scalar> sig = (Scalar(1) + (-x.value().array()).exp()).inverse().matrix();
  Matrix<Scalar> value = x.value().cwiseProduct(sig);
  auto xn = x.node();
  return detail::make_result<Scalar>(
      x.shape(), std::move(value), {x}, [xn, sig](Node<Scalar>& out) {
        // d/dx x*s(x) = s(x) * (1 + x * (1 - s(x)))
        auto s = sig.array();
        xn->accumulate_expr(
            (out.grad.array() * s * (Scalar(1) + xn->value.array() * (Scalar(1) - s))).matrix());
      });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

// a: [..., k], b: [k, n] -> [..., n]. Leading dimensions of a are treated as a
// batch of rows; b must be two-dimensional.
template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape().empty() || b.shape().size() != 2 || a.shape().back() != b.shape()[0]) {
    throw DimensionError("matmul: dimension mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  Shape shape = a.shape();
  shape.back() = b.shape()[1];
  Matrix<Scalar> value = a.value() * b.value();
  auto an = a.node(), bn = b.node();
  return detail::make_result<Scalar>(std::move(shape), std::move(value), {a, b},
                                     [an, bn](Node<Scalar>& out) {
                                       if (an->requires_grad)
                                         an->accumulate_expr(out.grad * bn->value.transpose());
                                       if (bn->requires_grad)
                                         bn->accumulate_expr(an->value.transpose() * out.grad);
                                     });
}

// x: [..., in], weight: [out, in] -> [..., out], i.e. x * weight^T.
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight) {
  if (x.shape().empty() || weight.shape().size() != 2 || x.shape().back() != weight.shape()[1]) {
    throw DimensionError("linear: dimension mismatch " + shape_string(x.shape()) + " vs weight " +
                         shape_string(weight.shape()));
  }
  Shape shape = x.shape();
  shape.back() = weight.shape()[0];
  Matrix<Scalar> value = x.value() * weight.value().transpose();
  auto xn = x.node(), wn = weight.node();
  return detail::make_result<Scalar>(std::move(shape), std::move(value), {x, weight},
                                     [xn, wn](Node<Scalar>& out) {
                                       if (xn->requires_grad)
                                         xn->accumulate_expr(out.grad * wn->value);
                                       if (wn->requires_grad)
                                         wn->accumulate_expr(out.grad.transpose() * xn->value);
                                     });
}

// ---------------------------------------------------------------------------
// Normalisation and activations over the last dimension
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> softmax_lastdim(const Tensor<Scalar>& x) {
  Matrix<Scalar> value = x.value();
  for (Index i = 0; i < value.rows(); ++i) detail::softmax_row<Scalar>(value.row(i));
  auto xn = x.node();
  Matrix<Scalar> probs = value;
  return detail::make_result<Scalar>(
      x.shape(), std::move(value), {x}, [xn, probs](Node<Scalar>& out) {
        Matrix<Scalar> delta(probs.rows(), probs.cols());
        for (Index i = 0; i < probs.rows(); ++i) {
          const Scalar dot = out.grad.row(i).dot(probs.row(i));
          delta.row(i) = probs.row(i).cwiseProduct(
              (out.grad.row(i).array() - dot).matrix());
        }
        xn->accumulate(delta);
      });
}

// Root-mean-square normalisation with a learned per-feature gain.
template <typename Scalar>
Tensor<Scalar> rms_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gain, double eps = 1e-5) {
  if (gain.numel() != x.cols()) {
    throw DimensionError("rms_norm: gain " + shape_string(gain.shape()) + " vs input " +
                         shape_string(x.shape()));
  }
  const Index n = x.rows(), d = x.cols();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_rms(n);
  Matrix<Scalar> normed(n, d);
  for (Index i = 0; i < n; ++i) {
    const double ms = x.value().row(i).template cast<double>().squaredNorm() / static_cast<double>(d);
    inv_rms(i) = static_cast<Scalar>(1.0 / std::sqrt(ms + eps));
    normed.row(i) = x.value().row(i) * inv_rms(i);
  }
  Matrix<Scalar> value(n, d);
  const auto g = gain.value().reshaped();
  for (Index i = 0; i < n; ++i) value.row(i) = normed.row(i).cwiseProduct(g.transpose());
  auto xn = x.node(), gn = gain.node();
  return detail::make_result<Scalar>(
      x.shape(), std::move(value), {x, gain},
      [xn, gn, normed, inv_rms, d](Node<Scalar>& out) {
        const auto g = gn->value.reshaped();
        if (gn->requires_grad) {
          Matrix<Scalar> dg = (out.grad.cwiseProduct(normed)).colwise().sum();
          gn->accumulate_expr(dg.reshaped(gn->value.rows(), gn->value.cols()));
        }
        if (xn->requires_grad) {
          Matrix<Scalar> dx(normed.rows(), d);
          for (Index i = 0; i < normed.rows(); ++i) {
            const auto dn = out.grad.row(i).cwiseProduct(g.transpose());
            const Scalar proj = dn.dot(normed.row(i)) / static_cast<Scalar>(d);
            dx.row(i) = inv_rms(i) * (dn - proj * normed.row(i));
          }
          xn->accumulate(dx);
        }
      });
}

// ---------------------------------------------------------------------------
// Indexing
// ---------------------------------------------------------------------------

// Rows of weight [V, d] selected by ids -> [n, d].
template <typename Scalar>
Tensor<Scalar> embedding(const Tensor<Scalar>& weight, std::span<const int> ids) {
  if (weight.shape().size() != 2) {
    throw DimensionError("embedding: weight must be 2-D, got " + shape_string(weight.shape()));
  }
  const Index vocab = weight.shape()[0], d = weight.shape()[1];
  Matrix<Scalar> value(static_cast<Index>(ids.size()), d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab) {
      throw IndexError("embedding: token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    value.row(static_cast<Index>(i)) = weight.value().row(ids[i]);
  }
  auto wn = weight.node();
  std::vector<int> idx(ids.begin(), ids.end());
  return detail::make_result<Scalar>({static_cast<Index>(ids.size()), d}, std::move(value),
                                     {weight}, [wn, idx](Node<Scalar>& out) {
                                       if (wn->grad.size() == 0)
                                         wn->grad = Matrix<Scalar>::Zero(wn->value.rows(),
                                                                         wn->value.cols());
                                       for (std::size_t i = 0; i < idx.size(); ++i)
                                         wn->grad.row(idx[i]) += out.grad.row(static_cast<Index>(i));
                                     });
}

// Selected rows of a 2-D tensor.
template <typename Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& x, std::span<const Index> rows) {
  Matrix<Scalar> value(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= x.rows()) {
      throw IndexError("gather_rows: row " + std::to_string(rows[i]) + " outside " +
                       std::to_string(x.rows()));
    }
    value.row(static_cast<Index>(i)) = x.value().row(rows[i]);
  }
  auto xn = x.node();
  std::vector<Index> idx(rows.begin(), rows.end());
  return detail::make_result<Scalar>({static_cast<Index>(rows.size()), x.cols()}, std::move(value),
                                     {x}, [xn, idx](Node<Scalar>& out) {
                                       Matrix<Scalar> delta =
                                           Matrix<Scalar>::Zero(xn->value.rows(), xn->value.cols());
                                       for (std::size_t i = 0; i < idx.size(); ++i)
                                         delta.row(idx[i]) += out.grad.row(static_cast<Index>(i));
                                       xn->accumulate(delta);
                                     });
}

// ---------------------------------------------------------------------------
// Rotary position embedding
// ---------------------------------------------------------------------------

// Rotates consecutive feature pairs (2i, 2i+1) of every head_dim-wide chunk of
// each row by position * theta^(-2i/head_dim).
template <typename Scalar>
Matrix<Scalar> rope_rotate(const Matrix<Scalar>& x, std::span<const int> positions, Index head_dim,
                           double theta, bool inverse) {
  if (head_dim % 2 != 0) throw ConfigError("rope: head dimension must be even");
  if (x.cols() % head_dim != 0) {
    throw DimensionError("rope: width " + std::to_string(x.cols()) +
                         " is not a multiple of head dimension " + std::to_string(head_dim));
  }
  if (static_cast<Index>(positions.size()) != x.rows()) {
    throw DimensionError("rope: " + std::to_string(positions.size()) + " positions for " +
                         std::to_string(x.rows()) + " rows");
  }
  const Index half = head_dim / 2;
  std::vector<double> freq(static_cast<std::size_t>(half));
  for (Index i = 0; i < half; ++i)
    freq[static_cast<std::size_t>(i)] =
        std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
  Matrix<Scalar> out(x.rows(), x.cols());
  const double sign = inverse ? -1.0 : 1.0;
  for (Index r = 0; r < x.rows(); ++r) {
    const double pos = positions[static_cast<std::size_t>(r)];
    for (Index i = 0; i < half; ++i) {
      const double angle = sign * pos * freq[static_cast<std::size_t>(i)];
      const Scalar c = static_cast<Scalar>(std::cos(angle));
      const Scalar s = static_cast<Scalar>(std::sin(angle));
      for (Index base = 0; base < x.cols(); base += head_dim) {
        const Scalar x0 = x(r, base + 2 * i), x1 = x(r, base + 2 * i + 1);
        out(r, base + 2 * i) = x0 * c - x1 * s;
        out(r, base + 2 * i + 1) = x0 * s + x1 * c;
      }
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> rope(const Tensor<Scalar>& x, std::span<const int> positions, Index head_dim,
                    double theta = 10000.0) {
  Matrix<Scalar> value = rope_rotate<Scalar>(x.value(), positions, head_dim, theta, false);
  auto xn = x.node();
  std::vector<int> pos(positions.begin(), positions.end());
  return detail::make_result<Scalar>(
      x.shape(), std::move(value), {x}, [xn, pos, head_dim, theta](Node<Scalar>& out) {
        xn->accumulate(rope_rotate<Scalar>(out.grad, pos, head_dim, theta, true));
      });
}

// ---------------------------------------------------------------------------
// Causal multi-head attention over packed segments
// ---------------------------------------------------------------------------

// A contiguous run of rows holding one sequence; attention never crosses
// segment boundaries.
struct Segment {
  Index begin = 0;
  Index length = 0;
};

// Attention probabilities of one forward: probs[segment][head] is length x length,
// lower triangular, row-stochastic on the causal support.
template <typename Scalar>
struct AttentionProbs {
  std::vector<std::vector<Matrix<Scalar>>> per_segment;
};

// q, k, v: [n, heads*head_dim] with rows grouped by segment. Returns [n, heads*head_dim].
template <typename Scalar>
Tensor<Scalar> causal_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k,
                                const Tensor<Scalar>& v, std::span<const Segment> segments,
                                Index n_heads, AttentionProbs<Scalar>* capture = nullptr) {
  detail::require_same_shape("causal_attention", q.shape(), k.shape());
  detail::require_same_shape("causal_attention", q.shape(), v.shape());
  const Index width = q.cols();
  if (n_heads <= 0 || width % n_heads != 0) {
    throw DimensionError("causal_attention: width " + std::to_string(width) +
                         " not divisible by heads " + std::to_string(n_heads));
  }
  const Index head_dim = width / n_heads;
  const Scalar inv_sqrt = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(head_dim)));
  Index covered = 0;
  for (const auto& seg : segments) covered += seg.length;
  if (covered != q.rows()) {
    throw DimensionError("causal_attention: segments cover " + std::to_string(covered) +
                         " rows of " + std::to_string(q.rows()));
  }

  auto probs = std::make_shared<std::vector<Matrix<Scalar>>>();
  probs->reserve(segments.size() * static_cast<std::size_t>(n_heads));
  Matrix<Scalar> value = Matrix<Scalar>::Zero(q.rows(), width);
  for (const auto& seg : segments) {
    for (Index h = 0; h < n_heads; ++h) {
      const auto qh = q.value().block(seg.begin, h * head_dim, seg.length, head_dim);
      const auto kh = k.value().block(seg.begin, h * head_dim, seg.length, head_dim);
      const auto vh = v.value().block(seg.begin, h * head_dim, seg.length, head_dim);
      Matrix<Scalar> p = (qh * kh.transpose()) * inv_sqrt;
      for (Index i = 0; i < seg.length; ++i) {
        detail::softmax_row<Scalar>(p.row(i).head(i + 1));
        p.row(i).tail(seg.length - i - 1).setZero();
      }
      value.block(seg.begin, h * head_dim, seg.length, head_dim).noalias() = p * vh;
      probs->push_back(std::move(p));
    }
  }
  if (capture) {
    capture->per_segment.clear();
    std::size_t idx = 0;
    for (std::size_t s = 0; s < segments.size(); ++s) {
      std::vector<Matrix<Scalar>> heads;
      for (Index h = 0; h < n_heads; ++h) heads.push_back((*probs)[idx++]);
      capture->per_segment.push_back(std::move(heads));
    }
  }

  auto qn = q.node(), kn = k.node(), vn = v.node();
  std::vector<Segment> segs(segments.begin(), segments.end());
  return detail::make_result<Scalar>(
      q.shape(), std::move(value), {q, k, v},
      [qn, kn, vn, segs, probs, n_heads, head_dim, inv_sqrt](Node<Scalar>& out) {
        const Index n = out.value.rows(), width = out.value.cols();
        Matrix<Scalar> dq = Matrix<Scalar>::Zero(n, width);
        Matrix<Scalar> dk = Matrix<Scalar>::Zero(n, width);
        Matrix<Scalar> dv = Matrix<Scalar>::Zero(n, width);
        std::size_t idx = 0;
        for (const auto& seg : segs) {
          for (Index h = 0; h < n_heads; ++h) {
            const Matrix<Scalar>& p = (*probs)[idx++];
            const auto go = out.grad.block(seg.begin, h * head_dim, seg.length, head_dim);
            const auto qh = qn->value.block(seg.begin, h * head_dim, seg.length, head_dim);
            const auto kh = kn->value.block(seg.begin, h * head_dim, seg.length, head_dim);
            const auto vh = vn->value.block(seg.begin, h * head_dim, seg.length, head_dim);
            dv.block(seg.begin, h * head_dim, seg.length, head_dim).noalias() = p.transpose() * go;
            Matrix<Scalar> dp = go * vh.transpose();
            // Softmax backward restricted to the causal support (p is zero above the diagonal).
            for (Index i = 0; i < seg.length; ++i) {
              const Scalar dot = dp.row(i).head(i + 1).dot(p.row(i).head(i + 1));
              dp.row(i).head(i + 1) =
                  p.row(i).head(i + 1).cwiseProduct((dp.row(i).head(i + 1).array() - dot).matrix());
              dp.row(i).tail(seg.length - i - 1).setZero();
            }
            dp *= inv_sqrt;
            dq.block(seg.begin, h * head_dim, seg.length, head_dim).noalias() = dp * kh;
            dk.block(seg.begin, h * head_dim, seg.length, head_dim).noalias() = dp.transpose() * qh;
          }
        }
        if (qn->requires_grad) qn->accumulate(dq);
        if (kn->requires_grad) kn->accumulate(dk);
        if (vn->requires_grad) vn->accumulate(dv);
      });
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

// Mean negative log-likelihood of targets under row-wise softmax(logits),
// averaged over positions whose ignore flag is false.
template <typename Scalar>
Tensor<Scalar> cross_entropy_lm(const Tensor<Scalar>& logits, std::span<const int> targets,
                                const std::vector<bool>& ignore) {
  const Index n = logits.rows(), vocab = logits.cols();
  if (static_cast<Index>(targets.size()) != n || static_cast<Index>(ignore.size()) != n) {
    throw DimensionError("cross_entropy_lm: logits " + shape_string(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets / " +
                         std::to_string(ignore.size()) + " mask entries");
  }
  Index support = 0;
  for (Index i = 0; i < n; ++i) {
    if (ignore[static_cast<std::size_t>(i)]) continue;
    const int t = targets[static_cast<std::size_t>(i)];
    if (t < 0 || t >= vocab) {
      throw IndexError("cross_entropy_lm: target id " + std::to_string(t) +
                       " outside vocabulary of " + std::to_string(vocab));
    }
    ++support;
  }
  if (support == 0) throw ContractError("cross_entropy_lm: empty loss support");

  Matrix<Scalar> probs = Matrix<Scalar>::Zero(n, vocab);
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    if (ignore[static_cast<std::size_t>(i)]) continue;
    const auto row = logits.value().row(i);
    const double max = static_cast<double>(row.maxCoeff());
    double denom = 0.0;
    for (Index j = 0; j < vocab; ++j) denom += std::exp(static_cast<double>(row(j)) - max);
    const double log_denom = std::log(denom) + max;
    total += log_denom - static_cast<double>(row(targets[static_cast<std::size_t>(i)]));
    for (Index j = 0; j < vocab; ++j)
      probs(i, j) = static_cast<Scalar>(std::exp(static_cast<double>(row(j)) - log_denom));
  }
  Matrix<Scalar> value(1, 1);
  value(0, 0) = static_cast<Scalar>(total / static_cast<double>(support));
  auto ln = logits.node();
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<bool> ign = ignore;
  return detail::make_result<Scalar>(
      {}, std::move(value), {logits},
      [ln, probs = std::move(probs), tgt, ign, support](Node<Scalar>& out) {
        const Scalar coef = out.grad(0, 0) / static_cast<Scalar>(support);
        Matrix<Scalar> delta = probs * coef;
        for (std::size_t i = 0; i < tgt.size(); ++i)
          if (!ign[i]) delta(static_cast<Index>(i), tgt[i]) -= coef;
        ln->accumulate(delta);
      });
}

// Copies values of a tensor into another scalar type as a fresh leaf.
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t, bool requires_grad = false) {
  return Tensor<To>::leaf(t.shape(), t.value().template cast<To>(), requires_grad);
}

}  // namespace elusive::ad
