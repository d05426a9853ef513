// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over dense tensors.
//
// The op set is deliberately closed: it is exactly what a bidirectional GRU
// classifier over embedding sums needs (matmul forms, elementwise arithmetic,
// sigmoid/tanh, concat/slice, embedding gather, fused softmax cross-entropy).
// Graphs are dynamic: each forward pass builds fresh op nodes that reference
// persistent leaf nodes, and backward() walks the DAG once in reverse
// topological order, accumulating gradients additively at fan-out.
//
// Real = float is the training dtype; Real = double is verification mode,
// where every op additionally checks its output for non-finite values.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

#include "turnwise/errors.hpp"

namespace turnwise {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

template <typename Real>
struct TensorNode {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void()> backprop;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), Real(0));
  }
};

// Value-semantics handle to a node in the gradient graph. Copies share the
// node; op results hold their operands alive through parent edges.
template <typename Real>
class Tensor {
 public:
  using Node = TensorNode<Real>;

  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<Real> data) {
    return make_leaf(std::move(shape), std::move(data), false);
  }

  static Tensor scalar(Real v) { return constant({1}, {v}); }

  static Tensor zeros(Shape shape) {
    auto n = shape_numel(shape);
    return make_leaf(std::move(shape), std::vector<Real>(size_t(n), Real(0)), false);
  }

  static Tensor full(Shape shape, Real v) {
    auto n = shape_numel(shape);
    return make_leaf(std::move(shape), std::vector<Real>(size_t(n), v), false);
  }

  // Trainable leaf.
  static Tensor variable(Shape shape, std::vector<Real> data) {
    return make_leaf(std::move(shape), std::move(data), true);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return int(node_->shape.size()); }
  int dim(int i) const { return node_->shape[size_t(i)]; }
  int64_t numel() const { return int64_t(node_->value.size()); }

  const std::vector<Real>& value() const { return node_->value; }
  std::vector<Real>& value() { return node_->value; }

  // Empty vector until a backward pass has touched this node.
  const std::vector<Real>& grad() const { return node_->grad; }
  std::vector<Real>& grad_buffer() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.assign(node_->value.size(), Real(0));
  }

  bool requires_grad() const { return node_->requires_grad; }

  Real item() const {
    if (numel() != 1) throw std::invalid_argument("Tensor::item: tensor is not scalar");
    return node_->value[0];
  }

  std::shared_ptr<Node> node() const { return node_; }

  static Tensor from_node(std::shared_ptr<Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  static Tensor make_leaf(Shape shape, std::vector<Real> data, bool requires_grad) {
    if (int64_t(data.size()) != shape_numel(shape))
      throw shape_error("tensor data size does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return from_node(std::move(n));
  }

  std::shared_ptr<Node> node_;
};

namespace detail {

template <typename Real>
void check_finite(const TensorNode<Real>& n, const char* op) {
  if constexpr (std::is_same_v<Real, double>) {
    for (Real v : n.value)
      if (!std::isfinite(v))
        throw numeric_error(std::string("non-finite value in op '") + op + "'");
  }
}

template <typename Real>
Tensor<Real> make_op(Shape shape, std::vector<Real> value,
                     std::vector<std::shared_ptr<TensorNode<Real>>> parents) {
  auto n = std::make_shared<TensorNode<Real>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->requires_grad) {
      n->requires_grad = true;
      break;
    }
  return Tensor<Real>::from_node(std::move(n));
}

template <typename Real>
void require_same_shape(const Tensor<Real>& a, const Tensor<Real>& b, const char* op) {
  if (a.shape() != b.shape())
    throw shape_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                      " vs " + shape_str(b.shape()));
}

}  // namespace detail

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<Real> v(a.value().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] + b.value()[i];
  auto out = detail::make_op<Real>(a.shape(), std::move(v), {a.node(), b.node()});
  detail::check_finite(*out.node(), "add");
  auto* an = a.node().get();
  auto* bn = b.node().get();
  auto* on = out.node().get();
  on->backprop = [an, bn, on] {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
    }
  };
  return out;
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<Real> v(a.value().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] - b.value()[i];
  auto out = detail::make_op<Real>(a.shape(), std::move(v), {a.node(), b.node()});
  detail::check_finite(*out.node(), "sub");
  auto* an = a.node().get();
  auto* bn = b.node().get();
  auto* on = out.node().get();
  on->backprop = [an, bn, on] {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
    }
  };
  return out;
}

// Elementwise product.
template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<Real> v(a.value().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] * b.value()[i];
  auto out = detail::make_op<Real>(a.shape(), std::move(v), {a.node(), b.node()});
  detail::check_finite(*out.node(), "mul");
  auto* an = a.node().get();
  auto* bn = b.node().get();
  auto* on = out.node().get();
  on->backprop = [an, bn, on] {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i] * an->value[i];
    }
  };
  return out;
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real c) {
  std::vector<Real> v(a.value().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] * c;
  auto out = detail::make_op<Real>(a.shape(), std::move(v), {a.node()});
  detail::check_finite(*out.node(), "scale");
  auto* an = a.node().get();
  auto* on = out.node().get();
  on->backprop = [an, on, c] {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * c;
  };
  return out;
}

// [m x k] @ [k x n] -> [m x n]
template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw shape_error("matmul: incompatible shapes " + shape_str(a.shape()) + " @ " +
                      shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<Real> v(size_t(m) * size_t(n), Real(0));
  const auto& av = a.value();
  const auto& bv = b.value();
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      const Real aip = av[size_t(i) * k + p];
      for (int j = 0; j < n; ++j) v[size_t(i) * n + j] += aip * bv[size_t(p) * n + j];
    }
  auto out = detail::make_op<Real>({m, n}, std::move(v), {a.node(), b.node()});
  detail::check_finite(*out.node(), "matmul");
  auto* an = a.node().get();
  auto* bn = b.node().get();
  auto* on = out.node().get();
  on->backprop = [an, bn, on, m, k, n] {
    if (an->requires_grad) {
      an->ensure_grad();
      // dA = g @ B^T
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
          Real s = 0;
          for (int j = 0; j < n; ++j)
            s += on->grad[size_t(i) * n + j] * bn->value[size_t(p) * n + j];
          an->grad[size_t(i) * k + p] += s;
        }
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      // dB = A^T @ g
      for (int p = 0; p < k; ++p)
        for (int j = 0; j < n; ++j) {
          Real s = 0;
          for (int i = 0; i < m; ++i)
            s += an->value[size_t(i) * k + p] * on->grad[size_t(i) * n + j];
          bn->grad[size_t(p) * n + j] += s;
        }
    }
  };
  return out;
}

// [m x k] @ [k] -> [m]
template <typename Real>
Tensor<Real> matvec(const Tensor<Real>& a, const Tensor<Real>& x) {
  if (a.rank() != 2 || x.rank() != 1 || a.dim(1) != x.dim(0))
    throw shape_error("matvec: incompatible shapes " + shape_str(a.shape()) + " @ " +
                      shape_str(x.shape()));
  const int m = a.dim(0), k = a.dim(1);
  std::vector<Real> v(size_t(m), Real(0));
  for (int i = 0; i < m; ++i) {
    Real s = 0;
    for (int p = 0; p < k; ++p) s += a.value()[size_t(i) * k + p] * x.value()[size_t(p)];
    v[size_t(i)] = s;
  }
  auto out = detail::make_op<Real>({m}, std::move(v), {a.node(), x.node()});
  detail::check_finite(*out.node(), "matvec");
  auto* an = a.node().get();
  auto* xn = x.node().get();
  auto* on = out.node().get();
  on->backprop = [an, xn, on, m, k] {
    if (an->requires_grad) {
      an->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p)
          an->grad[size_t(i) * k + p] += on->grad[size_t(i)] * xn->value[size_t(p)];
    }
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p)
          xn->grad[size_t(p)] += an->value[size_t(i) * k + p] * on->grad[size_t(i)];
    }
  };
  return out;
}

// [m] @ [m x k] -> [k]
template <typename Real>
Tensor<Real> vecmat(const Tensor<Real>& x, const Tensor<Real>& a) {
  if (x.rank() != 1 || a.rank() != 2 || x.dim(0) != a.dim(0))
    throw shape_error("vecmat: incompatible shapes " + shape_str(x.shape()) + " @ " +
                      shape_str(a.shape()));
  const int m = a.dim(0), k = a.dim(1);
  std::vector<Real> v(size_t(k), Real(0));
  for (int i = 0; i < m; ++i) {
    const Real xi = x.value()[size_t(i)];
    for (int j = 0; j < k; ++j) v[size_t(j)] += xi * a.value()[size_t(i) * k + j];
  }
  auto out = detail::make_op<Real>({k}, std::move(v), {x.node(), a.node()});
  detail::check_finite(*out.node(), "vecmat");
  auto* xn = x.node().get();
  auto* an = a.node().get();
  auto* on = out.node().get();
  on->backprop = [xn, an, on, m, k] {
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (int i = 0; i < m; ++i) {
        Real s = 0;
        for (int j = 0; j < k; ++j) s += an->value[size_t(i) * k + j] * on->grad[size_t(j)];
        xn->grad[size_t(i)] += s;
      }
    }
    if (an->requires_grad) {
      an->ensure_grad();
      for (int i = 0; i < m; ++i) {
        const Real xi = xn->value[size_t(i)];
        for (int j = 0; j < k; ++j) an->grad[size_t(i) * k + j] += xi * on->grad[size_t(j)];
      }
    }
  };
  return out;
}

template <typename Real>
Tensor<Real> sigmoid(const Tensor<Real>& x) {
  std::vector<Real> v(x.value().size());
  for (size_t i = 0; i < v.size(); ++i) {
    const Real z = x.value()[i];
    // Split by sign so exp never overflows.
    v[i] = z >= 0 ? Real(1) / (Real(1) + std::exp(-z))
                  : std::exp(z) / (Real(1) + std::exp(z));
  }
  auto out = detail::make_op<Real>(x.shape(), std::move(v), {x.node()});
  detail::check_finite(*out.node(), "sigmoid");
  auto* xn = x.node().get();
  auto* on = out.node().get();
  on->backprop = [xn, on] {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < on->grad.size(); ++i) {
      const Real y = on->value[i];
      xn->grad[i] += on->grad[i] * y * (Real(1) - y);
    }
  };
  return out;
}

template <typename Real>
Tensor<Real> tanh(const Tensor<Real>& x) {
  std::vector<Real> v(x.value().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = std::tanh(x.value()[i]);
  auto out = detail::make_op<Real>(x.shape(), std::move(v), {x.node()});
  detail::check_finite(*out.node(), "tanh");
  auto* xn = x.node().get();
  auto* on = out.node().get();
  on->backprop = [xn, on] {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < on->grad.size(); ++i) {
      const Real y = on->value[i];
      xn->grad[i] += on->grad[i] * (Real(1) - y * y);
    }
  };
  return out;
}

// 1-D concatenation: [n] ++ [m] -> [n+m]
template <typename Real>
Tensor<Real> concat(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != 1 || b.rank() != 1)
    throw shape_error("concat: expects rank-1 operands, got " + shape_str(a.shape()) +
                      " and " + shape_str(b.shape()));
  const int n = a.dim(0), m = b.dim(0);
  std::vector<Real> v;
  v.reserve(size_t(n + m));
  v.insert(v.end(), a.value().begin(), a.value().end());
  v.insert(v.end(), b.value().begin(), b.value().end());
  auto out = detail::make_op<Real>({n + m}, std::move(v), {a.node(), b.node()});
  detail::check_finite(*out.node(), "concat");
  auto* an = a.node().get();
  auto* bn = b.node().get();
  auto* on = out.node().get();
  on->backprop = [an, bn, on, n, m] {
    if (an->requires_grad) {
      an->ensure_grad();
      for (int i = 0; i < n; ++i) an->grad[size_t(i)] += on->grad[size_t(i)];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int i = 0; i < m; ++i) bn->grad[size_t(i)] += on->grad[size_t(n + i)];
    }
  };
  return out;
}

// Stack rank-1 tensors of equal length into a [n x c] matrix.
template <typename Real>
Tensor<Real> stack_rows(const std::vector<Tensor<Real>>& rows) {
  if (rows.empty()) throw shape_error("stack_rows: no rows");
  const int c = rows[0].dim(0);
  std::vector<Real> v;
  v.reserve(rows.size() * size_t(c));
  std::vector<std::shared_ptr<TensorNode<Real>>> parents;
  parents.reserve(rows.size());
  for (const auto& r : rows) {
    if (r.rank() != 1 || r.dim(0) != c)
      throw shape_error("stack_rows: row shape mismatch, expected [" + std::to_string(c) +
                        "] got " + shape_str(r.shape()));
    v.insert(v.end(), r.value().begin(), r.value().end());
    parents.push_back(r.node());
  }
  const int n = int(rows.size());
  auto out = detail::make_op<Real>({n, c}, std::move(v), std::move(parents));
  detail::check_finite(*out.node(), "stack_rows");
  auto* on = out.node().get();
  on->backprop = [on, c] {
    for (size_t r = 0; r < on->parents.size(); ++r) {
      auto* pn = on->parents[r].get();
      if (!pn->requires_grad) continue;
      pn->ensure_grad();
      for (int j = 0; j < c; ++j) pn->grad[size_t(j)] += on->grad[r * size_t(c) + size_t(j)];
    }
  };
  return out;
}

// Contiguous 1-D slice.
template <typename Real>
Tensor<Real> slice(const Tensor<Real>& x, int start, int len) {
  if (x.rank() != 1) throw shape_error("slice: expects rank-1 operand");
  if (start < 0 || len < 0 || start + len > x.dim(0))
    throw std::invalid_argument("slice: range [" + std::to_string(start) + ", " +
                                std::to_string(start + len) + ") out of bounds for " +
                                shape_str(x.shape()));
  std::vector<Real> v(x.value().begin() + start, x.value().begin() + start + len);
  auto out = detail::make_op<Real>({len}, std::move(v), {x.node()});
  auto* xn = x.node().get();
  auto* on = out.node().get();
  on->backprop = [xn, on, start, len] {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (int i = 0; i < len; ++i) xn->grad[size_t(start + i)] += on->grad[size_t(i)];
  };
  return out;
}

// Row i of a matrix as a rank-1 tensor.
template <typename Real>
Tensor<Real> row(const Tensor<Real>& a, int i) {
  if (a.rank() != 2) throw shape_error("row: expects rank-2 operand");
  if (i < 0 || i >= a.dim(0))
    throw std::invalid_argument("row: index " + std::to_string(i) + " out of range for " +
                                shape_str(a.shape()));
  const int c = a.dim(1);
  std::vector<Real> v(a.value().begin() + size_t(i) * c, a.value().begin() + size_t(i + 1) * c);
  auto out = detail::make_op<Real>({c}, std::move(v), {a.node()});
  auto* an = a.node().get();
  auto* on = out.node().get();
  on->backprop = [an, on, i, c] {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (int j = 0; j < c; ++j) an->grad[size_t(i) * c + size_t(j)] += on->grad[size_t(j)];
  };
  return out;
}

// Embedding lookup: rows of table [V x d] selected by indices -> [n x d].
// Backward scatter-adds into the table; rows never gathered keep zero grad.
template <typename Real>
Tensor<Real> gather(const Tensor<Real>& table, const std::vector<int>& indices) {
  if (table.rank() != 2) throw shape_error("gather: table must be rank-2");
  const int rows_n = table.dim(0), d = table.dim(1);
  for (int ix : indices)
    if (ix < 0 || ix >= rows_n)
      throw std::out_of_range("gather: index " + std::to_string(ix) + " out of range [0, " +
                              std::to_string(rows_n) + ")");
  std::vector<Real> v;
  v.reserve(indices.size() * size_t(d));
  for (int ix : indices)
    v.insert(v.end(), table.value().begin() + size_t(ix) * d,
             table.value().begin() + size_t(ix + 1) * d);
  auto out =
      detail::make_op<Real>({int(indices.size()), d}, std::move(v), {table.node()});
  detail::check_finite(*out.node(), "gather");
  auto* tn = table.node().get();
  auto* on = out.node().get();
  auto idx = indices;
  on->backprop = [tn, on, idx = std::move(idx), d] {
    if (!tn->requires_grad) return;
    tn->ensure_grad();
    for (size_t r = 0; r < idx.size(); ++r)
      for (int j = 0; j < d; ++j)
        tn->grad[size_t(idx[r]) * d + size_t(j)] += on->grad[r * size_t(d) + size_t(j)];
  };
  return out;
}

// Single-row lookup as a rank-1 tensor.
template <typename Real>
Tensor<Real> gather_row(const Tensor<Real>& table, int index) {
  if (table.rank() != 2) throw shape_error("gather_row: table must be rank-2");
  const int rows_n = table.dim(0), d = table.dim(1);
  if (index < 0 || index >= rows_n)
    throw std::out_of_range("gather_row: index " + std::to_string(index) +
                            " out of range [0, " + std::to_string(rows_n) + ")");
  std::vector<Real> v(table.value().begin() + size_t(index) * d,
                      table.value().begin() + size_t(index + 1) * d);
  auto out = detail::make_op<Real>({d}, std::move(v), {table.node()});
  detail::check_finite(*out.node(), "gather_row");
  auto* tn = table.node().get();
  auto* on = out.node().get();
  on->backprop = [tn, on, index, d] {
    if (!tn->requires_grad) return;
    tn->ensure_grad();
    for (int j = 0; j < d; ++j)
      tn->grad[size_t(index) * d + size_t(j)] += on->grad[size_t(j)];
  };
  return out;
}

enum class Reduction { Mean, Sum };

inline constexpr int kIgnoreIndex = -1;

// Fused log-softmax + negative log-likelihood over rows of logits [n x K]
// (rank-1 input is treated as one row). Labels equal to ignore_index
// contribute zero loss and zero gradient and are excluded from the mean.
template <typename Real>
Tensor<Real> softmax_cross_entropy(const Tensor<Real>& logits, const std::vector<int>& labels,
                                   int ignore_index = kIgnoreIndex,
                                   Reduction reduction = Reduction::Mean) {
  int n = 0, k = 0;
  if (logits.rank() == 2) {
    n = logits.dim(0);
    k = logits.dim(1);
  } else if (logits.rank() == 1) {
    n = 1;
    k = logits.dim(0);
  } else {
    throw shape_error("softmax_cross_entropy: logits must be rank-1 or rank-2");
  }
  if (int(labels.size()) != n)
    throw shape_error("softmax_cross_entropy: " + std::to_string(labels.size()) +
                      " labels for " + std::to_string(n) + " rows");
  for (int y : labels)
    if (y != ignore_index && (y < 0 || y >= k))
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(y) +
                              " out of range [0, " + std::to_string(k) + ")");

  std::vector<Real> lse(size_t(n), Real(0));
  Real total = 0;
  int64_t count = 0;
  for (int i = 0; i < n; ++i) {
    const Real* l = logits.value().data() + size_t(i) * k;
    Real mx = l[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, l[j]);
    Real s = 0;
    for (int j = 0; j < k; ++j) s += std::exp(l[j] - mx);
    lse[size_t(i)] = mx + std::log(s);
    if (labels[size_t(i)] != ignore_index) {
      total += lse[size_t(i)] - l[labels[size_t(i)]];
      ++count;
    }
  }
  const Real out_v =
      reduction == Reduction::Mean ? (count > 0 ? total / Real(count) : Real(0)) : total;
  auto out = detail::make_op<Real>({1}, {out_v}, {logits.node()});
  detail::check_finite(*out.node(), "softmax_cross_entropy");
  auto* ln = logits.node().get();
  auto* on = out.node().get();
  on->backprop = [ln, on, labels, ignore_index, reduction, lse = std::move(lse), n, k, count] {
    if (!ln->requires_grad) return;
    ln->ensure_grad();
    const Real w = on->grad[0] * (reduction == Reduction::Mean && count > 0
                                      ? Real(1) / Real(count)
                                      : Real(1));
    for (int i = 0; i < n; ++i) {
      const int y = labels[size_t(i)];
      if (y == ignore_index) continue;
      const Real* l = ln->value.data() + size_t(i) * k;
      Real* g = ln->grad.data() + size_t(i) * k;
      for (int j = 0; j < k; ++j) {
        const Real p = std::exp(l[j] - lse[size_t(i)]);
        g[j] += w * (p - Real(j == y));
      }
    }
  };
  return out;
}

// Count of labels that participate in the loss.
inline int64_t non_ignored_count(const std::vector<int>& labels, int ignore_index = kIgnoreIndex) {
  int64_t c = 0;
  for (int y : labels) c += (y != ignore_index);
  return c;
}

// Reverse pass from a scalar loss. Gradients accumulate additively, so
// fan-out sums and repeated backward calls stack; callers zero grads between
// steps.
template <typename Real>
void backward(const Tensor<Real>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be a defined scalar tensor");
  using Node = TensorNode<Real>;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  struct Frame {
    Node* n;
    size_t next;
  };
  std::vector<Frame> stack;
  Node* root = loss.node().get();
  stack.push_back({root, 0});
  seen.insert(root);
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      Node* p = f.n->parents[f.next++].get();
      if (seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* nd = *it;
    if (nd->requires_grad && nd->backprop && !nd->grad.empty()) nd->backprop();
  }
}

// A named trainable tensor. frozen_rows lists rows of a rank-2 parameter
// whose gradient is forced to zero before every optimizer update.
template <typename Real>
struct Parameter {
  std::string name;
  Tensor<Real> tensor;
  std::vector<int> frozen_rows;

  Parameter() = default;
  Parameter(std::string n, Shape shape)
      : name(std::move(n)),
        tensor(Tensor<Real>::variable(shape,
                                      std::vector<Real>(size_t(shape_numel(shape)), Real(0)))) {}
  Parameter(std::string n, Shape shape, std::vector<Real> data)
      : name(std::move(n)), tensor(Tensor<Real>::variable(shape, std::move(data))) {}

  int64_t numel() const { return tensor.numel(); }
};

template <typename Real>
void zero_grads(const std::vector<Parameter<Real>*>& params) {
  for (auto* p : params) p->tensor.zero_grad();
}

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0;
  double max_abs_err = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0;
  bool pass(double tol) const { return max_rel_err < tol; }
};

// Central-difference check of analytic gradients, 64-bit only. The relative
// error denominator is floored so exact-zero gradient coordinates (untouched
// embedding rows) compare at absolute scale instead of dividing by zero.
template <typename LossFn>
GradCheckReport grad_check(LossFn&& f, const std::vector<Parameter<double>*>& params,
                           double eps = 1e-5, double denom_floor = 1e-6) {
  zero_grads(params);
  {
    Tensor<double> loss = f();
    backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto* p : params) {
    if (p->tensor.grad().empty())
      analytic.emplace_back(size_t(p->numel()), 0.0);
    else
      analytic.push_back(p->tensor.grad());
  }

  GradCheckReport report;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Parameter<double>* p = params[pi];
    GradCheckEntry entry;
    entry.name = p->name;
    auto& vals = p->tensor.value();
    for (size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + eps;
      const double fp = f().item();
      vals[i] = orig - eps;
      const double fm = f().item();
      vals[i] = orig;
      const double fd = (fp - fm) / (2 * eps);
      const double a = analytic[pi][i];
      const double abs_err = std::abs(a - fd);
      const double rel = abs_err / std::max(std::abs(a) + std::abs(fd), denom_floor);
      entry.max_abs_err = std::max(entry.max_abs_err, abs_err);
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace turnwise
