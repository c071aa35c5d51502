#ifndef PDEN_AUTODIFF_HPP
#define PDEN_AUTODIFF_HPP

// Reverse-mode automatic differentiation over Tensor.
//
// A Var is a shared handle to a tape node. Every op records its parents and a
// backward rule that reads the node's upstream gradient and accumulates into
// the parents that require gradients. There is no broadcasting beyond
// scalar-by-tensor; per-row / per-channel combinations are explicit ops
// (linear, add_channel_bias, channel_affine) so each backward rule stays small.

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "pden/tensor.hpp"

namespace pden {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::string op;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return parents.empty(); }

  Tensor& grad_buffer() {
    if (grad.size() != value.size()) grad = Tensor(value.shape(), 0.0);
    return grad;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->op = "constant";
    return Var(std::move(n));
  }

  static Var parameter(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    n->op = "parameter";
    return Var(std::move(n));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  /// Direct access for optimizers and initializers; never use on a node
  /// whose consumers are still waiting for backward.
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  double item() const { return node_->value.item(); }

  /// Gradient accumulated by backward(); zeros if nothing reached this node.
  const Tensor& grad() const { return node_->grad_buffer(); }

  void zero_grad() {
    if (node_->grad.size() == node_->value.size()) node_->grad.fill(0.0);
  }

  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Records a new tape node. Exposed so that tests can build custom ops
/// (including deliberately wrong backward rules as negative controls).
inline Var make_op(std::string op, Tensor value, std::vector<Var> parents,
                   std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = std::move(op);
  for (auto& p : parents) {
    if (p.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    for (auto& p : parents) n->parents.push_back(p.ptr());
    n->backward = std::move(backward);
  }
  return Var(std::move(n));
}

/// Propagates d(root)/d(node) to every reachable node. Leaf gradients
/// accumulate across calls; interior gradients are recomputed each call.
inline void backward(const Var& root) {
  if (!root.value().is_scalar()) {
    throw ShapeError("backward() requires a scalar root, got " + to_string(root.shape()));
  }
  if (!root.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{&root.node(), 0}};
  seen.insert(&root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (!n->is_leaf()) n->grad_buffer().fill(0.0);
  }
  root.node().grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward) n->backward(*n);
  }
}

namespace detail {

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

inline Tensor& parent_grad(Node& n, std::size_t i) { return n.parents[i]->grad_buffer(); }
inline bool wants(Node& n, std::size_t i) { return n.parents[i]->requires_grad; }

template <class F>
Var unary(const char* op, const Var& a, F&& fwd_and_deriv) {
  // fwd_and_deriv(x) -> pair{f(x), f'(x)}
  const Tensor& x = a.value();
  Tensor y(x.shape());
  Tensor d(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto [f, df] = fwd_and_deriv(x[i]);
    y[i] = f;
    d[i] = df;
  }
  return make_op(op, std::move(y), {a}, [d = std::move(d)](Node& n) {
    Tensor& g = parent_grad(n, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * d[i];
  });
}

}  // namespace detail

inline Var detach(const Var& a) { return Var::constant(a.value()); }

// ---------------------------------------------------------------- elementwise

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
  return make_op("add", std::move(y), {a, b}, [](Node& n) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!detail::wants(n, k)) continue;
      Tensor& g = detail::parent_grad(n, k);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  return make_op("sub", std::move(y), {a, b}, [](Node& n) {
    if (detail::wants(n, 0)) {
      Tensor& g = detail::parent_grad(n, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (detail::wants(n, 1)) {
      Tensor& g = detail::parent_grad(n, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return make_op("mul", std::move(y), {a, b}, [](Node& n) {
    const Tensor& av = n.parents[0]->value;
    const Tensor& bv = n.parents[1]->value;
    if (detail::wants(n, 0)) {
      Tensor& g = detail::parent_grad(n, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * bv[i];
    }
    if (detail::wants(n, 1)) {
      Tensor& g = detail::parent_grad(n, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * av[i];
    }
  });
}

inline Var div(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "div");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (b.value()[i] == 0.0) throw DomainError("div: division by zero");
    y[i] /= b.value()[i];
  }
  return make_op("div", std::move(y), {a, b}, [](Node& n) {
    const Tensor& bv = n.parents[1]->value;
    if (detail::wants(n, 0)) {
      Tensor& g = detail::parent_grad(n, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] / bv[i];
    }
    if (detail::wants(n, 1)) {
      Tensor& g = detail::parent_grad(n, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i] * n.value[i] / bv[i];
    }
  });
}

inline Var neg(const Var& a) {
  return detail::unary("neg", a, [](double x) { return std::pair{-x, -1.0}; });
}

inline Var add_scalar(const Var& a, double s) {
  return detail::unary("add_scalar", a, [s](double x) { return std::pair{x + s, 1.0}; });
}

inline Var mul_scalar(const Var& a, double s) {
  return detail::unary("mul_scalar", a, [s](double x) { return std::pair{x * s, s}; });
}

inline Var exp(const Var& a) {
  return detail::unary("exp", a, [](double x) {
    const double e = std::exp(x);
    return std::pair{e, e};
  });
}

inline Var log(const Var& a) {
  for (double v : a.value().data()) {
    if (!(v > 0.0)) throw DomainError("log: non-positive input");
  }
  return detail::unary("log", a, [](double x) { return std::pair{std::log(x), 1.0 / x}; });
}

inline Var sqrt(const Var& a) {
  for (double v : a.value().data()) {
    if (!(v > 0.0)) throw DomainError("sqrt: non-positive input");
  }
  return detail::unary("sqrt", a, [](double x) {
    const double r = std::sqrt(x);
    return std::pair{r, 0.5 / r};
  });
}

inline Var relu(const Var& a) {
  return detail::unary("relu", a,
                       [](double x) { return x > 0.0 ? std::pair{x, 1.0} : std::pair{0.0, 0.0}; });
}

inline Var tanh(const Var& a) {
  return detail::unary("tanh", a, [](double x) {
    const double t = std::tanh(x);
    return std::pair{t, 1.0 - t * t};
  });
}

inline Var sigmoid(const Var& a) {
  return detail::unary("sigmoid", a, [](double x) {
    const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    return std::pair{s, s * (1.0 - s)};
  });
}

inline Var clamp_min(const Var& a, double lo) {
  return detail::unary("clamp_min", a,
                       [lo](double x) { return x < lo ? std::pair{lo, 0.0} : std::pair{x, 1.0}; });
}

inline Var clamp_max(const Var& a, double hi) {
  return detail::unary("clamp_max", a,
                       [hi](double x) { return x > hi ? std::pair{hi, 0.0} : std::pair{x, 1.0}; });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator+(const Var& a, double s) { return add_scalar(a, s); }
inline Var operator+(double s, const Var& a) { return add_scalar(a, s); }
inline Var operator-(const Var& a, double s) { return add_scalar(a, -s); }
inline Var operator-(double s, const Var& a) { return add_scalar(neg(a), s); }
inline Var operator*(const Var& a, double s) { return mul_scalar(a, s); }
inline Var operator*(double s, const Var& a) { return mul_scalar(a, s); }

// ----------------------------------------------------------------- reductions

inline Var sum(const Var& a) {
  return make_op("sum", Tensor::scalar(a.value().sum()), {a}, [](Node& n) {
    Tensor& g = detail::parent_grad(n, 0);
    const double up = n.grad[0];
    for (auto& v : g.data()) v += up;
  });
}

inline Var mean(const Var& a) {
  const double inv = 1.0 / static_cast<double>(a.size());
  return make_op("mean", Tensor::scalar(a.value().sum() * inv), {a}, [inv](Node& n) {
    Tensor& g = detail::parent_grad(n, 0);
    const double up = n.grad[0] * inv;
    for (auto& v : g.data()) v += up;
  });
}

/// [N x M] -> [N]
inline Var row_sum(const Var& a) {
  if (a.value().rank() != 2) throw ShapeError("row_sum expects a matrix");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  Tensor y(Shape{rows});
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += a.value()[i * cols + j];
    y[i] = s;
  }
  return make_op("row_sum", std::move(y), {a}, [rows, cols](Node& n) {
    Tensor& g = detail::parent_grad(n, 0);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) g[i * cols + j] += n.grad[i];
  });
}

/// Euclidean norm of each leading-axis slice: [N x ...] -> [N].
/// The gradient of a zero-norm row is taken as zero.
inline Var row_norm(const Var& a) {
  const std::size_t rows = a.dim(0);
  const std::size_t cols = a.size() / rows;
  Tensor y(Shape{rows});
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double v = a.value()[i * cols + j];
      s += v * v;
    }
    y[i] = std::sqrt(s);
  }
  return make_op("row_norm", std::move(y), {a}, [rows, cols](Node& n) {
    Tensor& g = detail::parent_grad(n, 0);
    const Tensor& x = n.parents[0]->value;
    for (std::size_t i = 0; i < rows; ++i) {
      if (n.value[i] == 0.0) continue;
      const double s = n.grad[i] / n.value[i];
      for (std::size_t j = 0; j < cols; ++j) g[i * cols + j] += s * x[i * cols + j];
    }
  });
}

/// out[i] = a[i, idx[i]]
inline Var pick(const Var& a, std::vector<std::size_t> idx) {
  if (a.value().rank() != 2 || idx.size() != a.dim(0)) {
    throw ShapeError("pick expects [N x M] and N indices");
  }
  const std::size_t cols = a.dim(1);
  Tensor y(Shape{idx.size()});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= cols) throw ShapeError("pick index out of range");
    y[i] = a.value()[i * cols + idx[i]];
  }
  return make_op("pick", std::move(y), {a}, [idx = std::move(idx), cols](Node& n) {
    Tensor& g = detail::parent_grad(n, 0);
    for (std::size_t i = 0; i < idx.size(); ++i) g[i * cols + idx[i]] += n.grad[i];
  });
}

// ---------------------------------------------------------------------- shape

inline Var reshape(const Var& a, Shape shape) {
  Tensor y = a.value().reshaped(std::move(shape));
  return make_op("reshape", std::move(y), {a}, [](Node& n) {
    Tensor& g = detail::parent_grad(n, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

/// [N x ...] -> [N x rest]
inline Var flatten(const Var& a) {
  const std::size_t rows = a.dim(0);
  return reshape(a, Shape{rows, a.size() / rows});
}

inline Var transpose(const Var& a) {
  if (a.value().rank() != 2) throw ShapeError("transpose expects a matrix");
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor y(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[j * r + i] = a.value()[i * c + j];
  return make_op("transpose", std::move(y), {a}, [r, c](Node& n) {
    Tensor& g = detail::parent_grad(n, 0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += n.grad[j * r + i];
  });
}

inline Var concat_rows(const Var& a, const Var& b) {
  Tensor y = concat_rows(a.value(), b.value());
  const std::size_t split = a.size();
  return make_op("concat_rows", std::move(y), {a, b}, [split](Node& n) {
    if (detail::wants(n, 0)) {
      Tensor& g = detail::parent_grad(n, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (detail::wants(n, 1)) {
      Tensor& g = detail::parent_grad(n, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[split + i];
    }
  });
}

// --------------------------------------------------------------------- linear

namespace detail {

// c[m x n] += a[m x k] * b[k x n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x k] += g[m x n] * b[k x n]^T
inline void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
      c[i * k + p] += s;
    }
  }
}

// c[k x n] += a[m x k]^T * g[m x n]
inline void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  if (a.value().rank() != 2 || b.value().rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor y(Shape{m, n}, 0.0);
  detail::gemm_nn(a.value().data().data(), b.value().data().data(), y.data().data(), m, k, n);
  return make_op("matmul", std::move(y), {a, b}, [m, k, n](Node& nd) {
    const double* g = nd.grad.data().data();
    if (detail::wants(nd, 0)) {
      detail::gemm_nt(g, nd.parents[1]->value.data().data(),
                      detail::parent_grad(nd, 0).data().data(), m, k, n);
    }
    if (detail::wants(nd, 1)) {
      detail::gemm_tn(nd.parents[0]->value.data().data(), g,
                      detail::parent_grad(nd, 1).data().data(), m, k, n);
    }
  });
}

/// x[N x I] * w[I x O] + b[O]
inline Var linear(const Var& x, const Var& w, const Var& b) {
  if (b.value().rank() != 1 || w.value().rank() != 2 || b.dim(0) != w.dim(1)) {
    throw ShapeError("linear: bias must match output width");
  }
  Var y = matmul(x, w);
  const std::size_t rows = y.dim(0), cols = y.dim(1);
  Tensor out = y.value();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] += b.value()[j];
  return make_op("linear_bias", std::move(out), {y, b}, [rows, cols](Node& n) {
    if (detail::wants(n, 0)) {
      Tensor& g = detail::parent_grad(n, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (detail::wants(n, 1)) {
      Tensor& g = detail::parent_grad(n, 1);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) g[j] += n.grad[i * cols + j];
    }
  });
}

// ---------------------------------------------------------- row-wise functions

/// Numerically stable row softmax of [N x M].
inline Var softmax(const Var& a) {
  if (a.value().rank() != 2) throw ShapeError("softmax expects [N x M]");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  Tensor y(a.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    const double* x = &a.value().data()[i * cols];
    double mx = x[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += (y[i * cols + j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < cols; ++j) y[i * cols + j] /= s;
  }
  return make_op("softmax", std::move(y), {a}, [rows, cols](Node& n) {
    Tensor& g = detail::parent_grad(n, 0);
    for (std::size_t i = 0; i < rows; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j) dot += n.grad[i * cols + j] * n.value[i * cols + j];
      for (std::size_t j = 0; j < cols; ++j)
        g[i * cols + j] += n.value[i * cols + j] * (n.grad[i * cols + j] - dot);
    }
  });
}

inline constexpr double kNormalizeEps = 1e-12;

/// Projects each row of [N x D] onto the unit sphere.
inline Var l2_normalize(const Var& a) {
  if (a.value().rank() != 2) throw ShapeError("l2_normalize expects [N x D]");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  Tensor y(a.shape());
  std::vector<double> norms(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += a.value()[i * cols + j] * a.value()[i * cols + j];
    norms[i] = std::sqrt(s);
    if (!(norms[i] > kNormalizeEps)) throw DomainError("l2_normalize: near-zero row norm");
    for (std::size_t j = 0; j < cols; ++j) y[i * cols + j] = a.value()[i * cols + j] / norms[i];
  }
  return make_op("l2_normalize", std::move(y), {a}, [rows, cols, norms = std::move(norms)](Node& n) {
    Tensor& g = detail::parent_grad(n, 0);
    for (std::size_t i = 0; i < rows; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j) dot += n.grad[i * cols + j] * n.value[i * cols + j];
      for (std::size_t j = 0; j < cols; ++j)
        g[i * cols + j] += (n.grad[i * cols + j] - n.value[i * cols + j] * dot) / norms[i];
    }
  });
}

// ------------------------------------------------------------------- images

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
};

namespace detail {

// Output positions o in [lo, hi) whose input index o*stride + k - pad lies in [0, in).
inline std::pair<std::size_t, std::size_t> valid_range(long in, long out, long k, long stride,
                                                       long pad) {
  long lo = 0;
  if (pad - k > 0) lo = (pad - k + stride - 1) / stride;
  long hi_num = in - 1 + pad - k;
  long hi = hi_num < 0 ? 0 : hi_num / stride + 1;
  hi = std::min(hi, out);
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace detail

/// Cross-correlation of x[N x C x H x W] with w[O x C x kh x kw].
inline Var conv2d(const Var& x, const Var& w, Conv2dOptions opt = {}) {
  if (opt.stride <= 0) throw ShapeError("conv2d: stride must be positive");
  if (opt.padding < 0) throw ShapeError("conv2d: padding must be nonnegative");
  if (x.value().rank() != 4 || w.value().rank() != 4 || x.dim(1) != w.dim(1)) {
    throw ShapeError("conv2d: expected x[N,C,H,W] and w[O,C,kh,kw], got " + to_string(x.shape()) +
                     " and " + to_string(w.shape()));
  }
  const long N = static_cast<long>(x.dim(0)), C = static_cast<long>(x.dim(1));
  const long H = static_cast<long>(x.dim(2)), W = static_cast<long>(x.dim(3));
  const long O = static_cast<long>(w.dim(0)), KH = static_cast<long>(w.dim(2)),
             KW = static_cast<long>(w.dim(3));
  const long s = opt.stride, p = opt.padding;
  if (KH > H + 2 * p || KW > W + 2 * p) throw ShapeError("conv2d: kernel larger than padded input");
  const long OH = (H + 2 * p - KH) / s + 1;
  const long OW = (W + 2 * p - KW) / s + 1;

  Tensor y(Shape{static_cast<std::size_t>(N), static_cast<std::size_t>(O),
                 static_cast<std::size_t>(OH), static_cast<std::size_t>(OW)},
           0.0);
  const double* xd = x.value().data().data();
  const double* wd = w.value().data().data();
  double* yd = y.data().data();

  // Iterates every (output plane, input plane, kernel tap) with the valid
  // output row/col ranges precomputed so the inner loop is branch-free.
  auto for_each_tap = [=](auto&& body) {
    for (long ki = 0; ki < KH; ++ki) {
      const auto [oh_lo, oh_hi] = detail::valid_range(H, OH, ki, s, p);
      for (long kj = 0; kj < KW; ++kj) {
        const auto [ow_lo, ow_hi] = detail::valid_range(W, OW, kj, s, p);
        body(ki, kj, oh_lo, oh_hi, ow_lo, ow_hi);
      }
    }
  };

  for (long n = 0; n < N; ++n)
    for (long o = 0; o < O; ++o) {
      double* yp = yd + (n * O + o) * OH * OW;
      for (long c = 0; c < C; ++c) {
        const double* xp = xd + (n * C + c) * H * W;
        const double* wp = wd + (o * C + c) * KH * KW;
        for_each_tap([&](long ki, long kj, std::size_t oh_lo, std::size_t oh_hi, std::size_t ow_lo,
                         std::size_t ow_hi) {
          const double wv = wp[ki * KW + kj];
          for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
            const double* xrow = xp + (static_cast<long>(oh) * s + ki - p) * W + (kj - p);
            double* yrow = yp + static_cast<long>(oh) * OW;
            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) yrow[ow] += wv * xrow[ow * s];
          }
        });
      }
    }

  return make_op("conv2d", std::move(y), {x, w}, [=](Node& nd) {
    const double* g = nd.grad.data().data();
    const bool want_x = detail::wants(nd, 0), want_w = detail::wants(nd, 1);
    const double* xv = nd.parents[0]->value.data().data();
    const double* wv_all = nd.parents[1]->value.data().data();
    double* gx = want_x ? detail::parent_grad(nd, 0).data().data() : nullptr;
    double* gw = want_w ? detail::parent_grad(nd, 1).data().data() : nullptr;
    for (long n = 0; n < N; ++n)
      for (long o = 0; o < O; ++o) {
        const double* gp = g + (n * O + o) * OH * OW;
        for (long c = 0; c < C; ++c) {
          const long xoff = (n * C + c) * H * W;
          const long woff = (o * C + c) * KH * KW;
          for_each_tap([&](long ki, long kj, std::size_t oh_lo, std::size_t oh_hi,
                           std::size_t ow_lo, std::size_t ow_hi) {
            const double wv = wv_all[woff + ki * KW + kj];
            double acc = 0.0;
            for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
              const long row = xoff + (static_cast<long>(oh) * s + ki - p) * W + (kj - p);
              const double* grow = gp + static_cast<long>(oh) * OW;
              if (gx) {
                double* gxrow = gx + row;
                for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) gxrow[ow * s] += wv * grow[ow];
              }
              if (gw) {
                const double* xrow = xv + row;
                for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) acc += grow[ow] * xrow[ow * s];
              }
            }
            if (gw) gw[woff + ki * KW + kj] += acc;
          });
        }
      }
  });
}

/// x[N x C x H x W] + b[C]
inline Var add_channel_bias(const Var& x, const Var& b) {
  if (x.value().rank() != 4 || b.value().rank() != 1 || b.dim(0) != x.dim(1)) {
    throw ShapeError("add_channel_bias: bias length must equal channel count");
  }
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor y = x.value();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) y[(n * C + c) * HW + i] += b.value()[c];
  return make_op("add_channel_bias", std::move(y), {x, b}, [N, C, HW](Node& nd) {
    if (detail::wants(nd, 0)) {
      Tensor& g = detail::parent_grad(nd, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd.grad[i];
    }
    if (detail::wants(nd, 1)) {
      Tensor& g = detail::parent_grad(nd, 1);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
          double s = 0.0;
          for (std::size_t i = 0; i < HW; ++i) s += nd.grad[(n * C + c) * HW + i];
          g[c] += s;
        }
    }
  });
}

/// Nearest-neighbour upsampling by an integer factor.
inline Var upsample_nearest(const Var& x, std::size_t factor) {
  if (x.value().rank() != 4 || factor == 0) throw ShapeError("upsample_nearest expects [N,C,H,W]");
  const std::size_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t OH = H * factor, OW = W * factor;
  Tensor y(Shape{x.dim(0), x.dim(1), OH, OW});
  for (std::size_t p = 0; p < NC; ++p)
    for (std::size_t i = 0; i < OH; ++i)
      for (std::size_t j = 0; j < OW; ++j)
        y[(p * OH + i) * OW + j] = x.value()[(p * H + i / factor) * W + j / factor];
  return make_op("upsample_nearest", std::move(y), {x}, [=](Node& nd) {
    Tensor& g = detail::parent_grad(nd, 0);
    for (std::size_t p = 0; p < NC; ++p)
      for (std::size_t i = 0; i < OH; ++i)
        for (std::size_t j = 0; j < OW; ++j)
          g[(p * H + i / factor) * W + j / factor] += nd.grad[(p * OH + i) * OW + j];
  });
}

/// Spatial mean: [N x C x H x W] -> [N x C]
inline Var global_avg_pool(const Var& x) {
  if (x.value().rank() != 4) throw ShapeError("global_avg_pool expects [N,C,H,W]");
  const std::size_t NC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
  const double inv = 1.0 / static_cast<double>(HW);
  Tensor y(Shape{x.dim(0), x.dim(1)});
  for (std::size_t p = 0; p < NC; ++p) {
    double s = 0.0;
    for (std::size_t i = 0; i < HW; ++i) s += x.value()[p * HW + i];
    y[p] = s * inv;
  }
  return make_op("global_avg_pool", std::move(y), {x}, [NC, HW, inv](Node& nd) {
    Tensor& g = detail::parent_grad(nd, 0);
    for (std::size_t p = 0; p < NC; ++p)
      for (std::size_t i = 0; i < HW; ++i) g[p * HW + i] += nd.grad[p] * inv;
  });
}

inline constexpr double kInstanceStdFloor = 1e-5;

/// Population standard deviation over spatial positions, floored at
/// kInstanceStdFloor: [N x C x H x W] -> [N x C]. Where the floor is active
/// the output is constant and its gradient is zero.
inline Var channel_std(const Var& x, double floor = kInstanceStdFloor) {
  if (x.value().rank() != 4) throw ShapeError("channel_std expects [N,C,H,W]");
  const std::size_t NC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
  if (HW < 2) throw ShapeError("instance statistics need at least 2 spatial positions");
  Tensor y(Shape{x.dim(0), x.dim(1)});
  std::vector<double> means(NC);
  std::vector<char> floored(NC, 0);
  for (std::size_t p = 0; p < NC; ++p) {
    const double* v = &x.value().data()[p * HW];
    double m = 0.0;
    for (std::size_t i = 0; i < HW; ++i) m += v[i];
    m /= static_cast<double>(HW);
    double var = 0.0;
    for (std::size_t i = 0; i < HW; ++i) var += (v[i] - m) * (v[i] - m);
    var /= static_cast<double>(HW);
    const double sd = std::sqrt(var);
    means[p] = m;
    if (sd > floor) {
      y[p] = sd;
    } else {
      y[p] = floor;
      floored[p] = 1;
    }
  }
  return make_op("channel_std", std::move(y), {x},
                 [NC, HW, means = std::move(means), floored = std::move(floored)](Node& nd) {
                   Tensor& g = detail::parent_grad(nd, 0);
                   const Tensor& xv = nd.parents[0]->value;
                   for (std::size_t p = 0; p < NC; ++p) {
                     if (floored[p]) continue;
                     const double s = nd.grad[p] / (static_cast<double>(HW) * nd.value[p]);
                     for (std::size_t i = 0; i < HW; ++i)
                       g[p * HW + i] += s * (xv[p * HW + i] - means[p]);
                   }
                 });
}

struct InstanceStats {
  Var mean;
  Var stddev;
};

inline InstanceStats instance_stats(const Var& x) {
  if (x.value().rank() != 4) throw ShapeError("instance_stats expects [N,C,H,W]");
  if (x.dim(2) * x.dim(3) < 2) {
    throw ShapeError("instance statistics need at least 2 spatial positions");
  }
  return {global_avg_pool(x), channel_std(x)};
}

/// out[n,c,:,:] = x[n,c,:,:] * scale[n,c] + shift[n,c]
inline Var channel_affine(const Var& x, const Var& scale, const Var& shift) {
  if (x.value().rank() != 4) throw ShapeError("channel_affine expects [N,C,H,W]");
  const Shape nc{x.dim(0), x.dim(1)};
  if (scale.shape() != nc || shift.shape() != nc) {
    throw ShapeError("channel_affine: scale/shift must be [N x C] = " + to_string(nc));
  }
  const std::size_t NC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor y(x.shape());
  for (std::size_t p = 0; p < NC; ++p)
    for (std::size_t i = 0; i < HW; ++i)
      y[p * HW + i] = x.value()[p * HW + i] * scale.value()[p] + shift.value()[p];
  return make_op("channel_affine", std::move(y), {x, scale, shift}, [NC, HW](Node& nd) {
    const Tensor& xv = nd.parents[0]->value;
    const Tensor& sv = nd.parents[1]->value;
    if (detail::wants(nd, 0)) {
      Tensor& g = detail::parent_grad(nd, 0);
      for (std::size_t p = 0; p < NC; ++p)
        for (std::size_t i = 0; i < HW; ++i) g[p * HW + i] += nd.grad[p * HW + i] * sv[p];
    }
    const bool ws = detail::wants(nd, 1), wb = detail::wants(nd, 2);
    if (ws || wb) {
      for (std::size_t p = 0; p < NC; ++p) {
        double gs = 0.0, gb = 0.0;
        for (std::size_t i = 0; i < HW; ++i) {
          gs += nd.grad[p * HW + i] * xv[p * HW + i];
          gb += nd.grad[p * HW + i];
        }
        if (ws) detail::parent_grad(nd, 1)[p] += gs;
        if (wb) detail::parent_grad(nd, 2)[p] += gb;
      }
    }
  });
}

/// (x - mu) / sigma per instance and channel.
inline Var instance_normalize(const Var& x) {
  auto [mu, sigma] = instance_stats(x);
  Var inv = div(Var::constant(Tensor(sigma.shape(), 1.0)), sigma);
  return channel_affine(x, inv, neg(mul(mu, inv)));
}

}  // namespace pden

#endif  // PDEN_AUTODIFF_HPP
