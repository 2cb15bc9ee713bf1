#pragma once

// Reverse-mode differentiation over dense row-major matrices.
//
// A Graph records every operation applied to its Vars together with a
// backward closure. Values are rank-2 (scalars are 1x1, vectors 1xn or nx1).
// Elementwise binary ops broadcast only a 1xm right operand over the leading
// (row) extent of an nxm left operand.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace idlab {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Index = Eigen::Index;

inline std::string shape_str(Index rows, Index cols) {
  std::ostringstream oss;
  oss << "[" << rows << " x " << cols << "]";
  return oss.str();
}

class DiffError : public std::runtime_error {
 public:
  DiffError(std::string op, const std::string& what)
      : std::runtime_error(op + ": " + what), op_(std::move(op)) {}
  const std::string& op() const { return op_; }

 private:
  std::string op_;
};

class ShapeError : public DiffError {
 public:
  using DiffError::DiffError;
};

class NonFiniteError : public DiffError {
 public:
  explicit NonFiniteError(const std::string& op)
      : DiffError(op, "non-finite result") {}
};

/// Value plus an optional gradient buffer of identical shape.
template <typename T>
struct Tensor {
  Matrix<T> value;
  Matrix<T> grad;

  Tensor() = default;
  explicit Tensor(Matrix<T> v) : value(std::move(v)) {}

  std::vector<Index> shape() const { return {value.rows(), value.cols()}; }
  bool has_grad() const { return grad.size() != 0; }
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <typename T>
class Graph;

template <typename T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* g, std::size_t id) : graph_(g), id_(id) {}

  bool valid() const { return graph_ != nullptr; }
  std::size_t id() const { return id_; }
  Graph<T>& graph() const { return *graph_; }

  const Matrix<T>& value() const { return graph_->value(*this); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  T scalar() const {
    if (rows() != 1 || cols() != 1) {
      throw ShapeError("scalar", "expected [1 x 1], got " + shape_str(rows(), cols()));
    }
    return value()(0, 0);
  }

 private:
  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Graph {
 public:
  using Backward = std::function<void(Graph&, const Matrix<T>&)>;

  Graph() { nodes_.reserve(256); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// When disabled no backward closures are recorded (inference).
  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

  Var<T> constant(Matrix<T> v, const char* tag = "constant") {
    check_finite(v, tag);
    return push(tag, std::move(v), false, {}, Backward{});
  }

  Var<T> variable(Matrix<T> v, const char* tag = "variable") {
    check_finite(v, tag);
    return push(tag, std::move(v), grad_enabled_, {}, Backward{});
  }

  /// Leaf bound to a parameter; backward() adds into p.grad.
  Var<T> param(Tensor<T>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var<T>(this, it->second);
    Var<T> v = push("param", p.value, grad_enabled_, {}, Backward{}, &p);
    param_nodes_.emplace(&p, v.id());
    return v;
  }

  const Matrix<T>& value(Var<T> v) const { return nodes_.at(v.id()).value; }
  const char* op(Var<T> v) const { return nodes_.at(v.id()).op; }
  bool needs_grad(Var<T> v) const { return nodes_.at(v.id()).needs_grad; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  /// Gradient of the last backward() root w.r.t. v (zeros if untouched).
  Matrix<T> grad(Var<T> v) const {
    const Node& n = nodes_.at(v.id());
    if (n.grad.size() == 0) return Matrix<T>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  /// Records a derived node. `fn` runs during backward with the node's
  /// output gradient; it is dropped if no input requires a gradient.
  Var<T> emit(const char* op, Matrix<T> value, std::initializer_list<std::size_t> inputs,
              Backward fn) {
    check_finite(value, op);
    bool needs = false;
    if (grad_enabled_) {
      for (std::size_t in : inputs) needs = needs || nodes_[in].needs_grad;
    }
    return push(op, std::move(value), needs, std::vector<std::size_t>(inputs),
                needs ? std::move(fn) : Backward{});
  }

  Var<T> emit(const char* op, Matrix<T> value, const std::vector<std::size_t>& inputs,
              Backward fn) {
    check_finite(value, op);
    bool needs = false;
    if (grad_enabled_) {
      for (std::size_t in : inputs) needs = needs || nodes_[in].needs_grad;
    }
    return push(op, std::move(value), needs, inputs, needs ? std::move(fn) : Backward{});
  }

  template <typename Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Reverse sweep from a scalar root. Parameter leaves add their gradient
  /// into the bound Tensor's grad buffer.
  void backward(Var<T> root) {
    const Node& r = nodes_.at(root.id());
    if (r.value.rows() != 1 || r.value.cols() != 1) {
      throw ShapeError("backward", "root must be scalar, got " +
                                       shape_str(r.value.rows(), r.value.cols()));
    }
    for (Node& n : nodes_) n.grad.resize(0, 0);
    if (!r.needs_grad) return;
    nodes_[root.id()].grad = Matrix<T>::Ones(1, 1);
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0) continue;
      if (n.backward) {
        // Closures accumulate into earlier nodes only.
        n.backward(*this, n.grad);
      }
      if (n.sink != nullptr) {
        if (!n.sink->has_grad()) n.sink->zero_grad();
        n.sink->grad += n.grad;
      }
    }
  }

 private:
  struct Node {
    const char* op;
    Matrix<T> value;
    Matrix<T> grad;
    bool needs_grad;
    std::vector<std::size_t> inputs;
    Backward backward;
    Tensor<T>* sink;
  };

  static void check_finite(const Matrix<T>& v, const char* op) {
    if (!v.allFinite()) throw NonFiniteError(op);
  }

  Var<T> push(const char* op, Matrix<T> value, bool needs, std::vector<std::size_t> inputs,
              Backward fn, Tensor<T>* sink = nullptr) {
    nodes_.push_back(Node{op, std::move(value), Matrix<T>(), needs, std::move(inputs),
                          std::move(fn), sink});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::map<const Tensor<T>*, std::size_t> param_nodes_;
  bool grad_enabled_ = true;
};

// ---------------------------------------------------------------------------
// Operators

namespace detail {

template <typename T>
void require_same(const char* op, const Var<T>& a, const Var<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(op, "shape mismatch " + shape_str(a.rows(), a.cols()) + " vs " +
                             shape_str(b.rows(), b.cols()));
  }
}

/// True when b is a 1xm row broadcast over a; throws on any other mismatch.
template <typename T>
bool broadcast_rows(const char* op, const Var<T>& a, const Var<T>& b) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return false;
  if (b.rows() == 1 && b.cols() == a.cols()) return true;
  throw ShapeError(op, "cannot broadcast " + shape_str(b.rows(), b.cols()) + " over " +
                           shape_str(a.rows(), a.cols()));
}

template <typename T>
void require_graph(const char* op, const Var<T>& a, const Var<T>& b) {
  if (&a.graph() != &b.graph()) throw DiffError(op, "operands belong to different graphs");
}

}  // namespace detail

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::require_graph("matmul", a, b);
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul", "inner extents differ: " + shape_str(a.rows(), a.cols()) +
                                   " * " + shape_str(b.rows(), b.cols()));
  }
  Matrix<T> out = a.value() * b.value();
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().emit("matmul", std::move(out), {ia, ib},
                        [ia, ib](Graph<T>& g, const Matrix<T>& G) {
                          if (g.needs_grad(ia)) g.accumulate(ia, G * g.value(Var<T>(&g, ib)).transpose());
                          if (g.needs_grad(ib)) g.accumulate(ib, g.value(Var<T>(&g, ia)).transpose() * G);
                        });
}

/// a * b^T
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  detail::require_graph("matmul_nt", a, b);
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt", "inner extents differ: " + shape_str(a.rows(), a.cols()) +
                                      " * " + shape_str(b.rows(), b.cols()) + "^T");
  }
  Matrix<T> out = a.value() * b.value().transpose();
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().emit("matmul_nt", std::move(out), {ia, ib},
                        [ia, ib](Graph<T>& g, const Matrix<T>& G) {
                          if (g.needs_grad(ia)) g.accumulate(ia, G * g.value(Var<T>(&g, ib)));
                          if (g.needs_grad(ib)) g.accumulate(ib, G.transpose() * g.value(Var<T>(&g, ia)));
                        });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  Matrix<T> out = a.value().transpose();
  const std::size_t ia = a.id();
  return a.graph().emit("transpose", std::move(out), {ia},
                        [ia](Graph<T>& g, const Matrix<T>& G) { g.accumulate(ia, G.transpose()); });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_graph("add", a, b);
  const bool bc = detail::broadcast_rows("add", a, b);
  Matrix<T> out = a.value();
  if (bc) {
    out.rowwise() += b.value().row(0);
  } else {
    out += b.value();
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().emit("add", std::move(out), {ia, ib},
                        [ia, ib, bc](Graph<T>& g, const Matrix<T>& G) {
                          g.accumulate(ia, G);
                          if (bc) {
                            g.accumulate(ib, G.colwise().sum());
                          } else {
                            g.accumulate(ib, G);
                          }
                        });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_graph("sub", a, b);
  const bool bc = detail::broadcast_rows("sub", a, b);
  Matrix<T> out = a.value();
  if (bc) {
    out.rowwise() -= b.value().row(0);
  } else {
    out -= b.value();
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().emit("sub", std::move(out), {ia, ib},
                        [ia, ib, bc](Graph<T>& g, const Matrix<T>& G) {
                          g.accumulate(ia, G);
                          if (bc) {
                            g.accumulate(ib, -G.colwise().sum());
                          } else {
                            g.accumulate(ib, -G);
                          }
                        });
}

/// Elementwise product.
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_graph("mul", a, b);
  const bool bc = detail::broadcast_rows("mul", a, b);
  Matrix<T> out;
  if (bc) {
    out = a.value().array().rowwise() * b.value().row(0).array();
  } else {
    out = a.value().cwiseProduct(b.value());
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().emit("mul", std::move(out), {ia, ib},
                        [ia, ib, bc](Graph<T>& g, const Matrix<T>& G) {
                          const Matrix<T>& av = g.value(Var<T>(&g, ia));
                          const Matrix<T>& bv = g.value(Var<T>(&g, ib));
                          if (bc) {
                            if (g.needs_grad(ia)) {
                              Matrix<T> ga = G.array().rowwise() * bv.row(0).array();
                              g.accumulate(ia, ga);
                            }
                            if (g.needs_grad(ib)) g.accumulate(ib, G.cwiseProduct(av).colwise().sum());
                          } else {
                            if (g.needs_grad(ia)) g.accumulate(ia, G.cwiseProduct(bv));
                            if (g.needs_grad(ib)) g.accumulate(ib, G.cwiseProduct(av));
                          }
                        });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
  Matrix<T> out = a.value() * c;
  const std::size_t ia = a.id();
  return a.graph().emit("scale", std::move(out), {ia},
                        [ia, c](Graph<T>& g, const Matrix<T>& G) { g.accumulate(ia, G * c); });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T c) {
  Matrix<T> out = a.value().array() + c;
  const std::size_t ia = a.id();
  return a.graph().emit("add_scalar", std::move(out), {ia},
                        [ia](Graph<T>& g, const Matrix<T>& G) { g.accumulate(ia, G); });
}

/// Product of a matrix and a 1x1 Var.
template <typename T>
Var<T> scale_by(const Var<T>& a, const Var<T>& s) {
  detail::require_graph("scale_by", a, s);
  const T c = s.scalar();
  Matrix<T> out = a.value() * c;
  const std::size_t ia = a.id(), is = s.id();
  return a.graph().emit("scale_by", std::move(out), {ia, is},
                        [ia, is](Graph<T>& g, const Matrix<T>& G) {
                          const T cv = g.value(Var<T>(&g, is))(0, 0);
                          if (g.needs_grad(ia)) g.accumulate(ia, G * cv);
                          if (g.needs_grad(is)) {
                            Matrix<T> gs(1, 1);
                            gs(0, 0) = G.cwiseProduct(g.value(Var<T>(&g, ia))).sum();
                            g.accumulate(is, gs);
                          }
                        });
}

template <typename T>
Var<T> exp(const Var<T>& a) {
  Matrix<T> out = a.value().array().exp();
  const std::size_t ia = a.id();
  std::size_t self = a.graph().size();
  return a.graph().emit("exp", std::move(out), {ia},
                        [ia, self](Graph<T>& g, const Matrix<T>& G) {
                          g.accumulate(ia, G.cwiseProduct(g.value(Var<T>(&g, self))));
                        });
}

template <typename T>
Var<T> log(const Var<T>& a) {
  if ((a.value().array() <= T(0)).any()) throw NonFiniteError("log");
  Matrix<T> out = a.value().array().log();
  const std::size_t ia = a.id();
  return a.graph().emit("log", std::move(out), {ia},
                        [ia](Graph<T>& g, const Matrix<T>& G) {
                          g.accumulate(ia, G.cwiseQuotient(g.value(Var<T>(&g, ia))));
                        });
}

template <typename T>
Var<T> square(const Var<T>& a) {
  Matrix<T> out = a.value().array().square();
  const std::size_t ia = a.id();
  return a.graph().emit("square", std::move(out), {ia},
                        [ia](Graph<T>& g, const Matrix<T>& G) {
                          g.accumulate(ia, T(2) * G.cwiseProduct(g.value(Var<T>(&g, ia))));
                        });
}

template <typename T>
Var<T> sqrt(const Var<T>& a) {
  if ((a.value().array() < T(0)).any()) throw NonFiniteError("sqrt");
  Matrix<T> out = a.value().array().sqrt();
  const std::size_t ia = a.id();
  std::size_t self = a.graph().size();
  return a.graph().emit("sqrt", std::move(out), {ia},
                        [ia, self](Graph<T>& g, const Matrix<T>& G) {
                          Matrix<T> ga =
                              G.array() / (T(2) * g.value(Var<T>(&g, self)).array());
                          g.accumulate(ia, ga);
                        });
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
  Matrix<T> out = a.value().array().tanh();
  const std::size_t ia = a.id();
  std::size_t self = a.graph().size();
  return a.graph().emit("tanh", std::move(out), {ia},
                        [ia, self](Graph<T>& g, const Matrix<T>& G) {
                          const auto& y = g.value(Var<T>(&g, self)).array();
                          Matrix<T> ga = G.array() * (T(1) - y.square());
                          g.accumulate(ia, ga);
                        });
}

/// max(0, x); the subgradient at 0 is 0.
template <typename T>
Var<T> relu(const Var<T>& a) {
  Matrix<T> out = a.value().cwiseMax(T(0));
  const std::size_t ia = a.id();
  return a.graph().emit("relu", std::move(out), {ia},
                        [ia](Graph<T>& g, const Matrix<T>& G) {
                          Matrix<T> ga =
                              (g.value(Var<T>(&g, ia)).array() > T(0)).select(G, T(0));
                          g.accumulate(ia, ga);
                        });
}

template <typename T>
Var<T> hinge(const Var<T>& a) {
  return relu(a);
}

/// max(x, lo) elementwise; clamped entries pass no gradient.
template <typename T>
Var<T> clamp_min(const Var<T>& a, T lo) {
  Matrix<T> out = a.value().cwiseMax(lo);
  const std::size_t ia = a.id();
  return a.graph().emit("clamp_min", std::move(out), {ia},
                        [ia, lo](Graph<T>& g, const Matrix<T>& G) {
                          Matrix<T> ga = (g.value(Var<T>(&g, ia)).array() >= lo).select(G, T(0));
                          g.accumulate(ia, ga);
                        });
}

template <typename T>
Var<T> reciprocal(const Var<T>& a) {
  Matrix<T> out = a.value().array().inverse();
  const std::size_t ia = a.id();
  std::size_t self = a.graph().size();
  return a.graph().emit("reciprocal", std::move(out), {ia},
                        [ia, self](Graph<T>& g, const Matrix<T>& G) {
                          const auto& y = g.value(Var<T>(&g, self)).array();
                          Matrix<T> ga = -G.array() * y.square();
                          g.accumulate(ia, ga);
                        });
}

namespace detail {

template <typename T>
Matrix<T> softmax_rows_value(const Matrix<T>& x) {
  Matrix<T> y = x;
  for (Index r = 0; r < y.rows(); ++r) {
    auto row = y.row(r);
    const T m = row.maxCoeff();
    row = (row.array() - m).exp();
    row /= row.sum();
  }
  return y;
}

template <typename T>
Matrix<T> logsumexp_rows_value(const Matrix<T>& x) {
  Matrix<T> out(x.rows(), 1);
  for (Index r = 0; r < x.rows(); ++r) {
    const T m = x.row(r).maxCoeff();
    out(r, 0) = m + std::log((x.row(r).array() - m).exp().sum());
  }
  return out;
}

}  // namespace detail

template <typename T>
Var<T> softmax_rows(const Var<T>& a) {
  Matrix<T> out = detail::softmax_rows_value(a.value());
  const std::size_t ia = a.id();
  std::size_t self = a.graph().size();
  return a.graph().emit("softmax", std::move(out), {ia},
                        [ia, self](Graph<T>& g, const Matrix<T>& G) {
                          const Matrix<T>& y = g.value(Var<T>(&g, self));
                          Matrix<T> dot = G.cwiseProduct(y).rowwise().sum();
                          Matrix<T> ga = y.array() * (G.array().colwise() - dot.col(0).array());
                          g.accumulate(ia, ga);
                        });
}

template <typename T>
Var<T> log_softmax_rows(const Var<T>& a) {
  Matrix<T> lse = detail::logsumexp_rows_value(a.value());
  Matrix<T> out = a.value().array().colwise() - lse.col(0).array();
  const std::size_t ia = a.id();
  std::size_t self = a.graph().size();
  return a.graph().emit("log_softmax", std::move(out), {ia},
                        [ia, self](Graph<T>& g, const Matrix<T>& G) {
                          Matrix<T> p = g.value(Var<T>(&g, self)).array().exp();
                          Matrix<T> s = G.rowwise().sum();
                          Matrix<T> ga = G - Matrix<T>(p.array().colwise() * s.col(0).array());
                          g.accumulate(ia, ga);
                        });
}

/// Row-wise log-sum-exp, nx1.
template <typename T>
Var<T> logsumexp_rows(const Var<T>& a) {
  Matrix<T> out = detail::logsumexp_rows_value(a.value());
  const std::size_t ia = a.id();
  return a.graph().emit("log_sum_exp", std::move(out), {ia},
                        [ia](Graph<T>& g, const Matrix<T>& G) {
                          Matrix<T> p = detail::softmax_rows_value(g.value(Var<T>(&g, ia)));
                          Matrix<T> ga = p.array().colwise() * G.col(0).array();
                          g.accumulate(ia, ga);
                        });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  Matrix<T> out(1, 1);
  out(0, 0) = a.value().sum();
  const std::size_t ia = a.id();
  const Index r = a.rows(), c = a.cols();
  return a.graph().emit("sum", std::move(out), {ia},
                        [ia, r, c](Graph<T>& g, const Matrix<T>& G) {
                          g.accumulate(ia, Matrix<T>::Constant(r, c, G(0, 0)));
                        });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  if (a.value().size() == 0) throw ShapeError("mean", "empty operand");
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

/// Sum over columns of each row, nx1.
template <typename T>
Var<T> sum_rows(const Var<T>& a) {
  Matrix<T> out = a.value().rowwise().sum();
  const std::size_t ia = a.id();
  const Index c = a.cols();
  return a.graph().emit("sum_rows", std::move(out), {ia},
                        [ia, c](Graph<T>& g, const Matrix<T>& G) {
                          g.accumulate(ia, G.col(0).replicate(1, c));
                        });
}

/// Sum over rows of each column, 1xm.
template <typename T>
Var<T> sum_cols(const Var<T>& a) {
  Matrix<T> out = a.value().colwise().sum();
  const std::size_t ia = a.id();
  const Index r = a.rows();
  return a.graph().emit("sum_cols", std::move(out), {ia},
                        [ia, r](Graph<T>& g, const Matrix<T>& G) {
                          g.accumulate(ia, G.row(0).replicate(r, 1));
                        });
}

template <typename T>
struct MaxResult {
  Var<T> values;               // nx1
  std::vector<Index> argmax;   // per row, lowest index on ties
};

/// Index of the largest entry in a row; ties resolve to the lowest index.
template <typename Row>
Index argmax_lowest(const Row& row) {
  Index best = 0;
  for (Index j = 1; j < row.size(); ++j) {
    if (row(j) > row(best)) best = j;
  }
  return best;
}

template <typename T>
MaxResult<T> max_rows(const Var<T>& a) {
  const Matrix<T>& x = a.value();
  std::vector<Index> idx(static_cast<std::size_t>(x.rows()));
  Matrix<T> out(x.rows(), 1);
  for (Index r = 0; r < x.rows(); ++r) {
    idx[static_cast<std::size_t>(r)] = argmax_lowest(x.row(r));
    out(r, 0) = x(r, idx[static_cast<std::size_t>(r)]);
  }
  const std::size_t ia = a.id();
  const Index cols = x.cols();
  Var<T> v = a.graph().emit("max", std::move(out), {ia},
                            [ia, idx, cols](Graph<T>& g, const Matrix<T>& G) {
                              Matrix<T> ga = Matrix<T>::Zero(G.rows(), cols);
                              for (Index r = 0; r < G.rows(); ++r) {
                                ga(r, idx[static_cast<std::size_t>(r)]) = G(r, 0);
                              }
                              g.accumulate(ia, ga);
                            });
  return {v, std::move(idx)};
}

template <typename T>
Var<T> l2_normalize_rows(const Var<T>& a) {
  Matrix<T> norms = a.value().rowwise().norm();
  if ((norms.array() <= T(0)).any()) throw NonFiniteError("l2_normalize");
  Matrix<T> out = a.value().array().colwise() / norms.col(0).array();
  const std::size_t ia = a.id();
  std::size_t self = a.graph().size();
  return a.graph().emit("l2_normalize", std::move(out), {ia},
                        [ia, self, norms](Graph<T>& g, const Matrix<T>& G) {
                          const Matrix<T>& y = g.value(Var<T>(&g, self));
                          Matrix<T> dot = G.cwiseProduct(y).rowwise().sum();
                          Matrix<T> ga = (G - Matrix<T>(y.array().colwise() * dot.col(0).array()));
                          ga.array().colwise() /= norms.col(0).array();
                          g.accumulate(ia, ga);
                        });
}

/// Passes the value through and blocks derivative flow.
template <typename T>
Var<T> stop_gradient(const Var<T>& a) {
  return a.graph().constant(a.value(), "stop_gradient");
}

template <typename T>
Var<T> slice_cols(const Var<T>& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw ShapeError("slice_cols", "range [" + std::to_string(start) + ", " +
                                       std::to_string(start + count) + ") outside " +
                                       shape_str(a.rows(), a.cols()));
  }
  Matrix<T> out = a.value().middleCols(start, count);
  const std::size_t ia = a.id();
  const Index rows = a.rows(), cols = a.cols();
  return a.graph().emit("slice_cols", std::move(out), {ia},
                        [ia, start, count, rows, cols](Graph<T>& g, const Matrix<T>& G) {
                          Matrix<T> ga = Matrix<T>::Zero(rows, cols);
                          ga.middleCols(start, count) = G;
                          g.accumulate(ia, ga);
                        });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols", "no operands");
  const Index rows = parts[0].rows();
  Index cols = 0;
  std::vector<std::size_t> ids;
  std::vector<Index> widths;
  for (const auto& p : parts) {
    if (p.rows() != rows) {
      throw ShapeError("concat_cols", "row extents differ: " + shape_str(rows, 0) + " vs " +
                                          shape_str(p.rows(), p.cols()));
    }
    cols += p.cols();
    ids.push_back(p.id());
    widths.push_back(p.cols());
  }
  Matrix<T> out(rows, cols);
  Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return parts[0].graph().emit("concat_cols", std::move(out), ids,
                               [ids, widths](Graph<T>& g, const Matrix<T>& G) {
                                 Index o = 0;
                                 for (std::size_t k = 0; k < ids.size(); ++k) {
                                   g.accumulate(ids[k], G.middleCols(o, widths[k]));
                                   o += widths[k];
                                 }
                               });
}

/// out[i] = table[idx[i]]; gradients scatter-add back into the table.
template <typename T>
Var<T> gather_rows(const Var<T>& table, const std::vector<Index>& idx) {
  const Matrix<T>& tv = table.value();
  Matrix<T> out(static_cast<Index>(idx.size()), tv.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= tv.rows()) {
      throw ShapeError("gather_rows", "index " + std::to_string(idx[i]) + " outside " +
                                          shape_str(tv.rows(), tv.cols()));
    }
    out.row(static_cast<Index>(i)) = tv.row(idx[i]);
  }
  const std::size_t it = table.id();
  const Index rows = tv.rows(), cols = tv.cols();
  return table.graph().emit("gather_rows", std::move(out), {it},
                            [it, idx, rows, cols](Graph<T>& g, const Matrix<T>& G) {
                              Matrix<T> gt = Matrix<T>::Zero(rows, cols);
                              for (std::size_t i = 0; i < idx.size(); ++i) {
                                gt.row(idx[i]) += G.row(static_cast<Index>(i));
                              }
                              g.accumulate(it, gt);
                            });
}

/// out[i] = mean of table rows listed in seqs[i]. Each sequence must be non-empty.
template <typename T>
Var<T> embed_mean(const Var<T>& table, const std::vector<std::vector<int>>& seqs) {
  const Matrix<T>& tv = table.value();
  Matrix<T> out = Matrix<T>::Zero(static_cast<Index>(seqs.size()), tv.cols());
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    if (seqs[i].empty()) throw ShapeError("embed_mean", "empty sequence at row " + std::to_string(i));
    for (int tok : seqs[i]) {
      if (tok < 0 || tok >= tv.rows()) {
        throw ShapeError("embed_mean", "token " + std::to_string(tok) + " outside table " +
                                           shape_str(tv.rows(), tv.cols()));
      }
      out.row(static_cast<Index>(i)) += tv.row(tok);
    }
    out.row(static_cast<Index>(i)) /= static_cast<T>(seqs[i].size());
  }
  const std::size_t it = table.id();
  const Index rows = tv.rows(), cols = tv.cols();
  return table.graph().emit("embed_mean", std::move(out), {it},
                            [it, seqs, rows, cols](Graph<T>& g, const Matrix<T>& G) {
                              Matrix<T> gt = Matrix<T>::Zero(rows, cols);
                              for (std::size_t i = 0; i < seqs.size(); ++i) {
                                const T w = T(1) / static_cast<T>(seqs[i].size());
                                for (int tok : seqs[i]) gt.row(tok) += w * G.row(static_cast<Index>(i));
                              }
                              g.accumulate(it, gt);
                            });
}

/// out[i] = a(i, idx[i]), nx1.
template <typename T>
Var<T> pick(const Var<T>& a, const std::vector<Index>& idx) {
  const Matrix<T>& x = a.value();
  if (static_cast<Index>(idx.size()) != x.rows()) {
    throw ShapeError("pick", std::to_string(idx.size()) + " indices for " +
                                 shape_str(x.rows(), x.cols()));
  }
  Matrix<T> out(x.rows(), 1);
  for (Index r = 0; r < x.rows(); ++r) {
    const Index c = idx[static_cast<std::size_t>(r)];
    if (c < 0 || c >= x.cols()) throw ShapeError("pick", "column " + std::to_string(c) + " out of range");
    out(r, 0) = x(r, c);
  }
  const std::size_t ia = a.id();
  const Index cols = x.cols();
  return a.graph().emit("pick", std::move(out), {ia},
                        [ia, idx, cols](Graph<T>& g, const Matrix<T>& G) {
                          Matrix<T> ga = Matrix<T>::Zero(G.rows(), cols);
                          for (Index r = 0; r < G.rows(); ++r) ga(r, idx[static_cast<std::size_t>(r)]) = G(r, 0);
                          g.accumulate(ia, ga);
                        });
}

/// Column vector nx1 expanded to nxm via an outer product with ones.
template <typename T>
Var<T> repeat_cols(const Var<T>& col, Index m) {
  Var<T> ones = col.graph().constant(Matrix<T>::Ones(1, m), "ones");
  return matmul(col, ones);
}

/// Row vector 1xm expanded to nxm.
template <typename T>
Var<T> repeat_rows(const Var<T>& row, Index n) {
  Var<T> ones = row.graph().constant(Matrix<T>::Ones(n, 1), "ones");
  return matmul(ones, row);
}

template <typename T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <typename T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <typename T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }
template <typename T>
Var<T> operator*(const Var<T>& a, T c) { return scale(a, c); }
template <typename T>
Var<T> operator*(T c, const Var<T>& a) { return scale(a, c); }
template <typename T>
Var<T> operator-(const Var<T>& a) { return scale(a, T(-1)); }

// ---------------------------------------------------------------------------
// Named-binding front end

template <typename T>
using Bindings = std::map<std::string, Matrix<T>>;

template <typename T>
using VarMap = std::map<std::string, Var<T>>;

/// An expression is a builder over a graph and its bound variables.
template <typename T>
using Expr = std::function<Var<T>(Graph<T>&, const VarMap<T>&)>;

template <typename T>
Matrix<T> forward(const Expr<T>& expr, const Bindings<T>& bindings) {
  Graph<T> g;
  g.set_grad_enabled(false);
  VarMap<T> vars;
  for (const auto& [name, m] : bindings) vars.emplace(name, g.constant(m, "binding"));
  return expr(g, vars).value();
}

template <typename T>
std::map<std::string, Matrix<T>> gradient(const Expr<T>& expr, const Bindings<T>& bindings,
                                          const std::vector<std::string>& wrt) {
  for (const auto& name : wrt) {
    if (bindings.find(name) == bindings.end()) {
      throw DiffError("gradient", "unbound variable '" + name + "'");
    }
  }
  Graph<T> g;
  VarMap<T> vars;
  for (const auto& [name, m] : bindings) {
    const bool want = std::find(wrt.begin(), wrt.end(), name) != wrt.end();
    vars.emplace(name, want ? g.variable(m) : g.constant(m, "binding"));
  }
  Var<T> root = expr(g, vars);
  if (root.rows() != 1 || root.cols() != 1) {
    throw ShapeError("gradient", "expression is not scalar: " + shape_str(root.rows(), root.cols()));
  }
  g.backward(root);
  std::map<std::string, Matrix<T>> out;
  for (const auto& name : wrt) out.emplace(name, g.grad(vars.at(name)));
  return out;
}

struct FiniteDiffReport {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  /// Coordinates whose one-sided slopes disagree (kinks); excluded from the max.
  std::vector<std::string> non_differentiable;
};

/// Compares analytic gradients against central differences. A coordinate is
/// flagged non-differentiable when its forward and backward one-sided slopes
/// differ by more than `kink_tol * max(1, |central|)`.
template <typename T>
FiniteDiffReport finite_diff_check(const Expr<T>& expr, const Bindings<T>& bindings, T step,
                                   std::vector<std::string> wrt = {}, double kink_tol = 1e-2) {
  if (!(step > T(0))) throw DiffError("finite_diff_check", "step must be positive");
  if (wrt.empty()) {
    for (const auto& kv : bindings) wrt.push_back(kv.first);
  }
  const auto analytic = gradient(expr, bindings, wrt);
  auto eval = [&](const Bindings<T>& b) { return static_cast<double>(forward(expr, b)(0, 0)); };
  const double f0 = eval(bindings);

  FiniteDiffReport report;
  Bindings<T> work = bindings;
  for (const auto& name : wrt) {
    Matrix<T>& x = work.at(name);
    const Matrix<T>& ga = analytic.at(name);
    for (Index r = 0; r < x.rows(); ++r) {
      for (Index c = 0; c < x.cols(); ++c) {
        const T orig = x(r, c);
        x(r, c) = orig + step;
        const double fp = eval(work);
        x(r, c) = orig - step;
        const double fm = eval(work);
        x(r, c) = orig;
        const double h = static_cast<double>(step);
        const double central = (fp - fm) / (2.0 * h);
        const double fwd = (fp - f0) / h;
        const double bwd = (f0 - fm) / h;
        if (std::abs(fwd - bwd) > kink_tol * std::max(1.0, std::abs(central))) {
          report.non_differentiable.push_back(name + "[" + std::to_string(r) + "," +
                                              std::to_string(c) + "]");
          continue;
        }
        const double err = std::abs(static_cast<double>(ga(r, c)) - central) /
                           std::max(1e-12, std::abs(central));
        report.max_relative_error = std::max(report.max_relative_error, err);
        ++report.checked;
      }
    }
  }
  return report;
}

}  // namespace idlab
