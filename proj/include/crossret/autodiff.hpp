#pragma once

// Reverse-mode automatic differentiation over dense double matrices.
//
// A Tape records every operation of one forward pass. Values live in the
// tape's node list; Var is a cheap handle (tape pointer + node index). Call
// backward() on a 1x1 result to populate gradients, then read the gradients
// of bound parameters with parameter_gradients().
//
// Tapes are single-use and not thread-safe; build one per forward pass.

#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace crossret {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Named parameter tensors. std::map keeps iteration (and serialization) order stable.
using ParamStore = std::map<std::string, Matrix>;

namespace ad {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const {
    assert(rows() == 1 && cols() == 1);
    return value()(0, 0);
  }
  bool requires_grad() const;

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backprop = std::function<void(Tape&, std::size_t self)>;

  /// When gradients are disabled every node is a constant and no closures are kept.
  explicit Tape(bool track_gradients = true) : track_(track_gradients) { nodes_.reserve(256); }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool tracking() const noexcept { return track_; }

  Var constant(Matrix value) { return push(std::move(value), false, {}); }

  Var variable(Matrix value) { return push(std::move(value), track_, {}); }

  /// Leaf bound to a named parameter. Repeated binds of the same name share a node,
  /// so gradients from every use accumulate in one place.
  Var bind(const std::string& name, const Matrix& value) {
    if (auto it = bound_.find(name); it != bound_.end()) return Var(this, it->second);
    Var v = push(value, track_, {});
    bound_.emplace(name, v.id());
    return v;
  }

  /// Records a derived node. `backprop` runs only if some input tracks gradients.
  Var record(Matrix value, std::initializer_list<Var> inputs, Backprop backprop) {
    bool needs = false;
    for (const Var& in : inputs) needs = needs || in.requires_grad();
    return push(std::move(value), needs, needs ? std::move(backprop) : Backprop{});
  }

  Var record(Matrix value, std::span<const Var> inputs, Backprop backprop) {
    bool needs = false;
    for (const Var& in : inputs) needs = needs || in.requires_grad();
    return push(std::move(value), needs, needs ? std::move(backprop) : Backprop{});
  }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient accumulator of a node, zero-initialized on first access.
  Matrix& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }
  bool has_grad(std::size_t id) const { return nodes_[id].grad.size() != 0; }

  /// Back-propagates from a scalar node.
  void backward(const Var& loss) {
    assert(loss.tape() == this);
    assert(loss.rows() == 1 && loss.cols() == 1);
    if (!nodes_[loss.id()].requires_grad) return;
    grad(loss.id())(0, 0) += 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backprop || n.grad.size() == 0) continue;
      n.backprop(*this, i);
    }
  }

  /// Gradients of every bound parameter that received one; untouched parameters
  /// get zero matrices when `store` is supplied.
  ParamStore parameter_gradients(const ParamStore* store = nullptr) const {
    ParamStore out;
    if (store) {
      for (const auto& [name, value] : *store) out.emplace(name, Matrix::Zero(value.rows(), value.cols()));
    }
    for (const auto& [name, id] : bound_) {
      const Node& n = nodes_[id];
      if (n.grad.size() != 0) {
        out[name] = n.grad;
      } else if (!out.contains(name)) {
        out.emplace(name, Matrix::Zero(n.value.rows(), n.value.cols()));
      }
    }
    return out;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Backprop backprop;
  };

  Var push(Matrix value, bool requires_grad, Backprop backprop) {
    nodes_.push_back(Node{std::move(value), Matrix{}, requires_grad, std::move(backprop)});
    return Var(this, nodes_.size() - 1);
  }

  bool track_;
  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::size_t> bound_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

// ---------------------------------------------------------------------------
// Operations

inline Var matmul(Var a, Var b) {
  assert(a.cols() == b.rows());
  Tape& t = *a.tape();
  return t.record(a.value() * b.value(), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (a.requires_grad()) t.grad(a.id()).noalias() += g * b.value().transpose();
    if (b.requires_grad()) t.grad(b.id()).noalias() += a.value().transpose() * g;
  });
}

/// a * bᵀ without materializing the transpose as a node.
inline Var matmul_transposed(Var a, Var b) {
  assert(a.cols() == b.cols());
  Tape& t = *a.tape();
  return t.record(a.value() * b.value().transpose(), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (a.requires_grad()) t.grad(a.id()).noalias() += g * b.value();
    if (b.requires_grad()) t.grad(b.id()).noalias() += g.transpose() * a.value();
  });
}

inline Var add(Var a, Var b) {
  assert(a.rows() == b.rows() && a.cols() == b.cols());
  Tape& t = *a.tape();
  return t.record(a.value() + b.value(), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (a.requires_grad()) t.grad(a.id()) += g;
    if (b.requires_grad()) t.grad(b.id()) += g;
  });
}

inline Var sub(Var a, Var b) {
  assert(a.rows() == b.rows() && a.cols() == b.cols());
  Tape& t = *a.tape();
  return t.record(a.value() - b.value(), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (a.requires_grad()) t.grad(a.id()) += g;
    if (b.requires_grad()) t.grad(b.id()) -= g;
  });
}

inline Var scale(Var a, double s) {
  Tape& t = *a.tape();
  return t.record(a.value() * s, {a}, [a, s](Tape& t, std::size_t self) { t.grad(a.id()) += s * t.grad(self); });
}

/// Adds a 1 x c row to every row of a.
inline Var add_row(Var a, Var row) {
  assert(row.rows() == 1 && row.cols() == a.cols());
  Tape& t = *a.tape();
  Matrix out = a.value().rowwise() + row.value().row(0);
  return t.record(std::move(out), {a, row}, [a, row](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (a.requires_grad()) t.grad(a.id()) += g;
    if (row.requires_grad()) t.grad(row.id()) += g.colwise().sum();
  });
}

/// Multiplies every row of a elementwise by a 1 x c row.
inline Var mul_row(Var a, Var row) {
  assert(row.rows() == 1 && row.cols() == a.cols());
  Tape& t = *a.tape();
  Matrix out = a.value().array().rowwise() * row.value().row(0).array();
  return t.record(std::move(out), {a, row}, [a, row](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (a.requires_grad()) t.grad(a.id()).array() += g.array().rowwise() * row.value().row(0).array();
    if (row.requires_grad()) t.grad(row.id()) += (g.array() * a.value().array()).colwise().sum().matrix();
  });
}

inline Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  assert(start >= 0 && start + count <= a.cols());
  Tape& t = *a.tape();
  return t.record(a.value().middleCols(start, count), {a}, [a, start, count](Tape& t, std::size_t self) {
    t.grad(a.id()).middleCols(start, count) += t.grad(self);
  });
}

inline Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  assert(start >= 0 && start + count <= a.rows());
  Tape& t = *a.tape();
  return t.record(a.value().middleRows(start, count), {a}, [a, start, count](Tape& t, std::size_t self) {
    t.grad(a.id()).middleRows(start, count) += t.grad(self);
  });
}

inline Var row(Var a, Eigen::Index r) { return slice_rows(a, r, 1); }

inline Var concat_cols(std::span<const Var> parts) {
  assert(!parts.empty());
  Tape& t = *parts.front().tape();
  Eigen::Index rows = parts.front().rows(), cols = 0;
  for (const Var& p : parts) {
    assert(p.rows() == rows);
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Eigen::Index c = 0;
  for (const Var& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t.record(std::move(out), parts, [inputs](Tape& t, std::size_t self) {
    Eigen::Index c = 0;
    for (const Var& p : inputs) {
      if (p.requires_grad()) t.grad(p.id()) += t.grad(self).middleCols(c, p.cols());
      c += p.cols();
    }
  });
}

inline Var concat_rows(std::span<const Var> parts) {
  assert(!parts.empty());
  Tape& t = *parts.front().tape();
  Eigen::Index cols = parts.front().cols(), rows = 0;
  for (const Var& p : parts) {
    assert(p.cols() == cols);
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Eigen::Index r = 0;
  for (const Var& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t.record(std::move(out), parts, [inputs](Tape& t, std::size_t self) {
    Eigen::Index r = 0;
    for (const Var& p : inputs) {
      if (p.requires_grad()) t.grad(p.id()) += t.grad(self).middleRows(r, p.rows());
      r += p.rows();
    }
  });
}

/// Rows of `table` picked by index (embedding lookup); gradients scatter-add.
inline Var gather_rows(Var table, std::vector<Eigen::Index> ids) {
  Tape& t = *table.tape();
  Matrix out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    assert(ids[i] >= 0 && ids[i] < table.rows());
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
  }
  return t.record(std::move(out), {table}, [table, ids = std::move(ids)](Tape& t, std::size_t self) {
    Matrix& gt = t.grad(table.id());
    const Matrix& g = t.grad(self);
    for (std::size_t i = 0; i < ids.size(); ++i) gt.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

/// Row-wise softmax with max subtraction.
inline Matrix softmax_rows_value(const Matrix& x) {
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  return y;
}

inline Var softmax_rows(Var x) {
  Tape& t = *x.tape();
  Matrix y = softmax_rows_value(x.value());
  return t.record(std::move(y), {x}, [x](Tape& t, std::size_t self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    Eigen::VectorXd dots = (g.array() * y.array()).rowwise().sum();
    t.grad(x.id()).array() += y.array() * (g.array().colwise() - dots.array());
  });
}

/// Per-row normalization to zero mean and unit (population) variance.
inline Var layer_norm_rows(Var x, double eps = 1e-5) {
  Tape& t = *x.tape();
  const Eigen::Index d = x.cols();
  Matrix xhat(x.rows(), d);
  Eigen::VectorXd inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.value().row(r).mean();
    const double var = (x.value().row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.value().row(r).array() - mu) * inv_std(r);
  }
  return t.record(std::move(xhat), {x}, [x, inv_std, d](Tape& t, std::size_t self) {
    const Matrix& xhat = t.value(self);
    const Matrix& g = t.grad(self);
    Matrix& gx = t.grad(x.id());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      const double mean_g = g.row(r).mean();
      const double mean_gx = g.row(r).dot(xhat.row(r)) / static_cast<double>(d);
      gx.row(r).array() += inv_std(r) * (g.row(r).array() - mean_g - xhat.row(r).array() * mean_gx);
    }
  });
}

inline Var relu(Var x) {
  Tape& t = *x.tape();
  return t.record(x.value().cwiseMax(0.0), {x}, [x](Tape& t, std::size_t self) {
    t.grad(x.id()).array() += (x.value().array() > 0.0).cast<double>() * t.grad(self).array();
  });
}

inline Var sigmoid(Var x) {
  Tape& t = *x.tape();
  Matrix y = (1.0 + (-x.value().array()).exp()).inverse().matrix();
  return t.record(std::move(y), {x}, [x](Tape& t, std::size_t self) {
    const Matrix& y = t.value(self);
    t.grad(x.id()).array() += t.grad(self).array() * y.array() * (1.0 - y.array());
  });
}

/// Each row divided by its L2 norm (floored at 1e-12).
inline Var l2_normalize_rows(Var x) {
  Tape& t = *x.tape();
  Eigen::VectorXd norms = x.value().rowwise().norm().cwiseMax(1e-12);
  Matrix y = x.value().array().colwise() / norms.array();
  return t.record(std::move(y), {x}, [x, norms](Tape& t, std::size_t self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    Eigen::VectorXd dots = (g.array() * y.array()).rowwise().sum();
    t.grad(x.id()).array() += ((g.array() - y.array().colwise() * dots.array()).colwise() / norms.array());
  });
}

inline Var sum(Var x) {
  Tape& t = *x.tape();
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  return t.record(std::move(out), {x}, [x](Tape& t, std::size_t self) {
    t.grad(x.id()).array() += t.grad(self)(0, 0);
  });
}

/// Sum of elementwise product with a constant matrix (a linear probe).
inline Var dot(Var x, const Matrix& weights) {
  assert(x.rows() == weights.rows() && x.cols() == weights.cols());
  Tape& t = *x.tape();
  Matrix out(1, 1);
  out(0, 0) = (x.value().array() * weights.array()).sum();
  return t.record(std::move(out), {x}, [x, weights](Tape& t, std::size_t self) {
    t.grad(x.id()) += t.grad(self)(0, 0) * weights;
  });
}

}  // namespace ad
}  // namespace crossret
