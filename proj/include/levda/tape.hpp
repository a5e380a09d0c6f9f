#pragma once

// Reverse-mode automatic differentiation over dense Eigen arrays.
//
// A Tape records every operation applied to its variables in evaluation
// order, so node ids are already a topological order and backward() is a
// single reverse sweep. Tapes are meant to be short lived: build one per
// objective evaluation, read the value and gradient, throw it away.

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace levda::ad {

template <typename Scalar>
using Array = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class OpKind : std::uint8_t {
  leaf,
  constant,
  add,
  subtract,
  scale,
  scale_by,
  multiply,
  matmul,
  affine,
  tanh,
  sin,
  exp,
  sum,
  squared_norm,
  concat,
  slice,
  reshape,
};

inline const char* op_name(OpKind kind);

template <typename Scalar>
class Tape;

template <typename Scalar>
class Var {
 public:
  Var() = default;

  std::size_t id() const { return id_; }
  Tape<Scalar>* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

  const Array<Scalar>& value() const { return tape_->value(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }

 private:
  friend class Tape<Scalar>;
  Var(Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename Scalar>
struct TapeNode {
  OpKind kind = OpKind::constant;
  std::vector<std::size_t> inputs;
  Scalar factor = Scalar(0);   // scale
  Eigen::Index offset = 0;     // slice
  bool needs_grad = false;
  Array<Scalar> value;
};

/// Adjoints of a scalar output with respect to the leaves that reach it.
/// Leaves absent from the map have an identically zero gradient.
template <typename Scalar>
class Gradient {
 public:
  bool contains(const Var<Scalar>& leaf) const { return by_leaf_.count(leaf.id()) != 0; }
  std::size_t size() const { return by_leaf_.size(); }
  bool empty() const { return by_leaf_.empty(); }

  Array<Scalar> wrt(const Var<Scalar>& leaf) const {
    auto it = by_leaf_.find(leaf.id());
    if (it == by_leaf_.end()) {
      return Array<Scalar>::Zero(leaf.rows(), leaf.cols());
    }
    return it->second;
  }

 private:
  friend class Tape<Scalar>;
  std::unordered_map<std::size_t, Array<Scalar>> by_leaf_;
};

namespace detail {

template <typename Derived>
std::string shape_of(const Eigen::DenseBase<Derived>& a) {
  std::ostringstream os;
  os << '(' << a.rows() << 'x' << a.cols() << ')';
  return os.str();
}

template <typename A, typename B>
[[noreturn]] void shape_mismatch(const char* op, const A& a, const B& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_of(a) + " vs " +
                   shape_of(b));
}

}  // namespace detail

template <typename Scalar>
class Tape {
 public:
  using Value = Array<Scalar>;
  using VarT = Var<Scalar>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }
  const TapeNode<Scalar>& node(std::size_t id) const { return nodes_.at(id); }
  const Value& value(const VarT& v) const { return nodes_[v.id()].value; }

  VarT leaf(Value value) { return push(OpKind::leaf, {}, std::move(value), true); }
  VarT constant(Value value) { return push(OpKind::constant, {}, std::move(value), false); }

  template <typename Derived>
  VarT leaf(const Eigen::MatrixBase<Derived>& value) {
    return leaf(Value(value));
  }
  template <typename Derived>
  VarT constant(const Eigen::MatrixBase<Derived>& value) {
    return constant(Value(value));
  }
  VarT scalar_constant(Scalar s) { return constant(Value::Constant(1, 1, s)); }

  VarT add(const VarT& a, const VarT& b) {
    const Value& x = value(a);
    const Value& y = value(b);
    if (x.rows() != y.rows() || x.cols() != y.cols()) detail::shape_mismatch("add", x, y);
    return push(OpKind::add, {a.id(), b.id()}, x + y);
  }

  VarT subtract(const VarT& a, const VarT& b) {
    const Value& x = value(a);
    const Value& y = value(b);
    if (x.rows() != y.rows() || x.cols() != y.cols()) detail::shape_mismatch("subtract", x, y);
    return push(OpKind::subtract, {a.id(), b.id()}, x - y);
  }

  VarT scale(const VarT& a, Scalar factor) {
    VarT out = push(OpKind::scale, {a.id()}, factor * value(a));
    nodes_.back().factor = factor;
    return out;
  }

  // s (1x1) times an array of any shape.
  VarT scale_by(const VarT& s, const VarT& a) {
    const Value& f = value(s);
    if (f.rows() != 1 || f.cols() != 1) detail::shape_mismatch("scale_by", f, value(a));
    return push(OpKind::scale_by, {s.id(), a.id()}, f(0, 0) * value(a));
  }

  VarT multiply(const VarT& a, const VarT& b) {
    const Value& x = value(a);
    const Value& y = value(b);
    if (x.rows() != y.rows() || x.cols() != y.cols()) detail::shape_mismatch("multiply", x, y);
    return push(OpKind::multiply, {a.id(), b.id()}, x.cwiseProduct(y));
  }

  VarT matmul(const VarT& a, const VarT& b) {
    const Value& x = value(a);
    const Value& y = value(b);
    if (x.cols() != y.rows()) detail::shape_mismatch("matmul", x, y);
    return push(OpKind::matmul, {a.id(), b.id()}, x * y);
  }

  // W x + b, with the bias column added to every column of x.
  VarT affine(const VarT& w, const VarT& x, const VarT& b) {
    const Value& W = value(w);
    const Value& X = value(x);
    const Value& B = value(b);
    if (W.cols() != X.rows()) detail::shape_mismatch("affine", W, X);
    if (B.rows() != W.rows() || B.cols() != 1) detail::shape_mismatch("affine bias", W, B);
    Value out = W * X;
    out.colwise() += B.col(0);
    return push(OpKind::affine, {w.id(), x.id(), b.id()}, std::move(out));
  }

  VarT tanh(const VarT& a) { return push(OpKind::tanh, {a.id()}, value(a).array().tanh().matrix()); }
  VarT sin(const VarT& a) { return push(OpKind::sin, {a.id()}, value(a).array().sin().matrix()); }
  VarT exp(const VarT& a) { return push(OpKind::exp, {a.id()}, value(a).array().exp().matrix()); }

  VarT sum(const VarT& a) { return push(OpKind::sum, {a.id()}, Value::Constant(1, 1, value(a).sum())); }

  VarT squared_norm(const VarT& a) {
    return push(OpKind::squared_norm, {a.id()}, Value::Constant(1, 1, value(a).squaredNorm()));
  }

  // Stacks the parts vertically; all parts must have the same column count.
  VarT concat(const std::vector<VarT>& parts) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Eigen::Index cols = value(parts.front()).cols();
    Eigen::Index rows = 0;
    for (const auto& p : parts) {
      if (value(p).cols() != cols) detail::shape_mismatch("concat", value(parts.front()), value(p));
      rows += value(p).rows();
    }
    Value out(rows, cols);
    std::vector<std::size_t> ids;
    ids.reserve(parts.size());
    Eigen::Index r = 0;
    for (const auto& p : parts) {
      out.middleRows(r, value(p).rows()) = value(p);
      r += value(p).rows();
      ids.push_back(p.id());
    }
    return push(OpKind::concat, std::move(ids), std::move(out));
  }

  VarT slice(const VarT& a, Eigen::Index offset, Eigen::Index count) {
    const Value& x = value(a);
    if (offset < 0 || count < 0 || offset + count > x.rows()) {
      throw ShapeError("slice: rows [" + std::to_string(offset) + ", " +
                       std::to_string(offset + count) + ") out of range for " +
                       detail::shape_of(x));
    }
    VarT out = push(OpKind::slice, {a.id()}, x.middleRows(offset, count));
    nodes_.back().offset = offset;
    return out;
  }

  // Column-major reinterpretation with the same number of entries.
  VarT reshape(const VarT& a, Eigen::Index rows, Eigen::Index cols) {
    const Value& x = value(a);
    if (rows * cols != x.size()) {
      throw ShapeError("reshape: cannot view " + detail::shape_of(x) + " as (" + std::to_string(rows) + "x" +
                       std::to_string(cols) + ")");
    }
    return push(OpKind::reshape, {a.id()}, Eigen::Map<const Value>(x.data(), rows, cols));
  }

  /// Gradient of a 1x1 output with respect to every leaf that reaches it.
  Gradient<Scalar> backward(const VarT& output) const {
    const Value& y = value(output);
    if (y.rows() != 1 || y.cols() != 1) {
      throw std::invalid_argument("backward: output must be scalar, got " + detail::shape_of(y));
    }
    Gradient<Scalar> grad;
    if (!nodes_[output.id()].needs_grad) return grad;

    std::vector<Value> adj(output.id() + 1);
    adj[output.id()] = Value::Ones(1, 1);
    for (std::size_t i = output.id() + 1; i-- > 0;) {
      const auto& n = nodes_[i];
      if (!n.needs_grad || adj[i].size() == 0) continue;
      if (n.kind == OpKind::leaf) {
        grad.by_leaf_.emplace(i, std::move(adj[i]));
        continue;
      }
      propagate(n, adj[i], adj);
    }
    return grad;
  }

 private:
  VarT push(OpKind kind, std::vector<std::size_t> inputs, Value value, bool needs_grad = false) {
    for (auto id : inputs) needs_grad = needs_grad || nodes_[id].needs_grad;
    TapeNode<Scalar> n;
    n.kind = kind;
    n.inputs = std::move(inputs);
    n.needs_grad = needs_grad;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return VarT(this, nodes_.size() - 1);
  }

  template <typename Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& g, std::vector<Value>& adj) const {
    if (!nodes_[id].needs_grad) return;
    if (adj[id].size() == 0) {
      adj[id] = g;
    } else {
      adj[id] += g;
    }
  }

  void propagate(const TapeNode<Scalar>& n, const Value& g, std::vector<Value>& adj) const {
    const auto& in = n.inputs;
    switch (n.kind) {
      case OpKind::leaf:
      case OpKind::constant:
        break;
      case OpKind::add:
        accumulate(in[0], g, adj);
        accumulate(in[1], g, adj);
        break;
      case OpKind::subtract:
        accumulate(in[0], g, adj);
        accumulate(in[1], -g, adj);
        break;
      case OpKind::scale:
        accumulate(in[0], n.factor * g, adj);
        break;
      case OpKind::scale_by: {
        const Value& s = nodes_[in[0]].value;
        const Value& a = nodes_[in[1]].value;
        accumulate(in[0], Value::Constant(1, 1, g.cwiseProduct(a).sum()), adj);
        accumulate(in[1], s(0, 0) * g, adj);
        break;
      }
      case OpKind::multiply:
        accumulate(in[0], g.cwiseProduct(nodes_[in[1]].value), adj);
        accumulate(in[1], g.cwiseProduct(nodes_[in[0]].value), adj);
        break;
      case OpKind::matmul:
        if (nodes_[in[0]].needs_grad) accumulate(in[0], g * nodes_[in[1]].value.transpose(), adj);
        if (nodes_[in[1]].needs_grad) accumulate(in[1], nodes_[in[0]].value.transpose() * g, adj);
        break;
      case OpKind::affine:
        if (nodes_[in[0]].needs_grad) accumulate(in[0], g * nodes_[in[1]].value.transpose(), adj);
        if (nodes_[in[1]].needs_grad) accumulate(in[1], nodes_[in[0]].value.transpose() * g, adj);
        if (nodes_[in[2]].needs_grad) accumulate(in[2], g.rowwise().sum(), adj);
        break;
      case OpKind::tanh:
        accumulate(in[0], g.cwiseProduct((1 - n.value.array().square()).matrix()), adj);
        break;
      case OpKind::sin:
        accumulate(in[0], g.cwiseProduct(nodes_[in[0]].value.array().cos().matrix()), adj);
        break;
      case OpKind::exp:
        accumulate(in[0], g.cwiseProduct(n.value), adj);
        break;
      case OpKind::sum: {
        const Value& a = nodes_[in[0]].value;
        accumulate(in[0], Value::Constant(a.rows(), a.cols(), g(0, 0)), adj);
        break;
      }
      case OpKind::squared_norm:
        accumulate(in[0], (2 * g(0, 0)) * nodes_[in[0]].value, adj);
        break;
      case OpKind::concat: {
        Eigen::Index r = 0;
        for (auto id : in) {
          const Eigen::Index rows = nodes_[id].value.rows();
          accumulate(id, g.middleRows(r, rows), adj);
          r += rows;
        }
        break;
      }
      case OpKind::reshape: {
        const Value& a = nodes_[in[0]].value;
        accumulate(in[0], Eigen::Map<const Value>(g.data(), a.rows(), a.cols()), adj);
        break;
      }
      case OpKind::slice: {
        const std::size_t id = in[0];
        if (!nodes_[id].needs_grad) break;
        const Value& a = nodes_[id].value;
        if (adj[id].size() == 0) adj[id] = Value::Zero(a.rows(), a.cols());
        adj[id].middleRows(n.offset, g.rows()) += g;
        break;
      }
    }
  }

  std::vector<TapeNode<Scalar>> nodes_;
};

inline const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::constant: return "constant";
    case OpKind::add: return "add";
    case OpKind::subtract: return "subtract";
    case OpKind::scale: return "scale";
    case OpKind::scale_by: return "scale_by";
    case OpKind::multiply: return "multiply";
    case OpKind::matmul: return "matmul";
    case OpKind::affine: return "affine";
    case OpKind::tanh: return "tanh";
    case OpKind::sin: return "sin";
    case OpKind::exp: return "exp";
    case OpKind::sum: return "sum";
    case OpKind::squared_norm: return "squared_norm";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::reshape: return "reshape";
  }
  return "unknown";
}

// Expression-style free functions. Both operands must live on the same tape.

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) { return a.tape()->add(a, b); }
template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) { return a.tape()->subtract(a, b); }
template <typename Scalar>
Var<Scalar> operator*(Scalar c, const Var<Scalar>& a) { return a.tape()->scale(a, c); }
template <typename Scalar>
Var<Scalar> operator*(const Var<Scalar>& a, Scalar c) { return a.tape()->scale(a, c); }
template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a) { return a.tape()->scale(a, Scalar(-1)); }

template <typename Scalar>
Var<Scalar> scale_by(const Var<Scalar>& s, const Var<Scalar>& a) { return a.tape()->scale_by(s, a); }
template <typename Scalar>
Var<Scalar> cwise_product(const Var<Scalar>& a, const Var<Scalar>& b) { return a.tape()->multiply(a, b); }
template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) { return a.tape()->matmul(a, b); }
template <typename Scalar>
Var<Scalar> affine(const Var<Scalar>& w, const Var<Scalar>& x, const Var<Scalar>& b) {
  return x.tape()->affine(w, x, b);
}
template <typename Scalar>
Var<Scalar> tanh(const Var<Scalar>& a) { return a.tape()->tanh(a); }
template <typename Scalar>
Var<Scalar> sin(const Var<Scalar>& a) { return a.tape()->sin(a); }
template <typename Scalar>
Var<Scalar> exp(const Var<Scalar>& a) { return a.tape()->exp(a); }
template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) { return a.tape()->sum(a); }
template <typename Scalar>
Var<Scalar> squared_norm(const Var<Scalar>& a) { return a.tape()->squared_norm(a); }
template <typename Scalar>
Var<Scalar> slice(const Var<Scalar>& a, Eigen::Index offset, Eigen::Index count) {
  return a.tape()->slice(a, offset, count);
}
template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& a, Eigen::Index rows, Eigen::Index cols) {
  return a.tape()->reshape(a, rows, cols);
}
template <typename Scalar>
Var<Scalar> concat(const std::vector<Var<Scalar>>& parts) {
  return parts.front().tape()->concat(parts);
}
template <typename Scalar>
Var<Scalar> concat(std::initializer_list<Var<Scalar>> parts) {
  return concat(std::vector<Var<Scalar>>(parts));
}

using TapeD = Tape<double>;
using VarD = Var<double>;
using ArrayD = Array<double>;
using GradientD = Gradient<double>;

}  // namespace levda::ad
