#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// double matrices.
//
// A Tape records a graph lazily: building an op only checks shapes. Calling
// forward() evaluates every node in creation order, backward() walks the same
// order in reverse and accumulates adjoints. Leaves can be rebound between
// evaluations, so a graph built once can be re-run for every training epoch.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "feri/errors.hpp"

namespace feri::ad {

struct Array2D {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Array2D() = default;
  Array2D(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Array2D(std::size_t r, std::size_t c, std::vector<double> values)
      : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != rows * cols) throw ShapeError("Array2D: data length does not match rows x cols");
  }

  static Array2D from_rows(std::initializer_list<std::initializer_list<double>> rows_init) {
    Array2D out;
    out.rows = rows_init.size();
    out.cols = out.rows ? rows_init.begin()->size() : 0;
    for (const auto& r : rows_init) {
      if (r.size() != out.cols) throw ShapeError("Array2D::from_rows: ragged rows");
      out.data.insert(out.data.end(), r.begin(), r.end());
    }
    return out;
  }

  static Array2D column(std::vector<double> values) {
    const std::size_t n = values.size();
    return Array2D(n, 1, std::move(values));
  }

  static Array2D scalar(double v) { return Array2D(1, 1, v); }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::size_t size() const noexcept { return data.size(); }
  bool same_shape(const Array2D& o) const noexcept { return rows == o.rows && cols == o.cols; }
  std::string shape_string() const { return std::to_string(rows) + "x" + std::to_string(cols); }

  friend bool operator==(const Array2D&, const Array2D&) = default;
};

// Identity of a trainable array. Leaves registered under the same key
// contribute to the same gradient entry.
using ParamKey = std::size_t;

// One adjoint array per parameter key.
class GradientSet {
 public:
  using Map = std::map<ParamKey, Array2D>;

  void accumulate(ParamKey key, const Array2D& grad, double scale = 1.0) {
    auto [it, inserted] = grads_.try_emplace(key, grad.rows, grad.cols, 0.0);
    Array2D& dst = it->second;
    if (!dst.same_shape(grad)) throw ShapeError("GradientSet: shape mismatch for parameter " + std::to_string(key));
    for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += scale * grad.data[i];
  }

  void accumulate(const GradientSet& other, double scale = 1.0) {
    for (const auto& [key, g] : other.grads_) accumulate(key, g, scale);
  }

  void scale(double factor) {
    for (auto& [key, g] : grads_)
      for (double& v : g.data) v *= factor;
  }

  const Array2D* find(ParamKey key) const {
    auto it = grads_.find(key);
    return it == grads_.end() ? nullptr : &it->second;
  }
  const Array2D& at(ParamKey key) const {
    const Array2D* g = find(key);
    if (!g) throw StateError("GradientSet: no gradient for parameter " + std::to_string(key));
    return *g;
  }

  double squared_norm() const {
    double s = 0.0;
    for (const auto& [key, g] : grads_)
      for (double v : g.data) s += v * v;
    return s;
  }
  double global_norm() const { return std::sqrt(squared_norm()); }

  bool empty() const noexcept { return grads_.empty(); }
  std::size_t size() const noexcept { return grads_.size(); }
  Map::const_iterator begin() const { return grads_.begin(); }
  Map::const_iterator end() const { return grads_.end(); }

 private:
  Map grads_;
};

// Rescales all adjoints by max_norm / g when their global L2 norm g exceeds max_norm.
inline GradientSet clip_global_norm(GradientSet grads, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("clip_global_norm: max_norm must be positive");
  const double norm = grads.global_norm();
  if (norm > max_norm) grads.scale(max_norm / norm);
  return grads;
}

enum class OpKind {
  Leaf,
  MatMul,
  Add,
  Mul,
  Scale,
  Relu,
  Sigmoid,
  Softmax,
  LayerNorm,
  Embedding,
  Concat,
  Mean,
  Log,
  Bce,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Leaf: return "leaf";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::Relu: return "relu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Softmax: return "softmax";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::Embedding: return "embedding";
    case OpKind::Concat: return "concat";
    case OpKind::Mean: return "mean";
    case OpKind::Log: return "log";
    case OpKind::Bce: return "bce";
  }
  return "?";
}

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kProbClamp = 1e-7;

class Tape;

// Lightweight handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* t, std::size_t id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  // Vars hold a pointer to their tape, so a tape never moves.
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  Var constant(Array2D value) { return leaf(std::move(value), false, 0); }
  Var parameter(ParamKey key, Array2D value) { return leaf(std::move(value), true, key); }

  // Replaces a leaf's value; the shape must match the declared one.
  void bind(Var leaf_var, const Array2D& value) {
    Node& n = node(leaf_var);
    if (n.kind != OpKind::Leaf) throw StateError("bind: node is not a leaf");
    if (!value.same_shape(n.value))
      throw ShapeError("bind: expected " + n.value.shape_string() + ", got " + value.shape_string());
    n.value.data = value.data;
    evaluated_ = 0;
  }

  std::size_t rows(Var v) const { return node(v).rows; }
  std::size_t cols(Var v) const { return node(v).cols; }
  std::size_t size() const noexcept { return nodes_.size(); }
  OpKind kind(Var v) const { return node(v).kind; }

  // Evaluates every node up to and including root.
  const Array2D& forward(Var root) {
    const std::size_t last = node_index(root);
    for (std::size_t i = evaluated_; i <= last; ++i) eval(i);
    evaluated_ = std::max(evaluated_, last + 1);
    return nodes_[last].value;
  }

  const Array2D& value(Var v) const {
    const std::size_t i = node_index(v);
    if (i >= evaluated_ && nodes_[i].kind != OpKind::Leaf) throw StateError("value: node has not been evaluated");
    return nodes_[i].value;
  }

  // Adjoints of root (which must be 1x1) w.r.t. every parameter leaf it depends on.
  GradientSet backward(Var root) {
    const std::size_t last = node_index(root);
    if (last >= evaluated_) throw StateError("backward called before forward");
    if (nodes_[last].rows != 1 || nodes_[last].cols != 1)
      throw ShapeError("backward: root must be a scalar, got " + nodes_[last].value.shape_string());

    for (std::size_t i = 0; i <= last; ++i) {
      Node& n = nodes_[i];
      n.touched = false;
      n.adjoint.rows = n.rows;
      n.adjoint.cols = n.cols;
      n.adjoint.data.assign(n.rows * n.cols, 0.0);
    }
    nodes_[last].adjoint.data[0] = 1.0;
    nodes_[last].touched = true;

    GradientSet grads;
    for (std::size_t i = last + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.touched || !n.requires_grad) continue;
      if (n.kind == OpKind::Leaf) {
        if (n.is_param) grads.accumulate(n.key, n.adjoint);
        continue;
      }
      propagate(i);
    }
    return grads;
  }

  // ---- op construction (shape-checked, evaluated lazily) ----

  Var matmul(Var a, Var b) {
    const Node &na = node(a), &nb = node(b);
    if (na.cols != nb.rows)
      throw ShapeError("matmul: inner dimensions differ (" + shape(na) + " * " + shape(nb) + ")");
    return push(OpKind::MatMul, {a.id(), b.id()}, na.rows, nb.cols);
  }

  // Elementwise a + b; b may also be a single row broadcast over a's rows.
  Var add(Var a, Var b) { return broadcast_binary(OpKind::Add, a, b); }
  Var mul(Var a, Var b) { return broadcast_binary(OpKind::Mul, a, b); }

  Var scale(Var a, double factor) {
    Var v = unary(OpKind::Scale, a);
    nodes_.back().scalar = factor;
    return v;
  }

  Var relu(Var a) { return unary(OpKind::Relu, a); }
  Var sigmoid(Var a) { return unary(OpKind::Sigmoid, a); }
  Var log(Var a) { return unary(OpKind::Log, a); }
  // Row-wise softmax.
  Var softmax(Var a) { return unary(OpKind::Softmax, a); }
  // Row-wise standardization without affine terms.
  Var layer_norm(Var a) {
    if (node(a).cols == 0) throw ShapeError("layer_norm: zero columns");
    return unary(OpKind::LayerNorm, a);
  }

  // Gathers rows of table; the result has one row per index.
  Var embedding(Var table, std::vector<std::size_t> indices) {
    const Node& nt = node(table);
    for (std::size_t idx : indices)
      if (idx >= nt.rows)
        throw ShapeError("embedding: index " + std::to_string(idx) + " out of range for table " + shape(nt));
    Var v = push(OpKind::Embedding, {table.id()}, indices.size(), nt.cols);
    nodes_.back().indices = std::move(indices);
    return v;
  }

  // Column-wise concatenation.
  Var concat(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat: no operands");
    std::vector<std::size_t> ids;
    const std::size_t r = node(parts.front()).rows;
    std::size_t c = 0;
    for (Var p : parts) {
      const Node& np = node(p);
      if (np.rows != r) throw ShapeError("concat: row counts differ (" + shape(node(parts.front())) + " vs " + shape(np) + ")");
      c += np.cols;
      ids.push_back(p.id());
    }
    return push(OpKind::Concat, std::move(ids), r, c);
  }
  Var concat(std::initializer_list<Var> parts) { return concat(std::span<const Var>(parts.begin(), parts.size())); }

  // Mean of all entries, as a 1x1 node.
  Var mean(Var a) {
    if (node(a).rows * node(a).cols == 0) throw ShapeError("mean: empty operand");
    return push(OpKind::Mean, {a.id()}, 1, 1);
  }

  // Mean binary cross-entropy of probabilities p against 0/1 labels.
  Var bce(Var p, std::vector<double> labels) {
    const Node& np = node(p);
    if (np.rows * np.cols != labels.size())
      throw ShapeError("bce: " + std::to_string(labels.size()) + " labels for probabilities " + shape(np));
    if (labels.empty()) throw ShapeError("bce: empty operand");
    Var v = push(OpKind::Bce, {p.id()}, 1, 1);
    nodes_.back().aux = std::move(labels);
    return v;
  }

 private:
  struct Node {
    OpKind kind = OpKind::Leaf;
    std::vector<std::size_t> operands;
    std::size_t rows = 0, cols = 0;
    Array2D value;
    Array2D adjoint;
    bool touched = false;
    bool requires_grad = false;  // a parameter leaf is reachable below this node
    bool is_param = false;
    ParamKey key = 0;
    double scalar = 0.0;
    std::vector<std::size_t> indices;
    std::vector<double> aux;  // bce labels; layer-norm per-row inverse std
  };

  static std::string shape(const Node& n) { return std::to_string(n.rows) + "x" + std::to_string(n.cols); }

  std::size_t node_index(Var v) const {
    if (v.tape() != this) throw StateError("variable belongs to a different tape");
    if (v.id() >= nodes_.size()) throw StateError("variable id out of range");
    return v.id();
  }
  Node& node(Var v) { return nodes_[node_index(v)]; }
  const Node& node(Var v) const { return nodes_[node_index(v)]; }

  Var leaf(Array2D value, bool is_param, ParamKey key) {
    if (value.data.size() != value.rows * value.cols) throw ShapeError("leaf: data length does not match shape");
    Node n;
    n.kind = OpKind::Leaf;
    n.rows = value.rows;
    n.cols = value.cols;
    n.value = std::move(value);
    n.is_param = is_param;
    n.requires_grad = is_param;
    n.key = key;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  Var push(OpKind kind, std::vector<std::size_t> operands, std::size_t r, std::size_t c) {
    Node n;
    n.kind = kind;
    for (std::size_t id : operands) n.requires_grad = n.requires_grad || nodes_[id].requires_grad;
    n.operands = std::move(operands);
    n.rows = r;
    n.cols = c;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  Var unary(OpKind kind, Var a) {
    const Node& na = node(a);
    return push(kind, {a.id()}, na.rows, na.cols);
  }

  Var broadcast_binary(OpKind kind, Var a, Var b) {
    const Node &na = node(a), &nb = node(b);
    const bool same = na.rows == nb.rows && na.cols == nb.cols;
    const bool row_bcast = nb.rows == 1 && nb.cols == na.cols;
    if (!same && !row_bcast)
      throw ShapeError(std::string(op_name(kind)) + ": incompatible shapes " + shape(na) + " and " + shape(nb));
    return push(kind, {a.id(), b.id()}, na.rows, na.cols);
  }

  void eval(std::size_t i) {
    Node& n = nodes_[i];
    if (n.kind == OpKind::Leaf) return;
    Array2D& out = n.value;
    out.rows = n.rows;
    out.cols = n.cols;
    out.data.assign(n.rows * n.cols, 0.0);
    auto in = [&](std::size_t k) -> const Array2D& { return nodes_[n.operands[k]].value; };

    switch (n.kind) {
      case OpKind::MatMul: {
        const Array2D &a = in(0), &b = in(1);
        const std::size_t inner = a.cols, nc = b.cols;
        for (std::size_t r = 0; r < a.rows; ++r) {
          double* orow = &out.data[r * nc];
          const double* arow = &a.data[r * inner];
          for (std::size_t k = 0; k < inner; ++k) {
            const double av = arow[k];
            if (av == 0.0) continue;
            const double* brow = &b.data[k * nc];
            for (std::size_t c = 0; c < nc; ++c) orow[c] += av * brow[c];
          }
        }
        break;
      }
      case OpKind::Add:
      case OpKind::Mul: {
        const Array2D &a = in(0), &b = in(1);
        const bool bcast = b.rows != a.rows;
        for (std::size_t r = 0; r < a.rows; ++r) {
          const double* brow = &b.data[(bcast ? 0 : r) * a.cols];
          for (std::size_t c = 0; c < a.cols; ++c) {
            const double x = a.data[r * a.cols + c];
            out.data[r * a.cols + c] = n.kind == OpKind::Add ? x + brow[c] : x * brow[c];
          }
        }
        break;
      }
      case OpKind::Scale:
        for (std::size_t k = 0; k < out.size(); ++k) out.data[k] = n.scalar * in(0).data[k];
        break;
      case OpKind::Relu:
        for (std::size_t k = 0; k < out.size(); ++k) out.data[k] = std::max(0.0, in(0).data[k]);
        break;
      case OpKind::Sigmoid:
        for (std::size_t k = 0; k < out.size(); ++k) {
          const double x = in(0).data[k];
          if (x >= 0.0) {
            out.data[k] = 1.0 / (1.0 + std::exp(-x));
          } else {
            const double e = std::exp(x);
            out.data[k] = e / (1.0 + e);
          }
        }
        break;
      case OpKind::Log:
        for (std::size_t k = 0; k < out.size(); ++k) out.data[k] = std::log(in(0).data[k]);
        break;
      case OpKind::Softmax: {
        const Array2D& a = in(0);
        for (std::size_t r = 0; r < a.rows; ++r) {
          const double* x = &a.data[r * a.cols];
          double* y = &out.data[r * a.cols];
          const double mx = *std::max_element(x, x + a.cols);
          double s = 0.0;
          for (std::size_t c = 0; c < a.cols; ++c) s += (y[c] = std::exp(x[c] - mx));
          for (std::size_t c = 0; c < a.cols; ++c) y[c] /= s;
        }
        break;
      }
      case OpKind::LayerNorm: {
        const Array2D& a = in(0);
        n.aux.assign(a.rows, 0.0);
        const double inv_n = 1.0 / static_cast<double>(a.cols);
        for (std::size_t r = 0; r < a.rows; ++r) {
          const double* x = &a.data[r * a.cols];
          double* y = &out.data[r * a.cols];
          double mu = 0.0;
          for (std::size_t c = 0; c < a.cols; ++c) mu += x[c];
          mu *= inv_n;
          double var = 0.0;
          for (std::size_t c = 0; c < a.cols; ++c) var += (x[c] - mu) * (x[c] - mu);
          var *= inv_n;
          const double inv_std = 1.0 / std::sqrt(var + kLayerNormEps);
          n.aux[r] = inv_std;
          for (std::size_t c = 0; c < a.cols; ++c) y[c] = (x[c] - mu) * inv_std;
        }
        break;
      }
      case OpKind::Embedding: {
        const Array2D& t = in(0);
        for (std::size_t r = 0; r < n.indices.size(); ++r)
          std::copy_n(&t.data[n.indices[r] * t.cols], t.cols, &out.data[r * t.cols]);
        break;
      }
      case OpKind::Concat: {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.operands.size(); ++k) {
          const Array2D& p = in(k);
          for (std::size_t r = 0; r < p.rows; ++r)
            std::copy_n(&p.data[r * p.cols], p.cols, &out.data[r * n.cols + offset]);
          offset += p.cols;
        }
        break;
      }
      case OpKind::Mean: {
        double s = 0.0;
        for (double v : in(0).data) s += v;
        out.data[0] = s / static_cast<double>(in(0).size());
        break;
      }
      case OpKind::Bce: {
        const Array2D& p = in(0);
        double s = 0.0;
        for (std::size_t k = 0; k < p.size(); ++k) {
          const double pc = std::clamp(p.data[k], kProbClamp, 1.0 - kProbClamp);
          const double y = n.aux[k];
          s -= y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc);
        }
        out.data[0] = s / static_cast<double>(p.size());
        break;
      }
      case OpKind::Leaf:
        break;
    }

    for (double v : out.data)
      if (!std::isfinite(v)) throw NonFiniteError(std::string(op_name(n.kind)) + ": produced a non-finite value");
  }

  // Pushes node i's adjoint onto its operands.
  void propagate(std::size_t i) {
    Node& n = nodes_[i];
    const Array2D& g = n.adjoint;
    auto operand = [&](std::size_t k) -> Node& {
      Node& o = nodes_[n.operands[k]];
      o.touched = true;
      return o;
    };

    switch (n.kind) {
      case OpKind::MatMul: {
        Node& a = operand(0);
        Node& b = operand(1);
        const std::size_t inner = a.cols, nc = b.cols;
        // dA = dC * B^T, accumulated row by row against a transposed copy of B.
        if (a.requires_grad) {
          scratch_.resize(inner * nc);
          for (std::size_t k = 0; k < inner; ++k)
            for (std::size_t c = 0; c < nc; ++c) scratch_[c * inner + k] = b.value.data[k * nc + c];
          for (std::size_t r = 0; r < a.rows; ++r) {
            const double* grow = &g.data[r * nc];
            double* darow = &a.adjoint.data[r * inner];
            for (std::size_t c = 0; c < nc; ++c) {
              const double gv = grow[c];
              if (gv == 0.0) continue;
              const double* bt = &scratch_[c * inner];
              for (std::size_t k = 0; k < inner; ++k) darow[k] += gv * bt[k];
            }
          }
        }
        // dB = A^T * dC
        if (b.requires_grad)
        for (std::size_t r = 0; r < a.rows; ++r) {
          const double* grow = &g.data[r * nc];
          const double* arow = &a.value.data[r * inner];
          for (std::size_t k = 0; k < inner; ++k) {
            const double av = arow[k];
            if (av == 0.0) continue;
            double* dbrow = &b.adjoint.data[k * nc];
            for (std::size_t c = 0; c < nc; ++c) dbrow[c] += av * grow[c];
          }
        }
        break;
      }
      case OpKind::Add:
      case OpKind::Mul: {
        Node& a = operand(0);
        Node& b = operand(1);
        const bool bcast = b.rows != a.rows;
        for (std::size_t r = 0; r < a.rows; ++r) {
          const std::size_t brow = (bcast ? 0 : r) * a.cols;
          for (std::size_t c = 0; c < a.cols; ++c) {
            const std::size_t k = r * a.cols + c;
            if (n.kind == OpKind::Add) {
              a.adjoint.data[k] += g.data[k];
              b.adjoint.data[brow + c] += g.data[k];
            } else {
              a.adjoint.data[k] += g.data[k] * b.value.data[brow + c];
              b.adjoint.data[brow + c] += g.data[k] * a.value.data[k];
            }
          }
        }
        break;
      }
      case OpKind::Scale: {
        Node& a = operand(0);
        for (std::size_t k = 0; k < g.size(); ++k) a.adjoint.data[k] += n.scalar * g.data[k];
        break;
      }
      case OpKind::Relu: {
        Node& a = operand(0);
        for (std::size_t k = 0; k < g.size(); ++k)
          if (a.value.data[k] > 0.0) a.adjoint.data[k] += g.data[k];
        break;
      }
      case OpKind::Sigmoid: {
        Node& a = operand(0);
        for (std::size_t k = 0; k < g.size(); ++k) {
          const double y = n.value.data[k];
          a.adjoint.data[k] += g.data[k] * y * (1.0 - y);
        }
        break;
      }
      case OpKind::Log: {
        Node& a = operand(0);
        for (std::size_t k = 0; k < g.size(); ++k) a.adjoint.data[k] += g.data[k] / a.value.data[k];
        break;
      }
      case OpKind::Softmax: {
        Node& a = operand(0);
        for (std::size_t r = 0; r < n.rows; ++r) {
          const double* y = &n.value.data[r * n.cols];
          const double* gy = &g.data[r * n.cols];
          double dot = 0.0;
          for (std::size_t c = 0; c < n.cols; ++c) dot += gy[c] * y[c];
          for (std::size_t c = 0; c < n.cols; ++c) a.adjoint.data[r * n.cols + c] += y[c] * (gy[c] - dot);
        }
        break;
      }
      case OpKind::LayerNorm: {
        Node& a = operand(0);
        const double inv_n = 1.0 / static_cast<double>(n.cols);
        for (std::size_t r = 0; r < n.rows; ++r) {
          const double* y = &n.value.data[r * n.cols];
          const double* gy = &g.data[r * n.cols];
          double mean_g = 0.0, mean_gy = 0.0;
          for (std::size_t c = 0; c < n.cols; ++c) {
            mean_g += gy[c];
            mean_gy += gy[c] * y[c];
          }
          mean_g *= inv_n;
          mean_gy *= inv_n;
          const double inv_std = n.aux[r];
          for (std::size_t c = 0; c < n.cols; ++c)
            a.adjoint.data[r * n.cols + c] += inv_std * (gy[c] - mean_g - y[c] * mean_gy);
        }
        break;
      }
      case OpKind::Embedding: {
        Node& t = operand(0);
        for (std::size_t r = 0; r < n.indices.size(); ++r) {
          double* dst = &t.adjoint.data[n.indices[r] * t.cols];
          const double* src = &g.data[r * t.cols];
          for (std::size_t c = 0; c < t.cols; ++c) dst[c] += src[c];
        }
        break;
      }
      case OpKind::Concat: {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.operands.size(); ++k) {
          Node& p = operand(k);
          for (std::size_t r = 0; r < p.rows; ++r)
            for (std::size_t c = 0; c < p.cols; ++c) p.adjoint.data[r * p.cols + c] += g.data[r * n.cols + offset + c];
          offset += p.cols;
        }
        break;
      }
      case OpKind::Mean: {
        Node& a = operand(0);
        const double share = g.data[0] / static_cast<double>(a.value.size());
        for (double& v : a.adjoint.data) v += share;
        break;
      }
      case OpKind::Bce: {
        Node& p = operand(0);
        const double inv_n = 1.0 / static_cast<double>(p.value.size());
        for (std::size_t k = 0; k < p.value.size(); ++k) {
          const double pv = p.value.data[k];
          // Zero derivative where the clamp is active.
          if (pv <= kProbClamp || pv >= 1.0 - kProbClamp) continue;
          const double y = n.aux[k];
          p.adjoint.data[k] += g.data[0] * inv_n * (-(y / pv) + (1.0 - y) / (1.0 - pv));
        }
        break;
      }
      case OpKind::Leaf:
        break;
    }
  }

  std::vector<Node> nodes_;
  std::vector<double> scratch_;
  std::size_t evaluated_ = 0;  // nodes [0, evaluated_) hold current forward values
};

// Free-function spellings, so model code reads as expressions.
inline Var matmul(Var a, Var b) { return a.tape()->matmul(a, b); }
inline Var add(Var a, Var b) { return a.tape()->add(a, b); }
inline Var mul(Var a, Var b) { return a.tape()->mul(a, b); }
inline Var scale(Var a, double f) { return a.tape()->scale(a, f); }
inline Var relu(Var a) { return a.tape()->relu(a); }
inline Var sigmoid(Var a) { return a.tape()->sigmoid(a); }
inline Var log(Var a) { return a.tape()->log(a); }
inline Var softmax(Var a) { return a.tape()->softmax(a); }
inline Var layer_norm(Var a) { return a.tape()->layer_norm(a); }
inline Var mean(Var a) { return a.tape()->mean(a); }
inline Var bce(Var p, std::vector<double> labels) { return p.tape()->bce(p, std::move(labels)); }
inline Var embedding(Var table, std::vector<std::size_t> idx) { return table.tape()->embedding(table, std::move(idx)); }

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

}  // namespace feri::ad
