#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "exlin/ad/tensor.hpp"

namespace exlin::ad {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Handle to a node of a Graph. Only meaningful for the graph that created it.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

enum class Op : std::uint8_t {
  Input,
  Param,
  Const,
  Add,
  Sub,
  Mul,
  MatMul,
  Sinh,
  Asinh,
  Cosh,
  Exp,
  Log,
  Softplus,
  Relu,
  Square,
  Step,
  Sum,
  Mean,
  Gather,
  Concat,
  Bmv,
  Bsolve,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Param: return "param";
    case Op::Const: return "const";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::MatMul: return "matmul";
    case Op::Sinh: return "sinh";
    case Op::Asinh: return "asinh";
    case Op::Cosh: return "cosh";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Softplus: return "softplus";
    case Op::Relu: return "relu";
    case Op::Square: return "square";
    case Op::Step: return "step";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::Gather: return "gather";
    case Op::Concat: return "concat";
    case Op::Bmv: return "bmv";
    case Op::Bsolve: return "bsolve";
  }
  return "?";
}

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}
inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

using Bindings = std::map<std::string, Tensor>;

/// Reverse-mode differentiable computation graph over 2-D tensors.
///
/// Nodes are appended in topological order. Leaves are named inputs (bound at
/// evaluate time), named parameters (read from caller-owned storage) and
/// constants. Rows are a batch dimension: every elementwise op broadcasts a
/// 1-row (or 1x1) operand, and the batched small-matrix ops `bmv`/`bsolve` act
/// row by row on matrices flattened column-major.
///
/// Once `evaluate` has run, the graph is live: nodes appended afterwards are
/// computed immediately, which is what `jvp` relies on to know shapes.
class Graph {
 public:
  struct Seed {
    Var var;
    Var tangent;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  // ---- leaves -------------------------------------------------------------

  Var input(const std::string& name) {
    for (int i : inputs_) {
      if (nodes_[i].name == name) return Var{i};
    }
    Node n;
    n.op = Op::Input;
    n.name = name;
    Var v = push(std::move(n));
    inputs_.push_back(v.id);
    return v;
  }

  /// Parameter leaf reading from `storage`, which must outlive the graph.
  /// Requesting the same name twice returns the same node.
  Var param(const std::string& name, const Tensor& storage) {
    if (auto it = param_ids_.find(name); it != param_ids_.end()) {
      if (nodes_[it->second].external != &storage) {
        throw Error("parameter '" + name + "' bound to two different tensors");
      }
      return Var{it->second};
    }
    Node n;
    n.op = Op::Param;
    n.name = name;
    n.external = &storage;
    Var v = push(std::move(n));
    param_ids_.emplace(name, v.id);
    return v;
  }

  Var constant(Tensor value) {
    Node n;
    n.op = Op::Const;
    n.value = std::move(value);
    return push(std::move(n));
  }
  Var constant(double value) { return constant(Tensor::scalar(value)); }

  // ---- primitives ---------------------------------------------------------

  Var add(Var a, Var b) { return binary(Op::Add, a, b); }
  Var sub(Var a, Var b) { return binary(Op::Sub, a, b); }
  Var mul(Var a, Var b) { return binary(Op::Mul, a, b); }
  Var matmul(Var a, Var b) { return binary(Op::MatMul, a, b); }
  Var sinh(Var a) { return unary(Op::Sinh, a); }
  Var asinh(Var a) { return unary(Op::Asinh, a); }
  Var cosh(Var a) { return unary(Op::Cosh, a); }
  Var exp(Var a) { return unary(Op::Exp, a); }
  Var log(Var a) { return unary(Op::Log, a); }
  Var softplus(Var a) { return unary(Op::Softplus, a); }
  Var relu(Var a) { return unary(Op::Relu, a); }
  Var square(Var a) { return unary(Op::Square, a); }
  /// Heaviside step (1 for x > 0); zero derivative everywhere.
  Var step(Var a) { return unary(Op::Step, a); }
  Var sum(Var a) { return unary(Op::Sum, a); }
  Var mean(Var a) { return unary(Op::Mean, a); }

  /// out[:, j] = a[:, index[j]], or 0 where index[j] < 0.
  Var gather(Var a, std::vector<int> index) {
    Node n;
    n.op = Op::Gather;
    n.in = {a.id};
    n.index = std::move(index);
    check_ids(n);
    return push(std::move(n));
  }
  Var slice(Var a, int start, int count) {
    std::vector<int> idx(count);
    for (int j = 0; j < count; ++j) idx[j] = start + j;
    return gather(a, std::move(idx));
  }
  Var concat(std::span<const Var> parts) {
    if (parts.empty()) throw Error("concat of zero tensors");
    Node n;
    n.op = Op::Concat;
    for (Var p : parts) n.in.push_back(p.id);
    check_ids(n);
    return push(std::move(n));
  }
  Var concat(std::initializer_list<Var> parts) {
    return concat(std::span<const Var>(parts.begin(), parts.size()));
  }

  /// Batched matrix-vector product. Each row of `m` is a rows x (v.cols)
  /// matrix stored column-major.
  Var bmv(Var m, Var v, std::size_t rows) {
    Node n;
    n.op = Op::Bmv;
    n.in = {m.id, v.id};
    n.rows_attr = rows;
    check_ids(n);
    return push(std::move(n));
  }

  /// Batched dense solve m x = rhs, m square and column-major per row.
  Var bsolve(Var m, Var rhs) {
    Node n;
    n.op = Op::Bsolve;
    n.in = {m.id, rhs.id};
    check_ids(n);
    return push(std::move(n));
  }

  // ---- sugar over the primitive set ---------------------------------------

  Var scale(Var a, double s) { return mul(a, constant(s)); }
  Var neg(Var a) { return scale(a, -1.0); }
  Var add_scalar(Var a, double s) { return add(a, constant(s)); }

  void set_label(Var v, std::string label) { at(v).label = std::move(label); }

  // ---- execution ----------------------------------------------------------

  /// Bind inputs and compute every node. Unbound inputs are an error.
  void evaluate(const Bindings& inputs) {
    bindings_ = inputs;
    evaluated_ = 0;
    live_ = true;
    evaluate_pending();
  }

  /// Rebind one input without touching the others, then recompute.
  void rebind(const std::string& name, Tensor value) {
    bindings_[name] = std::move(value);
    evaluated_ = 0;
    live_ = true;
    evaluate_pending();
  }

  /// Rebind several inputs, then recompute once.
  void rebind(const Bindings& values) {
    for (const auto& [name, value] : values) bindings_[name] = value;
    evaluated_ = 0;
    live_ = true;
    evaluate_pending();
  }

  bool evaluated() const { return live_ && evaluated_ == nodes_.size(); }

  const Tensor& value(Var v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= evaluated_) {
      throw Error("value of node " + describe(v.id) + " requested before evaluation");
    }
    return nodes_[v.id].value;
  }

  /// Reverse sweep from `output` seeded with `seed` (same shape as output).
  void backward(Var output, const Tensor& seed) {
    if (!live_ || output.id < 0 || static_cast<std::size_t>(output.id) >= evaluated_) {
      throw Error("backward requested before forward evaluation of " + describe(output.id));
    }
    const Tensor& out = nodes_[output.id].value;
    if (seed.rows() != out.rows() || seed.cols() != out.cols()) {
      throw Error("backward seed shape " + seed.shape_string() + " does not match output " +
                  out.shape_string() + " at " + describe(output.id));
    }
    for (std::size_t i = 0; i <= static_cast<std::size_t>(output.id); ++i) {
      nodes_[i].has_adjoint = false;
    }
    backward_limit_ = output.id;
    Node& o = nodes_[output.id];
    o.adjoint = seed;
    o.has_adjoint = true;
    for (int id = output.id; id >= 0; --id) {
      if (nodes_[id].has_adjoint) backprop(id);
    }
  }

  /// Adjoint of `v` from the last backward sweep (zeros if unreached).
  Tensor grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (v.id <= backward_limit_ && n.has_adjoint) return n.adjoint;
    return Tensor(n.value.rows(), n.value.cols(), 0.0);
  }

  /// Backward sweep and gradients of every parameter, keyed by name.
  std::map<std::string, Tensor> gradient(Var output, const Tensor& seed) {
    backward(output, seed);
    std::map<std::string, Tensor> out;
    for (const auto& [name, id] : param_ids_) out.emplace(name, grad(Var{id}));
    return out;
  }
  std::map<std::string, Tensor> gradient(Var output) {
    const Tensor& o = value(output);
    return gradient(output, Tensor(o.rows(), o.cols(), 1.0));
  }

  /// Forward-mode directional derivatives of `outputs`, built as new graph
  /// nodes (so they are themselves differentiable). Seeds give the tangent of
  /// chosen leaves or intermediate nodes; everything else has zero tangent.
  /// Requires a live graph.
  std::vector<Var> jvp(std::span<const Var> outputs, std::span<const Seed> seeds);
  Var jvp(Var output, std::span<const Seed> seeds) {
    return jvp(std::span<const Var>(&output, 1), seeds).front();
  }
  Var jvp(Var output, std::initializer_list<Seed> seeds) {
    return jvp(output, std::span<const Seed>(seeds.begin(), seeds.size()));
  }

  std::size_t size() const { return nodes_.size(); }
  const std::map<std::string, int>& parameters() const { return param_ids_; }

 private:
  struct Node {
    Op op = Op::Const;
    std::vector<int> in;
    std::string name;
    std::string label;
    const Tensor* external = nullptr;
    Tensor value;
    Tensor adjoint;
    bool has_adjoint = false;
    std::vector<int> index;
    std::size_t rows_attr = 0;
    // Bsolve: LU factors (column-major per distinct matrix row) and pivots.
    std::vector<double> lu;
    std::vector<int> piv;
  };

  Node& at(Var v) {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw Error("invalid node handle");
    return nodes_[v.id];
  }

  std::string describe(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) return "<invalid>";
    const Node& n = nodes_[id];
    std::string s = std::string(op_name(n.op)) + "#" + std::to_string(id);
    if (!n.name.empty()) s += " '" + n.name + "'";
    if (!n.label.empty()) s += " [" + n.label + "]";
    return s;
  }

  void check_ids(const Node& n) const {
    for (int i : n.in) {
      if (i < 0 || static_cast<std::size_t>(i) >= nodes_.size()) {
        throw Error(std::string("invalid operand handle for ") + op_name(n.op));
      }
    }
  }

  Var unary(Op op, Var a) {
    Node n;
    n.op = op;
    n.in = {a.id};
    check_ids(n);
    return push(std::move(n));
  }
  Var binary(Op op, Var a, Var b) {
    Node n;
    n.op = op;
    n.in = {a.id, b.id};
    check_ids(n);
    return push(std::move(n));
  }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    Var v{static_cast<int>(nodes_.size()) - 1};
    if (live_ && evaluated_ + 1 == nodes_.size()) {
      compute(v.id);
      evaluated_ = nodes_.size();
    }
    return v;
  }

  void evaluate_pending() {
    for (; evaluated_ < nodes_.size(); ++evaluated_) compute(static_cast<int>(evaluated_));
  }

  // Broadcast helpers: dimension d of an operand is either equal to the output's or 1.
  static std::size_t bdim(std::size_t a, std::size_t b, bool& ok) {
    if (a == b) return a;
    if (a == 1) return b;
    if (b == 1) return a;
    ok = false;
    return 0;
  }

  void compute(int id);
  void backprop(int id);
  void accumulate(int id, const Tensor& g);
  Var tangent_rule(int id, const std::vector<int>& tan);
  Var fit_shape(Var t, int primal);

  std::vector<Node> nodes_;
  std::vector<int> inputs_;
  std::map<std::string, int> param_ids_;
  Bindings bindings_;
  std::size_t evaluated_ = 0;
  bool live_ = false;
  int backward_limit_ = -1;
};

// ---------------------------------------------------------------------------
// forward

namespace detail {

inline double elem(const Tensor& t, std::size_t r, std::size_t c) {
  return t(t.rows() == 1 ? 0 : r, t.cols() == 1 ? 0 : c);
}

// LU with partial pivoting of an n x n column-major matrix; returns false if singular.
inline bool lu_factor(double* a, int* piv, int n) {
  for (int k = 0; k < n; ++k) {
    int p = k;
    double best = std::abs(a[k + k * n]);
    for (int i = k + 1; i < n; ++i) {
      if (std::abs(a[i + k * n]) > best) {
        best = std::abs(a[i + k * n]);
        p = i;
      }
    }
    piv[k] = p;
    if (best == 0.0) return false;
    if (p != k) {
      for (int j = 0; j < n; ++j) std::swap(a[k + j * n], a[p + j * n]);
    }
    const double inv = 1.0 / a[k + k * n];
    for (int i = k + 1; i < n; ++i) a[i + k * n] *= inv;
    for (int j = k + 1; j < n; ++j) {
      const double f = a[k + j * n];
      if (f == 0.0) continue;
      for (int i = k + 1; i < n; ++i) a[i + j * n] -= a[i + k * n] * f;
    }
  }
  return true;
}

// Solves (LU) x = b in place.
inline void lu_solve(const double* lu, const int* piv, int n, double* b) {
  for (int k = 0; k < n; ++k) {
    if (piv[k] != k) std::swap(b[k], b[piv[k]]);
  }
  for (int i = 0; i < n; ++i) {
    double s = b[i];
    for (int j = 0; j < i; ++j) s -= lu[i + j * n] * b[j];
    b[i] = s;
  }
  for (int i = n - 1; i >= 0; --i) {
    double s = b[i];
    for (int j = i + 1; j < n; ++j) s -= lu[i + j * n] * b[j];
    b[i] = s / lu[i + i * n];
  }
}

// Solves (LU)^T x = b in place.
inline void lu_solve_transposed(const double* lu, const int* piv, int n, double* b) {
  for (int i = 0; i < n; ++i) {
    double s = b[i];
    for (int j = 0; j < i; ++j) s -= lu[j + i * n] * b[j];
    b[i] = s / lu[i + i * n];
  }
  for (int i = n - 1; i >= 0; --i) {
    double s = b[i];
    for (int j = i + 1; j < n; ++j) s -= lu[j + i * n] * b[j];
    b[i] = s;
  }
  for (int k = n - 1; k >= 0; --k) {
    if (piv[k] != k) std::swap(b[k], b[piv[k]]);
  }
}

inline constexpr double kMaxCondition = 1e12;

}  // namespace detail

inline void Graph::compute(int id) {
  Node& n = nodes_[id];
  auto in = [&](int k) -> const Tensor& { return nodes_[n.in[k]].value; };
  auto fail = [&](const std::string& what) { throw Error(what + " at " + describe(id)); };
  Tensor& out = n.value;

  switch (n.op) {
    case Op::Input: {
      auto it = bindings_.find(n.name);
      if (it == bindings_.end()) fail("input not bound");
      out = it->second;
      break;
    }
    case Op::Param:
      out = *n.external;
      break;
    case Op::Const:
      break;
    case Op::Add:
    case Op::Sub:
    case Op::Mul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      bool ok = true;
      const std::size_t r = bdim(a.rows(), b.rows(), ok);
      const std::size_t c = bdim(a.cols(), b.cols(), ok);
      if (!ok) fail("shape mismatch " + a.shape_string() + " vs " + b.shape_string());
      out.resize(r, c);
      if (a.rows() == r && a.cols() == c && b.rows() == r && b.cols() == c) {
        const std::size_t sz = r * c;
        const double* pa = a.values().data();
        const double* pb = b.values().data();
        double* po = out.values().data();
        if (n.op == Op::Add) for (std::size_t i = 0; i < sz; ++i) po[i] = pa[i] + pb[i];
        else if (n.op == Op::Sub) for (std::size_t i = 0; i < sz; ++i) po[i] = pa[i] - pb[i];
        else for (std::size_t i = 0; i < sz; ++i) po[i] = pa[i] * pb[i];
      } else {
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) {
            const double x = detail::elem(a, i, j);
            const double y = detail::elem(b, i, j);
            out(i, j) = n.op == Op::Add ? x + y : (n.op == Op::Sub ? x - y : x * y);
          }
        }
      }
      break;
    }
    case Op::MatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.cols() != b.rows()) fail("matmul shape mismatch " + a.shape_string() + " @ " + b.shape_string());
      const std::size_t r = a.rows(), k = a.cols(), c = b.cols();
      out.resize(r, c);
      out.fill(0.0);
      for (std::size_t i = 0; i < r; ++i) {
        double* po = out.values().data() + i * c;
        const double* pa = a.values().data() + i * k;
        for (std::size_t t = 0; t < k; ++t) {
          const double av = pa[t];
          if (av == 0.0) continue;
          const double* pb = b.values().data() + t * c;
          for (std::size_t j = 0; j < c; ++j) po[j] += av * pb[j];
        }
      }
      break;
    }
    case Op::Sinh:
    case Op::Asinh:
    case Op::Cosh:
    case Op::Exp:
    case Op::Log:
    case Op::Softplus:
    case Op::Relu:
    case Op::Square:
    case Op::Step: {
      const Tensor& a = in(0);
      out.resize(a.rows(), a.cols());
      const double* pa = a.values().data();
      double* po = out.values().data();
      const std::size_t sz = a.size();
      switch (n.op) {
        case Op::Sinh: for (std::size_t i = 0; i < sz; ++i) po[i] = std::sinh(pa[i]); break;
        case Op::Asinh: for (std::size_t i = 0; i < sz; ++i) po[i] = std::asinh(pa[i]); break;
        case Op::Cosh: for (std::size_t i = 0; i < sz; ++i) po[i] = std::cosh(pa[i]); break;
        case Op::Exp: for (std::size_t i = 0; i < sz; ++i) po[i] = std::exp(pa[i]); break;
        case Op::Log:
          for (std::size_t i = 0; i < sz; ++i) {
            if (!(pa[i] > 0.0)) fail("log of non-positive value");
            po[i] = std::log(pa[i]);
          }
          break;
        case Op::Softplus: for (std::size_t i = 0; i < sz; ++i) po[i] = ad::softplus(pa[i]); break;
        case Op::Relu: for (std::size_t i = 0; i < sz; ++i) po[i] = pa[i] > 0.0 ? pa[i] : 0.0; break;
        case Op::Square: for (std::size_t i = 0; i < sz; ++i) po[i] = pa[i] * pa[i]; break;
        case Op::Step: for (std::size_t i = 0; i < sz; ++i) po[i] = pa[i] > 0.0 ? 1.0 : 0.0; break;
        default: break;
      }
      break;
    }
    case Op::Sum:
    case Op::Mean: {
      const Tensor& a = in(0);
      double s = 0.0;
      for (double v : a.values()) s += v;
      if (n.op == Op::Mean) {
        if (a.size() == 0) fail("mean of empty tensor");
        s /= static_cast<double>(a.size());
      }
      out = Tensor::scalar(s);
      break;
    }
    case Op::Gather: {
      const Tensor& a = in(0);
      out.resize(a.rows(), n.index.size());
      for (int j : n.index) {
        if (j >= static_cast<int>(a.cols())) fail("gather index out of range for " + a.shape_string());
      }
      for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < n.index.size(); ++j) {
          const int src = n.index[j];
          out(i, j) = src < 0 ? 0.0 : a(i, src);
        }
      }
      break;
    }
    case Op::Concat: {
      std::size_t rows = in(0).rows(), cols = 0;
      for (std::size_t k = 0; k < n.in.size(); ++k) {
        if (in(k).rows() != rows) fail("concat row mismatch " + in(0).shape_string() + " vs " + in(k).shape_string());
        cols += in(k).cols();
      }
      out.resize(rows, cols);
      std::size_t off = 0;
      for (std::size_t k = 0; k < n.in.size(); ++k) {
        const Tensor& p = in(k);
        for (std::size_t i = 0; i < rows; ++i) {
          for (std::size_t j = 0; j < p.cols(); ++j) out(i, off + j) = p(i, j);
        }
        off += p.cols();
      }
      break;
    }
    case Op::Bmv: {
      const Tensor& m = in(0);
      const Tensor& v = in(1);
      const std::size_t r = n.rows_attr, c = v.cols();
      if (m.cols() != r * c) fail("bmv matrix width " + std::to_string(m.cols()) + " != " + std::to_string(r) + "x" + std::to_string(c));
      bool ok = true;
      const std::size_t batch = bdim(m.rows(), v.rows(), ok);
      if (!ok) fail("bmv batch mismatch " + m.shape_string() + " vs " + v.shape_string());
      out.resize(batch, r);
      out.fill(0.0);
      for (std::size_t b = 0; b < batch; ++b) {
        const double* pm = m.values().data() + (m.rows() == 1 ? 0 : b) * m.cols();
        const double* pv = v.values().data() + (v.rows() == 1 ? 0 : b) * c;
        double* po = out.values().data() + b * r;
        for (std::size_t j = 0; j < c; ++j) {
          const double vj = pv[j];
          for (std::size_t i = 0; i < r; ++i) po[i] += pm[i + j * r] * vj;
        }
      }
      break;
    }
    case Op::Bsolve: {
      const Tensor& m = in(0);
      const Tensor& rhs = in(1);
      const std::size_t dim = rhs.cols();
      if (m.cols() != dim * dim) fail("bsolve matrix width " + std::to_string(m.cols()) + " for rhs " + rhs.shape_string());
      bool ok = true;
      const std::size_t batch = bdim(m.rows(), rhs.rows(), ok);
      if (!ok) fail("bsolve batch mismatch " + m.shape_string() + " vs " + rhs.shape_string());
      const int nn = static_cast<int>(dim);
      n.lu.assign(m.values().begin(), m.values().end());
      n.piv.assign(m.rows() * dim, 0);
      std::vector<double> col(dim);
      for (std::size_t b = 0; b < m.rows(); ++b) {
        double* lu = n.lu.data() + b * dim * dim;
        const double* orig = m.values().data() + b * dim * dim;
        double norm_m = 0.0;
        for (int j = 0; j < nn; ++j) {
          double s = 0.0;
          for (int i = 0; i < nn; ++i) s += std::abs(orig[i + j * nn]);
          norm_m = std::max(norm_m, s);
        }
        if (!detail::lu_factor(lu, n.piv.data() + b * dim, nn)) fail("singular matrix in batched solve");
        // 1-norm condition number from the explicit inverse columns
        double norm_inv = 0.0;
        for (int j = 0; j < nn; ++j) {
          std::fill(col.begin(), col.end(), 0.0);
          col[j] = 1.0;
          detail::lu_solve(lu, n.piv.data() + b * dim, nn, col.data());
          double s = 0.0;
          for (double x : col) s += std::abs(x);
          norm_inv = std::max(norm_inv, s);
        }
        if (!(norm_m * norm_inv <= detail::kMaxCondition)) {
          fail("ill-conditioned matrix in batched solve (cond " + std::to_string(norm_m * norm_inv) + ")");
        }
      }
      out.resize(batch, dim);
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t mb = m.rows() == 1 ? 0 : b;
        double* x = out.values().data() + b * dim;
        const double* pr = rhs.values().data() + (rhs.rows() == 1 ? 0 : b) * dim;
        std::copy(pr, pr + dim, x);
        detail::lu_solve(n.lu.data() + mb * dim * dim, n.piv.data() + mb * dim, nn, x);
      }
      break;
    }
  }
  if (!out.all_finite()) fail("non-finite value produced");
}

// ---------------------------------------------------------------------------
// backward

inline void Graph::accumulate(int id, const Tensor& g) {
  Node& n = nodes_[id];
  const Tensor& v = n.value;
  if (!n.has_adjoint) {
    n.adjoint.resize(v.rows(), v.cols());
    n.adjoint.fill(0.0);
    n.has_adjoint = true;
  }
  if (g.rows() == v.rows() && g.cols() == v.cols()) {
    double* pa = n.adjoint.values().data();
    const double* pg = g.values().data();
    for (std::size_t i = 0; i < g.size(); ++i) pa[i] += pg[i];
    return;
  }
  // reduce over broadcast dimensions
  for (std::size_t i = 0; i < g.rows(); ++i) {
    for (std::size_t j = 0; j < g.cols(); ++j) {
      n.adjoint(v.rows() == 1 ? 0 : i, v.cols() == 1 ? 0 : j) += g(i, j);
    }
  }
}

inline void Graph::backprop(int id) {
  const Node& n = nodes_[id];
  const Tensor& g = n.adjoint;
  auto in = [&](int k) -> const Tensor& { return nodes_[n.in[k]].value; };
  Tensor tmp;

  switch (n.op) {
    case Op::Input:
    case Op::Param:
    case Op::Const:
      return;
    case Op::Add:
      accumulate(n.in[0], g);
      accumulate(n.in[1], g);
      return;
    case Op::Sub: {
      accumulate(n.in[0], g);
      tmp = g;
      for (double& x : tmp.values()) x = -x;
      accumulate(n.in[1], tmp);
      return;
    }
    case Op::Mul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      tmp.resize(g.rows(), g.cols());
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) tmp(i, j) = g(i, j) * detail::elem(b, i, j);
      accumulate(n.in[0], tmp);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) tmp(i, j) = g(i, j) * detail::elem(a, i, j);
      accumulate(n.in[1], tmp);
      return;
    }
    case Op::MatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const std::size_t r = a.rows(), k = a.cols(), c = b.cols();
      tmp.resize(r, k);
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t t = 0; t < k; ++t) {
          double s = 0.0;
          const double* pg = g.values().data() + i * c;
          const double* pb = b.values().data() + t * c;
          for (std::size_t j = 0; j < c; ++j) s += pg[j] * pb[j];
          tmp(i, t) = s;
        }
      }
      accumulate(n.in[0], tmp);
      tmp.resize(k, c);
      tmp.fill(0.0);
      for (std::size_t i = 0; i < r; ++i) {
        const double* pg = g.values().data() + i * c;
        for (std::size_t t = 0; t < k; ++t) {
          const double av = a(i, t);
          if (av == 0.0) continue;
          double* pt = tmp.values().data() + t * c;
          for (std::size_t j = 0; j < c; ++j) pt[j] += av * pg[j];
        }
      }
      accumulate(n.in[1], tmp);
      return;
    }
    case Op::Sinh:
    case Op::Asinh:
    case Op::Cosh:
    case Op::Exp:
    case Op::Log:
    case Op::Softplus:
    case Op::Relu:
    case Op::Square: {
      const Tensor& a = in(0);
      const Tensor& y = n.value;
      tmp.resize(g.rows(), g.cols());
      const std::size_t sz = g.size();
      const double* pa = a.values().data();
      const double* py = y.values().data();
      const double* pg = g.values().data();
      double* pt = tmp.values().data();
      switch (n.op) {
        case Op::Sinh: for (std::size_t i = 0; i < sz; ++i) pt[i] = pg[i] * std::cosh(pa[i]); break;
        case Op::Asinh: for (std::size_t i = 0; i < sz; ++i) pt[i] = pg[i] / std::sqrt(1.0 + pa[i] * pa[i]); break;
        case Op::Cosh: for (std::size_t i = 0; i < sz; ++i) pt[i] = pg[i] * std::sinh(pa[i]); break;
        case Op::Exp: for (std::size_t i = 0; i < sz; ++i) pt[i] = pg[i] * py[i]; break;
        case Op::Log: for (std::size_t i = 0; i < sz; ++i) pt[i] = pg[i] / pa[i]; break;
        case Op::Softplus: for (std::size_t i = 0; i < sz; ++i) pt[i] = pg[i] * sigmoid(pa[i]); break;
        case Op::Relu: for (std::size_t i = 0; i < sz; ++i) pt[i] = pa[i] > 0.0 ? pg[i] : 0.0; break;
        case Op::Square: for (std::size_t i = 0; i < sz; ++i) pt[i] = 2.0 * pa[i] * pg[i]; break;
        default: break;
      }
      accumulate(n.in[0], tmp);
      return;
    }
    case Op::Step:
      return;
    case Op::Sum:
    case Op::Mean: {
      const Tensor& a = in(0);
      double s = g[0];
      if (n.op == Op::Mean) s /= static_cast<double>(a.size());
      tmp = Tensor(a.rows(), a.cols(), s);
      accumulate(n.in[0], tmp);
      return;
    }
    case Op::Gather: {
      const Tensor& a = in(0);
      tmp = Tensor(a.rows(), a.cols(), 0.0);
      for (std::size_t i = 0; i < g.rows(); ++i) {
        for (std::size_t j = 0; j < n.index.size(); ++j) {
          if (n.index[j] >= 0) tmp(i, n.index[j]) += g(i, j);
        }
      }
      accumulate(n.in[0], tmp);
      return;
    }
    case Op::Concat: {
      std::size_t off = 0;
      for (std::size_t k = 0; k < n.in.size(); ++k) {
        const Tensor& p = in(k);
        tmp.resize(p.rows(), p.cols());
        for (std::size_t i = 0; i < p.rows(); ++i)
          for (std::size_t j = 0; j < p.cols(); ++j) tmp(i, j) = g(i, off + j);
        accumulate(n.in[k], tmp);
        off += p.cols();
      }
      return;
    }
    case Op::Bmv: {
      const Tensor& m = in(0);
      const Tensor& v = in(1);
      const std::size_t r = n.rows_attr, c = v.cols(), batch = g.rows();
      Tensor gm(m.rows(), m.cols(), 0.0);
      Tensor gv(v.rows(), v.cols(), 0.0);
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t mb = m.rows() == 1 ? 0 : b;
        const std::size_t vb = v.rows() == 1 ? 0 : b;
        const double* pm = m.values().data() + mb * m.cols();
        const double* pv = v.values().data() + vb * c;
        const double* pg = g.values().data() + b * r;
        double* pgm = gm.values().data() + mb * m.cols();
        double* pgv = gv.values().data() + vb * c;
        for (std::size_t j = 0; j < c; ++j) {
          double s = 0.0;
          for (std::size_t i = 0; i < r; ++i) {
            pgm[i + j * r] += pg[i] * pv[j];
            s += pm[i + j * r] * pg[i];
          }
          pgv[j] += s;
        }
      }
      accumulate(n.in[0], gm);
      accumulate(n.in[1], gv);
      return;
    }
    case Op::Bsolve: {
      const Tensor& m = in(0);
      const Tensor& rhs = in(1);
      const Tensor& x = n.value;
      const std::size_t dim = rhs.cols(), batch = g.rows();
      const int nn = static_cast<int>(dim);
      Tensor gm(m.rows(), m.cols(), 0.0);
      Tensor gr(rhs.rows(), rhs.cols(), 0.0);
      std::vector<double> w(dim);
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t mb = m.rows() == 1 ? 0 : b;
        const std::size_t rb = rhs.rows() == 1 ? 0 : b;
        std::copy(g.values().data() + b * dim, g.values().data() + (b + 1) * dim, w.begin());
        detail::lu_solve_transposed(n.lu.data() + mb * dim * dim, n.piv.data() + mb * dim, nn, w.data());
        double* pgr = gr.values().data() + rb * dim;
        double* pgm = gm.values().data() + mb * m.cols();
        const double* px = x.values().data() + b * dim;
        for (std::size_t i = 0; i < dim; ++i) pgr[i] += w[i];
        for (std::size_t j = 0; j < dim; ++j)
          for (std::size_t i = 0; i < dim; ++i) pgm[i + j * dim] -= w[i] * px[j];
      }
      accumulate(n.in[0], gm);
      accumulate(n.in[1], gr);
      return;
    }
  }
}

// ---------------------------------------------------------------------------
// forward-mode transform

inline Var Graph::fit_shape(Var t, int primal) {
  const Tensor& tv = nodes_[t.id].value;
  const Tensor& pv = nodes_[primal].value;
  if (tv.rows() == pv.rows() && tv.cols() == pv.cols()) return t;
  // broadcast the tangent up to the primal's shape
  Var zero = mul(Var{primal}, constant(0.0));
  return add(zero, t);
}

inline Var Graph::tangent_rule(int id, const std::vector<int>& tan) {
  // Copy what we need: pushing nodes may reallocate nodes_.
  const Op op = nodes_[id].op;
  const std::vector<int> ins = nodes_[id].in;
  const std::vector<int> index = nodes_[id].index;
  const std::size_t rows_attr = nodes_[id].rows_attr;
  auto t = [&](int k) { return Var{tan[ins[k]]}; };
  auto has = [&](int k) { return tan[ins[k]] >= 0; };
  auto p = [&](int k) { return Var{ins[k]}; };
  const Var self{id};
  Var none{};

  switch (op) {
    case Op::Input:
    case Op::Param:
    case Op::Const:
    case Op::Step:
      return none;
    case Op::Add:
      if (has(0) && has(1)) return add(t(0), t(1));
      return has(0) ? t(0) : t(1);
    case Op::Sub:
      if (has(0) && has(1)) return sub(t(0), t(1));
      return has(0) ? t(0) : neg(t(1));
    case Op::Mul: {
      Var r{};
      if (has(0)) r = mul(t(0), p(1));
      if (has(1)) {
        Var s = mul(p(0), t(1));
        r = r.valid() ? add(r, s) : s;
      }
      return r;
    }
    case Op::MatMul: {
      Var r{};
      if (has(0)) r = matmul(t(0), p(1));
      if (has(1)) {
        Var s = matmul(p(0), t(1));
        r = r.valid() ? add(r, s) : s;
      }
      return r;
    }
    case Op::Sinh: return mul(cosh(p(0)), t(0));
    case Op::Cosh: return mul(sinh(p(0)), t(0));
    case Op::Asinh: {
      // 1/sqrt(1+a^2) = exp(-0.5 log(1 + a^2))
      Var inv = exp(scale(log(add_scalar(square(p(0)), 1.0)), -0.5));
      return mul(inv, t(0));
    }
    case Op::Exp: return mul(self, t(0));
    case Op::Log: return mul(exp(neg(self)), t(0));
    case Op::Softplus: return mul(exp(sub(p(0), self)), t(0));
    case Op::Relu: return mul(step(p(0)), t(0));
    case Op::Square: return mul(scale(p(0), 2.0), t(0));
    case Op::Sum: return sum(t(0));
    case Op::Mean: return mean(t(0));
    case Op::Gather: return gather(t(0), index);
    case Op::Concat: {
      std::vector<Var> parts;
      for (std::size_t k = 0; k < ins.size(); ++k) {
        parts.push_back(has(static_cast<int>(k)) ? t(static_cast<int>(k)) : mul(p(static_cast<int>(k)), constant(0.0)));
      }
      return concat(parts);
    }
    case Op::Bmv: {
      Var r{};
      if (has(0)) r = bmv(t(0), p(1), rows_attr);
      if (has(1)) {
        Var s = bmv(p(0), t(1), rows_attr);
        r = r.valid() ? add(r, s) : s;
      }
      return r;
    }
    case Op::Bsolve: {
      // d x = M^{-1} (d rhs - dM x)
      Var rhs{};
      if (has(1)) rhs = t(1);
      if (has(0)) {
        const std::size_t dim = nodes_[ins[1]].value.cols();
        Var dmx = bmv(t(0), self, dim);
        rhs = rhs.valid() ? sub(rhs, dmx) : neg(dmx);
      }
      return bsolve(p(0), rhs);
    }
  }
  return none;
}

inline std::vector<Var> Graph::jvp(std::span<const Var> outputs, std::span<const Seed> seeds) {
  if (!evaluated()) throw Error("jvp requires an evaluated graph");
  int hi = -1;
  for (Var o : outputs) hi = std::max(hi, o.id);
  std::vector<char> need(hi + 1, 0);
  for (Var o : outputs) need[o.id] = 1;
  for (int id = hi; id >= 0; --id) {
    if (!need[id]) continue;
    for (int i : nodes_[id].in) need[i] = 1;
  }
  std::vector<int> tan(hi + 1, -1);
  std::vector<char> seeded(hi + 1, 0);
  for (const Seed& s : seeds) {
    if (s.var.id > hi) continue;
    tan[s.var.id] = fit_shape(s.tangent, s.var.id).id;
    seeded[s.var.id] = 1;
  }
  for (int id = 0; id <= hi; ++id) {
    if (!need[id] || seeded[id]) continue;
    bool any = false;
    for (int i : nodes_[id].in) any = any || tan[i] >= 0;
    if (!any) continue;
    Var t = tangent_rule(id, tan);
    if (t.valid()) t = fit_shape(t, id);
    tan[id] = t.id;
  }
  std::vector<Var> out;
  out.reserve(outputs.size());
  for (Var o : outputs) {
    if (tan[o.id] >= 0) {
      out.push_back(Var{tan[o.id]});
    } else {
      out.push_back(mul(o, constant(0.0)));
    }
  }
  return out;
}

}  // namespace exlin::ad
