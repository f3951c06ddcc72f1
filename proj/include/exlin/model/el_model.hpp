#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "exlin/ad/graph.hpp"
#include "exlin/nets/bnn.hpp"
#include "exlin/nets/diagonal_bnn.hpp"
#include "exlin/nets/param_mlp.hpp"
#include "exlin/nets/picnn.hpp"

namespace exlin::model {

using ad::Bindings;
using ad::Graph;
using ad::Tensor;
using ad::Var;

/// n outputs y, m inputs v, l disturbances d, p answer outputs z.
struct Dims {
  std::size_t n = 0, m = 0, l = 0, p = 0;
  bool operator==(const Dims&) const = default;
};

struct Architecture {
  std::size_t bnn_layers = 3;
  std::size_t dbnn_layers = 3;
  std::size_t picnn_layers = 3;
  std::size_t hidden = 32;
  bool operator==(const Architecture&) const = default;
};

/// Per-feature affine standardization s = (raw - mean) / scale.
struct Scaler {
  Tensor mean, scale;

  static Scaler identity(std::size_t k) { return {Tensor(1, k, 0.0), Tensor(1, k, 1.0)}; }

  std::size_t size() const { return mean.cols(); }

  /// Mean and standard deviation of each column; constant columns keep scale 1.
  static Scaler fit(const Tensor& data) {
    Scaler s = identity(data.cols());
    if (data.rows() == 0) return s;
    const double rows = static_cast<double>(data.rows());
    for (std::size_t j = 0; j < data.cols(); ++j) {
      double mu = 0.0;
      for (std::size_t i = 0; i < data.rows(); ++i) mu += data(i, j);
      mu /= rows;
      double var = 0.0;
      for (std::size_t i = 0; i < data.rows(); ++i) var += (data(i, j) - mu) * (data(i, j) - mu);
      const double sd = std::sqrt(var / rows);
      s.mean[j] = mu;
      s.scale[j] = sd > 1e-12 * (1.0 + std::abs(mu)) ? sd : 1.0;
    }
    return s;
  }

  Var standardize(Graph& g, Var raw) const {
    Tensor inv(1, size());
    for (std::size_t j = 0; j < size(); ++j) inv[j] = 1.0 / scale[j];
    return g.mul(g.sub(raw, g.constant(mean)), g.constant(std::move(inv)));
  }
  Var restore(Graph& g, Var s) const { return g.add(g.mul(s, g.constant(scale)), g.constant(mean)); }
};

struct InitOptions {
  double output_scale = 0.1;  ///< scale of every network's last layer
  double a_diagonal = -1.0;   ///< initial A(d) = a_diagonal * I
  double b_diagonal = 1.0;    ///< initial B(d) = b_diagonal * I (rectangular identity)
};

/// Nodes of a batched prediction graph.
struct Prediction {
  Var v, y, d, d_dot;  ///< inputs (named "v", "y", "d", "d_dot")
  Var x, u;            ///< linearized state and input
  Var y_dot, z;        ///< predictions
};

/// Exactly linearizable model
///   x = Φ(y,d),  u = Ψ⁻¹(v,y,d),  ẋ = A(d)x + B(d)u + c(d),  z = Ξ(x,u,d).
///
/// The networks act on standardized features; the scalers are part of the
/// model. Φ is conditioned on d, Ψ on (y,d), Ξ is convex in (x,u) with d as
/// context. A(d), B(d) are emitted flattened column-major.
class ELModel {
 public:
  ELModel() = default;
  ELModel(Dims dims, Architecture arch = {})
      : dims_(dims),
        arch_(arch),
        phi_(dims.n, dims.l, arch.bnn_layers, arch.hidden),
        psi_(dims.m, dims.n + dims.l, arch.dbnn_layers, arch.hidden),
        xi_(dims.n + dims.m, dims.l, arch.hidden, dims.p, arch.picnn_layers),
        a_net_(dims.l, arch.hidden, dims.n * dims.n),
        b_net_(dims.l, arch.hidden, dims.n * dims.m),
        c_net_(dims.l, arch.hidden, dims.n),
        y_scaler_(Scaler::identity(dims.n)),
        v_scaler_(Scaler::identity(dims.m)),
        d_scaler_(Scaler::identity(dims.l)),
        z_scaler_(Scaler::identity(dims.p)) {
    if (dims.n == 0 || dims.m == 0 || dims.l == 0 || dims.p == 0) {
      throw std::invalid_argument("ELModel: every dimension (n, m, l, p) must be positive");
    }
  }

  const Dims& dims() const { return dims_; }
  const Architecture& architecture() const { return arch_; }

  nets::Bnn& phi() { return phi_; }
  const nets::Bnn& phi() const { return phi_; }
  nets::DiagonalBnn& psi() { return psi_; }
  const nets::DiagonalBnn& psi() const { return psi_; }
  nets::Picnn& xi() { return xi_; }
  const nets::Picnn& xi() const { return xi_; }
  nets::ParamMlp& a_net() { return a_net_; }
  nets::ParamMlp& b_net() { return b_net_; }
  nets::ParamMlp& c_net() { return c_net_; }

  Scaler& y_scaler() { return y_scaler_; }
  Scaler& v_scaler() { return v_scaler_; }
  Scaler& d_scaler() { return d_scaler_; }
  Scaler& z_scaler() { return z_scaler_; }
  const Scaler& y_scaler() const { return y_scaler_; }
  const Scaler& v_scaler() const { return v_scaler_; }
  const Scaler& d_scaler() const { return d_scaler_; }
  const Scaler& z_scaler() const { return z_scaler_; }

  /// Random weights with the linear core starting near (a·I, b·I, 0).
  void init(std::mt19937_64& rng, const InitOptions& opt = {}) {
    phi_.init(rng, opt.output_scale);
    psi_.init(rng, opt.output_scale);
    xi_.init(rng, 1.0);
    a_net_.init(rng, opt.output_scale);
    b_net_.init(rng, opt.output_scale);
    c_net_.init(rng, opt.output_scale);
    a_net_.set_output_bias(diagonal_flat(dims_.n, dims_.n, opt.a_diagonal));
    b_net_.set_output_bias(diagonal_flat(dims_.n, dims_.m, opt.b_diagonal));
  }

  // ---- hand configuration ---------------------------------------------------

  void set_phi_identity() {
    const std::size_t n = dims_.n;
    for (std::size_t i = 0; i < phi_.depth(); ++i) {
      phi_.layer(i).set_constant(std::vector<double>(n * n, 0.0), std::vector<double>(n, 0.0),
                                 std::vector<double>(n, 0.0));
    }
  }
  void set_psi_identity() {
    const std::vector<double> zero(dims_.m, 0.0);
    for (std::size_t i = 0; i < psi_.depth(); ++i) psi_.set_constant(i, zero, zero, zero);
  }
  /// Constant linear core A, B, c independent of d.
  void set_linear(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const Eigen::VectorXd& c) {
    if (a.rows() != static_cast<long>(dims_.n) || a.cols() != static_cast<long>(dims_.n) ||
        b.rows() != static_cast<long>(dims_.n) || b.cols() != static_cast<long>(dims_.m) ||
        c.size() != static_cast<long>(dims_.n)) {
      throw std::invalid_argument("ELModel::set_linear: shape mismatch");
    }
    a_net_.set_constant(std::span<const double>(a.data(), a.size()));
    b_net_.set_constant(std::span<const double>(b.data(), b.size()));
    c_net_.set_constant(std::span<const double>(c.data(), c.size()));
  }

  /// Fits all scalers to training columns.
  void fit_scalers(const Tensor& v, const Tensor& y, const Tensor& d, const Tensor& z) {
    v_scaler_ = Scaler::fit(v);
    y_scaler_ = Scaler::fit(y);
    d_scaler_ = Scaler::fit(d);
    z_scaler_ = Scaler::fit(z);
  }

  // ---- graph builders (all in raw units) -----------------------------------

  Var x_of(Graph& g, Var y, Var d) const {
    return phi_.build_forward(g, "phi", y_scaler_.standardize(g, y), d_scaler_.standardize(g, d));
  }
  Var y_of(Graph& g, Var x, Var d) const {
    return y_scaler_.restore(g, phi_.build_inverse(g, "phi", x, d_scaler_.standardize(g, d)));
  }
  Var u_of(Graph& g, Var v, Var y, Var d) const {
    return psi_.build_inverse(g, "psi", v_scaler_.standardize(g, v), psi_condition(g, y, d));
  }
  Var v_of(Graph& g, Var u, Var y, Var d) const {
    return v_scaler_.restore(g, psi_.build_forward(g, "psi", u, psi_condition(g, y, d)));
  }
  Var z_of(Graph& g, Var x, Var u, Var d) const {
    return z_scaler_.restore(g, xi_.build(g, "xi", g.concat({x, u}), d_scaler_.standardize(g, d)));
  }
  Var a_of(Graph& g, Var d) const { return a_net_.build(g, "A", d_scaler_.standardize(g, d)); }
  Var b_of(Graph& g, Var d) const { return b_net_.build(g, "B", d_scaler_.standardize(g, d)); }
  Var c_of(Graph& g, Var d) const { return c_net_.build(g, "c", d_scaler_.standardize(g, d)); }

  /// ẋ = A(d)x + B(d)u + c(d) for batched x, u.
  Var xdot_of(Graph& g, Var x, Var u, Var d) const {
    return g.add(g.add(g.bmv(a_of(g, d), x, dims_.n), g.bmv(b_of(g, d), u, dims_.n)), c_of(g, d));
  }

  /// Builds and evaluates the batched prediction graph on `batch`, which
  /// must bind "v", "y", "d" and "d_dot" (extra bindings are kept for nodes
  /// appended later, e.g. loss targets).
  ///
  /// ŷ̇ solves (∂Φ/∂y) ŷ̇ = A x + B u + c − (∂Φ/∂d) ḋ row by row; the
  /// Jacobian columns are forward-mode tangents, so the result stays
  /// differentiable in the parameters.
  Prediction build_prediction(Graph& g, const Bindings& batch) const {
    Prediction p;
    p.v = g.input("v");
    p.y = g.input("y");
    p.d = g.input("d");
    p.d_dot = g.input("d_dot");
    p.x = x_of(g, p.y, p.d);
    p.u = u_of(g, p.v, p.y, p.d);
    Var rhs = xdot_of(g, p.x, p.u, p.d);
    p.z = z_of(g, p.x, p.u, p.d);
    g.evaluate(batch);

    const std::size_t n = dims_.n;
    std::vector<Var> columns;
    columns.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
      Tensor e(1, n, 0.0);
      e[k] = 1.0;
      columns.push_back(g.jvp(p.x, {{p.y, g.constant(std::move(e))}}));
    }
    Var jac = n == 1 ? columns.front() : g.concat(columns);
    g.set_label(jac, "dPhi/dy");
    Var phi_d = g.jvp(p.x, {{p.d, p.d_dot}});
    p.y_dot = g.bsolve(jac, g.sub(rhs, phi_d));
    return p;
  }

  // ---- single-point evaluation ---------------------------------------------

  std::vector<double> predict_ydot(std::span<const double> v, std::span<const double> y, std::span<const double> d,
                                   std::span<const double> d_dot) const {
    check(v, dims_.m, "v");
    check(y, dims_.n, "y");
    check(d, dims_.l, "d");
    check(d_dot, dims_.l, "d_dot");
    Graph g;
    const Prediction p = build_prediction(g, point_bindings(v, y, d, d_dot));
    return values(g, p.y_dot);
  }

  std::vector<double> predict_z(std::span<const double> v, std::span<const double> y, std::span<const double> d) const {
    check(v, dims_.m, "v");
    check(y, dims_.n, "y");
    check(d, dims_.l, "d");
    return eval([&](Graph& g) { return z_of(g, g.input("x"), g.input("u"), g.input("d")); },
                {{"x", Tensor::row(x_from_y(y, d))}, {"u", Tensor::row(u_from_v(v, y, d))}, {"d", Tensor::row(d)}});
  }

  std::vector<double> z_from_xu(std::span<const double> x, std::span<const double> u, std::span<const double> d) const {
    return eval([&](Graph& g) { return z_of(g, g.input("x"), g.input("u"), g.input("d")); },
                {{"x", Tensor::row(x)}, {"u", Tensor::row(u)}, {"d", Tensor::row(d)}});
  }
  std::vector<double> x_from_y(std::span<const double> y, std::span<const double> d) const {
    return eval([&](Graph& g) { return x_of(g, g.input("y"), g.input("d")); },
                {{"y", Tensor::row(y)}, {"d", Tensor::row(d)}});
  }
  std::vector<double> y_from_x(std::span<const double> x, std::span<const double> d) const {
    return eval([&](Graph& g) { return y_of(g, g.input("x"), g.input("d")); },
                {{"x", Tensor::row(x)}, {"d", Tensor::row(d)}});
  }
  std::vector<double> u_from_v(std::span<const double> v, std::span<const double> y, std::span<const double> d) const {
    return eval([&](Graph& g) { return u_of(g, g.input("v"), g.input("y"), g.input("d")); },
                {{"v", Tensor::row(v)}, {"y", Tensor::row(y)}, {"d", Tensor::row(d)}});
  }
  std::vector<double> v_from_u(std::span<const double> u, std::span<const double> y, std::span<const double> d) const {
    return eval([&](Graph& g) { return v_of(g, g.input("u"), g.input("y"), g.input("d")); },
                {{"u", Tensor::row(u)}, {"y", Tensor::row(y)}, {"d", Tensor::row(d)}});
  }

  Eigen::MatrixXd a_matrix(std::span<const double> d) const {
    return to_matrix(eval([&](Graph& g) { return a_of(g, g.input("d")); }, {{"d", Tensor::row(d)}}), dims_.n, dims_.n);
  }
  Eigen::MatrixXd b_matrix(std::span<const double> d) const {
    return to_matrix(eval([&](Graph& g) { return b_of(g, g.input("d")); }, {{"d", Tensor::row(d)}}), dims_.n, dims_.m);
  }
  Eigen::VectorXd c_vector(std::span<const double> d) const {
    const auto c = eval([&](Graph& g) { return c_of(g, g.input("d")); }, {{"d", Tensor::row(d)}});
    return Eigen::Map<const Eigen::VectorXd>(c.data(), static_cast<long>(c.size()));
  }

  // ---- parameters ------------------------------------------------------------

  /// Visits every trainable tensor with its graph name.
  template <class F>
  void for_each_param(F&& f) {
    phi_.for_each_param("phi", f);
    psi_.for_each_param("psi", f);
    xi_.for_each_param("xi", f);
    a_net_.for_each_param("A", f);
    b_net_.for_each_param("B", f);
    c_net_.for_each_param("c", f);
  }
  template <class F>
  void for_each_param(F&& f) const {
    phi_.for_each_param("phi", f);
    psi_.for_each_param("psi", f);
    xi_.for_each_param("xi", f);
    a_net_.for_each_param("A", f);
    b_net_.for_each_param("B", f);
    c_net_.for_each_param("c", f);
  }

  /// Visits the scaler tensors with their stored names.
  template <class F>
  void for_each_scaler(F&& f) {
    visit_scalers(*this, f);
  }
  template <class F>
  void for_each_scaler(F&& f) const {
    visit_scalers(*this, f);
  }

  std::size_t parameter_count() const {
    std::size_t count = 0;
    for_each_param([&](const std::string&, const Tensor& t) { count += t.size(); });
    return count;
  }

  static Bindings point_bindings(std::span<const double> v, std::span<const double> y, std::span<const double> d,
                                 std::span<const double> d_dot) {
    return {{"v", Tensor::row(v)}, {"y", Tensor::row(y)}, {"d", Tensor::row(d)}, {"d_dot", Tensor::row(d_dot)}};
  }

 private:
  template <class Self, class F>
  static void visit_scalers(Self& self, F& f) {
    f("scaler.y.mean", self.y_scaler_.mean);
    f("scaler.y.scale", self.y_scaler_.scale);
    f("scaler.v.mean", self.v_scaler_.mean);
    f("scaler.v.scale", self.v_scaler_.scale);
    f("scaler.d.mean", self.d_scaler_.mean);
    f("scaler.d.scale", self.d_scaler_.scale);
    f("scaler.z.mean", self.z_scaler_.mean);
    f("scaler.z.scale", self.z_scaler_.scale);
  }

  Var psi_condition(Graph& g, Var y, Var d) const {
    return g.concat({y_scaler_.standardize(g, y), d_scaler_.standardize(g, d)});
  }

  static std::vector<double> diagonal_flat(std::size_t rows, std::size_t cols, double value) {
    std::vector<double> out(rows * cols, 0.0);
    for (std::size_t i = 0; i < std::min(rows, cols); ++i) out[i + i * rows] = value;
    return out;
  }

  static void check(std::span<const double> v, std::size_t expected, const char* what) {
    if (v.size() != expected) {
      throw std::invalid_argument(std::string("ELModel: ") + what + " has length " + std::to_string(v.size()) +
                                  ", expected " + std::to_string(expected));
    }
  }

  template <class Build>
  static std::vector<double> eval(Build&& build, const Bindings& inputs) {
    return nets::eval_row(std::forward<Build>(build), inputs);
  }

  static std::vector<double> values(const Graph& g, Var v) {
    const Tensor& t = g.value(v);
    return {t.values().begin(), t.values().end()};
  }

  static Eigen::MatrixXd to_matrix(const std::vector<double>& flat, std::size_t rows, std::size_t cols) {
    return Eigen::Map<const Eigen::MatrixXd>(flat.data(), static_cast<long>(rows), static_cast<long>(cols));
  }

  Dims dims_;
  Architecture arch_;
  nets::Bnn phi_;
  nets::DiagonalBnn psi_;
  nets::Picnn xi_;
  nets::ParamMlp a_net_, b_net_, c_net_;
  Scaler y_scaler_, v_scaler_, d_scaler_, z_scaler_;
};

}  // namespace exlin::model
