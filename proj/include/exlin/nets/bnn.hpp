#pragma once

#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "exlin/nets/param_mlp.hpp"

namespace exlin::nets {

/// One invertible layer  y -> asinh(c(d) + sinh(W(d) y + b(d))).
///
/// W(d) = L(d) U(d) with L unit lower triangular and U upper triangular with
/// diagonal exp(.), so det W(d) > 0 for every d. The weight network emits
/// n^2 raw values: n log-diagonal entries, then the strictly lower entries
/// (row-major), then the strictly upper entries (row-major).
class BnnLayer {
 public:
  BnnLayer() = default;
  BnnLayer(std::size_t n, std::size_t cond_dim, std::size_t hidden)
      : n_(n), w_net_(cond_dim, hidden, n * n), b_net_(cond_dim, hidden, n), c_net_(cond_dim, hidden, n) {
    build_index();
  }

  std::size_t dim() const { return n_; }
  std::size_t cond_dim() const { return w_net_.in_dim(); }

  void init(std::mt19937_64& rng, double output_scale) {
    w_net_.init(rng, output_scale);
    b_net_.init(rng, output_scale);
    c_net_.init(rng, output_scale);
  }

  /// Fixes W, b, c independent of the conditioning input. `w_raw` uses the
  /// layout described on the class.
  void set_constant(std::span<const double> w_raw, std::span<const double> b, std::span<const double> c) {
    w_net_.set_constant(w_raw);
    b_net_.set_constant(b);
    c_net_.set_constant(c);
  }

  /// W(d) flattened column-major, one row per batch row of `cond`.
  Var build_weight(Graph& g, const std::string& prefix, Var cond) const {
    return weight_from_raw(g, w_net_.build(g, prefix + ".w", cond));
  }

  Var build_forward(Graph& g, const std::string& prefix, Var y, Var cond) const {
    const Factors f = factors(g, prefix, cond);
    Var s = g.add(g.bmv(f.lower, g.bmv(f.upper, y, n_), n_), f.b);
    return g.asinh(g.add(f.c, g.sinh(s)));
  }

  Var build_inverse(Graph& g, const std::string& prefix, Var x, Var cond) const {
    const Factors f = factors(g, prefix, cond);
    Var t = g.sub(g.asinh(g.sub(g.sinh(x), f.c)), f.b);
    return g.bsolve(f.upper, g.bsolve(f.lower, t));
  }

  template <class F>
  void for_each_param(const std::string& prefix, F&& f) {
    w_net_.for_each_param(prefix + ".w", f);
    b_net_.for_each_param(prefix + ".b", f);
    c_net_.for_each_param(prefix + ".c", f);
  }
  template <class F>
  void for_each_param(const std::string& prefix, F&& f) const {
    w_net_.for_each_param(prefix + ".w", f);
    b_net_.for_each_param(prefix + ".b", f);
    c_net_.for_each_param(prefix + ".c", f);
  }

 private:
  struct Factors {
    Var lower, upper, b, c;
  };

  Factors factors(Graph& g, const std::string& prefix, Var cond) const {
    Var raw = w_net_.build(g, prefix + ".w", cond);
    Var diag = g.exp(g.slice(raw, 0, static_cast<int>(n_)));
    Factors f;
    f.lower = g.add(g.gather(raw, lower_idx_), g.constant(identity_));
    f.upper = g.add(g.gather(raw, upper_idx_), g.gather(diag, diag_idx_));
    f.b = b_net_.build(g, prefix + ".b", cond);
    f.c = c_net_.build(g, prefix + ".c", cond);
    return f;
  }

  Var weight_from_raw(Graph& g, Var raw) const {
    Var diag = g.exp(g.slice(raw, 0, static_cast<int>(n_)));
    Var lower = g.add(g.gather(raw, lower_idx_), g.constant(identity_));
    Var upper = g.add(g.gather(raw, upper_idx_), g.gather(diag, diag_idx_));
    // W = L U, column j of W is L times column j of U
    std::vector<Var> cols;
    for (std::size_t j = 0; j < n_; ++j) {
      std::vector<int> col(n_);
      for (std::size_t i = 0; i < n_; ++i) col[i] = static_cast<int>(i + j * n_);
      cols.push_back(g.bmv(lower, g.gather(upper, col), n_));
    }
    return g.concat(cols);
  }

  void build_index() {
    const std::size_t n = n_;
    lower_idx_.assign(n * n, -1);
    upper_idx_.assign(n * n, -1);
    diag_idx_.assign(n * n, -1);
    identity_ = Tensor(1, n * n, 0.0);
    int next = static_cast<int>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < i; ++j) lower_idx_[i + j * n] = next++;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) upper_idx_[i + j * n] = next++;
    for (std::size_t i = 0; i < n; ++i) {
      diag_idx_[i + i * n] = static_cast<int>(i);
      identity_[i + i * n] = 1.0;
    }
  }

  std::size_t n_ = 0;
  ParamMlp w_net_, b_net_, c_net_;
  std::vector<int> lower_idx_, upper_idx_, diag_idx_;
  Tensor identity_;
};

/// Composition of N BnnLayers, bijective in its main input for every fixed
/// conditioning input.
class Bnn {
 public:
  Bnn() = default;
  Bnn(std::size_t n, std::size_t cond_dim, std::size_t layers, std::size_t hidden) {
    for (std::size_t i = 0; i < layers; ++i) layers_.emplace_back(n, cond_dim, hidden);
  }

  std::size_t dim() const { return layers_.empty() ? 0 : layers_.front().dim(); }
  std::size_t cond_dim() const { return layers_.empty() ? 0 : layers_.front().cond_dim(); }
  std::size_t depth() const { return layers_.size(); }
  BnnLayer& layer(std::size_t i) { return layers_.at(i); }
  const BnnLayer& layer(std::size_t i) const { return layers_.at(i); }

  void init(std::mt19937_64& rng, double output_scale) {
    for (auto& l : layers_) l.init(rng, output_scale);
  }

  Var build_forward(Graph& g, const std::string& prefix, Var y, Var cond) const {
    Var h = y;
    for (std::size_t i = 0; i < layers_.size(); ++i) h = layers_[i].build_forward(g, prefix + "." + std::to_string(i), h, cond);
    return h;
  }

  Var build_inverse(Graph& g, const std::string& prefix, Var x, Var cond) const {
    Var h = x;
    for (std::size_t i = layers_.size(); i-- > 0;) h = layers_[i].build_inverse(g, prefix + "." + std::to_string(i), h, cond);
    return h;
  }

  std::vector<double> forward(std::span<const double> y, std::span<const double> cond) const {
    return eval_row([&](Graph& g) { return build_forward(g, "bnn", g.input("y"), g.input("d")); },
                    bind({{"y", y}, {"d", cond}}));
  }
  std::vector<double> inverse(std::span<const double> x, std::span<const double> cond) const {
    return eval_row([&](Graph& g) { return build_inverse(g, "bnn", g.input("x"), g.input("d")); },
                    bind({{"x", x}, {"d", cond}}));
  }

  template <class F>
  void for_each_param(const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].for_each_param(prefix + "." + std::to_string(i), f);
  }
  template <class F>
  void for_each_param(const std::string& prefix, F&& f) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].for_each_param(prefix + "." + std::to_string(i), f);
  }

 private:
  std::vector<BnnLayer> layers_;
};

}  // namespace exlin::nets
