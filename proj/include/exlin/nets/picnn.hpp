#pragma once

#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "exlin/nets/param_mlp.hpp"

namespace exlin::nets {

/// How the weights that must stay nonnegative are stored.
enum class NonnegMode {
  softplus,  ///< effective weight = softplus(raw)
  direct,    ///< raw is used as is and must be >= 0 (hand-built networks)
};

/// Partially input convex network: convex in the main input for every fixed
/// context input.
///
///   c_0 = context,  c_{k+1} = softplus(c_k V_k + e_k)
///   z_1 = softplus((x * (c_0 Gx_0 + gx_0)) Wx_0 + c_0 Wc_0 + b_0)
///   z_{k+1} = act((z_k * relu(c_k Gz_k + gz_k)) R_k + (x * (c_k Gx_k + gx_k)) Wx_k + c_k Wc_k + b_k)
///
/// with R_k >= 0 and act = softplus on hidden layers, identity on the last.
class Picnn {
 public:
  Picnn() = default;
  Picnn(std::size_t convex_dim, std::size_t context_dim, std::size_t hidden, std::size_t out, std::size_t layers,
        NonnegMode mode = NonnegMode::softplus)
      : convex_dim_(convex_dim), context_dim_(context_dim), hidden_(hidden), out_(out), mode_(mode) {
    if (layers < 1) throw std::invalid_argument("Picnn: at least one layer");
    for (std::size_t k = 0; k < layers; ++k) {
      const std::size_t ctx = k == 0 ? context_dim : hidden;
      const std::size_t width = k + 1 == layers ? out : hidden;
      Layer l;
      if (k + 1 < layers) {
        l.ctx_w = Tensor(ctx, hidden, 0.0);
        l.ctx_b = Tensor(1, hidden, 0.0);
      }
      l.gate_x_w = Tensor(ctx, convex_dim, 0.0);
      l.gate_x_b = Tensor(1, convex_dim, 1.0);
      l.x_w = Tensor(convex_dim, width, 0.0);
      l.c_w = Tensor(ctx, width, 0.0);
      l.bias = Tensor(1, width, 0.0);
      if (k > 0) {
        l.gate_z_w = Tensor(ctx, hidden, 0.0);
        l.gate_z_b = Tensor(1, hidden, 1.0);
        l.z_raw = Tensor(hidden, width, 0.0);
      }
      layers_.push_back(std::move(l));
    }
  }

  std::size_t convex_dim() const { return convex_dim_; }
  std::size_t context_dim() const { return context_dim_; }
  std::size_t out_dim() const { return out_; }
  std::size_t depth() const { return layers_.size(); }
  NonnegMode mode() const { return mode_; }

  void init(std::mt19937_64& rng, double output_scale) {
    auto fill = [&](Tensor& t, double sd) {
      std::normal_distribution<double> dist(0.0, sd);
      for (double& v : t.values()) v = dist(rng);
    };
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      Layer& l = layers_[k];
      const bool last = k + 1 == layers_.size();
      const double s = last ? output_scale : 1.0;
      if (!l.ctx_w.empty()) fill(l.ctx_w, std::sqrt(2.0 / static_cast<double>(l.ctx_w.rows() + l.ctx_w.cols())));
      fill(l.gate_x_w, 0.1);
      fill(l.x_w, s * std::sqrt(2.0 / static_cast<double>(l.x_w.rows() + l.x_w.cols())));
      fill(l.c_w, s * std::sqrt(2.0 / static_cast<double>(l.c_w.rows() + l.c_w.cols())));
      if (k > 0) {
        fill(l.gate_z_w, 0.1);
        std::uniform_real_distribution<double> u(0.5, 1.5);
        const double base = s / static_cast<double>(l.z_raw.rows());
        for (double& v : l.z_raw.values()) {
          const double target = base * u(rng);
          v = mode_ == NonnegMode::softplus ? std::log(std::expm1(target)) : target;
        }
      }
    }
  }

  /// Raw parameter access for hand-built networks and tests.
  struct Layer {
    Tensor ctx_w, ctx_b;          // context path (absent on the last layer)
    Tensor gate_x_w, gate_x_b;    // gate on the convex input
    Tensor x_w;                   // convex input weights
    Tensor c_w, bias;             // context -> output
    Tensor gate_z_w, gate_z_b;    // gate on the previous convex hidden state (k > 0)
    Tensor z_raw;                 // nonnegative weights (k > 0)
  };
  Layer& layer(std::size_t k) { return layers_.at(k); }
  const Layer& layer(std::size_t k) const { return layers_.at(k); }

  /// Throws if a nonnegativity-constrained weight is negative.
  void check_constraints() const {
    if (mode_ == NonnegMode::softplus) return;
    for (std::size_t k = 1; k < layers_.size(); ++k) {
      for (double v : layers_[k].z_raw.values()) {
        if (v < 0.0) {
          throw std::logic_error("Picnn: negative entry in nonnegative weight of layer " + std::to_string(k));
        }
      }
    }
  }

  Var build(Graph& g, const std::string& prefix, Var x, Var context) const {
    check_constraints();
    Var c = context;
    Var z{};
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      const Layer& l = layers_[k];
      const std::string p = prefix + "." + std::to_string(k);
      auto P = [&](const char* name, const Tensor& t) { return g.param(p + "." + name, t); };
      Var gate_x = g.add(g.matmul(c, P("gxw", l.gate_x_w)), P("gxb", l.gate_x_b));
      Var pre = g.add(g.add(g.matmul(g.mul(x, gate_x), P("xw", l.x_w)), g.matmul(c, P("cw", l.c_w))), P("b", l.bias));
      if (k > 0) {
        Var gate_z = g.relu(g.add(g.matmul(c, P("gzw", l.gate_z_w)), P("gzb", l.gate_z_b)));
        Var r = P("zr", l.z_raw);
        if (mode_ == NonnegMode::softplus) r = g.softplus(r);
        pre = g.add(pre, g.matmul(g.mul(z, gate_z), r));
      }
      const bool last = k + 1 == layers_.size();
      z = last ? pre : g.softplus(pre);
      if (!last) c = g.softplus(g.add(g.matmul(c, P("vw", l.ctx_w)), P("vb", l.ctx_b)));
    }
    return z;
  }

  std::vector<double> forward(std::span<const double> x, std::span<const double> context) const {
    return eval_row([&](Graph& g) { return build(g, "picnn", g.input("x"), g.input("c")); },
                    bind({{"x", x}, {"c", context}}));
  }

  template <class F>
  void for_each_param(const std::string& prefix, F&& f) {
    visit(*this, prefix, f);
  }
  template <class F>
  void for_each_param(const std::string& prefix, F&& f) const {
    visit(*this, prefix, f);
  }

 private:
  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F& f) {
    for (std::size_t k = 0; k < self.layers_.size(); ++k) {
      auto& l = self.layers_[k];
      const std::string p = prefix + "." + std::to_string(k) + ".";
      if (!l.ctx_w.empty()) {
        f(p + "vw", l.ctx_w);
        f(p + "vb", l.ctx_b);
      }
      f(p + "gxw", l.gate_x_w);
      f(p + "gxb", l.gate_x_b);
      f(p + "xw", l.x_w);
      f(p + "cw", l.c_w);
      f(p + "b", l.bias);
      if (k > 0) {
        f(p + "gzw", l.gate_z_w);
        f(p + "gzb", l.gate_z_b);
        f(p + "zr", l.z_raw);
      }
    }
  }

  std::size_t convex_dim_ = 0, context_dim_ = 0, hidden_ = 0, out_ = 0;
  NonnegMode mode_ = NonnegMode::softplus;
  std::vector<Layer> layers_;
};

}  // namespace exlin::nets
