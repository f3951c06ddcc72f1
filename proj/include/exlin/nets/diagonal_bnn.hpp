#pragma once

#include <random>
#include <span>
#include <string>
#include <vector>

#include "exlin/nets/param_mlp.hpp"

namespace exlin::nets {

/// Element-wise bijective network. Each layer maps
///   u -> asinh(c + sinh(exp(w) * u + b))
/// coordinate by coordinate, with w, b, c produced from the conditioning
/// input. Positive slopes make every coordinate strictly increasing, so
/// coordinate boxes map to coordinate boxes.
class DiagonalBnn {
 public:
  DiagonalBnn() = default;
  DiagonalBnn(std::size_t m, std::size_t cond_dim, std::size_t layers, std::size_t hidden) : m_(m) {
    for (std::size_t i = 0; i < layers; ++i) {
      layers_.push_back({ParamMlp(cond_dim, hidden, m), ParamMlp(cond_dim, hidden, m), ParamMlp(cond_dim, hidden, m)});
    }
  }

  std::size_t dim() const { return m_; }
  std::size_t cond_dim() const { return layers_.empty() ? 0 : layers_.front().w.in_dim(); }
  std::size_t depth() const { return layers_.size(); }

  void init(std::mt19937_64& rng, double output_scale) {
    for (auto& l : layers_) {
      l.w.init(rng, output_scale);
      l.b.init(rng, output_scale);
      l.c.init(rng, output_scale);
    }
  }

  /// Layer i gets constant log-slope, shift and offset.
  void set_constant(std::size_t i, std::span<const double> log_slope, std::span<const double> b,
                    std::span<const double> c) {
    Layer& l = layers_.at(i);
    l.w.set_constant(log_slope);
    l.b.set_constant(b);
    l.c.set_constant(c);
  }

  /// Networks producing the log-slope, shift and offset of layer i.
  ParamMlp& slope_net(std::size_t i) { return layers_.at(i).w; }
  ParamMlp& shift_net(std::size_t i) { return layers_.at(i).b; }
  ParamMlp& offset_net(std::size_t i) { return layers_.at(i).c; }

  Var build_forward(Graph& g, const std::string& prefix, Var u, Var cond) const {
    Var h = u;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const Layer& l = layers_[i];
      const std::string p = prefix + "." + std::to_string(i);
      Var s = g.add(g.mul(g.exp(l.w.build(g, p + ".w", cond)), h), l.b.build(g, p + ".b", cond));
      h = g.asinh(g.add(l.c.build(g, p + ".c", cond), g.sinh(s)));
    }
    return h;
  }

  Var build_inverse(Graph& g, const std::string& prefix, Var v, Var cond) const {
    Var h = v;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      const Layer& l = layers_[i];
      const std::string p = prefix + "." + std::to_string(i);
      Var t = g.sub(g.asinh(g.sub(g.sinh(h), l.c.build(g, p + ".c", cond))), l.b.build(g, p + ".b", cond));
      h = g.mul(t, g.exp(g.neg(l.w.build(g, p + ".w", cond))));
    }
    return h;
  }

  std::vector<double> forward(std::span<const double> u, std::span<const double> cond) const {
    return eval_row([&](Graph& g) { return build_forward(g, "dbnn", g.input("u"), g.input("c")); },
                    bind({{"u", u}, {"c", cond}}));
  }
  std::vector<double> inverse(std::span<const double> v, std::span<const double> cond) const {
    return eval_row([&](Graph& g) { return build_inverse(g, "dbnn", g.input("v"), g.input("c")); },
                    bind({{"v", v}, {"c", cond}}));
  }

  template <class F>
  void for_each_param(const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string p = prefix + "." + std::to_string(i);
      layers_[i].w.for_each_param(p + ".w", f);
      layers_[i].b.for_each_param(p + ".b", f);
      layers_[i].c.for_each_param(p + ".c", f);
    }
  }
  template <class F>
  void for_each_param(const std::string& prefix, F&& f) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string p = prefix + "." + std::to_string(i);
      layers_[i].w.for_each_param(p + ".w", f);
      layers_[i].b.for_each_param(p + ".b", f);
      layers_[i].c.for_each_param(p + ".c", f);
    }
  }

 private:
  struct Layer {
    ParamMlp w, b, c;
  };
  std::size_t m_ = 0;
  std::vector<Layer> layers_;
};

}  // namespace exlin::nets
