#pragma once

#include <array>
#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "exlin/ad/graph.hpp"

namespace exlin::nets {

using ad::Graph;
using ad::Tensor;
using ad::Var;

/// Evaluates a graph-building function on plain vectors (single row).
template <class Build>
std::vector<double> eval_row(Build&& build, const ad::Bindings& inputs) {
  Graph g;
  Var out = build(g);
  g.evaluate(inputs);
  const Tensor& v = g.value(out);
  return {v.values().begin(), v.values().end()};
}

inline ad::Bindings bind(std::initializer_list<std::pair<const char*, std::span<const double>>> items) {
  ad::Bindings b;
  for (const auto& [name, values] : items) b.emplace(name, Tensor::row(values));
  return b;
}

/// Three-layer fully connected network in -> hidden -> hidden -> out with
/// softplus activations. Supplies the disturbance dependence of every
/// conditioned quantity (W(d), b(d), c(d), A(d), ...).
class ParamMlp {
 public:
  ParamMlp() = default;
  ParamMlp(std::size_t in, std::size_t hidden, std::size_t out) : in_(in), hidden_(hidden), out_(out) {
    const std::array<std::size_t, 4> dims{in, hidden, hidden, out};
    for (std::size_t l = 0; l < 3; ++l) {
      w_[l] = Tensor(dims[l], dims[l + 1], 0.0);
      b_[l] = Tensor(1, dims[l + 1], 0.0);
    }
  }

  std::size_t in_dim() const { return in_; }
  std::size_t hidden_dim() const { return hidden_; }
  std::size_t out_dim() const { return out_; }

  /// Glorot-style hidden layers; the output layer is scaled by `output_scale`
  /// so a fresh network starts close to its output bias.
  void init(std::mt19937_64& rng, double output_scale) {
    for (std::size_t l = 0; l < 3; ++l) {
      const double fan = static_cast<double>(w_[l].rows() + w_[l].cols());
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan) * (l == 2 ? output_scale : 1.0));
      for (double& v : w_[l].values()) v = dist(rng);
      b_[l].fill(0.0);
    }
  }

  /// Makes the network output the constant `bias` for every input.
  void set_constant(std::span<const double> bias) {
    w_[2].fill(0.0);
    set_output_bias(bias);
  }
  void set_output_bias(std::span<const double> bias) {
    if (bias.size() != out_) throw std::invalid_argument("ParamMlp: output bias size mismatch");
    std::copy(bias.begin(), bias.end(), b_[2].values().begin());
  }

  /// Layer l (0..2) weights (in x out) and bias (1 x out).
  Tensor& weight(std::size_t l) { return w_.at(l); }
  Tensor& bias(std::size_t l) { return b_.at(l); }
  const Tensor& weight(std::size_t l) const { return w_.at(l); }
  const Tensor& bias(std::size_t l) const { return b_.at(l); }

  Var build(Graph& g, const std::string& prefix, Var cond) const {
    Var h = cond;
    for (std::size_t l = 0; l < 3; ++l) {
      h = g.add(g.matmul(h, g.param(prefix + ".w" + std::to_string(l), w_[l])),
                g.param(prefix + ".b" + std::to_string(l), b_[l]));
      if (l < 2) h = g.softplus(h);
    }
    return h;
  }

  template <class F>
  void for_each_param(const std::string& prefix, F&& f) {
    for (std::size_t l = 0; l < 3; ++l) {
      f(prefix + ".w" + std::to_string(l), w_[l]);
      f(prefix + ".b" + std::to_string(l), b_[l]);
    }
  }
  template <class F>
  void for_each_param(const std::string& prefix, F&& f) const {
    for (std::size_t l = 0; l < 3; ++l) {
      f(prefix + ".w" + std::to_string(l), w_[l]);
      f(prefix + ".b" + std::to_string(l), b_[l]);
    }
  }

 private:
  std::size_t in_ = 0, hidden_ = 0, out_ = 0;
  std::array<Tensor, 3> w_, b_;
};

}  // namespace exlin::nets
