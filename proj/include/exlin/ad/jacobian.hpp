#pragma once

#include <functional>
#include <span>
#include <string>

#include "exlin/ad/graph.hpp"

namespace exlin::ad {

/// Builds the graph of a map R^n -> R^m given its (1 x n) input node.
using VectorFn = std::function<Var(Graph&, Var)>;

/// Jacobian d output / d input of an evaluated single-row graph, one
/// backward pass per output component. Result is m x n.
inline Tensor jacobian(Graph& g, Var output, Var input) {
  const Tensor& out = g.value(output);
  const Tensor& in = g.value(input);
  if (out.rows() != 1 || in.rows() != 1) {
    throw Error("jacobian expects single-row input and output, got " + in.shape_string() + " -> " +
                out.shape_string());
  }
  const std::size_t m = out.cols(), n = in.cols();
  Tensor jac(m, n, 0.0);
  Tensor seed(1, m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    seed.fill(0.0);
    seed[i] = 1.0;
    g.backward(output, seed);
    const Tensor gi = g.grad(input);
    for (std::size_t j = 0; j < n; ++j) jac(i, j) = gi[j];
  }
  if (!jac.all_finite()) throw Error("non-finite Jacobian entry");
  return jac;
}

inline Tensor jacobian(const VectorFn& f, std::span<const double> point) {
  Graph g;
  Var x = g.input("x");
  Var y = f(g, x);
  g.evaluate({{"x", Tensor::row(point)}});
  return jacobian(g, y, x);
}

}  // namespace exlin::ad
