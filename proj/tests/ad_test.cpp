#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "exlin/ad/graph.hpp"
#include "exlin/ad/jacobian.hpp"
#include "test_util.hpp"

using exlin::ad::Bindings;
using exlin::ad::Error;
using exlin::ad::Graph;
using exlin::ad::Tensor;
using exlin::ad::Var;
namespace et = exlin::testing;

TEST(AdEvaluate, SinhAtZero) {
  Graph g;
  Var x = g.input("x");
  Var y = g.sinh(x);
  g.evaluate({{"x", Tensor::scalar(0.0)}});
  EXPECT_EQ(g.value(y)[0], 0.0);
}

TEST(AdEvaluate, AsinhSinhRoundTrip) {
  Graph g;
  Var x = g.input("x");
  Var y = g.asinh(g.sinh(x));
  g.evaluate({{"x", Tensor::scalar(0.7)}});
  EXPECT_NEAR(g.value(y)[0], 0.7, 1e-15);
}

TEST(AdEvaluate, InnerProduct) {
  Graph g;
  Var x = g.input("x");
  Var y = g.sum(g.square(x));
  g.evaluate({{"x", Tensor::row({1.0, 2.0})}});
  EXPECT_EQ(g.value(y)[0], 5.0);
}

TEST(AdEvaluate, ShapeMismatchNamesNode) {
  Graph g;
  Var a = g.input("a");
  Var b = g.input("b");
  Var c = g.matmul(a, b);
  g.set_label(c, "projection");
  try {
    g.evaluate({{"a", Tensor(2, 3)}, {"b", Tensor(2, 3)}});
    FAIL() << "expected shape error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("projection"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos) << e.what();
  }
}

TEST(AdEvaluate, NonFiniteIsAnError) {
  Graph g;
  Var x = g.input("x");
  g.sinh(x);
  EXPECT_THROW(g.evaluate({{"x", Tensor::scalar(1e4)}}), Error);
}

TEST(AdEvaluate, UnboundInputIsAnError) {
  Graph g;
  g.sinh(g.input("x"));
  EXPECT_THROW(g.evaluate({}), Error);
}

TEST(AdGradient, SinhSlopeAtZero) {
  Graph g;
  Var x = g.input("x");
  Var y = g.sinh(x);
  g.evaluate({{"x", Tensor::scalar(0.0)}});
  g.backward(y, Tensor::scalar(1.0));
  EXPECT_EQ(g.grad(x)[0], 1.0);
}

TEST(AdGradient, InnerProduct) {
  Graph g;
  Var x = g.input("x");
  Var y = g.sum(g.square(x));
  g.evaluate({{"x", Tensor::row({1.0, 2.0})}});
  g.backward(y, Tensor::scalar(1.0));
  EXPECT_EQ(g.grad(x), Tensor::row({2.0, 4.0}));
}

TEST(AdGradient, BackwardBeforeForward) {
  Graph g;
  Var x = g.input("x");
  Var y = g.sinh(x);
  EXPECT_THROW(g.backward(y, Tensor::scalar(1.0)), Error);
}

TEST(AdGradient, UnusedParameterHasExactlyZeroGradient) {
  Tensor w = Tensor::row({0.3, -0.2});
  Tensor unused = Tensor::row({1.0, 1.0, 1.0});
  Graph g;
  Var x = g.input("x");
  Var pw = g.param("w", w);
  g.param("unused", unused);
  Var y = g.sum(g.mul(x, pw));
  g.evaluate({{"x", Tensor::row({1.0, 2.0})}});
  auto grads = g.gradient(y);
  EXPECT_EQ(grads.at("unused"), Tensor(1, 3, 0.0));
  EXPECT_EQ(grads.at("w"), Tensor::row({1.0, 2.0}));
}

TEST(AdGradient, SharedParameterAccumulates) {
  Tensor w = Tensor::scalar(1.5);
  Graph g;
  Var pw = g.param("w", w);
  Var y = g.add(g.mul(pw, pw), g.sinh(pw));  // w^2 + sinh(w)
  g.evaluate({});
  auto grads = g.gradient(y);
  EXPECT_NEAR(grads.at("w")[0], 2 * 1.5 + std::cosh(1.5), 1e-14);
}

namespace {

// Random three-layer scalar network with mixed activations.
struct RandomNet {
  std::vector<Tensor> weights, biases;
  std::vector<int> acts;
  Tensor input;

  RandomNet(std::mt19937_64& rng) {
    std::uniform_int_distribution<int> width(1, 5), act(0, 5);
    int in = width(rng);
    input = et::random_tensor(rng, static_cast<std::size_t>(std::uniform_int_distribution<int>(1, 3)(rng)), in);
    for (int l = 0; l < 3; ++l) {
      const int out = l == 2 ? 1 : width(rng);
      weights.push_back(et::random_tensor(rng, in, out));
      biases.push_back(et::random_tensor(rng, 1, out));
      acts.push_back(act(rng));
      in = out;
    }
  }

  Var build(Graph& g) {
    Var h = g.input("x");
    for (std::size_t l = 0; l < weights.size(); ++l) {
      Var w = g.param("w" + std::to_string(l), weights[l]);
      Var b = g.param("b" + std::to_string(l), biases[l]);
      h = g.add(g.matmul(h, w), b);
      switch (acts[l]) {
        case 0: h = g.sinh(h); break;
        case 1: h = g.asinh(h); break;
        case 2: h = g.softplus(h); break;
        case 3: h = g.square(h); break;
        case 4: h = g.cosh(h); break;
        default: h = g.exp(g.scale(h, 0.5)); break;
      }
    }
    return g.mean(h);
  }

  double value() {
    Graph g;
    Var y = build(g);
    g.evaluate({{"x", input}});
    return g.value(y)[0];
  }
};

}  // namespace

TEST(AdGradient, RandomGraphsMatchFiniteDifferences) {
  std::mt19937_64 rng(20240501);
  for (int trial = 0; trial < 100; ++trial) {
    RandomNet net(rng);
    // chained sinh/cosh/exp can overflow; keep graphs with moderate values
    while (std::abs(net.value()) > 1e3) net = RandomNet(rng);
    Graph g;
    Var y = net.build(g);
    g.evaluate({{"x", net.input}});
    auto grads = g.gradient(y);
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
      for (auto* t : {&net.weights[l], &net.biases[l]}) {
        const std::string name = (t == &net.weights[l] ? "w" : "b") + std::to_string(l);
        auto fd = et::fd_gradient(*t, [&] { return net.value(); });
        EXPECT_LT(et::relative_error(et::to_vec(grads.at(name)), fd, 1e-8), 1e-5)
            << "trial " << trial << " param " << name;
      }
    }
  }
}

TEST(AdGradient, RepeatedSweepsAreBitIdentical) {
  std::mt19937_64 rng(7);
  RandomNet net(rng);
  Graph g;
  Var y = net.build(g);
  g.evaluate({{"x", net.input}});
  const auto first = g.gradient(y);
  const Tensor v1 = g.value(y);
  g.evaluate({{"x", net.input}});
  const auto second = g.gradient(y);
  EXPECT_EQ(v1, g.value(y));
  EXPECT_EQ(first, second);
}

TEST(AdGradient, LinearityOfGradients) {
  Tensor w = Tensor::row({0.4, -0.7, 0.2});
  const double alpha = 2.0, beta = -3.0;
  auto build_f = [&](Graph& g) { return g.sum(g.sinh(g.param("w", w))); };
  auto build_h = [&](Graph& g) { return g.sum(g.mul(g.square(g.param("w", w)), g.param("w", w))); };

  Graph gf, gh, gc;
  Var f = build_f(gf);
  Var h = build_h(gh);
  Var c = gc.add(gc.scale(build_f(gc), alpha), gc.scale(build_h(gc), beta));
  gf.evaluate({});
  gh.evaluate({});
  gc.evaluate({});
  const Tensor df = gf.gradient(f).at("w");
  const Tensor dh = gh.gradient(h).at("w");
  const Tensor dc = gc.gradient(c).at("w");
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ(dc[i], alpha * df[i] + beta * dh[i]);
  }
}

TEST(AdGradient, ShardedSumMatchesFullBatch) {
  std::mt19937_64 rng(11);
  Tensor w = et::random_tensor(rng, 4, 3);
  Tensor data = et::random_tensor(rng, 64, 4);
  auto loss_grad = [&](std::size_t begin, std::size_t end) {
    Tensor part(end - begin, 4);
    for (std::size_t i = begin; i < end; ++i)
      for (std::size_t j = 0; j < 4; ++j) part(i - begin, j) = data(i, j);
    Graph g;
    Var y = g.sum(g.softplus(g.matmul(g.input("x"), g.param("w", w))));
    g.evaluate({{"x", part}});
    return g.gradient(y).at("w");
  };
  const Tensor full = loss_grad(0, 64);
  Tensor sharded(4, 3, 0.0);
  for (std::size_t s = 0; s < 64; s += 16) {
    const Tensor p = loss_grad(s, s + 16);
    for (std::size_t i = 0; i < p.size(); ++i) sharded[i] += p[i];
  }
  for (std::size_t i = 0; i < full.size(); ++i) {
    EXPECT_LE(std::abs(full[i] - sharded[i]), 1e-12 * std::max(1.0, std::abs(full[i])));
  }
}

TEST(AdJacobian, LinearMap) {
  const Tensor w(2, 2, {1.0, 3.0, 2.0, 4.0});  // y W with W^T = [[1,2],[3,4]]
  auto f = [&](Graph& g, Var x) { return g.matmul(x, g.constant(w)); };
  const Tensor j = exlin::ad::jacobian(f, std::vector<double>{0.3, -0.4});
  EXPECT_EQ(j, Tensor(2, 2, {1.0, 2.0, 3.0, 4.0}));
}

TEST(AdJacobian, HandDifferentiated) {
  auto f = [](Graph& g, Var x) {
    Var a = g.slice(x, 0, 1);
    Var b = g.slice(x, 1, 1);
    return g.concat({g.mul(a, b), g.square(a)});
  };
  const Tensor j = exlin::ad::jacobian(f, std::vector<double>{2.0, 3.0});
  EXPECT_EQ(j, Tensor(2, 2, {3.0, 2.0, 4.0, 0.0}));
}

TEST(AdJvp, MatchesReverseModeOnRandomNets) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    RandomNet net(rng);
    Tensor x = et::random_tensor(rng, 1, net.weights[0].rows());
    Tensor dir = et::random_tensor(rng, 1, x.cols());
    Graph g;
    net.input = x;
    Var y = net.build(g);
    g.evaluate({{"x", x}});
    Var xin = g.input("x");
    Var t = g.jvp(y, {{xin, g.constant(dir)}});
    g.backward(y, Tensor::scalar(1.0));
    const Tensor gx = g.grad(xin);
    double expect = 0.0;
    for (std::size_t i = 0; i < gx.size(); ++i) expect += gx[i] * dir[i];
    EXPECT_NEAR(g.value(t)[0], expect, 1e-12 * std::max(1.0, std::abs(expect)));
  }
}

TEST(AdJvp, NestedTangentIsSecondDerivative) {
  // d/dx [ d/dx sinh(x)^2 ] at 0.3 = d/dx [2 sinh cosh] = 2 cosh(2x)
  Graph g;
  Var x = g.input("x");
  Var y = g.square(g.sinh(x));
  g.evaluate({{"x", Tensor::scalar(0.3)}});
  Var one = g.constant(1.0);
  Var dy = g.jvp(y, {{x, one}});
  Var d2y = g.jvp(dy, {{x, one}});
  EXPECT_NEAR(g.value(dy)[0], std::sinh(0.6), 1e-14);
  EXPECT_NEAR(g.value(d2y)[0], 2.0 * std::cosh(0.6), 1e-13);
}

TEST(AdBatchedLinearAlgebra, SolveAndGradient) {
  std::mt19937_64 rng(5);
  Tensor m = et::random_tensor(rng, 4, 9);
  for (std::size_t b = 0; b < 4; ++b)
    for (int i = 0; i < 3; ++i) m(b, i + 3 * i) += 3.0;
  Tensor rhs = et::random_tensor(rng, 4, 3);
  Tensor w = et::random_tensor(rng, 1, 3);
  auto value = [&] {
    Graph g;
    Var x = g.bsolve(g.param("m", m), g.param("r", rhs));
    Var y = g.sum(g.mul(g.sinh(x), g.param("w", w)));
    g.evaluate({});
    return g.value(y)[0];
  };
  Graph g;
  Var x = g.bsolve(g.param("m", m), g.param("r", rhs));
  Var back = g.bmv(g.param("m", m), x, 3);
  Var y = g.sum(g.mul(g.sinh(x), g.param("w", w)));
  g.evaluate({});
  for (std::size_t i = 0; i < rhs.size(); ++i) EXPECT_NEAR(g.value(back)[i], rhs[i], 1e-12);
  auto grads = g.gradient(y);
  EXPECT_LT(et::relative_error(et::to_vec(grads.at("m")), et::fd_gradient(m, value)), 1e-6);
  EXPECT_LT(et::relative_error(et::to_vec(grads.at("r")), et::fd_gradient(rhs, value)), 1e-6);
}

TEST(AdBatchedLinearAlgebra, IllConditionedSolveIsAnError) {
  Graph g;
  Var x = g.bsolve(g.constant(Tensor(1, 4, {1.0, 0.0, 0.0, 1e-14})), g.constant(Tensor::row({1.0, 1.0})));
  (void)x;
  EXPECT_THROW(g.evaluate({}), Error);
}
