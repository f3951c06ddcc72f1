#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "exlin/ad/jacobian.hpp"
#include "exlin/nets/bnn.hpp"
#include "exlin/nets/diagonal_bnn.hpp"
#include "exlin/nets/picnn.hpp"
#include "test_util.hpp"

using namespace exlin;
using ad::Graph;
using ad::Tensor;
using ad::Var;
using nets::Bnn;
using nets::DiagonalBnn;
using nets::Picnn;

namespace {

std::vector<double> uniform(std::mt19937_64& rng, std::size_t n, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Bnn single_layer(std::size_t n, double log_diag, double b, double c) {
  Bnn bnn(n, 1, 1, 4);
  std::vector<double> raw(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) raw[i] = log_diag;
  bnn.layer(0).set_constant(raw, std::vector<double>(n, b), std::vector<double>(n, c));
  return bnn;
}

}  // namespace

TEST(Bnn, IdentityConfiguration) {
  const Bnn bnn = single_layer(2, 0.0, 0.0, 0.0);
  const std::vector<double> d{0.4};
  const auto x = bnn.forward(std::vector<double>{0.3, -1.2}, d);
  EXPECT_NEAR(x[0], 0.3, 1e-15);
  EXPECT_NEAR(x[1], -1.2, 1e-15);
  EXPECT_NEAR(bnn.inverse(std::vector<double>{0.5, 0.5}, d)[0], 0.5, 1e-15);
}

TEST(Bnn, ZeroOffsetCollapsesToLinear) {
  const Bnn bnn = single_layer(1, std::log(2.0), 0.0, 0.0);
  EXPECT_NEAR(bnn.forward(std::vector<double>{1.0}, std::vector<double>{0.0})[0], 2.0, 1e-14);
}

TEST(Bnn, ExplicitInverseFormula) {
  const Bnn bnn = single_layer(1, 0.0, 0.0, 1.0);
  const double x = std::asinh(1.0 + std::sinh(0.5));
  EXPECT_NEAR(bnn.inverse(std::vector<double>{x}, std::vector<double>{0.0})[0], 0.5, 1e-14);
}

TEST(Bnn, RandomRoundTrip) {
  std::mt19937_64 rng(42);
  Bnn bnn(3, 2, 3, 16);
  bnn.init(rng, 0.5);
  double worst = 0.0;
  for (int i = 0; i < 200; ++i) {
    const auto y = uniform(rng, 3, -2.0, 2.0);
    const auto d = uniform(rng, 2, -1.0, 1.0);
    worst = std::max(worst, max_abs_diff(bnn.inverse(bnn.forward(y, d), d), y));
  }
  EXPECT_LT(worst, 1e-9);
}

TEST(Bnn, WeightMatrixHasPositiveDeterminant) {
  std::mt19937_64 rng(8);
  Bnn bnn(3, 2, 1, 8);
  bnn.init(rng, 2.0);
  for (int i = 0; i < 50; ++i) {
    const auto d = uniform(rng, 2, -3.0, 3.0);
    const auto w = nets::eval_row(
        [&](Graph& g) { return bnn.layer(0).build_weight(g, "bnn.0", g.input("d")); }, nets::bind({{"d", d}}));
    // column-major 3x3
    const double det = w[0] * (w[4] * w[8] - w[7] * w[5]) - w[3] * (w[1] * w[8] - w[7] * w[2]) +
                       w[6] * (w[1] * w[5] - w[4] * w[2]);
    EXPECT_GT(det, 0.0);
  }
}

TEST(Bnn, IllConditionedWeightIsRejected) {
  Bnn bnn(2, 1, 1, 4);
  // diag(1, e^-30): condition number ~1e13
  bnn.layer(0).set_constant(std::vector<double>{0.0, -30.0, 0.0, 0.0}, std::vector<double>(2, 0.0),
                            std::vector<double>(2, 0.0));
  EXPECT_THROW(bnn.inverse(std::vector<double>{0.1, 0.2}, std::vector<double>{0.0}), ad::Error);
}

TEST(Bnn, JacobianMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  Bnn bnn(3, 2, 3, 16);
  bnn.init(rng, 0.5);
  const auto d = uniform(rng, 2, -1.0, 1.0);
  auto f = [&](Graph& g, Var y) { return bnn.build_forward(g, "bnn", y, g.constant(Tensor::row(d))); };
  for (int trial = 0; trial < 10; ++trial) {
    const auto y = uniform(rng, 3, -1.5, 1.5);
    const Tensor jac = ad::jacobian(f, y);
    double worst = 0.0;
    for (std::size_t j = 0; j < 3; ++j) {
      auto yp = y, ym = y;
      yp[j] += 1e-6;
      ym[j] -= 1e-6;
      const auto fp = bnn.forward(yp, d), fm = bnn.forward(ym, d);
      for (std::size_t i = 0; i < 3; ++i) worst = std::max(worst, std::abs(jac(i, j) - (fp[i] - fm[i]) / 2e-6));
    }
    EXPECT_LT(worst, 1e-5);
  }
}

TEST(DiagonalBnn, IdentityConfiguration) {
  DiagonalBnn psi(3, 2, 1, 4);
  const std::vector<double> zero(3, 0.0);
  psi.set_constant(0, zero, zero, zero);
  const auto v = psi.forward(std::vector<double>{10.0, 20.0, 30.0}, std::vector<double>{0.3, -0.3});
  EXPECT_NEAR(v[0], 10.0, 1e-12);
  EXPECT_NEAR(v[1], 20.0, 1e-12);
  EXPECT_NEAR(v[2], 30.0, 1e-12);
}

TEST(DiagonalBnn, RoundTripAndMonotonicity) {
  std::mt19937_64 rng(17);
  DiagonalBnn psi(3, 5, 3, 16);
  psi.init(rng, 0.5);
  double worst = 0.0;
  int violations = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto cond = uniform(rng, 5, -1.0, 1.0);
    const auto u = uniform(rng, 3, -2.0, 2.0);
    auto u2 = u;
    for (double& x : u2) x += std::uniform_real_distribution<double>(0.0, 0.5)(rng);
    const auto v = psi.forward(u, cond);
    const auto v2 = psi.forward(u2, cond);
    for (std::size_t k = 0; k < 3; ++k) violations += v2[k] < v[k];
    worst = std::max(worst, max_abs_diff(psi.inverse(v, cond), u));
  }
  EXPECT_EQ(violations, 0);
  EXPECT_LT(worst, 1e-9);
}

TEST(DiagonalBnn, PositiveSampledDerivative) {
  std::mt19937_64 rng(19);
  DiagonalBnn psi(3, 5, 3, 16);
  psi.init(rng, 0.5);
  for (int i = 0; i < 50; ++i) {
    const auto cond = uniform(rng, 5, -1.0, 1.0);
    auto f = [&](Graph& g, Var u) { return psi.build_forward(g, "p", u, g.constant(Tensor::row(cond))); };
    const Tensor jac = ad::jacobian(f, uniform(rng, 3, -2.0, 2.0));
    for (std::size_t r = 0; r < 3; ++r) {
      for (std::size_t c = 0; c < 3; ++c) {
        if (r == c) EXPECT_GT(jac(r, c), 0.0);
        else EXPECT_EQ(jac(r, c), 0.0);
      }
    }
  }
}

TEST(DiagonalBnn, BoxMapsToBox) {
  std::mt19937_64 rng(23);
  DiagonalBnn psi(3, 5, 3, 16);
  psi.init(rng, 0.5);
  const auto cond = uniform(rng, 5, -1.0, 1.0);
  const auto lo = psi.inverse(std::vector<double>(3, 0.0), cond);
  const auto hi = psi.inverse(std::vector<double>(3, 1.0), cond);
  // corners of the unit box land on corners of [lo, hi]
  for (int mask = 0; mask < 8; ++mask) {
    std::vector<double> corner(3);
    for (int k = 0; k < 3; ++k) corner[k] = (mask >> k) & 1;
    const auto img = psi.inverse(corner, cond);
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(img[k], (mask >> k) & 1 ? hi[k] : lo[k], 1e-12);
  }
  for (int i = 0; i < 500; ++i) {
    const auto img = psi.inverse(uniform(rng, 3, 0.0, 1.0), cond);
    for (int k = 0; k < 3; ++k) {
      EXPECT_GE(img[k], lo[k]);
      EXPECT_LE(img[k], hi[k]);
    }
  }
}

TEST(Picnn, ZeroConvexWeightsGiveConstant) {
  Picnn xi(4, 2, 8, 2, 3, nets::NonnegMode::direct);
  std::mt19937_64 rng(1);
  xi.init(rng, 1.0);
  for (std::size_t k = 0; k < xi.depth(); ++k) {
    xi.layer(k).x_w.fill(0.0);
    xi.layer(k).c_w.fill(0.0);
    if (k > 0) xi.layer(k).z_raw.fill(0.0);
  }
  xi.layer(2).bias = Tensor::row({0.7, -1.3});
  const std::vector<double> ctx{0.2, 0.1};
  for (int i = 0; i < 10; ++i) {
    const auto z = xi.forward(uniform(rng, 4, -3.0, 3.0), ctx);
    EXPECT_EQ(z[0], 0.7);
    EXPECT_EQ(z[1], -1.3);
  }
}

TEST(Picnn, NegativeConstrainedWeightIsAConstructionBug) {
  Picnn xi(2, 1, 4, 1, 2, nets::NonnegMode::direct);
  std::mt19937_64 rng(1);
  xi.init(rng, 1.0);
  xi.layer(1).z_raw(0, 0) = -0.1;
  EXPECT_THROW(xi.forward(std::vector<double>{0.0, 0.0}, std::vector<double>{0.0}), std::logic_error);
}

TEST(Picnn, MidpointConvexity) {
  std::mt19937_64 rng(29);
  Picnn xi(6, 2, 16, 2, 3);
  xi.init(rng, 1.0);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const auto p = uniform(rng, 6, -3.0, 3.0);
    const auto q = uniform(rng, 6, -3.0, 3.0);
    const auto ctx = uniform(rng, 2, -1.0, 1.0);
    std::vector<double> mid(6);
    for (int k = 0; k < 6; ++k) mid[k] = 0.5 * (p[k] + q[k]);
    const auto fp = xi.forward(p, ctx), fq = xi.forward(q, ctx), fm = xi.forward(mid, ctx);
    for (int k = 0; k < 2; ++k) worst = std::min(worst, 0.5 * (fp[k] + fq[k]) - fm[k]);
  }
  EXPECT_GE(worst, -1e-12);
}

TEST(Picnn, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(31);
  Picnn xi(4, 2, 8, 1, 3);
  xi.init(rng, 1.0);
  const auto ctx = uniform(rng, 2, -1.0, 1.0);
  auto f = [&](Graph& g, Var x) { return xi.build(g, "xi", x, g.constant(Tensor::row(ctx))); };
  for (int trial = 0; trial < 10; ++trial) {
    const auto x = uniform(rng, 4, -2.0, 2.0);
    const Tensor jac = ad::jacobian(f, x);
    std::vector<double> fd(4), an(4);
    for (std::size_t j = 0; j < 4; ++j) {
      auto xp = x, xm = x;
      xp[j] += 1e-6;
      xm[j] -= 1e-6;
      fd[j] = (xi.forward(xp, ctx)[0] - xi.forward(xm, ctx)[0]) / 2e-6;
      an[j] = jac(0, j);
    }
    EXPECT_LT(exlin::testing::relative_error(an, fd), 1e-5);
  }
}
