#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "exlin/ad/graph.hpp"

namespace exlin::lie {

using ad::Graph;
using ad::Tensor;
using ad::Var;

/// A smooth field on ℝⁿ given by its graph builder (1 x n → 1 x n).
using Field = std::function<Var(Graph&, Var)>;

/// Single-input input-affine system ẏ = f(y) + g(y) v.
struct VectorFieldPair {
  std::size_t n = 0;
  Field f, g;
  std::string name;
};

/// [a, b](y) = (∂b/∂y) a(y) − (∂a/∂y) b(y), as graph nodes over `y`.
/// The graph must already be evaluated.
inline Var bracket(Graph& g, Var y, Var a, Var b) {
  return g.sub(g.jvp(b, {{y, a}}), g.jvp(a, {{y, b}}));
}

namespace detail {

inline std::vector<double> to_std(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

inline void check_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw ad::Error(std::string("non-finite value in ") + what);
}

/// Evaluated graph holding y, f(y), g(y) and adᵏ_f g for k = 0..depth.
struct BracketGraph {
  Graph g;
  Var y, f, field_g;
  std::vector<Var> ad;  ///< ad[k] = adᵏ_f g

  BracketGraph(const VectorFieldPair& sys, std::span<const double> point, std::size_t depth) {
    if (point.size() != sys.n) throw std::invalid_argument("point has wrong dimension");
    y = g.input("y");
    f = sys.f(g, y);
    field_g = sys.g(g, y);
    g.evaluate({{"y", Tensor::row(point)}});
    check_shape(f, sys.n, "f");
    check_shape(field_g, sys.n, "g");
    ad.push_back(field_g);
    for (std::size_t k = 1; k <= depth; ++k) ad.push_back(bracket(g, y, f, ad.back()));
  }

  void move_to(std::span<const double> point) { g.rebind("y", Tensor::row(point)); }

  void check_shape(Var v, std::size_t n, const char* what) const {
    const Tensor& t = g.value(v);
    if (t.rows() != 1 || t.cols() != n) {
      throw std::invalid_argument(std::string("field ") + what + " has shape " + t.shape_string() + ", expected 1x" +
                                  std::to_string(n));
    }
  }

  Eigen::VectorXd value(Var v) const {
    const Tensor& t = g.value(v);
    check_finite(t, "Lie bracket");
    return Eigen::Map<const Eigen::VectorXd>(t.values().data(), static_cast<long>(t.size()));
  }
};

}  // namespace detail

/// [f, g](y).
inline std::vector<double> lie_bracket(const Field& f, const Field& gf, std::span<const double> y) {
  Graph g;
  Var yv = g.input("y");
  Var a = f(g, yv), b = gf(g, yv);
  g.evaluate({{"y", Tensor::row(y)}});
  const Tensor& out = g.value(bracket(g, yv, a, b));
  detail::check_finite(out, "Lie bracket");
  return detail::to_std(out);
}

/// adᵏ_f g (y) with ad⁰_f g = g and adᵏ⁺¹_f g = [f, adᵏ_f g].
inline std::vector<double> ad_power(const VectorFieldPair& sys, std::size_t k, std::span<const double> y) {
  detail::BracketGraph bg(sys, y, k);
  const Eigen::VectorXd v = bg.value(bg.ad[k]);
  return {v.data(), v.data() + v.size()};
}

enum class Verdict { pass, fail_rank, fail_involutive };

inline const char* to_string(Verdict v) {
  switch (v) {
    case Verdict::pass: return "pass";
    case Verdict::fail_rank: return "fail-rank";
    case Verdict::fail_involutive: return "fail-involutive";
  }
  return "?";
}

struct SampleResult {
  std::vector<double> y;
  std::size_t rank = 0;
  double sigma_ratio = 0.0;            ///< σ_min / σ_max of [ad⁰g … adⁿ⁻¹g]
  double involutivity_residual = 0.0;  ///< worst projected bracket residual
};

struct CheckOptions {
  std::size_t samples = 100;
  double rank_tol = 1e-6;         ///< rank n iff σ_min > rank_tol · σ_max
  double involutivity_tol = 1e-6; ///< residual / max(1, ‖bracket‖) must stay below
  std::uint64_t seed = 0;
};

struct CheckReport {
  std::string system;
  std::size_t n = 0;
  std::vector<double> lower, upper;
  CheckOptions options;
  std::vector<SampleResult> samples;
  Verdict verdict = Verdict::pass;
  double worst_sigma_ratio = 0.0;
  double worst_involutivity = 0.0;

  /// Re-judges the stored numbers at other thresholds. Raising rank_tol or
  /// lowering involutivity_tol can only turn pass into fail.
  Verdict judge(double rank_tol, double involutivity_tol) const {
    for (const auto& s : samples) {
      if (!(s.sigma_ratio > rank_tol)) return Verdict::fail_rank;
    }
    for (const auto& s : samples) {
      if (!(s.involutivity_residual < involutivity_tol)) return Verdict::fail_involutive;
    }
    return Verdict::pass;
  }
};

/// Samples the box uniformly and tests, at each point, that
/// {ad⁰g, …, adⁿ⁻¹g} has rank n and that every bracket [adⁱg, adʲg],
/// 0 ≤ i < j ≤ n−2, lies in span{ad⁰g, …, adⁿ⁻²g}. This is evidence on the
/// sampled points only, not a proof over the whole domain.
inline CheckReport check_linearizable(const VectorFieldPair& sys, std::span<const double> lower,
                                      std::span<const double> upper, const CheckOptions& opt = {}) {
  const std::size_t n = sys.n;
  if (n == 0) throw std::invalid_argument("system dimension must be positive");
  if (lower.size() != n || upper.size() != n) throw std::invalid_argument("sample box has wrong dimension");
  if (opt.samples == 0) throw std::invalid_argument("need at least one sample");
  for (std::size_t i = 0; i < n; ++i) {
    if (!(lower[i] <= upper[i])) throw std::invalid_argument("sample box has lower > upper");
  }
  CheckReport rep;
  rep.system = sys.name;
  rep.n = n;
  rep.lower.assign(lower.begin(), lower.end());
  rep.upper.assign(upper.begin(), upper.end());
  rep.options = opt;

  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> point(n);
  auto draw = [&] {
    for (std::size_t i = 0; i < n; ++i) point[i] = lower[i] + (upper[i] - lower[i]) * unit(rng);
  };
  draw();
  detail::BracketGraph bg(sys, point, n - 1);
  // Brackets among ad⁰g … adⁿ⁻²g, built once and recomputed on rebind.
  std::vector<Var> pair_brackets;
  for (std::size_t i = 0; i + 2 <= n; ++i) {
    for (std::size_t j = i + 1; j + 2 <= n; ++j) pair_brackets.push_back(bracket(bg.g, bg.y, bg.ad[i], bg.ad[j]));
  }

  rep.worst_sigma_ratio = std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s < opt.samples; ++s) {
    if (s > 0) {
      draw();
      bg.move_to(point);
    }
    SampleResult r;
    r.y = point;
    Eigen::MatrixXd span_all(static_cast<long>(n), static_cast<long>(n));
    for (std::size_t k = 0; k < n; ++k) span_all.col(static_cast<long>(k)) = bg.value(bg.ad[k]);
    const Eigen::VectorXd sv = Eigen::JacobiSVD<Eigen::MatrixXd>(span_all).singularValues();
    r.sigma_ratio = sv(0) > 0.0 ? sv(sv.size() - 1) / sv(0) : 0.0;
    r.rank = 0;
    for (long k = 0; k < sv.size(); ++k) {
      if (sv(k) > opt.rank_tol * sv(0)) ++r.rank;
    }
    if (!pair_brackets.empty()) {
      const Eigen::MatrixXd basis = span_all.leftCols(static_cast<long>(n - 1));
      const auto qr = basis.colPivHouseholderQr();
      for (Var b : pair_brackets) {
        const Eigen::VectorXd v = bg.value(b);
        const Eigen::VectorXd res = v - basis * qr.solve(v);
        r.involutivity_residual = std::max(r.involutivity_residual, res.norm() / std::max(1.0, v.norm()));
      }
    }
    rep.worst_sigma_ratio = std::min(rep.worst_sigma_ratio, r.sigma_ratio);
    rep.worst_involutivity = std::max(rep.worst_involutivity, r.involutivity_residual);
    rep.samples.push_back(std::move(r));
  }
  rep.verdict = rep.judge(opt.rank_tol, opt.involutivity_tol);
  return rep;
}

// ---- built-in systems ---------------------------------------------------------------

namespace detail {

inline Var component(Graph& g, Var y, int i) { return g.slice(y, i, 1); }

}  // namespace detail

/// Chain of three integrators: f = (y₂, y₃, 0), g = (0, 0, 1).
inline VectorFieldPair chain3() {
  VectorFieldPair s;
  s.n = 3;
  s.name = "chain3";
  s.f = [](Graph& g, Var y) { return g.gather(y, {1, 2, -1}); };
  s.g = [](Graph& g, Var) { return g.constant(Tensor::row(std::vector<double>{0.0, 0.0, 1.0})); };
  return s;
}

/// f = F y, g = G (constant column).
inline VectorFieldPair linear_pair(const Eigen::MatrixXd& f_mat, const Eigen::VectorXd& g_vec) {
  const long n = f_mat.rows();
  if (f_mat.cols() != n || g_vec.size() != n) throw std::invalid_argument("linear pair: shape mismatch");
  // y (1 x n) · Fᵀ gives the row (F y)ᵀ.
  Tensor ft(static_cast<std::size_t>(n), static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i)
    for (long j = 0; j < n; ++j) ft(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = f_mat(j, i);
  std::vector<double> gv(g_vec.data(), g_vec.data() + n);
  VectorFieldPair s;
  s.n = static_cast<std::size_t>(n);
  s.name = "linear";
  s.f = [ft](Graph& g, Var y) { return g.matmul(y, g.constant(ft)); };
  s.g = [gv](Graph& g, Var) { return g.constant(Tensor::row(gv)); };
  return s;
}

/// f = (y₂ + y₃², y₃, 0), g = (0, 0, 1): the rank condition holds
/// everywhere but [g, [f, g]] = (−2, 0, 0) leaves span{g, [f, g]}.
inline VectorFieldPair noninvolutive3() {
  VectorFieldPair s;
  s.n = 3;
  s.name = "noninvolutive3";
  s.f = [](Graph& g, Var y) {
    Var y2 = detail::component(g, y, 1), y3 = detail::component(g, y, 2);
    return g.concat({g.add(y2, g.square(y3)), y3, g.constant(0.0)});
  };
  s.g = [](Graph& g, Var) { return g.constant(Tensor::row(std::vector<double>{0.0, 0.0, 1.0})); };
  return s;
}

inline VectorFieldPair builtin_system(const std::string& name) {
  if (name == "chain3") return chain3();
  if (name == "noninvolutive3") return noninvolutive3();
  if (name == "linear3") {
    Eigen::MatrixXd f(3, 3);
    f << 0, 1, 0, 0, 0, 1, -1, -2, -3;
    return linear_pair(f, Eigen::Vector3d(0, 0, 1));
  }
  throw std::invalid_argument("unknown built-in system '" + name + "' (chain3, linear3, noninvolutive3)");
}

}  // namespace exlin::lie
