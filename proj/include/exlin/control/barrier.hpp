#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "exlin/ad/graph.hpp"
#include "exlin/model/el_model.hpp"

namespace exlin::control {

/// α(s) = k₁s + k₂s|s|: the quadratic k₁s + k₂s² on s ≥ 0, extended as an
/// odd function so it stays strictly increasing on all of ℝ.
struct ClassKappa {
  double k1 = 1.0;
  double k2 = 1.0;

  double operator()(double s) const { return k1 * s + k2 * s * std::abs(s); }
  void validate() const {
    if (!(k1 > 0.0) || !(k2 >= 0.0) || !std::isfinite(k1) || !std::isfinite(k2)) {
      throw std::invalid_argument("class-K function needs k1 > 0 and k2 >= 0");
    }
  }
};

/// Output and input bounds enforced as h(x, u) ≤ 0 with rows
///   [ Ξ(x,u,d̄) − z̄ ;  u − Ψ⁻¹(v̄, y, d̄) ;  Ψ⁻¹(v̲, y, d̄) − u ],   y = Φ⁻¹(x, d̄).
struct BarrierSpec {
  std::vector<double> z_max;   ///< p
  std::vector<double> v_max;   ///< m
  std::vector<double> v_min;   ///< m
  std::vector<ClassKappa> alpha;  ///< p + 2m rows, or one entry applied to every row
  double a = 0.01;             ///< weight on ‖λ‖²
  /// Rows are enforced as h + margin ≤ 0; a small back-off absorbs the
  /// second-order error of sampling at a finite control period.
  double margin = 0.0;

  std::size_t rows() const { return z_max.size() + v_max.size() + v_min.size(); }

  const ClassKappa& alpha_for(std::size_t row) const { return alpha.size() == 1 ? alpha.front() : alpha.at(row); }

  void validate(std::size_t m, std::size_t p) const {
    if (z_max.size() != p || v_max.size() != m || v_min.size() != m) {
      throw std::invalid_argument("barrier spec: bound sizes do not match the model (p=" + std::to_string(p) +
                                  ", m=" + std::to_string(m) + ")");
    }
    if (alpha.size() != 1 && alpha.size() != rows()) {
      throw std::invalid_argument("barrier spec: need 1 or " + std::to_string(rows()) + " class-K entries");
    }
    for (const auto& k : alpha) k.validate();
    for (std::size_t i = 0; i < m; ++i) {
      if (!(v_min[i] < v_max[i])) throw std::invalid_argument("barrier spec: empty input interval");
    }
    if (!(a > 0.0)) throw std::invalid_argument("barrier spec: a must be positive");
    if (!(margin >= 0.0)) throw std::invalid_argument("barrier spec: margin must be nonnegative");
  }
};

/// h(x, u) and its Jacobians at one point, plus the values the controller
/// needs from the same graph.
struct BarrierValues {
  Eigen::VectorXd h;       ///< r
  Eigen::MatrixXd dh_dx;   ///< r x n
  Eigen::MatrixXd dh_du;   ///< r x m
  Eigen::VectorXd y;       ///< Φ⁻¹(x, d̄)
  Eigen::VectorXd v;       ///< Ψ(u, y, d̄)
};

/// Barrier graph built once for a model and spec; each evaluation rebinds
/// (x, u, d̄). The model must outlive the evaluator.
class BarrierEvaluator {
 public:
  BarrierEvaluator(const model::ELModel& m, BarrierSpec spec) : spec_(std::move(spec)), dims_(m.dims()) {
    using ad::Tensor;
    spec_.validate(dims_.m, dims_.p);
    x_ = g_.input("x");
    u_ = g_.input("u");
    ad::Var d = g_.input("d");
    y_ = m.y_of(g_, x_, d);
    ad::Var hz = g_.sub(m.z_of(g_, x_, u_, d), g_.constant(Tensor::row(spec_.z_max)));
    ad::Var u_hi = m.u_of(g_, g_.constant(Tensor::row(spec_.v_max)), y_, d);
    ad::Var u_lo = m.u_of(g_, g_.constant(Tensor::row(spec_.v_min)), y_, d);
    h_ = g_.concat({hz, g_.sub(u_, u_hi), g_.sub(u_lo, u_)});
    v_ = m.v_of(g_, u_, y_, d);
  }
  BarrierEvaluator(const BarrierEvaluator&) = delete;
  BarrierEvaluator& operator=(const BarrierEvaluator&) = delete;

  const BarrierSpec& spec() const { return spec_; }

  BarrierValues evaluate(const Eigen::VectorXd& x, const Eigen::VectorXd& u, std::span<const double> d,
                         bool jacobians = true) {
    using ad::Tensor;
    if (static_cast<std::size_t>(x.size()) != dims_.n || static_cast<std::size_t>(u.size()) != dims_.m ||
        d.size() != dims_.l) {
      throw std::invalid_argument("barrier evaluation: argument sizes do not match the model");
    }
    ad::Bindings b{{"x", Tensor::row(std::span<const double>(x.data(), static_cast<std::size_t>(x.size())))},
                   {"u", Tensor::row(std::span<const double>(u.data(), static_cast<std::size_t>(u.size())))},
                   {"d", Tensor::row(d)}};
    if (g_.evaluated()) {
      g_.rebind(b);
    } else {
      g_.evaluate(b);
    }
    BarrierValues out;
    out.h = vec(h_);
    out.y = vec(y_);
    out.v = vec(v_);
    if (!out.h.allFinite() || !out.v.allFinite()) throw std::runtime_error("barrier evaluation produced non-finite values");
    if (!jacobians) return out;
    const long r = out.h.size();
    out.dh_dx.resize(r, static_cast<long>(dims_.n));
    out.dh_du.resize(r, static_cast<long>(dims_.m));
    Tensor seed(1, static_cast<std::size_t>(r), 0.0);
    for (long i = 0; i < r; ++i) {
      seed.fill(0.0);
      seed[static_cast<std::size_t>(i)] = 1.0;
      g_.backward(h_, seed);
      const Tensor gx = g_.grad(x_), gu = g_.grad(u_);
      for (std::size_t j = 0; j < dims_.n; ++j) out.dh_dx(i, static_cast<long>(j)) = gx[j];
      for (std::size_t j = 0; j < dims_.m; ++j) out.dh_du(i, static_cast<long>(j)) = gu[j];
    }
    if (!out.dh_dx.allFinite() || !out.dh_du.allFinite()) {
      throw std::runtime_error("barrier Jacobian has non-finite entries");
    }
    return out;
  }

 private:
  Eigen::VectorXd vec(ad::Var v) const {
    const auto vals = g_.value(v).values();
    return Eigen::Map<const Eigen::VectorXd>(vals.data(), static_cast<long>(vals.size()));
  }

  BarrierSpec spec_;
  model::Dims dims_;
  ad::Graph g_;
  ad::Var x_, u_, y_, h_, v_;
};

inline BarrierValues evaluate_barriers(const model::ELModel& m, const BarrierSpec& spec, const Eigen::VectorXd& x,
                                       const Eigen::VectorXd& u, std::span<const double> d) {
  BarrierEvaluator ev(m, spec);
  return ev.evaluate(x, u, d);
}

}  // namespace exlin::control
