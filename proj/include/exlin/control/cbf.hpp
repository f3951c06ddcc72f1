#pragma once

#include <Eigen/Dense>
#include <cstdio>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "exlin/control/barrier.hpp"
#include "exlin/control/lqr.hpp"
#include "exlin/qp/qp.hpp"

namespace exlin::control {

/// The safety filter has no input satisfying every row.
class FilterInfeasible : public std::runtime_error {
 public:
  FilterInfeasible(const std::string& what, int row, Eigen::VectorXd barriers)
      : std::runtime_error(what), row_(row), barriers_(std::move(barriers)) {}
  int violated_row() const { return row_; }
  const Eigen::VectorXd& barriers() const { return barriers_; }

 private:
  int row_;
  Eigen::VectorXd barriers_;
};

struct CbfResult {
  Eigen::VectorXd u;
  qp::QpSolution qp;  ///< multipliers and KKT residual certify the answer
};

/// u* = argmin ‖u − k‖² s.t. ∇hᵀ(f + g u) ≤ α(−h) and lo ≤ u ≤ hi (the box is
/// skipped when `lo`/`hi` are empty). Rows: barrier, then u ≤ hi, then −u ≤ −lo.
inline CbfResult cbf_qp(const Eigen::VectorXd& f, const Eigen::MatrixXd& g, double h, const Eigen::VectorXd& grad_h,
                        const ClassKappa& alpha, const Eigen::VectorXd& k, const Eigen::VectorXd& lo = {},
                        const Eigen::VectorXd& hi = {}) {
  const long m = k.size();
  if (g.rows() != f.size() || g.cols() != m || grad_h.size() != f.size()) {
    throw std::invalid_argument("cbf_qp: inconsistent shapes");
  }
  const bool box = lo.size() > 0 || hi.size() > 0;
  if (box && (lo.size() != m || hi.size() != m)) throw std::invalid_argument("cbf_qp: box bounds need m entries");
  qp::QpProblem p;
  p.H = 2.0 * Eigen::MatrixXd::Identity(m, m);
  p.q = -2.0 * k;
  const long r = 1 + (box ? 2 * m : 0);
  p.G = Eigen::MatrixXd::Zero(r, m);
  p.w = Eigen::VectorXd::Zero(r);
  p.G.row(0) = (grad_h.transpose() * g);
  p.w(0) = alpha(-h) - grad_h.dot(f);
  if (box) {
    p.G.block(1, 0, m, m) = Eigen::MatrixXd::Identity(m, m);
    p.w.segment(1, m) = hi;
    p.G.block(1 + m, 0, m, m) = -Eigen::MatrixXd::Identity(m, m);
    p.w.segment(1 + m, m) = -lo;
  }
  CbfResult out;
  out.qp = qp::solve(p);
  if (out.qp.status == qp::QpStatus::infeasible) {
    const int row = out.qp.violated_row;
    const std::string name = row == 0 ? "barrier" : (row <= m ? "upper input bound" : "lower input bound");
    throw FilterInfeasible("CBF-QP infeasible at row " + std::to_string(row) + " (" + name + ")", row,
                           Eigen::VectorXd::Constant(1, h));
  }
  out.u = out.qp.lambda;
  return out;
}

/// Everything the integral-CBF filter needs at one sample.
struct IcbfTerms {
  Eigen::VectorXd u;       ///< integrated input (m)
  Eigen::VectorXd k;       ///< nominal law k(x) (m)
  Eigen::MatrixXd dk_dx;   ///< m x n
  Eigen::VectorXd xdot;    ///< f(x) + g(x)u (n)
  Eigen::VectorXd h;       ///< r
  Eigen::MatrixXd dh_dx;   ///< r x n
  Eigen::MatrixXd dh_du;   ///< r x m
};

struct IcbfProblem {
  qp::QpProblem qp;
  double constant = 0.0;  ///< objective term independent of λ

  /// a‖λ‖² + 2(u−k)ᵀλ − 2(u−k)ᵀ(∂k/∂x)(f+gu) as assembled.
  double objective(const Eigen::VectorXd& lambda) const {
    return 0.5 * lambda.dot(qp.H * lambda) + qp.q.dot(lambda) + constant;
  }
};

/// min_λ a‖λ‖² + 2(u−k)ᵀλ − 2(u−k)ᵀ(∂k/∂x)(f+gu)
/// s.t. (∂h/∂x)(f+gu) + (∂h/∂u)λ ≤ α(−(h + margin)) row by row.
inline IcbfProblem assemble_icbf(const IcbfTerms& t, const BarrierSpec& spec) {
  const long m = t.u.size();
  const long r = t.h.size();
  if (t.k.size() != m || t.dk_dx.rows() != m || t.dk_dx.cols() != t.xdot.size() || t.dh_dx.rows() != r ||
      t.dh_dx.cols() != t.xdot.size() || t.dh_du.rows() != r || t.dh_du.cols() != m) {
    throw std::invalid_argument("assemble_icbf: inconsistent shapes");
  }
  if (spec.alpha.size() != 1 && static_cast<long>(spec.alpha.size()) != r) {
    throw std::invalid_argument("assemble_icbf: class-K entries do not match barrier rows");
  }
  if (!(spec.a > 0.0)) throw std::invalid_argument("assemble_icbf: a must be positive");
  IcbfProblem out;
  const Eigen::VectorXd e = t.u - t.k;
  out.qp.H = 2.0 * spec.a * Eigen::MatrixXd::Identity(m, m);
  out.qp.q = 2.0 * e;
  out.constant = -2.0 * e.dot(t.dk_dx * t.xdot);
  out.qp.G = t.dh_du;
  out.qp.w.resize(r);
  const Eigen::VectorXd drift = t.dh_dx * t.xdot;
  for (long i = 0; i < r; ++i) {
    out.qp.w(i) = spec.alpha_for(static_cast<std::size_t>(i))(-(t.h(i) + spec.margin)) - drift(i);
  }
  return out;
}

struct ControllerState {
  Eigen::VectorXd u;  ///< integrated internal input
  double t = 0.0;
};

struct IcbfStep {
  Eigen::VectorXd lambda;
  Eigen::VectorXd v;      ///< Ψ(u, y, d̄) for the input held over this period
  Eigen::VectorXd h;      ///< barrier values at (x, u) before the update
  Eigen::VectorXd mu;
  Eigen::VectorXd xdot;   ///< model ẋ at (x, u)
  Eigen::VectorXd k;      ///< nominal input at x
  int qp_iterations = 0;
  double kkt_residual = 0.0;
};

/// One controller tick. Evaluates h(x, u) for the current integrated input,
/// emits v = Ψ(u, y, d̄) for the coming period, solves the filter QP and
/// advances u ← u + Δt·λ*.
inline IcbfStep icbf_step(BarrierEvaluator& barriers, ControllerState& state, const Eigen::VectorXd& x,
                          std::span<const double> d, const LqrDesign& design, double dt,
                          qp::QpSolver* solver = nullptr) {
  if (!(dt > 0.0)) throw std::invalid_argument("icbf_step: control period must be positive");
  const BarrierSpec& spec = barriers.spec();
  const BarrierValues b = barriers.evaluate(x, state.u, d);
  IcbfTerms t;
  t.u = state.u;
  t.k = lqr_control(design, x);
  t.dk_dx = -design.K;
  t.xdot = design.lin.xdot(x, state.u);
  t.h = b.h;
  t.dh_dx = b.dh_dx;
  t.dh_du = b.dh_du;
  const IcbfProblem prob = assemble_icbf(t, spec);
  qp::QpSolver local;
  qp::QpSolver& s = solver ? *solver : local;
  const qp::QpSolution sol = s.solve_warm(prob.qp);
  if (sol.status == qp::QpStatus::infeasible) {
    std::ostringstream msg;
    msg << "I-CBF QP infeasible at row " << sol.violated_row << "; barrier values:";
    for (long i = 0; i < b.h.size(); ++i) msg << ' ' << b.h(i);
    throw FilterInfeasible(msg.str(), sol.violated_row, b.h);
  }
  IcbfStep out;
  out.lambda = sol.lambda;
  out.v = b.v;
  out.h = b.h;
  out.mu = sol.mu;
  out.xdot = t.xdot;
  out.k = t.k;
  out.qp_iterations = sol.iterations;
  out.kkt_residual = sol.kkt_residual;
  state.u += dt * sol.lambda;
  state.t += dt;
  return out;
}

inline IcbfStep icbf_step(const model::ELModel& m, ControllerState& state, const Eigen::VectorXd& x,
                          std::span<const double> d, const LqrDesign& design, const BarrierSpec& spec, double dt,
                          qp::QpSolver* solver = nullptr) {
  BarrierEvaluator barriers(m, spec);
  return icbf_step(barriers, state, x, d, design, dt, solver);
}

}  // namespace exlin::control
