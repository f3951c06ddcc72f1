#pragma once

#include <Eigen/Dense>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "exlin/control/care.hpp"
#include "exlin/model/el_model.hpp"

namespace exlin::control {

/// Raised when no input holds the requested output at steady state.
class TargetNotRealizable : public std::runtime_error {
 public:
  TargetNotRealizable(double residual, double tolerance)
      : std::runtime_error("target not realizable: steady-state residual " + std::to_string(residual) +
                           " exceeds tolerance " + std::to_string(tolerance)),
        residual_(residual) {}
  double residual() const { return residual_; }

 private:
  double residual_;
};

inline Eigen::VectorXd to_vector(std::span<const double> v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<long>(v.size()));
}
inline std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

/// Linear coordinates ẋ = A x + B u + c at a frozen disturbance.
struct LinearModel {
  Eigen::MatrixXd A, B;
  Eigen::VectorXd c;

  static LinearModel from(const model::ELModel& m, std::span<const double> d) {
    return {m.a_matrix(d), m.b_matrix(d), m.c_vector(d)};
  }
  Eigen::VectorXd xdot(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const { return A * x + B * u + c; }
};

struct SteadyState {
  Eigen::VectorXd x_d, u_d;
  double residual = 0.0;  ///< ‖A x_d + B u_d + c‖
};

/// Minimum-norm least-squares u_d with B u_d = −(A x_d + c). The residual is
/// compared to `tolerance · (1 + ‖A x_d‖ + ‖c‖)`.
inline SteadyState steady_target(const LinearModel& lin, const Eigen::VectorXd& x_d, double tolerance = 1e-6) {
  SteadyState s;
  s.x_d = x_d;
  const Eigen::VectorXd rhs = -(lin.A * x_d + lin.c);
  s.u_d = lin.B.completeOrthogonalDecomposition().solve(rhs);
  s.residual = (lin.B * s.u_d - rhs).norm();
  const double scale = 1.0 + (lin.A * x_d).norm() + lin.c.norm();
  if (!(s.residual <= tolerance * scale)) throw TargetNotRealizable(s.residual, tolerance * scale);
  return s;
}

inline SteadyState steady_target(const model::ELModel& m, std::span<const double> y_d, std::span<const double> d,
                                 double tolerance = 1e-6) {
  return steady_target(LinearModel::from(m, d), to_vector(m.x_from_y(y_d, d)), tolerance);
}

struct LqrDesign {
  Eigen::MatrixXd P, K, Q, R;
  Eigen::VectorXd x_d, u_d;
  double riccati_residual = 0.0;
  double steady_residual = 0.0;
  LinearModel lin;  ///< the A, B, c the design was computed for
};

/// Riccati solve plus gain K = R⁻¹BᵀP around a given steady state.
inline LqrDesign design_lqr(const LinearModel& lin, const SteadyState& target, const Eigen::MatrixXd& q,
                            const Eigen::MatrixXd& r) {
  LqrDesign d;
  d.P = solve_care(lin.A, lin.B, q, r);
  d.K = r.llt().solve(lin.B.transpose() * d.P);
  d.Q = q;
  d.R = r;
  d.x_d = target.x_d;
  d.u_d = target.u_d;
  d.riccati_residual = care_residual(lin.A, lin.B, q, r, d.P);
  d.steady_residual = target.residual;
  d.lin = lin;
  if (!is_hurwitz(lin.A - lin.B * d.K)) throw RiccatiError("design_lqr: closed loop is not Hurwitz");
  return d;
}

inline LqrDesign design_lqr(const model::ELModel& m, std::span<const double> y_d, std::span<const double> d,
                            const Eigen::MatrixXd& q, const Eigen::MatrixXd& r, double tolerance = 1e-6) {
  const LinearModel lin = LinearModel::from(m, d);
  return design_lqr(lin, steady_target(lin, to_vector(m.x_from_y(y_d, d)), tolerance), q, r);
}

/// u = u_d − K(x − x_d).
inline Eigen::VectorXd lqr_control(const LqrDesign& d, const Eigen::VectorXd& x) { return d.u_d - d.K * (x - d.x_d); }

}  // namespace exlin::control
