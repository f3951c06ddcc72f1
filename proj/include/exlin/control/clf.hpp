#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <span>

#include "exlin/control/lqr.hpp"
#include "exlin/model/el_model.hpp"

namespace exlin::control {

/// V = (x − x_d)ᵀ P (x − x_d) with x = Φ(y, d). In the regulation setting
/// (x_d = 0) this is Φ(y)ᵀPΦ(y).
inline double clf_value(const LqrDesign& design, const Eigen::VectorXd& x) {
  const Eigen::VectorXd e = x - design.x_d;
  return e.dot(design.P * e);
}

inline double clf_value(const model::ELModel& m, const LqrDesign& design, std::span<const double> y,
                        std::span<const double> d) {
  return clf_value(design, to_vector(m.x_from_y(y, d)));
}

/// u = −(1/r_d) L_gVᵀ with r_d = L_gV L_gVᵀ / (L_fV + √(L_fV² + (L_gV L_gVᵀ)²));
/// zero when L_gV = 0.
inline Eigen::VectorXd sontag_control(double lfv, const Eigen::VectorXd& lgv) {
  const double b2 = lgv.squaredNorm();
  if (b2 == 0.0) return Eigen::VectorXd::Zero(lgv.size());
  return -((lfv + std::sqrt(lfv * lfv + b2 * b2)) / b2) * lgv;
}

struct ClfStep {
  Eigen::VectorXd u;
  double v = 0.0;      ///< V(x)
  double v_dot = 0.0;  ///< L_fV + L_gV ũ along the model
};

/// Sontag's law around (x_d, u_d): ũ from L_fV = 2x̃ᵀP(Ax + Bu_d + c) and
/// L_gV = 2x̃ᵀPB, u = u_d + ũ.
inline ClfStep sontag_step(const LqrDesign& design, const Eigen::VectorXd& x) {
  const Eigen::VectorXd e = x - design.x_d;
  const Eigen::VectorXd pe = design.P * e;
  const double lfv = 2.0 * pe.dot(design.lin.xdot(x, design.u_d));
  const Eigen::VectorXd lgv = 2.0 * design.lin.B.transpose() * pe;
  const Eigen::VectorXd du = sontag_control(lfv, lgv);
  ClfStep s;
  s.u = design.u_d + du;
  s.v = e.dot(pe);
  s.v_dot = lfv + lgv.dot(du);
  return s;
}

}  // namespace exlin::control
