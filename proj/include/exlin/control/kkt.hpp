#pragma once

#include <Eigen/Dense>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "exlin/control/barrier.hpp"
#include "exlin/control/lqr.hpp"

namespace exlin::control {

/// Lawson–Hanson non-negative least squares: argmin_{μ ≥ 0} ‖Mμ − b‖.
inline Eigen::VectorXd nnls(const Eigen::MatrixXd& m, const Eigen::VectorXd& b, int max_iterations = 0) {
  const long n = m.cols();
  Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
  if (n == 0) return x;
  std::vector<bool> passive(static_cast<std::size_t>(n), false);
  const double tol = 1e-12 * std::max(1.0, m.norm() * b.norm());
  const int limit = max_iterations > 0 ? max_iterations : static_cast<int>(3 * n + 30);

  auto solve_passive = [&](const std::vector<bool>& set) {
    std::vector<long> idx;
    for (long j = 0; j < n; ++j) {
      if (set[static_cast<std::size_t>(j)]) idx.push_back(j);
    }
    Eigen::MatrixXd sub(m.rows(), static_cast<long>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) sub.col(static_cast<long>(k)) = m.col(idx[k]);
    const Eigen::VectorXd zs = sub.completeOrthogonalDecomposition().solve(b);
    Eigen::VectorXd z = Eigen::VectorXd::Zero(n);
    for (std::size_t k = 0; k < idx.size(); ++k) z(idx[k]) = zs(static_cast<long>(k));
    return z;
  };

  for (int it = 0; it < limit; ++it) {
    const Eigen::VectorXd w = m.transpose() * (b - m * x);
    long enter = -1;
    for (long j = 0; j < n; ++j) {
      if (!passive[static_cast<std::size_t>(j)] && w(j) > tol && (enter < 0 || w(j) > w(enter))) enter = j;
    }
    if (enter < 0) break;
    passive[static_cast<std::size_t>(enter)] = true;
    while (true) {
      const Eigen::VectorXd z = solve_passive(passive);
      bool ok = true;
      double step = 1.0;
      for (long j = 0; j < n; ++j) {
        if (passive[static_cast<std::size_t>(j)] && z(j) <= 0.0) {
          ok = false;
          const double denom = x(j) - z(j);
          if (denom > 0.0) step = std::min(step, x(j) / denom);
        }
      }
      if (ok) {
        x = z;
        break;
      }
      x += step * (z - x);
      for (long j = 0; j < n; ++j) {
        if (passive[static_cast<std::size_t>(j)] && x(j) <= 1e-15) {
          passive[static_cast<std::size_t>(j)] = false;
          x(j) = 0.0;
        }
      }
    }
  }
  return x;
}

class NotFeasible : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct KktCheck {
  double residual = 0.0;
  Eigen::VectorXd mu;
};

/// KKT residual of min_u ‖u − k‖² s.t. h(u) ≤ 0 at a candidate u:
/// min over μ ≥ 0 of ‖[2(u − k) + (∂h/∂u)ᵀμ ; μ ∘ h]‖.
inline KktCheck kkt_check(const Eigen::VectorXd& u, const Eigen::VectorXd& k, const Eigen::VectorXd& h,
                          const Eigen::MatrixXd& dh_du, double feasibility_tol = 1e-6) {
  const long m = u.size(), r = h.size();
  if (k.size() != m || dh_du.rows() != r || dh_du.cols() != m) throw std::invalid_argument("kkt_check: shapes");
  for (long i = 0; i < r; ++i) {
    if (h(i) > feasibility_tol) {
      throw NotFeasible("point not in feasible set: barrier row " + std::to_string(i) + " = " + std::to_string(h(i)));
    }
  }
  Eigen::MatrixXd a(m + r, r);
  a.topRows(m) = dh_du.transpose();
  a.bottomRows(r) = h.asDiagonal();
  Eigen::VectorXd b = Eigen::VectorXd::Zero(m + r);
  b.head(m) = -2.0 * (u - k);
  KktCheck out;
  out.mu = nnls(a, b);
  out.residual = (a * out.mu - b).norm();
  return out;
}

/// Optimality residual of the filtered input at an equilibrium (x, u) for
/// the nominal law k(x) = u_d − K(x − x_d).
inline double equilibrium_kkt_residual(const model::ELModel& m, const LqrDesign& design, const BarrierSpec& spec,
                                       const Eigen::VectorXd& x, const Eigen::VectorXd& u, std::span<const double> d) {
  const BarrierValues b = evaluate_barriers(m, spec, x, u, d);
  return kkt_check(u, lqr_control(design, x), b.h, b.dh_du).residual;
}

}  // namespace exlin::control
