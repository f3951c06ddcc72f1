#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <complex>
#include <stdexcept>
#include <string>
#include <vector>

namespace exlin::control {

class RiccatiError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Frobenius norm of PA + AᵀP − PBR⁻¹BᵀP + Q.
inline double care_residual(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const Eigen::MatrixXd& q,
                            const Eigen::MatrixXd& r, const Eigen::MatrixXd& p) {
  const Eigen::MatrixXd s = b * r.ldlt().solve(b.transpose());
  return (p * a + a.transpose() * p - p * s * p + q).norm();
}

inline bool is_hurwitz(const Eigen::MatrixXd& m) {
  if (m.rows() == 0) return true;
  const Eigen::VectorXcd ev = Eigen::EigenSolver<Eigen::MatrixXd>(m, false).eigenvalues();
  return (ev.real().array() < 0.0).all();
}

namespace detail {

/// Solves Fᵀ X + X F + C = 0 for symmetric X via the Kronecker form.
inline Eigen::MatrixXd solve_lyapunov(const Eigen::MatrixXd& f, const Eigen::MatrixXd& c) {
  const long n = f.rows();
  const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(n, n);
  Eigen::MatrixXd kron = Eigen::MatrixXd::Zero(n * n, n * n);
  // vec(FᵀX) = (I ⊗ Fᵀ) vec X,  vec(XF) = (Fᵀ ⊗ I) vec X  (column-major vec)
  for (long i = 0; i < n; ++i) {
    for (long j = 0; j < n; ++j) {
      kron.block(i * n, j * n, n, n) += id(i, j) * f.transpose();
      kron.block(i * n, j * n, n, n) += f(j, i) * id;
    }
  }
  const Eigen::VectorXd rhs = -Eigen::Map<const Eigen::VectorXd>(c.data(), n * n);
  const Eigen::VectorXd x = kron.fullPivLu().solve(rhs);
  Eigen::MatrixXd out = Eigen::Map<const Eigen::MatrixXd>(x.data(), n, n);
  return 0.5 * (out + out.transpose());
}

}  // namespace detail

/// Stabilizing solution of AᵀP + PA − PBR⁻¹BᵀP + Q = 0.
///
/// Eigendecomposition of the Hamiltonian [[A, −BR⁻¹Bᵀ], [−Q, −Aᵀ]]: the
/// stable invariant subspace [X₁; X₂] gives P = X₂X₁⁻¹, followed by Newton
/// (Kleinman) refinement passes until the residual stops improving.
inline Eigen::MatrixXd solve_care(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const Eigen::MatrixXd& q,
                                  const Eigen::MatrixXd& r) {
  const long n = a.rows();
  if (a.cols() != n || b.rows() != n || q.rows() != n || q.cols() != n || r.rows() != b.cols() ||
      r.cols() != b.cols()) {
    throw RiccatiError("solve_care: inconsistent matrix shapes");
  }
  const Eigen::LLT<Eigen::MatrixXd> r_llt(r);
  if (r_llt.info() != Eigen::Success) throw RiccatiError("solve_care: R is not positive definite");
  const Eigen::MatrixXd s = b * r_llt.solve(b.transpose());

  Eigen::MatrixXd ham(2 * n, 2 * n);
  ham << a, -s, -q, -a.transpose();
  const Eigen::EigenSolver<Eigen::MatrixXd> es(ham);
  if (es.info() != Eigen::Success) throw RiccatiError("solve_care: Hamiltonian eigendecomposition failed");
  const double scale = std::max(1.0, ham.cwiseAbs().maxCoeff());
  std::vector<long> stable;
  for (long i = 0; i < 2 * n; ++i) {
    const double re = es.eigenvalues()(i).real();
    if (std::abs(re) <= 1e-10 * scale) {
      throw RiccatiError("solve_care: Hamiltonian has an eigenvalue on the imaginary axis (no stabilizing solution)");
    }
    if (re < 0.0) stable.push_back(i);
  }
  if (static_cast<long>(stable.size()) != n) throw RiccatiError("solve_care: stable subspace has wrong dimension");
  Eigen::MatrixXcd x(2 * n, n);
  for (long j = 0; j < n; ++j) x.col(j) = es.eigenvectors().col(stable[static_cast<std::size_t>(j)]);
  const Eigen::MatrixXcd x1 = x.topRows(n), x2 = x.bottomRows(n);
  Eigen::FullPivLU<Eigen::MatrixXcd> lu(x1);
  if (!lu.isInvertible()) throw RiccatiError("solve_care: stable subspace is not a graph (system not stabilizable)");
  Eigen::MatrixXd p = (x2 * lu.inverse()).real();
  p = 0.5 * (p + p.transpose());

  double res = care_residual(a, b, q, r, p);
  for (int pass = 0; pass < 5 && res > 1e-13 * std::max(1.0, p.norm()); ++pass) {
    const Eigen::MatrixXd k = r_llt.solve(b.transpose() * p);
    const Eigen::MatrixXd f = a - b * k;
    if (!is_hurwitz(f)) break;
    const Eigen::MatrixXd next = detail::solve_lyapunov(f, q + k.transpose() * r * k);
    const double next_res = care_residual(a, b, q, r, next);
    if (!(next_res < res)) break;
    p = next;
    res = next_res;
  }
  if (!p.allFinite() || Eigen::LLT<Eigen::MatrixXd>(p).info() != Eigen::Success) {
    throw RiccatiError("solve_care: solution is not positive definite (is (A, Q^1/2) detectable?)");
  }
  if (res > 1e-8) throw RiccatiError("solve_care: residual " + std::to_string(res) + " above 1e-8");
  return p;
}

}  // namespace exlin::control
