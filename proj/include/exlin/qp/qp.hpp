#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace exlin::qp {

/// min ½ λᵀHλ + qᵀλ  subject to  Gλ ≤ w, with H symmetric positive definite.
struct QpProblem {
  Eigen::MatrixXd H;
  Eigen::VectorXd q;
  Eigen::MatrixXd G;  ///< r x m (r may be 0)
  Eigen::VectorXd w;

  std::size_t variables() const { return static_cast<std::size_t>(q.size()); }
  std::size_t rows() const { return static_cast<std::size_t>(w.size()); }
};

enum class QpStatus { solved, infeasible };

struct QpSolution {
  QpStatus status = QpStatus::solved;
  Eigen::VectorXd lambda;  ///< primal solution
  Eigen::VectorXd mu;      ///< multipliers, one per row, ≥ 0
  std::vector<int> active; ///< active rows at the solution (ascending)
  int iterations = 0;      ///< constraint additions and drops
  double kkt_residual = 0.0;
  /// Infeasible only: y ≥ 0 with Gᵀy = 0 and wᵀy < 0, and the row whose
  /// addition exposed it.
  Eigen::VectorXd farkas;
  int violated_row = -1;
};

class QpError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Largest of stationarity ‖Hλ + q + Gᵀμ‖∞, primal violation, dual
/// violation and complementarity |μᵢ(Gλ − w)ᵢ|.
inline double kkt_residual(const QpProblem& p, const Eigen::VectorXd& lambda, const Eigen::VectorXd& mu) {
  double res = (p.H * lambda + p.q + p.G.transpose() * mu).cwiseAbs().maxCoeff();
  if (p.rows() > 0) {
    const Eigen::VectorXd slack = p.G * lambda - p.w;
    for (long i = 0; i < slack.size(); ++i) {
      res = std::max({res, slack(i), -mu(i), std::abs(mu(i) * slack(i))});
    }
  }
  return res;
}

/// Dual active-set solver (Goldfarb–Idnani). Starts from the unconstrained
/// minimizer (or a warm-start active set), repeatedly adds the most violated
/// row (lowest index on ties) and drops rows whose multiplier would turn
/// negative. Strong convexity makes the result unique. Keeps the last active
/// set for warm starts.
class QpSolver {
 public:
  struct Options {
    double feasibility_tol = 1e-12;  ///< relative violation accepted as satisfied
    int max_iterations = 0;          ///< 0: 10·(m + r) + 50
  };

  QpSolver() = default;
  explicit QpSolver(Options opt) : opt_(opt) {}

  /// Solve from scratch (warm-start state is still updated).
  QpSolution solve(const QpProblem& p) { return solve_from(p, {}); }

  /// Solve starting from the active set of the previous call.
  QpSolution solve_warm(const QpProblem& p) { return solve_from(p, last_active_); }

  /// Solve starting from a caller-supplied active set.
  QpSolution solve_from(const QpProblem& p, std::span<const int> start) {
    validate(p);
    const long m = static_cast<long>(p.variables());
    const long r = static_cast<long>(p.rows());
    const Eigen::LLT<Eigen::MatrixXd> llt(p.H);
    if (llt.info() != Eigen::Success) throw QpError("QP Hessian is not positive definite");

    QpSolution sol;
    sol.mu = Eigen::VectorXd::Zero(r);
    std::vector<int> active;
    Eigen::VectorXd x;
    Eigen::VectorXd u;  // multipliers of `active`

    // Dual-feasible start: equality-constrained optimum on the warm set,
    // shedding rows with negative multipliers.
    for (int i : start) {
      if (i >= 0 && i < r && std::find(active.begin(), active.end(), i) == active.end()) active.push_back(i);
    }
    while (true) {
      active = independent_subset(p, llt, active);
      equality_solve(p, llt, active, x, u);
      long worst = -1;
      for (long j = 0; j < u.size(); ++j) {
        if (u(j) < 0.0 && (worst < 0 || u(j) < u(worst))) worst = j;
      }
      if (worst < 0) break;
      active.erase(active.begin() + worst);
    }

    const int limit = opt_.max_iterations > 0 ? opt_.max_iterations : static_cast<int>(10 * (m + r) + 50);
    int iterations = 0;
    while (true) {
      // Most violated inactive row.
      int p_row = -1;
      double worst = 0.0;
      for (long i = 0; i < r; ++i) {
        if (std::find(active.begin(), active.end(), static_cast<int>(i)) != active.end()) continue;
        const double viol = p.G.row(i).dot(x) - p.w(i);
        if (viol > tolerance(p, i, x) && viol > worst) {
          worst = viol;
          p_row = static_cast<int>(i);
        }
      }
      if (p_row < 0) break;

      const Eigen::VectorXd a_p = p.G.row(p_row).transpose();
      double u_p = 0.0;
      while (true) {
        if (++iterations > limit) throw QpError("QP active-set iteration limit reached");
        const long k = static_cast<long>(active.size());
        const Eigen::MatrixXd n_mat = normals(p, active);
        const Eigen::VectorXd hinv_a = llt.solve(a_p);
        Eigen::VectorXd rdir = Eigen::VectorXd::Zero(k);
        if (k > 0) {
          const Eigen::MatrixXd hinv_n = llt.solve(n_mat);
          const Eigen::MatrixXd mmat = n_mat.transpose() * hinv_n;
          rdir = -mmat.ldlt().solve(n_mat.transpose() * hinv_a);
        }
        const Eigen::VectorXd z = -(hinv_a + (k > 0 ? Eigen::VectorXd(llt.solve(n_mat * rdir)) : Eigen::VectorXd::Zero(m)));
        const double curvature = -a_p.dot(z);  // = zᵀHz ≥ 0
        const bool dependent = curvature <= 1e-12 * std::max(a_p.dot(hinv_a), 1e-300);

        // Partial step: first active multiplier to reach zero.
        double t1 = std::numeric_limits<double>::infinity();
        long drop = -1;
        for (long j = 0; j < k; ++j) {
          if (rdir(j) < 0.0) {
            const double tj = u(j) / -rdir(j);
            if (tj < t1) {
              t1 = tj;
              drop = j;
            }
          }
        }
        const double viol = a_p.dot(x) - p.w(p_row);
        const double t2 = dependent ? std::numeric_limits<double>::infinity() : viol / curvature;

        if (dependent && drop < 0) {
          // a_p + N r = 0 with r ≥ 0: Farkas certificate.
          sol.status = QpStatus::infeasible;
          sol.violated_row = p_row;
          sol.farkas = Eigen::VectorXd::Zero(r);
          sol.farkas(p_row) = 1.0;
          for (long j = 0; j < k; ++j) sol.farkas(active[j]) = std::max(0.0, rdir(j));
          sol.lambda = x;
          sol.active = active;
          sol.iterations = iterations;
          sol.kkt_residual = std::numeric_limits<double>::infinity();
          last_active_ = active;
          return sol;
        }
        if (t2 <= t1) {
          x += t2 * z;
          u += t2 * rdir;
          u_p += t2;
          active.push_back(p_row);
          Eigen::VectorXd grown(k + 1);
          grown << u, u_p;
          u = grown;
          break;
        }
        // Partial step, then drop the blocking row and retry.
        if (!dependent) x += t1 * z;
        u += t1 * rdir;
        u_p += t1;
        u(drop) = 0.0;
        active.erase(active.begin() + drop);
        Eigen::VectorXd shrunk(k - 1);
        for (long j = 0, c = 0; j < k; ++j) {
          if (j != drop) shrunk(c++) = u(j);
        }
        u = shrunk;
        // Re-anchor the primal point on the reduced active set with the
        // partially grown multiplier of p_row.
        x = -llt.solve(p.q + a_p * u_p + normals(p, active) * u);
      }
    }

    // Polish on the final active set.
    std::sort(active.begin(), active.end());
    equality_solve(p, llt, active, x, u);
    sol.lambda = x;
    for (std::size_t j = 0; j < active.size(); ++j) sol.mu(active[j]) = std::max(0.0, u(static_cast<long>(j)));
    sol.active = active;
    sol.iterations = iterations;
    sol.kkt_residual = kkt_residual(p, sol.lambda, sol.mu);
    last_active_ = active;
    return sol;
  }

  const std::vector<int>& last_active() const { return last_active_; }

 private:
  static void validate(const QpProblem& p) {
    const long m = p.q.size();
    if (m == 0) throw QpError("QP with no variables");
    if (p.H.rows() != m || p.H.cols() != m) throw QpError("QP Hessian shape mismatch");
    if (p.G.rows() != p.w.size() || (p.w.size() > 0 && p.G.cols() != m)) throw QpError("QP constraint shape mismatch");
    if (!p.H.allFinite() || !p.q.allFinite() || !p.G.allFinite() || !p.w.allFinite()) {
      throw QpError("QP data contains non-finite values");
    }
    if ((p.H - p.H.transpose()).cwiseAbs().maxCoeff() > 1e-10 * (1.0 + p.H.cwiseAbs().maxCoeff())) {
      throw QpError("QP Hessian is not symmetric");
    }
  }

  double tolerance(const QpProblem& p, long i, const Eigen::VectorXd& x) const {
    return opt_.feasibility_tol * (1.0 + std::abs(p.w(i)) + p.G.row(i).cwiseAbs().dot(x.cwiseAbs()));
  }

  static Eigen::MatrixXd normals(const QpProblem& p, const std::vector<int>& active) {
    Eigen::MatrixXd n(p.q.size(), static_cast<long>(active.size()));
    for (std::size_t j = 0; j < active.size(); ++j) n.col(static_cast<long>(j)) = p.G.row(active[j]).transpose();
    return n;
  }

  /// Keeps rows in order while their normals stay linearly independent.
  static std::vector<int> independent_subset(const QpProblem& p, const Eigen::LLT<Eigen::MatrixXd>&,
                                             const std::vector<int>& rows) {
    std::vector<int> kept;
    for (int i : rows) {
      std::vector<int> trial = kept;
      trial.push_back(i);
      const Eigen::MatrixXd n = normals(p, trial);
      Eigen::JacobiSVD<Eigen::MatrixXd> svd(n);
      const auto& s = svd.singularValues();
      if (s.size() == static_cast<long>(trial.size()) && s(s.size() - 1) > 1e-10 * std::max(s(0), 1e-300)) {
        kept = std::move(trial);
      }
    }
    return kept;
  }

  /// Optimum with the active rows as equalities: λ = −H⁻¹(q + Nμ),
  /// (NᵀH⁻¹N) μ = −(w_A + NᵀH⁻¹q).
  static void equality_solve(const QpProblem& p, const Eigen::LLT<Eigen::MatrixXd>& llt, const std::vector<int>& active,
                             Eigen::VectorXd& x, Eigen::VectorXd& u) {
    const Eigen::VectorXd hinv_q = llt.solve(p.q);
    if (active.empty()) {
      x = -hinv_q;
      u.resize(0);
      return;
    }
    const Eigen::MatrixXd n = normals(p, active);
    const Eigen::MatrixXd hinv_n = llt.solve(n);
    Eigen::VectorXd w_a(static_cast<long>(active.size()));
    for (std::size_t j = 0; j < active.size(); ++j) w_a(static_cast<long>(j)) = p.w(active[j]);
    u = -(n.transpose() * hinv_n).ldlt().solve(w_a + n.transpose() * hinv_q);
    x = -(hinv_q + hinv_n * u);
  }

  Options opt_;
  std::vector<int> last_active_;
};

/// One-shot convenience wrapper.
inline QpSolution solve(const QpProblem& p) { return QpSolver().solve(p); }

}  // namespace exlin::qp
