#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "exlin/control/cbf.hpp"
#include "exlin/control/clf.hpp"
#include "exlin/control/lqr.hpp"
#include "exlin/model/dataset.hpp"
#include "exlin/model/predictor.hpp"
#include "exlin/sim/plant.hpp"

namespace exlin::sim {

enum class ControllerKind { lqr, icbf, sontag };

inline ControllerKind parse_controller_kind(const std::string& s) {
  if (s == "lqr") return ControllerKind::lqr;
  if (s == "icbf") return ControllerKind::icbf;
  if (s == "sontag") return ControllerKind::sontag;
  throw std::invalid_argument("unknown controller '" + s + "' (lqr, icbf, sontag)");
}

inline const char* to_string(ControllerKind k) {
  switch (k) {
    case ControllerKind::lqr: return "lqr";
    case ControllerKind::icbf: return "icbf";
    case ControllerKind::sontag: return "sontag";
  }
  return "?";
}

/// From `start` on (until the next segment), track `y_d` under the constant
/// disturbance `d`.
struct ScheduleSegment {
  double start = 0.0;
  std::vector<double> y_d;
  std::vector<double> d;
};

struct ClosedLoopOptions {
  ControllerKind controller = ControllerKind::lqr;
  double horizon = 10.0;
  double control_period = 1e-3;
  int substeps = 10;  ///< RK4 steps per control period
  Eigen::MatrixXd Q, R;
  std::optional<control::BarrierSpec> barrier;  ///< required for icbf; logged for every controller when given
  std::vector<ScheduleSegment> schedule;
  std::vector<double> y0;
  std::vector<double> v0;        ///< initial held input; empty: the steady input of the first target
  double design_grid = 1e-9;     ///< (y_d, d̄) quantum for the design cache
  double target_tolerance = 1e-6;
};

/// One row per control tick; vectors sized by the model dimensions.
struct TraceRow {
  double t = 0.0;
  std::vector<double> y_d, d, y, x, u, lambda, v, z, h;
  double xdot_norm = 0.0;   ///< ‖A x + B u + c‖ in the model
  double lyapunov = 0.0;    ///< (x − x_d)ᵀ P (x − x_d)
  double lyapunov_rate = 0.0;  ///< model V̇ (Sontag runs)
  int qp_iterations = 0;
  double qp_kkt_residual = 0.0;  ///< optimality certificate of the filter QP
};

struct SimulationTrace {
  std::string plant, controller;
  model::Dims dims;
  std::size_t barrier_rows = 0;
  double control_period = 0.0;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<TraceRow> rows;

  std::vector<std::string> columns() const {
    std::vector<std::string> c{"t"};
    auto add = [&](const char* base, std::size_t k) {
      for (std::size_t i = 1; i <= k; ++i) c.push_back(base + std::to_string(i));
    };
    add("yd", dims.n);
    add("d", dims.l);
    add("y", dims.n);
    add("x", dims.n);
    add("u", dims.m);
    add("lambda", dims.m);
    add("v", dims.m);
    add("z", dims.p);
    add("h", barrier_rows);
    c.insert(c.end(), {"xdot_norm", "V", "Vdot", "qp_iterations", "qp_kkt_residual"});
    return c;
  }

  double max_barrier() const {
    double w = -std::numeric_limits<double>::infinity();
    for (const auto& r : rows)
      for (double h : r.h) w = std::max(w, h);
    return w;
  }

  /// Root-mean-square of y − y_d over rows with t in [t0, t1).
  double tracking_rmse(double t0 = 0.0, double t1 = std::numeric_limits<double>::infinity()) const {
    double s = 0.0;
    std::size_t k = 0;
    for (const auto& r : rows) {
      if (r.t < t0 || r.t >= t1) continue;
      for (std::size_t i = 0; i < r.y.size(); ++i) s += (r.y[i] - r.y_d[i]) * (r.y[i] - r.y_d[i]);
      ++k;
    }
    return k == 0 ? 0.0 : std::sqrt(s / static_cast<double>(k * dims.n));
  }

  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write trace '" + path + "'");
    out << "# closed-loop trace: plant=" << plant << " controller=" << controller << " period=" << model::format_double(control_period)
        << " seed=" << seed << " config_hash=" << config_hash << "\n";
    out << "# columns: time, target, disturbance, measured y, model x, internal u, lambda, applied v, z, barrier rows h "
           "(<= 0 is safe), model |xdot|, Lyapunov V and its rate, QP iterations and KKT residual\n";
    const auto cols = columns();
    for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
    out << "\n";
    for (const auto& r : rows) {
      out << model::format_double(r.t);
      auto put = [&](const std::vector<double>& v, std::size_t k) {
        for (std::size_t i = 0; i < k; ++i) out << ',' << model::format_double(i < v.size() ? v[i] : 0.0);
      };
      put(r.y_d, dims.n);
      put(r.d, dims.l);
      put(r.y, dims.n);
      put(r.x, dims.n);
      put(r.u, dims.m);
      put(r.lambda, dims.m);
      put(r.v, dims.m);
      put(r.z, dims.p);
      put(r.h, barrier_rows);
      out << ',' << model::format_double(r.xdot_norm) << ',' << model::format_double(r.lyapunov) << ','
          << model::format_double(r.lyapunov_rate) << ',' << r.qp_iterations << ','
          << model::format_double(r.qp_kkt_residual) << "\n";
    }
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
  }
};

/// A controller or plant failure, carrying the trace up to that point.
class SimulationError : public std::runtime_error {
 public:
  SimulationError(const std::string& what, SimulationTrace partial)
      : std::runtime_error(what), partial_(std::move(partial)) {}
  const SimulationTrace& partial() const { return partial_; }

 private:
  SimulationTrace partial_;
};

namespace detail {

inline Eigen::VectorXd vec(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<long>(v.size()));
}
inline std::vector<double> stdv(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

/// LQR designs keyed by the quantized (y_d, d̄).
class DesignCache {
 public:
  DesignCache(const model::ELModel& m, const ClosedLoopOptions& opt) : m_(m), opt_(opt) {}

  const control::LqrDesign& get(const std::vector<double>& y_d, const std::vector<double>& d) {
    std::vector<long long> key;
    for (double v : y_d) key.push_back(std::llround(v / opt_.design_grid));
    for (double v : d) key.push_back(std::llround(v / opt_.design_grid));
    auto it = cache_.find(key);
    if (it == cache_.end()) {
      it = cache_.emplace(key, control::design_lqr(m_, y_d, d, opt_.Q, opt_.R, opt_.target_tolerance)).first;
    }
    return it->second;
  }

 private:
  const model::ELModel& m_;
  const ClosedLoopOptions& opt_;
  std::map<std::vector<long long>, control::LqrDesign> cache_;
};

}  // namespace detail

/// Runs plant and controller at the control period: measure y, map to
/// x = Φ(y, d̄), compute the controller's u, map to v = Ψ(u, y, d̄), hold v
/// while the plant advances by `substeps` RK4 steps. The disturbance is the
/// schedule's piecewise-constant d (ḋ = 0 inside segments).
inline SimulationTrace simulate_closed_loop(Plant& plant, const model::ELModel& m, const ClosedLoopOptions& opt) {
  const model::Dims dims = m.dims();
  const model::Dims pd = plant.dims();
  if (pd.n != dims.n || pd.m != dims.m || pd.l != dims.l || pd.p != dims.p) {
    throw std::invalid_argument("plant and model dimensions differ");
  }
  if (!(opt.control_period > 0.0) || opt.substeps < 1 || !(opt.horizon >= 0.0)) {
    throw std::invalid_argument("closed loop: bad period, substeps or horizon");
  }
  if (opt.schedule.empty() || opt.schedule.front().start > 0.0) {
    throw std::invalid_argument("closed loop: schedule must start at t = 0");
  }
  for (const auto& s : opt.schedule) {
    if (s.y_d.size() != dims.n || s.d.size() != dims.l) throw std::invalid_argument("schedule entry has wrong size");
  }
  if (opt.y0.size() != dims.n) throw std::invalid_argument("closed loop: y0 has wrong size");
  if (opt.controller == ControllerKind::icbf && !opt.barrier) {
    throw std::invalid_argument("icbf controller needs a barrier specification");
  }

  SimulationTrace trace;
  trace.plant = plant.name();
  trace.controller = to_string(opt.controller);
  trace.dims = dims;
  trace.barrier_rows = opt.barrier ? opt.barrier->rows() : 0;
  trace.control_period = opt.control_period;

  detail::DesignCache designs(m, opt);
  model::PointMaps maps(m);
  std::optional<control::BarrierEvaluator> barriers;
  if (opt.barrier) barriers.emplace(m, *opt.barrier);
  qp::QpSolver solver;

  auto segment_at = [&](double t) -> const ScheduleSegment& {
    const ScheduleSegment* s = &opt.schedule.front();
    for (const auto& seg : opt.schedule) {
      if (seg.start <= t + 1e-12) s = &seg;
    }
    return *s;
  };

  const auto steps = static_cast<std::size_t>(std::llround(opt.horizon / opt.control_period));
  std::vector<double> y = opt.y0;
  std::vector<double> d_prev;
  std::vector<double> v_held = opt.v0;
  control::ControllerState state;
  const double h = opt.control_period / opt.substeps;
  std::vector<double> z(dims.p);

  try {
    for (std::size_t k = 0; k < steps; ++k) {
      const double t = static_cast<double>(k) * opt.control_period;
      if (!plant.inside_safety_box(y)) throw Diverged(t, plant.name());
      const ScheduleSegment& seg = segment_at(t);
      const std::vector<double>& d = seg.d;
      const control::LqrDesign& design = designs.get(seg.y_d, d);
      const Eigen::VectorXd x = detail::vec(maps.x_from_y(y, d));

      TraceRow row;
      row.t = t;
      row.y_d = seg.y_d;
      row.d = d;
      row.y = y;
      row.x = detail::stdv(x);
      Eigen::VectorXd u;
      std::vector<double> v;
      switch (opt.controller) {
        case ControllerKind::lqr:
          u = control::lqr_control(design, x);
          break;
        case ControllerKind::sontag: {
          const control::ClfStep s = control::sontag_step(design, x);
          u = s.u;
          row.lyapunov_rate = s.v_dot;
          break;
        }
        case ControllerKind::icbf: {
          if (k == 0) {
            state.u = v_held.empty() ? design.u_d : detail::vec(maps.u_from_v(v_held, y, d));
          } else if (d != d_prev) {
            // Keep the applied input continuous across a disturbance change.
            state.u = detail::vec(maps.u_from_v(v_held, y, d));
          }
          u = state.u;
          const control::IcbfStep s = control::icbf_step(*barriers, state, x, d, design, opt.control_period, &solver);
          v = detail::stdv(s.v);
          row.lambda = detail::stdv(s.lambda);
          row.h = detail::stdv(s.h);
          row.qp_iterations = s.qp_iterations;
          row.qp_kkt_residual = s.kkt_residual;
          break;
        }
      }
      if (opt.controller != ControllerKind::icbf) {
        if (barriers) {
          const control::BarrierValues b = barriers->evaluate(x, u, d, false);
          row.h = detail::stdv(b.h);
          v = detail::stdv(b.v);
        } else {
          v = maps.v_from_u(std::vector<double>(u.data(), u.data() + u.size()), y, d);
        }
        row.lambda.assign(dims.m, 0.0);
      }
      row.u = detail::stdv(u);
      row.v = v;
      row.xdot_norm = design.lin.xdot(x, u).norm();
      row.lyapunov = control::clf_value(design, x);
      plant.outputs(y, v, d, z);
      row.z = z;
      trace.rows.push_back(std::move(row));

      const std::vector<double> zero(dims.l, 0.0);
      auto dist = [&](double) { return std::pair{d, zero}; };
      for (int s = 0; s < opt.substeps; ++s) rk4_step(plant, y, v, t + s * h, h, dist);
      v_held = v;
      d_prev = d;
    }
  } catch (const std::exception& e) {
    throw SimulationError(std::string("closed-loop simulation failed: ") + e.what(), std::move(trace));
  }
  return trace;
}

}  // namespace exlin::sim
