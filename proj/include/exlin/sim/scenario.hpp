#pragma once

#include <vector>

#include "exlin/sim/closed_loop.hpp"
#include "exlin/sim/plant.hpp"

namespace exlin::sim {

/// Time window of one schedule segment and whether its target is reachable
/// inside the constraints.
struct SegmentWindow {
  double start = 0.0, end = 0.0;
  bool feasible = true;
};

/// Three-step target schedule with the input box [0, 100]³ and two output
/// ceilings, for plants with n = m = 3, l = p = 2 whose inputs are centred
/// at 50 (the teacher and the hand-written plant).
///
///  - [0, 6):   target reached at v = (70, 40, 60), d = 0;
///  - [6, 14):  target reached only at v₁ = 120, outside the box;
///  - [14, 20): target reached at v = (30, 60, 45) after d steps to (0.5, −0.5).
///
/// Every target is the settled plant output for that input, so the
/// feasible ones are exact equilibria. The run starts at rest at v = 50.
struct StandardScenario {
  ClosedLoopOptions options;  ///< controller left as lqr; set per run
  std::vector<SegmentWindow> windows;

  /// Rows in the feasible segments, the place where tracking is compared.
  bool in_feasible_segment(double t) const {
    for (const auto& w : windows)
      if (w.feasible && t >= w.start && t < w.end) return true;
    return false;
  }
};

struct ScenarioSettings {
  double horizon_scale = 1.0;  ///< stretches every segment (tests use < 1)
  double q_weight = 30.0;
  double r_weight = 1.0;
  double z1_max = 1.45, z2_max = 0.45;
  double k1 = 20.0, k2 = 0.0;  ///< class-K gains
  double a = 0.01;
  double margin = 0.0;
};

inline StandardScenario make_standard_scenario(Plant& plant, const ScenarioSettings& s = {}) {
  const Dims dims = plant.dims();
  if (!(dims == Dims{3, 3, 2, 2})) throw std::invalid_argument("standard scenario needs n = m = 3, l = p = 2");
  if (!(s.horizon_scale > 0.0)) throw std::invalid_argument("horizon_scale must be positive");
  StandardScenario sc;
  const std::vector<double> d0{0.0, 0.0}, d1{0.5, -0.5};
  const std::vector<double> rest = settle(plant, std::vector<double>{50.0, 50.0, 50.0}, d0, {0.0, 0.0, 0.0});
  auto target = [&](std::vector<double> v, const std::vector<double>& d) { return settle(plant, v, d, rest); };

  const double t1 = 6.0 * s.horizon_scale, t2 = 14.0 * s.horizon_scale, t3 = 20.0 * s.horizon_scale;
  ClosedLoopOptions& o = sc.options;
  o.horizon = t3;
  o.schedule = {{0.0, target({70.0, 40.0, 60.0}, d0), d0},
                {t1, target({120.0, 50.0, 50.0}, d0), d0},
                {t2, target({30.0, 60.0, 45.0}, d1), d1}};
  sc.windows = {{0.0, t1, true}, {t1, t2, false}, {t2, t3, true}};
  o.y0 = rest;
  o.v0 = {50.0, 50.0, 50.0};
  const long n = static_cast<long>(dims.n), m = static_cast<long>(dims.m);
  o.Q = s.q_weight * Eigen::MatrixXd::Identity(n, n);
  o.R = s.r_weight * Eigen::MatrixXd::Identity(m, m);
  control::BarrierSpec b;
  b.z_max = {s.z1_max, s.z2_max};
  b.v_max.assign(dims.m, 100.0);
  b.v_min.assign(dims.m, 0.0);
  b.alpha = {{.k1 = s.k1, .k2 = s.k2}};
  b.a = s.a;
  b.margin = s.margin;
  o.barrier = b;
  return sc;
}

}  // namespace exlin::sim
