#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "exlin/model/dataset.hpp"
#include "exlin/model/el_model.hpp"
#include "exlin/model/predictor.hpp"
#include "exlin/sim/excitation.hpp"

namespace exlin::sim {

using model::Dims;

/// Ground-truth system ẏ = F(y, v, d, ḋ), z = G(y, v, d).
///
/// ḋ is part of the interface because an exactly linearizable plant with
/// d-dependent coordinates responds to the disturbance rate.
class Plant {
 public:
  virtual ~Plant() = default;
  virtual const Dims& dims() const = 0;
  virtual std::string name() const = 0;
  virtual void derivative(std::span<const double> y, std::span<const double> v, std::span<const double> d,
                          std::span<const double> d_dot, std::span<double> y_dot) = 0;
  virtual void outputs(std::span<const double> y, std::span<const double> v, std::span<const double> d,
                       std::span<double> z) = 0;
  /// Declared operating box of y; simulations abort outside 10× this box.
  virtual const std::vector<double>& y_lower() const = 0;
  virtual const std::vector<double>& y_upper() const = 0;

  bool inside_safety_box(std::span<const double> y) const {
    const auto& lo = y_lower();
    const auto& hi = y_upper();
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double mid = 0.5 * (lo[i] + hi[i]), half = 0.5 * (hi[i] - lo[i]);
      if (!std::isfinite(y[i]) || std::abs(y[i] - mid) > 10.0 * half) return false;
    }
    return true;
  }
};

/// Raised when the state leaves the safety box.
class Diverged : public std::runtime_error {
 public:
  Diverged(double t, const std::string& plant)
      : std::runtime_error("diverged: plant '" + plant + "' left its safety box at t = " + std::to_string(t)),
        t_(t) {}
  double time() const { return t_; }

 private:
  double t_;
};

/// Plant given by callables; handy for fixtures.
class FunctionPlant : public Plant {
 public:
  using Derivative = std::function<void(std::span<const double>, std::span<const double>, std::span<const double>,
                                        std::span<const double>, std::span<double>)>;
  using Outputs = std::function<void(std::span<const double>, std::span<const double>, std::span<const double>,
                                     std::span<double>)>;

  FunctionPlant(std::string name, Dims dims, Derivative f, Outputs g, std::vector<double> lo, std::vector<double> hi)
      : name_(std::move(name)), dims_(dims), f_(std::move(f)), g_(std::move(g)), lo_(std::move(lo)), hi_(std::move(hi)) {}

  const Dims& dims() const override { return dims_; }
  std::string name() const override { return name_; }
  void derivative(std::span<const double> y, std::span<const double> v, std::span<const double> d,
                  std::span<const double> d_dot, std::span<double> y_dot) override {
    f_(y, v, d, d_dot, y_dot);
  }
  void outputs(std::span<const double> y, std::span<const double> v, std::span<const double> d,
               std::span<double> z) override {
    if (g_) {
      g_(y, v, d, z);
    } else {
      for (double& zi : z) zi = 0.0;
    }
  }
  const std::vector<double>& y_lower() const override { return lo_; }
  const std::vector<double>& y_upper() const override { return hi_; }

 private:
  std::string name_;
  Dims dims_;
  Derivative f_;
  Outputs g_;
  std::vector<double> lo_, hi_;
};

struct TeacherOptions {
  Dims dims{3, 3, 2, 2};
  model::Architecture architecture{.bnn_layers = 2, .dbnn_layers = 2, .picnn_layers = 2, .hidden = 16};
  double output_scale = 0.15;
  double a_diagonal = -3.0;
  double b_diagonal = 1.0;
  double v_mean = 50.0, v_scale = 25.0;  ///< inputs live in [0, 100]
  double y_box = 5.0;                    ///< operating box [−y_box, y_box]ⁿ
  std::uint64_t seed = 1;
};

/// A randomly initialized ELModel used as the true system.
inline model::ELModel make_teacher_model(const TeacherOptions& opt) {
  model::ELModel m(opt.dims, opt.architecture);
  std::mt19937_64 rng(opt.seed);
  m.init(rng, {.output_scale = opt.output_scale, .a_diagonal = opt.a_diagonal, .b_diagonal = opt.b_diagonal});
  m.v_scaler().mean.fill(opt.v_mean);
  m.v_scaler().scale.fill(opt.v_scale);
  return m;
}

class TeacherPlant : public Plant {
 public:
  explicit TeacherPlant(model::ELModel m, double y_box = 5.0)
      : model_(std::make_unique<model::ELModel>(std::move(m))),
        predictor_(std::make_unique<model::PointPredictor>(*model_)),
        lo_(model_->dims().n, -y_box),
        hi_(model_->dims().n, y_box) {}
  explicit TeacherPlant(const TeacherOptions& opt) : TeacherPlant(make_teacher_model(opt), opt.y_box) {}

  const Dims& dims() const override { return model_->dims(); }
  std::string name() const override { return "teacher"; }
  const model::ELModel& model() const { return *model_; }

  void derivative(std::span<const double> y, std::span<const double> v, std::span<const double> d,
                  std::span<const double> d_dot, std::span<double> y_dot) override {
    predictor_->evaluate(v, y, d, d_dot);
    const auto r = predictor_->y_dot();
    std::copy(r.begin(), r.end(), y_dot.begin());
  }
  void outputs(std::span<const double> y, std::span<const double> v, std::span<const double> d,
               std::span<double> z) override {
    const std::vector<double> zero(dims().l, 0.0);
    predictor_->evaluate(v, y, d, zero);
    const auto r = predictor_->z();
    std::copy(r.begin(), r.end(), z.begin());
  }
  const std::vector<double>& y_lower() const override { return lo_; }
  const std::vector<double>& y_upper() const override { return hi_; }

 private:
  std::unique_ptr<model::ELModel> model_;
  std::unique_ptr<model::PointPredictor> predictor_;
  std::vector<double> lo_, hi_;
};

/// Hand-written smooth plant outside the model family (n = m = 3, l = p = 2):
///   ẏ₁ = −1.5y₁ + 0.04(v₁ − 50) + 0.4 tanh(y₂) + 0.3 d₁
///   ẏ₂ = −2y₂ + 0.04(v₂ − 50)(1 + 0.2 sin y₁) + 0.2 d₂
///   ẏ₃ = −y₃ + 0.03(v₃ − 50) + 0.3 y₁y₂ / (1 + y₁²) − 0.1 d₁ d₂
///   z₁ = y₁ + 0.3 y₂² + 0.005 v₁,   z₂ = exp(0.3 y₃) + 0.2 y₁
class NonlinearPlant : public Plant {
 public:
  NonlinearPlant() : dims_{3, 3, 2, 2}, lo_(3, -5.0), hi_(3, 5.0) {}
  const Dims& dims() const override { return dims_; }
  std::string name() const override { return "nonlinear"; }
  void derivative(std::span<const double> y, std::span<const double> v, std::span<const double> d,
                  std::span<const double>, std::span<double> yd) override {
    yd[0] = -1.5 * y[0] + 0.04 * (v[0] - 50.0) + 0.4 * std::tanh(y[1]) + 0.3 * d[0];
    yd[1] = -2.0 * y[1] + 0.04 * (v[1] - 50.0) * (1.0 + 0.2 * std::sin(y[0])) + 0.2 * d[1];
    yd[2] = -y[2] + 0.03 * (v[2] - 50.0) + 0.3 * y[0] * y[1] / (1.0 + y[0] * y[0]) - 0.1 * d[0] * d[1];
  }
  void outputs(std::span<const double> y, std::span<const double> v, std::span<const double>,
               std::span<double> z) override {
    z[0] = y[0] + 0.3 * y[1] * y[1] + 0.005 * v[0];
    z[1] = std::exp(0.3 * y[2]) + 0.2 * y[0];
  }
  const std::vector<double>& y_lower() const override { return lo_; }
  const std::vector<double>& y_upper() const override { return hi_; }

 private:
  Dims dims_;
  std::vector<double> lo_, hi_;
};

/// One classical RK4 step of length h with v held and d(t) given by `dist`
/// (value and rate at any time).
template <class Dist>
void rk4_step(Plant& p, std::vector<double>& y, std::span<const double> v, double t, double h, const Dist& dist) {
  const std::size_t n = y.size();
  std::vector<double> k1(n), k2(n), k3(n), k4(n), tmp(n);
  auto eval = [&](double tt, const std::vector<double>& yy, std::vector<double>& out) {
    const auto [d, dd] = dist(tt);
    p.derivative(yy, v, d, dd, out);
  };
  eval(t, y, k1);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + 0.5 * h * k1[i];
  eval(t + 0.5 * h, tmp, k2);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + 0.5 * h * k2[i];
  eval(t + 0.5 * h, tmp, k3);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + h * k3[i];
  eval(t + h, tmp, k4);
  for (std::size_t i = 0; i < n; ++i) y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
}

/// Samples every `step` seconds for `duration`: v is held at its sampled
/// value, d follows its excitation continuously, and the derivative columns
/// are the plant's own ẏ and the exact ḋ. `substeps` RK4 steps per sample.
inline model::TrajectoryDataset simulate_open_loop(Plant& p, const Excitation& v_sig, const Excitation& d_sig,
                                                   std::vector<double> y0, double duration, double step,
                                                   int substeps = 1) {
  const Dims dims = p.dims();
  if (!(step > 0.0)) throw std::invalid_argument("simulation step must be positive");
  if (!(duration >= 0.0)) throw std::invalid_argument("simulation duration must be nonnegative");
  if (substeps < 1) throw std::invalid_argument("substeps must be at least 1");
  if (y0.size() != dims.n || v_sig.channels() != dims.m || d_sig.channels() != dims.l) {
    throw std::invalid_argument("simulate_open_loop: signal or state dimensions do not match the plant");
  }
  const auto rows = static_cast<std::size_t>(std::llround(duration / step));
  model::TrajectoryDataset ds(dims, rows, step);
  auto dist = [&](double t) { return std::pair{d_sig.value(t), d_sig.rate(t)}; };
  std::vector<double> y = std::move(y0), ydot(dims.n), z(dims.p);
  const double h = step / substeps;
  for (std::size_t k = 0; k < rows; ++k) {
    const double t = static_cast<double>(k) * step;
    if (!p.inside_safety_box(y)) throw Diverged(t, p.name());
    const auto v = v_sig.value(t);
    const auto [d, dd] = dist(t);
    p.derivative(y, v, d, dd, ydot);
    p.outputs(y, v, d, z);
    ds.t[k] = t;
    for (std::size_t i = 0; i < dims.m; ++i) ds.v(k, i) = v[i];
    for (std::size_t i = 0; i < dims.l; ++i) {
      ds.d(k, i) = d[i];
      ds.d_dot(k, i) = dd[i];
    }
    for (std::size_t i = 0; i < dims.n; ++i) {
      ds.y(k, i) = y[i];
      ds.y_dot(k, i) = ydot[i];
    }
    for (std::size_t i = 0; i < dims.p; ++i) ds.z(k, i) = z[i];
    for (int s = 0; s < substeps; ++s) rk4_step(p, y, v, t + s * h, h, dist);
  }
  return ds;
}

/// Steady output under constant (v, d), found by integrating until ẏ ≈ 0.
inline std::vector<double> settle(Plant& p, std::span<const double> v, std::span<const double> d,
                                  std::vector<double> y, double tol = 1e-12, double h = 0.01, int max_steps = 200000) {
  const std::vector<double> vv(v.begin(), v.end()), dd(d.begin(), d.end()), zero(d.size(), 0.0);
  auto dist = [&](double) { return std::pair{dd, zero}; };
  std::vector<double> ydot(y.size());
  for (int k = 0; k < max_steps; ++k) {
    p.derivative(y, vv, dd, zero, ydot);
    double norm = 0.0;
    for (double g : ydot) norm = std::max(norm, std::abs(g));
    if (norm < tol) return y;
    if (!p.inside_safety_box(y)) throw Diverged(k * h, p.name());
    rk4_step(p, y, vv, k * h, h, dist);
  }
  throw std::runtime_error("settle: no steady state reached");
}

}  // namespace exlin::sim
