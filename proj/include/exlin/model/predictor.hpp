#pragma once

#include <span>
#include <vector>

#include "exlin/model/el_model.hpp"

namespace exlin::model {

/// Single-point ŷ̇ and ẑ evaluation that builds the prediction graph once and
/// rebinds its inputs on every call. The model must outlive the predictor
/// and its parameters must not be resized meanwhile.
class PointPredictor {
 public:
  explicit PointPredictor(const ELModel& m) : dims_(m.dims()) {
    const std::vector<double> v(dims_.m, 0.0), y(dims_.n, 0.0), d(dims_.l, 0.0), dd(dims_.l, 0.0);
    pred_ = m.build_prediction(graph_, ELModel::point_bindings(v, y, d, dd));
  }

  PointPredictor(const PointPredictor&) = delete;
  PointPredictor& operator=(const PointPredictor&) = delete;

  /// Evaluates at (v, y, d, ḋ); read the results with y_dot() and z().
  void evaluate(std::span<const double> v, std::span<const double> y, std::span<const double> d,
                std::span<const double> d_dot) {
    graph_.rebind(ELModel::point_bindings(v, y, d, d_dot));
  }

  std::span<const double> y_dot() const { return graph_.value(pred_.y_dot).values(); }
  std::span<const double> z() const { return graph_.value(pred_.z).values(); }
  std::span<const double> x() const { return graph_.value(pred_.x).values(); }
  std::span<const double> u() const { return graph_.value(pred_.u).values(); }

  const Dims& dims() const { return dims_; }

 private:
  Dims dims_;
  Graph graph_;
  Prediction pred_;
};

/// Φ, Ψ and Ψ⁻¹ at single points with graphs built once and rebound.
class PointMaps {
 public:
  explicit PointMaps(const ELModel& m) : dims_(m.dims()) {
    x_out_ = m.x_of(gx_, gx_.input("y"), gx_.input("d"));
    v_out_ = m.v_of(gv_, gv_.input("u"), gv_.input("y"), gv_.input("d"));
    u_out_ = m.u_of(gu_, gu_.input("v"), gu_.input("y"), gu_.input("d"));
  }
  PointMaps(const PointMaps&) = delete;
  PointMaps& operator=(const PointMaps&) = delete;

  std::vector<double> x_from_y(std::span<const double> y, std::span<const double> d) {
    return run(gx_, x_out_, {{"y", Tensor::row(y)}, {"d", Tensor::row(d)}});
  }
  std::vector<double> v_from_u(std::span<const double> u, std::span<const double> y, std::span<const double> d) {
    return run(gv_, v_out_, {{"u", Tensor::row(u)}, {"y", Tensor::row(y)}, {"d", Tensor::row(d)}});
  }
  std::vector<double> u_from_v(std::span<const double> v, std::span<const double> y, std::span<const double> d) {
    return run(gu_, u_out_, {{"v", Tensor::row(v)}, {"y", Tensor::row(y)}, {"d", Tensor::row(d)}});
  }

 private:
  static std::vector<double> run(Graph& g, Var out, const Bindings& b) {
    if (g.evaluated()) {
      g.rebind(b);
    } else {
      g.evaluate(b);
    }
    const auto vals = g.value(out).values();
    return {vals.begin(), vals.end()};
  }

  Dims dims_;
  Graph gx_, gv_, gu_;
  Var x_out_, v_out_, u_out_;
};

}  // namespace exlin::model
