#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "exlin/model/dataset.hpp"
#include "exlin/model/el_model.hpp"

namespace exlin::model {

/// Throws unless `q` is symmetric positive definite.
inline void check_weight_matrix(const Eigen::MatrixXd& q, std::size_t expected) {
  if (q.rows() != static_cast<long>(expected) || q.cols() != static_cast<long>(expected)) {
    throw std::invalid_argument("Q_e must be " + std::to_string(expected) + "x" + std::to_string(expected));
  }
  if (!q.allFinite() || (q - q.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + q.cwiseAbs().maxCoeff())) {
    throw std::invalid_argument("Q_e must be symmetric");
  }
  if (Eigen::LLT<Eigen::MatrixXd>(q).info() != Eigen::Success) {
    throw std::invalid_argument("Q_e must be positive definite (Cholesky failed)");
  }
}

/// diag(1/var) over the target columns [ẏ, z]; constant channels get weight 1.
inline Eigen::MatrixXd default_weight_matrix(const TrajectoryDataset& data) {
  const std::size_t n = data.dims.n, p = data.dims.p;
  Eigen::MatrixXd q = Eigen::MatrixXd::Identity(static_cast<long>(n + p), static_cast<long>(n + p));
  auto fill = [&](const Tensor& x, std::size_t offset) {
    const Scaler s = Scaler::fit(x);
    for (std::size_t j = 0; j < x.cols(); ++j) q(static_cast<long>(offset + j), static_cast<long>(offset + j)) = 1.0 / (s.scale[j] * s.scale[j]);
  };
  fill(data.y_dot, 0);
  fill(data.z, n);
  return q;
}

inline Tensor to_tensor(const Eigen::MatrixXd& m) {
  Tensor t(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
  for (long i = 0; i < m.rows(); ++i)
    for (long j = 0; j < m.cols(); ++j) t(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = m(i, j);
  return t;
}

/// Appends the batch loss (1/N) Σ eᵢᵀ Q_e eᵢ, e = [ŷ̇ − ẏ, ẑ − z], to a
/// prediction graph. Targets are the inputs "y_dot" and "z".
inline Var build_loss(Graph& g, const Prediction& p, const Eigen::MatrixXd& q_e) {
  Var e = g.concat({g.sub(p.y_dot, g.input("y_dot")), g.sub(p.z, g.input("z"))});
  const double rows = static_cast<double>(g.value(e).rows());
  if (rows == 0) throw std::invalid_argument("loss of an empty batch");
  Var quad = g.mul(g.matmul(e, g.constant(to_tensor(q_e))), e);
  Var loss = g.scale(g.sum(quad), 1.0 / rows);
  g.set_label(loss, "loss");
  return loss;
}

/// Loss of `model` on every row of `data`.
inline double loss(const ELModel& model, const TrajectoryDataset& data, const Eigen::MatrixXd& q_e) {
  check_weight_matrix(q_e, data.dims.n + data.dims.p);
  Graph g;
  const Prediction p = model.build_prediction(g, data.bindings());
  return g.value(build_loss(g, p, q_e))[0];
}

/// Loss and parameter gradients (keyed by parameter name) on `data`.
inline std::pair<double, std::map<std::string, Tensor>> loss_and_gradient(const ELModel& model,
                                                                          const TrajectoryDataset& data,
                                                                          const Eigen::MatrixXd& q_e) {
  Graph g;
  const Prediction p = model.build_prediction(g, data.bindings());
  Var l = build_loss(g, p, q_e);
  auto grads = g.gradient(l);
  return {g.value(l)[0], std::move(grads)};
}

struct BatchPrediction {
  Tensor y_dot, z;
};

/// ŷ̇ and ẑ for every row of `data`, evaluated in chunks.
inline BatchPrediction predict(const ELModel& model, const TrajectoryDataset& data, std::size_t chunk = 2048) {
  BatchPrediction out{Tensor(data.size(), data.dims.n), Tensor(data.size(), data.dims.p)};
  for (std::size_t lo = 0; lo < data.size(); lo += chunk) {
    std::vector<std::size_t> rows;
    for (std::size_t i = lo; i < std::min(data.size(), lo + chunk); ++i) rows.push_back(i);
    Graph g;
    const Prediction p = model.build_prediction(g, data.bindings(rows));
    const Tensor& yd = g.value(p.y_dot);
    const Tensor& z = g.value(p.z);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t j = 0; j < data.dims.n; ++j) out.y_dot(lo + i, j) = yd(i, j);
      for (std::size_t j = 0; j < data.dims.p; ++j) out.z(lo + i, j) = z(i, j);
    }
  }
  return out;
}

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 128;
  double learning_rate = 3e-3;
  double lr_decay = 0.98;  ///< multiplicative per epoch
  double clip_norm = 10.0;
  double validation_fraction = 0.2;
  std::size_t validation_blocks = 10;  ///< contiguous blocks the rows are cut into
  std::uint64_t seed = 0;
  std::optional<Eigen::MatrixXd> q_e;  ///< default: diag(1/var) of the targets
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double validation_loss = 0.0;
  double learning_rate = 0.0;
};

struct TrainResult {
  ELModel model;  ///< parameters with the lowest validation loss
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  Eigen::MatrixXd q_e;
  std::vector<std::size_t> train_rows, validation_rows;
};

/// Raised when the loss stops being finite; carries the last finite model.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, ELModel last_valid, std::vector<EpochRecord> history)
      : std::runtime_error(what), last_valid_(std::move(last_valid)), history_(std::move(history)) {}
  const ELModel& last_valid() const { return last_valid_; }
  const std::vector<EpochRecord>& history() const { return history_; }

 private:
  ELModel last_valid_;
  std::vector<EpochRecord> history_;
};

/// Splits row indices into contiguous blocks and holds out an evenly spread
/// `fraction` of them for validation.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_rows(std::size_t rows, double fraction,
                                                                                std::size_t blocks) {
  std::vector<std::size_t> train, validation;
  blocks = std::max<std::size_t>(1, std::min(blocks, rows));
  for (std::size_t b = 0; b < blocks; ++b) {
    const bool held = std::floor(static_cast<double>(b + 1) * fraction + 1e-12) > std::floor(static_cast<double>(b) * fraction + 1e-12);
    const std::size_t lo = b * rows / blocks, hi = (b + 1) * rows / blocks;
    for (std::size_t i = lo; i < hi; ++i) (held ? validation : train).push_back(i);
  }
  return {train, validation};
}

namespace detail {

/// Loss graph for one batch size, rebound for every batch of that size.
struct LossGraph {
  Graph graph;
  Var loss;
};

class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ELModel& model, const std::map<std::string, Tensor>& grads, double lr, double clip_norm) {
    double norm2 = 0.0;
    for (const auto& [name, g] : grads)
      for (double v : g.values()) norm2 += v * v;
    const double norm = std::sqrt(norm2);
    const double clip = norm > clip_norm ? clip_norm / norm : 1.0;
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    model.for_each_param([&](const std::string& name, Tensor& w) {
      auto it = grads.find(name);
      if (it == grads.end()) return;
      auto [m_it, fresh] = m_.try_emplace(name, w.rows(), w.cols(), 0.0);
      auto [v_it, fresh2] = v_.try_emplace(name, w.rows(), w.cols(), 0.0);
      (void)fresh;
      (void)fresh2;
      Tensor& m = m_it->second;
      Tensor& v = v_it->second;
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double g = it->second[i] * clip;
        m[i] = b1_ * m[i] + (1.0 - b1_) * g;
        v[i] = b2_ * v[i] + (1.0 - b2_) * g * g;
        w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
    });
  }

 private:
  double b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

inline double evaluate_loss(const ELModel& model, const TrajectoryDataset& data, const std::vector<std::size_t>& rows,
                            const Eigen::MatrixXd& q_e, std::size_t chunk = 2048) {
  double total = 0.0;
  for (std::size_t lo = 0; lo < rows.size(); lo += chunk) {
    const std::vector<std::size_t> part(rows.begin() + static_cast<long>(lo),
                                        rows.begin() + static_cast<long>(std::min(rows.size(), lo + chunk)));
    Graph g;
    const Prediction p = model.build_prediction(g, data.bindings(part));
    total += g.value(build_loss(g, p, q_e))[0] * static_cast<double>(part.size());
  }
  return rows.empty() ? 0.0 : total / static_cast<double>(rows.size());
}

}  // namespace detail

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Minimizes the Q_e-weighted prediction error with Adam and global-norm
/// clipping. Fully deterministic given (model, data, cfg). Returns the
/// parameters of the epoch with the lowest validation loss (training loss
/// when there is no validation split).
inline TrainResult train(ELModel model, const TrajectoryDataset& data, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
  if (data.dims != model.dims()) throw std::invalid_argument("train: dataset and model dimensions differ");
  if (cfg.batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
  if (cfg.validation_fraction < 0.0 || cfg.validation_fraction >= 1.0) {
    throw std::invalid_argument("train: validation_fraction must be in [0, 1)");
  }
  TrainResult result;
  auto [train_rows, val_rows] = split_rows(data.size(), cfg.validation_fraction, cfg.validation_blocks);
  result.train_rows = train_rows;
  result.validation_rows = val_rows;
  result.q_e = cfg.q_e ? *cfg.q_e : default_weight_matrix(data.subset(train_rows));
  check_weight_matrix(result.q_e, data.dims.n + data.dims.p);
  result.model = model;
  if (cfg.epochs == 0) return result;
  if (train_rows.empty()) throw std::invalid_argument("train: no training rows");

  std::mt19937_64 rng(cfg.seed);
  detail::Adam adam;
  std::map<std::size_t, std::unique_ptr<detail::LossGraph>> graphs;
  double best = std::numeric_limits<double>::infinity();
  ELModel last_valid = model;
  double lr = cfg.learning_rate;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = train_rows;
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    try {
      for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch_size) {
        const std::vector<std::size_t> batch(order.begin() + static_cast<long>(lo),
                                             order.begin() + static_cast<long>(std::min(order.size(), lo + cfg.batch_size)));
        const Bindings b = data.bindings(batch);
        auto& slot = graphs[batch.size()];
        if (!slot) {
          slot = std::make_unique<detail::LossGraph>();
          const Prediction p = model.build_prediction(slot->graph, b);
          slot->loss = build_loss(slot->graph, p, result.q_e);
        } else {
          slot->graph.evaluate(b);
        }
        const double l = slot->graph.value(slot->loss)[0];
        if (!std::isfinite(l)) throw ad::Error("non-finite loss");
        epoch_loss += l * static_cast<double>(batch.size());
        adam.step(model, slot->graph.gradient(slot->loss), lr, cfg.clip_norm);
      }
      epoch_loss /= static_cast<double>(order.size());
      EpochRecord rec{epoch, epoch_loss, epoch_loss, lr};
      if (!val_rows.empty()) rec.validation_loss = detail::evaluate_loss(model, data, val_rows, result.q_e);
      if (!std::isfinite(rec.validation_loss)) throw ad::Error("non-finite validation loss");
      result.history.push_back(rec);
      if (on_epoch) on_epoch(rec);
      last_valid = model;
      if (rec.validation_loss < best) {
        best = rec.validation_loss;
        result.best_epoch = epoch;
        result.model = model;
      }
    } catch (const ad::Error& e) {
      throw TrainingDiverged("training diverged in epoch " + std::to_string(epoch) + ": " + e.what(), last_valid,
                             result.history);
    }
    lr *= cfg.lr_decay;
  }
  return result;
}

}  // namespace exlin::model
