#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "exlin/cli/config.hpp"
#include "exlin/control/care.hpp"
#include "exlin/control/kkt.hpp"
#include "exlin/control/lqr.hpp"
#include "exlin/lie/expression.hpp"
#include "exlin/lie/lie.hpp"
#include "exlin/model/dataset.hpp"
#include "exlin/model/predictor.hpp"
#include "exlin/model/serialize.hpp"
#include "exlin/model/train.hpp"
#include "exlin/sim/closed_loop.hpp"
#include "exlin/sim/excitation.hpp"
#include "exlin/sim/metrics.hpp"
#include "exlin/sim/plant.hpp"
#include "exlin/sim/scenario.hpp"

namespace exlin::cli {

namespace fs = std::filesystem;
using model::Dims;
using model::Tensor;

/// Exit codes: success, runtime failure (I/O, numerics), bad configuration,
/// and outputs written but a declared check failed.
enum ExitCode : int { kOk = 0, kRuntimeError = 1, kConfigError = 2, kCheckFailed = 3 };

/// What every command receives: the effective configuration (seed already
/// resolved, output directory removed), the seed, the output directory and
/// a stream for the human-readable report.
struct Run {
  json config;
  std::uint64_t seed = 0;
  fs::path out;
  std::ostream* log = &std::cout;
  std::string hash;
};

namespace detail {

inline std::string fmt(double x, const char* spec = "%.6g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, x);
  return buf;
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write '" + p.string() + "'");
  f << text;
  if (!f) throw std::runtime_error("write failed for '" + p.string() + "'");
}

/// Scalar s → s·I, list → diagonal, list of rows → full matrix.
inline Eigen::MatrixXd weight_matrix(const json& j, long n, const std::string& name) {
  if (j.is_number()) return j.get<double>() * Eigen::MatrixXd::Identity(n, n);
  if (!j.is_array() || static_cast<long>(j.size()) != n) {
    throw ConfigError("'" + name + "' must be a number, a list of " + std::to_string(n) + " diagonal entries or a " +
                      std::to_string(n) + "x" + std::to_string(n) + " matrix");
  }
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, n);
  for (long i = 0; i < n; ++i) {
    const json& row = j[static_cast<std::size_t>(i)];
    if (row.is_number()) {
      m(i, i) = row.get<double>();
    } else if (row.is_array() && static_cast<long>(row.size()) == n) {
      for (long k = 0; k < n; ++k) m(i, k) = row[static_cast<std::size_t>(k)].get<double>();
    } else {
      throw ConfigError("'" + name + "' has a malformed row");
    }
  }
  return m;
}

inline std::vector<double> sized(Section& s, const std::string& key, std::size_t n) {
  auto v = s.required<std::vector<double>>(key);
  if (v.size() != n) throw ConfigError("'" + s.child(key) + "' needs " + std::to_string(n) + " entries");
  return v;
}

inline json to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (long i = 0; i < m.rows(); ++i) {
    json r = json::array();
    for (long k = 0; k < m.cols(); ++k) r.push_back(m(i, k));
    rows.push_back(r);
  }
  return rows;
}

inline Eigen::VectorXd stdv_to_eigen(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<long>(v.size()));
}

inline json to_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

// ---- plants and models -------------------------------------------------------------

inline sim::TeacherOptions teacher_options(Section s) {
  sim::TeacherOptions o;
  if (s.has("dims")) {
    Section d = s.section("dims");
    o.dims = {d.required<std::size_t>("n"), d.required<std::size_t>("m"), d.required<std::size_t>("l"),
              d.required<std::size_t>("p")};
    d.finish();
  }
  if (s.has("architecture")) {
    Section a = s.section("architecture");
    o.architecture.bnn_layers = a.get("bnn_layers", o.architecture.bnn_layers);
    o.architecture.dbnn_layers = a.get("dbnn_layers", o.architecture.dbnn_layers);
    o.architecture.picnn_layers = a.get("picnn_layers", o.architecture.picnn_layers);
    o.architecture.hidden = a.get("hidden", o.architecture.hidden);
    a.finish();
  }
  o.output_scale = s.get("output_scale", o.output_scale);
  o.a_diagonal = s.get("a_diagonal", o.a_diagonal);
  o.b_diagonal = s.get("b_diagonal", o.b_diagonal);
  o.v_mean = s.get("v_mean", o.v_mean);
  o.v_scale = s.get("v_scale", o.v_scale);
  o.y_box = s.get("y_box", o.y_box);
  o.seed = s.get("seed", o.seed);
  s.finish();
  return o;
}

/// {"kind": "teacher", "teacher": {...}} or {"kind": "nonlinear"}.
inline std::unique_ptr<sim::Plant> make_plant(Section s) {
  const std::string kind = s.get<std::string>("kind", "teacher");
  std::unique_ptr<sim::Plant> p;
  if (kind == "teacher") {
    p = std::make_unique<sim::TeacherPlant>(teacher_options(s.section_or_empty("teacher")));
  } else if (kind == "nonlinear") {
    p = std::make_unique<sim::NonlinearPlant>();
  } else {
    throw ConfigError("unknown plant kind '" + kind + "' (teacher, nonlinear)");
  }
  s.finish();
  return p;
}

/// {"file": path} or {"from_plant": true} (the teacher's own model).
inline model::ELModel controller_model(Section s, const sim::Plant* plant) {
  const auto file = s.optional<std::string>("file");
  const bool from_plant = s.get("from_plant", false);
  s.finish();
  if (file && from_plant) throw ConfigError("'" + s.where() + "': give either 'file' or 'from_plant', not both");
  if (file) return model::load_model(*file);
  if (from_plant) {
    const auto* t = dynamic_cast<const sim::TeacherPlant*>(plant);
    if (!t) throw ConfigError("'" + s.child("from_plant") + "' needs a teacher plant");
    return t->model();
  }
  throw ConfigError("'" + s.where() + "' needs 'file' or 'from_plant'");
}

inline sim::ExcitationSpec excitation(Section s, std::size_t channels, std::uint64_t seed, double duration,
                                      std::vector<double> lower, std::vector<double> upper) {
  sim::ExcitationSpec e;
  e.kind = sim::parse_excitation_kind(s.get<std::string>("kind", "sum-of-sines"));
  e.lower = s.has("lower") ? sized(s, "lower", channels) : std::move(lower);
  e.upper = s.has("upper") ? sized(s, "upper", channels) : std::move(upper);
  e.duration = duration;
  e.f_low = s.get("f_low", e.f_low);
  e.f_high = s.get("f_high", e.f_high);
  e.amplitude = s.get("amplitude", e.amplitude);
  e.components = s.get("components", e.components);
  e.hold = s.get("hold", e.hold);
  e.seed = seed;
  s.finish();
  return e;
}

// ---- R² tables ---------------------------------------------------------------------

struct R2Table {
  std::vector<std::string> channel;
  std::vector<double> r2;
  double average() const {
    double s = 0.0;
    for (double v : r2) s += v;
    return r2.empty() ? 0.0 : s / static_cast<double>(r2.size());
  }
  std::string csv() const {
    std::string out = "channel,r2\n";
    for (std::size_t i = 0; i < r2.size(); ++i) out += channel[i] + "," + fmt(r2[i], "%.6f") + "\n";
    out += "average," + fmt(average(), "%.6f") + "\n";
    return out;
  }
  std::string text() const {
    std::string out = "  channel    R^2\n";
    for (std::size_t i = 0; i < r2.size(); ++i) out += "  " + channel[i] + std::string(11 - channel[i].size(), ' ') + fmt(r2[i], "%.4f") + "\n";
    out += "  average    " + fmt(average(), "%.4f") + "\n";
    return out;
  }
};

inline R2Table r2_table(const model::ELModel& m, const model::TrajectoryDataset& data) {
  const model::BatchPrediction p = model::predict(m, data);
  R2Table t;
  auto add = [&](const Tensor& pred, const Tensor& actual, const char* name) {
    for (std::size_t j = 0; j < actual.cols(); ++j) {
      std::vector<double> a(data.size()), b(data.size());
      for (std::size_t i = 0; i < data.size(); ++i) {
        a[i] = pred(i, j);
        b[i] = actual(i, j);
      }
      t.channel.push_back(name + std::to_string(j + 1));
      t.r2.push_back(sim::r2(a, b));
    }
  };
  add(p.y_dot, data.y_dot, "ydot");
  add(p.z, data.z, "z");
  return t;
}

}  // namespace detail

// ---- gen-data ----------------------------------------------------------------------

/// Simulates the plant under excitation and writes `<out>/<file>` with its
/// metadata sidecar.
///
/// { "plant": {...}, "data": { "file", "duration", "step", "substeps", "y0",
///   "v": {excitation}, "d": {excitation}, "derivative_tolerance" } }
inline int cmd_gen_data(const Run& run) {
  Section root(run.config, "");
  root.get<std::uint64_t>("seed", 0);
  auto plant = detail::make_plant(root.section_or_empty("plant"));
  Section data = root.section_or_empty("data");
  const std::string file = data.get<std::string>("file", "data.csv");
  const double duration = data.get("duration", 200.0);
  const double step = data.get("step", 0.05);
  const int substeps = data.get("substeps", 5);
  const double tolerance = data.get("derivative_tolerance", 0.5);
  const Dims dims = plant->dims();
  std::vector<double> y0 = data.has("y0") ? detail::sized(data, "y0", dims.n) : std::vector<double>(dims.n, 0.0);
  std::vector<double> v_lo(dims.m, 0.0), v_hi(dims.m, 100.0), d_lo(dims.l, -1.0), d_hi(dims.l, 1.0);
  const auto v_spec = detail::excitation(data.section_or_empty("v"), dims.m, derive_seed(run.seed, "v-excitation"),
                                         duration, v_lo, v_hi);
  const auto d_spec = detail::excitation(data.section_or_empty("d"), dims.l, derive_seed(run.seed, "d-excitation"),
                                         duration, d_lo, d_hi);
  data.finish();
  root.finish();
  if (!(step > 0.0) || !(duration >= 0.0)) throw ConfigError("data.step must be positive and data.duration nonnegative");

  const model::TrajectoryDataset ds = sim::simulate_open_loop(*plant, sim::Excitation(v_spec), sim::Excitation(d_spec),
                                                             std::move(y0), duration, step, substeps);
  model::DatasetMeta meta;
  meta.period = step;
  meta.derivative_tolerance = tolerance;
  meta.extra = {{"plant", plant->name()}, {"seed", run.seed}, {"config_hash", run.hash}};
  const fs::path path = run.out / file;
  model::write_dataset(path.string(), ds, meta);
  if (ds.size() >= 2) model::read_dataset(path.string());  // reload: invariants must hold
  *run.log << "gen-data: " << ds.size() << " rows from plant '" << plant->name() << "' -> " << path.string() << "\n";
  return kOk;
}

// ---- train -------------------------------------------------------------------------

/// { "data": {"file", "test_file"}, "model": {"architecture", "init", "file"},
///   "train": {TrainConfig fields} }
inline int cmd_train(const Run& run) {
  Section root(run.config, "");
  root.get<std::uint64_t>("seed", 0);
  Section data = root.section("data");
  const std::string file = data.required<std::string>("file");
  const auto test_file = data.optional<std::string>("test_file");
  data.finish();
  Section ms = root.section_or_empty("model");
  model::Architecture arch;
  {
    Section a = ms.section_or_empty("architecture");
    arch.bnn_layers = a.get("bnn_layers", arch.bnn_layers);
    arch.dbnn_layers = a.get("dbnn_layers", arch.dbnn_layers);
    arch.picnn_layers = a.get("picnn_layers", arch.picnn_layers);
    arch.hidden = a.get("hidden", arch.hidden);
    a.finish();
  }
  model::InitOptions init;
  {
    Section i = ms.section_or_empty("init");
    init.output_scale = i.get("output_scale", init.output_scale);
    init.a_diagonal = i.get("a_diagonal", init.a_diagonal);
    init.b_diagonal = i.get("b_diagonal", init.b_diagonal);
    i.finish();
  }
  const std::string model_file = ms.get<std::string>("file", "model.bin");
  ms.finish();
  model::TrainConfig cfg;
  {
    Section t = root.section_or_empty("train");
    cfg.epochs = t.get("epochs", cfg.epochs);
    cfg.batch_size = t.get("batch_size", cfg.batch_size);
    cfg.learning_rate = t.get("learning_rate", cfg.learning_rate);
    cfg.lr_decay = t.get("lr_decay", cfg.lr_decay);
    cfg.clip_norm = t.get("clip_norm", cfg.clip_norm);
    cfg.validation_fraction = t.get("validation_fraction", cfg.validation_fraction);
    cfg.validation_blocks = t.get("validation_blocks", cfg.validation_blocks);
    t.finish();
  }
  root.finish();
  cfg.seed = derive_seed(run.seed, "train-shuffle");

  const model::LoadedDataset loaded = model::read_dataset(file);
  const model::TrajectoryDataset& ds = loaded.data;
  model::ELModel m(ds.dims, arch);
  std::mt19937_64 rng(derive_seed(run.seed, "model-init"));
  m.init(rng, init);
  if (ds.size() >= 2) m.fit_scalers(ds.v, ds.y, ds.d, ds.z);

  std::string history = "epoch,train_loss,validation_loss,learning_rate\n";
  const model::TrainResult res = model::train(std::move(m), ds, cfg, [&](const model::EpochRecord& r) {
    history += std::to_string(r.epoch) + "," + model::format_double(r.train_loss) + "," +
               model::format_double(r.validation_loss) + "," + model::format_double(r.learning_rate) + "\n";
  });
  model::save_model((run.out / model_file).string(), res.model);
  detail::write_text(run.out / "loss_history.csv", history);
  *run.log << "train: " << cfg.epochs << " epochs, best epoch " << res.best_epoch << " -> "
           << (run.out / model_file).string() << "\n";

  std::optional<model::TrajectoryDataset> held;
  std::string source;
  if (test_file) {
    held = model::read_dataset(*test_file).data;
    source = *test_file;
  } else if (res.validation_rows.size() >= 2) {
    held = ds.subset(res.validation_rows);
    source = "validation rows";
  }
  if (held) {
    const detail::R2Table t = detail::r2_table(res.model, *held);
    detail::write_text(run.out / "r2.csv", t.csv());
    *run.log << "held-out R^2 (" << source << "):\n" << t.text();
  }
  return kOk;
}

// ---- eval --------------------------------------------------------------------------

/// { "model": {"file"}, "data": {"file"} } → r2.csv and predictions.csv.
inline int cmd_eval(const Run& run) {
  Section root(run.config, "");
  root.get<std::uint64_t>("seed", 0);
  Section ms = root.section("model");
  const std::string model_file = ms.required<std::string>("file");
  ms.finish();
  Section data = root.section("data");
  const std::string file = data.required<std::string>("file");
  data.finish();
  root.finish();

  const model::ELModel m = model::load_model(model_file);
  const model::TrajectoryDataset ds = model::read_dataset(file).data;
  if (!(ds.dims == m.dims())) throw std::runtime_error("eval: model and dataset dimensions differ");
  const model::BatchPrediction p = model::predict(m, ds);
  std::string csv = "t";
  for (std::size_t j = 1; j <= ds.dims.n; ++j) csv += ",ydot" + std::to_string(j) + "_pred";
  for (std::size_t j = 1; j <= ds.dims.p; ++j) csv += ",z" + std::to_string(j) + "_pred";
  csv += "\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    csv += model::format_double(ds.t[i]);
    for (std::size_t j = 0; j < ds.dims.n; ++j) csv += "," + model::format_double(p.y_dot(i, j));
    for (std::size_t j = 0; j < ds.dims.p; ++j) csv += "," + model::format_double(p.z(i, j));
    csv += "\n";
  }
  detail::write_text(run.out / "predictions.csv", csv);
  const detail::R2Table t = detail::r2_table(m, ds);
  detail::write_text(run.out / "r2.csv", t.csv());
  *run.log << "eval: " << ds.size() << " rows\n" << t.text();
  return kOk;
}

// ---- design-lqr --------------------------------------------------------------------

/// { "plant": {...} (only for from_plant), "model": {...},
///   "target": {"y_d", "d"}, "Q", "R", "tolerance" } → lqr.json.
inline int cmd_design_lqr(const Run& run) {
  Section root(run.config, "");
  root.get<std::uint64_t>("seed", 0);
  std::unique_ptr<sim::Plant> plant;
  if (root.has("plant")) plant = detail::make_plant(root.section("plant"));
  const model::ELModel m = detail::controller_model(root.section("model"), plant.get());
  const Dims dims = m.dims();
  Section target = root.section("target");
  const auto y_d = detail::sized(target, "y_d", dims.n);
  const auto d = detail::sized(target, "d", dims.l);
  target.finish();
  const Eigen::MatrixXd Q = root.has("Q") ? detail::weight_matrix(root.raw("Q"), static_cast<long>(dims.n), "Q")
                                          : Eigen::MatrixXd::Identity(static_cast<long>(dims.n), static_cast<long>(dims.n));
  const Eigen::MatrixXd R = root.has("R") ? detail::weight_matrix(root.raw("R"), static_cast<long>(dims.m), "R")
                                          : Eigen::MatrixXd::Identity(static_cast<long>(dims.m), static_cast<long>(dims.m));
  const double tol = root.get("tolerance", 1e-6);
  root.finish();

  const control::LqrDesign des = control::design_lqr(m, y_d, d, Q, R, tol);
  const Eigen::MatrixXd closed = des.lin.A - des.lin.B * des.K;
  const Eigen::VectorXcd eig = closed.eigenvalues();
  json poles = json::array();
  for (long i = 0; i < eig.size(); ++i) poles.push_back({eig(i).real(), eig(i).imag()});
  json out;
  out["A"] = detail::to_json(des.lin.A);
  out["B"] = detail::to_json(des.lin.B);
  out["c"] = detail::to_json(des.lin.c);
  out["P"] = detail::to_json(des.P);
  out["K"] = detail::to_json(des.K);
  out["x_d"] = detail::to_json(des.x_d);
  out["u_d"] = detail::to_json(des.u_d);
  out["v_d"] = model::PointMaps(m).v_from_u(std::vector<double>(des.u_d.data(), des.u_d.data() + des.u_d.size()), y_d, d);
  out["riccati_residual"] = des.riccati_residual;
  out["steady_residual"] = des.steady_residual;
  out["closed_loop_poles"] = poles;
  out["config_hash"] = run.hash;
  detail::write_text(run.out / "lqr.json", out.dump(2) + "\n");
  *run.log << "design-lqr: Riccati residual " << detail::fmt(des.riccati_residual) << ", steady residual "
           << detail::fmt(des.steady_residual) << " -> " << (run.out / "lqr.json").string() << "\n";
  return kOk;
}

// ---- simulate ----------------------------------------------------------------------

struct RunSummary {
  json j;
  bool constraint_ok = true;
  bool kkt_ok = true;
};

/// Summary of one closed-loop trace: tracking error overall and on the
/// feasible segments, barrier maxima, model output fit along the trace and,
/// for I-CBF, the optimality residual at the equilibria it visited.
inline RunSummary summarize(const sim::SimulationTrace& tr, const model::ELModel& m, const sim::ClosedLoopOptions& o,
                            const std::function<bool(double)>& feasible, double constraint_tol, double eq_tol) {
  RunSummary s;
  json& j = s.j;
  j["controller"] = tr.controller;
  j["rows"] = tr.rows.size();
  j["tracking_rmse"] = tr.tracking_rmse();
  {
    double se = 0.0;
    std::size_t k = 0;
    for (const auto& r : tr.rows) {
      if (!feasible(r.t)) continue;
      for (std::size_t i = 0; i < r.y.size(); ++i) se += (r.y[i] - r.y_d[i]) * (r.y[i] - r.y_d[i]);
      ++k;
    }
    j["tracking_rmse_feasible"] = k ? std::sqrt(se / static_cast<double>(k * tr.dims.n)) : 0.0;
  }
  if (tr.barrier_rows > 0 && !tr.rows.empty()) {
    std::vector<double> worst(tr.barrier_rows, -std::numeric_limits<double>::infinity());
    for (const auto& r : tr.rows)
      for (std::size_t i = 0; i < r.h.size(); ++i) worst[i] = std::max(worst[i], r.h[i]);
    j["max_h"] = tr.max_barrier();
    j["max_h_per_row"] = worst;
    std::size_t violated = 0;
    for (double w : worst) violated += w > constraint_tol;
    j["violated_rows"] = violated;
    s.constraint_ok = violated == 0;
  }
  {
    // Model output fit along the trace (ẑ from the controller model vs the plant's z).
    model::PointPredictor pred(m);
    const std::vector<double> zero(tr.dims.l, 0.0);
    json fit = json::array();
    for (std::size_t c = 0; c < tr.dims.p; ++c) {
      std::vector<double> a, b;
      for (const auto& r : tr.rows) {
        pred.evaluate(r.v, r.y, r.d, zero);
        a.push_back(pred.z()[c]);
        b.push_back(r.z[c]);
      }
      try {
        fit.push_back(sim::r2(a, b));
      } catch (const std::invalid_argument&) {
        fit.push_back(nullptr);
      }
    }
    j["z_r2_model_vs_plant"] = fit;
  }
  int max_iter = 0;
  double max_kkt = 0.0;
  for (const auto& r : tr.rows) {
    max_iter = std::max(max_iter, r.qp_iterations);
    max_kkt = std::max(max_kkt, r.qp_kkt_residual);
  }
  j["max_qp_iterations"] = max_iter;
  j["max_qp_kkt_residual"] = max_kkt;
  if (tr.controller == "icbf" && o.barrier) {
    std::size_t points = 0;
    double worst = 0.0;
    std::map<std::vector<double>, control::LqrDesign> designs;
    for (const auto& r : tr.rows) {
      double lam = 0.0;
      for (double l : r.lambda) lam += l * l;
      if (!(r.xdot_norm < eq_tol && std::sqrt(lam) < eq_tol)) continue;
      std::vector<double> key = r.y_d;
      key.insert(key.end(), r.d.begin(), r.d.end());
      auto it = designs.find(key);
      if (it == designs.end()) it = designs.emplace(key, control::design_lqr(m, r.y_d, r.d, o.Q, o.R, o.target_tolerance)).first;
      const Eigen::VectorXd x = detail::stdv_to_eigen(r.x), u = detail::stdv_to_eigen(r.u);
      worst = std::max(worst, control::equilibrium_kkt_residual(m, it->second, *o.barrier, x, u, r.d));
      ++points;
    }
    j["equilibrium_points"] = points;
    j["equilibrium_kkt_residual"] = worst;
    s.kkt_ok = worst < 1e-6;
  }
  return s;
}

/// Scenario block: {"preset": "standard", <ScenarioSettings overrides>} or
/// {"preset": "custom", "horizon", "control_period", "substeps", "y0", "v0",
///  "schedule": [{"start", "y_d" | "v", "d", "feasible"}], "bounds":
///  {"z_max", "v_max", "v_min"}, "alpha": {"k1", "k2"}, "a", "margin", "Q", "R"}.
/// Schedule entries given by "v" use the plant's settled output as target.
struct ScenarioSetup {
  sim::ClosedLoopOptions options;
  std::vector<sim::SegmentWindow> windows;
  bool feasible(double t) const {
    for (const auto& w : windows)
      if (w.feasible && t >= w.start && t < w.end) return true;
    return false;
  }
};

namespace detail {

inline ScenarioSetup scenario(Section s, sim::Plant& plant) {
  const std::string preset = s.get<std::string>("preset", "standard");
  ScenarioSetup out;
  const Dims dims = plant.dims();
  const long n = static_cast<long>(dims.n), m = static_cast<long>(dims.m);
  if (preset == "standard") {
    sim::ScenarioSettings st;
    st.horizon_scale = s.get("horizon_scale", st.horizon_scale);
    st.q_weight = s.get("q_weight", st.q_weight);
    st.r_weight = s.get("r_weight", st.r_weight);
    st.z1_max = s.get("z1_max", st.z1_max);
    st.z2_max = s.get("z2_max", st.z2_max);
    st.k1 = s.get("k1", st.k1);
    st.k2 = s.get("k2", st.k2);
    st.a = s.get("a", st.a);
    st.margin = s.get("margin", st.margin);
    s.finish();
    sim::StandardScenario sc = sim::make_standard_scenario(plant, st);
    out.options = std::move(sc.options);
    out.windows = std::move(sc.windows);
    return out;
  }
  if (preset != "custom") throw ConfigError("unknown scenario preset '" + preset + "' (standard, custom)");
  sim::ClosedLoopOptions& o = out.options;
  o.horizon = s.required<double>("horizon");
  o.control_period = s.get("control_period", o.control_period);
  o.substeps = s.get("substeps", o.substeps);
  o.v0 = s.has("v0") ? sized(s, "v0", dims.m) : std::vector<double>(dims.m, 50.0);
  const json& sched = s.raw("schedule");
  if (!sched.is_array() || sched.empty()) throw ConfigError("'scenario.schedule' must be a nonempty list");
  std::vector<double> first_d;
  for (std::size_t i = 0; i < sched.size(); ++i) {
    Section e(sched[i], "scenario.schedule[" + std::to_string(i) + "]");
    sim::ScheduleSegment seg;
    seg.start = e.required<double>("start");
    seg.d = sized(e, "d", dims.l);
    if (e.has("y_d") == e.has("v")) throw ConfigError("'" + e.where() + "' needs exactly one of 'y_d' and 'v'");
    if (e.has("y_d")) {
      seg.y_d = sized(e, "y_d", dims.n);
    } else {
      const auto v = sized(e, "v", dims.m);
      seg.y_d = sim::settle(plant, v, seg.d, std::vector<double>(dims.n, 0.0));
    }
    const bool feasible = e.get("feasible", true);
    e.finish();
    if (!o.schedule.empty() && !(seg.start > o.schedule.back().start)) {
      throw ConfigError("'scenario.schedule' start times must increase");
    }
    if (!out.windows.empty()) out.windows.back().end = seg.start;
    out.windows.push_back({seg.start, o.horizon, feasible});
    o.schedule.push_back(std::move(seg));
  }
  o.y0 = s.has("y0") ? sized(s, "y0", dims.n)
                     : sim::settle(plant, o.v0, o.schedule.front().d, std::vector<double>(dims.n, 0.0));
  o.Q = s.has("Q") ? weight_matrix(s.raw("Q"), n, "scenario.Q") : Eigen::MatrixXd::Identity(n, n);
  o.R = s.has("R") ? weight_matrix(s.raw("R"), m, "scenario.R") : Eigen::MatrixXd::Identity(m, m);
  if (s.has("bounds")) {
    Section b = s.section("bounds");
    control::BarrierSpec spec;
    spec.z_max = sized(b, "z_max", dims.p);
    spec.v_max = sized(b, "v_max", dims.m);
    spec.v_min = sized(b, "v_min", dims.m);
    b.finish();
    Section a = s.section_or_empty("alpha");
    spec.alpha = {{.k1 = a.get("k1", 20.0), .k2 = a.get("k2", 0.0)}};
    a.finish();
    spec.a = s.get("a", spec.a);
    spec.margin = s.get("margin", spec.margin);
    o.barrier = spec;
  }
  s.finish();
  return out;
}

inline std::string gnuplot_script(const std::vector<std::string>& traces, const Dims& dims, std::size_t rows) {
  std::string g = "# gnuplot script: targets vs outputs, then barrier rows (safe when <= 0)\n"
                  "set datafile separator ','\nset key autotitle columnhead\nset xlabel 't [s]'\n"
                  "set multiplot layout 2,1\n";
  const std::size_t y_col = 2 + dims.n + dims.l;  // 1-based column of y1
  const std::size_t h_col = 2 + 3 * dims.n + dims.l + 3 * dims.m + dims.p;
  g += "plot ";
  bool first = true;
  for (const auto& t : traces) {
    for (std::size_t i = 0; i < dims.n; ++i) {
      g += std::string(first ? "" : ", ") + "'" + t + "' using 1:" + std::to_string(y_col + i) + " with lines";
      first = false;
    }
  }
  for (std::size_t i = 0; i < dims.n; ++i) g += ", '" + traces.front() + "' using 1:" + std::to_string(2 + i) + " with lines dt 2";
  g += "\n";
  if (rows > 0) {
    g += "plot ";
    first = true;
    for (const auto& t : traces) {
      for (std::size_t i = 0; i < rows; ++i) {
        g += std::string(first ? "" : ", ") + "'" + t + "' using 1:" + std::to_string(h_col + i) + " with lines";
        first = false;
      }
    }
    g += ", 0 with lines lc 'black' notitle\n";
  }
  g += "unset multiplot\n";
  return g;
}

}  // namespace detail

/// { "plant": {...}, "model": {...}, "scenario": {...},
///   "controllers": ["lqr", "icbf"], "constraint_tolerance": 1e-6,
///   "equilibrium_tolerance": 1e-8 }
/// Writes trace_<controller>.csv per controller, summary.json and a gnuplot
/// script. Exit 3 when an I-CBF trace breaks a barrier row or its KKT check.
inline int cmd_simulate(const Run& run) {
  Section root(run.config, "");
  root.get<std::uint64_t>("seed", 0);
  auto plant = detail::make_plant(root.section_or_empty("plant"));
  const model::ELModel m = detail::controller_model(root.section("model"), plant.get());
  if (!(m.dims() == plant->dims())) throw ConfigError("model and plant dimensions differ");
  ScenarioSetup setup = detail::scenario(root.section_or_empty("scenario"), *plant);
  const auto kinds = root.get<std::vector<std::string>>("controllers", {"lqr", "icbf"});
  const double constraint_tol = root.get("constraint_tolerance", 1e-6);
  const double eq_tol = root.get("equilibrium_tolerance", 1e-8);
  root.finish();
  if (kinds.empty()) throw ConfigError("'controllers' must name at least one controller");

  json summary;
  summary["config_hash"] = run.hash;
  summary["seed"] = run.seed;
  summary["plant"] = plant->name();
  summary["runs"] = json::object();
  std::vector<std::string> traces;
  bool checks_ok = true, failed = false;
  std::map<std::string, json> per;
  for (const auto& name : kinds) {
    sim::ClosedLoopOptions o = setup.options;
    o.controller = sim::parse_controller_kind(name);
    auto fresh = detail::make_plant(Section(run.config.contains("plant") ? run.config["plant"] : json::object(), "plant"));
    sim::SimulationTrace tr;
    std::string error;
    try {
      tr = sim::simulate_closed_loop(*fresh, m, o);
    } catch (const sim::SimulationError& e) {
      tr = e.partial();
      error = e.what();
      failed = true;
    }
    tr.seed = run.seed;
    tr.config_hash = run.hash;
    const std::string file = "trace_" + name + ".csv";
    tr.write_csv((run.out / file).string());
    traces.push_back(file);
    RunSummary s = summarize(tr, m, o, [&](double t) { return setup.feasible(t); }, constraint_tol, eq_tol);
    if (!error.empty()) s.j["error"] = error;
    if (o.controller == sim::ControllerKind::icbf) checks_ok = checks_ok && s.constraint_ok && s.kkt_ok;
    *run.log << "simulate[" << name << "]: " << tr.rows.size() << " ticks, tracking RMSE "
             << detail::fmt(s.j["tracking_rmse"].get<double>());
    if (s.j.contains("max_h")) *run.log << ", max h " << detail::fmt(s.j["max_h"].get<double>());
    if (s.j.contains("equilibrium_kkt_residual")) {
      *run.log << ", KKT residual " << detail::fmt(s.j["equilibrium_kkt_residual"].get<double>()) << " at "
               << s.j["equilibrium_points"].get<std::size_t>() << " equilibrium points";
    }
    *run.log << (error.empty() ? "" : " [" + error + "]") << "\n";
    per[name] = s.j;
    summary["runs"][name] = s.j;
  }
  if (per.count("lqr") && per.count("icbf")) {
    const json& l = per["lqr"];
    const json& c = per["icbf"];
    json cmp;
    const double lr = l["tracking_rmse_feasible"].get<double>();
    cmp["rmse_ratio_feasible"] = lr > 0.0 ? json(c["tracking_rmse_feasible"].get<double>() / lr) : json(nullptr);
    if (l.contains("max_h")) {
      cmp["lqr_violates"] = l["max_h"].get<double>() > 0.0;
      cmp["icbf_satisfies"] = c["max_h"].get<double>() <= constraint_tol;
    }
    summary["comparison"] = cmp;
  }
  detail::write_text(run.out / "summary.json", summary.dump(2) + "\n");
  detail::write_text(run.out / "trace.gp", detail::gnuplot_script(traces, plant->dims(), setup.options.barrier ? setup.options.barrier->rows() : 0));
  if (failed) return kRuntimeError;
  if (!checks_ok) {
    std::cerr << "simulate: I-CBF trace broke a barrier row or the equilibrium KKT check (see summary.json)\n";
    return kCheckFailed;
  }
  return kOk;
}

// ---- check-linearizable ------------------------------------------------------------

/// { "system": {"builtin": name} | {"file": path}, "lower", "upper",
///   "samples", "rank_tol", "involutivity_tol" } → check_report.json.
/// The verdict is data: a failing system still exits 0.
inline int cmd_check_linearizable(const Run& run) {
  Section root(run.config, "");
  root.get<std::uint64_t>("seed", 0);
  Section sys = root.section("system");
  const auto builtin = sys.optional<std::string>("builtin");
  const auto file = sys.optional<std::string>("file");
  sys.finish();
  if (builtin.has_value() == file.has_value()) throw ConfigError("'system' needs exactly one of 'builtin' and 'file'");
  const lie::VectorFieldPair pair = builtin ? lie::builtin_system(*builtin) : lie::load_system(*file);
  const auto lower = root.has("lower") ? detail::sized(root, "lower", pair.n) : std::vector<double>(pair.n, -1.0);
  const auto upper = root.has("upper") ? detail::sized(root, "upper", pair.n) : std::vector<double>(pair.n, 1.0);
  lie::CheckOptions opt;
  opt.samples = root.get("samples", opt.samples);
  opt.rank_tol = root.get("rank_tol", opt.rank_tol);
  opt.involutivity_tol = root.get("involutivity_tol", opt.involutivity_tol);
  opt.seed = derive_seed(run.seed, "lie-samples");
  root.finish();

  const lie::CheckReport r = lie::check_linearizable(pair, lower, upper, opt);
  json j;
  j["system"] = r.system;
  j["n"] = r.n;
  j["lower"] = r.lower;
  j["upper"] = r.upper;
  j["samples"] = r.options.samples;
  j["rank_tol"] = r.options.rank_tol;
  j["involutivity_tol"] = r.options.involutivity_tol;
  j["verdict"] = lie::to_string(r.verdict);
  j["worst_sigma_ratio"] = r.worst_sigma_ratio;
  j["worst_involutivity_residual"] = r.worst_involutivity;
  json pts = json::array();
  for (const auto& s : r.samples) {
    pts.push_back({{"y", s.y}, {"rank", s.rank}, {"sigma_ratio", s.sigma_ratio},
                   {"involutivity_residual", s.involutivity_residual}});
  }
  j["points"] = pts;
  j["config_hash"] = run.hash;
  detail::write_text(run.out / "check_report.json", j.dump(2) + "\n");
  *run.log << "check-linearizable[" << r.system << "]: " << lie::to_string(r.verdict) << " (worst sigma ratio "
           << detail::fmt(r.worst_sigma_ratio) << ", worst involutivity residual " << detail::fmt(r.worst_involutivity)
           << ")\n";
  return kOk;
}

// ---- dispatch ----------------------------------------------------------------------

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"gen-data", "train", "eval", "design-lqr", "simulate",
                                              "check-linearizable"};
  return names;
}

/// Resolves seed and output directory (flags win over the config), writes
/// the config echo, runs the command and maps failures to exit codes.
inline int run_command(const std::string& command, json config, std::optional<std::uint64_t> seed_flag,
                       std::optional<std::string> out_flag, std::ostream& log = std::cout,
                       std::ostream& err = std::cerr) {
  try {
    if (!config.is_object()) throw ConfigError("config must be a JSON object");
    Run run;
    run.log = &log;
    std::string out = "out";
    if (config.contains("out")) {
      if (!config["out"].is_string()) throw ConfigError("key 'out' must be a string");
      out = config["out"].get<std::string>();
      config.erase("out");
    }
    if (out_flag) out = *out_flag;
    if (seed_flag) config["seed"] = *seed_flag;
    if (config.contains("seed") && !config["seed"].is_number_unsigned()) {
      throw ConfigError("key 'seed' must be a nonnegative integer");
    }
    run.seed = config.value("seed", std::uint64_t{0});
    run.config = config;
    run.out = out;
    fs::create_directories(run.out);
    run.hash = write_config_echo(run.out, command, run.config);
    if (command == "gen-data") return cmd_gen_data(run);
    if (command == "train") return cmd_train(run);
    if (command == "eval") return cmd_eval(run);
    if (command == "design-lqr") return cmd_design_lqr(run);
    if (command == "simulate") return cmd_simulate(run);
    if (command == "check-linearizable") return cmd_check_linearizable(run);
    throw ConfigError("unknown command '" + command + "'");
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
}

}  // namespace exlin::cli
