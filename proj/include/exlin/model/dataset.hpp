#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "exlin/model/el_model.hpp"

namespace exlin::model {

/// Raised when a dataset violates its invariants or cannot be parsed.
class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Uniformly sampled records (t, v, d, ḋ, y, ẏ, z), one row per record.
struct TrajectoryDataset {
  Dims dims;
  double period = 0.0;
  std::vector<double> t;
  Tensor v, d, d_dot, y, y_dot, z;

  TrajectoryDataset() = default;
  TrajectoryDataset(Dims dims_, std::size_t rows, double period_)
      : dims(dims_),
        period(period_),
        t(rows, 0.0),
        v(rows, dims_.m),
        d(rows, dims_.l),
        d_dot(rows, dims_.l),
        y(rows, dims_.n),
        y_dot(rows, dims_.n),
        z(rows, dims_.p) {}

  std::size_t size() const { return t.size(); }

  /// Model-input bindings ("v", "y", "d", "d_dot") plus the targets
  /// ("y_dot", "z") for the listed rows.
  Bindings bindings(const std::vector<std::size_t>& rows) const {
    return {{"v", take(v, rows)},         {"y", take(y, rows)},         {"d", take(d, rows)},
            {"d_dot", take(d_dot, rows)}, {"y_dot", take(y_dot, rows)}, {"z", take(z, rows)}};
  }
  Bindings bindings() const { return bindings(all_rows()); }

  std::vector<std::size_t> all_rows() const {
    std::vector<std::size_t> rows(size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    return rows;
  }

  TrajectoryDataset subset(const std::vector<std::size_t>& rows) const {
    TrajectoryDataset out(dims, rows.size(), period);
    for (std::size_t i = 0; i < rows.size(); ++i) out.t[i] = t.at(rows[i]);
    out.v = take(v, rows);
    out.d = take(d, rows);
    out.d_dot = take(d_dot, rows);
    out.y = take(y, rows);
    out.y_dot = take(y_dot, rows);
    out.z = take(z, rows);
    return out;
  }

  static Tensor take(const Tensor& src, const std::vector<std::size_t>& rows) {
    Tensor out(rows.size(), src.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto r = src.row_span(rows[i]);
      std::copy(r.begin(), r.end(), out.values().begin() + static_cast<long>(i * src.cols()));
    }
    return out;
  }
};

/// Sidecar metadata stored next to the CSV as `<csv>.meta.json`.
struct DatasetMeta {
  double period = 0.0;
  /// Bound on the per-channel forward-difference mismatch of derivative
  /// columns, relative to the channel's standard deviation.
  double derivative_tolerance = 0.5;
  std::string derivative_source = "plant";  ///< "plant" or "finite-difference"
  std::map<std::string, std::string> units{{"t", "s"}};
  nlohmann::json extra = nlohmann::json::object();
};

// ---- derivatives by differencing ----------------------------------------------

/// Central differences on a uniform grid; second-order one-sided at the ends.
inline Tensor finite_difference(const Tensor& x, double h) {
  const std::size_t n = x.rows();
  Tensor out(n, x.cols(), 0.0);
  if (n < 2) return out;
  for (std::size_t j = 0; j < x.cols(); ++j) {
    if (n == 2) {
      out(0, j) = out(1, j) = (x(1, j) - x(0, j)) / h;
      continue;
    }
    for (std::size_t i = 1; i + 1 < n; ++i) out(i, j) = (x(i + 1, j) - x(i - 1, j)) / (2.0 * h);
    out(0, j) = (-3.0 * x(0, j) + 4.0 * x(1, j) - x(2, j)) / (2.0 * h);
    out(n - 1, j) = (3.0 * x(n - 1, j) - 4.0 * x(n - 2, j) + x(n - 3, j)) / (2.0 * h);
  }
  return out;
}

// ---- invariants -------------------------------------------------------------------

inline double infer_period(const std::vector<double>& t) {
  if (t.size() < 2) return 0.0;
  return (t.back() - t.front()) / static_cast<double>(t.size() - 1);
}

/// Largest normalized forward-difference mismatch between `x` and its
/// declared derivative `xdot` over all channels.
inline double derivative_mismatch(const Tensor& x, const Tensor& xdot, double h) {
  const std::size_t n = x.rows();
  if (n < 2) return 0.0;
  double worst = 0.0;
  for (std::size_t j = 0; j < x.cols(); ++j) {
    double mean = 0.0, var = 0.0, peak = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += xdot(i, j);
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      var += (xdot(i, j) - mean) * (xdot(i, j) - mean);
      peak = std::max(peak, std::abs(xdot(i, j)));
    }
    const double spread = std::sqrt(var / static_cast<double>(n));
    const double scale = std::max({spread, 1e-9 * peak, 1e-12});
    for (std::size_t i = 0; i + 1 < n; ++i) {
      const double fd = (x(i + 1, j) - x(i, j)) / h;
      worst = std::max(worst, std::abs(fd - xdot(i, j)) / scale);
    }
  }
  return worst;
}

/// Throws DatasetError naming the first violated invariant.
inline void validate(const TrajectoryDataset& ds, double derivative_tolerance = 0.5) {
  const std::size_t n = ds.size();
  auto rows_ok = [&](const Tensor& x, std::size_t cols, const char* name) {
    if (x.rows() != n || x.cols() != cols) {
      throw DatasetError(std::string("dataset column block '") + name + "' has shape " + x.shape_string());
    }
    if (!x.all_finite()) throw DatasetError(std::string("dataset column block '") + name + "' has non-finite values");
  };
  rows_ok(ds.v, ds.dims.m, "v");
  rows_ok(ds.d, ds.dims.l, "d");
  rows_ok(ds.d_dot, ds.dims.l, "ddot");
  rows_ok(ds.y, ds.dims.n, "y");
  rows_ok(ds.y_dot, ds.dims.n, "ydot");
  rows_ok(ds.z, ds.dims.p, "z");
  for (double ti : ds.t) {
    if (!std::isfinite(ti)) throw DatasetError("dataset time column has non-finite values");
  }
  if (n < 2) return;
  if (!(ds.period > 0.0)) throw DatasetError("dataset period must be positive");
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const double dt = ds.t[i + 1] - ds.t[i];
    if (!(dt > 0.0)) throw DatasetError("time is not strictly increasing at row " + std::to_string(i + 1));
    if (std::abs(dt - ds.period) > 1e-6 * ds.period) {
      throw DatasetError("non-uniform sampling at row " + std::to_string(i + 1) + ": step " + std::to_string(dt) +
                         " vs period " + std::to_string(ds.period));
    }
  }
  if (const double e = derivative_mismatch(ds.y, ds.y_dot, ds.period); e > derivative_tolerance) {
    throw DatasetError("ydot inconsistent with y by differencing (normalized mismatch " + std::to_string(e) + ")");
  }
  if (const double e = derivative_mismatch(ds.d, ds.d_dot, ds.period); e > derivative_tolerance) {
    throw DatasetError("ddot inconsistent with d by differencing (normalized mismatch " + std::to_string(e) + ")");
  }
}

// ---- CSV ------------------------------------------------------------------------

inline std::string format_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::string meta_path(const std::string& csv_path) { return csv_path + ".meta.json"; }

inline std::vector<std::string> dataset_header(const Dims& dims, bool with_derivatives) {
  std::vector<std::string> h{"t"};
  auto add = [&](const char* prefix, std::size_t k) {
    for (std::size_t i = 1; i <= k; ++i) h.push_back(prefix + std::to_string(i));
  };
  add("v", dims.m);
  add("d", dims.l);
  add("y", dims.n);
  add("z", dims.p);
  if (with_derivatives) {
    add("ydot", dims.n);
    add("ddot", dims.l);
  }
  return h;
}

inline void write_dataset(const std::string& path, const TrajectoryDataset& ds, const DatasetMeta& meta,
                          bool with_derivatives = true) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DatasetError("cannot write dataset '" + path + "'");
  const auto header = dataset_header(ds.dims, with_derivatives);
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << '\n';
  for (std::size_t r = 0; r < ds.size(); ++r) {
    out << format_double(ds.t[r]);
    auto emit = [&](const Tensor& x) {
      for (std::size_t j = 0; j < x.cols(); ++j) out << ',' << format_double(x(r, j));
    };
    emit(ds.v);
    emit(ds.d);
    emit(ds.y);
    emit(ds.z);
    if (with_derivatives) {
      emit(ds.y_dot);
      emit(ds.d_dot);
    }
    out << '\n';
  }
  if (!out) throw DatasetError("write failed for '" + path + "'");

  nlohmann::ordered_json j;
  j["format"] = "exlin-dataset";
  j["version"] = 1;
  j["period"] = meta.period;
  j["dims"] = {{"n", ds.dims.n}, {"m", ds.dims.m}, {"l", ds.dims.l}, {"p", ds.dims.p}};
  j["rows"] = ds.size();
  j["derivative_source"] = meta.derivative_source;
  j["derivative_tolerance"] = meta.derivative_tolerance;
  j["units"] = meta.units;
  if (!meta.extra.empty()) j["extra"] = meta.extra;
  std::ofstream m(meta_path(path), std::ios::binary);
  if (!m) throw DatasetError("cannot write dataset metadata '" + meta_path(path) + "'");
  m << j.dump(2) << '\n';
}

struct LoadedDataset {
  TrajectoryDataset data;
  DatasetMeta meta;
};

/// Reads a dataset CSV and its sidecar. Missing derivative columns are
/// filled by finite differences over the uniform grid. Invariants are
/// checked before returning.
inline LoadedDataset read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open dataset '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw DatasetError("dataset '" + path + "' is empty (no header)");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  std::map<std::string, std::size_t> column;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (!column.emplace(header[i], i).second) throw DatasetError("duplicate column '" + header[i] + "'");
  }
  auto count = [&](const std::string& prefix) {
    std::size_t k = 0;
    while (column.count(prefix + std::to_string(k + 1))) ++k;
    return k;
  };
  Dims dims{count("y"), count("v"), count("d"), count("z")};
  if (!column.count("t")) throw DatasetError("dataset header lacks column 't'");
  if (dims.n == 0 || dims.m == 0 || dims.l == 0 || dims.p == 0) {
    throw DatasetError("dataset header must contain v1.., d1.., y1.., z1.. columns");
  }
  const bool has_ydot = count("ydot") == dims.n;
  const bool has_ddot = count("ddot") == dims.l;
  if ((count("ydot") != 0 && !has_ydot) || (count("ddot") != 0 && !has_ddot)) {
    throw DatasetError("dataset derivative columns are incomplete");
  }
  std::size_t known = 1 + dims.n + dims.m + dims.l + dims.p + (has_ydot ? dims.n : 0) + (has_ddot ? dims.l : 0);
  if (known != header.size()) throw DatasetError("dataset header has unrecognized columns");

  std::vector<std::vector<double>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<double> vals;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        vals.push_back(std::stod(cell, &used));
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw DatasetError("unparseable value '" + cell + "' on line " + std::to_string(line_no));
      }
    }
    if (vals.size() != header.size()) throw DatasetError("wrong field count on line " + std::to_string(line_no));
    rows.push_back(std::move(vals));
  }

  LoadedDataset out;
  out.meta.period = infer_period([&] {
    std::vector<double> t;
    for (const auto& r : rows) t.push_back(r[column["t"]]);
    return t;
  }());
  if (std::ifstream m(meta_path(path)); m) {
    nlohmann::json j;
    try {
      m >> j;
    } catch (const std::exception& e) {
      throw DatasetError("bad dataset metadata '" + meta_path(path) + "': " + e.what());
    }
    if (j.contains("period")) out.meta.period = j["period"].get<double>();
    if (j.contains("derivative_tolerance")) out.meta.derivative_tolerance = j["derivative_tolerance"].get<double>();
    if (j.contains("derivative_source")) out.meta.derivative_source = j["derivative_source"].get<std::string>();
    if (j.contains("units")) out.meta.units = j["units"].get<std::map<std::string, std::string>>();
    if (j.contains("extra")) out.meta.extra = j["extra"];
  }

  TrajectoryDataset& ds = out.data;
  ds = TrajectoryDataset(dims, rows.size(), out.meta.period);
  auto fill = [&](Tensor& x, const std::string& prefix) {
    for (std::size_t j = 0; j < x.cols(); ++j) {
      const std::size_t c = column.at(prefix + std::to_string(j + 1));
      for (std::size_t r = 0; r < rows.size(); ++r) x(r, j) = rows[r][c];
    }
  };
  for (std::size_t r = 0; r < rows.size(); ++r) ds.t[r] = rows[r][column["t"]];
  fill(ds.v, "v");
  fill(ds.d, "d");
  fill(ds.y, "y");
  fill(ds.z, "z");
  if (has_ydot) fill(ds.y_dot, "ydot");
  if (has_ddot) fill(ds.d_dot, "ddot");
  // Validate the grid before differencing on it.
  validate(ds, std::numeric_limits<double>::infinity());
  if (!has_ydot) ds.y_dot = finite_difference(ds.y, ds.period);
  if (!has_ddot) ds.d_dot = finite_difference(ds.d, ds.period);
  if (!has_ydot || !has_ddot) out.meta.derivative_source = "finite-difference";
  validate(ds, out.meta.derivative_tolerance);
  return out;
}

}  // namespace exlin::model
