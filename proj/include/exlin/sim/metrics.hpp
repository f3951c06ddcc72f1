#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>

namespace exlin::sim {

/// Coefficient of determination 1 − SS_res / SS_tot.
inline double r2(std::span<const double> predicted, std::span<const double> actual) {
  if (predicted.size() != actual.size()) throw std::invalid_argument("r2: length mismatch");
  if (actual.size() < 2) throw std::invalid_argument("r2: need at least two samples");
  double mean = 0.0;
  for (double a : actual) mean += a;
  mean /= static_cast<double>(actual.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    ss_res += (actual[i] - predicted[i]) * (actual[i] - predicted[i]);
    ss_tot += (actual[i] - mean) * (actual[i] - mean);
  }
  if (!(ss_tot > 0.0)) throw std::invalid_argument("r2: actual series is constant");
  return 1.0 - ss_res / ss_tot;
}

}  // namespace exlin::sim
