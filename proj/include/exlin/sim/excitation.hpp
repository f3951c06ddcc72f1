#pragma once

#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace exlin::sim {

enum class ExcitationKind { chirp, prbs, sum_of_sines, constant };

inline ExcitationKind parse_excitation_kind(const std::string& s) {
  if (s == "chirp") return ExcitationKind::chirp;
  if (s == "prbs") return ExcitationKind::prbs;
  if (s == "sum-of-sines") return ExcitationKind::sum_of_sines;
  if (s == "constant") return ExcitationKind::constant;
  throw std::invalid_argument("unknown excitation kind '" + s + "' (chirp, prbs, sum-of-sines, constant)");
}

struct ExcitationSpec {
  ExcitationKind kind = ExcitationKind::sum_of_sines;
  std::vector<double> lower, upper;  ///< per-channel box
  double duration = 10.0;            ///< seconds
  double f_low = 0.05;               ///< Hz, band for chirp / sum-of-sines
  double f_high = 1.0;
  double amplitude = 1.0;            ///< fraction of the half-range used (0..1)
  int components = 6;                ///< sum-of-sines terms per channel
  double hold = 0.5;                 ///< prbs bit length, seconds
  std::uint64_t seed = 0;
};

/// Deterministic multichannel signal with an exact time derivative.
///
///  - chirp:        linear sweep f_low → f_high over the duration, one random
///                  phase per channel.
///  - sum-of-sines: `components` sines with random frequencies in the band
///                  and random phases; amplitudes split so the sum stays in
///                  the box.
///  - prbs:         each channel jumps between the two box endpoints every
///                  `hold` seconds by a seeded coin flip (derivative zero).
///  - constant:     the box midpoint.
class Excitation {
 public:
  Excitation() = default;
  explicit Excitation(ExcitationSpec spec) : spec_(std::move(spec)) {
    const std::size_t k = spec_.lower.size();
    if (spec_.upper.size() != k) throw std::invalid_argument("excitation box bounds differ in length");
    for (std::size_t i = 0; i < k; ++i) {
      if (!(spec_.lower[i] <= spec_.upper[i])) throw std::invalid_argument("excitation box has lower > upper");
    }
    if (!(spec_.duration >= 0.0)) throw std::invalid_argument("excitation duration must be nonnegative");
    if (!(spec_.amplitude >= 0.0 && spec_.amplitude <= 1.0)) throw std::invalid_argument("amplitude must be in [0, 1]");
    if (!(spec_.f_low > 0.0 && spec_.f_low <= spec_.f_high)) throw std::invalid_argument("bad frequency band");
    std::mt19937_64 rng(spec_.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    channels_.resize(k);
    for (auto& ch : channels_) {
      switch (spec_.kind) {
        case ExcitationKind::chirp:
          ch.phase.push_back(2.0 * std::numbers::pi * unit(rng));
          break;
        case ExcitationKind::sum_of_sines:
          if (spec_.components < 1) throw std::invalid_argument("sum-of-sines needs at least one component");
          for (int c = 0; c < spec_.components; ++c) {
            ch.freq.push_back(spec_.f_low + (spec_.f_high - spec_.f_low) * unit(rng));
            ch.phase.push_back(2.0 * std::numbers::pi * unit(rng));
          }
          break;
        case ExcitationKind::prbs: {
          if (!(spec_.hold > 0.0)) throw std::invalid_argument("prbs hold must be positive");
          const auto bits = static_cast<std::size_t>(std::ceil(spec_.duration / spec_.hold)) + 1;
          for (std::size_t b = 0; b < bits; ++b) ch.bits.push_back(unit(rng) < 0.5);
          break;
        }
        case ExcitationKind::constant:
          break;
      }
    }
  }

  std::size_t channels() const { return channels_.size(); }
  const ExcitationSpec& spec() const { return spec_; }

  std::vector<double> value(double t) const {
    std::vector<double> out(channels_.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = channel_value(i, t);
    return out;
  }

  std::vector<double> rate(double t) const {
    std::vector<double> out(channels_.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = channel_rate(i, t);
    return out;
  }

 private:
  struct Channel {
    std::vector<double> freq, phase;
    std::vector<bool> bits;
  };

  double mid(std::size_t i) const { return 0.5 * (spec_.lower[i] + spec_.upper[i]); }
  double half(std::size_t i) const { return 0.5 * (spec_.upper[i] - spec_.lower[i]) * spec_.amplitude; }

  double sweep_rate() const { return spec_.duration > 0.0 ? (spec_.f_high - spec_.f_low) / spec_.duration : 0.0; }

  double channel_value(std::size_t i, double t) const {
    const Channel& ch = channels_[i];
    constexpr double two_pi = 2.0 * std::numbers::pi;
    switch (spec_.kind) {
      case ExcitationKind::chirp: {
        const double arg = two_pi * (spec_.f_low * t + 0.5 * sweep_rate() * t * t) + ch.phase[0];
        return mid(i) + half(i) * std::sin(arg);
      }
      case ExcitationKind::sum_of_sines: {
        double s = 0.0;
        for (std::size_t c = 0; c < ch.freq.size(); ++c) s += std::sin(two_pi * ch.freq[c] * t + ch.phase[c]);
        return mid(i) + half(i) * s / static_cast<double>(ch.freq.size());
      }
      case ExcitationKind::prbs: {
        auto b = static_cast<std::size_t>(std::max(0.0, std::floor(t / spec_.hold)));
        b = std::min(b, ch.bits.size() - 1);
        const double lo = mid(i) - half(i), hi = mid(i) + half(i);
        return ch.bits[b] ? hi : lo;
      }
      case ExcitationKind::constant:
        return mid(i);
    }
    return mid(i);
  }

  double channel_rate(std::size_t i, double t) const {
    const Channel& ch = channels_[i];
    constexpr double two_pi = 2.0 * std::numbers::pi;
    switch (spec_.kind) {
      case ExcitationKind::chirp: {
        const double arg = two_pi * (spec_.f_low * t + 0.5 * sweep_rate() * t * t) + ch.phase[0];
        return half(i) * std::cos(arg) * two_pi * (spec_.f_low + sweep_rate() * t);
      }
      case ExcitationKind::sum_of_sines: {
        double s = 0.0;
        for (std::size_t c = 0; c < ch.freq.size(); ++c) {
          s += two_pi * ch.freq[c] * std::cos(two_pi * ch.freq[c] * t + ch.phase[c]);
        }
        return half(i) * s / static_cast<double>(ch.freq.size());
      }
      default:
        return 0.0;
    }
  }

  ExcitationSpec spec_;
  std::vector<Channel> channels_;
};

}  // namespace exlin::sim
