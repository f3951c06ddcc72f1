#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace exlin::cli {

using json = nlohmann::json;

/// Bad configuration: unknown key, wrong type, missing field, bad value.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Content hash of a configuration, independent of key order and layout.
inline std::string config_hash(const json& config) { return hex64(fnv1a(config.dump())); }

/// Independent stream seed for one consumer of the global seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose) {
  std::uint64_t z = seed ^ fnv1a(purpose);
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Read access to one JSON object that remembers which keys were used, so
/// anything left over can be reported as unknown.
class Section {
 public:
  Section(const json& j, std::string path) : j_(&j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError("'" + where() + "' must be an object");
  }

  bool has(const std::string& key) const { return j_->contains(key); }

  template <class T>
  T get(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    return required<T>(key);
  }

  template <class T>
  T required(const std::string& key) {
    used_.insert(key);
    if (!has(key)) throw ConfigError("missing key '" + child(key) + "'");
    try {
      return j_->at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("key '" + child(key) + "' has the wrong type");
    }
  }

  template <class T>
  std::optional<T> optional(const std::string& key) {
    if (!has(key)) return std::nullopt;
    return required<T>(key);
  }

  Section section(const std::string& key) {
    used_.insert(key);
    if (!has(key)) throw ConfigError("missing section '" + child(key) + "'");
    return Section(j_->at(key), child(key));
  }

  /// Sub-section or an empty object when absent.
  Section section_or_empty(const std::string& key) {
    used_.insert(key);
    return has(key) ? Section(j_->at(key), child(key)) : Section(empty(), child(key));
  }

  const json& raw(const std::string& key) {
    used_.insert(key);
    if (!has(key)) throw ConfigError("missing key '" + child(key) + "'");
    return j_->at(key);
  }

  /// Throws on any key that was never read.
  void finish() const {
    for (const auto& [k, v] : j_->items()) {
      if (!used_.count(k)) throw ConfigError("unknown key '" + child(k) + "'");
    }
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string where() const { return path_.empty() ? "<root>" : path_; }

 private:
  static const json& empty() {
    static const json e = json::object();
    return e;
  }
  const json* j_;
  std::string path_;
  std::set<std::string> used_;
};

inline json read_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
}

/// Writes `<out>/<command>.config.json`: the effective configuration and
/// its hash. No timestamps, so reruns are byte-identical.
inline std::string write_config_echo(const std::filesystem::path& out, const std::string& command, const json& config) {
  const std::string hash = config_hash(config);
  json echo;
  echo["command"] = command;
  echo["config"] = config;
  echo["config_hash"] = hash;
  std::ofstream f(out / (command + ".config.json"), std::ios::binary);
  if (!f) throw std::runtime_error("cannot write config echo in '" + out.string() + "'");
  f << echo.dump(2) << '\n';
  return hash;
}

}  // namespace exlin::cli
