#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "exlin/model/el_model.hpp"

namespace exlin::model {

static_assert(std::endian::native == std::endian::little, "model files are written in little-endian byte order");

/// Raised for unreadable or inconsistent model files.
class ModelFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Model file layout (all integers u32, all reals f64, little-endian):
///
///   "EXLM"  version  n m l p  bnn_layers dbnn_layers picnn_layers hidden
///   tensor_count  { name_length name rows cols values[rows*cols] }*
///
/// Tensors include the feature scalers ("scaler.*") and every parameter.
inline constexpr std::uint32_t kModelFormatVersion = 1;

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
inline std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), 4)) throw ModelFormatError("model file truncated");
  return v;
}
inline std::uint32_t narrow(std::size_t v) {
  if (v > 0xffffffffu) throw ModelFormatError("value too large for model file");
  return static_cast<std::uint32_t>(v);
}

}  // namespace detail

inline void write_model(std::ostream& out, const ELModel& model) {
  out.write("EXLM", 4);
  detail::put_u32(out, kModelFormatVersion);
  const Dims& d = model.dims();
  const Architecture& a = model.architecture();
  for (std::size_t v : {d.n, d.m, d.l, d.p, a.bnn_layers, a.dbnn_layers, a.picnn_layers, a.hidden}) {
    detail::put_u32(out, detail::narrow(v));
  }
  std::vector<std::pair<std::string, const Tensor*>> tensors;
  auto collect = [&](const std::string& name, const Tensor& t) { tensors.emplace_back(name, &t); };
  model.for_each_scaler(collect);
  model.for_each_param(collect);
  detail::put_u32(out, detail::narrow(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put_u32(out, detail::narrow(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u32(out, detail::narrow(t->rows()));
    detail::put_u32(out, detail::narrow(t->cols()));
    out.write(reinterpret_cast<const char*>(t->values().data()), static_cast<std::streamsize>(t->size() * sizeof(double)));
  }
  if (!out) throw ModelFormatError("model write failed");
}

inline ELModel read_model(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "EXLM", 4) != 0) throw ModelFormatError("not a model file (bad magic)");
  const std::uint32_t version = detail::get_u32(in);
  if (version != kModelFormatVersion) {
    throw ModelFormatError("unsupported model format version " + std::to_string(version));
  }
  Dims d;
  Architecture a;
  d.n = detail::get_u32(in);
  d.m = detail::get_u32(in);
  d.l = detail::get_u32(in);
  d.p = detail::get_u32(in);
  a.bnn_layers = detail::get_u32(in);
  a.dbnn_layers = detail::get_u32(in);
  a.picnn_layers = detail::get_u32(in);
  a.hidden = detail::get_u32(in);
  if (d.n > 4096 || d.m > 4096 || d.l > 4096 || d.p > 4096 || a.hidden > 65536 || a.bnn_layers > 256 ||
      a.dbnn_layers > 256 || a.picnn_layers > 256) {
    throw ModelFormatError("implausible model dimensions");
  }
  ELModel model;
  try {
    model = ELModel(d, a);
  } catch (const std::exception& e) {
    throw ModelFormatError(std::string("invalid model header: ") + e.what());
  }
  std::map<std::string, Tensor*> slots;
  auto collect = [&](const std::string& name, Tensor& t) { slots.emplace(name, &t); };
  model.for_each_scaler(collect);
  model.for_each_param(collect);

  const std::uint32_t count = detail::get_u32(in);
  if (count != slots.size()) {
    throw ModelFormatError("model file has " + std::to_string(count) + " tensors, expected " + std::to_string(slots.size()));
  }
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint32_t len = detail::get_u32(in);
    if (len > 4096) throw ModelFormatError("tensor name too long");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw ModelFormatError("model file truncated");
    auto it = slots.find(name);
    if (it == slots.end()) throw ModelFormatError("unexpected tensor '" + name + "'");
    Tensor& t = *it->second;
    const std::uint32_t rows = detail::get_u32(in), cols = detail::get_u32(in);
    if (rows != t.rows() || cols != t.cols()) {
      throw ModelFormatError("tensor '" + name + "' has shape " + std::to_string(rows) + "x" + std::to_string(cols) +
                             ", expected " + t.shape_string());
    }
    if (!in.read(reinterpret_cast<char*>(t.values().data()), static_cast<std::streamsize>(t.size() * sizeof(double)))) {
      throw ModelFormatError("model file truncated");
    }
    slots.erase(it);
  }
  return model;
}

inline void save_model(const std::string& path, const ELModel& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ModelFormatError("cannot write model file '" + path + "'");
  write_model(out, model);
}

inline ELModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ModelFormatError("cannot open model file '" + path + "'");
  return read_model(in);
}

}  // namespace exlin::model
