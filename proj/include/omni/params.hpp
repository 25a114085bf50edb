#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "omni/autodiff.hpp"
#include "omni/errors.hpp"
#include "omni/tensor.hpp"

namespace omni {

/// Named parameter tensors. Ordered so iteration, serialization and
/// random initialization are deterministic.
using ParamSet = std::map<std::string, Matrix>;
using GradMap = std::map<std::string, Matrix>;

/// Parameter group of a tensor name: everything before the first '.'.
inline std::string group_of(const std::string& name) { return name.substr(0, name.find('.')); }

inline GradMap zeros_like(const ParamSet& params) {
  GradMap out;
  for (const auto& [name, m] : params) out.emplace(name, Matrix(m.rows(), m.cols()));
  return out;
}

/// Lazily places parameters on a tape. With trainable = false every tensor
/// enters as a constant and no gradient bookkeeping happens.
class ParamBinder {
 public:
  ParamBinder(ad::Tape& tape, const ParamSet& params, bool trainable = true)
      : tape_(tape), params_(params), trainable_(trainable) {}

  ad::Var operator()(const std::string& name) {
    if (auto it = bound_.find(name); it != bound_.end()) return it->second;
    auto p = params_.find(name);
    if (p == params_.end()) {
      throw DimensionError(DimensionErrorKind::ShapeMismatch, "missing parameter '" + name + "'");
    }
    ad::Var v = trainable_ ? tape_.leaf(p->second) : tape_.constant(p->second);
    bound_.emplace(name, v);
    return v;
  }

  bool used(const std::string& name) const { return bound_.contains(name); }

  /// Gradient for every parameter in the set; tensors the forward pass
  /// never touched get exact zeros.
  GradMap gradients() const {
    GradMap out;
    for (const auto& [name, m] : params_) {
      auto it = bound_.find(name);
      out.emplace(name, it == bound_.end() ? Matrix(m.rows(), m.cols()) : tape_.gradient(it->second));
    }
    return out;
  }

  ad::Tape& tape() { return tape_; }

 private:
  ad::Tape& tape_;
  const ParamSet& params_;
  bool trainable_;
  std::map<std::string, ad::Var> bound_;
};

// ---------------------------------------------------------------------------
// Checkpoints: "OMNICKPT" magic, little-endian u64 header length, a JSON
// header {version, dtype, meta, tensors:[{name, shape, offset}]}, then every
// tensor as raw little-endian float64 in header order. offset counts
// elements from the start of the payload.

class CheckpointError : public Error {
 public:
  using Error::Error;
};

inline constexpr std::array<char, 8> kCheckpointMagic{'O', 'M', 'N', 'I', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

inline void write_checkpoint(const std::string& path, const ParamSet& params,
                             const nlohmann::json& meta = nlohmann::json::object()) {
  nlohmann::json header;
  header["version"] = 1;
  header["dtype"] = "float64";
  header["meta"] = meta;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : params) {
    header["tensors"].push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"offset", offset}});
    offset += m.size();
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open '" + path + "' for writing");
  out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, m] : params) {
    out.write(reinterpret_cast<const char*>(m.flat().data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  }
  if (!out) throw CheckpointError("write failed for '" + path + "'");
}

struct Checkpoint {
  ParamSet params;
  nlohmann::json meta;
};

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open '" + path + "'");
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kCheckpointMagic) throw CheckpointError("'" + path + "' is not a checkpoint (bad magic)");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len > (1u << 26)) throw CheckpointError("'" + path + "': corrupt header length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw CheckpointError("'" + path + "': truncated header");

  Checkpoint ck;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("'" + path + "': header is not JSON: " + e.what());
  }
  if (header.value("dtype", "") != "float64") throw CheckpointError("'" + path + "': unsupported dtype");
  ck.meta = header.value("meta", nlohmann::json::object());
  std::uint64_t expected = 0;
  for (const auto& t : header.at("tensors")) {
    const auto name = t.at("name").get<std::string>();
    const auto shape = t.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 2) throw CheckpointError("tensor '" + name + "' is not 2-D");
    if (t.at("offset").get<std::uint64_t>() != expected) throw CheckpointError("tensor '" + name + "' has a bad offset");
    Matrix m(shape[0], shape[1]);
    in.read(reinterpret_cast<char*>(m.flat().data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in) throw CheckpointError("'" + path + "': payload truncated at '" + name + "'");
    expected += m.size();
    ck.params.emplace(name, std::move(m));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError("'" + path + "': trailing bytes after payload");
  return ck;
}

/// Throws unless `loaded` has exactly the tensor names and shapes of `expected`.
inline void require_same_layout(const ParamSet& expected, const ParamSet& loaded) {
  for (const auto& [name, m] : expected) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw CheckpointError("checkpoint is missing tensor '" + name + "'");
    if (!it->second.same_shape(m)) {
      throw CheckpointError("tensor '" + name + "' has shape " + shape_str(it->second) + ", expected " + shape_str(m));
    }
  }
  for (const auto& [name, m] : loaded) {
    if (!expected.contains(name)) throw CheckpointError("unexpected tensor '" + name + "' in checkpoint");
  }
}

}  // namespace omni
