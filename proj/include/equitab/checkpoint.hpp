#pragma once

// Checkpoint file layout:
//   line 1: "equitab-checkpoint v1"
//   meta lines: "model <selector>", "step <n>", "seed <u64>",
//               "config <key> <value>" (sorted by key)
//   one line per tensor: "tensor <name> <rank> <extent...>"
//   blank line
//   payload: raw little-endian 32-bit floats, concatenated in header order.
//
// The layout is bit-exact and human-inspectable; save -> load -> save
// reproduces the file byte for byte. Training randomness is a pure function
// of (seed, step), so (seed, step) is the complete RNG state.

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "equitab/errors.hpp"
#include "equitab/kvconfig.hpp"
#include "equitab/tensor.hpp"

namespace equitab {

struct Checkpoint {
  int version = 1;
  std::string model;  // "equitab" | "fixedq"
  KvMap config;
  long step = 0;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, Tensorf>> tensors;

  const Tensorf* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace detail {

inline void append_le_f32(std::string* out, float v) {
  static_assert(sizeof(float) == 4);
  unsigned char b[4];
  std::memcpy(b, &v, 4);
  if constexpr (std::endian::native == std::endian::big) std::swap(b[0], b[3]), std::swap(b[1], b[2]);
  out->append(reinterpret_cast<const char*>(b), 4);
}

inline float read_le_f32(const char* p) {
  unsigned char b[4];
  std::memcpy(b, p, 4);
  if constexpr (std::endian::native == std::endian::big) std::swap(b[0], b[3]), std::swap(b[1], b[2]);
  float v;
  std::memcpy(&v, b, 4);
  return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::ostringstream header;
  header << "equitab-checkpoint v" << ckpt.version << "\n";
  header << "model " << ckpt.model << "\n";
  header << "step " << ckpt.step << "\n";
  header << "seed " << ckpt.seed << "\n";
  for (const auto& [k, v] : ckpt.config) header << "config " << k << " " << v << "\n";
  for (const auto& [name, t] : ckpt.tensors) {
    header << "tensor " << name << " " << t.rank();
    for (Index e : t.shape()) header << " " << e;
    header << "\n";
  }
  header << "\n";
  std::string out = header.str();
  for (const auto& [name, t] : ckpt.tensors) {
    (void)name;
    for (Index i = 0; i < t.numel(); ++i) detail::append_le_f32(&out, t.at(i));
  }
  return out;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw CheckpointError(CheckpointError::Kind::io,
                          "cannot write checkpoint '" + path + "'");
  out << serialize_checkpoint(ckpt);
}

inline Checkpoint parse_checkpoint(const std::string& bytes,
                                   const std::string& source) {
  Checkpoint ckpt;
  std::size_t pos = 0;
  auto next_line = [&]() -> std::string {
    const std::size_t nl = bytes.find('\n', pos);
    if (nl == std::string::npos)
      throw CheckpointError(CheckpointError::Kind::corrupt_header,
                            source + ": header not terminated by a blank line");
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };

  {
    const std::string first = next_line();
    std::istringstream is(first);
    std::string magic, ver;
    is >> magic >> ver;
    if (magic != "equitab-checkpoint")
      throw CheckpointError(CheckpointError::Kind::corrupt_header,
                            source + ": not a checkpoint file");
    if (ver != "v1")
      throw CheckpointError(CheckpointError::Kind::version_mismatch,
                            source + ": unsupported version '" + ver + "'");
  }

  std::vector<std::pair<std::string, Shape>> tensor_specs;
  for (;;) {
    const std::string line = next_line();
    if (line.empty()) break;
    std::istringstream is(line);
    std::string kind;
    is >> kind;
    if (kind == "model") {
      is >> ckpt.model;
    } else if (kind == "step") {
      is >> ckpt.step;
    } else if (kind == "seed") {
      is >> ckpt.seed;
    } else if (kind == "config") {
      std::string key;
      is >> key;
      std::string value;
      std::getline(is, value);
      ckpt.config[key] = detail::kv_trim(value);
    } else if (kind == "tensor") {
      std::string name;
      Index rank = -1;
      is >> name >> rank;
      if (name.empty() || rank < 0)
        throw CheckpointError(CheckpointError::Kind::corrupt_header,
                              source + ": malformed tensor line '" + line + "'");
      Shape shape(static_cast<std::size_t>(rank));
      for (Index i = 0; i < rank; ++i) {
        if (!(is >> shape[static_cast<std::size_t>(i)]) ||
            shape[static_cast<std::size_t>(i)] < 0)
          throw CheckpointError(CheckpointError::Kind::corrupt_header,
                                source + ": malformed tensor line '" + line + "'");
      }
      Index trailing = 0;
      if (is >> trailing)
        throw CheckpointError(CheckpointError::Kind::tensor_mismatch,
                              source + ": tensor line '" + line +
                                  "' has more extents than its rank");
      for (const auto& [n, s] : tensor_specs) {
        (void)s;
        if (n == name)
          throw CheckpointError(CheckpointError::Kind::tensor_mismatch,
                                source + ": duplicate tensor '" + name + "'");
      }
      tensor_specs.emplace_back(name, std::move(shape));
    } else {
      throw CheckpointError(CheckpointError::Kind::corrupt_header,
                            source + ": unknown header line '" + line + "'");
    }
  }
  if (ckpt.model.empty())
    throw CheckpointError(CheckpointError::Kind::corrupt_header,
                          source + ": missing model selector");

  std::size_t total = 0;
  for (const auto& [name, shape] : tensor_specs) {
    (void)name;
    total += static_cast<std::size_t>(shape_numel(shape));
  }
  const std::size_t want = total * 4;
  const std::size_t have = bytes.size() - pos;
  if (have < want)
    throw CheckpointError(CheckpointError::Kind::truncated_payload,
                          source + ": payload holds " + std::to_string(have) +
                              " bytes, header promises " + std::to_string(want));
  if (have > want)
    throw CheckpointError(CheckpointError::Kind::tensor_mismatch,
                          source + ": payload holds " + std::to_string(have) +
                              " bytes, header promises only " +
                              std::to_string(want));
  for (const auto& [name, shape] : tensor_specs) {
    Tensorf t = Tensorf::zeros(shape);
    for (Index i = 0; i < t.numel(); ++i) {
      t.at(i) = detail::read_le_f32(bytes.data() + pos);
      pos += 4;
    }
    ckpt.tensors.emplace_back(name, std::move(t));
  }
  return ckpt;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw CheckpointError(CheckpointError::Kind::io,
                          "cannot read checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str(), path);
}

}  // namespace equitab
