#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "omnimix/config.hpp"
#include "omnimix/params.hpp"

// Checkpoint container, little-endian throughout:
//
//   magic        8 bytes  "OMXCKPT\0"
//   version      u32      kCheckpointVersion
//   meta_len     u64      length of the metadata blob
//   meta         bytes    key = value text: the run config plus meta.* keys
//   count        u32      number of tensors
//   table        count ×  { name_len u32, name bytes, rank u32,
//                           dims u64 × rank, offset u64 }
//   payload      float32 values; offset is in bytes from payload start
//
// Tensors are written in the order given, so a save → load → save round trip
// reproduces the file byte for byte.

namespace omnimix {

inline constexpr char kCheckpointMagic[8] = {'O', 'M', 'X', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

struct CheckpointError : std::runtime_error {
  enum class Kind { io, bad_magic, version, truncated, unknown_tensor, missing_tensor, shape_mismatch };
  CheckpointError(Kind k, const std::string& what) : std::runtime_error(what), kind(k) {}
  Kind kind;
};

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  RunConfig config;
  std::map<std::string, std::string> meta;  // stored as meta.<key> = <value>
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return &t;
    }
    return nullptr;
  }
};

namespace detail {

template <typename V>
void put(std::string& out, V value) {
  char buf[sizeof(V)];
  std::memcpy(buf, &value, sizeof(V));
  out.append(buf, sizeof(V));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}
  template <typename V>
  V get() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t size() const { return bytes_.size(); }
  void need(std::size_t n) const {
    if (n > bytes_.size() - pos_) {
      throw CheckpointError(CheckpointError::Kind::truncated,
                            "checkpoint truncated at byte " + std::to_string(pos_));
    }
  }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::string meta = to_config_text(ck.config);
  for (const auto& [k, v] : ck.meta) meta += "meta." + k + " = " + v + "\n";

  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint64_t>(out, meta.size());
  out += meta;
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(ck.tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& t : ck.tensors) {
    if (numel(t.shape) != t.values.size()) {
      throw ContractError("checkpoint tensor '" + t.name + "' size does not match its shape");
    }
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) detail::put<std::uint64_t>(out, d);
    detail::put<std::uint64_t>(out, offset);
    offset += t.values.size() * sizeof(float);
  }
  for (const auto& t : ck.tensors) {
    out.append(reinterpret_cast<const char*>(t.values.data()), t.values.size() * sizeof(float));
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  using Kind = CheckpointError::Kind;
  detail::Reader r(bytes);
  if (bytes.size() < sizeof(kCheckpointMagic) ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw CheckpointError(Kind::bad_magic, "not a checkpoint (bad magic bytes)");
  }
  r.take(sizeof(kCheckpointMagic));
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError(Kind::version, "checkpoint format version " + std::to_string(version) +
                                             ", expected " + std::to_string(kCheckpointVersion));
  }
  const auto meta_len = r.get<std::uint64_t>();
  const std::string meta = r.take(meta_len);

  Checkpoint ck;
  std::string config_text;
  std::istringstream lines(meta);
  std::string line;
  while (std::getline(lines, line)) {
    if (line.rfind("meta.", 0) == 0) {
      auto eq = line.find('=');
      ck.meta[detail::trim(line.substr(5, eq - 5))] = detail::trim(line.substr(eq + 1));
    } else {
      config_text += line + "\n";
    }
  }
  try {
    ck.config = parse_config(config_text);
  } catch (const ConfigError& e) {
    throw CheckpointError(Kind::version, std::string("checkpoint config is not readable: ") + e.what());
  }

  const auto count = r.get<std::uint32_t>();
  std::vector<std::uint64_t> offsets;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.take(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    if (rank > 16) throw CheckpointError(Kind::truncated, "corrupt tensor table");
    for (std::uint32_t d = 0; d < rank; ++d) t.shape.push_back(r.get<std::uint64_t>());
    offsets.push_back(r.get<std::uint64_t>());
    ck.tensors.push_back(std::move(t));
  }
  const std::size_t payload = r.pos();
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    auto& t = ck.tensors[i];
    const std::size_t n = numel(t.shape);
    const std::size_t begin = payload + offsets[i];
    if (begin > bytes.size() || n * sizeof(float) > bytes.size() - begin) {
      throw CheckpointError(Kind::truncated, "payload of '" + t.name + "' is truncated");
    }
    t.values.resize(n);
    std::memcpy(t.values.data(), bytes.data() + begin, n * sizeof(float));
  }
  return ck;
}

inline void save_checkpoint_file(const std::string& path, const Checkpoint& ck) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError(CheckpointError::Kind::io, "cannot write " + path);
  const auto bytes = encode_checkpoint(ck);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError(CheckpointError::Kind::io, "failed writing " + path);
}

inline Checkpoint load_checkpoint_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError(CheckpointError::Kind::io, "cannot read " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return decode_checkpoint(ss.str());
}

template <typename T>
NamedTensor named(const std::string& name, const Tensor<T>& t) {
  NamedTensor out{name, t.shape(), {}};
  out.values.reserve(t.size());
  for (T v : t.data()) out.values.push_back(static_cast<float>(v));
  return out;
}

template <typename T>
void append_parameters(Checkpoint& ck, const ParameterSet<T>& params) {
  for (const auto& e : params.entries()) ck.tensors.push_back(named(e.name, e.tensor));
}

/// Copies stored values into `params`. Every registry entry must be present
/// with a matching shape; `consumed` collects the names used.
template <typename T>
void restore_parameters(const Checkpoint& ck, ParameterSet<T>& params,
                        std::vector<std::string>* consumed = nullptr) {
  using Kind = CheckpointError::Kind;
  for (const auto& e : params.entries()) {
    const NamedTensor* t = ck.find(e.name);
    if (!t) throw CheckpointError(Kind::missing_tensor, "checkpoint lacks tensor '" + e.name + "'");
    if (t->shape != e.tensor.shape()) {
      throw CheckpointError(Kind::shape_mismatch, "tensor '" + e.name + "' has shape " +
                                                      to_string(t->shape) + ", model expects " +
                                                      to_string(e.tensor.shape()));
    }
    Tensor<T> dst = e.tensor;
    auto out = dst.mutable_data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(t->values[i]);
    if (consumed) consumed->push_back(e.name);
  }
}

}  // namespace omnimix
