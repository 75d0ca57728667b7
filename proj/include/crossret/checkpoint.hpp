#pragma once

// Binary checkpoint container.
//
//   "CRCK" | u32 version | u64 len | encoder config JSON
//   u64 tensor_count | per tensor: u64 len | name | u64 rows | u64 cols | rows*cols f64
//
// Integers and doubles are little-endian; tensors are stored row-major.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "crossret/encoders.hpp"
#include "crossret/errors.hpp"

namespace crossret {

inline constexpr char kCheckpointMagic[4] = {'C', 'R', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::string& buf, T v) {
  char raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  buf.append(raw, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& buf) : buf_(buf) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw IncompatibleCheckpoint("truncated checkpoint");
  }
  const std::string& buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Model& model) {
  std::string buf(kCheckpointMagic, 4);
  detail::put<std::uint32_t>(buf, kCheckpointVersion);
  const std::string cfg = to_json(model.config).dump();
  detail::put<std::uint64_t>(buf, cfg.size());
  buf += cfg;
  detail::put<std::uint64_t>(buf, model.params.size());
  for (const auto& [name, m] : model.params) {
    detail::put<std::uint64_t>(buf, name.size());
    buf += name;
    detail::put<std::uint64_t>(buf, static_cast<std::uint64_t>(m.rows()));
    detail::put<std::uint64_t>(buf, static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) detail::put<double>(buf, m(r, c));
  }
  return buf;
}

/// Parses a checkpoint and checks that its tensors match the shapes its own
/// config implies.
inline Model deserialize_checkpoint(const std::string& buf) {
  detail::Reader in(buf);
  if (in.bytes(4) != std::string(kCheckpointMagic, 4)) throw IncompatibleCheckpoint("bad checkpoint magic");
  if (const auto v = in.get<std::uint32_t>(); v != kCheckpointVersion)
    throw IncompatibleCheckpoint("unsupported checkpoint version " + std::to_string(v));
  Model model;
  const auto cfg_len = in.get<std::uint64_t>();
  try {
    model.config = encoder_config_from_json(nlohmann::json::parse(in.bytes(cfg_len)));
  } catch (const nlohmann::json::exception& e) {
    throw IncompatibleCheckpoint(std::string("bad checkpoint config: ") + e.what());
  }
  const auto count = in.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = in.bytes(in.get<std::uint64_t>());
    const auto rows = static_cast<Eigen::Index>(in.get<std::uint64_t>());
    const auto cols = static_cast<Eigen::Index>(in.get<std::uint64_t>());
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = in.get<double>();
    model.params.emplace(std::move(name), std::move(m));
  }
  if (!in.done()) throw IncompatibleCheckpoint("trailing bytes after checkpoint");

  const ParamStore expected = init_params(model.config);
  if (expected.size() != model.params.size()) throw IncompatibleCheckpoint("parameter set does not match config");
  for (const auto& [name, m] : expected) {
    auto it = model.params.find(name);
    if (it == model.params.end()) throw IncompatibleCheckpoint("missing parameter '" + name + "'");
    if (it->second.rows() != m.rows() || it->second.cols() != m.cols())
      throw IncompatibleCheckpoint("shape mismatch for '" + name + "'");
  }
  return model;
}

inline void save_checkpoint(const std::string& path, const Model& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint '" + path + "'");
  const std::string buf = serialize_checkpoint(model);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("checkpoint", "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

/// FNV-1a over the serialized bytes, as 16 hex digits.
inline std::string checkpoint_id(const Model& model) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : serialize_checkpoint(model)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << h;
  return ss.str();
}

}  // namespace crossret
