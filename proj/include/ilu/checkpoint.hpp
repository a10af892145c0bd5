#pragma once

// Binary checkpoint format (all integers little-endian):
//
//   "ILUCKPT1"                      8 bytes magic
//   u32 version                     currently 1
//   u32 n, n bytes                  UTF-8 JSON model config descriptor
//   per tensor, in layout order:
//     u32 n, n bytes                tensor name
//     u32 rank, rank x u32 dims
//     prod(dims) x f32              values
//   u32 crc32                       CRC-32 (IEEE) of every preceding byte
//
// Values are stored as 32-bit floats; loading widens them back to double.

#include <boost/crc.hpp>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ilu/error.hpp"
#include "ilu/models.hpp"

namespace ilu {

inline constexpr std::string_view kCheckpointMagic = "ILUCKPT1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }
  std::vector<char>& bytes() { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<char>& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return end_ - pos_; }

  std::uint32_t u32() {
    need(4, "u32");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string raw(std::size_t n, const char* what) {
    need(n, what);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::string str(const char* what) {
    const std::size_t at = pos_;
    const std::uint32_t n = u32();
    if (n > remaining()) throw FormatError(std::string("truncated ") + what, at);
    return raw(n, what);
  }

 private:
  void need(std::size_t n, const char* what) {
    if (n > remaining()) throw FormatError(std::string("truncated checkpoint reading ") + what, pos_);
  }

  const std::vector<char>& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32(const char* data, std::size_t n) {
  boost::crc_32_type crc;
  crc.process_bytes(data, n);
  return crc.checksum();
}

}  // namespace detail

inline std::vector<char> encode_checkpoint(const ParameterVector& params) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.str(nlohmann::json(params.config()).dump());
  for (std::size_t i = 0; i < params.layout().specs.size(); ++i) {
    const auto& spec = params.layout().specs[i];
    w.str(spec.name);
    w.u32(static_cast<std::uint32_t>(spec.shape.size()));
    for (auto d : spec.shape) w.u32(static_cast<std::uint32_t>(d));
    for (double v : params.tensor(i)) w.f32(static_cast<float>(v));
  }
  auto& bytes = w.bytes();
  const std::uint32_t crc = detail::crc32(bytes.data(), bytes.size());
  w.u32(crc);
  return std::move(bytes);
}

inline ParameterVector decode_checkpoint(const std::vector<char>& bytes) {
  if (bytes.size() < kCheckpointMagic.size() + 8) {
    throw FormatError("checkpoint too short (" + std::to_string(bytes.size()) + " bytes)",
                      bytes.size());
  }
  if (std::string_view(bytes.data(), kCheckpointMagic.size()) != kCheckpointMagic) {
    throw FormatError("bad magic: expected \"" + std::string(kCheckpointMagic) + "\"", 0);
  }
  const std::size_t body = bytes.size() - 4;
  detail::ByteReader r(bytes, body);
  r.raw(kCheckpointMagic.size(), "magic");
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), version_at);
  }
  // Checked before parsing the body so that corruption anywhere is reported
  // as such rather than as a confusing structural error.
  std::uint32_t stored_crc = 0;
  for (int i = 0; i < 4; ++i) {
    stored_crc |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[body + i])) << (8 * i);
  }
  if (stored_crc != detail::crc32(bytes.data(), body)) {
    throw FormatError("CRC mismatch", body);
  }

  const std::size_t config_at = r.offset();
  ModelConfig config;
  try {
    config = nlohmann::json::parse(r.str("config descriptor")).get<ModelConfig>();
    config.validate();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid config descriptor: ") + e.what(), config_at);
  } catch (const ArgumentError& e) {
    throw FormatError(std::string("invalid config descriptor: ") + e.what(), config_at);
  }
  ParameterVector params(make_layout(config));
  for (std::size_t i = 0; i < params.layout().specs.size(); ++i) {
    const auto& spec = params.layout().specs[i];
    const std::size_t at = r.offset();
    const std::string name = r.str("tensor name");
    if (name != spec.name) {
      throw FormatError("expected tensor '" + spec.name + "', found '" + name + "'", at);
    }
    const std::size_t rank_at = r.offset();
    const std::uint32_t rank = r.u32();
    if (rank != spec.shape.size()) throw FormatError("rank mismatch for " + name, rank_at);
    for (auto d : spec.shape) {
      const std::size_t dim_at = r.offset();
      if (r.u32() != d) throw FormatError("dimension mismatch for " + name, dim_at);
    }
    for (double& v : params.tensor(i)) v = static_cast<double>(r.f32());
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after last tensor", r.offset());
  require_finite(params.values(), "checkpoint");
  return params;
}

/// Round every parameter to the precision a checkpoint stores.
inline ParameterVector to_stored_precision(const ParameterVector& params) {
  ParameterVector out = params;
  for (double& v : out.values()) v = static_cast<double>(static_cast<float>(v));
  return out;
}

inline void save_checkpoint(const ParameterVector& params, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(params);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline std::vector<char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline ParameterVector load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path));
}

}  // namespace ilu
