#pragma once

// GRFT weight files.
//
//   "GRFT" | version u32 | record count u32 | records... | crc32 u32
//   record: name_len u16 | name (UTF-8) | dtype u8 | rank u8 | dims u32[rank]
//           | payload (little-endian)
//
// dtype 0 is f32. dtype 1 is raw bytes and is used only for the optional
// "__meta__" record, a JSON document describing what the tensors are.
// All integers are little-endian; the CRC covers every preceding byte.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "graftnet/error.hpp"
#include "graftnet/tensor.hpp"

namespace graftnet {

static_assert(std::endian::native == std::endian::little,
              "weight files are written with native little-endian layout");

inline constexpr char kWeightMagic[4] = {'G', 'R', 'F', 'T'};
inline constexpr std::uint32_t kWeightVersion = 1;
inline constexpr std::string_view kMetaRecord = "__meta__";

enum class DType : std::uint8_t { kF32 = 0, kBytes = 1 };

using NamedTensors = std::map<std::string, Tensor>;

struct WeightFile {
  NamedTensors tensors;
  std::string metadata;  // JSON text; empty means no meta record
};

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for very large buffers.
  std::size_t offset = 0;
  while (offset < bytes.size()) {
    const std::size_t chunk =
        std::min<std::size_t>(bytes.size() - offset, 1u << 30);
    crc = ::crc32(crc, bytes.data() + offset, static_cast<uInt>(chunk));
    offset += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

namespace detail {

class ByteWriter {
 public:
  template <class U>
  void put(U v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(U));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  std::vector<std::uint8_t>& bytes() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <class U>
  U get() {
    U v;
    take(&v, sizeof(U));
    return v;
  }
  void take(void* out, std::size_t n) {
    if (n > bytes_.size() - pos_) {
      throw Error(ErrorCode::kDecode, "weight file record runs past the end");
    }
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline void write_record_header(ByteWriter& w, const std::string& name,
                                DType dtype, const Shape& dims) {
  if (name.size() > 0xFFFF) {
    throw Error(ErrorCode::kInvalidArgument, "record name too long: " + name);
  }
  if (dims.size() > 0xFF) {
    throw Error(ErrorCode::kInvalidArgument, "tensor rank too large: " + name);
  }
  w.put(static_cast<std::uint16_t>(name.size()));
  w.put_bytes(name.data(), name.size());
  w.put(static_cast<std::uint8_t>(dtype));
  w.put(static_cast<std::uint8_t>(dims.size()));
  for (auto d : dims) w.put(static_cast<std::uint32_t>(d));
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_weights(const WeightFile& file) {
  detail::ByteWriter w;
  w.put_bytes(kWeightMagic, 4);
  w.put(kWeightVersion);
  const std::size_t count = file.tensors.size() + (file.metadata.empty() ? 0 : 1);
  w.put(static_cast<std::uint32_t>(count));
  if (!file.metadata.empty()) {
    detail::write_record_header(w, std::string(kMetaRecord), DType::kBytes,
                                {file.metadata.size()});
    w.put_bytes(file.metadata.data(), file.metadata.size());
  }
  for (const auto& [name, t] : file.tensors) {
    detail::write_record_header(w, name, DType::kF32, t.shape());
    w.put_bytes(t.raw(), t.numel() * sizeof(float));
  }
  const auto crc = crc32_of(w.bytes());
  w.put(crc);
  return std::move(w.bytes());
}

inline WeightFile deserialize_weights(std::span<const std::uint8_t> bytes) {
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), kWeightMagic, 4) != 0) {
    std::string got(reinterpret_cast<const char*>(bytes.data()), 4);
    throw Error(ErrorCode::kBadMagic, "not a GRFT weight file (magic '" + got + "')");
  }
  if (bytes.size() < 16) {
    throw Error(ErrorCode::kCrcMismatch, "weight file truncated (" +
                                             std::to_string(bytes.size()) +
                                             " bytes)");
  }
  const auto body = bytes.first(bytes.size() - 4);
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body.size(), 4);
  if (crc32_of(body) != stored) {
    throw Error(ErrorCode::kCrcMismatch, "weight file CRC mismatch");
  }
  detail::ByteReader r(body);
  char magic[4];
  r.take(magic, 4);
  const auto version = r.get<std::uint32_t>();
  if (version != kWeightVersion) {
    throw Error(ErrorCode::kBadVersion,
                "unsupported weight file version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>();
  WeightFile file;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint16_t>();
    std::string name(name_len, '\0');
    r.take(name.data(), name_len);
    const auto dtype = r.get<std::uint8_t>();
    const auto rank = r.get<std::uint8_t>();
    Shape dims(rank);
    for (auto& d : dims) d = r.get<std::uint32_t>();
    if (dtype == static_cast<std::uint8_t>(DType::kBytes)) {
      if (name != kMetaRecord || rank != 1) {
        throw Error(ErrorCode::kDecode, "unexpected byte record '" + name + "'");
      }
      file.metadata.assign(dims[0], '\0');
      r.take(file.metadata.data(), dims[0]);
      continue;
    }
    if (dtype != static_cast<std::uint8_t>(DType::kF32)) {
      throw Error(ErrorCode::kDecode, "unknown dtype " + std::to_string(dtype) +
                                          " for record '" + name + "'");
    }
    std::vector<float> data(shape_numel(dims));
    r.take(data.data(), data.size() * sizeof(float));
    if (!file.tensors.emplace(name, Tensor(dims, std::move(data))).second) {
      throw Error(ErrorCode::kDecode, "duplicate record '" + name + "'");
    }
  }
  if (r.pos() != body.size()) {
    throw Error(ErrorCode::kDecode, "trailing bytes after last record");
  }
  return file;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error(ErrorCode::kMissingFile, "cannot open " + path.string());
  }
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path,
                             std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "short write to " + path.string());
}

inline void save_weights(const std::filesystem::path& path, const WeightFile& file) {
  write_file_bytes(path, serialize_weights(file));
}

inline WeightFile load_weights(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return deserialize_weights(bytes);
}

}  // namespace graftnet
