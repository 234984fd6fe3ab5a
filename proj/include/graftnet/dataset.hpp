#pragma once

// Dataset manifests and image loading.
//
// A manifest describes one single-label sub-dataset:
//
//   {
//     "attribute": "stripes",
//     "classes": ["horizontal", "vertical"],
//     "train": [{"path": "train/000000.ppm", "class_index": 0}, ...],
//     "test":  [{"path": "test/000000.ppm",  "class_index": 1}, ...],
//     "provenance": { ... optional, free-form ... }
//   }
//
// Relative paths resolve against the manifest's directory. Images are
// binary PPM (P6, 8-bit) or raw tensors: "GRAW" | rank u32 | dims u32[rank]
// | little-endian f32 payload.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "graftnet/error.hpp"
#include "graftnet/tensor.hpp"
#include "graftnet/weights_io.hpp"

namespace graftnet {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct ManifestEntry {
  std::string path;
  int class_index = 0;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct SplitCounts {
  std::size_t positive = 0;
  std::size_t negative = 0;
};

struct DatasetManifest {
  std::string attribute;
  std::vector<std::string> classes;
  std::vector<ManifestEntry> train;
  std::vector<ManifestEntry> test;
  json provenance = json::object();
  fs::path base_dir;  // directory relative paths resolve against

  fs::path resolve(const std::string& path) const {
    fs::path p(path);
    return p.is_absolute() ? p : base_dir / p;
  }

  /// Train/test positive/negative counts recorded in the provenance notes,
  /// e.g. {"train_counts": {"pos": 110147, "neg": 510938}}.
  std::optional<SplitCounts> provenance_counts(const std::string& split) const {
    const auto key = split + "_counts";
    if (!provenance.is_object() || !provenance.contains(key)) return std::nullopt;
    const auto& c = provenance.at(key);
    return SplitCounts{c.at("pos").get<std::size_t>(), c.at("neg").get<std::size_t>()};
  }

  friend bool operator==(const DatasetManifest& a, const DatasetManifest& b) {
    return a.attribute == b.attribute && a.classes == b.classes && a.train == b.train &&
           a.test == b.test && a.provenance == b.provenance;
  }
};

inline void validate_manifest(const DatasetManifest& m, bool check_files) {
  if (m.attribute.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "manifest has no attribute name");
  }
  if (m.classes.size() < 2 || m.classes.size() > 3) {
    throw Error(ErrorCode::kInvalidArgument,
                "manifest '" + m.attribute + "' must list 2 or 3 classes");
  }
  std::set<std::string> train_paths;
  auto check = [&](const std::vector<ManifestEntry>& split, const char* name) {
    for (const auto& e : split) {
      if (e.class_index < 0 || static_cast<std::size_t>(e.class_index) >= m.classes.size()) {
        throw Error(ErrorCode::kUnknownClassIndex,
                    std::string(name) + " entry '" + e.path + "' has class_index " +
                        std::to_string(e.class_index) + " but only " +
                        std::to_string(m.classes.size()) + " classes");
      }
      if (check_files && !fs::exists(m.resolve(e.path))) {
        throw Error(ErrorCode::kMissingFile, "image not found: " + m.resolve(e.path).string());
      }
    }
  };
  check(m.train, "train");
  check(m.test, "test");
  for (const auto& e : m.train) train_paths.insert(e.path);
  for (const auto& e : m.test) {
    if (train_paths.count(e.path)) {
      throw Error(ErrorCode::kDuplicatePath,
                  "path '" + e.path + "' appears in both train and test");
    }
  }
}

inline json manifest_to_json(const DatasetManifest& m) {
  auto split = [](const std::vector<ManifestEntry>& entries) {
    json a = json::array();
    for (const auto& e : entries) a.push_back({{"path", e.path}, {"class_index", e.class_index}});
    return a;
  };
  json j{{"attribute", m.attribute},
         {"classes", m.classes},
         {"train", split(m.train)},
         {"test", split(m.test)}};
  if (!m.provenance.empty()) j["provenance"] = m.provenance;
  return j;
}

inline DatasetManifest manifest_from_json(const json& j, const fs::path& base_dir) {
  DatasetManifest m;
  try {
    m.attribute = j.at("attribute").get<std::string>();
    m.classes = j.at("classes").get<std::vector<std::string>>();
    for (const char* split : {"train", "test"}) {
      auto& dst = std::string(split) == "train" ? m.train : m.test;
      for (const auto& e : j.at(split))
        dst.push_back({e.at("path").get<std::string>(), e.at("class_index").get<int>()});
    }
    m.provenance = j.value("provenance", json::object());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kDecode, std::string("malformed manifest: ") + e.what());
  }
  m.base_dir = base_dir;
  return m;
}

inline DatasetManifest load_manifest(const fs::path& path, bool check_files = true) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kMissingFile, "cannot open manifest " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kDecode, "manifest " + path.string() + ": " + e.what());
  }
  auto m = manifest_from_json(j, path.parent_path());
  validate_manifest(m, check_files);
  return m;
}

inline void write_manifest(const DatasetManifest& m, const fs::path& path) {
  validate_manifest(m, false);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write manifest " + path.string());
  out << manifest_to_json(m).dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Images.

inline constexpr char kRawMagic[4] = {'G', 'R', 'A', 'W'};

inline std::string describe_magic(const std::vector<std::uint8_t>& bytes) {
  std::ostringstream os;
  os << std::hex;
  for (std::size_t i = 0; i < std::min<std::size_t>(4, bytes.size()); ++i)
    os << (i ? " " : "") << "0x" << static_cast<int>(bytes[i]);
  return os.str();
}

namespace detail {

// Reads one whitespace-delimited header token, skipping '#' comments.
inline std::string ppm_token(const std::vector<std::uint8_t>& b, std::size_t& pos) {
  while (pos < b.size()) {
    if (b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
    } else if (std::isspace(b[pos])) {
      ++pos;
    } else {
      break;
    }
  }
  std::string tok;
  while (pos < b.size() && !std::isspace(b[pos]) && b[pos] != '#')
    tok.push_back(static_cast<char>(b[pos++]));
  return tok;
}

inline std::size_t ppm_number(const std::vector<std::uint8_t>& b, std::size_t& pos,
                              const std::string& ref) {
  const auto tok = ppm_token(b, pos);
  std::size_t v = 0;
  try {
    v = std::stoul(tok);
  } catch (...) {
    throw Error(ErrorCode::kDecode, "bad PPM header in " + ref);
  }
  return v;
}

}  // namespace detail

inline Tensor decode_ppm(const std::vector<std::uint8_t>& b, const std::string& ref) {
  std::size_t pos = 2;
  const auto width = detail::ppm_number(b, pos, ref);
  const auto height = detail::ppm_number(b, pos, ref);
  const auto maxval = detail::ppm_number(b, pos, ref);
  if (width == 0 || height == 0 || maxval == 0 || maxval > 255) {
    throw Error(ErrorCode::kDecode, "unsupported PPM geometry in " + ref);
  }
  ++pos;  // single whitespace byte before the raster
  const std::size_t need = width * height * 3;
  if (pos > b.size() || b.size() - pos < need) {
    throw Error(ErrorCode::kDecode, "truncated PPM payload in " + ref);
  }
  Tensor t({3, height, width});
  const float scale = 1.0f / static_cast<float>(maxval);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        t[(c * height + y) * width + x] =
            static_cast<float>(b[pos + (y * width + x) * 3 + c]) * scale;
  return t;
}

inline Tensor decode_raw(const std::vector<std::uint8_t>& b, const std::string& ref) {
  detail::ByteReader r(b);
  try {
    char magic[4];
    r.take(magic, 4);
    const auto rank = r.get<std::uint32_t>();
    if (rank == 0 || rank > 8) throw Error(ErrorCode::kDecode, "bad rank");
    Shape dims(rank);
    for (auto& d : dims) d = r.get<std::uint32_t>();
    std::vector<float> data(shape_numel(dims));
    r.take(data.data(), data.size() * sizeof(float));
    return Tensor(dims, std::move(data));
  } catch (const Error& e) {
    throw Error(ErrorCode::kDecode, "bad raw tensor " + ref + ": " + e.what());
  }
}

/// Loads a P6 PPM (scaled to [0,1]) or raw tensor file as CHW floats.
inline Tensor load_image(const fs::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file_bytes(path);
  } catch (const Error&) {
    throw Error(ErrorCode::kDecode, "cannot read image " + path.string());
  }
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') {
    return decode_ppm(bytes, path.string());
  }
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), kRawMagic, 4) == 0) {
    return decode_raw(bytes, path.string());
  }
  throw Error(ErrorCode::kUnsupportedFormat,
              "unsupported image format in " + path.string() + " (magic " +
                  describe_magic(bytes) + ")");
}

inline std::vector<std::uint8_t> encode_ppm(const Tensor& chw) {
  if (chw.rank() != 3 || chw.dim(0) != 3) {
    throw Error(ErrorCode::kShapeMismatch, "PPM needs a 3xHxW tensor, got " +
                                               shape_str(chw.shape()));
  }
  const std::size_t h = chw.dim(1), w = chw.dim(2);
  const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + h * w * 3);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = std::clamp(chw[(c * h + y) * w + x], 0.0f, 1.0f);
        out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
      }
  return out;
}

inline void write_ppm(const fs::path& path, const Tensor& chw) {
  write_file_bytes(path, encode_ppm(chw));
}

inline void write_raw_tensor(const fs::path& path, const Tensor& t) {
  detail::ByteWriter w;
  w.put_bytes(kRawMagic, 4);
  w.put(static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) w.put(static_cast<std::uint32_t>(d));
  w.put_bytes(t.raw(), t.numel() * sizeof(float));
  write_file_bytes(path, w.bytes());
}

// ---------------------------------------------------------------------------
// In-memory sub-datasets.

struct Sample {
  std::string ref;
  Tensor image;  // CHW
  int label = 0;
};

struct SubDataset {
  std::string attribute;
  std::vector<std::string> classes;
  std::vector<Sample> train;
  std::vector<Sample> test;
  std::size_t attribute_id = 0;

  std::size_t class_count() const { return classes.size(); }
};

inline std::vector<Sample> load_split(const DatasetManifest& m,
                                      const std::vector<ManifestEntry>& entries) {
  std::vector<Sample> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back({e.path, load_image(m.resolve(e.path)), e.class_index});
  return out;
}

inline SubDataset load_subdataset(const DatasetManifest& m) {
  return SubDataset{m.attribute, m.classes, load_split(m, m.train), load_split(m, m.test), 0};
}

/// Stacks CHW samples (selected by index) into one NCHW batch.
inline Tensor stack_images(const std::vector<Sample>& samples,
                           const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw Error(ErrorCode::kInvalidArgument, "empty batch");
  const Shape& s = samples.at(indices[0]).image.shape();
  Shape shape{indices.size()};
  shape.insert(shape.end(), s.begin(), s.end());
  Tensor out(shape);
  const std::size_t stride = shape_numel(s);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& img = samples.at(indices[i]).image;
    if (img.shape() != s) {
      throw Error(ErrorCode::kShapeMismatch, "image " + samples[indices[i]].ref + " has shape " +
                                                 shape_str(img.shape()) + ", expected " +
                                                 shape_str(s));
    }
    std::copy(img.data().begin(), img.data().end(), out.raw() + i * stride);
  }
  return out;
}

inline Tensor stack_all(const std::vector<Sample>& samples) {
  std::vector<std::size_t> idx(samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return stack_images(samples, idx);
}

}  // namespace graftnet
