#pragma once

// Deterministic synthetic sub-datasets. Each attribute is an independent
// single-label dataset written as PPM images plus a JSON manifest.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "graftnet/dataset.hpp"
#include "graftnet/error.hpp"
#include "graftnet/tensor.hpp"

namespace graftnet {

enum class GeneratorKind { kShapePresence, kStripeOrientation, kBrightness3, kFineTexture };

inline std::string to_string(GeneratorKind k) {
  switch (k) {
    case GeneratorKind::kShapePresence: return "shape-presence";
    case GeneratorKind::kStripeOrientation: return "stripe-orientation";
    case GeneratorKind::kBrightness3: return "brightness-3class";
    case GeneratorKind::kFineTexture: return "fine-texture";
  }
  return "?";
}

inline GeneratorKind parse_generator_kind(const std::string& s) {
  for (auto k : {GeneratorKind::kShapePresence, GeneratorKind::kStripeOrientation,
                 GeneratorKind::kBrightness3, GeneratorKind::kFineTexture})
    if (to_string(k) == s) return k;
  throw Error(ErrorCode::kInvalidArgument, "unknown generator kind '" + s + "'");
}

inline std::vector<std::string> generator_classes(GeneratorKind k) {
  switch (k) {
    case GeneratorKind::kShapePresence: return {"absent", "present"};
    case GeneratorKind::kStripeOrientation: return {"horizontal", "vertical"};
    case GeneratorKind::kBrightness3: return {"dark", "medium", "bright"};
    case GeneratorKind::kFineTexture: return {"separate", "woven"};
  }
  return {};
}

struct AttributeSpec {
  std::string name;
  GeneratorKind kind = GeneratorKind::kShapePresence;
  std::size_t train_count = 0;
  std::size_t test_count = 0;
  double label_noise = 0.0;
};

struct SynthConfig {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::vector<AttributeSpec> attributes;
  std::uint64_t seed = 0;

  void validate() const {
    if (channels != 3) {
      throw Error(ErrorCode::kInvalidArgument, "synthetic images must have 3 channels");
    }
    if (height < 16 || width < 16) {
      throw Error(ErrorCode::kInvalidArgument, "synthetic images must be at least 16x16");
    }
    for (const auto& a : attributes) {
      const std::size_t k = generator_classes(a.kind).size();
      if (a.train_count < 2 * k || a.test_count < 2 * k) {
        throw Error(ErrorCode::kInvalidArgument,
                    "attribute '" + a.name + "' needs at least 2 samples per class per split");
      }
      if (!(a.label_noise >= 0.0 && a.label_noise < 0.5)) {
        throw Error(ErrorCode::kInvalidArgument,
                    "label noise of '" + a.name + "' must lie in [0, 0.5)");
      }
    }
  }
};

inline void to_json(json& j, const AttributeSpec& a) {
  j = json{{"name", a.name},
           {"kind", to_string(a.kind)},
           {"train_count", a.train_count},
           {"test_count", a.test_count},
           {"label_noise", a.label_noise}};
}

inline void from_json(const json& j, AttributeSpec& a) {
  a.name = j.at("name").get<std::string>();
  a.kind = parse_generator_kind(j.at("kind").get<std::string>());
  a.train_count = j.at("train_count").get<std::size_t>();
  a.test_count = j.at("test_count").get<std::size_t>();
  a.label_noise = j.value("label_noise", 0.0);
}

inline void to_json(json& j, const SynthConfig& c) {
  j = json{{"image", {c.channels, c.height, c.width}},
           {"attributes", c.attributes},
           {"seed", c.seed}};
}

inline void from_json(const json& j, SynthConfig& c) {
  if (j.contains("image")) {
    const auto dims = j.at("image").get<std::vector<std::size_t>>();
    if (dims.size() != 3) throw Error(ErrorCode::kInvalidArgument, "image must be [C,H,W]");
    c.channels = dims[0];
    c.height = dims[1];
    c.width = dims[2];
  }
  c.attributes = j.at("attributes").get<std::vector<AttributeSpec>>();
  c.seed = j.value("seed", std::uint64_t{0});
}

/// Three easy attributes plus the fine-texture one.
inline SynthConfig default_synth_config(std::size_t train = 2000, std::size_t test = 500,
                                        std::uint64_t seed = 7) {
  SynthConfig c;
  c.seed = seed;
  c.attributes = {{"shape", GeneratorKind::kShapePresence, train, test, 0.0},
                  {"stripes", GeneratorKind::kStripeOrientation, train, test, 0.0},
                  {"brightness", GeneratorKind::kBrightness3, train, test, 0.0},
                  {"texture", GeneratorKind::kFineTexture, train, test, 0.0}};
  return c;
}

namespace synth_detail {

using Rng = std::mt19937_64;

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline std::size_t uniform_int(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

struct Canvas {
  std::size_t h, w;
  std::vector<double> px;  // CHW

  Canvas(std::size_t h_, std::size_t w_) : h(h_), w(w_), px(3 * h_ * w_) {}
  double& at(std::size_t c, std::size_t y, std::size_t x) { return px[(c * h + y) * w + x]; }
  void add_all(std::size_t y, std::size_t x, double v) {
    for (std::size_t c = 0; c < 3; ++c) at(c, y, x) += v;
  }
};

// Tinted level with a mild linear gradient.
inline Canvas background(Rng& rng, std::size_t h, std::size_t w, double lo, double hi) {
  Canvas cv(h, w);
  const double level = uniform(rng, lo, hi);
  const double angle = uniform(rng, 0.0, 2.0 * M_PI);
  const double slope = uniform(rng, 0.0, 0.08);
  double tint[3];
  for (auto& t : tint) t = uniform(rng, -0.04, 0.04);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double u = (static_cast<double>(x) / w - 0.5) * std::cos(angle) +
                         (static_cast<double>(y) / h - 0.5) * std::sin(angle);
        cv.at(c, y, x) = level + tint[c] + slope * u;
      }
  return cv;
}

inline void add_noise(Canvas& cv, Rng& rng, double sigma) {
  std::normal_distribution<double> n(0.0, sigma);
  for (auto& v : cv.px) v += n(rng);
}

// A thin line of random orientation, drawn into either class.
inline void distractor_line(Canvas& cv, Rng& rng) {
  const double angle = uniform(rng, 0.0, M_PI);
  const double cy = uniform(rng, 0.0, cv.h), cx = uniform(rng, 0.0, cv.w);
  const double contrast = (uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0) * uniform(rng, 0.1, 0.2);
  const double ny = std::cos(angle), nx = -std::sin(angle);
  for (std::size_t y = 0; y < cv.h; ++y)
    for (std::size_t x = 0; x < cv.w; ++x)
      if (std::abs((y + 0.5 - cy) * ny + (x + 0.5 - cx) * nx) < 0.75) cv.add_all(y, x, contrast);
}

inline Canvas shape_presence(Rng& rng, std::size_t h, std::size_t w, int label) {
  Canvas cv = background(rng, h, w, 0.3, 0.7);
  if (uniform(rng, 0.0, 1.0) < 0.5) distractor_line(cv, rng);
  if (label == 1) {
    const std::size_t size = uniform_int(rng, 7, 12);
    const std::size_t y0 = uniform_int(rng, 0, h - size);
    const std::size_t x0 = uniform_int(rng, 0, w - size);
    const bool disk = uniform(rng, 0.0, 1.0) < 0.5;
    const double contrast = (uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0) * uniform(rng, 0.15, 0.3);
    const double r = size / 2.0;
    for (std::size_t y = y0; y < y0 + size; ++y)
      for (std::size_t x = x0; x < x0 + size; ++x) {
        const double dy = y - y0 + 0.5 - r, dx = x - x0 + 0.5 - r;
        if (!disk || dy * dy + dx * dx <= r * r) cv.add_all(y, x, contrast);
      }
  }
  add_noise(cv, rng, 0.05);
  return cv;
}

// Stripes within 25 degrees of horizontal (class 0) or vertical (class 1).
inline Canvas stripe_orientation(Rng& rng, std::size_t h, std::size_t w, int label) {
  Canvas cv = background(rng, h, w, 0.3, 0.7);
  const double period = uniform(rng, 4.0, 8.0);
  const double phase = uniform(rng, 0.0, 2.0 * M_PI);
  const double amp = uniform(rng, 0.05, 0.12);
  const double angle = (label == 1 ? 0.0 : M_PI / 2) + uniform(rng, -1.0, 1.0) * 25.0 * M_PI / 180.0;
  const double ux = std::cos(angle), uy = std::sin(angle);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double t = ux * static_cast<double>(x) + uy * static_cast<double>(y);
      cv.add_all(y, x, amp * std::sin(2.0 * M_PI * t / period + phase));
    }
  add_noise(cv, rng, 0.06);
  return cv;
}

inline Canvas brightness3(Rng& rng, std::size_t h, std::size_t w, int label) {
  Canvas cv = background(rng, h, w, 0.2, 0.8);
  static constexpr double kLevels[3] = {0.3, 0.5, 0.7};
  const double level = kLevels[label] + uniform(rng, -0.06, 0.06);
  const double cy = h / 2.0 + uniform(rng, -3.0, 3.0);
  const double cx = w / 2.0 + uniform(rng, -3.0, 3.0);
  const double ry = uniform(rng, 0.3, 0.4) * h, rx = uniform(rng, 0.2, 0.3) * w;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double dy = (y + 0.5 - cy) / ry, dx = (x + 0.5 - cx) / rx;
      if (dy * dy + dx * dx <= 1.0)
        for (std::size_t c = 0; c < 3; ++c) cv.at(c, y, x) = level;
    }
  add_noise(cv, rng, 0.06);
  return cv;
}

struct Box {
  std::size_t y0, x0, size;
  bool overlaps(const Box& o) const {
    return y0 < o.y0 + o.size && o.y0 < y0 + size && x0 < o.x0 + o.size && o.x0 < x0 + size;
  }
};

inline Box random_box(Rng& rng, std::size_t h, std::size_t w, std::size_t size) {
  return {uniform_int(rng, 0, h - size), uniform_int(rng, 0, w - size), size};
}

// Two components: a flat-toned square and a patch of fine stripes. Class 1
// lays the stripes over the square; class 0 puts them in a disjoint box.
// Each component alone looks the same in both classes; only their
// co-occurrence at the same location differs.
inline Canvas fine_texture(Rng& rng, std::size_t h, std::size_t w, int label) {
  Canvas cv = background(rng, h, w, 0.35, 0.65);
  // At most a third of the side, so a disjoint second box always fits.
  const std::size_t hi = std::min<std::size_t>(10, std::min(h, w) / 3);
  const std::size_t size = uniform_int(rng, std::min<std::size_t>(8, hi), hi);
  const Box a = random_box(rng, h, w, size);
  Box b = a;
  if (label == 0) {
    do {
      b = random_box(rng, h, w, size);
    } while (b.overlaps(a));
  }
  const double tone = (uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0) * uniform(rng, 0.15, 0.25);
  const double stripe = uniform(rng, 0.12, 0.2);
  const double period = uniform(rng, 3.0, 5.0);
  const double phase = uniform(rng, 0.0, 2.0 * M_PI);
  const bool vertical = uniform_int(rng, 0, 1) == 1;
  for (std::size_t y = a.y0; y < a.y0 + size; ++y)
    for (std::size_t x = a.x0; x < a.x0 + size; ++x) cv.add_all(y, x, tone);
  for (std::size_t y = b.y0; y < b.y0 + size; ++y)
    for (std::size_t x = b.x0; x < b.x0 + size; ++x) {
      const double t = static_cast<double>(vertical ? x : y);
      cv.add_all(y, x, stripe * std::sin(2.0 * M_PI * t / period + phase));
    }
  add_noise(cv, rng, 0.03);
  return cv;
}

// Quantized exactly as a PPM round trip would.
inline Tensor to_tensor(const Canvas& cv) {
  Tensor t({3, cv.h, cv.w});
  for (std::size_t i = 0; i < cv.px.size(); ++i) {
    const double v = std::clamp(cv.px[i], 0.0, 1.0);
    const auto byte = static_cast<std::uint8_t>(std::lround(v * 255.0));
    t[i] = static_cast<float>(byte) * (1.0f / 255.0f);
  }
  return t;
}

inline std::vector<int> balanced_labels(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<int> labels;
  labels.reserve(n);
  for (std::size_t c = 0; c < k; ++c) {
    const std::size_t count = n / k + (c < n % k ? 1 : 0);
    labels.insert(labels.end(), count, static_cast<int>(c));
  }
  std::shuffle(labels.begin(), labels.end(), rng);
  return labels;
}

}  // namespace synth_detail

/// Renders one image of `kind` showing class `label`.
inline Tensor render_synthetic(GeneratorKind kind, int label, std::mt19937_64& rng,
                               std::size_t height = 32, std::size_t width = 32) {
  using namespace synth_detail;
  switch (kind) {
    case GeneratorKind::kShapePresence: return to_tensor(shape_presence(rng, height, width, label));
    case GeneratorKind::kStripeOrientation:
      return to_tensor(stripe_orientation(rng, height, width, label));
    case GeneratorKind::kBrightness3: return to_tensor(brightness3(rng, height, width, label));
    case GeneratorKind::kFineTexture: return to_tensor(fine_texture(rng, height, width, label));
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown generator kind");
}

/// Class-balanced split; with probability `label_noise` an image shows a
/// different class than its label.
inline std::vector<Sample> synthesize_split(const AttributeSpec& spec, std::size_t count,
                                            const std::string& split, std::size_t height,
                                            std::size_t width, std::mt19937_64& rng) {
  const std::size_t k = generator_classes(spec.kind).size();
  const auto labels = synth_detail::balanced_labels(count, k, rng);
  std::vector<Sample> out;
  out.reserve(count);
  char name[32];
  for (std::size_t i = 0; i < count; ++i) {
    int shown = labels[i];
    if (spec.label_noise > 0.0 && synth_detail::uniform(rng, 0.0, 1.0) < spec.label_noise) {
      shown = (shown + 1 + static_cast<int>(synth_detail::uniform_int(rng, 0, k - 2))) %
              static_cast<int>(k);
    }
    std::snprintf(name, sizeof(name), "%s/%06zu.ppm", split.c_str(), i);
    out.push_back({name, render_synthetic(spec.kind, shown, rng, height, width), labels[i]});
  }
  return out;
}

inline std::mt19937_64 attribute_rng(std::uint64_t seed, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), 0x9e3779b9u};
  return std::mt19937_64(seq);
}

/// In-memory equivalent of generate_synthetic for one attribute.
inline SubDataset synthesize_subdataset(const SynthConfig& config, std::size_t index) {
  config.validate();
  const auto& spec = config.attributes.at(index);
  auto rng = attribute_rng(config.seed, index);
  SubDataset d;
  d.attribute = spec.name;
  d.classes = generator_classes(spec.kind);
  d.train = synthesize_split(spec, spec.train_count, "train", config.height, config.width, rng);
  d.test = synthesize_split(spec, spec.test_count, "test", config.height, config.width, rng);
  d.attribute_id = index;
  return d;
}

inline std::vector<DatasetManifest> generate_synthetic(const SynthConfig& config,
                                                       const fs::path& out_dir) {
  config.validate();
  std::vector<DatasetManifest> manifests;
  for (std::size_t i = 0; i < config.attributes.size(); ++i) {
    const auto& spec = config.attributes[i];
    const auto data = synthesize_subdataset(config, i);
    const fs::path dir = out_dir / spec.name;
    fs::create_directories(dir / "train");
    fs::create_directories(dir / "test");
    DatasetManifest m;
    m.attribute = spec.name;
    m.classes = data.classes;
    m.base_dir = dir;
    for (const auto& s : data.train) {
      write_ppm(dir / s.ref, s.image);
      m.train.push_back({s.ref, s.label});
    }
    for (const auto& s : data.test) {
      write_ppm(dir / s.ref, s.image);
      m.test.push_back({s.ref, s.label});
    }
    m.provenance = {{"generator", to_string(spec.kind)},
                    {"seed", config.seed},
                    {"label_noise", spec.label_noise}};
    write_manifest(m, dir / "manifest.json");
    manifests.push_back(std::move(m));
  }
  return manifests;
}

}  // namespace graftnet
