#pragma once

// Block-structured backbone, freezing, trunk export, branch detachment and
// grafting.
//
// A backbone is a stack of blocks, each `conv_layers_per_block` repetitions
// of conv3x3 -> batch norm -> ReLU. The first conv of a downsampling block
// has stride 2. Attribute heads pool the activations after `end_block`
// blocks (GAP or bilinear) and apply one dense layer.
//
// Parameter names:
//   block{i}/conv{j}/weight|bias
//   block{i}/bn{j}/gamma|beta|running_mean|running_var
//   head/{attribute}/weight|bias

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "graftnet/kernels.hpp"
#include "graftnet/tape.hpp"
#include "graftnet/tensor.hpp"
#include "graftnet/weights_io.hpp"

namespace graftnet {

using json = nlohmann::json;

enum class Pooling { kGap, kBilinear };

inline std::string to_string(Pooling p) {
  return p == Pooling::kGap ? "gap" : "bilinear";
}

inline Pooling parse_pooling(const std::string& s) {
  if (s == "gap") return Pooling::kGap;
  if (s == "bilinear") return Pooling::kBilinear;
  throw Error(ErrorCode::kInvalidArgument, "unknown pooling mode '" + s + "'");
}

inline std::string fingerprint_hex(std::uint64_t fp) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fp;
  return os.str();
}

inline std::uint64_t parse_fingerprint(const std::string& hex) {
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(hex.data(), hex.data() + hex.size(), v, 16);
  if (ec != std::errc() || ptr != hex.data() + hex.size()) {
    throw Error(ErrorCode::kDecode, "bad fingerprint '" + hex + "'");
  }
  return v;
}

struct BackboneConfig {
  std::size_t block_count = 11;
  std::vector<std::size_t> widths = {8, 12, 12, 16, 16, 16, 24, 24, 24, 32, 32};
  std::set<std::size_t> downsample_blocks = {1, 3, 6, 9};
  std::size_t in_channels = 3;
  std::size_t in_height = 32;
  std::size_t in_width = 32;
  std::size_t conv_layers_per_block = 2;

  /// Every block `width` channels wide, no downsampling.
  static BackboneConfig uniform(std::size_t blocks, std::size_t width,
                                std::size_t channels, std::size_t height,
                                std::size_t w) {
    BackboneConfig c;
    c.block_count = blocks;
    c.widths.assign(blocks, width);
    c.downsample_blocks.clear();
    c.in_channels = channels;
    c.in_height = height;
    c.in_width = w;
    return c;
  }

  void validate() const {
    if (block_count == 0) {
      throw Error(ErrorCode::kInvalidArgument, "block_count must be positive");
    }
    if (widths.size() != block_count) {
      throw Error(ErrorCode::kInvalidArgument,
                  "width list has " + std::to_string(widths.size()) +
                      " entries for " + std::to_string(block_count) + " blocks");
    }
    if (std::any_of(widths.begin(), widths.end(),
                    [](std::size_t w) { return w == 0; })) {
      throw Error(ErrorCode::kInvalidArgument, "block widths must be positive");
    }
    for (auto d : downsample_blocks) {
      if (d >= block_count) {
        throw Error(ErrorCode::kInvalidArgument,
                    "downsample block " + std::to_string(d) + " out of range");
      }
    }
    if (conv_layers_per_block == 0 || in_channels == 0 || in_height == 0 ||
        in_width == 0) {
      throw Error(ErrorCode::kInvalidArgument, "degenerate backbone config");
    }
  }

  std::size_t block_in_channels(std::size_t block) const {
    return block == 0 ? in_channels : widths.at(block - 1);
  }

  /// Channel count of the activations after `depth` blocks.
  std::size_t channels_at(std::size_t depth) const {
    return depth == 0 ? in_channels : widths.at(depth - 1);
  }

  /// Spatial size (H, W) after `depth` blocks.
  std::pair<std::size_t, std::size_t> spatial_at(std::size_t depth) const {
    std::size_t h = in_height, w = in_width;
    for (std::size_t b = 0; b < depth; ++b) {
      if (downsample_blocks.count(b)) {
        h = (h + 2 - 3) / 2 + 1;
        w = (w + 2 - 3) / 2 + 1;
      }
    }
    return {h, w};
  }

  std::size_t pooled_size(std::size_t end_block, Pooling pooling) const {
    const auto c = channels_at(end_block);
    return pooling == Pooling::kGap ? c : c * c;
  }

  Shape input_shape() const { return {in_channels, in_height, in_width}; }

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

inline void to_json(json& j, const BackboneConfig& c) {
  j = json{{"block_count", c.block_count},
           {"widths", c.widths},
           {"downsample_blocks", c.downsample_blocks},
           {"input_shape", {c.in_channels, c.in_height, c.in_width}},
           {"conv_layers_per_block", c.conv_layers_per_block}};
}

inline void from_json(const json& j, BackboneConfig& c) {
  c = BackboneConfig{};
  c.block_count = j.value("block_count", c.block_count);
  if (j.contains("widths")) {
    c.widths = j.at("widths").get<std::vector<std::size_t>>();
  } else if (c.block_count != 11) {
    throw Error(ErrorCode::kInvalidArgument,
                "widths are required for a non-default block count");
  }
  if (j.contains("downsample_blocks")) {
    c.downsample_blocks = j.at("downsample_blocks").get<std::set<std::size_t>>();
  }
  if (j.contains("input_shape")) {
    const auto s = j.at("input_shape").get<std::vector<std::size_t>>();
    if (s.size() != 3) {
      throw Error(ErrorCode::kInvalidArgument, "input_shape must be [C,H,W]");
    }
    c.in_channels = s[0];
    c.in_height = s[1];
    c.in_width = s[2];
  }
  c.conv_layers_per_block =
      j.value("conv_layers_per_block", c.conv_layers_per_block);
  c.validate();
}

// ---------------------------------------------------------------------------

struct ConvBnLayer {
  Parameter weight;
  Parameter bias;
  BatchNormState bn;
  std::size_t stride = 1;
};

inline constexpr std::size_t kKernel = 3;
inline constexpr std::size_t kPadding = 1;

struct Block {
  std::size_t index = 0;
  std::vector<ConvBnLayer> layers;
  bool frozen = false;

  /// Inference-mode evaluation (running BN statistics).
  Tensor infer(const Tensor& x) const {
    Tensor a = x;
    for (const auto& l : layers) {
      a = kernels::conv2d_forward(a, l.weight.value, l.bias.value, l.stride,
                                  kPadding);
      a = kernels::batch_norm_infer(a, l.bn);
      a = kernels::relu_forward(a);
    }
    return a;
  }

  /// Differentiable evaluation. Frozen blocks always run BN in infer mode.
  Var forward(Tape<float>& tape, Var x, Mode mode) {
    const Mode m = frozen ? Mode::kInfer : mode;
    Var a = x;
    for (auto& l : layers) {
      const Var w = tape.param(l.weight);
      const Var b = tape.param(l.bias);
      a = conv2d(tape, a, w, b, l.stride, kPadding);
      a = batch_norm(tape, a, l.bn, m);
      a = relu(tape, a);
    }
    return a;
  }

  void set_frozen(bool f) {
    frozen = f;
    for (auto& l : layers) {
      l.weight.trainable = !f;
      l.bias.trainable = !f;
      l.bn.gamma.trainable = !f;
      l.bn.beta.trainable = !f;
      l.bn.stats_frozen = f;
    }
  }

  void collect(std::vector<Parameter*>& out) {
    for (auto& l : layers) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
      out.push_back(&l.bn.gamma);
      out.push_back(&l.bn.beta);
    }
  }

  /// Every tensor of this block, including BN running statistics.
  void export_to(NamedTensors& out) const {
    for (std::size_t j = 0; j < layers.size(); ++j) {
      const auto& l = layers[j];
      const auto conv = "block" + std::to_string(index) + "/conv" + std::to_string(j);
      const auto bn = "block" + std::to_string(index) + "/bn" + std::to_string(j);
      out[conv + "/weight"] = l.weight.value;
      out[conv + "/bias"] = l.bias.value;
      out[bn + "/gamma"] = l.bn.gamma.value;
      out[bn + "/beta"] = l.bn.beta.value;
      out[bn + "/running_mean"] = l.bn.running_mean;
      out[bn + "/running_var"] = l.bn.running_var;
    }
  }

  void import_from(const NamedTensors& in) {
    auto take = [&](const std::string& name, Tensor& dst) {
      auto it = in.find(name);
      if (it == in.end()) {
        throw Error(ErrorCode::kDecode, "missing tensor '" + name + "'");
      }
      if (it->second.shape() != dst.shape()) {
        throw Error(ErrorCode::kShapeMismatch,
                    "tensor '" + name + "' has shape " +
                        shape_str(it->second.shape()) + ", expected " +
                        shape_str(dst.shape()));
      }
      dst = it->second;
    };
    for (std::size_t j = 0; j < layers.size(); ++j) {
      auto& l = layers[j];
      const auto conv = "block" + std::to_string(index) + "/conv" + std::to_string(j);
      const auto bn = "block" + std::to_string(index) + "/bn" + std::to_string(j);
      take(conv + "/weight", l.weight.value);
      take(conv + "/bias", l.bias.value);
      take(bn + "/gamma", l.bn.gamma.value);
      take(bn + "/beta", l.bn.beta.value);
      take(bn + "/running_mean", l.bn.running_mean);
      take(bn + "/running_var", l.bn.running_var);
    }
  }
};

inline void he_uniform(Tensor& t, std::size_t fan_in, std::mt19937_64& rng) {
  const float limit = std::sqrt(6.0f / static_cast<float>(fan_in));
  std::uniform_real_distribution<float> dist(-limit, limit);
  for (auto& v : t.data()) v = dist(rng);
}

inline Block make_block(const BackboneConfig& cfg, std::size_t index,
                        std::mt19937_64& rng) {
  Block b;
  b.index = index;
  std::size_t in_c = cfg.block_in_channels(index);
  const std::size_t out_c = cfg.widths.at(index);
  for (std::size_t j = 0; j < cfg.conv_layers_per_block; ++j) {
    const auto conv = "block" + std::to_string(index) + "/conv" + std::to_string(j);
    const auto bn = "block" + std::to_string(index) + "/bn" + std::to_string(j);
    ConvBnLayer l;
    l.weight = Parameter(conv + "/weight", Tensor({out_c, in_c, kKernel, kKernel}));
    he_uniform(l.weight.value, in_c * kKernel * kKernel, rng);
    l.bias = Parameter(conv + "/bias", Tensor({out_c}));
    l.bn = BatchNormState(bn, out_c);
    l.stride = (j == 0 && cfg.downsample_blocks.count(index)) ? 2 : 1;
    b.layers.push_back(std::move(l));
    in_c = out_c;
  }
  return b;
}

inline Tensor pool(const Tensor& x, Pooling p) {
  return p == Pooling::kGap ? kernels::global_avg_pool_forward(x)
                            : kernels::bilinear_pool_forward(x);
}

inline Var pool(Tape<float>& tape, Var x, Pooling p) {
  return p == Pooling::kGap ? global_avg_pool(tape, x) : bilinear_pool(tape, x);
}

struct Head {
  std::string attribute;
  std::vector<std::string> classes;
  Pooling pooling = Pooling::kGap;
  std::size_t end_block = 0;
  Parameter weight;
  Parameter bias;

  Tensor probabilities(const Tensor& features) const {
    return kernels::softmax(
        kernels::dense_forward(pool(features, pooling), weight.value, bias.value));
  }
};

inline Head make_head(const BackboneConfig& cfg, const std::string& attribute,
                      std::vector<std::string> classes, Pooling pooling,
                      std::size_t end_block, std::mt19937_64& rng) {
  if (classes.size() < 2 || classes.size() > 3) {
    throw Error(ErrorCode::kInvalidArgument,
                "attribute '" + attribute + "' must have 2 or 3 classes");
  }
  if (end_block > cfg.block_count) {
    throw Error(ErrorCode::kOutOfRange, "head end block out of range");
  }
  Head h;
  h.attribute = attribute;
  h.classes = std::move(classes);
  h.pooling = pooling;
  h.end_block = end_block;
  const std::size_t in = cfg.pooled_size(end_block, pooling);
  const std::size_t k = h.classes.size();
  h.weight = Parameter("head/" + attribute + "/weight", Tensor({k, in}));
  he_uniform(h.weight.value, in, rng);
  h.bias = Parameter("head/" + attribute + "/bias", Tensor({k}));
  return h;
}

inline Tensor as_batch(const Tensor& image) {
  if (image.rank() == 4) return image;
  if (image.rank() != 3) {
    throw Error(ErrorCode::kShapeMismatch,
                "expected CHW or NCHW input, got " + shape_str(image.shape()));
  }
  Shape s{1};
  s.insert(s.end(), image.shape().begin(), image.shape().end());
  return image.reshaped(s);
}

inline void check_input(const BackboneConfig& cfg, const Tensor& x) {
  if (x.rank() != 4 || x.dim(1) != cfg.in_channels || x.dim(2) != cfg.in_height ||
      x.dim(3) != cfg.in_width) {
    throw Error(ErrorCode::kShapeMismatch,
                "input " + shape_str(x.shape()) + " does not match backbone input " +
                    shape_str(cfg.input_shape()));
  }
}

// ---------------------------------------------------------------------------

class BackboneModel {
 public:
  BackboneConfig config;
  std::vector<Block> blocks;
  std::vector<Head> heads;

  std::size_t block_count() const { return blocks.size(); }

  const Head* find_head(const std::string& attribute) const {
    for (const auto& h : heads)
      if (h.attribute == attribute) return &h;
    return nullptr;
  }

  std::size_t head_index(const std::string& attribute) const {
    for (std::size_t i = 0; i < heads.size(); ++i)
      if (heads[i].attribute == attribute) return i;
    throw Error(ErrorCode::kUnknownAttribute, "no head for attribute '" + attribute + "'");
  }

  Head& add_head(const std::string& attribute, std::vector<std::string> classes,
                 Pooling pooling, std::size_t end_block, std::mt19937_64& rng) {
    if (find_head(attribute)) {
      throw Error(ErrorCode::kDuplicateAttribute,
                  "head for '" + attribute + "' already exists");
    }
    heads.push_back(
        make_head(config, attribute, std::move(classes), pooling, end_block, rng));
    return heads.back();
  }

  /// Activations after blocks [from, to) applied to `x` (activations at `from`).
  Tensor forward_range(const Tensor& x, std::size_t from, std::size_t to) const {
    if (from > to || to > blocks.size()) {
      throw Error(ErrorCode::kOutOfRange, "block range [" + std::to_string(from) +
                                              ", " + std::to_string(to) +
                                              ") out of range");
    }
    Tensor a = x;
    for (std::size_t b = from; b < to; ++b) a = blocks[b].infer(a);
    return a;
  }

  /// Class probabilities of one head, inference mode. Accepts CHW or NCHW.
  Tensor infer(const Tensor& x, const std::string& attribute) const {
    const Tensor batch = as_batch(x);
    check_input(config, batch);
    const Head& h = heads.at(head_index(attribute));
    return h.probabilities(forward_range(batch, 0, h.end_block));
  }

  /// Records blocks [from, head.end_block) -> pooling -> head -> CE onto the
  /// tape, starting from activations `x` at depth `from`.
  Var forward_loss(Tape<float>& tape, const Tensor& x, std::size_t from,
                   std::size_t head, std::span<const int> labels, Mode mode,
                   Tensor* probs = nullptr) {
    Head& h = heads.at(head);
    if (from > h.end_block) {
      throw Error(ErrorCode::kOutOfRange, "start block beyond head end block");
    }
    Var a = tape.constant(x);
    for (std::size_t b = from; b < h.end_block; ++b) a = blocks[b].forward(tape, a, mode);
    Var pooled = pool(tape, a, h.pooling);
    Var logits = dense(tape, pooled, tape.param(h.weight), tape.param(h.bias));
    return softmax_cross_entropy(tape, logits, labels, probs);
  }

  std::vector<Parameter*> block_parameters() {
    std::vector<Parameter*> out;
    for (auto& b : blocks) b.collect(out);
    return out;
  }

  std::vector<Parameter*> head_parameters(std::size_t head) {
    return {&heads.at(head).weight, &heads.at(head).bias};
  }

  std::vector<Parameter*> parameters() {
    auto out = block_parameters();
    for (auto& h : heads) {
      out.push_back(&h.weight);
      out.push_back(&h.bias);
    }
    return out;
  }

  NamedTensors named_tensors() const {
    NamedTensors out;
    for (const auto& b : blocks) b.export_to(out);
    for (const auto& h : heads) {
      out[h.weight.name] = h.weight.value;
      out[h.bias.name] = h.bias.value;
    }
    return out;
  }
};

inline BackboneModel build_backbone(const BackboneConfig& config, std::uint64_t seed) {
  config.validate();
  BackboneModel m;
  m.config = config;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < config.block_count; ++i)
    m.blocks.push_back(make_block(config, i, rng));
  return m;
}

/// Inference-mode activations after blocks [0, upto).
inline Tensor forward_features(const BackboneModel& model, const Tensor& x,
                               std::size_t upto) {
  if (upto > model.block_count()) {
    throw Error(ErrorCode::kOutOfRange,
                "forward_features upto=" + std::to_string(upto) + " exceeds " +
                    std::to_string(model.block_count()) + " blocks");
  }
  return model.forward_range(x, 0, upto);
}

/// Freezes blocks [0, freeze_depth): weights, BN affine parameters and BN
/// running statistics. Later blocks and every head become trainable.
inline void set_trainable(BackboneModel& model, std::size_t freeze_depth) {
  if (freeze_depth > model.block_count()) {
    throw Error(ErrorCode::kOutOfRange, "freeze depth exceeds block count");
  }
  for (std::size_t i = 0; i < model.blocks.size(); ++i)
    model.blocks[i].set_frozen(i < freeze_depth);
  for (auto& h : model.heads) {
    h.weight.trainable = true;
    h.bias.trainable = true;
  }
}

// ---------------------------------------------------------------------------

/// Parses the block index of a "block{i}/..." name.
inline std::optional<std::size_t> block_of(const std::string& name) {
  if (name.rfind("block", 0) != 0) return std::nullopt;
  const auto slash = name.find('/');
  if (slash == std::string::npos || slash == 5) return std::nullopt;
  std::size_t idx = 0;
  auto [ptr, ec] = std::from_chars(name.data() + 5, name.data() + slash, idx);
  if (ec != std::errc() || ptr != name.data() + slash) return std::nullopt;
  return idx;
}

/// Conv and BN tensors of blocks [0, depth): the shareable pretrained trunk.
struct TrunkWeights {
  BackboneConfig config;
  std::size_t depth = 0;
  NamedTensors tensors;
  json provenance = json::object();

  void validate() const {
    config.validate();
    if (depth > config.block_count) {
      throw Error(ErrorCode::kOutOfRange, "trunk depth exceeds block count");
    }
    for (const auto& [name, t] : tensors) {
      const auto b = block_of(name);
      if (!b || *b >= depth) {
        throw Error(ErrorCode::kDecode, "tensor '" + name +
                                            "' does not belong to trunk blocks [0, " +
                                            std::to_string(depth) + ")");
      }
    }
  }

  /// Digest over the serialized tensor records (metadata excluded).
  std::uint64_t fingerprint() const {
    auto bytes = serialize_weights(WeightFile{tensors, {}});
    const std::string d = "depth=" + std::to_string(depth);
    bytes.insert(bytes.end(), d.begin(), d.end());
    return fnv1a64(bytes);
  }

  /// Materializes the trunk blocks in inference form.
  std::vector<Block> blocks() const {
    std::vector<Block> out;
    std::mt19937_64 rng(0);
    for (std::size_t i = 0; i < depth; ++i) {
      Block b = make_block(config, i, rng);
      b.import_from(tensors);
      b.set_frozen(true);
      out.push_back(std::move(b));
    }
    return out;
  }

  WeightFile to_file() const {
    json meta{{"kind", "trunk"},
              {"depth", depth},
              {"config", config},
              {"fingerprint", fingerprint_hex(fingerprint())},
              {"provenance", provenance}};
    return WeightFile{tensors, meta.dump()};
  }

  static TrunkWeights from_file(const WeightFile& file) {
    const auto meta = file.metadata.empty() ? json() : json::parse(file.metadata);
    if (!meta.is_object() || meta.value("kind", "") != "trunk") {
      throw Error(ErrorCode::kDecode, "weight file is not a trunk");
    }
    TrunkWeights t;
    t.config = meta.at("config").get<BackboneConfig>();
    t.depth = meta.at("depth").get<std::size_t>();
    t.tensors = file.tensors;
    t.provenance = meta.value("provenance", json::object());
    t.validate();
    return t;
  }
};

inline TrunkWeights export_trunk(const BackboneModel& model, std::size_t depth) {
  if (depth > model.block_count()) {
    throw Error(ErrorCode::kOutOfRange, "export depth " + std::to_string(depth) +
                                            " exceeds " +
                                            std::to_string(model.block_count()) +
                                            " blocks");
  }
  TrunkWeights t;
  t.config = model.config;
  t.depth = depth;
  for (std::size_t i = 0; i < depth; ++i) model.blocks[i].export_to(t.tensors);
  return t;
}

/// A fresh backbone whose blocks [0, trunk.depth) carry the trunk weights.
inline BackboneModel model_from_trunk(const TrunkWeights& trunk, std::uint64_t seed) {
  BackboneModel m = build_backbone(trunk.config, seed);
  for (std::size_t i = 0; i < trunk.depth; ++i) m.blocks[i].import_from(trunk.tensors);
  return m;
}

// ---------------------------------------------------------------------------

/// One attribute's trainable suffix: open blocks [graft_point, end_block),
/// pooling and head, stamped with the trunk it was trained against.
struct Branch {
  std::string attribute;
  std::vector<std::string> classes;
  std::size_t graft_point = 0;
  std::size_t end_block = 0;
  Pooling pooling = Pooling::kGap;
  BackboneConfig config;
  NamedTensors tensors;  // open-block tensors plus head/{attribute}/weight|bias
  std::uint64_t trunk_fingerprint = 0;

  void validate() const {
    if (graft_point > end_block || end_block > config.block_count) {
      throw Error(ErrorCode::kOutOfRange,
                  "branch '" + attribute + "' has invalid block range [" +
                      std::to_string(graft_point) + ", " +
                      std::to_string(end_block) + ")");
    }
    if (classes.size() < 2 || classes.size() > 3) {
      throw Error(ErrorCode::kInvalidArgument,
                  "branch '" + attribute + "' must have 2 or 3 classes");
    }
    const auto w = tensors.find("head/" + attribute + "/weight");
    if (w == tensors.end() || !tensors.count("head/" + attribute + "/bias")) {
      throw Error(ErrorCode::kDecode, "branch '" + attribute + "' has no head");
    }
    const Shape expect{classes.size(), config.pooled_size(end_block, pooling)};
    if (w->second.shape() != expect) {
      throw Error(ErrorCode::kShapeMismatch,
                  "branch '" + attribute + "' head " + shape_str(w->second.shape()) +
                      " does not match pooled size " + shape_str(expect));
    }
  }

  json meta() const {
    return json{{"kind", "branch"},
                {"attribute", attribute},
                {"classes", classes},
                {"graft_point", graft_point},
                {"end_block", end_block},
                {"pooling", to_string(pooling)},
                {"config", config},
                {"trunk_fingerprint", fingerprint_hex(trunk_fingerprint)}};
  }

  static Branch from_meta(const json& meta, NamedTensors tensors) {
    Branch b;
    b.attribute = meta.at("attribute").get<std::string>();
    b.classes = meta.at("classes").get<std::vector<std::string>>();
    b.graft_point = meta.at("graft_point").get<std::size_t>();
    b.end_block = meta.at("end_block").get<std::size_t>();
    b.pooling = parse_pooling(meta.at("pooling").get<std::string>());
    b.config = meta.at("config").get<BackboneConfig>();
    b.trunk_fingerprint = parse_fingerprint(meta.at("trunk_fingerprint").get<std::string>());
    b.tensors = std::move(tensors);
    b.validate();
    return b;
  }

  WeightFile to_file() const { return WeightFile{tensors, meta().dump()}; }

  static Branch from_file(const WeightFile& file) {
    const auto meta = file.metadata.empty() ? json() : json::parse(file.metadata);
    if (!meta.is_object() || meta.value("kind", "") != "branch") {
      throw Error(ErrorCode::kDecode, "weight file is not a branch");
    }
    return from_meta(meta, file.tensors);
  }

  /// Fingerprint of the branch's own bytes; used in evaluation metadata.
  std::uint64_t fingerprint() const { return fnv1a64(serialize_weights(to_file())); }

  std::vector<Block> blocks() const {
    std::vector<Block> out;
    std::mt19937_64 rng(0);
    for (std::size_t i = graft_point; i < end_block; ++i) {
      Block b = make_block(config, i, rng);
      b.import_from(tensors);
      b.set_frozen(true);
      out.push_back(std::move(b));
    }
    return out;
  }

  Head head() const {
    Head h;
    h.attribute = attribute;
    h.classes = classes;
    h.pooling = pooling;
    h.end_block = end_block;
    h.weight = Parameter("head/" + attribute + "/weight",
                         tensors.at("head/" + attribute + "/weight"), false);
    h.bias = Parameter("head/" + attribute + "/bias",
                       tensors.at("head/" + attribute + "/bias"), false);
    return h;
  }
};

/// Copies open blocks [g, e) and the attribute head out of a trained model.
inline Branch detach_branch(const BackboneModel& model, std::size_t graft_point,
                            std::size_t end_block, const std::string& attribute,
                            std::uint64_t trunk_fingerprint) {
  const Head* h = model.find_head(attribute);
  if (!h) {
    throw Error(ErrorCode::kUnknownAttribute,
                "model has no head for attribute '" + attribute + "'");
  }
  if (graft_point > end_block || end_block > model.block_count()) {
    throw Error(ErrorCode::kOutOfRange, "invalid detach range");
  }
  if (h->end_block != end_block) {
    throw Error(ErrorCode::kInvalidArgument,
                "head '" + attribute + "' reads block " + std::to_string(h->end_block) +
                    ", not " + std::to_string(end_block));
  }
  Branch b;
  b.attribute = attribute;
  b.classes = h->classes;
  b.graft_point = graft_point;
  b.end_block = end_block;
  b.pooling = h->pooling;
  b.config = model.config;
  b.trunk_fingerprint = trunk_fingerprint;
  for (std::size_t i = graft_point; i < end_block; ++i) model.blocks[i].export_to(b.tensors);
  b.tensors[h->weight.name] = h->weight.value;
  b.tensors[h->bias.name] = h->bias.value;
  b.validate();
  return b;
}

/// Detaches against the model's own prefix [0, g) as the trunk.
inline Branch detach_branch(const BackboneModel& model, std::size_t graft_point,
                            std::size_t end_block, const std::string& attribute) {
  return detach_branch(model, graft_point, end_block, attribute,
                       export_trunk(model, graft_point).fingerprint());
}

// ---------------------------------------------------------------------------

using ScoreMap = std::map<std::string, Tensor>;

/// Trunk plus grafted branches. Immutable once built; inference is const and
/// safe to run concurrently.
class GraftedModel {
 public:
  struct GraftedBranch {
    Branch branch;
    std::vector<Block> blocks;
    Head head;
  };

  GraftedModel(TrunkWeights trunk, const std::vector<Branch>& branches,
               bool allow_fingerprint_override = false)
      : trunk_(std::move(trunk)) {
    trunk_.validate();
    trunk_fingerprint_ = trunk_.fingerprint();
    trunk_blocks_ = trunk_.blocks();
    for (const auto& b : branches) add(b, allow_fingerprint_override, false);
  }

  const TrunkWeights& trunk() const { return trunk_; }
  std::uint64_t trunk_fingerprint() const { return trunk_fingerprint_; }
  const std::map<std::string, GraftedBranch>& branches() const { return branches_; }

  std::vector<std::string> attributes() const {
    std::vector<std::string> out;
    for (const auto& [name, _] : branches_) out.push_back(name);
    return out;
  }

  /// Adds (or with `replace`, swaps) a branch. Callers needing atomic
  /// visibility copy the model and publish the copy.
  void add(const Branch& branch, bool allow_fingerprint_override, bool replace) {
    branch.validate();
    if (branch.trunk_fingerprint != trunk_fingerprint_ && !allow_fingerprint_override) {
      throw Error(ErrorCode::kFingerprintMismatch,
                  "branch '" + branch.attribute + "' was trained against trunk " +
                      fingerprint_hex(branch.trunk_fingerprint) +
                      " but the trunk is " + fingerprint_hex(trunk_fingerprint_));
    }
    if (branch.graft_point > trunk_.depth) {
      throw Error(ErrorCode::kOutOfRange,
                  "branch '" + branch.attribute + "' grafts at block " +
                      std::to_string(branch.graft_point) + " beyond trunk depth " +
                      std::to_string(trunk_.depth));
    }
    if (!(branch.config == trunk_.config)) {
      throw Error(ErrorCode::kShapeMismatch,
                  "branch '" + branch.attribute + "' uses a different backbone config");
    }
    if (branches_.count(branch.attribute) && !replace) {
      throw Error(ErrorCode::kDuplicateAttribute,
                  "attribute '" + branch.attribute + "' is already grafted");
    }
    if (branch.trunk_fingerprint != trunk_fingerprint_) fingerprint_overridden_ = true;
    branches_[branch.attribute] = GraftedBranch{branch, branch.blocks(), branch.head()};
  }

  /// Per-attribute class probabilities ([N x K] each). Trunk blocks are
  /// evaluated once per request up to the deepest graft point needed and
  /// shared across branches. `trunk_block_evals`, when given, is incremented
  /// by the number of trunk block evaluations performed.
  ScoreMap infer(const Tensor& x, const std::vector<std::string>& filter = {},
                 std::size_t* trunk_block_evals = nullptr) const {
    const Tensor batch = as_batch(x);
    check_input(trunk_.config, batch);
    std::vector<const GraftedBranch*> selected;
    if (filter.empty()) {
      for (const auto& [_, b] : branches_) selected.push_back(&b);
    } else {
      for (const auto& name : filter) {
        auto it = branches_.find(name);
        if (it == branches_.end()) {
          std::string known;
          for (const auto& [k, _] : branches_) known += (known.empty() ? "" : ", ") + k;
          throw Error(ErrorCode::kUnknownAttribute,
                      "unknown attribute '" + name + "' (known: " + known + ")");
        }
        selected.push_back(&it->second);
      }
    }
    std::stable_sort(selected.begin(), selected.end(), [](auto* a, auto* b) {
      return a->branch.graft_point < b->branch.graft_point;
    });
    ScoreMap scores;
    Tensor shared = batch;
    std::size_t depth = 0;
    for (const auto* gb : selected) {
      while (depth < gb->branch.graft_point) {
        shared = trunk_blocks_[depth].infer(shared);
        ++depth;
        if (trunk_block_evals) ++*trunk_block_evals;
      }
      Tensor a = shared;
      for (const auto& blk : gb->blocks) a = blk.infer(a);
      scores[gb->branch.attribute] = gb->head.probabilities(a);
    }
    return scores;
  }

  /// Serializes trunk and branches into one file.
  WeightFile to_file() const {
    WeightFile f;
    json branch_meta = json::array();
    for (const auto& [name, t] : trunk_.tensors) f.tensors["trunk/" + name] = t;
    for (const auto& [attr, gb] : branches_) {
      for (const auto& [name, t] : gb.branch.tensors)
        f.tensors["branch/" + attr + "/" + name] = t;
      branch_meta.push_back(gb.branch.meta());
    }
    json meta{{"kind", "composite"},
              {"trunk", json::parse(trunk_.to_file().metadata)},
              {"branches", branch_meta},
              {"fingerprint_override", fingerprint_overridden_}};
    f.metadata = meta.dump();
    return f;
  }

  static GraftedModel from_file(const WeightFile& file) {
    const auto meta = file.metadata.empty() ? json() : json::parse(file.metadata);
    if (!meta.is_object() || meta.value("kind", "") != "composite") {
      throw Error(ErrorCode::kDecode, "weight file is not a composite model");
    }
    WeightFile trunk_file{{}, meta.at("trunk").dump()};
    std::map<std::string, NamedTensors> per_branch;
    for (const auto& [name, t] : file.tensors) {
      if (name.rfind("trunk/", 0) == 0) {
        trunk_file.tensors[name.substr(6)] = t;
      } else if (name.rfind("branch/", 0) == 0) {
        const auto rest = name.substr(7);
        const auto slash = rest.find('/');
        if (slash == std::string::npos) {
          throw Error(ErrorCode::kDecode, "bad composite record '" + name + "'");
        }
        per_branch[rest.substr(0, slash)][rest.substr(slash + 1)] = t;
      } else {
        throw Error(ErrorCode::kDecode, "bad composite record '" + name + "'");
      }
    }
    std::vector<Branch> branches;
    for (const auto& bm : meta.at("branches")) {
      const auto attr = bm.at("attribute").get<std::string>();
      branches.push_back(Branch::from_meta(bm, per_branch[attr]));
    }
    return GraftedModel(TrunkWeights::from_file(trunk_file), branches,
                        meta.value("fingerprint_override", false));
  }

 private:
  TrunkWeights trunk_;
  std::uint64_t trunk_fingerprint_ = 0;
  std::vector<Block> trunk_blocks_;
  std::map<std::string, GraftedBranch> branches_;
  bool fingerprint_overridden_ = false;
};

inline GraftedModel graft(const TrunkWeights& trunk, const std::vector<Branch>& branches,
                          bool allow_fingerprint_override = false) {
  return GraftedModel(trunk, branches, allow_fingerprint_override);
}

}  // namespace graftnet
