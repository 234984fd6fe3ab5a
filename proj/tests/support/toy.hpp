#pragma once

#include <random>
#include <string>
#include <vector>

#include "graftnet/backbone.hpp"
#include "graftnet/dataset.hpp"
#include "graftnet/optim.hpp"
#include "graftnet/pretrain.hpp"

namespace graftnet::testing {

// Six blocks, two downsamples, 12x12 inputs: big enough to exercise every
// code path, small enough to train in milliseconds.
inline BackboneConfig toy_config() {
  BackboneConfig c;
  c.block_count = 6;
  c.widths = {4, 6, 6, 8, 8, 8};
  c.downsample_blocks = {1, 3};
  c.in_channels = 3;
  c.in_height = 12;
  c.in_width = 12;
  return c;
}

inline Tensor random_images(std::size_t n, const BackboneConfig& c, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> d(0.0f, 1.0f);
  Tensor t({n, c.in_channels, c.in_height, c.in_width});
  for (auto& v : t.data()) v = d(rng);
  return t;
}

// Label 1 images carry a brighter channel 0.
inline SubDataset toy_dataset(const std::string& attr, std::size_t n, const BackboneConfig& c,
                              std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  SubDataset d;
  d.attribute = attr;
  d.classes = {"neg", "pos"};
  const std::size_t hw = c.in_height * c.in_width;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor img = random_images(1, c, rng).reshaped({c.in_channels, c.in_height, c.in_width});
    const int label = static_cast<int>(i % 2);
    if (label == 1)
      for (std::size_t p = 0; p < hw; ++p) img[p] = 0.3f + 0.7f * img[p];
    Sample s{attr + "/" + std::to_string(i), img, label};
    (i % 5 == 0 ? d.test : d.train).push_back(std::move(s));
  }
  return d;
}

// A model with two heads whose BN statistics have moved away from init.
inline BackboneModel trained_toy_model(std::uint64_t seed, std::size_t steps = 10) {
  const auto cfg = toy_config();
  BackboneModel m = build_backbone(cfg, seed);
  std::mt19937_64 rng(seed + 1);
  m.add_head("a", {"neg", "pos"}, Pooling::kGap, cfg.block_count, rng);
  m.add_head("b", {"x", "y", "z"}, Pooling::kBilinear, 4, rng);
  set_trainable(m, 0);
  SgdMomentum<float> opt;
  std::uniform_int_distribution<int> lab2(0, 1), lab3(0, 2);
  for (std::size_t s = 0; s < 2 * steps; ++s) {
    Batch b;
    b.attribute_id = s % 2;
    b.images = random_images(8, cfg, rng);
    for (int i = 0; i < 8; ++i) b.labels.push_back(b.attribute_id == 0 ? lab2(rng) : lab3(rng));
    dynamic_step(m, b, opt, 0.05f, 0.9f, false);
  }
  return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

}  // namespace graftnet::testing
