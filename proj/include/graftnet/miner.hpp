#pragma once

// Hard-negative mining: cluster negatives in trunk-feature space, rank the
// clusters by EMD to the positives, keep the nearest ones whole and thin the
// rest.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "graftnet/backbone.hpp"
#include "graftnet/dataset.hpp"
#include "graftnet/emd.hpp"
#include "graftnet/kmeans.hpp"

namespace graftnet {

/// Trunk activations (all trunk blocks) followed by GAP, one row per sample.
inline FeatureMatrix extract_features(const TrunkWeights& trunk, const std::vector<Sample>& samples,
                                      std::size_t chunk = 64) {
  trunk.validate();
  const auto blocks = trunk.blocks();
  FeatureMatrix out;
  out.cols = trunk.config.channels_at(trunk.depth);
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(samples.size(), start + chunk); ++i) idx.push_back(i);
    Tensor a = stack_images(samples, idx);
    check_input(trunk.config, a);
    for (const auto& b : blocks) a = b.infer(a);
    const Tensor g = kernels::global_avg_pool_forward(a);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::vector<double> row(g.raw() + r * out.cols, g.raw() + (r + 1) * out.cols);
      out.push_row(row, samples[idx[r]].ref);
    }
  }
  return out;
}

/// Loads each manifest entry and extracts its features; decode failures
/// name the offending image.
inline FeatureMatrix extract_features(const TrunkWeights& trunk, const DatasetManifest& manifest,
                                      const std::vector<ManifestEntry>& entries) {
  std::vector<Sample> samples;
  samples.reserve(entries.size());
  for (const auto& e : entries) {
    try {
      samples.push_back({e.path, load_image(manifest.resolve(e.path)), e.class_index});
    } catch (const Error& err) {
      throw Error(err.code(), "cannot decode image '" + e.path + "': " + err.what());
    }
  }
  return extract_features(trunk, samples);
}

struct MiningParams {
  std::size_t k = 8;
  std::size_t signature_size = 8;
  double keep_fraction = 0.5;
  double far_retain_rate = 0.2;
  std::uint64_t seed = 1;
  std::size_t max_iters = 100;
  std::size_t restarts = 3;

  void validate() const {
    if (k == 0) throw Error(ErrorCode::kInvalidArgument, "k must be >= 1");
    if (signature_size == 0) throw Error(ErrorCode::kInvalidArgument, "signature size must be >= 1");
    if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
      throw Error(ErrorCode::kInvalidArgument, "keep fraction must lie in (0, 1]");
    }
    if (!(far_retain_rate >= 0.0 && far_retain_rate <= 1.0)) {
      throw Error(ErrorCode::kInvalidArgument, "far retain rate must lie in [0, 1]");
    }
  }
};

struct ClusterReport {
  std::size_t cluster = 0;
  std::size_t rank = 0;  // 0 = nearest to the positives
  std::size_t size = 0;
  double emd = 0.0;
  double cosine = 0.0;  // centroid vs positive mean; reported only
  bool kept_whole = false;
  std::size_t kept = 0;
};

struct MiningResult {
  std::vector<std::size_t> kept;  // ascending negative row indices
  std::vector<ClusterReport> clusters;
  std::vector<std::size_t> assignments;
  std::size_t k = 0;

  json report() const {
    json cl = json::array();
    for (const auto& c : clusters)
      cl.push_back({{"cluster", c.cluster},
                    {"rank", c.rank},
                    {"size", c.size},
                    {"emd", c.emd},
                    {"cosine", c.cosine},
                    {"kept_whole", c.kept_whole},
                    {"kept", c.kept}});
    std::size_t total = 0;
    for (const auto& c : clusters) total += c.size;
    return json{{"k", k}, {"negatives", total}, {"kept", kept.size()}, {"clusters", cl}};
  }
};

inline std::vector<double> column_mean(const FeatureMatrix& x) {
  std::vector<double> m(x.cols, 0.0);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const auto r = x.row(i);
    for (std::size_t d = 0; d < x.cols; ++d) m[d] += r[d];
  }
  for (auto& v : m) v /= static_cast<double>(x.rows);
  return m;
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return aa > 0.0 && bb > 0.0 ? ab / std::sqrt(aa * bb) : 0.0;
}

/// Per-cluster EMD to the positive signature and the resulting ranking
/// (ascending EMD, ties by cluster id). Empty clusters rank last.
inline std::vector<ClusterReport> rank_clusters(const FeatureMatrix& negatives,
                                                const std::vector<std::size_t>& assignments,
                                                std::size_t k, const Signature& positive,
                                                const std::vector<double>& positive_mean,
                                                const MiningParams& params) {
  std::vector<ClusterReport> reports(k);
  std::vector<std::vector<std::size_t>> members(k);
  for (std::size_t i = 0; i < assignments.size(); ++i) members.at(assignments[i]).push_back(i);
  for (std::size_t c = 0; c < k; ++c) {
    auto& r = reports[c];
    r.cluster = c;
    r.size = members[c].size();
    if (members[c].empty()) {
      r.emd = std::numeric_limits<double>::infinity();
      continue;
    }
    const auto pts = negatives.select(members[c]);
    r.emd = emd(build_signature(pts, params.signature_size, params.seed), positive);
    r.cosine = cosine_similarity(column_mean(pts), positive_mean);
  }
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return reports[a].emd < reports[b].emd; });
  for (std::size_t rank = 0; rank < k; ++rank) reports[order[rank]].rank = rank;
  return reports;
}

inline MiningResult mine(const FeatureMatrix& positives, const FeatureMatrix& negatives,
                         const MiningParams& params) {
  params.validate();
  if (positives.rows == 0 || negatives.rows == 0) {
    throw Error(ErrorCode::kInvalidArgument, "mining needs positives and negatives");
  }
  if (positives.cols != negatives.cols) {
    throw Error(ErrorCode::kShapeMismatch, "positive and negative features differ in width");
  }
  MiningResult result;
  result.k = std::min(params.k, negatives.rows);
  const auto km = kmeans(negatives, result.k, params.seed, params.max_iters, params.restarts);
  result.assignments = km.assignments;
  const auto positive = build_signature(positives, params.signature_size, params.seed);
  result.clusters = rank_clusters(negatives, km.assignments, result.k, positive,
                                  column_mean(positives), params);

  const auto keep_whole = static_cast<std::size_t>(
      std::ceil(params.keep_fraction * static_cast<double>(result.k) - 1e-12));
  std::mt19937_64 rng(params.seed ^ 0x6d696e65u);
  std::vector<std::vector<std::size_t>> members(result.k);
  for (std::size_t i = 0; i < km.assignments.size(); ++i) members[km.assignments[i]].push_back(i);
  for (auto& c : result.clusters) {
    auto& m = members[c.cluster];
    if (c.rank < keep_whole) {
      c.kept_whole = true;
      c.kept = m.size();
      result.kept.insert(result.kept.end(), m.begin(), m.end());
    } else {
      const auto n = static_cast<std::size_t>(
          std::llround(params.far_retain_rate * static_cast<double>(m.size())));
      std::vector<std::size_t> sample = m;
      std::shuffle(sample.begin(), sample.end(), rng);
      sample.resize(std::min(n, sample.size()));
      c.kept = sample.size();
      result.kept.insert(result.kept.end(), sample.begin(), sample.end());
    }
  }
  std::sort(result.kept.begin(), result.kept.end());
  return result;
}

}  // namespace graftnet
