#pragma once

// Weighted k-means: k-means++ seeding, Lloyd iterations, optional restarts.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "graftnet/error.hpp"

namespace graftnet {

/// Row-major N x D matrix of doubles with optional per-row references.
struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;
  std::vector<std::string> refs;

  FeatureMatrix() = default;
  FeatureMatrix(std::size_t n, std::size_t d) : rows(n), cols(d), data(n * d) {}

  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }

  void push_row(std::span<const double> v, std::string ref = {}) {
    if (rows == 0 && cols == 0) cols = v.size();
    if (v.size() != cols) {
      throw Error(ErrorCode::kShapeMismatch, "row of width " + std::to_string(v.size()) +
                                                 " pushed into matrix of width " +
                                                 std::to_string(cols));
    }
    data.insert(data.end(), v.begin(), v.end());
    refs.push_back(std::move(ref));
    ++rows;
  }

  FeatureMatrix select(const std::vector<std::size_t>& idx) const {
    FeatureMatrix out;
    out.cols = cols;
    for (auto i : idx) out.push_row(row(i), i < refs.size() ? refs[i] : std::string());
    return out;
  }
};

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

struct KMeansResult {
  std::vector<std::size_t> assignments;
  FeatureMatrix centroids;
  double inertia = 0.0;
  std::vector<double> history;  // inertia after each assignment step
  std::size_t iterations = 0;
};

namespace kmeans_detail {

inline std::size_t nearest(const FeatureMatrix& c, std::span<const double> x, double* dist) {
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < c.rows; ++j) {
    const double d = squared_distance(x, c.row(j));
    if (d < bd) {
      bd = d;
      best = j;
    }
  }
  if (dist) *dist = bd;
  return best;
}

inline FeatureMatrix seed_plus_plus(const FeatureMatrix& x, std::span<const double> w,
                                    std::size_t k, std::mt19937_64& rng) {
  FeatureMatrix c;
  c.cols = x.cols;
  std::vector<double> d2(x.rows, std::numeric_limits<double>::infinity());
  std::discrete_distribution<std::size_t> first(w.begin(), w.end());
  std::size_t pick = first(rng);
  for (std::size_t j = 0; j < k; ++j) {
    c.push_row(x.row(pick));
    std::vector<double> p(x.rows);
    double total = 0.0;
    for (std::size_t i = 0; i < x.rows; ++i) {
      d2[i] = std::min(d2[i], squared_distance(x.row(i), c.row(j)));
      p[i] = w[i] * d2[i];
      total += p[i];
    }
    if (j + 1 == k) break;
    if (total <= 0.0) {
      // Every point coincides with a centroid; fall back to weight sampling.
      pick = first(rng);
    } else {
      std::discrete_distribution<std::size_t> next(p.begin(), p.end());
      pick = next(rng);
    }
  }
  return c;
}

inline KMeansResult run_once(const FeatureMatrix& x, std::span<const double> w, std::size_t k,
                             std::mt19937_64& rng, std::size_t max_iters) {
  KMeansResult r;
  r.centroids = seed_plus_plus(x, w, k, rng);
  r.assignments.assign(x.rows, 0);
  std::vector<double> dist(x.rows);
  for (std::size_t iter = 0; iter < max_iters; ++iter) {
    bool changed = iter == 0;
    double inertia = 0.0;
    for (std::size_t i = 0; i < x.rows; ++i) {
      const auto a = nearest(r.centroids, x.row(i), &dist[i]);
      changed = changed || a != r.assignments[i];
      r.assignments[i] = a;
      inertia += w[i] * dist[i];
    }
    r.history.push_back(inertia);
    r.inertia = inertia;
    r.iterations = iter + 1;
    if (!changed) break;

    std::vector<double> mass(k, 0.0);
    FeatureMatrix sum(k, x.cols);
    for (std::size_t i = 0; i < x.rows; ++i) {
      const auto a = r.assignments[i];
      mass[a] += w[i];
      auto s = sum.row(a);
      const auto xi = x.row(i);
      for (std::size_t d = 0; d < x.cols; ++d) s[d] += w[i] * xi[d];
    }
    for (std::size_t j = 0; j < k; ++j) {
      auto c = r.centroids.row(j);
      if (mass[j] > 0.0) {
        const auto s = sum.row(j);
        for (std::size_t d = 0; d < x.cols; ++d) c[d] = s[d] / mass[j];
      } else {
        // Empty cluster: move it onto the point that is worst served.
        std::size_t far = 0;
        for (std::size_t i = 1; i < x.rows; ++i)
          if (w[i] * dist[i] > w[far] * dist[far]) far = i;
        const auto xf = x.row(far);
        std::copy(xf.begin(), xf.end(), c.begin());
        dist[far] = 0.0;
      }
    }
  }
  return r;
}

}  // namespace kmeans_detail

/// Clusters the rows of `x` into k groups. `weights` (optional) scale each
/// row's contribution. The run with the lowest final inertia among
/// `restarts` seeds wins.
inline KMeansResult kmeans(const FeatureMatrix& x, std::size_t k, std::uint64_t seed,
                           std::size_t max_iters = 100, std::size_t restarts = 1,
                           std::span<const double> weights = {}) {
  if (k == 0) throw Error(ErrorCode::kInvalidArgument, "k must be >= 1");
  if (x.rows < k) {
    throw Error(ErrorCode::kInvalidArgument, "k-means needs N >= k (N=" +
                                                 std::to_string(x.rows) +
                                                 ", k=" + std::to_string(k) + ")");
  }
  std::vector<double> w(weights.begin(), weights.end());
  if (w.empty()) w.assign(x.rows, 1.0);
  if (w.size() != x.rows) throw Error(ErrorCode::kShapeMismatch, "weight count != row count");
  for (double v : x.data)
    if (!std::isfinite(v)) throw Error(ErrorCode::kNonFinite, "non-finite feature value");
  std::mt19937_64 rng(seed);
  KMeansResult best;
  for (std::size_t r = 0; r < std::max<std::size_t>(1, restarts); ++r) {
    auto res = kmeans_detail::run_once(x, w, k, rng, std::max<std::size_t>(1, max_iters));
    if (r == 0 || res.inertia < best.inertia) best = std::move(res);
  }
  return best;
}

}  // namespace graftnet
