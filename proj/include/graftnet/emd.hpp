#pragma once

// Signatures and the earth mover's distance between them, solved exactly as
// a balanced transportation problem with the MODI (u-v) simplex method.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <queue>
#include <vector>

#include "graftnet/error.hpp"
#include "graftnet/kmeans.hpp"

namespace graftnet {

struct Signature {
  FeatureMatrix points;
  std::vector<double> weights;  // positive, summing to 1

  std::size_t size() const { return weights.size(); }

  void validate() const {
    if (weights.empty() || points.rows != weights.size()) {
      throw Error(ErrorCode::kInvalidArgument, "signature needs one weight per point");
    }
    double total = 0.0;
    for (double w : weights) {
      if (!(w > 0.0)) throw Error(ErrorCode::kInvalidArgument, "signature weights must be positive");
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-9) {
      throw Error(ErrorCode::kInvalidArgument, "signature weights sum to " + std::to_string(total));
    }
  }
};

/// Distinct rows (lexicographic order) with multiplicities.
inline std::pair<FeatureMatrix, std::vector<double>> unique_rows(const FeatureMatrix& x) {
  std::vector<std::size_t> order(x.rows);
  for (std::size_t i = 0; i < x.rows; ++i) order[i] = i;
  auto less = [&](std::size_t a, std::size_t b) {
    const auto ra = x.row(a), rb = x.row(b);
    return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
  };
  std::sort(order.begin(), order.end(), less);
  FeatureMatrix out;
  out.cols = x.cols;
  std::vector<double> counts;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i > 0 && !less(order[i - 1], order[i])) {
      counts.back() += 1.0;
      continue;
    }
    out.push_row(x.row(order[i]));
    counts.push_back(1.0);
  }
  return {out, counts};
}

/// At most `s` weighted points summarizing `vectors`: the distinct vectors
/// themselves when there are few enough, otherwise k-means sub-centroids
/// weighted by cluster mass.
inline Signature build_signature(const FeatureMatrix& vectors, std::size_t s, std::uint64_t seed) {
  if (vectors.rows == 0) throw Error(ErrorCode::kInvalidArgument, "signature of an empty set");
  if (s == 0) throw Error(ErrorCode::kInvalidArgument, "signature size must be >= 1");
  auto [points, counts] = unique_rows(vectors);
  const double n = static_cast<double>(vectors.rows);
  Signature sig;
  if (points.rows <= s) {
    sig.points = std::move(points);
    for (double c : counts) sig.weights.push_back(c / n);
    return sig;
  }
  for (auto& c : counts) c /= n;
  const auto km = kmeans(points, s, seed, 100, 1, counts);
  std::vector<double> mass(s, 0.0);
  for (std::size_t i = 0; i < points.rows; ++i) mass[km.assignments[i]] += counts[i];
  sig.points.cols = points.cols;
  for (std::size_t j = 0; j < s; ++j) {
    if (mass[j] <= 0.0) continue;
    sig.points.push_row(km.centroids.row(j));
    sig.weights.push_back(mass[j]);
  }
  return sig;
}

// ---------------------------------------------------------------------------

struct TransportSolution {
  double cost = 0.0;
  std::vector<double> flow;  // n x m, row-major
  std::size_t pivots = 0;
};

/// Minimum-cost transport of `supply` onto `demand` (equal totals) under
/// `cost` (n x m, row-major).
inline TransportSolution solve_transport(const std::vector<double>& supply,
                                         const std::vector<double>& demand,
                                         const std::vector<double>& cost) {
  const std::size_t n = supply.size(), m = demand.size();
  if (n == 0 || m == 0 || cost.size() != n * m) {
    throw Error(ErrorCode::kShapeMismatch, "transport problem dimensions disagree");
  }
  std::vector<double> flow(n * m, 0.0);
  std::vector<char> basic(n * m, 0);

  // Northwest-corner start; exactly n + m - 1 basic cells (some may carry 0).
  {
    std::vector<double> s = supply, d = demand;
    std::size_t i = 0, j = 0;
    while (i < n && j < m) {
      const double q = std::min(s[i], d[j]);
      flow[i * m + j] = q;
      basic[i * m + j] = 1;
      s[i] -= q;
      d[j] -= q;
      if (i + 1 == n) {
        ++j;
      } else if (j + 1 == m) {
        ++i;
      } else if (s[i] <= d[j]) {
        ++i;
      } else {
        ++j;
      }
    }
  }

  const double scale = std::max(1.0, *std::max_element(cost.begin(), cost.end()));
  const double tol = 1e-12 * scale;
  TransportSolution sol;
  std::vector<double> u(n), v(m);
  std::vector<std::size_t> parent(n + m);
  const std::size_t kNone = std::numeric_limits<std::size_t>::max();
  const std::size_t max_pivots = 50 * (n + m) * (n + m) + 1000;

  for (;;) {
    // Potentials from the basis tree: u_i + v_j = c_ij on basic cells.
    std::vector<char> seen(n + m, 0);
    std::queue<std::size_t> q;
    q.push(0);
    seen[0] = 1;
    u[0] = 0.0;
    while (!q.empty()) {
      const std::size_t node = q.front();
      q.pop();
      if (node < n) {
        for (std::size_t j = 0; j < m; ++j)
          if (basic[node * m + j] && !seen[n + j]) {
            v[j] = cost[node * m + j] - u[node];
            seen[n + j] = 1;
            q.push(n + j);
          }
      } else {
        const std::size_t j = node - n;
        for (std::size_t i = 0; i < n; ++i)
          if (basic[i * m + j] && !seen[i]) {
            u[i] = cost[i * m + j] - v[j];
            seen[i] = 1;
            q.push(i);
          }
      }
    }

    // Entering cell: most negative reduced cost, first in row-major order.
    std::size_t ei = kNone, ej = kNone;
    double best = -tol;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        if (basic[i * m + j]) continue;
        const double r = cost[i * m + j] - u[i] - v[j];
        if (r < best) {
          best = r;
          ei = i;
          ej = j;
        }
      }
    if (ei == kNone || sol.pivots >= max_pivots) break;

    // Tree path from row ei to column ej.
    std::fill(parent.begin(), parent.end(), kNone);
    std::fill(seen.begin(), seen.end(), 0);
    q = {};
    q.push(ei);
    seen[ei] = 1;
    while (!q.empty() && !seen[n + ej]) {
      const std::size_t node = q.front();
      q.pop();
      if (node < n) {
        for (std::size_t j = 0; j < m; ++j)
          if (basic[node * m + j] && !seen[n + j]) {
            seen[n + j] = 1;
            parent[n + j] = node;
            q.push(n + j);
          }
      } else {
        const std::size_t j = node - n;
        for (std::size_t i = 0; i < n; ++i)
          if (basic[i * m + j] && !seen[i]) {
            seen[i] = 1;
            parent[i] = node;
            q.push(i);
          }
      }
    }
    // Cells along the path, walking back from column ej; signs alternate
    // starting with "-" next to the entering "+" cell.
    std::vector<std::size_t> cells;
    for (std::size_t node = n + ej; node != ei; node = parent[node]) {
      const std::size_t p = parent[node];
      const std::size_t i = node < n ? node : p;
      const std::size_t j = node < n ? p - n : node - n;
      cells.push_back(i * m + j);
    }
    double theta = std::numeric_limits<double>::infinity();
    std::size_t leaving = kNone;
    for (std::size_t t = 0; t < cells.size(); t += 2) {
      if (flow[cells[t]] < theta) {
        theta = flow[cells[t]];
        leaving = cells[t];
      }
    }
    if (leaving == kNone) throw Error(ErrorCode::kState, "transport basis is not a spanning tree");
    for (std::size_t t = 0; t < cells.size(); ++t) flow[cells[t]] += (t % 2 == 0) ? -theta : theta;
    flow[ei * m + ej] = theta;
    basic[ei * m + ej] = 1;
    basic[leaving] = 0;
    flow[leaving] = 0.0;
    ++sol.pivots;
  }

  for (std::size_t k = 0; k < n * m; ++k) sol.cost += flow[k] * cost[k];
  sol.flow = std::move(flow);
  return sol;
}

inline double euclidean(std::span<const double> a, std::span<const double> b) {
  return std::sqrt(squared_distance(a, b));
}

/// Earth mover's distance under the Euclidean ground metric.
inline double emd(const Signature& a, const Signature& b) {
  a.validate();
  b.validate();
  if (a.points.cols != b.points.cols) {
    throw Error(ErrorCode::kShapeMismatch, "signatures live in different dimensions");
  }
  std::vector<double> cost(a.size() * b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j)
      cost[i * b.size() + j] = euclidean(a.points.row(i), b.points.row(j));
  // Rebalance round-off so both sides carry exactly the same total.
  std::vector<double> supply = a.weights, demand = b.weights;
  double sa = 0.0, sb = 0.0;
  for (double w : supply) sa += w;
  for (double w : demand) sb += w;
  auto big = std::max_element(demand.begin(), demand.end());
  *big += sa - sb;
  return solve_transport(supply, demand, cost).cost / sa;
}

}  // namespace graftnet
