#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "cohortfl/error.hpp"
#include "cohortfl/random.hpp"

namespace cohortfl {

using Vec = std::vector<double>;

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

/// Unit-length copy; the zero vector stays zero.
inline Vec normalized(std::span<const double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  Vec out(v.begin(), v.end());
  if (n > 0.0)
    for (auto& x : out) x /= n;
  return out;
}

inline std::size_t nearest(std::span<const Vec> centroids, std::span<const double> x) {
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < centroids.size(); ++k) {
    const double d = sq_dist(centroids[k], x);
    if (d < bd) {
      bd = d;
      best = k;
    }
  }
  return best;
}

struct KMeansResult {
  std::vector<int> labels;
  std::vector<Vec> centroids;
  int iterations = 0;
  int reseeds = 0;
};

// Moves a vacated centroid onto the point farthest from its own centroid.
// Returns false if no point can be spared (every point is already alone).
inline bool reseed_empty(std::span<const Vec> points, std::vector<int>& labels, std::vector<Vec>& centroids,
                         std::size_t empty_k) {
  std::vector<std::size_t> sizes(centroids.size(), 0);
  for (int l : labels) ++sizes[static_cast<std::size_t>(l)];
  std::size_t far = points.size();
  double fd = -1.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto l = static_cast<std::size_t>(labels[i]);
    if (sizes[l] < 2) continue;
    const double d = sq_dist(points[i], centroids[l]);
    if (d > fd) {
      fd = d;
      far = i;
    }
  }
  if (far == points.size()) return false;
  centroids[empty_k] = points[far];
  labels[far] = static_cast<int>(empty_k);
  return true;
}

/// Lloyd's K-means with k-means++ seeding on the given points (callers
/// normalize first for cosine geometry). Stops when the largest centroid
/// move is below `tol` or after `max_iter` iterations.
inline KMeansResult kmeans(std::span<const Vec> points, int K, std::uint64_t seed, int max_iter = 100,
                           double tol = 1e-6) {
  require(K >= 1, "K must be >= 1");
  require(points.size() >= static_cast<std::size_t>(K), "fewer points than clusters");
  const std::size_t n = points.size();
  const std::size_t dim = points.front().size();
  Rng rng = make_rng(seed);

  KMeansResult r;
  r.centroids.reserve(static_cast<std::size_t>(K));
  r.centroids.push_back(points[std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)]);
  std::vector<double> d2(n);
  while (r.centroids.size() < static_cast<std::size_t>(K)) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = sq_dist(points[i], r.centroids[nearest(r.centroids, points[i])]);
      total += d2[i];
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      double u = uniform01(rng) * total;
      for (pick = 0; pick + 1 < n; ++pick) {
        u -= d2[pick];
        if (u < 0.0) break;
      }
    } else {
      pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    }
    r.centroids.push_back(points[pick]);
  }

  r.labels.assign(n, 0);
  for (int it = 0; it < max_iter; ++it) {
    r.iterations = it + 1;
    for (std::size_t i = 0; i < n; ++i) r.labels[i] = static_cast<int>(nearest(r.centroids, points[i]));
    std::vector<Vec> next(static_cast<std::size_t>(K), Vec(dim, 0.0));
    std::vector<std::size_t> count(static_cast<std::size_t>(K), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto l = static_cast<std::size_t>(r.labels[i]);
      ++count[l];
      for (std::size_t j = 0; j < dim; ++j) next[l][j] += points[i][j];
    }
    for (std::size_t k = 0; k < static_cast<std::size_t>(K); ++k)
      if (count[k] > 0)
        for (auto& v : next[k]) v /= static_cast<double>(count[k]);
    bool reseeded = false;
    for (std::size_t k = 0; k < static_cast<std::size_t>(K); ++k) {
      if (count[k] > 0) continue;
      if (reseed_empty(points, r.labels, next, k)) {
        ++r.reseeds;
        reseeded = true;
      }
    }
    double shift = 0.0;
    for (std::size_t k = 0; k < static_cast<std::size_t>(K); ++k)
      shift = std::max(shift, std::sqrt(sq_dist(next[k], r.centroids[k])));
    r.centroids = std::move(next);
    if (shift < tol && !reseeded) break;
  }
  // Labels are those of the last assignment step (plus re-seed moves); the
  // centroids are their means.
  return r;
}

}  // namespace cohortfl
