#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "cohortfl/error.hpp"

namespace cohortfl {

/// Pearson correlation; 0 when either side has zero variance.
inline double pearson(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size(), "pearson: size mismatch");
  const auto n = static_cast<double>(x.size());
  if (x.empty()) return 0.0;
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

/// Adjusted Rand Index between two labelings of the same items.
inline double adjusted_rand_index(std::span<const int> a, std::span<const int> b) {
  require(a.size() == b.size(), "ARI: size mismatch");
  const auto n = static_cast<double>(a.size());
  if (a.size() < 2) return 1.0;
  std::map<std::pair<int, int>, double> table;
  std::map<int, double> ra, rb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    table[{a[i], b[i]}] += 1.0;
    ra[a[i]] += 1.0;
    rb[b[i]] += 1.0;
  }
  auto c2 = [](double v) { return v * (v - 1.0) / 2.0; };
  double sum_ij = 0.0, sum_a = 0.0, sum_b = 0.0;
  for (const auto& [k, v] : table) sum_ij += c2(v);
  for (const auto& [k, v] : ra) sum_a += c2(v);
  for (const auto& [k, v] : rb) sum_b += c2(v);
  const double expected = sum_a * sum_b / c2(n);
  const double max_index = 0.5 * (sum_a + sum_b);
  if (max_index == expected) return 1.0;
  return (sum_ij - expected) / (max_index - expected);
}

struct BiasStats {
  double variance = 0.0;
  double worst10_mean = 0.0;
  double best10_mean = 0.0;
};

/// Population variance of per-client accuracies and the means of the bottom
/// and top deciles (decile size = floor(n / 10)).
inline double population_variance(std::span<const double> x) {
  require(!x.empty(), "variance of an empty sample");
  const auto n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double a : x) mean += a;
  mean /= n;
  double var = 0.0;
  for (double a : x) var += (a - mean) * (a - mean);
  return var / n;
}

inline BiasStats bias_stats(std::span<const double> accuracies) {
  require(accuracies.size() >= 10, "bias_stats needs at least 10 clients");
  std::vector<double> v(accuracies.begin(), accuracies.end());
  std::sort(v.begin(), v.end());
  BiasStats s;
  s.variance = population_variance(v);
  const std::size_t dec = v.size() / 10;
  for (std::size_t i = 0; i < dec; ++i) {
    s.worst10_mean += v[i];
    s.best10_mean += v[v.size() - 1 - i];
  }
  s.worst10_mean /= static_cast<double>(dec);
  s.best10_mean /= static_cast<double>(dec);
  return s;
}

}  // namespace cohortfl
