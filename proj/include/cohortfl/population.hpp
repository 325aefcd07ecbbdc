#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cohortfl/error.hpp"
#include "cohortfl/random.hpp"

namespace cohortfl {

using ClientId = std::int64_t;

struct LatentCohortSpec {
  int num_latent_cohorts = 1;
  double label_skew = 0.8;     // weight of the cohort profile in each client's label mix
  double feature_shift = 0.0;  // norm of the per-cohort feature-space offset
  std::vector<double> cohort_weights{1.0};
  // When set, every latent cohort maps class labels onto a different,
  // distinct permutation of the class-conditional feature means.
  bool conflicting_labels = false;
};

struct PopulationOptions {
  int min_samples = 30;
  int max_samples = 80;
  double class_separation = 3.0;
  double feature_noise = 1.0;
  double profile_peak = 0.6;  // label mass on a cohort's favored classes
  double availability_duty = 0.05;
  double availability_mean_on = 60.0;
  double availability_period = 100000.0;  // traces repeat with this period
  double compute_speed_median = 20.0;     // samples / second
  double network_time_median = 2.0;       // seconds
  double speed_log_sigma = 0.5;
};

struct Interval {
  double on = 0.0;
  double off = 0.0;

  friend bool operator==(const Interval&, const Interval&) = default;
};

struct ClientProfile {
  ClientId client_id = 0;
  int latent_cohort = 0;
  int feature_dim = 0;
  std::vector<double> features;  // row-major, size = samples * feature_dim
  std::vector<int> labels;
  std::vector<double> label_histogram;
  double compute_speed = 1.0;
  double network_time = 0.0;
  std::vector<Interval> availability;
  double availability_period = 0.0;  // 0 => trace is not periodic

  std::size_t num_samples() const { return labels.size(); }
  std::span<const double> sample(std::size_t i) const {
    return {features.data() + i * static_cast<std::size_t>(feature_dim),
            static_cast<std::size_t>(feature_dim)};
  }

  bool available_at(double t) const {
    if (availability_period > 0.0) t = std::fmod(t, availability_period);
    auto it = std::upper_bound(availability.begin(), availability.end(), t,
                               [](double v, const Interval& iv) { return v < iv.on; });
    if (it == availability.begin()) return false;
    --it;
    return t >= it->on && t < it->off;
  }

  friend bool operator==(const ClientProfile&, const ClientProfile&) = default;
};

struct Population {
  std::vector<ClientProfile> clients;
  int num_classes = 0;
  int feature_dim = 0;
  std::uint64_t rng_seed = 0;
  std::vector<std::vector<double>> cohort_profiles;  // label profile per latent cohort

  friend bool operator==(const Population&, const Population&) = default;
};

// Client ids are assigned densely from 0 by generate_population.
inline const ClientProfile& client_of(const Population& pop, ClientId id) {
  require(id >= 0 && static_cast<std::size_t>(id) < pop.clients.size() &&
              pop.clients[static_cast<std::size_t>(id)].client_id == id,
          "unknown client id");
  return pop.clients[static_cast<std::size_t>(id)];
}

namespace detail {

inline std::vector<double> dirichlet_flat(int n, Rng& rng) {
  std::gamma_distribution<double> g(1.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(n));
  double s = 0.0;
  for (auto& x : v) s += (x = g(rng));
  for (auto& x : v) x /= s;
  return v;
}

inline int draw_categorical(std::span<const double> p, Rng& rng) {
  double u = uniform01(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(p.size()) - 1;
}

inline std::vector<double> label_profile(int cohort, int num_cohorts, int num_classes, double peak) {
  std::vector<double> p(static_cast<std::size_t>(num_classes), 1.0 / num_classes);
  if (num_cohorts <= 1) return p;
  // Favored classes: a contiguous block per cohort, wrapping around.
  const int width = std::max(1, num_classes / num_cohorts);
  const int start = (cohort * num_classes) / num_cohorts;
  std::vector<bool> fav(p.size(), false);
  for (int j = 0; j < width; ++j) fav[static_cast<std::size_t>((start + j) % num_classes)] = true;
  const int rest = num_classes - width;
  for (std::size_t y = 0; y < p.size(); ++y)
    p[y] = fav[y] ? peak / width : (rest > 0 ? (1.0 - peak) / rest : 0.0);
  if (rest == 0) std::fill(p.begin(), p.end(), 1.0 / num_classes);
  return p;
}

inline std::vector<Interval> availability_trace(const PopulationOptions& opt, Rng& rng) {
  if (opt.availability_duty >= 1.0) return {{0.0, opt.availability_period}};
  if (opt.availability_duty <= 0.0) return {};
  const double mean_on = opt.availability_mean_on;
  const double mean_off = mean_on * (1.0 - opt.availability_duty) / opt.availability_duty;
  std::exponential_distribution<double> on_len(1.0 / mean_on), off_len(1.0 / mean_off);
  std::vector<Interval> out;
  double t = 0.0;
  // Start in the stationary mix of on/off states.
  bool on = uniform01(rng) < opt.availability_duty;
  while (t < opt.availability_period) {
    const double len = on ? on_len(rng) : off_len(rng);
    const double end = std::min(t + len, opt.availability_period);
    if (on && end > t) out.push_back({t, end});
    t = end;
    on = !on;
  }
  return out;
}

}  // namespace detail

inline void validate(const LatentCohortSpec& spec) {
  if (spec.num_latent_cohorts < 1) throw ConfigError("num_latent_cohorts must be >= 1");
  if (!(spec.label_skew > 0.0 && spec.label_skew <= 1.0))
    throw ConfigError("label_skew must be in (0, 1]");
  if (spec.feature_shift < 0.0) throw ConfigError("feature_shift must be >= 0");
  if (static_cast<int>(spec.cohort_weights.size()) != spec.num_latent_cohorts)
    throw ConfigError("cohort_weights must have one entry per latent cohort");
  double sum = 0.0;
  for (double w : spec.cohort_weights) {
    if (w < 0.0) throw ConfigError("cohort_weights must be non-negative");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("cohort_weights must sum to 1");
}

/// Synthetic population with a hidden latent-cohort structure.
///
/// Each client draws its latent cohort from `cohort_weights`, mixes the
/// cohort's label profile with a flat-Dirichlet draw (weight `label_skew` on
/// the profile), samples labels from that mix, and draws features from a
/// class-conditioned Gaussian displaced by the cohort's feature offset.
/// The result is a pure function of the arguments.
inline Population generate_population(const LatentCohortSpec& spec, int n_clients, int num_classes,
                                      int feature_dim, std::uint64_t seed,
                                      const PopulationOptions& opt = {}) {
  validate(spec);
  if (n_clients < spec.num_latent_cohorts)
    throw ConfigError("n_clients must be >= num_latent_cohorts");
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1");
  if (opt.min_samples < 2 || opt.max_samples < opt.min_samples)
    throw ConfigError("sample count range is invalid");

  const int K = spec.num_latent_cohorts;
  const auto C = static_cast<std::size_t>(num_classes);
  const auto d = static_cast<std::size_t>(feature_dim);

  Population pop;
  pop.num_classes = num_classes;
  pop.feature_dim = feature_dim;
  pop.rng_seed = seed;

  Rng world = make_rng(derive_seed(seed, "population.world"));
  std::normal_distribution<double> stdn(0.0, 1.0);
  auto random_direction = [&](double norm) {
    std::vector<double> v(d);
    double s = 0.0;
    for (auto& x : v) {
      x = stdn(world);
      s += x * x;
    }
    s = std::sqrt(s);
    for (auto& x : v) x = s > 0.0 ? x / s * norm : 0.0;
    return v;
  };

  std::vector<std::vector<double>> class_means(C);
  for (auto& m : class_means) m = random_direction(opt.class_separation);
  std::vector<std::vector<double>> cohort_shift(static_cast<std::size_t>(K));
  for (auto& s : cohort_shift) s = random_direction(spec.feature_shift);

  std::vector<std::vector<int>> perm(static_cast<std::size_t>(K));
  for (int c = 0; c < K; ++c) {
    auto& p = perm[static_cast<std::size_t>(c)];
    p.resize(C);
    std::iota(p.begin(), p.end(), 0);
    if (!spec.conflicting_labels || c == 0) continue;
    // Distinct permutations while enough exist; fall back to any shuffle.
    for (int attempt = 0; attempt < 1000; ++attempt) {
      std::shuffle(p.begin(), p.end(), world);
      bool fresh = std::none_of(perm.begin(), perm.begin() + c, [&](const auto& q) { return q == p; });
      if (fresh) break;
    }
  }

  for (int c = 0; c < K; ++c)
    pop.cohort_profiles.push_back(detail::label_profile(c, K, num_classes, opt.profile_peak));

  pop.clients.reserve(static_cast<std::size_t>(n_clients));
  for (int i = 0; i < n_clients; ++i) {
    Rng rng = make_rng(derive_seed(seed, "population.client", {static_cast<std::uint64_t>(i)}));
    std::normal_distribution<double> noise(0.0, 1.0);
    ClientProfile cl;
    cl.client_id = i;
    cl.feature_dim = feature_dim;
    cl.latent_cohort = detail::draw_categorical(spec.cohort_weights, rng);
    const auto c = static_cast<std::size_t>(cl.latent_cohort);

    std::vector<double> mix = detail::dirichlet_flat(num_classes, rng);
    for (std::size_t y = 0; y < C; ++y)
      mix[y] = spec.label_skew * pop.cohort_profiles[c][y] + (1.0 - spec.label_skew) * mix[y];

    const int n = std::uniform_int_distribution<int>(opt.min_samples, opt.max_samples)(rng);
    cl.labels.resize(static_cast<std::size_t>(n));
    cl.features.resize(static_cast<std::size_t>(n) * d);
    cl.label_histogram.assign(C, 0.0);
    for (int s = 0; s < n; ++s) {
      const int y = detail::draw_categorical(mix, rng);
      cl.labels[static_cast<std::size_t>(s)] = y;
      cl.label_histogram[static_cast<std::size_t>(y)] += 1.0 / n;
      const auto& mu = class_means[static_cast<std::size_t>(perm[c][static_cast<std::size_t>(y)])];
      for (std::size_t j = 0; j < d; ++j)
        cl.features[static_cast<std::size_t>(s) * d + j] =
            mu[j] + cohort_shift[c][j] + opt.feature_noise * noise(rng);
    }
    const double hsum = std::accumulate(cl.label_histogram.begin(), cl.label_histogram.end(), 0.0);
    for (auto& h : cl.label_histogram) h /= hsum;

    std::lognormal_distribution<double> speed(std::log(opt.compute_speed_median), opt.speed_log_sigma);
    std::lognormal_distribution<double> net(std::log(opt.network_time_median), opt.speed_log_sigma);
    cl.compute_speed = speed(rng);
    cl.network_time = net(rng);
    cl.availability = detail::availability_trace(opt, rng);
    cl.availability_period = opt.availability_period;
    pop.clients.push_back(std::move(cl));
  }
  return pop;
}

inline double pairwise_distribution_distance(const ClientProfile& a, const ClientProfile& b) {
  require(a.label_histogram.size() == b.label_histogram.size(),
          "label histograms have different class counts");
  double s = 0.0;
  for (std::size_t i = 0; i < a.label_histogram.size(); ++i) {
    const double diff = a.label_histogram[i] - b.label_histogram[i];
    s += diff * diff;
  }
  return std::sqrt(s);
}

struct HeterogeneityResult {
  double J = 0.0;
  std::vector<int> empty_cohorts;
};

/// Average intra-cohort heterogeneity: for each cohort m, the sum of squared
/// pairwise label-histogram distances over ordered member pairs divided by
/// 2|C_m|, summed over cohorts.
inline HeterogeneityResult heterogeneity_J(std::span<const ClientProfile> members,
                                           const std::unordered_map<ClientId, int>& membership, int M) {
  require(M >= 1, "M must be >= 1");
  std::vector<std::vector<const ClientProfile*>> groups(static_cast<std::size_t>(M));
  for (const auto& cl : members) {
    auto it = membership.find(cl.client_id);
    require(it != membership.end(), "client has no membership entry");
    require(it->second >= 0 && it->second < M, "membership index out of range");
    groups[static_cast<std::size_t>(it->second)].push_back(&cl);
  }
  HeterogeneityResult out;
  for (int m = 0; m < M; ++m) {
    const auto& g = groups[static_cast<std::size_t>(m)];
    if (g.empty()) {
      out.empty_cohorts.push_back(m);
      continue;
    }
    // sum_{i,j} ||x_i - x_j||^2 = 2 n sum_i ||x_i - mean||^2
    const std::size_t C = g.front()->label_histogram.size();
    std::vector<double> mean(C, 0.0);
    for (const auto* cl : g)
      for (std::size_t y = 0; y < C; ++y) mean[y] += cl->label_histogram[y] / static_cast<double>(g.size());
    double ss = 0.0;
    for (const auto* cl : g)
      for (std::size_t y = 0; y < C; ++y) {
        const double diff = cl->label_histogram[y] - mean[y];
        ss += diff * diff;
      }
    out.J += ss;
  }
  return out;
}

inline std::vector<ClientId> sample_available(const Population& pop, double sim_time) {
  require(sim_time >= 0.0, "sim_time must be >= 0");
  std::vector<ClientId> out;
  for (const auto& cl : pop.clients)
    if (cl.available_at(sim_time)) out.push_back(cl.client_id);
  return out;
}

/// CSV export: client_id, latent_cohort, num_samples, h_0..h_{C-1}
inline void write_population_csv(std::ostream& os, const Population& pop) {
  os << "client_id,latent_cohort,num_samples";
  for (int y = 0; y < pop.num_classes; ++y) os << ",h" << y;
  os << '\n';
  char buf[32];
  for (const auto& cl : pop.clients) {
    os << cl.client_id << ',' << cl.latent_cohort << ',' << cl.num_samples();
    for (double h : cl.label_histogram) {
      std::snprintf(buf, sizeof buf, "%.9g", h);
      os << ',' << buf;
    }
    os << '\n';
  }
}

}  // namespace cohortfl
