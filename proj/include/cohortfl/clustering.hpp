#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <utility>
#include <vector>

#include "cohortfl/cohort_id.hpp"
#include "cohortfl/error.hpp"
#include "cohortfl/fltrain.hpp"
#include "cohortfl/kmeans.hpp"
#include "cohortfl/metrics.hpp"
#include "cohortfl/population.hpp"

namespace cohortfl {

struct DispersionRecord {
  int round = 0;
  double overall = 0.0;
  double intra = 0.0;
  double ratio = 1.0;

  friend bool operator==(const DispersionRecord&, const DispersionRecord&) = default;
};

/// Per-cohort clustering memory: the persisted cluster label of every client
/// that has participated since clustering started, plus the centroids of the
/// current round (only meaningful within that round).
struct ClusterState {
  int K = 2;
  std::map<ClientId, int> persisted_labels;
  std::vector<Vec> round_centroids;
  bool initialized = false;
  std::vector<DispersionRecord> dispersion_history;
  std::vector<double> churn_history;  // fraction of participants whose label is new or changed

  friend bool operator==(const ClusterState&, const ClusterState&) = default;
};

struct PartitionConfig {
  double alpha = 1.0;
  int min_participants_per_cohort = 1;
  double required_reduction_exponent = 0.5;
  int clustering_start_round = 0;
  int earliest_round = 0;
  int latest_round = std::numeric_limits<int>::max();
  int max_tree_depth = 3;
  int stability_rounds = 3;
  double max_label_churn = 0.2;
  int smoothing_window = 5;
  // Observed at the root cohort: its per-round resource P0 and its first
  // overall dispersion, used in place of the unobservable gradient bound.
  double root_resource = 0.0;
  double root_dispersion = 0.0;
};

struct PartitionDecision {
  bool split = false;
  int arity = 0;
  bool in_window = false;
  bool reduction_ok = false;
  bool resource_ok = false;
  bool depth_ok = false;
  double reduction = 1.0;
  double resource_bound = 0.0;
};

namespace detail {

struct NormalizedRound {
  std::vector<ClientId> ids;
  std::vector<Vec> vecs;
};

inline NormalizedRound normalize_round(std::span<const GradientUpdate> grads) {
  std::vector<const GradientUpdate*> sorted;
  for (const auto& g : grads) sorted.push_back(&g);
  std::sort(sorted.begin(), sorted.end(), [](const auto* a, const auto* b) { return a->client_id < b->client_id; });
  NormalizedRound r;
  for (const auto* g : sorted) {
    r.ids.push_back(g->client_id);
    r.vecs.push_back(normalized(g->delta));
  }
  return r;
}

inline Vec mean_of(std::span<const Vec> vs, std::span<const std::size_t> idx) {
  Vec m(vs.front().size(), 0.0);
  for (std::size_t i : idx)
    for (std::size_t j = 0; j < m.size(); ++j) m[j] += vs[i][j];
  for (auto& v : m) v /= static_cast<double>(idx.size());
  return m;
}

}  // namespace detail

/// Full K-means over this round's normalized deltas. Defers (returns false)
/// when fewer than K clients participated.
inline bool init_prototypes(ClusterState& state, std::span<const GradientUpdate> gradients, std::uint64_t seed) {
  require(!state.initialized, "cluster state already initialized");
  require(state.K >= 2, "K must be >= 2");
  if (gradients.size() < static_cast<std::size_t>(state.K)) return false;
  const auto round = detail::normalize_round(gradients);
  auto km = kmeans(round.vecs, state.K, seed);
  for (std::size_t i = 0; i < round.ids.size(); ++i) state.persisted_labels[round.ids[i]] = km.labels[i];
  state.round_centroids = std::move(km.centroids);
  state.initialized = true;
  return true;
}

/// One online clustering step: centroids from the participants' persisted
/// groups, nearest-centroid assignment for everyone, labels written back.
inline std::map<ClientId, int> assign_round(ClusterState& state, std::span<const GradientUpdate> gradients) {
  require(state.initialized, "cluster state not initialized");
  const auto round = detail::normalize_round(gradients);
  const auto K = static_cast<std::size_t>(state.K);
  std::map<ClientId, int> out;
  if (round.ids.empty()) return out;

  std::vector<std::vector<std::size_t>> groups(K);
  for (std::size_t i = 0; i < round.ids.size(); ++i) {
    auto it = state.persisted_labels.find(round.ids[i]);
    if (it != state.persisted_labels.end()) groups[static_cast<std::size_t>(it->second)].push_back(i);
  }
  std::vector<Vec> centroids(K);
  std::vector<bool> present(K, false);
  for (std::size_t k = 0; k < K; ++k)
    if (!groups[k].empty()) {
      centroids[k] = detail::mean_of(round.vecs, groups[k]);
      present[k] = true;
    }
  const bool any = std::find(present.begin(), present.end(), true) != present.end();
  if (!any) {
    // Nobody with a label this round: keep the previous centroids.
    centroids = state.round_centroids;
    std::fill(present.begin(), present.end(), true);
  }
  // Re-seed vacated centroids at the participant farthest from its nearest
  // populated centroid.
  std::vector<bool> used(round.ids.size(), false);
  for (std::size_t k = 0; k < K; ++k) {
    if (present[k]) continue;
    std::vector<Vec> live;
    for (std::size_t q = 0; q < K; ++q)
      if (present[q]) live.push_back(centroids[q]);
    std::size_t far = 0;
    double fd = -1.0;
    for (std::size_t i = 0; i < round.ids.size(); ++i) {
      if (used[i]) continue;
      const double d = sq_dist(round.vecs[i], live[nearest(live, round.vecs[i])]);
      if (d > fd) {
        fd = d;
        far = i;
      }
    }
    used[far] = true;
    centroids[k] = round.vecs[far];
    present[k] = true;
  }

  // Churn counts first-time participants too: a label the cohort has not
  // seen before is not yet a stable one.
  std::size_t changed = 0;
  for (std::size_t i = 0; i < round.ids.size(); ++i) {
    const int label = static_cast<int>(nearest(centroids, round.vecs[i]));
    auto it = state.persisted_labels.find(round.ids[i]);
    if (it == state.persisted_labels.end() || it->second != label) ++changed;
    state.persisted_labels[round.ids[i]] = label;
    out[round.ids[i]] = label;
  }
  state.round_centroids = std::move(centroids);
  state.churn_history.push_back(static_cast<double>(changed) / static_cast<double>(round.ids.size()));
  return out;
}

/// Fit score against the cohort center estimated from known members:
/// dR_i = 1 - D_i / (avg(D) + std(D)). Negative marks an outlier.
inline std::map<ClientId, double> exploit_reward(std::span<const GradientUpdate> gradients,
                                                 const std::set<ClientId>& known_members) {
  const auto round = detail::normalize_round(gradients);
  std::map<ClientId, double> out;
  if (round.ids.empty()) return out;
  std::vector<std::size_t> known;
  for (std::size_t i = 0; i < round.ids.size(); ++i)
    if (known_members.count(round.ids[i])) known.push_back(i);
  if (known.empty()) {
    known.resize(round.ids.size());
    for (std::size_t i = 0; i < known.size(); ++i) known[i] = i;
  }
  const Vec center = detail::mean_of(round.vecs, known);
  std::vector<double> D(round.ids.size());
  double mean = 0.0;
  for (std::size_t i = 0; i < D.size(); ++i) mean += (D[i] = std::sqrt(sq_dist(round.vecs[i], center)));
  mean /= static_cast<double>(D.size());
  double var = 0.0;
  for (double d : D) var += (d - mean) * (d - mean);
  const double threshold = mean + std::sqrt(var / static_cast<double>(D.size()));
  for (std::size_t i = 0; i < D.size(); ++i) out[round.ids[i]] = threshold > 0.0 ? 1.0 - D[i] / threshold : 1.0;
  return out;
}

// --- reward bookkeeping ---------------------------------------------------

inline double decayed_reward(double r_old, double delta, double gamma) {
  return gamma * delta + (1.0 - gamma) * r_old;
}

inline double explore_increment(double delta, int distance) { return delta / (distance + 1); }

struct RewardLedger {
  std::map<std::pair<ClientId, CohortId>, double> rewards;
  double gamma = 0.2;

  double get(ClientId c, const CohortId& m) const {
    auto it = rewards.find({c, m});
    return it == rewards.end() ? 0.0 : it->second;
  }
  bool has(ClientId c, const CohortId& m) const { return rewards.count({c, m}) > 0; }
};

inline void update_reward(RewardLedger& ledger, ClientId client, const CohortId& cohort, double delta) {
  require(std::isfinite(delta), "reward delta must be finite");
  ledger.rewards[{client, cohort}] = decayed_reward(ledger.get(client, cohort), delta, ledger.gamma);
}

/// Propagates a reward observed at `explored` to every other leaf, scaled by
/// 1 / (tree distance + 1).
inline void explore_reward(std::span<const CohortId> leaves, RewardLedger& ledger, ClientId client,
                           const CohortId& explored, double delta) {
  if (delta == 0.0) return;
  for (const auto& m : leaves) {
    if (m == explored) continue;
    ledger.rewards[{client, m}] = ledger.get(client, m) + explore_increment(delta, tree_distance(explored, m));
  }
}

inline constexpr double kSpawnBonus = 0.1;

/// Seeds child-cohort rewards from the parent's: the child matching a
/// client's persisted label gets a +0.1 bonus.
inline void spawn_rewards(RewardLedger& ledger, const CohortId& parent, std::span<const CohortId> children,
                          const std::map<ClientId, int>& persisted_labels) {
  std::vector<std::pair<ClientId, double>> parents;
  for (const auto& [key, r] : ledger.rewards)
    if (key.second == parent) parents.emplace_back(key.first, r);
  for (const auto& [client, r] : parents) {
    auto it = persisted_labels.find(client);
    for (std::size_t k = 0; k < children.size(); ++k) {
      const bool match = it != persisted_labels.end() && it->second == static_cast<int>(k);
      ledger.rewards[{client, children[k]}] = r + (match ? kSpawnBonus : 0.0);
    }
  }
}

// --- partition ------------------------------------------------------------

inline double smoothed_reduction(const ClusterState& state, int window) {
  if (state.dispersion_history.empty()) return 1.0;
  const auto n = std::min<std::size_t>(state.dispersion_history.size(), static_cast<std::size_t>(std::max(1, window)));
  double s = 0.0;
  for (std::size_t i = state.dispersion_history.size() - n; i < state.dispersion_history.size(); ++i)
    s += state.dispersion_history[i].ratio;
  return s / static_cast<double>(n);
}

/// Ratio of intra-cluster to overall dispersion of this round's normalized
/// deltas (grouped by their current persisted labels). Appends the raw
/// ratio to the history and returns the trailing mean over `window` rounds.
inline double estimate_reduction(ClusterState& state, std::span<const GradientUpdate> gradients, int round,
                                 int window = 5) {
  require(state.initialized, "cluster state not initialized");
  const auto nr = detail::normalize_round(gradients);
  DispersionRecord rec;
  rec.round = round;
  if (!nr.ids.empty()) {
    std::vector<std::size_t> all(nr.ids.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const Vec gmean = detail::mean_of(nr.vecs, all);
    for (const auto& v : nr.vecs) rec.overall += std::sqrt(sq_dist(v, gmean));
    rec.overall /= static_cast<double>(nr.vecs.size());

    std::vector<std::vector<std::size_t>> groups(static_cast<std::size_t>(state.K));
    for (std::size_t i = 0; i < nr.ids.size(); ++i) {
      auto it = state.persisted_labels.find(nr.ids[i]);
      if (it != state.persisted_labels.end()) groups[static_cast<std::size_t>(it->second)].push_back(i);
    }
    int occupied = 0;
    for (const auto& g : groups) {
      if (g.empty()) continue;
      ++occupied;
      const Vec c = detail::mean_of(nr.vecs, g);
      double m = 0.0;
      for (std::size_t i : g) m += std::sqrt(sq_dist(nr.vecs[i], c));
      rec.intra += m / static_cast<double>(g.size());
    }
    if (occupied > 0) rec.intra /= occupied;
    rec.ratio = (occupied < 2 || rec.overall <= 0.0) ? 1.0 : rec.intra / rec.overall;
  }
  state.dispersion_history.push_back(rec);
  return smoothed_reduction(state, window);
}

inline bool labels_stable(const ClusterState& state, int rounds, double max_churn) {
  if (static_cast<int>(state.churn_history.size()) < rounds || rounds <= 0) return false;
  double s = 0.0;
  for (auto it = state.churn_history.end() - rounds; it != state.churn_history.end(); ++it) s += *it;
  return s / rounds < max_churn;
}

inline double resource_bound(const PartitionConfig& cfg) {
  const double g0 = cfg.root_dispersion;
  const double alpha_term = g0 > 0.0 ? cfg.alpha * std::sqrt(cfg.root_resource / (g0 * g0))
                                     : std::numeric_limits<double>::infinity();
  return std::max(static_cast<double>(cfg.min_participants_per_cohort), alpha_term);
}

/// Split only when every clause holds: inside the partition window with
/// stable labels, the smoothed reduction ratio at most K^-exponent, enough
/// per-child resource, and room in the tree.
inline PartitionDecision partition_criteria(const ClusterState& state, const PartitionConfig& cfg,
                                            double per_round_resource, int current_round, int tree_depth) {
  PartitionDecision d;
  d.arity = state.K;
  d.in_window = state.initialized && current_round >= cfg.earliest_round && current_round <= cfg.latest_round &&
                current_round >= cfg.clustering_start_round + cfg.stability_rounds &&
                labels_stable(state, cfg.stability_rounds, cfg.max_label_churn);
  d.reduction = smoothed_reduction(state, cfg.smoothing_window);
  d.reduction_ok = !state.dispersion_history.empty() &&
                   d.reduction <= std::pow(static_cast<double>(state.K), -cfg.required_reduction_exponent);
  d.resource_bound = resource_bound(cfg);
  d.resource_ok = per_round_resource / state.K >= d.resource_bound;
  d.depth_ok = tree_depth < cfg.max_tree_depth;
  d.split = d.in_window && d.reduction_ok && d.resource_ok && d.depth_ok;
  return d;
}

/// Pearson r between pairwise cosine similarity of the participants'
/// deltas and pairwise negative L2 distance of their label histograms.
inline double similarity_correlation(std::span<const GradientUpdate> gradients, const Population& population) {
  require(gradients.size() >= 3, "similarity_correlation needs >= 3 participants");
  const auto nr = detail::normalize_round(gradients);
  std::vector<double> G, D;
  for (std::size_t i = 0; i < nr.ids.size(); ++i)
    for (std::size_t j = i + 1; j < nr.ids.size(); ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < nr.vecs[i].size(); ++k) dot += nr.vecs[i][k] * nr.vecs[j][k];
      G.push_back(dot);
      D.push_back(-pairwise_distribution_distance(client_of(population, nr.ids[i]), client_of(population, nr.ids[j])));
    }
  return pearson(G, D);
}

}  // namespace cohortfl
