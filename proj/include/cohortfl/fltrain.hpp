#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "cohortfl/error.hpp"
#include "cohortfl/model.hpp"
#include "cohortfl/population.hpp"
#include "cohortfl/random.hpp"

namespace cohortfl {

struct GradientUpdate {
  ClientId client_id = 0;
  std::vector<double> delta;  // w_before - w_after
  double loss = 0.0;
  int num_samples = 1;
};

struct YogiState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  double server_lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double tau = 1e-3;

  friend bool operator==(const YogiState&, const YogiState&) = default;
};

inline YogiState make_yogi_state(std::size_t dim, double server_lr = 0.01, double beta1 = 0.9,
                                 double beta2 = 0.99, double tau = 1e-3) {
  YogiState s;
  s.first_moment.assign(dim, 0.0);
  s.second_moment.assign(dim, 0.0);
  s.server_lr = server_lr;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.tau = tau;
  return s;
}

struct LdpConfig {
  bool enabled = false;
  double noise_scale = 0.0;  // sigma
  double clip_norm = 1.0;
};

/// Runs `k_steps` of minibatch SGD over the client's training split.
/// Batches walk a per-epoch shuffle; the reported loss is the
/// sample-weighted mean minibatch loss over the last (possibly partial)
/// epoch. Returns nullopt if the loss or weights become non-finite.
inline std::optional<GradientUpdate> local_train(const ModelSpec& spec, const ModelWeights& w,
                                                 const ClientProfile& client, int k_steps, int batch_size,
                                                 double lr, std::uint64_t seed) {
  require(k_steps >= 1, "k_steps must be >= 1");
  require(batch_size >= 1, "batch_size must be >= 1");
  const std::size_t n_train = train_size(client);
  require(n_train >= 1, "client dataset is empty");

  Rng rng = make_rng(seed);
  std::vector<double> cur = w.values;
  std::vector<double> grad(cur.size());
  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bs = std::min<std::size_t>(static_cast<std::size_t>(batch_size), n_train);
  const std::size_t steps_per_epoch = (n_train + bs - 1) / bs;
  const std::size_t total = static_cast<std::size_t>(k_steps);
  const std::size_t last_epoch_start = ((total - 1) / steps_per_epoch) * steps_per_epoch;

  double epoch_loss = 0.0;
  std::size_t epoch_count = 0;
  for (std::size_t step = 0; step < total; ++step) {
    const std::size_t pos = step % steps_per_epoch;
    if (pos == 0) std::shuffle(order.begin(), order.end(), rng);
    const std::size_t begin = pos * bs;
    const std::size_t end = std::min(begin + bs, n_train);
    std::span<const std::size_t> batch(order.data() + begin, end - begin);
    const double loss = loss_and_gradient(spec, cur, client, batch, grad);
    if (!std::isfinite(loss)) return std::nullopt;
    if (step >= last_epoch_start) {
      epoch_loss += loss * static_cast<double>(batch.size());
      epoch_count += batch.size();
    }
    for (std::size_t i = 0; i < cur.size(); ++i) cur[i] -= lr * grad[i];
  }

  GradientUpdate up;
  up.client_id = client.client_id;
  up.delta.resize(cur.size());
  for (std::size_t i = 0; i < cur.size(); ++i) {
    up.delta[i] = w.values[i] - cur[i];
    if (!std::isfinite(up.delta[i])) return std::nullopt;
  }
  up.loss = epoch_loss / static_cast<double>(epoch_count);
  up.num_samples = static_cast<int>(n_train);
  return up;
}

/// Weighted mean of the update deltas, reduced in client-id order so the
/// result does not depend on the order of `updates`.
inline std::vector<double> mean_delta(std::span<const GradientUpdate> updates, bool sample_weighted = true) {
  require(!updates.empty(), "round aborted: no updates to aggregate");
  std::vector<const GradientUpdate*> sorted;
  sorted.reserve(updates.size());
  for (const auto& u : updates) sorted.push_back(&u);
  std::sort(sorted.begin(), sorted.end(),
            [](const auto* a, const auto* b) { return a->client_id < b->client_id; });
  const std::size_t dim = sorted.front()->delta.size();
  std::vector<double> acc(dim, 0.0);
  double total = 0.0;
  for (const auto* u : sorted) {
    require(u->delta.size() == dim, "update dimension mismatch");
    const double wgt = sample_weighted ? static_cast<double>(u->num_samples) : 1.0;
    total += wgt;
    for (std::size_t i = 0; i < dim; ++i) acc[i] += wgt * u->delta[i];
  }
  for (auto& v : acc) v /= total;
  return acc;
}

inline ModelWeights fedavg_aggregate(const ModelWeights& w, std::span<const GradientUpdate> updates,
                                     bool sample_weighted = true) {
  const auto mean = mean_delta(updates, sample_weighted);
  require(mean.size() == w.dim(), "update dimension does not match model");
  ModelWeights out = w;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] -= mean[i];
  return out;
}

// Yogi server optimizer with the mean delta as pseudo-gradient:
//   m <- b1 m + (1-b1) g
//   v <- v - (1-b2) g^2 sign(v - g^2)
//   w <- w - lr m / (sqrt(v) + tau)
inline std::pair<ModelWeights, YogiState> yogi_aggregate(const YogiState& state, const ModelWeights& w,
                                                         std::span<const GradientUpdate> updates,
                                                         bool sample_weighted = true) {
  const auto g = mean_delta(updates, sample_weighted);
  require(g.size() == w.dim() && state.first_moment.size() == w.dim() &&
              state.second_moment.size() == w.dim(),
          "optimizer state dimension does not match model");
  YogiState s = state;
  ModelWeights out = w;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double g2 = g[i] * g[i];
    s.first_moment[i] = s.beta1 * s.first_moment[i] + (1.0 - s.beta1) * g[i];
    const double diff = s.second_moment[i] - g2;
    const double sign = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
    s.second_moment[i] = std::max(0.0, s.second_moment[i] - (1.0 - s.beta2) * g2 * sign);
    out.values[i] -= s.server_lr * s.first_moment[i] / (std::sqrt(s.second_moment[i]) + s.tau);
  }
  return {std::move(out), std::move(s)};
}

struct EvalResult {
  double mean_accuracy = 0.0;
  std::map<ClientId, double> per_client;
};

inline double client_accuracy(const ModelSpec& spec, const ModelWeights& w, const ClientProfile& c) {
  const std::size_t start = train_size(c);
  const std::size_t n = c.num_samples();
  if (start >= n) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = start; i < n; ++i)
    if (predict(spec, w.values, c.sample(i)) == c.labels[i]) ++hit;
  return static_cast<double>(hit) / static_cast<double>(n - start);
}

/// Top-1 accuracy on each client's held-out split; the mean is uniform over
/// clients.
inline EvalResult evaluate(const ModelSpec& spec, const ModelWeights& w,
                           std::span<const ClientProfile* const> clients) {
  require(!clients.empty(), "evaluate needs at least one client");
  EvalResult r;
  for (const auto* c : clients) {
    const double acc = client_accuracy(spec, w, *c);
    r.per_client[c->client_id] = acc;
    r.mean_accuracy += acc;
  }
  r.mean_accuracy /= static_cast<double>(clients.size());
  return r;
}

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

/// Clip the delta to `clip_norm` in L2, then add N(0, (sigma*clip_norm)^2)
/// noise to every coordinate.
inline GradientUpdate apply_ldp(const GradientUpdate& update, const LdpConfig& cfg, std::uint64_t seed) {
  require(cfg.clip_norm > 0.0, "clip_norm must be > 0");
  GradientUpdate out = update;
  if (!cfg.enabled) return out;
  const double norm = l2_norm(out.delta);
  if (norm > cfg.clip_norm) {
    const double scale = cfg.clip_norm / norm;
    for (auto& v : out.delta) v *= scale;
  }
  if (cfg.noise_scale > 0.0) {
    Rng rng = make_rng(seed);
    std::normal_distribution<double> noise(0.0, cfg.noise_scale * cfg.clip_norm);
    for (auto& v : out.delta) v += noise(rng);
  }
  return out;
}

}  // namespace cohortfl
