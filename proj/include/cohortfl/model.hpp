#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "cohortfl/error.hpp"
#include "cohortfl/population.hpp"
#include "cohortfl/random.hpp"

namespace cohortfl {

enum class ModelKind { logistic, mlp };

struct ModelSpec {
  ModelKind kind = ModelKind::logistic;
  int feature_dim = 0;
  int num_classes = 0;
  int hidden_units = 16;  // mlp only

  std::size_t parameter_count() const {
    const auto d = static_cast<std::size_t>(feature_dim);
    const auto C = static_cast<std::size_t>(num_classes);
    const auto h = static_cast<std::size_t>(hidden_units);
    return kind == ModelKind::logistic ? C * d + C : h * d + h + C * h + C;
  }
};

struct ModelWeights {
  std::vector<double> values;

  std::size_t dim() const { return values.size(); }
  bool finite() const {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
  }
  friend bool operator==(const ModelWeights&, const ModelWeights&) = default;
};

inline ModelWeights init_weights(const ModelSpec& spec, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  ModelWeights w;
  w.values.assign(spec.parameter_count(), 0.0);
  if (spec.kind == ModelKind::logistic) {
    std::normal_distribution<double> n(0.0, 0.01);
    for (auto& v : w.values) v = n(rng);
  } else {
    const auto d = static_cast<std::size_t>(spec.feature_dim);
    const auto h = static_cast<std::size_t>(spec.hidden_units);
    const auto C = static_cast<std::size_t>(spec.num_classes);
    std::normal_distribution<double> l1(0.0, std::sqrt(2.0 / static_cast<double>(d)));
    std::normal_distribution<double> l2(0.0, std::sqrt(1.0 / static_cast<double>(h)));
    std::size_t o = 0;
    for (std::size_t i = 0; i < h * d; ++i) w.values[o++] = l1(rng);
    o += h;
    for (std::size_t i = 0; i < C * h; ++i) w.values[o++] = l2(rng);
  }
  return w;
}

namespace detail {

inline double softmax_xent(std::span<double> logits, int label, std::span<double> dlogits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  for (std::size_t k = 0; k < logits.size(); ++k) dlogits[k] = std::exp(logits[k] - lse);
  dlogits[static_cast<std::size_t>(label)] -= 1.0;
  return lse - logits[static_cast<std::size_t>(label)];
}

// Forward pass; fills logits and (for the mlp) hidden activations.
inline void forward(const ModelSpec& spec, std::span<const double> w, std::span<const double> x,
                    std::span<double> hidden, std::span<double> logits) {
  const auto d = static_cast<std::size_t>(spec.feature_dim);
  const auto C = static_cast<std::size_t>(spec.num_classes);
  if (spec.kind == ModelKind::logistic) {
    const double* W = w.data();
    const double* b = w.data() + C * d;
    for (std::size_t k = 0; k < C; ++k) {
      double s = b[k];
      for (std::size_t j = 0; j < d; ++j) s += W[k * d + j] * x[j];
      logits[k] = s;
    }
    return;
  }
  const auto h = static_cast<std::size_t>(spec.hidden_units);
  const double* W1 = w.data();
  const double* b1 = W1 + h * d;
  const double* W2 = b1 + h;
  const double* b2 = W2 + C * h;
  for (std::size_t u = 0; u < h; ++u) {
    double s = b1[u];
    for (std::size_t j = 0; j < d; ++j) s += W1[u * d + j] * x[j];
    hidden[u] = std::tanh(s);
  }
  for (std::size_t k = 0; k < C; ++k) {
    double s = b2[k];
    for (std::size_t u = 0; u < h; ++u) s += W2[k * h + u] * hidden[u];
    logits[k] = s;
  }
}

}  // namespace detail

/// Mean softmax cross-entropy over `batch` (indices into the client's
/// dataset). Writes the mean gradient into `grad` when it is non-empty.
inline double loss_and_gradient(const ModelSpec& spec, std::span<const double> w, const ClientProfile& client,
                                std::span<const std::size_t> batch, std::span<double> grad) {
  require(w.size() == spec.parameter_count(), "weight dimension does not match model");
  require(!batch.empty(), "empty batch");
  const auto d = static_cast<std::size_t>(spec.feature_dim);
  const auto C = static_cast<std::size_t>(spec.num_classes);
  const auto h = static_cast<std::size_t>(spec.kind == ModelKind::mlp ? spec.hidden_units : 0);
  const bool want_grad = !grad.empty();
  if (want_grad) std::fill(grad.begin(), grad.end(), 0.0);

  std::vector<double> logits(C), dlogits(C), hidden(h), dhidden(h);
  const double inv = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  for (std::size_t idx : batch) {
    const auto x = client.sample(idx);
    const int y = client.labels[idx];
    detail::forward(spec, w, x, hidden, logits);
    loss += detail::softmax_xent(logits, y, dlogits);
    if (!want_grad) continue;
    if (spec.kind == ModelKind::logistic) {
      for (std::size_t k = 0; k < C; ++k) {
        const double g = dlogits[k] * inv;
        for (std::size_t j = 0; j < d; ++j) grad[k * d + j] += g * x[j];
        grad[C * d + k] += g;
      }
    } else {
      const double* W2 = w.data() + h * d + h;
      double* gW1 = grad.data();
      double* gb1 = gW1 + h * d;
      double* gW2 = gb1 + h;
      double* gb2 = gW2 + C * h;
      std::fill(dhidden.begin(), dhidden.end(), 0.0);
      for (std::size_t k = 0; k < C; ++k) {
        const double g = dlogits[k] * inv;
        for (std::size_t u = 0; u < h; ++u) {
          gW2[k * h + u] += g * hidden[u];
          dhidden[u] += g * W2[k * h + u];
        }
        gb2[k] += g;
      }
      for (std::size_t u = 0; u < h; ++u) {
        const double g = dhidden[u] * (1.0 - hidden[u] * hidden[u]);
        for (std::size_t j = 0; j < d; ++j) gW1[u * d + j] += g * x[j];
        gb1[u] += g;
      }
    }
  }
  return loss * inv;
}

inline int predict(const ModelSpec& spec, std::span<const double> w, std::span<const double> x) {
  std::vector<double> logits(static_cast<std::size_t>(spec.num_classes));
  std::vector<double> hidden(static_cast<std::size_t>(spec.kind == ModelKind::mlp ? spec.hidden_units : 0));
  detail::forward(spec, w, x, hidden, logits);
  return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

// Held-out split: the last 20% of a client's samples (at least one sample
// stays on each side).
inline std::size_t train_size(const ClientProfile& c) {
  const std::size_t n = c.num_samples();
  if (n < 2) return n;
  return n - std::max<std::size_t>(1, n / 5);
}

}  // namespace cohortfl
