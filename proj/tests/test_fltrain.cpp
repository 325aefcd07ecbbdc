#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cohortfl/fltrain.hpp"

using namespace cohortfl;

namespace {

const ModelSpec kLogit{ModelKind::logistic, 8, 4, 16};

Population sample_population(int n, std::uint64_t seed, int C = 4, int d = 8) {
  LatentCohortSpec s{1, 0.5, 0.0, {1.0}, false};
  return generate_population(s, n, C, d, seed);
}

GradientUpdate update(ClientId id, std::vector<double> delta, int n = 10) {
  GradientUpdate u;
  u.client_id = id;
  u.delta = std::move(delta);
  u.num_samples = n;
  return u;
}

double norm(const std::vector<double>& v) { return std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0)); }

}  // namespace

TEST(LocalTrain, ZeroLearningRate) {
  auto pop = sample_population(1, 1);
  const auto& c = pop.clients[0];
  auto w = init_weights(kLogit, 3);
  std::vector<std::size_t> all(train_size(c));
  std::iota(all.begin(), all.end(), 0);
  // Exactly one epoch of minibatches averages to the full-data loss.
  const int one_epoch = static_cast<int>((all.size() + 5) / 6);
  auto up = local_train(kLogit, w, c, one_epoch, 6, 0.0, 9);
  ASSERT_TRUE(up);
  for (double v : up->delta) EXPECT_EQ(v, 0.0);
  EXPECT_NEAR(up->loss, loss_and_gradient(kLogit, w.values, c, all, {}), 1e-12);
  EXPECT_EQ(up->num_samples, static_cast<int>(train_size(c)));
}

TEST(LocalTrain, LossDecreasesOnSeparableData) {
  ModelSpec s{ModelKind::logistic, 2, 2, 0};
  ClientProfile c;
  c.client_id = 0;
  c.feature_dim = 2;
  for (int i = 0; i < 40; ++i) {
    const int y = i % 2;
    c.labels.push_back(y);
    c.features.push_back(y ? 2.0 + 0.01 * i : -2.0 - 0.01 * i);
    c.features.push_back(0.5);
  }
  ModelWeights w{std::vector<double>(s.parameter_count(), 0.0)};
  std::vector<std::size_t> all(train_size(c));
  std::iota(all.begin(), all.end(), 0);
  double prev = loss_and_gradient(s, w.values, c, all, {});
  for (int step = 0; step < 20; ++step) {
    auto up = local_train(s, w, c, 1, static_cast<int>(all.size()), 0.1, 1);
    ASSERT_TRUE(up);
    for (std::size_t i = 0; i < w.values.size(); ++i) w.values[i] -= up->delta[i];
    const double now = loss_and_gradient(s, w.values, c, all, {});
    EXPECT_LT(now, prev);
    prev = now;
  }
}

TEST(LocalTrain, IdenticalInputsIdenticalDeltas) {
  auto pop = sample_population(2, 4);
  ClientProfile a = pop.clients[0];
  ClientProfile b = a;
  b.client_id = 77;
  auto w = init_weights(kLogit, 1);
  auto ua = local_train(kLogit, w, a, 7, 6, 0.05, 123);
  auto ub = local_train(kLogit, w, b, 7, 6, 0.05, 123);
  ASSERT_TRUE(ua && ub);
  EXPECT_EQ(ua->delta, ub->delta);
  EXPECT_EQ(ua->loss, ub->loss);
}

TEST(LocalTrain, DivergenceReportsFailure) {
  auto pop = sample_population(1, 5);
  ClientProfile c = pop.clients[0];
  for (auto& x : c.features) x *= 1e300;
  auto w = init_weights(kLogit, 1);
  EXPECT_FALSE(local_train(kLogit, w, c, 50, 6, 1.0, 1));
}

TEST(LocalTrain, SingleStepMatchesFiniteDifference) {
  for (ModelKind kind : {ModelKind::logistic, ModelKind::mlp}) {
    ModelSpec s{kind, 8, 4, 8};
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      auto pop = sample_population(1, seed);
      const auto& c = pop.clients[0];
      auto w = init_weights(s, seed);
      const double lr = 0.01;
      const int full = static_cast<int>(train_size(c));
      auto up = local_train(s, w, c, 1, full, lr, seed);
      ASSERT_TRUE(up);
      std::vector<std::size_t> all(train_size(c));
      std::iota(all.begin(), all.end(), 0);
      std::vector<double> fd(w.dim());
      const double h = 1e-6;
      for (std::size_t i = 0; i < w.dim(); ++i) {
        auto wp = w.values, wm = w.values;
        wp[i] += h;
        wm[i] -= h;
        fd[i] = (loss_and_gradient(s, wp, c, all, {}) - loss_and_gradient(s, wm, c, all, {})) / (2 * h);
      }
      std::vector<double> diff(w.dim());
      for (std::size_t i = 0; i < w.dim(); ++i) diff[i] = up->delta[i] / lr - fd[i];
      EXPECT_LT(norm(diff) / norm(fd), 1e-4);
    }
  }
}

TEST(FedAvg, SingleUpdate) {
  ModelWeights w{{1.0, 2.0, 3.0}};
  std::vector<GradientUpdate> ups{update(0, {0.5, -1.0, 0.25})};
  EXPECT_EQ(fedavg_aggregate(w, ups).values, (std::vector<double>{0.5, 3.0, 2.75}));
}

TEST(FedAvg, OppositeDeltasCancel) {
  ModelWeights w{{1.0, -2.0}};
  std::vector<GradientUpdate> ups{update(0, {0.3, 0.7}), update(1, {-0.3, -0.7})};
  EXPECT_EQ(fedavg_aggregate(w, ups).values, w.values);
}

TEST(FedAvg, SampleWeightedMean) {
  ModelWeights w{{0.0, 0.0}};
  const std::vector<double> a{4.0, -8.0}, b{1.0, 2.0};
  std::vector<GradientUpdate> ups{update(0, a, 1), update(1, b, 3)};
  auto out = fedavg_aggregate(w, ups);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(out.values[i], -(a[i] + 3 * b[i]) / 4, 1e-15);
  auto unweighted = fedavg_aggregate(w, ups, false);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(unweighted.values[i], -(a[i] + b[i]) / 2, 1e-15);
}

TEST(FedAvg, UniformCountsEqualPlainMean) {
  Rng rng = make_rng(8);
  std::normal_distribution<double> g;
  std::vector<GradientUpdate> ups;
  for (int i = 0; i < 9; ++i) {
    std::vector<double> d(5);
    for (auto& v : d) v = g(rng);
    ups.push_back(update(i, d, 17));
  }
  ModelWeights w{std::vector<double>(5, 0.0)};
  auto out = fedavg_aggregate(w, ups);
  for (std::size_t j = 0; j < 5; ++j) {
    double m = 0.0;
    for (const auto& u : ups) m += u.delta[j];
    EXPECT_NEAR(out.values[j], -m / 9, 1e-12);
  }
}

TEST(FedAvg, PermutationInvariantBitwise) {
  Rng rng = make_rng(2);
  std::normal_distribution<double> g;
  std::vector<GradientUpdate> ups;
  for (int i = 0; i < 12; ++i) {
    std::vector<double> d(6);
    for (auto& v : d) v = g(rng) * 1e3;
    ups.push_back(update(i, d, 5 + i));
  }
  ModelWeights w{std::vector<double>(6, 0.1)};
  const auto ref = fedavg_aggregate(w, ups);
  for (int t = 0; t < 5; ++t) {
    std::shuffle(ups.begin(), ups.end(), rng);
    EXPECT_EQ(fedavg_aggregate(w, ups), ref);
  }
}

TEST(FedAvg, EmptyRoundIsAborted) {
  ModelWeights w{{1.0}};
  EXPECT_THROW(fedavg_aggregate(w, std::vector<GradientUpdate>{}), ContractViolation);
  std::vector<GradientUpdate> bad{update(0, {1.0, 2.0})};
  EXPECT_THROW(fedavg_aggregate(w, bad), ContractViolation);
}

TEST(Yogi, ZeroPseudoGradient) {
  YogiState s = make_yogi_state(3);
  s.first_moment = {0.5, -0.2, 0.0};
  s.second_moment = {0.4, 0.1, 0.0};
  ModelWeights w{{1.0, 2.0, 3.0}};
  std::vector<GradientUpdate> ups{update(0, {0.0, 0.0, 0.0})};
  auto [out, st] = yogi_aggregate(s, w, ups);
  // Moments decay; the weights move only by the decayed momentum.
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ(st.first_moment[i], 0.9 * s.first_moment[i]);
    EXPECT_DOUBLE_EQ(st.second_moment[i], s.second_moment[i]);
  }
  YogiState fresh = make_yogi_state(3);
  auto [out2, st2] = yogi_aggregate(fresh, w, ups);
  EXPECT_EQ(out2, w);
  EXPECT_EQ(st2, fresh);
}

TEST(Yogi, LargeTauApproachesScaledFedAvg) {
  // With tau dominating sqrt(v), the first step is w - lr (1-b1) g / tau,
  // which is FedAvg with its delta scaled by lr (1-b1) / tau.
  const double tau = 1e6, lr = 1e6, b1 = 0.9;
  YogiState s = make_yogi_state(4, lr, b1, 0.999999, tau);
  ModelWeights w{{0.3, -0.1, 0.2, 0.0}};
  std::vector<GradientUpdate> ups{update(0, {0.01, -0.02, 0.03, 0.005}, 2), update(1, {0.02, 0.0, -0.01, 0.0}, 3)};
  auto [out, st] = yogi_aggregate(s, w, ups);
  auto ref = fedavg_aggregate(w, ups);
  const double scale = lr * (1.0 - b1) / tau;
  for (std::size_t i = 0; i < 4; ++i)
    EXPECT_NEAR(out.values[i] - w.values[i], scale * (ref.values[i] - w.values[i]), 1e-6);
}

TEST(Yogi, SecondMomentNondecreasingUnderRepeatedGradient) {
  YogiState s = make_yogi_state(3);
  ModelWeights w{{0.0, 0.0, 0.0}};
  std::vector<GradientUpdate> ups{update(0, {0.5, -0.3, 1e-3})};
  for (int it = 0; it < 10; ++it) {
    auto [out, st] = yogi_aggregate(s, w, ups);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_GE(st.second_moment[i], s.second_moment[i]);
    s = st;
    w = out;
  }
}

TEST(Evaluate, RandomModelNearChance) {
  LatentCohortSpec spec{1, 1.0, 0.0, {1.0}, false};
  PopulationOptions o;
  o.min_samples = 200;
  o.max_samples = 200;
  auto pop = generate_population(spec, 20, 10, 8, 3, o);
  ModelSpec s{ModelKind::logistic, 8, 10, 0};
  std::vector<const ClientProfile*> cl;
  for (const auto& c : pop.clients) cl.push_back(&c);
  double acc = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    ModelWeights w = init_weights(s, seed);
    for (auto& v : w.values) v *= 100.0;
    acc += evaluate(s, w, cl).mean_accuracy / 10;
  }
  EXPECT_NEAR(acc, 0.1, 0.05);
}

TEST(Evaluate, PerfectModelAndMapSize) {
  // Labels are a linear function of the features the model can represent.
  ModelSpec s{ModelKind::logistic, 2, 2, 0};
  ClientProfile c;
  c.client_id = 4;
  c.feature_dim = 2;
  for (int i = 0; i < 10; ++i) {
    c.labels.push_back(i % 2);
    c.features.push_back(i % 2 ? 1.0 : -1.0);
    c.features.push_back(0.0);
  }
  ClientProfile d = c;
  d.client_id = 9;
  ModelWeights w{{-1.0, 0.0, 1.0, 0.0, 0.0, 0.0}};
  std::vector<const ClientProfile*> cl{&c, &d};
  auto r = evaluate(s, w, cl);
  EXPECT_DOUBLE_EQ(r.mean_accuracy, 1.0);
  EXPECT_EQ(r.per_client.size(), 2u);
  EXPECT_TRUE(r.per_client.count(4) && r.per_client.count(9));
}

TEST(Ldp, DisabledOrSmallIsIdentity) {
  auto u = update(3, {0.1, -0.2, 0.3});
  EXPECT_EQ(apply_ldp(u, LdpConfig{false, 1.0, 1.0}, 1).delta, u.delta);
  EXPECT_EQ(apply_ldp(u, LdpConfig{true, 0.0, 1.0}, 1).delta, u.delta);
}

TEST(Ldp, ClipsToNorm) {
  auto u = update(0, {1.2, -1.6});  // norm 2
  auto out = apply_ldp(u, LdpConfig{true, 0.0, 1.0}, 1);
  EXPECT_NEAR(norm(out.delta), 1.0, 1e-15);
  EXPECT_NEAR(out.delta[0], 0.6, 1e-15);
}

TEST(Ldp, NoiseStddevMatchesSigmaTimesClip) {
  const double clip = 0.5;
  std::vector<double> d(10000, 0.0);
  auto u = update(0, d);
  auto out = apply_ldp(u, LdpConfig{true, 1.0, clip}, 42);
  double m = 0.0, v = 0.0;
  for (double x : out.delta) m += x / 10000;
  for (double x : out.delta) v += (x - m) * (x - m) / 10000;
  EXPECT_NEAR(std::sqrt(v), 1.0 * clip, 0.05 * clip);
}

TEST(Ldp, PreNoiseNormNeverExceedsClip) {
  Rng rng = make_rng(6);
  std::normal_distribution<double> g(0.0, 3.0);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> d(7);
    for (auto& v : d) v = g(rng);
    auto out = apply_ldp(update(0, d), LdpConfig{true, 0.0, 1.5}, 1);
    EXPECT_LE(norm(out.delta), 1.5 + 1e-12);
  }
}
