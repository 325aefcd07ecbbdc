#include <gtest/gtest.h>

#include <algorithm>
#include <map>

#include "cohortfl/engine.hpp"

using namespace cohortfl;

namespace {

ExperimentSpec small_spec(int clients, int latent, int rounds, int target, std::uint64_t seed) {
  LatentCohortSpec ls{latent, 0.8, 0.0, std::vector<double>(static_cast<std::size_t>(latent), 1.0 / latent), latent > 1};
  PopulationOptions po;
  po.availability_duty = 0.3;
  po.availability_mean_on = 30.0;
  ExperimentSpec s;
  s.population = generate_population(ls, clients, 4, 8, derive_seed(seed, "population"), po);
  s.model = ModelSpec{ModelKind::logistic, 8, 4, 0};
  s.engine.max_rounds = rounds;
  s.engine.target_participants = target;
  s.engine.k_steps = 5;
  s.clustering.partition.clustering_start_round = 3;
  s.clustering.partition.min_participants_per_cohort = 5;
  s.seed = seed;
  return s;
}

Population uniform_pop(int n, double speed) {
  Population p;
  p.num_classes = 2;
  p.feature_dim = 1;
  for (int i = 0; i < n; ++i) {
    ClientProfile c;
    c.client_id = i;
    c.feature_dim = 1;
    c.compute_speed = speed;
    c.network_time = 1.0;
    p.clients.push_back(c);
  }
  return p;
}

std::vector<ClientId> ids(int n) {
  std::vector<ClientId> v(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = i;
  return v;
}

}  // namespace

// --- participant selection ---------------------------------------------------

TEST(SelectParticipants, OvercommitInvitesAndKeepsFastest) {
  Population p = uniform_pop(300, 1.0);
  Rng rng = make_rng(4);
  for (auto& c : p.clients) c.compute_speed = 1.0 + 10.0 * uniform01(rng);
  EngineParams ep;
  RoundPlan plan{CohortId::root(), 200, 0.25};
  auto [kept, rest] = select_participants(p, ids(300), plan, ep, 11);
  EXPECT_EQ(kept.size() + rest.size(), 250u);
  ASSERT_EQ(kept.size(), 200u);
  double slowest_kept = 0.0;
  for (const auto& k : kept) slowest_kept = std::max(slowest_kept, k.duration);
  for (const auto& s : rest) EXPECT_GE(s.duration, slowest_kept);
  for (const auto& k : kept)
    EXPECT_DOUBLE_EQ(k.duration, participant_duration(client_of(p, k.client), ep.batch_size, ep.k_steps));
}

TEST(SelectParticipants, IdenticalSpeedsKeepLowestIds) {
  Population p = uniform_pop(100, 2.0);
  EngineParams ep;
  RoundPlan plan{CohortId::root(), 40, 0.25};
  auto [kept, rest] = select_participants(p, ids(100), plan, ep, 3);
  ASSERT_EQ(kept.size(), 40u);
  ASSERT_EQ(rest.size(), 10u);
  ClientId max_kept = 0;
  for (const auto& k : kept) max_kept = std::max(max_kept, k.client);
  for (const auto& s : rest) EXPECT_GT(s.client, max_kept);
}

TEST(SelectParticipants, FewCandidatesAndDeterminism) {
  Population p = uniform_pop(10, 1.0);
  EngineParams ep;
  RoundPlan plan{CohortId::root(), 50, 0.25};
  auto [kept, rest] = select_participants(p, ids(10), plan, ep, 1);
  EXPECT_EQ(kept.size(), 10u);
  EXPECT_TRUE(rest.empty());
  RoundPlan small{CohortId::root(), 4, 0.25};
  auto a = select_participants(p, ids(10), small, ep, 8);
  auto shuffled = ids(10);
  std::reverse(shuffled.begin(), shuffled.end());
  auto b = select_participants(p, shuffled, small, ep, 8);
  ASSERT_EQ(a.first.size(), b.first.size());
  for (std::size_t i = 0; i < a.first.size(); ++i) EXPECT_EQ(a.first[i].client, b.first[i].client);
}

TEST(ParticipantDuration, Formula) {
  ClientProfile c;
  c.compute_speed = 4.0;
  c.network_time = 1.5;
  EXPECT_DOUBLE_EQ(participant_duration(c, 6, 10), 16.5);
}

TEST(TimeToAccuracy, FirstCrossing) {
  std::vector<std::pair<double, double>> curve{{10, 0.2}, {20, 0.6}, {30, 0.5}, {40, 0.7}};
  EXPECT_EQ(time_to_accuracy(curve, 0.55), 20.0);
  EXPECT_EQ(time_to_accuracy(curve, 0.7), 40.0);
  EXPECT_FALSE(time_to_accuracy(curve, 0.71));
}

// --- whole runs ----------------------------------------------------------------

TEST(Experiment, RejectsBadParameters) {
  auto s = small_spec(40, 2, 5, 10, 1);
  s.clustering.K = 1;
  EXPECT_THROW(Experiment{s}, ConfigError);
  s = small_spec(40, 2, 0, 10, 1);
  EXPECT_THROW(Experiment{s}, ConfigError);
}

TEST(Experiment, Deterministic) {
  auto s = small_spec(200, 2, 30, 20, 5);
  auto a = run_experiment(s);
  auto b = run_experiment(s);
  ASSERT_EQ(a.rounds.size(), b.rounds.size());
  for (std::size_t i = 0; i < a.rounds.size(); ++i) {
    EXPECT_EQ(a.rounds[i].cohort_id, b.rounds[i].cohort_id);
    EXPECT_EQ(a.rounds[i].participants, b.rounds[i].participants);
    EXPECT_EQ(a.rounds[i].sim_end, b.rounds[i].sim_end);
    EXPECT_EQ(a.rounds[i].mean_loss, b.rounds[i].mean_loss);
  }
  EXPECT_EQ(a.final_models, b.final_models);
  EXPECT_EQ(a.final_accuracy, b.final_accuracy);
  ASSERT_EQ(a.events.size(), b.events.size());
  for (std::size_t i = 0; i < a.events.size(); ++i) EXPECT_EQ(a.events[i].detail, b.events[i].detail);
}

TEST(Experiment, BaselineMatchesReferenceLoop) {
  auto s = small_spec(150, 2, 25, 15, 9);
  s.clustering.partition.max_tree_depth = 0;
  auto r = run_experiment(s);
  ASSERT_EQ(r.partitions, 0);
  ASSERT_EQ(r.rounds.size(), 25u);

  // Plain synchronous loop: available idle clients, over-committed
  // selection, local training, FedAvg, clock jumps to the slowest kept.
  ModelWeights w = init_weights(s.model, derive_seed(s.seed, "model.init"));
  std::vector<double> busy(s.population.clients.size(), 0.0);
  double t = 0.0;
  const auto root = CohortId::root();
  for (int round = 1; round <= 25; ++round) {
    std::vector<Invitee> kept, rest;
    for (;;) {
      std::vector<ClientId> cand;
      for (ClientId c : sample_available(s.population, t))
        if (busy[static_cast<std::size_t>(c)] <= t) cand.push_back(c);
      RoundPlan plan{root, s.engine.target_participants, s.engine.overcommit};
      std::tie(kept, rest) = select_participants(s.population, cand, plan, s.engine, invite_seed(s.seed, root, round));
      if (!kept.empty()) break;
      t += s.engine.idle_quantum;
    }
    double end = t;
    std::vector<GradientUpdate> ups;
    for (const auto& x : rest) busy[static_cast<std::size_t>(x.client)] = t + x.duration;
    for (const auto& k : kept) {
      busy[static_cast<std::size_t>(k.client)] = t + k.duration;
      end = std::max(end, t + k.duration);
      auto up = local_train(s.model, w, client_of(s.population, k.client), s.engine.k_steps, s.engine.batch_size,
                            s.engine.lr, train_seed(s.seed, root, round, k.client));
      ASSERT_TRUE(up);
      ups.push_back(*up);
    }
    w = fedavg_aggregate(w, ups, s.engine.sample_weighted);
    const auto& rep = r.rounds[static_cast<std::size_t>(round - 1)];
    EXPECT_EQ(rep.sim_start, t) << round;
    EXPECT_EQ(rep.sim_end, end) << round;
    std::vector<ClientId> who;
    for (const auto& k : kept) who.push_back(k.client);
    std::sort(who.begin(), who.end());
    EXPECT_EQ(rep.participants, who) << round;
    t = end;
  }
  EXPECT_EQ(r.final_models.at(root).values, w.values);
}

TEST(Experiment, InvariantsOnHeterogeneousRun) {
  auto s = small_spec(400, 2, 60, 40, 2);
  s.clustering.partition.max_tree_depth = 2;
  s.clustering.partition.alpha = 0.0;
  auto r = run_experiment(s);
  ASSERT_GT(r.partitions, 0);

  // Clock: events never go back in time; each cohort's rounds are sequential.
  for (std::size_t i = 1; i < r.events.size(); ++i) EXPECT_LE(r.events[i - 1].time, r.events[i].time);
  std::map<CohortId, std::pair<int, double>> last;
  for (const auto& rep : r.rounds) {
    EXPECT_LE(rep.sim_start, rep.sim_end);
    auto it = last.find(rep.cohort_id);
    if (it != last.end()) {
      EXPECT_EQ(rep.round, it->second.first + 1);
      EXPECT_GE(rep.sim_start, it->second.second);
    }
    last[rep.cohort_id] = {rep.round, rep.sim_end};
  }

  // Resource: a cohort never trains more clients than its share of the
  // root budget, and the shares of the leaves add up to the root budget.
  std::map<CohortId, double> budget{{CohortId::root(), 40.0}};
  for (const auto& rep : r.rounds) {
    double b = 40.0;
    for (std::size_t d = 0; d < rep.cohort_id.depth(); ++d) b /= s.clustering.K;
    EXPECT_LE(static_cast<double>(rep.participants.size()), std::llround(b)) << rep.cohort_id.str();
  }
  EXPECT_EQ(r.final_models.size(), r.final_leaves);
  double total = 0.0;
  for (const auto& [id, m] : r.final_models) total += 40.0 / std::pow(s.clustering.K, static_cast<double>(id.depth()));
  EXPECT_DOUBLE_EQ(total, 40.0);

  // Participation: a client's trainings never overlap in simulated time.
  std::map<ClientId, std::vector<double>> starts;
  for (const auto& rep : r.rounds)
    for (ClientId c : rep.participants) starts[c].push_back(rep.sim_start);
  for (auto& [c, v] : starts) {
    std::sort(v.begin(), v.end());
    const double dur = participant_duration(client_of(s.population, c), s.engine.batch_size, s.engine.k_steps);
    for (std::size_t i = 1; i < v.size(); ++i) EXPECT_GE(v[i], v[i - 1] + dur) << c;
  }
  int total_parts = 0;
  for (const auto& c : r.clients) total_parts += c.participations;
  std::size_t listed = 0;
  for (const auto& rep : r.rounds) listed += rep.participants.size();
  EXPECT_EQ(static_cast<std::size_t>(total_parts), listed);
}

TEST(Experiment, HomogeneousPopulationDoesNotSplit) {
  auto s = small_spec(600, 1, 120, 60, 3);
  s.clustering.K = 4;
  s.clustering.partition.clustering_start_round = 10;
  s.clustering.partition.min_participants_per_cohort = 10;
  auto r = run_experiment(s);
  EXPECT_EQ(r.partitions, 0);
  EXPECT_EQ(r.final_leaves, 1u);
}

TEST(Experiment, CoordinatorOutageStartsNoRound) {
  auto s = small_spec(200, 2, 40, 20, 4);
  const double from = run_experiment(s).end_time / 2, to = from + 200.0;
  s.faults.coordinator_crash = std::make_pair(from, 200.0);
  auto r = run_experiment(s);
  bool before = false, after = false;
  for (const auto& rep : r.rounds) {
    EXPECT_FALSE(rep.sim_start >= from && rep.sim_start < to) << rep.sim_start;
    before |= rep.sim_start < from;
    after |= rep.sim_start >= to;
  }
  EXPECT_TRUE(before);
  EXPECT_TRUE(after);
}

TEST(Experiment, SinkSeesEveryRound) {
  auto s = small_spec(100, 2, 8, 10, 6);
  std::vector<int> seen;
  auto r = run_experiment(s, [&](const RoundReport& rep) { seen.push_back(rep.round); });
  ASSERT_EQ(seen.size(), r.rounds.size());
  for (std::size_t i = 0; i < seen.size(); ++i) EXPECT_EQ(seen[i], r.rounds[i].round);
  ASSERT_FALSE(r.accuracy_curve.empty());
  EXPECT_TRUE(r.rounds.back().global_accuracy);
}

TEST(Experiment, StopsAtTargetAccuracy) {
  auto s = small_spec(150, 2, 200, 15, 7);
  s.engine.target_accuracy = 0.3;
  s.engine.eval_every = 1;
  auto r = run_experiment(s);
  ASSERT_FALSE(r.accuracy_curve.empty());
  EXPECT_GE(r.accuracy_curve.back().second, 0.3);
  EXPECT_LT(r.rounds.size(), 200u);
}
