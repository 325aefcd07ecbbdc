#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cohortfl/clustering.hpp"
#include "cohortfl/cohort_tree.hpp"
#include "cohortfl/error.hpp"
#include "cohortfl/fltrain.hpp"
#include "cohortfl/metrics.hpp"
#include "cohortfl/model.hpp"
#include "cohortfl/population.hpp"
#include "cohortfl/random.hpp"
#include "cohortfl/resilience.hpp"

namespace cohortfl {

enum class Algorithm { fedavg, yogi };

struct EngineParams {
  int max_rounds = 100;
  int target_participants = 200;
  double overcommit = 0.25;
  double lr = 0.05;
  int k_steps = 10;
  int batch_size = 6;
  Algorithm algorithm = Algorithm::fedavg;
  bool sample_weighted = true;
  int eval_every = 5;
  int eval_clients = 100;
  double target_accuracy = 0.0;  // <= 0: run all rounds
  double idle_quantum = 10.0;
  double starvation_timeout = 5000.0;  // a leaf idle this long is retired
  int checkpoint_every = 5;
  double server_lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double tau = 1e-3;
};

struct ClusteringParams {
  int K = 2;
  double epsilon = 0.9;
  double gamma = 0.2;
  PartitionConfig partition;
};

struct ExperimentSpec {
  Population population;  // labels as the clients hold them (after corruption)
  std::set<ClientId> corrupted;
  ModelSpec model;
  EngineParams engine;
  ClusteringParams clustering;
  LdpConfig ldp;
  FaultPlan faults;
  DetectionConfig detection;
  std::uint64_t seed = 0;
};

struct RoundReport {
  CohortId cohort_id;
  int round = 0;
  double sim_start = 0.0;
  double sim_end = 0.0;
  std::vector<ClientId> participants;
  double mean_loss = 0.0;
  std::optional<double> test_accuracy;
  std::optional<double> global_accuracy;
  std::optional<double> reduction;
  std::optional<std::string> partition_event;
};

struct EventRecord {
  double time = 0.0;
  std::string kind;
  CohortId cohort;
  int round = 0;
  std::string detail;
};

struct ClientOutcome {
  ClientId client_id = 0;
  int latent_cohort = 0;
  bool corrupted = false;
  bool blacklisted = false;
  int participations = 0;
  CohortId assigned_leaf;
  double accuracy = 0.0;
};

struct ExperimentResult {
  std::vector<RoundReport> rounds;
  std::vector<EventRecord> events;
  std::vector<ClientOutcome> clients;
  std::vector<std::pair<double, double>> accuracy_curve;  // (sim time, global accuracy)
  std::map<CohortId, ModelWeights> final_models;          // per final leaf
  double final_accuracy = 0.0;
  double end_time = 0.0;
  int partitions = 0;
  std::size_t final_leaves = 1;
  std::set<ClientId> blacklisted;
};

// --- seeds ----------------------------------------------------------------

inline std::uint64_t cohort_key(const CohortId& id) { return hash_name(id.str()); }

inline std::uint64_t train_seed(std::uint64_t master, const CohortId& c, int round, ClientId client) {
  return derive_seed(master, "train", {cohort_key(c), static_cast<std::uint64_t>(round), static_cast<std::uint64_t>(client)});
}
inline std::uint64_t invite_seed(std::uint64_t master, const CohortId& c, int round) {
  return derive_seed(master, "selection.invite", {cohort_key(c), static_cast<std::uint64_t>(round)});
}
inline std::uint64_t ldp_seed(std::uint64_t master, const CohortId& c, int round, ClientId client) {
  return derive_seed(master, "ldp", {cohort_key(c), static_cast<std::uint64_t>(round), static_cast<std::uint64_t>(client)});
}

// --- one round ------------------------------------------------------------

struct RoundPlan {
  CohortId cohort_id;
  int target_participants = 1;
  double overcommit_fraction = 0.25;
};

struct Invitee {
  ClientId client = 0;
  double duration = 0.0;
};

inline double participant_duration(const ClientProfile& c, int batch_size, int k_steps) {
  return static_cast<double>(batch_size) * k_steps / c.compute_speed + c.network_time;
}

/// Over-committed participant selection: invite target * (1 + overcommit)
/// candidates uniformly at random, then keep the `target` fastest (ties by
/// client id). Returns (kept, stragglers).
inline std::pair<std::vector<Invitee>, std::vector<Invitee>> select_participants(
    const Population& pop, std::vector<ClientId> candidates, const RoundPlan& plan, const EngineParams& p,
    std::uint64_t seed) {
  std::sort(candidates.begin(), candidates.end());
  Rng rng = make_rng(seed);
  std::shuffle(candidates.begin(), candidates.end(), rng);
  const auto n_invite = std::min<std::size_t>(
      candidates.size(),
      static_cast<std::size_t>(std::ceil(plan.target_participants * (1.0 + plan.overcommit_fraction) - 1e-9)));
  std::vector<Invitee> inv;
  for (std::size_t i = 0; i < n_invite; ++i)
    inv.push_back({candidates[i], participant_duration(client_of(pop, candidates[i]), p.batch_size, p.k_steps)});
  std::sort(inv.begin(), inv.end(), [](const Invitee& a, const Invitee& b) {
    return std::tie(a.duration, a.client) < std::tie(b.duration, b.client);
  });
  const auto keep = std::min<std::size_t>(inv.size(), static_cast<std::size_t>(plan.target_participants));
  std::vector<Invitee> kept(inv.begin(), inv.begin() + static_cast<std::ptrdiff_t>(keep));
  std::vector<Invitee> rest(inv.begin() + static_cast<std::ptrdiff_t>(keep), inv.end());
  return {std::move(kept), std::move(rest)};
}

// --- experiment -----------------------------------------------------------

class Experiment {
 public:
  using ReportSink = std::function<void(const RoundReport&)>;

  explicit Experiment(ExperimentSpec spec, ReportSink sink = {}) : s_(std::move(spec)), sink_(std::move(sink)) {
    validate(s_.faults);
    if (s_.engine.max_rounds < 1) throw ConfigError("engine.max_rounds must be >= 1");
    if (s_.engine.target_participants < 1) throw ConfigError("engine.target_participants must be >= 1");
    if (s_.clustering.K < 2) throw ConfigError("clustering.K must be >= 2");
    const std::size_t n = s_.population.clients.size();
    stores_.resize(n);
    busy_until_.assign(n, 0.0);
    participations_.assign(n, 0);
    loss_round_ = client_affinity_loss(s_.population, s_.faults.client_affinity_loss_rate, s_.engine.max_rounds,
                                       derive_seed(s_.seed, "faults"));
    lost_.assign(n, false);

    std::optional<YogiState> opt;
    const ModelWeights w0 = init_weights(s_.model, derive_seed(s_.seed, "model.init"));
    if (s_.engine.algorithm == Algorithm::yogi)
      opt = make_yogi_state(w0.dim(), s_.engine.server_lr, s_.engine.beta1, s_.engine.beta2, s_.engine.tau);
    tree_ = make_tree(w0, opt, s_.clustering.K, s_.engine.target_participants);
    s_.clustering.partition.root_resource = s_.engine.target_participants;

    for (const auto& cl : s_.population.clients)
      if (!s_.corrupted.count(cl.client_id)) honest_.push_back(&cl);
    if (honest_.empty())
      for (const auto& cl : s_.population.clients) honest_.push_back(&cl);
  }

  ExperimentResult run() {
    take_checkpoint(CohortId::root(), 0.0);
    push({0.0, kStart, CohortId::root(), gen_[CohortId::root()]});
    for (const auto& c : s_.faults.cohort_crashes) push({c.time, kCrash, c.cohort, 0});

    while (!queue_.empty() && !stop_) {
      const Event ev = queue_.top();
      queue_.pop();
      now_ = std::max(now_, ev.time);
      switch (ev.kind) {
        case kEnd:
          if (ev.gen == gen_[ev.cohort]) finish_round(ev.cohort);
          break;
        case kCrash:
          crash(ev.cohort);
          break;
        case kStart:
          if (ev.gen == gen_[ev.cohort]) start_round(ev.cohort);
          break;
      }
    }
    return finalize();
  }

  // Deterministic leaf a client is served by: its exploit choice resolved
  // through the tree (a stable random leaf when it has no records).
  CohortId resolve_leaf(ClientId c) const {
    const auto& store = stores_[static_cast<std::size_t>(c)];
    AffinityRequest req = client_select_cohort(c, store, 0, 0.0, 1, 0);
    const auto seed = derive_seed(s_.seed, "resolve", {static_cast<std::uint64_t>(c)});
    return match_request(tree_.shape, req, seed);
  }

  const CohortTree& tree() const { return tree_; }
  const std::vector<AffinityStore>& stores() const { return stores_; }

 private:
  enum Kind { kEnd = 0, kCrash = 1, kStart = 2 };
  struct Event {
    double time;
    Kind kind;
    CohortId cohort;
    int gen;
  };
  struct Later {
    bool operator()(const Event& a, const Event& b) const {
      return std::tie(a.time, a.kind, a.cohort) > std::tie(b.time, b.kind, b.cohort);
    }
  };
  struct Pending {
    double start = 0.0;
    double end = 0.0;
    std::vector<GradientUpdate> updates;
    std::map<ClientId, AffinityRequest> requests;
  };

  void push(Event e) { queue_.push(std::move(e)); }

  void log(const std::string& kind, const CohortId& c, int round, std::string detail = {}) {
    events_.push_back({now_, kind, c, round, std::move(detail)});
  }

  int epoch() const {
    int e = 0;
    for (const auto& id : tree_.leaves()) e = std::max(e, tree_.node(id).round_counter);
    return e;
  }

  void start_round(const CohortId& id) {
    CohortNode& node = tree_.node(id);
    const int round = node.round_counter + 1;
    const int ep = epoch();
    const std::size_t leaves = tree_.shape.num_leaves();

    std::vector<ClientId> candidates;
    std::map<ClientId, AffinityRequest> requests;
    const bool coord_down = coordinator_down(s_.faults, now_);
    if (!coord_down) {
      for (ClientId c : sample_available(s_.population, now_)) {
        const auto ci = static_cast<std::size_t>(c);
        if (busy_until_[ci] > now_ || blacklist_.contains(c)) continue;
        if (loss_round_[ci] >= 0 && !lost_[ci] && ep >= loss_round_[ci]) {
          stores_[ci].clear();
          lost_[ci] = true;
          log("affinity_loss", id, ep, std::to_string(c));
        }
        const auto key = {static_cast<std::uint64_t>(c), bits_of(now_)};
        // The exploration exponent is the client's own experience: the number
        // of feedback messages in its store.
        AffinityRequest req = client_select_cohort(c, stores_[ci], static_cast<int>(leaves), s_.clustering.epsilon,
                                                   stores_[ci].feedback_count, derive_seed(s_.seed, "selection.client", key));
        if (match_request(tree_.shape, req, derive_seed(s_.seed, "selection.match", key)) != id) continue;
        candidates.push_back(c);
        requests.emplace(c, std::move(req));
      }
    }

    RoundPlan plan{id, std::max(1, static_cast<int>(std::llround(node.budget))), s_.engine.overcommit};
    auto [kept, stragglers] =
        select_participants(s_.population, candidates, plan, s_.engine, invite_seed(s_.seed, id, round));

    if (kept.empty()) {
      if (idle_since_.find(id) == idle_since_.end()) idle_since_[id] = now_;
      if (now_ - idle_since_[id] >= s_.engine.starvation_timeout) {
        log("retired", id, node.round_counter, "no participants");
        retired_.insert(id);
        return;
      }
      push({now_ + s_.engine.idle_quantum, kStart, id, gen_[id]});
      return;
    }
    idle_since_.erase(id);

    Pending p;
    p.start = now_;
    double end = now_;
    for (const auto& s : stragglers) busy_until_[static_cast<std::size_t>(s.client)] = now_ + s.duration;
    for (const auto& k : kept) {
      busy_until_[static_cast<std::size_t>(k.client)] = now_ + k.duration;
      end = std::max(end, now_ + k.duration);
      const auto& cl = client_of(s_.population, k.client);
      auto up = local_train(s_.model, node.model, cl, s_.engine.k_steps, s_.engine.batch_size, s_.engine.lr,
                            train_seed(s_.seed, id, round, k.client));
      if (!up) {
        log("client_failure", id, round, std::to_string(k.client));
        continue;
      }
      if (s_.ldp.enabled) *up = apply_ldp(*up, s_.ldp, ldp_seed(s_.seed, id, round, k.client));
      p.requests.emplace(k.client, requests.at(k.client));
      p.updates.push_back(std::move(*up));
    }
    p.end = end;
    pending_[id] = std::move(p);
    push({end, kEnd, id, gen_[id]});
  }

  void finish_round(const CohortId& id) {
    auto pit = pending_.find(id);
    if (pit == pending_.end()) return;
    Pending p = std::move(pit->second);
    pending_.erase(pit);
    CohortNode& node = tree_.node(id);

    RoundReport rep;
    rep.cohort_id = id;
    rep.round = node.round_counter + 1;
    rep.sim_start = p.start;
    rep.sim_end = now_;

    if (p.updates.empty()) {
      log("round_aborted", id, rep.round, "no successful updates");
      push({now_, kStart, id, gen_[id]});
      return;
    }
    if (s_.engine.algorithm == Algorithm::yogi && node.optimizer) {
      auto [w, st] = yogi_aggregate(*node.optimizer, node.model, p.updates, s_.engine.sample_weighted);
      node.model = std::move(w);
      node.optimizer = std::move(st);
    } else {
      node.model = fedavg_aggregate(node.model, p.updates, s_.engine.sample_weighted);
    }
    node.round_counter = rep.round;
    const int round = rep.round;
    for (const auto& u : p.updates) {
      rep.participants.push_back(u.client_id);
      rep.mean_loss += u.loss;
      ++participations_[static_cast<std::size_t>(u.client_id)];
    }
    rep.mean_loss /= static_cast<double>(p.updates.size());
    std::sort(rep.participants.begin(), rep.participants.end());

    const auto& pc = s_.clustering.partition;
    if (round > pc.clustering_start_round) run_clustering(id, node, p, rep);

    if (s_.engine.checkpoint_every > 0 && round % s_.engine.checkpoint_every == 0) take_checkpoint(id, now_);

    const bool last = round >= s_.engine.max_rounds;
    if (round % std::max(1, s_.engine.eval_every) == 0 || last) evaluate_round(id, rep);

    bool split = false;
    if (node.cluster.initialized) {
      const auto d = partition_criteria(node.cluster, pc, node.budget, round, static_cast<int>(id.depth()));
      if (d.split) {
        const auto kids = partition_cohort(tree_, id, d.arity, pc.max_tree_depth);
        ++partitions_;
        split = true;
        char buf[96];
        std::snprintf(buf, sizeof buf, "split:%d rho=%.9g bound=%.9g", d.arity, d.reduction, d.resource_bound);
        rep.partition_event = buf;
        log("partition", id, round, buf);
        for (const auto& k : kids) {
          take_checkpoint(k, now_);
          if (!last) push({now_, kStart, k, gen_[k]});
        }
      }
    }
    if (!split && !last) push({now_, kStart, id, gen_[id]});

    if (sink_) sink_(rep);
    rounds_.push_back(std::move(rep));
    if (s_.engine.target_accuracy > 0.0 && !curve_.empty() && curve_.back().second >= s_.engine.target_accuracy)
      stop_ = true;
  }

  void run_clustering(const CohortId& id, CohortNode& node, const Pending& p, RoundReport& rep) {
    const int round = rep.round;
    ClusterState& cs = node.cluster;
    std::map<ClientId, int> labels;
    if (!cs.initialized) {
      if (!init_prototypes(cs, p.updates, derive_seed(s_.seed, "clustering.kmeans", {cohort_key(id), static_cast<std::uint64_t>(round)})))
        return;
      for (const auto& u : p.updates) labels[u.client_id] = cs.persisted_labels.at(u.client_id);
      log("clustering_init", id, round);
    } else {
      labels = assign_round(cs, p.updates);
    }
    rep.reduction = estimate_reduction(cs, p.updates, round, s_.clustering.partition.smoothing_window);
    if (id.is_root() && s_.clustering.partition.root_dispersion <= 0.0)
      s_.clustering.partition.root_dispersion = cs.dispersion_history.front().overall;

    std::set<ClientId> known;
    for (const auto& [c, req] : p.requests)
      if (claims_membership(req, id)) known.insert(c);
    auto rewards = exploit_reward(p.updates, known);

    if (s_.detection.enabled) {
      std::vector<AffinityRequest> reqs;
      for (const auto& [c, req] : p.requests) reqs.push_back(req);
      for (const auto& d : detect_anomalies(blacklist_, s_.detection, id, round, reqs, labels, rewards)) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%lld score=%.9g", static_cast<long long>(d.client), d.score);
        log(d.blacklisted ? "blacklist" : "strike", id, round, buf);
      }
    }

    // Rewards only carry information once there is more than one cohort.
    if (tree_.shape.num_leaves() == 1)
      for (auto& [c, r] : rewards) r = 0.0;
    const int ep = epoch();
    const auto msgs = feedback(id, rep.participants, rewards, labels);
    std::size_t i = 0;
    for (ClientId c : rep.participants) {
      if (!rewards.count(c)) continue;
      client_apply_feedback(stores_[static_cast<std::size_t>(c)], msgs[i++], tree_.shape, s_.clustering.gamma, ep);
    }
  }

  void evaluate_round(const CohortId& id, RoundReport& rep) {
    const CohortNode& node = tree_.node(id);
    // Leaf accuracy on up to eval_clients of its current members.
    std::vector<const ClientProfile*> members;
    for (const auto* cl : honest_)
      if (resolve_leaf(cl->client_id) == id) members.push_back(cl);
    if (!members.empty()) {
      if (members.size() > static_cast<std::size_t>(s_.engine.eval_clients)) {
        Rng rng = make_rng(derive_seed(s_.seed, "eval.sample", {cohort_key(id)}));
        std::shuffle(members.begin(), members.end(), rng);
        members.resize(static_cast<std::size_t>(s_.engine.eval_clients));
      }
      rep.test_accuracy = evaluate(s_.model, node.model, members).mean_accuracy;
    }
    rep.global_accuracy = global_accuracy();
    curve_.emplace_back(now_, *rep.global_accuracy);
  }

  // Client-uniform accuracy over honest clients, each on its resolved leaf.
  double global_accuracy() const {
    double s = 0.0;
    for (const auto* cl : honest_)
      s += client_accuracy(s_.model, tree_.node(resolve_leaf(cl->client_id)).model, *cl);
    return s / static_cast<double>(honest_.size());
  }

  void take_checkpoint(const CohortId& id, double t) {
    checkpoints_[id] = serialize(checkpoint(tree_.node(id), tree_.shape, t));
  }

  void crash(const CohortId& id) {
    if (!tree_.shape.is_leaf(id) || retired_.count(id) || !checkpoints_.count(id)) {
      log("crash_ignored", id, 0, "not an active leaf");
      return;
    }
    CohortNode& node = tree_.node(id);
    const int before = node.round_counter;
    const bool in_flight = pending_.erase(id) > 0;
    node.status = NodeStatus::recovering;
    node = restore(checkpoints_.at(id));
    node.status = NodeStatus::active_leaf;
    ++gen_[id];
    char buf[96];
    std::snprintf(buf, sizeof buf, "restored_round=%d lost_rounds=%d in_flight=%d", node.round_counter,
                  before - node.round_counter, in_flight ? 1 : 0);
    log("cohort_crash", id, before, buf);
    if (node.round_counter < s_.engine.max_rounds) push({now_, kStart, id, gen_[id]});
  }

  ExperimentResult finalize() {
    ExperimentResult r;
    r.end_time = now_;
    r.partitions = partitions_;
    r.final_leaves = tree_.shape.num_leaves();
    r.blacklisted = blacklist_.clients;
    for (const auto& id : tree_.leaves()) r.final_models[id] = tree_.node(id).model;
    for (const auto& cl : s_.population.clients) {
      ClientOutcome o;
      o.client_id = cl.client_id;
      o.latent_cohort = cl.latent_cohort;
      o.corrupted = s_.corrupted.count(cl.client_id) > 0;
      o.blacklisted = blacklist_.contains(cl.client_id);
      o.participations = participations_[static_cast<std::size_t>(cl.client_id)];
      o.assigned_leaf = resolve_leaf(cl.client_id);
      o.accuracy = client_accuracy(s_.model, tree_.node(o.assigned_leaf).model, cl);
      r.clients.push_back(o);
    }
    r.final_accuracy = global_accuracy();
    r.rounds = std::move(rounds_);
    r.events = std::move(events_);
    r.accuracy_curve = std::move(curve_);
    return r;
  }

  ExperimentSpec s_;
  ReportSink sink_;
  CohortTree tree_;
  std::vector<AffinityStore> stores_;
  std::vector<double> busy_until_;
  std::vector<int> participations_;
  std::vector<int> loss_round_;
  std::vector<bool> lost_;
  std::vector<const ClientProfile*> honest_;
  Blacklist blacklist_;
  std::priority_queue<Event, std::vector<Event>, Later> queue_;
  std::map<CohortId, int> gen_;
  std::map<CohortId, Pending> pending_;
  std::map<CohortId, std::vector<std::uint8_t>> checkpoints_;
  std::map<CohortId, double> idle_since_;
  std::set<CohortId> retired_;
  std::vector<RoundReport> rounds_;
  std::vector<EventRecord> events_;
  std::vector<std::pair<double, double>> curve_;
  double now_ = 0.0;
  int partitions_ = 0;
  bool stop_ = false;
};

inline ExperimentResult run_experiment(ExperimentSpec spec, Experiment::ReportSink sink = {}) {
  return Experiment(std::move(spec), std::move(sink)).run();
}

// --- summaries ------------------------------------------------------------

/// First simulated time at which the accuracy curve reaches `target`.
inline std::optional<double> time_to_accuracy(std::span<const std::pair<double, double>> curve, double target) {
  for (const auto& [t, a] : curve)
    if (a >= target) return t;
  return std::nullopt;
}

inline double recovery_ari(const ExperimentResult& r) {
  std::vector<int> truth, found;
  std::map<CohortId, int> index;
  for (const auto& c : r.clients) {
    if (c.participations < 1) continue;
    truth.push_back(c.latent_cohort);
    auto [it, fresh] = index.try_emplace(c.assigned_leaf, static_cast<int>(index.size()));
    found.push_back(it->second);
  }
  return adjusted_rand_index(truth, found);
}

/// J over the final leaf assignment and over a single cohort.
inline std::pair<double, double> heterogeneity_before_after(const Population& pop, const ExperimentResult& r) {
  std::unordered_map<ClientId, int> single, leaves;
  std::map<CohortId, int> index;
  for (const auto& c : r.clients) {
    single[c.client_id] = 0;
    auto [it, fresh] = index.try_emplace(c.assigned_leaf, static_cast<int>(index.size()));
    leaves[c.client_id] = it->second;
  }
  const double before = heterogeneity_J(pop.clients, single, 1).J;
  const double after = heterogeneity_J(pop.clients, leaves, static_cast<int>(index.size())).J;
  return {before, after};
}

inline BiasStats client_bias(const ExperimentResult& r) {
  std::vector<double> acc;
  for (const auto& c : r.clients)
    if (!c.corrupted) acc.push_back(c.accuracy);
  return bias_stats(acc);
}

}  // namespace cohortfl
