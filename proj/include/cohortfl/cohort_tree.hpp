#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cohortfl/bytes.hpp"
#include "cohortfl/clustering.hpp"
#include "cohortfl/cohort_id.hpp"
#include "cohortfl/error.hpp"
#include "cohortfl/fltrain.hpp"
#include "cohortfl/random.hpp"

namespace cohortfl {

/// Structure of the cohort tree as the coordinator sees it: which nodes
/// exist and how each internal node was split. Carries no per-client state.
class TreeShape {
 public:
  TreeShape() { children_[CohortId::root()]; }

  bool contains(const CohortId& id) const { return children_.count(id) > 0; }
  bool is_leaf(const CohortId& id) const {
    auto it = children_.find(id);
    return it != children_.end() && it->second.empty();
  }
  const std::vector<CohortId>& children(const CohortId& id) const {
    auto it = children_.find(id);
    require(it != children_.end(), "unknown cohort " + id.str());
    return it->second;
  }
  std::vector<CohortId> leaves() const {
    std::vector<CohortId> out;
    for (const auto& [id, ch] : children_)
      if (ch.empty()) out.push_back(id);
    return out;
  }
  std::size_t num_leaves() const {
    return static_cast<std::size_t>(std::count_if(children_.begin(), children_.end(),
                                                  [](const auto& kv) { return kv.second.empty(); }));
  }

  std::vector<CohortId> split(const CohortId& parent, int arity) {
    require(is_leaf(parent), "only a leaf cohort can be split: " + parent.str());
    require(arity >= 2, "split arity must be >= 2");
    auto& ch = children_[parent];
    for (int k = 0; k < arity; ++k) {
      ch.push_back(parent.child(k));
      children_[parent.child(k)];
    }
    return ch;
  }

  const std::map<CohortId, std::vector<CohortId>>& nodes() const { return children_; }
  friend bool operator==(const TreeShape&, const TreeShape&) = default;

 private:
  std::map<CohortId, std::vector<CohortId>> children_;
};

enum class NodeStatus { active_leaf, internal, recovering };

struct CohortNode {
  CohortId id;
  NodeStatus status = NodeStatus::active_leaf;
  ModelWeights model;
  std::optional<YogiState> optimizer;
  ClusterState cluster;
  int round_counter = 0;
  double budget = 0.0;  // expected participants per round

  friend bool operator==(const CohortNode&, const CohortNode&) = default;
};

struct CohortTree {
  TreeShape shape;
  std::map<CohortId, CohortNode> nodes;

  CohortNode& node(const CohortId& id) {
    auto it = nodes.find(id);
    require(it != nodes.end(), "unknown cohort " + id.str());
    return it->second;
  }
  const CohortNode& node(const CohortId& id) const {
    auto it = nodes.find(id);
    require(it != nodes.end(), "unknown cohort " + id.str());
    return it->second;
  }
  std::vector<CohortId> leaves() const { return shape.leaves(); }
};

inline CohortTree make_tree(ModelWeights root_model, std::optional<YogiState> optimizer, int K, double budget) {
  CohortTree t;
  CohortNode root;
  root.id = CohortId::root();
  root.model = std::move(root_model);
  root.optimizer = std::move(optimizer);
  root.cluster.K = K;
  root.budget = budget;
  t.nodes.emplace(root.id, std::move(root));
  return t;
}

/// Turns an active leaf into an internal node with `arity` children. Each
/// child starts from a copy of the parent's model, a fresh optimizer state
/// and an equal share of the parent's per-round budget.
inline std::vector<CohortId> partition_cohort(CohortTree& tree, const CohortId& parent, int arity,
                                              int max_tree_depth) {
  if (static_cast<int>(parent.depth()) >= max_tree_depth)
    throw ContractViolation("partition refused: " + parent.str() + " is at max tree depth");
  CohortNode& p = tree.node(parent);
  require(p.status == NodeStatus::active_leaf, "partition requires an active leaf");
  const auto kids = tree.shape.split(parent, arity);
  p.status = NodeStatus::internal;
  for (const auto& id : kids) {
    CohortNode c;
    c.id = id;
    c.model = p.model;
    if (p.optimizer) {
      const auto& o = *p.optimizer;
      c.optimizer = make_yogi_state(p.model.dim(), o.server_lr, o.beta1, o.beta2, o.tau);
    }
    c.cluster.K = p.cluster.K;
    c.round_counter = p.round_counter;
    c.budget = p.budget / arity;
    tree.nodes.emplace(id, std::move(c));
  }
  return kids;
}

// --- affinity protocol ----------------------------------------------------

struct AffinityMessage {
  CohortId cohort_id;
  double reward = 0.0;  // the exploit reward delta observed this round
  std::optional<int> cluster_index;

  friend bool operator==(const AffinityMessage&, const AffinityMessage&) = default;
};

struct AffinityRequest {
  ClientId client_id = 0;
  std::optional<CohortId> requested_cohort;  // none: no preference
  std::optional<int> cluster_index;
  bool exploring = false;  // drawn by the exploration branch

  friend bool operator==(const AffinityRequest&, const AffinityRequest&) = default;
};

struct AffinityRecord {
  double reward = 0.0;
  std::optional<int> cluster_index;
  bool explored = false;  // feedback has been received from this cohort

  friend bool operator==(const AffinityRecord&, const AffinityRecord&) = default;
};

/// Client-side memory of its relationship with each cohort.
struct AffinityStore {
  std::map<CohortId, AffinityRecord> records;
  int last_updated = -1;
  int feedback_count = 0;

  bool empty() const { return records.empty(); }
  void clear() { *this = AffinityStore{}; }
  friend bool operator==(const AffinityStore&, const AffinityStore&) = default;
};

// Wire form: dotted cohort path, little-endian f64 reward, i64 cluster index
// with -1 for none.
inline void encode(ByteWriter& w, const AffinityMessage& m) {
  w.str(m.cohort_id.str());
  w.f64(m.reward);
  w.i64(m.cluster_index ? *m.cluster_index : -1);
}

inline AffinityMessage decode_message(ByteReader& r) {
  AffinityMessage m;
  m.cohort_id = CohortId::parse(r.str());
  m.reward = r.f64();
  const std::int64_t l = r.i64();
  if (l >= 0) m.cluster_index = static_cast<int>(l);
  return m;
}

inline void encode(ByteWriter& w, const AffinityRequest& q) {
  w.i64(q.client_id);
  w.str(q.requested_cohort ? q.requested_cohort->str() : std::string());
  w.i64(q.cluster_index ? *q.cluster_index : -1);
}

inline AffinityRequest decode_request(ByteReader& r) {
  AffinityRequest q;
  q.client_id = r.i64();
  const std::string c = r.str();
  if (!c.empty()) q.requested_cohort = CohortId::parse(c);
  const std::int64_t l = r.i64();
  if (l >= 0) q.cluster_index = static_cast<int>(l);
  return q;
}

// Text form used in the event log: "<cohort>;<reward>;<index>".
inline std::string to_text(const AffinityMessage& m) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", m.reward);
  return m.cohort_id.str() + ";" + buf + ";" + std::to_string(m.cluster_index ? *m.cluster_index : -1);
}

inline std::string to_text(const AffinityRequest& q) {
  return std::to_string(q.client_id) + ";" + (q.requested_cohort ? q.requested_cohort->str() : std::string("-")) +
         ";" + std::to_string(q.cluster_index ? *q.cluster_index : -1);
}

/// Decaying epsilon-greedy choice over the client's records. With
/// probability epsilon^round the client explores: it picks uniformly among
/// max(M, |records| + 1) slots, where every slot past its own records is
/// the "unexplored" sentinel the coordinator resolves to a random leaf.
/// Otherwise it requests its highest-reward cohort (ties: smallest id).
inline AffinityRequest client_select_cohort(ClientId client, const AffinityStore& store, int known_leaves_hint,
                                            double epsilon, int round, std::uint64_t seed) {
  require(epsilon >= 0.0 && epsilon <= 1.0, "epsilon must be in [0, 1]");
  AffinityRequest req;
  req.client_id = client;
  if (store.empty()) return req;
  Rng rng = make_rng(seed);
  const double explore_p = std::pow(epsilon, std::max(0, round));
  if (uniform01(rng) < explore_p) {
    req.exploring = true;
    const std::size_t slots = std::max<std::size_t>(static_cast<std::size_t>(std::max(0, known_leaves_hint)),
                                                    store.records.size() + 1);
    const std::size_t pick = std::uniform_int_distribution<std::size_t>(0, slots - 1)(rng);
    if (pick < store.records.size()) {
      auto it = std::next(store.records.begin(), static_cast<std::ptrdiff_t>(pick));
      req.requested_cohort = it->first;
      req.cluster_index = it->second.cluster_index;
    }
    return req;
  }
  auto best = store.records.begin();
  for (auto it = store.records.begin(); it != store.records.end(); ++it)
    if (it->second.reward > best->second.reward) best = it;
  req.requested_cohort = best->first;
  req.cluster_index = best->second.cluster_index;
  return req;
}

/// Resolves a request to an active leaf. Unknown or absent cohorts get a
/// uniformly random leaf; an internal cohort is descended through the
/// child named by the cluster index (random below that level).
inline CohortId match_request(const TreeShape& tree, const AffinityRequest& req, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  auto pick = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };
  if (!req.requested_cohort || !tree.contains(*req.requested_cohort)) {
    const auto leaves = tree.leaves();
    require(!leaves.empty(), "tree has no active leaf");
    return leaves[pick(leaves.size())];
  }
  CohortId cur = *req.requested_cohort;
  bool first_hop = true;
  while (!tree.is_leaf(cur)) {
    const auto& ch = tree.children(cur);
    if (first_hop && req.cluster_index && *req.cluster_index >= 0 &&
        static_cast<std::size_t>(*req.cluster_index) < ch.size())
      cur = ch[static_cast<std::size_t>(*req.cluster_index)];
    else
      cur = ch[pick(ch.size())];
    first_hop = false;
  }
  return cur;
}

/// True when the request names `leaf` with a cluster index from an earlier
/// feedback, or names an ancestor whose recorded split leads to `leaf`.
inline bool claims_membership(const AffinityRequest& req, const CohortId& leaf) {
  if (req.exploring || !req.requested_cohort || !req.cluster_index) return false;
  const CohortId& c = *req.requested_cohort;
  if (c == leaf) return true;
  if (!c.is_ancestor_of(leaf)) return false;
  return leaf.path()[c.depth()] == *req.cluster_index;
}

/// One message per participant that completed the round.
inline std::vector<AffinityMessage> feedback(const CohortId& cohort, std::span<const ClientId> participants,
                                             const std::map<ClientId, double>& rewards,
                                             const std::map<ClientId, int>& labels) {
  std::vector<AffinityMessage> out;
  for (ClientId c : participants) {
    auto r = rewards.find(c);
    if (r == rewards.end()) continue;
    AffinityMessage m;
    m.cohort_id = cohort;
    m.reward = r->second;
    if (auto l = labels.find(c); l != labels.end()) m.cluster_index = l->second;
    out.push_back(std::move(m));
  }
  return out;
}

/// Replaces records of cohorts that have since been split by records for
/// their children (R_parent, +0.1 for the child matching the stored cluster
/// index) and drops records of cohorts that no longer exist.
inline void refresh_records(AffinityStore& store, const TreeShape& tree) {
  bool changed = true;
  while (changed) {
    changed = false;
    for (auto it = store.records.begin(); it != store.records.end();) {
      if (!tree.contains(it->first)) {
        it = store.records.erase(it);
        continue;
      }
      if (tree.is_leaf(it->first)) {
        ++it;
        continue;
      }
      const AffinityRecord parent = it->second;
      const auto& kids = tree.children(it->first);
      it = store.records.erase(it);
      for (std::size_t k = 0; k < kids.size(); ++k) {
        const bool match = parent.cluster_index && *parent.cluster_index == static_cast<int>(k);
        store.records.try_emplace(kids[k], AffinityRecord{parent.reward + (match ? kSpawnBonus : 0.0), {}, false});
      }
      changed = true;
      break;
    }
  }
}

/// Client reaction to feedback: decayed update of the explored cohort's
/// reward and copy of the cluster index. The first feedback from a cohort
/// also propagates the explored cohort's updated reward to the leaves the
/// client has not explored, scaled by 1/(d+1).
inline void client_apply_feedback(AffinityStore& store, const AffinityMessage& msg, const TreeShape& tree,
                                  double gamma, int round) {
  refresh_records(store, tree);
  AffinityRecord& rec = store.records[msg.cohort_id];
  const bool first_visit = !rec.explored;
  // A zero delta carries no fit information (e.g. while the tree has a
  // single leaf); only the cluster index is copied.
  if (msg.reward != 0.0) rec.reward = decayed_reward(rec.reward, msg.reward, gamma);
  rec.cluster_index = msg.cluster_index;
  rec.explored = true;
  if (first_visit && msg.reward != 0.0) {
    const double r = rec.reward;
    for (const auto& leaf : tree.leaves()) {
      if (leaf == msg.cohort_id) continue;
      AffinityRecord& other = store.records[leaf];
      if (other.explored) continue;
      other.reward += explore_increment(r, tree_distance(msg.cohort_id, leaf));
    }
  }
  store.last_updated = round;
  ++store.feedback_count;
}

}  // namespace cohortfl
