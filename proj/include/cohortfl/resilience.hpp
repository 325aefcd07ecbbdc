#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cohortfl/bytes.hpp"
#include "cohortfl/clustering.hpp"
#include "cohortfl/cohort_tree.hpp"
#include "cohortfl/error.hpp"
#include "cohortfl/population.hpp"
#include "cohortfl/random.hpp"

namespace cohortfl {

inline constexpr char kCheckpointMagic[8] = {'C', 'F', 'L', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Round-boundary snapshot of one cohort.
struct Checkpoint {
  CohortNode node;
  TreeShape tree;
  double written_at = 0.0;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace detail {

inline void encode_cluster(ByteWriter& w, const ClusterState& c) {
  w.i64(c.K);
  w.u8(c.initialized ? 1 : 0);
  w.u64(c.persisted_labels.size());
  for (const auto& [id, l] : c.persisted_labels) {
    w.i64(id);
    w.i64(l);
  }
  w.u64(c.round_centroids.size());
  for (const auto& v : c.round_centroids) w.f64s(v);
  w.u64(c.dispersion_history.size());
  for (const auto& d : c.dispersion_history) {
    w.i64(d.round);
    w.f64(d.overall);
    w.f64(d.intra);
    w.f64(d.ratio);
  }
  w.f64s(c.churn_history);
}

inline ClusterState decode_cluster(ByteReader& r) {
  ClusterState c;
  c.K = static_cast<int>(r.i64());
  c.initialized = r.u8() != 0;
  for (std::uint64_t n = r.u64(), i = 0; i < n; ++i) {
    const ClientId id = r.i64();
    c.persisted_labels[id] = static_cast<int>(r.i64());
  }
  for (std::uint64_t n = r.u64(), i = 0; i < n; ++i) c.round_centroids.push_back(r.f64s());
  for (std::uint64_t n = r.u64(), i = 0; i < n; ++i) {
    DispersionRecord d;
    d.round = static_cast<int>(r.i64());
    d.overall = r.f64();
    d.intra = r.f64();
    d.ratio = r.f64();
    c.dispersion_history.push_back(d);
  }
  c.churn_history = r.f64s();
  return c;
}

}  // namespace detail

/// Binary layout: magic, u32 version, u64 payload length, payload, u64
/// FNV-1a checksum of the payload. All numbers little-endian.
inline std::vector<std::uint8_t> serialize(const Checkpoint& ck) {
  ByteWriter p;
  const CohortNode& n = ck.node;
  p.str(n.id.str());
  p.u8(static_cast<std::uint8_t>(n.status));
  p.i64(n.round_counter);
  p.f64(n.budget);
  p.f64(ck.written_at);
  p.f64s(n.model.values);
  p.u8(n.optimizer ? 1 : 0);
  if (n.optimizer) {
    p.f64s(n.optimizer->first_moment);
    p.f64s(n.optimizer->second_moment);
    p.f64(n.optimizer->server_lr);
    p.f64(n.optimizer->beta1);
    p.f64(n.optimizer->beta2);
    p.f64(n.optimizer->tau);
  }
  detail::encode_cluster(p, n.cluster);
  p.u64(ck.tree.nodes().size());
  for (const auto& [id, kids] : ck.tree.nodes()) {
    p.str(id.str());
    p.u32(static_cast<std::uint32_t>(kids.size()));
  }

  ByteWriter out;
  out.raw(std::string_view(kCheckpointMagic, sizeof kCheckpointMagic));
  out.u32(kCheckpointVersion);
  out.u64(p.bytes().size());
  out.raw(std::string_view(reinterpret_cast<const char*>(p.bytes().data()), p.bytes().size()));
  out.u64(fnv1a(p.bytes().data(), p.bytes().size()));
  return out.take();
}

inline Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  try {
    ByteReader hdr(bytes);
    if (hdr.raw(sizeof kCheckpointMagic) != std::string(kCheckpointMagic, sizeof kCheckpointMagic))
      throw RuntimeFailure("corrupt checkpoint: bad magic");
    if (hdr.u32() != kCheckpointVersion) throw RuntimeFailure("corrupt checkpoint: unsupported version");
    const std::uint64_t len = hdr.u64();
    const std::size_t begin = hdr.pos();
    if (len > bytes.size() - begin || bytes.size() - begin - len != 8)
      throw RuntimeFailure("corrupt checkpoint: bad length");
    ByteReader tail(bytes, begin + len);
    if (tail.u64() != fnv1a(bytes.data() + begin, len)) throw RuntimeFailure("corrupt checkpoint: checksum mismatch");

    ByteReader r(bytes, begin, begin + len);
    Checkpoint ck;
    CohortNode& n = ck.node;
    n.id = CohortId::parse(r.str());
    const auto status = r.u8();
    if (status > static_cast<std::uint8_t>(NodeStatus::recovering)) throw RuntimeFailure("corrupt checkpoint: status");
    n.status = static_cast<NodeStatus>(status);
    n.round_counter = static_cast<int>(r.i64());
    n.budget = r.f64();
    ck.written_at = r.f64();
    n.model.values = r.f64s();
    if (r.u8()) {
      YogiState y;
      y.first_moment = r.f64s();
      y.second_moment = r.f64s();
      y.server_lr = r.f64();
      y.beta1 = r.f64();
      y.beta2 = r.f64();
      y.tau = r.f64();
      n.optimizer = std::move(y);
    }
    n.cluster = detail::decode_cluster(r);
    std::map<CohortId, std::uint32_t> arity;
    for (std::uint64_t k = r.u64(), i = 0; i < k; ++i) {
      const CohortId id = CohortId::parse(r.str());
      arity[id] = r.u32();
    }
    // Map iteration order puts parents before children.
    for (const auto& [id, a] : arity)
      if (a > 0) ck.tree.split(id, static_cast<int>(a));
    if (!r.done()) throw RuntimeFailure("corrupt checkpoint: trailing bytes");
    return ck;
  } catch (const ContractViolation& e) {
    throw RuntimeFailure(std::string("corrupt checkpoint: ") + e.what());
  }
}

inline Checkpoint checkpoint(const CohortNode& node, const TreeShape& tree, double now) {
  return Checkpoint{node, tree, now};
}

/// Restores the cohort node captured by `bytes`; throws RuntimeFailure when
/// the checkpoint is damaged.
inline CohortNode restore(const std::vector<std::uint8_t>& bytes) { return deserialize_checkpoint(bytes).node; }

inline std::string manifest(const Checkpoint& ck) {
  std::ostringstream os;
  char buf[64];
  os << "format = cohortfl-checkpoint\nversion = " << kCheckpointVersion << '\n';
  os << "cohort = " << ck.node.id.str() << '\n';
  os << "round = " << ck.node.round_counter << '\n';
  std::snprintf(buf, sizeof buf, "%.9g", ck.written_at);
  os << "written_at = " << buf << '\n';
  std::snprintf(buf, sizeof buf, "%.9g", ck.node.budget);
  os << "budget = " << buf << '\n';
  os << "model_dim = " << ck.node.model.dim() << '\n';
  os << "optimizer = " << (ck.node.optimizer ? "yogi" : "none") << '\n';
  os << "cluster_k = " << ck.node.cluster.K << '\n';
  os << "cluster_initialized = " << (ck.node.cluster.initialized ? 1 : 0) << '\n';
  os << "persisted_labels = " << ck.node.cluster.persisted_labels.size() << '\n';
  os << "tree_leaves =";
  for (const auto& l : ck.tree.leaves()) os << ' ' << l.str();
  os << '\n';
  return os.str();
}

// --- fault plan -----------------------------------------------------------

struct CohortCrash {
  double time = 0.0;
  CohortId cohort;
};

struct FaultPlan {
  std::vector<CohortCrash> cohort_crashes;
  std::optional<std::pair<double, double>> coordinator_crash;  // (start, duration)
  double client_affinity_loss_rate = 0.0;
  double corrupted_fraction = 0.0;
};

inline void validate(const FaultPlan& f) {
  if (f.client_affinity_loss_rate < 0.0 || f.client_affinity_loss_rate > 1.0)
    throw ConfigError("client_affinity_loss_rate must be in [0, 1]");
  if (f.corrupted_fraction < 0.0 || f.corrupted_fraction > 0.15)
    throw ConfigError("corrupted_fraction must be in [0, 0.15]");
  if (f.coordinator_crash && (f.coordinator_crash->first < 0.0 || f.coordinator_crash->second < 0.0))
    throw ConfigError("coordinator crash window must be non-negative");
}

/// Requests arriving while the coordinator is being re-spawned are ignored.
inline bool coordinator_down(const FaultPlan& f, double t) {
  if (!f.coordinator_crash) return false;
  const auto [start, len] = *f.coordinator_crash;
  return len > 0.0 && t >= start && t < start + len;
}

/// For each client, the global round at which it loses its affinity store,
/// or -1. Each client is hit independently with probability `rate`, at a
/// uniformly random round in [1, horizon_rounds].
inline std::vector<int> client_affinity_loss(const Population& population, double rate, int horizon_rounds,
                                             std::uint64_t seed) {
  require(rate >= 0.0 && rate <= 1.0, "affinity loss rate must be in [0, 1]");
  std::vector<int> when(population.clients.size(), -1);
  for (std::size_t i = 0; i < when.size(); ++i) {
    Rng rng = make_rng(derive_seed(seed, "affinity_loss", {static_cast<std::uint64_t>(i)}));
    const double u = uniform01(rng);
    const int r = std::uniform_int_distribution<int>(1, std::max(1, horizon_rounds))(rng);
    if (u < rate) when[i] = r;
  }
  return when;
}

/// Flips labels of exactly round(fraction * n) clients through the
/// derangement y -> (y + 1) mod C and permutes their histograms to match.
inline std::set<ClientId> corrupt_clients(Population& population, double fraction, std::uint64_t seed) {
  require(fraction >= 0.0 && fraction <= 0.15, "corrupted fraction must be in [0, 0.15]");
  const std::size_t n = population.clients.size();
  const auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = make_rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::set<ClientId> out;
  const int C = population.num_classes;
  for (std::size_t i = 0; i < count; ++i) {
    auto& cl = population.clients[idx[i]];
    for (auto& y : cl.labels) y = (y + 1) % C;
    std::vector<double> h(cl.label_histogram.size());
    for (std::size_t y = 0; y < h.size(); ++y) h[(y + 1) % h.size()] = cl.label_histogram[y];
    cl.label_histogram = std::move(h);
    out.insert(cl.client_id);
  }
  return out;
}

// --- fake-affinity detection ------------------------------------------------

struct Detection {
  ClientId client = 0;
  int round = 0;
  double score = 0.0;  // the exploit reward that crossed the gate
  bool blacklisted = false;
};

struct Blacklist {
  std::set<ClientId> clients;
  std::map<ClientId, int> strikes;
  std::vector<Detection> log;

  bool contains(ClientId c) const { return clients.count(c) > 0; }
};

struct DetectionConfig {
  bool enabled = false;
  double reward_gate = 0.5;  // strike when dR < -gate
  int strikes_to_blacklist = 3;
};

/// A participant earns a strike when the cluster index it claimed for this
/// cohort disagrees with the label it was assigned and its exploit reward is
/// below -gate. Returns the detections recorded this round.
inline std::vector<Detection> detect_anomalies(Blacklist& bl, const DetectionConfig& cfg, const CohortId& cohort,
                                               int round, std::span<const AffinityRequest> requests,
                                               const std::map<ClientId, int>& assignment,
                                               const std::map<ClientId, double>& rewards) {
  std::vector<Detection> out;
  for (const auto& req : requests) {
    if (!req.requested_cohort || *req.requested_cohort != cohort || !req.cluster_index) continue;
    auto a = assignment.find(req.client_id);
    auto r = rewards.find(req.client_id);
    if (a == assignment.end() || r == rewards.end()) continue;
    if (a->second == *req.cluster_index || r->second >= -cfg.reward_gate) continue;
    Detection d{req.client_id, round, r->second, false};
    if (++bl.strikes[req.client_id] >= cfg.strikes_to_blacklist && !bl.contains(req.client_id)) {
      bl.clients.insert(req.client_id);
      d.blacklisted = true;
    }
    bl.log.push_back(d);
    out.push_back(d);
  }
  return out;
}

}  // namespace cohortfl
