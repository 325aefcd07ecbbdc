#pragma once

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cohortfl/engine.hpp"
#include "cohortfl/error.hpp"

namespace cohortfl {

// Experiment configuration: an INI-style file of `key = value` lines grouped
// under [section] headers. '#' starts a comment anywhere on a line, ';' only
// at the start of one (list values use ';' as a separator). Keys are
// addressed as "section.key" internally and on the command line.

struct ExperimentConfig {
  int num_clients = 0;
  int num_classes = 4;
  int feature_dim = 8;
  LatentCohortSpec latent;
  PopulationOptions population;
  ModelKind model_kind = ModelKind::logistic;
  int hidden_units = 16;
  EngineParams engine;
  int K = 2;
  double epsilon = 0.9;
  double gamma = 0.2;
  PartitionConfig partition;
  double clustering_start = 0.2;  // fractions of engine.max_rounds
  double partition_earliest = 0.2;
  double partition_latest = 0.8;
  LdpConfig ldp;
  FaultPlan faults;
  DetectionConfig detection;
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  std::string baseline_dir;
  std::map<std::string, std::string> assignments;  // effective "section.key" -> value
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE || !std::isfinite(x))
    throw ConfigError("expected a number, got '" + v + "'");
  return x;
}

inline long long parse_int(const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const long long x = std::strtoll(v.c_str(), &end, 10);
  if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE)
    throw ConfigError("expected an integer, got '" + v + "'");
  return x;
}

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "yes" || v == "on" || v == "1") return true;
  if (v == "false" || v == "no" || v == "off" || v == "0") return false;
  throw ConfigError("expected true or false, got '" + v + "'");
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  return out;
}

using Setter = std::function<void(ExperimentConfig&, const std::string&)>;

inline Setter real(std::function<double&(ExperimentConfig&)> at, double lo, double hi) {
  return [at, lo, hi](ExperimentConfig& c, const std::string& v) {
    const double x = parse_double(v);
    if (x < lo || x > hi) {
      std::ostringstream m;
      m << "value " << v << " out of range [" << lo << ", " << hi << "]";
      throw ConfigError(m.str());
    }
    at(c) = x;
  };
}

inline Setter integer(std::function<int&(ExperimentConfig&)> at, long long lo, long long hi) {
  return [at, lo, hi](ExperimentConfig& c, const std::string& v) {
    const long long x = parse_int(v);
    if (x < lo || x > hi)
      throw ConfigError("value " + v + " out of range [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    at(c) = static_cast<int>(x);
  };
}

inline Setter flag(std::function<bool&(ExperimentConfig&)> at) {
  return [at](ExperimentConfig& c, const std::string& v) { at(c) = parse_bool(v); };
}

constexpr double kInf = 1e300;
constexpr long long kMaxInt = 1LL << 30;

inline const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"population.num_clients", integer([](auto& c) -> int& { return c.num_clients; }, 1, kMaxInt)},
      {"population.latent_cohorts",
       integer([](auto& c) -> int& { return c.latent.num_latent_cohorts; }, 1, kMaxInt)},
      {"population.num_classes", integer([](auto& c) -> int& { return c.num_classes; }, 2, 100000)},
      {"population.feature_dim", integer([](auto& c) -> int& { return c.feature_dim; }, 1, 100000)},
      {"population.label_skew", real([](auto& c) -> double& { return c.latent.label_skew; }, 1e-12, 1.0)},
      {"population.feature_shift", real([](auto& c) -> double& { return c.latent.feature_shift; }, 0.0, kInf)},
      {"population.cohort_weights",
       [](ExperimentConfig& c, const std::string& v) {
         c.latent.cohort_weights.clear();
         for (const auto& w : split(v, ',')) c.latent.cohort_weights.push_back(parse_double(w));
       }},
      {"population.conflicting_labels", flag([](auto& c) -> bool& { return c.latent.conflicting_labels; })},
      {"population.min_samples", integer([](auto& c) -> int& { return c.population.min_samples; }, 2, kMaxInt)},
      {"population.max_samples", integer([](auto& c) -> int& { return c.population.max_samples; }, 2, kMaxInt)},
      {"population.class_separation",
       real([](auto& c) -> double& { return c.population.class_separation; }, 0.0, kInf)},
      {"population.feature_noise", real([](auto& c) -> double& { return c.population.feature_noise; }, 0.0, kInf)},
      {"population.profile_peak", real([](auto& c) -> double& { return c.population.profile_peak; }, 0.0, 1.0)},
      {"population.availability_duty",
       real([](auto& c) -> double& { return c.population.availability_duty; }, 1e-6, 1.0)},
      {"population.availability_mean_on",
       real([](auto& c) -> double& { return c.population.availability_mean_on; }, 1e-6, kInf)},
      {"population.availability_period",
       real([](auto& c) -> double& { return c.population.availability_period; }, 1e-6, kInf)},
      {"population.compute_speed_median",
       real([](auto& c) -> double& { return c.population.compute_speed_median; }, 1e-9, kInf)},
      {"population.network_time_median",
       real([](auto& c) -> double& { return c.population.network_time_median; }, 0.0, kInf)},
      {"population.speed_log_sigma", real([](auto& c) -> double& { return c.population.speed_log_sigma; }, 0.0, 10.0)},

      {"model.type",
       [](ExperimentConfig& c, const std::string& v) {
         if (v == "logistic") c.model_kind = ModelKind::logistic;
         else if (v == "mlp") c.model_kind = ModelKind::mlp;
         else throw ConfigError("expected logistic or mlp, got '" + v + "'");
       }},
      {"model.hidden_units", integer([](auto& c) -> int& { return c.hidden_units; }, 1, 100000)},

      {"engine.max_rounds", integer([](auto& c) -> int& { return c.engine.max_rounds; }, 1, kMaxInt)},
      {"engine.target_participants",
       integer([](auto& c) -> int& { return c.engine.target_participants; }, 1, kMaxInt)},
      {"engine.overcommit", real([](auto& c) -> double& { return c.engine.overcommit; }, 0.0, 10.0)},
      {"engine.lr", real([](auto& c) -> double& { return c.engine.lr; }, 0.0, kInf)},
      {"engine.k_steps", integer([](auto& c) -> int& { return c.engine.k_steps; }, 1, kMaxInt)},
      {"engine.batch_size", integer([](auto& c) -> int& { return c.engine.batch_size; }, 1, kMaxInt)},
      {"engine.algorithm",
       [](ExperimentConfig& c, const std::string& v) {
         if (v == "fedavg") c.engine.algorithm = Algorithm::fedavg;
         else if (v == "yogi") c.engine.algorithm = Algorithm::yogi;
         else throw ConfigError("expected fedavg or yogi, got '" + v + "'");
       }},
      {"engine.sample_weighted", flag([](auto& c) -> bool& { return c.engine.sample_weighted; })},
      {"engine.eval_every", integer([](auto& c) -> int& { return c.engine.eval_every; }, 1, kMaxInt)},
      {"engine.eval_clients", integer([](auto& c) -> int& { return c.engine.eval_clients; }, 1, kMaxInt)},
      {"engine.target_accuracy", real([](auto& c) -> double& { return c.engine.target_accuracy; }, 0.0, 1.0)},
      {"engine.idle_quantum", real([](auto& c) -> double& { return c.engine.idle_quantum; }, 1e-9, kInf)},
      {"engine.starvation_timeout",
       real([](auto& c) -> double& { return c.engine.starvation_timeout; }, 0.0, kInf)},
      {"engine.checkpoint_every", integer([](auto& c) -> int& { return c.engine.checkpoint_every; }, 0, kMaxInt)},

      {"yogi.server_lr", real([](auto& c) -> double& { return c.engine.server_lr; }, 1e-12, kInf)},
      {"yogi.beta1", real([](auto& c) -> double& { return c.engine.beta1; }, 0.0, 0.999999999)},
      {"yogi.beta2", real([](auto& c) -> double& { return c.engine.beta2; }, 0.0, 0.999999999)},
      {"yogi.tau", real([](auto& c) -> double& { return c.engine.tau; }, 1e-12, kInf)},

      {"clustering.K", integer([](auto& c) -> int& { return c.K; }, 2, 1024)},
      {"clustering.epsilon", real([](auto& c) -> double& { return c.epsilon; }, 0.0, 1.0)},
      {"clustering.gamma", real([](auto& c) -> double& { return c.gamma; }, 1e-12, 1.0)},
      {"clustering.alpha", real([](auto& c) -> double& { return c.partition.alpha; }, 1e-12, kInf)},
      {"clustering.min_participants_per_cohort",
       integer([](auto& c) -> int& { return c.partition.min_participants_per_cohort; }, 1, kMaxInt)},
      {"clustering.max_tree_depth", integer([](auto& c) -> int& { return c.partition.max_tree_depth; }, 0, 64)},
      {"clustering.clustering_start", real([](auto& c) -> double& { return c.clustering_start; }, 0.0, 1.0)},
      {"clustering.partition_earliest", real([](auto& c) -> double& { return c.partition_earliest; }, 0.0, 1.0)},
      {"clustering.partition_latest", real([](auto& c) -> double& { return c.partition_latest; }, 0.0, 1.0)},
      {"clustering.stability_rounds",
       integer([](auto& c) -> int& { return c.partition.stability_rounds; }, 1, kMaxInt)},
      {"clustering.max_label_churn", real([](auto& c) -> double& { return c.partition.max_label_churn; }, 0.0, 1.0)},
      {"clustering.smoothing_window",
       integer([](auto& c) -> int& { return c.partition.smoothing_window; }, 1, kMaxInt)},
      {"clustering.required_reduction_exponent",
       real([](auto& c) -> double& { return c.partition.required_reduction_exponent; }, 0.0, 10.0)},

      {"ldp.enabled", flag([](auto& c) -> bool& { return c.ldp.enabled; })},
      {"ldp.noise_scale", real([](auto& c) -> double& { return c.ldp.noise_scale; }, 0.0, kInf)},
      {"ldp.clip_norm", real([](auto& c) -> double& { return c.ldp.clip_norm; }, 1e-12, kInf)},

      {"faults.cohort_crashes",
       [](ExperimentConfig& c, const std::string& v) {
         c.faults.cohort_crashes.clear();
         if (v.empty()) return;
         for (const auto& item : split(v, ';')) {
           const auto at = item.find('@');
           if (at == std::string::npos) throw ConfigError("expected time@cohort, got '" + item + "'");
           CohortCrash cc;
           cc.time = parse_double(trim(item.substr(0, at)));
           if (cc.time < 0.0) throw ConfigError("crash time must be >= 0");
           try {
             cc.cohort = CohortId::parse(trim(item.substr(at + 1)));
           } catch (const std::exception& e) {
             throw ConfigError(std::string("bad cohort id: ") + e.what());
           }
           c.faults.cohort_crashes.push_back(cc);
         }
       }},
      {"faults.coordinator_crash_start",
       [](ExperimentConfig& c, const std::string& v) {
         const double x = parse_double(v);
         if (x < 0.0) throw ConfigError("coordinator crash start must be >= 0");
         auto w = c.faults.coordinator_crash.value_or(std::pair<double, double>{0.0, 0.0});
         w.first = x;
         c.faults.coordinator_crash = w;
       }},
      {"faults.coordinator_crash_duration",
       [](ExperimentConfig& c, const std::string& v) {
         const double x = parse_double(v);
         if (x < 0.0) throw ConfigError("coordinator crash duration must be >= 0");
         auto w = c.faults.coordinator_crash.value_or(std::pair<double, double>{0.0, 0.0});
         w.second = x;
         c.faults.coordinator_crash = w;
       }},
      {"faults.client_affinity_loss_rate",
       real([](auto& c) -> double& { return c.faults.client_affinity_loss_rate; }, 0.0, 1.0)},
      {"faults.corrupted_fraction", real([](auto& c) -> double& { return c.faults.corrupted_fraction; }, 0.0, 0.15)},

      {"detection.enabled", flag([](auto& c) -> bool& { return c.detection.enabled; })},
      {"detection.reward_gate", real([](auto& c) -> double& { return c.detection.reward_gate; }, 0.0, kInf)},
      {"detection.strikes_to_blacklist",
       integer([](auto& c) -> int& { return c.detection.strikes_to_blacklist; }, 1, kMaxInt)},

      {"run.seed",
       [](ExperimentConfig& c, const std::string& v) {
         const long long x = parse_int(v);
         if (x < 0) throw ConfigError("seed must be >= 0");
         c.seed = static_cast<std::uint64_t>(x);
       }},
      {"run.output_dir", [](ExperimentConfig& c, const std::string& v) { c.output_dir = v; }},
      {"run.baseline_dir", [](ExperimentConfig& c, const std::string& v) { c.baseline_dir = v; }},
  };
  return table;
}

inline const std::vector<std::string>& required_keys() {
  static const std::vector<std::string> keys = {"population.num_clients", "population.latent_cohorts",
                                                "engine.max_rounds", "run.seed"};
  return keys;
}

}  // namespace detail

/// Keys accepted by `sweep --param`.
inline const std::vector<std::string>& sweepable_keys() {
  static const std::vector<std::string> keys = {
      "clustering.max_tree_depth",     "clustering.K",
      "clustering.partition_earliest", "clustering.partition_latest",
      "clustering.clustering_start",   "clustering.epsilon",
      "clustering.alpha",              "faults.corrupted_fraction",
      "faults.client_affinity_loss_rate", "ldp.noise_scale",
      "run.seed"};
  return keys;
}

inline bool is_config_key(const std::string& key) { return detail::setters().count(key) > 0; }

/// Raw "section.key" assignments with the line each came from.
struct ConfigSource {
  std::map<std::string, std::string> values;
  std::map<std::string, int> lines;
  std::string origin = "<config>";
};

inline ConfigSource parse_config_text(const std::string& text, const std::string& origin = "<config>") {
  ConfigSource src;
  src.origin = origin;
  std::istringstream in(text);
  std::string raw, section;
  int lineno = 0;
  auto fail = [&](const std::string& msg) {
    throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + msg);
  };
  while (std::getline(in, raw)) {
    ++lineno;
    std::string line = raw;
    if (auto p = line.find('#'); p != std::string::npos) line.resize(p);
    line = detail::trim(line);
    if (line.empty() || line.front() == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail("unterminated section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      if (section.empty()) fail("empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty()) fail("missing key before '='");
    if (section.empty()) fail("key '" + key + "' appears before any [section]");
    const std::string full = section + "." + key;
    if (!is_config_key(full)) fail("unknown key '" + full + "'");
    if (src.values.count(full)) fail("duplicate key '" + full + "'");
    src.values[full] = value;
    src.lines[full] = lineno;
  }
  return src;
}

inline ConfigSource read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open config file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path);
}

/// Sets (or replaces) one assignment; used by sweeps and --seed.
inline void set_override(ConfigSource& src, const std::string& key, const std::string& value) {
  if (!is_config_key(key)) throw ConfigError("unknown key '" + key + "'");
  src.values[key] = value;
  src.lines.erase(key);
}

inline ExperimentConfig build_config(const ConfigSource& src) {
  ExperimentConfig c;
  for (const auto& key : detail::required_keys())
    if (!src.values.count(key)) throw ConfigError(src.origin + ": missing required field '" + key + "'");
  for (const auto& [key, value] : src.values) {
    try {
      detail::setters().at(key)(c, value);
    } catch (const ConfigError& e) {
      auto l = src.lines.find(key);
      const std::string where =
          l != src.lines.end() ? src.origin + ":" + std::to_string(l->second) : src.origin + " (override)";
      throw ConfigError(where + ": " + key + ": " + e.what());
    }
  }
  // Cohort weights default to uniform over the latent cohorts.
  if (!src.values.count("population.cohort_weights"))
    c.latent.cohort_weights.assign(static_cast<std::size_t>(c.latent.num_latent_cohorts),
                                   1.0 / c.latent.num_latent_cohorts);
  auto fail = [&](const std::string& key, const std::string& msg) {
    auto l = src.lines.find(key);
    const std::string where = l != src.lines.end() ? src.origin + ":" + std::to_string(l->second) : src.origin;
    throw ConfigError(where + ": " + key + ": " + msg);
  };
  try {
    validate(c.latent);
  } catch (const ConfigError& e) {
    fail("population.cohort_weights", e.what());
  }
  if (c.num_clients < c.latent.num_latent_cohorts) fail("population.num_clients", "must be >= latent_cohorts");
  if (c.population.max_samples < c.population.min_samples)
    fail("population.max_samples", "must be >= population.min_samples");
  if (c.partition_earliest >= c.partition_latest)
    fail("clustering.partition_latest", "must be greater than clustering.partition_earliest");
  if (c.ldp.enabled && c.ldp.clip_norm <= 0.0) fail("ldp.clip_norm", "must be > 0");
  if (c.faults.coordinator_crash && !src.values.count("faults.coordinator_crash_duration"))
    fail("faults.coordinator_crash_start", "requires faults.coordinator_crash_duration");
  c.assignments = src.values;
  return c;
}

inline ExperimentConfig load_config(const std::string& path) { return build_config(read_config_file(path)); }

/// Canonical text form of a config; parsing it back yields the same config.
inline std::string render_config(const ExperimentConfig& c) {
  std::map<std::string, std::vector<std::pair<std::string, std::string>>> by_section;
  for (const auto& [key, value] : c.assignments) {
    const auto dot = key.find('.');
    by_section[key.substr(0, dot)].emplace_back(key.substr(dot + 1), value);
  }
  std::ostringstream out;
  bool first = true;
  for (const auto& [section, kvs] : by_section) {
    if (!first) out << "\n";
    first = false;
    out << "[" << section << "]\n";
    for (const auto& [k, v] : kvs) out << k << " = " << v << "\n";
  }
  return out.str();
}

inline int fraction_to_round(double f, int max_rounds) {
  return static_cast<int>(std::llround(f * max_rounds));
}

/// Materializes the experiment: population, corruption, derived rounds.
inline ExperimentSpec make_spec(const ExperimentConfig& c) {
  ExperimentSpec s;
  s.population = generate_population(c.latent, c.num_clients, c.num_classes, c.feature_dim,
                                     derive_seed(c.seed, "population"), c.population);
  if (c.faults.corrupted_fraction > 0.0)
    s.corrupted = corrupt_clients(s.population, c.faults.corrupted_fraction, derive_seed(c.seed, "faults.corrupt"));
  s.model = ModelSpec{c.model_kind, c.feature_dim, c.num_classes, c.hidden_units};
  s.engine = c.engine;
  s.clustering.K = c.K;
  s.clustering.epsilon = c.epsilon;
  s.clustering.gamma = c.gamma;
  s.clustering.partition = c.partition;
  const int R = c.engine.max_rounds;
  s.clustering.partition.clustering_start_round = fraction_to_round(c.clustering_start, R);
  s.clustering.partition.earliest_round = fraction_to_round(c.partition_earliest, R);
  s.clustering.partition.latest_round = fraction_to_round(c.partition_latest, R);
  s.ldp = c.ldp;
  s.faults = c.faults;
  s.detection = c.detection;
  s.seed = c.seed;
  return s;
}

}  // namespace cohortfl
