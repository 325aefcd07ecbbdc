#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "cohortfl/config.hpp"
#include "cohortfl/engine.hpp"
#include "cohortfl/error.hpp"
#include "cohortfl/metrics.hpp"

namespace cohortfl {

/// Floats are written with 9 significant digits everywhere.
inline std::string fmt9(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return buf;
}

inline std::string fmt9(const std::optional<double>& x) { return x ? fmt9(*x) : std::string{}; }

namespace detail {

// Quotes a CSV field when it contains a separator, quote or newline.
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

inline void write_rounds_csv(std::ostream& os, const ExperimentResult& r) {
  os << "cohort_id,round,sim_start,sim_end,num_participants,participants,mean_loss,test_accuracy,"
        "global_accuracy,reduction,partition_event\n";
  for (const auto& rep : r.rounds) {
    std::string ids;
    for (std::size_t i = 0; i < rep.participants.size(); ++i) {
      if (i) ids += ' ';
      ids += std::to_string(rep.participants[i]);
    }
    os << rep.cohort_id.str() << ',' << rep.round << ',' << fmt9(rep.sim_start) << ',' << fmt9(rep.sim_end) << ','
       << rep.participants.size() << ',' << ids << ',' << fmt9(rep.mean_loss) << ',' << fmt9(rep.test_accuracy)
       << ',' << fmt9(rep.global_accuracy) << ',' << fmt9(rep.reduction) << ','
       << detail::csv_field(rep.partition_event.value_or("")) << '\n';
  }
}

inline void write_clients_csv(std::ostream& os, const ExperimentResult& r) {
  os << "client_id,latent_cohort,assigned_leaf,participations,corrupted,blacklisted,final_accuracy\n";
  for (const auto& c : r.clients)
    os << c.client_id << ',' << c.latent_cohort << ',' << c.assigned_leaf.str() << ',' << c.participations << ','
       << (c.corrupted ? 1 : 0) << ',' << (c.blacklisted ? 1 : 0) << ',' << fmt9(c.accuracy) << '\n';
}

inline void write_events_csv(std::ostream& os, const ExperimentResult& r) {
  os << "time,kind,cohort_id,round,detail\n";
  for (const auto& e : r.events)
    os << fmt9(e.time) << ',' << e.kind << ',' << e.cohort.str() << ',' << e.round << ','
       << detail::csv_field(e.detail) << '\n';
}

// --- reading run directories ----------------------------------------------

struct RunData {
  std::vector<std::pair<double, double>> curve;  // (sim_end, global_accuracy) in completion order
  std::vector<double> honest_accuracy;           // final per-client accuracy, corrupted excluded
  bool has_clients = false;
};

inline RunData read_run_dir(const std::filesystem::path& dir) {
  RunData d;
  const auto rounds = dir / "rounds.csv";
  std::ifstream in(rounds);
  if (!in) throw ConfigError(rounds.string() + ": cannot open");
  std::string line;
  if (!std::getline(in, line)) throw ConfigError(rounds.string() + ": empty file");
  const auto header = detail::csv_split(line);
  int t_col = -1, a_col = -1;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "sim_end") t_col = static_cast<int>(i);
    if (header[i] == "global_accuracy") a_col = static_cast<int>(i);
  }
  if (t_col < 0 || a_col < 0) throw ConfigError(rounds.string() + ": missing sim_end or global_accuracy column");
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = detail::csv_split(line);
    if (static_cast<int>(f.size()) <= std::max(t_col, a_col))
      throw ConfigError(rounds.string() + ":" + std::to_string(lineno) + ": short row");
    if (f[static_cast<std::size_t>(a_col)].empty()) continue;
    try {
      d.curve.emplace_back(detail::parse_double(f[static_cast<std::size_t>(t_col)]),
                           detail::parse_double(f[static_cast<std::size_t>(a_col)]));
    } catch (const ConfigError& e) {
      throw ConfigError(rounds.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }

  std::ifstream cin(dir / "clients.csv");
  if (cin && std::getline(cin, line)) {
    d.has_clients = true;
    const auto h = detail::csv_split(line);
    int acc = -1, bad = -1;
    for (std::size_t i = 0; i < h.size(); ++i) {
      if (h[i] == "final_accuracy") acc = static_cast<int>(i);
      if (h[i] == "corrupted") bad = static_cast<int>(i);
    }
    while (acc >= 0 && std::getline(cin, line)) {
      const auto f = detail::csv_split(line);
      if (static_cast<int>(f.size()) <= acc) continue;
      if (bad >= 0 && f[static_cast<std::size_t>(bad)] == "1") continue;
      d.honest_accuracy.push_back(detail::parse_double(f[static_cast<std::size_t>(acc)]));
    }
  }
  return d;
}

inline double best_accuracy(const RunData& d) {
  double b = 0.0;
  for (const auto& [t, a] : d.curve) b = std::max(b, a);
  return b;
}

inline double last_accuracy(const RunData& d) { return d.curve.empty() ? 0.0 : d.curve.back().second; }

struct Comparison {
  double target = 0.0;
  std::optional<double> time_a, time_b;
  std::optional<double> speedup;  // time_a / time_b
  double final_accuracy_delta = 0.0;  // b - a
  std::optional<double> variance_delta;  // b - a
};

inline Comparison compare_runs(const RunData& a, const RunData& b, double target) {
  Comparison c;
  c.target = target;
  c.time_a = time_to_accuracy(a.curve, target);
  c.time_b = time_to_accuracy(b.curve, target);
  if (c.time_a && c.time_b && *c.time_b > 0.0) c.speedup = *c.time_a / *c.time_b;
  c.final_accuracy_delta = last_accuracy(b) - last_accuracy(a);
  if (a.has_clients && b.has_clients && !a.honest_accuracy.empty() && !b.honest_accuracy.empty())
    c.variance_delta = population_variance(b.honest_accuracy) - population_variance(a.honest_accuracy);
  return c;
}

inline std::string na(const std::optional<double>& x) { return x ? fmt9(*x) : "NA"; }

inline void write_comparison(std::ostream& os, const Comparison& c) {
  os << "target_accuracy = " << fmt9(c.target) << '\n'
     << "time_a = " << na(c.time_a) << '\n'
     << "time_b = " << na(c.time_b) << '\n'
     << "speedup_b_over_a = " << na(c.speedup) << '\n'
     << "final_accuracy_delta = " << fmt9(c.final_accuracy_delta) << '\n'
     << "variance_delta = " << na(c.variance_delta) << '\n';
  if (!c.time_a || !c.time_b) os << "target_reached = " << (c.time_a ? "b_never" : c.time_b ? "a_never" : "neither") << '\n';
}

// --- run summary -------------------------------------------------------------

struct RunSummary {
  double final_accuracy = 0.0;
  std::optional<double> time_to_target;
  double end_time = 0.0;
  int partitions = 0;
  std::size_t final_leaves = 1;
  double ari = 0.0;
  double j_single = 0.0;
  double j_leaves = 0.0;
  BiasStats bias;
  std::size_t blacklisted = 0;
  std::optional<double> baseline_target;
  std::optional<double> speedup;
};

inline RunSummary summarize(const ExperimentSpec& spec, const ExperimentResult& r) {
  RunSummary s;
  s.final_accuracy = r.final_accuracy;
  if (spec.engine.target_accuracy > 0.0) s.time_to_target = time_to_accuracy(r.accuracy_curve, spec.engine.target_accuracy);
  s.end_time = r.end_time;
  s.partitions = r.partitions;
  s.final_leaves = r.final_leaves;
  s.ari = recovery_ari(r);
  std::tie(s.j_single, s.j_leaves) = heterogeneity_before_after(spec.population, r);
  s.bias = client_bias(r);
  s.blacklisted = r.blacklisted.size();
  return s;
}

/// Speedup over a recorded baseline run: the target is the configured
/// target accuracy, or the baseline's best accuracy when none is set.
inline void add_baseline(RunSummary& s, const ExperimentSpec& spec, const ExperimentResult& r, const RunData& base) {
  const double target = spec.engine.target_accuracy > 0.0 ? spec.engine.target_accuracy : best_accuracy(base);
  s.baseline_target = target;
  const auto tb = time_to_accuracy(base.curve, target);
  const auto tc = time_to_accuracy(r.accuracy_curve, target);
  if (tb && tc && *tc > 0.0) s.speedup = *tb / *tc;
}

inline void write_summary(std::ostream& os, const RunSummary& s, std::uint64_t seed) {
  os << "seed = " << seed << '\n'
     << "final_accuracy = " << fmt9(s.final_accuracy) << '\n'
     << "time_to_target = " << na(s.time_to_target) << '\n'
     << "end_time = " << fmt9(s.end_time) << '\n'
     << "partitions = " << s.partitions << '\n'
     << "final_leaves = " << s.final_leaves << '\n'
     << "recovery_ari = " << fmt9(s.ari) << '\n'
     << "J_single = " << fmt9(s.j_single) << '\n'
     << "J_leaves = " << fmt9(s.j_leaves) << '\n'
     << "accuracy_variance = " << fmt9(s.bias.variance) << '\n'
     << "worst10_mean = " << fmt9(s.bias.worst10_mean) << '\n'
     << "best10_mean = " << fmt9(s.bias.best10_mean) << '\n'
     << "blacklisted = " << s.blacklisted << '\n';
  if (s.baseline_target)
    os << "baseline_target = " << fmt9(*s.baseline_target) << '\n' << "speedup = " << na(s.speedup) << '\n';
}

/// Writes config.ini, rounds.csv, clients.csv, events.csv and summary.txt.
inline void write_run_dir(const std::filesystem::path& dir, const ExperimentConfig& cfg, const RunSummary& s,
                          const ExperimentResult& r) {
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream f(dir / name, std::ios::binary);
    if (!f) throw RuntimeFailure((dir / name).string() + ": cannot write");
    return f;
  };
  {
    auto f = open("config.ini");
    f << render_config(cfg);
  }
  {
    auto f = open("rounds.csv");
    write_rounds_csv(f, r);
  }
  {
    auto f = open("clients.csv");
    write_clients_csv(f, r);
  }
  {
    auto f = open("events.csv");
    write_events_csv(f, r);
  }
  {
    auto f = open("summary.txt");
    write_summary(f, s, cfg.seed);
  }
}

}  // namespace cohortfl
