// cohortfl: run, compare and sweep simulated cohort-training experiments.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "cohortfl/config.hpp"
#include "cohortfl/engine.hpp"
#include "cohortfl/report.hpp"

namespace fs = std::filesystem;
using namespace cohortfl;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kRuntimeFailure = 3;

struct Outcome {
  RunSummary summary;
  fs::path dir;
};

Outcome run_one(ConfigSource src, const std::optional<std::string>& out_override) {
  if (out_override) set_override(src, "run.output_dir", *out_override);
  const ExperimentConfig cfg = build_config(src);
  ExperimentSpec spec = make_spec(cfg);
  std::optional<RunData> baseline;
  if (!cfg.baseline_dir.empty()) baseline = read_run_dir(cfg.baseline_dir);
  ExperimentResult r = run_experiment(spec);
  RunSummary s = summarize(spec, r);
  if (baseline) add_baseline(s, spec, r, *baseline);
  write_run_dir(cfg.output_dir, cfg, s, r);
  return {s, cfg.output_dir};
}

int cmd_run(const std::string& path, const std::optional<std::string>& out, const std::optional<std::uint64_t>& seed) {
  ConfigSource src = read_config_file(path);
  if (seed) set_override(src, "run.seed", std::to_string(*seed));
  const Outcome o = run_one(src, out);
  write_summary(std::cout, o.summary, build_config(src).seed);
  std::cout << "output = " << o.dir.string() << '\n';
  return kOk;
}

int cmd_compare(const std::string& a, const std::string& b, double target) {
  const Comparison c = compare_runs(read_run_dir(a), read_run_dir(b), target);
  write_comparison(std::cout, c);
  return kOk;
}

int cmd_sweep(const std::string& path, const std::string& param, const std::vector<std::string>& values,
              const std::optional<std::string>& out, const std::optional<std::uint64_t>& seed) {
  const auto& keys = sweepable_keys();
  if (std::find(keys.begin(), keys.end(), param) == keys.end()) {
    std::string list;
    for (const auto& k : keys) list += (list.empty() ? "" : ", ") + k;
    throw ConfigError("'" + param + "' is not sweepable (one of: " + list + ")");
  }
  if (values.empty()) throw ConfigError("--values must list at least one value");
  ConfigSource base = read_config_file(path);
  if (seed) set_override(base, "run.seed", std::to_string(*seed));
  const fs::path root = out ? fs::path(*out) : fs::path(build_config(base).output_dir);

  // Validate every child config before running any of them.
  std::vector<ConfigSource> children;
  for (const auto& v : values) {
    ConfigSource child = base;
    set_override(child, param, v);
    build_config(child);
    children.push_back(std::move(child));
  }

  fs::create_directories(root);
  std::ofstream csv(root / "sweep.csv", std::ios::binary);
  if (!csv) throw RuntimeFailure((root / "sweep.csv").string() + ": cannot write");
  csv << "run,param,value,final_accuracy,time_to_target,partitions,final_leaves,recovery_ari,J_single,J_leaves,"
         "accuracy_variance,blacklisted\n";
  for (std::size_t i = 0; i < children.size(); ++i) {
    const std::string name = "run_" + std::to_string(i);
    const Outcome o = run_one(children[i], (root / name).string());
    const RunSummary& s = o.summary;
    csv << name << ',' << param << ',' << detail::csv_field(values[i]) << ',' << fmt9(s.final_accuracy) << ','
        << na(s.time_to_target) << ',' << s.partitions << ',' << s.final_leaves << ',' << fmt9(s.ari) << ','
        << fmt9(s.j_single) << ',' << fmt9(s.j_leaves) << ',' << fmt9(s.bias.variance) << ',' << s.blacklisted
        << '\n';
    std::cout << name << ": " << param << " = " << values[i] << ", final_accuracy = " << fmt9(s.final_accuracy)
              << '\n';
  }
  std::cout << "output = " << root.string() << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Simulate cohort-based federated training on synthetic populations."};
  app.require_subcommand(1);

  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  app.add_option("--out", out, "Output directory (overrides run.output_dir)");
  app.add_option("--seed", seed, "Master seed (overrides run.seed)");

  std::string config;
  auto* run = app.add_subcommand("run", "Run one experiment");
  run->add_option("config", config, "Experiment config file")->required();

  std::string dir_a, dir_b;
  double target = 0.0;
  auto* compare = app.add_subcommand("compare", "Compare two run directories (speedup of B over A)");
  compare->add_option("a", dir_a, "Reference run directory")->required();
  compare->add_option("b", dir_b, "Candidate run directory")->required();
  compare->add_option("--target", target, "Target accuracy")->required()->check(CLI::Range(0.0, 1.0));

  std::string param;
  std::vector<std::string> values;
  std::string values_csv;
  auto* sweep = app.add_subcommand("sweep", "Run one experiment per value of a parameter");
  sweep->add_option("config", config, "Experiment config file")->required();
  sweep->add_option("--param", param, "Config key to vary, e.g. clustering.max_tree_depth")->required();
  sweep->add_option("--values", values_csv, "Comma-separated values")->required();

  for (auto* sub : {run, compare, sweep}) {
    sub->add_option("--out", out, "Output directory (overrides run.output_dir)");
    sub->add_option("--seed", seed, "Master seed (overrides run.seed)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*run) return cmd_run(config, out, seed);
    if (*compare) return cmd_compare(dir_a, dir_b, target);
    if (*sweep) {
      for (auto& v : detail::split(values_csv, ','))
        if (!v.empty()) values.push_back(v);
      return cmd_sweep(config, param, values, out, seed);
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfigError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntimeFailure;
  }
  return kOk;
}
