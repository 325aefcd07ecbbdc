#include <gtest/gtest.h>

#include "cohortfl/config.hpp"

using namespace cohortfl;

namespace {

const char* kMinimal = R"(# minimal run
[population]
num_clients = 50
latent_cohorts = 2   # two groups

[engine]
max_rounds = 40

[run]
seed = 3
)";

std::string error_of(const std::string& text) {
  try {
    build_config(parse_config_text(text, "t.ini"));
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(ConfigParse, ValuesAndLines) {
  auto src = parse_config_text(kMinimal, "m.ini");
  EXPECT_EQ(src.origin, "m.ini");
  EXPECT_EQ(src.values.at("population.num_clients"), "50");
  EXPECT_EQ(src.values.at("population.latent_cohorts"), "2");
  EXPECT_EQ(src.lines.at("population.latent_cohorts"), 4);
  EXPECT_EQ(src.lines.at("run.seed"), 10);
  EXPECT_EQ(src.values.size(), 4u);
}

TEST(ConfigParse, CommentsAndListValues) {
  auto src = parse_config_text("; leading comment\n[faults]\n  cohort_crashes = 5@0; 7.5@0.1  # two\n", "x");
  EXPECT_EQ(src.values.at("faults.cohort_crashes"), "5@0; 7.5@0.1");
}

TEST(ConfigParse, ErrorsCarryLine) {
  auto msg = [](const std::string& text) {
    try {
      parse_config_text(text, "f.ini");
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  EXPECT_EQ(msg("[engine]\nmax_rounds = 3\nbogus = 1\n"), "f.ini:3: unknown key 'engine.bogus'");
  EXPECT_EQ(msg("[engine]\nmax_rounds = 3\nmax_rounds = 4\n"), "f.ini:3: duplicate key 'engine.max_rounds'");
  EXPECT_EQ(msg("max_rounds = 3\n"), "f.ini:1: key 'max_rounds' appears before any [section]");
  EXPECT_EQ(msg("[engine\n"), "f.ini:1: unterminated section header");
  EXPECT_EQ(msg("[]\n"), "f.ini:1: empty section name");
  EXPECT_EQ(msg("[engine]\n\nmax_rounds\n"), "f.ini:3: expected 'key = value'");
  EXPECT_EQ(msg("[engine]\n = 4\n"), "f.ini:2: missing key before '='");
}

TEST(ConfigBuild, Minimal) {
  auto c = build_config(parse_config_text(kMinimal));
  EXPECT_EQ(c.num_clients, 50);
  EXPECT_EQ(c.latent.num_latent_cohorts, 2);
  EXPECT_EQ(c.latent.cohort_weights, (std::vector<double>{0.5, 0.5}));
  EXPECT_EQ(c.engine.max_rounds, 40);
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.assignments.size(), 4u);
}

TEST(ConfigBuild, MissingRequiredField) {
  EXPECT_EQ(error_of("[population]\nnum_clients = 5\nlatent_cohorts = 1\n[run]\nseed = 1\n"),
            "t.ini: missing required field 'engine.max_rounds'");
}

TEST(ConfigBuild, ValueErrorsNameKeyAndLine) {
  std::string base = kMinimal;
  EXPECT_EQ(error_of(base + "[model]\ntype = cnn\n"), "t.ini:12: model.type: expected logistic or mlp, got 'cnn'");
  EXPECT_EQ(error_of(base + "[ldp]\nenabled = maybe\n"), "t.ini:12: ldp.enabled: expected true or false, got 'maybe'");
  EXPECT_EQ(error_of(base + "[clustering]\nK = 1\n"), "t.ini:12: clustering.K: value 1 out of range [2, 1024]");
  EXPECT_NE(error_of(base + "[engine2]\nlr = x\n"), "");
  EXPECT_NE(error_of(base + "[faults]\ncohort_crashes = 5@1\n").find("bad cohort id"), std::string::npos);
  EXPECT_NE(error_of(base + "[faults]\ncohort_crashes = 5\n").find("expected time@cohort"), std::string::npos);
  EXPECT_NE(error_of(base + "[faults]\ncorrupted_fraction = 0.5\n").find("faults.corrupted_fraction"),
            std::string::npos);
}

TEST(ConfigBuild, CrossFieldChecks) {
  std::string base = kMinimal;
  EXPECT_EQ(error_of(base + "[clustering]\npartition_earliest = 0.5\npartition_latest = 0.5\n"),
            "t.ini:13: clustering.partition_latest: must be greater than clustering.partition_earliest");
  EXPECT_NE(error_of(base + "[faults]\ncoordinator_crash_start = 10\n").find("requires faults.coordinator_crash_duration"),
            std::string::npos);
  EXPECT_NE(error_of("[population]\nnum_clients = 1\nlatent_cohorts = 2\n[engine]\nmax_rounds = 1\n[run]\nseed = 1\n")
                .find("must be >= latent_cohorts"),
            std::string::npos);
  EXPECT_NE(error_of(base + "[population]\nnum_clients = 9\n").find("duplicate"), std::string::npos);
}

TEST(ConfigBuild, FaultsAndCrashList) {
  std::string text = std::string(kMinimal) +
                     "[faults]\ncohort_crashes = 5@0; 7.5@0.1\ncoordinator_crash_start = 10\n"
                     "coordinator_crash_duration = 4\n";
  auto c = build_config(parse_config_text(text));
  ASSERT_EQ(c.faults.cohort_crashes.size(), 2u);
  EXPECT_EQ(c.faults.cohort_crashes[1].time, 7.5);
  EXPECT_EQ(c.faults.cohort_crashes[1].cohort, CohortId::parse("0.1"));
  ASSERT_TRUE(c.faults.coordinator_crash);
  EXPECT_EQ(*c.faults.coordinator_crash, (std::pair<double, double>{10.0, 4.0}));
}

TEST(ConfigBuild, RenderRoundTrip) {
  std::string text = std::string(kMinimal) + "[clustering]\nK = 4\nepsilon = 0.85\n[faults]\ncohort_crashes = 5@0; 7@0.1\n";
  auto c = build_config(parse_config_text(text));
  const auto rendered = render_config(c);
  auto again = build_config(parse_config_text(rendered));
  EXPECT_EQ(again.assignments, c.assignments);
  EXPECT_EQ(render_config(again), rendered);
  EXPECT_EQ(rendered.rfind("[clustering]\nK = 4\nepsilon = 0.85\n", 0), 0u);
}

TEST(ConfigBuild, Overrides) {
  auto src = parse_config_text(kMinimal, "m.ini");
  set_override(src, "run.seed", "11");
  set_override(src, "clustering.max_tree_depth", "0");
  auto c = build_config(src);
  EXPECT_EQ(c.seed, 11u);
  EXPECT_EQ(c.partition.max_tree_depth, 0);
  EXPECT_THROW(set_override(src, "nope.key", "1"), ConfigError);
  set_override(src, "clustering.K", "0");
  try {
    build_config(src);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(std::string(e.what()).rfind("m.ini (override): clustering.K:", 0), 0u);
  }
}

TEST(ConfigBuild, SweepableKeysAreConfigKeys) {
  for (const auto& k : sweepable_keys()) EXPECT_TRUE(is_config_key(k)) << k;
}

TEST(MakeSpec, DerivedRoundsAndPopulation) {
  std::string text = std::string(kMinimal) +
                     "[clustering]\nclustering_start = 0.1\npartition_earliest = 0.25\npartition_latest = 0.9\n"
                     "[faults]\ncorrupted_fraction = 0.1\n";
  auto c = build_config(parse_config_text(text));
  auto s = make_spec(c);
  EXPECT_EQ(s.clustering.partition.clustering_start_round, 4);
  EXPECT_EQ(s.clustering.partition.earliest_round, 10);
  EXPECT_EQ(s.clustering.partition.latest_round, 36);
  EXPECT_EQ(s.population.clients.size(), 50u);
  EXPECT_EQ(s.corrupted.size(), 5u);
  EXPECT_EQ(s.seed, 3u);
  auto s2 = make_spec(c);
  EXPECT_EQ(s2.corrupted, s.corrupted);
  EXPECT_EQ(s2.population.clients[7].labels, s.population.clients[7].labels);
}

TEST(ConfigFile, MissingFile) {
  EXPECT_THROW(read_config_file("/nonexistent/x.ini"), ConfigError);
}
