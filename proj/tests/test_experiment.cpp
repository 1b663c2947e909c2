#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "prefixsim/prefixsim.hpp"

using namespace prefixsim;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("prefixsim_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Small catalog and short traces so the sweep runs in well under a second.
ExperimentSpec tiny_spec(const fs::path& out) {
  ExperimentSpec s;
  s.catalog = {60, 16, 6, 4, 0, std::nullopt};
  s.workload.num_requests = 120;
  s.workload.k = 3;
  s.workload.suffix_tokens = 8;
  s.sim.prefill_rate = 8000;
  s.sim.cache.capacity_tokens = 1500;
  s.policies = {EvictionPolicy::DART};
  s.qps = {40};
  s.seeds = {1};
  s.output_dir = out.string();
  return s;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(PREFIXSIM_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Experiment, OneRunGivesOneRow) {
  const auto dir = scratch("one");
  const auto r = run_experiment(tiny_spec(dir));
  ASSERT_EQ(r.rows.size(), 1u);
  EXPECT_TRUE(r.failures.empty());
  EXPECT_EQ(read_runs_csv(dir / "runs.csv").size(), 1u);
  EXPECT_TRUE(fs::exists(dir / "spec.json"));
  EXPECT_TRUE(fs::exists(dir / "summary.txt"));
  EXPECT_TRUE(fs::exists(dir / "requests" / "DART_qps40_c2_s1.jsonl"));
}

TEST(Experiment, CardinalityFourPoliciesThreeLoads) {
  const auto dir = scratch("card");
  ExperimentSpec s = tiny_spec(dir);
  s.policies = {EvictionPolicy::DART, EvictionPolicy::LRU, EvictionPolicy::LRU_ACTIVE, EvictionPolicy::LFU};
  s.qps = {20, 40, 60};
  s.jobs = 3;
  const auto r = run_experiment(s);
  EXPECT_EQ(r.rows.size(), 12u);
  const std::string summary = slurp(dir / "summary.txt");
  for (const char* p : {"DART", "LRU", "LRU_ACTIVE", "LFU"})
    EXPECT_NE(summary.find(std::string("policy ") + p + " "), std::string::npos) << p;
  for (const char* p : {"DART", "LRU", "LRU_ACTIVE", "LFU"})
    EXPECT_TRUE(fs::exists(dir / (std::string("knee_") + p + "_c2.txt")));
}

TEST(Experiment, RerunAndParallelismGiveIdenticalFiles) {
  const auto a = scratch("det_a"), b = scratch("det_b");
  ExperimentSpec s = tiny_spec(a);
  s.policies = {EvictionPolicy::DART, EvictionPolicy::LRU};
  s.seeds = {1, 2};
  s.jobs = 1;
  run_experiment(s);
  s.output_dir = b.string();
  s.jobs = 4;
  run_experiment(s);
  for (const char* f : {"runs.csv", "summary.txt"}) EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  for (const auto& e : fs::directory_iterator(a / "requests"))
    EXPECT_EQ(slurp(e.path()), slurp(b / "requests" / e.path().filename())) << e.path();
}

TEST(Experiment, SpecJsonRoundTripsThroughEcho) {
  const auto dir = scratch("echo");
  ExperimentSpec s = tiny_spec(dir);
  s.cold_quotas = {0, 2};
  s.capacity_fraction = 0.25;
  run_experiment(s);
  std::ifstream in(dir / "spec.json");
  const ExperimentSpec back = spec_from_json(nlohmann::json::parse(in));
  EXPECT_EQ(spec_to_json(back), spec_to_json(s));
}

TEST(Experiment, CapacityFractionScalesWithWorkingSet) {
  ExperimentSpec s = tiny_spec(scratch("frac"));
  s.capacity_fraction = 0.5;
  const Trace t = trace_for(s, 40, 1);
  const SimConfig c = sim_config_for(s, t, EvictionPolicy::LRU, 2);
  EXPECT_EQ(c.cache.capacity_tokens, static_cast<std::size_t>(std::llround(0.5 * working_set_tokens(t))));
}

TEST(Experiment, WorkingSetMatchesTrieOfPaths) {
  const SegmentCatalog cat{5, 2, {}, 1};
  Trace t{cat, {}, std::nullopt};
  t.requests.push_back(make_request(0, 0, {1, 2}, 1, true, cat));
  t.requests.push_back(make_request(1, 0, {1, 3}, 1, true, cat));
  t.requests.push_back(make_request(2, 0, {4}, 0, true, cat));
  // sys(1) + [1](2) + [2]+sfx(3) + [3]+sfx(3) + [4](2)
  EXPECT_EQ(working_set_tokens(t), 11u);
}

TEST(Experiment, InvalidSpecsAreRejected) {
  ExperimentSpec s = tiny_spec(scratch("bad"));
  s.policies.clear();
  EXPECT_THROW(run_experiment(s), ConfigError);
  s = tiny_spec(scratch("bad"));
  s.seeds.clear();
  EXPECT_THROW(run_experiment(s), ConfigError);
  s = tiny_spec(scratch("bad"));
  s.cold_quotas = {100};
  EXPECT_THROW(run_experiment(s), ConfigError);
  EXPECT_THROW(spec_from_json(nlohmann::json::parse(R"({"policies":["NOPE"]})")), ConfigError);
}

TEST(Experiment, OversizedRequestsFailPerRunAndSweepContinues) {
  const auto dir = scratch("partial");
  ExperimentSpec s = tiny_spec(dir);
  s.capacity_fraction = 0.0001;  // smaller than one request
  s.policies = {EvictionPolicy::DART, EvictionPolicy::LRU};
  const auto r = run_experiment(s);
  EXPECT_TRUE(r.rows.empty());
  EXPECT_EQ(r.failures.size(), 2u);
  EXPECT_TRUE(fs::exists(dir / "failures.csv"));
}

TEST(Compare, IdenticalInputsGiveZeroDeltas) {
  const auto r = run_experiment(tiny_spec(scratch("cmp")));
  for (const DeltaRow& d : compare(r.rows, r.rows)) {
    EXPECT_EQ(d.p99_change_pct, 0.0);
    EXPECT_EQ(d.hit_gap_pp, 0.0);
  }
}

TEST(Compare, DoubledBaselineP99IsMinusFifty) {
  RunRow a;
  a.key = {"DART", 40, 2, 1};
  a.metrics.p99 = 1.5;
  a.metrics.hit_rate = 0.40;
  RunRow b = a;
  b.key.policy = "LRU";
  b.metrics.p99 = 3.0;
  b.metrics.hit_rate = 0.30;
  const auto d = compare({a}, {b});
  ASSERT_EQ(d.size(), 1u);
  EXPECT_DOUBLE_EQ(d[0].p99_change_pct, -50.0);
  EXPECT_NEAR(d[0].hit_gap_pp, 10.0, 1e-12);
}

TEST(Compare, AveragesOverSeedsPerLoad) {
  std::vector<RunRow> a, b;
  for (std::uint64_t seed : {1, 2}) {
    RunRow x;
    x.key = {"DART", 10, 2, seed};
    x.metrics.p99 = seed == 1 ? 1.0 : 3.0;
    RunRow y = x;
    y.metrics.p99 = 2.0;
    a.push_back(x);
    b.push_back(y);
  }
  const auto d = compare(a, b);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0].seeds, 2u);
  EXPECT_DOUBLE_EQ(d[0].p99_change_pct, 0.0);  // (-50% + 50%) / 2
}

TEST(Compare, KeyMismatchListsUnmatchedKeys) {
  RunRow a;
  a.key = {"DART", 40, 2, 1};
  RunRow b = a;
  b.key.seed = 2;
  try {
    compare({a}, {b});
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("seed=1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("seed=2"), std::string::npos) << msg;
  }
}

TEST(RunsCsv, RoundTripAndSchema) {
  const auto dir = scratch("csv");
  run_experiment(tiny_spec(dir));
  std::ifstream in(dir / "runs.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header.rfind("policy,qps,q_cold,seed,p50,p90,p95,p99,throughput,hit_rate,reuse_hit_rate,mean_wave_size", 0), 0u);
  std::stringstream bad("policy,qps\n");
  EXPECT_THROW(read_runs_csv(bad), ParseError);
  std::stringstream short_row(std::string(kRunsHeader) + "\nDART,1,2\n");
  EXPECT_THROW(read_runs_csv(short_row), ParseError);
}

TEST(Configs, SampleSpecsLoadAndValidate) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(PREFIXSIM_CONFIG_DIR)) {
    if (e.path().extension() != ".json") continue;
    const ExperimentSpec s = load_spec(e.path());
    EXPECT_NO_THROW(s.validate()) << e.path();
    EXPECT_TRUE(s.capacity_fraction.has_value()) << e.path();
    ++n;
  }
  EXPECT_GE(n, 3u);
}

TEST(Golden, TinySpecRunsCsv) {
  const auto dir = scratch("golden");
  ExperimentSpec s = tiny_spec(dir);
  s.policies = {EvictionPolicy::DART, EvictionPolicy::LRU};
  s.write_requests = false;
  run_experiment(s);
  EXPECT_EQ(slurp(dir / "runs.csv"), slurp(fs::path(PREFIXSIM_GOLDEN_DIR) / "tiny_runs.csv"));
}

TEST(Golden, CacheDumpIsStable) {
  const auto a = scratch("dump_a"), b = scratch("dump_b");
  ExperimentSpec s = tiny_spec(a);
  s.write_cache_dump = true;
  s.write_waves = true;
  run_experiment(s);
  s.output_dir = b.string();
  run_experiment(s);
  const auto file = fs::path("cache") / "DART_qps40_c2_s1.txt";
  EXPECT_EQ(slurp(a / file), slurp(b / file));
  EXPECT_EQ(slurp(a / file).rfind("root resident=", 0), 0u);
  const std::string rounds = slurp(a / "waves" / "DART_qps40_c2_s1_rounds.jsonl");
  EXPECT_NE(rounds.find("\"dispatch_priorities\""), std::string::npos);
}

TEST(Cli, SubcommandsAndExitCodes) {
  const auto dir = scratch("cli");
  fs::create_directories(dir);
  const fs::path spec = dir / "spec.json";
  {
    std::ofstream f(spec);
    f << spec_to_json(tiny_spec(dir / "out")).dump(2);
  }
  EXPECT_EQ(run_cli("run --config " + spec.string() + " --policy DART,LRU --qps 20,40,60"), 0);
  EXPECT_EQ(read_runs_csv(dir / "out" / "runs.csv").size(), 6u);
  EXPECT_EQ(run_cli("compare " + (dir / "out").string() + " --policy DART --baseline LRU"), 0);
  EXPECT_EQ(run_cli("knee " + (dir / "out").string()), 0);
  EXPECT_EQ(run_cli("generate --config " + spec.string() + " --out " + (dir / "traces").string() + " --seed 3"), 0);
  const fs::path trace = dir / "traces" / "trace_qps40_s3.jsonl";
  ASSERT_TRUE(fs::exists(trace));
  EXPECT_EQ(run_cli("run --config " + spec.string() + " --trace " + trace.string() + " --out " +
                    (dir / "replay").string()),
            0);
  EXPECT_EQ(run_cli("analyze crossover --mu 50.1 --mbar 33.1"), 0);
  EXPECT_EQ(run_cli("analyze wait --mu 10 --lambda 20"), 1);  // unstable
  EXPECT_EQ(run_cli("run --policy NOPE --out " + (dir / "x").string()), 1);
  EXPECT_EQ(run_cli("compare " + (dir / "out").string() + " --policy DART --baseline LFU"), 1);
  EXPECT_NE(run_cli("frobnicate"), 0);
}
