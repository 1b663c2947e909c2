#pragma once

// Policy x load x cold-quota x seed sweeps: JSON experiment specs, per-run
// result files, merged CSV tables, per-policy summaries, knee reports, and
// pairwise policy comparison.

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <fmt/format.h>
#include <fmt/ostream.h>
#include <nlohmann/json.hpp>

#include "prefixsim/analytics.hpp"
#include "prefixsim/engine.hpp"
#include "prefixsim/errors.hpp"
#include "prefixsim/radix_cache.hpp"
#include "prefixsim/workload.hpp"

namespace prefixsim {

/// How the segment catalog is built: an explicit hot set, or `hot_count` ids drawn with `seed`.
struct CatalogSpec {
  std::size_t num_segments = 981;
  std::size_t chunk_tokens = 128;
  std::size_t hot_count = 20;
  std::size_t sys_prefix_tokens = 28;
  std::uint64_t seed = 0;
  std::optional<std::vector<SegmentId>> hot_set;

  SegmentCatalog build() const {
    if (hot_set) {
      SegmentCatalog c{num_segments, chunk_tokens, *hot_set, sys_prefix_tokens};
      c.validate();
      return c;
    }
    return make_catalog(num_segments, chunk_tokens, hot_count, sys_prefix_tokens, seed);
  }
};

struct ExperimentSpec {
  CatalogSpec catalog;
  WorkloadConfig workload;
  SimConfig sim;
  std::vector<EvictionPolicy> policies{EvictionPolicy::DART};
  std::vector<double> qps{60.0};
  std::vector<std::uint64_t> seeds{1};
  std::vector<std::size_t> cold_quotas;          // empty: use sim.scheduler.cold_quota
  std::optional<double> capacity_fraction;       // of the trace working set; overrides capacity_tokens
  std::optional<std::string> trace_path;         // replay an imported trace instead of generating
  std::string output_dir = "results";
  bool write_requests = true;
  bool write_waves = false;       // per-wave and per-round logs
  bool write_cache_dump = false;  // final tree listing per run
  std::size_t jobs = 1;

  std::vector<std::size_t> effective_cold_quotas() const {
    return cold_quotas.empty() ? std::vector<std::size_t>{sim.scheduler.cold_quota} : cold_quotas;
  }

  void validate() const {
    if (policies.empty()) throw ConfigError("experiment: policy list is empty");
    if (qps.empty()) throw ConfigError("experiment: qps list is empty");
    if (seeds.empty()) throw ConfigError("experiment: seed list is empty");
    if (capacity_fraction && !(*capacity_fraction > 0.0)) throw ConfigError("experiment: capacity_fraction must be positive");
    if (trace_path && qps.size() != 1) throw ConfigError("experiment: an imported trace takes exactly one qps label");
    for (double q : qps)
      if (!(q > 0.0)) throw ConfigError("experiment: qps values must be positive");
    for (std::size_t c : effective_cold_quotas())
      if (c > sim.scheduler.dispatch_budget) throw ConfigError("experiment: cold quota exceeds dispatch budget");
    SimConfig probe = sim;
    probe.validate();
    workload.validate(catalog.build());
  }
};

// --- JSON ------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const CatalogSpec& c) {
  j = {{"num_segments", c.num_segments},
       {"chunk_tokens", c.chunk_tokens},
       {"hot_count", c.hot_count},
       {"sys_prefix_tokens", c.sys_prefix_tokens},
       {"seed", c.seed}};
  if (c.hot_set) j["hot_set"] = *c.hot_set;
}

inline void from_json(const nlohmann::json& j, CatalogSpec& c) {
  c.num_segments = j.value("num_segments", c.num_segments);
  c.chunk_tokens = j.value("chunk_tokens", c.chunk_tokens);
  c.hot_count = j.value("hot_count", c.hot_count);
  c.sys_prefix_tokens = j.value("sys_prefix_tokens", c.sys_prefix_tokens);
  c.seed = j.value("seed", c.seed);
  if (j.contains("hot_set")) c.hot_set = j.at("hot_set").get<std::vector<SegmentId>>();
}

inline void to_json(nlohmann::json& j, const SimConfig& s) {
  const SchedulerConfig& q = s.scheduler;
  j = {{"prefill_rate", s.prefill_rate},
       {"decode_rate", s.decode_rate},
       {"output_tokens", s.output_tokens},
       {"decode_attenuation", s.decode_attenuation},
       {"throughput_window", s.throughput_window},
       {"cache",
        {{"capacity_tokens", s.cache.capacity_tokens},
         {"policy", std::string(to_string(s.cache.policy))},
         {"protect_budget", s.cache.protect_budget}}},
       {"scheduler",
        {{"window", q.window},
         {"dispatch_budget", q.dispatch_budget},
         {"cold_quota", q.cold_quota},
         {"front_width", q.front_width},
         {"signature_size", q.signature_size},
         {"w_g", q.weights.w_g},
         {"w_a", q.weights.w_a},
         {"w_n", q.weights.w_n},
         {"alpha_size", q.alpha_size},
         {"beta_util", q.beta_util}}}};
}

inline void from_json(const nlohmann::json& j, SimConfig& s) {
  s.prefill_rate = j.value("prefill_rate", s.prefill_rate);
  s.decode_rate = j.value("decode_rate", s.decode_rate);
  s.output_tokens = j.value("output_tokens", s.output_tokens);
  s.decode_attenuation = j.value("decode_attenuation", s.decode_attenuation);
  s.throughput_window = j.value("throughput_window", s.throughput_window);
  if (j.contains("cache")) {
    const auto& c = j.at("cache");
    s.cache.capacity_tokens = c.value("capacity_tokens", s.cache.capacity_tokens);
    if (c.contains("policy")) s.cache.policy = parse_policy(c.at("policy").get<std::string>());
    s.cache.protect_budget = c.value("protect_budget", s.cache.protect_budget);
  }
  if (j.contains("scheduler")) {
    const auto& q = j.at("scheduler");
    SchedulerConfig& d = s.scheduler;
    d.window = q.value("window", d.window);
    d.dispatch_budget = q.value("dispatch_budget", d.dispatch_budget);
    d.cold_quota = q.value("cold_quota", d.cold_quota);
    d.front_width = q.value("front_width", d.front_width);
    d.signature_size = q.value("signature_size", d.signature_size);
    d.weights.w_g = q.value("w_g", d.weights.w_g);
    d.weights.w_a = q.value("w_a", d.weights.w_a);
    d.weights.w_n = q.value("w_n", d.weights.w_n);
    d.alpha_size = q.value("alpha_size", d.alpha_size);
    d.beta_util = q.value("beta_util", d.beta_util);
  }
}

inline nlohmann::json spec_to_json(const ExperimentSpec& s) {
  nlohmann::json j;
  j["catalog"] = s.catalog;
  j["workload"] = s.workload;
  j["sim"] = s.sim;
  std::vector<std::string> names;
  for (auto p : s.policies) names.emplace_back(to_string(p));
  j["policies"] = names;
  j["qps"] = s.qps;
  j["seeds"] = s.seeds;
  j["cold_quotas"] = s.effective_cold_quotas();
  if (s.capacity_fraction) j["capacity_fraction"] = *s.capacity_fraction;
  if (s.trace_path) j["trace_path"] = *s.trace_path;
  j["output_dir"] = s.output_dir;
  j["write_requests"] = s.write_requests;
  j["write_waves"] = s.write_waves;
  j["write_cache_dump"] = s.write_cache_dump;
  j["jobs"] = s.jobs;
  return j;
}

inline ExperimentSpec spec_from_json(const nlohmann::json& j) {
  ExperimentSpec s;
  try {
    if (j.contains("catalog")) s.catalog = j.at("catalog").get<CatalogSpec>();
    if (j.contains("workload")) s.workload = j.at("workload").get<WorkloadConfig>();
    if (j.contains("sim")) s.sim = j.at("sim").get<SimConfig>();
    if (j.contains("policies")) {
      s.policies.clear();
      for (const auto& p : j.at("policies")) s.policies.push_back(parse_policy(p.get<std::string>()));
    }
    if (j.contains("qps")) s.qps = j.at("qps").get<std::vector<double>>();
    if (j.contains("seeds")) s.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("cold_quotas")) s.cold_quotas = j.at("cold_quotas").get<std::vector<std::size_t>>();
    if (j.contains("capacity_fraction")) s.capacity_fraction = j.at("capacity_fraction").get<double>();
    if (j.contains("trace_path")) s.trace_path = j.at("trace_path").get<std::string>();
    s.output_dir = j.value("output_dir", s.output_dir);
    s.write_requests = j.value("write_requests", s.write_requests);
    s.write_waves = j.value("write_waves", s.write_waves);
    s.write_cache_dump = j.value("write_cache_dump", s.write_cache_dump);
    s.jobs = j.value("jobs", s.jobs);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("experiment spec: ") + e.what());
  }
  return s;
}

inline ExperimentSpec load_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open spec " + path.string());
  try {
    return spec_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("spec " + path.string() + ": " + e.what());
  }
}

// --- Working set -----------------------------------------------------------

/// Distinct tokens across all serialized request paths (the size of their token trie).
inline std::size_t working_set_tokens(const Trace& trace) {
  std::size_t total = 0;
  std::vector<const std::vector<Token>*> paths;
  for (const Request& r : trace.requests) paths.push_back(&r.token_path);
  std::sort(paths.begin(), paths.end(), [](auto* a, auto* b) { return *a < *b; });
  const std::vector<Token>* prev = nullptr;
  for (const auto* p : paths) {
    std::size_t shared = 0;
    if (prev) {
      const std::size_t n = std::min(prev->size(), p->size());
      while (shared < n && (*prev)[shared] == (*p)[shared]) ++shared;
    }
    total += p->size() - shared;
    prev = p;
  }
  return total;
}

// --- Runs ------------------------------------------------------------------

struct RunKey {
  std::string policy;
  double qps = 0.0;
  std::size_t q_cold = 0;
  std::uint64_t seed = 0;

  auto tie() const { return std::tie(policy, qps, q_cold, seed); }
  bool operator<(const RunKey& o) const { return tie() < o.tie(); }
  bool operator==(const RunKey& o) const { return tie() == o.tie(); }
};

struct RunRow {
  RunKey key;
  RunMetrics metrics;
  std::size_t capacity_tokens = 0;
};

inline const char* kRunsHeader =
    "policy,qps,q_cold,seed,p50,p90,p95,p99,throughput,hit_rate,reuse_hit_rate,mean_wave_size,"
    "mean_prompt_tokens,mean_reuse_tokens,prefill_rate_eff,mean_wave_extend_tokens,completed,capacity_tokens";

inline void write_run_row(std::ostream& out, const RunRow& r) {
  const RunMetrics& m = r.metrics;
  fmt::print(out, "{},{:.6f},{},{},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f},{:.3f},{:.3f},{:.3f},{:.3f},{},{}\n",
             r.key.policy, r.key.qps, r.key.q_cold, r.key.seed, m.p50, m.p90, m.p95, m.p99, m.throughput,
             m.hit_rate, m.reuse_hit_rate, m.mean_wave_size, m.mean_prompt_tokens, m.mean_reuse_tokens,
             m.prefill_rate_eff, m.mean_wave_extend_tokens, m.completed, r.capacity_tokens);
}

inline void write_runs_csv(std::ostream& out, const std::vector<RunRow>& rows) {
  out << kRunsHeader << '\n';
  for (const RunRow& r : rows) write_run_row(out, r);
}

inline std::vector<RunRow> read_runs_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError(1, "empty results file");
  if (line != kRunsHeader) throw ParseError(1, "unexpected results header");
  std::vector<RunRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 18) throw ParseError(line_no, "expected 18 columns, got " + std::to_string(f.size()));
    try {
      RunRow r;
      r.key = {f[0], std::stod(f[1]), std::stoul(f[2]), std::stoull(f[3])};
      RunMetrics& m = r.metrics;
      m.p50 = std::stod(f[4]);
      m.p90 = std::stod(f[5]);
      m.p95 = std::stod(f[6]);
      m.p99 = std::stod(f[7]);
      m.throughput = std::stod(f[8]);
      m.hit_rate = std::stod(f[9]);
      m.reuse_hit_rate = std::stod(f[10]);
      m.mean_wave_size = std::stod(f[11]);
      m.mean_prompt_tokens = std::stod(f[12]);
      m.mean_reuse_tokens = std::stod(f[13]);
      m.prefill_rate_eff = std::stod(f[14]);
      m.mean_wave_extend_tokens = std::stod(f[15]);
      m.completed = std::stoul(f[16]);
      r.capacity_tokens = std::stoul(f[17]);
      rows.push_back(r);
    } catch (const std::logic_error& e) {
      throw ParseError(line_no, std::string("bad number: ") + e.what());
    }
  }
  return rows;
}

inline std::vector<RunRow> read_runs_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open results " + path.string());
  return read_runs_csv(in);
}

inline std::string run_file_stem(const RunKey& k) {
  return fmt::format("{}_qps{}_c{}_s{}", k.policy, k.qps, k.q_cold, k.seed);
}

inline void write_request_metrics(std::ostream& out, const SimResult& result) {
  for (const RequestMetrics& m : result.requests) {
    nlohmann::json j = {{"id", m.id},
                        {"arrival", m.arrival},
                        {"admit", m.admit},
                        {"prefill_end", m.prefill_end},
                        {"first_token", m.first_token},
                        {"completion", m.completion},
                        {"ttft", m.ttft()},
                        {"hit_tokens", m.hit_tokens},
                        {"effective_tokens", m.effective_tokens},
                        {"path_tokens", m.path_tokens},
                        {"reuse_tokens", m.reuse_tokens},
                        {"reuse_hit_tokens", m.reuse_hit_tokens},
                        {"wave", m.wave},
                        {"hot_lane", m.hot_lane}};
    out << j.dump() << '\n';
  }
}

inline void write_wave_log(std::ostream& out, const SimResult& result) {
  for (const WaveRecord& w : result.waves) {
    nlohmann::json j = {{"wave", w.index},
                        {"launch_time", w.launch_time},
                        {"duration", w.duration},
                        {"prefill_rate", w.prefill_rate},
                        {"uncached_tokens", w.uncached_tokens},
                        {"cached_tokens", w.cached_tokens},
                        {"members", w.members}};
    out << j.dump() << '\n';
  }
}

inline nlohmann::json round_record(std::size_t round_index, const DispatchBatch& batch) {
  nlohmann::json buckets = nlohmann::json::array();
  for (const BucketRecord& b : batch.buckets)
    buckets.push_back({{"signature", b.signature}, {"size", b.size}, {"score", b.score}});
  std::vector<RequestId> hot, cold;
  for (const auto& d : batch.hot) hot.push_back(d.request.id);
  for (const auto& d : batch.cold) cold.push_back(d.request.id);
  const std::map<SegmentId, double> priorities(batch.dispatch_priorities.begin(), batch.dispatch_priorities.end());
  nlohmann::json p = nlohmann::json::object();
  for (const auto& [s, v] : priorities) p[std::to_string(s)] = v;
  return {{"round_index", round_index}, {"now", batch.now}, {"buckets", buckets},
          {"hot", hot},                 {"cold", cold},     {"dispatch_priorities", p}};
}

struct RunFailure {
  RunKey key;
  std::string error;
};

struct ExperimentResult {
  std::vector<RunRow> rows;  // sorted by key
  std::vector<RunFailure> failures;
};

/// Trace for one (qps, seed) point of the sweep.
inline Trace trace_for(const ExperimentSpec& spec, double qps, std::uint64_t seed) {
  if (spec.trace_path) {
    std::ifstream in(*spec.trace_path);
    if (!in) throw ConfigError("cannot open trace " + *spec.trace_path);
    return load_trace(in);
  }
  WorkloadConfig w = spec.workload;
  w.qps = qps;
  w.seed = seed;
  return generate_trace(w, spec.catalog.build());
}

/// Simulator configuration for one run, with the cache budget resolved against `trace`.
inline SimConfig sim_config_for(const ExperimentSpec& spec, const Trace& trace, EvictionPolicy policy,
                                std::size_t q_cold) {
  SimConfig c = spec.sim;
  c.cache.policy = policy;
  c.scheduler.cold_quota = q_cold;
  if (spec.capacity_fraction) {
    const double ws = static_cast<double>(working_set_tokens(trace));
    c.cache.capacity_tokens = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(*spec.capacity_fraction * ws)));
  }
  return c;
}

inline void write_summary(std::ostream& out, const std::vector<RunRow>& rows) {
  // (policy, q_cold) -> qps -> rows
  std::map<std::pair<std::string, std::size_t>, std::map<double, std::vector<const RunRow*>>> groups;
  for (const RunRow& r : rows) groups[{r.key.policy, r.key.q_cold}][r.key.qps].push_back(&r);
  for (const auto& [group, by_qps] : groups) {
    fmt::print(out, "policy {} (q_cold={})\n", group.first, group.second);
    fmt::print(out, "{:>8}  {:>34}  {:>8}  {:>9}\n", "QPS", "P50/P90/P95/P99 TTFT (s)", "Hit (%)", "Reuse (%)");
    for (const auto& [qps, list] : by_qps) {
      double p50 = 0, p90 = 0, p95 = 0, p99 = 0, hit = 0, reuse = 0;
      for (const RunRow* r : list) {
        p50 += r->metrics.p50;
        p90 += r->metrics.p90;
        p95 += r->metrics.p95;
        p99 += r->metrics.p99;
        hit += r->metrics.hit_rate;
        reuse += r->metrics.reuse_hit_rate;
      }
      const auto n = static_cast<double>(list.size());
      fmt::print(out, "{:>8.2f}  {:>34}  {:>8.2f}  {:>9.2f}\n", qps,
                 fmt::format("{:.3f}/{:.3f}/{:.3f}/{:.3f}", p50 / n, p90 / n, p95 / n, p99 / n), 100 * hit / n,
                 100 * reuse / n);
    }
    out << '\n';
  }
}

/// Seed-averaged knee points for one (policy, q_cold) group, ascending in qps.
inline std::vector<analytics::KneePoint> knee_points(const std::vector<RunRow>& rows, const std::string& policy,
                                                     std::size_t q_cold) {
  std::map<double, std::vector<const RunRow*>> by_qps;
  for (const RunRow& r : rows)
    if (r.key.policy == policy && r.key.q_cold == q_cold) by_qps[r.key.qps].push_back(&r);
  std::vector<analytics::KneePoint> points;
  for (const auto& [qps, list] : by_qps) {
    analytics::KneePoint p;
    p.offered = qps;
    p.mean_wave_size = 0.0;
    for (const RunRow* r : list) {
      p.throughput += r->metrics.throughput;
      p.p99 += r->metrics.p99;
      p.hit_rate += r->metrics.hit_rate;
      p.mean_wave_size += r->metrics.mean_wave_size;
      p.mean_prompt_tokens += r->metrics.mean_prompt_tokens;
      p.prefill_rate_eff += r->metrics.prefill_rate_eff;
      p.extend_per_wave += r->metrics.mean_wave_extend_tokens;
    }
    const auto n = static_cast<double>(list.size());
    p.throughput /= n;
    p.p99 /= n;
    p.hit_rate /= n;
    p.mean_wave_size /= n;
    p.mean_prompt_tokens /= n;
    p.prefill_rate_eff /= n;
    p.extend_per_wave /= n;
    points.push_back(p);
  }
  return points;
}

/// Runs every (policy, qps, q_cold, seed) combination and writes result files
/// under spec.output_dir. Output depends only on `spec`.
inline ExperimentResult run_experiment(const ExperimentSpec& spec) {
  spec.validate();
  namespace fs = std::filesystem;
  const fs::path out_dir(spec.output_dir);
  fs::create_directories(out_dir);
  if (spec.write_requests) fs::create_directories(out_dir / "requests");
  if (spec.write_waves) fs::create_directories(out_dir / "waves");
  if (spec.write_cache_dump) fs::create_directories(out_dir / "cache");

  {
    std::ofstream echo(out_dir / "spec.json");
    echo << spec_to_json(spec).dump(2) << '\n';
  }

  struct Job {
    RunKey key;
    EvictionPolicy policy;
  };
  std::vector<Job> jobs;
  for (EvictionPolicy p : spec.policies)
    for (double q : spec.qps)
      for (std::size_t c : spec.effective_cold_quotas())
        for (std::uint64_t s : spec.seeds) jobs.push_back({{std::string(to_string(p)), q, c, s}, p});

  std::vector<std::optional<RunRow>> rows(jobs.size());
  std::vector<std::optional<std::string>> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      const Job& job = jobs[i];
      try {
        const Trace trace = trace_for(spec, job.key.qps, job.key.seed);
        const SimConfig cfg = sim_config_for(spec, trace, job.policy, job.key.q_cold);
        Simulator sim(trace, cfg);
        std::ostringstream rounds;
        if (spec.write_waves)
          sim.set_round_listener(
              [&rounds](std::size_t i, const DispatchBatch& b) { rounds << round_record(i, b).dump() << '\n'; });
        const SimResult result = sim.run();
        rows[i] = RunRow{job.key, result.metrics, cfg.cache.capacity_tokens};
        const std::string stem = run_file_stem(job.key);
        if (spec.write_cache_dump) {
          std::ofstream f(out_dir / "cache" / (stem + ".txt"));
          sim.cache().dump(f);
        }
        if (spec.write_requests) {
          std::ofstream f(out_dir / "requests" / (stem + ".jsonl"));
          write_request_metrics(f, result);
        }
        if (spec.write_waves) {
          std::ofstream f(out_dir / "waves" / (stem + ".jsonl"));
          write_wave_log(f, result);
          std::ofstream r(out_dir / "waves" / (stem + "_rounds.jsonl"));
          r << rounds.str();
        }
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(spec.jobs, 1, std::max<std::size_t>(1, jobs.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  ExperimentResult result;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (rows[i]) result.rows.push_back(*rows[i]);
    if (errors[i]) result.failures.push_back({jobs[i].key, *errors[i]});
  }
  std::sort(result.rows.begin(), result.rows.end(), [](const RunRow& a, const RunRow& b) { return a.key < b.key; });

  {
    std::ofstream f(out_dir / "runs.csv");
    write_runs_csv(f, result.rows);
  }
  {
    std::ofstream f(out_dir / "summary.txt");
    write_summary(f, result.rows);
  }
  if (!result.failures.empty()) {
    std::ofstream f(out_dir / "failures.csv");
    f << "policy,qps,q_cold,seed,error\n";
    for (const RunFailure& x : result.failures)
      fmt::print(f, "{},{:.6f},{},{},\"{}\"\n", x.key.policy, x.key.qps, x.key.q_cold, x.key.seed, x.error);
  }
  if (spec.qps.size() >= 3) {
    for (EvictionPolicy p : spec.policies) {
      for (std::size_t c : spec.effective_cold_quotas()) {
        const auto points = knee_points(result.rows, std::string(to_string(p)), c);
        if (points.size() < 3) continue;
        const auto report = analytics::knee_report(points);
        const std::string stem = fmt::format("knee_{}_c{}", to_string(p), c);
        std::ofstream csv(out_dir / (stem + ".csv"));
        analytics::write_knee_csv(report, csv);
        std::ofstream txt(out_dir / (stem + ".txt"));
        analytics::write_knee_text(report, txt);
      }
    }
  }
  return result;
}

// --- Comparison ------------------------------------------------------------

struct DeltaRow {
  double qps = 0.0;
  std::size_t seeds = 0;
  double p99_a = 0.0;
  double p99_b = 0.0;
  double p99_change_pct = 0.0;   // mean over seeds of (a - b) / b
  double hit_gap_pp = 0.0;       // mean over seeds of a - b, percentage points
  double reuse_hit_gap_pp = 0.0;
};

/// Per-qps deltas of `a` relative to `b`, matched on (qps, q_cold, seed).
inline std::vector<DeltaRow> compare(const std::vector<RunRow>& a, const std::vector<RunRow>& b) {
  using Key = std::tuple<double, std::size_t, std::uint64_t>;
  std::map<Key, const RunRow*> ma, mb;
  for (const RunRow& r : a) ma[{r.key.qps, r.key.q_cold, r.key.seed}] = &r;
  for (const RunRow& r : b) mb[{r.key.qps, r.key.q_cold, r.key.seed}] = &r;
  std::vector<std::string> unmatched;
  auto describe = [](const Key& k) {
    return fmt::format("(qps={}, q_cold={}, seed={})", std::get<0>(k), std::get<1>(k), std::get<2>(k));
  };
  for (const auto& [k, r] : ma)
    if (!mb.count(k)) unmatched.push_back("a" + describe(k));
  for (const auto& [k, r] : mb)
    if (!ma.count(k)) unmatched.push_back("b" + describe(k));
  if (!unmatched.empty()) {
    std::string msg = "compare: unmatched keys:";
    for (const auto& u : unmatched) msg += " " + u;
    throw ValidationError(msg);
  }
  if (ma.empty()) throw ValidationError("compare: no results");

  std::map<double, DeltaRow> by_qps;
  for (const auto& [k, ra] : ma) {
    const RunRow* rb = mb.at(k);
    DeltaRow& d = by_qps[std::get<0>(k)];
    d.qps = std::get<0>(k);
    ++d.seeds;
    d.p99_a += ra->metrics.p99;
    d.p99_b += rb->metrics.p99;
    d.p99_change_pct += rb->metrics.p99 > 0 ? 100.0 * (ra->metrics.p99 - rb->metrics.p99) / rb->metrics.p99 : 0.0;
    d.hit_gap_pp += 100.0 * (ra->metrics.hit_rate - rb->metrics.hit_rate);
    d.reuse_hit_gap_pp += 100.0 * (ra->metrics.reuse_hit_rate - rb->metrics.reuse_hit_rate);
  }
  std::vector<DeltaRow> out;
  for (auto& [q, d] : by_qps) {
    const auto n = static_cast<double>(d.seeds);
    d.p99_a /= n;
    d.p99_b /= n;
    d.p99_change_pct /= n;
    d.hit_gap_pp /= n;
    d.reuse_hit_gap_pp /= n;
    out.push_back(d);
  }
  return out;
}

inline std::vector<RunRow> rows_for_policy(const std::vector<RunRow>& rows, const std::string& policy) {
  std::vector<RunRow> out;
  for (const RunRow& r : rows)
    if (r.key.policy == policy) out.push_back(r);
  return out;
}

inline void write_delta_table(std::ostream& out, const std::vector<DeltaRow>& rows) {
  out << "qps,seeds,p99_a,p99_b,p99_change_pct,hit_gap_pp,reuse_hit_gap_pp\n";
  for (const DeltaRow& d : rows)
    fmt::print(out, "{:.6f},{},{:.6f},{:.6f},{:.4f},{:.4f},{:.4f}\n", d.qps, d.seeds, d.p99_a, d.p99_b,
               d.p99_change_pct, d.hit_gap_pp, d.reuse_hit_gap_pp);
}

}  // namespace prefixsim
