// prefixsim command-line driver.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>

#include "prefixsim/prefixsim.hpp"

namespace fs = std::filesystem;
using namespace prefixsim;

namespace {

struct SweepOverrides {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> policies;
  std::vector<double> qps;
};

void add_sweep_flags(CLI::App* app, SweepOverrides& o) {
  app->add_option("--config", o.config, "experiment spec (JSON)")->check(CLI::ExistingFile);
  app->add_option("--out", o.out, "output directory");
  app->add_option("--seed", o.seed, "run a single seed");
  app->add_option("--policy", o.policies, "eviction policies (DART, LRU, LRU_ACTIVE, LFU)")->delimiter(',');
  app->add_option("--qps", o.qps, "offered loads, comma separated")->delimiter(',');
}

ExperimentSpec resolve_spec(const SweepOverrides& o) {
  ExperimentSpec spec = o.config.empty() ? ExperimentSpec{} : load_spec(o.config);
  if (!o.out.empty()) spec.output_dir = o.out;
  if (o.seed) spec.seeds = {*o.seed};
  if (!o.policies.empty()) {
    spec.policies.clear();
    for (const auto& p : o.policies) spec.policies.push_back(parse_policy(p));
  }
  if (!o.qps.empty()) spec.qps = o.qps;
  return spec;
}

std::vector<RunRow> load_results(const std::string& path) {
  fs::path p(path);
  if (fs::is_directory(p)) p /= "runs.csv";
  return read_runs_csv(p);
}

int cmd_generate(const SweepOverrides& o) {
  ExperimentSpec spec = resolve_spec(o);
  spec.validate();
  const fs::path dir = o.out.empty() ? fs::path(".") : fs::path(o.out);
  fs::create_directories(dir);
  for (double q : spec.qps) {
    for (std::uint64_t s : spec.seeds) {
      const Trace trace = trace_for(spec, q, s);
      const fs::path file = dir / fmt::format("trace_qps{}_s{}.jsonl", q, s);
      std::ofstream out(file);
      save_trace(trace, out);
      fmt::print("{} ({} requests, {} working-set tokens)\n", file.string(), trace.requests.size(),
                 working_set_tokens(trace));
    }
  }
  return 0;
}

int cmd_run(const SweepOverrides& o, const std::string& trace, std::optional<std::size_t> jobs, bool round_log,
            bool cache_dump) {
  ExperimentSpec spec = resolve_spec(o);
  if (!trace.empty()) spec.trace_path = trace;
  if (jobs) spec.jobs = *jobs;
  if (round_log) spec.write_waves = true;
  if (cache_dump) spec.write_cache_dump = true;
  const ExperimentResult result = run_experiment(spec);
  std::ifstream summary(fs::path(spec.output_dir) / "summary.txt");
  std::cout << summary.rdbuf();
  for (const RunFailure& f : result.failures)
    fmt::print(std::cerr, "run {} qps={} q_cold={} seed={} failed: {}\n", f.key.policy, f.key.qps, f.key.q_cold,
               f.key.seed, f.error);
  fmt::print("{} runs, {} failed, results in {}\n", result.rows.size() + result.failures.size(),
             result.failures.size(), spec.output_dir);
  return result.failures.empty() ? 0 : 2;
}

int cmd_compare(const std::string& a_path, const std::string& b_path, const std::string& policy_a,
                const std::string& policy_b, const std::string& out_dir) {
  std::vector<RunRow> a = load_results(a_path);
  std::vector<RunRow> b = load_results(b_path.empty() ? a_path : b_path);
  if (!policy_a.empty()) a = rows_for_policy(a, std::string(to_string(parse_policy(policy_a))));
  if (!policy_b.empty()) b = rows_for_policy(b, std::string(to_string(parse_policy(policy_b))));
  const auto deltas = compare(a, b);
  if (out_dir.empty()) {
    write_delta_table(std::cout, deltas);
  } else {
    fs::create_directories(out_dir);
    std::ofstream f(fs::path(out_dir) / "delta.csv");
    write_delta_table(f, deltas);
  }
  double p99 = 0, gap = 0;
  for (const auto& d : deltas) {
    p99 += d.p99_change_pct;
    gap += d.hit_gap_pp;
  }
  const auto n = static_cast<double>(deltas.size());
  fmt::print(std::cerr, "mean per-qps P99 change {:+.2f}%, mean hit-rate gap {:+.2f} pp\n", p99 / n, gap / n);
  return 0;
}

int cmd_knee(const std::string& path, const std::vector<std::string>& policies, double c_s2,
             const std::string& out_dir) {
  const std::vector<RunRow> rows = load_results(path);
  std::set<std::pair<std::string, std::size_t>> groups;
  for (const RunRow& r : rows) groups.insert({r.key.policy, r.key.q_cold});
  std::set<std::string> wanted;
  for (const auto& p : policies) wanted.insert(std::string(to_string(parse_policy(p))));
  for (const auto& [policy, q_cold] : groups) {
    if (!wanted.empty() && !wanted.count(policy)) continue;
    const auto report = analytics::knee_report(knee_points(rows, policy, q_cold), c_s2);
    fmt::print("policy {} (q_cold={})\n", policy, q_cold);
    analytics::write_knee_text(report, std::cout);
    std::cout << '\n';
    if (!out_dir.empty()) {
      fs::create_directories(out_dir);
      std::ofstream f(fs::path(out_dir) / fmt::format("knee_{}_c{}.csv", policy, q_cold));
      analytics::write_knee_csv(report, f);
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prefix-cache serving simulator: traces, policy sweeps, and queueing analytics"};
  app.require_subcommand(1);

  SweepOverrides gen_opts;
  auto* gen = app.add_subcommand("generate", "write trace files for each (qps, seed) of a spec");
  add_sweep_flags(gen, gen_opts);

  SweepOverrides run_opts;
  std::string run_trace;
  std::optional<std::size_t> run_jobs;
  bool round_log = false, cache_dump = false;
  auto* run = app.add_subcommand("run", "run a policy x load x seed sweep");
  add_sweep_flags(run, run_opts);
  run->add_option("--trace", run_trace, "replay a trace file instead of generating")->check(CLI::ExistingFile);
  run->add_option("--jobs", run_jobs, "parallel runs");
  run->add_flag("--round-log", round_log, "write per-wave logs");
  run->add_flag("--cache-dump", cache_dump, "write the final cache tree of each run");

  std::string cmp_a, cmp_b, cmp_pa, cmp_pb, cmp_out;
  auto* cmp = app.add_subcommand("compare", "per-qps deltas of result set A against B");
  cmp->add_option("a", cmp_a, "results directory or runs.csv")->required();
  cmp->add_option("b", cmp_b, "baseline results (defaults to A)");
  cmp->add_option("--policy", cmp_pa, "policy rows taken from A");
  cmp->add_option("--baseline", cmp_pb, "policy rows taken from B");
  cmp->add_option("--out", cmp_out, "write delta.csv here instead of stdout");

  std::string knee_in, knee_out;
  std::vector<std::string> knee_policies;
  double knee_cs2 = 1.0;
  auto* knee = app.add_subcommand("knee", "service-knee report from a load sweep");
  knee->add_option("results", knee_in, "results directory or runs.csv")->required();
  knee->add_option("--policy", knee_policies, "restrict to these policies")->delimiter(',');
  knee->add_option("--cs2", knee_cs2, "squared coefficient of variation for crossover");
  knee->add_option("--out", knee_out, "write knee CSVs here");

  auto* analyze = app.add_subcommand("analyze", "closed-form queueing calculator");
  analyze->require_subcommand(1);
  analytics::PolicyParams pp;
  auto add_policy = [&](CLI::App* c, analytics::PolicyParams& p, const std::string& suffix) {
    c->add_option("--L" + suffix, p.L, "mean prompt tokens")->required();
    c->add_option("--mbar" + suffix, p.M_bar, "mean wave size")->required();
    c->add_option("--rpf" + suffix, p.R_pf_eff, "effective prefill tokens/s per request")->required();
    c->add_option("--hit" + suffix, p.h, "token hit rate")->required();
  };
  auto* a_mu = analyze->add_subcommand("mu", "wave time and request service rate");
  add_policy(a_mu, pp, "");
  analytics::PolicyParams p1, p0;
  auto* a_ratio = analyze->add_subcommand("ratio", "service-rate ratio of two operating points");
  add_policy(a_ratio, p1, "1");
  add_policy(a_ratio, p0, "0");
  double mu = 0, h_lru = 0, dh = 0, mbar = 1, rpf = 0, L = 0, L_reuse = 0, dh_reuse = 0, cs2 = 1.0;
  auto* a_gap = analyze->add_subcommand("gap", "service-rate gain from a hit-rate gap");
  a_gap->add_option("--mu", mu, "baseline service rate")->required();
  a_gap->add_option("--hit", h_lru, "baseline hit rate")->required();
  a_gap->add_option("--dh", dh, "hit-rate gap")->required();
  auto* a_exp = analyze->add_subcommand("expansion", "stability-region expansion from a hit-rate gap");
  a_exp->add_option("--mbar", mbar)->required();
  a_exp->add_option("--rpf", rpf)->required();
  a_exp->add_option("--L", L)->required();
  a_exp->add_option("--hit", h_lru)->required();
  a_exp->add_option("--dh", dh)->required();
  auto* a_reuse = analyze->add_subcommand("reuse-gap", "reusable-region gap to full-prompt gap");
  a_reuse->add_option("--dh-reuse", dh_reuse)->required();
  a_reuse->add_option("--L-reuse", L_reuse)->required();
  a_reuse->add_option("--L", L)->required();
  analytics::QueueParams qp;
  auto* a_wait = analyze->add_subcommand("wait", "mean admission wait");
  a_wait->add_option("--mu", mu)->required();
  a_wait->add_option("--lambda", qp.lambda)->required();
  a_wait->add_option("--cs2", qp.c_s2);
  a_wait->add_option("--window", qp.window);
  a_wait->add_option("--floor", qp.wait_floor);
  auto* a_cross = analyze->add_subcommand("crossover", "load where queueing wait equals prefill time");
  a_cross->add_option("--mu", mu)->required();
  a_cross->add_option("--mbar", mbar)->required();
  a_cross->add_option("--cs2", cs2);
  auto* a_cal = analyze->add_subcommand("calibrate", "per-request prefill rate implied by a service rate");
  a_cal->add_option("--mu", mu)->required();
  a_cal->add_option("--mbar", mbar)->required();
  a_cal->add_option("--L", L)->required();
  a_cal->add_option("--hit", h_lru)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_generate(gen_opts);
    if (*run) return cmd_run(run_opts, run_trace, run_jobs, round_log, cache_dump);
    if (*cmp) return cmd_compare(cmp_a, cmp_b, cmp_pa, cmp_pb, cmp_out);
    if (*knee) return cmd_knee(knee_in, knee_policies, knee_cs2, knee_out);
    if (*a_mu) {
      const auto s = analytics::mean_service(pp);
      fmt::print("wave_time {:.6f} s\nmu {:.6f} req/s\nwaves/s {:.6f}\n", s.wave_time, s.mu, s.waves_per_second());
    } else if (*a_ratio) {
      fmt::print("{:.6f}\n", analytics::service_ratio(p1, p0));
    } else if (*a_gap) {
      fmt::print("{:.6f}\n", analytics::service_gap(mu, h_lru, dh));
    } else if (*a_exp) {
      fmt::print("{:.6f}\n", analytics::stability_expansion(mbar, rpf, L, h_lru, dh));
    } else if (*a_reuse) {
      fmt::print("{:.6f}\n", analytics::reuse_gap_to_full(dh_reuse, L_reuse, L));
    } else if (*a_wait) {
      fmt::print("{:.6f}\n", analytics::admission_wait(mu, qp));
    } else if (*a_cross) {
      const auto x = analytics::crossover(mu, mbar, cs2);
      fmt::print("rho* {:.6f}\nlambda* {:.6f}\n", x.rho_star, x.lambda_star);
    } else if (*a_cal) {
      fmt::print("{:.6f}\n", analytics::calibrate_prefill_rate(mu, mbar, L, h_lru));
    }
  } catch (const std::exception& e) {
    fmt::print(std::cerr, "error: {}\n", e.what());
    return 1;
  }
  return 0;
}
