#pragma once

// Deterministic window-driven serving simulator. The backend is one bulk
// server: at each window boundary where it is idle, the scheduler freezes the
// waiting set and the dispatched batch is prefilled as a single wave whose
// duration is its uncached token count over the effective prefill rate.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <queue>
#include <span>
#include <vector>

#include "prefixsim/errors.hpp"
#include "prefixsim/radix_cache.hpp"
#include "prefixsim/scheduler.hpp"
#include "prefixsim/workload.hpp"

namespace prefixsim {

struct SimConfig {
  double prefill_rate = 20000.0;  // aggregate tokens/s
  double decode_rate = 4000.0;    // aggregate tokens/s
  std::size_t output_tokens = 32;
  bool decode_attenuation = false;
  double throughput_window = 1.0;  // seconds of completions used to estimate X
  CacheConfig cache;
  SchedulerConfig scheduler;

  void validate() const {
    if (!(prefill_rate > 0.0)) throw ConfigError("sim: prefill_rate must be positive");
    if (!(decode_rate > 0.0)) throw ConfigError("sim: decode_rate must be positive");
    if (output_tokens == 0) throw ConfigError("sim: output_tokens must be at least 1");
    if (!(throughput_window > 0.0)) throw ConfigError("sim: throughput_window must be positive");
    cache.validate();
    scheduler.validate();
  }
};

/// Prefill throughput after decode contention: R_pf (1 - clamp(X L_out / R_dec, 0, 0.95)).
inline double effective_prefill_rate(const SimConfig& config, double completed_throughput) {
  if (!config.decode_attenuation) return config.prefill_rate;
  const double attenuation = std::clamp(
      completed_throughput * static_cast<double>(config.output_tokens) / config.decode_rate, 0.0, 0.95);
  return config.prefill_rate * (1.0 - attenuation);
}

/// Nearest-rank percentile: the ceil(p/100 n)-th smallest sample.
inline double percentile(std::span<const double> samples, double p) {
  if (samples.empty()) throw DomainError("percentile: no samples");
  if (!(p > 0.0 && p <= 100.0)) throw DomainError("percentile: p must lie in (0, 100]");
  std::vector<double> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end());
  const auto n = static_cast<double>(sorted.size());
  auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * n));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  return sorted[rank - 1];
}

struct WaveRecord {
  std::size_t index = 0;
  std::vector<RequestId> members;
  double launch_time = 0.0;
  double duration = 0.0;
  double prefill_rate = 0.0;
  std::size_t uncached_tokens = 0;
  std::size_t cached_tokens = 0;
};

struct RequestMetrics {
  RequestId id = 0;
  double arrival = 0.0;
  double admit = 0.0;
  double prefill_end = 0.0;
  double first_token = 0.0;
  double completion = 0.0;
  std::size_t hit_tokens = 0;
  std::size_t effective_tokens = 0;
  std::size_t path_tokens = 0;
  std::size_t reuse_tokens = 0;
  std::size_t reuse_hit_tokens = 0;
  std::size_t wave = 0;
  bool hot_lane = true;

  double ttft() const { return first_token - arrival; }
  double admit_wait() const { return admit - arrival; }
  double prefill_time() const { return prefill_end - admit; }
  double first_token_time() const { return first_token - prefill_end; }
};

struct RunMetrics {
  double p50 = 0, p90 = 0, p95 = 0, p99 = 0;
  double throughput = 0;
  double hit_rate = 0;
  double reuse_hit_rate = 0;
  double mean_wave_size = 0;
  double mean_wave_extend_tokens = 0;
  double mean_prompt_tokens = 0;
  double mean_reuse_tokens = 0;
  double prefill_rate_eff = 0;  // aggregate tokens/s realized across waves
  std::size_t completed = 0;
  std::size_t waves = 0;
};

struct SimResult {
  RunMetrics metrics;
  std::vector<RequestMetrics> requests;  // in trace order
  std::vector<WaveRecord> waves;
};

inline RunMetrics summarize(std::span<const RequestMetrics> requests, std::span<const WaveRecord> waves) {
  RunMetrics m;
  if (requests.empty()) return m;
  std::vector<double> ttft;
  ttft.reserve(requests.size());
  double hit = 0, len = 0, reuse_hit = 0, reuse = 0;
  double first_arrival = requests.front().arrival, last_completion = 0;
  for (const RequestMetrics& r : requests) {
    ttft.push_back(r.ttft());
    hit += static_cast<double>(r.hit_tokens);
    len += static_cast<double>(r.path_tokens);
    reuse_hit += static_cast<double>(r.reuse_hit_tokens);
    reuse += static_cast<double>(r.reuse_tokens);
    first_arrival = std::min(first_arrival, r.arrival);
    last_completion = std::max(last_completion, r.completion);
  }
  const auto n = static_cast<double>(requests.size());
  m.p50 = percentile(ttft, 50);
  m.p90 = percentile(ttft, 90);
  m.p95 = percentile(ttft, 95);
  m.p99 = percentile(ttft, 99);
  m.completed = requests.size();
  m.throughput = last_completion > first_arrival ? n / (last_completion - first_arrival) : 0.0;
  m.hit_rate = len > 0 ? hit / len : 0.0;
  m.reuse_hit_rate = reuse > 0 ? reuse_hit / reuse : 0.0;
  m.mean_prompt_tokens = len / n;
  m.mean_reuse_tokens = reuse / n;
  m.waves = waves.size();
  if (!waves.empty()) {
    double uncached = 0, busy = 0;
    for (const WaveRecord& w : waves) {
      uncached += static_cast<double>(w.uncached_tokens);
      busy += w.duration;
    }
    m.mean_wave_size = n / static_cast<double>(waves.size());
    m.mean_wave_extend_tokens = uncached / static_cast<double>(waves.size());
    m.prefill_rate_eff = busy > 0 ? uncached / busy : 0.0;
  }
  return m;
}

class Simulator {
 public:
  /// Called after the hit length is measured and before the path is inserted.
  using AdmissionListener = std::function<void(const Request& aligned, std::size_t hit_tokens)>;
  using InsertListener = std::function<void(const Request& aligned)>;
  using RoundListener = std::function<void(std::size_t round_index, const DispatchBatch&)>;

  Simulator(const Trace& trace, SimConfig config) : trace_(trace), config_(config), cache_(config.cache) {
    config_.validate();
    trace_.validate();
    for (const Request& r : trace_.requests)
      if (r.length() > config_.cache.capacity_tokens)
        throw ConfigError("sim: request " + std::to_string(r.id) + " (" + std::to_string(r.length()) +
                          " tokens) exceeds the cache capacity");
  }

  void set_admission_listener(AdmissionListener fn) { on_admit_ = std::move(fn); }
  void set_insert_listener(InsertListener fn) { on_insert_ = std::move(fn); }
  void set_round_listener(RoundListener fn) { on_round_ = std::move(fn); }
  void set_detach_listener(std::function<void(const DetachEvent&)> fn) { cache_.set_detach_listener(std::move(fn)); }

  const RadixCache& cache() const { return cache_; }

  SimResult run() {
    const auto& requests = trace_.requests;
    const std::size_t n = requests.size();
    const double window = config_.scheduler.window;
    SimResult result;
    result.requests.resize(n);
    std::map<RequestId, std::size_t> index_of;
    for (std::size_t i = 0; i < n; ++i) index_of[requests[i].id] = i;

    std::vector<Request> pending;
    ActiveSet active;
    std::priority_queue<InFlight, std::vector<InFlight>, std::greater<>> in_flight;
    std::multiset<double> completion_times;
    std::size_t next_arrival = 0;
    std::size_t launched = 0;
    std::size_t round = 0;
    double gpu_free_at = 0.0;
    std::uint64_t k = 1;

    auto retire = [&](const InFlight& f) {
      cache_.release_path(f.pins);
      active.remove(f.id);
    };

    while (launched < n) {
      const double now = static_cast<double>(k) * window;
      while (next_arrival < n && requests[next_arrival].arrival_time <= now) pending.push_back(requests[next_arrival++]);
      while (!in_flight.empty() && in_flight.top().completion <= now) {
        retire(in_flight.top());
        in_flight.pop();
      }

      if (now >= gpu_free_at && !pending.empty()) {
        DispatchBatch batch = schedule_round(pending, active, config_.scheduler, now);
        if (on_round_) on_round_(round, batch);
        ++round;
        cache_.set_counters(batch.counters);
        if (config_.cache.policy == EvictionPolicy::DART) cache_.set_protection(batch.dispatch_priorities);

        WaveRecord wave;
        wave.index = result.waves.size();
        wave.launch_time = now;
        std::vector<std::pair<std::size_t, std::vector<NodeId>>> admitted;
        std::vector<Request> deferred;
        auto admit = [&](DispatchedRequest& d) {
          Request aligned = make_request(d.request.id, d.request.arrival_time, d.hint.aligned,
                                         d.request.suffix_len, d.request.reorderable, trace_.catalog);
          const std::size_t hit = cache_.match_prefix(aligned.token_path).hit_length;
          std::vector<NodeId> pins;
          try {
            pins = cache_.insert_path(aligned.token_path, anchor_specs(aligned));
          } catch (const CapacityError&) {
            active.remove(d.request.id);
            deferred.push_back(std::move(d.request));
            return;
          }
          if (on_admit_) on_admit_(aligned, hit);
          if (on_insert_) on_insert_(aligned);
          const std::size_t idx = index_of.at(aligned.id);
          RequestMetrics& m = result.requests[idx];
          m.id = aligned.id;
          m.arrival = aligned.arrival_time;
          m.admit = now;
          m.hit_tokens = hit;
          m.path_tokens = aligned.length();
          m.effective_tokens = aligned.length() - hit;
          m.reuse_tokens = aligned.reuse_len;
          m.reuse_hit_tokens = std::min(aligned.reuse_len, hit > aligned.sys_len ? hit - aligned.sys_len : 0);
          m.wave = wave.index;
          m.hot_lane = d.hint.hot_lane;
          wave.uncached_tokens += m.effective_tokens;
          wave.cached_tokens += hit;
          wave.members.push_back(aligned.id);
          admitted.emplace_back(idx, std::move(pins));
        };
        for (auto& d : batch.hot) admit(d);
        for (auto& d : batch.cold) admit(d);

        if (!deferred.empty()) {
          pending.insert(pending.end(), std::make_move_iterator(deferred.begin()),
                         std::make_move_iterator(deferred.end()));
          std::stable_sort(pending.begin(), pending.end(), [](const Request& a, const Request& b) {
            if (a.arrival_time != b.arrival_time) return a.arrival_time < b.arrival_time;
            return a.id < b.id;
          });
        }

        if (!admitted.empty()) {
          completion_times.erase(completion_times.begin(),
                                 completion_times.upper_bound(now - config_.throughput_window));
          const auto done = std::distance(completion_times.begin(), completion_times.upper_bound(now));
          const double x = static_cast<double>(done) / config_.throughput_window;
          wave.prefill_rate = effective_prefill_rate(config_, x);
          wave.duration = static_cast<double>(wave.uncached_tokens) / wave.prefill_rate;
          const double prefill_end = now + wave.duration;
          const double step = static_cast<double>(admitted.size()) / config_.decode_rate;
          const double first_token = prefill_end + step;
          const double completion = first_token + static_cast<double>(config_.output_tokens - 1) * step;
          gpu_free_at = prefill_end;
          for (auto& [idx, pins] : admitted) {
            RequestMetrics& m = result.requests[idx];
            m.prefill_end = prefill_end;
            m.first_token = first_token;
            m.completion = completion;
            in_flight.push({completion, m.id, std::move(pins)});
            completion_times.insert(completion);
          }
          launched += admitted.size();
          result.waves.push_back(std::move(wave));
        }
      }

      // Jump to the next boundary where something can happen.
      std::uint64_t next = k + 1;
      if (pending.empty()) {
        if (next_arrival < n) next = std::max(next, boundary_at_or_after(requests[next_arrival].arrival_time, window));
      } else {
        next = std::max(next, boundary_at_or_after(gpu_free_at, window));
      }
      k = next;
    }
    while (!in_flight.empty()) {
      retire(in_flight.top());
      in_flight.pop();
    }

    result.metrics = summarize(result.requests, result.waves);
    return result;
  }

 private:
  struct InFlight {
    double completion = 0.0;
    RequestId id = 0;
    std::vector<NodeId> pins;

    bool operator>(const InFlight& o) const {
      if (completion != o.completion) return completion > o.completion;
      return id > o.id;
    }
  };

  static std::uint64_t boundary_at_or_after(double t, double window) {
    auto k = static_cast<std::uint64_t>(std::max(1.0, std::ceil(t / window)));
    while (static_cast<double>(k) * window < t) ++k;
    while (k > 1 && static_cast<double>(k - 1) * window >= t) --k;
    return k;
  }

  Trace trace_;
  SimConfig config_;
  RadixCache cache_;
  AdmissionListener on_admit_;
  InsertListener on_insert_;
  RoundListener on_round_;
};

inline SimResult run_simulation(const Trace& trace, const SimConfig& config) {
  return Simulator(trace, config).run();
}

}  // namespace prefixsim
