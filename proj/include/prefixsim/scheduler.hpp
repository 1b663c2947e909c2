#pragma once

// Query-aware scheduling: windowed segment counters, front alignment,
// order-sensitive bucket signatures, bucket scoring, and hot/cold-lane
// dispatch with per-request cache hints.

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <vector>

#include "prefixsim/errors.hpp"
#include "prefixsim/radix_cache.hpp"
#include "prefixsim/workload.hpp"

namespace prefixsim {

struct PriorityWeights {
  double w_g = 1.0;
  double w_a = 1e6;
  double w_n = 1e5;
};

struct SchedulerConfig {
  double window = 0.05;             // seconds between freezes
  std::size_t dispatch_budget = 64; // M
  std::size_t cold_quota = 2;       // q_cold
  std::size_t front_width = 3;      // f_front
  std::size_t signature_size = 1;   // kappa
  PriorityWeights weights;
  double alpha_size = 1.0;
  double beta_util = 0.5;

  std::size_t hot_slots() const { return dispatch_budget - cold_quota; }

  void validate() const {
    if (!(window > 0.0)) throw ConfigError("scheduler: window must be positive");
    if (dispatch_budget == 0) throw ConfigError("scheduler: dispatch budget must be at least 1");
    if (cold_quota > dispatch_budget) throw ConfigError("scheduler: cold quota exceeds dispatch budget");
    if (signature_size == 0) throw ConfigError("scheduler: signature size must be at least 1");
    if (front_width < signature_size) throw ConfigError("scheduler: front width must be at least the signature size");
    if (weights.w_g < 0 || weights.w_a < 0 || weights.w_n < 0)
      throw ConfigError("scheduler: priority weights must be nonnegative");
  }
};

using SegmentCounts = std::map<SegmentId, std::uint64_t>;

/// Adds one count per distinct segment of `skeleton`.
inline void count_distinct(std::span<const SegmentId> skeleton, SegmentCounts& counts) {
  std::set<SegmentId> seen(skeleton.begin(), skeleton.end());
  for (SegmentId s : seen) ++counts[s];
}

/// Requests currently holding backend resources, keyed by id.
struct ActiveSet {
  std::map<RequestId, std::vector<SegmentId>> members;

  void add(RequestId id, std::vector<SegmentId> skeleton) { members.emplace(id, std::move(skeleton)); }
  void remove(RequestId id) { members.erase(id); }
  std::size_t size() const { return members.size(); }
};

/// Global (queued) and active counters for one round.
struct SegmentCounters {
  SegmentCounts g;
  SegmentCounts a;

  static std::uint64_t get(const SegmentCounts& m, SegmentId s) {
    const auto it = m.find(s);
    return it == m.end() ? 0 : it->second;
  }
};

inline SegmentCounters compute_counters(std::span<const Request> queue, const ActiveSet& active) {
  SegmentCounters c;
  for (const Request& r : queue) count_distinct(r.skeleton, c.g);
  for (const auto& [id, skeleton] : active.members) count_distinct(skeleton, c.a);
  return c;
}

/// w_g g + w_a a + w_n n, with n taken from precomputed reference-batch counts.
inline double segment_priority(const SegmentCounters& counters, const PriorityWeights& w, SegmentId s,
                               const SegmentCounts& next_counts) {
  return w.w_g * static_cast<double>(SegmentCounters::get(counters.g, s)) +
         w.w_a * static_cast<double>(SegmentCounters::get(counters.a, s)) +
         w.w_n * static_cast<double>(SegmentCounters::get(next_counts, s));
}

/// Priority against an explicit reference batch of skeletons (empty batch gives n = 0).
inline double segment_priority(const SegmentCounters& counters, const PriorityWeights& w, SegmentId s,
                               std::span<const std::vector<SegmentId>> reference_batch) {
  SegmentCounts n;
  for (const auto& sk : reference_batch) count_distinct(sk, n);
  return segment_priority(counters, w, s, n);
}

namespace detail {

// Skeleton positions ordered by (priority desc, segment id asc, position asc).
template <typename PriorityFn>
std::vector<std::size_t> ranked_positions(std::span<const SegmentId> skeleton, const PriorityFn& priority) {
  std::vector<double> p(skeleton.size());
  for (std::size_t i = 0; i < skeleton.size(); ++i) p[i] = priority(skeleton[i]);
  std::vector<std::size_t> idx(skeleton.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) {
    if (p[x] != p[y]) return p[x] > p[y];
    if (skeleton[x] != skeleton[y]) return skeleton[x] < skeleton[y];
    return x < y;
  });
  return idx;
}

}  // namespace detail

/// Moves the `front_width` highest-priority segments to the front in descending
/// priority order; the rest keep their relative order. Identity when not reorderable.
template <typename PriorityFn>
std::vector<SegmentId> front_align(std::span<const SegmentId> skeleton, const PriorityFn& priority,
                                   std::size_t front_width, bool reorderable) {
  std::vector<SegmentId> out(skeleton.begin(), skeleton.end());
  if (!reorderable || skeleton.empty() || front_width == 0) return out;
  auto ranked = detail::ranked_positions(skeleton, priority);
  ranked.resize(std::min(front_width, ranked.size()));
  std::vector<bool> moved(skeleton.size(), false);
  out.clear();
  for (std::size_t i : ranked) {
    out.push_back(skeleton[i]);
    moved[i] = true;
  }
  for (std::size_t i = 0; i < skeleton.size(); ++i)
    if (!moved[i]) out.push_back(skeleton[i]);
  return out;
}

/// The `kappa` highest-priority segments of `aligned`, emitted in their serialized order.
template <typename PriorityFn>
std::vector<SegmentId> make_signature(std::span<const SegmentId> aligned, const PriorityFn& priority,
                                      std::size_t kappa) {
  auto ranked = detail::ranked_positions(aligned, priority);
  ranked.resize(std::min(kappa, ranked.size()));
  std::sort(ranked.begin(), ranked.end());
  std::vector<SegmentId> sig;
  sig.reserve(ranked.size());
  for (std::size_t i : ranked) sig.push_back(aligned[i]);
  return sig;
}

struct BucketMember {
  std::size_t pending_index = 0;
  std::vector<SegmentId> aligned;
};

struct Bucket {
  std::vector<SegmentId> signature;
  std::vector<BucketMember> members;  // insertion order; rank = position
  std::size_t creation_order = 0;
};

/// Next-counter counts over the first `hot_slots` members of `bucket`.
inline SegmentCounts provisional_counts(const Bucket& bucket, std::size_t hot_slots) {
  SegmentCounts n;
  const std::size_t take = std::min(hot_slots, bucket.members.size());
  for (std::size_t i = 0; i < take; ++i) count_distinct(bucket.members[i].aligned, n);
  return n;
}

/// Mean priority, against the provisional batch, of the distinct segments in the bucket.
inline double bucket_utility(const Bucket& bucket, const SegmentCounters& counters, const PriorityWeights& w,
                             const SegmentCounts& provisional) {
  std::set<SegmentId> segments;
  for (const BucketMember& m : bucket.members) segments.insert(m.aligned.begin(), m.aligned.end());
  double sum = 0.0;
  for (SegmentId s : segments) sum += segment_priority(counters, w, s, provisional);
  return sum / static_cast<double>(std::max<std::size_t>(1, segments.size()));
}

inline double bucket_score(const Bucket& bucket, const SegmentCounters& counters, const PriorityWeights& w,
                           const SegmentCounts& provisional, double alpha_size, double beta_util) {
  if (bucket.members.empty()) throw DomainError("bucket_score: empty bucket");
  return alpha_size * static_cast<double>(bucket.members.size()) +
         beta_util * bucket_utility(bucket, counters, w, provisional);
}

/// Boundaries at the end of the system prefix, each reusable segment, and the suffix.
inline std::vector<std::size_t> export_anchor_offsets(const Request& r) {
  std::vector<std::size_t> offsets;
  offsets.push_back(r.sys_len);
  const std::size_t m = r.skeleton.size();
  for (std::size_t j = 1; j <= m; ++j) offsets.push_back(r.sys_len + r.reuse_len * j / m);
  offsets.push_back(r.sys_len + r.reuse_len + r.suffix_len);
  return offsets;
}

/// Anchor offsets annotated with region ownership, ready for RadixCache::insert_path.
inline std::vector<AnchorSpec> anchor_specs(const Request& r) {
  const auto offsets = export_anchor_offsets(r);
  std::vector<AnchorSpec> specs;
  specs.push_back({offsets.front(), RegionKind::System, std::nullopt});
  for (std::size_t j = 0; j < r.skeleton.size(); ++j)
    specs.push_back({offsets[j + 1], RegionKind::Reusable, r.skeleton[j]});
  specs.push_back({offsets.back(), RegionKind::Private, std::nullopt});
  return specs;
}

struct DispatchHint {
  std::vector<SegmentId> signature;
  std::size_t rank = 0;
  std::vector<SegmentId> aligned;
  std::map<SegmentId, CounterSnapshot> counters;
  std::vector<std::size_t> anchor_offsets;
  bool hot_lane = true;
};

struct DispatchedRequest {
  Request request;  // skeleton and token path as submitted
  DispatchHint hint;
};

struct BucketRecord {
  std::vector<SegmentId> signature;
  std::size_t size = 0;
  double score = 0.0;
};

struct DispatchBatch {
  std::vector<DispatchedRequest> hot;   // bucket-scan order
  std::vector<DispatchedRequest> cold;  // FIFO order
  PriorityMap dispatch_priorities;      // P(r; actual dispatch batch)
  CounterMap counters;                  // (g, a, n over the dispatch batch)
  std::vector<BucketRecord> buckets;    // descending score
  double now = 0.0;

  std::size_t size() const { return hot.size() + cold.size(); }
  bool empty() const { return hot.empty() && cold.empty(); }
};

/// One scheduling round over the frozen waiting set. Admitted requests leave
/// `pending` and join `active`. Deterministic in its arguments.
inline DispatchBatch schedule_round(std::vector<Request>& pending, ActiveSet& active,
                                    const SchedulerConfig& config, double now) {
  config.validate();
  DispatchBatch batch;
  batch.now = now;
  if (pending.empty()) return batch;

  const SegmentCounters counters = compute_counters(pending, active);
  const PriorityWeights& w = config.weights;
  const SegmentCounts none;
  auto base_priority = [&](SegmentId s) { return segment_priority(counters, w, s, none); };

  std::vector<Bucket> buckets;
  std::map<std::vector<SegmentId>, std::size_t> bucket_index;
  std::vector<std::pair<std::size_t, std::size_t>> placement(pending.size());  // (bucket, rank)
  std::vector<std::vector<SegmentId>> signatures(pending.size());
  for (std::size_t i = 0; i < pending.size(); ++i) {
    auto aligned = front_align(pending[i].skeleton, base_priority, config.front_width, pending[i].reorderable);
    auto sig = make_signature(aligned, base_priority, config.signature_size);
    auto [it, inserted] = bucket_index.try_emplace(sig, buckets.size());
    if (inserted) buckets.push_back(Bucket{sig, {}, buckets.size()});
    Bucket& b = buckets[it->second];
    placement[i] = {it->second, b.members.size()};
    signatures[i] = sig;
    b.members.push_back({i, std::move(aligned)});
  }

  const std::size_t hot_slots = config.hot_slots();
  std::vector<double> scores(buckets.size());
  for (std::size_t b = 0; b < buckets.size(); ++b)
    scores[b] = bucket_score(buckets[b], counters, w, provisional_counts(buckets[b], hot_slots),
                             config.alpha_size, config.beta_util);

  std::vector<std::size_t> order(buckets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    if (scores[x] != scores[y]) return scores[x] > scores[y];
    return buckets[x].creation_order < buckets[y].creation_order;
  });

  std::vector<bool> selected(pending.size(), false);
  std::vector<std::size_t> hot_idx;
  for (std::size_t b : order) {
    batch.buckets.push_back({buckets[b].signature, buckets[b].members.size(), scores[b]});
    for (const BucketMember& m : buckets[b].members) {
      if (hot_idx.size() >= hot_slots) break;
      hot_idx.push_back(m.pending_index);
      selected[m.pending_index] = true;
    }
  }

  std::vector<std::size_t> rest;
  for (std::size_t i = 0; i < pending.size(); ++i)
    if (!selected[i]) rest.push_back(i);
  std::stable_sort(rest.begin(), rest.end(), [&](std::size_t x, std::size_t y) {
    return pending[x].arrival_time < pending[y].arrival_time;
  });
  const std::size_t cold_take = std::min(config.dispatch_budget - hot_idx.size(), rest.size());
  std::vector<std::size_t> cold_idx(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(cold_take));
  for (std::size_t i : cold_idx) selected[i] = true;

  auto aligned_of = [&](std::size_t i) -> const std::vector<SegmentId>& {
    return buckets[placement[i].first].members[placement[i].second].aligned;
  };

  SegmentCounts dispatch_n;
  for (std::size_t i : hot_idx) count_distinct(aligned_of(i), dispatch_n);
  for (std::size_t i : cold_idx) count_distinct(aligned_of(i), dispatch_n);

  std::set<SegmentId> all_segments;
  for (const auto& [s, c] : counters.g) all_segments.insert(s);
  for (const auto& [s, c] : counters.a) all_segments.insert(s);
  for (SegmentId s : all_segments) {
    batch.dispatch_priorities[s] = segment_priority(counters, w, s, dispatch_n);
    batch.counters[s] = {SegmentCounters::get(counters.g, s), SegmentCounters::get(counters.a, s),
                         SegmentCounters::get(dispatch_n, s)};
  }

  auto make_dispatched = [&](std::size_t i, bool hot) {
    DispatchedRequest d{pending[i], {}};
    d.hint.signature = signatures[i];
    d.hint.rank = placement[i].second;
    d.hint.aligned = aligned_of(i);
    for (SegmentId s : d.hint.aligned) d.hint.counters[s] = batch.counters[s];
    Request shaped = d.request;
    shaped.skeleton = d.hint.aligned;
    d.hint.anchor_offsets = export_anchor_offsets(shaped);
    d.hint.hot_lane = hot;
    return d;
  };
  for (std::size_t i : hot_idx) batch.hot.push_back(make_dispatched(i, true));
  for (std::size_t i : cold_idx) batch.cold.push_back(make_dispatched(i, false));

  for (const auto& d : batch.hot) active.add(d.request.id, d.hint.aligned);
  for (const auto& d : batch.cold) active.add(d.request.id, d.hint.aligned);
  std::vector<Request> remaining;
  remaining.reserve(pending.size() - hot_idx.size() - cold_idx.size());
  for (std::size_t i = 0; i < pending.size(); ++i)
    if (!selected[i]) remaining.push_back(std::move(pending[i]));
  pending = std::move(remaining);
  return batch;
}

}  // namespace prefixsim
