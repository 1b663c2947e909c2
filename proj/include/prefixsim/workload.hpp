#pragma once

// Segmented-prompt serving traces: Zipf hotspot popularity over a reusable
// segment catalog, Poisson arrivals, and exact token-path serialization.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefixsim/errors.hpp"

namespace prefixsim {

using Token = std::uint64_t;
using SegmentId = std::uint32_t;
using RequestId = std::uint64_t;
using Rng = std::mt19937_64;

// Disjoint token ranges. System tokens live below kSegmentTokenBase, segment r
// occupies [kSegmentTokenBase + r * chunk, ... + chunk), and private suffix
// tokens carry the request id in bits [24, 62).
inline constexpr Token kSegmentTokenBase = Token{1} << 32;
inline constexpr Token kSuffixTokenBase = Token{1} << 62;
inline constexpr std::size_t kMaxSuffixTokens = std::size_t{1} << 24;

/// Uniform double in [0, 1) from the top 53 bits of one engine draw.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Unbiased integer in [0, n).
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  if (n == 0) throw DomainError("uniform_index: empty range");
  const std::uint64_t threshold = (0 - n) % n;
  for (;;) {
    const std::uint64_t r = rng();
    if (r >= threshold) return r % n;
  }
}

inline double exponential(Rng& rng, double rate) {
  return -std::log1p(-uniform01(rng)) / rate;
}

/// Inverse-CDF sampler for P(rank i) ∝ (i+1)^-alpha over i in [0, n).
class ZipfSampler {
 public:
  ZipfSampler(std::size_t n, double alpha) : alpha_(alpha) {
    if (n == 0) throw DomainError("zipf: item count must be at least 1");
    if (!(alpha > 0.0)) throw DomainError("zipf: exponent must be positive");
    cdf_.resize(n);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      acc += std::pow(static_cast<double>(i + 1), -alpha);
      cdf_[i] = acc;
    }
    for (double& c : cdf_) c /= acc;
    cdf_.back() = 1.0;
  }

  std::size_t size() const { return cdf_.size(); }
  double alpha() const { return alpha_; }

  double probability(std::size_t rank) const {
    return rank == 0 ? cdf_[0] : cdf_[rank] - cdf_[rank - 1];
  }

  std::size_t operator()(Rng& rng) const {
    const double u = uniform01(rng);
    const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    return std::min<std::size_t>(static_cast<std::size_t>(it - cdf_.begin()), cdf_.size() - 1);
  }

 private:
  double alpha_;
  std::vector<double> cdf_;
};

inline std::size_t zipf_sample(Rng& rng, std::size_t n, double alpha) {
  return ZipfSampler(n, alpha)(rng);
}

struct SegmentCatalog {
  std::size_t num_segments = 981;
  std::size_t chunk_tokens = 128;
  std::vector<SegmentId> hot_set;  // ordered by Zipf rank
  std::size_t sys_prefix_tokens = 28;

  void validate() const {
    if (num_segments == 0) throw ConfigError("catalog: num_segments must be at least 1");
    if (chunk_tokens == 0) throw ConfigError("catalog: chunk_tokens must be at least 1");
    if (sys_prefix_tokens >= kSegmentTokenBase) throw ConfigError("catalog: sys_prefix_tokens too large");
    std::unordered_set<SegmentId> seen;
    for (SegmentId s : hot_set) {
      if (s >= num_segments) throw ConfigError("catalog: hot segment id out of range");
      if (!seen.insert(s).second) throw ConfigError("catalog: duplicate hot segment id");
    }
  }

  bool is_hot(SegmentId s) const {
    return std::find(hot_set.begin(), hot_set.end(), s) != hot_set.end();
  }

  bool operator==(const SegmentCatalog&) const = default;
};

/// Catalog whose hot set is `hot_count` distinct segments drawn uniformly with `seed`.
inline SegmentCatalog make_catalog(std::size_t num_segments, std::size_t chunk_tokens,
                                   std::size_t hot_count, std::size_t sys_prefix_tokens,
                                   std::uint64_t seed) {
  if (hot_count > num_segments) throw ConfigError("catalog: more hot segments than segments");
  SegmentCatalog c{num_segments, chunk_tokens, {}, sys_prefix_tokens};
  Rng rng(seed);
  std::unordered_set<SegmentId> seen;
  while (c.hot_set.size() < hot_count) {
    const auto s = static_cast<SegmentId>(uniform_index(rng, num_segments));
    if (seen.insert(s).second) c.hot_set.push_back(s);
  }
  c.validate();
  return c;
}

struct WorkloadConfig {
  double qps = 60.0;
  std::size_t num_requests = 2048;
  std::size_t k = 5;
  double r_hot = 0.7;
  double zipf_alpha = 1.2;
  std::size_t suffix_tokens = 100;
  bool reorderable = true;
  std::uint64_t seed = 1;

  void validate(const SegmentCatalog& catalog) const {
    catalog.validate();
    if (!(qps > 0.0)) throw ConfigError("workload: qps must be positive");
    if (!(r_hot >= 0.0 && r_hot <= 1.0)) throw ConfigError("workload: r_hot must lie in [0, 1]");
    if (!(zipf_alpha > 0.0)) throw ConfigError("workload: zipf_alpha must be positive");
    if (k == 0) throw ConfigError("workload: k must be at least 1");
    if (k > catalog.num_segments) throw ConfigError("workload: k exceeds the catalog size");
    if (suffix_tokens >= kMaxSuffixTokens) throw ConfigError("workload: suffix_tokens too large");
    if (r_hot > 0.0 && catalog.hot_set.empty()) throw ConfigError("workload: r_hot > 0 needs a hot set");
    if (r_hot < 1.0 && k > catalog.num_segments - catalog.hot_set.size())
      throw ConfigError("workload: k exceeds the cold segment pool");
  }

  bool operator==(const WorkloadConfig&) const = default;
};

struct Request {
  RequestId id = 0;
  double arrival_time = 0.0;
  std::vector<SegmentId> skeleton;
  bool reorderable = true;
  std::vector<Token> token_path;
  std::size_t sys_len = 0;
  std::size_t reuse_len = 0;
  std::size_t suffix_len = 0;

  std::size_t length() const { return token_path.size(); }

  bool operator==(const Request&) const = default;
};

/// [sys] ∥ [segment tokens in skeleton order] ∥ [private suffix keyed by id].
inline std::vector<Token> serialize_tokens(std::span<const SegmentId> skeleton, RequestId id,
                                           std::size_t suffix_len, const SegmentCatalog& catalog) {
  std::vector<Token> path;
  path.reserve(catalog.sys_prefix_tokens + skeleton.size() * catalog.chunk_tokens + suffix_len);
  for (std::size_t j = 0; j < catalog.sys_prefix_tokens; ++j) path.push_back(Token{j});
  for (SegmentId r : skeleton) {
    const Token base = kSegmentTokenBase + Token{r} * catalog.chunk_tokens;
    for (std::size_t j = 0; j < catalog.chunk_tokens; ++j) path.push_back(base + j);
  }
  const Token suffix_base = kSuffixTokenBase | (Token{id} << 24);
  for (std::size_t j = 0; j < suffix_len; ++j) path.push_back(suffix_base + j);
  return path;
}

inline std::vector<Token> serialize_tokens(const Request& request, const SegmentCatalog& catalog) {
  return serialize_tokens(request.skeleton, request.id, request.suffix_len, catalog);
}

inline Request make_request(RequestId id, double arrival_time, std::vector<SegmentId> skeleton,
                            std::size_t suffix_len, bool reorderable, const SegmentCatalog& catalog) {
  Request r;
  r.id = id;
  r.arrival_time = arrival_time;
  r.skeleton = std::move(skeleton);
  r.reorderable = reorderable;
  r.sys_len = catalog.sys_prefix_tokens;
  r.reuse_len = r.skeleton.size() * catalog.chunk_tokens;
  r.suffix_len = suffix_len;
  r.token_path = serialize_tokens(r, catalog);
  return r;
}

inline bool is_hot_request(const Request& r, const SegmentCatalog& catalog) {
  return std::any_of(r.skeleton.begin(), r.skeleton.end(),
                     [&](SegmentId s) { return catalog.is_hot(s); });
}

namespace detail {

/// Draws `count` distinct ids from `pool` (rejection against a seen-set), appending to `out`.
inline void sample_distinct(Rng& rng, std::span<const SegmentId> pool, std::size_t count,
                            std::vector<SegmentId>& out) {
  std::unordered_set<SegmentId> seen(out.begin(), out.end());
  std::size_t available = 0;
  for (SegmentId s : pool) available += seen.count(s) ? 0 : 1;
  if (count > available) throw ConfigError("workload: k exceeds the available segment pool");
  while (count > 0) {
    const SegmentId s = pool[uniform_index(rng, pool.size())];
    if (seen.insert(s).second) {
      out.push_back(s);
      --count;
    }
  }
}

inline std::vector<SegmentId> all_segments(const SegmentCatalog& c) {
  std::vector<SegmentId> v(c.num_segments);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<SegmentId>(i);
  return v;
}

inline std::vector<SegmentId> cold_segments(const SegmentCatalog& c) {
  std::vector<SegmentId> v;
  for (std::size_t i = 0; i < c.num_segments; ++i)
    if (!c.is_hot(static_cast<SegmentId>(i))) v.push_back(static_cast<SegmentId>(i));
  return v;
}

}  // namespace detail

/// Samples segment skeletons for one trace. Holds the precomputed Zipf table and pools.
class RequestSampler {
 public:
  RequestSampler(const SegmentCatalog& catalog, const WorkloadConfig& config)
      : catalog_(catalog),
        config_(config),
        zipf_(std::max<std::size_t>(catalog.hot_set.size(), 1), config.zipf_alpha),
        all_(detail::all_segments(catalog)),
        cold_(detail::cold_segments(catalog)) {
    config.validate(catalog);
  }

  Request operator()(Rng& rng, RequestId id, double arrival_time) const {
    std::vector<SegmentId> skeleton;
    skeleton.reserve(config_.k);
    const bool hot = !catalog_.hot_set.empty() && uniform01(rng) < config_.r_hot;
    if (hot) {
      skeleton.push_back(catalog_.hot_set[zipf_(rng)]);
      detail::sample_distinct(rng, all_, config_.k - 1, skeleton);
    } else {
      detail::sample_distinct(rng, cold_, config_.k, skeleton);
    }
    return make_request(id, arrival_time, std::move(skeleton), config_.suffix_tokens,
                        config_.reorderable, catalog_);
  }

 private:
  const SegmentCatalog& catalog_;
  WorkloadConfig config_;
  ZipfSampler zipf_;
  std::vector<SegmentId> all_;
  std::vector<SegmentId> cold_;
};

inline Request sample_request(Rng& rng, const SegmentCatalog& catalog, const WorkloadConfig& config,
                              RequestId id, double arrival_time) {
  return RequestSampler(catalog, config)(rng, id, arrival_time);
}

struct Trace {
  SegmentCatalog catalog;
  std::vector<Request> requests;
  std::optional<WorkloadConfig> config;

  void validate() const {
    catalog.validate();
    std::unordered_set<RequestId> ids;
    for (std::size_t i = 0; i < requests.size(); ++i) {
      const Request& r = requests[i];
      if (i > 0 && r.arrival_time < requests[i - 1].arrival_time)
        throw ValidationError("trace: arrival times decrease at request " + std::to_string(r.id));
      if (!ids.insert(r.id).second)
        throw ValidationError("trace: duplicate request id " + std::to_string(r.id));
      for (SegmentId s : r.skeleton)
        if (s >= catalog.num_segments)
          throw ValidationError("trace: request " + std::to_string(r.id) + " references unknown segment");
    }
  }

  bool operator==(const Trace&) const = default;
};

/// Poisson arrivals at `config.qps`; a pure function of (config, catalog).
inline Trace generate_trace(const WorkloadConfig& config, const SegmentCatalog& catalog) {
  config.validate(catalog);
  Trace trace{catalog, {}, config};
  trace.requests.reserve(config.num_requests);
  Rng rng(config.seed);
  const RequestSampler sampler(trace.catalog, config);
  double t = 0.0;
  for (std::size_t i = 0; i < config.num_requests; ++i) {
    t += exponential(rng, config.qps);
    trace.requests.push_back(sampler(rng, static_cast<RequestId>(i), t));
  }
  return trace;
}

// JSON (de)serialization helpers shared with the experiment runner.

inline void to_json(nlohmann::json& j, const SegmentCatalog& c) {
  j = {{"num_segments", c.num_segments},
       {"chunk_tokens", c.chunk_tokens},
       {"hot_set", c.hot_set},
       {"sys_prefix_tokens", c.sys_prefix_tokens}};
}

inline void from_json(const nlohmann::json& j, SegmentCatalog& c) {
  j.at("num_segments").get_to(c.num_segments);
  j.at("chunk_tokens").get_to(c.chunk_tokens);
  j.at("hot_set").get_to(c.hot_set);
  j.at("sys_prefix_tokens").get_to(c.sys_prefix_tokens);
}

inline void to_json(nlohmann::json& j, const WorkloadConfig& c) {
  j = {{"qps", c.qps},
       {"num_requests", c.num_requests},
       {"k", c.k},
       {"r_hot", c.r_hot},
       {"zipf_alpha", c.zipf_alpha},
       {"suffix_tokens", c.suffix_tokens},
       {"reorderable", c.reorderable},
       {"seed", c.seed}};
}

/// Missing keys keep their defaults.
inline void from_json(const nlohmann::json& j, WorkloadConfig& c) {
  c.qps = j.value("qps", c.qps);
  c.num_requests = j.value("num_requests", c.num_requests);
  c.k = j.value("k", c.k);
  c.r_hot = j.value("r_hot", c.r_hot);
  c.zipf_alpha = j.value("zipf_alpha", c.zipf_alpha);
  c.suffix_tokens = j.value("suffix_tokens", c.suffix_tokens);
  c.reorderable = j.value("reorderable", c.reorderable);
  c.seed = j.value("seed", c.seed);
}

inline void save_trace(const Trace& trace, std::ostream& out) {
  nlohmann::json header = {{"catalog", trace.catalog}};
  if (trace.config) header["config"] = *trace.config;
  out << header.dump() << '\n';
  for (const Request& r : trace.requests) {
    nlohmann::json line = {{"id", r.id},
                           {"arrival_time", r.arrival_time},
                           {"skeleton", r.skeleton},
                           {"suffix_tokens", r.suffix_len},
                           {"reorderable", r.reorderable}};
    out << line.dump() << '\n';
  }
}

/// Reads the JSON-lines format written by save_trace. Token paths are re-derived.
inline Trace load_trace(std::istream& in) {
  Trace trace;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(line_no, std::string("malformed JSON: ") + e.what());
    }
    try {
      if (!have_header) {
        trace.catalog = j.at("catalog").get<SegmentCatalog>();
        if (j.contains("config")) trace.config = j.at("config").get<WorkloadConfig>();
        try {
          trace.catalog.validate();
        } catch (const ConfigError& e) {
          throw ParseError(line_no, e.what());
        }
        have_header = true;
        continue;
      }
      const auto suffix = j.at("suffix_tokens").get<std::size_t>();
      if (suffix >= kMaxSuffixTokens) throw ParseError(line_no, "suffix_tokens too large");
      Request r = make_request(j.at("id").get<RequestId>(), j.at("arrival_time").get<double>(),
                               j.at("skeleton").get<std::vector<SegmentId>>(), suffix,
                               j.value("reorderable", true), trace.catalog);
      if (!trace.requests.empty() && r.arrival_time < trace.requests.back().arrival_time)
        throw ValidationError("line " + std::to_string(line_no) + ": arrival_time decreases");
      trace.requests.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line_no, std::string("bad record: ") + e.what());
    }
  }
  if (!have_header) throw ParseError(line_no, "missing catalog header");
  trace.validate();
  return trace;
}

}  // namespace prefixsim
