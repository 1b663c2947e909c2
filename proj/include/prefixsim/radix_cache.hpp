#pragma once

// Token-exact radix-tree KV cache. Nodes carry reference counts for in-flight
// requests, region ownership (system / reusable segment / private suffix), and
// optional anchor metadata at exported prompt offsets. Eviction is leaf-only and
// driven by a min-heap with lazy key revalidation.

#include <algorithm>
#include <cctype>
#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <queue>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "prefixsim/errors.hpp"
#include "prefixsim/workload.hpp"

namespace prefixsim {

using NodeId = std::uint32_t;

enum class EvictionPolicy { DART, LRU, LRU_ACTIVE, LFU };

inline std::string_view to_string(EvictionPolicy p) {
  switch (p) {
    case EvictionPolicy::DART: return "DART";
    case EvictionPolicy::LRU: return "LRU";
    case EvictionPolicy::LRU_ACTIVE: return "LRU_ACTIVE";
    case EvictionPolicy::LFU: return "LFU";
  }
  return "?";
}

/// Case-insensitive.
inline EvictionPolicy parse_policy(std::string_view raw) {
  std::string name(raw);
  for (char& ch : name) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  if (name == "DART") return EvictionPolicy::DART;
  if (name == "LRU") return EvictionPolicy::LRU;
  if (name == "LRU_ACTIVE") return EvictionPolicy::LRU_ACTIVE;
  if (name == "LFU") return EvictionPolicy::LFU;
  throw ConfigError("unknown policy '" + std::string(raw) + "'");
}

enum class RegionKind { System, Reusable, Private };

/// Per-segment scheduler counters: queued (g), active (a), next batch (n).
struct CounterSnapshot {
  std::uint64_t g = 0;
  std::uint64_t a = 0;
  std::uint64_t n = 0;

  bool operator==(const CounterSnapshot&) const = default;
};

struct AnchorMeta {
  RegionKind kind = RegionKind::Private;
  std::optional<SegmentId> segment;  // set iff kind == Reusable
  std::size_t prompt_offset = 0;
  CounterSnapshot counters;
};

/// An exported boundary: the region of `kind` ends at `offset` in the serialized prompt.
struct AnchorSpec {
  std::size_t offset = 0;
  RegionKind kind = RegionKind::Private;
  std::optional<SegmentId> segment;
};

/// Lexicographic (cls, priority, last_access); smaller keys are evicted first.
struct EvictKey {
  int cls = 0;
  double priority = 0.0;
  std::uint64_t last_access = 0;

  auto operator<=>(const EvictKey&) const = default;
};

struct CacheConfig {
  std::size_t capacity_tokens = 1 << 20;
  EvictionPolicy policy = EvictionPolicy::DART;
  std::size_t protect_budget = 32;

  void validate() const {
    if (capacity_tokens == 0) throw ConfigError("cache: capacity_tokens must be positive");
  }
};

struct RadixNode {
  NodeId id = 0;
  NodeId parent = 0;
  std::vector<Token> edge;
  std::map<Token, NodeId> children;  // keyed by first edge token
  std::size_t ref_count = 0;
  std::uint64_t last_access = 0;
  std::uint64_t access_count = 0;
  std::size_t end_offset = 0;  // prompt offset at the end of this edge
  RegionKind owner = RegionKind::Private;
  std::optional<SegmentId> segment;
  std::optional<AnchorMeta> anchor;
  bool attached = true;
};

struct MatchResult {
  std::size_t hit_length = 0;
  std::vector<NodeId> path;  // root excluded; last node may be partially matched
};

struct DetachEvent {
  NodeId id = 0;
  std::size_t tokens = 0;
  EvictKey key;
  std::vector<Token> full_path;  // root-to-node tokens, filled only when a listener is set
};

using PriorityMap = std::unordered_map<SegmentId, double>;
using CounterMap = std::unordered_map<SegmentId, CounterSnapshot>;

class RadixCache {
 public:
  static constexpr NodeId kRoot = 0;

  explicit RadixCache(CacheConfig config) : config_(config) {
    config_.validate();
    nodes_.emplace_back();
  }

  const CacheConfig& config() const { return config_; }
  std::size_t resident_tokens() const { return resident_; }
  std::size_t capacity() const { return config_.capacity_tokens; }
  const RadixNode& node(NodeId id) const { return nodes_.at(id); }
  std::size_t node_count() const { return nodes_.size(); }
  std::uint64_t clock() const { return clock_; }
  const std::unordered_set<NodeId>& protected_set() const { return protected_; }
  const PriorityMap& dispatch_priorities() const { return priorities_; }

  void set_detach_listener(std::function<void(const DetachEvent&)> fn) { on_detach_ = std::move(fn); }

  /// Longest resident prefix of `tokens`; refreshes recency and hit counts along it.
  MatchResult match_prefix(std::span<const Token> tokens) {
    ++clock_;
    MatchResult result;
    NodeId cur = kRoot;
    std::size_t pos = 0;
    while (pos < tokens.size()) {
      const auto it = nodes_[cur].children.find(tokens[pos]);
      if (it == nodes_[cur].children.end()) break;
      RadixNode& child = nodes_[it->second];
      const std::size_t m = common_prefix(child.edge, tokens.subspan(pos));
      child.last_access = clock_;
      ++child.access_count;
      result.path.push_back(child.id);
      pos += m;
      if (m < child.edge.size()) break;
      cur = child.id;
    }
    result.hit_length = pos;
    return result;
  }

  /// Makes `tokens` resident and pins every node on it. Splits edges so each
  /// anchor offset lands on a node boundary. Evicts to make room if needed.
  std::vector<NodeId> insert_path(std::span<const Token> tokens, std::span<const AnchorSpec> anchors) {
    std::vector<AnchorSpec> cuts = normalize_anchors(anchors, tokens.size());
    ++clock_;

    std::vector<NodeId> path;
    NodeId cur = kRoot;
    std::size_t pos = 0;
    std::size_t next_cut = 0;
    while (pos < tokens.size()) {
      const auto it = nodes_[cur].children.find(tokens[pos]);
      if (it == nodes_[cur].children.end()) break;
      const NodeId child = it->second;
      const std::size_t edge_len = nodes_[child].edge.size();
      const std::size_t m = common_prefix(nodes_[child].edge, tokens.subspan(pos));
      while (next_cut < cuts.size() && cuts[next_cut].offset <= pos) ++next_cut;
      std::size_t take = m;
      if (next_cut < cuts.size() && cuts[next_cut].offset < pos + m) take = cuts[next_cut].offset - pos;
      const NodeId upper = take < edge_len ? split(child, take) : child;
      path.push_back(upper);
      pos += take;
      cur = upper;
      if (take == m && m < edge_len) break;
    }

    for (NodeId id : path) ++nodes_[id].ref_count;
    const std::size_t need = tokens.size() - pos;
    if (resident_ + need > config_.capacity_tokens) {
      evict(resident_ + need - config_.capacity_tokens);
      if (resident_ + need > config_.capacity_tokens) {
        // evict() dropped these while pinned; unpinning must requeue them.
        for (NodeId id : path) {
          --nodes_[id].ref_count;
          if (!heap_dirty_ && is_evictable(id)) heap_.push({evict_key(id), id});
        }
        throw CapacityError("cache: cannot free " + std::to_string(need) + " tokens (resident " +
                            std::to_string(resident_) + ", capacity " +
                            std::to_string(config_.capacity_tokens) + ")");
      }
    }
    for (NodeId id : path) nodes_[id].last_access = clock_;

    while (pos < tokens.size()) {
      while (next_cut < cuts.size() && cuts[next_cut].offset <= pos) ++next_cut;
      const std::size_t end = next_cut < cuts.size() ? cuts[next_cut].offset : tokens.size();
      const NodeId id = create_child(cur, tokens.subspan(pos, end - pos));
      RadixNode& n = nodes_[id];
      n.ref_count = 1;
      n.access_count = 1;
      if (next_cut < cuts.size()) {
        n.owner = cuts[next_cut].kind;
        n.segment = cuts[next_cut].segment;
      }
      path.push_back(id);
      cur = id;
      pos = end;
    }

    for (NodeId id : path) attach_anchor(nodes_[id], cuts);
    return path;
  }

  /// Unpins a path returned by insert_path. The chain is re-walked from its last
  /// node so nodes created by later splits are released too. Releasing an
  /// unpinned node is a logic error.
  void release_path(std::span<const NodeId> path) {
    if (path.empty()) return;
    const NodeId leaf = path.back();
    if (leaf == kRoot || leaf >= nodes_.size() || !nodes_[leaf].attached)
      throw std::logic_error("release_path: node " + std::to_string(leaf) + " is not resident");
    for (NodeId cur = leaf; cur != kRoot; cur = nodes_[cur].parent)
      if (nodes_[cur].ref_count == 0)
        throw std::logic_error("release_path: node " + std::to_string(cur) + " is not pinned");
    for (NodeId cur = leaf; cur != kRoot; cur = nodes_[cur].parent) {
      --nodes_[cur].ref_count;
      if (!heap_dirty_ && is_evictable(cur)) heap_.push({evict_key(cur), cur});
    }
  }

  /// Installs the current dispatch-batch priorities and recomputes the protected set.
  std::vector<NodeId> set_protection(const PriorityMap& dispatch_priorities) {
    priorities_ = dispatch_priorities;
    protected_.clear();
    heap_dirty_ = true;

    std::vector<NodeId> anchors;
    for (const RadixNode& n : nodes_)
      if (n.attached && n.id != kRoot && n.anchor && n.anchor->kind == RegionKind::Reusable)
        anchors.push_back(n.id);
    std::sort(anchors.begin(), anchors.end(), [&](NodeId x, NodeId y) {
      const SegmentId sx = *nodes_[x].anchor->segment;
      const SegmentId sy = *nodes_[y].anchor->segment;
      const double px = priority_of(sx);
      const double py = priority_of(sy);
      if (px != py) return px > py;
      if (sx != sy) return sx < sy;
      return x < y;
    });
    if (anchors.size() > config_.protect_budget) anchors.resize(config_.protect_budget);
    protected_.insert(anchors.begin(), anchors.end());
    return anchors;
  }

  /// Installs the latest per-segment counters; resident anchors snapshot them.
  void set_counters(const CounterMap& counters) {
    counters_ = counters;
    heap_dirty_ = true;
    for (RadixNode& n : nodes_) {
      if (!n.attached || !n.anchor || !n.anchor->segment) continue;
      const auto it = counters_.find(*n.anchor->segment);
      n.anchor->counters = it == counters_.end() ? CounterSnapshot{} : it->second;
    }
  }

  bool is_evictable(NodeId id) const {
    const RadixNode& n = nodes_[id];
    return id != kRoot && n.attached && n.ref_count == 0 && n.children.empty();
  }

  EvictKey evict_key(NodeId id) const {
    const RadixNode& n = nodes_[id];
    switch (config_.policy) {
      case EvictionPolicy::LRU:
        return {0, 0.0, n.last_access};
      case EvictionPolicy::LFU:
        return {0, static_cast<double>(n.access_count), n.last_access};
      case EvictionPolicy::LRU_ACTIVE: {
        bool active = false;
        if (n.owner == RegionKind::Reusable && n.segment) {
          const auto it = counters_.find(*n.segment);
          active = it != counters_.end() && it->second.a > 0;
        }
        return {active ? 1 : 0, 0.0, n.last_access};
      }
      case EvictionPolicy::DART:
        break;
    }
    if (n.owner == RegionKind::Private) return {0, 0.0, n.last_access};
    if (n.owner == RegionKind::System || protected_.count(id)) return {2, 0.0, n.last_access};
    return {1, n.segment ? priority_of(*n.segment) : 0.0, n.last_access};
  }

  /// Detaches evictable leaves in ascending (key, node id) order until at least
  /// `k_free` tokens are freed or nothing evictable remains. Returns tokens freed.
  std::size_t evict(std::size_t k_free) {
    if (k_free == 0) return 0;
    if (heap_dirty_) rebuild_heap();
    std::size_t freed = 0;
    while (freed < k_free) {
      if (heap_.empty()) rebuild_heap();
      if (heap_.empty()) break;
      const auto [stored, id] = heap_.top();
      heap_.pop();
      if (!is_evictable(id)) continue;
      const EvictKey current = evict_key(id);
      if (current != stored) {
        heap_.push({current, id});
        continue;
      }
      const NodeId parent = nodes_[id].parent;
      freed += detach(id, current);
      if (is_evictable(parent)) heap_.push({evict_key(parent), parent});
    }
    return freed;
  }

  /// Root-to-node token sequence.
  std::vector<Token> full_path(NodeId id) const {
    std::vector<NodeId> chain;
    for (NodeId cur = id; cur != kRoot; cur = nodes_[cur].parent) chain.push_back(cur);
    std::vector<Token> out;
    for (auto it = chain.rbegin(); it != chain.rend(); ++it)
      out.insert(out.end(), nodes_[*it].edge.begin(), nodes_[*it].edge.end());
    return out;
  }

  /// Throws std::logic_error describing the first violated structural invariant.
  void check_invariants() const {
    std::size_t total = 0;
    for (const RadixNode& n : nodes_) {
      if (!n.attached) continue;
      if (n.id != kRoot && n.edge.empty()) throw std::logic_error("empty edge on node " + std::to_string(n.id));
      total += n.edge.size();
      for (const auto& [first, child] : n.children) {
        const RadixNode& c = nodes_[child];
        if (!c.attached || c.parent != n.id || c.edge.front() != first)
          throw std::logic_error("bad child link under node " + std::to_string(n.id));
        if (c.end_offset != n.end_offset + c.edge.size())
          throw std::logic_error("bad end offset on node " + std::to_string(c.id));
      }
    }
    if (total != resident_) throw std::logic_error("resident token counter out of sync");
  }

  /// Deterministic depth-first listing: one line per attached node.
  void dump(std::ostream& out) const {
    out << "root resident=" << resident_ << " capacity=" << config_.capacity_tokens
        << " policy=" << to_string(config_.policy) << '\n';
    dump_children(out, kRoot, 1);
  }

 private:
  using HeapEntry = std::pair<EvictKey, NodeId>;

  static std::size_t common_prefix(std::span<const Token> a, std::span<const Token> b) {
    const std::size_t n = std::min(a.size(), b.size());
    std::size_t i = 0;
    while (i < n && a[i] == b[i]) ++i;
    return i;
  }

  static std::vector<AnchorSpec> normalize_anchors(std::span<const AnchorSpec> anchors, std::size_t len) {
    std::vector<AnchorSpec> cuts;
    for (const AnchorSpec& a : anchors) {
      if (a.offset > len) throw std::invalid_argument("insert_path: anchor offset beyond path length");
      if (!cuts.empty() && a.offset < cuts.back().offset)
        throw std::invalid_argument("insert_path: anchor offsets must be sorted");
      if (a.kind == RegionKind::Reusable && !a.segment)
        throw std::invalid_argument("insert_path: reusable anchor without segment id");
      if (a.offset == 0 || (!cuts.empty() && a.offset == cuts.back().offset)) continue;
      cuts.push_back(a);
    }
    return cuts;
  }

  double priority_of(SegmentId s) const {
    const auto it = priorities_.find(s);
    return it == priorities_.end() ? 0.0 : it->second;
  }

  NodeId create_child(NodeId parent, std::span<const Token> edge) {
    const auto id = static_cast<NodeId>(nodes_.size());
    RadixNode n;
    n.id = id;
    n.parent = parent;
    n.edge.assign(edge.begin(), edge.end());
    n.end_offset = nodes_[parent].end_offset + edge.size();
    n.last_access = clock_;
    nodes_.push_back(std::move(n));
    nodes_[parent].children.emplace(edge.front(), id);
    resident_ += edge.size();
    return id;
  }

  // Splits `id` after `at` tokens; returns the new upper node. The original node
  // keeps its id, children, pins, and anchor as the lower half.
  NodeId split(NodeId id, std::size_t at) {
    const auto upper = static_cast<NodeId>(nodes_.size());
    RadixNode u;
    {
      RadixNode& lower = nodes_[id];
      u.id = upper;
      u.parent = lower.parent;
      u.edge.assign(lower.edge.begin(), lower.edge.begin() + static_cast<std::ptrdiff_t>(at));
      u.end_offset = lower.end_offset - (lower.edge.size() - at);
      u.ref_count = lower.ref_count;
      u.last_access = lower.last_access;
      u.access_count = lower.access_count;
      u.owner = lower.owner;
      u.segment = lower.segment;
      lower.edge.erase(lower.edge.begin(), lower.edge.begin() + static_cast<std::ptrdiff_t>(at));
      lower.parent = upper;
      u.children.emplace(lower.edge.front(), id);
    }
    nodes_.push_back(std::move(u));
    nodes_[nodes_[upper].parent].children[nodes_[upper].edge.front()] = upper;
    return upper;
  }

  void attach_anchor(RadixNode& n, const std::vector<AnchorSpec>& cuts) {
    if (n.anchor) return;
    const auto it = std::lower_bound(cuts.begin(), cuts.end(), n.end_offset,
                                     [](const AnchorSpec& a, std::size_t off) { return a.offset < off; });
    if (it == cuts.end() || it->offset != n.end_offset) return;
    AnchorMeta meta{it->kind, it->segment, it->offset, {}};
    if (meta.segment) {
      const auto c = counters_.find(*meta.segment);
      if (c != counters_.end()) meta.counters = c->second;
    }
    n.anchor = meta;
  }

  void rebuild_heap() {
    heap_ = {};
    for (const RadixNode& n : nodes_)
      if (is_evictable(n.id)) heap_.push({evict_key(n.id), n.id});
    heap_dirty_ = false;
  }

  std::size_t detach(NodeId id, const EvictKey& key) {
    RadixNode& n = nodes_[id];
    DetachEvent ev{id, n.edge.size(), key, {}};
    if (on_detach_) ev.full_path = full_path(id);
    nodes_[n.parent].children.erase(n.edge.front());
    resident_ -= n.edge.size();
    n.attached = false;
    n.edge.clear();
    n.edge.shrink_to_fit();
    n.anchor.reset();
    protected_.erase(id);
    if (on_detach_) on_detach_(ev);
    return ev.tokens;
  }

  static std::string_view region_name(RegionKind k) {
    switch (k) {
      case RegionKind::System: return "sys";
      case RegionKind::Reusable: return "reuse";
      case RegionKind::Private: return "priv";
    }
    return "?";
  }

  void dump_children(std::ostream& out, NodeId id, int depth) const {
    for (const auto& [first, child] : nodes_[id].children) {
      const RadixNode& c = nodes_[child];
      const EvictKey k = evict_key(child);
      out << std::string(static_cast<std::size_t>(depth) * 2, ' ') << '#' << c.id << " len=" << c.edge.size()
          << " end=" << c.end_offset << " ref=" << c.ref_count << ' ' << region_name(c.owner);
      if (c.segment) out << ':' << *c.segment;
      if (c.anchor) out << " anchor";
      if (protected_.count(child)) out << " protected";
      out << " key=(" << k.cls << ',' << k.priority << ',' << k.last_access << ")\n";
      dump_children(out, child, depth + 1);
    }
  }

  CacheConfig config_;
  std::vector<RadixNode> nodes_;
  std::size_t resident_ = 0;
  std::uint64_t clock_ = 0;
  PriorityMap priorities_;
  CounterMap counters_;
  std::unordered_set<NodeId> protected_;
  std::priority_queue<HeapEntry, std::vector<HeapEntry>, std::greater<>> heap_;
  bool heap_dirty_ = true;
  std::function<void(const DetachEvent&)> on_detach_;
};

}  // namespace prefixsim
