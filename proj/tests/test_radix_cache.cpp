#include <gtest/gtest.h>

#include <sstream>

#include "oracles.hpp"

using namespace prefixsim;

namespace {

std::vector<Token> seq(std::initializer_list<Token> t) { return t; }

RadixCache make_cache(std::size_t capacity, EvictionPolicy p = EvictionPolicy::LRU, std::size_t budget = 32) {
  CacheConfig c;
  c.capacity_tokens = capacity;
  c.policy = p;
  c.protect_budget = budget;
  return RadixCache(c);
}

}  // namespace

TEST(RadixCache, MatchOnEmptyCacheIsZero) {
  RadixCache c = make_cache(100);
  EXPECT_EQ(c.match_prefix(seq({1, 2, 3})).hit_length, 0u);
}

TEST(RadixCache, InsertThenMatchFullAndPartial) {
  RadixCache c = make_cache(100);
  auto pins = c.insert_path(seq({1, 2, 3, 4}), {});
  EXPECT_EQ(c.resident_tokens(), 4u);
  EXPECT_EQ(c.match_prefix(seq({1, 2, 3, 4})).hit_length, 4u);
  EXPECT_EQ(c.match_prefix(seq({1, 2, 9})).hit_length, 2u);
  EXPECT_EQ(c.match_prefix(seq({1, 2, 3, 4, 5})).hit_length, 4u);
  EXPECT_EQ(c.match_prefix(seq({7})).hit_length, 0u);
  c.release_path(pins);
  c.check_invariants();
}

TEST(RadixCache, DivergentInsertSplitsSharedEdge) {
  RadixCache c = make_cache(100);
  const auto a = c.insert_path(seq({1, 2, 3, 4}), {});
  const auto b = c.insert_path(seq({1, 2, 7, 8}), {});
  // shared [1,2] becomes its own node with two children
  EXPECT_EQ(c.resident_tokens(), 6u);
  ASSERT_EQ(b.size(), 2u);
  const RadixNode& shared = c.node(b[0]);
  EXPECT_EQ(shared.edge, seq({1, 2}));
  EXPECT_EQ(shared.children.size(), 2u);
  EXPECT_EQ(shared.ref_count, 2u);
  EXPECT_EQ(c.node(a[0]).edge, seq({3, 4}));
  EXPECT_EQ(c.node(a[0]).parent, b[0]);
  c.check_invariants();
  c.release_path(a);
  c.release_path(b);
  EXPECT_EQ(c.node(b[0]).ref_count, 0u);
}

TEST(RadixCache, AnchorsCutNodesAtRegionBoundaries) {
  const SegmentCatalog cat{4, 3, {}, 2};
  const Request r = make_request(0, 0.0, {1, 3}, 2, true, cat);
  RadixCache c = make_cache(100, EvictionPolicy::DART);
  const auto path = c.insert_path(r.token_path, anchor_specs(r));
  ASSERT_EQ(path.size(), 4u);  // sys | seg 1 | seg 3 | suffix
  EXPECT_EQ(c.node(path[0]).owner, RegionKind::System);
  EXPECT_EQ(c.node(path[1]).owner, RegionKind::Reusable);
  EXPECT_EQ(c.node(path[1]).segment, 1u);
  EXPECT_EQ(c.node(path[2]).segment, 3u);
  EXPECT_EQ(c.node(path[3]).owner, RegionKind::Private);
  EXPECT_EQ(c.node(path[2]).end_offset, 2u + 6u);
  ASSERT_TRUE(c.node(path[2]).anchor.has_value());
  EXPECT_EQ(c.node(path[2]).anchor->prompt_offset, 8u);
}

TEST(RadixCache, InsertRejectsBadAnchors) {
  RadixCache c = make_cache(100);
  const std::vector<AnchorSpec> unsorted{{3, RegionKind::System, {}}, {2, RegionKind::Private, {}}};
  EXPECT_THROW(c.insert_path(seq({1, 2, 3, 4}), unsorted), std::invalid_argument);
  const std::vector<AnchorSpec> beyond{{9, RegionKind::Private, {}}};
  EXPECT_THROW(c.insert_path(seq({1, 2, 3, 4}), beyond), std::invalid_argument);
  const std::vector<AnchorSpec> no_segment{{2, RegionKind::Reusable, {}}};
  EXPECT_THROW(c.insert_path(seq({1, 2, 3, 4}), no_segment), std::invalid_argument);
}

TEST(RadixCache, RandomInsertsMatchBruteForceLcpAndTrieSize) {
  Rng rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    RadixCache c = make_cache(1 << 20);
    std::vector<std::vector<Token>> inserted;
    for (int i = 0; i < 30; ++i) {
      std::vector<Token> p(1 + uniform_index(rng, 12));
      for (auto& t : p) t = uniform_index(rng, 3);
      if (uniform01(rng) < 0.5) {
        c.release_path(c.insert_path(p, {}));
        inserted.push_back(p);
      }
      std::vector<Token> q(uniform_index(rng, 14));
      for (auto& t : q) t = uniform_index(rng, 3);
      ASSERT_EQ(c.match_prefix(q).hit_length, oracle::max_lcp(inserted, q));
    }
    ASSERT_EQ(c.resident_tokens(), oracle::trie_size(inserted));
    c.check_invariants();
  }
}

TEST(RadixCache, ReleaseBalancesPinsAcrossLaterSplits) {
  RadixCache c = make_cache(100);
  const auto a = c.insert_path(seq({1, 2, 3, 4, 5}), {});
  const auto b = c.insert_path(seq({1, 2, 3, 9}), {});  // splits a's edge after a was pinned
  const auto d = c.insert_path(seq({1, 7}), {});        // splits again
  c.release_path(a);
  c.release_path(b);
  c.release_path(d);
  for (NodeId i = 1; i < c.node_count(); ++i)
    if (c.node(i).attached) {
      EXPECT_EQ(c.node(i).ref_count, 0u) << "node " << i;
    }
  EXPECT_THROW(c.release_path(a), std::logic_error);
  c.evict(1000);
  EXPECT_EQ(c.resident_tokens(), 0u);
}

TEST(RadixCache, PinnedPathsSurviveEviction) {
  RadixCache c = make_cache(8);
  const auto a = c.insert_path(seq({1, 2, 3, 4}), {});
  const auto b = c.insert_path(seq({5, 6, 7, 8}), {});
  c.release_path(b);
  // needs 4 tokens: only b is unpinned
  const auto d = c.insert_path(seq({9, 9, 9, 9}), {});
  EXPECT_EQ(c.match_prefix(seq({1, 2, 3, 4})).hit_length, 4u);
  EXPECT_EQ(c.match_prefix(seq({5, 6, 7, 8})).hit_length, 0u);
  EXPECT_THROW(c.insert_path(seq({4, 4}), {}), CapacityError);
  c.check_invariants();
  c.release_path(a);
  c.release_path(d);
}

TEST(RadixCache, CapacityFailureLeavesPinsUnchanged) {
  RadixCache c = make_cache(6);
  const auto a = c.insert_path(seq({1, 2, 3, 4}), {});
  EXPECT_THROW(c.insert_path(seq({1, 2, 8, 8, 8}), {}), CapacityError);
  c.check_invariants();
  for (NodeId i = 1; i < c.node_count(); ++i)
    if (c.node(i).attached) {
      EXPECT_EQ(c.node(i).ref_count, 1u);
    }
  c.release_path(a);
}

TEST(RadixCache, CapacityFailureRequeuesUnpinnedLeaf) {
  RadixCache c = make_cache(6);
  c.release_path(c.insert_path(seq({1, 2}), {}));
  c.release_path(c.insert_path(seq({5, 5}), {}));
  // {1,2} is pinned while the failed insert evicts, then unpinned again.
  EXPECT_THROW(c.insert_path(seq({1, 2, 7, 7, 7, 7, 7}), {}), CapacityError);
  c.release_path(c.insert_path(seq({9}), {}));
  c.evict(1);
  EXPECT_EQ(c.match_prefix(seq({1, 2})).hit_length, 0u);
  EXPECT_EQ(c.match_prefix(seq({9})).hit_length, 1u);
}

TEST(RadixCache, LruEvictsLeastRecentLeafFirst) {
  RadixCache c = make_cache(100);
  c.release_path(c.insert_path(seq({1, 1}), {}));
  c.release_path(c.insert_path(seq({2, 2}), {}));
  c.release_path(c.insert_path(seq({3, 3}), {}));
  c.match_prefix(seq({1, 1}));
  std::vector<NodeId> order;
  c.set_detach_listener([&](const DetachEvent& e) { order.push_back(e.id); });
  c.evict(2);
  ASSERT_EQ(order.size(), 1u);
  EXPECT_EQ(c.match_prefix(seq({2, 2})).hit_length, 0u);
  EXPECT_EQ(c.match_prefix(seq({1, 1})).hit_length, 2u);
}

TEST(RadixCache, LfuPrefersFewestHits) {
  RadixCache c = make_cache(100, EvictionPolicy::LFU);
  c.release_path(c.insert_path(seq({1, 1}), {}));
  c.release_path(c.insert_path(seq({2, 2}), {}));
  for (int i = 0; i < 3; ++i) c.match_prefix(seq({1, 1}));
  c.match_prefix(seq({2, 2}));  // more recent, but fewer hits
  c.evict(1);
  EXPECT_EQ(c.match_prefix(seq({2, 2})).hit_length, 0u);
  EXPECT_EQ(c.match_prefix(seq({1, 1})).hit_length, 2u);
}

TEST(RadixCache, DartKeyClasses) {
  const SegmentCatalog cat{8, 2, {}, 1};
  RadixCache c = make_cache(200, EvictionPolicy::DART, 1);
  const Request r1 = make_request(0, 0.0, {3}, 1, true, cat);
  const Request r2 = make_request(1, 0.0, {5}, 1, true, cat);
  const auto p1 = c.insert_path(r1.token_path, anchor_specs(r1));
  const auto p2 = c.insert_path(r2.token_path, anchor_specs(r2));
  c.set_protection({{3, 10.0}, {5, 4.0}});
  ASSERT_EQ(p2.size(), 3u);  // sys shared, seg 5, suffix
  EXPECT_EQ(c.evict_key(p1[0]).cls, 2);  // system prefix
  EXPECT_EQ(c.evict_key(p1[1]).cls, 2);  // protected anchor (budget 1, highest priority)
  const EvictKey k5 = c.evict_key(p2[1]);
  EXPECT_EQ(k5.cls, 1);
  EXPECT_EQ(k5.priority, 4.0);
  EXPECT_EQ(c.evict_key(p2[2]).cls, 0);  // private suffix
  EXPECT_EQ(c.protected_set().size(), 1u);
}

TEST(RadixCache, ProtectedSetIsTopPriorityAnchorsWithIdTieBreak) {
  const SegmentCatalog cat{10, 2, {}, 1};
  RadixCache c = make_cache(1000, EvictionPolicy::DART, 3);
  std::map<SegmentId, NodeId> anchor_of;
  for (SegmentId s = 0; s < 10; ++s) {
    const Request r = make_request(s, 0.0, {s}, 1, true, cat);
    anchor_of[s] = c.insert_path(r.token_path, anchor_specs(r))[1];
  }
  const PriorityMap p{{0, 1.0}, {1, 5.0}, {2, 5.0}, {3, 5.0}, {4, 2.0}, {7, 9.0}};
  const auto chosen = c.set_protection(p);
  // sort oracle over (priority desc, segment asc)
  std::vector<std::pair<double, SegmentId>> all;
  for (SegmentId s = 0; s < 10; ++s) all.push_back({p.count(s) ? p.at(s) : 0.0, s});
  std::sort(all.begin(), all.end(), [](auto a, auto b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
  ASSERT_EQ(chosen.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(chosen[i], anchor_of[all[i].second]);
}

TEST(RadixCache, LruActiveShieldsActiveSegments) {
  const SegmentCatalog cat{8, 2, {}, 0};
  RadixCache c = make_cache(200, EvictionPolicy::LRU_ACTIVE);
  const Request r1 = make_request(0, 0.0, {3}, 0, true, cat);
  const Request r2 = make_request(1, 0.0, {5}, 0, true, cat);
  c.release_path(c.insert_path(r1.token_path, anchor_specs(r1)));
  c.release_path(c.insert_path(r2.token_path, anchor_specs(r2)));
  c.set_counters({{3, {0, 1, 0}}});
  c.evict(1);
  EXPECT_EQ(c.match_prefix(r1.token_path).hit_length, 2u);
  EXPECT_EQ(c.match_prefix(r2.token_path).hit_length, 0u);
}

TEST(RadixCache, HeapEvictionMatchesRescanOracle) {
  for (EvictionPolicy p : {EvictionPolicy::DART, EvictionPolicy::LRU, EvictionPolicy::LRU_ACTIVE, EvictionPolicy::LFU}) {
    std::size_t detached = 0;
    for (std::uint64_t seed = 1; seed <= 400; ++seed) {
      const auto r = oracle::eviction_instance(seed, p);
      ASSERT_TRUE(r.mismatch.empty()) << to_string(p) << " " << r.mismatch;
      detached += r.detached;
    }
    EXPECT_GT(detached, 100u) << "instances exercised too little eviction";
  }
}

TEST(RadixCache, DumpIsDeterministic) {
  auto build = [] {
    const SegmentCatalog cat{4, 2, {}, 1};
    RadixCache c = make_cache(100, EvictionPolicy::DART);
    for (RequestId i = 0; i < 3; ++i) {
      const Request r = make_request(i, 0.0, {static_cast<SegmentId>(i), 3}, 1, true, cat);
      c.release_path(c.insert_path(r.token_path, anchor_specs(r)));
    }
    std::ostringstream out;
    c.dump(out);
    return out.str();
  };
  const std::string a = build();
  EXPECT_EQ(a, build());
  EXPECT_NE(a.find("root resident=16"), std::string::npos) << a;
}

TEST(RadixCache, ParsePolicyNames) {
  EXPECT_EQ(parse_policy("DART"), EvictionPolicy::DART);
  EXPECT_EQ(parse_policy("lru"), EvictionPolicy::LRU);
  EXPECT_EQ(parse_policy("LRU_ACTIVE"), EvictionPolicy::LRU_ACTIVE);
  EXPECT_EQ(parse_policy("LFU"), EvictionPolicy::LFU);
  EXPECT_THROW(parse_policy("FIFO"), ConfigError);
}
