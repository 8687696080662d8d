#include <gtest/gtest.h>

#include <algorithm>
#include <limits>

#include "deepcamp/mining.hpp"
#include "oracles.hpp"

using namespace deepcamp;

namespace {

Transaction tx(std::int64_t id, std::vector<int> items, int label = 0) {
  std::sort(items.begin(), items.end());
  return {id, std::move(items), label};
}

std::vector<const Transaction*> ptrs(const std::vector<Transaction>& ts) {
  std::vector<const Transaction*> out;
  for (const auto& t : ts) out.push_back(&t);
  return out;
}

PatternCluster cluster(std::int64_t id, std::vector<std::int64_t> members, int category = 0, double conf = 0.9) {
  PatternCluster c;
  c.cluster_id = id;
  c.category = category;
  c.patterns = {{{static_cast<int>(id)}, category, 0.5, conf}};
  std::sort(members.begin(), members.end());
  c.members = std::move(members);
  return c;
}

std::vector<std::int64_t> range(std::int64_t lo, std::int64_t hi) {
  std::vector<std::int64_t> v;
  for (auto i = lo; i <= hi; ++i) v.push_back(i);
  return v;
}

}  // namespace

TEST(Binarize, TopKByValue) {
  FeatureMatrix f;
  f.append(7, std::vector<double>{0.9, 0.1, 0.5, 0.7});
  const auto ts = binarize(f, 2);
  ASSERT_EQ(ts.size(), 1u);
  EXPECT_EQ(ts[0].items, (std::vector<int>{0, 3}));
  EXPECT_EQ(ts[0].patch_id, 7);
}

TEST(Binarize, TiesGoToLowerIndex) {
  FeatureMatrix f;
  f.append(0, std::vector<double>{0.3, 0.3, 0.3, 0.3});
  EXPECT_EQ(binarize(f, 2)[0].items, (std::vector<int>{0, 1}));
}

TEST(Binarize, EveryTransactionHasExactlyKItems) {
  Rng r(1);
  FeatureMatrix f;
  for (int i = 0; i < 1000; ++i) {
    std::vector<double> row(32);
    for (auto& v : row) v = r.normal();
    f.append(i, row);
  }
  for (const auto& t : binarize(f, 20)) {
    EXPECT_EQ(t.items.size(), 20u);
    EXPECT_TRUE(std::is_sorted(t.items.begin(), t.items.end()));
    EXPECT_LT(t.items.back(), 32);
  }
}

TEST(Binarize, KAboveDimRejected) {
  FeatureMatrix f;
  f.append(0, std::vector<double>{1, 2, 3});
  EXPECT_THROW(binarize(f, 4), ConfigError);
}

TEST(Apriori, SmallWorkedExample) {
  // {A,B},{A,B},{A,C} with A=0, B=1, C=2
  const std::vector<Transaction> ts{tx(0, {0, 1}), tx(1, {0, 1}), tx(2, {0, 2})};
  MiningConfig cfg;
  cfg.min_support = 0.6;
  cfg.max_itemset_size = 2;
  const auto got = mine_frequent_itemsets(ptrs(ts), cfg);
  ASSERT_EQ(got.size(), 3u);
  EXPECT_EQ(got[0].items, (std::vector<int>{0}));
  EXPECT_DOUBLE_EQ(got[0].support, 1.0);
  EXPECT_EQ(got[1].items, (std::vector<int>{1}));
  EXPECT_DOUBLE_EQ(got[1].support, 2.0 / 3.0);
  EXPECT_EQ(got[2].items, (std::vector<int>{0, 1}));
  EXPECT_DOUBLE_EQ(got[2].support, 2.0 / 3.0);
}

TEST(Apriori, FullSupportKeepsOnlyUniversalItemsets) {
  const std::vector<Transaction> ts{tx(0, {1, 2, 5}), tx(1, {1, 2, 3}), tx(2, {0, 1, 2})};
  MiningConfig cfg;
  cfg.min_support = 1.0;
  const auto got = mine_frequent_itemsets(ptrs(ts), cfg);
  ASSERT_EQ(got.size(), 3u);
  EXPECT_EQ(got[2].items, (std::vector<int>{1, 2}));
  for (const auto& f : got) EXPECT_EQ(f.count, 3u);
}

TEST(Apriori, DisjointSingletonsGiveNothing) {
  std::vector<Transaction> ts;
  for (int i = 0; i < 5; ++i) ts.push_back(tx(i, {i}));
  MiningConfig cfg;
  cfg.min_support = 0.21;
  EXPECT_TRUE(mine_frequent_itemsets(ptrs(ts), cfg).empty());
}

TEST(Apriori, InvalidSupportRejected) {
  MiningConfig cfg;
  cfg.min_support = 1.0 + 1e-9;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.min_support = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Apriori, MatchesBruteForceOnRandomInstances) {
  Rng r(2024);
  for (int inst = 0; inst < 60; ++inst) {
    const int items = 1 + static_cast<int>(r.below(12));
    const int count = 1 + static_cast<int>(r.below(200));
    const auto ts = dctest::random_transactions(r, items, count, 1);
    MiningConfig cfg;
    cfg.min_support = r.uniform(0.05, 0.9);
    cfg.max_itemset_size = 1 + static_cast<int>(r.below(4));
    EXPECT_EQ(mine_frequent_itemsets(ptrs(ts), cfg), dctest::brute_force_frequent(ptrs(ts), cfg)) << "instance " << inst;
  }
}

TEST(Apriori, DownwardClosure) {
  Rng r(7);
  const auto ts = dctest::random_transactions(r, 10, 150, 1);
  MiningConfig cfg;
  cfg.min_support = 0.15;
  cfg.max_itemset_size = 4;
  const auto got = mine_frequent_itemsets(ptrs(ts), cfg);
  std::set<std::vector<int>> sets;
  for (const auto& f : got) sets.insert(f.items);
  for (const auto& f : got) {
    if (f.items.size() < 2) continue;
    for (std::size_t drop = 0; drop < f.items.size(); ++drop) {
      auto sub = f.items;
      sub.erase(sub.begin() + static_cast<std::ptrdiff_t>(drop));
      EXPECT_TRUE(sets.count(sub));
    }
  }
}

TEST(Patterns, PerfectlyDiscriminativeItem) {
  std::vector<Transaction> ts;
  for (int i = 0; i < 10; ++i) ts.push_back(tx(i, {5, i % 3}, 1));
  for (int i = 0; i < 10; ++i) ts.push_back(tx(10 + i, {i % 3}, 0));
  MiningConfig cfg;
  cfg.max_itemset_size = 1;
  const auto ps = mine_patterns(ts, 1, cfg);
  ASSERT_FALSE(ps.empty());
  EXPECT_EQ(ps[0].itemset, (std::vector<int>{5}));
  EXPECT_DOUBLE_EQ(ps[0].support, 1.0);
  EXPECT_DOUBLE_EQ(ps[0].confidence, 1.0);
  EXPECT_EQ(ps[0].target, 1);
}

TEST(Patterns, SharedItemHasHalfConfidence) {
  std::vector<Transaction> ts;
  for (int i = 0; i < 8; ++i) ts.push_back(tx(i, {3}, i % 2));
  MiningConfig cfg;
  EXPECT_TRUE(mine_patterns(ts, 0, cfg).empty());
  cfg.min_confidence = 0.5;
  const auto ps = mine_patterns(ts, 0, cfg);
  ASSERT_EQ(ps.size(), 1u);
  EXPECT_DOUBLE_EQ(ps[0].confidence, 0.5);
}

TEST(Patterns, MissingTargetRejected) {
  const std::vector<Transaction> ts{tx(0, {1}, 0)};
  EXPECT_THROW(mine_patterns(ts, 3, MiningConfig{}), PreconditionError);
}

TEST(Patterns, MatchBruteForceOnRandomInstances) {
  Rng r(99);
  for (int inst = 0; inst < 60; ++inst) {
    const int items = 1 + static_cast<int>(r.below(12));
    const int count = 2 + static_cast<int>(r.below(199));
    auto ts = dctest::random_transactions(r, items, count, 3);
    ts[0].label = 1;  // target present
    MiningConfig cfg;
    cfg.min_support = r.uniform(0.05, 0.8);
    cfg.min_confidence = r.uniform(0.2, 0.9);
    cfg.max_itemset_size = 1 + static_cast<int>(r.below(3));
    EXPECT_EQ(mine_patterns(ts, 1, cfg), dctest::brute_force_patterns(ts, 1, cfg)) << "instance " << inst;
  }
}

TEST(Merge, ContainmentAlwaysMerges) {
  for (double th : {0.1, 0.5, 1.0}) {
    const auto out = merge_clusters({cluster(0, {1, 2}), cluster(1, {1, 2, 3, 4})}, th);
    ASSERT_EQ(out.size(), 1u);
    EXPECT_EQ(out[0].members, (std::vector<std::int64_t>{1, 2, 3, 4}));
    EXPECT_EQ(out[0].patterns.size(), 2u);
    EXPECT_EQ(out[0].cluster_id, 0);
  }
}

TEST(Merge, DisjointClustersUnchanged) {
  const auto out = merge_clusters({cluster(0, {1, 2}), cluster(1, {3, 4}), cluster(2, {5, 6, 7})}, 0.5);
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out[0].members, (std::vector<std::int64_t>{5, 6, 7}));
}

TEST(Merge, ChainCollapsesAfterTwoMerges) {
  // A~B = 3/5, B~C = 3/5, A~C = 0
  const auto A = cluster(0, range(1, 5)), B = cluster(1, range(3, 10)), C = cluster(2, range(8, 12));
  const auto out = merge_clusters({A, B, C}, 0.5);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].members, range(1, 12));
}

TEST(Merge, ResultIndependentOfInputOrder) {
  Rng r(5);
  std::vector<PatternCluster> cs;
  for (int i = 0; i < 12; ++i) {
    std::vector<std::int64_t> m;
    for (int k = 0; k < 40; ++k)
      if (r.uniform() < 0.2) m.push_back(k);
    if (m.empty()) m.push_back(i);
    cs.push_back(cluster(i, m, 0, r.uniform()));
  }
  const auto base = merge_clusters(cs, 0.5);
  for (int rep = 0; rep < 10; ++rep) {
    auto shuffled = cs;
    r.shuffle(shuffled);
    EXPECT_EQ(merge_clusters(shuffled, 0.5), base);
  }
}

TEST(PatternsToClusters, IdenticalMemberSetsMerge) {
  std::vector<Transaction> ts;
  for (int i = 0; i < 6; ++i) ts.push_back(tx(i, {1, 2}, 0));
  const std::vector<AssociationPattern> ps{{{1}, 0, 1.0, 1.0}, {{2}, 0, 1.0, 1.0}};
  const auto out = patterns_to_clusters(ps, ts, MiningConfig{});
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].patterns.size(), 2u);
}

TEST(PatternsToClusters, DisjointStaySeparateAndKTruncates) {
  std::vector<Transaction> ts;
  for (int i = 0; i < 6; ++i) ts.push_back(tx(i, {1}, 0));
  for (int i = 6; i < 9; ++i) ts.push_back(tx(i, {2}, 0));
  for (int i = 9; i < 12; ++i) ts.push_back(tx(i, {1, 2}, 1));  // other class, ignored
  const std::vector<AssociationPattern> ps{{{1}, 0, 0.6, 0.67}, {{2}, 0, 0.3, 0.5}};
  MiningConfig cfg;
  auto out = patterns_to_clusters(ps, ts, cfg, 40);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].members, range(0, 5));
  EXPECT_EQ(out[0].cluster_id, 40);
  EXPECT_EQ(out[1].cluster_id, 41);
  cfg.clusters_per_category = 1;
  out = patterns_to_clusters(ps, ts, cfg);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].members, range(0, 5));
}

TEST(PatternsToClusters, MembersComeFromTargetClassAndContainItemset) {
  Rng r(11);
  auto ts = dctest::random_transactions(r, 8, 150, 3);
  MiningConfig cfg;
  cfg.min_support = 0.2;
  cfg.min_confidence = 0.4;
  const auto ps = mine_patterns(ts, 2, cfg);
  ASSERT_FALSE(ps.empty());
  std::map<std::int64_t, const Transaction*> by_id;
  for (const auto& t : ts) by_id[t.patch_id] = &t;
  for (const auto& c : patterns_to_clusters(ps, ts, cfg)) {
    EXPECT_EQ(c.category, 2);
    for (auto id : c.members) {
      const auto* t = by_id.at(id);
      EXPECT_EQ(t->label, 2);
      bool some = false;
      for (const auto& p : c.patterns)
        some |= std::includes(t->items.begin(), t->items.end(), p.itemset.begin(), p.itemset.end());
      EXPECT_TRUE(some);
    }
  }
}

namespace {

// Two well-separated groups in 4-d with detectors trained on them.
struct UpdateFixture {
  FeatureMatrix f;
  std::vector<PatternCluster> clusters;

  UpdateFixture() {
    Rng r(3);
    for (int i = 0; i < 60; ++i) {
      const int g = i < 20 ? 0 : (i < 40 ? 1 : 2);
      std::vector<double> v(4);
      for (auto& x : v) x = 0.3 * r.normal();
      v[g] += 3.0;
      f.append(i, v);
    }
    clusters = {cluster(0, range(0, 19)), cluster(1, range(20, 39))};
    for (auto& c : clusters) {
      std::vector<std::size_t> pos, neg;
      for (std::size_t i = 0; i < 60; ++i)
        (std::binary_search(c.members.begin(), c.members.end(), static_cast<std::int64_t>(i)) ? pos : neg).push_back(i);
      c.detector = train_lda(f, pos, neg, 1e-3, c.cluster_id);
    }
    const auto h = harvest(clusters, score_patches({*clusters[0].detector, *clusters[1].detector}, f), Percentile{0.0});
    clusters = h.clusters;
  }
};

}  // namespace

TEST(UpdateClusters, FixedPointKeepsBestScoringCluster) {
  UpdateFixture fx;
  std::map<int, std::vector<std::int64_t>> cand{{0, range(0, 39)}};
  const auto out = update_clusters(fx.f, fx.clusters, cand, MiningConfig{});
  ASSERT_EQ(out.size(), 2u);
  for (const auto& c : out) {
    const auto& own = c.cluster_id == 0 ? fx.clusters[0] : fx.clusters[1];
    const auto& other = c.cluster_id == 0 ? fx.clusters[1] : fx.clusters[0];
    for (auto id : c.members) {
      const auto row = fx.f.row(static_cast<std::size_t>(id));
      EXPECT_GE(score(*own.detector, row), score(*other.detector, row));
    }
    EXPECT_EQ(c.members, own.members);
  }
}

TEST(UpdateClusters, EverythingBelowThresholdLeavesNothing) {
  UpdateFixture fx;
  for (auto& c : fx.clusters) c.harvest_threshold = std::numeric_limits<double>::infinity();
  std::map<int, std::vector<std::int64_t>> cand{{0, range(0, 59)}};
  EXPECT_TRUE(update_clusters(fx.f, fx.clusters, cand, MiningConfig{}).empty());
}

TEST(UpdateClusters, MissingDetectorIsStateError) {
  UpdateFixture fx;
  fx.clusters[1].detector.reset();
  EXPECT_THROW(update_clusters(fx.f, fx.clusters, {}, MiningConfig{}), StateError);
  EXPECT_THROW(update_clusters(fx.f, {}, {}, MiningConfig{}), StateError);
}

TEST(UpdateClusters, Deterministic) {
  UpdateFixture fx;
  std::map<int, std::vector<std::int64_t>> cand{{0, range(0, 59)}};
  EXPECT_EQ(update_clusters(fx.f, fx.clusters, cand, MiningConfig{}),
            update_clusters(fx.f, fx.clusters, cand, MiningConfig{}));
}
