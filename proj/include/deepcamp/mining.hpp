#pragma once

// Discriminative pattern mining over binarized embeddings: top-k
// transactions, level-wise Apriori, class-association rules, and greedy
// cluster merging.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <map>
#include <numeric>
#include <queue>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "deepcamp/clusters.hpp"
#include "deepcamp/core.hpp"
#include "deepcamp/detectors.hpp"
#include "deepcamp/embednet.hpp"

namespace deepcamp {

struct Transaction {
  std::int64_t patch_id = 0;
  std::vector<int> items;  // sorted
  int label = 0;           // category (Action) or 1/0 for the target attribute

  friend bool operator==(const Transaction&, const Transaction&) = default;
};

struct MiningConfig {
  int k = 20;
  double min_support = 0.01;
  double min_confidence = 0.6;
  int max_itemset_size = 3;
  int clusters_per_category = 8;
  double merge_overlap_threshold = 0.5;
  // Patterns kept (best first) before clustering; bounds the merge problem.
  int max_patterns_per_category = 30;

  void validate() const {
    require_config(k >= 1, "mining: k must be >= 1");
    require_config(min_support > 0.0 && min_support <= 1.0, "mining: min_support must be in (0,1]");
    require_config(min_confidence > 0.0 && min_confidence <= 1.0, "mining: min_confidence must be in (0,1]");
    require_config(max_itemset_size >= 1, "mining: max_itemset_size must be >= 1");
    require_config(clusters_per_category >= 1, "mining: clusters_per_category must be >= 1");
    require_config(merge_overlap_threshold > 0.0 && merge_overlap_threshold <= 1.0,
                   "mining: merge_overlap_threshold must be in (0,1]");
    require_config(max_patterns_per_category >= 1, "mining: max_patterns_per_category must be >= 1");
  }
};

/// Items are the indices of the k largest activations, ties to the lower index.
inline std::vector<int> top_k_items(std::span<const double> row, int k) {
  std::vector<int> idx(row.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
    if (row[a] != row[b]) return row[a] > row[b];
    return a < b;
  });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// One transaction per feature row; labels are left at 0 for the caller.
inline std::vector<Transaction> binarize(const FeatureMatrix& features, int k) {
  if (k < 1 || k > features.dim) {
    throw ConfigError("binarize: k=" + std::to_string(k) + " must be in [1, " + std::to_string(features.dim) + "]");
  }
  std::vector<Transaction> out(features.rows());
  for (std::size_t i = 0; i < features.rows(); ++i) {
    out[i].patch_id = features.ids[i];
    out[i].items = top_k_items(features.row(i), k);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Apriori

struct FrequentItemset {
  std::vector<int> items;
  double support = 0.0;
  std::size_t count = 0;

  friend bool operator==(const FrequentItemset&, const FrequentItemset&) = default;
};

namespace detail {

/// Bitset over transaction positions.
struct TidSet {
  std::vector<std::uint64_t> w;
  explicit TidSet(std::size_t n = 0) : w((n + 63) / 64, 0) {}
  void set(std::size_t i) { w[i / 64] |= std::uint64_t{1} << (i % 64); }
  std::size_t count() const {
    std::size_t c = 0;
    for (auto x : w) c += static_cast<std::size_t>(std::popcount(x));
    return c;
  }
  TidSet operator&(const TidSet& o) const {
    TidSet r;
    r.w.resize(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) r.w[i] = w[i] & o.w[i];
    return r;
  }
  std::size_t and_count(const TidSet& o) const {
    std::size_t c = 0;
    for (std::size_t i = 0; i < w.size(); ++i) c += static_cast<std::size_t>(std::popcount(w[i] & o.w[i]));
    return c;
  }
};

inline bool frequent(std::size_t count, std::size_t n, double min_support) {
  return static_cast<double>(count) / static_cast<double>(n) >= min_support;
}

}  // namespace detail

/// Level-wise Apriori: every itemset of size <= max_itemset_size whose support
/// (fraction of the given transactions containing it) is >= min_support.
/// Output is ordered by size, then lexicographically.
inline std::vector<FrequentItemset> mine_frequent_itemsets(const std::vector<const Transaction*>& transactions,
                                                           const MiningConfig& cfg) {
  cfg.validate();
  std::vector<FrequentItemset> out;
  const std::size_t n = transactions.size();
  if (n == 0) return out;

  std::map<int, detail::TidSet> item_tids;
  for (std::size_t t = 0; t < n; ++t)
    for (int item : transactions[t]->items) {
      auto [it, inserted] = item_tids.try_emplace(item, n);
      it->second.set(t);
    }

  struct Level {
    std::vector<int> items;
    detail::TidSet tids;
  };
  std::vector<Level> level;
  for (auto& [item, tids] : item_tids) {
    const auto c = tids.count();
    if (detail::frequent(c, n, cfg.min_support)) {
      out.push_back({{item}, static_cast<double>(c) / n, c});
      level.push_back({{item}, tids});
    }
  }

  for (int size = 2; size <= cfg.max_itemset_size && level.size() > 1; ++size) {
    std::set<std::vector<int>> prev;
    for (const auto& l : level) prev.insert(l.items);
    std::vector<Level> next;
    // join itemsets sharing their first size-2 items (level is sorted)
    for (std::size_t a = 0; a < level.size(); ++a) {
      for (std::size_t b = a + 1; b < level.size(); ++b) {
        const auto& A = level[a].items;
        const auto& B = level[b].items;
        if (!std::equal(A.begin(), A.end() - 1, B.begin())) break;
        std::vector<int> cand = A;
        cand.push_back(B.back());
        bool closed = true;
        for (std::size_t drop = 0; drop + 2 < cand.size() && closed; ++drop) {
          std::vector<int> sub;
          for (std::size_t i = 0; i < cand.size(); ++i)
            if (i != drop) sub.push_back(cand[i]);
          closed = prev.count(sub) != 0;
        }
        if (!closed) continue;
        auto tids = level[a].tids & level[b].tids;
        const auto c = tids.count();
        if (detail::frequent(c, n, cfg.min_support)) {
          out.push_back({cand, static_cast<double>(c) / n, c});
          next.push_back({std::move(cand), std::move(tids)});
        }
      }
    }
    level = std::move(next);
  }
  return out;
}

/// Class-association rules itemset -> target: frequent on the target's
/// transactions, confidence = P(target | itemset) over all transactions.
/// Sorted by confidence, then support (both descending), then itemset.
inline std::vector<AssociationPattern> mine_patterns(const std::vector<Transaction>& all, int target,
                                                     const MiningConfig& cfg) {
  cfg.validate();
  std::vector<const Transaction*> pos;
  for (const auto& t : all)
    if (t.label == target) pos.push_back(&t);
  if (pos.empty()) throw PreconditionError("mine_patterns: target " + std::to_string(target) + " has no transactions");
  const auto frequent = mine_frequent_itemsets(pos, cfg);

  // itemset counts over all transactions via tidsets
  std::map<int, detail::TidSet> item_tids;
  const std::size_t n = all.size();
  for (std::size_t t = 0; t < n; ++t)
    for (int item : all[t].items) item_tids.try_emplace(item, n).first->second.set(t);

  std::vector<AssociationPattern> out;
  for (const auto& f : frequent) {
    std::size_t total;
    if (f.items.size() == 1) {
      total = item_tids.at(f.items[0]).count();
    } else {
      auto acc = item_tids.at(f.items[0]);
      for (std::size_t i = 1; i + 1 < f.items.size(); ++i) acc = acc & item_tids.at(f.items[i]);
      total = acc.and_count(item_tids.at(f.items.back()));
    }
    const double conf = static_cast<double>(f.count) / static_cast<double>(total);
    if (conf >= cfg.min_confidence) out.push_back({f.items, target, f.support, conf});
  }
  std::sort(out.begin(), out.end(), [](const AssociationPattern& a, const AssociationPattern& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    if (a.support != b.support) return a.support > b.support;
    return a.itemset < b.itemset;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Clusters

namespace detail {

inline std::vector<std::int64_t> set_union(const std::vector<std::int64_t>& a, const std::vector<std::int64_t>& b) {
  std::vector<std::int64_t> u;
  u.reserve(a.size() + b.size());
  std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(u));
  return u;
}

inline std::size_t intersection_size(const std::vector<std::int64_t>& a, const std::vector<std::int64_t>& b) {
  std::size_t n = 0;
  auto i = a.begin();
  auto j = b.begin();
  while (i != a.end() && j != b.end()) {
    if (*i < *j) ++i;
    else if (*j < *i) ++j;
    else {
      ++n;
      ++i;
      ++j;
    }
  }
  return n;
}

inline bool pattern_less(const AssociationPattern& a, const AssociationPattern& b) {
  if (a.confidence != b.confidence) return a.confidence > b.confidence;
  if (a.support != b.support) return a.support > b.support;
  if (a.itemset != b.itemset) return a.itemset < b.itemset;
  return a.target < b.target;
}

/// Content order used to break ties; independent of input order.
inline bool content_less(const PatternCluster& a, const PatternCluster& b) {
  if (a.members != b.members) return a.members < b.members;
  return std::lexicographical_compare(a.patterns.begin(), a.patterns.end(), b.patterns.begin(), b.patterns.end(),
                                      pattern_less);
}

}  // namespace detail

/// Greedy merging: repeatedly merge the pair with the largest overlap
/// |A & B| / min(|A|, |B|) while it is >= threshold. Ties go to the pair whose
/// constituents come first in content order. Merged clusters take the union
/// of members and patterns and the smaller cluster id. Output is sorted by
/// member count, best confidence (descending), then content.
inline std::vector<PatternCluster> merge_clusters(std::vector<PatternCluster> clusters, double overlap_threshold) {
  const std::size_t n = clusters.size();
  // canonical rank by content
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return detail::content_less(clusters[a], clusters[b]); });
  std::vector<std::size_t> rank(n);
  for (std::size_t r = 0; r < n; ++r) rank[order[r]] = r;

  struct Candidate {
    std::size_t inter, denom;  // overlap = inter / denom
    std::size_t lo_rank, hi_rank;
    std::size_t a, b;
    unsigned va, vb;
  };
  // "less" = lower priority
  auto lower = [](const Candidate& x, const Candidate& y) {
    const auto lx = x.inter * y.denom, ly = y.inter * x.denom;
    if (lx != ly) return lx < ly;
    if (x.lo_rank != y.lo_rank) return x.lo_rank > y.lo_rank;
    return x.hi_rank > y.hi_rank;
  };
  std::priority_queue<Candidate, std::vector<Candidate>, decltype(lower)> pq(lower);
  std::vector<bool> alive(n, true);
  std::vector<unsigned> version(n, 0);

  auto consider = [&](std::size_t a, std::size_t b) {
    const auto& A = clusters[a].members;
    const auto& B = clusters[b].members;
    const std::size_t denom = std::min(A.size(), B.size());
    if (denom == 0) return;
    const std::size_t inter = detail::intersection_size(A, B);
    if (static_cast<double>(inter) < overlap_threshold * static_cast<double>(denom)) return;
    pq.push({inter, denom, std::min(rank[a], rank[b]), std::max(rank[a], rank[b]), a, b, version[a], version[b]});
  };
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b) consider(a, b);

  while (!pq.empty()) {
    const auto top = pq.top();
    pq.pop();
    if (!alive[top.a] || !alive[top.b] || version[top.a] != top.va || version[top.b] != top.vb) continue;
    // keep the lower-ranked slot
    std::size_t keep = rank[top.a] < rank[top.b] ? top.a : top.b;
    std::size_t gone = keep == top.a ? top.b : top.a;
    auto& K = clusters[keep];
    auto& G = clusters[gone];
    K.members = detail::set_union(K.members, G.members);
    K.patterns.insert(K.patterns.end(), G.patterns.begin(), G.patterns.end());
    std::sort(K.patterns.begin(), K.patterns.end(), detail::pattern_less);
    K.patterns.erase(std::unique(K.patterns.begin(), K.patterns.end()), K.patterns.end());
    K.cluster_id = std::min(K.cluster_id, G.cluster_id);
    K.detector.reset();
    K.harvest_threshold.reset();
    alive[gone] = false;
    ++version[keep];
    for (std::size_t o = 0; o < n; ++o)
      if (alive[o] && o != keep) consider(keep, o);
  }

  std::vector<PatternCluster> out;
  for (std::size_t i = 0; i < n; ++i)
    if (alive[i]) out.push_back(std::move(clusters[i]));
  std::sort(out.begin(), out.end(), [](const PatternCluster& a, const PatternCluster& b) {
    if (a.members.size() != b.members.size()) return a.members.size() > b.members.size();
    if (a.best_confidence() != b.best_confidence()) return a.best_confidence() > b.best_confidence();
    return detail::content_less(a, b);
  });
  return out;
}

/// One provisional cluster per pattern (target-class patches whose
/// transaction contains the itemset), merged, then truncated to the K largest.
/// Cluster ids are first_cluster_id, first_cluster_id + 1, ... in output order.
inline std::vector<PatternCluster> patterns_to_clusters(const std::vector<AssociationPattern>& patterns,
                                                        const std::vector<Transaction>& transactions,
                                                        const MiningConfig& cfg, std::int64_t first_cluster_id = 0) {
  cfg.validate();
  std::vector<PatternCluster> provisional;
  const std::size_t limit = std::min<std::size_t>(patterns.size(), cfg.max_patterns_per_category);
  for (std::size_t p = 0; p < limit; ++p) {
    const auto& pat = patterns[p];
    PatternCluster c;
    c.cluster_id = static_cast<std::int64_t>(p);
    c.category = pat.target;
    c.patterns = {pat};
    for (const auto& t : transactions) {
      if (t.label != pat.target) continue;
      if (std::includes(t.items.begin(), t.items.end(), pat.itemset.begin(), pat.itemset.end()))
        c.members.push_back(t.patch_id);
    }
    std::sort(c.members.begin(), c.members.end());
    if (!c.members.empty()) provisional.push_back(std::move(c));
  }
  auto merged = merge_clusters(std::move(provisional), cfg.merge_overlap_threshold);
  if (merged.size() > static_cast<std::size_t>(cfg.clusters_per_category)) merged.resize(cfg.clusters_per_category);
  for (std::size_t i = 0; i < merged.size(); ++i) merged[i].cluster_id = first_cluster_id + static_cast<std::int64_t>(i);
  return merged;
}

/// Reassigns candidate patches to clusters using the clusters' detectors on
/// new features: each candidate goes to the highest-scoring same-category
/// cluster if that score reaches the cluster's harvest threshold. Clusters
/// left empty are dropped, then same-category clusters are merged. Itemset
/// patterns are carried along unchanged.
///
/// `candidates` maps category -> patch ids eligible for that category.
inline std::vector<PatternCluster> update_clusters(const FeatureMatrix& features,
                                                   const std::vector<PatternCluster>& previous,
                                                   const std::map<int, std::vector<std::int64_t>>& candidates,
                                                   const MiningConfig& cfg) {
  if (previous.empty()) throw StateError("update_clusters: no clusters");
  for (const auto& c : previous) {
    if (!c.detector) throw StateError("update_clusters: cluster " + std::to_string(c.cluster_id) + " has no detector");
  }
  const auto row_of = index_of(features.ids);
  std::map<int, std::vector<const PatternCluster*>> by_cat;
  for (const auto& c : previous) by_cat[c.category].push_back(&c);

  std::vector<PatternCluster> out;
  for (auto& [cat, list] : by_cat) {
    std::vector<PatternCluster> next;
    for (const auto* c : list) {
      PatternCluster n = *c;
      n.members.clear();
      next.push_back(std::move(n));
    }
    auto it = candidates.find(cat);
    if (it != candidates.end()) {
      for (auto pid : it->second) {
        auto r = row_of.find(pid);
        if (r == row_of.end()) throw PreconditionError("update_clusters: no features for patch " + std::to_string(pid));
        const auto f = features.row(r->second);
        std::size_t best = 0;
        double best_score = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < list.size(); ++j) {
          const double s = score(*list[j]->detector, f);
          if (s > best_score) {
            best_score = s;
            best = j;
          }
        }
        const double th = list[best]->harvest_threshold.value_or(-std::numeric_limits<double>::infinity());
        if (best_score >= th) next[best].members.push_back(pid);
      }
    }
    std::erase_if(next, [](const PatternCluster& c) { return c.members.empty(); });
    for (auto& c : next) std::sort(c.members.begin(), c.members.end());
    auto merged = merge_clusters(std::move(next), cfg.merge_overlap_threshold);
    for (auto& c : merged) out.push_back(std::move(c));
  }
  return out;
}

}  // namespace deepcamp
