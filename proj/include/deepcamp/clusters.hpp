#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <unordered_map>
#include <vector>

namespace deepcamp {

/// Itemset -> category rule with its support (within the target category)
/// and confidence (over all transactions).
struct AssociationPattern {
  std::vector<int> itemset;  // sorted embedding-dimension indices
  int target = 0;
  double support = 0.0;
  double confidence = 0.0;

  friend bool operator==(const AssociationPattern&, const AssociationPattern&) = default;
};

/// Linear detector w.f + b for one cluster.
struct LdaModel {
  std::int64_t cluster_id = 0;
  std::vector<double> w;
  double b = 0.0;
  double lambda = 0.0;  // absolute ridge added to the pooled covariance

  friend bool operator==(const LdaModel&, const LdaModel&) = default;
};

struct PatternCluster {
  std::int64_t cluster_id = 0;
  int category = 0;
  std::vector<AssociationPattern> patterns;
  std::vector<std::int64_t> members;  // sorted patch ids
  std::optional<LdaModel> detector;
  std::optional<double> harvest_threshold;

  double best_confidence() const {
    double c = 0.0;
    for (const auto& p : patterns) c = std::max(c, p.confidence);
    return c;
  }

  friend bool operator==(const PatternCluster&, const PatternCluster&) = default;
};

/// id -> row position lookup for a list of ids.
inline std::unordered_map<std::int64_t, std::size_t> index_of(const std::vector<std::int64_t>& ids) {
  std::unordered_map<std::int64_t, std::size_t> m;
  m.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) m.emplace(ids[i], i);
  return m;
}

}  // namespace deepcamp
