#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "deepcamp/core.hpp"

namespace deepcamp {

/// Average precision: mean over positives of the precision at each
/// positive's rank. Scores are sorted descending; tied scores rank
/// negatives first (pessimistic).
inline double average_precision(const std::vector<double>& scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw PreconditionError("average_precision: size mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return !positive[a] && positive[b];
  });
  // extended-precision accumulation: short rankings round once, at the end
  long double sum = 0.0L;
  std::size_t hits = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (positive[order[rank]]) {
      ++hits;
      sum += static_cast<long double>(hits) / static_cast<long double>(rank + 1);
    }
  }
  if (hits == 0) throw PreconditionError("average_precision: no positives");
  return static_cast<double>(sum / static_cast<long double>(hits));
}

inline double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Normalized mutual information, arithmetic-mean normalization, natural log.
/// Two constant labelings count as identical (1.0).
inline double nmi(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) throw PreconditionError("nmi: assignments differ in length");
  const double n = static_cast<double>(a.size());
  if (a.empty()) return 1.0;
  std::map<int, double> ca, cb;
  std::map<std::pair<int, int>, double> joint;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ca[a[i]] += 1;
    cb[b[i]] += 1;
    joint[{a[i], b[i]}] += 1;
  }
  auto entropy = [n](const std::map<int, double>& counts) {
    double h = 0.0;
    for (const auto& [k, c] : counts) h -= (c / n) * std::log(c / n);
    return h;
  };
  const double ha = entropy(ca), hb = entropy(cb);
  double mi = 0.0;
  for (const auto& [key, c] : joint) {
    mi += (c / n) * std::log((c * n) / (ca[key.first] * cb[key.second]));
  }
  const double denom = 0.5 * (ha + hb);
  if (denom <= 0.0) return 1.0;
  return std::clamp(mi / denom, 0.0, 1.0);
}

inline double purity(const std::vector<int>& assignment, const std::vector<int>& oracle) {
  if (assignment.size() != oracle.size()) throw PreconditionError("purity: assignments differ in length");
  if (assignment.empty()) return 1.0;
  std::map<int, std::map<int, std::size_t>> table;
  for (std::size_t i = 0; i < assignment.size(); ++i) ++table[assignment[i]][oracle[i]];
  std::size_t total = 0;
  for (const auto& [cluster, row] : table) {
    std::size_t best = 0;
    for (const auto& [label, count] : row) best = std::max(best, count);
    total += best;
  }
  return static_cast<double>(total) / static_cast<double>(assignment.size());
}

struct EvalReport {
  int iteration = 0;
  std::string split;
  std::vector<double> per_class_ap;  // NaN where a class had no positives
  double map = 0.0;
  double accuracy = std::nan("");  // Action mode only
  double cluster_nmi = std::nan("");
  double cluster_purity = std::nan("");

  static std::string csv_header(const std::vector<std::string>& class_names) {
    std::string h = "iteration,split,mAP,accuracy,cluster_nmi,cluster_purity";
    for (const auto& c : class_names) h += ",AP_" + c;
    return h;
  }

  std::string csv_row() const {
    std::ostringstream s;
    s.precision(17);
    auto put = [&](double v) {
      if (std::isnan(v)) s << "";
      else s << v;
    };
    s << iteration << ',' << split << ',';
    put(map);
    s << ',';
    put(accuracy);
    s << ',';
    put(cluster_nmi);
    s << ',';
    put(cluster_purity);
    for (double ap : per_class_ap) {
      s << ',';
      put(ap);
    }
    return s.str();
  }
};

}  // namespace deepcamp
