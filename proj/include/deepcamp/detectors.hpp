#pragma once

// Per-cluster LDA detectors, scoring and score-threshold harvesting.

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "deepcamp/clusters.hpp"
#include "deepcamp/core.hpp"
#include "deepcamp/embednet.hpp"

namespace deepcamp {

/// w = S^-1 (mu_pos - mu_neg), b = -w.(mu_pos + mu_neg)/2, with S symmetric
/// positive definite. Solved by Cholesky, never by explicit inversion.
inline LdaModel lda_from_moments(const Eigen::VectorXd& mu_pos, const Eigen::VectorXd& mu_neg,
                                 const Eigen::MatrixXd& cov_reg) {
  Eigen::LLT<Eigen::MatrixXd> llt(cov_reg);
  if (llt.info() != Eigen::Success) throw StateError("lda: regularized covariance is not positive definite");
  const Eigen::VectorXd w = llt.solve(mu_pos - mu_neg);
  LdaModel m;
  m.w.assign(w.data(), w.data() + w.size());
  m.b = -0.5 * w.dot(mu_pos + mu_neg);
  return m;
}

/// Shared-covariance LDA between cluster members and a negative pool.
/// Pooled covariance gets a ridge lambda = lambda_frac * trace / d (identity
/// when the trace vanishes).
inline LdaModel train_lda(const FeatureMatrix& features, const std::vector<std::size_t>& positive_rows,
                          const std::vector<std::size_t>& negative_rows, double lambda_frac,
                          std::int64_t cluster_id = 0) {
  if (positive_rows.size() < 2) {
    throw DegenerateClusterError("lda: cluster " + std::to_string(cluster_id) + " has fewer than 2 positives");
  }
  if (negative_rows.size() < 2) throw DegenerateClusterError("lda: fewer than 2 negatives");
  require_config(lambda_frac > 0.0, "lda: lambda_frac must be > 0");
  const int d = features.dim;
  using Map = Eigen::Map<const Eigen::VectorXd>;
  auto moments = [&](const std::vector<std::size_t>& rows, Eigen::VectorXd& mu, Eigen::MatrixXd& scatter) {
    mu = Eigen::VectorXd::Zero(d);
    for (auto r : rows) mu += Map(features.row(r).data(), d);
    mu /= static_cast<double>(rows.size());
    Eigen::MatrixXd X(rows.size(), d);
    for (std::size_t i = 0; i < rows.size(); ++i) X.row(static_cast<Eigen::Index>(i)) = (Map(features.row(rows[i]).data(), d) - mu).transpose();
    scatter = X.transpose() * X;
  };
  Eigen::VectorXd mp, mn;
  Eigen::MatrixXd sp, sn;
  moments(positive_rows, mp, sp);
  moments(negative_rows, mn, sn);
  Eigen::MatrixXd cov = (sp + sn) / static_cast<double>(positive_rows.size() + negative_rows.size() - 2);
  const double trace = cov.trace();
  double lambda = 0.0;
  if (trace > 0.0 && std::isfinite(trace)) {
    lambda = lambda_frac * trace / d;
    cov.diagonal().array() += lambda;
  } else {
    cov = Eigen::MatrixXd::Identity(d, d);
  }
  auto m = lda_from_moments(mp, mn, cov);
  m.cluster_id = cluster_id;
  m.lambda = lambda;
  return m;
}

inline double score(const LdaModel& m, std::span<const double> f) {
  if (f.size() != m.w.size()) throw PreconditionError("score: feature dimension differs from detector");
  return dot(m.w, f) + m.b;
}

/// rows = patch ids, columns = cluster ids.
struct ScoreMatrix {
  std::vector<std::int64_t> patch_ids;
  std::vector<std::int64_t> cluster_ids;
  std::vector<double> data;  // row-major

  double at(std::size_t r, std::size_t c) const { return data[r * cluster_ids.size() + c]; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cluster_ids.size(), cluster_ids.size()}; }
};

inline ScoreMatrix score_patches(const std::vector<LdaModel>& models, const FeatureMatrix& features) {
  ScoreMatrix s;
  s.patch_ids = features.ids;
  const auto K = static_cast<Eigen::Index>(models.size());
  const auto N = static_cast<Eigen::Index>(features.rows());
  Eigen::MatrixXd W(features.dim, K);
  Eigen::RowVectorXd b(K);
  for (Eigen::Index j = 0; j < K; ++j) {
    const auto& m = models[j];
    if (static_cast<int>(m.w.size()) != features.dim) {
      throw PreconditionError("score_patches: detector " + std::to_string(m.cluster_id) + " has dim " +
                              std::to_string(m.w.size()) + ", features have " + std::to_string(features.dim));
    }
    s.cluster_ids.push_back(m.cluster_id);
    W.col(j) = Eigen::Map<const Eigen::VectorXd>(m.w.data(), features.dim);
    b(j) = m.b;
  }
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMajor> F(features.data.data(), N, features.dim);
  RowMajor S = F * W;
  S.rowwise() += b;
  s.data.assign(S.data(), S.data() + S.size());
  return s;
}

struct Percentile {
  double q = 10.0;
};
struct Absolute {
  double threshold = 0.0;
};
using HarvestPolicy = std::variant<Percentile, Absolute>;

inline void validate(const HarvestPolicy& p) {
  if (const auto* pc = std::get_if<Percentile>(&p)) require_config(pc->q >= 0.0 && pc->q < 100.0, "harvest: q must be in [0,100)");
}

/// Linear-interpolation percentile (numpy default) of a non-empty sample.
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw PreconditionError("percentile of empty set");
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct HarvestResult {
  std::vector<PatternCluster> clusters;
  std::vector<std::int64_t> eliminated;  // sorted
};

/// Drops members whose own-detector score is strictly below the cluster's
/// threshold; clusters left with fewer than 2 members are deleted. A patch is
/// eliminated only if no surviving cluster retains it.
inline HarvestResult harvest(const std::vector<PatternCluster>& clusters, const ScoreMatrix& scores,
                             const HarvestPolicy& policy) {
  validate(policy);
  const auto row_of = index_of(scores.patch_ids);
  const auto col_of = index_of(scores.cluster_ids);
  HarvestResult out;
  std::set<std::int64_t> dropped, kept;
  for (const auto& c : clusters) {
    auto col = col_of.find(c.cluster_id);
    if (col == col_of.end()) throw PreconditionError("harvest: no score column for cluster " + std::to_string(c.cluster_id));
    std::vector<double> member_scores;
    member_scores.reserve(c.members.size());
    for (auto id : c.members) {
      auto r = row_of.find(id);
      if (r == row_of.end()) throw PreconditionError("harvest: no score row for patch " + std::to_string(id));
      member_scores.push_back(scores.at(r->second, col->second));
    }
    double th = -std::numeric_limits<double>::infinity();
    if (const auto* pc = std::get_if<Percentile>(&policy)) {
      if (!member_scores.empty()) th = percentile(member_scores, pc->q);
    } else {
      th = std::get<Absolute>(policy).threshold;
    }
    PatternCluster kept_cluster = c;
    kept_cluster.members.clear();
    for (std::size_t i = 0; i < c.members.size(); ++i) {
      if (member_scores[i] >= th) kept_cluster.members.push_back(c.members[i]);
      else dropped.insert(c.members[i]);
    }
    kept_cluster.harvest_threshold = th;
    if (kept_cluster.members.size() >= 2) {
      kept.insert(kept_cluster.members.begin(), kept_cluster.members.end());
      out.clusters.push_back(std::move(kept_cluster));
    }
  }
  for (auto id : dropped)
    if (!kept.count(id)) out.eliminated.push_back(id);
  return out;
}

}  // namespace deepcamp
