#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>

#include "deepcamp/detectors.hpp"

using namespace deepcamp;

namespace {

// Gaussian blobs: positives around `shift`, negatives around 0, correlated noise.
FeatureMatrix blobs(Rng& r, int npos, int nneg, int d, double shift) {
  FeatureMatrix f;
  for (int i = 0; i < npos + nneg; ++i) {
    std::vector<double> v(d);
    double common = r.normal();
    for (int k = 0; k < d; ++k) v[k] = r.normal() + 0.5 * common + (i < npos ? shift * (k + 1) / d : 0.0);
    f.append(i, v);
  }
  return f;
}

std::vector<std::size_t> rows(std::size_t lo, std::size_t hi) {
  std::vector<std::size_t> v;
  for (auto i = lo; i < hi; ++i) v.push_back(i);
  return v;
}

// Closed form with an explicit inverse of the ridged pooled covariance.
Eigen::VectorXd explicit_lda(const FeatureMatrix& f, std::size_t npos, double lambda_frac) {
  const int d = f.dim;
  Eigen::MatrixXd X(f.rows(), d);
  for (std::size_t i = 0; i < f.rows(); ++i)
    for (int k = 0; k < d; ++k) X(static_cast<Eigen::Index>(i), k) = f.row(i)[static_cast<std::size_t>(k)];
  const auto n = static_cast<Eigen::Index>(npos);
  const Eigen::MatrixXd P = X.topRows(n), N = X.bottomRows(X.rows() - n);
  const Eigen::VectorXd mp = P.colwise().mean(), mn = N.colwise().mean();
  const Eigen::MatrixXd cp = P.rowwise() - mp.transpose(), cn = N.rowwise() - mn.transpose();
  Eigen::MatrixXd S = (cp.transpose() * cp + cn.transpose() * cn) / static_cast<double>(X.rows() - 2);
  S.diagonal().array() += lambda_frac * S.trace() / d;
  return S.inverse() * (mp - mn);
}

PatternCluster cluster(std::int64_t id, std::vector<std::int64_t> members) {
  PatternCluster c;
  c.cluster_id = id;
  c.members = std::move(members);
  return c;
}

ScoreMatrix column(std::int64_t cid, const std::vector<double>& s) {
  ScoreMatrix m;
  m.cluster_ids = {cid};
  for (std::size_t i = 0; i < s.size(); ++i) m.patch_ids.push_back(static_cast<std::int64_t>(i));
  m.data = s;
  return m;
}

}  // namespace

TEST(Lda, UnitCovarianceExample) {
  Eigen::VectorXd mp(2), mn(2);
  mp << 2, 0;
  mn << 0, 0;
  const auto m = lda_from_moments(mp, mn, Eigen::MatrixXd::Identity(2, 2));
  EXPECT_NEAR(m.w[0], 2.0, 1e-15);
  EXPECT_NEAR(m.w[1], 0.0, 1e-15);
  EXPECT_NEAR(m.b, -2.0, 1e-15);
}

TEST(Lda, EqualMeansGiveZeroDirection) {
  Rng r(1);
  FeatureMatrix f;
  for (int i = 0; i < 10; ++i) {
    const std::vector<double> v{r.normal(), r.normal(), r.normal()};
    f.append(i, v);
  }
  // duplicate the rows so both sides have identical moments
  for (int i = 0; i < 10; ++i) {
    const auto row = f.row(static_cast<std::size_t>(i));
    const std::vector<double> v(row.begin(), row.end());
    f.append(10 + i, v);
  }
  const auto m = train_lda(f, rows(0, 10), rows(10, 20), 1e-3);
  for (double w : m.w) EXPECT_NEAR(w, 0.0, 1e-12);
}

TEST(Lda, MatchesExplicitInverse) {
  Rng r(17);
  for (int trial = 0; trial < 20; ++trial) {
    const int d = 2 + static_cast<int>(r.below(15));
    const auto f = blobs(r, 30, 50, d, 2.0);
    const auto m = train_lda(f, rows(0, 30), rows(30, 80), 1e-3);
    const Eigen::VectorXd ref = explicit_lda(f, 30, 1e-3);
    const Eigen::Map<const Eigen::VectorXd> w(m.w.data(), d);
    EXPECT_LE(1.0 - w.dot(ref) / (w.norm() * ref.norm()), 1e-8);
    EXPECT_LE((w - ref).norm() / ref.norm(), 1e-8);
  }
}

TEST(Lda, RidgeIsPositiveAndScalesWithTrace) {
  Rng r(2);
  const auto f = blobs(r, 5, 5, 40, 1.0);  // d > n, singular pooled covariance
  const auto m = train_lda(f, rows(0, 5), rows(5, 10), 1e-3);
  EXPECT_GT(m.lambda, 0.0);
  for (double w : m.w) EXPECT_TRUE(std::isfinite(w));
}

TEST(Lda, DegenerateClusterRejected) {
  Rng r(3);
  const auto f = blobs(r, 5, 5, 3, 1.0);
  EXPECT_THROW(train_lda(f, {0}, rows(5, 10), 1e-3, 9), DegenerateClusterError);
  EXPECT_THROW(train_lda(f, rows(0, 5), {7}, 1e-3), DegenerateClusterError);
  EXPECT_THROW(train_lda(f, rows(0, 5), rows(5, 10), 0.0), ConfigError);
}

TEST(Lda, FeatureScalingPreservesRanking) {
  Rng r(4);
  const auto f = blobs(r, 20, 40, 6, 1.5);
  auto g = f;
  for (auto& v : g.data) v *= 7.5;
  const auto mf = train_lda(f, rows(0, 20), rows(20, 60), 1e-3);
  const auto mg = train_lda(g, rows(0, 20), rows(20, 60), 1e-3);
  std::vector<std::size_t> of(60), og(60);
  for (std::size_t i = 0; i < 60; ++i) of[i] = og[i] = i;
  std::sort(of.begin(), of.end(), [&](auto a, auto b) { return score(mf, f.row(a)) < score(mf, f.row(b)); });
  std::sort(og.begin(), og.end(), [&](auto a, auto b) { return score(mg, g.row(a)) < score(mg, g.row(b)); });
  EXPECT_EQ(of, og);
}

TEST(Score, MatrixMatchesPerPatchLoop) {
  Rng r(5);
  const auto f = blobs(r, 25, 25, 8, 1.0);
  std::vector<LdaModel> models;
  for (int k = 0; k < 4; ++k) {
    LdaModel m;
    m.cluster_id = 100 + k;
    for (int j = 0; j < 8; ++j) m.w.push_back(r.normal());
    m.b = r.normal();
    models.push_back(m);
  }
  const auto s = score_patches(models, f);
  ASSERT_EQ(s.patch_ids, f.ids);
  ASSERT_EQ(s.cluster_ids, (std::vector<std::int64_t>{100, 101, 102, 103}));
  for (std::size_t i = 0; i < f.rows(); ++i)
    for (std::size_t k = 0; k < models.size(); ++k) EXPECT_NEAR(s.at(i, k), score(models[k], f.row(i)), 1e-12);
}

TEST(Score, ZeroModelScoresBias) {
  LdaModel m;
  m.w.assign(3, 0.0);
  m.b = -1.25;
  const std::vector<double> x{4, 5, 6};
  EXPECT_EQ(score(m, x), -1.25);
  EXPECT_THROW(score(m, std::vector<double>{1, 2}), PreconditionError);
}

TEST(Percentile, LinearInterpolation) {
  EXPECT_DOUBLE_EQ(percentile({1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, 10.0), 1.9);
  EXPECT_DOUBLE_EQ(percentile({5}, 10.0), 5.0);
  EXPECT_DOUBLE_EQ(percentile({3, 1, 2}, 50.0), 2.0);
  EXPECT_THROW(percentile({}, 10.0), PreconditionError);
}

TEST(Harvest, TenthPercentileDropsLowestOfTen) {
  const auto s = column(0, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10});
  const auto h = harvest({cluster(0, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9})}, s, Percentile{10.0});
  ASSERT_EQ(h.clusters.size(), 1u);
  EXPECT_EQ(h.clusters[0].members, (std::vector<std::int64_t>{1, 2, 3, 4, 5, 6, 7, 8, 9}));
  EXPECT_EQ(h.eliminated, (std::vector<std::int64_t>{0}));
  EXPECT_DOUBLE_EQ(h.clusters[0].harvest_threshold.value(), 1.9);
}

TEST(Harvest, AbsoluteAtMinimumKeepsAll) {
  const auto s = column(0, {0.3, -0.2, 0.9});
  const auto h = harvest({cluster(0, {0, 1, 2})}, s, Absolute{-0.2});
  ASSERT_EQ(h.clusters.size(), 1u);
  EXPECT_EQ(h.clusters[0].members.size(), 3u);
  EXPECT_TRUE(h.eliminated.empty());
}

TEST(Harvest, ClusterBelowTwoMembersDeleted) {
  const auto s = column(0, {0.1, 0.2, 0.9});
  const auto h = harvest({cluster(0, {0, 1, 2})}, s, Absolute{0.5});
  EXPECT_TRUE(h.clusters.empty());
  // patch 2 passed its threshold; it leaves with the cluster but is not noise
  EXPECT_EQ(h.eliminated, (std::vector<std::int64_t>{0, 1}));
}

TEST(Harvest, PatchKeptByAnotherClusterIsNotEliminated) {
  ScoreMatrix s;
  s.patch_ids = {0, 1, 2};
  s.cluster_ids = {0, 1};
  s.data = {0.0, 1.0, 1.0, 1.0, 1.0, 1.0};  // patch 0 weak for cluster 0, strong for cluster 1
  const auto h = harvest({cluster(0, {0, 1, 2}), cluster(1, {0, 1})}, s, Absolute{0.5});
  EXPECT_TRUE(h.eliminated.empty());
  ASSERT_EQ(h.clusters.size(), 2u);
  EXPECT_EQ(h.clusters[0].members, (std::vector<std::int64_t>{1, 2}));
}

TEST(Harvest, RetainedAreExactlyThoseAtOrAboveThresholdAndMeanDoesNotDrop) {
  Rng r(6);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + r.below(60);
    std::vector<double> sc(n);
    for (auto& v : sc) v = r.below(4) == 0 ? std::round(r.normal()) : r.normal();  // include ties
    std::vector<std::int64_t> ids;
    for (std::size_t i = 0; i < n; ++i) ids.push_back(static_cast<std::int64_t>(i));
    const double q = r.uniform(0.0, 99.0);
    const auto h = harvest({cluster(0, ids)}, column(0, sc), Percentile{q});
    const double th = percentile(sc, q);
    std::vector<std::int64_t> expect;
    double before = 0.0, after = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      before += sc[i];
      if (sc[i] >= th) {
        expect.push_back(static_cast<std::int64_t>(i));
        after += sc[i];
      }
    }
    if (expect.size() < 2) {
      EXPECT_TRUE(h.clusters.empty());
      continue;
    }
    ASSERT_EQ(h.clusters.size(), 1u);
    EXPECT_EQ(h.clusters[0].members, expect);
    EXPECT_GE(after / static_cast<double>(expect.size()), before / static_cast<double>(n) - 1e-12);
  }
}

TEST(Harvest, InvalidPercentileRejected) {
  EXPECT_THROW(harvest({}, ScoreMatrix{}, Percentile{100.0}), ConfigError);
  EXPECT_THROW(harvest({}, ScoreMatrix{}, Percentile{-1.0}), ConfigError);
}
