#include <gtest/gtest.h>

#include <cmath>

#include "deepcamp/metrics.hpp"
#include "oracles.hpp"

using namespace deepcamp;

namespace {

// NMI from an explicit contingency matrix with dense indices.
double contingency_nmi(const std::vector<int>& a, const std::vector<int>& b, int ka, int kb) {
  std::vector<std::vector<double>> t(ka, std::vector<double>(kb, 0.0));
  for (std::size_t i = 0; i < a.size(); ++i) t[a[i]][b[i]] += 1.0;
  const double n = static_cast<double>(a.size());
  std::vector<double> ra(ka, 0.0), cb(kb, 0.0);
  for (int i = 0; i < ka; ++i)
    for (int j = 0; j < kb; ++j) {
      ra[i] += t[i][j];
      cb[j] += t[i][j];
    }
  double mi = 0.0, ha = 0.0, hb = 0.0;
  for (int i = 0; i < ka; ++i)
    for (int j = 0; j < kb; ++j)
      if (t[i][j] > 0) mi += t[i][j] / n * std::log(n * t[i][j] / (ra[i] * cb[j]));
  for (double v : ra)
    if (v > 0) ha -= v / n * std::log(v / n);
  for (double v : cb)
    if (v > 0) hb -= v / n * std::log(v / n);
  return mi / (0.5 * (ha + hb));
}

}  // namespace

TEST(AveragePrecision, AlternatingRanking) {
  EXPECT_EQ(average_precision({4, 3, 2, 1}, {true, false, true, false}), 5.0 / 6.0);
}

TEST(AveragePrecision, PerfectAndWorstRankings) {
  EXPECT_EQ(average_precision({3, 2, 1}, {true, true, false}), 1.0);
  EXPECT_NEAR(average_precision({3, 2, 1}, {false, false, true}), 1.0 / 3.0, 1e-15);
}

TEST(AveragePrecision, TiesRankNegativesFirst) {
  EXPECT_NEAR(average_precision({1, 1}, {true, false}), 0.5, 1e-15);
  EXPECT_NEAR(average_precision({1, 1}, {false, true}), 0.5, 1e-15);
}

TEST(AveragePrecision, NoPositivesOrMismatchRejected) {
  EXPECT_THROW(average_precision({1, 2}, {false, false}), PreconditionError);
  EXPECT_THROW(average_precision({1, 2}, {true}), PreconditionError);
}

TEST(AveragePrecision, MatchesBruteForce) {
  Rng r(1);
  for (int inst = 0; inst < 1000; ++inst) {
    const std::size_t n = 1 + r.below(40);
    std::vector<double> s(n);
    std::vector<bool> p(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = inst % 2 ? static_cast<double>(r.below(5)) : r.normal();  // half the instances full of ties
      p[i] = r.uniform() < 0.4;
    }
    p[r.below(n)] = true;
    EXPECT_NEAR(average_precision(s, p), dctest::brute_force_ap(s, p), 1e-12) << "instance " << inst;
  }
}

TEST(AveragePrecision, InvariantUnderStrictlyIncreasingMaps) {
  Rng r(2);
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t n = 2 + r.below(30);
    std::vector<double> s(n), t(n);
    std::vector<bool> p(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = r.normal();
      t[i] = std::exp(3.0 * s[i]) + 5.0;
      p[i] = r.uniform() < 0.5;
    }
    p[0] = true;
    EXPECT_EQ(average_precision(s, p), average_precision(t, p));
  }
}

TEST(AveragePrecision, BoundedByPositivesLastRanking) {
  Rng r(3);
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t n = 1 + r.below(30);
    std::vector<double> s(n);
    std::vector<bool> p(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = r.normal();
      p[i] = r.uniform() < 0.3;
    }
    p[n - 1] = true;
    std::size_t pos = 0;
    for (bool b : p) pos += b;
    double worst = 0.0;  // all positives ranked after all negatives
    for (std::size_t k = 1; k <= pos; ++k) worst += static_cast<double>(k) / static_cast<double>(n - pos + k);
    worst /= static_cast<double>(pos);
    const double ap = average_precision(s, p);
    EXPECT_LE(ap, 1.0);
    EXPECT_GE(ap, worst - 1e-15);
  }
}

TEST(Nmi, RelabeledIdenticalIsOne) {
  EXPECT_NEAR(nmi({0, 0, 1, 1, 2}, {5, 5, 9, 9, 7}), 1.0, 1e-12);
}

TEST(Nmi, IndependentIsZero) {
  EXPECT_NEAR(nmi({0, 0, 1, 1}, {0, 1, 0, 1}), 0.0, 1e-12);
}

TEST(Nmi, ConstantLabelings) {
  EXPECT_EQ(nmi({3, 3, 3}, {1, 1, 1}), 1.0);
  EXPECT_NEAR(nmi({3, 3, 3, 3}, {0, 1, 0, 1}), 0.0, 1e-12);
  EXPECT_THROW(nmi({1}, {1, 2}), PreconditionError);
}

TEST(Nmi, MatchesContingencyOracleAndIsSymmetric) {
  Rng r(4);
  for (int inst = 0; inst < 300; ++inst) {
    const int ka = 2 + static_cast<int>(r.below(5)), kb = 2 + static_cast<int>(r.below(5));
    const std::size_t n = 4 + r.below(80);
    std::vector<int> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = static_cast<int>(r.below(ka));
      b[i] = r.uniform() < 0.5 ? a[i] % kb : static_cast<int>(r.below(kb));
    }
    a[0] = 0;
    a[1] = 1;  // at least two clusters on each side
    b[0] = 0;
    b[1] = 1;
    const double v = nmi(a, b);
    EXPECT_NEAR(v, contingency_nmi(a, b, ka, kb), 1e-12);
    EXPECT_NEAR(v, nmi(b, a), 1e-14);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Purity, Examples) {
  EXPECT_EQ(purity({0, 0, 1, 1}, {2, 2, 3, 3}), 1.0);
  EXPECT_EQ(purity({0, 0, 0, 0}, {1, 1, 1, 2}), 0.75);
  EXPECT_EQ(purity({0, 0, 1, 1}, {1, 2, 1, 2}), 0.5);
}

TEST(Purity, SingletonClustersArePure) {
  EXPECT_EQ(purity({0, 1, 2, 3}, {7, 7, 8, 9}), 1.0);
}

TEST(EvalReport, CsvRowLeavesMissingValuesEmpty) {
  EvalReport r;
  r.iteration = 2;
  r.split = "test";
  r.map = 0.5;
  r.per_class_ap = {0.25, std::nan("")};
  EXPECT_EQ(EvalReport::csv_header({"a", "b"}), "iteration,split,mAP,accuracy,cluster_nmi,cluster_purity,AP_a,AP_b");
  EXPECT_EQ(r.csv_row(), "2,test,0.5,,,,0.25,");
}
