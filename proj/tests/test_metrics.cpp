#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "fedreid/metrics.hpp"

using namespace fedreid;

namespace {

using Flags = std::vector<unsigned char>;

struct Instance {
  Matrix qf, gf;
  std::vector<int> qid, qcam, gid, gcam;
};

Instance random_instance(Rng& rng, std::size_t nq, std::size_t ng, int ids, int cams, std::size_t dim) {
  Instance in;
  in.qf = Matrix(nq, dim);
  in.gf = Matrix(ng, dim);
  for (auto& v : in.qf.data) v = rng.uniform(-1, 1);
  for (auto& v : in.gf.data) v = rng.uniform(-1, 1);
  // Coarse values create exact similarity ties.
  for (std::size_t g = 0; g < ng; g += 7) {
    for (std::size_t j = 0; j < dim; ++j) in.gf(g, j) = std::round(in.gf(g, j));
  }
  for (std::size_t i = 0; i < nq; ++i) {
    in.qid.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(ids))));
    in.qcam.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(cams))));
  }
  for (std::size_t i = 0; i < ng; ++i) {
    in.gid.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(ids))));
    in.gcam.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(cams))));
  }
  return in;
}

// Exhaustive oracle: for each candidate, its rank is the number of valid
// gallery items that beat it (higher similarity, or equal with lower index).
EvalResult brute_force(const Instance& in) {
  const std::size_t nq = in.qf.rows, ng = in.gf.rows;
  std::vector<std::vector<double>> sim(nq, std::vector<double>(ng));
  for (std::size_t q = 0; q < nq; ++q) {
    for (std::size_t g = 0; g < ng; ++g) {
      double dot = 0, a = 0, b = 0;
      for (std::size_t j = 0; j < in.qf.cols; ++j) {
        dot += in.qf(q, j) * in.gf(g, j);
        a += in.qf(q, j) * in.qf(q, j);
        b += in.gf(g, j) * in.gf(g, j);
      }
      sim[q][g] = (a == 0 || b == 0) ? 0.0 : dot / (std::sqrt(a) * std::sqrt(b));
    }
  }
  EvalResult r;
  int h1 = 0, h5 = 0, h10 = 0;
  double ap = 0.0;
  for (std::size_t q = 0; q < nq; ++q) {
    auto valid = [&](std::size_t g) { return !(in.gid[g] == in.qid[q] && in.gcam[g] == in.qcam[q]); };
    std::vector<std::size_t> rank_of(ng, 0);
    std::vector<std::size_t> positives;
    for (std::size_t g = 0; g < ng; ++g) {
      if (!valid(g)) continue;
      std::size_t better = 0;
      for (std::size_t o = 0; o < ng; ++o) {
        if (o == g || !valid(o)) continue;
        if (sim[q][o] > sim[q][g] || (sim[q][o] == sim[q][g] && o < g)) ++better;
      }
      rank_of[g] = better;
      if (in.gid[g] == in.qid[q]) positives.push_back(g);
    }
    if (positives.empty()) {
      ++r.skipped_queries;
      continue;
    }
    ++r.evaluated_queries;
    std::vector<std::size_t> ranks;
    for (std::size_t g : positives) ranks.push_back(rank_of[g]);
    std::sort(ranks.begin(), ranks.end());
    h1 += ranks[0] < 1;
    h5 += ranks[0] < 5;
    h10 += ranks[0] < 10;
    double s = 0.0;
    for (std::size_t i = 0; i < ranks.size(); ++i) s += static_cast<double>(i + 1) / static_cast<double>(ranks[i] + 1);
    ap += s / static_cast<double>(ranks.size());
  }
  if (r.evaluated_queries > 0) {
    const double n = r.evaluated_queries;
    r.rank1 = 100.0 * h1 / n;
    r.rank5 = 100.0 * h5 / n;
    r.rank10 = 100.0 * h10 / n;
    r.map = 100.0 * ap / n;
  }
  return r;
}

}  // namespace

TEST(AveragePrecision, Examples) {
  EXPECT_DOUBLE_EQ(average_precision(Flags{1}), 1.0);
  EXPECT_DOUBLE_EQ(average_precision(Flags{0, 1}), 0.5);
  EXPECT_NEAR(average_precision(Flags{1, 0, 1, 1, 0}), (1.0 + 2.0 / 3.0 + 3.0 / 4.0) / 3.0, 1e-15);
  EXPECT_NEAR(average_precision(Flags{1, 0, 1, 1, 0}), 0.8056, 1e-4);
  EXPECT_THROW(average_precision(Flags{0, 0}), std::invalid_argument);
}

TEST(Evaluate, SingleCrossCameraMatch) {
  Matrix qf(1, 2), gf(1, 2);
  qf(0, 0) = 1;
  gf(0, 0) = 1;
  const std::vector<int> qid{3}, qcam{0}, gid{3}, gcam{1};
  const auto r = evaluate_features({qf, qid, qcam}, {gf, gid, gcam});
  EXPECT_EQ(r.rank1, 100.0);
  EXPECT_EQ(r.map, 100.0);
}

TEST(Evaluate, TrueMatchSecond) {
  Matrix qf(1, 2), gf(2, 2);
  qf(0, 0) = 1;
  gf(0, 0) = 1;  // impostor, identical direction
  gf(1, 0) = 1;
  gf(1, 1) = 1;
  const std::vector<int> qid{1}, qcam{0}, gid{2, 1}, gcam{1, 1};
  const auto r = evaluate_features({qf, qid, qcam}, {gf, gid, gcam});
  EXPECT_EQ(r.rank1, 0.0);
  EXPECT_EQ(r.rank5, 100.0);
  EXPECT_DOUBLE_EQ(r.map, 50.0);
}

TEST(Evaluate, SameCameraSameIdentityExcluded) {
  Matrix qf(1, 2), gf(2, 2);
  qf(0, 0) = 1;
  gf(0, 0) = 1;
  gf(1, 1) = 1;
  const std::vector<int> qid{1}, qcam{0}, gid{1, 1}, gcam{0, 1};
  const auto r = evaluate_features({qf, qid, qcam}, {gf, gid, gcam});
  EXPECT_EQ(r.rank1, 100.0);  // only the cross-camera copy counts, and it is alone
  const std::vector<int> gcam_same{0, 0};
  const auto s = evaluate_features({qf, qid, qcam}, {gf, gid, gcam_same});
  EXPECT_EQ(s.skipped_queries, 1);
  EXPECT_EQ(s.evaluated_queries, 0);
}

TEST(Evaluate, TiesBrokenByGalleryIndex) {
  Matrix qf(1, 1, 1.0), gf(2, 1, 1.0);
  const std::vector<int> qid{5}, qcam{0}, gid{9, 5}, gcam{1, 1};
  EXPECT_EQ(evaluate_features({qf, qid, qcam}, {gf, gid, gcam}).rank1, 0.0);
  const std::vector<int> gid2{5, 9};
  EXPECT_EQ(evaluate_features({qf, qid, qcam}, {gf, gid2, gcam}).rank1, 100.0);
}

TEST(Evaluate, MatchesBruteForceOracle) {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const auto in = random_instance(rng, 20, 50, 8, 3, 4);
    const auto r = evaluate_features({in.qf, in.qid, in.qcam}, {in.gf, in.gid, in.gcam});
    const auto o = brute_force(in);
    EXPECT_EQ(r.skipped_queries, o.skipped_queries);
    EXPECT_EQ(r.rank1, o.rank1);
    EXPECT_EQ(r.rank5, o.rank5);
    EXPECT_EQ(r.rank10, o.rank10);
    EXPECT_NEAR(r.map, o.map, 1e-12);
    EXPECT_LE(r.rank1, r.rank5);
    EXPECT_LE(r.rank5, r.rank10);
    EXPECT_GE(r.map, 0.0);
    EXPECT_LE(r.map, 100.0);
  }
}

TEST(Evaluate, EmptyInputsThrow) {
  Matrix q(0, 2), g(1, 2);
  const std::vector<int> none, one{0};
  EXPECT_THROW(evaluate_features({q, none, none}, {g, one, one}), std::invalid_argument);
}

TEST(CommunicationCost, Formula) {
  const auto c = communication_cost(300, 1000, 9);
  EXPECT_EQ(c.total, 600u * 1000u);
  EXPECT_EQ(c.total_per_client, 9u * 600u * 1000u);
  EXPECT_EQ(communication_cost(0, 1000, 9).total, 0u);
  EXPECT_EQ(communication_cost(1, 1000, 9).total, 2000u);
  EXPECT_THROW(communication_cost(-1, 1, 1), std::invalid_argument);
}

TEST(Best3, Examples) {
  EXPECT_DOUBLE_EQ(best3_average(std::vector<double>{10, 20, 30, 40}).value, 30.0);
  EXPECT_DOUBLE_EQ(best3_average(std::vector<double>{7, 7, 7, 7, 7}).value, 7.0);
  const auto partial = best3_average(std::vector<double>{4, 8});
  EXPECT_TRUE(partial.partial);
  EXPECT_DOUBLE_EQ(partial.value, 6.0);
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s(3 + rng.below(20));
    for (auto& v : s) v = rng.uniform(0, 100);
    std::vector<double> sorted(s);
    std::sort(sorted.begin(), sorted.end());
    const double expect = (sorted[sorted.size() - 1] + sorted[sorted.size() - 2] + sorted[sorted.size() - 3]) / 3.0;
    EXPECT_NEAR(best3_average(s).value, expect, 1e-12);
  }
}

TEST(Volatility, Examples) {
  EXPECT_EQ(volatility(std::vector<double>{5, 5, 5, 5}), 0.0);
  EXPECT_NEAR(volatility(std::vector<double>{1, 3, 5, 7, 9}), 0.0, 1e-12);
  EXPECT_NEAR(volatility(std::vector<double>{0, 10, 0, 10}), 11.547, 1e-3);
  EXPECT_EQ(volatility(std::vector<double>{1, 2}), 0.0);
}
