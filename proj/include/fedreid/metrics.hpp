#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedreid/matrix.hpp"
#include "fedreid/model.hpp"
#include "fedreid/synth_data.hpp"

namespace fedreid {

/// Retrieval accuracy in percent.
struct EvalResult {
  int round = 0;
  int client = 0;
  double rank1 = 0.0;
  double rank5 = 0.0;
  double rank10 = 0.0;
  double map = 0.0;
  /// Queries with no valid same-identity gallery entry after filtering.
  int skipped_queries = 0;
  int evaluated_queries = 0;

  friend bool operator==(const EvalResult&, const EvalResult&) = default;
};

/// AP = (1/R) * sum over relevant positions p of precision@p.
/// Flags are nonzero for relevant positions.
inline double average_precision(std::span<const unsigned char> relevant) {
  double hits = 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < relevant.size(); ++i) {
    if (relevant[i]) {
      hits += 1.0;
      sum += hits / static_cast<double>(i + 1);
    }
  }
  if (hits == 0.0) throw std::invalid_argument("average_precision: no relevant items");
  return sum / hits;
}

/// dot(a, b) / (|a| |b|); 0 when either vector has zero norm.
inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

struct LabeledFeatures {
  const Matrix& features;
  std::span<const int> identity;
  std::span<const int> camera;
};

/// Ranks the gallery for each query by descending cosine similarity (ties by
/// gallery index), drops same-identity same-camera entries, and accumulates
/// CMC and AP. Queries left without a true match are skipped and counted.
inline EvalResult evaluate_features(const LabeledFeatures& query, const LabeledFeatures& gallery) {
  if (query.features.rows == 0 || gallery.features.rows == 0) {
    throw std::invalid_argument("evaluate: query and gallery must be non-empty");
  }
  if (query.features.cols != gallery.features.cols) throw std::invalid_argument("evaluate: feature width mismatch");
  const std::size_t ng = gallery.features.rows;
  EvalResult res;
  std::size_t hit1 = 0, hit5 = 0, hit10 = 0;
  double ap_sum = 0.0;
  std::vector<double> sim(ng);
  std::vector<std::size_t> order(ng);
  std::vector<unsigned char> flags;
  flags.reserve(ng);
  for (std::size_t q = 0; q < query.features.rows; ++q) {
    const auto qf = query.features.row(q);
    for (std::size_t g = 0; g < ng; ++g) sim[g] = cosine_similarity(qf, gallery.features.row(g));
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });
    flags.clear();
    for (std::size_t g : order) {
      const bool same_id = gallery.identity[g] == query.identity[q];
      if (same_id && gallery.camera[g] == query.camera[q]) continue;
      flags.push_back(same_id ? 1 : 0);
    }
    const auto first = std::find(flags.begin(), flags.end(), 1);
    if (first == flags.end()) {
      ++res.skipped_queries;
      continue;
    }
    ++res.evaluated_queries;
    const auto pos = static_cast<std::size_t>(first - flags.begin());
    hit1 += pos < 1;
    hit5 += pos < 5;
    hit10 += pos < 10;
    ap_sum += average_precision(flags);
  }
  if (res.evaluated_queries > 0) {
    const double n = res.evaluated_queries;
    res.rank1 = 100.0 * static_cast<double>(hit1) / n;
    res.rank5 = 100.0 * static_cast<double>(hit5) / n;
    res.rank10 = 100.0 * static_cast<double>(hit10) / n;
    res.map = 100.0 * ap_sum / n;
  }
  return res;
}

inline EvalResult evaluate(const BackboneDims& dims, std::span<const double> backbone, const TestSplit& split) {
  const Matrix qf = extract_features(dims, backbone, split.query.x);
  const Matrix gf = extract_features(dims, backbone, split.gallery.x);
  return evaluate_features({qf, split.query.identity, split.query.camera},
                           {gf, split.gallery.identity, split.gallery.camera});
}

struct CommCost {
  int rounds = 0;
  std::uint64_t model_bytes = 0;
  /// Download plus upload of one model.
  std::uint64_t per_round = 0;
  /// rounds * 2 * model_bytes.
  std::uint64_t total = 0;
  /// rounds * clients_per_round * 2 * model_bytes.
  std::uint64_t total_per_client = 0;
};

inline CommCost communication_cost(int rounds, std::uint64_t model_bytes, int clients_per_round) {
  if (rounds < 0) throw std::invalid_argument("communication_cost: rounds must be >= 0");
  CommCost c;
  c.rounds = rounds;
  c.model_bytes = model_bytes;
  c.per_round = 2 * model_bytes;
  c.total = static_cast<std::uint64_t>(rounds) * c.per_round;
  c.total_per_client = c.total * static_cast<std::uint64_t>(clients_per_round);
  return c;
}

struct Best3 {
  double value = 0.0;
  /// Fewer than three values were available.
  bool partial = false;
};

/// Mean of the three largest values.
inline Best3 best3_average(std::span<const double> series) {
  if (series.empty()) throw std::invalid_argument("best3_average: empty series");
  std::vector<double> v(series.begin(), series.end());
  std::sort(v.begin(), v.end(), std::greater<>());
  const std::size_t k = std::min<std::size_t>(3, v.size());
  double s = 0.0;
  for (std::size_t i = 0; i < k; ++i) s += v[i];
  return {s / static_cast<double>(k), v.size() < 3};
}

/// Sample standard deviation of successive differences; 0 with fewer than
/// two differences.
inline double volatility(std::span<const double> series) {
  if (series.size() < 3) return 0.0;
  std::vector<double> d;
  for (std::size_t i = 1; i < series.size(); ++i) d.push_back(series[i] - series[i - 1]);
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
  double ss = 0.0;
  for (double x : d) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(d.size() - 1));
}

}  // namespace fedreid
