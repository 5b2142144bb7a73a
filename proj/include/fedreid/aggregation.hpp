#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedreid/matrix.hpp"
#include "fedreid/model.hpp"
#include "fedreid/rng.hpp"

namespace fedreid {

/// Aggregation coefficients aligned with ascending client ids.
using WeightVector = std::vector<double>;

inline WeightVector size_weights(std::span<const std::size_t> sizes) {
  if (sizes.empty()) throw std::invalid_argument("size_weights: empty client list");
  double total = 0.0;
  for (std::size_t n : sizes) {
    if (n == 0) throw std::invalid_argument("size_weights: client with zero samples");
    total += static_cast<double>(n);
  }
  WeightVector w;
  w.reserve(sizes.size());
  for (std::size_t n : sizes) w.push_back(static_cast<double>(n) / total);
  return w;
}

inline void check_cdw_scores(std::span<const double> m) {
  if (m.empty()) throw std::invalid_argument("cdw_weights: empty client list");
  for (double v : m) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw std::invalid_argument("cdw_weights: score " + std::to_string(v) + " is not a finite non-negative value");
    }
  }
}

/// m_k / sum(m): larger model change gets a larger weight. All-zero scores
/// fall back to uniform weights.
inline WeightVector cdw_weights(std::span<const double> m) {
  check_cdw_scores(m);
  const double total = std::accumulate(m.begin(), m.end(), 0.0);
  WeightVector w(m.size());
  if (total == 0.0) {
    for (auto& x : w) x = 1.0 / static_cast<double>(m.size());
    return w;
  }
  for (std::size_t i = 0; i < m.size(); ++i) w[i] = m[i] / total;
  return w;
}

/// The reciprocal-sum variant m_k / sum(1/m_j). The coefficients are not
/// normalized; any zero score falls back to uniform weights.
inline WeightVector cdw_weights_literal(std::span<const double> m) {
  check_cdw_scores(m);
  double inv = 0.0;
  for (double v : m) {
    if (v == 0.0) return WeightVector(m.size(), 1.0 / static_cast<double>(m.size()));
    inv += 1.0 / v;
  }
  WeightVector w(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) w[i] = m[i] / inv;
  return w;
}

/// Elementwise weighted sum, accumulated in the given (ascending id) order.
/// The first term initializes the accumulator so a single weight of 1
/// reproduces its input bit for bit.
inline std::vector<double> aggregate_backbones(std::span<const std::vector<double>> backbones,
                                               std::span<const double> weights) {
  if (backbones.empty()) throw std::invalid_argument("aggregate_backbones: no updates");
  if (backbones.size() != weights.size()) {
    throw std::invalid_argument("aggregate_backbones: " + std::to_string(backbones.size()) + " updates but " +
                                std::to_string(weights.size()) + " weights");
  }
  const std::size_t len = backbones[0].size();
  for (const auto& b : backbones) {
    if (b.size() != len) throw std::invalid_argument("aggregate_backbones: backbone length mismatch");
  }
  std::vector<double> out(len);
  for (std::size_t j = 0; j < len; ++j) out[j] = weights[0] * backbones[0][j];
  for (std::size_t k = 1; k < backbones.size(); ++k) {
    for (std::size_t j = 0; j < len; ++j) out[j] += weights[k] * backbones[k][j];
  }
  return out;
}

/// Unweighted mean of equally shaped matrices.
inline Matrix average_soft_labels(std::span<const Matrix> labels) {
  if (labels.empty()) throw std::invalid_argument("average_soft_labels: no matrices");
  Matrix out(labels[0].rows, labels[0].cols);
  for (const auto& m : labels) {
    if (m.rows != out.rows || m.cols != out.cols) throw std::invalid_argument("average_soft_labels: shape mismatch");
    for (std::size_t i = 0; i < m.data.size(); ++i) out.data[i] += m.data[i];
  }
  const double inv = 1.0 / static_cast<double>(labels.size());
  for (auto& v : out.data) v *= inv;
  return out;
}

struct KdConfig {
  double finetune_lr = 0.0005;
  int finetune_epochs = 1;
  /// Minibatch size for server fine-tuning; 0 means "use the client batch size".
  int finetune_batch = 0;

  void validate() const {
    if (!(finetune_lr > 0.0)) throw std::invalid_argument("kd: finetune_lr must be > 0");
    if (finetune_epochs < 0) throw std::invalid_argument("kd: finetune_epochs must be >= 0");
    if (finetune_batch < 0) throw std::invalid_argument("kd: finetune_batch must be >= 0");
  }
};

/// Mean over samples of the squared L2 distance between backbone features and targets.
inline double distillation_loss(const BackboneDims& dims, std::span<const double> backbone, const Matrix& shared,
                                const Matrix& targets) {
  const Matrix f = extract_features(dims, backbone, shared);
  double acc = 0.0;
  for (std::size_t i = 0; i < f.data.size(); ++i) {
    const double d = f.data[i] - targets.data[i];
    acc += d * d;
  }
  return acc / static_cast<double>(f.rows);
}

/// Plain minibatch SGD on the distillation loss. Batches are shuffled from
/// `seed`; the trailing partial batch is used.
inline std::vector<double> kd_finetune(const BackboneDims& dims, std::vector<double> backbone, const Matrix& shared,
                                       const Matrix& targets, const KdConfig& kd, int batch_size, std::uint64_t seed) {
  if (targets.rows != shared.rows || targets.cols != dims.feature_dim) {
    throw std::invalid_argument("kd_finetune: target shape does not match shared data");
  }
  if (backbone.size() != dims.size()) throw std::invalid_argument("kd_finetune: backbone length mismatch");
  const std::size_t b = static_cast<std::size_t>(kd.finetune_batch > 0 ? kd.finetune_batch : batch_size);
  if (b == 0) throw std::invalid_argument("kd_finetune: batch size must be >= 1");
  const std::size_t n = shared.rows;
  const std::size_t in = dims.input_dim;
  const std::size_t fd = dims.feature_dim;
  std::vector<std::size_t> order(n);
  std::vector<double> grad(backbone.size());
  for (int e = 0; e < kd.finetune_epochs; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, Stream::kd, {static_cast<std::uint64_t>(e)}));
    rng.shuffle(order);
    for (std::size_t start = 0; start < n; start += b) {
      const std::size_t len = std::min(b, n - start);
      const std::span<const std::size_t> idx(order.data() + start, len);
      const Matrix x = gather_rows(shared, idx);
      const Matrix f = extract_features(dims, backbone, x);
      std::fill(grad.begin(), grad.end(), 0.0);
      double* gw = grad.data();
      double* gb = gw + in * fd;
      const double scale = 2.0 / static_cast<double>(len);
      for (std::size_t r = 0; r < len; ++r) {
        const auto t = targets.row(idx[r]);
        for (std::size_t k = 0; k < fd; ++k) {
          const double d = scale * (f(r, k) - t[k]);
          gb[k] += d;
          for (std::size_t i = 0; i < in; ++i) gw[i * fd + k] += x(r, i) * d;
        }
      }
      for (std::size_t j = 0; j < backbone.size(); ++j) backbone[j] -= kd.finetune_lr * grad[j];
    }
  }
  return backbone;
}

}  // namespace fedreid
