#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedreid/matrix.hpp"
#include "fedreid/rng.hpp"

namespace fedreid {

/// Shape of the shared feature extractor: features = x * W + b.
struct BackboneDims {
  std::size_t input_dim = 0;
  std::size_t feature_dim = 0;

  std::size_t size() const { return input_dim * feature_dim + feature_dim; }
  friend bool operator==(const BackboneDims&, const BackboneDims&) = default;
};

struct ModelSpec {
  std::size_t input_dim = 0;
  std::size_t feature_dim = 0;
  std::size_t num_ids = 0;

  BackboneDims backbone() const { return {input_dim, feature_dim}; }
  std::size_t backbone_size() const { return input_dim * feature_dim + feature_dim; }
  std::size_t head_size() const { return feature_dim * num_ids + num_ids; }

  void validate() const {
    if (input_dim == 0 || feature_dim == 0 || num_ids == 0) {
      throw std::invalid_argument("ModelSpec: all dimensions must be >= 1");
    }
  }
  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// Backbone (shared part) and identity head (private part), both flat:
/// row-major weights followed by biases.
struct ModelParams {
  std::vector<double> backbone;
  std::vector<double> head;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

struct OptimizerConfig {
  double lr_head = 0.05;
  double lr_backbone = 0.005;
  int step_size = 40;
  double gamma = 0.1;
  double weight_decay = 5e-4;
  double momentum = 0.9;

  /// Step schedule: base * gamma^floor(round / step_size).
  double effective_lr(double base, int round) const {
    const int steps = step_size > 0 ? round / step_size : 0;
    double lr = base;
    for (int i = 0; i < steps; ++i) lr *= gamma;
    return lr;
  }

  void validate() const {
    if (!(lr_head >= 0.0) || !(lr_backbone >= 0.0)) throw std::invalid_argument("optimizer: learning rates must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("optimizer: momentum must be in [0, 1)");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("optimizer: gamma must be in (0, 1]");
    if (step_size < 1) throw std::invalid_argument("optimizer: step_size must be >= 1");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("optimizer: weight_decay must be >= 0");
  }
};

/// Momentum buffers, one per parameter part. Empty means "all zeros".
struct MomentumState {
  std::vector<double> backbone;
  std::vector<double> head;
};

namespace detail {

inline std::vector<double> uniform_layer(std::size_t fan_in, std::size_t fan_out, std::uint64_t seed) {
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> p(fan_in * fan_out + fan_out, 0.0);
  for (std::size_t i = 0; i < fan_in * fan_out; ++i) p[i] = rng.uniform(-bound, bound);
  return p;
}

}  // namespace detail

/// Backbone init depends only on (dims, seed), so clients with different
/// identity counts share the same starting backbone for a given seed.
inline std::vector<double> init_backbone(const BackboneDims& dims, std::uint64_t seed) {
  return detail::uniform_layer(dims.input_dim, dims.feature_dim, derive_seed(seed, Stream::backbone_init));
}

inline std::vector<double> init_head(const ModelSpec& spec, std::uint64_t seed) {
  return detail::uniform_layer(spec.feature_dim, spec.num_ids, derive_seed(seed, Stream::head_init));
}

/// Weights uniform in +-1/sqrt(fan_in), biases zero.
inline ModelParams init_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  return {init_backbone(spec.backbone(), seed), init_head(spec, seed)};
}

struct ForwardResult {
  Matrix features;
  Matrix logits;
};

inline Matrix extract_features(const BackboneDims& dims, std::span<const double> backbone, const Matrix& inputs) {
  if (inputs.cols != dims.input_dim) {
    throw std::invalid_argument("extract_features: input has " + std::to_string(inputs.cols) + " columns, expected " +
                                std::to_string(dims.input_dim));
  }
  return affine(inputs, backbone, dims.feature_dim);
}

inline ForwardResult forward(const ModelSpec& spec, const ModelParams& params, const Matrix& inputs) {
  if (params.backbone.size() != spec.backbone_size() || params.head.size() != spec.head_size()) {
    throw std::invalid_argument("forward: parameter lengths do not match spec");
  }
  Matrix features = extract_features(spec.backbone(), params.backbone, inputs);
  Matrix logits = affine(features, params.head, spec.num_ids);
  return {std::move(features), std::move(logits)};
}

struct LossGrad {
  double loss = 0.0;
  ModelParams grad;
};

/// Mean softmax cross-entropy over the batch and its exact gradient.
inline LossGrad loss_and_grad(const ModelSpec& spec, const ModelParams& params, const Matrix& inputs,
                              std::span<const int> labels) {
  if (labels.size() != inputs.rows) throw std::invalid_argument("loss_and_grad: label count != batch rows");
  if (inputs.rows == 0) throw std::invalid_argument("loss_and_grad: empty batch");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= spec.num_ids) {
      throw std::invalid_argument("loss_and_grad: label " + std::to_string(y) + " outside [0, " +
                                  std::to_string(spec.num_ids) + ")");
    }
  }
  const auto [features, logits] = forward(spec, params, inputs);
  const std::size_t n = inputs.rows;
  const std::size_t in = spec.input_dim;
  const std::size_t fd = spec.feature_dim;
  const std::size_t c = spec.num_ids;
  const double inv_n = 1.0 / static_cast<double>(n);

  // dlogits = (softmax - onehot) / n
  Matrix dlogits(n, c);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const auto z = logits.row(r);
    double zmax = z[0];
    for (double v : z) zmax = std::max(zmax, v);
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - zmax);
    const double log_sum = std::log(sum) + zmax;
    const auto y = static_cast<std::size_t>(labels[r]);
    loss += log_sum - z[y];
    for (std::size_t j = 0; j < c; ++j) dlogits(r, j) = std::exp(z[j] - log_sum) * inv_n;
    dlogits(r, y) -= inv_n;
  }
  loss *= inv_n;

  LossGrad out;
  out.loss = loss;
  out.grad.backbone.assign(spec.backbone_size(), 0.0);
  out.grad.head.assign(spec.head_size(), 0.0);
  double* gwh = out.grad.head.data();
  double* gbh = gwh + fd * c;
  double* gwb = out.grad.backbone.data();
  double* gbb = gwb + in * fd;
  const double* wh = params.head.data();

  Matrix dfeat(n, fd);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < c; ++j) {
      const double d = dlogits(r, j);
      gbh[j] += d;
      for (std::size_t k = 0; k < fd; ++k) {
        gwh[k * c + j] += features(r, k) * d;
        dfeat(r, k) += wh[k * c + j] * d;
      }
    }
    for (std::size_t k = 0; k < fd; ++k) {
      const double d = dfeat(r, k);
      gbb[k] += d;
      for (std::size_t i = 0; i < in; ++i) gwb[i * fd + k] += inputs(r, i) * d;
    }
  }
  return out;
}

namespace detail {

inline void momentum_update(std::vector<double>& p, std::span<const double> g, std::vector<double>& u, double lr,
                            const OptimizerConfig& opt) {
  if (u.size() != p.size()) u.assign(p.size(), 0.0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    u[i] = opt.momentum * u[i] + (g[i] + opt.weight_decay * p[i]);
    p[i] -= lr * u[i];
  }
}

}  // namespace detail

/// One SGD step with momentum and weight decay (applied to weights and
/// biases alike); backbone and head use their own scheduled rates.
inline void sgd_step(ModelParams& params, const ModelParams& grad, MomentumState& state, const OptimizerConfig& opt,
                     int round) {
  if (grad.backbone.size() != params.backbone.size() || grad.head.size() != params.head.size()) {
    throw std::invalid_argument("sgd_step: gradient shape mismatch");
  }
  detail::momentum_update(params.backbone, grad.backbone, state.backbone, opt.effective_lr(opt.lr_backbone, round),
                          opt);
  detail::momentum_update(params.head, grad.head, state.head, opt.effective_lr(opt.lr_head, round), opt);
}

/// Integer-labelled training data for one client.
struct TrainSet {
  Matrix inputs;
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return inputs.rows; }
};

/// Runs `epochs` passes of minibatch SGD. Each epoch is shuffled from
/// (seed, round, epoch); the trailing partial batch is trained on.
/// Returns the per-batch losses.
inline std::vector<double> local_train(const ModelSpec& spec, ModelParams& params, MomentumState& state,
                                       const TrainSet& data, int epochs, int batch_size, const OptimizerConfig& opt,
                                       int round, std::uint64_t seed) {
  if (data.size() == 0) throw std::invalid_argument("local_train: empty dataset");
  if (epochs < 0) throw std::invalid_argument("local_train: epochs must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("local_train: batch size must be >= 1");
  const std::size_t n = data.size();
  const auto b = static_cast<std::size_t>(batch_size);
  std::vector<double> losses;
  std::vector<std::size_t> order(n);
  std::vector<int> labels;
  for (int e = 0; e < epochs; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, Stream::shuffle,
                        {static_cast<std::uint64_t>(round), static_cast<std::uint64_t>(e)}));
    rng.shuffle(order);
    for (std::size_t start = 0; start < n; start += b) {
      const std::size_t len = std::min(b, n - start);
      const std::span<const std::size_t> idx(order.data() + start, len);
      const Matrix x = gather_rows(data.inputs, idx);
      labels.resize(len);
      for (std::size_t i = 0; i < len; ++i) labels[i] = data.labels[idx[i]];
      const LossGrad lg = loss_and_grad(spec, params, x, labels);
      losses.push_back(lg.loss);
      sgd_step(params, lg.grad, state, opt, round);
    }
  }
  return losses;
}

/// Mean cross-entropy over a whole dataset (no gradient).
inline double dataset_loss(const ModelSpec& spec, const ModelParams& params, const TrainSet& data) {
  std::vector<int> labels(data.labels);
  return loss_and_grad(spec, params, data.inputs, labels).loss;
}

}  // namespace fedreid
