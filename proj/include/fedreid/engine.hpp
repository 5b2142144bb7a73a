#pragma once

#include <algorithm>
#include <cstdint>
#include <exception>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "fedreid/aggregation.hpp"
#include "fedreid/matrix.hpp"
#include "fedreid/metrics.hpp"
#include "fedreid/model.hpp"
#include "fedreid/rng.hpp"
#include "fedreid/synth_data.hpp"

namespace fedreid {

enum class Protocol { fedavg, fedpav };
enum class Weighting { size, cdw, cdw_literal };

inline std::string_view to_string(Protocol p) { return p == Protocol::fedavg ? "fedavg" : "fedpav"; }

struct Strategy {
  Protocol protocol = Protocol::fedpav;
  Weighting weighting = Weighting::size;
  bool kd = false;

  bool cdw() const { return weighting != Weighting::size; }
};

struct FederationConfig {
  int total_clients = 1;
  int clients_per_round = 1;
  int rounds = 300;
  int local_epochs = 1;
  int batch_size = 32;
  std::size_t feature_dim = 8;
  OptimizerConfig opt;
  Strategy strategy;
  KdConfig kd;
  int eval_every = 10;
  std::uint64_t seed = 0;
  /// Clients executed concurrently within a round; results do not depend on it.
  unsigned threads = 1;

  void validate() const {
    if (total_clients < 1) throw std::invalid_argument("federation: total_clients must be >= 1");
    if (clients_per_round < 1 || clients_per_round > total_clients) {
      throw std::invalid_argument("federation: clients_per_round (" + std::to_string(clients_per_round) +
                                  ") must be in [1, total_clients=" + std::to_string(total_clients) + "]");
    }
    if (rounds < 1) throw std::invalid_argument("federation: rounds must be >= 1");
    if (local_epochs < 0) throw std::invalid_argument("federation: local_epochs must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("federation: batch_size must be >= 1");
    if (feature_dim < 1) throw std::invalid_argument("federation: feature_dim must be >= 1");
    if (eval_every < 1) throw std::invalid_argument("federation: eval_every must be >= 1");
    opt.validate();
    if (strategy.kd) kd.validate();
  }
};

inline std::uint64_t client_seed(std::uint64_t run_seed, int client_id) {
  return derive_seed(run_seed, Stream::client, {static_cast<std::uint64_t>(client_id)});
}

inline std::uint64_t server_seed(std::uint64_t run_seed) { return derive_seed(run_seed, Stream::server); }

/// Everything a client keeps between rounds. Only the backbone ever leaves it
/// under FedPav.
struct ClientState {
  int client_id = 0;
  ModelSpec spec;
  std::shared_ptr<const TrainSet> data;
  /// Private identity classifier; empty until the first participation.
  std::optional<std::vector<double>> head;
  MomentumState momentum;
  /// Fixed probe batch used for the cosine-distance score.
  std::vector<std::size_t> probe;
  std::uint64_t seed = 0;
};

inline ClientState make_client_state(int client_id, std::shared_ptr<const TrainSet> data, std::size_t feature_dim,
                                     int batch_size, std::uint64_t run_seed) {
  if (!data || data->size() == 0) throw std::invalid_argument("client " + std::to_string(client_id) + ": no data");
  ClientState s;
  s.client_id = client_id;
  s.spec = {data->inputs.cols, feature_dim, data->num_classes};
  s.spec.validate();
  s.seed = client_seed(run_seed, client_id);
  std::vector<std::size_t> all(data->size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  Rng rng(derive_seed(s.seed, Stream::probe));
  rng.shuffle(all);
  all.resize(std::min(all.size(), static_cast<std::size_t>(batch_size)));
  std::sort(all.begin(), all.end());
  s.probe = std::move(all);
  s.data = std::move(data);
  return s;
}

/// Server-side model. The head exists only under FedAvg.
struct GlobalModel {
  std::vector<double> backbone;
  std::optional<std::vector<double>> head;

  std::size_t parameter_count() const { return backbone.size() + (head ? head->size() : 0); }
};

struct ClientUpdate {
  int client_id = 0;
  std::vector<double> backbone;
  std::size_t n_k = 0;
  std::optional<double> m_k;
  std::optional<Matrix> soft_labels;
  /// Full-model upload, FedAvg only.
  std::optional<std::vector<double>> head;
  double mean_train_loss = 0.0;
};

/// K distinct ids, uniformly at random, returned in ascending order.
inline std::vector<int> select_clients(int n, int k, Rng& rng) {
  if (k < 1 || k > n) {
    throw std::invalid_argument("select_clients: K=" + std::to_string(k) + " must be in [1, N=" + std::to_string(n) +
                                "]");
  }
  std::vector<int> ids(static_cast<std::size_t>(n));
  std::iota(ids.begin(), ids.end(), 0);
  if (k < n) {
    for (int i = 0; i < k; ++i) {
      const auto j = static_cast<std::size_t>(i) + static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(n - i)));
      std::swap(ids[static_cast<std::size_t>(i)], ids[j]);
    }
    ids.resize(static_cast<std::size_t>(k));
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

/// Mean over rows of (1 - cos(before_i, after_i)), each term clamped to
/// [0, 2]. Identical rows, and rows where either side has zero norm,
/// contribute exactly 0.
inline double mean_cosine_distance(const Matrix& before, const Matrix& after) {
  if (before.rows != after.rows || before.cols != after.cols) {
    throw std::invalid_argument("mean_cosine_distance: shape mismatch");
  }
  if (before.rows == 0) throw std::invalid_argument("mean_cosine_distance: empty probe batch");
  double acc = 0.0;
  for (std::size_t r = 0; r < before.rows; ++r) {
    const auto a = before.row(r);
    const auto b = after.row(r);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      dot += a[i] * b[i];
      na += a[i] * a[i];
      nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0 || std::equal(a.begin(), a.end(), b.begin())) continue;
    acc += std::clamp(1.0 - dot / (std::sqrt(na) * std::sqrt(nb)), 0.0, 2.0);
  }
  return acc / static_cast<double>(before.rows);
}

/// Soft labels are the backbone's features on the shared set, in shared order.
inline Matrix client_soft_labels(const BackboneDims& dims, std::span<const double> backbone, const Matrix& shared) {
  return extract_features(dims, backbone, shared);
}

/// One client's local round: attach the head (stored, fresh or global),
/// train, keep the head, and report the backbone plus whatever the strategy
/// asks for (cosine score, soft labels, head under FedAvg).
inline ClientUpdate client_execute(const GlobalModel& global, ClientState& state, const FederationConfig& cfg,
                                   int round, const Matrix* shared = nullptr) {
  const ModelSpec& spec = state.spec;
  if (global.backbone.size() != spec.backbone_size()) {
    throw std::invalid_argument("client " + std::to_string(state.client_id) + ": global backbone has " +
                                std::to_string(global.backbone.size()) + " entries, expected " +
                                std::to_string(spec.backbone_size()));
  }
  ModelParams params;
  params.backbone = global.backbone;
  if (cfg.strategy.protocol == Protocol::fedavg) {
    if (!global.head || global.head->size() != spec.head_size()) {
      throw std::invalid_argument("client " + std::to_string(state.client_id) + ": FedAvg global head mismatch");
    }
    params.head = *global.head;
  } else {
    params.head = state.head ? *state.head : init_head(spec, state.seed);
  }

  const TrainSet& data = *state.data;
  Matrix probe_x;
  Matrix before;
  if (cfg.strategy.cdw()) {
    if (state.probe.empty()) throw std::invalid_argument("client " + std::to_string(state.client_id) + ": empty probe");
    probe_x = gather_rows(data.inputs, state.probe);
    before = forward(spec, params, probe_x).logits;
  }

  const std::vector<double> losses =
      local_train(spec, params, state.momentum, data, cfg.local_epochs, cfg.batch_size, cfg.opt, round, state.seed);

  ClientUpdate up;
  up.client_id = state.client_id;
  up.n_k = data.size();
  if (!losses.empty()) {
    double s = 0.0;
    for (double l : losses) s += l;
    up.mean_train_loss = s / static_cast<double>(losses.size());
  }
  if (cfg.strategy.cdw()) up.m_k = mean_cosine_distance(before, forward(spec, params, probe_x).logits);
  if (cfg.strategy.kd) {
    if (shared == nullptr) throw std::invalid_argument("client execution with KD requires a shared dataset");
    up.soft_labels = client_soft_labels(spec.backbone(), params.backbone, *shared);
  }
  if (cfg.strategy.protocol == Protocol::fedavg) {
    up.head = params.head;
  } else {
    state.head = params.head;
  }
  up.backbone = std::move(params.backbone);
  return up;
}

/// FedPav client step with the cosine score disabled.
inline ClientUpdate client_execute_fedpav(const std::vector<double>& global_backbone, ClientState& state,
                                          FederationConfig cfg, int round) {
  cfg.strategy = {Protocol::fedpav, Weighting::size, false};
  return client_execute({global_backbone, std::nullopt}, state, cfg, round);
}

/// FedPav client step that also reports the cosine-distance score m_k.
inline ClientUpdate client_execute_cdw(const std::vector<double>& global_backbone, ClientState& state,
                                       FederationConfig cfg, int round) {
  cfg.strategy = {Protocol::fedpav, Weighting::cdw, false};
  return client_execute({global_backbone, std::nullopt}, state, cfg, round);
}

struct AggregateResult {
  std::vector<int> client_ids;
  WeightVector weights;
  WeightVector size_weights;
  std::vector<double> cdw_scores;
  std::vector<double> train_loss;
  bool weight_fallback = false;
  std::vector<double> backbone;
  std::optional<std::vector<double>> head;
  std::vector<Matrix> soft_labels;
};

/// Server reduction. Updates are sorted by client id first, so the result is
/// independent of the order in which clients finished.
inline AggregateResult aggregate_updates(std::vector<ClientUpdate> updates, const Strategy& strategy) {
  if (updates.empty()) throw std::invalid_argument("aggregate_updates: no updates");
  std::sort(updates.begin(), updates.end(),
            [](const ClientUpdate& a, const ClientUpdate& b) { return a.client_id < b.client_id; });
  AggregateResult out;
  std::vector<std::vector<double>> backbones;
  std::vector<std::vector<double>> heads;
  std::vector<std::size_t> sizes;
  for (auto& u : updates) {
    out.client_ids.push_back(u.client_id);
    sizes.push_back(u.n_k);
    out.train_loss.push_back(u.mean_train_loss);
    if (strategy.cdw()) {
      if (!u.m_k) throw std::invalid_argument("aggregate_updates: client " + std::to_string(u.client_id) + " sent no score");
      out.cdw_scores.push_back(*u.m_k);
    }
    if (strategy.kd) {
      if (!u.soft_labels) throw std::invalid_argument("aggregate_updates: client " + std::to_string(u.client_id) + " sent no soft labels");
      out.soft_labels.push_back(std::move(*u.soft_labels));
    }
    if (strategy.protocol == Protocol::fedavg) {
      if (!u.head) throw std::invalid_argument("aggregate_updates: FedAvg client " + std::to_string(u.client_id) + " sent no head");
      heads.push_back(std::move(*u.head));
    }
    backbones.push_back(std::move(u.backbone));
  }
  out.size_weights = size_weights(sizes);
  if (!strategy.cdw()) {
    out.weights = out.size_weights;
  } else if (std::all_of(out.cdw_scores.begin(), out.cdw_scores.end(), [](double m) { return m == 0.0; })) {
    out.weights = out.size_weights;
    out.weight_fallback = true;
  } else if (strategy.weighting == Weighting::cdw) {
    out.weights = cdw_weights(out.cdw_scores);
  } else {
    out.weights = cdw_weights_literal(out.cdw_scores);
  }
  out.backbone = aggregate_backbones(backbones, out.weights);
  if (!heads.empty()) out.head = aggregate_backbones(heads, out.weights);
  return out;
}

struct RoundRecord {
  int round = 0;
  std::vector<int> selected;
  /// Coefficients actually used, aligned with `selected`.
  WeightVector weights;
  WeightVector size_weights;
  std::vector<double> cdw_scores;
  std::vector<double> train_loss;
  /// CDW was requested but every score was zero, so size weights were used.
  bool weight_fallback = false;
  std::optional<double> kd_loss_before;
  std::optional<double> kd_loss_after;
};

class RoundError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Executes one synchronous round. Client states are updated only if every
/// selected client succeeds; otherwise a RoundError is thrown and neither
/// `global` nor `clients` changes.
inline RoundRecord run_round(GlobalModel& global, std::vector<ClientState>& clients, const FederationConfig& cfg,
                             int round, const Matrix* shared = nullptr) {
  Rng select_rng(derive_seed(cfg.seed, Stream::select, {static_cast<std::uint64_t>(round)}));
  RoundRecord rec;
  rec.round = round;
  rec.selected = select_clients(static_cast<int>(clients.size()), cfg.clients_per_round, select_rng);

  std::vector<ClientState> work;
  for (int id : rec.selected) work.push_back(clients[static_cast<std::size_t>(id)]);
  std::vector<std::optional<ClientUpdate>> results(work.size());
  std::vector<std::string> errors(work.size());

  auto exec = [&](std::size_t i) {
    try {
      results[i] = client_execute(global, work[i], cfg, round, shared);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  };
  const std::size_t chunk = std::max(1u, cfg.threads);
  if (chunk == 1) {
    for (std::size_t i = 0; i < work.size(); ++i) exec(i);
  } else {
    for (std::size_t start = 0; start < work.size(); start += chunk) {
      std::vector<std::future<void>> jobs;
      for (std::size_t i = start; i < std::min(work.size(), start + chunk); ++i) {
        jobs.push_back(std::async(std::launch::async, exec, i));
      }
      for (auto& j : jobs) j.get();
    }
  }
  for (std::size_t i = 0; i < work.size(); ++i) {
    if (!results[i]) {
      throw RoundError("round " + std::to_string(round) + ": client " + std::to_string(rec.selected[i]) +
                       " failed: " + errors[i]);
    }
  }

  std::vector<ClientUpdate> updates;
  for (auto& r : results) updates.push_back(std::move(*r));
  AggregateResult agg = aggregate_updates(std::move(updates), cfg.strategy);
  rec.weights = std::move(agg.weights);
  rec.size_weights = std::move(agg.size_weights);
  rec.cdw_scores = std::move(agg.cdw_scores);
  rec.train_loss = std::move(agg.train_loss);
  rec.weight_fallback = agg.weight_fallback;

  GlobalModel next{std::move(agg.backbone), std::move(agg.head)};
  if (cfg.strategy.kd) {
    const Matrix target = average_soft_labels(agg.soft_labels);
    const BackboneDims dims = work.front().spec.backbone();
    rec.kd_loss_before = distillation_loss(dims, next.backbone, *shared, target);
    next.backbone = kd_finetune(dims, std::move(next.backbone), *shared, target, cfg.kd, cfg.batch_size,
                                derive_seed(cfg.seed, Stream::kd, {static_cast<std::uint64_t>(round)}));
    rec.kd_loss_after = distillation_loss(dims, next.backbone, *shared, target);
  }

  for (std::size_t i = 0; i < work.size(); ++i) clients[static_cast<std::size_t>(rec.selected[i])] = std::move(work[i]);
  global = std::move(next);
  return rec;
}

struct Checkpoint {
  int round = 0;
  BackboneDims dims;
  std::vector<double> backbone;
};

struct RoundHistory {
  std::vector<std::string> client_names;
  std::vector<std::size_t> client_sizes;
  std::vector<RoundRecord> rounds;
  /// One entry per client per evaluation round; `round` counts completed rounds.
  std::vector<EvalResult> evals;
  std::vector<Checkpoint> checkpoints;
  CommCost comm;
  GlobalModel final_model;
};

/// Called after every round with that round's record, the evaluations it
/// produced (possibly none) and its checkpoint (null when not an eval round).
using RoundObserver = std::function<void(const RoundRecord&, std::span<const EvalResult>, const Checkpoint*)>;

inline bool is_eval_round(int completed, int total, int every) { return completed % every == 0 || completed == total; }

/// Bytes exchanged per model transfer (8-byte reals).
inline std::uint64_t model_bytes(std::size_t parameter_count) { return 8 * static_cast<std::uint64_t>(parameter_count); }

/// Runs T rounds over the federation's clients, evaluating the global
/// backbone on every client's test split every `eval_every` rounds and
/// after the last one.
inline RoundHistory run_federation(const FederationConfig& cfg, const SyntheticFederation& fed,
                                   const RoundObserver& observe = {}) {
  cfg.validate();
  if (fed.clients.size() != static_cast<std::size_t>(cfg.total_clients)) {
    throw std::invalid_argument("run_federation: federation has " + std::to_string(fed.clients.size()) +
                                " clients but total_clients=" + std::to_string(cfg.total_clients));
  }
  if (cfg.strategy.kd && !fed.shared) throw std::invalid_argument("run_federation: KD requires a shared dataset");

  RoundHistory hist;
  std::vector<ClientState> clients;
  for (const auto& c : fed.clients) {
    hist.client_names.push_back(c.name);
    hist.client_sizes.push_back(c.train.size());
    clients.push_back(make_client_state(static_cast<int>(clients.size()),
                                        std::make_shared<const TrainSet>(make_train_set(c.train)), cfg.feature_dim,
                                        cfg.batch_size, cfg.seed));
  }
  const BackboneDims dims{fed.input_dim, cfg.feature_dim};
  GlobalModel global;
  global.backbone = init_backbone(dims, server_seed(cfg.seed));
  if (cfg.strategy.protocol == Protocol::fedavg) {
    for (const auto& c : clients) {
      if (c.spec.num_ids != clients.front().spec.num_ids) {
        throw std::invalid_argument("run_federation: FedAvg needs one identity count across clients (client " +
                                    std::to_string(c.client_id) + " has " + std::to_string(c.spec.num_ids) +
                                    ", client 0 has " + std::to_string(clients.front().spec.num_ids) + ")");
      }
    }
    global.head = init_head(clients.front().spec, server_seed(cfg.seed));
  }

  const Matrix* shared = fed.shared ? &*fed.shared : nullptr;
  for (int t = 0; t < cfg.rounds; ++t) {
    hist.rounds.push_back(run_round(global, clients, cfg, t, shared));
    const int completed = t + 1;
    const std::size_t first_eval = hist.evals.size();
    const Checkpoint* ck = nullptr;
    if (is_eval_round(completed, cfg.rounds, cfg.eval_every)) {
      std::map<const TestSplit*, EvalResult> cache;
      for (const auto& c : fed.clients) {
        auto it = cache.find(c.test.get());
        if (it == cache.end()) it = cache.emplace(c.test.get(), evaluate(dims, global.backbone, *c.test)).first;
        EvalResult r = it->second;
        r.round = completed;
        r.client = c.client_id;
        hist.evals.push_back(r);
      }
      hist.checkpoints.push_back({completed, dims, global.backbone});
      ck = &hist.checkpoints.back();
    }
    if (observe) {
      observe(hist.rounds.back(), std::span<const EvalResult>(hist.evals).subspan(first_eval), ck);
    }
  }
  hist.comm = communication_cost(cfg.rounds, model_bytes(global.parameter_count()), cfg.clients_per_round);
  hist.final_model = std::move(global);
  return hist;
}

/// Standalone training on one client's data with the same initialization,
/// shuffling and schedule indexing the federation would give it, evaluated
/// on that client's test split. `cfg.rounds * cfg.local_epochs` epochs total.
inline EvalResult run_local_baseline(const ClientData& client, const FederationConfig& cfg, int client_index = 0) {
  if (cfg.rounds < 0 || cfg.local_epochs < 0) throw std::invalid_argument("run_local_baseline: negative schedule");
  const TrainSet data = make_train_set(client.train);
  const ModelSpec spec{data.inputs.cols, cfg.feature_dim, data.num_classes};
  spec.validate();
  const std::uint64_t cseed = client_seed(cfg.seed, client_index);
  ModelParams params{init_backbone(spec.backbone(), server_seed(cfg.seed)), init_head(spec, cseed)};
  MomentumState momentum;
  for (int t = 0; t < cfg.rounds; ++t) {
    local_train(spec, params, momentum, data, cfg.local_epochs, cfg.batch_size, cfg.opt, t, cseed);
  }
  EvalResult r = evaluate(spec.backbone(), params.backbone, *client.test);
  r.round = cfg.rounds;
  r.client = client.client_id;
  return r;
}

}  // namespace fedreid
