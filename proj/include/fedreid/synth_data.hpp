#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "fedreid/matrix.hpp"
#include "fedreid/model.hpp"
#include "fedreid/rng.hpp"

namespace fedreid {

struct DatasetProfile {
  std::string name;
  int cameras = 1;
  int train_ids = 1;
  int train_images = 1;
  int query_ids = 1;
  int query_images = 1;
  int gallery_images = 1;

  void validate() const {
    if (cameras < 1 || train_ids < 1 || train_images < 1 || query_ids < 1 || query_images < 1 || gallery_images < 1) {
      throw std::invalid_argument("profile '" + name + "': all counts must be >= 1");
    }
  }
  friend bool operator==(const DatasetProfile&, const DatasetProfile&) = default;
};

/// The nine benchmark datasets, in decreasing order of training-set size.
inline const std::vector<DatasetProfile>& builtin_profiles() {
  static const std::vector<DatasetProfile> presets = {
      {"MSMT17", 15, 1041, 32621, 3060, 11659, 82161},
      {"DukeMTMC-reID", 8, 702, 16522, 702, 2228, 17611},
      {"Market-1501", 6, 751, 12936, 750, 3368, 19732},
      {"CUHK03-NP", 2, 767, 7365, 700, 1400, 5332},
      {"PRID2011", 2, 285, 3744, 100, 100, 649},
      {"CUHK01", 2, 485, 1940, 486, 972, 972},
      {"VIPeR", 2, 316, 632, 316, 316, 316},
      {"3DPeS", 2, 93, 450, 86, 246, 316},
      {"iLIDS-VID", 2, 59, 248, 60, 98, 130},
  };
  return presets;
}

/// Source of the unlabeled shared set used for distillation (1816 ids, 7264 images).
inline DatasetProfile shared_profile() { return {"CUHK02", 10, 1816, 7264, 1, 1, 1}; }

inline constexpr std::size_t kDefaultSharedSize = 7264;

inline std::optional<DatasetProfile> find_profile(std::string_view name) {
  for (const auto& p : builtin_profiles()) {
    if (p.name == name) return p;
  }
  return std::nullopt;
}

/// Shrinks every count by `factor` (cameras untouched), keeping each count
/// at least as large as the identity count it has to cover.
inline DatasetProfile scaled(const DatasetProfile& p, double factor) {
  if (factor == 1.0) return p;
  auto s = [factor](int v) { return std::max(1, static_cast<int>(std::lround(v * factor))); };
  DatasetProfile out = p;
  out.train_ids = s(p.train_ids);
  out.train_images = std::max(out.train_ids, s(p.train_images));
  out.query_ids = s(p.query_ids);
  out.query_images = std::max(out.query_ids, s(p.query_images));
  out.gallery_images = std::max(out.query_ids, s(p.gallery_images));
  return out;
}

struct LabeledSample {
  std::vector<double> vector;
  int identity = 0;
  int camera = 0;
  int domain = 0;
};

/// Column-oriented sample storage: one matrix row per sample.
struct SampleSet {
  Matrix x;
  std::vector<int> identity;
  std::vector<int> camera;
  std::vector<int> domain;

  std::size_t size() const { return x.rows; }

  void append(std::span<const double> v, int id, int cam, int dom) {
    if (x.rows == 0 && x.cols == 0) x.cols = v.size();
    if (v.size() != x.cols) throw std::invalid_argument("SampleSet::append: dimension mismatch");
    x.data.insert(x.data.end(), v.begin(), v.end());
    ++x.rows;
    identity.push_back(id);
    camera.push_back(cam);
    domain.push_back(dom);
  }

  LabeledSample at(std::size_t i) const {
    const auto r = x.row(i);
    return {{r.begin(), r.end()}, identity[i], camera[i], domain[i]};
  }

  SampleSet subset(std::span<const std::size_t> idx) const {
    SampleSet out;
    out.x = gather_rows(x, idx);
    for (std::size_t i : idx) {
      out.identity.push_back(identity[i]);
      out.camera.push_back(camera[i]);
      out.domain.push_back(domain[i]);
    }
    return out;
  }

  friend bool operator==(const SampleSet&, const SampleSet&) = default;
};

struct TestSplit {
  SampleSet query;
  SampleSet gallery;
};

struct GeneratorConfig {
  std::size_t input_dim = 16;
  /// Per-coordinate standard deviation of the sample noise.
  double noise_sigma = 0.2;
  /// Norm of each domain's center.
  double domain_separation = 4.0;
  /// Expected norm of an identity prototype's offset from its domain center.
  double identity_spread = 2.0;
  /// 0 gives identity camera rotations; larger values rotate further.
  double camera_rotation = 0.1;
  /// Expected norm of each camera's additive offset.
  double camera_bias = 3.0;
};

/// Everything generated for one dataset profile. Identities [0, train_ids)
/// are training identities; [train_ids, train_ids + query_ids) are held out.
struct DomainData {
  Matrix prototypes;
  std::vector<Matrix> camera_rotations;
  Matrix camera_offsets;
  SampleSet train;
  TestSplit test;
};

namespace detail {

inline std::vector<double> gaussian_vector(Rng& rng, std::size_t dim, double scale) {
  std::vector<double> v(dim);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

/// Modified Gram-Schmidt on the columns of (I + strength * G).
inline Matrix random_rotation(Rng& rng, std::size_t dim, double strength) {
  Matrix m(dim, dim);
  for (std::size_t r = 0; r < dim; ++r) {
    for (std::size_t c = 0; c < dim; ++c) m(r, c) = (r == c ? 1.0 : 0.0) + strength * rng.normal();
  }
  for (std::size_t c = 0; c < dim; ++c) {
    for (std::size_t p = 0; p < c; ++p) {
      double dot = 0.0;
      for (std::size_t r = 0; r < dim; ++r) dot += m(r, p) * m(r, c);
      for (std::size_t r = 0; r < dim; ++r) m(r, c) -= dot * m(r, p);
    }
    double norm = 0.0;
    for (std::size_t r = 0; r < dim; ++r) norm += m(r, c) * m(r, c);
    norm = std::sqrt(norm);
    for (std::size_t r = 0; r < dim; ++r) m(r, c) /= norm;
  }
  return m;
}

inline void emit_sample(SampleSet& out, const DomainData& d, Rng& noise, double sigma, int id, int cam, int dom) {
  const std::size_t dim = d.prototypes.cols;
  const auto p = d.prototypes.row(static_cast<std::size_t>(id));
  const Matrix& a = d.camera_rotations[static_cast<std::size_t>(cam)];
  const auto b = d.camera_offsets.row(static_cast<std::size_t>(cam));
  std::vector<double> v(dim);
  for (std::size_t r = 0; r < dim; ++r) {
    double acc = b[r];
    for (std::size_t c = 0; c < dim; ++c) acc += a(r, c) * p[c];
    v[r] = acc;
  }
  if (sigma != 0.0) {
    for (auto& x : v) x += sigma * noise.normal();
  }
  out.append(v, id, cam, dom);
}

}  // namespace detail

/// Samples one synthetic domain. Every sample is R_c * prototype + b_c + noise;
/// images are assigned round-robin over identities, and each pass over the
/// identities shifts to the next camera.
inline DomainData generate_domain(const DatasetProfile& profile, int domain_id, const GeneratorConfig& cfg,
                                  std::uint64_t seed) {
  profile.validate();
  if (cfg.input_dim == 0) throw std::invalid_argument("generate_domain: input_dim must be >= 1");
  const std::size_t dim = cfg.input_dim;
  const auto dom = static_cast<std::uint64_t>(domain_id);
  const double unit = 1.0 / std::sqrt(static_cast<double>(dim));

  DomainData d;
  Rng layout(derive_seed(seed, Stream::domain, {dom, 0}));
  std::vector<double> center = detail::gaussian_vector(layout, dim, 1.0);
  double cnorm = 0.0;
  for (double v : center) cnorm += v * v;
  cnorm = std::sqrt(cnorm);
  for (auto& v : center) v = cfg.domain_separation * v / cnorm;

  const int total_ids = profile.train_ids + profile.query_ids;
  d.prototypes = Matrix(static_cast<std::size_t>(total_ids), dim);
  for (int i = 0; i < total_ids; ++i) {
    auto row = d.prototypes.row(static_cast<std::size_t>(i));
    for (std::size_t c = 0; c < dim; ++c) row[c] = center[c] + cfg.identity_spread * unit * layout.normal();
  }
  d.camera_offsets = Matrix(static_cast<std::size_t>(profile.cameras), dim);
  for (int c = 0; c < profile.cameras; ++c) {
    d.camera_rotations.push_back(detail::random_rotation(layout, dim, cfg.camera_rotation));
    auto row = d.camera_offsets.row(static_cast<std::size_t>(c));
    for (std::size_t r = 0; r < dim; ++r) row[r] = cfg.camera_bias * unit * layout.normal();
  }

  Rng noise(derive_seed(seed, Stream::domain, {dom, 1}));
  d.train.x.cols = dim;
  for (int i = 0; i < profile.train_images; ++i) {
    const int id = i % profile.train_ids;
    const int cam = (i / profile.train_ids + id) % profile.cameras;
    detail::emit_sample(d.train, d, noise, cfg.noise_sigma, id, cam, domain_id);
  }
  d.test.query.x.cols = dim;
  for (int j = 0; j < profile.query_images; ++j) {
    const int t = j % profile.query_ids;
    const int cam = (j / profile.query_ids + t) % profile.cameras;
    detail::emit_sample(d.test.query, d, noise, cfg.noise_sigma, profile.train_ids + t, cam, domain_id);
  }
  // Gallery passes start one camera after the query passes.
  d.test.gallery.x.cols = dim;
  for (int j = 0; j < profile.gallery_images; ++j) {
    const int t = j % profile.query_ids;
    const int cam = (j / profile.query_ids + t + 1) % profile.cameras;
    detail::emit_sample(d.test.gallery, d, noise, cfg.noise_sigma, profile.train_ids + t, cam, domain_id);
  }
  return d;
}

enum class Scenario { by_dataset, by_camera, by_identity };

inline std::string_view to_string(Scenario s) {
  switch (s) {
    case Scenario::by_dataset: return "by_dataset";
    case Scenario::by_camera: return "by_camera";
    case Scenario::by_identity: return "by_identity";
  }
  return "?";
}

inline std::optional<Scenario> parse_scenario(std::string_view s) {
  if (s == "by_dataset") return Scenario::by_dataset;
  if (s == "by_camera") return Scenario::by_camera;
  if (s == "by_identity") return Scenario::by_identity;
  return std::nullopt;
}

struct ScenarioConfig {
  Scenario scenario = Scenario::by_dataset;
  std::vector<DatasetProfile> profiles;
  GeneratorConfig generator;
  /// Number of unlabeled shared vectors; 0 disables the shared set.
  std::size_t shared_size = 0;
  std::uint64_t seed = 0;

  void validate() const {
    if (profiles.empty()) throw std::invalid_argument("scenario: at least one profile is required");
    if (scenario != Scenario::by_dataset && profiles.size() != 1) {
      throw std::invalid_argument("scenario " + std::string(to_string(scenario)) +
                                  " requires exactly one profile, got " + std::to_string(profiles.size()));
    }
    for (const auto& p : profiles) p.validate();
    if (scenario == Scenario::by_identity && profiles[0].train_ids < profiles[0].cameras) {
      throw std::invalid_argument("by_identity: fewer training identities than clients");
    }
  }
};

struct ClientData {
  int client_id = 0;
  std::string name;
  SampleSet train;
  /// Clients carved from the same dataset share one test split.
  std::shared_ptr<const TestSplit> test;
};

struct SyntheticFederation {
  Scenario scenario = Scenario::by_dataset;
  std::size_t input_dim = 0;
  std::vector<ClientData> clients;
  std::optional<Matrix> shared;
};

/// Unlabeled vectors from a dedicated domain (index = `domain_id`).
inline Matrix build_shared_dataset(std::size_t n, const GeneratorConfig& cfg, std::uint64_t seed, int domain_id = -1) {
  if (n == 0) throw std::invalid_argument("build_shared_dataset: n must be >= 1");
  DatasetProfile p = shared_profile();
  p.train_images = static_cast<int>(n);
  p.train_ids = std::min(p.train_ids, p.train_images);
  p.query_ids = p.query_images = p.gallery_images = 1;
  DomainData d = generate_domain(p, domain_id, cfg, derive_seed(seed, Stream::shared));
  return std::move(d.train.x);
}

inline SyntheticFederation build_federation(const ScenarioConfig& cfg) {
  cfg.validate();
  SyntheticFederation fed;
  fed.scenario = cfg.scenario;
  fed.input_dim = cfg.generator.input_dim;

  if (cfg.scenario == Scenario::by_dataset) {
    for (std::size_t k = 0; k < cfg.profiles.size(); ++k) {
      DomainData d = generate_domain(cfg.profiles[k], static_cast<int>(k), cfg.generator, cfg.seed);
      fed.clients.push_back({static_cast<int>(k), cfg.profiles[k].name, std::move(d.train),
                             std::make_shared<const TestSplit>(std::move(d.test))});
    }
  } else {
    const DatasetProfile& p = cfg.profiles[0];
    DomainData d = generate_domain(p, 0, cfg.generator, cfg.seed);
    auto test = std::make_shared<const TestSplit>(std::move(d.test));
    const int n_clients = p.cameras;
    const int ids_per_client = p.train_ids / n_clients;
    std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(n_clients));
    for (std::size_t i = 0; i < d.train.size(); ++i) {
      int k;
      if (cfg.scenario == Scenario::by_camera) {
        k = d.train.camera[i];
      } else {
        // Contiguous identity blocks; the remainder lands in the last client.
        k = std::min(d.train.identity[i] / ids_per_client, n_clients - 1);
      }
      members[static_cast<std::size_t>(k)].push_back(i);
    }
    for (int k = 0; k < n_clients; ++k) {
      const auto& idx = members[static_cast<std::size_t>(k)];
      if (idx.empty()) {
        throw std::invalid_argument("build_federation: client " + std::to_string(k) + " of profile '" + p.name +
                                    "' received no training samples");
      }
      const std::string suffix = cfg.scenario == Scenario::by_camera ? "/cam" : "/ids";
      fed.clients.push_back({k, p.name + suffix + std::to_string(k), d.train.subset(idx), test});
    }
  }
  if (cfg.shared_size > 0) {
    fed.shared = build_shared_dataset(cfg.shared_size, cfg.generator, cfg.seed,
                                      static_cast<int>(cfg.profiles.size()));
  }
  return fed;
}

/// Per-client n_k / n.
inline std::vector<double> size_fractions(const SyntheticFederation& fed) {
  if (fed.clients.empty()) throw std::invalid_argument("size_fractions: federation has no clients");
  double total = 0.0;
  for (const auto& c : fed.clients) total += static_cast<double>(c.train.size());
  std::vector<double> out;
  for (const auto& c : fed.clients) out.push_back(static_cast<double>(c.train.size()) / total);
  return out;
}

/// Relabels a client's identities onto [0, #distinct) in ascending order.
inline TrainSet make_train_set(const SampleSet& s) {
  std::map<int, int> local;
  for (int id : s.identity) local.emplace(id, 0);
  int next = 0;
  for (auto& [id, idx] : local) idx = next++;
  TrainSet t;
  t.inputs = s.x;
  t.num_classes = local.size();
  t.labels.reserve(s.size());
  for (int id : s.identity) t.labels.push_back(local.at(id));
  return t;
}

inline std::vector<int> distinct_identities(const SampleSet& s) {
  std::vector<int> ids(s.identity);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

/// Writes one sample per line as whitespace-separated columns:
/// `domain client split identity camera x_0 ... x_{d-1}`, where split is
/// train, query, gallery or shared. Lines starting with '#' are comments.
/// Shared samples carry client, identity and camera of -1.
inline void export_federation(const SyntheticFederation& fed, std::ostream& os) {
  char buf[40];
  auto row = [&](int domain, int client, const char* split, int id, int cam, std::span<const double> v) {
    os << domain << ' ' << client << ' ' << split << ' ' << id << ' ' << cam;
    for (double x : v) {
      std::snprintf(buf, sizeof buf, "%.17g", x);
      os << ' ' << buf;
    }
    os << '\n';
  };
  os << "# fedreid-federation v1 scenario=" << to_string(fed.scenario) << " input_dim=" << fed.input_dim << '\n';
  os << "# domain client split identity camera x_0..x_" << (fed.input_dim == 0 ? 0 : fed.input_dim - 1) << '\n';
  auto dump = [&](const SampleSet& s, int client, const char* split) {
    for (std::size_t i = 0; i < s.size(); ++i) row(s.domain[i], client, split, s.identity[i], s.camera[i], s.x.row(i));
  };
  for (const auto& c : fed.clients) {
    dump(c.train, c.client_id, "train");
    dump(c.test->query, c.client_id, "query");
    dump(c.test->gallery, c.client_id, "gallery");
  }
  if (fed.shared) {
    for (std::size_t i = 0; i < fed.shared->rows; ++i) row(-1, -1, "shared", -1, -1, fed.shared->row(i));
  }
}

}  // namespace fedreid
