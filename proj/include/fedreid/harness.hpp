#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "fedreid/engine.hpp"
#include "fedreid/io.hpp"
#include "fedreid/metrics.hpp"
#include "fedreid/synth_data.hpp"

namespace fedreid {

enum class Comparison { none, local_baseline, batch_sweep, epoch_sweep };

inline std::string_view to_string(Comparison c) {
  switch (c) {
    case Comparison::none: return "none";
    case Comparison::local_baseline: return "local_baseline";
    case Comparison::batch_sweep: return "batch_sweep";
    case Comparison::epoch_sweep: return "epoch_sweep";
  }
  return "?";
}

inline constexpr int kSchemaVersion = 1;
inline constexpr int kBatchSweep[] = {32, 64, 128};
inline constexpr int kEpochSweep[] = {1, 5, 10};

struct Violation {
  int line = 0;  // 1-based; 0 when the field is absent from the file
  std::string field;
  std::string message;
};

inline std::string format_violation(const std::string& source, const Violation& v) {
  std::string out = source;
  if (v.line > 0) out += ":" + std::to_string(v.line);
  out += ": " + v.field + ": " + v.message;
  return out;
}

struct RunSpec {
  int schema_version = 0;
  std::vector<std::uint64_t> seeds;
  std::string output_dir = "runs";
  Comparison comparison = Comparison::none;
  bool export_federation = false;
  bool checkpoints = true;
  ScenarioConfig scenario;
  double scale = 1.0;
  FederationConfig federation;
  /// total_clients was written explicitly rather than implied by the scenario.
  bool total_clients_given = false;
  bool clients_per_round_given = false;
  /// Field path -> source line, filled by the parser for diagnostics.
  std::map<std::string, int> lines;

  int line_of(const std::string& field) const {
    auto it = lines.find(field);
    return it == lines.end() ? 0 : it->second;
  }

  std::vector<DatasetProfile> effective_profiles() const {
    std::vector<DatasetProfile> out;
    for (const auto& p : scenario.profiles) out.push_back(scale == 1.0 ? p : scaled(p, scale));
    return out;
  }

  int implied_clients() const {
    if (scenario.profiles.empty()) return 0;
    if (scenario.scenario == Scenario::by_dataset) return static_cast<int>(scenario.profiles.size());
    return scenario.profiles.front().cameras;
  }
};

namespace detail {

class SpecReader {
 public:
  SpecReader(RunSpec& spec, std::vector<Violation>& out) : spec_(spec), out_(out) {}

  static int line(const YAML::Node& n) { return n.Mark().line >= 0 ? n.Mark().line + 1 : 0; }

  void fail(const YAML::Node& n, const std::string& field, const std::string& msg) {
    out_.push_back({line(n), field, msg});
  }

  bool expect_map(const YAML::Node& n, const std::string& field) {
    if (n.IsMap()) return true;
    fail(n, field, "expected a mapping");
    return false;
  }

  void check_keys(const YAML::Node& n, const std::string& path, std::initializer_list<std::string_view> allowed) {
    for (const auto& kv : n) {
      const auto key = kv.first.as<std::string>();
      if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
        fail(kv.first, path.empty() ? key : path + "." + key, "unknown key");
      }
    }
  }

  template <class T>
  bool get(const YAML::Node& parent, const std::string& path, const char* key, T& dst, const char* type) {
    const YAML::Node n = parent[key];
    if (!n) return false;
    const std::string field = path.empty() ? key : path + "." + key;
    spec_.lines[field] = line(n);
    try {
      if (!n.IsScalar()) throw YAML::BadConversion(n.Mark());
      dst = n.as<T>();
      return true;
    } catch (const YAML::BadConversion&) {
      fail(n, field, std::string("expected ") + type);
      return false;
    }
  }

  void read(const YAML::Node& root) {
    if (!expect_map(root, "<document>")) return;
    check_keys(root, "", {"schema_version", "seeds", "output_dir", "comparison", "export_federation", "checkpoints",
                          "scenario", "federation", "optimizer", "strategy", "kd"});
    if (!get(root, "", "schema_version", spec_.schema_version, "an integer")) {
      if (!root["schema_version"]) out_.push_back({0, "schema_version", "required"});
    }
    read_seeds(root);
    get(root, "", "output_dir", spec_.output_dir, "a string");
    std::string cmp;
    if (get(root, "", "comparison", cmp, "a string")) {
      static const std::map<std::string, Comparison> names{{"none", Comparison::none},
                                                           {"local_baseline", Comparison::local_baseline},
                                                           {"batch_sweep", Comparison::batch_sweep},
                                                           {"epoch_sweep", Comparison::epoch_sweep}};
      auto it = names.find(cmp);
      if (it == names.end()) {
        fail(root["comparison"], "comparison", "unknown mode '" + cmp + "'");
      } else {
        spec_.comparison = it->second;
      }
    }
    get(root, "", "export_federation", spec_.export_federation, "a boolean");
    get(root, "", "checkpoints", spec_.checkpoints, "a boolean");
    if (root["scenario"]) {
      read_scenario(root["scenario"]);
    } else {
      out_.push_back({0, "scenario", "required"});
    }
    if (root["federation"]) read_federation(root["federation"]);
    if (root["optimizer"]) read_optimizer(root["optimizer"]);
    if (root["strategy"]) read_strategy(root["strategy"]);
    if (root["kd"]) read_kd(root["kd"]);
  }

 private:
  void read_seeds(const YAML::Node& root) {
    const YAML::Node n = root["seeds"];
    if (!n) {
      out_.push_back({0, "seeds", "required"});
      return;
    }
    spec_.lines["seeds"] = line(n);
    if (!n.IsSequence()) {
      fail(n, "seeds", "expected a list of non-negative integers");
      return;
    }
    for (std::size_t i = 0; i < n.size(); ++i) {
      try {
        spec_.seeds.push_back(n[i].as<std::uint64_t>());
      } catch (const YAML::BadConversion&) {
        fail(n[i], "seeds[" + std::to_string(i) + "]", "expected a non-negative integer");
      }
    }
  }

  void read_profile(const YAML::Node& n, const std::string& field) {
    if (n.IsScalar()) {
      const auto name = n.as<std::string>();
      if (auto p = find_profile(name)) {
        spec_.scenario.profiles.push_back(*p);
      } else {
        fail(n, field, "unknown built-in profile '" + name + "'");
      }
      return;
    }
    if (!expect_map(n, field)) return;
    check_keys(n, field, {"name", "cameras", "train_ids", "train_images", "query_ids", "query_images", "gallery_images"});
    DatasetProfile p;
    p.name = "custom" + std::to_string(spec_.scenario.profiles.size());
    get(n, field, "name", p.name, "a string");
    for (auto [key, dst] : {std::pair{"cameras", &p.cameras}, {"train_ids", &p.train_ids},
                            {"train_images", &p.train_images}, {"query_ids", &p.query_ids},
                            {"query_images", &p.query_images}, {"gallery_images", &p.gallery_images}}) {
      if (!get(n, field, key, *dst, "an integer") && !n[key]) fail(n, field + "." + key, "required");
    }
    spec_.scenario.profiles.push_back(p);
  }

  void read_scenario(const YAML::Node& n) {
    if (!expect_map(n, "scenario")) return;
    spec_.lines["scenario"] = line(n);
    check_keys(n, "scenario", {"type", "profiles", "scale", "input_dim", "noise_sigma", "domain_separation",
                               "identity_spread", "camera_rotation", "camera_bias", "shared_size"});
    std::string type;
    if (get(n, "scenario", "type", type, "a string")) {
      if (auto s = parse_scenario(type)) {
        spec_.scenario.scenario = *s;
      } else {
        fail(n["type"], "scenario.type", "unknown scenario '" + type + "' (by_dataset, by_camera, by_identity)");
      }
    }
    const YAML::Node profiles = n["profiles"];
    if (!profiles) {
      fail(n, "scenario.profiles", "required");
    } else {
      spec_.lines["scenario.profiles"] = line(profiles);
      if (profiles.IsSequence()) {
        for (std::size_t i = 0; i < profiles.size(); ++i) {
          read_profile(profiles[i], "scenario.profiles[" + std::to_string(i) + "]");
        }
      } else {
        fail(profiles, "scenario.profiles", "expected a list");
      }
    }
    auto& g = spec_.scenario.generator;
    get(n, "scenario", "scale", spec_.scale, "a number");
    get(n, "scenario", "input_dim", g.input_dim, "an integer");
    get(n, "scenario", "noise_sigma", g.noise_sigma, "a number");
    get(n, "scenario", "domain_separation", g.domain_separation, "a number");
    get(n, "scenario", "identity_spread", g.identity_spread, "a number");
    get(n, "scenario", "camera_rotation", g.camera_rotation, "a number");
    get(n, "scenario", "camera_bias", g.camera_bias, "a number");
    get(n, "scenario", "shared_size", spec_.scenario.shared_size, "an integer");
  }

  void read_federation(const YAML::Node& n) {
    if (!expect_map(n, "federation")) return;
    check_keys(n, "federation", {"total_clients", "clients_per_round", "rounds", "local_epochs", "batch_size",
                                 "feature_dim", "eval_every", "threads"});
    auto& f = spec_.federation;
    spec_.total_clients_given = get(n, "federation", "total_clients", f.total_clients, "an integer");
    spec_.clients_per_round_given = get(n, "federation", "clients_per_round", f.clients_per_round, "an integer");
    get(n, "federation", "rounds", f.rounds, "an integer");
    get(n, "federation", "local_epochs", f.local_epochs, "an integer");
    get(n, "federation", "batch_size", f.batch_size, "an integer");
    get(n, "federation", "feature_dim", f.feature_dim, "an integer");
    get(n, "federation", "eval_every", f.eval_every, "an integer");
    get(n, "federation", "threads", f.threads, "an integer");
  }

  void read_optimizer(const YAML::Node& n) {
    if (!expect_map(n, "optimizer")) return;
    check_keys(n, "optimizer", {"lr_head", "lr_backbone", "step_size", "gamma", "weight_decay", "momentum"});
    auto& o = spec_.federation.opt;
    get(n, "optimizer", "lr_head", o.lr_head, "a number");
    get(n, "optimizer", "lr_backbone", o.lr_backbone, "a number");
    get(n, "optimizer", "step_size", o.step_size, "an integer");
    get(n, "optimizer", "gamma", o.gamma, "a number");
    get(n, "optimizer", "weight_decay", o.weight_decay, "a number");
    get(n, "optimizer", "momentum", o.momentum, "a number");
  }

  void read_strategy(const YAML::Node& n) {
    if (!expect_map(n, "strategy")) return;
    check_keys(n, "strategy", {"protocol", "weighting", "kd"});
    auto& s = spec_.federation.strategy;
    std::string v;
    if (get(n, "strategy", "protocol", v, "a string")) {
      if (v == "fedavg") {
        s.protocol = Protocol::fedavg;
      } else if (v == "fedpav") {
        s.protocol = Protocol::fedpav;
      } else {
        fail(n["protocol"], "strategy.protocol", "unknown protocol '" + v + "' (fedavg, fedpav)");
      }
    }
    if (get(n, "strategy", "weighting", v, "a string")) {
      if (v == "size") {
        s.weighting = Weighting::size;
      } else if (v == "cdw") {
        s.weighting = Weighting::cdw;
      } else if (v == "cdw_literal") {
        s.weighting = Weighting::cdw_literal;
      } else {
        fail(n["weighting"], "strategy.weighting", "unknown weighting '" + v + "' (size, cdw, cdw_literal)");
      }
    }
    get(n, "strategy", "kd", s.kd, "a boolean");
  }

  void read_kd(const YAML::Node& n) {
    if (!expect_map(n, "kd")) return;
    check_keys(n, "kd", {"finetune_lr", "finetune_epochs", "finetune_batch"});
    get(n, "kd", "finetune_lr", spec_.federation.kd.finetune_lr, "a number");
    get(n, "kd", "finetune_epochs", spec_.federation.kd.finetune_epochs, "an integer");
    get(n, "kd", "finetune_batch", spec_.federation.kd.finetune_batch, "an integer");
  }

  RunSpec& spec_;
  std::vector<Violation>& out_;
};

}  // namespace detail

/// Semantic checks on a parsed spec. Does not build or run anything.
inline std::vector<Violation> validate(const RunSpec& s) {
  std::vector<Violation> v;
  auto add = [&](const std::string& field, std::string msg) { v.push_back({s.line_of(field), field, std::move(msg)}); };
  auto num = [](double x) {
    std::ostringstream os;
    os << x;
    return os.str();
  };

  if (s.schema_version != kSchemaVersion && s.line_of("schema_version") > 0) {
    add("schema_version", "unsupported version " + std::to_string(s.schema_version) + " (expected " +
                              std::to_string(kSchemaVersion) + ")");
  }
  if (s.seeds.empty() && s.line_of("seeds") > 0) add("seeds", "at least one seed is required");
  std::set<std::uint64_t> seen;
  for (auto seed : s.seeds) {
    if (!seen.insert(seed).second) add("seeds", "duplicate seed " + std::to_string(seed));
  }
  if (s.output_dir.empty()) add("output_dir", "must not be empty");

  const auto& sc = s.scenario;
  if (sc.scenario != Scenario::by_dataset && sc.profiles.size() > 1) {
    add("scenario.profiles", std::string(to_string(sc.scenario)) + " takes exactly one profile, got " +
                                 std::to_string(sc.profiles.size()));
  }
  if (sc.profiles.empty() && s.line_of("scenario.profiles") > 0) add("scenario.profiles", "at least one profile");
  if (!(s.scale > 0.0)) add("scenario.scale", "must be > 0, got " + num(s.scale));
  for (std::size_t i = 0; i < sc.profiles.size(); ++i) {
    try {
      sc.profiles[i].validate();
    } catch (const std::exception& e) {
      add("scenario.profiles", e.what());
    }
  }
  const auto profiles = s.scale > 0.0 ? s.effective_profiles() : sc.profiles;
  if (sc.scenario == Scenario::by_identity && profiles.size() == 1 && profiles[0].train_ids < profiles[0].cameras) {
    add("scenario.profiles", "by_identity needs at least one training identity per camera (" +
                                 std::to_string(profiles[0].train_ids) + " ids, " +
                                 std::to_string(profiles[0].cameras) + " cameras)");
  }
  const auto& g = sc.generator;
  if (g.input_dim < 1) add("scenario.input_dim", "must be >= 1");
  if (!(g.noise_sigma >= 0.0)) add("scenario.noise_sigma", "must be >= 0");
  if (!(g.domain_separation >= 0.0)) add("scenario.domain_separation", "must be >= 0");
  if (!(g.identity_spread >= 0.0)) add("scenario.identity_spread", "must be >= 0");
  if (!(g.camera_rotation >= 0.0)) add("scenario.camera_rotation", "must be >= 0");
  if (!(g.camera_bias >= 0.0)) add("scenario.camera_bias", "must be >= 0");

  const auto& f = s.federation;
  const int implied = s.implied_clients();
  if (s.total_clients_given && implied > 0 && f.total_clients != implied) {
    add("federation.total_clients", "N=" + std::to_string(f.total_clients) + " but the " +
                                        std::string(to_string(sc.scenario)) + " scenario yields " +
                                        std::to_string(implied) + " clients");
  }
  const int n = s.total_clients_given ? f.total_clients : implied;
  if (f.clients_per_round < 1) {
    add("federation.clients_per_round", "must be >= 1");
  } else if (n > 0 && f.clients_per_round > n) {
    add("federation.clients_per_round", "federation.clients_per_round (K=" + std::to_string(f.clients_per_round) +
                                            ") exceeds federation.total_clients (N=" + std::to_string(n) + ")");
  }
  if (f.rounds < 1) add("federation.rounds", "must be >= 1");
  if (f.local_epochs < 1) add("federation.local_epochs", "must be >= 1");
  if (f.batch_size < 1) add("federation.batch_size", "must be >= 1");
  if (f.feature_dim < 1) add("federation.feature_dim", "must be >= 1");
  if (f.eval_every < 1) add("federation.eval_every", "must be >= 1");
  if (f.threads < 1) add("federation.threads", "must be >= 1");

  const auto& o = f.opt;
  if (!(o.lr_head > 0.0)) add("optimizer.lr_head", "must be > 0, got " + num(o.lr_head));
  if (!(o.lr_backbone > 0.0)) add("optimizer.lr_backbone", "must be > 0, got " + num(o.lr_backbone));
  if (o.step_size < 1) add("optimizer.step_size", "must be >= 1");
  if (!(o.gamma > 0.0 && o.gamma <= 1.0)) add("optimizer.gamma", "must be in (0, 1], got " + num(o.gamma));
  if (!(o.weight_decay >= 0.0)) add("optimizer.weight_decay", "must be >= 0");
  if (!(o.momentum >= 0.0 && o.momentum < 1.0)) add("optimizer.momentum", "must be in [0, 1), got " + num(o.momentum));

  if (f.strategy.kd) {
    if (sc.shared_size == 0) add("strategy.kd", "knowledge distillation needs scenario.shared_size > 0");
    if (!(f.kd.finetune_lr > 0.0)) add("kd.finetune_lr", "must be > 0");
    if (f.kd.finetune_epochs < 1) add("kd.finetune_epochs", "must be >= 1");
    if (f.kd.finetune_batch < 0) add("kd.finetune_batch", "must be >= 0");
  }

  if (f.strategy.protocol == Protocol::fedavg && !profiles.empty()) {
    if (sc.scenario == Scenario::by_dataset) {
      for (const auto& p : profiles) {
        if (p.train_ids != profiles.front().train_ids) {
          add("strategy.protocol", "fedavg needs equal identity counts across clients ('" + profiles.front().name +
                                       "' has " + std::to_string(profiles.front().train_ids) + ", '" + p.name +
                                       "' has " + std::to_string(p.train_ids) + ")");
          break;
        }
      }
    } else if (sc.scenario == Scenario::by_identity && profiles.size() == 1 &&
               profiles[0].train_ids % profiles[0].cameras != 0) {
      add("strategy.protocol", "fedavg needs equal identity counts; " + std::to_string(profiles[0].train_ids) +
                                   " ids do not split evenly over " + std::to_string(profiles[0].cameras) +
                                   " clients");
    }
  }

  if (s.comparison == Comparison::epoch_sweep && f.local_epochs >= 1 && f.rounds >= 1 &&
      (f.local_epochs * f.rounds) % 10 != 0) {
    add("comparison", "epoch_sweep holds E*T fixed and needs it divisible by 10, got " +
                          std::to_string(f.local_epochs * f.rounds));
  }
  return v;
}

struct ParsedSpec {
  RunSpec spec;
  std::vector<Violation> violations;
  bool ok() const { return violations.empty(); }
};

/// Parses and validates a spec document. Syntax errors, unknown keys, type
/// errors and semantic violations are all reported with source lines.
inline ParsedSpec parse_run_spec(const std::string& text) {
  ParsedSpec out;
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    out.violations.push_back({e.mark.line + 1, "<syntax>", e.msg});
    return out;
  }
  detail::SpecReader(out.spec, out.violations).read(root);
  auto& f = out.spec.federation;
  if (!out.spec.total_clients_given) f.total_clients = out.spec.implied_clients();
  if (!out.spec.clients_per_round_given) f.clients_per_round = std::max(1, f.total_clients);
  auto semantic = validate(out.spec);
  out.violations.insert(out.violations.end(), semantic.begin(), semantic.end());
  std::stable_sort(out.violations.begin(), out.violations.end(),
                   [](const Violation& a, const Violation& b) { return a.line < b.line; });
  return out;
}

inline ParsedSpec load_run_spec(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) {
    ParsedSpec out;
    out.violations.push_back({0, "<file>", "cannot read " + path.string()});
    return out;
  }
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_run_spec(ss.str());
}

struct Variant {
  std::string name;
  FederationConfig config;
};

/// The runs a comparison mode asks for. Epoch sweeps keep E*T at the
/// spec's value.
inline std::vector<Variant> expand_runs(const RunSpec& s) {
  std::vector<Variant> out;
  const auto& base = s.federation;
  switch (s.comparison) {
    case Comparison::none:
    case Comparison::local_baseline:
      out.push_back({"main", base});
      break;
    case Comparison::batch_sweep:
      for (int b : kBatchSweep) {
        Variant v{"B" + std::to_string(b), base};
        v.config.batch_size = b;
        out.push_back(v);
      }
      break;
    case Comparison::epoch_sweep: {
      const int budget = base.local_epochs * base.rounds;
      for (int e : kEpochSweep) {
        Variant v{"E" + std::to_string(e) + "_T" + std::to_string(budget / e), base};
        v.config.local_epochs = e;
        v.config.rounds = budget / e;
        out.push_back(v);
      }
      break;
    }
  }
  return out;
}

inline ScenarioConfig scenario_for_seed(const RunSpec& s, std::uint64_t seed) {
  ScenarioConfig sc = s.scenario;
  sc.profiles = s.effective_profiles();
  sc.seed = seed;
  return sc;
}

inline std::string full_precision(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline constexpr const char* kWeightsCsvHeader = "round,client,size_weight,cdw_score,weight";
inline constexpr const char* kSummaryCsvHeader =
    "client,name,train_size,best3_rank1,best3_map,best3_partial,final_rank1,final_map,volatility_rank1,"
    "comm_bytes,comm_bytes_per_client,local_rank1,delta_rank1";

struct SeedResult {
  std::string variant;
  std::uint64_t seed = 0;
  std::filesystem::path dir;
  bool ok = false;
  std::string error;
  int completed_rounds = 0;
};

struct RunResult {
  std::vector<SeedResult> seeds;
  int exit_code() const {
    return std::all_of(seeds.begin(), seeds.end(), [](const SeedResult& r) { return r.ok; }) ? 0 : 1;
  }
};

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  return os;
}

inline std::string checkpoint_name(int round) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "round_%04d.ckpt", round);
  return buf;
}

struct ClientSeries {
  std::vector<double> rank1, map;
};

/// Per-client series as a reader of eval.csv recovers them.
inline std::map<int, ClientSeries> series_from_rows(const std::vector<EvalRow>& rows) {
  std::map<int, ClientSeries> out;
  for (const auto& r : rows) {
    out[r.client].rank1.push_back(r.rank1);
    out[r.client].map.push_back(r.map);
  }
  return out;
}

inline void write_summary(const std::filesystem::path& dir, const RoundHistory& hist,
                          const std::vector<EvalResult>* local) {
  std::vector<EvalRow> rows;
  for (const auto& e : hist.evals) {
    rows.push_back({e.round, e.client, round2(e.rank1), round2(e.rank5), round2(e.rank10), round2(e.map)});
  }
  const auto series = series_from_rows(rows);
  auto os = open_out(dir / "summary.csv");
  os << kSummaryCsvHeader << "\n";
  for (std::size_t k = 0; k < hist.client_names.size(); ++k) {
    const auto& s = series.at(static_cast<int>(k));
    const Best3 b1 = best3_average(s.rank1);
    const Best3 bm = best3_average(s.map);
    os << k << "," << hist.client_names[k] << "," << hist.client_sizes[k] << "," << fixed2(b1.value) << ","
       << fixed2(bm.value) << "," << (b1.partial ? 1 : 0) << "," << fixed2(s.rank1.back()) << ","
       << fixed2(s.map.back()) << "," << fixed2(volatility(s.rank1)) << "," << hist.comm.total << ","
       << hist.comm.total_per_client << ",";
    if (local) {
      const double l = round2((*local)[k].rank1);
      os << fixed2(l) << "," << fixed2(round2(b1.value) - l);
    } else {
      os << ",";
    }
    os << "\n";
  }
}

}  // namespace detail

struct RunOptions {
  /// Overrides spec.output_dir when non-empty.
  std::filesystem::path out;
  /// Replaces the spec's seed list when set.
  std::optional<std::uint64_t> seed_override;
  /// Progress lines; null for silence.
  std::ostream* log = nullptr;
};

/// Output root: explicit override, else output_dir, resolved against
/// FEDREID_OUTPUT_ROOT when that is set and the path is relative.
inline std::filesystem::path resolve_output_dir(const RunSpec& s, const RunOptions& opts) {
  std::filesystem::path p = opts.out.empty() ? std::filesystem::path(s.output_dir) : opts.out;
  if (p.is_relative()) {
    if (const char* root = std::getenv("FEDREID_OUTPUT_ROOT"); root && *root) p = std::filesystem::path(root) / p;
  }
  return p;
}

/// Runs one variant for one seed, streaming artifacts into `dir`.
inline SeedResult run_seed(const RunSpec& spec, const Variant& variant, std::uint64_t seed,
                           const std::filesystem::path& dir, const SyntheticFederation& fed) {
  namespace fs = std::filesystem;
  SeedResult res;
  res.variant = variant.name;
  res.seed = seed;
  res.dir = dir;
  fs::create_directories(dir);
  for (const char* stale : {"failure.json", "summary.csv", "local.csv"}) fs::remove(dir / stale);
  if (spec.checkpoints) {
    fs::remove_all(dir / "checkpoints");
    fs::create_directories(dir / "checkpoints");
  }
  if (spec.export_federation) {
    auto os = detail::open_out(dir / "federation.txt");
    export_federation(fed, os);
  }

  FederationConfig cfg = variant.config;
  cfg.seed = seed;
  cfg.total_clients = static_cast<int>(fed.clients.size());

  auto history = detail::open_out(dir / "history.jsonl");
  auto eval_csv = detail::open_out(dir / "eval.csv");
  auto weights_csv = detail::open_out(dir / "weights.csv");
  eval_csv << kEvalCsvHeader << "\n";
  weights_csv << kWeightsCsvHeader << "\n";

  std::size_t params = BackboneDims{fed.input_dim, cfg.feature_dim}.size();
  if (cfg.strategy.protocol == Protocol::fedavg && !fed.clients.empty()) {
    params += ModelSpec{fed.input_dim, cfg.feature_dim, distinct_identities(fed.clients[0].train).size()}.head_size();
  }
  const std::uint64_t bytes = model_bytes(params);

  auto observe = [&](const RoundRecord& rec, std::span<const EvalResult> evals, const Checkpoint* ck) {
    const int completed = rec.round + 1;
    res.completed_rounds = completed;
    history << to_json(rec, evals, communication_cost(completed, bytes, cfg.clients_per_round)).dump() << "\n";
    for (std::size_t i = 0; i < rec.selected.size(); ++i) {
      weights_csv << completed << "," << rec.selected[i] << "," << full_precision(rec.size_weights[i]) << ","
                  << (rec.cdw_scores.empty() ? std::string() : full_precision(rec.cdw_scores[i])) << ","
                  << full_precision(rec.weights[i]) << "\n";
    }
    for (const auto& e : evals) eval_csv << eval_csv_row(e) << "\n";
    if (ck && spec.checkpoints) save_checkpoint((dir / "checkpoints" / detail::checkpoint_name(ck->round)).string(), *ck);
    history.flush();
    eval_csv.flush();
    weights_csv.flush();
  };

  try {
    const RoundHistory hist = run_federation(cfg, fed, observe);
    std::vector<EvalResult> local;
    if (spec.comparison == Comparison::local_baseline) {
      auto os = detail::open_out(dir / "local.csv");
      os << kEvalCsvHeader << "\n";
      for (std::size_t k = 0; k < fed.clients.size(); ++k) {
        local.push_back(run_local_baseline(fed.clients[k], cfg, static_cast<int>(k)));
        os << eval_csv_row(local.back()) << "\n";
      }
    }
    detail::write_summary(dir, hist, local.empty() ? nullptr : &local);
    res.ok = true;
  } catch (const std::exception& e) {
    res.error = e.what();
    nlohmann::json j{{"variant", variant.name},
                     {"seed", seed},
                     {"completed_rounds", res.completed_rounds},
                     {"planned_rounds", cfg.rounds},
                     {"error", res.error}};
    auto os = detail::open_out(dir / "failure.json");
    os << j.dump(2) << "\n";
  }
  return res;
}

/// Executes every variant for every seed. Layout:
/// <out>/<variant>/seed_<s>/{history.jsonl, eval.csv, weights.csv, summary.csv, checkpoints/...}
/// plus <out>/runs.csv listing each (variant, seed) with its schedule and status.
inline RunResult run(const RunSpec& spec, const RunOptions& opts = {}) {
  namespace fs = std::filesystem;
  const fs::path root = resolve_output_dir(spec, opts);
  fs::create_directories(root);
  std::vector<std::uint64_t> seeds = spec.seeds;
  if (opts.seed_override) seeds = {*opts.seed_override};
  const auto variants = expand_runs(spec);

  RunResult out;
  for (std::uint64_t seed : seeds) {
    std::optional<SyntheticFederation> fed;
    std::string build_error;
    try {
      fed = build_federation(scenario_for_seed(spec, seed));
      if (spec.scenario.shared_size > 0 && !fed->shared) throw std::runtime_error("shared set missing");
    } catch (const std::exception& e) {
      build_error = e.what();
    }
    for (const auto& v : variants) {
      const fs::path dir = root / v.name / ("seed_" + std::to_string(seed));
      if (opts.log) *opts.log << "[" << v.name << " seed " << seed << "] " << dir.string() << "\n";
      if (!fed) {
        fs::create_directories(dir);
        auto os = detail::open_out(dir / "failure.json");
        os << nlohmann::json{{"variant", v.name}, {"seed", seed}, {"completed_rounds", 0}, {"error", build_error}}.dump(2)
           << "\n";
        out.seeds.push_back({v.name, seed, dir, false, build_error, 0});
        continue;
      }
      out.seeds.push_back(run_seed(spec, v, seed, dir, *fed));
      if (opts.log && !out.seeds.back().ok) *opts.log << "  failed: " << out.seeds.back().error << "\n";
    }
  }

  auto os = detail::open_out(root / "runs.csv");
  os << "variant,seed,local_epochs,rounds,batch_size,status\n";
  for (const auto& r : out.seeds) {
    const auto it = std::find_if(variants.begin(), variants.end(), [&](const Variant& v) { return v.name == r.variant; });
    os << r.variant << "," << r.seed << "," << it->config.local_epochs << "," << it->config.rounds << ","
       << it->config.batch_size << "," << (r.ok ? "ok" : "failed") << "\n";
  }
  return out;
}

/// Accepts a seed directory or an eval.csv path.
inline std::filesystem::path eval_csv_path(const std::filesystem::path& p) {
  return std::filesystem::is_directory(p) ? p / "eval.csv" : p;
}

/// Aligns the eval series of several runs on (round, client) and writes one
/// CSV: per-round rank-1/mAP of each run with deltas against the first, then
/// best-3 and volatility rows per client. Throws listing any rows present in
/// one run but not another.
inline void compare(const std::vector<std::filesystem::path>& runs, std::ostream& os) {
  if (runs.size() < 2) throw std::invalid_argument("compare: need at least two runs");
  std::vector<std::vector<EvalRow>> tables;
  for (const auto& p : runs) tables.push_back(read_eval_csv(eval_csv_path(p).string()));

  using Key = std::pair<int, int>;
  auto keys_of = [](const std::vector<EvalRow>& t) {
    std::vector<Key> k;
    for (const auto& r : t) k.emplace_back(r.round, r.client);
    return k;
  };
  const auto base_keys = keys_of(tables[0]);
  std::string mismatch;
  for (std::size_t i = 1; i < tables.size(); ++i) {
    const auto keys = keys_of(tables[i]);
    if (keys == base_keys) continue;
    const std::set<Key> a(base_keys.begin(), base_keys.end()), b(keys.begin(), keys.end());
    auto list = [](const std::set<Key>& x, const std::set<Key>& y) {
      std::string s;
      for (const auto& k : x) {
        if (!y.count(k)) s += " (round " + std::to_string(k.first) + ", client " + std::to_string(k.second) + ")";
      }
      return s;
    };
    mismatch += "\n  " + eval_csv_path(runs[0]).string() + " vs " + eval_csv_path(runs[i]).string() + ":";
    const auto only_a = list(a, b), only_b = list(b, a);
    if (!only_a.empty()) mismatch += " only in first:" + only_a + ";";
    if (!only_b.empty()) mismatch += " only in second:" + only_b + ";";
    if (only_a.empty() && only_b.empty()) mismatch += " same rows in a different order;";
  }
  if (!mismatch.empty()) throw std::runtime_error("compare: eval rounds do not align:" + mismatch);

  os << "round,client";
  for (std::size_t i = 0; i < tables.size(); ++i) {
    os << ",rank1_" << i << ",delta_rank1_" << i << ",map_" << i << ",delta_map_" << i;
  }
  os << "\n";
  for (std::size_t r = 0; r < base_keys.size(); ++r) {
    os << base_keys[r].first << "," << base_keys[r].second;
    for (const auto& t : tables) {
      os << "," << fixed2(t[r].rank1) << "," << fixed2(t[r].rank1 - tables[0][r].rank1) << "," << fixed2(t[r].map)
         << "," << fixed2(t[r].map - tables[0][r].map);
    }
    os << "\n";
  }

  std::vector<std::map<int, detail::ClientSeries>> series;
  for (const auto& t : tables) series.push_back(detail::series_from_rows(t));
  auto stat_rows = [&](const char* label, auto stat) {
    for (const auto& [client, base] : series[0]) {
      os << label << "," << client;
      for (const auto& s : series) {
        const auto& cs = s.at(client);
        const double r1 = stat(cs.rank1), m = stat(cs.map);
        os << "," << fixed2(r1) << "," << fixed2(r1 - stat(base.rank1)) << "," << fixed2(m) << ","
           << fixed2(m - stat(base.map));
      }
      os << "\n";
    }
  };
  stat_rows("best3", [](const std::vector<double>& v) { return best3_average(v).value; });
  stat_rows("volatility", [](const std::vector<double>& v) { return volatility(v); });
}

}  // namespace fedreid
