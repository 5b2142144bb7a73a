#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fedreid/harness.hpp"

using namespace fedreid;
namespace fs = std::filesystem;

namespace {

const char* kToySpec = R"(schema_version: 1
seeds: [3, 4]
output_dir: unused
scenario:
  type: by_identity
  profiles:
    - {name: toy, cameras: 2, train_ids: 12, train_images: 96, query_ids: 6, query_images: 24, gallery_images: 48}
  input_dim: 6
federation:
  total_clients: 2
  clients_per_round: 2
  rounds: 1
  batch_size: 8
  feature_dim: 4
  eval_every: 1
)";

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / "fedreid_test_harness" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

RunSpec parse_ok(const std::string& text) {
  auto p = parse_run_spec(text);
  std::string all;
  for (const auto& v : p.violations) all += format_violation("spec", v) + "\n";
  EXPECT_TRUE(p.ok()) << all;
  return p.spec;
}

bool has_violation(const ParsedSpec& p, const std::string& field, const std::string& needle = "") {
  for (const auto& v : p.violations) {
    if (v.field == field && v.message.find(needle) != std::string::npos) return true;
  }
  return false;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string replace(std::string s, const std::string& from, const std::string& to) {
  const auto pos = s.find(from);
  EXPECT_NE(pos, std::string::npos) << from;
  if (pos != std::string::npos) s.replace(pos, from.size(), to);
  return s;
}

void write_eval(const fs::path& p, const std::vector<std::string>& rows) {
  std::ofstream os(p);
  os << kEvalCsvHeader << "\n";
  for (const auto& r : rows) os << r << "\n";
}

RunOptions to(const fs::path& out) {
  RunOptions o;
  o.out = out;
  return o;
}

std::vector<std::vector<std::string>> read_csv(const std::string& text) {
  std::vector<std::vector<std::string>> out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string c;
    while (std::getline(ls, c, ',')) cells.push_back(c);
    out.push_back(cells);
  }
  return out;
}

}  // namespace

TEST(Spec, ToySpecParses) {
  const RunSpec s = parse_ok(kToySpec);
  EXPECT_EQ(s.seeds, (std::vector<std::uint64_t>{3, 4}));
  EXPECT_EQ(s.scenario.scenario, Scenario::by_identity);
  ASSERT_EQ(s.scenario.profiles.size(), 1u);
  EXPECT_EQ(s.scenario.profiles[0].train_images, 96);
  EXPECT_EQ(s.federation.batch_size, 8);
  EXPECT_EQ(s.line_of("federation.rounds"), 12);
}

TEST(Spec, TotalClientsDefaultsToScenario) {
  const RunSpec s = parse_ok(replace(replace(kToySpec, "  total_clients: 2\n", ""), "  clients_per_round: 2\n", ""));
  EXPECT_EQ(s.federation.total_clients, 2);
  EXPECT_EQ(s.federation.clients_per_round, 2);
}

TEST(Spec, UnknownKeyIsAnErrorWithItsLine) {
  const auto p = parse_run_spec(replace(kToySpec, "  eval_every: 1\n", "  eval_every: 1\n  evl_every: 2\n"));
  ASSERT_FALSE(p.ok());
  EXPECT_TRUE(has_violation(p, "federation.evl_every", "unknown key"));
  EXPECT_EQ(p.violations[0].line, 16);
}

TEST(Spec, SyntaxErrorReportsLine) {
  const auto p = parse_run_spec("schema_version: 1\nseeds: [1, 2\nscenario: {}\n");
  ASSERT_FALSE(p.ok());
  EXPECT_EQ(p.violations[0].field, "<syntax>");
  EXPECT_GT(p.violations[0].line, 1);
}

TEST(Spec, TypeErrorReportsLine) {
  const auto p = parse_run_spec(replace(kToySpec, "rounds: 1", "rounds: many"));
  EXPECT_TRUE(has_violation(p, "federation.rounds", "integer"));
  EXPECT_EQ(p.violations[0].line, 12);
}

TEST(Spec, KAboveNNamesBothFields) {
  const auto p = parse_run_spec(replace(kToySpec, "clients_per_round: 2", "clients_per_round: 3"));
  ASSERT_FALSE(p.ok());
  const auto& v = p.violations[0];
  EXPECT_EQ(v.field, "federation.clients_per_round");
  EXPECT_NE(v.message.find("clients_per_round"), std::string::npos);
  EXPECT_NE(v.message.find("total_clients"), std::string::npos);
  EXPECT_EQ(v.line, 11);
}

TEST(Spec, NegativeLearningRate) {
  const auto p = parse_run_spec(std::string(kToySpec) + "optimizer:\n  lr_backbone: -0.01\n");
  EXPECT_TRUE(has_violation(p, "optimizer.lr_backbone", "> 0"));
  EXPECT_EQ(p.violations[0].line, 17);
}

TEST(Spec, OtherInvariants) {
  EXPECT_TRUE(has_violation(parse_run_spec(replace(kToySpec, "[3, 4]", "[3, 3]")), "seeds", "duplicate"));
  EXPECT_TRUE(has_violation(parse_run_spec(replace(kToySpec, "[3, 4]", "[]")), "seeds"));
  EXPECT_TRUE(has_violation(parse_run_spec(replace(kToySpec, "schema_version: 1", "schema_version: 2")),
                            "schema_version"));
  EXPECT_TRUE(has_violation(parse_run_spec(replace(kToySpec, "total_clients: 2", "total_clients: 3")),
                            "federation.total_clients"));
  EXPECT_TRUE(has_violation(parse_run_spec(std::string(kToySpec) + "strategy:\n  kd: true\n"), "strategy.kd"));
  EXPECT_TRUE(has_violation(parse_run_spec(std::string(kToySpec) + "optimizer:\n  momentum: 1.0\n"),
                            "optimizer.momentum"));
  EXPECT_TRUE(has_violation(parse_run_spec(replace(kToySpec, "by_identity", "by_pixel")), "scenario.type"));
  EXPECT_TRUE(has_violation(parse_run_spec(replace(kToySpec, "rounds: 1", "rounds: 0")), "federation.rounds"));
  EXPECT_TRUE(has_violation(parse_run_spec(std::string(kToySpec) + "comparison: epoch_sweep\n"), "comparison"));
  const std::string fedavg_mixed = R"(schema_version: 1
seeds: [1]
scenario:
  type: by_dataset
  profiles: [VIPeR, 3DPeS]
strategy:
  protocol: fedavg
)";
  EXPECT_TRUE(has_violation(parse_run_spec(fedavg_mixed), "strategy.protocol", "fedavg"));
  EXPECT_TRUE(has_violation(parse_run_spec(replace(fedavg_mixed, "VIPeR, 3DPeS", "VIPeR, Nowhere")),
                            "scenario.profiles[1]", "unknown"));
  EXPECT_TRUE(has_violation(parse_run_spec(replace(fedavg_mixed, "by_dataset", "by_camera")), "scenario.profiles"));
}

TEST(Spec, ShippedConfigsValidate) {
  for (const auto& e : fs::directory_iterator(FEDREID_SOURCE_DIR "/configs")) {
    const auto p = load_run_spec(e.path());
    std::string all;
    for (const auto& v : p.violations) all += format_violation(e.path().string(), v) + "\n";
    EXPECT_TRUE(p.ok()) << all;
  }
  const auto full = load_run_spec(FEDREID_SOURCE_DIR "/configs/full_default.yaml").spec;
  EXPECT_EQ(full.scenario.profiles.size(), 9u);
  EXPECT_EQ(full.federation.batch_size, 32);
  EXPECT_EQ(full.federation.local_epochs, 1);
  EXPECT_EQ(full.federation.rounds, 300);
  EXPECT_EQ(full.federation.total_clients, 9);
}

TEST(Expand, EpochSweepHoldsBudget) {
  RunSpec s = parse_ok(replace(kToySpec, "rounds: 1", "rounds: 300") + "comparison: epoch_sweep\n");
  const auto v = expand_runs(s);
  ASSERT_EQ(v.size(), 3u);
  EXPECT_EQ(v[0].name, "E1_T300");
  EXPECT_EQ(v[1].config.local_epochs * 100 + v[1].config.rounds, 5 * 100 + 60);
  EXPECT_EQ(v[2].config.local_epochs * 100 + v[2].config.rounds, 10 * 100 + 30);
}

TEST(Expand, BatchSweep) {
  RunSpec s = parse_ok(std::string(kToySpec) + "comparison: batch_sweep\n");
  const auto v = expand_runs(s);
  ASSERT_EQ(v.size(), 3u);
  EXPECT_EQ(v[0].config.batch_size, 32);
  EXPECT_EQ(v[1].config.batch_size, 64);
  EXPECT_EQ(v[2].config.batch_size, 128);
  EXPECT_EQ(v[2].name, "B128");
}

TEST(Run, OneRoundTwoClientsGivesTwoEvalRowsPerSeed) {
  const RunSpec s = parse_ok(kToySpec);
  const auto out = fresh_dir("one_round");
  const auto res = run(s, to(out));
  EXPECT_EQ(res.exit_code(), 0);
  for (int seed : {3, 4}) {
    const auto dir = out / "main" / ("seed_" + std::to_string(seed));
    EXPECT_EQ(read_eval_csv((dir / "eval.csv").string()).size(), 2u);
    EXPECT_TRUE(fs::exists(dir / "history.jsonl"));
    EXPECT_TRUE(fs::exists(dir / "weights.csv"));
    EXPECT_TRUE(fs::exists(dir / "summary.csv"));
    EXPECT_TRUE(fs::exists(dir / "checkpoints" / "round_0001.ckpt"));
    EXPECT_FALSE(fs::exists(dir / "failure.json"));
  }
  EXPECT_TRUE(fs::exists(out / "runs.csv"));
}

TEST(Run, RerunIsByteIdentical) {
  RunSpec s = parse_ok(replace(kToySpec, "rounds: 1", "rounds: 4") + "comparison: local_baseline\n" +
                       "export_federation: true\n");
  const auto a = fresh_dir("rerun_a"), b = fresh_dir("rerun_b");
  ASSERT_EQ(run(s, to(a)).exit_code(), 0);
  ASSERT_EQ(run(s, to(b)).exit_code(), 0);
  int files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), a);
    EXPECT_EQ(slurp(e.path()), slurp(b / rel)) << rel;
    ++files;
  }
  EXPECT_GE(files, 2 * 9);
}

TEST(Run, SummaryMatchesRecomputationFromEvalCsv) {
  RunSpec s = parse_ok(replace(replace(kToySpec, "rounds: 1", "rounds: 6"), "[3, 4]", "[3]") +
                       "comparison: local_baseline\n");
  const auto out = fresh_dir("summary");
  ASSERT_EQ(run(s, to(out)).exit_code(), 0);
  const auto dir = out / "main" / "seed_3";
  const auto rows = read_eval_csv((dir / "eval.csv").string());
  const auto local = read_eval_csv((dir / "local.csv").string());
  const auto summary = read_csv(slurp(dir / "summary.csv"));
  ASSERT_EQ(summary.size(), 3u);
  EXPECT_EQ(summary[0].size(), 13u);
  for (int k = 0; k < 2; ++k) {
    std::vector<double> r1, mp;
    for (const auto& r : rows) {
      if (r.client == k) {
        r1.push_back(r.rank1);
        mp.push_back(r.map);
      }
    }
    ASSERT_EQ(r1.size(), 6u);
    std::vector<double> sorted = r1;
    std::sort(sorted.rbegin(), sorted.rend());
    const double best3 = (sorted[0] + sorted[1] + sorted[2]) / 3.0;
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 1; i < r1.size(); ++i) mean += (r1[i] - r1[i - 1]) / 5.0;
    for (std::size_t i = 1; i < r1.size(); ++i) var += std::pow(r1[i] - r1[i - 1] - mean, 2) / 4.0;
    const auto& row = summary[k + 1];
    EXPECT_EQ(row[3], fixed2(best3));
    EXPECT_EQ(row[5], "0");
    EXPECT_EQ(row[6], fixed2(r1.back()));
    EXPECT_EQ(row[8], fixed2(std::sqrt(var)));
    EXPECT_EQ(row[11], fixed2(local[k].rank1));
    EXPECT_EQ(row[12], fixed2(round2(best3) - local[k].rank1));
  }
}

TEST(Run, EpochSweepWritesThreeSchedules) {
  RunSpec s = parse_ok(replace(replace(kToySpec, "rounds: 1", "rounds: 10"), "[3, 4]", "[3]") +
                       "comparison: epoch_sweep\ncheckpoints: false\n");
  const auto out = fresh_dir("sweep");
  ASSERT_EQ(run(s, to(out)).exit_code(), 0);
  const auto runs = read_csv(slurp(out / "runs.csv"));
  ASSERT_EQ(runs.size(), 4u);
  EXPECT_EQ(runs[1], (std::vector<std::string>{"E1_T10", "3", "1", "10", "8", "ok"}));
  EXPECT_EQ(runs[2], (std::vector<std::string>{"E5_T2", "3", "5", "2", "8", "ok"}));
  EXPECT_EQ(runs[3], (std::vector<std::string>{"E10_T1", "3", "10", "1", "8", "ok"}));
  std::ifstream h(out / "E5_T2" / "seed_3" / "history.jsonl");
  int lines = 0;
  for (std::string l; std::getline(h, l);) ++lines;
  EXPECT_EQ(lines, 2);
  EXPECT_FALSE(fs::exists(out / "E5_T2" / "seed_3" / "checkpoints"));
}

TEST(Run, SeedOverrideAndOutputRootEnv) {
  RunSpec s = parse_ok(kToySpec);
  s.output_dir = "rel_out";
  const auto root = fresh_dir("env_root");
  ::setenv("FEDREID_OUTPUT_ROOT", root.c_str(), 1);
  RunOptions opts;
  opts.seed_override = 11;
  EXPECT_EQ(resolve_output_dir(s, opts), root / "rel_out");
  ASSERT_EQ(run(s, opts).exit_code(), 0);
  ::unsetenv("FEDREID_OUTPUT_ROOT");
  EXPECT_TRUE(fs::exists(root / "rel_out" / "main" / "seed_11" / "eval.csv"));
  EXPECT_FALSE(fs::exists(root / "rel_out" / "main" / "seed_3"));
}

TEST(Run, FailureWritesRecordAndNonzeroExit) {
  // Constructed directly so the FedAvg identity-count check only fires at run time.
  RunSpec s;
  s.schema_version = 1;
  s.seeds = {1};
  s.scenario.profiles = {{"a", 2, 10, 40, 4, 8, 16}, {"b", 2, 12, 48, 4, 8, 16}};
  s.scenario.generator.input_dim = 4;
  s.federation.total_clients = 2;
  s.federation.clients_per_round = 2;
  s.federation.rounds = 2;
  s.federation.strategy.protocol = Protocol::fedavg;
  const auto out = fresh_dir("failure");
  const auto res = run(s, to(out));
  EXPECT_EQ(res.exit_code(), 1);
  const auto f = out / "main" / "seed_1" / "failure.json";
  ASSERT_TRUE(fs::exists(f));
  const auto j = nlohmann::json::parse(slurp(f));
  EXPECT_EQ(j["completed_rounds"], 0);
  EXPECT_NE(j["error"].get<std::string>().find("FedAvg"), std::string::npos);
  EXPECT_TRUE(fs::exists(out / "main" / "seed_1" / "eval.csv"));
  EXPECT_FALSE(fs::exists(out / "main" / "seed_1" / "summary.csv"));
}

TEST(Compare, SelfGivesZeroDeltas) {
  RunSpec s = parse_ok(replace(replace(kToySpec, "rounds: 1", "rounds: 5"), "[3, 4]", "[3]"));
  const auto out = fresh_dir("cmp_self");
  ASSERT_EQ(run(s, to(out)).exit_code(), 0);
  const auto dir = out / "main" / "seed_3";
  std::ostringstream os;
  compare({dir, dir}, os);
  const auto rows = read_csv(os.str());
  ASSERT_EQ(rows.size(), 1u + 10u + 2u + 2u);
  EXPECT_EQ(rows[0][7], "delta_rank1_1");
  for (std::size_t r = 1; r < rows.size(); ++r) {
    EXPECT_EQ(rows[r][7], "0.00");
    EXPECT_EQ(rows[r][9], "0.00");
  }
}

TEST(Compare, StrictlyHigherRunHasPositiveDeltas) {
  const auto d = fresh_dir("cmp_higher");
  write_eval(d / "a.csv", {"1,0,10.00,20.00,30.00,5.00", "2,0,12.00,20.00,30.00,6.00", "3,0,11.00,20.00,30.00,7.00"});
  write_eval(d / "b.csv", {"1,0,15.00,20.00,30.00,6.00", "2,0,12.50,20.00,30.00,6.50", "3,0,40.00,50.00,60.00,9.00"});
  std::ostringstream os;
  compare({d / "a.csv", d / "b.csv"}, os);
  const auto rows = read_csv(os.str());
  for (std::size_t r = 1; r <= 3; ++r) {
    EXPECT_GT(std::stod(rows[r][7]), 0.0) << r;
    EXPECT_GT(std::stod(rows[r][9]), 0.0) << r;
  }
  EXPECT_EQ(rows[1][7], "5.00");
  EXPECT_EQ(rows[4][0], "best3");
  EXPECT_EQ(rows[4][7], fixed2((15 + 12.5 + 40) / 3.0 - 11.0));
}

TEST(Compare, MisalignedRoundsAreListed) {
  const auto d = fresh_dir("cmp_misaligned");
  write_eval(d / "a.csv", {"1,0,10.00,20.00,30.00,5.00", "2,0,12.00,20.00,30.00,6.00"});
  write_eval(d / "b.csv", {"1,0,10.00,20.00,30.00,5.00", "3,0,12.00,20.00,30.00,6.00"});
  std::ostringstream os;
  try {
    compare({d / "a.csv", d / "b.csv"}, os);
    FAIL() << "expected a throw";
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(round 2, client 0)"), std::string::npos) << msg;
    EXPECT_NE(msg.find("(round 3, client 0)"), std::string::npos) << msg;
  }
  EXPECT_THROW(compare({d / "a.csv"}, os), std::invalid_argument);
}

TEST(Compare, KdVolatilityDeltaMatchesRecomputation) {
  const std::string base = replace(replace(kToySpec, "rounds: 1", "rounds: 8"), "[3, 4]", "[3]");
  const std::string with_shared = replace(base, "  input_dim: 6\n", "  input_dim: 6\n  shared_size: 64\n");
  RunSpec plain = parse_ok(with_shared);
  RunSpec kd = parse_ok(with_shared + "strategy:\n  kd: true\nkd:\n  finetune_lr: 0.01\n");
  const auto a = fresh_dir("cmp_kd_a"), b = fresh_dir("cmp_kd_b");
  ASSERT_EQ(run(plain, to(a)).exit_code(), 0);
  ASSERT_EQ(run(kd, to(b)).exit_code(), 0);
  const auto da = a / "main" / "seed_3", db = b / "main" / "seed_3";
  std::ostringstream os;
  compare({da, db}, os);
  const auto rows = read_csv(os.str());

  auto vol = [](const std::vector<EvalRow>& t, int client) {
    std::vector<double> d;
    double prev = 0.0;
    bool first = true;
    for (const auto& r : t) {
      if (r.client != client) continue;
      if (!first) d.push_back(r.rank1 - prev);
      prev = r.rank1;
      first = false;
    }
    double m = 0.0;
    for (double x : d) m += x / d.size();
    double v = 0.0;
    for (double x : d) v += (x - m) * (x - m) / (d.size() - 1);
    return std::sqrt(v);
  };
  const auto ta = read_eval_csv((da / "eval.csv").string()), tb = read_eval_csv((db / "eval.csv").string());
  int checked = 0;
  for (const auto& r : rows) {
    if (r[0] != "volatility") continue;
    const int client = std::stoi(r[1]);
    EXPECT_EQ(r[7], fixed2(vol(tb, client) - vol(ta, client)));
    ++checked;
  }
  EXPECT_EQ(checked, 2);
}
