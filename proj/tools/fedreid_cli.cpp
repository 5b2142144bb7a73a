#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedreid/harness.hpp"

namespace {

int report(const std::string& path, const fedreid::ParsedSpec& parsed) {
  for (const auto& v : parsed.violations) std::cerr << fedreid::format_violation(path, v) << "\n";
  return parsed.ok() ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated person re-identification simulator"};
  app.require_subcommand(1);

  std::string spec_path;
  std::string out;
  std::uint64_t seed_override = 0;

  auto* run = app.add_subcommand("run", "Run every seed and variant of a spec");
  run->add_option("--spec", spec_path, "Run spec (YAML)")->required()->check(CLI::ExistingFile);
  auto* out_opt = run->add_option("--out", out, "Output directory (overrides output_dir)");
  auto* seed_opt = run->add_option("--seed-override", seed_override, "Run this single seed instead of the spec's list");

  auto* validate = app.add_subcommand("validate", "Check a spec without running it");
  validate->add_option("--spec", spec_path, "Run spec (YAML)")->required()->check(CLI::ExistingFile);

  std::vector<std::string> inputs;
  std::string compare_out;
  auto* compare = app.add_subcommand("compare", "Align eval series of two or more runs");
  compare->add_option("runs", inputs, "Seed directories or eval.csv files; the first is the reference")
      ->required()
      ->expected(2, -1);
  compare->add_option("--out", compare_out, "Write CSV here instead of stdout");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*validate) {
      const auto parsed = fedreid::load_run_spec(spec_path);
      const int rc = report(spec_path, parsed);
      if (rc == 0) std::cout << spec_path << ": ok\n";
      return rc;
    }
    if (*run) {
      const auto parsed = fedreid::load_run_spec(spec_path);
      if (int rc = report(spec_path, parsed)) return rc;
      fedreid::RunOptions opts;
      if (*out_opt) opts.out = out;
      if (*seed_opt) opts.seed_override = seed_override;
      opts.log = &std::cerr;
      const auto result = fedreid::run(parsed.spec, opts);
      for (const auto& r : result.seeds) {
        if (!r.ok) std::cerr << r.dir.string() << ": failed after " << r.completed_rounds << " rounds: " << r.error << "\n";
      }
      return result.exit_code();
    }
    if (*compare) {
      std::vector<std::filesystem::path> paths(inputs.begin(), inputs.end());
      if (compare_out.empty()) {
        fedreid::compare(paths, std::cout);
      } else {
        std::ofstream os(compare_out);
        if (!os) throw std::runtime_error("cannot write " + compare_out);
        fedreid::compare(paths, os);
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
