#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fedreid/engine.hpp"
#include "fedreid/metrics.hpp"

namespace fedreid {

// Checkpoint layout, all little-endian:
//   offset  0  char[4]  magic "FRCK"
//   offset  4  u32      format version (1)
//   offset  8  u32      completed rounds
//   offset 12  u32      input_dim
//   offset 16  u32      feature_dim
//   offset 20  u64      parameter count = input_dim * feature_dim + feature_dim
//   offset 28  f64[count] backbone: row-major weights (input_dim x feature_dim), then biases
inline constexpr std::array<char, 4> kCheckpointMagic{'F', 'R', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void put_le(std::ostream& os, T v) {
  auto u = static_cast<std::uint64_t>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) os.put(static_cast<char>((u >> (8 * i)) & 0xFF));
}

template <class T>
T get_le(std::istream& is) {
  std::uint64_t u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    const int c = is.get();
    if (c == std::char_traits<char>::eof()) throw std::runtime_error("checkpoint: truncated file");
    u |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return static_cast<T>(u);
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  if (ck.backbone.size() != ck.dims.size()) throw std::invalid_argument("write_checkpoint: length does not match dims");
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(ck.round));
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(ck.dims.input_dim));
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(ck.dims.feature_dim));
  detail::put_le<std::uint64_t>(os, ck.backbone.size());
  for (double v : ck.backbone) detail::put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
}

inline Checkpoint read_checkpoint(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kCheckpointMagic) throw std::runtime_error("checkpoint: bad magic");
  if (detail::get_le<std::uint32_t>(is) != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version");
  Checkpoint ck;
  ck.round = static_cast<int>(detail::get_le<std::uint32_t>(is));
  ck.dims.input_dim = detail::get_le<std::uint32_t>(is);
  ck.dims.feature_dim = detail::get_le<std::uint32_t>(is);
  const auto count = detail::get_le<std::uint64_t>(is);
  if (count != ck.dims.size()) throw std::runtime_error("checkpoint: parameter count does not match dims");
  ck.backbone.resize(count);
  for (auto& v : ck.backbone) v = std::bit_cast<double>(detail::get_le<std::uint64_t>(is));
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  write_checkpoint(os, ck);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path);
  return read_checkpoint(is);
}

inline nlohmann::json to_json(const EvalResult& r) {
  return {{"round", r.round},   {"client", r.client}, {"rank1", r.rank1},
          {"rank5", r.rank5},   {"rank10", r.rank10}, {"map", r.map},
          {"skipped_queries", r.skipped_queries}, {"evaluated_queries", r.evaluated_queries}};
}

/// One history line. `round` counts completed rounds (1-based).
inline nlohmann::json to_json(const RoundRecord& rec, std::span<const EvalResult> evals, const CommCost& cumulative) {
  nlohmann::json j;
  j["round"] = rec.round + 1;
  j["selected"] = rec.selected;
  j["weights"] = rec.weights;
  j["size_weights"] = rec.size_weights;
  j["cdw_scores"] = rec.cdw_scores;
  j["weight_fallback"] = rec.weight_fallback;
  j["train_loss"] = rec.train_loss;
  j["kd_loss_before"] = rec.kd_loss_before ? nlohmann::json(*rec.kd_loss_before) : nlohmann::json(nullptr);
  j["kd_loss_after"] = rec.kd_loss_after ? nlohmann::json(*rec.kd_loss_after) : nlohmann::json(nullptr);
  j["comm_bytes"] = cumulative.total;
  j["comm_bytes_per_client"] = cumulative.total_per_client;
  j["eval"] = nlohmann::json::array();
  for (const auto& e : evals) j["eval"].push_back(to_json(e));
  return j;
}

/// Two-decimal fixed formatting used by every human-facing CSV.
inline std::string fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

/// The value a reader recovers from fixed2(v).
inline double round2(double v) { return std::stod(fixed2(v)); }

inline constexpr const char* kEvalCsvHeader = "round,client,rank1,rank5,rank10,map";

inline std::string eval_csv_row(const EvalResult& r) {
  return std::to_string(r.round) + "," + std::to_string(r.client) + "," + fixed2(r.rank1) + "," + fixed2(r.rank5) +
         "," + fixed2(r.rank10) + "," + fixed2(r.map);
}

struct EvalRow {
  int round = 0;
  int client = 0;
  double rank1 = 0, rank5 = 0, rank10 = 0, map = 0;
};

inline std::vector<EvalRow> read_eval_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  std::string line;
  if (!std::getline(is, line) || line != kEvalCsvHeader) {
    throw std::runtime_error(path + ": expected header '" + std::string(kEvalCsvHeader) + "'");
  }
  std::vector<EvalRow> rows;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 6) throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected 6 columns");
    try {
      rows.push_back({std::stoi(cells[0]), std::stoi(cells[1]), std::stod(cells[2]), std::stod(cells[3]),
                      std::stod(cells[4]), std::stod(cells[5])});
    } catch (const std::exception&) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": malformed number");
    }
  }
  return rows;
}

}  // namespace fedreid
