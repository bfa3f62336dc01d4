#pragma once

// Metrics traces. metrics.csv has one row per optimizer step:
//   tokens,lm_loss,ppl,kl_loss,lr,layers_live,cumulative_flops
// kl_loss is empty for runs without a teacher. eval.csv has one row per
// validation pass:
//   tokens,phase,val_loss,val_ppl,layers_live

#include <spdlog/fmt/fmt.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "shrinklm/errors.hpp"

namespace shrinklm {

struct TraceRow {
  std::uint64_t tokens = 0;
  double lm_loss = 0;
  double ppl = 0;
  double kl_loss = std::numeric_limits<double>::quiet_NaN();
  double lr = 0;
  std::size_t layers_live = 0;
  double cumulative_flops = 0;

  bool has_kl() const { return !std::isnan(kl_loss); }
};

struct EvalRow {
  std::uint64_t tokens = 0;
  std::string phase;  // start, source, post_drop, periodic, final
  double val_loss = 0;
  double val_ppl = 0;
  std::size_t layers_live = 0;
};

inline constexpr const char* kTraceHeader =
    "tokens,lm_loss,ppl,kl_loss,lr,layers_live,cumulative_flops";
inline constexpr const char* kEvalHeader = "tokens,phase,val_loss,val_ppl,layers_live";

inline std::string format_row(const TraceRow& r) {
  return fmt::format("{},{:.9g},{:.9g},{},{:.9g},{},{:.17g}", r.tokens, r.lm_loss, r.ppl,
                     r.has_kl() ? fmt::format("{:.9g}", r.kl_loss) : std::string(), r.lr,
                     r.layers_live, r.cumulative_flops);
}

inline std::string format_row(const EvalRow& r) {
  return fmt::format("{},{},{:.9g},{:.9g},{}", r.tokens, r.phase, r.val_loss, r.val_ppl,
                     r.layers_live);
}

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s) {
  if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
  try {
    return std::stod(s);
  } catch (const std::exception&) {
    throw FormatError("bad number '" + s + "' in trace");
  }
}

inline std::vector<std::vector<std::string>> read_csv_body(const std::filesystem::path& path,
                                                          const std::string& header) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open trace '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || line != header)
    throw FormatError("'" + path.string() + "' does not start with header '" + header + "'");
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(split_csv(line));
  return rows;
}

}  // namespace detail

inline std::vector<TraceRow> read_trace(const std::filesystem::path& path) {
  std::vector<TraceRow> out;
  for (const auto& c : detail::read_csv_body(path, kTraceHeader)) {
    if (c.size() != 7) throw FormatError("trace row with " + std::to_string(c.size()) + " cells");
    TraceRow r;
    r.tokens = std::stoull(c[0]);
    r.lm_loss = detail::parse_double(c[1]);
    r.ppl = detail::parse_double(c[2]);
    r.kl_loss = detail::parse_double(c[3]);
    r.lr = detail::parse_double(c[4]);
    r.layers_live = std::stoul(c[5]);
    r.cumulative_flops = detail::parse_double(c[6]);
    out.push_back(r);
  }
  return out;
}

inline std::vector<EvalRow> read_eval_trace(const std::filesystem::path& path) {
  std::vector<EvalRow> out;
  for (const auto& c : detail::read_csv_body(path, kEvalHeader)) {
    if (c.size() != 5) throw FormatError("eval row with " + std::to_string(c.size()) + " cells");
    out.push_back({std::stoull(c[0]), c[1], detail::parse_double(c[2]), detail::parse_double(c[3]),
                   std::stoul(c[4])});
  }
  return out;
}

template <class Row>
void write_csv(const std::filesystem::path& path, const char* header, const std::vector<Row>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  out << header << '\n';
  for (const auto& r : rows) out << format_row(r) << '\n';
}

}  // namespace shrinklm
