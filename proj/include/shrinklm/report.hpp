#pragma once

// Merges finished run directories into comparison tables (CSV):
//   runs.csv               one row per run
//   ppl_vs_tokens.csv      validation perplexity of every run on a shared token axis
//   location_ablation.csv  teacher-free runs grouped by (layout, k_remove)
//   drop_gap.csv           teacher-free runs grouped by drop gap
// Group statistics are medians over seeds.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "shrinklm/checkpoint.hpp"
#include "shrinklm/errors.hpp"
#include "shrinklm/trace.hpp"

namespace shrinklm::report {

struct RunRecord {
  std::string label;
  std::filesystem::path dir;
  KeyValueFile manifest;
  std::vector<EvalRow> evals;
  std::vector<TraceRow> trace;

  std::string command() const { return manifest.get_or("command", "?"); }
  std::string seed() const { return manifest.get_or("seed", "?"); }
  std::string config(const std::string& key, const std::string& fallback = "") const {
    return manifest.get_or("config." + key, fallback);
  }
  /// Perplexity of the last evaluation in the given phase, if any.
  std::optional<double> ppl(const std::string& phase) const {
    for (auto it = evals.rbegin(); it != evals.rend(); ++it)
      if (it->phase == phase) return it->val_ppl;
    return std::nullopt;
  }
};

inline RunRecord load_run(const std::string& label, const std::filesystem::path& dir) {
  RunRecord r;
  r.label = label;
  r.dir = dir;
  r.manifest = KeyValueFile::read(dir / "manifest.txt");
  if (std::filesystem::exists(dir / "eval.csv")) r.evals = read_eval_trace(dir / "eval.csv");
  if (std::filesystem::exists(dir / "metrics.csv")) r.trace = read_trace(dir / "metrics.csv");
  if (r.manifest.get_or("status", "") != "complete")
    logger().warn("run '{}' ({}) is not marked complete", label, dir.string());
  return r;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw UsageError("median of an empty set");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace detail {

inline std::string cell(std::optional<double> v) { return v ? fmt::format("{:.6f}", *v) : ""; }

inline std::string join(const std::vector<std::string>& v, const char* sep) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? sep : "") + v[i];
  return out;
}

inline std::optional<double> median_of(const std::vector<const RunRecord*>& runs,
                                       const std::string& phase) {
  std::vector<double> v;
  for (const auto* r : runs)
    if (auto p = r->ppl(phase)) v.push_back(*p);
  if (v.empty()) return std::nullopt;
  return median(v);
}

}  // namespace detail

inline std::string runs_csv(const std::vector<RunRecord>& runs) {
  std::string out =
      "label,command,seed,layout,k_remove,drop_gap_tokens,status,end_tokens,final_val_ppl,cumulative_flops\n";
  for (const auto& r : runs) {
    const bool distill = r.command() == "distill" || r.command() == "kd";
    out += fmt::format("{},{},{},{},{},{},{},{},{},{}\n", r.label, r.command(), r.seed(),
                       distill ? r.config("distill.layout") : "", distill ? r.config("distill.k_remove") : "",
                       r.command() == "distill" ? r.config("distill.drop_gap_tokens") : "",
                       r.manifest.get_or("status", ""), r.manifest.get_or("end_tokens", ""),
                       detail::cell(r.ppl("final")),
                       r.trace.empty() ? "" : fmt::format("{:.6g}", r.trace.back().cumulative_flops));
  }
  return out;
}

/// One row per distinct token count seen in any run; a run's cell holds the
/// last evaluation it made at that count (so a drop at 0 tokens shows the
/// post-drop value) and is empty where the run has none.
inline std::string ppl_vs_tokens_csv(const std::vector<RunRecord>& runs) {
  std::set<std::uint64_t> axis;
  std::vector<std::map<std::uint64_t, double>> by_run(runs.size());
  for (std::size_t i = 0; i < runs.size(); ++i)
    for (const auto& e : runs[i].evals) {
      axis.insert(e.tokens);
      by_run[i][e.tokens] = e.val_ppl;
    }
  std::string out = "tokens";
  for (const auto& r : runs) out += "," + r.label;
  out += "\n";
  for (auto t : axis) {
    out += std::to_string(t);
    for (const auto& m : by_run) {
      const auto it = m.find(t);
      out += "," + detail::cell(it == m.end() ? std::nullopt : std::optional<double>(it->second));
    }
    out += "\n";
  }
  return out;
}

/// Teacher-free runs grouped by removal location. pct_ppl_increase compares
/// the median final perplexity with the median perplexity of the source model.
inline std::string location_ablation_csv(const std::vector<RunRecord>& runs) {
  std::map<std::pair<std::string, std::string>, std::vector<const RunRecord*>> groups;
  for (const auto& r : runs)
    if (r.command() == "distill")
      groups[{r.config("distill.layout"), r.config("distill.k_remove")}].push_back(&r);
  struct Row {
    std::string layout, k, seeds;
    std::size_t n;
    std::optional<double> source, post_drop, final;
  };
  std::vector<Row> rows;
  for (const auto& [key, members] : groups) {
    std::vector<std::string> seeds;
    for (const auto* m : members) seeds.push_back(m->seed());
    rows.push_back({key.first, key.second, detail::join(seeds, " "), members.size(),
                    detail::median_of(members, "source"), detail::median_of(members, "post_drop"),
                    detail::median_of(members, "final")});
  }
  std::vector<std::size_t> order(rows.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) {
    return rows[a].final.value_or(INFINITY) < rows[b].final.value_or(INFINITY);
  });
  std::vector<std::size_t> rank(rows.size());
  for (std::size_t i = 0; i < order.size(); ++i) rank[order[i]] = i + 1;

  std::string out =
      "layout,k_remove,runs,seeds,median_source_ppl,median_post_drop_ppl,median_final_ppl,"
      "pct_ppl_increase_vs_source,rank\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    std::optional<double> pct;
    if (r.source && r.final) pct = 100.0 * (*r.final - *r.source) / *r.source;
    out += fmt::format("{},{},{},{},{},{},{},{},{}\n", r.layout, r.k, r.n, r.seeds, detail::cell(r.source),
                       detail::cell(r.post_drop), detail::cell(r.final), detail::cell(pct), rank[i]);
  }
  return out;
}

/// Teacher-free runs grouped by the number of tokens between layer drops.
inline std::string drop_gap_csv(const std::vector<RunRecord>& runs) {
  std::map<std::uint64_t, std::vector<const RunRecord*>> groups;
  for (const auto& r : runs)
    if (r.command() == "distill") groups[std::stoull(r.config("distill.drop_gap_tokens", "0"))].push_back(&r);
  std::string out = "drop_gap_tokens,runs,seeds,median_post_drop_ppl,median_final_ppl,min_final_ppl,max_final_ppl\n";
  for (const auto& [gap, members] : groups) {
    std::vector<std::string> seeds;
    std::vector<double> finals;
    for (const auto* m : members) {
      seeds.push_back(m->seed());
      if (auto f = m->ppl("final")) finals.push_back(*f);
    }
    const auto lo = finals.empty() ? std::nullopt : std::optional(*std::min_element(finals.begin(), finals.end()));
    const auto hi = finals.empty() ? std::nullopt : std::optional(*std::max_element(finals.begin(), finals.end()));
    out += fmt::format("{},{},{},{},{},{},{}\n", gap, members.size(), detail::join(seeds, " "),
                       detail::cell(detail::median_of(members, "post_drop")),
                       detail::cell(detail::median_of(members, "final")), detail::cell(lo), detail::cell(hi));
  }
  return out;
}

/// Writes all four tables into `out_dir`.
inline void write_report(const std::vector<RunRecord>& runs, const std::filesystem::path& out_dir) {
  if (runs.empty()) throw UsageError("report needs at least one run");
  std::filesystem::create_directories(out_dir);
  const auto put = [&](const char* name, const std::string& text) {
    std::ofstream f(out_dir / name, std::ios::binary | std::ios::trunc);
    if (!(f << text)) throw InputError("cannot write '" + (out_dir / name).string() + "'");
  };
  put("runs.csv", runs_csv(runs));
  put("ppl_vs_tokens.csv", ppl_vs_tokens_csv(runs));
  put("location_ablation.csv", location_ablation_csv(runs));
  put("drop_gap.csv", drop_gap_csv(runs));
}

}  // namespace shrinklm::report
