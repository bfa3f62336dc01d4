#pragma once

// The shrinklm command line. Subcommands:
//   pretrain  --config C --seed S --out DIR [--resume]
//   distill   --config C --checkpoint SRC --seed S --out DIR [--resume]
//   kd        --config C --teacher SRC --seed S --out DIR [--resume]
//   evaluate  --checkpoint DIR [--tasks FILE | --config C] [--out FILE]
//   flops     --method M --student-params N [--teacher-params N] --tokens D | --paper | --run DIR
//   report    --run [LABEL=]DIR ... --out DIR
//
// Exit codes: 0 ok, 2 invalid configuration or inputs, 3 non-finite loss,
// 1 anything else.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "shrinklm/config.hpp"
#include "shrinklm/distill.hpp"
#include "shrinklm/eval.hpp"
#include "shrinklm/flops.hpp"
#include "shrinklm/log.hpp"
#include "shrinklm/report.hpp"

namespace shrinklm::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kInvalid = 2, kNumeric = 3 };

namespace fs = std::filesystem;

struct TrainArgs {
  fs::path config;
  std::uint64_t seed = 0;
  fs::path out;
  bool resume = false;
  fs::path source;  // --checkpoint for distill, --teacher for kd
  std::uint64_t stop_after_tokens = 0;
  bool skip_complete = false;
};

namespace detail {

inline std::shared_ptr<const Corpus> load_corpus(const fs::path& p) {
  if (p.empty()) return nullptr;
  return std::make_shared<const Corpus>(Corpus::load(p.string()));
}

inline void require_inputs(const RunConfig& c, std::vector<std::string>& v) {
  if (c.train_corpus.empty()) v.push_back("data.train is required");
  else if (!fs::is_regular_file(c.train_corpus))
    v.push_back("data.train: no such file '" + c.train_corpus.string() + "'");
  if (!c.validation_corpus.empty() && !fs::is_regular_file(c.validation_corpus))
    v.push_back("data.validation: no such file '" + c.validation_corpus.string() + "'");
}

inline KeyValueFile read_checkpoint_manifest(const fs::path& dir, const char* what) {
  if (!fs::is_regular_file(dir / "manifest.txt"))
    throw InputError(std::string(what) + " '" + dir.string() + "' is not a checkpoint directory");
  return KeyValueFile::read(dir / "manifest.txt");
}

/// The resumable checkpoint of `out`, after checking that the run there was
/// started with the same resolved configuration.
inline std::optional<Checkpoint<float>> resume_point(const TrainArgs& a, const KeyValueFile& config) {
  if (!a.resume) return std::nullopt;
  const auto ck = latest_checkpoint(a.out);
  if (!ck) throw InputError("--resume: no checkpoint under '" + (a.out / "checkpoints").string() + "'");
  const auto manifest = KeyValueFile::read(a.out / "manifest.txt");
  std::vector<std::string> v;
  for (const auto& [k, value] : config.entries())
    if (manifest.get_or("config." + k, value) != value)
      v.push_back("--resume: " + k + " is '" + value + "' but the run was started with '" +
                  manifest.get("config." + k) + "'");
  throw_if_violations(std::move(v));
  logger().info("resuming from {}", ck->string());
  return load_checkpoint<float>(*ck);
}

/// True when `out` already holds a finished run of this exact command,
/// resolved configuration, seed and code version.
inline bool already_complete(const TrainArgs& a, const std::string& command, const KeyValueFile& config) {
  if (!fs::is_regular_file(a.out / "manifest.txt")) return false;
  const auto m = KeyValueFile::read(a.out / "manifest.txt");
  if (m.get_or("status", "") != "complete" || m.get_or("command", "") != command ||
      m.get_or("seed", "") != std::to_string(a.seed) || m.get_or("version", "") != kVersion)
    return false;
  std::size_t n = 0;
  for (const auto& [k, v] : m.entries())
    if (k.starts_with("config.")) ++n;
  if (n != config.entries().size()) return false;
  for (const auto& [k, v] : config.entries())
    if (m.get_or("config." + k, "\x01") != v) return false;
  return true;
}

inline bool skip(const TrainArgs& a, const std::string& command, const KeyValueFile& config) {
  if (!a.skip_complete || !already_complete(a, command, config)) return false;
  logger().info("{} already holds a complete {} run with this configuration; nothing to do", a.out.string(),
                command);
  return true;
}

inline RunIO make_io(const TrainArgs& a, const RunConfig& c, KeyValueFile manifest_config) {
  RunIO io;
  io.seed = a.seed;
  io.corpus = load_corpus(c.train_corpus);
  io.validation = load_corpus(c.validation_corpus);
  io.out_dir = a.out;
  io.manifest_config = std::move(manifest_config);
  io.interrupt_after_tokens = a.stop_after_tokens;
  return io;
}

inline void write_config(const fs::path& out, const std::string& text) {
  fs::create_directories(out);
  std::ofstream f(out / "config.ini", std::ios::binary | std::ios::trunc);
  f << text;
}

inline int report_run(const RunResult<float>& r) {
  if (!r.evals.empty())
    logger().info("finished at {} tokens: val ppl {:.3f}", r.tokens, r.evals.back().val_ppl);
  return r.completed ? kOk : kFailure;
}

/// Source-model facts needed to validate a distill/kd config before loading weights.
struct SourceInfo {
  ModelConfig model;
  std::optional<double> peak_lr;
};

inline SourceInfo source_info(const fs::path& dir, const char* what) {
  const auto kv = read_checkpoint_manifest(dir, what);
  SourceInfo s{read_model_config(kv), std::nullopt};
  if (kv.has("state.peak_lr")) s.peak_lr = std::stod(kv.get("state.peak_lr"));
  return s;
}

/// Resolves the removal plan and the continued-pretraining peak LR against
/// the source model; records both in the manifest view.
inline RemovalPlan resolve_plan(const RunConfig& c, const SourceInfo& src, TrainConfig& train,
                                KeyValueFile& flat, std::vector<std::string>& v) {
  RemovalPlan plan;
  try {
    plan = RemovalPlan::make(c.distill.layout, src.model.n_layers, c.distill.k_remove,
                             c.distill.drop_gap_tokens);
  } catch (const ConfigError& e) {
    v.insert(v.end(), e.violations().begin(), e.violations().end());
    plan = {c.distill.layout, c.distill.k_remove, c.distill.drop_gap_tokens, {}};
  }
  const double base = src.peak_lr.value_or(c.train.peak_lr);
  if (!src.peak_lr) logger().warn("source checkpoint records no peak_lr; scaling optim.peak_lr instead");
  train.peak_lr = base * c.distill.lr_scale;
  if (train.stream.seq_len > src.model.context_len)
    v.push_back("data.seq_len exceeds the source model's context_len (" +
                std::to_string(src.model.context_len) + ")");
  // The source checkpoint, not the [model] section, defines the architecture.
  KeyValueFile model_kv;
  write_model_config(model_kv, src.model);
  for (const auto& [k, value] : model_kv.entries()) flat.set(k, value);
  flat.set("optim.peak_lr", fmt::format("{}", train.peak_lr));
  std::string idx;
  for (auto i : plan.resolved_indices) idx += (idx.empty() ? "" : " ") + std::to_string(i);
  flat.set("distill.resolved_indices", idx);
  return plan;
}

}  // namespace detail

inline int pretrain(const TrainArgs& a) {
  const auto c = load_run_config(a.config);
  std::vector<std::string> v;
  detail::require_inputs(c, v);
  throw_if_violations(std::move(v));
  const auto flat = c.flat();
  if (detail::skip(a, "pretrain", flat)) return kOk;
  auto resume = detail::resume_point(a, flat);
  detail::write_config(a.out, c.str());
  const auto r = run_pretrain<float>(c.model, c.train, detail::make_io(a, c, flat), resume ? &*resume : nullptr);
  return detail::report_run(r);
}

inline int distill(const TrainArgs& a) {
  const auto c = load_run_config(a.config);
  std::vector<std::string> v;
  detail::require_inputs(c, v);
  const auto src = detail::source_info(a.source, "--checkpoint");
  DistillRunConfig d{c.train, {}, c.distill.pre_drop_tokens};
  auto flat = c.flat();
  d.plan = detail::resolve_plan(c, src, d.train, flat, v);
  flat.set("source.checkpoint", fs::absolute(a.source).string());
  if (d.plan.resolved_indices.size() == d.plan.k_remove) {
    auto dv = d.violations(src.model.n_layers);
    v.insert(v.end(), dv.begin(), dv.end());
  } else if (c.distill.k_remove == 0) {
    v.push_back("distill.k_remove must be positive");
  }
  throw_if_violations(std::move(v));
  if (detail::skip(a, "distill", flat)) return kOk;
  auto resume = detail::resume_point(a, flat);
  detail::write_config(a.out, c.str());
  const auto source = load_checkpoint<float>(a.source);
  const auto r = run_teacher_free(source.model, d, detail::make_io(a, c, flat), resume ? &*resume : nullptr);
  return detail::report_run(r);
}

inline int kd(const TrainArgs& a) {
  const auto c = load_run_config(a.config);
  std::vector<std::string> v;
  detail::require_inputs(c, v);
  const auto src = detail::source_info(a.source, "--teacher");
  KdRunConfig k{c.train, {}, c.kd.temperature, c.kd.alpha};
  auto flat = c.flat();
  k.plan = detail::resolve_plan(c, src, k.train, flat, v);
  flat.set("source.checkpoint", fs::absolute(a.source).string());
  if (k.plan.resolved_indices.size() == k.plan.k_remove) {
    auto kv = k.violations();
    v.insert(v.end(), kv.begin(), kv.end());
  }
  throw_if_violations(std::move(v));
  if (detail::skip(a, "kd", flat)) return kOk;
  auto resume = detail::resume_point(a, flat);
  detail::write_config(a.out, c.str());
  const auto teacher = load_checkpoint<float>(a.source);
  const auto r = run_kd(teacher.model, k, detail::make_io(a, c, flat), resume ? &*resume : nullptr);
  return detail::report_run(r);
}

inline int evaluate(const fs::path& checkpoint, fs::path tasks, const fs::path& config,
                    const fs::path& out) {
  if (tasks.empty() && !config.empty()) tasks = load_run_config(config).tasks;
  if (tasks.empty()) throw ConfigError("evaluate needs --tasks or a config with eval.tasks");
  const auto task_list = eval::load_tasks(tasks);
  detail::read_checkpoint_manifest(checkpoint, "--checkpoint");
  const auto ck = load_checkpoint<float>(checkpoint);
  std::vector<eval::TaskResult> results;
  for (const auto& t : task_list) {
    results.push_back(eval::evaluate_task(ck.model, t));
    logger().info("{}: {} = {:.4f} over {} instances", t.name, eval::metric_name(t.metric),
                  results.back().value, results.back().n);
  }
  const auto text = eval::format_report(results);
  std::cout << text;
  if (!out.empty()) {
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    std::ofstream f(out, std::ios::binary | std::ios::trunc);
    if (!(f << text)) throw InputError("cannot write '" + out.string() + "'");
  }
  return kOk;
}

namespace detail {

inline std::string flops_table(const std::vector<std::pair<std::string, flops::CostReport>>& rows) {
  std::string out = fmt::format("{:<14} {:<12} {:>12} {:>12} {:>12} {:>14} {:>14} {:>14} {:>7}\n", "setting",
                                "method", "N_S", "N_T", "tokens", "train", "teacher_fwd", "total", "ratio");
  for (const auto& [name, r] : rows)
    out += fmt::format("{:<14} {:<12} {:>12.4g} {:>12} {:>12.4g} {:>14.4g} {:>14.4g} {:>14.4g} {:>6.3g}x\n", name,
                       flops::method_name(r.method), r.student_params,
                       r.teacher_params > 0 ? fmt::format("{:.4g}", r.teacher_params) : "-", r.tokens, r.train_flops,
                       r.teacher_forward_flops, r.total_flops, r.ratio_vs_teacher_free);
  return out;
}

inline std::string flops_csv(const std::vector<std::pair<std::string, flops::CostReport>>& rows) {
  std::string out =
      "setting,method,student_params,teacher_params,tokens,train_flops,teacher_forward_flops,total_flops,"
      "ratio_vs_teacher_free\n";
  for (const auto& [name, r] : rows)
    out += fmt::format("{},{},{:.17g},{},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}\n", name,
                       flops::method_name(r.method), r.student_params,
                       r.teacher_params > 0 ? fmt::format("{:.17g}", r.teacher_params) : "", r.tokens,
                       r.train_flops, r.teacher_forward_flops, r.total_flops, r.ratio_vs_teacher_free);
  return out;
}

}  // namespace detail

struct FlopsArgs {
  std::string method = "teacher_free";
  double student_params = 0, teacher_params = 0, tokens = 0;
  bool paper = false;
  fs::path run;
  fs::path csv;
};

inline int flops_command(const FlopsArgs& a) {
  std::vector<std::pair<std::string, flops::CostReport>> rows;
  if (!a.run.empty()) {
    // Integrate the recorded trace of a run with the per-step live layer count.
    const auto manifest = KeyValueFile::read(a.run / "manifest.txt");
    KeyValueFile model_kv;
    for (const auto& [k, v] : manifest.entries())
      if (k.starts_with("config.model.")) model_kv.set(k.substr(7), v);
    const auto config = read_model_config(model_kv);
    const auto trace = read_trace(a.run / "metrics.csv");
    std::optional<double> teacher;
    if (manifest.get_or("command", "") == "kd")
      teacher = static_cast<double>(param_count(read_model_config(
                                                    detail::read_checkpoint_manifest(
                                                        manifest.get("config.source.checkpoint"), "teacher")))
                                        .total);
    const double measured = flops::measure(trace, config, teacher, std::stoull(manifest.get_or("start_tokens", "0")));
    std::cout << fmt::format("measured cumulative FLOPs for {}: {:.6g}\n", a.run.string(), measured);
    return kOk;
  }
  if (a.paper) {
    for (const auto& p : flops::paper_settings()) {
      rows.emplace_back(p.name, flops::estimate(flops::Method::TeacherFree, p.student_params, std::nullopt, p.tokens));
      rows.emplace_back(p.name, flops::estimate(flops::Method::Kd, p.student_params, p.teacher_params, p.tokens));
    }
  } else {
    const auto m = flops::parse_method(a.method);
    std::optional<double> nt;
    if (a.teacher_params > 0) nt = a.teacher_params;
    rows.emplace_back("custom", flops::estimate(m, a.student_params, nt, a.tokens));
  }
  std::cout << detail::flops_table(rows) << "\n" << detail::flops_csv(rows);
  if (!a.csv.empty()) {
    std::ofstream f(a.csv, std::ios::binary | std::ios::trunc);
    if (!(f << detail::flops_csv(rows))) throw InputError("cannot write '" + a.csv.string() + "'");
  }
  return kOk;
}

inline int report_command(const std::vector<std::string>& runs, const fs::path& out) {
  std::vector<report::RunRecord> records;
  for (const auto& spec : runs) {
    const auto eq = spec.find('=');
    const fs::path dir = eq == std::string::npos ? fs::path(spec) : fs::path(spec.substr(eq + 1));
    const std::string label = eq == std::string::npos ? fs::path(spec).lexically_normal().filename().string()
                                                      : spec.substr(0, eq);
    if (!fs::is_regular_file(dir / "manifest.txt"))
      throw InputError("--run: '" + dir.string() + "' is not a run directory");
    records.push_back(report::load_run(label, dir));
  }
  report::write_report(records, out);
  logger().info("wrote runs.csv, ppl_vs_tokens.csv, location_ablation.csv, drop_gap.csv to {}", out.string());
  return kOk;
}

/// Parses argv and runs one subcommand; returns the process exit code.
inline int run(int argc, const char* const* argv) {
  CLI::App app{"shrinklm: teacher-free distillation workbench"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  TrainArgs ta;
  const auto add_train = [&](CLI::App* sub) {
    sub->add_option("--config", ta.config, "run config file")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", ta.seed, "seed for init, data order and sampling")->default_val(0);
    sub->add_option("--out", ta.out, "run directory")->required();
    sub->add_flag("--resume", ta.resume, "continue from the newest checkpoint in --out");
    sub->add_flag("--skip-complete", ta.skip_complete,
                  "exit successfully if --out already holds this exact run, finished");
    sub->add_option("--stop-after-tokens", ta.stop_after_tokens)->group("");  // simulated interruption
  };
  auto* pre = app.add_subcommand("pretrain", "train a freshly initialized model");
  add_train(pre);
  auto* dis = app.add_subcommand("distill", "truncation init + continued pretraining (no teacher)");
  add_train(dis);
  dis->add_option("--checkpoint", ta.source, "source model checkpoint")->required();
  auto* kdc = app.add_subcommand("kd", "knowledge-distillation baseline from a truncated teacher");
  add_train(kdc);
  kdc->add_option("--teacher", ta.source, "teacher checkpoint")->required();

  fs::path ev_ckpt, ev_tasks, ev_config, ev_out;
  auto* ev = app.add_subcommand("evaluate", "zero-shot multiple-choice evaluation");
  ev->add_option("--checkpoint", ev_ckpt, "model checkpoint")->required();
  ev->add_option("--tasks", ev_tasks, "task file (JSON Lines)");
  ev->add_option("--config", ev_config, "config providing eval.tasks");
  ev->add_option("--out", ev_out, "write the CSV report here too");

  FlopsArgs fa;
  auto* fl = app.add_subcommand("flops", "analytic training-compute estimate");
  fl->add_option("--method", fa.method, "teacher_free or kd");
  fl->add_option("--student-params", fa.student_params, "student parameter count N_S");
  fl->add_option("--teacher-params", fa.teacher_params, "teacher parameter count N_T (kd)");
  fl->add_option("--tokens", fa.tokens, "training tokens D");
  fl->add_flag("--paper", fa.paper, "the 300M and 1.1B settings");
  fl->add_option("--run", fa.run, "integrate a finished run's metrics.csv");
  fl->add_option("--csv", fa.csv, "also write the CSV to this file");

  std::vector<std::string> rp_runs;
  fs::path rp_out;
  auto* rp = app.add_subcommand("report", "merge run directories into comparison tables");
  rp->add_option("--run", rp_runs, "[label=]run directory (repeatable)")->required();
  rp->add_option("--out", rp_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInvalid;
  }

  try {
    if (*pre) return pretrain(ta);
    if (*dis) return distill(ta);
    if (*kdc) return kd(ta);
    if (*ev) return evaluate(ev_ckpt, ev_tasks, ev_config, ev_out);
    if (*fl) {
      if (!fa.paper && fa.run.empty() && (fa.student_params <= 0 || fa.tokens <= 0))
        throw ConfigError("flops needs --student-params and --tokens (or --paper / --run)");
      return flops_command(fa);
    }
    if (*rp) return report_command(rp_runs, rp_out);
  } catch (const ConfigError& e) {
    logger().error("{}", e.what());
    return kInvalid;
  } catch (const InputError& e) {
    logger().error("{}", e.what());
    return kInvalid;
  } catch (const UsageError& e) {
    logger().error("{}", e.what());
    return kInvalid;
  } catch (const NumericError& e) {
    logger().error("numeric failure: {}", e.what());
    return kNumeric;
  } catch (const std::exception& e) {
    logger().error("{}", e.what());
    return kFailure;
  }
  return kFailure;
}

}  // namespace shrinklm::cli
