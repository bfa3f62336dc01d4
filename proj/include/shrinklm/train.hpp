#pragma once

// The training loop shared by pretraining, teacher-free distillation and KD.
//
// Every schedule is keyed to the token clock: the learning rate of a step is
// evaluated at the clock value after that step, layer drops fire before the
// first step whose starting clock has reached the drop time, and periodic
// evaluation/checkpointing trigger when the clock crosses a multiple of the
// configured interval.
//
// Run directory (when out_dir is set):
//   manifest.txt            command, resolved config, seed, version, clock, status
//   metrics.csv             one row per step
//   eval.csv                validation passes
//   checkpoints/<tokens>/   periodic checkpoints (newest few kept)
//   final/                  checkpoint at the end of the run

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "shrinklm/checkpoint.hpp"
#include "shrinklm/data.hpp"
#include "shrinklm/flops.hpp"
#include "shrinklm/log.hpp"
#include "shrinklm/losses.hpp"
#include "shrinklm/model.hpp"
#include "shrinklm/optim.hpp"
#include "shrinklm/trace.hpp"

namespace shrinklm {

inline constexpr const char* kVersion = "shrinklm 0.1.0";

struct TrainConfig {
  StreamConfig stream;
  std::uint64_t total_tokens = 0;  // run budget on the clock
  double peak_lr = 3e-4;
  std::uint64_t warmup_tokens = 0;
  double final_lr_fraction = 0.1;
  LionConfig lion;
  std::uint64_t eval_every_tokens = 0;  // 0: evaluate only at start, drops and end
  std::size_t eval_batches = 4;
  std::uint64_t checkpoint_every_tokens = 0;
  std::size_t checkpoints_kept = 2;
  std::uint64_t log_every_steps = 50;

  LrSchedule schedule() const {
    return {peak_lr, warmup_tokens, total_tokens, final_lr_fraction};
  }
  std::uint64_t batch_tokens() const { return stream.batch_size * stream.seq_len; }

  std::vector<std::string> violations() const {
    std::vector<std::string> v = schedule().violations();
    auto lion_v = lion.violations();
    v.insert(v.end(), lion_v.begin(), lion_v.end());
    if (stream.batch_size == 0) v.push_back("data.batch_size must be positive");
    if (stream.seq_len < 1) v.push_back("data.seq_len must be positive");
    if (total_tokens && stream.batch_size && stream.seq_len && total_tokens < batch_tokens())
      v.push_back("token budget " + std::to_string(total_tokens) + " is smaller than one batch (" +
                  std::to_string(batch_tokens()) + " tokens)");
    if (eval_batches == 0) v.push_back("eval.batches must be positive");
    return v;
  }
};

/// Layers scheduled for removal, by index in the model the run starts from.
/// Drop j (ascending index order) fires at pre_drop_tokens + j * gap_tokens.
struct DropSchedule {
  std::vector<std::size_t> indices;
  std::uint64_t pre_drop_tokens = 0;
  std::uint64_t gap_tokens = 0;

  std::uint64_t drop_time(std::size_t j) const { return pre_drop_tokens + j * gap_tokens; }
  std::uint64_t last_drop_time() const {
    return indices.empty() ? 0 : drop_time(indices.size() - 1);
  }

  std::vector<std::string> violations(std::size_t n_layers, std::uint64_t total_tokens) const {
    std::vector<std::string> v;
    for (auto i : indices)
      if (i == 0 || i + 1 >= n_layers)
        v.push_back("layer " + std::to_string(i) + " is not an interior layer of a " +
                    std::to_string(n_layers) + "-layer model");
    if (!std::is_sorted(indices.begin(), indices.end()) ||
        std::adjacent_find(indices.begin(), indices.end()) != indices.end())
      v.push_back("drop indices must be sorted and distinct");
    if (!indices.empty() && total_tokens <= gap_tokens * indices.size())
      v.push_back("continue budget " + std::to_string(total_tokens) +
                  " must exceed drop_gap_tokens * k_remove = " +
                  std::to_string(gap_tokens * indices.size()));
    if (!indices.empty() && last_drop_time() >= total_tokens)
      v.push_back("last layer drop at " + std::to_string(last_drop_time()) +
                  " tokens (pre_drop_tokens + gap * (k-1)) falls at or after the budget end " +
                  std::to_string(total_tokens));
    return v;
  }

  /// Index of the j-th scheduled layer once `done` drops (all of lower
  /// original index) have happened; requires j >= done.
  std::size_t current_index(std::size_t j, std::size_t done) const { return indices[j] - done; }
};

template <class T>
struct Teacher {
  const CausalLM<T>* model = nullptr;
  double temperature = 2.0;
  double alpha = 0.5;  // loss = alpha * lm + (1 - alpha) * kl
};

template <class T>
struct RunSpec {
  std::string command = "pretrain";
  std::uint64_t seed = 0;
  TrainConfig train;
  std::shared_ptr<const Corpus> corpus;
  std::shared_ptr<const Corpus> validation;  // optional
  DropSchedule drops;
  std::optional<Teacher<T>> teacher;
  std::filesystem::path out_dir;             // empty: keep everything in memory
  KeyValueFile manifest_config;              // resolved config echoed into manifest.txt
  std::map<std::string, std::string> extra_state;  // copied into every checkpoint
  // Stops the run (as if interrupted) once the clock reaches this value; 0 = off.
  std::uint64_t interrupt_after_tokens = 0;
};

template <class T>
struct RunResult {
  CausalLM<T> model;
  std::vector<TraceRow> trace;  // rows produced by this invocation
  std::vector<EvalRow> evals;
  std::uint64_t tokens = 0;
  std::uint64_t steps = 0;
  bool completed = false;
};

/// Mean next-token loss over fixed batches.
template <class T>
double mean_loss(const CausalLM<T>& model, const std::vector<TokenMatrix>& batches) {
  NoGradGuard guard;
  double total = 0;
  for (const auto& b : batches) total += static_cast<double>(lm_loss(model, b).item());
  return total / static_cast<double>(batches.size());
}

/// The first `count` batches of an unshuffled pass over `corpus`.
inline std::vector<TokenMatrix> validation_batches(std::shared_ptr<const Corpus> corpus,
                                                   StreamConfig stream, std::size_t count) {
  stream.shuffle = false;
  BatchStream s(std::move(corpus), stream, 0);
  count = std::min(count, s.batches_per_epoch());
  std::vector<TokenMatrix> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(s.next().ids);
  return out;
}

inline double perplexity(double loss) { return std::exp(loss); }

namespace detail {

inline std::string fmt_double(double v) { return fmt::format("{:.17g}", v); }

inline double parse_state_double(const std::map<std::string, std::string>& s, const std::string& k) {
  auto it = s.find(k);
  if (it == s.end()) throw FormatError("checkpoint state lacks '" + k + "'");
  return std::stod(it->second);
}

inline std::uint64_t parse_state_u64(const std::map<std::string, std::string>& s, const std::string& k) {
  auto it = s.find(k);
  if (it == s.end()) throw FormatError("checkpoint state lacks '" + k + "'");
  return std::stoull(it->second);
}

/// Appends rows to a CSV, creating it with a header if needed.
class CsvAppender {
 public:
  CsvAppender() = default;
  CsvAppender(const std::filesystem::path& path, const char* header, bool fresh) {
    const bool need_header = fresh || !std::filesystem::exists(path);
    out_.open(path, fresh ? std::ios::trunc : std::ios::app);
    if (!out_) throw InputError("cannot write '" + path.string() + "'");
    if (need_header) out_ << header << '\n';
  }
  template <class Row>
  void add(const Row& r) {
    if (out_.is_open()) out_ << format_row(r) << '\n';
  }
  void flush() {
    if (out_.is_open()) out_.flush();
  }

 private:
  std::ofstream out_;
};

/// Rewrites a CSV keeping only rows whose token clock is <= `tokens`.
template <class Row, class Reader>
void truncate_csv(const std::filesystem::path& path, const char* header, Reader read,
                  std::uint64_t tokens) {
  if (!std::filesystem::exists(path)) return;
  std::vector<Row> kept;
  for (const auto& r : read(path))
    if (r.tokens <= tokens) kept.push_back(r);
  write_csv(path, header, kept);
}

}  // namespace detail

template <class T>
class Trainer {
 public:
  Trainer(CausalLM<T> model, const RunSpec<T>& spec, const Checkpoint<T>* resume = nullptr)
      : spec_(spec), model_(std::move(model)), optimizer_(spec.train.lion),
        schedule_(spec.train.schedule()) {
    std::vector<std::string> v = spec.train.violations();
    const std::size_t start_layers = resume ? resume_layers(*resume) : model_.n_layers();
    auto dv = spec.drops.violations(start_layers, spec.train.total_tokens);
    v.insert(v.end(), dv.begin(), dv.end());
    if (spec.teacher) {
      if (!spec.teacher->model) v.push_back("kd run without a teacher model");
      if (!(spec.teacher->temperature > 0)) v.push_back("kd.temperature must be positive");
      if (!(spec.teacher->alpha >= 0 && spec.teacher->alpha <= 1))
        v.push_back("kd.alpha must lie in [0, 1]");
    }
    if (!spec.corpus) v.push_back("no training corpus");
    throw_if_violations(v);

    if (spec.teacher) teacher_params_ = static_cast<double>(spec.teacher->model->parameter_total());
    if (resume) restore(*resume);
    for (std::size_t j = drops_done_; j < spec_.drops.indices.size(); ++j)
      model_.layers()[spec_.drops.current_index(j, drops_done_)].set_trainable(false);
    if (resume) optimizer_.import_state(model_.named_parameters(), resume->optimizer);
  }

  RunResult<T> run() {
    namespace fs = std::filesystem;
    const auto& cfg = spec_.train;
    const bool writing = !spec_.out_dir.empty();
    const bool fresh = clock_.tokens() == 0;
    if (writing) open_outputs(fresh);

    std::vector<TokenMatrix> val;
    if (spec_.validation)
      val = validation_batches(spec_.validation, cfg.stream, cfg.eval_batches);

    BatchStream stream(spec_.corpus, cfg.stream, derive_seed(spec_.seed, 0xda7a));
    stream.seek(clock_.steps());
    const std::uint64_t batch_tokens = cfg.batch_tokens();

    RunResult<T> result;
    if (fresh) evaluate(val, spec_.command == "distill" ? "source" : "start", result);
    apply_due_drops(val, result);

    auto started = std::chrono::steady_clock::now();
    std::uint64_t steps_here = 0;
    while (clock_.tokens() < cfg.total_tokens) {
      if (spec_.interrupt_after_tokens && clock_.tokens() >= spec_.interrupt_after_tokens) break;
      apply_due_drops(val, result);

      const auto batch = stream.next();
      const std::uint64_t end_tokens = clock_.tokens() + batch_tokens;
      const double lr = schedule_.at(end_tokens);
      TraceRow row = step(batch.ids, lr);
      clock_.advance(batch_tokens);
      ++steps_here;

      flops_ += flops::train_flops(live_params(), static_cast<double>(batch_tokens));
      if (teacher_params_) flops_ += flops::forward_flops(*teacher_params_, static_cast<double>(batch_tokens));
      row.tokens = clock_.tokens();
      row.lr = lr;
      row.layers_live = model_.n_layers();
      row.cumulative_flops = flops_;
      metrics_.add(row);
      result.trace.push_back(row);

      if (cfg.log_every_steps && clock_.steps() % cfg.log_every_steps == 0) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        logger().info("{} step {} tokens {} loss {:.4f}{} lr {:.3g} layers {} ({:.0f} tok/s)",
                      spec_.command, clock_.steps(), clock_.tokens(), row.lm_loss,
                      row.has_kl() ? fmt::format(" kl {:.4f}", row.kl_loss) : std::string(), lr,
                      model_.n_layers(), static_cast<double>(steps_here * batch_tokens) / secs);
        metrics_.flush();
      }
      if (crossed(cfg.eval_every_tokens, batch_tokens) && clock_.tokens() < cfg.total_tokens)
        evaluate(val, "periodic", result);
      if (writing && crossed(cfg.checkpoint_every_tokens, batch_tokens) &&
          clock_.tokens() < cfg.total_tokens)
        save_periodic();
    }

    result.completed = clock_.tokens() >= cfg.total_tokens;
    if (result.completed) {
      evaluate(val, "final", result);
      if (writing) save_checkpoint_to(spec_.out_dir / "final");
    }
    metrics_.flush();
    evals_.flush();
    if (writing) finish_manifest(result.completed ? "complete" : "incomplete");
    result.tokens = clock_.tokens();
    result.steps = clock_.steps();
    result.model = std::move(model_);
    return result;
  }

  /// Checkpoint state describing where the run is.
  std::map<std::string, std::string> state() const {
    auto s = spec_.extra_state;
    s["command"] = spec_.command;
    s["seed"] = std::to_string(spec_.seed);
    s["tokens"] = std::to_string(clock_.tokens());
    s["steps"] = std::to_string(clock_.steps());
    s["drops_done"] = std::to_string(drops_done_);
    s["cumulative_flops"] = detail::fmt_double(flops_);
    s["peak_lr"] = detail::fmt_double(spec_.train.peak_lr);
    return s;
  }

  /// Writes a resumable checkpoint of the current run state.
  void save_checkpoint_to(const std::filesystem::path& dir) const {
    const auto params = model_.named_parameters();
    save_checkpoint(dir, model_, optimizer_.export_state(params), state());
  }

 private:
  std::size_t resume_layers(const Checkpoint<T>& ck) const {
    // The schedule is expressed against the model the run started from.
    const auto done = detail::parse_state_u64(ck.state, "drops_done");
    return ck.model.n_layers() + static_cast<std::size_t>(done);
  }

  void restore(const Checkpoint<T>& ck) {
    auto cmd = ck.state.find("command");
    if (cmd == ck.state.end() || cmd->second != spec_.command)
      throw UsageError("cannot resume a '" + (cmd == ck.state.end() ? std::string("?") : cmd->second) +
                       "' checkpoint as a '" + spec_.command + "' run");
    if (detail::parse_state_u64(ck.state, "seed") != spec_.seed)
      throw UsageError("resume seed differs from the checkpoint's seed");
    clock_ = TokenBudgetClock(detail::parse_state_u64(ck.state, "tokens"),
                              detail::parse_state_u64(ck.state, "steps"));
    drops_done_ = static_cast<std::size_t>(detail::parse_state_u64(ck.state, "drops_done"));
    flops_ = detail::parse_state_double(ck.state, "cumulative_flops");
    if (clock_.steps() * spec_.train.batch_tokens() != clock_.tokens())
      throw UsageError("checkpoint clock does not match the configured batch shape");
  }

  double live_params() const {
    auto c = model_.config();
    return static_cast<double>(param_count(c).total);
  }

  bool crossed(std::uint64_t every, std::uint64_t batch_tokens) const {
    if (!every) return false;
    return clock_.tokens() / every != (clock_.tokens() - batch_tokens) / every;
  }

  TraceRow step(const TokenMatrix& batch, double lr) {
    auto [inputs, targets] = split_inputs_targets(batch);
    auto logits = model_.forward_logits(inputs);
    auto lm = cross_entropy_lm(logits, targets);
    TraceRow row;
    row.lm_loss = static_cast<double>(lm.item());
    Tensor<T> loss = lm;
    if (spec_.teacher) {
      Tensor<T> teacher_logits;
      {
        NoGradGuard guard;
        teacher_logits = spec_.teacher->model->forward_logits(inputs);
      }
      auto kl = kl_teacher_student(teacher_logits, logits, static_cast<T>(spec_.teacher->temperature));
      row.kl_loss = static_cast<double>(kl.item());
      const double a = spec_.teacher->alpha;
      loss = add(scale(lm, static_cast<T>(a)), scale(kl, static_cast<T>(1.0 - a)));
    }
    row.ppl = perplexity(row.lm_loss);
    const double total = static_cast<double>(loss.item());
    if (!std::isfinite(total))
      throw NumericError(fmt::format("non-finite loss ({}) at step {}, {} tokens", total,
                                     clock_.steps() + 1, clock_.tokens()));
    backward(loss);
    const auto params = model_.named_parameters();
    optimizer_.step(params, lr);
    for (const auto& [name, t] : params) {
      Tensor<T> p = t;
      p.zero_grad();
    }
    return row;
  }

  void apply_due_drops(const std::vector<TokenMatrix>& val, RunResult<T>& result) {
    const auto& d = spec_.drops;
    bool dropped = false;
    while (drops_done_ < d.indices.size() && clock_.tokens() >= d.drop_time(drops_done_)) {
      const std::size_t at = d.current_index(drops_done_, drops_done_);
      logger().info("{}: dropping layer {} (originally {}) at {} tokens", spec_.command, at,
                    d.indices[drops_done_], clock_.tokens());
      const std::vector<std::size_t> one{at};
      model_.remove_layers(one);
      ++drops_done_;
      dropped = true;
    }
    if (!dropped) return;
    optimizer_.retain(model_.named_parameters());
    if (drops_done_ == d.indices.size()) evaluate(val, "post_drop", result);
  }

  void evaluate(const std::vector<TokenMatrix>& val, const char* phase, RunResult<T>& result) {
    if (val.empty()) return;
    EvalRow r;
    r.tokens = clock_.tokens();
    r.phase = phase;
    r.val_loss = mean_loss(model_, val);
    r.val_ppl = perplexity(r.val_loss);
    r.layers_live = model_.n_layers();
    logger().info("{} eval [{}] tokens {} val_loss {:.4f} ppl {:.3f} layers {}", spec_.command,
                  phase, r.tokens, r.val_loss, r.val_ppl, r.layers_live);
    result.evals.push_back(r);
    evals_.add(r);
    evals_.flush();
  }

  void open_outputs(bool fresh) {
    namespace fs = std::filesystem;
    fs::create_directories(spec_.out_dir);
    const auto metrics = spec_.out_dir / "metrics.csv", evals = spec_.out_dir / "eval.csv";
    if (!fresh) {
      detail::truncate_csv<TraceRow>(metrics, kTraceHeader, read_trace, clock_.tokens());
      detail::truncate_csv<EvalRow>(evals, kEvalHeader, read_eval_trace, clock_.tokens());
    }
    metrics_ = detail::CsvAppender(metrics, kTraceHeader, fresh);
    evals_ = detail::CsvAppender(evals, kEvalHeader, fresh);
    start_tokens_ = clock_.tokens();
    write_manifest("incomplete", fresh);
  }

  void write_manifest(const std::string& status, bool fresh) {
    KeyValueFile kv;
    const auto path = spec_.out_dir / "manifest.txt";
    if (!fresh && std::filesystem::exists(path)) kv = KeyValueFile::read(path);
    kv.set("command", spec_.command);
    kv.set("seed", std::to_string(spec_.seed));
    kv.set("version", kVersion);
    if (fresh || !kv.has("start_tokens")) kv.set("start_tokens", std::to_string(start_tokens_));
    kv.set("end_tokens", std::to_string(clock_.tokens()));
    kv.set("status", status);
    for (const auto& [k, v] : spec_.manifest_config.entries()) kv.set("config." + k, v);
    kv.write(path);
  }

  void finish_manifest(const std::string& status) { write_manifest(status, false); }

  void save_periodic() {
    namespace fs = std::filesystem;
    const auto dir = spec_.out_dir / "checkpoints";
    save_checkpoint_to(dir / fmt::format("{:012}", clock_.tokens()));
    std::vector<fs::path> all;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_directory() && !e.path().string().ends_with(".partial")) all.push_back(e.path());
    std::sort(all.begin(), all.end());
    while (all.size() > spec_.train.checkpoints_kept) {
      fs::remove_all(all.front());
      all.erase(all.begin());
    }
    write_manifest("incomplete", false);
  }

  RunSpec<T> spec_;
  CausalLM<T> model_;
  Lion<T> optimizer_;
  LrSchedule schedule_;
  TokenBudgetClock clock_;
  std::size_t drops_done_ = 0;
  double flops_ = 0;
  std::optional<double> teacher_params_;
  std::uint64_t start_tokens_ = 0;
  detail::CsvAppender metrics_, evals_;
};

/// Newest periodic checkpoint of a run directory, if any.
inline std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& run_dir) {
  namespace fs = std::filesystem;
  const auto dir = run_dir / "checkpoints";
  if (!fs::exists(dir)) return std::nullopt;
  std::optional<fs::path> best;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory() && !e.path().string().ends_with(".partial") &&
        (!best || e.path() > *best))
      best = e.path();
  return best;
}

}  // namespace shrinklm
