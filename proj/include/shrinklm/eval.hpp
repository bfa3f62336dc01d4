#pragma once

// Zero-shot multiple-choice evaluation.
//
// A completion is scored as the sum of its token log-probabilities given the
// prompt. The scored sequence is [EOS] + prompt + completion: every training
// document follows an EOS, so EOS is the natural "start of text" context and
// lets an empty prompt score the completion unconditionally. The completion
// is the byte continuation of the prompt; no separator is inserted.
//
// Task files are JSON Lines, one task per line:
//   {"name": "...", "metric": "acc|len_norm_acc|pmi_dc|f1",
//    "domain_premise": "Answer:",            (optional, pmi_dc only)
//    "instances": [{"prompt": "...", "completions": ["...", "..."], "gold_index": 0}]}

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "shrinklm/data.hpp"
#include "shrinklm/errors.hpp"
#include "shrinklm/log.hpp"
#include "shrinklm/model.hpp"

namespace shrinklm::eval {

enum class Metric { Acc, LenNormAcc, PmiDc, F1 };

inline std::string_view metric_name(Metric m) {
  switch (m) {
    case Metric::Acc: return "acc";
    case Metric::LenNormAcc: return "len_norm_acc";
    case Metric::PmiDc: return "pmi_dc";
    case Metric::F1: return "f1";
  }
  return "?";
}

inline Metric parse_metric(std::string_view s) {
  for (auto m : {Metric::Acc, Metric::LenNormAcc, Metric::PmiDc, Metric::F1})
    if (metric_name(m) == s) return m;
  throw FormatError("unknown metric '" + std::string(s) + "' (expected acc, len_norm_acc, pmi_dc or f1)");
}

inline constexpr const char* kDefaultDomainPremise = "Answer:";

struct Instance {
  std::string prompt;
  std::vector<std::string> completions;
  std::size_t gold_index = 0;
};

struct Task {
  std::string name;
  Metric metric = Metric::Acc;
  std::string domain_premise = kDefaultDomainPremise;
  std::vector<Instance> instances;

  std::vector<std::string> violations() const {
    std::vector<std::string> v;
    if (name.empty()) v.push_back("task without a name");
    for (std::size_t i = 0; i < instances.size(); ++i) {
      const auto& in = instances[i];
      const auto where = "task '" + name + "' instance " + std::to_string(i);
      if (in.completions.size() < 2) v.push_back(where + ": needs at least 2 completions");
      if (in.gold_index >= in.completions.size()) v.push_back(where + ": gold_index out of range");
      for (const auto& c : in.completions)
        if (c.empty()) v.push_back(where + ": empty completion");
    }
    return v;
  }
};

struct ChoiceScore {
  double raw_logprob = 0;
  std::size_t char_len = 0;  // bytes of the completion
  std::optional<double> domain_logprob;
};

/// Sum of log p(continuation[i] | context, continuation[<i]). The context
/// must be non-empty; ids must lie in the model's vocabulary.
template <class T>
double sequence_logprob(const CausalLM<T>& model, std::span<const std::int32_t> context,
                        std::span<const std::int32_t> continuation) {
  if (context.empty()) throw UsageError("sequence_logprob: empty context");
  if (continuation.empty()) return 0.0;
  const std::size_t n = context.size() + continuation.size();
  if (n - 1 > model.config().context_len)
    throw DimensionError("sequence of " + std::to_string(n - 1) + " inputs exceeds context_len " +
                         std::to_string(model.config().context_len));
  TokenMatrix inputs{1, n - 1, {}};
  inputs.ids.assign(context.begin(), context.end());
  inputs.ids.insert(inputs.ids.end(), continuation.begin(), continuation.end() - 1);
  NoGradGuard guard;
  const auto logits = model.forward_logits(inputs);
  const auto data = logits.data();
  const std::size_t V = model.config().vocab_size;
  double total = 0;
  for (std::size_t j = 0; j < continuation.size(); ++j) {
    const std::size_t pos = context.size() - 1 + j;
    const auto row = data.subspan(pos * V, V);
    double mx = -INFINITY;
    for (auto v : row) mx = std::max(mx, static_cast<double>(v));
    double z = 0;
    for (auto v : row) z += std::exp(static_cast<double>(v) - mx);
    total += static_cast<double>(row[static_cast<std::size_t>(continuation[j])]) - mx - std::log(z);
  }
  return total;
}

inline std::vector<std::int32_t> context_ids(std::string_view prompt) {
  std::vector<std::int32_t> ids{ByteTokenizer::kEos};
  const auto p = ByteTokenizer::encode(prompt);
  ids.insert(ids.end(), p.begin(), p.end());
  return ids;
}

template <class T>
ChoiceScore score_completion(const CausalLM<T>& model, std::string_view prompt,
                             std::string_view completion,
                             std::optional<std::string_view> domain_premise = std::nullopt) {
  const auto c = ByteTokenizer::encode(completion);
  ChoiceScore s;
  s.char_len = completion.size();
  s.raw_logprob = sequence_logprob(model, context_ids(prompt), c);
  if (domain_premise) s.domain_logprob = sequence_logprob(model, context_ids(*domain_premise), c);
  return s;
}

struct Selection {
  std::size_t index = 0;
  bool tie = false;  // several completions shared the best score
};

inline double selection_score(const ChoiceScore& s, Metric metric) {
  switch (metric) {
    case Metric::LenNormAcc:
      return s.raw_logprob / static_cast<double>(s.char_len);
    case Metric::PmiDc:
      if (!s.domain_logprob) throw UsageError("pmi_dc selection needs the domain log-probability");
      return s.raw_logprob - *s.domain_logprob;
    case Metric::Acc:
    case Metric::F1:
      return s.raw_logprob;
  }
  return s.raw_logprob;
}

/// Argmax of the metric's score; ties go to the lowest index.
inline Selection select(std::span<const ChoiceScore> scores, Metric metric) {
  if (scores.empty()) throw UsageError("select: no scores");
  Selection best;
  double top = selection_score(scores[0], metric);
  for (std::size_t i = 1; i < scores.size(); ++i) {
    const double v = selection_score(scores[i], metric);
    if (v > top) {
      top = v;
      best = {i, false};
    } else if (v == top) {
      best.tie = true;
    }
  }
  return best;
}

struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

/// Binary F1 with index 1 as the positive class; 0 when undefined.
inline double f1_score(const Confusion& c) {
  const double denom = 2.0 * static_cast<double>(c.tp) + static_cast<double>(c.fp + c.fn);
  return denom == 0 ? 0.0 : 2.0 * static_cast<double>(c.tp) / denom;
}

struct TaskResult {
  std::string name;
  Metric metric = Metric::Acc;
  double value = 0;
  std::size_t n = 0;        // scored instances
  std::size_t skipped = 0;  // instances that did not fit the context
  std::size_t ties = 0;
  std::vector<std::size_t> predictions;  // per scored instance
};

/// Folds predictions into the task's metric value.
inline double aggregate(Metric metric, std::span<const std::size_t> predictions,
                        std::span<const std::size_t> gold) {
  if (predictions.empty()) throw UsageError("aggregate: no scored instances");
  if (metric == Metric::F1) {
    Confusion c;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
      const bool p = predictions[i] == 1, g = gold[i] == 1;
      c.tp += p && g;
      c.fp += p && !g;
      c.fn += !p && g;
      c.tn += !p && !g;
    }
    return f1_score(c);
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) correct += predictions[i] == gold[i];
  return static_cast<double>(correct) / static_cast<double>(predictions.size());
}

template <class T>
TaskResult evaluate_task(const CausalLM<T>& model, const Task& task) {
  throw_if_violations(task.violations());
  TaskResult r;
  r.name = task.name;
  r.metric = task.metric;
  std::vector<std::size_t> gold;
  for (std::size_t i = 0; i < task.instances.size(); ++i) {
    const auto& in = task.instances[i];
    std::vector<ChoiceScore> scores;
    try {
      for (const auto& c : in.completions)
        scores.push_back(score_completion(model, in.prompt, c,
                                          task.metric == Metric::PmiDc
                                              ? std::optional<std::string_view>(task.domain_premise)
                                              : std::nullopt));
    } catch (const DimensionError& e) {
      logger().warn("task '{}' instance {} skipped: {}", task.name, i, e.what());
      ++r.skipped;
      continue;
    }
    const auto sel = select(scores, task.metric);
    if (sel.tie) {
      logger().info("task '{}' instance {}: tied scores, picked index {}", task.name, i, sel.index);
      ++r.ties;
    }
    r.predictions.push_back(sel.index);
    gold.push_back(in.gold_index);
  }
  if (r.predictions.empty())
    throw InputError("task '" + task.name + "' has no instance that fits the model context");
  r.n = r.predictions.size();
  r.value = aggregate(task.metric, r.predictions, gold);
  return r;
}

/// Unweighted mean of per-task values.
inline double suite_mean(std::span<const TaskResult> results) {
  if (results.empty()) throw UsageError("suite_mean: no tasks");
  double s = 0;
  for (const auto& r : results) s += r.value;
  return s / static_cast<double>(results.size());
}

inline Task parse_task(const nlohmann::json& j) {
  Task t;
  try {
    t.name = j.at("name").get<std::string>();
    t.metric = parse_metric(j.at("metric").get<std::string>());
    t.domain_premise = j.value("domain_premise", std::string(kDefaultDomainPremise));
    for (const auto& ji : j.at("instances")) {
      Instance in;
      in.prompt = ji.at("prompt").get<std::string>();
      in.completions = ji.at("completions").get<std::vector<std::string>>();
      const auto gold = ji.at("gold_index").get<long long>();
      if (gold < 0) throw FormatError("negative gold_index");
      in.gold_index = static_cast<std::size_t>(gold);
      t.instances.push_back(std::move(in));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed task record: ") + e.what());
  }
  throw_if_violations(t.violations());
  return t;
}

inline std::vector<Task> load_tasks(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open task file '" + path.string() + "'");
  std::vector<Task> tasks;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      tasks.push_back(parse_task(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (tasks.empty()) throw InputError("task file '" + path.string() + "' has no tasks");
  return tasks;
}

/// CSV report: task,metric,value,n,skipped, then a "mean" row.
inline std::string format_report(std::span<const TaskResult> results) {
  std::string out = "task,metric,value,n,skipped\n";
  std::size_t n = 0, skipped = 0;
  for (const auto& r : results) {
    out += fmt::format("{},{},{:.6f},{},{}\n", r.name, metric_name(r.metric), r.value, r.n, r.skipped);
    n += r.n;
    skipped += r.skipped;
  }
  out += fmt::format("mean,avg,{:.6f},{},{}\n", suite_mean(results), n, skipped);
  return out;
}

}  // namespace shrinklm::eval
