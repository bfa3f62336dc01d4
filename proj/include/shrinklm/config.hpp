#pragma once

// Run configuration files: flat key=value lines grouped under [section]
// headers, '#' comments, no nesting.
//
//   [model]   d_model n_heads n_layers d_ff vocab_size context_len tie_embeddings
//   [data]    train validation batch_size seq_len shuffle
//   [optim]   peak_lr warmup_tokens final_lr_fraction beta1 beta2 weight_decay
//   [train]   total_tokens log_every_steps checkpoint_every_tokens checkpoints_kept
//   [distill] layout k_remove drop_gap_tokens pre_drop_tokens lr_scale
//   [kd]      temperature alpha
//   [eval]    every_tokens batches tasks
//
// Every key has a default. Parsing collects all problems (unknown sections or
// keys, malformed values, violated constraints) and reports them together.
// Relative data paths resolve against $SHRINKLM_CORPUS_ROOT when it is set and
// against the config file's directory otherwise.

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "shrinklm/checkpoint.hpp"
#include "shrinklm/distill.hpp"
#include "shrinklm/errors.hpp"
#include "shrinklm/layout.hpp"
#include "shrinklm/model.hpp"
#include "shrinklm/train.hpp"

namespace shrinklm {

inline constexpr const char* kCorpusRootEnv = "SHRINKLM_CORPUS_ROOT";

struct DistillSection {
  Layout layout = Layout::Input;
  std::size_t k_remove = 0;
  std::uint64_t drop_gap_tokens = 0;
  std::optional<std::uint64_t> pre_drop_tokens;
  double lr_scale = 0.1;  // continued-pretraining peak LR relative to the source run's
};

struct KdSection {
  double temperature = 2.0;
  double alpha = 0.5;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::filesystem::path train_corpus;
  std::filesystem::path validation_corpus;  // empty: no validation passes
  DistillSection distill;
  KdSection kd;
  std::filesystem::path tasks;  // evaluation task file, optional

  /// Canonical text form; parsing it yields the same RunConfig.
  std::string str() const;
  /// Flat "section.key" view for run manifests.
  KeyValueFile flat() const;
};

namespace detail {

class IniReader {
 public:
  IniReader(const std::string& text, const std::string& origin) : origin_(origin) {
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto where = origin + ":" + std::to_string(lineno);
      line = trim(line);
      if (line.empty() || line[0] == '#' || line[0] == ';') continue;
      if (line.front() == '[') {
        if (line.back() != ']') {
          errors.push_back(where + ": unterminated section header");
          continue;
        }
        section = trim(line.substr(1, line.size() - 2));
        if (!kKnown.contains(section)) errors.push_back(where + ": unknown section [" + section + "]");
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        errors.push_back(where + ": expected key = value");
        continue;
      }
      if (section.empty()) {
        errors.push_back(where + ": key outside any section");
        continue;
      }
      const auto key = section + "." + trim(line.substr(0, eq));
      if (values_.contains(key)) errors.push_back(where + ": duplicate key " + key);
      values_[key] = {trim(line.substr(eq + 1)), where};
    }
  }

  template <class V>
  void read(const std::string& key, V& out) {
    const auto it = values_.find(key);
    if (it == values_.end()) return;
    it->second.used = true;
    if (!convert(it->second.text, out))
      errors.push_back(it->second.where + ": " + key + " = '" + it->second.text + "' is not a valid " +
                       type_name<V>());
  }

  std::optional<std::string> raw(const std::string& key) {
    const auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    it->second.used = true;
    return it->second.text;
  }

  void report_unused() {
    for (const auto& [key, v] : values_) {
      const auto section = key.substr(0, key.find('.'));
      if (!v.used && kKnown.contains(section)) errors.push_back(v.where + ": unknown key " + key);
    }
  }

  std::vector<std::string> errors;

 private:
  struct Value {
    std::string text, where;
    bool used = false;
  };

  inline static const std::set<std::string> kKnown{"model", "data", "optim", "train",
                                                   "distill", "kd", "eval"};

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  }

  static bool convert(const std::string& s, std::string& out) {
    out = s;
    return true;
  }
  static bool convert(const std::string& s, bool& out) {
    if (s == "true" || s == "1") return out = true, true;
    if (s == "false" || s == "0") return out = false, true;
    return false;
  }
  static bool convert(const std::string& s, double& out) {
    const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
    return r.ec == std::errc() && r.ptr == s.data() + s.size();
  }
  template <class U>
    requires std::is_unsigned_v<U>
  static bool convert(const std::string& s, U& out) {
    // Accept plain integers and exact scientific forms such as 20e6.
    std::uint64_t v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec == std::errc() && r.ptr == s.data() + s.size()) {
      out = static_cast<U>(v);
      return true;
    }
    double d = 0;
    if (!convert(s, d) || d < 0 || d > 1.8e19 || d != std::floor(d)) return false;
    out = static_cast<U>(d);
    return true;
  }

  template <class V>
  static const char* type_name() {
    if constexpr (std::is_same_v<V, bool>) return "boolean (true/false)";
    else if constexpr (std::is_same_v<V, double>) return "number";
    else if constexpr (std::is_unsigned_v<V>) return "non-negative integer";
    else return "string";
  }

  std::string origin_;
  std::map<std::string, Value> values_;
};

inline std::filesystem::path resolve_data_path(const std::string& value,
                                               const std::filesystem::path& config_dir) {
  if (value.empty()) return {};
  const std::filesystem::path p(value);
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv(kCorpusRootEnv); root && *root)
    return std::filesystem::absolute(std::filesystem::path(root) / p).lexically_normal();
  return std::filesystem::absolute(config_dir / p).lexically_normal();
}

inline std::string fmt_number(double v) { return fmt::format("{}", v); }

}  // namespace detail

/// Parses config text. `config_dir` anchors relative data paths.
inline RunConfig parse_run_config(const std::string& text, const std::string& origin = "<config>",
                                  const std::filesystem::path& config_dir = ".") {
  detail::IniReader ini(text, origin);
  RunConfig c;
  auto& m = c.model;
  ini.read("model.d_model", m.d_model);
  ini.read("model.n_heads", m.n_heads);
  ini.read("model.n_layers", m.n_layers);
  ini.read("model.d_ff", m.d_ff);
  ini.read("model.vocab_size", m.vocab_size);
  ini.read("model.context_len", m.context_len);
  ini.read("model.tie_embeddings", m.tie_embeddings);

  auto& t = c.train;
  t.stream.seq_len = m.context_len;
  std::string train_path, val_path, tasks_path;
  ini.read("data.train", train_path);
  ini.read("data.validation", val_path);
  ini.read("data.batch_size", t.stream.batch_size);
  ini.read("data.seq_len", t.stream.seq_len);
  ini.read("data.shuffle", t.stream.shuffle);

  ini.read("optim.peak_lr", t.peak_lr);
  ini.read("optim.warmup_tokens", t.warmup_tokens);
  ini.read("optim.final_lr_fraction", t.final_lr_fraction);
  ini.read("optim.beta1", t.lion.beta1);
  ini.read("optim.beta2", t.lion.beta2);
  ini.read("optim.weight_decay", t.lion.weight_decay);

  ini.read("train.total_tokens", t.total_tokens);
  ini.read("train.log_every_steps", t.log_every_steps);
  ini.read("train.checkpoint_every_tokens", t.checkpoint_every_tokens);
  ini.read("train.checkpoints_kept", t.checkpoints_kept);

  if (auto layout = ini.raw("distill.layout")) {
    try {
      c.distill.layout = parse_layout(*layout);
    } catch (const ConfigError& e) {
      ini.errors.push_back(e.violations().front());
    }
  }
  ini.read("distill.k_remove", c.distill.k_remove);
  ini.read("distill.drop_gap_tokens", c.distill.drop_gap_tokens);
  if (ini.raw("distill.pre_drop_tokens")) {
    std::uint64_t pre = 0;
    ini.read("distill.pre_drop_tokens", pre);
    c.distill.pre_drop_tokens = pre;
  }
  ini.read("distill.lr_scale", c.distill.lr_scale);

  ini.read("kd.temperature", c.kd.temperature);
  ini.read("kd.alpha", c.kd.alpha);

  ini.read("eval.every_tokens", t.eval_every_tokens);
  ini.read("eval.batches", t.eval_batches);
  ini.read("eval.tasks", tasks_path);
  ini.report_unused();

  c.train_corpus = detail::resolve_data_path(train_path, config_dir);
  c.validation_corpus = detail::resolve_data_path(val_path, config_dir);
  c.tasks = detail::resolve_data_path(tasks_path, config_dir);

  auto v = ini.errors;
  for (auto&& s : m.violations()) v.push_back(std::move(s));
  for (auto&& s : t.violations()) v.push_back(std::move(s));
  if (t.total_tokens == 0) v.push_back("train.total_tokens must be positive");
  if (t.stream.seq_len > m.context_len)
    v.push_back("data.seq_len (" + std::to_string(t.stream.seq_len) + ") exceeds model.context_len (" +
                std::to_string(m.context_len) + ")");
  if (m.vocab_size < ByteTokenizer::kVocabSize)
    v.push_back("model.vocab_size must be at least " + std::to_string(ByteTokenizer::kVocabSize) +
                " for the byte tokenizer");
  if (!(c.distill.lr_scale > 0)) v.push_back("distill.lr_scale must be positive");
  if (!(c.kd.temperature > 0)) v.push_back("kd.temperature must be positive");
  if (!(c.kd.alpha >= 0 && c.kd.alpha <= 1)) v.push_back("kd.alpha must lie in [0, 1]");
  throw_if_violations(std::move(v));
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open config '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str(), path.string(), path.parent_path().empty() ? "." : path.parent_path());
}

inline KeyValueFile RunConfig::flat() const {
  using detail::fmt_number;
  KeyValueFile kv;
  kv.set("model.d_model", std::to_string(model.d_model));
  kv.set("model.n_heads", std::to_string(model.n_heads));
  kv.set("model.n_layers", std::to_string(model.n_layers));
  kv.set("model.d_ff", std::to_string(model.ffn_width()));
  kv.set("model.vocab_size", std::to_string(model.vocab_size));
  kv.set("model.context_len", std::to_string(model.context_len));
  kv.set("model.tie_embeddings", model.tie_embeddings ? "true" : "false");
  kv.set("data.train", train_corpus.string());
  kv.set("data.validation", validation_corpus.string());
  kv.set("data.batch_size", std::to_string(train.stream.batch_size));
  kv.set("data.seq_len", std::to_string(train.stream.seq_len));
  kv.set("data.shuffle", train.stream.shuffle ? "true" : "false");
  kv.set("optim.peak_lr", fmt_number(train.peak_lr));
  kv.set("optim.warmup_tokens", std::to_string(train.warmup_tokens));
  kv.set("optim.final_lr_fraction", fmt_number(train.final_lr_fraction));
  kv.set("optim.beta1", fmt_number(train.lion.beta1));
  kv.set("optim.beta2", fmt_number(train.lion.beta2));
  kv.set("optim.weight_decay", fmt_number(train.lion.weight_decay));
  kv.set("train.total_tokens", std::to_string(train.total_tokens));
  kv.set("train.log_every_steps", std::to_string(train.log_every_steps));
  kv.set("train.checkpoint_every_tokens", std::to_string(train.checkpoint_every_tokens));
  kv.set("train.checkpoints_kept", std::to_string(train.checkpoints_kept));
  kv.set("distill.layout", std::string(layout_name(distill.layout)));
  kv.set("distill.k_remove", std::to_string(distill.k_remove));
  kv.set("distill.drop_gap_tokens", std::to_string(distill.drop_gap_tokens));
  if (distill.pre_drop_tokens) kv.set("distill.pre_drop_tokens", std::to_string(*distill.pre_drop_tokens));
  kv.set("distill.lr_scale", fmt_number(distill.lr_scale));
  kv.set("kd.temperature", fmt_number(kd.temperature));
  kv.set("kd.alpha", fmt_number(kd.alpha));
  kv.set("eval.every_tokens", std::to_string(train.eval_every_tokens));
  kv.set("eval.batches", std::to_string(train.eval_batches));
  kv.set("eval.tasks", tasks.string());
  return kv;
}

inline std::string RunConfig::str() const {
  std::string out, section;
  const auto kv = flat();
  for (const auto& [key, value] : kv.entries()) {
    const auto dot = key.find('.');
    if (key.substr(0, dot) != section) {
      section = key.substr(0, dot);
      out += (out.empty() ? "[" : "\n[") + section + "]\n";
    }
    out += key.substr(dot + 1) + " = " + value + "\n";
  }
  return out;
}

}  // namespace shrinklm
