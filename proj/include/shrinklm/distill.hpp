#pragma once

// Entry points for the three kinds of run:
//   run_pretrain      train a freshly initialized model
//   run_teacher_free  truncation-initialized continued pretraining: the planned
//                     layers are frozen from the start, dropped on the token
//                     schedule, and training continues on the LM loss alone
//   run_kd            student = truncated teacher (all layers removed up front),
//                     trained on alpha * LM + (1 - alpha) * KL to the teacher
//
// Each accepts an optional checkpoint to resume from; the resumed run continues
// the exact batch sequence, optimizer state and drop schedule.

#include <cstdint>
#include <cstring>
#include <optional>

#include "shrinklm/layout.hpp"
#include "shrinklm/train.hpp"

namespace shrinklm {

/// Where a run reads and writes.
struct RunIO {
  std::uint64_t seed = 0;
  std::shared_ptr<const Corpus> corpus;
  std::shared_ptr<const Corpus> validation;
  std::filesystem::path out_dir;
  KeyValueFile manifest_config;
  std::uint64_t interrupt_after_tokens = 0;
};

struct DistillRunConfig {
  TrainConfig train;  // train.total_tokens is the continue budget
  RemovalPlan plan;
  std::optional<std::uint64_t> pre_drop_tokens;  // default: train.warmup_tokens

  std::uint64_t resolved_pre_drop() const { return pre_drop_tokens.value_or(train.warmup_tokens); }
  DropSchedule schedule() const {
    return {plan.resolved_indices, resolved_pre_drop(), plan.drop_gap_tokens};
  }
  std::vector<std::string> violations(std::size_t n_layers) const {
    auto v = train.violations();
    if (plan.k_remove == 0) v.push_back("distill.k_remove must be positive");
    if (plan.resolved_indices.size() != plan.k_remove)
      v.push_back("removal plan is not resolved for k_remove = " + std::to_string(plan.k_remove));
    auto s = schedule().violations(n_layers, train.total_tokens);
    v.insert(v.end(), s.begin(), s.end());
    return v;
  }
};

struct KdRunConfig {
  TrainConfig train;
  RemovalPlan plan;  // drop_gap_tokens is not used: the student is truncated up front
  double temperature = 2.0;
  double alpha = 0.5;

  std::vector<std::string> violations() const {
    auto v = train.violations();
    if (plan.resolved_indices.size() != plan.k_remove)
      v.push_back("removal plan is not resolved for k_remove = " + std::to_string(plan.k_remove));
    if (!(temperature > 0)) v.push_back("kd.temperature must be positive");
    if (!(alpha >= 0 && alpha <= 1)) v.push_back("kd.alpha must lie in [0, 1]");
    return v;
  }
};

/// FNV-1a over every parameter's bytes, in named_parameters order.
template <class T>
std::uint64_t checksum(const CausalLM<T>& model) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, t] : model.named_parameters()) {
    auto d = t.data();
    const auto* bytes = reinterpret_cast<const unsigned char*>(d.data());
    for (std::size_t i = 0; i < d.size_bytes(); ++i) h = (h ^ bytes[i]) * 0x100000001b3ull;
  }
  return h;
}

namespace detail {

template <class T>
RunSpec<T> make_spec(const std::string& command, const TrainConfig& train, const RunIO& io) {
  RunSpec<T> s;
  s.command = command;
  s.seed = io.seed;
  s.train = train;
  s.corpus = io.corpus;
  s.validation = io.validation;
  s.out_dir = io.out_dir;
  s.manifest_config = io.manifest_config;
  s.interrupt_after_tokens = io.interrupt_after_tokens;
  return s;
}

}  // namespace detail

template <class T>
RunResult<T> run_pretrain(const ModelConfig& config, const TrainConfig& train, const RunIO& io,
                          const Checkpoint<T>* resume = nullptr) {
  auto v = config.violations();
  auto tv = train.violations();
  v.insert(v.end(), tv.begin(), tv.end());
  throw_if_violations(v);
  auto spec = detail::make_spec<T>("pretrain", train, io);
  auto model = resume ? resume->model.clone() : CausalLM<T>::initialize(config, io.seed);
  return Trainer<T>(std::move(model), spec, resume).run();
}

template <class T>
RunResult<T> run_teacher_free(const CausalLM<T>& source, const DistillRunConfig& config,
                              const RunIO& io, const Checkpoint<T>* resume = nullptr) {
  throw_if_violations(config.violations(source.n_layers()));
  auto spec = detail::make_spec<T>("distill", config.train, io);
  spec.drops = config.schedule();
  auto model = resume ? resume->model.clone() : source.clone();
  return Trainer<T>(std::move(model), spec, resume).run();
}

template <class T>
RunResult<T> run_kd(const CausalLM<T>& teacher, const KdRunConfig& config, const RunIO& io,
                    const Checkpoint<T>* resume = nullptr) {
  throw_if_violations(config.violations());
  auto spec = detail::make_spec<T>("kd", config.train, io);
  spec.teacher = Teacher<T>{&teacher, config.temperature, config.alpha};
  auto student = resume ? resume->model.clone() : truncate_model(teacher, config.plan.resolved_indices);
  return Trainer<T>(std::move(student), spec, resume).run();
}

}  // namespace shrinklm
