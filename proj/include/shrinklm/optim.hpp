#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "shrinklm/log.hpp"
#include "shrinklm/model.hpp"

namespace shrinklm {

/// Linear warmup to peak_lr over warmup_tokens, then cosine decay to
/// final_fraction * peak_lr at total_tokens. Keyed to the token clock.
struct LrSchedule {
  double peak_lr = 3e-4;
  std::uint64_t warmup_tokens = 0;
  std::uint64_t total_tokens = 1;
  double final_fraction = 0.1;
  mutable bool clamp_logged = false;  // the past-the-end warning is emitted once

  std::vector<std::string> violations() const {
    std::vector<std::string> v;
    if (!(peak_lr > 0)) v.push_back("optim.peak_lr must be positive");
    if (total_tokens <= warmup_tokens)
      v.push_back("total tokens (" + std::to_string(total_tokens) +
                  ") must exceed optim.warmup_tokens (" + std::to_string(warmup_tokens) + ")");
    if (!(final_fraction >= 0 && final_fraction <= 1))
      v.push_back("optim.final_lr_fraction must lie in [0, 1]");
    return v;
  }

  double at(std::uint64_t tokens) const {
    if (tokens > total_tokens) {
      if (!clamp_logged) {
        logger().warn("lr requested at {} tokens, past the schedule end {}; clamping", tokens,
                      total_tokens);
        clamp_logged = true;
      }
      tokens = total_tokens;
    }
    if (tokens < warmup_tokens)
      return peak_lr * static_cast<double>(tokens) / static_cast<double>(warmup_tokens);
    const double progress = static_cast<double>(tokens - warmup_tokens) /
                            static_cast<double>(total_tokens - warmup_tokens);
    const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    return peak_lr * (final_fraction + (1.0 - final_fraction) * cosine);
  }
};

inline double lr_at(const LrSchedule& schedule, std::uint64_t tokens) { return schedule.at(tokens); }

struct LionConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 1e-4;

  std::vector<std::string> violations() const {
    std::vector<std::string> v;
    if (!(beta1 >= 0 && beta1 < 1)) v.push_back("optim.beta1 must lie in [0, 1)");
    if (!(beta2 >= 0 && beta2 < 1)) v.push_back("optim.beta2 must lie in [0, 1)");
    if (!(weight_decay >= 0)) v.push_back("optim.weight_decay must be non-negative");
    return v;
  }
};

/// Bias and normalization parameters are exempt from weight decay.
inline bool decay_enabled(const std::string& name) {
  if (name.ends_with(".bias")) return false;
  return !(name.ends_with("ln.gain") || name.find("_ln.") != std::string::npos ||
           name.starts_with("final_ln."));
}

/// Lion: sign of an interpolated momentum, decoupled weight decay, then an
/// EMA update of the momentum. sign(0) is 0.
template <class T>
class Lion {
 public:
  explicit Lion(LionConfig config = {}) : config_(config) {}

  const LionConfig& config() const { return config_; }

  /// Updates every parameter in `params` that requires grad. A missing grad
  /// counts as zero.
  void step(std::span<const NamedTensor<T>> params, double lr) {
    const T b1 = static_cast<T>(config_.beta1), b2 = static_cast<T>(config_.beta2);
    const T step_lr = static_cast<T>(lr);
    for (const auto& [name, tensor] : params) {
      if (!tensor.requires_grad()) continue;
      Tensor<T> p = tensor;
      auto data = p.mutable_data();
      auto grad = tensor.grad();
      if (!grad.empty() && grad.size() != data.size())
        throw UsageError("lion: gradient of '" + name + "' does not match its parameter");
      auto& m = momentum_for(tensor);
      const T decay = decay_enabled(name) ? static_cast<T>(config_.weight_decay) : T(0);
      for (std::size_t i = 0; i < data.size(); ++i) {
        const T g = grad.empty() ? T(0) : grad[i];
        const T c = b1 * m[i] + (T(1) - b1) * g;
        const T s = c > T(0) ? T(1) : (c < T(0) ? T(-1) : T(0));
        data[i] -= step_lr * (s + decay * data[i]);
        m[i] = b2 * m[i] + (T(1) - b2) * g;
      }
    }
  }

  bool has_state(const Tensor<T>& t) const { return momentum_.count(t.identity()) > 0; }
  const std::vector<T>& momentum(const Tensor<T>& t) const { return momentum_.at(t.identity()); }

  /// Drops momentum for tensors no longer in `params` (e.g. after layer drops).
  void retain(std::span<const NamedTensor<T>> params) {
    std::unordered_map<const void*, std::vector<T>> kept;
    for (const auto& [name, t] : params) {
      auto it = momentum_.find(t.identity());
      if (it != momentum_.end()) kept.emplace(it->first, std::move(it->second));
    }
    momentum_ = std::move(kept);
  }

  /// Momentum buffers by parameter name, for checkpointing.
  std::map<std::string, std::vector<T>> export_state(
      std::span<const NamedTensor<T>> params) const {
    std::map<std::string, std::vector<T>> out;
    for (const auto& [name, t] : params) {
      auto it = momentum_.find(t.identity());
      if (it != momentum_.end()) out.emplace(name, it->second);
    }
    return out;
  }

  void import_state(std::span<const NamedTensor<T>> params,
                    const std::map<std::string, std::vector<T>>& state) {
    momentum_.clear();
    for (const auto& [name, t] : params) {
      auto it = state.find(name);
      if (it == state.end()) continue;
      if (it->second.size() != t.numel())
        throw UsageError("lion: momentum for '" + name + "' has the wrong size");
      momentum_.emplace(t.identity(), it->second);
    }
  }

 private:
  std::vector<T>& momentum_for(const Tensor<T>& t) {
    auto [it, inserted] = momentum_.try_emplace(t.identity());
    if (inserted) it->second.assign(t.numel(), T(0));
    return it->second;
  }

  LionConfig config_;
  std::unordered_map<const void*, std::vector<T>> momentum_;
};

}  // namespace shrinklm
