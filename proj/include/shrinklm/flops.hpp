#pragma once

// Training-compute accounting: 6·N·D for a forward+backward pass over D
// tokens with N parameters, 2·N·D for a forward-only pass (the KD teacher).
// N is the full parameter_count of the model, embeddings included.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "shrinklm/errors.hpp"
#include "shrinklm/model.hpp"
#include "shrinklm/trace.hpp"

namespace shrinklm::flops {

enum class Method { TeacherFree, Kd };

inline std::string_view method_name(Method m) { return m == Method::Kd ? "kd" : "teacher_free"; }

inline Method parse_method(std::string_view s) {
  if (s == "kd") return Method::Kd;
  if (s == "teacher_free" || s == "teacher-free") return Method::TeacherFree;
  throw UsageError("unknown method '" + std::string(s) + "' (expected teacher_free or kd)");
}

struct CostReport {
  Method method = Method::TeacherFree;
  double student_params = 0;
  double teacher_params = 0;  // 0 for teacher_free
  double tokens = 0;
  double train_flops = 0;
  double teacher_forward_flops = 0;
  double total_flops = 0;
  double ratio_vs_teacher_free = 1;
};

inline double train_flops(double params, double tokens) { return 6.0 * params * tokens; }
inline double forward_flops(double params, double tokens) { return 2.0 * params * tokens; }

inline CostReport estimate(Method method, double student_params,
                           std::optional<double> teacher_params, double tokens) {
  if (!(student_params > 0)) throw UsageError("student parameter count must be positive");
  if (!(tokens > 0)) throw UsageError("token count must be positive");
  if (method == Method::Kd && !teacher_params)
    throw UsageError("kd cost needs the teacher parameter count");
  if (teacher_params && !(*teacher_params > 0))
    throw UsageError("teacher parameter count must be positive");

  CostReport r;
  r.method = method;
  r.student_params = student_params;
  r.tokens = tokens;
  r.train_flops = train_flops(student_params, tokens);
  if (method == Method::Kd) {
    r.teacher_params = *teacher_params;
    r.teacher_forward_flops = forward_flops(*teacher_params, tokens);
  }
  r.total_flops = r.train_flops + r.teacher_forward_flops;
  r.ratio_vs_teacher_free = r.total_flops / r.train_flops;
  return r;
}

/// 1 + N_T / (3 N_S): KD cost relative to teacher-free at equal tokens.
inline double kd_ratio(double student_params, double teacher_params) {
  return 1.0 + teacher_params / (3.0 * student_params);
}

/// The two model scales of the published compute comparison. Parameter
/// counts are back-solved from the published FLOPs under 6ND / 2ND with
/// D = 20e9 tokens; the embedding convention behind them is not stated.
struct Setting {
  const char* name;
  double student_params;
  double teacher_params;
  double tokens;
};

inline std::span<const Setting> paper_settings() {
  static constexpr Setting kSettings[] = {{"300M", 177.5e6, 303.5e6, 20e9}, {"1.1B", 606.67e6, 1.11e9, 20e9}};
  return kSettings;
}

/// Integrates the 6N/2N model over a metrics trace. Each row covers the
/// tokens since the previous row (the first since `start_tokens`) at the
/// parameter count of a model with `layers_live` layers of `config`.
inline double measure(std::span<const TraceRow> rows, const ModelConfig& config,
                      std::optional<double> teacher_params = std::nullopt,
                      std::uint64_t start_tokens = 0) {
  double total = 0;
  std::uint64_t prev = start_tokens;
  for (const auto& r : rows) {
    if (r.tokens < prev) throw FormatError("trace token clock goes backwards");
    const double delta = static_cast<double>(r.tokens - prev);
    ModelConfig live = config;
    live.n_layers = r.layers_live;
    total += train_flops(static_cast<double>(param_count(live).total), delta);
    if (teacher_params) total += forward_flops(*teacher_params, delta);
    prev = r.tokens;
  }
  return total;
}

}  // namespace shrinklm::flops
