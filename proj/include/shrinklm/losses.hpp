#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "shrinklm/ops.hpp"

namespace shrinklm {

namespace detail {

/// Numerically stable log-sum-exp of a row.
template <class T>
T log_sum_exp(const T* row, std::size_t n) {
  T mx = row[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, row[i]);
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) total += std::exp(row[i] - mx);
  return mx + std::log(total);
}

}  // namespace detail

/// Mean next-token negative log-likelihood.
///
/// logits is [..., V] with leading extents flattened to T positions; targets
/// holds T ids. Positions whose target equals ignore_index are skipped. With
/// no counted positions the loss is 0.
template <class T>
Tensor<T> cross_entropy_lm(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                           std::int32_t ignore_index = -1) {
  const auto [rows, vocab] = detail::rows_cols(logits);
  if (targets.size() != rows)
    throw DimensionError("cross_entropy_lm: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " positions");
  for (auto t : targets)
    if (t != ignore_index && (t < 0 || static_cast<std::size_t>(t) >= vocab))
      throw IndexError("cross_entropy_lm: target " + std::to_string(t) + " outside [0," +
                       std::to_string(vocab) + ")");

  const auto& z = logits.impl().data;
  std::vector<T> lse(rows, T(0));
  std::size_t counted = 0;
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == ignore_index) continue;
    lse[r] = detail::log_sum_exp(z.data() + r * vocab, vocab);
    total += lse[r] - z[r * vocab + static_cast<std::size_t>(targets[r])];
    ++counted;
  }
  const T loss = counted ? total / static_cast<T>(counted) : T(0);

  auto* pl = logits.impl_ptr().get();
  std::vector<std::int32_t> saved(targets.begin(), targets.end());
  return make_result<T>(
      {1}, {loss}, {logits},
      [=, saved = std::move(saved), lse = std::move(lse)](detail::TensorImpl<T>& o) {
        if (!counted) return;
        auto& g = pl->grad_buffer();
        const T coef = o.grad[0] / static_cast<T>(counted);
        for (std::size_t r = 0; r < rows; ++r) {
          if (saved[r] == ignore_index) continue;
          for (std::size_t c = 0; c < vocab; ++c)
            g[r * vocab + c] += coef * std::exp(pl->data[r * vocab + c] - lse[r]);
          g[r * vocab + static_cast<std::size_t>(saved[r])] -= coef;
        }
      });
}

/// T^2 * mean over positions of KL(softmax(teacher/T) || softmax(student/T)).
///
/// The teacher side is treated as a constant: no adjoint is recorded for it
/// even if it requires grad.
template <class T>
Tensor<T> kl_teacher_student(const Tensor<T>& teacher_logits, const Tensor<T>& student_logits,
                             T temperature) {
  if (teacher_logits.shape() != student_logits.shape())
    throw DimensionError("kl_teacher_student: shape mismatch " +
                         shape_str(teacher_logits.shape()) + " vs " +
                         shape_str(student_logits.shape()));
  if (!(temperature > T(0))) throw UsageError("kl_teacher_student: temperature must be positive");
  const auto [rows, vocab] = detail::rows_cols(student_logits);
  const auto& zt = teacher_logits.impl().data;
  const auto& zs = student_logits.impl().data;

  // p: teacher probabilities, q: student probabilities, both at temperature.
  std::vector<T> p(rows * vocab), q(rows * vocab), scaled_t(vocab), scaled_s(vocab);
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < vocab; ++c) {
      scaled_t[c] = zt[r * vocab + c] / temperature;
      scaled_s[c] = zs[r * vocab + c] / temperature;
    }
    const T lt = detail::log_sum_exp(scaled_t.data(), vocab);
    const T ls = detail::log_sum_exp(scaled_s.data(), vocab);
    T kl = 0;
    for (std::size_t c = 0; c < vocab; ++c) {
      const T log_p = scaled_t[c] - lt, log_q = scaled_s[c] - ls;
      p[r * vocab + c] = std::exp(log_p);
      q[r * vocab + c] = std::exp(log_q);
      kl += p[r * vocab + c] * (log_p - log_q);
    }
    total += kl;
  }
  const T loss = temperature * temperature * total / static_cast<T>(rows);

  auto* ps = student_logits.impl_ptr().get();
  // Only the student is registered as an input, so no adjoint reaches the teacher.
  return make_result<T>(
      {1}, {loss}, {student_logits},
      [=, p = std::move(p), q = std::move(q)](detail::TensorImpl<T>& o) {
        auto& g = ps->grad_buffer();
        const T coef = o.grad[0] * temperature / static_cast<T>(rows);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += coef * (q[i] - p[i]);
      });
}

}  // namespace shrinklm
