#pragma once

// Which decoder layers to remove, and truncation of a model to the rest.
//
// With L layers the interior is 1..L-2; the first and last layers are never
// removed. Layouts for k removals:
//   input       first k interior indices
//   output      last k interior indices
//   middle      k consecutive indices starting at floor((L-k)/2)
//   both        first ceil(k/2) and last floor(k/2) interior indices
//   max-gap     round((j+1)(L-1)/(k+1)) for j < k, collisions shifted right
//   alt-input   1, 3, 5, ...
//   alt-output  L-2, L-4, ...
//   alt-both    ceil(k/2) from the alt-input order, the rest from alt-output
//   alt-middle  stride-2 run of k indices centred in the stack
// When a stride-2 pattern runs out of room (k > (L-2)/2), the remaining
// indices are filled from the unused interior, nearest to the layout's origin.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "shrinklm/model.hpp"

namespace shrinklm {

enum class Layout { MaxGap, Input, Output, Both, Middle, AltInput, AltOutput, AltBoth, AltMiddle };

inline constexpr std::array<Layout, 9> kAllLayouts{
    Layout::MaxGap,   Layout::Input,     Layout::Output,  Layout::Both,     Layout::Middle,
    Layout::AltInput, Layout::AltOutput, Layout::AltBoth, Layout::AltMiddle};

inline std::string_view layout_name(Layout l) {
  switch (l) {
    case Layout::MaxGap: return "max-gap";
    case Layout::Input: return "input";
    case Layout::Output: return "output";
    case Layout::Both: return "both";
    case Layout::Middle: return "middle";
    case Layout::AltInput: return "alt-input";
    case Layout::AltOutput: return "alt-output";
    case Layout::AltBoth: return "alt-both";
    case Layout::AltMiddle: return "alt-middle";
  }
  return "?";
}

inline Layout parse_layout(std::string_view name) {
  for (auto l : kAllLayouts)
    if (layout_name(l) == name) return l;
  throw ConfigError("unknown layout '" + std::string(name) +
                    "' (expected max-gap, input, output, both, middle, alt-input, alt-output, "
                    "alt-both or alt-middle)");
}

namespace detail {

/// Takes the first k distinct, valid candidates in priority order.
class IndexPicker {
 public:
  IndexPicker(std::size_t n_layers, std::size_t k) : n_layers_(n_layers), k_(k) {}

  void offer(long index) {
    if (full() || index < 1 || index > static_cast<long>(n_layers_) - 2) return;
    chosen_.insert(static_cast<std::size_t>(index));
  }
  bool full() const { return chosen_.size() >= k_; }
  std::vector<std::size_t> result() const { return {chosen_.begin(), chosen_.end()}; }

 private:
  std::size_t n_layers_, k_;
  std::set<std::size_t> chosen_;
};

}  // namespace detail

/// Sorted layer indices removed by `layout`; never 0 or n_layers-1.
inline std::vector<std::size_t> resolve_layout(Layout layout, std::size_t n_layers,
                                               std::size_t k_remove) {
  if (n_layers < 2 || k_remove > n_layers - 2)
    throw ConfigError("cannot remove " + std::to_string(k_remove) + " of " +
                      std::to_string(n_layers) +
                      " layers: the first and last layer are always kept");
  const long L = static_cast<long>(n_layers), k = static_cast<long>(k_remove);
  const long lo = 1, hi = L - 2;
  detail::IndexPicker pick(n_layers, k_remove);
  auto fill_from_input = [&] {
    for (long i = lo; i <= hi; ++i) pick.offer(i);
  };
  auto fill_from_output = [&] {
    for (long i = hi; i >= lo; --i) pick.offer(i);
  };

  switch (layout) {
    case Layout::Input:
      fill_from_input();
      break;
    case Layout::Output:
      fill_from_output();
      break;
    case Layout::Middle:
      for (long i = (L - k) / 2; i < (L - k) / 2 + k; ++i) pick.offer(i);
      break;
    case Layout::Both: {
      const long front = (k + 1) / 2;
      for (long i = 0; i < front; ++i) pick.offer(lo + i);
      for (long i = 0; i < k - front; ++i) pick.offer(hi - i);
      break;
    }
    case Layout::MaxGap: {
      std::vector<long> idx;
      for (long j = 0; j < k; ++j)
        idx.push_back(std::lround(static_cast<double>((j + 1) * (L - 1)) / static_cast<double>(k + 1)));
      for (std::size_t j = 1; j < idx.size(); ++j) idx[j] = std::max(idx[j], idx[j - 1] + 1);
      // Shifting right can run past the interior; pull back from the end.
      for (long j = static_cast<long>(idx.size()) - 1; j >= 0; --j) {
        const long cap = hi - (static_cast<long>(idx.size()) - 1 - j);
        idx[static_cast<std::size_t>(j)] = std::min(idx[static_cast<std::size_t>(j)], cap);
      }
      for (long i : idx) pick.offer(i);
      break;
    }
    case Layout::AltInput:
      for (long i = lo; i <= hi; i += 2) pick.offer(i);
      fill_from_input();
      break;
    case Layout::AltOutput:
      for (long i = hi; i >= lo; i -= 2) pick.offer(i);
      fill_from_output();
      break;
    case Layout::AltBoth: {
      const long front = (k + 1) / 2;
      long taken = 0;
      for (long i = lo; i <= hi && taken < front; i += 2, ++taken) pick.offer(i);
      for (long i = hi; i >= lo && !pick.full(); i -= 2) pick.offer(i);
      fill_from_input();
      break;
    }
    case Layout::AltMiddle: {
      const long start = std::max(lo, (L - (2 * k - 1)) / 2);
      for (long i = start; i <= hi; i += 2) pick.offer(i);
      // Remaining slots go to the interior indices closest to the centre.
      std::vector<long> rest;
      for (long i = lo; i <= hi; ++i) rest.push_back(i);
      const double centre = static_cast<double>(L - 1) / 2.0;
      std::stable_sort(rest.begin(), rest.end(), [&](long a, long b) {
        return std::abs(static_cast<double>(a) - centre) < std::abs(static_cast<double>(b) - centre);
      });
      for (long i : rest) pick.offer(i);
      break;
    }
  }
  auto out = pick.result();
  if (out.size() != k_remove) throw ConfigError("layout produced too few indices");
  return out;
}

/// A resolved removal: layout, count, drop spacing on the token clock.
struct RemovalPlan {
  Layout layout = Layout::Input;
  std::size_t k_remove = 0;
  std::uint64_t drop_gap_tokens = 0;
  std::vector<std::size_t> resolved_indices;

  static RemovalPlan make(Layout layout, std::size_t n_layers, std::size_t k_remove,
                          std::uint64_t drop_gap_tokens = 0) {
    return {layout, k_remove, drop_gap_tokens, resolve_layout(layout, n_layers, k_remove)};
  }
};

/// Copy of `model` without the given layers. Kept tensors are bit-identical
/// copies, re-indexed in their original order. Indices must be distinct
/// interior layers.
template <class T>
CausalLM<T> truncate_model(const CausalLM<T>& model, std::span<const std::size_t> indices) {
  const std::set<std::size_t> unique(indices.begin(), indices.end());
  if (unique.size() != indices.size()) throw UsageError("truncate_model: duplicate layer index");
  for (auto i : indices)
    if (i == 0 || i + 1 >= model.n_layers())
      throw UsageError("truncate_model: layer " + std::to_string(i) +
                       " is not an interior layer of a " + std::to_string(model.n_layers()) +
                       "-layer model");
  auto out = model.clone();
  out.remove_layers(indices);
  return out;
}

}  // namespace shrinklm
