#pragma once

// Causal decoder-only transformer with parallel attention/FFN blocks.
//
// Block layout (one pre-LN shared by both branches):
//   h        = LN(x)
//   [q|k|v|u] = h * W_in + b_in            (fused Q, K, V and SwiGLU input)
//   q, k     <- per-head LayerNorm
//   a        = CausalAttention(q, k, v)
//   m        = SwiGLU(u)
//   x'       = x + [a|m] * W_out + b_out   (fused attention-out and FFN-out)

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "shrinklm/losses.hpp"
#include "shrinklm/ops.hpp"
#include "shrinklm/rng.hpp"

namespace shrinklm {

/// SwiGLU width convention: 8/3 * d_model rounded up to a multiple of 8.
inline std::size_t default_d_ff(std::size_t d_model) {
  const auto raw = static_cast<std::size_t>(std::llround(8.0 * static_cast<double>(d_model) / 3.0));
  return (raw + 7) / 8 * 8;
}

struct ModelConfig {
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t n_layers = 4;
  std::size_t d_ff = 0;  // 0 selects default_d_ff(d_model)
  std::size_t vocab_size = 259;
  std::size_t context_len = 256;
  bool tie_embeddings = true;

  std::size_t ffn_width() const { return d_ff ? d_ff : default_d_ff(d_model); }
  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t fused_in_width() const { return 3 * d_model + 2 * ffn_width(); }
  std::size_t fused_out_width() const { return d_model + ffn_width(); }

  std::vector<std::string> violations() const {
    std::vector<std::string> v;
    if (d_model == 0) v.push_back("model.d_model must be positive");
    if (n_heads == 0) v.push_back("model.n_heads must be positive");
    if (d_model && n_heads && d_model % n_heads != 0)
      v.push_back("model.d_model (" + std::to_string(d_model) + ") must be divisible by model.n_heads (" +
                  std::to_string(n_heads) + ")");
    if (n_layers == 0) v.push_back("model.n_layers must be positive");
    if (vocab_size == 0) v.push_back("model.vocab_size must be positive");
    if (context_len < 2) v.push_back("model.context_len must be at least 2");
    return v;
  }
  void validate() const { throw_if_violations(violations()); }

  bool operator==(const ModelConfig&) const = default;
};

struct ParamCount {
  std::size_t total = 0;
  std::size_t per_layer = 0;
  std::size_t outside_layers = 0;  // embeddings, final LN, output bias (+ untied head)
};

/// Closed-form parameter count of the architecture.
inline ParamCount param_count(const ModelConfig& c) {
  const std::size_t d = c.d_model, in = c.fused_in_width(), out = c.fused_out_width();
  ParamCount p;
  p.per_layer = 2 * d                // pre-LN
                + d * in + in        // fused input projection
                + 4 * c.head_dim()   // q/k LayerNorm
                + out * d + d;       // fused output projection
  p.outside_layers = c.vocab_size * d + c.context_len * d + 2 * d + c.vocab_size +
                     (c.tie_embeddings ? 0 : c.vocab_size * d);
  p.total = p.outside_layers + c.n_layers * p.per_layer;
  return p;
}

/// Row-major [batch, seq] token ids.
struct TokenMatrix {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> ids;

  std::int32_t at(std::size_t b, std::size_t t) const { return ids[b * seq + t]; }
};

template <class T>
using NamedTensor = std::pair<std::string, Tensor<T>>;

template <class T>
struct DecoderBlock {
  Tensor<T> ln_gain, ln_bias;
  Tensor<T> in_weight, in_bias;
  Tensor<T> q_ln_gain, q_ln_bias, k_ln_gain, k_ln_bias;
  Tensor<T> out_weight, out_bias;

  static DecoderBlock zeros(const ModelConfig& c) {
    const std::size_t d = c.d_model, hd = c.head_dim();
    DecoderBlock b;
    b.ln_gain = Tensor<T>::full({d}, T(1), true);
    b.ln_bias = Tensor<T>::zeros({d}, true);
    b.in_weight = Tensor<T>::zeros({d, c.fused_in_width()}, true);
    b.in_bias = Tensor<T>::zeros({c.fused_in_width()}, true);
    b.q_ln_gain = Tensor<T>::full({hd}, T(1), true);
    b.q_ln_bias = Tensor<T>::zeros({hd}, true);
    b.k_ln_gain = Tensor<T>::full({hd}, T(1), true);
    b.k_ln_bias = Tensor<T>::zeros({hd}, true);
    b.out_weight = Tensor<T>::zeros({c.fused_out_width(), d}, true);
    b.out_bias = Tensor<T>::zeros({d}, true);
    return b;
  }

  std::vector<NamedTensor<T>> parameters(const std::string& prefix) const {
    return {{prefix + "ln.gain", ln_gain},       {prefix + "ln.bias", ln_bias},
            {prefix + "in.weight", in_weight},   {prefix + "in.bias", in_bias},
            {prefix + "q_ln.gain", q_ln_gain},   {prefix + "q_ln.bias", q_ln_bias},
            {prefix + "k_ln.gain", k_ln_gain},   {prefix + "k_ln.bias", k_ln_bias},
            {prefix + "out.weight", out_weight}, {prefix + "out.bias", out_bias}};
  }

  DecoderBlock clone() const {
    return {ln_gain.clone(),   ln_bias.clone(),   in_weight.clone(),  in_bias.clone(),
            q_ln_gain.clone(), q_ln_bias.clone(), k_ln_gain.clone(), k_ln_bias.clone(),
            out_weight.clone(), out_bias.clone()};
  }

  void set_trainable(bool on) {
    for (auto* t : {&ln_gain, &ln_bias, &in_weight, &in_bias, &q_ln_gain, &q_ln_bias, &k_ln_gain,
                    &k_ln_bias, &out_weight, &out_bias})
      t->set_requires_grad(on);
  }

  /// x: [batch*seq, d_model].
  Tensor<T> forward(const Tensor<T>& x, const ModelConfig& c, std::size_t batch,
                    std::size_t seq) const {
    const std::size_t d = c.d_model, rows = batch * seq, hd = c.head_dim();
    const std::size_t heads = c.n_heads;
    auto h = layer_norm(x, ln_gain, ln_bias);
    auto fused = add_bias(matmul(h, in_weight), in_bias);
    auto q = slice_cols(fused, 0, d);
    auto k = slice_cols(fused, d, 2 * d);
    auto v = slice_cols(fused, 2 * d, 3 * d);
    auto u = slice_cols(fused, 3 * d, c.fused_in_width());
    q = reshape(layer_norm(reshape(q, {rows * heads, hd}), q_ln_gain, q_ln_bias), {rows, d});
    k = reshape(layer_norm(reshape(k, {rows * heads, hd}), k_ln_gain, k_ln_bias), {rows, d});
    auto attn = causal_attention(q, k, v, batch, seq, heads);
    auto ffn = swiglu(u);
    auto mixed = add_bias(matmul(concat_cols(attn, ffn), out_weight), out_bias);
    return add(x, mixed);
  }
};

template <class T>
class CausalLM {
 public:
  CausalLM() = default;

  /// Zero-initialized parameters with LN gains at 1.
  static CausalLM zeros(const ModelConfig& config) {
    config.validate();
    CausalLM m;
    m.config_ = config;
    m.config_.d_ff = config.ffn_width();
    const std::size_t d = config.d_model, V = config.vocab_size;
    m.tok_emb_ = Tensor<T>::zeros({V, d}, true);
    m.pos_emb_ = Tensor<T>::zeros({config.context_len, d}, true);
    for (std::size_t i = 0; i < config.n_layers; ++i)
      m.layers_.push_back(DecoderBlock<T>::zeros(m.config_));
    m.final_ln_gain_ = Tensor<T>::full({d}, T(1), true);
    m.final_ln_bias_ = Tensor<T>::zeros({d}, true);
    if (!config.tie_embeddings) m.head_weight_ = Tensor<T>::zeros({V, d}, true);
    m.head_bias_ = Tensor<T>::zeros({V}, true);
    return m;
  }

  /// normal(0, 0.02) for embeddings and projection weights; zeros for biases;
  /// ones for LN gains. Fully determined by `seed`.
  static CausalLM initialize(const ModelConfig& config, std::uint64_t seed) {
    auto m = zeros(config);
    Rng rng(derive_seed(seed, 0x1417));
    for (auto& [name, t] : m.named_parameters()) {
      if (!is_weight_name(name)) continue;
      for (auto& v : t.mutable_data()) v = static_cast<T>(0.02 * rng.normal());
    }
    return m;
  }

  static bool is_weight_name(const std::string& name) {
    return name == "tok_emb" || name == "pos_emb" || name == "head.weight" ||
           name.ends_with(".in.weight") || name.ends_with(".out.weight");
  }

  const ModelConfig& config() const { return config_; }
  std::size_t n_layers() const { return layers_.size(); }
  const std::vector<DecoderBlock<T>>& layers() const { return layers_; }
  std::vector<DecoderBlock<T>>& layers() { return layers_; }

  /// Every parameter tensor, in a fixed order; names address layers as
  /// `layers.<i>.<part>`.
  std::vector<NamedTensor<T>> named_parameters() const {
    std::vector<NamedTensor<T>> out{{"tok_emb", tok_emb_}, {"pos_emb", pos_emb_}};
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      auto p = layers_[i].parameters("layers." + std::to_string(i) + ".");
      out.insert(out.end(), p.begin(), p.end());
    }
    out.push_back({"final_ln.gain", final_ln_gain_});
    out.push_back({"final_ln.bias", final_ln_bias_});
    if (!config_.tie_embeddings) out.push_back({"head.weight", head_weight_});
    out.push_back({"head.bias", head_bias_});
    return out;
  }

  std::size_t parameter_total() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_parameters()) n += t.numel();
    return n;
  }

  /// Deep copy; the copy shares no storage with this model.
  CausalLM clone() const {
    CausalLM m;
    m.config_ = config_;
    m.tok_emb_ = tok_emb_.clone();
    m.pos_emb_ = pos_emb_.clone();
    for (const auto& l : layers_) m.layers_.push_back(l.clone());
    m.final_ln_gain_ = final_ln_gain_.clone();
    m.final_ln_bias_ = final_ln_bias_.clone();
    if (head_weight_.defined()) m.head_weight_ = head_weight_.clone();
    m.head_bias_ = head_bias_.clone();
    return m;
  }

  /// Deletes the given decoder layers in place; survivors keep their tensors
  /// and relative order.
  void remove_layers(std::span<const std::size_t> indices) {
    std::set<std::size_t> drop(indices.begin(), indices.end());
    if (drop.size() != indices.size()) throw UsageError("remove_layers: duplicate layer index");
    for (auto i : drop)
      if (i >= layers_.size())
        throw IndexError("remove_layers: layer " + std::to_string(i) + " outside [0," +
                         std::to_string(layers_.size()) + ")");
    std::vector<DecoderBlock<T>> kept;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (!drop.count(i)) kept.push_back(std::move(layers_[i]));
    layers_ = std::move(kept);
    config_.n_layers = layers_.size();
  }

  /// Replaces a parameter's values by name (used by checkpoint loading).
  Tensor<T>& parameter(const std::string& name) {
    if (name == "tok_emb") return tok_emb_;
    if (name == "pos_emb") return pos_emb_;
    if (name == "final_ln.gain") return final_ln_gain_;
    if (name == "final_ln.bias") return final_ln_bias_;
    if (name == "head.bias") return head_bias_;
    if (name == "head.weight" && head_weight_.defined()) return head_weight_;
    if (name.starts_with("layers.")) {
      const auto dot = name.find('.', 7);
      if (dot != std::string::npos) {
        const std::size_t idx = std::stoul(name.substr(7, dot - 7));
        const std::string part = name.substr(dot + 1);
        if (idx < layers_.size()) {
          auto& l = layers_[idx];
          if (part == "ln.gain") return l.ln_gain;
          if (part == "ln.bias") return l.ln_bias;
          if (part == "in.weight") return l.in_weight;
          if (part == "in.bias") return l.in_bias;
          if (part == "q_ln.gain") return l.q_ln_gain;
          if (part == "q_ln.bias") return l.q_ln_bias;
          if (part == "k_ln.gain") return l.k_ln_gain;
          if (part == "k_ln.bias") return l.k_ln_bias;
          if (part == "out.weight") return l.out_weight;
          if (part == "out.bias") return l.out_bias;
        }
      }
    }
    throw FormatError("unknown parameter name '" + name + "'");
  }

  /// Logits [batch, seq, vocab]; position i sees tokens <= i only.
  Tensor<T> forward_logits(const TokenMatrix& tokens) const {
    if (tokens.seq == 0 || tokens.batch == 0) throw DimensionError("forward_logits: empty input");
    if (tokens.seq > config_.context_len)
      throw DimensionError("forward_logits: sequence of " + std::to_string(tokens.seq) +
                           " exceeds context_len " + std::to_string(config_.context_len));
    if (tokens.ids.size() != tokens.batch * tokens.seq)
      throw DimensionError("forward_logits: id buffer does not match [batch, seq]");
    std::vector<std::int32_t> positions(tokens.ids.size());
    for (std::size_t i = 0; i < positions.size(); ++i)
      positions[i] = static_cast<std::int32_t>(i % tokens.seq);
    auto x = add(embedding(tok_emb_, tokens.ids), embedding(pos_emb_, positions));
    for (const auto& layer : layers_) x = layer.forward(x, config_, tokens.batch, tokens.seq);
    x = layer_norm(x, final_ln_gain_, final_ln_bias_);
    const auto& head = config_.tie_embeddings ? tok_emb_ : head_weight_;
    auto logits = add_bias(matmul_nt(x, head), head_bias_);
    return reshape(logits, {tokens.batch, tokens.seq, config_.vocab_size});
  }

 private:
  ModelConfig config_;
  Tensor<T> tok_emb_, pos_emb_;
  std::vector<DecoderBlock<T>> layers_;
  Tensor<T> final_ln_gain_, final_ln_bias_;
  Tensor<T> head_weight_, head_bias_;
};

/// Teacher-forcing split of a [batch, seq+1] matrix into inputs and targets.
inline std::pair<TokenMatrix, std::vector<std::int32_t>> split_inputs_targets(
    const TokenMatrix& batch) {
  if (batch.seq < 2) throw DimensionError("lm batch needs at least 2 tokens per row");
  TokenMatrix inputs{batch.batch, batch.seq - 1, {}};
  std::vector<std::int32_t> targets;
  inputs.ids.reserve(batch.batch * inputs.seq);
  targets.reserve(batch.batch * inputs.seq);
  for (std::size_t b = 0; b < batch.batch; ++b)
    for (std::size_t t = 0; t < inputs.seq; ++t) {
      inputs.ids.push_back(batch.at(b, t));
      targets.push_back(batch.at(b, t + 1));
    }
  return {std::move(inputs), std::move(targets)};
}

/// Mean next-token cross entropy over a [batch, seq+1] id matrix.
template <class T>
Tensor<T> lm_loss(const CausalLM<T>& model, const TokenMatrix& batch,
                  std::int32_t ignore_index = -1) {
  auto [inputs, targets] = split_inputs_targets(batch);
  return cross_entropy_lm(model.forward_logits(inputs), targets, ignore_index);
}

}  // namespace shrinklm
