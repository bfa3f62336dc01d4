#pragma once

// Checkpoint directory layout:
//
//   <dir>/manifest.txt          key=value lines, one per entry, fixed order
//   <dir>/tensors/<name>.bin    raw little-endian float32, row-major
//   <dir>/optim/<name>.bin      Lion momentum for <name> (training checkpoints)
//
// Manifest keys: format, model.* (config fields), layer_count, tensor_dir,
// tensor.<name>=<extents joined by 'x'>, optim_dir, optim.<name>=<count>,
// state.<key>=<value>. Saving writes to a sibling temp directory and renames
// it into place, so an interrupted save never leaves a half-written checkpoint.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "shrinklm/errors.hpp"
#include "shrinklm/model.hpp"

namespace shrinklm {

namespace fs = std::filesystem;

inline constexpr const char* kCheckpointFormat = "shrinklm-checkpoint/1";

/// Ordered key=value text. Blank lines and lines starting with '#' are ignored.
class KeyValueFile {
 public:
  static KeyValueFile parse(const std::string& text, const std::string& origin = "<text>") {
    KeyValueFile kv;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos || eq == 0)
        throw FormatError(origin + ":" + std::to_string(lineno) + ": expected key=value");
      kv.set(line.substr(0, eq), line.substr(eq + 1));
    }
    return kv;
  }

  static KeyValueFile read(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open '" + path.string() + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse(buf.str(), path.string());
  }

  void set(const std::string& key, const std::string& value) {
    for (auto& [k, v] : entries_)
      if (k == key) {
        v = value;
        return;
      }
    entries_.emplace_back(key, value);
  }

  bool has(const std::string& key) const {
    for (const auto& [k, v] : entries_)
      if (k == key) return true;
    return false;
  }

  const std::string& get(const std::string& key) const {
    for (const auto& [k, v] : entries_)
      if (k == key) return v;
    throw FormatError("missing key '" + key + "'");
  }

  std::string get_or(const std::string& key, const std::string& fallback) const {
    return has(key) ? get(key) : fallback;
  }

  std::uint64_t get_u64(const std::string& key) const {
    const auto& v = get(key);
    try {
      std::size_t used = 0;
      const auto n = std::stoull(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return n;
    } catch (const std::exception&) {
      throw FormatError("key '" + key + "' is not an unsigned integer: '" + v + "'");
    }
  }

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  std::string str() const {
    std::string out;
    for (const auto& [k, v] : entries_) out += k + "=" + v + "\n";
    return out;
  }

  void write(const fs::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write '" + path.string() + "'");
    out << str();
    if (!out) throw InputError("error writing '" + path.string() + "'");
  }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

namespace detail {

inline std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
}

template <class T>
void write_f32_blob(const fs::path& path, std::span<const T> values) {
  std::vector<std::uint32_t> words(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const float f = static_cast<float>(values[i]);
    words[i] = to_little_endian(std::bit_cast<std::uint32_t>(f));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(words.data()),
            static_cast<std::streamsize>(words.size() * sizeof(std::uint32_t)));
  if (!out) throw InputError("error writing '" + path.string() + "'");
}

template <class T>
std::vector<T> read_f32_blob(const fs::path& path, std::size_t count) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw InputError("cannot open tensor blob '" + path.string() + "'");
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != count * sizeof(std::uint32_t))
    throw FormatError("blob '" + path.string() + "' holds " + std::to_string(bytes) +
                      " bytes, expected " + std::to_string(count * 4));
  in.seekg(0);
  std::vector<std::uint32_t> words(count);
  in.read(reinterpret_cast<char*>(words.data()), static_cast<std::streamsize>(bytes));
  std::vector<T> out(count);
  for (std::size_t i = 0; i < count; ++i)
    out[i] = static_cast<T>(std::bit_cast<float>(to_little_endian(words[i])));
  return out;
}

inline std::string extents_str(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

inline Shape parse_extents(const std::string& text) {
  Shape s;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('x', start);
    if (end == std::string::npos) end = text.size();
    try {
      s.push_back(std::stoul(text.substr(start, end - start)));
    } catch (const std::exception&) {
      throw FormatError("bad tensor extents '" + text + "'");
    }
    start = end + 1;
  }
  if (s.empty()) throw FormatError("empty tensor extents");
  return s;
}

}  // namespace detail

inline void write_model_config(KeyValueFile& kv, const ModelConfig& c) {
  kv.set("model.d_model", std::to_string(c.d_model));
  kv.set("model.n_heads", std::to_string(c.n_heads));
  kv.set("model.n_layers", std::to_string(c.n_layers));
  kv.set("model.d_ff", std::to_string(c.ffn_width()));
  kv.set("model.vocab_size", std::to_string(c.vocab_size));
  kv.set("model.context_len", std::to_string(c.context_len));
  kv.set("model.tie_embeddings", c.tie_embeddings ? "true" : "false");
}

inline ModelConfig read_model_config(const KeyValueFile& kv) {
  ModelConfig c;
  c.d_model = kv.get_u64("model.d_model");
  c.n_heads = kv.get_u64("model.n_heads");
  c.n_layers = kv.get_u64("model.n_layers");
  c.d_ff = kv.get_u64("model.d_ff");
  c.vocab_size = kv.get_u64("model.vocab_size");
  c.context_len = kv.get_u64("model.context_len");
  const auto& tie = kv.get("model.tie_embeddings");
  if (tie != "true" && tie != "false") throw FormatError("model.tie_embeddings must be true/false");
  c.tie_embeddings = tie == "true";
  return c;
}

template <class T>
struct Checkpoint {
  CausalLM<T> model;
  std::map<std::string, std::vector<T>> optimizer;  // momentum by parameter name
  std::map<std::string, std::string> state;         // training-run state
};

template <class T>
void save_checkpoint(const fs::path& dir, const CausalLM<T>& model,
                     const std::map<std::string, std::vector<T>>& optimizer = {},
                     const std::map<std::string, std::string>& state = {}) {
  const fs::path tmp = dir.string() + ".partial";
  fs::remove_all(tmp);
  fs::create_directories(tmp / "tensors");
  KeyValueFile kv;
  kv.set("format", kCheckpointFormat);
  write_model_config(kv, model.config());
  kv.set("layer_count", std::to_string(model.n_layers()));
  kv.set("tensor_dir", "tensors");
  for (const auto& [name, t] : model.named_parameters()) {
    kv.set("tensor." + name, detail::extents_str(t.shape()));
    detail::write_f32_blob<T>(tmp / "tensors" / (name + ".bin"), t.data());
  }
  if (!optimizer.empty()) {
    fs::create_directories(tmp / "optim");
    kv.set("optim_dir", "optim");
    for (const auto& [name, m] : optimizer) {
      kv.set("optim." + name, std::to_string(m.size()));
      detail::write_f32_blob<T>(tmp / "optim" / (name + ".bin"), std::span<const T>(m));
    }
  }
  for (const auto& [k, v] : state) kv.set("state." + k, v);
  kv.write(tmp / "manifest.txt");
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

template <class T>
Checkpoint<T> load_checkpoint(const fs::path& dir) {
  const auto kv = KeyValueFile::read(dir / "manifest.txt");
  if (kv.get_or("format", "") != kCheckpointFormat)
    throw FormatError("'" + dir.string() + "' is not a " + std::string(kCheckpointFormat) +
                      " checkpoint");
  const auto config = read_model_config(kv);
  if (kv.get_u64("layer_count") != config.n_layers)
    throw FormatError("layer_count disagrees with model.n_layers");
  Checkpoint<T> ck;
  ck.model = CausalLM<T>::zeros(config);
  const fs::path tensors = dir / kv.get("tensor_dir");
  std::size_t seen = 0;
  for (const auto& [key, value] : kv.entries()) {
    if (key.starts_with("tensor.")) {
      const auto name = key.substr(7);
      auto& param = ck.model.parameter(name);
      const auto shape = detail::parse_extents(value);
      if (shape != param.shape())
        throw FormatError("tensor '" + name + "' has extents " + value + ", expected " +
                          detail::extents_str(param.shape()));
      auto data = detail::read_f32_blob<T>(tensors / (name + ".bin"), param.numel());
      std::copy(data.begin(), data.end(), param.mutable_data().begin());
      ++seen;
    } else if (key.starts_with("optim.")) {
      const auto name = key.substr(6);
      ck.optimizer[name] = detail::read_f32_blob<T>(dir / kv.get("optim_dir") / (name + ".bin"),
                                                    std::stoul(value));
    } else if (key.starts_with("state.")) {
      ck.state[key.substr(6)] = value;
    }
  }
  if (seen != ck.model.named_parameters().size())
    throw FormatError("checkpoint '" + dir.string() + "' lists " + std::to_string(seen) +
                      " tensors, model needs " +
                      std::to_string(ck.model.named_parameters().size()));
  return ck;
}

}  // namespace shrinklm
