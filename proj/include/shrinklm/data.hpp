#pragma once

// Byte-level tokenization and deterministic packed batch streaming.
//
// An epoch is: documents in a seeded permutation, each followed by EOS,
// concatenated, then cut into non-overlapping chunks of seq_len + 1 tokens.
// Chunks are grouped into batches of batch_size rows. Tokens past the last
// full batch are dropped for that epoch and reported in the log.

#include <cstdint>
#include <fstream>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "shrinklm/errors.hpp"
#include "shrinklm/log.hpp"
#include "shrinklm/model.hpp"
#include "shrinklm/rng.hpp"

namespace shrinklm {

struct ByteTokenizer {
  static constexpr std::int32_t kBos = 256;
  static constexpr std::int32_t kEos = 257;
  static constexpr std::int32_t kPad = 258;
  static constexpr std::size_t kVocabSize = 259;

  static std::vector<std::int32_t> encode(std::string_view bytes) {
    std::vector<std::int32_t> ids;
    ids.reserve(bytes.size());
    for (unsigned char c : bytes) ids.push_back(static_cast<std::int32_t>(c));
    return ids;
  }

  /// Byte ids map back to bytes; BOS/EOS/PAD carry no bytes and are skipped.
  static std::string decode(std::span<const std::int32_t> ids) {
    std::string out;
    out.reserve(ids.size());
    for (auto id : ids) {
      if (id < 0 || id >= static_cast<std::int32_t>(kVocabSize))
        throw FormatError("decode: id " + std::to_string(id) + " outside vocabulary");
      if (id < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    }
    return out;
  }
};

/// Cumulative training tokens; every schedule is keyed to this counter.
class TokenBudgetClock {
 public:
  TokenBudgetClock() = default;
  TokenBudgetClock(std::uint64_t tokens, std::uint64_t steps) : tokens_(tokens), steps_(steps) {}

  void advance(std::uint64_t batch_tokens) {
    tokens_ += batch_tokens;
    ++steps_;
  }
  std::uint64_t tokens() const { return tokens_; }
  std::uint64_t steps() const { return steps_; }

 private:
  std::uint64_t tokens_ = 0;
  std::uint64_t steps_ = 0;
};

/// Newline-delimited documents, already tokenized.
class Corpus {
 public:
  static Corpus load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open corpus '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    if (in.bad()) throw InputError("error reading corpus '" + path + "'");
    return from_text(buf.str(), path);
  }

  /// One document per line; empty lines are not documents. A trailing '\r'
  /// is stripped so CRLF files tokenize like LF files.
  static Corpus from_text(std::string_view text, std::string source = "<memory>") {
    Corpus c;
    c.source_ = std::move(source);
    std::size_t start = 0;
    while (start <= text.size()) {
      auto end = text.find('\n', start);
      if (end == std::string_view::npos) end = text.size();
      auto line = text.substr(start, end - start);
      if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
      if (!line.empty()) c.docs_.push_back(ByteTokenizer::encode(line));
      start = end + 1;
    }
    if (c.docs_.empty()) throw InputError("corpus '" + c.source_ + "' contains no documents");
    for (const auto& d : c.docs_) c.total_tokens_ += d.size() + 1;
    return c;
  }

  std::size_t documents() const { return docs_.size(); }
  /// Tokens per epoch including one EOS per document.
  std::size_t total_tokens() const { return total_tokens_; }
  const std::vector<std::int32_t>& document(std::size_t i) const { return docs_[i]; }
  const std::string& source() const { return source_; }

 private:
  std::vector<std::vector<std::int32_t>> docs_;
  std::size_t total_tokens_ = 0;
  std::string source_;
};

struct StreamConfig {
  std::size_t batch_size = 8;
  std::size_t seq_len = 256;
  bool shuffle = true;
};

struct SequenceBatch {
  TokenMatrix ids;                      // [batch_size, seq_len + 1]
  std::vector<std::size_t> doc_ends;    // flat offsets of EOS tokens in ids
  std::uint64_t index = 0;              // global batch index
  std::uint64_t epoch = 0;
};

/// Deterministic batch iterator; (corpus, config, seed) fix the sequence.
/// Batches are addressable by global index, which is what resume uses.
class BatchStream {
 public:
  BatchStream(std::shared_ptr<const Corpus> corpus, StreamConfig config, std::uint64_t seed)
      : corpus_(std::move(corpus)), config_(config), seed_(seed) {
    if (config_.batch_size == 0 || config_.seq_len == 0)
      throw ConfigError("batch_size and seq_len must be positive");
    chunk_ = config_.seq_len + 1;
    batches_per_epoch_ = corpus_->total_tokens() / chunk_ / config_.batch_size;
    if (batches_per_epoch_ == 0)
      throw InputError("corpus '" + corpus_->source() + "' has " +
                       std::to_string(corpus_->total_tokens()) +
                       " tokens, fewer than one batch of " +
                       std::to_string(chunk_ * config_.batch_size));
  }

  std::size_t batches_per_epoch() const { return batches_per_epoch_; }
  std::size_t dropped_tokens_per_epoch() const {
    return corpus_->total_tokens() - batches_per_epoch_ * config_.batch_size * chunk_;
  }
  std::uint64_t position() const { return next_; }
  void seek(std::uint64_t batch_index) { next_ = batch_index; }
  const StreamConfig& config() const { return config_; }

  SequenceBatch next() {
    const std::uint64_t epoch = next_ / batches_per_epoch_;
    const std::uint64_t within = next_ % batches_per_epoch_;
    materialize(epoch);
    SequenceBatch b;
    b.index = next_++;
    b.epoch = epoch;
    b.ids.batch = config_.batch_size;
    b.ids.seq = chunk_;
    const std::size_t width = config_.batch_size * chunk_;
    const auto first = epoch_tokens_.begin() + static_cast<std::ptrdiff_t>(within * width);
    b.ids.ids.assign(first, first + static_cast<std::ptrdiff_t>(width));
    for (std::size_t i = 0; i < width; ++i)
      if (b.ids.ids[i] == ByteTokenizer::kEos) b.doc_ends.push_back(i);
    return b;
  }

 private:
  void materialize(std::uint64_t epoch) {
    if (materialized_ && epoch == epoch_) return;
    std::vector<std::size_t> order;
    if (config_.shuffle) {
      order = Rng(derive_seed(seed_, epoch + 1)).permutation(corpus_->documents());
    } else {
      order.resize(corpus_->documents());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    }
    epoch_tokens_.clear();
    epoch_tokens_.reserve(corpus_->total_tokens());
    for (auto d : order) {
      const auto& doc = corpus_->document(d);
      epoch_tokens_.insert(epoch_tokens_.end(), doc.begin(), doc.end());
      epoch_tokens_.push_back(ByteTokenizer::kEos);
    }
    if (const auto dropped = dropped_tokens_per_epoch(); dropped > 0)
      logger().info("epoch {} of '{}': final partial batch of {} tokens dropped", epoch,
                     corpus_->source(), dropped);
    epoch_ = epoch;
    materialized_ = true;
  }

  std::shared_ptr<const Corpus> corpus_;
  StreamConfig config_;
  std::uint64_t seed_;
  std::size_t chunk_ = 0;
  std::size_t batches_per_epoch_ = 0;
  std::uint64_t next_ = 0;
  std::vector<std::int32_t> epoch_tokens_;
  std::uint64_t epoch_ = 0;
  bool materialized_ = false;
};

inline BatchStream stream_batches(const std::string& corpus_path, StreamConfig config,
                                  std::uint64_t seed) {
  return BatchStream(std::make_shared<const Corpus>(Corpus::load(corpus_path)), config, seed);
}

}  // namespace shrinklm
