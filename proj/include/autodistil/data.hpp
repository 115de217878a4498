#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "autodistil/batch.hpp"
#include "autodistil/error.hpp"
#include "autodistil/random.hpp"

namespace autodistil {

/// Token <-> id map. Ids 0..2 are reserved for pad, mask and cls.
struct Vocab {
  std::vector<std::string> tokens;
  std::map<std::string, TokenId, std::less<>> ids;

  std::size_t size() const noexcept { return tokens.size(); }

  std::optional<TokenId> find(std::string_view word) const {
    auto it = ids.find(word);
    if (it == ids.end()) return std::nullopt;
    return it->second;
  }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens == b.tokens; }
};

inline constexpr std::size_t kReservedTokens = 3;

inline std::vector<std::string_view> whitespace_tokens(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    const std::size_t start = i;
    while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i > start) out.push_back(text.substr(start, i - start));
  }
  return out;
}

/// Whitespace vocabulary: reserved ids, then up to `max_size` words by
/// descending frequency (ties in lexicographic order).
inline Vocab build_vocab(std::string_view text, std::size_t max_size) {
  const auto words = whitespace_tokens(text);
  if (words.empty()) throw InputError("build_vocab: text contains no tokens");
  std::map<std::string_view, std::size_t> freq;
  for (auto w : words) ++freq[w];
  std::vector<std::pair<std::string_view, std::size_t>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  if (ranked.size() > max_size) ranked.resize(max_size);

  Vocab v;
  for (const char* r : {"[PAD]", "[MASK]", "[CLS]"}) {
    v.ids.emplace(r, static_cast<TokenId>(v.tokens.size()));
    v.tokens.emplace_back(r);
  }
  for (const auto& [w, n] : ranked) {
    v.ids.emplace(std::string(w), static_cast<TokenId>(v.tokens.size()));
    v.tokens.emplace_back(w);
  }
  return v;
}

/// Maps words to ids; out-of-vocabulary words become the pad id.
inline std::vector<TokenId> tokenize(std::string_view text, const Vocab& vocab) {
  std::vector<TokenId> out;
  for (auto w : whitespace_tokens(text)) out.push_back(vocab.find(w).value_or(kPadId));
  return out;
}

/// Seeded text with bigram structure: each word has a few preferred
/// successors, followed with probability `stickiness`.
inline std::string synthetic_text(std::size_t n_tokens, std::size_t n_words, std::uint64_t seed,
                                  double stickiness = 0.9) {
  if (n_words < 2) throw InputError("synthetic_text: need at least 2 distinct words");
  Rng rng(seed);
  constexpr std::size_t kSuccessors = 3;
  std::vector<std::array<std::size_t, kSuccessors>> next(n_words);
  for (auto& row : next)
    for (auto& s : row) s = rng.below(n_words);
  std::string text;
  std::size_t w = rng.below(n_words);
  for (std::size_t i = 0; i < n_tokens; ++i) {
    if (i) text += ' ';
    text += "w" + std::to_string(w);
    w = rng.uniform() < stickiness ? next[w][rng.below(kSuccessors)] : rng.below(n_words);
  }
  return text;
}

/// Token stream cut into seq_len chunks, randomly split into train and
/// validation chunk sets. The two splits are disjoint and together cover
/// every full chunk; chunks keep stream order inside each split.
struct Corpus {
  Vocab vocab;
  std::vector<TokenId> stream;
  std::size_t seq_len = 0;
  double val_fraction = 0.0;
  std::uint64_t seed = 0;
  std::vector<TokenId> train;
  std::vector<TokenId> validation;
  std::vector<std::size_t> train_chunks;
  std::vector<std::size_t> validation_chunks;
};

inline Corpus make_corpus(Vocab vocab, std::vector<TokenId> stream, std::size_t seq_len, double val_fraction,
                          std::uint64_t seed) {
  if (seq_len == 0) throw InputError("corpus: seq_len must be positive");
  if (val_fraction < 0.0 || val_fraction >= 1.0) throw InputError("corpus: val_fraction must lie in [0, 1)");
  for (TokenId id : stream)
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size())
      throw InputError("corpus: token id " + std::to_string(id) + " outside vocabulary");
  const std::size_t n_chunks = stream.size() / seq_len;
  if (n_chunks == 0)
    throw InputError("corpus: stream of " + std::to_string(stream.size()) + " tokens is shorter than seq_len " +
                     std::to_string(seq_len));
  std::vector<std::size_t> order(n_chunks);
  for (std::size_t i = 0; i < n_chunks; ++i) order[i] = i;
  Rng rng(mix_seed(seed, 0x5711));
  rng.shuffle(order.begin(), order.end());
  auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n_chunks)));
  if (val_fraction > 0.0 && n_val == 0 && n_chunks > 1) n_val = 1;
  if (n_val >= n_chunks) n_val = n_chunks - 1;

  Corpus c{std::move(vocab), std::move(stream), seq_len, val_fraction, seed, {}, {}, {}, {}};
  c.validation_chunks.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  c.train_chunks.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(c.validation_chunks.begin(), c.validation_chunks.end());
  std::sort(c.train_chunks.begin(), c.train_chunks.end());
  auto gather = [&](const std::vector<std::size_t>& chunks, std::vector<TokenId>& out) {
    for (auto ch : chunks)
      out.insert(out.end(), c.stream.begin() + static_cast<std::ptrdiff_t>(ch * seq_len),
                 c.stream.begin() + static_cast<std::ptrdiff_t>((ch + 1) * seq_len));
  };
  gather(c.train_chunks, c.train);
  gather(c.validation_chunks, c.validation);
  return c;
}

/// Fixed-length chunks of a stream grouped into batches; chunk order is
/// reshuffled every epoch from (seed, epoch) and a final partial batch is
/// dropped.
class BatchIterator {
 public:
  BatchIterator(std::span<const TokenId> stream, std::size_t batch_size, std::size_t seq_len, std::uint64_t seed)
      : stream_(stream), batch_(batch_size), seq_(seq_len), seed_(seed) {
    if (batch_size == 0 || seq_len == 0) throw InputError("batches: batch size and seq_len must be positive");
    if (stream.size() < seq_len)
      throw InputError("batches: stream of " + std::to_string(stream.size()) + " tokens is shorter than seq_len " +
                       std::to_string(seq_len));
    if (chunks() < batch_size)
      throw InputError("batches: " + std::to_string(chunks()) + " chunks cannot fill a batch of " +
                       std::to_string(batch_size));
  }

  std::size_t chunks() const { return stream_.size() / seq_; }
  std::size_t batches_per_epoch() const { return chunks() / batch_; }

  /// Chunk start offsets (in tokens) for every batch of `epoch`.
  std::vector<std::vector<std::size_t>> layout(std::size_t epoch) const {
    std::vector<std::size_t> order(chunks());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(mix_seed(seed_, epoch));
    rng.shuffle(order.begin(), order.end());
    std::vector<std::vector<std::size_t>> out(batches_per_epoch());
    for (std::size_t b = 0; b < out.size(); ++b)
      for (std::size_t i = 0; i < batch_; ++i) out[b].push_back(order[b * batch_ + i] * seq_);
    return out;
  }

  std::vector<TokenBatch> epoch(std::size_t epoch) const {
    std::vector<TokenBatch> out;
    for (const auto& starts : layout(epoch)) {
      TokenBatch tb{batch_, seq_, {}};
      tb.ids.reserve(batch_ * seq_);
      for (auto s : starts)
        tb.ids.insert(tb.ids.end(), stream_.begin() + static_cast<std::ptrdiff_t>(s),
                      stream_.begin() + static_cast<std::ptrdiff_t>(s + seq_));
      out.push_back(std::move(tb));
    }
    return out;
  }

 private:
  std::span<const TokenId> stream_;
  std::size_t batch_, seq_;
  std::uint64_t seed_;
};

/// Batch with masked positions for the MLM objective. `rows` are flat
/// indices b*seq + t, ascending; `labels` hold the original ids.
struct MaskedBatch {
  TokenBatch batch;
  std::vector<std::size_t> rows;
  std::vector<TokenId> labels;
};

/// Replaces ceil(rate * seq) uniformly chosen positions of every sequence by
/// the mask id.
inline MaskedBatch mlm_mask(const TokenBatch& batch, double rate, std::uint64_t seed) {
  if (!(rate > 0.0 && rate < 1.0)) throw InputError("mlm_mask: rate must lie in (0, 1)");
  const auto per_seq = static_cast<std::size_t>(std::ceil(rate * static_cast<double>(batch.seq) - 1e-9));
  MaskedBatch out{batch, {}, {}};
  for (std::size_t b = 0; b < batch.batch; ++b) {
    Rng rng(mix_seed(seed, b));
    std::vector<std::size_t> pos(batch.seq);
    for (std::size_t t = 0; t < batch.seq; ++t) pos[t] = t;
    for (std::size_t i = 0; i < per_seq; ++i) std::swap(pos[i], pos[i + rng.below(batch.seq - i)]);
    std::sort(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(per_seq));
    for (std::size_t i = 0; i < per_seq; ++i) {
      const std::size_t row = b * batch.seq + pos[i];
      out.rows.push_back(row);
      out.labels.push_back(batch.ids[row]);
      out.batch.ids[row] = kMaskId;
    }
  }
  return out;
}

/// Labeled sequences.
struct LabeledSet {
  TokenBatch x;
  std::vector<std::int32_t> y;
};

struct ProxyTask {
  LabeledSet train;
  LabeledSet eval;
  std::size_t num_classes = 2;
};

/// Two-class majority task. Non-reserved ids are split into two groups; a
/// sequence of class c starts with [CLS] and draws `majority` of its other
/// tokens from group c. Classes are balanced.
inline ProxyTask majority_task(std::size_t vocab_size, std::size_t seq_len, std::size_t n_train, std::size_t n_eval,
                               std::uint64_t seed, double majority = 0.8) {
  if (vocab_size < kReservedTokens + 2) throw InputError("majority_task: vocabulary too small");
  if (seq_len < 2) throw InputError("majority_task: seq_len must be at least 2");
  const std::size_t words = vocab_size - kReservedTokens, half = words / 2;
  Rng rng(seed);
  auto make = [&](std::size_t n) {
    LabeledSet set{{n, seq_len, {}}, {}};
    std::vector<std::int32_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<std::int32_t>(i % 2);
    rng.shuffle(labels.begin(), labels.end());
    for (std::size_t i = 0; i < n; ++i) {
      set.x.ids.push_back(kClsId);
      for (std::size_t t = 1; t < seq_len; ++t) {
        const bool own = rng.uniform() < majority;
        const std::size_t group = own ? static_cast<std::size_t>(labels[i]) : 1 - static_cast<std::size_t>(labels[i]);
        const std::size_t span = group == 0 ? half : words - half;
        set.x.ids.push_back(static_cast<TokenId>(kReservedTokens + group * half + rng.below(span)));
      }
    }
    set.y = std::move(labels);
    return set;
  };
  ProxyTask task;
  task.train = make(n_train);
  task.eval = make(n_eval);
  return task;
}

}  // namespace autodistil
