// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic, seeded prompt streams standing in for live traffic.

#include <array>
#include <cstddef>
#include <cstdint>
#include <iterator>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "dvi/backbone.hpp"
#include "dvi/error.hpp"
#include "dvi/rng.hpp"

namespace dvi {

enum class CorpusKind { markov_bytes, template_grammar };

inline std::string_view to_string(CorpusKind k) {
  return k == CorpusKind::markov_bytes ? "markov_bytes" : "template_grammar";
}

inline CorpusKind parse_corpus_kind(std::string_view s) {
  if (s == "markov_bytes") return CorpusKind::markov_bytes;
  if (s == "template_grammar") return CorpusKind::template_grammar;
  throw ConfigError("unknown corpus kind '" + std::string(s) + "'");
}

struct CorpusConfig {
  CorpusKind kind = CorpusKind::markov_bytes;
  std::size_t order = 2;
  std::size_t n_prompts = 2000;
  std::size_t prompt_len = 16;
  std::size_t gen_len = 32;
  std::uint64_t seed = 5;

  void validate() const {
    if (n_prompts < 1) throw ConfigError("corpus.n_prompts must be >= 1");
    if (prompt_len < 1) throw ConfigError("corpus.prompt_len must be >= 1");
    if (kind == CorpusKind::markov_bytes && (order < 1 || order > 8))
      throw ConfigError("corpus.order must lie in [1, 8]");
  }
};

inline constexpr std::string_view kSampleText =
    "the harbor was quiet in the early morning and the boats rocked against the pier. "
    "a fisherman coiled his rope and looked at the grey water. the gulls were already "
    "awake, circling above the market where the first carts arrived with bread and "
    "salt. in the town above the harbor the bakers opened their doors and the smell of "
    "warm loaves drifted down the narrow streets. children ran to school along the old "
    "wall, and the teacher rang the bell twice before the lesson began. the lesson was "
    "about rivers: where they start, how they bend, and why they always find the sea. "
    "one boy asked whether a river could run backwards, and the teacher smiled and said "
    "that the tide sometimes pushes the water upstream for a while, but the river always "
    "wins in the end. after school the children walked back down to the harbor to watch "
    "the boats come home. the fishermen sorted their catch into crates of ice and sold "
    "it at the market before the evening bell. when the lamps were lit along the pier "
    "the town grew quiet again, and the sea kept its slow rhythm against the stones. ";

inline Token byte_to_token(unsigned char c, std::size_t vocab) {
  return static_cast<Token>(static_cast<std::size_t>(c) % vocab);
}

/// Order-n byte transition table built from the embedded sample, read
/// cyclically so every context has a successor.
class MarkovTable {
 public:
  explicit MarkovTable(std::size_t order, std::string_view text = kSampleText) : order_(order), text_(text) {
    if (order < 1 || text.size() <= order) throw ConfigError("markov order incompatible with sample text");
    for (std::size_t i = 0; i < text.size(); ++i) {
      std::string ctx;
      for (std::size_t j = 0; j < order; ++j) ctx.push_back(text[(i + j) % text.size()]);
      table_[ctx][static_cast<unsigned char>(text[(i + order) % text.size()])] += 1;
    }
  }

  std::size_t order() const { return order_; }

  bool contains(std::string_view ctx, unsigned char next) const {
    auto it = table_.find(std::string(ctx));
    return it != table_.end() && it->second.count(next) > 0;
  }

  /// Bytes of a fresh walk of length n starting at a seeded offset of the text.
  std::string walk(std::size_t n, Engine& eng) const {
    const std::size_t start = uniform_below(eng, text_.size());
    std::string out;
    for (std::size_t j = 0; j < order_ && out.size() < n; ++j) out.push_back(text_[(start + j) % text_.size()]);
    while (out.size() < n) {
      const auto& succ = table_.at(out.substr(out.size() - order_));
      std::uint64_t total = 0;
      for (const auto& [_, c] : succ) total += c;
      std::uint64_t pick = uniform_below(eng, total);
      for (const auto& [byte, c] : succ) {
        if (pick < c) {
          out.push_back(static_cast<char>(byte));
          break;
        }
        pick -= c;
      }
    }
    return out;
  }

 private:
  std::size_t order_;
  std::string text_;
  std::map<std::string, std::map<unsigned char, std::uint64_t>> table_;
};

namespace detail {

inline std::string grammar_walk(std::size_t n, Engine& eng) {
  static constexpr std::array<std::string_view, 8> nouns = {"cat",  "river", "baker", "ship",
                                                            "bell", "child", "lamp",  "market"};
  static constexpr std::array<std::string_view, 6> verbs = {"sees", "finds", "hears", "follows", "carries", "greets"};
  static constexpr std::array<std::string_view, 5> adjs = {"old", "quiet", "grey", "warm", "small"};
  auto pick = [&eng](const auto& list) { return list[uniform_below(eng, list.size())]; };
  std::string out;
  while (out.size() < n) {
    std::string s = "the ";
    if (uniform_below(eng, 2) == 0) s += std::string(pick(adjs)) + " ";
    s += std::string(pick(nouns)) + " " + std::string(pick(verbs)) + " the " + std::string(pick(nouns)) + ". ";
    out += s;
  }
  out.resize(n);
  return out;
}

}  // namespace detail

/// Deterministic, index-addressable prompt stream. `stream` separates the
/// training stream (0) from held-out ones; prompts from different streams are
/// drawn from disjoint seed keys.
class PromptStream {
 public:
  PromptStream(CorpusConfig config, std::size_t vocab, std::uint64_t stream = 0, std::size_t count = 0)
      : config_(config), vocab_(vocab), stream_(stream), count_(count ? count : config.n_prompts) {
    config_.validate();
    if (config_.kind == CorpusKind::markov_bytes) table_.emplace_back(config_.order);
  }

  std::size_t size() const { return count_; }

  std::vector<Token> prompt(std::size_t i) const {
    Engine eng(mix_keys(mix_keys(config_.seed, stream_), i));
    const std::string bytes = config_.kind == CorpusKind::markov_bytes ? table_.front().walk(config_.prompt_len, eng)
                                                                       : detail::grammar_walk(config_.prompt_len, eng);
    std::vector<Token> out;
    out.reserve(bytes.size());
    for (char c : bytes) out.push_back(byte_to_token(static_cast<unsigned char>(c), vocab_));
    return out;
  }

  const MarkovTable* table() const { return table_.empty() ? nullptr : &table_.front(); }

  class iterator {
   public:
    using iterator_category = std::input_iterator_tag;
    using value_type = std::vector<Token>;
    using difference_type = std::ptrdiff_t;
    iterator(const PromptStream* s, std::size_t i) : s_(s), i_(i) {}
    value_type operator*() const { return s_->prompt(i_); }
    iterator& operator++() {
      ++i_;
      return *this;
    }
    bool operator==(const iterator& o) const { return i_ == o.i_; }

   private:
    const PromptStream* s_;
    std::size_t i_;
  };
  iterator begin() const { return {this, 0}; }
  iterator end() const { return {this, count_}; }

 private:
  CorpusConfig config_;
  std::size_t vocab_;
  std::uint64_t stream_;
  std::size_t count_;
  std::vector<MarkovTable> table_;
};

inline PromptStream generate_prompt_stream(const CorpusConfig& config, std::size_t vocab) {
  return PromptStream(config, vocab);
}

}  // namespace dvi
