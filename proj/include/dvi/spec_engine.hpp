// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dvi/backbone.hpp"
#include "dvi/error.hpp"
#include "dvi/heads.hpp"
#include "dvi/replay_buffer.hpp"
#include "dvi/rng.hpp"

namespace dvi {

enum class DraftMode { greedy, sample };

struct SpecConfig {
  std::size_t k_spec = 4;
  DraftMode draft_mode = DraftMode::greedy;
  bool bonus_on_full_accept = true;
  std::uint64_t sample_seed = 0;
  /// Token that ends a sequence; negative disables the check.
  Token eos = -1;

  void validate() const {
    if (k_spec < 1) throw ConfigError("spec.k_spec must be >= 1");
  }
};

/// Read-only view of the three pieces a decode loop needs.
struct ModelView {
  const BackboneWeights& backbone;
  const VerifierHead& verifier;
  const DraftHead& drafter;
};

/// A sequence being decoded. All committed tokens except the last have been
/// pushed through both paths; the last one is pending.
class DecodeState {
 public:
  DecodeState(const BackboneWeights& w, std::span<const Token> prompt, std::uint64_t sample_seed = 0)
      : cache_(w.config), engine_(sample_seed) {
    if (prompt.empty()) throw Error("prompt must contain at least one token");
    if (prompt.size() > w.config.max_ctx)
      throw ContextOverflow("prompt of " + std::to_string(prompt.size()) + " tokens exceeds context limit");
    tokens_.assign(prompt.begin(), prompt.end());
    prompt_len_ = prompt.size();
    for (std::size_t i = 0; i + 1 < prompt.size(); ++i) {
      HiddenState h = forward_shallow(w, cache_, prompt[i]);
      forward_deep(w, cache_, h);
    }
  }

  const std::vector<Token>& tokens() const { return tokens_; }
  std::span<const Token> generated() const {
    return std::span<const Token>(tokens_).subspan(prompt_len_);
  }
  std::size_t prompt_len() const { return prompt_len_; }
  bool finished() const { return finished_; }
  KVCache& cache() { return cache_; }
  const KVCache& cache() const { return cache_; }
  Engine& engine() { return engine_; }

  void commit(std::span<const Token> toks, bool finish) {
    tokens_.insert(tokens_.end(), toks.begin(), toks.end());
    finished_ = finished_ || finish;
  }

 private:
  KVCache cache_;
  Engine engine_;
  std::vector<Token> tokens_;
  std::size_t prompt_len_ = 0;
  bool finished_ = false;
};

struct SpecStepResult {
  std::vector<Token> drafted;   // k_spec proposals
  std::vector<Token> verified;  // verifier's greedy token per drafted position
  std::size_t m = 0;            // longest agreeing prefix
  std::vector<Token> committed;
  std::optional<Token> correction;
  std::optional<Token> bonus;
  std::size_t n_verified = 0;   // min(m + 1, k_spec): positions the commit rule inspects
  bool finished = false;
  std::vector<HiddenState> shallow_states;  // h_k that produced each draft
  std::vector<Logits> verifier_logits;      // target logits per drafted position
  std::vector<RolloutTuple> tuples;
};

/// Longest prefix on which drafted and verified agree.
inline std::size_t agreeing_prefix(std::span<const Token> drafted, std::span<const Token> verified) {
  std::size_t m = 0;
  while (m < drafted.size() && m < verified.size() && drafted[m] == verified[m]) ++m;
  return m;
}

/// Tuples for positions 1..min(m + 1, k_spec): reward 1 through m, reward 0 at
/// the first reject. Later positions were never verified and are not logged.
inline std::vector<RolloutTuple> log_tuples(std::span<const Token> drafted, std::size_t m,
                                            std::span<const HiddenState> shallow_states,
                                            std::span<const Logits> verifier_logits,
                                            std::uint64_t step_id) {
  const std::size_t k_spec = drafted.size();
  const std::size_t n = std::min(m + 1, k_spec);
  detail::require_dims(shallow_states.size() >= n && verifier_logits.size() >= n, "log_tuples inputs");
  std::vector<RolloutTuple> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    RolloutTuple t;
    t.h_k = shallow_states[i].vector;
    t.action = drafted[i];
    t.verifier_logits = verifier_logits[i];
    t.reward = i < m ? 1 : 0;
    t.position = i + 1;
    t.step_id = step_id;
    out.push_back(std::move(t));
  }
  return out;
}

inline std::vector<RolloutTuple> log_tuples(const SpecStepResult& r, std::uint64_t step_id) {
  return log_tuples(r.drafted, r.m, r.shallow_states, r.verifier_logits, step_id);
}

namespace detail {

inline Token propose(const DraftHead& drafter, const HiddenState& h, DraftMode mode, Engine& eng) {
  const Logits z = draft_logits(drafter, h);
  if (mode == DraftMode::greedy) return argmax_token(z);
  const Vector p = softmax_temp(z, 1.0);
  const double u = uniform01(eng);
  double c = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    c += p[i];
    if (u < c) return static_cast<Token>(i);
  }
  return static_cast<Token>(p.size() - 1);
}

}  // namespace detail

/// One draft/verify/commit cycle. Drafts k_spec tokens by self-feeding the
/// shallow path, verifies all of them in a single batched deep pass, commits
/// the agreeing prefix plus the verifier's token at the first mismatch (or a
/// bonus token on full acceptance), and rolls the caches back to the commit.
inline SpecStepResult spec_step(const ModelView& model, DecodeState& state, const SpecConfig& config,
                                std::uint64_t step_id = 0) {
  config.validate();
  const BackboneWeights& w = model.backbone;
  const std::size_t k = config.k_spec;
  if (state.tokens().size() + k + 1 > w.config.max_ctx)
    throw ContextOverflow("no room for a " + std::to_string(k) + "-token speculative step at length " +
                          std::to_string(state.tokens().size()));
  KVCache& cache = state.cache();
  const std::size_t t = state.tokens().size() - 1;
  if (cache.shallow_len() != t || cache.deep_len() != t)
    throw InvariantViolation("decode state cache out of sync with committed tokens");

  SpecStepResult r;
  r.drafted.reserve(k);
  r.shallow_states.reserve(k);
  Token next = state.tokens().back();
  for (std::size_t i = 0; i < k; ++i) {
    r.shallow_states.push_back(forward_shallow(w, cache, next));
    next = detail::propose(model.drafter, r.shallow_states.back(), config.draft_mode, state.engine());
    r.drafted.push_back(next);
  }

  const std::vector<HiddenState> deep = forward_deep_batch(w, cache, r.shallow_states);
  r.verifier_logits = verifier_logits_batch(model.verifier, deep);
  r.verified.reserve(k);
  for (const auto& z : r.verifier_logits) r.verified.push_back(argmax_token(z));

  r.m = agreeing_prefix(r.drafted, r.verified);
  r.n_verified = std::min(r.m + 1, k);
  r.committed.assign(r.drafted.begin(), r.drafted.begin() + static_cast<std::ptrdiff_t>(r.m));
  if (r.m < k) {
    r.correction = r.verified[r.m];
    r.committed.push_back(*r.correction);
    cache.rollback(cache.shallow_len() - (t + r.m + 1));
  } else if (config.bonus_on_full_accept) {
    const HiddenState hb = forward_shallow(w, cache, r.drafted.back());
    const HiddenState hl = forward_deep(w, cache, hb);
    r.bonus = argmax_token(verifier_logits(model.verifier, hl));
    r.committed.push_back(*r.bonus);
  }

  if (config.eos >= 0) {
    for (std::size_t i = 0; i < r.committed.size(); ++i) {
      if (r.committed[i] == config.eos) {
        r.committed.resize(i + 1);
        r.finished = true;
        break;
      }
    }
  }
  r.tuples = log_tuples(r, step_id);
  state.commit(r.committed, r.finished);
  return r;
}

/// Plain greedy decoding through the full model, one token per pass. The
/// reference a speculative decode must reproduce token for token.
inline std::vector<Token> greedy_ar_reference(const BackboneWeights& w, const VerifierHead& verifier,
                                              std::span<const Token> prompt, std::size_t n_tokens,
                                              Token eos = -1) {
  if (prompt.empty()) throw Error("prompt must contain at least one token");
  std::vector<Token> out;
  if (n_tokens == 0) return out;
  if (prompt.size() + n_tokens - 1 > w.config.max_ctx)
    throw ContextOverflow("greedy reference would exceed the context limit");
  KVCache cache(w.config);
  out.reserve(n_tokens);
  Token next = 0;
  for (std::size_t i = 0; i < prompt.size(); ++i) {
    const HiddenState h = forward_shallow(w, cache, prompt[i]);
    const HiddenState hl = forward_deep(w, cache, h);
    if (i + 1 == prompt.size()) next = argmax_token(verifier_logits(verifier, hl));
  }
  out.push_back(next);
  while (out.size() < n_tokens && next != eos) {
    const HiddenState h = forward_shallow(w, cache, next);
    const HiddenState hl = forward_deep(w, cache, h);
    next = argmax_token(verifier_logits(verifier, hl));
    out.push_back(next);
  }
  return out;
}

/// Speculatively decodes until at least n_tokens are generated or EOS; the
/// last step may overshoot by up to k_spec tokens.
inline std::vector<SpecStepResult> speculative_decode(const ModelView& model, DecodeState& state,
                                                      const SpecConfig& config, std::size_t n_tokens) {
  std::vector<SpecStepResult> steps;
  while (!state.finished() && state.generated().size() < n_tokens) steps.push_back(spec_step(model, state, config));
  return steps;
}

}  // namespace dvi
