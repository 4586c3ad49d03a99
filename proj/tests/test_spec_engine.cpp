// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>

#include "test_support.hpp"

namespace dvi {
namespace {

using testing::make_small_rig;
using testing::random_tokens;
using testing::SmallRig;

TEST(AgreeingPrefix, Examples) {
  const std::vector<Token> d{5, 9, 2, 7};
  EXPECT_EQ(agreeing_prefix(d, std::vector<Token>{5, 9, 2, 7}), 4u);
  EXPECT_EQ(agreeing_prefix(d, std::vector<Token>{5, 3, 2, 7}), 1u);
  EXPECT_EQ(agreeing_prefix(d, std::vector<Token>{8, 9, 2, 7}), 0u);
}

std::vector<HiddenState> dummy_states(std::size_t n) {
  std::vector<HiddenState> s(n);
  for (std::size_t i = 0; i < n; ++i) s[i] = {i, PathTag::shallow, Vector(3, double(i))};
  return s;
}

TEST(LogTuples, CoverOnlyVerifiedPositions) {
  const std::vector<Token> d{5, 9, 2, 7};
  const auto states = dummy_states(4);
  const std::vector<Logits> logits(4, Logits(6, 0.0));
  struct Case {
    std::size_t m;
    std::vector<int> rewards;
  };
  for (const Case& c : {Case{2, {1, 1, 0}}, Case{0, {0}}, Case{4, {1, 1, 1, 1}}, Case{3, {1, 1, 1, 0}}}) {
    const auto t = log_tuples(d, c.m, states, logits, 42);
    ASSERT_EQ(t.size(), c.rewards.size()) << "m=" << c.m;
    for (std::size_t i = 0; i < t.size(); ++i) {
      EXPECT_EQ(t[i].reward, c.rewards[i]);
      EXPECT_EQ(t[i].position, i + 1);
      EXPECT_EQ(t[i].action, d[i]);
      EXPECT_EQ(t[i].h_k, states[i].vector);
      EXPECT_EQ(t[i].step_id, 42u);
    }
  }
}

void check_step_invariants(const SpecStepResult& r, const SpecConfig& cfg) {
  const std::size_t k = cfg.k_spec;
  ASSERT_EQ(r.drafted.size(), k);
  ASSERT_EQ(r.verified.size(), k);
  for (std::size_t j = 0; j < r.m; ++j) EXPECT_EQ(r.drafted[j], r.verified[j]);
  std::vector<Token> expect(r.drafted.begin(), r.drafted.begin() + std::ptrdiff_t(r.m));
  if (r.m < k) {
    EXPECT_NE(r.drafted[r.m], r.verified[r.m]);
    ASSERT_TRUE(r.correction.has_value());
    EXPECT_EQ(*r.correction, r.verified[r.m]);
    EXPECT_FALSE(r.bonus.has_value());
    expect.push_back(r.verified[r.m]);
  } else {
    EXPECT_FALSE(r.correction.has_value());
    EXPECT_EQ(r.bonus.has_value(), cfg.bonus_on_full_accept);
    if (r.bonus) expect.push_back(*r.bonus);
  }
  if (!r.finished) {
    EXPECT_EQ(r.committed, expect);
  }
  EXPECT_EQ(r.n_verified, std::min(r.m + 1, k));
  ASSERT_EQ(r.tuples.size(), std::min(r.m + 1, k));
  for (std::size_t i = 0; i < r.tuples.size(); ++i) {
    EXPECT_EQ(r.tuples[i].position, i + 1);
    EXPECT_LE(r.tuples[i].position, r.m + 1);
    EXPECT_EQ(r.tuples[i].reward, i < r.m ? 1 : 0);
    EXPECT_EQ(r.tuples[i].reward == 1, r.drafted[i] == r.verified[i]);
  }
}

// Perturbs the adapter so drafts differ from the untrained head.
void scramble_adapter(DraftHead& h, Engine& eng, double scale) {
  for (double& x : h.a.data) x = scale * (2.0 * uniform01(eng) - 1.0);
}

TEST(SpecStep, LosslessAgainstGreedyReference) {
  Engine eng(31);
  int pairs = 0;
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    SmallRig rig = make_small_rig(seed);
    for (int p = 0; p < 8; ++p) {
      scramble_adapter(rig.drafter, eng, 0.2 * p);
      const auto prompt = random_tokens(eng, 1 + uniform_below(eng, 6), rig.w.config.vocab);
      for (std::size_t k : {1u, 3u, 4u}) {
        SpecConfig cfg;
        cfg.k_spec = k;
        cfg.bonus_on_full_accept = (p % 2 == 0);
        cfg.draft_mode = (p % 3 == 0) ? DraftMode::sample : DraftMode::greedy;
        const std::size_t n = 24;
        DecodeState st(rig.w, prompt, seed * 100 + p);
        const auto steps = speculative_decode(rig.view(), st, cfg, n);
        for (const auto& r : steps) check_step_invariants(r, cfg);
        const auto ref = greedy_ar_reference(rig.w, rig.verifier, prompt, n);
        ASSERT_GE(st.generated().size(), n);
        EXPECT_TRUE(std::equal(ref.begin(), ref.end(), st.generated().begin()))
            << "seed " << seed << " prompt " << p << " k " << k;
        ++pairs;
      }
    }
  }
  EXPECT_EQ(pairs, 96);
}

TEST(SpecStep, CachesTrackCommittedTokens) {
  SmallRig rig = make_small_rig(3);
  const std::vector<Token> prompt{1, 2, 3};
  DecodeState st(rig.w, prompt);
  SpecConfig cfg;
  for (int i = 0; i < 6; ++i) {
    spec_step(rig.view(), st, cfg, i);
    EXPECT_EQ(st.cache().shallow_len(), st.tokens().size() - 1);
    EXPECT_EQ(st.cache().deep_len(), st.tokens().size() - 1);
  }
}

TEST(SpecStep, ContextOverflowIsReported) {
  auto bc = testing::small_backbone();
  bc.max_ctx = 8;
  SmallRig rig{init_backbone(bc), {}, {}};
  rig.verifier = init_verifier(bc, testing::small_head());
  rig.drafter = init_draft_head(rig.verifier, testing::small_head());
  const std::vector<Token> prompt{1, 2, 3, 4};
  DecodeState st(rig.w, prompt);
  SpecConfig cfg;
  EXPECT_THROW(spec_step(rig.view(), st, cfg), ContextOverflow);
  EXPECT_THROW(greedy_ar_reference(rig.w, rig.verifier, prompt, 6), ContextOverflow);
  EXPECT_THROW(DecodeState(rig.w, std::vector<Token>(9, 0)), ContextOverflow);
}

TEST(GreedyReference, ZeroTokensIsEmpty) {
  SmallRig rig = make_small_rig();
  EXPECT_TRUE(greedy_ar_reference(rig.w, rig.verifier, std::vector<Token>{4}, 0).empty());
  EXPECT_THROW(greedy_ar_reference(rig.w, rig.verifier, std::vector<Token>{}, 3), Error);
}

// Deep blocks contribute nothing, so h_L = norm(h_k). With zero-mean verifier
// rows the norm only rescales the logits, and a drafter copying the verifier
// agrees on every position.
SmallRig identity_deep_rig() {
  SmallRig rig = make_small_rig(9);
  for (std::size_t l = rig.w.config.split; l < rig.w.config.layers; ++l) {
    auto& lw = rig.w.layers[l];
    lw.wo = Matrix(lw.wo.rows, lw.wo.cols);
    lw.w2 = Matrix(lw.w2.rows, lw.w2.cols);
    lw.b2.assign(lw.b2.size(), 0.0);
  }
  auto& wv = rig.verifier.weight;
  for (std::size_t r = 0; r < wv.rows; ++r) {
    auto row = wv.row(r);
    double mean = 0.0;
    for (double x : row) mean += x;
    mean /= double(row.size());
    for (double& x : row) x -= mean;
  }
  rig.drafter = init_draft_head(rig.verifier, testing::small_head());
  rig.drafter.a = Matrix(rig.drafter.a.rows, rig.drafter.a.cols);
  return rig;
}

TEST(SpecStep, AgreeingDrafterIsAlwaysFullyAccepted) {
  const SmallRig rig = identity_deep_rig();
  Engine eng(5);
  for (int p = 0; p < 10; ++p) {
    const auto prompt = random_tokens(eng, 4, rig.w.config.vocab);
    DecodeState st(rig.w, prompt);
    SpecConfig cfg;
    const auto steps = speculative_decode(rig.view(), st, cfg, 30);
    for (const auto& r : steps) {
      EXPECT_EQ(r.m, cfg.k_spec);
      EXPECT_EQ(r.committed.size(), cfg.k_spec + 1);
      EXPECT_EQ(r.tuples.size(), cfg.k_spec);
    }
    const auto ref = greedy_ar_reference(rig.w, rig.verifier, prompt, 30);
    EXPECT_TRUE(std::equal(ref.begin(), ref.end(), st.generated().begin()));
  }
}

TEST(SpecStep, StrictEmitRuleSkipsBonus) {
  const SmallRig rig = identity_deep_rig();
  DecodeState st(rig.w, std::vector<Token>{2, 5});
  SpecConfig cfg;
  cfg.bonus_on_full_accept = false;
  const auto r = spec_step(rig.view(), st, cfg);
  EXPECT_EQ(r.m, cfg.k_spec);
  EXPECT_FALSE(r.bonus.has_value());
  EXPECT_EQ(r.committed, r.drafted);
  check_step_invariants(r, cfg);
}

TEST(SpecStep, EosTruncatesCommitLikeReference) {
  SmallRig rig = make_small_rig(4);
  Engine eng(8);
  int checked = 0;
  for (int p = 0; p < 10; ++p) {
    const auto prompt = random_tokens(eng, 3, rig.w.config.vocab);
    const auto free_run = greedy_ar_reference(rig.w, rig.verifier, prompt, 20);
    const Token eos = free_run[5];
    const auto ref = greedy_ar_reference(rig.w, rig.verifier, prompt, 20, eos);
    SpecConfig cfg;
    cfg.eos = eos;
    DecodeState st(rig.w, prompt);
    speculative_decode(rig.view(), st, cfg, 20);
    EXPECT_TRUE(st.finished());
    EXPECT_EQ(st.generated().back(), eos);
    EXPECT_EQ(std::vector<Token>(st.generated().begin(), st.generated().end()), ref);
    ++checked;
  }
  EXPECT_EQ(checked, 10);
}

TEST(SpecConfigTest, ZeroDepthIsRejected) {
  SpecConfig cfg;
  cfg.k_spec = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

}  // namespace
}  // namespace dvi
