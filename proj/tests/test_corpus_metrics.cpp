// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "test_support.hpp"

namespace dvi {
namespace {

TEST(Corpus, StreamsAreDeterministicAndDisjoint) {
  CorpusConfig c;
  const PromptStream a(c, 256), b(c, 256), held(c, 256, 1);
  EXPECT_EQ(a.size(), 2000u);
  std::size_t count = 0, same = 0;
  for (auto p : a) {
    EXPECT_EQ(p.size(), c.prompt_len);
    EXPECT_EQ(p, b.prompt(count));
    same += p == held.prompt(count);
    ++count;
  }
  EXPECT_EQ(count, 2000u);
  EXPECT_LT(same, 20u);
  CorpusConfig other = c;
  other.seed = 6;
  EXPECT_NE(PromptStream(other, 256).prompt(0), a.prompt(0));
}

TEST(Corpus, MarkovPromptsFollowTransitionTable) {
  CorpusConfig c;
  c.n_prompts = 200;
  c.prompt_len = 40;
  const PromptStream s(c, 256);
  ASSERT_NE(s.table(), nullptr);
  const MarkovTable& table = *s.table();
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto p = s.prompt(i);
    std::string bytes(p.begin(), p.end());
    for (std::size_t j = c.order; j < bytes.size(); ++j)
      ASSERT_TRUE(table.contains(bytes.substr(j - c.order, c.order), static_cast<unsigned char>(bytes[j])))
          << "prompt " << i << " offset " << j;
  }
  EXPECT_FALSE(table.contains("zq", 'x'));
}

TEST(Corpus, TokensFoldIntoSmallVocabularies) {
  CorpusConfig c;
  c.n_prompts = 20;
  const PromptStream s(c, 32);
  for (auto p : s)
    for (Token t : p) {
      EXPECT_GE(t, 0);
      EXPECT_LT(t, 32);
    }
}

TEST(Corpus, TemplateGrammarAndValidation) {
  CorpusConfig c;
  c.kind = CorpusKind::template_grammar;
  c.n_prompts = 5;
  c.prompt_len = 30;
  const PromptStream s(c, 256);
  const auto p = s.prompt(0);
  EXPECT_EQ(p.size(), 30u);
  EXPECT_EQ(std::string(p.begin(), p.begin() + 4), "the ");
  CorpusConfig bad;
  bad.n_prompts = 0;
  EXPECT_THROW(PromptStream(bad, 256), ConfigError);
  bad = CorpusConfig{};
  bad.prompt_len = 0;
  EXPECT_THROW(PromptStream(bad, 256), ConfigError);
  EXPECT_EQ(parse_corpus_kind("template_grammar"), CorpusKind::template_grammar);
  EXPECT_THROW(parse_corpus_kind("sharegpt"), ConfigError);
}

TEST(Metrics, ComputeMatExamples) {
  EXPECT_NEAR(compute_mat(std::vector<std::size_t>{2, 4, 1}), 7.0 / 3.0, 1e-15);
  EXPECT_EQ(compute_mat(std::vector<std::size_t>{0, 0, 0}), 0.0);
  EXPECT_EQ(compute_mat(std::vector<std::size_t>{4, 4}), 4.0);
  EXPECT_THROW(compute_mat(std::vector<std::size_t>{}), Error);
}

// Synthetic steps record only what the metrics read.
SpecStepResult synthetic_step(std::size_t m, std::size_t k, bool bonus) {
  SpecStepResult r;
  r.m = m;
  r.n_verified = std::min(m + 1, k);
  r.committed.assign(m, 1);
  if (m < k) {
    r.correction = 2;
    r.committed.push_back(2);
  } else if (bonus) {
    r.bonus = 3;
    r.committed.push_back(3);
  }
  return r;
}

DecodeMetrics repeat(std::size_t m, std::size_t steps, const CostModel& cost, const SpecConfig& spec) {
  MetricsAccumulator acc(spec.k_spec);
  for (std::size_t i = 0; i < steps; ++i) acc.add(synthetic_step(m, spec.k_spec, spec.bonus_on_full_accept));
  return acc.finish(cost, spec);
}

TEST(Metrics, SpeedupProxyHandValues) {
  BackboneConfig b;
  const CostModel cost = CostModel::from_split(b);
  EXPECT_EQ(cost.c_shallow, 0.25);
  EXPECT_EQ(cost.c_deep, 0.75);
  const SpecConfig spec;
  EXPECT_NEAR(repeat(4, 10, cost, spec).speedup_proxy, 5.0 / 4.75, 1e-9);
  EXPECT_NEAR(repeat(0, 10, cost, spec).speedup_proxy, 1.0 / 1.75, 1e-9);
  const CostModel free_draft{0.0, 0.75, 0.0};
  EXPECT_NEAR(repeat(4, 3, free_draft, spec).speedup_proxy, 5.0 / 3.75, 1e-9);
  EXPECT_THROW(speedup_proxy(DecodeMetrics{}, cost, spec), Error);
}

TEST(Metrics, HeadCostEntersBothSides) {
  const CostModel cost{0.25, 0.75, 0.1};
  const SpecConfig spec;
  // 5 tokens at 1.1 each vs 4 * 0.35 + 5 * 0.85.
  EXPECT_NEAR(repeat(4, 2, cost, spec).speedup_proxy, 5.5 / (1.4 + 4.25), 1e-12);
}

TEST(Metrics, AccountingIdentityAndBounds) {
  Engine eng(3);
  for (bool bonus : {true, false}) {
    SpecConfig spec;
    spec.bonus_on_full_accept = bonus;
    MetricsAccumulator acc(spec.k_spec);
    std::size_t sum_m = 0;
    for (int i = 0; i < 500; ++i) {
      const std::size_t m = uniform_below(eng, spec.k_spec + 1);
      sum_m += m;
      acc.add(synthetic_step(m, spec.k_spec, bonus));
    }
    const DecodeMetrics d = acc.finish(CostModel{}, spec);
    EXPECT_EQ(d.accepted, sum_m);
    EXPECT_EQ(d.tokens_emitted, d.accepted + d.corrections + d.bonus_tokens);
    EXPECT_GE(d.mat, 0.0);
    EXPECT_LE(d.mat, double(spec.k_spec));
    EXPECT_LE(d.mat_with_bonus, double(spec.k_spec + 1));
    EXPECT_DOUBLE_EQ(d.batch_acceptance, double(d.accepted) / double(d.spec_steps * spec.k_spec));
    if (!bonus) {
      EXPECT_EQ(d.bonus_tokens, 0u);
    }
  }
}

TEST(Metrics, ProxyIncreasesWithMat) {
  const CostModel cost = CostModel::from_split(BackboneConfig{});
  const SpecConfig spec;
  Engine eng(4);
  // Profiles with mixed m; raising any step's m must raise the proxy.
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::size_t> ms(20);
    for (auto& m : ms) m = uniform_below(eng, spec.k_spec);
    auto proxy_of = [&](const std::vector<std::size_t>& prof) {
      MetricsAccumulator acc(spec.k_spec);
      for (std::size_t m : prof) acc.add(synthetic_step(m, spec.k_spec, true));
      return acc.finish(cost, spec);
    };
    DecodeMetrics prev = proxy_of(ms);
    for (int bump = 0; bump < 10; ++bump) {
      const std::size_t i = uniform_below(eng, ms.size());
      if (ms[i] == spec.k_spec) continue;
      ++ms[i];
      const DecodeMetrics next = proxy_of(ms);
      EXPECT_GT(next.mat, prev.mat);
      EXPECT_GT(next.speedup_proxy, prev.speedup_proxy);
      prev = next;
    }
  }
}

TEST(Metrics, MergeMatchesSingleAccumulator) {
  const SpecConfig spec;
  MetricsAccumulator all(4), a(4), b(4);
  for (std::size_t m : {0u, 4u, 2u, 1u, 4u, 3u}) {
    all.add(synthetic_step(m, 4, true));
    (m % 2 ? a : b).add(synthetic_step(m, 4, true));
  }
  a.merge(b.finish(CostModel{}, spec));
  const auto x = all.finish(CostModel{}, spec), y = a.finish(CostModel{}, spec);
  EXPECT_EQ(x.tokens_emitted, y.tokens_emitted);
  EXPECT_EQ(x.mat, y.mat);
  EXPECT_EQ(x.speedup_proxy, y.speedup_proxy);
}

}  // namespace
}  // namespace dvi
