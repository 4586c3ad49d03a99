// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"

namespace dvi {
namespace {

using testing::max_abs_diff;
using testing::random_matrix;
using testing::random_vector;

DraftHead random_head(Engine& eng, std::size_t v, std::size_t d, std::size_t r, double gamma = 0.7) {
  DraftHead h;
  h.base = random_matrix(eng, v, d);
  h.a = random_matrix(eng, v, r);
  h.b = random_matrix(eng, r, d);
  h.gamma = gamma;
  return h;
}

TEST(Heads, ZeroVerifierGivesZeroLogits) {
  const VerifierHead v{Matrix(5, 3)};
  EXPECT_EQ(verifier_logits(v, Vector{1.0, -2.0, 3.0}), Vector(5, 0.0));
}

TEST(Heads, VerifierPicksOutColumnForBasisVector) {
  VerifierHead v{Matrix(4, 3)};
  for (std::size_t i = 0; i < 3; ++i) v.weight(i, i) = 1.0;
  EXPECT_EQ(verifier_logits(v, Vector{1.0, 0.0, 0.0}), (Vector{1.0, 0.0, 0.0, 0.0}));
}

TEST(Heads, VerifierMatchesNaiveProduct) {
  Engine eng(1);
  const VerifierHead v{random_matrix(eng, 9, 6)};
  const Vector h = random_vector(eng, 6);
  const Vector z = verifier_logits(v, h);
  for (std::size_t r = 0; r < 9; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 6; ++c) s += v.weight(r, c) * h[c];
    EXPECT_NEAR(z[r], s, 1e-12);
  }
  EXPECT_THROW(verifier_logits(v, Vector(5)), DimensionError);
}

TEST(Heads, DraftMatchesDenseOracle) {
  Engine eng(2);
  const DraftHead h = random_head(eng, 7, 5, 3);
  const Vector x = random_vector(eng, 5);
  Matrix dense = h.base;
  for (std::size_t v = 0; v < 7; ++v)
    for (std::size_t c = 0; c < 5; ++c)
      for (std::size_t j = 0; j < 3; ++j) dense(v, c) += h.gamma * h.a(v, j) * h.b(j, c);
  const Vector z = draft_logits(h, x);
  for (std::size_t v = 0; v < 7; ++v) {
    double s = 0.0;
    for (std::size_t c = 0; c < 5; ++c) s += dense(v, c) * x[c];
    EXPECT_NEAR(z[v], s, 1e-12);
  }
}

TEST(Heads, ZeroAdapterOrGammaGivesBaseProjection) {
  Engine eng(3);
  DraftHead h = random_head(eng, 6, 4, 2);
  const Vector x = random_vector(eng, 4);
  const Vector base = gemv(h.base, x);
  DraftHead g0 = h;
  g0.gamma = 0.0;
  EXPECT_EQ(draft_logits(g0, x), base);
  h.a = Matrix(6, 2);
  EXPECT_EQ(draft_logits(h, x), base);
}

TEST(Heads, AdapterIsLinear) {
  Engine eng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const DraftHead h = random_head(eng, 8, 6, 3, 0.5 + trial);
    DraftHead zero = h;
    zero.a = Matrix(8, 3);
    const Vector x = random_vector(eng, 6);
    const Vector delta = gemv(h.a, gemv(h.b, x));
    const Vector z1 = draft_logits(h, x), z0 = draft_logits(zero, x);
    for (std::size_t v = 0; v < 8; ++v) EXPECT_NEAR(z1[v] - z0[v], h.gamma * delta[v], 1e-10);
  }
}

TEST(Heads, InitDraftHeadStartsAtVerifierCopy) {
  const auto bb = testing::small_backbone();
  const HeadConfig hc = testing::small_head();
  const VerifierHead v = init_verifier(bb, hc);
  const DraftHead d = init_draft_head(v, hc);
  EXPECT_EQ(d.base, v.weight);
  EXPECT_EQ(d.a, Matrix(bb.vocab, hc.rank));
  EXPECT_EQ(d.rank(), hc.rank);
  Engine eng(5);
  const Vector x = random_vector(eng, bb.width);
  EXPECT_EQ(draft_logits(d, x), verifier_logits(v, x));
  HeadConfig bad = hc;
  bad.rank = bb.width + 1;
  EXPECT_THROW(init_draft_head(v, bad), ConfigError);
}

TEST(Heads, ProjectOutRemovesDirection) {
  Engine eng(6);
  VerifierHead v{random_matrix(eng, 10, 5)};
  const Vector dir = random_vector(eng, 5);
  project_out(v, dir);
  for (std::size_t r = 0; r < 10; ++r) EXPECT_NEAR(dot(v.weight.row(r), dir), 0.0, 1e-12);
  const VerifierHead before = v;
  project_out(v, Vector(5, 0.0));
  EXPECT_EQ(v.weight, before.weight);
}

TEST(Heads, SoftmaxExamples) {
  const Vector u = softmax_temp(Vector{0.0, 0.0, 0.0}, 1.0);
  for (double p : u) EXPECT_NEAR(p, 1.0 / 3.0, 1e-15);
  const Vector a = softmax_temp(Vector{std::log(2.0), 0.0}, 1.0);
  EXPECT_NEAR(a[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(a[1], 1.0 / 3.0, 1e-15);
  const Vector b = softmax_temp(Vector{2.0, 0.0}, 2.0);
  const double e = std::exp(1.0);
  EXPECT_NEAR(b[0], e / (e + 1.0), 1e-15);
  EXPECT_NEAR(b[1], 1.0 / (e + 1.0), 1e-15);
  EXPECT_THROW(softmax_temp(Vector{1.0}, 0.0), Error);
  EXPECT_THROW(softmax_temp(Vector{1.0}, -1.0), Error);
}

TEST(Heads, SoftmaxPropertiesOnRandomLogits) {
  Engine eng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const Vector z = random_vector(eng, 1 + uniform_below(eng, 20), 30.0);
    const double tau = 0.05 + 5.0 * uniform01(eng);
    const double c = 1000.0 * (2.0 * uniform01(eng) - 1.0);
    const Vector p = softmax_temp(z, tau);
    double sum = 0.0;
    for (double x : p) {
      EXPECT_GE(x, 0.0);
      sum += x;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
    Vector shifted = z;
    for (double& x : shifted) x += c;
    EXPECT_LT(max_abs_diff(softmax_temp(shifted, tau), p), 1e-12);
    EXPECT_EQ(argmax_token(p), argmax_token(z));
    const Vector lp = log_softmax_temp(z, tau);
    for (std::size_t i = 0; i < z.size(); ++i)
      if (p[i] > 1e-300) {
        EXPECT_NEAR(lp[i], std::log(p[i]), 1e-9);
      }
  }
}

TEST(Heads, ArgmaxTieBreaksToLowestId) {
  EXPECT_EQ(argmax_token(Vector{0.1, 0.9, 0.3}), 1);
  EXPECT_EQ(argmax_token(Vector{0.5, 0.5}), 0);
  EXPECT_EQ(argmax_token(Vector(256, -3.0)), 0);
  EXPECT_EQ(argmax_token(softmax_temp(Vector{1.0, 2.0, 2.0}, 0.3)), 1);
}

TEST(Heads, ZeroUpstreamOrGammaGivesZeroGradients) {
  Engine eng(8);
  DraftHead h = random_head(eng, 5, 4, 2);
  const Vector x = random_vector(eng, 4);
  const AdapterGradients g = head_gradients(h, x, Vector(5, 0.0));
  EXPECT_EQ(g.da, Matrix(5, 2));
  EXPECT_EQ(g.db, Matrix(2, 4));
  h.gamma = 0.0;
  const AdapterGradients g0 = head_gradients(h, x, random_vector(eng, 5));
  EXPECT_EQ(g0.da, Matrix(5, 2));
  EXPECT_EQ(g0.db, Matrix(2, 4));
  EXPECT_THROW(head_gradients(h, x, Vector(4)), DimensionError);
}

// Scalar loss c . logits has dL/dlogits = c, so the backprop can be checked
// against central differences of c . draft_logits.
TEST(Heads, GradientsMatchFiniteDifferences) {
  Engine eng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t v = 2 + uniform_below(eng, 7), d = 1 + uniform_below(eng, 8);
    const std::size_t r = 1 + uniform_below(eng, std::min(v, d));
    DraftHead h = random_head(eng, v, d, r, 0.3 + uniform01(eng));
    const Vector x = random_vector(eng, d), c = random_vector(eng, v);
    auto loss = [&](const DraftHead& hh) { return dot(c, draft_logits(hh, x)); };
    const AdapterGradients g = head_gradients(h, x, c);
    const double eps = 1e-6;
    double worst = 0.0;
    auto check = [&](Matrix& m, const Matrix& analytic) {
      for (std::size_t i = 0; i < m.data.size(); ++i) {
        const double keep = m.data[i];
        m.data[i] = keep + eps;
        const double up = loss(h);
        m.data[i] = keep - eps;
        const double dn = loss(h);
        m.data[i] = keep;
        const double fd = (up - dn) / (2 * eps);
        worst = std::max(worst, std::abs(fd - analytic.data[i]) / std::max(1.0, std::abs(fd)));
      }
    };
    check(h.a, g.da);
    check(h.b, g.db);
    EXPECT_LT(worst, 1e-4) << "trial " << trial;
  }
}

}  // namespace
}  // namespace dvi
