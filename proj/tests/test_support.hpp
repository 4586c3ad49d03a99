// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dvi/dvi.hpp"

namespace dvi::testing {

inline BackboneConfig small_backbone(std::uint64_t seed = 7) {
  BackboneConfig c;
  c.layers = 4;
  c.split = 1;
  c.width = 16;
  c.vocab = 32;
  c.heads = 2;
  c.max_ctx = 64;
  c.seed = seed;
  return c;
}

inline HeadConfig small_head(std::size_t rank = 4) {
  HeadConfig h;
  h.rank = rank;
  return h;
}

struct SmallRig {
  BackboneWeights w;
  VerifierHead verifier;
  DraftHead drafter;
  ModelView view() const { return {w, verifier, drafter}; }
};

inline SmallRig make_small_rig(std::uint64_t seed = 7) {
  SmallRig r{init_backbone(small_backbone(seed)), {}, {}};
  r.verifier = init_verifier(r.w.config, small_head());
  r.drafter = init_draft_head(r.verifier, small_head());
  return r;
}

inline std::vector<Token> random_tokens(Engine& eng, std::size_t n, std::size_t vocab) {
  std::vector<Token> t(n);
  for (auto& x : t) x = static_cast<Token>(uniform_below(eng, vocab));
  return t;
}

inline Vector random_vector(Engine& eng, std::size_t n, double scale = 1.0) {
  Vector v(n);
  for (auto& x : v) x = scale * (2.0 * uniform01(eng) - 1.0);
  return v;
}

inline Matrix random_matrix(Engine& eng, std::size_t r, std::size_t c, double scale = 1.0) {
  Matrix m(r, c);
  for (auto& x : m.data) x = scale * (2.0 * uniform01(eng) - 1.0);
  return m;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace dvi::testing
