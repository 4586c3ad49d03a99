// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>

#include "dvi/backbone.hpp"
#include "dvi/error.hpp"
#include "dvi/linalg.hpp"
#include "dvi/rng.hpp"

namespace dvi {

using Logits = Vector;

/// Frozen classifier over deep states.
struct VerifierHead {
  Matrix weight;  // vocab x width
};

/// Low-rank adapted classifier over shallow states:
/// logits = (base + gamma * a * b) h. Only a and b are ever trained.
struct DraftHead {
  Matrix base;  // vocab x width, frozen
  Matrix a;     // vocab x rank
  Matrix b;     // rank x width
  double gamma = 1.0;

  std::size_t vocab() const { return base.rows; }
  std::size_t width() const { return base.cols; }
  std::size_t rank() const { return a.cols; }
};

struct HeadConfig {
  std::size_t rank = 8;
  double gamma = 1.0;
  /// b entries start uniform in [-b_init_scale, b_init_scale]; a starts at zero.
  double b_init_scale = 0.125;
  /// Verifier weights are uniform in [-s, s] with s = verifier_scale * sqrt(3 / width).
  double verifier_scale = 2.0;
  /// Remove the mean final-state direction from every verifier row so no
  /// single token wins on the common component of h_L.
  bool center_verifier = true;
  std::uint64_t seed = 11;

  void validate(std::size_t vocab, std::size_t width) const {
    if (rank < 1 || rank > std::min(vocab, width))
      throw ConfigError("head.rank must lie in [1, min(vocab, width)]");
    if (!std::isfinite(gamma)) throw ConfigError("head.gamma must be finite");
    if (!(b_init_scale >= 0.0)) throw ConfigError("head.b_init_scale must be >= 0");
    if (!(verifier_scale > 0.0)) throw ConfigError("head.verifier_scale must be > 0");
  }
};

inline VerifierHead init_verifier(const BackboneConfig& bb, const HeadConfig& hc) {
  VerifierHead v{Matrix(bb.vocab, bb.width)};
  const double s = hc.verifier_scale * std::sqrt(3.0 / static_cast<double>(bb.width));
  detail::fill_uniform(v.weight, s, KeyedUniform(bb.seed, detail::kGlobalTensor, "verifier"));
  return v;
}

/// Projects `direction` out of every row of the verifier weight.
inline void project_out(VerifierHead& v, std::span<const double> direction) {
  detail::require_dims(direction.size() == v.weight.cols, "projection direction");
  const double nn = dot(direction, direction);
  if (!(nn > 0.0)) return;
  for (std::size_t r = 0; r < v.weight.rows; ++r) {
    auto row = v.weight.row(r);
    const double c = dot(row, direction) / nn;
    for (std::size_t j = 0; j < row.size(); ++j) row[j] -= c * direction[j];
  }
}

/// Draft head with base copied from the verifier and a zero-initialized adapter,
/// so the untrained drafter is exactly the verifier's projection on h_k.
inline DraftHead init_draft_head(const VerifierHead& verifier, const HeadConfig& hc) {
  const std::size_t vocab = verifier.weight.rows;
  const std::size_t width = verifier.weight.cols;
  hc.validate(vocab, width);
  DraftHead h;
  h.base = verifier.weight;
  h.a = Matrix(vocab, hc.rank);
  h.b = Matrix(hc.rank, width);
  h.gamma = hc.gamma;
  detail::fill_uniform(h.b, hc.b_init_scale, KeyedUniform(hc.seed, detail::kGlobalTensor, "draft_b"));
  return h;
}

inline std::uint64_t checksum(const VerifierHead& v) { return checksum_bytes(v.weight.data); }

inline Logits verifier_logits(const VerifierHead& head, std::span<const double> h_l) {
  detail::require_dims(h_l.size() == head.weight.cols, "verifier head input");
  return gemv(head.weight, h_l);
}

inline Logits verifier_logits(const VerifierHead& head, const HiddenState& h_l) {
  if (h_l.tag != PathTag::deep) throw DimensionError("verifier head expects a deep state");
  return verifier_logits(head, std::span<const double>(h_l.vector));
}

/// Verifier logits for several deep states in one pass over the weights.
inline std::vector<Logits> verifier_logits_batch(const VerifierHead& head,
                                                 std::span<const HiddenState> states) {
  std::vector<Logits> out(states.size(), Logits(head.weight.rows));
  std::vector<const double*> in(states.size());
  std::vector<double*> dst(states.size());
  for (std::size_t i = 0; i < states.size(); ++i) {
    if (states[i].tag != PathTag::deep) throw DimensionError("verifier head expects a deep state");
    detail::require_dims(states[i].vector.size() == head.weight.cols, "verifier head input");
    in[i] = states[i].vector.data();
    dst[i] = out[i].data();
  }
  gemv_batch(head.weight, in, dst);
  return out;
}

/// Adapter projection b * h, the rank-sized intermediate shared by the
/// forward pass and the gradients.
inline Vector adapter_input(const DraftHead& head, std::span<const double> h_k) {
  return gemv(head.b, h_k);
}

inline Logits draft_logits(const DraftHead& head, std::span<const double> h_k) {
  detail::require_dims(h_k.size() == head.width(), "draft head input");
  Logits z = gemv(head.base, h_k);
  if (head.gamma == 0.0) return z;
  const Vector u = adapter_input(head, h_k);
  const Vector delta = gemv(head.a, u);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] += head.gamma * delta[i];
  return z;
}

inline Logits draft_logits(const DraftHead& head, const HiddenState& h_k) {
  if (h_k.tag != PathTag::shallow) throw DimensionError("draft head expects a shallow state");
  return draft_logits(head, std::span<const double>(h_k.vector));
}

/// softmax(logits / tau) with max subtraction.
inline Vector softmax_temp(std::span<const double> logits, double tau) {
  if (!(tau > 0.0)) throw Error("softmax temperature must be > 0");
  Vector p(logits.size());
  if (logits.empty()) return p;
  double mx = -std::numeric_limits<double>::infinity();
  for (double z : logits) mx = std::max(mx, z);
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp((logits[i] - mx) / tau);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

/// log softmax(logits / tau), computed without forming the probabilities.
inline Vector log_softmax_temp(std::span<const double> logits, double tau) {
  if (!(tau > 0.0)) throw Error("softmax temperature must be > 0");
  Vector out(logits.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (double z : logits) mx = std::max(mx, z);
  double sum = 0.0;
  for (double z : logits) sum += std::exp((z - mx) / tau);
  const double lse = std::log(sum);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = (logits[i] - mx) / tau - lse;
  return out;
}

/// Greedy token; ties resolve to the lowest id.
inline Token argmax_token(std::span<const double> logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return static_cast<Token>(best);
}

struct AdapterGradients {
  Matrix da;  // vocab x rank
  Matrix db;  // rank x width

  AdapterGradients() = default;
  explicit AdapterGradients(const DraftHead& h) : da(h.vocab(), h.rank()), db(h.rank(), h.width()) {}

  void accumulate(const AdapterGradients& other) {
    for (std::size_t i = 0; i < da.data.size(); ++i) da.data[i] += other.da.data[i];
    for (std::size_t i = 0; i < db.data.size(); ++i) db.data[i] += other.db.data[i];
  }
};

/// Backprop of dL/dlogits through the adapter:
///   da += gamma * g (b h)^T,  db += gamma * (a^T g) h^T.
inline void accumulate_head_gradients(const DraftHead& head, std::span<const double> h_k,
                                      std::span<const double> dlogits, AdapterGradients& grads) {
  detail::require_dims(h_k.size() == head.width(), "head_gradients state");
  detail::require_dims(dlogits.size() == head.vocab(), "head_gradients dlogits");
  if (head.gamma == 0.0) return;
  const Vector u = adapter_input(head, h_k);
  const Vector atg = gemv_transposed(head.a, dlogits);
  const std::size_t r = head.rank();
  for (std::size_t v = 0; v < head.vocab(); ++v) {
    const double g = head.gamma * dlogits[v];
    if (g == 0.0) continue;
    for (std::size_t j = 0; j < r; ++j) grads.da(v, j) += g * u[j];
  }
  for (std::size_t j = 0; j < r; ++j) {
    const double g = head.gamma * atg[j];
    if (g == 0.0) continue;
    for (std::size_t c = 0; c < head.width(); ++c) grads.db(j, c) += g * h_k[c];
  }
}

inline AdapterGradients head_gradients(const DraftHead& head, std::span<const double> h_k,
                                       std::span<const double> dlogits) {
  AdapterGradients g(head);
  accumulate_head_gradients(head, h_k, dlogits, g);
  return g;
}

}  // namespace dvi
