// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>

#include "dvi/backbone.hpp"
#include "dvi/error.hpp"
#include "dvi/spec_engine.hpp"

namespace dvi {

/// Analytic per-position cost in units of one full forward.
struct CostModel {
  double c_shallow = 0.25;
  double c_deep = 0.75;
  double c_head = 0.0;

  /// c_shallow = k/L, c_deep = (L-k)/L, so the two paths sum to one forward.
  static CostModel from_split(const BackboneConfig& b, double c_head = 0.0) {
    const double l = static_cast<double>(b.layers);
    return {static_cast<double>(b.split) / l, static_cast<double>(b.layers - b.split) / l, c_head};
  }

  void validate() const {
    if (!(c_shallow >= 0.0) || !(c_deep >= 0.0) || !(c_head >= 0.0))
      throw ConfigError("cost model entries must be >= 0");
  }
};

/// Aggregate speculative-decoding statistics over any number of steps.
struct DecodeMetrics {
  double mat = 0.0;             // mean accepted drafts per verification step
  double mat_with_bonus = 0.0;  // same, counting full-accept bonus tokens
  double batch_acceptance = 0.0;
  std::size_t tokens_emitted = 0;
  std::size_t spec_steps = 0;
  double speedup_proxy = 0.0;

  std::size_t k_spec = 0;
  std::size_t accepted = 0;       // sum of m
  std::size_t corrections = 0;    // steps with m < k_spec
  std::size_t bonus_tokens = 0;
  std::size_t verified = 0;       // sum of min(m + 1, k_spec)
};

class MetricsAccumulator {
 public:
  explicit MetricsAccumulator(std::size_t k_spec) { m_.k_spec = k_spec; }

  void add(const SpecStepResult& r) {
    ++m_.spec_steps;
    m_.accepted += r.m;
    m_.corrections += r.correction.has_value();
    m_.bonus_tokens += r.bonus.has_value();
    m_.verified += r.n_verified;
    m_.tokens_emitted += r.committed.size();
  }

  void merge(const DecodeMetrics& o) {
    m_.spec_steps += o.spec_steps;
    m_.accepted += o.accepted;
    m_.corrections += o.corrections;
    m_.bonus_tokens += o.bonus_tokens;
    m_.verified += o.verified;
    m_.tokens_emitted += o.tokens_emitted;
  }

  DecodeMetrics finish(const CostModel& cost, const SpecConfig& spec) const;

 private:
  DecodeMetrics m_;
};

inline double compute_mat(std::span<const std::size_t> commits) {
  if (commits.empty()) throw Error("MAT of an empty step list is undefined");
  double s = 0.0;
  for (std::size_t m : commits) s += static_cast<double>(m);
  return s / static_cast<double>(commits.size());
}

/// Baseline cost is one full forward (plus one head) per emitted token.
/// Speculative cost per step is k_spec shallow passes and draft heads, one
/// deep pass and verifier head per inspected position, and one more deep pass
/// for a bonus token.
inline double speedup_proxy(const DecodeMetrics& m, const CostModel& cost, const SpecConfig& spec) {
  if (m.spec_steps == 0) throw Error("speedup proxy needs at least one speculative step");
  const double steps = static_cast<double>(m.spec_steps);
  const double k = static_cast<double>(spec.k_spec);
  const double deep = static_cast<double>(m.verified + m.bonus_tokens);
  const double spec_cost = steps * k * (cost.c_shallow + cost.c_head) + deep * (cost.c_deep + cost.c_head);
  const double base_cost = static_cast<double>(m.tokens_emitted) * (1.0 + cost.c_head);
  return base_cost / spec_cost;
}

inline DecodeMetrics MetricsAccumulator::finish(const CostModel& cost, const SpecConfig& spec) const {
  DecodeMetrics out = m_;
  if (out.spec_steps == 0) return out;
  const double steps = static_cast<double>(out.spec_steps);
  out.mat = static_cast<double>(out.accepted) / steps;
  out.mat_with_bonus = static_cast<double>(out.accepted + out.bonus_tokens) / steps;
  out.batch_acceptance = static_cast<double>(out.accepted) / (steps * static_cast<double>(out.k_spec));
  out.speedup_proxy = speedup_proxy(out, cost, spec);
  return out;
}

}  // namespace dvi
