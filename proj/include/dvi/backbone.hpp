// SPDX-License-Identifier: Apache-2.0
#pragma once

// Frozen toy decoder-only transformer split at layer `split` into a shallow
// draft path (layers [0, split)) and a deep target path (layers [split, L)
// followed by the final norm).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dvi/error.hpp"
#include "dvi/linalg.hpp"
#include "dvi/rng.hpp"

namespace dvi {

using Token = std::int32_t;

struct BackboneConfig {
  std::size_t layers = 8;
  std::size_t split = 2;
  std::size_t width = 64;
  std::size_t vocab = 256;
  std::size_t heads = 4;
  std::size_t max_ctx = 256;
  std::uint64_t seed = 7;
  /// Init range multiplier for the attention and feed-forward output
  /// projections; controls how far each block moves the residual stream.
  double residual_gain = 3.0;
  /// Extra multiplier on the attention output projection only.
  double attn_gain = 0.1;

  void validate() const {
    if (split == 0 || split >= layers)
      throw ConfigError("backbone.split must satisfy 0 < split < layers (split=" +
                        std::to_string(split) + ", layers=" + std::to_string(layers) + ")");
    if (width == 0 || heads == 0 || width % heads != 0)
      throw ConfigError("backbone.width must be a positive multiple of backbone.heads");
    if (vocab < 2) throw ConfigError("backbone.vocab must be >= 2");
    if (max_ctx < 2) throw ConfigError("backbone.max_ctx must be >= 2");
    if (!(residual_gain >= 0.0) || !std::isfinite(residual_gain))
      throw ConfigError("backbone.residual_gain must be finite and >= 0");
    if (!(attn_gain >= 0.0) || !std::isfinite(attn_gain))
      throw ConfigError("backbone.attn_gain must be finite and >= 0");
  }

  std::size_t ffn_width() const { return 4 * width; }
  std::size_t head_dim() const { return width / heads; }
};

struct LayerWeights {
  Vector ln1_gain, ln1_bias;
  Matrix wq, wk, wv, wo;
  Vector ln2_gain, ln2_bias;
  Matrix w1;
  Vector b1;
  Matrix w2;
  Vector b2;
};

struct BackboneWeights {
  BackboneConfig config;
  Matrix token_embedding;     // vocab x width
  Matrix position_embedding;  // max_ctx x width
  std::vector<LayerWeights> layers;
  Vector final_gain, final_bias;
};

enum class PathTag { shallow, deep };

struct HiddenState {
  std::size_t position = 0;
  PathTag tag = PathTag::shallow;
  Vector vector;
};

/// Per-layer key/value storage. Layers below the split advance with the
/// shallow length, the rest with the deep length; deep never runs ahead.
class KVCache {
 public:
  explicit KVCache(const BackboneConfig& config)
      : split_(config.split), width_(config.width), max_ctx_(config.max_ctx),
        keys_(config.layers, Vector(config.max_ctx * config.width, 0.0)),
        values_(config.layers, Vector(config.max_ctx * config.width, 0.0)) {}

  std::size_t current_len() const { return shallow_len_; }
  std::size_t shallow_len() const { return shallow_len_; }
  std::size_t deep_len() const { return deep_len_; }
  std::size_t max_ctx() const { return max_ctx_; }

  /// Drops the last n shallow positions; the deep path is clipped to match.
  void rollback(std::size_t n) {
    if (n > shallow_len_)
      throw Error("rollback(" + std::to_string(n) + ") exceeds cache length " +
                  std::to_string(shallow_len_));
    shallow_len_ -= n;
    deep_len_ = std::min(deep_len_, shallow_len_);
  }

  void clear() { shallow_len_ = deep_len_ = 0; }

 private:
  friend struct BackboneKernels;

  std::span<double> key(std::size_t layer, std::size_t pos) {
    return {keys_[layer].data() + pos * width_, width_};
  }
  std::span<double> value(std::size_t layer, std::size_t pos) {
    return {values_[layer].data() + pos * width_, width_};
  }

  std::size_t split_;
  std::size_t width_;
  std::size_t max_ctx_;
  std::size_t shallow_len_ = 0;
  std::size_t deep_len_ = 0;
  std::vector<Vector> keys_;
  std::vector<Vector> values_;
};

namespace detail {

inline void fill_uniform(Matrix& m, double scale, const KeyedUniform& gen) {
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = scale * gen(i);
}

inline void fill_uniform(Vector& v, double scale, const KeyedUniform& gen) {
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = scale * gen(i);
}

inline constexpr std::uint64_t kGlobalTensor = 0xffffffffULL;

}  // namespace detail

/// Initializes frozen weights. Every matrix is uniform in [-s, s] with
/// s = sqrt(3 / fan_in) (unit output variance for unit input variance); the
/// output projections wo and w2 are further scaled by residual_gain, and wo
/// also by attn_gain.
/// Embeddings are uniform with unit variance, norms start at gain 1, bias 0,
/// and the feed-forward biases are uniform in [-0.1, 0.1].
inline BackboneWeights init_backbone(const BackboneConfig& config) {
  config.validate();
  const std::size_t d = config.width;
  const std::size_t f = config.ffn_width();
  const double unit = std::sqrt(3.0);
  BackboneWeights w;
  w.config = config;

  w.token_embedding = Matrix(config.vocab, d);
  detail::fill_uniform(w.token_embedding, unit,
                       KeyedUniform(config.seed, detail::kGlobalTensor, "token_embedding"));
  w.position_embedding = Matrix(config.max_ctx, d);
  detail::fill_uniform(w.position_embedding, unit,
                       KeyedUniform(config.seed, detail::kGlobalTensor, "position_embedding"));

  const double s_d = std::sqrt(3.0 / static_cast<double>(d));
  const double s_f = std::sqrt(3.0 / static_cast<double>(f));
  w.layers.resize(config.layers);
  for (std::size_t l = 0; l < config.layers; ++l) {
    LayerWeights& lw = w.layers[l];
    lw.ln1_gain.assign(d, 1.0);
    lw.ln1_bias.assign(d, 0.0);
    lw.ln2_gain.assign(d, 1.0);
    lw.ln2_bias.assign(d, 0.0);
    lw.wq = Matrix(d, d);
    lw.wk = Matrix(d, d);
    lw.wv = Matrix(d, d);
    lw.wo = Matrix(d, d);
    lw.w1 = Matrix(f, d);
    lw.w2 = Matrix(d, f);
    lw.b1.assign(f, 0.0);
    lw.b2.assign(d, 0.0);
    detail::fill_uniform(lw.wq, s_d, KeyedUniform(config.seed, l, "wq"));
    detail::fill_uniform(lw.wk, s_d, KeyedUniform(config.seed, l, "wk"));
    detail::fill_uniform(lw.wv, s_d, KeyedUniform(config.seed, l, "wv"));
    detail::fill_uniform(lw.wo, s_d * config.residual_gain * config.attn_gain, KeyedUniform(config.seed, l, "wo"));
    detail::fill_uniform(lw.w1, s_d, KeyedUniform(config.seed, l, "w1"));
    detail::fill_uniform(lw.b1, 0.1, KeyedUniform(config.seed, l, "b1"));
    detail::fill_uniform(lw.w2, s_f * config.residual_gain, KeyedUniform(config.seed, l, "w2"));
    detail::fill_uniform(lw.b2, 0.1, KeyedUniform(config.seed, l, "b2"));
  }
  w.final_gain.assign(d, 1.0);
  w.final_bias.assign(d, 0.0);
  return w;
}

inline std::uint64_t checksum(const BackboneWeights& w) {
  std::uint64_t h = checksum_bytes(w.token_embedding.data);
  h = checksum_bytes(w.position_embedding.data, h);
  for (const auto& l : w.layers) {
    for (const Vector* v : {&l.ln1_gain, &l.ln1_bias, &l.ln2_gain, &l.ln2_bias, &l.b1, &l.b2})
      h = checksum_bytes(*v, h);
    for (const Matrix* m : {&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2}) h = checksum_bytes(m->data, h);
  }
  h = checksum_bytes(w.final_gain, h);
  return checksum_bytes(w.final_bias, h);
}

struct BackboneKernels {
  static void layer_norm(std::span<const double> x, const Vector& gain, const Vector& bias,
                         std::span<double> out) {
    const double n = static_cast<double>(x.size());
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) * inv * gain[i] + bias[i];
  }

  // Applies one decoder block to residual vectors at consecutive positions
  // starting at pos0. Keys/values for all of them are written before any
  // attends, and each position only sees keys at or before itself.
  static void block(const BackboneWeights& w, KVCache& cache, std::size_t layer,
                    std::size_t pos0, std::vector<Vector>& residuals) {
    const BackboneConfig& cfg = w.config;
    const LayerWeights& lw = w.layers[layer];
    const std::size_t n = residuals.size();
    const std::size_t d = cfg.width;
    const std::size_t hd = cfg.head_dim();

    std::vector<Vector> normed(n, Vector(d)), q(n, Vector(d)), attn(n, Vector(d)), proj(n, Vector(d));
    std::vector<const double*> in(n);
    std::vector<double*> out(n);
    auto run = [&](const Matrix& m, std::vector<Vector>& src, std::vector<Vector>& dst) {
      for (std::size_t i = 0; i < n; ++i) {
        in[i] = src[i].data();
        out[i] = dst[i].data();
      }
      gemv_batch(m, in, out);
    };

    for (std::size_t i = 0; i < n; ++i) layer_norm(residuals[i], lw.ln1_gain, lw.ln1_bias, normed[i]);
    run(lw.wq, normed, q);
    {
      std::vector<Vector> k(n, Vector(d)), v(n, Vector(d));
      run(lw.wk, normed, k);
      run(lw.wv, normed, v);
      for (std::size_t i = 0; i < n; ++i) {
        std::copy(k[i].begin(), k[i].end(), cache.key(layer, pos0 + i).begin());
        std::copy(v[i].begin(), v[i].end(), cache.value(layer, pos0 + i).begin());
      }
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    Vector scores(pos0 + n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t pos = pos0 + i;
      for (std::size_t h = 0; h < cfg.heads; ++h) {
        const std::size_t off = h * hd;
        std::span<const double> qh(q[i].data() + off, hd);
        double mx = -INFINITY;
        for (std::size_t j = 0; j <= pos; ++j) {
          scores[j] = dot(qh, cache.key(layer, j).subspan(off, hd)) * scale;
          mx = std::max(mx, scores[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= pos; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          z += scores[j];
        }
        for (std::size_t c = 0; c < hd; ++c) attn[i][off + c] = 0.0;
        for (std::size_t j = 0; j <= pos; ++j) {
          const double a = scores[j] / z;
          auto vj = cache.value(layer, j).subspan(off, hd);
          for (std::size_t c = 0; c < hd; ++c) attn[i][off + c] += a * vj[c];
        }
      }
    }
    run(lw.wo, attn, proj);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) residuals[i][c] += proj[i][c];

    for (std::size_t i = 0; i < n; ++i) layer_norm(residuals[i], lw.ln2_gain, lw.ln2_bias, normed[i]);
    std::vector<Vector> hidden(n, Vector(cfg.ffn_width()));
    run(lw.w1, normed, hidden);
    for (auto& hv : hidden)
      for (std::size_t c = 0; c < hv.size(); ++c) {
        hv[c] = std::max(0.0, hv[c] + lw.b1[c]);
      }
    run(lw.w2, hidden, proj);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) residuals[i][c] += proj[i][c] + lw.b2[c];
  }

  static Vector embed(const BackboneWeights& w, Token token, std::size_t pos) {
    if (token < 0 || static_cast<std::size_t>(token) >= w.config.vocab)
      throw DimensionError("token id " + std::to_string(token) + " outside vocabulary of " +
                           std::to_string(w.config.vocab));
    Vector x(w.config.width);
    auto te = w.token_embedding.row(static_cast<std::size_t>(token));
    auto pe = w.position_embedding.row(pos);
    for (std::size_t c = 0; c < x.size(); ++c) x[c] = te[c] + pe[c];
    return x;
  }

  static void run_shallow(const BackboneWeights& w, KVCache& cache, std::size_t pos0,
                          std::vector<Vector>& residuals) {
    for (std::size_t l = 0; l < w.config.split; ++l) block(w, cache, l, pos0, residuals);
  }

  static void run_deep(const BackboneWeights& w, KVCache& cache, std::size_t pos0,
                       std::vector<Vector>& residuals) {
    for (std::size_t l = w.config.split; l < w.config.layers; ++l) block(w, cache, l, pos0, residuals);
    for (auto& r : residuals) {
      Vector normed(r.size());
      layer_norm(r, w.final_gain, w.final_bias, normed);
      r = std::move(normed);
    }
  }

  static void advance_shallow(KVCache& c, std::size_t n) { c.shallow_len_ += n; }
  static void advance_deep(KVCache& c, std::size_t n) { c.deep_len_ += n; }
};

/// h_k for the next position: embeds `token` and runs layers [0, split).
inline HiddenState forward_shallow(const BackboneWeights& w, KVCache& cache, Token token) {
  const std::size_t pos = cache.shallow_len();
  if (pos >= cache.max_ctx())
    throw ContextOverflow("context limit of " + std::to_string(cache.max_ctx()) + " reached");
  std::vector<Vector> res{BackboneKernels::embed(w, token, pos)};
  BackboneKernels::run_shallow(w, cache, pos, res);
  BackboneKernels::advance_shallow(cache, 1);
  return {pos, PathTag::shallow, std::move(res[0])};
}

/// Runs the deep path over consecutive shallow states, the first of which must
/// sit at the current deep length. One batched pass; results are bitwise equal
/// to feeding the states one at a time.
inline std::vector<HiddenState> forward_deep_batch(const BackboneWeights& w, KVCache& cache,
                                                   std::span<const HiddenState> states) {
  if (states.empty()) return {};
  const std::size_t pos0 = cache.deep_len();
  std::vector<Vector> res;
  res.reserve(states.size());
  for (std::size_t i = 0; i < states.size(); ++i) {
    const HiddenState& h = states[i];
    if (h.tag != PathTag::shallow) throw OrderError("deep path expects shallow states");
    if (h.position != pos0 + i)
      throw OrderError("deep path expected position " + std::to_string(pos0 + i) + ", got " +
                       std::to_string(h.position));
    if (h.position >= cache.shallow_len())
      throw OrderError("shallow position " + std::to_string(h.position) + " not in cache");
    detail::require_dims(h.vector.size() == w.config.width, "hidden state width");
    res.push_back(h.vector);
  }
  BackboneKernels::run_deep(w, cache, pos0, res);
  BackboneKernels::advance_deep(cache, states.size());
  std::vector<HiddenState> out;
  out.reserve(res.size());
  for (std::size_t i = 0; i < res.size(); ++i) out.push_back({pos0 + i, PathTag::deep, std::move(res[i])});
  return out;
}

inline HiddenState forward_deep(const BackboneWeights& w, KVCache& cache, const HiddenState& h_k) {
  return std::move(forward_deep_batch(w, cache, std::span<const HiddenState>(&h_k, 1))[0]);
}

/// Monolithic reference: every position through all layers on a private
/// cache, without the shallow/deep bookkeeping. Returns h_L per position.
inline std::vector<HiddenState> full_forward(const BackboneWeights& w, std::span<const Token> tokens) {
  if (tokens.size() > w.config.max_ctx)
    throw ContextOverflow("sequence of " + std::to_string(tokens.size()) + " exceeds context limit");
  KVCache cache(w.config);
  std::vector<HiddenState> out;
  out.reserve(tokens.size());
  for (std::size_t pos = 0; pos < tokens.size(); ++pos) {
    std::vector<Vector> res{BackboneKernels::embed(w, tokens[pos], pos)};
    for (std::size_t l = 0; l < w.config.layers; ++l) BackboneKernels::block(w, cache, l, pos, res);
    Vector normed(w.config.width);
    BackboneKernels::layer_norm(res[0], w.final_gain, w.final_bias, normed);
    out.push_back({pos, PathTag::deep, std::move(normed)});
  }
  return out;
}

}  // namespace dvi
