// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <vector>

#include "dvi/error.hpp"

namespace dvi {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool operator==(const Matrix&) const = default;
};

namespace detail {

// Every output element is accumulated over the input index in ascending order,
// whatever the batch size, so batched and one-at-a-time products agree bitwise.
template <std::size_t Rows, std::size_t Batch>
inline void gemv_block(const double* w, std::size_t cols, const double* const* xs, double* const* ys,
                       std::size_t row0) {
  double acc[Rows][Batch] = {};
  for (std::size_t i = 0; i < cols; ++i) {
    double x[Batch];
    for (std::size_t b = 0; b < Batch; ++b) x[b] = xs[b][i];
    for (std::size_t r = 0; r < Rows; ++r) {
      const double wv = w[r * cols + i];
      for (std::size_t b = 0; b < Batch; ++b) acc[r][b] += wv * x[b];
    }
  }
  for (std::size_t r = 0; r < Rows; ++r)
    for (std::size_t b = 0; b < Batch; ++b) ys[b][row0 + r] = acc[r][b];
}

template <std::size_t Batch>
inline void gemv_rows(const Matrix& w, const double* const* xs, double* const* ys) {
  // Keep the Rows x Batch accumulator tile within the vector register file.
  constexpr std::size_t kRows = Batch <= 2 ? 4 : Batch <= 4 ? 2 : 1;
  const std::size_t cols = w.cols;
  const double* wp = w.data.data();
  std::size_t r = 0;
  for (; r + kRows <= w.rows; r += kRows) gemv_block<kRows, Batch>(wp + r * cols, cols, xs, ys, r);
  if constexpr (kRows > 1)
    for (; r < w.rows; ++r) gemv_block<1, Batch>(wp + r * cols, cols, xs, ys, r);
}

}  // namespace detail

/// ys[b] = W * xs[b] for every b. Batches larger than eight are split.
inline void gemv_batch(const Matrix& w, std::span<const double* const> xs,
                       std::span<double* const> ys) {
  detail::require_dims(xs.size() == ys.size(), "gemv batch sizes");
  constexpr std::size_t kMaxBatch = 8;
  for (std::size_t b0 = 0; b0 < xs.size(); b0 += kMaxBatch) {
    const std::size_t nb = std::min(kMaxBatch, xs.size() - b0);
    const double* const* xb = xs.data() + b0;
    double* const* yb = ys.data() + b0;
    switch (nb) {
      case 1: detail::gemv_rows<1>(w, xb, yb); break;
      case 2: detail::gemv_rows<2>(w, xb, yb); break;
      case 3: detail::gemv_rows<3>(w, xb, yb); break;
      case 4: detail::gemv_rows<4>(w, xb, yb); break;
      case 5: detail::gemv_rows<5>(w, xb, yb); break;
      case 6: detail::gemv_rows<6>(w, xb, yb); break;
      case 7: detail::gemv_rows<7>(w, xb, yb); break;
      default: detail::gemv_rows<8>(w, xb, yb); break;
    }
  }
}

inline void gemv(const Matrix& w, std::span<const double> x, std::span<double> y) {
  detail::require_dims(x.size() == w.cols && y.size() == w.rows, "gemv");
  const double* xp = x.data();
  double* yp = y.data();
  gemv_batch(w, std::span<const double* const>(&xp, 1), std::span<double* const>(&yp, 1));
}

inline Vector gemv(const Matrix& w, std::span<const double> x) {
  Vector y(w.rows);
  gemv(w, x, y);
  return y;
}

/// y = W^T x, accumulated in ascending row order.
inline Vector gemv_transposed(const Matrix& w, std::span<const double> x) {
  detail::require_dims(x.size() == w.rows, "gemv_transposed");
  Vector y(w.cols, 0.0);
  for (std::size_t r = 0; r < w.rows; ++r) {
    const double xr = x[r];
    const auto wr = w.row(r);
    for (std::size_t c = 0; c < w.cols; ++c) y[c] += wr[c] * xr;
  }
  return y;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// 64-bit FNV-1a over the raw bytes of a sequence of doubles.
inline std::uint64_t checksum_bytes(std::span<const double> values, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (double v : values) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &v, sizeof(double));
    for (unsigned char c : bytes) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

inline bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace dvi
