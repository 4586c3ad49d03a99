// SPDX-License-Identifier: Apache-2.0
#pragma once

// Drafter adapter checkpoint: magic, resolved config echo, then A and B.
// Integers and doubles are stored little-endian; the file is byte-stable
// for identical runs.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "dvi/error.hpp"
#include "dvi/heads.hpp"

namespace dvi {

inline constexpr char kCheckpointMagic[4] = {'D', 'V', 'I', '1'};

struct Checkpoint {
  std::string config_echo;
  Matrix a;
  Matrix b;
};

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  os.write(buf, 8);
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char buf[8];
  if (!is.read(reinterpret_cast<char*>(buf), 8)) throw CorruptCheckpoint("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

inline void put_matrix(std::ostream& os, const Matrix& m) {
  put_u64(os, m.rows);
  put_u64(os, m.cols);
  for (double x : m.data) put_u64(os, std::bit_cast<std::uint64_t>(x));
}

inline Matrix get_matrix(std::istream& is, std::uint64_t limit) {
  const std::uint64_t rows = get_u64(is);
  const std::uint64_t cols = get_u64(is);
  if (rows == 0 || cols == 0 || rows > limit || cols > limit || rows * cols > limit)
    throw CorruptCheckpoint("implausible matrix shape in checkpoint");
  Matrix m(rows, cols);
  for (double& x : m.data) {
    x = std::bit_cast<double>(get_u64(is));
    if (!std::isfinite(x)) throw CorruptCheckpoint("non-finite weight in checkpoint");
  }
  return m;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const DraftHead& head, const std::string& config_echo) {
  os.write(kCheckpointMagic, 4);
  detail::put_u64(os, config_echo.size());
  os.write(config_echo.data(), static_cast<std::streamsize>(config_echo.size()));
  detail::put_matrix(os, head.a);
  detail::put_matrix(os, head.b);
}

inline void save_checkpoint(const std::string& path, const DraftHead& head, const std::string& config_echo) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write checkpoint '" + path + "'");
  write_checkpoint(f, head, config_echo);
  if (!f) throw Error("failed writing checkpoint '" + path + "'");
}

inline Checkpoint read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw CorruptCheckpoint("bad checkpoint magic");
  constexpr std::uint64_t limit = std::uint64_t{1} << 26;
  const std::uint64_t n = detail::get_u64(is);
  if (n > limit) throw CorruptCheckpoint("implausible config length in checkpoint");
  Checkpoint c;
  c.config_echo.resize(n);
  if (!is.read(c.config_echo.data(), static_cast<std::streamsize>(n))) throw CorruptCheckpoint("checkpoint truncated");
  c.a = detail::get_matrix(is, limit);
  c.b = detail::get_matrix(is, limit);
  if (c.a.cols != c.b.rows) throw CorruptCheckpoint("adapter ranks disagree in checkpoint");
  if (is.peek() != std::char_traits<char>::eof()) throw CorruptCheckpoint("trailing bytes in checkpoint");
  return c;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open checkpoint '" + path + "'");
  return read_checkpoint(f);
}

/// Installs checkpointed adapters into a head built from the same config.
inline void apply_checkpoint(const Checkpoint& c, DraftHead& head) {
  if (c.a.rows != head.a.rows || c.a.cols != head.a.cols || c.b.rows != head.b.rows || c.b.cols != head.b.cols)
    throw CorruptCheckpoint("checkpoint adapter shapes do not match the configured head");
  head.a = c.a;
  head.b = c.b;
}

}  // namespace dvi
