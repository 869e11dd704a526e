// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <vector>

namespace dexar::io {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("binary read: truncated input");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }
inline double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

inline void write_f64_file(const std::filesystem::path& path, std::span<const double> values) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (double v : values) put_f64(os, v);
}

inline std::vector<double> read_f64_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  const auto bytes = static_cast<std::size_t>(is.tellg());
  if (bytes % 8 != 0) throw std::runtime_error(path.string() + ": size is not a multiple of 8");
  is.seekg(0);
  std::vector<double> out(bytes / 8);
  for (double& v : out) v = get_f64(is);
  return out;
}

}  // namespace dexar::io
