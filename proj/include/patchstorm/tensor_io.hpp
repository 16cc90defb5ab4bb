#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "patchstorm/error.hpp"
#include "patchstorm/tensor.hpp"

// Raw tensor file: "MAV2TNSR", u32 version, u32 rank, rank x u64 dims,
// then row-major f64 values. All integers and floats little-endian.
namespace patchstorm {

inline constexpr std::string_view kTensorMagic = "MAV2TNSR";
inline constexpr std::uint32_t kTensorVersion = 1;

namespace binio {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  std::array<char, 4> b;
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b.data(), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  std::array<char, 8> b;
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b.data(), 8);
}

inline void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

inline void get_bytes(std::istream& is, char* dst, std::size_t n, std::string_view what) {
  is.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) {
    throw Error(Errc::truncated, "unexpected end of data while reading " + std::string(what));
  }
}

inline std::uint32_t get_u32(std::istream& is, std::string_view what) {
  std::array<unsigned char, 4> b;
  get_bytes(is, reinterpret_cast<char*>(b.data()), 4, what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::istream& is, std::string_view what) {
  std::array<unsigned char, 8> b;
  get_bytes(is, reinterpret_cast<char*>(b.data()), 8, what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline double get_f64(std::istream& is, std::string_view what) { return std::bit_cast<double>(get_u64(is, what)); }

inline void expect_magic(std::istream& is, std::string_view magic) {
  std::string got(magic.size(), '\0');
  get_bytes(is, got.data(), magic.size(), "magic");
  if (got != magic) {
    throw Error(Errc::bad_magic, "expected magic '" + std::string(magic) + "'");
  }
}

}  // namespace binio

inline void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kTensorMagic.data(), static_cast<std::streamsize>(kTensorMagic.size()));
  binio::put_u32(os, kTensorVersion);
  binio::put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) binio::put_u64(os, d);
  for (double v : t.data()) binio::put_f64(os, v);
}

inline Tensor read_tensor(std::istream& is) {
  binio::expect_magic(is, kTensorMagic);
  const auto version = binio::get_u32(is, "tensor version");
  if (version != kTensorVersion) {
    throw Error(Errc::bad_version, "tensor version " + std::to_string(version) + " is not supported");
  }
  const auto rank = binio::get_u32(is, "tensor rank");
  if (rank > 16) throw Error(Errc::invalid_argument, "tensor rank " + std::to_string(rank) + " is implausible");
  Shape shape(rank);
  for (auto& d : shape) d = binio::get_u64(is, "tensor dims");
  const std::size_t n = shape_numel(shape);
  if (n > (std::size_t{1} << 32)) throw Error(Errc::invalid_argument, "tensor too large: " + shape_str(shape));
  std::vector<double> data(n);
  for (auto& v : data) v = binio::get_f64(is, "tensor data");
  return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(Errc::io, "cannot open " + path.string() + " for writing");
  write_tensor(os, t);
  if (!os) throw Error(Errc::io, "write failed for " + path.string());
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(Errc::io, "cannot open " + path.string());
  return read_tensor(is);
}

}  // namespace patchstorm
