#pragma once

// Bag files hold one slide's instance embeddings.
//
// Layout (little-endian):
//    magic    - "MILB" (4 bytes)
//    version  - u16, currently 1
//    flags    - u16, must be 0
//    n        - u32, instance count (>= 1)
//    d        - u32, embedding dimension (>= 1)
//    payload  - n*d IEEE-754 f32, row-major
//
// A valid file is exactly 16 + 4*n*d bytes long.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "milengine/errors.hpp"

namespace milengine::data {

inline constexpr std::array<char, 4> kBagMagic = {'M', 'I', 'L', 'B'};
inline constexpr std::uint16_t kBagVersion = 1;
inline constexpr std::size_t kBagHeaderBytes = 16;

struct EmbeddingBag {
  std::string slide_id;
  std::size_t n = 0;
  std::size_t d = 0;
  std::vector<float> data;  // n*d, row-major

  EmbeddingBag() = default;
  EmbeddingBag(std::string id, std::size_t rows, std::size_t cols, std::vector<float> values)
      : slide_id(std::move(id)), n(rows), d(cols), data(std::move(values)) {}

  std::span<const float> row(std::size_t i) const { return {data.data() + i * d, d}; }
  std::span<float> row(std::size_t i) { return {data.data() + i * d, d}; }
  float at(std::size_t i, std::size_t j) const { return data[i * d + j]; }
};

// Throws FormatError unless the bag satisfies its shape and finiteness invariants.
inline void validate_bag(const EmbeddingBag& bag) {
  if (bag.n == 0) throw FormatError("bag '" + bag.slide_id + "' has no instances");
  if (bag.d == 0) throw FormatError("bag '" + bag.slide_id + "' has zero embedding dimension");
  if (bag.data.size() != bag.n * bag.d) {
    throw FormatError("bag '" + bag.slide_id + "' holds " + std::to_string(bag.data.size()) +
                      " values, expected n*d = " + std::to_string(bag.n * bag.d));
  }
  for (std::size_t i = 0; i < bag.data.size(); ++i) {
    if (!std::isfinite(bag.data[i])) {
      throw FormatError("bag '" + bag.slide_id + "' has a non-finite value at row " +
                        std::to_string(i / bag.d) + ", column " + std::to_string(i % bag.d));
    }
  }
}

namespace detail {

inline void put_u16(std::vector<char>& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
}

inline void put_u32(std::vector<char>& out, std::uint32_t v) {
  for (int shift = 0; shift < 32; shift += 8) out.push_back(static_cast<char>((v >> shift) & 0xFF));
}

inline void put_f32(std::vector<char>& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

inline std::uint16_t get_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("error reading '" + path.string() + "'");
  return bytes;
}

inline void write_file(const std::filesystem::path& path, std::span<const char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("error writing '" + path.string() + "'");
}

}  // namespace detail

inline std::vector<char> encode_bag(const EmbeddingBag& bag) {
  validate_bag(bag);
  if (bag.n > UINT32_MAX || bag.d > UINT32_MAX) throw FormatError("bag dimensions exceed u32 range");
  std::vector<char> out;
  out.reserve(kBagHeaderBytes + 4 * bag.data.size());
  for (char c : kBagMagic) out.push_back(c);
  detail::put_u16(out, kBagVersion);
  detail::put_u16(out, 0);
  detail::put_u32(out, static_cast<std::uint32_t>(bag.n));
  detail::put_u32(out, static_cast<std::uint32_t>(bag.d));
  for (float v : bag.data) detail::put_f32(out, v);
  return out;
}

inline EmbeddingBag decode_bag(std::span<const char> bytes, std::string slide_id = {}) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < kBagHeaderBytes) {
    throw FormatError("truncated header: " + std::to_string(bytes.size()) + " bytes, need 16");
  }
  if (std::memcmp(p, kBagMagic.data(), 4) != 0) {
    throw FormatError("bad magic '" + std::string(bytes.data(), 4) + "', expected 'MILB'");
  }
  const std::uint16_t version = detail::get_u16(p + 4);
  if (version != kBagVersion) throw FormatError("unsupported bag version " + std::to_string(version));
  const std::uint16_t flags = detail::get_u16(p + 6);
  if (flags != 0) throw FormatError("unsupported bag flags " + std::to_string(flags));
  const std::uint64_t n = detail::get_u32(p + 8);
  const std::uint64_t d = detail::get_u32(p + 12);
  if (n == 0 || d == 0) throw FormatError("bag header has n=" + std::to_string(n) + ", d=" + std::to_string(d));

  // n*d fits in 64 bits (both are u32), but the byte count 4*n*d may not.
  const std::uint64_t count = n * d;
  if (count > (UINT64_MAX - kBagHeaderBytes) / 4) throw FormatError("n*d overflows the addressable size");
  const std::uint64_t expected = kBagHeaderBytes + 4 * count;
  if (bytes.size() < expected) {
    throw FormatError("truncated payload: header says n=" + std::to_string(n) + ", d=" + std::to_string(d) +
                      " (" + std::to_string(expected) + " bytes), file has " + std::to_string(bytes.size()));
  }
  if (bytes.size() > expected) {
    throw FormatError("trailing data: expected " + std::to_string(expected) + " bytes, file has " +
                      std::to_string(bytes.size()));
  }

  EmbeddingBag bag(std::move(slide_id), n, d, std::vector<float>(count));
  const unsigned char* payload = p + kBagHeaderBytes;
  for (std::uint64_t i = 0; i < count; ++i) {
    bag.data[i] = std::bit_cast<float>(detail::get_u32(payload + 4 * i));
  }
  validate_bag(bag);
  return bag;
}

inline void write_bag(const EmbeddingBag& bag, const std::filesystem::path& path) {
  const auto bytes = encode_bag(bag);
  detail::write_file(path, bytes);
}

inline EmbeddingBag read_bag(const std::filesystem::path& path, std::string slide_id = {}) {
  const auto bytes = detail::read_file(path);
  try {
    return decode_bag(bytes, std::move(slide_id));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace milengine::data
