// Copyright (c) 2026 The uap Authors
// SPDX-License-Identifier: Apache-2.0
//
// NTF tensor files:
//   "NTF1" | rank:u8 | 3 zero bytes | rank x u64 LE extents | numel x f64 LE payload

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "uap/error.hpp"
#include "uap/tensor.hpp"

namespace uap {

inline constexpr std::array<char, 4> kNtfMagic = {'N', 'T', 'F', '1'};

namespace detail {

inline void put_u64_le(std::ostream& out, std::uint64_t v) {
  std::array<char, 8> b;
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b.data(), 8);
}

inline std::uint64_t get_u64_le(const unsigned char* b) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

inline void read_exact(std::istream& in, void* dst, std::size_t n, const char* what) {
  in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  require(static_cast<std::size_t>(in.gcount()) == n, ErrorCode::kTruncatedFile,
          std::string("unexpected end of data while reading ") + what);
}

}  // namespace detail

inline void write_ntf(const DenseTensor& t, std::ostream& out) {
  require(t.rank() >= 1 && t.rank() <= kMaxRank, ErrorCode::kRankOutOfRange, "cannot serialize rank " +
                                                                                 std::to_string(t.rank()));
  out.write(kNtfMagic.data(), 4);
  const std::array<char, 4> rank_and_pad = {static_cast<char>(t.rank()), 0, 0, 0};
  out.write(rank_and_pad.data(), 4);
  for (std::size_t e : t.shape()) detail::put_u64_le(out, e);
  for (double v : t.data()) detail::put_u64_le(out, std::bit_cast<std::uint64_t>(v));
  require(out.good(), ErrorCode::kIoError, "write failed");
}

inline DenseTensor read_ntf(std::istream& in) {
  std::array<char, 4> magic{};
  detail::read_exact(in, magic.data(), 4, "magic");
  require(magic == kNtfMagic, ErrorCode::kBadMagic, "not an NTF1 block");
  std::array<unsigned char, 4> hdr{};
  detail::read_exact(in, hdr.data(), 4, "rank");
  const std::size_t rank = hdr[0];
  require(rank >= 1 && rank <= kMaxRank, ErrorCode::kRankOutOfRange, "rank " + std::to_string(rank));
  Shape shape(rank);
  std::size_t numel = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    std::array<unsigned char, 8> b{};
    detail::read_exact(in, b.data(), 8, "shape");
    shape[i] = detail::get_u64_le(b.data());
    require(shape[i] > 0 && shape[i] < (std::uint64_t{1} << 40), ErrorCode::kShapeMismatch,
            "implausible extent " + std::to_string(shape[i]));
    numel *= shape[i];
  }
  std::vector<unsigned char> payload(numel * 8);
  detail::read_exact(in, payload.data(), payload.size(), "payload");
  std::vector<double> data(numel);
  for (std::size_t i = 0; i < numel; ++i) data[i] = std::bit_cast<double>(detail::get_u64_le(&payload[8 * i]));
  return DenseTensor(std::move(shape), std::move(data));
}

inline void write_ntf(const DenseTensor& t, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.is_open(), ErrorCode::kIoError, "cannot open " + path.string() + " for writing");
  write_ntf(t, out);
}

inline DenseTensor read_ntf(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.is_open(), ErrorCode::kIoError, "cannot open " + path.string());
  return read_ntf(in);
}

inline std::string ntf_bytes(const DenseTensor& t) {
  std::ostringstream out(std::ios::binary);
  write_ntf(t, out);
  return std::move(out).str();
}

}  // namespace uap
