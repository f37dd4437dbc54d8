// Copyright (c) 2026 The uap Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <span>
#include <vector>

#include "uap/error.hpp"

namespace uap {

namespace detail {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Philox4x32-10 (Salmon et al., SC'11).
inline std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                               std::array<std::uint32_t, 2> key) {
  constexpr std::uint32_t kM0 = 0xD2511F53u;
  constexpr std::uint32_t kM1 = 0xCD9E8D57u;
  constexpr std::uint32_t kW0 = 0x9E3779B9u;
  constexpr std::uint32_t kW1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(kM0) * ctr[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(kM1) * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
    const auto lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
    const auto lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kW0;
    key[1] += kW1;
  }
  return ctr;
}

}  // namespace detail

// Folds a path of identifiers (phase tag, epoch, task, step, ...) into a
// single stream id so every random decision gets its own stream.
inline std::uint64_t stream_key(std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = 0x6A09E667F3BCC908ULL;
  for (std::uint64_t v : path) h = detail::splitmix64(h ^ detail::splitmix64(v));
  return h;
}

// Counter-based generator keyed by (seed, stream_id, counter). Streams never
// share state, so draws from one stream are independent of how calls on other
// streams are interleaved.
class SeededRng {
 public:
  SeededRng(std::uint64_t seed, std::uint64_t stream_id) : seed_(seed), stream_(stream_id) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_; }
  std::uint64_t counter() const noexcept { return counter_; }

  // Child generator with the same seed and a stream derived from this one.
  SeededRng derive(std::initializer_list<std::uint64_t> path) const {
    std::uint64_t h = stream_;
    for (std::uint64_t v : path) h = detail::splitmix64(h ^ detail::splitmix64(v + 0x5851F42D4C957F2DULL));
    return SeededRng(seed_, h);
  }

  std::uint64_t next_u64() {
    if (buffered_) {
      buffered_ = false;
      return buffer_;
    }
    const std::uint64_t block = counter_++;
    const std::array<std::uint32_t, 4> ctr = {
        static_cast<std::uint32_t>(block), static_cast<std::uint32_t>(block >> 32),
        static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)};
    const std::array<std::uint32_t, 2> key = {static_cast<std::uint32_t>(seed_),
                                              static_cast<std::uint32_t>(seed_ >> 32)};
    const auto out = detail::philox4x32(ctr, key);
    buffer_ = (static_cast<std::uint64_t>(out[2]) << 32) | out[3];
    buffered_ = true;
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
  }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), unbiased (Lemire's multiply-and-reject).
  std::uint64_t below(std::uint64_t n) {
    require(n > 0, ErrorCode::kInvalidArgument, "below(0)");
    unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
      const std::uint64_t threshold = (0 - n) % n;
      while (low < threshold) {
        m = static_cast<unsigned __int128>(next_u64()) * n;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  // Uniform integer in [lo, hi] inclusive.
  std::int64_t range(std::int64_t lo, std::int64_t hi) {
    require(hi >= lo, ErrorCode::kInvalidArgument, "range(lo > hi)");
    return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi - lo) + 1));
  }

  template <class T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = below(i);
      std::swap(items[i - 1], items[j]);
    }
  }

  // n distinct indices from [0, pool), uniform over size-n subsets, in random order.
  std::vector<std::size_t> sample_without_replacement(std::size_t pool, std::size_t n) {
    require(n <= pool, ErrorCode::kPoolTooSmall, "cannot draw " + std::to_string(n) +
                                                     " items from a pool of " + std::to_string(pool));
    std::vector<std::size_t> idx(pool);
    for (std::size_t i = 0; i < pool; ++i) idx[i] = i;
    // Partial Fisher-Yates: the first n slots are a uniform random n-subset.
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = i + below(pool - i);
      std::swap(idx[i], idx[j]);
    }
    idx.resize(n);
    return idx;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
  std::uint64_t buffer_ = 0;
  bool buffered_ = false;
};

}  // namespace uap
