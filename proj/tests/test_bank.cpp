// Copyright (c) 2026 The uap Authors
// SPDX-License-Identifier: Apache-2.0

#include <sstream>

#include "test_util.hpp"

namespace uap {
namespace {

using testing::random_tensor;

// Smallest within-cluster SSE over every labelling of the points into at most k groups.
double brute_force_sse(const DenseTensor& pts, std::size_t k) {
  const std::size_t n = pts.dim(0);
  std::vector<std::size_t> labels(n, 0);
  double best = std::numeric_limits<double>::infinity();
  for (;;) {
    best = std::min(best, partition_sse(pts, labels, k));
    std::size_t i = 0;
    while (i < n && ++labels[i] == k) labels[i++] = 0;
    if (i == n) break;
  }
  return best;
}

TEST(KMeans, OneClusterPerPoint) {
  SeededRng rng(1, 0);
  const DenseTensor pts = random_tensor({6, 3}, rng);
  const KMeansResult r = kmeans(pts, 6, rng);
  std::set<std::vector<double>> want, got;
  for (std::size_t i = 0; i < 6; ++i) {
    want.insert({pts.row(i).begin(), pts.row(i).end()});
    got.insert({r.centers.row(i).begin(), r.centers.row(i).end()});
  }
  EXPECT_EQ(got, want);
  EXPECT_EQ(r.sse, 0.0);
}

TEST(KMeans, SingleClusterIsMean) {
  SeededRng rng(2, 0);
  const DenseTensor pts = random_tensor({9, 4}, rng);
  const KMeansResult r = kmeans(pts, 1, rng);
  for (std::size_t j = 0; j < 4; ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < 9; ++i) m += pts.at(i, j) / 9.0;
    EXPECT_NEAR(r.centers.at(0, j), m, 1e-14);
  }
}

TEST(KMeans, SquareCornersMatchBruteForce) {
  // Rectangle corners so the optimum (pair along the short side) is unique.
  const DenseTensor pts({4, 2}, {0, 0, 2, 0, 0, 1, 2, 1});
  const double opt = brute_force_sse(pts, 2);
  EXPECT_DOUBLE_EQ(opt, 1.0);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SeededRng rng(seed, 0);
    EXPECT_NEAR(kmeans(pts, 2, rng).sse, opt, 1e-12) << "seed " << seed;
  }
  const DenseTensor square({4, 2}, {0, 0, 1, 0, 0, 1, 1, 1});
  SeededRng rng(3, 0);
  EXPECT_NEAR(kmeans(square, 2, rng).sse, brute_force_sse(square, 2), 1e-12);
}

TEST(KMeans, SseNonIncreasing) {
  SeededRng rng(4, 0);
  for (int trial = 0; trial < 50; ++trial) {
    const DenseTensor pts = random_tensor({40, 5}, rng);
    const KMeansResult r = kmeans(pts, 5, rng);
    ASSERT_FALSE(r.sse_trace.empty());
    for (std::size_t i = 1; i < r.sse_trace.size(); ++i) ASSERT_LE(r.sse_trace[i], r.sse_trace[i - 1] + 1e-12);
    EXPECT_LE(r.sse, r.sse_trace.back() + 1e-12);
  }
}

TEST(KMeans, NearOptimalOnSmallInstances) {
  SeededRng rng(5, 0);
  int good = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto n = static_cast<std::size_t>(rng.range(4, 8));
    const auto k = static_cast<std::size_t>(rng.range(2, 3));
    const DenseTensor pts = random_tensor({n, 2}, rng);
    SeededRng krng = rng.derive({static_cast<std::uint64_t>(trial)});
    const double got = kmeans(pts, k, krng).sse;
    if (got <= 1.05 * brute_force_sse(pts, k) + 1e-12) ++good;
  }
  EXPECT_GE(good, 95);
}

TEST(KMeans, Errors) {
  SeededRng rng(6, 0);
  EXPECT_UAP_ERROR(kmeans(DenseTensor({3, 2}), 4, rng), ErrorCode::kKTooLarge);
  EXPECT_UAP_ERROR(kmeans(DenseTensor({3, 2}), 0, rng), ErrorCode::kInvalidArgument);
  EXPECT_UAP_ERROR(kmeans(DenseTensor({6}), 1, rng), ErrorCode::kShapeMismatch);
}

TEST(KMeans, DuplicatePointsStayFinite) {
  SeededRng rng(7, 0);
  const KMeansResult r = kmeans(DenseTensor({16, 4}, 0.3), 4, rng);
  EXPECT_TRUE(r.centers.all_finite());
  EXPECT_EQ(r.sse, 0.0);
}

class BankTest : public ::testing::Test {
 protected:
  BankTest() : ensemble_(make_ensemble({1, 2, 3}, EncoderDims{})) {
    SeededRng rng(8, 0);
    target_ = random_tensor({32, 32, 3}, rng, 0.0, 1.0);
    settings_.crops = 4;
    settings_.clusters = 4;
    settings_.encoder_seeds = {1, 2, 3};
  }

  TargetBank build(std::uint64_t seed = 0) const { return build_bank(target_, ensemble_, settings_, SeededRng(seed, 1)); }

  std::vector<EncoderPtr> ensemble_;
  DenseTensor target_;
  BankSettings settings_;
};

TEST_F(BankTest, ShapeContract) {
  const TargetBank bank = build();
  EXPECT_EQ(bank.num_encoders(), 3u);
  EXPECT_EQ(bank.num_crops(), 5u);
  EXPECT_EQ(bank.k(), 4u);
  for (std::size_t e = 0; e < 3; ++e)
    for (std::size_t c = 0; c < 5; ++c) {
      EXPECT_EQ(bank.centers(e, c).shape(), (Shape{4, 16}));
      EXPECT_EQ(bank.global_feat(e, c).shape(), (Shape{16}));
      EXPECT_LE(bank.k(), EncoderDims{}.tokens());
    }
  EXPECT_EQ(bank.crop_specs().back(), attention_guided_crop(target_, *ensemble_[0], settings_.crop).spec);
}

TEST_F(BankTest, Deterministic) {
  EXPECT_EQ(build(3).bytes(), build(3).bytes());
  EXPECT_NE(build(3).bytes(), build(4).bytes());
}

TEST_F(BankTest, RoundTrip) {
  testing::TempDir dir("bank");
  const TargetBank bank = build();
  bank.save(dir / "t.ubk");
  const Digest want = settings_.digest();
  const TargetBank back = TargetBank::load(dir / "t.ubk", &want);
  EXPECT_EQ(back.bytes(), bank.bytes());
  for (std::size_t e = 0; e < 3; ++e)
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(back.centers(e, c), bank.centers(e, c));
  EXPECT_EQ(back.crop_specs(), bank.crop_specs());
}

TEST_F(BankTest, LoadErrors) {
  const std::string bytes = build().bytes();
  auto load = [](const std::string& s, const Digest* d = nullptr) {
    std::istringstream in(s, std::ios::binary);
    return TargetBank::load(in, d);
  };
  EXPECT_UAP_ERROR(load(bytes.substr(0, bytes.size() - 10)), ErrorCode::kTruncatedFile);
  std::string bad = bytes;
  bad[1] = 'X';
  EXPECT_UAP_ERROR(load(bad), ErrorCode::kBadMagic);
  BankSettings other = settings_;
  other.clusters = 3;
  const Digest other_digest = other.digest();
  EXPECT_UAP_ERROR(load(bytes, &other_digest), ErrorCode::kVersionMismatch);
}

TEST_F(BankTest, SettingsDigestCoversEveryField) {
  const Digest base = settings_.digest();
  auto differs = [&](auto mutate) {
    BankSettings s = settings_;
    mutate(s);
    return s.digest() != base;
  };
  EXPECT_TRUE(differs([](BankSettings& s) { s.crops = 5; }));
  EXPECT_TRUE(differs([](BankSettings& s) { s.attention_crop = false; }));
  EXPECT_TRUE(differs([](BankSettings& s) { s.crop.scale_min = 0.6; }));
  EXPECT_TRUE(differs([](BankSettings& s) { s.dims.embed_dim = 8; }));
  EXPECT_TRUE(differs([](BankSettings& s) { s.encoder_seeds = {1, 2, 4}; }));
  EXPECT_TRUE(differs([](BankSettings& s) { s.seed = 9; }));
}

TEST_F(BankTest, EmptyCropSet) {
  settings_.crops = 0;
  settings_.attention_crop = false;
  EXPECT_UAP_ERROR(build(), ErrorCode::kInvalidArgument);
}

}  // namespace
}  // namespace uap
