// Copyright (c) 2026 The uap Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <limits>
#include <vector>

#include "uap/error.hpp"
#include "uap/rng.hpp"
#include "uap/tensor.hpp"

namespace uap {

struct KMeansOptions {
  std::size_t max_iters = 100;
  double tol = 1e-8;  // stop once no center moves farther than this
  std::size_t restarts = 10;  // independent seedings; lowest final SSE wins
};

struct KMeansResult {
  DenseTensor centers;               // K x d
  std::vector<std::size_t> labels;   // per point
  double sse = 0.0;                  // within-cluster sum of squares at the returned centers
  std::vector<double> sse_trace;     // SSE after each assignment step
  std::size_t iterations = 0;
};

namespace detail {

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double t = a[i] - b[i];
    s += t * t;
  }
  return s;
}

inline double assign(const DenseTensor& points, const DenseTensor& centers, std::vector<std::size_t>& labels,
                     std::vector<double>& dist) {
  const std::size_t n = points.dim(0), k = centers.dim(0);
  double sse = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t c = 0; c < k; ++c) {
      const double dd = sq_dist(points.row(i), centers.row(c));
      if (dd < best) {
        best = dd;
        arg = c;
      }
    }
    labels[i] = arg;
    dist[i] = best;
    sse += best;
  }
  return sse;
}

// One k-means++ seeding followed by Lloyd iterations. Empty clusters are
// re-seeded at the point currently farthest from its center.
inline KMeansResult lloyd_run(const DenseTensor& points, std::size_t k, SeededRng& rng, const KMeansOptions& opt) {
  const std::size_t n = points.dim(0), d = points.dim(1);
  KMeansResult res;
  res.centers = DenseTensor({k, d});
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());

  // Seeding.
  std::size_t first = rng.below(n);
  std::copy(points.row(first).begin(), points.row(first).end(), res.centers.row(0).begin());
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      dist[i] = std::min(dist[i], detail::sq_dist(points.row(i), res.centers.row(c - 1)));
      total += dist[i];
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      const double u = rng.uniform() * total;
      double acc = 0.0;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        acc += dist[i];
        if (u < acc && dist[i] > 0.0) {
          pick = i;
          break;
        }
      }
      while (dist[pick] == 0.0 && pick > 0) --pick;
    }
    std::copy(points.row(pick).begin(), points.row(pick).end(), res.centers.row(c).begin());
  }

  res.labels.assign(n, 0);
  std::vector<std::size_t> counts(k);
  for (std::size_t it = 0; it < opt.max_iters; ++it) {
    const double sse = detail::assign(points, res.centers, res.labels, dist);
    res.sse_trace.push_back(sse);
    res.iterations = it + 1;

    DenseTensor next({k, d});
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[res.labels[i]];
      auto dst = next.row(res.labels[i]);
      auto src = points.row(i);
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      auto row = next.row(c);
      if (counts[c] > 0) {
        for (double& v : row) v /= static_cast<double>(counts[c]);
        continue;
      }
      std::size_t far = 0;
      for (std::size_t i = 1; i < n; ++i)
        if (dist[i] > dist[far]) far = i;
      std::copy(points.row(far).begin(), points.row(far).end(), row.begin());
      dist[far] = 0.0;
    }

    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c) shift = std::max(shift, detail::sq_dist(next.row(c), res.centers.row(c)));
    res.centers = std::move(next);
    if (std::sqrt(shift) < opt.tol) break;
  }
  res.sse = detail::assign(points, res.centers, res.labels, dist);
  return res;
}

}  // namespace detail

// Best of opt.restarts k-means++/Lloyd runs, all drawn from rng in order.
inline KMeansResult kmeans(const DenseTensor& points, std::size_t k, SeededRng& rng, const KMeansOptions& opt = {}) {
  require(points.rank() == 2, ErrorCode::kShapeMismatch, "kmeans expects an L x d matrix");
  const std::size_t n = points.dim(0);
  require(k >= 1, ErrorCode::kInvalidArgument, "k must be >= 1");
  require(k <= n, ErrorCode::kKTooLarge, "k=" + std::to_string(k) + " exceeds " + std::to_string(n) + " points");
  require(opt.restarts >= 1, ErrorCode::kInvalidArgument, "kmeans needs at least one restart");
  KMeansResult best = detail::lloyd_run(points, k, rng, opt);
  for (std::size_t r = 1; r < opt.restarts; ++r) {
    KMeansResult run = detail::lloyd_run(points, k, rng, opt);
    if (run.sse < best.sse) best = std::move(run);
  }
  ensure_finite(best.centers, "kmeans centers");
  return best;
}

// Sum of squared distances of each point to the mean of its group.
inline double partition_sse(const DenseTensor& points, const std::vector<std::size_t>& labels, std::size_t k) {
  const std::size_t n = points.dim(0), d = points.dim(1);
  DenseTensor means({k, d});
  std::vector<std::size_t> counts(k);
  for (std::size_t i = 0; i < n; ++i) {
    ++counts[labels[i]];
    for (std::size_t j = 0; j < d; ++j) means.at(labels[i], j) += points.at(i, j);
  }
  for (std::size_t c = 0; c < k; ++c)
    if (counts[c]) for (std::size_t j = 0; j < d; ++j) means.at(c, j) /= static_cast<double>(counts[c]);
  double sse = 0.0;
  for (std::size_t i = 0; i < n; ++i) sse += detail::sq_dist(points.row(i), means.row(labels[i]));
  return sse;
}

}  // namespace uap
