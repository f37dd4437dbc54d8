// Copyright (c) 2026 The uap Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "uap/error.hpp"
#include "uap/tensor.hpp"

namespace uap {

struct SinkhornOptions {
  double reg = 0.05;
  std::size_t iters = 50;
};

// Entropic OT between uniform marginals (rows 1/K, columns 1/L) that maximizes
// <plan, sim> + reg * H(plan). Log-domain dual updates, then a rounding pass
// that maps the iterate onto the transport polytope so both marginals hold to
// round-off (Altschuler, Weed & Rigollet, 2017).
class Sinkhorn {
 public:
  Sinkhorn(const DenseTensor& sim, const SinkhornOptions& opt) : opt_(opt), sim_(sim) {
    require(sim.rank() == 2, ErrorCode::kShapeMismatch, "sinkhorn expects a K x L similarity matrix");
    require(opt.reg > 0.0, ErrorCode::kInvalidArgument, "sinkhorn regularization must be positive");
    require(opt.iters >= 1, ErrorCode::kInvalidArgument, "sinkhorn needs at least one iteration");
    K_ = sim.dim(0);
    L_ = sim.dim(1);
    solve();
  }

  const DenseTensor& plan() const { return plan_; }

  // Vector-Jacobian product through every iteration and the rounding pass:
  // returns d<grad_plan, plan>/d sim.
  DenseTensor vjp(const DenseTensor& grad_plan) const {
    grad_plan.check_same_shape(plan_);
    materialize_duals();
    const double reg = opt_.reg;
    DenseTensor gsim({K_, L_});

    // Rounding pass backward.
    DenseTensor g2 = grad_plan;
    if (err_mass_ > 0.0) {
      std::vector<double> ger(K_, 0.0), gec(L_, 0.0);
      double gs = 0.0;
      for (std::size_t k = 0; k < K_; ++k)
        for (std::size_t l = 0; l < L_; ++l) {
          const double g = grad_plan.at(k, l);
          ger[k] += g * err_col_[l] / err_mass_;
          gec[l] += g * err_row_[k] / err_mass_;
          gs -= g * err_row_[k] * err_col_[l] / (err_mass_ * err_mass_);
        }
      for (double& v : ger) v += gs;
      for (std::size_t k = 0; k < K_; ++k)
        for (std::size_t l = 0; l < L_; ++l) g2.at(k, l) -= ger[k] + gec[l];
    }
    DenseTensor g1({K_, L_});
    std::vector<double> gcs(L_, 0.0);
    for (std::size_t l = 0; l < L_; ++l) {
      double gy = 0.0;
      for (std::size_t k = 0; k < K_; ++k) {
        g1.at(k, l) = g2.at(k, l) * col_scale_[l];
        gy += g2.at(k, l) * p1_.at(k, l);
      }
      if (col_clipped_[l]) gcs[l] = -gy * col_target() / (col_sum_[l] * col_sum_[l]);
    }
    for (std::size_t k = 0; k < K_; ++k)
      for (std::size_t l = 0; l < L_; ++l) g1.at(k, l) += gcs[l];
    DenseTensor g0({K_, L_});
    for (std::size_t k = 0; k < K_; ++k) {
      double gx = 0.0;
      for (std::size_t l = 0; l < L_; ++l) {
        g0.at(k, l) = g1.at(k, l) * row_scale_[k];
        gx += g1.at(k, l) * p0_.at(k, l);
      }
      if (row_clipped_[k]) {
        const double grs = -gx * row_target() / (row_sum_[k] * row_sum_[k]);
        for (std::size_t l = 0; l < L_; ++l) g0.at(k, l) += grs;
      }
    }

    // p0 = exp((sim + f_T + g_T) / reg)
    std::vector<double> gf(K_, 0.0), gg(L_, 0.0);
    for (std::size_t k = 0; k < K_; ++k)
      for (std::size_t l = 0; l < L_; ++l) {
        const double gx = g0.at(k, l) * p0_.at(k, l) / reg;
        gsim.at(k, l) += gx;
        gf[k] += gx;
        gg[l] += gx;
      }

    // Dual iterations in reverse. f_t depends on g_{t-1}; g_t depends on f_t.
    for (std::size_t t = opt_.iters; t-- > 0;) {
      const auto& f = f_hist_[t + 1];
      // g_t[l] = reg log b - reg LSE_k((sim_kl + f_k)/reg)
      for (std::size_t l = 0; l < L_; ++l) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < K_; ++k) mx = std::max(mx, (sim_.at(k, l) + f[k]) / reg);
        double z = 0.0;
        for (std::size_t k = 0; k < K_; ++k) z += std::exp((sim_.at(k, l) + f[k]) / reg - mx);
        for (std::size_t k = 0; k < K_; ++k) {
          const double p = std::exp((sim_.at(k, l) + f[k]) / reg - mx) / z;
          gsim.at(k, l) -= gg[l] * p;
          gf[k] -= gg[l] * p;
        }
      }
      const auto& g_prev = g_hist_[t];
      std::vector<double> gg_prev(L_, 0.0);
      for (std::size_t k = 0; k < K_; ++k) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t l = 0; l < L_; ++l) mx = std::max(mx, (sim_.at(k, l) + g_prev[l]) / reg);
        double z = 0.0;
        for (std::size_t l = 0; l < L_; ++l) z += std::exp((sim_.at(k, l) + g_prev[l]) / reg - mx);
        for (std::size_t l = 0; l < L_; ++l) {
          const double p = std::exp((sim_.at(k, l) + g_prev[l]) / reg - mx) / z;
          gsim.at(k, l) -= gf[k] * p;
          gg_prev[l] -= gf[k] * p;
        }
      }
      gg = std::move(gg_prev);
      std::fill(gf.begin(), gf.end(), 0.0);
    }
    return gsim;
  }

 private:
  double row_target() const { return 1.0 / static_cast<double>(K_); }
  double col_target() const { return 1.0 / static_cast<double>(L_); }

  void solve() {
    const double reg = opt_.reg;
    double smax = sim_[0], smin = sim_[0];
    for (double v : sim_.data()) {
      smax = std::max(smax, v);
      smin = std::min(smin, v);
    }
    // Scaling-form iterations are exact rewrites of the log-domain ones and
    // need no exp inside the loop; they are safe while the kernel stays well
    // inside double range, which holds for cosine similarities.
    if ((smax - smin) / reg < 500.0)
      solve_scaling(smax);
    else
      solve_log();
  }

  void solve_scaling(double smax) {
    const double reg = opt_.reg;
    DenseTensor kern({K_, L_});
    for (std::size_t i = 0; i < kern.size(); ++i) kern[i] = std::exp((sim_[i] - smax) / reg);
    std::vector<double> u(K_, 1.0), v(L_, 1.0);
    f_hist_.assign(1, std::vector<double>(K_, 0.0));
    g_hist_.assign(1, std::vector<double>(L_, 0.0));
    for (std::size_t t = 0; t < opt_.iters; ++t) {
      for (std::size_t k = 0; k < K_; ++k) {
        double z = 0.0;
        for (std::size_t l = 0; l < L_; ++l) z += kern.at(k, l) * v[l];
        u[k] = row_target() / z;
      }
      for (std::size_t l = 0; l < L_; ++l) {
        double z = 0.0;
        for (std::size_t k = 0; k < K_; ++k) z += kern.at(k, l) * u[k];
        v[l] = col_target() / z;
      }
      u_hist_.push_back(u);
      v_hist_.push_back(v);
    }
    scaling_ = true;
    smax_ = smax;
    p0_ = DenseTensor({K_, L_});
    for (std::size_t k = 0; k < K_; ++k)
      for (std::size_t l = 0; l < L_; ++l) p0_.at(k, l) = u[k] * kern.at(k, l) * v[l];
    require(p0_.all_finite(), ErrorCode::kNonFinite, "sinkhorn plan overflowed");
    round_plan();
  }

  // Dual potentials per iteration; recovered from the scaling vectors on demand.
  void materialize_duals() const {
    if (!scaling_ || f_hist_.size() == opt_.iters + 1) return;
    for (std::size_t t = 0; t < opt_.iters; ++t) {
      std::vector<double> f(K_), g(L_);
      for (std::size_t k = 0; k < K_; ++k) f[k] = opt_.reg * std::log(u_hist_[t][k]) - smax_;
      for (std::size_t l = 0; l < L_; ++l) g[l] = opt_.reg * std::log(v_hist_[t][l]);
      f_hist_.push_back(std::move(f));
      g_hist_.push_back(std::move(g));
    }
  }

  void solve_log() {
    const double reg = opt_.reg;
    const double log_a = std::log(row_target());
    const double log_b = std::log(col_target());
    std::vector<double> f(K_, 0.0), g(L_, 0.0);
    f_hist_.assign(1, f);
    g_hist_.assign(1, g);
    for (std::size_t t = 0; t < opt_.iters; ++t) {
      for (std::size_t k = 0; k < K_; ++k) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t l = 0; l < L_; ++l) mx = std::max(mx, (sim_.at(k, l) + g[l]) / reg);
        double z = 0.0;
        for (std::size_t l = 0; l < L_; ++l) z += std::exp((sim_.at(k, l) + g[l]) / reg - mx);
        f[k] = reg * log_a - reg * (mx + std::log(z));
      }
      for (std::size_t l = 0; l < L_; ++l) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < K_; ++k) mx = std::max(mx, (sim_.at(k, l) + f[k]) / reg);
        double z = 0.0;
        for (std::size_t k = 0; k < K_; ++k) z += std::exp((sim_.at(k, l) + f[k]) / reg - mx);
        g[l] = reg * log_b - reg * (mx + std::log(z));
      }
      f_hist_.push_back(f);
      g_hist_.push_back(g);
    }
    p0_ = DenseTensor({K_, L_});
    for (std::size_t k = 0; k < K_; ++k)
      for (std::size_t l = 0; l < L_; ++l) p0_.at(k, l) = std::exp((sim_.at(k, l) + f[k] + g[l]) / reg);
    require(p0_.all_finite(), ErrorCode::kNonFinite, "sinkhorn plan overflowed");
    round_plan();
  }

  // Rounding onto the transport polytope.
  void round_plan() {
    row_sum_.assign(K_, 0.0);
    row_scale_.assign(K_, 1.0);
    row_clipped_.assign(K_, false);
    for (std::size_t k = 0; k < K_; ++k) {
      for (std::size_t l = 0; l < L_; ++l) row_sum_[k] += p0_.at(k, l);
      if (row_target() < row_sum_[k]) {
        row_scale_[k] = row_target() / row_sum_[k];
        row_clipped_[k] = true;
      }
    }
    p1_ = p0_;
    for (std::size_t k = 0; k < K_; ++k)
      for (std::size_t l = 0; l < L_; ++l) p1_.at(k, l) *= row_scale_[k];
    col_sum_.assign(L_, 0.0);
    col_scale_.assign(L_, 1.0);
    col_clipped_.assign(L_, false);
    for (std::size_t l = 0; l < L_; ++l) {
      for (std::size_t k = 0; k < K_; ++k) col_sum_[l] += p1_.at(k, l);
      if (col_target() < col_sum_[l]) {
        col_scale_[l] = col_target() / col_sum_[l];
        col_clipped_[l] = true;
      }
    }
    plan_ = p1_;
    for (std::size_t k = 0; k < K_; ++k)
      for (std::size_t l = 0; l < L_; ++l) plan_.at(k, l) *= col_scale_[l];
    err_row_.assign(K_, row_target());
    err_col_.assign(L_, col_target());
    for (std::size_t k = 0; k < K_; ++k)
      for (std::size_t l = 0; l < L_; ++l) {
        err_row_[k] -= plan_.at(k, l);
        err_col_[l] -= plan_.at(k, l);
      }
    err_mass_ = 0.0;
    for (double e : err_row_) err_mass_ += e;
    if (err_mass_ > 0.0)
      for (std::size_t k = 0; k < K_; ++k)
        for (std::size_t l = 0; l < L_; ++l) plan_.at(k, l) += err_row_[k] * err_col_[l] / err_mass_;
  }

  SinkhornOptions opt_;
  DenseTensor sim_;
  std::size_t K_ = 0, L_ = 0;
  mutable std::vector<std::vector<double>> f_hist_, g_hist_;
  std::vector<std::vector<double>> u_hist_, v_hist_;
  bool scaling_ = false;
  double smax_ = 0.0;
  DenseTensor p0_, p1_, plan_;
  std::vector<double> row_sum_, row_scale_, col_sum_, col_scale_;
  std::vector<bool> row_clipped_, col_clipped_;
  std::vector<double> err_row_, err_col_;
  double err_mass_ = 0.0;
};

inline DenseTensor sinkhorn(const DenseTensor& sim, double reg, std::size_t iters) {
  return Sinkhorn(sim, {reg, iters}).plan();
}

}  // namespace uap
