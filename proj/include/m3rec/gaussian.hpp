// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "m3rec/autodiff.hpp"
#include "m3rec/common.hpp"

namespace m3rec {

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;

// Diagonal Gaussian with log-std clamped to [kLogStdMin, kLogStdMax].
struct GaussianPosterior {
  std::vector<double> mean;
  std::vector<double> log_std;

  GaussianPosterior() = default;

  GaussianPosterior(std::vector<double> mu, std::vector<double> ls)
      : mean(std::move(mu)), log_std(std::move(ls)) {
    if (mean.size() != log_std.size()) {
      throw ValidationError("GaussianPosterior: dim mismatch");
    }
    for (auto& v : log_std) v = std::min(std::max(v, kLogStdMin), kLogStdMax);
  }

  static GaussianPosterior standard(std::size_t dim) {
    return GaussianPosterior(std::vector<double>(dim, 0.0),
                             std::vector<double>(dim, 0.0));
  }

  /// Splits a network head output [mean..., log_std...] in two.
  static GaussianPosterior from_head(std::span<const double> head) {
    if (head.size() % 2 != 0) {
      throw ValidationError("GaussianPosterior::from_head: odd head size");
    }
    const std::size_t d = head.size() / 2;
    return GaussianPosterior(
        std::vector<double>(head.begin(), head.begin() + d),
        std::vector<double>(head.begin() + d, head.end()));
  }

  std::size_t dim() const { return mean.size(); }

  std::vector<double> precision() const {
    std::vector<double> p(dim());
    for (std::size_t i = 0; i < dim(); ++i) p[i] = std::exp(-2.0 * log_std[i]);
    return p;
  }

  /// mean + exp(log_std) * eps for externally supplied noise.
  std::vector<double> sample_with_noise(std::span<const double> eps) const {
    if (eps.size() != dim()) {
      throw ValidationError("sample_with_noise: noise dim mismatch");
    }
    std::vector<double> z(dim());
    for (std::size_t i = 0; i < dim(); ++i) {
      z[i] = mean[i] + std::exp(log_std[i]) * eps[i];
    }
    return z;
  }

  std::vector<double> sample(Rng& rng) const {
    return sample_with_noise(rng.normal_vec(dim()));
  }
};

/// Closed-form KL(q || p) for diagonal Gaussians; nonnegative, zero iff q = p.
inline double kl_diag_gaussians(const GaussianPosterior& q,
                                const GaussianPosterior& p) {
  if (q.dim() != p.dim()) {
    throw ValidationError("kl_diag_gaussians: dim mismatch");
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < q.dim(); ++i) {
    const double vq = std::exp(2.0 * q.log_std[i]);
    const double vp = std::exp(2.0 * p.log_std[i]);
    const double dm = q.mean[i] - p.mean[i];
    kl += p.log_std[i] - q.log_std[i] + (vq + dm * dm) / (2.0 * vp) - 0.5;
  }
  return kl;
}

/// Log density of x under the diagonal Gaussian.
inline double log_density(const GaussianPosterior& g,
                          std::span<const double> x) {
  if (x.size() != g.dim()) throw ValidationError("log_density: dim mismatch");
  double lp = 0.0;
  for (std::size_t i = 0; i < g.dim(); ++i) {
    const double s = std::exp(g.log_std[i]);
    const double z = (x[i] - g.mean[i]) / s;
    lp += -0.5 * z * z - g.log_std[i] - 0.5 * std::log(2.0 * M_PI);
  }
  return lp;
}

// Taped counterpart used inside differentiable losses.
struct TapedGaussian {
  std::vector<ad::Var> mean;
  std::vector<ad::Var> log_std;

  static TapedGaussian from_head(std::span<const ad::Var> head) {
    if (head.size() % 2 != 0) {
      throw ValidationError("TapedGaussian::from_head: odd head size");
    }
    const std::size_t d = head.size() / 2;
    TapedGaussian g;
    g.mean.assign(head.begin(), head.begin() + d);
    g.log_std.reserve(d);
    for (std::size_t i = 0; i < d; ++i) {
      g.log_std.push_back(ad::clamp(head[d + i], kLogStdMin, kLogStdMax));
    }
    return g;
  }

  static TapedGaussian standard(std::size_t dim) {
    TapedGaussian g;
    g.mean.assign(dim, ad::constant(0.0));
    g.log_std.assign(dim, ad::constant(0.0));
    return g;
  }

  std::size_t dim() const { return mean.size(); }

  std::vector<ad::Var> sample_with_noise(std::span<const double> eps) const {
    if (eps.size() != dim()) {
      throw ValidationError("TapedGaussian::sample_with_noise: dim mismatch");
    }
    std::vector<ad::Var> z;
    z.reserve(dim());
    for (std::size_t i = 0; i < dim(); ++i) {
      z.push_back(mean[i] + ad::exp(log_std[i]) * eps[i]);
    }
    return z;
  }

  GaussianPosterior values() const {
    std::vector<double> mu(dim()), ls(dim());
    for (std::size_t i = 0; i < dim(); ++i) {
      mu[i] = mean[i].v;
      ls[i] = log_std[i].v;
    }
    return GaussianPosterior(std::move(mu), std::move(ls));
  }
};

inline ad::Var kl_diag_gaussians(const TapedGaussian& q,
                                 const TapedGaussian& p) {
  if (q.dim() != p.dim()) {
    throw ValidationError("kl_diag_gaussians: dim mismatch");
  }
  ad::Var kl = ad::constant(0.0);
  for (std::size_t i = 0; i < q.dim(); ++i) {
    const ad::Var vq = ad::exp(q.log_std[i] * 2.0);
    const ad::Var vp = ad::exp(p.log_std[i] * 2.0);
    const ad::Var dm = q.mean[i] - p.mean[i];
    kl = kl + p.log_std[i] - q.log_std[i] +
         (vq + ad::square(dm)) / (vp * 2.0) - 0.5;
  }
  return kl;
}

/// Unit-variance Gaussian reconstruction NLL: 0.5*||x - target||^2 +
/// 0.5*d*log(2*pi).
inline ad::Var gaussian_recon_nll(std::span<const ad::Var> pred,
                                  std::span<const double> target) {
  if (pred.size() != target.size()) {
    throw ValidationError("gaussian_recon_nll: dim mismatch");
  }
  ad::Var nll = ad::constant(0.5 * static_cast<double>(pred.size()) *
                             std::log(2.0 * M_PI));
  for (std::size_t i = 0; i < pred.size(); ++i) {
    nll = nll + ad::square(pred[i] - target[i]) * 0.5;
  }
  return nll;
}

}  // namespace m3rec
