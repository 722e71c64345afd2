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

#include <span>
#include <vector>

#include "m3rec/data.hpp"
#include "m3rec/gaussian.hpp"
#include "m3rec/nn.hpp"

namespace m3rec {

struct UserContext {
  GaussianPosterior posterior;
  std::vector<double> sample;
};

// Amortized per-user posterior over the context variable. Each step is
// encoded independently (its feature depends on that step's record alone)
// and the per-step Gaussians are pooled with the standard-normal prior by
// precision-weighted product, which makes the posterior order-free.
class ContextEncoder {
 public:
  ContextEncoder() = default;

  ContextEncoder(int d_c, int window, int d_item, std::vector<int> hidden,
                 Activation act, Rng& rng)
      : d_c_(d_c), window_(window) {
    std::vector<int> sizes;
    sizes.push_back(step_feature_dim(window, d_item));
    for (int h : hidden) sizes.push_back(h);
    sizes.push_back(2 * d_c);
    step_net_ = Mlp(sizes, act, rng);
  }

  static int step_feature_dim(int window, int d_item) {
    return window * d_item + d_item + d_item + 1;
  }

  int d_c() const { return d_c_; }
  int window() const { return window_; }
  Mlp& step_net() { return step_net_; }
  const Mlp& step_net() const { return step_net_; }

  /// feature = concat(window featurization of the clicked item, clicked-item
  /// embedding, slate mean embedding, reward).
  std::vector<double> step_feature(const StepRecord& step,
                                   const ItemEmbeddings& emb) const {
    const State s = make_state(std::vector<int>{step.click}, window_);
    std::vector<double> f = emb.featurize(s);
    const auto click_emb = emb.row(step.click);
    f.insert(f.end(), click_emb.begin(), click_emb.end());
    const auto mean_emb = emb.slate_mean(step.slate);
    f.insert(f.end(), mean_emb.begin(), mean_emb.end());
    f.push_back(step.reward);
    return f;
  }

  GaussianPosterior step_posterior(const StepRecord& step,
                                   const ItemEmbeddings& emb) const {
    return GaussianPosterior::from_head(step_net_.forward(step_feature(step, emb)));
  }

  std::vector<GaussianPosterior> step_posteriors(const Trajectory& traj,
                                                 const ItemEmbeddings& emb) const {
    std::vector<GaussianPosterior> out;
    out.reserve(traj.steps.size());
    for (const auto& s : traj.steps) out.push_back(step_posterior(s, emb));
    return out;
  }

  /// Lexicographic accumulation order for the pooled product. Floating
  /// addition is not associative, so a canonical order is what makes the
  /// posterior exactly invariant to step permutations.
  static std::vector<std::size_t> pool_order(
      std::span<const GaussianPosterior> steps) {
    std::vector<std::size_t> idx(steps.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      if (steps[a].mean != steps[b].mean) return steps[a].mean < steps[b].mean;
      return steps[a].log_std < steps[b].log_std;
    });
    return idx;
  }

  /// Product of the given Gaussians with the N(0, I) prior, in natural
  /// parameters: precision adds, precision-weighted means add.
  GaussianPosterior pool(std::span<const GaussianPosterior> steps) const {
    std::vector<double> precision(static_cast<std::size_t>(d_c_), 1.0);
    std::vector<double> weighted_mean(static_cast<std::size_t>(d_c_), 0.0);
    for (std::size_t j : pool_order(steps)) {
      const auto& g = steps[j];
      if (static_cast<int>(g.dim()) != d_c_) {
        throw ValidationError("context pool: dim mismatch");
      }
      for (int i = 0; i < d_c_; ++i) {
        const double prec = std::exp(-2.0 * g.log_std[i]);
        precision[i] += prec;
        weighted_mean[i] += prec * g.mean[i];
      }
    }
    std::vector<double> mean(static_cast<std::size_t>(d_c_));
    std::vector<double> log_std(static_cast<std::size_t>(d_c_));
    for (int i = 0; i < d_c_; ++i) {
      mean[i] = weighted_mean[i] / precision[i];
      log_std[i] = -0.5 * std::log(precision[i]);
    }
    return GaussianPosterior(std::move(mean), std::move(log_std));
  }

  GaussianPosterior encode_posterior(const Trajectory& traj,
                                     const ItemEmbeddings& emb) const {
    const auto steps = step_posteriors(traj, emb);
    return pool(steps);
  }

  UserContext encode_context(const Trajectory& traj, const ItemEmbeddings& emb,
                             Rng& rng) const {
    UserContext ctx;
    ctx.posterior = encode_posterior(traj, emb);
    ctx.sample = ctx.posterior.sample(rng);
    return ctx;
  }

  UserContext encode_context_with_noise(const Trajectory& traj,
                                        const ItemEmbeddings& emb,
                                        std::span<const double> noise) const {
    UserContext ctx;
    ctx.posterior = encode_posterior(traj, emb);
    ctx.sample = ctx.posterior.sample_with_noise(noise);
    return ctx;
  }

  static UserContext prior_context(int d_c) {
    UserContext ctx;
    ctx.posterior = GaussianPosterior::standard(static_cast<std::size_t>(d_c));
    ctx.sample.assign(static_cast<std::size_t>(d_c), 0.0);
    return ctx;
  }

  // ---- taped path (gradients flow into the step net and, when the
  // embedding table is trainable, into the embeddings) ----

  struct Taped {
    TapedGaussian posterior;
    std::vector<ad::Var> sample;
  };

  /// Constant prior context with a zero sample (no_context ablation).
  static Taped zero_taped(int d_c) {
    Taped out;
    out.posterior = TapedGaussian::standard(static_cast<std::size_t>(d_c));
    out.sample.assign(static_cast<std::size_t>(d_c), ad::constant(0.0));
    return out;
  }

  Taped encode_taped(const Trajectory& traj, const AttachedMlp& step_net,
                     const AttachedEmbeddings& emb,
                     std::span<const double> noise) const {
    std::vector<TapedGaussian> step_gaussians;
    std::vector<GaussianPosterior> step_values;
    step_gaussians.reserve(traj.steps.size());
    step_values.reserve(traj.steps.size());
    for (const auto& step : traj.steps) {
      const State s = make_state(std::vector<int>{step.click}, window_);
      std::vector<ad::Var> f = emb.featurize(s);
      auto click_emb = emb.row(step.click);
      f.insert(f.end(), click_emb.begin(), click_emb.end());
      auto mean_emb = emb.slate_mean(step.slate);
      f.insert(f.end(), mean_emb.begin(), mean_emb.end());
      f.push_back(ad::constant(step.reward));
      const auto head = step_net.forward(f);
      step_gaussians.push_back(TapedGaussian::from_head(head));
      step_values.push_back(step_gaussians.back().values());
    }
    std::vector<ad::Var> precision(static_cast<std::size_t>(d_c_),
                                   ad::constant(1.0));
    std::vector<ad::Var> weighted_mean(static_cast<std::size_t>(d_c_),
                                       ad::constant(0.0));
    for (std::size_t j : pool_order(step_values)) {
      const auto& g = step_gaussians[j];
      for (int i = 0; i < d_c_; ++i) {
        const ad::Var prec = ad::exp(g.log_std[i] * -2.0);
        precision[i] = precision[i] + prec;
        weighted_mean[i] = weighted_mean[i] + prec * g.mean[i];
      }
    }
    Taped out;
    for (int i = 0; i < d_c_; ++i) {
      out.posterior.mean.push_back(weighted_mean[i] / precision[i]);
      out.posterior.log_std.push_back(
          ad::clamp(ad::log(precision[i]) * -0.5, kLogStdMin, kLogStdMax));
    }
    out.sample = out.posterior.sample_with_noise(noise);
    return out;
  }

 private:
  int d_c_ = 0;
  int window_ = 1;
  Mlp step_net_;
};

/// KL of the context posterior to the standard-normal prior; added to each
/// downstream loss with weight beta_c.
inline double context_kl_regularizer(const UserContext& ctx) {
  return kl_diag_gaussians(ctx.posterior,
                           GaussianPosterior::standard(ctx.posterior.dim()));
}

inline ad::Var context_kl_regularizer(const TapedGaussian& posterior) {
  return kl_diag_gaussians(posterior, TapedGaussian::standard(posterior.dim()));
}

}  // namespace m3rec
