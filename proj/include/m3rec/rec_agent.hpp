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

#include <algorithm>
#include <set>
#include <span>
#include <vector>

#include "m3rec/context.hpp"
#include "m3rec/data.hpp"
#include "m3rec/gaussian.hpp"
#include "m3rec/nn.hpp"
#include "m3rec/rollout.hpp"

namespace m3rec {

enum class SlateMode { kSample, kGreedy };

struct SlateAction {
  std::vector<int> items;
  double log_prob = 0.0;
};

// pi(A | z_rec): item scores are inner products of a latent-conditioned
// query with the item embeddings; slates are built by Plackett-Luce
// sequential sampling without replacement, which keeps slate log
// probabilities exact for REINFORCE.
class RecNets {
 public:
  RecNets() = default;

  RecNets(int d_z, int d_c, int s_feat_dim, int d_item,
          const std::vector<int>& hidden, Activation act, Rng& rng) {
    auto with_hidden = [&](int in, int out) {
      std::vector<int> sizes{in};
      for (int h : hidden) sizes.push_back(h);
      sizes.push_back(out);
      return sizes;
    };
    z_encoder = Mlp(with_hidden(s_feat_dim + d_c, 2 * d_z), act, rng);
    z_prior = Mlp(with_hidden(d_c, 2 * d_z), act, rng);
    decoder = Mlp(with_hidden(d_z + d_c, s_feat_dim), act, rng);
    policy_head = Mlp(with_hidden(d_z, d_item), act, rng);
  }

  Mlp z_encoder, z_prior, decoder, policy_head;

  GaussianPosterior z_posterior(std::span<const double> s_feat,
                                std::span<const double> c) const {
    std::vector<double> in(s_feat.begin(), s_feat.end());
    in.insert(in.end(), c.begin(), c.end());
    return GaussianPosterior::from_head(z_encoder.forward(in));
  }

  GaussianPosterior z_prior_of(std::span<const double> c) const {
    return GaussianPosterior::from_head(z_prior.forward(c));
  }

  /// Scores over the whole catalog.
  std::vector<double> catalog_scores(std::span<const double> z_rec,
                                     const ItemEmbeddings& emb) const {
    const auto query = policy_head.forward(z_rec);
    std::vector<double> scores(static_cast<std::size_t>(emb.n_items()));
    for (int i = 0; i < emb.n_items(); ++i) {
      scores[static_cast<std::size_t>(i)] = dot(query, emb.row(i));
    }
    return scores;
  }

  /// Exact Plackett-Luce log probability of an ordered slate under scores.
  static double slate_log_prob(std::span<const double> scores,
                               std::span<const int> slate) {
    std::vector<int> remaining(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) remaining[i] = static_cast<int>(i);
    double lp = 0.0;
    for (int id : slate) {
      std::vector<double> logits;
      logits.reserve(remaining.size());
      std::size_t pos = remaining.size();
      for (std::size_t j = 0; j < remaining.size(); ++j) {
        logits.push_back(scores[static_cast<std::size_t>(remaining[j])]);
        if (remaining[j] == id) pos = j;
      }
      if (pos == remaining.size()) {
        throw ValidationError("slate_log_prob: repeated or invalid slate id");
      }
      lp += logits[pos] - logsumexp(logits);
      remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(pos));
    }
    return lp;
  }

  SlateAction propose_slate(std::span<const double> z_rec,
                            const ItemEmbeddings& emb, int k, SlateMode mode,
                            Rng& rng) const {
    if (k > emb.n_items()) {
      throw ValidationError("propose_slate: k exceeds catalog size");
    }
    const auto scores = catalog_scores(z_rec, emb);
    SlateAction action;
    if (mode == SlateMode::kGreedy) {
      std::vector<int> ids(scores.size());
      for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
      std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) {
        const double sa = scores[static_cast<std::size_t>(a)];
        const double sb = scores[static_cast<std::size_t>(b)];
        if (sa != sb) return sa > sb;
        return a < b;
      });
      ids.resize(static_cast<std::size_t>(k));
      action.items = std::move(ids);
      action.log_prob = slate_log_prob(scores, action.items);
      return action;
    }
    // sequential sampling without replacement from the renormalized softmax
    std::vector<int> remaining(scores.size());
    for (std::size_t i = 0; i < remaining.size(); ++i) remaining[i] = static_cast<int>(i);
    for (int pos = 0; pos < k; ++pos) {
      std::vector<double> logits;
      logits.reserve(remaining.size());
      for (int id : remaining) logits.push_back(scores[static_cast<std::size_t>(id)]);
      const auto probs = softmax(logits);
      const double x = rng.uniform();
      double acc = 0.0;
      std::size_t pick = probs.size() - 1;
      for (std::size_t j = 0; j < probs.size(); ++j) {
        acc += probs[j];
        if (x < acc) {
          pick = j;
          break;
        }
      }
      action.items.push_back(remaining[pick]);
      action.log_prob += std::log(probs[pick]);
      remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(pick));
    }
    return action;
  }

  /// Probability that the user's click x lands on slate member x under the
  /// score softmax restricted to the slate.
  double click_prob(std::span<const double> z_rec, int x,
                    std::span<const int> slate, const ItemEmbeddings& emb) const {
    std::set<int> distinct(slate.begin(), slate.end());
    if (distinct.size() != slate.size()) {
      throw ValidationError("click_prob: duplicate slate ids");
    }
    if (distinct.count(x) == 0) {
      throw ValidationError("click_prob: item not in slate");
    }
    const auto query = policy_head.forward(z_rec);
    std::vector<double> logits(slate.size());
    std::size_t pos = 0;
    for (std::size_t j = 0; j < slate.size(); ++j) {
      logits[j] = dot(query, emb.row(slate[j]));
      if (slate[j] == x) pos = j;
    }
    return softmax(logits)[pos];
  }

  /// Slate scores used by offline reranking (restricted to a pool).
  std::vector<double> pool_scores(std::span<const double> z_rec,
                                  std::span<const int> pool,
                                  const ItemEmbeddings& emb) const {
    const auto query = policy_head.forward(z_rec);
    std::vector<double> scores(pool.size());
    for (std::size_t j = 0; j < pool.size(); ++j) {
      scores[j] = dot(query, emb.row(pool[j]));
    }
    return scores;
  }
};

struct AttachedRecNets {
  AttachedRecNets(ad::Tape& tape, const RecNets& nets)
      : z_encoder(tape, nets.z_encoder),
        z_prior(tape, nets.z_prior),
        decoder(tape, nets.decoder),
        policy_head(tape, nets.policy_head) {}

  AttachedMlp z_encoder, z_prior, decoder, policy_head;

  TapedGaussian z_posterior(std::span<const ad::Var> s_feat,
                            std::span<const ad::Var> c) const {
    std::vector<ad::Var> in(s_feat.begin(), s_feat.end());
    in.insert(in.end(), c.begin(), c.end());
    return TapedGaussian::from_head(z_encoder.forward(in));
  }

  TapedGaussian z_prior_of(std::span<const ad::Var> c) const {
    return TapedGaussian::from_head(z_prior.forward(c));
  }

  /// Plackett-Luce log probability of a recorded ordered slate, rebuilt on
  /// the tape: sum over positions of score - logsumexp(remaining scores).
  ad::Var slate_log_prob(std::span<const ad::Var> z_rec,
                         std::span<const int> slate,
                         const AttachedEmbeddings& emb) const {
    const auto query = policy_head.forward(z_rec);
    const int n = emb.table().n_items();
    std::vector<ad::Var> scores;
    scores.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) scores.push_back(ad::dot(query, emb.row(i)));

    std::vector<int> remaining(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) remaining[static_cast<std::size_t>(i)] = i;
    ad::Var lp = ad::constant(0.0);
    for (int id : slate) {
      std::vector<ad::Var> logits;
      logits.reserve(remaining.size());
      std::size_t pos = remaining.size();
      for (std::size_t j = 0; j < remaining.size(); ++j) {
        logits.push_back(scores[static_cast<std::size_t>(remaining[j])]);
        if (remaining[j] == id) pos = j;
      }
      if (pos == remaining.size()) {
        throw ValidationError("taped slate_log_prob: invalid slate");
      }
      lp = lp + logits[pos] - ad::logsumexp(logits);
      remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(pos));
    }
    return lp;
  }
};

/// Variational objective for the agent on one state: reconstruction NLL of
/// the current state's featurization plus beta * KL(q(z_rec|s,c) || p(z_rec|c)).
inline ad::Var rec_elbo_loss(const AttachedRecNets& nets,
                             std::span<const ad::Var> s_feat,
                             std::span<const double> s_feat_target,
                             std::span<const ad::Var> c,
                             std::span<const double> z_noise, double beta) {
  const auto q = nets.z_posterior(s_feat, c);
  const auto z = q.sample_with_noise(z_noise);
  std::vector<ad::Var> dec_in(z.begin(), z.end());
  dec_in.insert(dec_in.end(), c.begin(), c.end());
  const auto recon = nets.decoder.forward(dec_in);
  ad::Var loss = gaussian_recon_nll(recon, s_feat_target);
  if (beta != 0.0) {
    loss = loss + beta * kl_diag_gaussians(q, nets.z_prior_of(c));
  }
  return loss;
}

enum class RecRewardSource { kRecovered, kLogged };

struct RecTrainWeights {
  double beta = 0.1;
  double beta_c = 0.01;
  double elbo_weight = 1.0;
  double gamma = 0.95;
  double lr = 1e-3;
  RecRewardSource reward_source = RecRewardSource::kRecovered;
  bool no_context = false;
};

struct RecPgStats {
  double pg_loss = 0.0;
  double elbo_loss = 0.0;
  double mean_return = 0.0;
};

/// REINFORCE on slate log probabilities with discounted return-to-go and a
/// batch-mean baseline; rewards come from the recovered reward approximator
/// (model-based mode) or from logged rewards (offline-data mode).
inline RecPgStats rec_pg_update(std::span<const Rollout> rollouts,
                                const std::vector<Trajectory>& trajectory_pool,
                                ContextEncoder& ctx_enc, RecNets& rec,
                                ItemEmbeddings& emb, const RecTrainWeights& w) {
  if (rollouts.empty()) throw ValidationError("rec_pg_update: no rollouts");

  std::vector<std::vector<double>> all_returns;
  double return_sum = 0.0;
  std::size_t n_steps = 0;
  for (const auto& ro : rollouts) {
    std::vector<double> rewards(ro.steps.size());
    for (std::size_t t = 0; t < ro.steps.size(); ++t) {
      rewards[t] = w.reward_source == RecRewardSource::kRecovered
                       ? ro.steps[t].r_omega
                       : ro.steps[t].env_reward;
    }
    all_returns.push_back(returns_to_go(rewards, w.gamma));
    for (double g : all_returns.back()) {
      return_sum += g;
      n_steps += 1;
    }
  }
  const double baseline =
      n_steps > 0 ? return_sum / static_cast<double>(n_steps) : 0.0;

  ad::Tape tape;
  AttachedMlp ctx_net(tape, ctx_enc.step_net());
  AttachedRecNets nets(tape, rec);
  AttachedEmbeddings aemb(tape, emb);

  ad::Var pg_loss = ad::constant(0.0);
  ad::Var elbo_loss = ad::constant(0.0);
  ad::Var ctx_kl = ad::constant(0.0);
  const double n_rollouts = static_cast<double>(rollouts.size());

  for (std::size_t i = 0; i < rollouts.size(); ++i) {
    const auto& ro = rollouts[i];
    const auto taped_ctx =
        w.no_context ? ContextEncoder::zero_taped(ctx_enc.d_c())
                     : ctx_enc.encode_taped(trajectory_pool[ro.context_traj_index],
                                            ctx_net, aemb, ro.c_noise);
    ctx_kl = ctx_kl + context_kl_regularizer(taped_ctx.posterior);
    for (std::size_t t = 0; t < ro.steps.size(); ++t) {
      const auto& step = ro.steps[t];
      const auto s_feat = aemb.featurize(step.state);
      const auto q = nets.z_posterior(s_feat, taped_ctx.sample);
      const auto z = q.sample_with_noise(step.z_rec_noise);
      const ad::Var log_pa = nets.slate_log_prob(z, step.slate, aemb);
      const double coeff = all_returns[i][t] - baseline;
      pg_loss = pg_loss - affine(log_pa, coeff / n_rollouts, 0.0);

      const auto s_target = emb.featurize(step.state);
      std::vector<ad::Var> dec_in(z.begin(), z.end());
      dec_in.insert(dec_in.end(), taped_ctx.sample.begin(), taped_ctx.sample.end());
      const auto recon = nets.decoder.forward(dec_in);
      ad::Var step_elbo = gaussian_recon_nll(recon, s_target);
      if (w.beta != 0.0) {
        step_elbo = step_elbo +
                    w.beta * kl_diag_gaussians(q, nets.z_prior_of(taped_ctx.sample));
      }
      elbo_loss = elbo_loss + step_elbo / static_cast<double>(n_steps);
    }
  }
  ctx_kl = ctx_kl / n_rollouts;
  const ad::Var total =
      pg_loss + affine(elbo_loss, w.elbo_weight, 0.0) + affine(ctx_kl, w.beta_c, 0.0);
  tape.backward(total);

  rec.z_encoder.optimizer_step(nets.z_encoder.grads(), w.lr);
  rec.z_prior.optimizer_step(nets.z_prior.grads(), w.lr);
  rec.decoder.optimizer_step(nets.decoder.grads(), w.lr);
  rec.policy_head.optimizer_step(nets.policy_head.grads(), w.lr);
  ctx_enc.step_net().optimizer_step(ctx_net.grads(), w.lr);
  if (emb.trainable()) emb.optimizer_step(aemb.grads(), w.lr);

  RecPgStats stats;
  stats.pg_loss = pg_loss.v;
  stats.elbo_loss = elbo_loss.v;
  std::vector<double> first_returns;
  for (const auto& r : all_returns) {
    if (!r.empty()) first_returns.push_back(r.front());
  }
  stats.mean_return = mean_std(first_returns).mean;
  return stats;
}

}  // namespace m3rec
