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

#include <set>
#include <span>
#include <vector>

#include "m3rec/context.hpp"
#include "m3rec/data.hpp"
#include "m3rec/gaussian.hpp"
#include "m3rec/nn.hpp"
#include "m3rec/rollout.hpp"

namespace m3rec {

inline constexpr double kDiscClampLo = 1e-6;

// ---- variational user policy ----

// pi(x | z_u, A): a latent-conditioned head scores items by inner product
// with their embeddings; the choice distribution is the softmax restricted
// to the offered slate. z_u ~ q(z_u | s, c) with a learned prior p(z_u | c)
// and a next-state reconstruction decoder.
class UserNets {
 public:
  UserNets() = default;

  UserNets(int d_z, int d_c, int s_feat_dim, int d_item,
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

  /// Scores of the slate items: <policy_head(z_u), emb_j>.
  std::vector<double> slate_scores(std::span<const double> z_u,
                                   std::span<const int> slate,
                                   const ItemEmbeddings& emb) const {
    const auto query = policy_head.forward(z_u);
    std::vector<double> scores(slate.size());
    for (std::size_t j = 0; j < slate.size(); ++j) {
      scores[j] = dot(query, emb.row(slate[j]));
    }
    return scores;
  }

  /// Softmax over the slate only; duplicate slate ids are rejected.
  std::vector<double> policy_probs(std::span<const double> z_u,
                                   std::span<const int> slate,
                                   const ItemEmbeddings& emb) const {
    std::set<int> distinct(slate.begin(), slate.end());
    if (distinct.size() != slate.size()) {
      throw ValidationError("user_policy_probs: duplicate slate ids");
    }
    return softmax(slate_scores(z_u, slate, emb));
  }
};

struct AttachedUserNets {
  AttachedUserNets(ad::Tape& tape, const UserNets& nets)
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

  std::vector<ad::Var> slate_scores(std::span<const ad::Var> z_u,
                                    std::span<const int> slate,
                                    const AttachedEmbeddings& emb) const {
    const auto query = policy_head.forward(z_u);
    std::vector<ad::Var> scores;
    scores.reserve(slate.size());
    for (int id : slate) {
      scores.push_back(ad::dot(query, emb.row(id)));
    }
    return scores;
  }

  /// log pi(click | z_u, slate) = score(click) - logsumexp(scores).
  ad::Var log_policy_prob(std::span<const ad::Var> z_u,
                          std::span<const int> slate, int click,
                          const AttachedEmbeddings& emb) const {
    const auto scores = slate_scores(z_u, slate, emb);
    std::size_t pos = slate.size();
    for (std::size_t j = 0; j < slate.size(); ++j) {
      if (slate[j] == click) pos = j;
    }
    if (pos == slate.size()) {
      throw ValidationError("log_policy_prob: click not in slate");
    }
    return scores[pos] - ad::logsumexp(scores);
  }
};

/// Variational objective for the user model on one transition, to minimize:
/// reconstruction NLL of the next state's featurization under a unit-variance
/// Gaussian decoder plus beta * KL(q(z_u|s,c) || p(z_u|c)). The z_u sample is
/// shared with the caller via its noise so policy and decoder see one latent.
inline ad::Var user_elbo_loss(const AttachedUserNets& nets,
                              std::span<const ad::Var> s_feat,
                              std::span<const double> next_feat,
                              std::span<const ad::Var> c,
                              std::span<const double> z_noise, double beta) {
  const auto q = nets.z_posterior(s_feat, c);
  const auto z = q.sample_with_noise(z_noise);
  std::vector<ad::Var> dec_in(z.begin(), z.end());
  dec_in.insert(dec_in.end(), c.begin(), c.end());
  const auto recon = nets.decoder.forward(dec_in);
  ad::Var loss = gaussian_recon_nll(recon, next_feat);
  if (beta != 0.0) {
    loss = loss + beta * kl_diag_gaussians(q, nets.z_prior_of(c));
  }
  return loss;
}

// ---- AIRL discriminator ----

struct DiscriminatorOutput {
  double r = 0.0;
  double h_s = 0.0;
  double h_s_next = 0.0;
  double g = 0.0;
  double d = 0.5;
  double log_d = 0.0;
  double log_1m_d = 0.0;
};

/// log D and log(1-D) for D = exp(g) / (exp(g) + pi), computed in log space
/// and clamped to (kDiscClampLo, 1 - kDiscClampLo).
inline std::pair<double, double> airl_log_d(double g, double log_pi) {
  const double lse = logaddexp(g, log_pi);
  const double lo = std::log(kDiscClampLo);
  const double hi = std::log1p(-kDiscClampLo);
  const double log_d = std::min(std::max(g - lse, lo), hi);
  const double log_1m_d = std::min(std::max(log_pi - lse, lo), hi);
  return {log_d, log_1m_d};
}

inline std::pair<ad::Var, ad::Var> airl_log_d(const ad::Var& g, double log_pi) {
  const ad::Var lse = ad::logaddexp(g, ad::constant(log_pi));
  const double lo = std::log(kDiscClampLo);
  const double hi = std::log1p(-kDiscClampLo);
  return {ad::clamp(g - lse, lo, hi), ad::clamp(log_pi - lse, lo, hi)};
}

/// The next-state window after clicking x in state s.
inline State next_state_of(const State& s, int click) {
  State n;
  n.window.assign(s.window.begin() + 1, s.window.end());
  n.window.push_back(click);
  n.t = s.t + 1;
  return n;
}

// g(s, x, A, c) = r(s, x, A, c) + gamma * h(s', c) - h(s, c), with the
// shaping term h treated as discriminator-side parameters.
class DiscriminatorNets {
 public:
  DiscriminatorNets() = default;

  DiscriminatorNets(int d_c, int s_feat_dim, int d_item,
                    const std::vector<int>& hidden, Activation act,
                    double gamma, Rng& rng)
      : gamma_(gamma) {
    auto with_hidden = [&](int in) {
      std::vector<int> sizes{in};
      for (int h : hidden) sizes.push_back(h);
      sizes.push_back(1);
      return sizes;
    };
    reward_net = Mlp(with_hidden(s_feat_dim + d_item + d_item + d_c), act, rng);
    shaping_net = Mlp(with_hidden(s_feat_dim + d_c), act, rng);
  }

  Mlp reward_net, shaping_net;

  double gamma() const { return gamma_; }

  std::vector<double> reward_input(const State& s, int click,
                                   std::span<const int> slate,
                                   std::span<const double> c,
                                   const ItemEmbeddings& emb) const {
    std::vector<double> in = emb.featurize(s);
    const auto ce = emb.row(click);
    in.insert(in.end(), ce.begin(), ce.end());
    const auto me = emb.slate_mean(slate);
    in.insert(in.end(), me.begin(), me.end());
    in.insert(in.end(), c.begin(), c.end());
    return in;
  }

  /// Reward approximator alone, no shaping; independent of s' by
  /// construction.
  double recovered_reward(const State& s, int click, std::span<const int> slate,
                          std::span<const double> c,
                          const ItemEmbeddings& emb) const {
    return reward_net.forward(reward_input(s, click, slate, c, emb))[0];
  }

  double shaping(const State& s, std::span<const double> c,
                 const ItemEmbeddings& emb) const {
    std::vector<double> in = emb.featurize(s);
    in.insert(in.end(), c.begin(), c.end());
    return shaping_net.forward(in)[0];
  }

  DiscriminatorOutput discriminate(const State& s, int click,
                                   std::span<const int> slate,
                                   std::span<const double> c, double pi_val,
                                   const ItemEmbeddings& emb) const {
    if (!(pi_val > 0.0 && pi_val <= 1.0)) {
      throw ValidationError("discriminate: pi_val must be in (0, 1]");
    }
    DiscriminatorOutput out;
    out.r = recovered_reward(s, click, slate, c, emb);
    out.h_s = shaping(s, c, emb);
    out.h_s_next = shaping(next_state_of(s, click), c, emb);
    out.g = out.r + gamma_ * out.h_s_next - out.h_s;
    const auto [log_d, log_1m_d] = airl_log_d(out.g, std::log(pi_val));
    out.log_d = log_d;
    out.log_1m_d = log_1m_d;
    out.d = std::exp(log_d);
    return out;
  }

 private:
  double gamma_ = 0.95;
};

struct AttachedDiscriminator {
  AttachedDiscriminator(ad::Tape& tape, const DiscriminatorNets& nets)
      : reward_net(tape, nets.reward_net),
        shaping_net(tape, nets.shaping_net),
        gamma(nets.gamma()) {}

  AttachedMlp reward_net, shaping_net;
  double gamma;

  ad::Var shaping(const State& s, std::span<const double> c,
                  const AttachedEmbeddings& emb) const {
    std::vector<ad::Var> in = emb.featurize(s);
    for (double v : c) in.push_back(ad::constant(v));
    return shaping_net.forward(in)[0];
  }

  /// Taped (log D, log(1-D)) for discriminator training; the context and
  /// pi_val enter as constants so gradients reach omega (and h) only.
  std::pair<ad::Var, ad::Var> log_d(const State& s, int click,
                                    std::span<const int> slate,
                                    std::span<const double> c, double pi_val,
                                    const AttachedEmbeddings& emb) const {
    if (!(pi_val > 0.0 && pi_val <= 1.0)) {
      throw ValidationError("discriminator log_d: pi_val must be in (0, 1]");
    }
    std::vector<ad::Var> in = emb.featurize(s);
    const auto ce = emb.row(click);
    in.insert(in.end(), ce.begin(), ce.end());
    const auto me = emb.slate_mean(slate);
    in.insert(in.end(), me.begin(), me.end());
    for (double v : c) in.push_back(ad::constant(v));
    const ad::Var r = reward_net.forward(in)[0];
    const ad::Var h_s = shaping(s, c, emb);
    const ad::Var h_next = shaping(next_state_of(s, click), c, emb);
    const ad::Var g = r + affine(h_next, gamma, 0.0) - h_s;
    return airl_log_d(g, std::log(pi_val));
  }
};

/// One labelled transition for discriminator training. `weight` supports
/// exactly-weighted (enumerated) batches; sampled batches use weight 1.
struct DiscItem {
  State state;
  int click = 0;
  std::vector<int> slate;
  std::vector<double> context;
  double pi_val = 1.0;
  double weight = 1.0;
};

/// Binary-cross-entropy discriminator objective, to minimize:
/// -mean[log D(true)] - mean[log(1 - D(model))], each side normalized by its
/// total weight.
inline ad::Var discriminator_loss(const AttachedDiscriminator& disc,
                                  std::span<const DiscItem> true_batch,
                                  std::span<const DiscItem> model_batch,
                                  const AttachedEmbeddings& emb) {
  if (true_batch.empty() || model_batch.empty()) {
    throw ValidationError("discriminator_loss: empty batch");
  }
  ad::Var loss = ad::constant(0.0);
  double w_true = 0.0, w_model = 0.0;
  for (const auto& item : true_batch) w_true += item.weight;
  for (const auto& item : model_batch) w_model += item.weight;
  for (const auto& item : true_batch) {
    const auto [log_d, log_1m_d] = disc.log_d(item.state, item.click, item.slate,
                                              item.context, item.pi_val, emb);
    loss = loss - affine(log_d, item.weight / w_true, 0.0);
  }
  for (const auto& item : model_batch) {
    const auto [log_d, log_1m_d] = disc.log_d(item.state, item.click, item.slate,
                                              item.context, item.pi_val, emb);
    loss = loss - affine(log_1m_d, item.weight / w_model, 0.0);
  }
  return loss;
}

// ---- training updates ----

struct UserPgStats {
  double pg_loss = 0.0;
  double elbo_loss = 0.0;
  double mean_return = 0.0;
  double ctx_kl = 0.0;
};

struct UserTrainWeights {
  double beta = 0.1;       // ELBO KL weight
  double beta_c = 0.01;    // context KL regularizer weight
  double elbo_weight = 1.0;
  double gamma = 0.95;     // return-to-go discount
  double lr = 1e-3;
  bool no_context = false;
};

/// REINFORCE on the user policy with pseudo-reward log D - log(1 - D) from
/// the frozen discriminator, discounted return-to-go, batch-mean baseline,
/// plus the variational loss. Updates the user nets and the context encoder.
inline UserPgStats user_policy_pg_update(
    std::span<const Rollout> rollouts,
    const std::vector<Trajectory>& trajectory_pool, ContextEncoder& ctx_enc,
    UserNets& user, ItemEmbeddings& emb, const UserTrainWeights& w) {
  if (rollouts.empty()) throw ValidationError("user_policy_pg_update: no rollouts");

  // returns and baseline from the recorded pseudo-rewards
  std::vector<std::vector<double>> all_returns;
  double return_sum = 0.0;
  std::size_t n_steps = 0;
  for (const auto& ro : rollouts) {
    std::vector<double> pseudo(ro.steps.size());
    for (std::size_t t = 0; t < ro.steps.size(); ++t) {
      pseudo[t] = ro.steps[t].log_d - ro.steps[t].log_1m_d;
    }
    all_returns.push_back(returns_to_go(pseudo, w.gamma));
    for (double g : all_returns.back()) {
      return_sum += g;
      n_steps += 1;
    }
  }
  const double baseline =
      n_steps > 0 ? return_sum / static_cast<double>(n_steps) : 0.0;

  ad::Tape tape;
  AttachedMlp ctx_net(tape, ctx_enc.step_net());
  AttachedUserNets nets(tape, user);
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
      const auto z = q.sample_with_noise(step.z_u_noise);
      const ad::Var log_pi =
          nets.log_policy_prob(z, step.slate, step.click, aemb);
      const double coeff = all_returns[i][t] - baseline;
      pg_loss = pg_loss - affine(log_pi, coeff / n_rollouts, 0.0);

      const auto next_feat =
          emb.featurize(next_state_of(step.state, step.click));
      // decoder reconstructs from the same z_u the policy used
      std::vector<ad::Var> dec_in(z.begin(), z.end());
      dec_in.insert(dec_in.end(), taped_ctx.sample.begin(),
                    taped_ctx.sample.end());
      const auto recon = nets.decoder.forward(dec_in);
      ad::Var step_elbo = gaussian_recon_nll(recon, next_feat);
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

  user.z_encoder.optimizer_step(nets.z_encoder.grads(), w.lr);
  user.z_prior.optimizer_step(nets.z_prior.grads(), w.lr);
  user.decoder.optimizer_step(nets.decoder.grads(), w.lr);
  user.policy_head.optimizer_step(nets.policy_head.grads(), w.lr);
  ctx_enc.step_net().optimizer_step(ctx_net.grads(), w.lr);
  if (emb.trainable()) emb.optimizer_step(aemb.grads(), w.lr);

  UserPgStats stats;
  stats.pg_loss = pg_loss.v;
  stats.elbo_loss = elbo_loss.v;
  stats.ctx_kl = ctx_kl.v;
  std::vector<double> first_returns;
  for (const auto& r : all_returns) {
    if (!r.empty()) first_returns.push_back(r.front());
  }
  stats.mean_return = mean_std(first_returns).mean;
  return stats;
}

struct MlePretrainStats {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::size_t epochs_run = 0;
};

struct MleBatchItem {
  std::size_t traj_index = 0;      // optimization trajectory
  std::size_t ctx_traj_index = 0;  // context source (distinct when possible)
};

/// Warm start: minimize -log pi(x_t | z_u, A_t) plus the variational loss
/// over offline steps, with the context inferred from a (preferably
/// distinct) trajectory of the same user.
inline MlePretrainStats user_mle_pretrain(
    const std::vector<Trajectory>& pool, ContextEncoder& ctx_enc,
    UserNets& user, ItemEmbeddings& emb, int epochs, int batch_trajectories,
    const UserTrainWeights& w, Rng& rng) {
  MlePretrainStats stats;
  if (epochs <= 0 || pool.empty()) return stats;

  const auto groups = group_by_user(pool);
  std::vector<std::size_t> order(pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  auto context_source = [&](std::size_t traj_index) {
    const auto& mine = groups.at(pool[traj_index].user_id);
    if (mine.size() <= 1) return traj_index;
    // pick a different trajectory of the same user
    std::size_t pick;
    do {
      pick = mine[rng.uniform_index(mine.size())];
    } while (pick == traj_index);
    return pick;
  };

  const int d_c = ctx_enc.d_c();
  bool first_batch = true;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(batch_trajectories)) {
      const std::size_t end = std::min(
          order.size(), start + static_cast<std::size_t>(batch_trajectories));
      ad::Tape tape;
      AttachedMlp ctx_net(tape, ctx_enc.step_net());
      AttachedUserNets nets(tape, user);
      AttachedEmbeddings aemb(tape, emb);
      ad::Var loss = ad::constant(0.0);
      std::size_t batch_steps = 0;
      for (std::size_t bi = start; bi < end; ++bi) batch_steps += pool[order[bi]].steps.size();
      if (batch_steps == 0) continue;
      const double denom = static_cast<double>(batch_steps);

      for (std::size_t bi = start; bi < end; ++bi) {
        const std::size_t ti = order[bi];
        const auto c_noise = rng.normal_vec(static_cast<std::size_t>(d_c));
        const auto taped_ctx =
            w.no_context ? ContextEncoder::zero_taped(d_c)
                         : ctx_enc.encode_taped(pool[context_source(ti)], ctx_net,
                                                aemb, c_noise);
        const auto& traj = pool[ti];
        std::vector<int> history;
        for (const auto& step : traj.steps) {
          const State s = make_state(history, ctx_enc.window());
          const auto s_feat = aemb.featurize(s);
          const auto q = nets.z_posterior(s_feat, taped_ctx.sample);
          const auto z_noise = rng.normal_vec(q.dim());
          const auto z = q.sample_with_noise(z_noise);
          const ad::Var log_pi = nets.log_policy_prob(z, step.slate, step.click, aemb);

          history.push_back(step.click);
          const auto next_feat = emb.featurize(make_state(history, ctx_enc.window()));
          std::vector<ad::Var> dec_in(z.begin(), z.end());
          dec_in.insert(dec_in.end(), taped_ctx.sample.begin(), taped_ctx.sample.end());
          const auto recon = nets.decoder.forward(dec_in);
          ad::Var step_loss = -log_pi + gaussian_recon_nll(recon, next_feat);
          if (w.beta != 0.0) {
            step_loss = step_loss +
                        w.beta * kl_diag_gaussians(q, nets.z_prior_of(taped_ctx.sample));
          }
          loss = loss + step_loss / denom;
        }
        loss = loss + affine(context_kl_regularizer(taped_ctx.posterior),
                             w.beta_c / denom, 0.0);
      }
      tape.backward(loss);
      if (first_batch) {
        stats.initial_loss = loss.v;
        first_batch = false;
      }
      epoch_loss += loss.v * denom;
      epoch_steps += batch_steps;

      user.z_encoder.optimizer_step(nets.z_encoder.grads(), w.lr);
      user.z_prior.optimizer_step(nets.z_prior.grads(), w.lr);
      user.decoder.optimizer_step(nets.decoder.grads(), w.lr);
      user.policy_head.optimizer_step(nets.policy_head.grads(), w.lr);
      ctx_enc.step_net().optimizer_step(ctx_net.grads(), w.lr);
      if (emb.trainable()) emb.optimizer_step(aemb.grads(), w.lr);
    }
    stats.final_loss = epoch_steps > 0 ? epoch_loss / static_cast<double>(epoch_steps)
                                       : 0.0;
    stats.epochs_run += 1;
  }
  return stats;
}

}  // namespace m3rec
