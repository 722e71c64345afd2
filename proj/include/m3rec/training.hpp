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

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "m3rec/checkpoint.hpp"
#include "m3rec/config.hpp"
#include "m3rec/context.hpp"
#include "m3rec/data.hpp"
#include "m3rec/mi.hpp"
#include "m3rec/rec_agent.hpp"
#include "m3rec/rollout.hpp"
#include "m3rec/user_model.hpp"

namespace m3rec {

// Every learned map in one place, deterministically initialized from the
// experiment seed.
struct ModelBundle {
  ContextEncoder ctx;
  UserNets user;
  DiscriminatorNets disc;
  RecNets rec;
  StatsNet stats;
  ItemEmbeddings emb;
  AblationConfig ablation;
  int window = 10;

  static ModelBundle create(const ExperimentConfig& cfg, ItemEmbeddings embeddings) {
    ModelBundle b;
    b.window = cfg.model.window;
    b.ablation = cfg.ablation;
    b.emb = std::move(embeddings);
    const int s_feat = cfg.model.window * b.emb.dim();
    const auto act = activation_from_name(cfg.model.activation);
    auto r_ctx = Rng::derive(cfg.seed, 0x1001);
    b.ctx = ContextEncoder(cfg.model.d_c, cfg.model.window, b.emb.dim(),
                           cfg.model.hidden, act, r_ctx);
    auto r_user = Rng::derive(cfg.seed, 0x1002);
    b.user = UserNets(cfg.model.d_z, cfg.model.d_c, s_feat, b.emb.dim(),
                      cfg.model.hidden, act, r_user);
    auto r_disc = Rng::derive(cfg.seed, 0x1003);
    b.disc = DiscriminatorNets(cfg.model.d_c, s_feat, b.emb.dim(),
                               cfg.model.hidden, act, cfg.train.gamma, r_disc);
    auto r_rec = Rng::derive(cfg.seed, 0x1004);
    b.rec = RecNets(cfg.model.d_z, cfg.model.d_c, s_feat, b.emb.dim(),
                    cfg.model.hidden, act, r_rec);
    auto r_stats = Rng::derive(cfg.seed, 0x1005);
    b.stats = StatsNet(cfg.model.d_z, cfg.model.hidden, act, r_stats);
    return b;
  }

  /// Context inference honoring the no_context ablation: the posterior is
  /// forced to the prior and the sample to the zero vector.
  UserContext infer_context(const Trajectory& traj, Rng& rng) const {
    if (ablation.no_context) return ContextEncoder::prior_context(ctx.d_c());
    return ctx.encode_context(traj, emb, rng);
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ck;
    ck.add_mlp("ctx.step_net", ctx.step_net());
    ck.add_mlp("user.z_encoder", user.z_encoder);
    ck.add_mlp("user.z_prior", user.z_prior);
    ck.add_mlp("user.decoder", user.decoder);
    ck.add_mlp("user.policy_head", user.policy_head);
    ck.add_mlp("disc.reward_net", disc.reward_net);
    ck.add_mlp("disc.shaping_net", disc.shaping_net);
    ck.add_mlp("rec.z_encoder", rec.z_encoder);
    ck.add_mlp("rec.z_prior", rec.z_prior);
    ck.add_mlp("rec.decoder", rec.decoder);
    ck.add_mlp("rec.policy_head", rec.policy_head);
    ck.add_mlp("stats.t_net", stats.t_net);
    ck.add_embeddings("emb.table", emb);
    return ck;
  }

  void load_checkpoint(const Checkpoint& ck) {
    ck.apply_mlp("ctx.step_net", ctx.step_net());
    ck.apply_mlp("user.z_encoder", user.z_encoder);
    ck.apply_mlp("user.z_prior", user.z_prior);
    ck.apply_mlp("user.decoder", user.decoder);
    ck.apply_mlp("user.policy_head", user.policy_head);
    ck.apply_mlp("disc.reward_net", disc.reward_net);
    ck.apply_mlp("disc.shaping_net", disc.shaping_net);
    ck.apply_mlp("rec.z_encoder", rec.z_encoder);
    ck.apply_mlp("rec.z_prior", rec.z_prior);
    ck.apply_mlp("rec.decoder", rec.decoder);
    ck.apply_mlp("rec.policy_head", rec.policy_head);
    ck.apply_mlp("stats.t_net", stats.t_net);
    ck.apply_embeddings("emb.table", emb);
  }
};

/// Picks a context trajectory of the same user, distinct from `traj_index`
/// when the user has more than one trajectory.
inline std::size_t pick_context_source(
    const std::vector<Trajectory>& pool,
    const std::map<int, std::vector<std::size_t>>& groups,
    std::size_t traj_index, Rng& rng) {
  const auto& mine = groups.at(pool[traj_index].user_id);
  if (mine.size() <= 1) return traj_index;
  std::size_t pick;
  do {
    pick = mine[rng.uniform_index(mine.size())];
  } while (pick == traj_index);
  return pick;
}

/// One model-based rollout: the agent proposes slates (or replays logged
/// ones), the learned user policy clicks, and the frozen discriminator
/// scores each transition.
inline Rollout generate_model_rollout(
    const ModelBundle& b, const std::vector<Trajectory>& pool,
    const std::map<int, std::vector<std::size_t>>& groups, int horizon, int k,
    bool logged_slates, Rng& rng) {
  Rollout ro;
  const std::size_t traj_index = rng.uniform_index(pool.size());
  ro.user_id = pool[traj_index].user_id;
  ro.context_traj_index = pick_context_source(pool, groups, traj_index, rng);
  ro.c_noise = rng.normal_vec(static_cast<std::size_t>(b.ctx.d_c()));
  if (b.ablation.no_context) {
    ro.ctx = ContextEncoder::prior_context(b.ctx.d_c());
  } else {
    ro.ctx = b.ctx.encode_context_with_noise(pool[ro.context_traj_index], b.emb,
                                             ro.c_noise);
  }

  const auto& logged = pool[traj_index];
  std::vector<int> history;
  for (int t = 0; t < horizon; ++t) {
    RolloutStep step;
    step.state = make_state(history, b.window, t);
    const auto s_feat = b.emb.featurize(step.state);

    const auto q_rec = b.rec.z_posterior(s_feat, ro.ctx.sample);
    step.z_rec_noise = rng.normal_vec(q_rec.dim());
    const auto z_rec = q_rec.sample_with_noise(step.z_rec_noise);
    if (logged_slates && !logged.steps.empty()) {
      step.slate = logged.steps[static_cast<std::size_t>(t) % logged.steps.size()].slate;
    } else {
      step.slate = b.rec.propose_slate(z_rec, b.emb, k, SlateMode::kSample, rng).items;
    }

    const auto q_u = b.user.z_posterior(s_feat, ro.ctx.sample);
    step.z_u_noise = rng.normal_vec(q_u.dim());
    const auto z_u = q_u.sample_with_noise(step.z_u_noise);
    const auto probs = b.user.policy_probs(z_u, step.slate, b.emb);
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
    step.click = step.slate[pick];
    step.pi_val = std::max(probs[pick], 1e-12);

    const auto disc_out = b.disc.discriminate(step.state, step.click, step.slate,
                                              ro.ctx.sample, step.pi_val, b.emb);
    step.log_d = disc_out.log_d;
    step.log_1m_d = disc_out.log_1m_d;
    step.r_omega = disc_out.r;

    history.push_back(step.click);
    ro.steps.push_back(std::move(step));
  }
  return ro;
}

/// Offline rollout for the model-free path: logged slates, clicks, and true
/// rewards straight from a trajectory.
inline Rollout offline_rollout(const ModelBundle& b,
                               const std::vector<Trajectory>& pool,
                               const std::map<int, std::vector<std::size_t>>& groups,
                               Rng& rng) {
  Rollout ro;
  const std::size_t traj_index = rng.uniform_index(pool.size());
  ro.user_id = pool[traj_index].user_id;
  ro.context_traj_index = pick_context_source(pool, groups, traj_index, rng);
  ro.c_noise = rng.normal_vec(static_cast<std::size_t>(b.ctx.d_c()));
  if (b.ablation.no_context) {
    ro.ctx = ContextEncoder::prior_context(b.ctx.d_c());
  } else {
    ro.ctx = b.ctx.encode_context_with_noise(pool[ro.context_traj_index], b.emb,
                                             ro.c_noise);
  }
  const auto& traj = pool[traj_index];
  std::vector<int> history;
  for (std::size_t t = 0; t < traj.steps.size(); ++t) {
    RolloutStep step;
    step.state = make_state(history, b.window, static_cast<int>(t));
    step.slate = traj.steps[t].slate;
    step.click = traj.steps[t].click;
    step.env_reward = traj.steps[t].reward;
    step.z_rec_noise = rng.normal_vec(static_cast<std::size_t>(b.rec.z_encoder.output_dim() / 2));
    step.z_u_noise = rng.normal_vec(static_cast<std::size_t>(b.user.z_encoder.output_dim() / 2));
    history.push_back(step.click);
    ro.steps.push_back(std::move(step));
  }
  return ro;
}

struct DiscEpochStats {
  double loss = 0.0;
  std::size_t batches = 0;
};

/// One discriminator epoch: sampled true transitions against freshly
/// generated model transitions; gradients reach omega and h only.
inline DiscEpochStats discriminator_epoch(
    ModelBundle& b, const std::vector<Trajectory>& pool,
    const std::map<int, std::vector<std::size_t>>& groups,
    const TrainConfig& tc, int horizon, int k, Rng& rng) {
  DiscEpochStats stats;
  for (int batch = 0; batch < tc.disc_batches_per_epoch; ++batch) {
    // model side
    std::vector<DiscItem> model_batch;
    while (static_cast<int>(model_batch.size()) < tc.disc_batch) {
      const auto ro = generate_model_rollout(b, pool, groups, horizon, k,
                                             tc.rollout_slates == "logged", rng);
      for (const auto& step : ro.steps) {
        DiscItem item;
        item.state = step.state;
        item.click = step.click;
        item.slate = step.slate;
        item.context = ro.ctx.sample;
        item.pi_val = step.pi_val;
        model_batch.push_back(std::move(item));
        if (static_cast<int>(model_batch.size()) == tc.disc_batch) break;
      }
    }
    // true side, with the current user policy's probability of each click
    std::vector<DiscItem> true_batch;
    while (static_cast<int>(true_batch.size()) < tc.disc_batch) {
      const std::size_t ti = rng.uniform_index(pool.size());
      const auto& traj = pool[ti];
      if (traj.steps.empty()) continue;
      const std::size_t t = rng.uniform_index(traj.steps.size());
      const std::size_t ci = pick_context_source(pool, groups, ti, rng);
      UserContext ctx;
      if (b.ablation.no_context) {
        ctx = ContextEncoder::prior_context(b.ctx.d_c());
      } else {
        ctx = b.ctx.encode_context(pool[ci], b.emb, rng);
      }
      DiscItem item;
      item.state = state_at(traj, t, b.window);
      item.click = traj.steps[t].click;
      item.slate = traj.steps[t].slate;
      item.context = ctx.sample;
      const auto s_feat = b.emb.featurize(item.state);
      const auto q_u = b.user.z_posterior(s_feat, ctx.sample);
      const auto z_u = q_u.sample(rng);
      const auto probs = b.user.policy_probs(z_u, item.slate, b.emb);
      std::size_t pos = 0;
      for (std::size_t j = 0; j < item.slate.size(); ++j) {
        if (item.slate[j] == item.click) pos = j;
      }
      item.pi_val = std::max(probs[pos], 1e-12);
      true_batch.push_back(std::move(item));
    }

    ad::Tape tape;
    AttachedDiscriminator att(tape, b.disc);
    AttachedEmbeddings aemb(tape, b.emb, /*attach_leaves=*/false);
    const auto loss = discriminator_loss(att, true_batch, model_batch, aemb);
    tape.backward(loss);
    b.disc.reward_net.optimizer_step(att.reward_net.grads(), tc.lr);
    b.disc.shaping_net.optimizer_step(att.shaping_net.grads(), tc.lr);
    stats.loss += loss.v;
    stats.batches += 1;
  }
  if (stats.batches > 0) stats.loss /= static_cast<double>(stats.batches);
  return stats;
}

struct IterationMetrics {
  int iter = 0;
  double disc_loss = 0.0;
  double user_return = 0.0;
  double user_elbo = 0.0;
  double rec_return = 0.0;
  double rec_elbo = 0.0;
  std::optional<double> mi_bound;

  nlohmann::json to_json() const {
    nlohmann::json j{{"iter", iter},
                     {"disc_loss", disc_loss},
                     {"user_return", user_return},
                     {"user_elbo", user_elbo},
                     {"rec_return", rec_return},
                     {"rec_elbo", rec_elbo}};
    j["mi_bound"] = mi_bound.has_value() ? nlohmann::json(*mi_bound)
                                         : nlohmann::json(nullptr);
    return j;
  }
};

struct MetaTrainResult {
  std::vector<IterationMetrics> iterations;
  MlePretrainStats pretrain;
};

/// The full schedule: likelihood warm start, then alternating discriminator,
/// user-policy, agent-policy, and mutual-information phases. Deterministic
/// under (config, seed); any non-finite loss aborts with the iteration named.
inline MetaTrainResult meta_train(const ExperimentConfig& cfg,
                                  const std::vector<Trajectory>& train_pool,
                                  ModelBundle& bundle,
                                  const std::string& metrics_path = "") {
  if (train_pool.empty()) throw ValidationError("meta_train: empty offline data");
  const auto groups = group_by_user(train_pool);
  auto rng = Rng::derive(cfg.seed, 0x7EA1);
  const int horizon = cfg.train.rollout_horizon > 0 ? cfg.train.rollout_horizon
                                                    : cfg.sim.horizon;
  const int k = cfg.sim.k;

  UserTrainWeights uw;
  uw.beta = cfg.train.beta;
  uw.beta_c = cfg.train.beta_c;
  uw.gamma = cfg.train.gamma;
  uw.lr = cfg.train.lr;
  uw.no_context = cfg.ablation.no_context;

  RecTrainWeights rw;
  rw.beta = cfg.train.beta;
  rw.beta_c = cfg.train.beta_c;
  rw.gamma = cfg.train.gamma;
  rw.lr = cfg.train.lr;
  rw.no_context = cfg.ablation.no_context;
  rw.reward_source = cfg.ablation.model_free ? RecRewardSource::kLogged
                                             : RecRewardSource::kRecovered;

  MetaTrainResult result;
  if (!cfg.ablation.model_free) {
    result.pretrain =
        user_mle_pretrain(train_pool, bundle.ctx, bundle.user, bundle.emb,
                          cfg.train.pretrain_epochs, cfg.train.batch_trajectories,
                          uw, rng);
  }

  std::ofstream metrics_out;
  if (!metrics_path.empty()) {
    metrics_out.open(metrics_path);
    if (!metrics_out) throw IoError("cannot open metrics file '" + metrics_path + "'");
  }

  for (int iter = 1; iter <= cfg.train.outer_iters; ++iter) {
    IterationMetrics m;
    m.iter = iter;
    try {
      if (!cfg.ablation.model_free) {
        for (int e = 0; e < cfg.train.disc_epochs; ++e) {
          const auto ds = discriminator_epoch(bundle, train_pool, groups,
                                              cfg.train, horizon, k, rng);
          m.disc_loss = ds.loss;
        }
        for (int e = 0; e < cfg.train.user_pg_epochs; ++e) {
          std::vector<Rollout> rollouts;
          for (int i = 0; i < cfg.train.rollout_users; ++i) {
            rollouts.push_back(generate_model_rollout(
                bundle, train_pool, groups, horizon, k,
                cfg.train.rollout_slates == "logged", rng));
          }
          const auto us = user_policy_pg_update(rollouts, train_pool, bundle.ctx,
                                                bundle.user, bundle.emb, uw);
          m.user_return = us.mean_return;
          m.user_elbo = us.elbo_loss;
        }
      }
      for (int e = 0; e < cfg.train.rec_pg_epochs; ++e) {
        std::vector<Rollout> rollouts;
        for (int i = 0; i < cfg.train.rollout_users; ++i) {
          if (cfg.ablation.model_free) {
            rollouts.push_back(offline_rollout(bundle, train_pool, groups, rng));
          } else {
            rollouts.push_back(generate_model_rollout(
                bundle, train_pool, groups, horizon, k,
                cfg.train.rollout_slates == "logged", rng));
          }
        }
        const auto rs = rec_pg_update(rollouts, train_pool, bundle.ctx, bundle.rec,
                                      bundle.emb, rw);
        m.rec_return = rs.mean_return;
        m.rec_elbo = rs.elbo_loss;
      }
      if (!cfg.ablation.no_mi && !cfg.ablation.model_free) {
        for (int e = 0; e < cfg.train.mi_epochs; ++e) {
          std::vector<MiBatchItem> batch;
          for (int i = 0; i < cfg.train.mi_batch; ++i) {
            MiBatchItem item;
            item.traj_index = rng.uniform_index(train_pool.size());
            const auto& traj = train_pool[item.traj_index];
            if (traj.steps.empty()) continue;
            item.step_index = rng.uniform_index(traj.steps.size());
            item.ctx_traj_index =
                pick_context_source(train_pool, groups, item.traj_index, rng);
            item.c_noise = rng.normal_vec(static_cast<std::size_t>(bundle.ctx.d_c()));
            item.z_u_noise = rng.normal_vec(
                static_cast<std::size_t>(bundle.user.z_encoder.output_dim() / 2));
            item.z_rec_noise = rng.normal_vec(
                static_cast<std::size_t>(bundle.rec.z_encoder.output_dim() / 2));
            batch.push_back(std::move(item));
          }
          if (batch.size() >= 2) {
            const auto ms = mi_update(batch, train_pool, bundle.ctx, bundle.user,
                                      bundle.rec, bundle.stats, bundle.emb,
                                      bundle.window, cfg.train.lambda_mi,
                                      cfg.train.lr, /*detach_rec=*/false, rng,
                                      cfg.ablation.no_context);
            m.mi_bound = ms.bound;
          }
        }
      }
    } catch (const NumericalError& e) {
      throw NumericalError("meta_train diverged at iteration " +
                           std::to_string(iter) + ": " + e.what());
    }
    result.iterations.push_back(m);
    if (metrics_out) metrics_out << m.to_json().dump() << "\n";
  }
  return result;
}

// ---- one-shot meta-test adaptation ----

struct AdaptedPolicies {
  UserContext ctx;
  bool empty_fallback = false;
  const ModelBundle* bundle = nullptr;

  /// Greedy slate policy conditioned on the inferred context; z_rec is the
  /// posterior mean, so the adapted policy is deterministic.
  std::vector<int> rec_slate(const State& s, int k) const {
    const auto s_feat = bundle->emb.featurize(s);
    const auto q = bundle->rec.z_posterior(s_feat, ctx.sample);
    Rng dummy(0);
    return bundle->rec.propose_slate(q.mean, bundle->emb, k, SlateMode::kGreedy, dummy)
        .items;
  }

  /// Learned user-choice distribution over a slate (posterior-mean z_u).
  std::vector<double> user_choice_probs(const State& s,
                                        std::span<const int> slate) const {
    const auto s_feat = bundle->emb.featurize(s);
    const auto q = bundle->user.z_posterior(s_feat, ctx.sample);
    return bundle->user.policy_probs(q.mean, slate, bundle->emb);
  }
};

/// Adaptation is context inference only: no parameter updates. An empty
/// trajectory falls back to the prior context (flagged for the caller).
inline AdaptedPolicies meta_test_adapt(const ModelBundle& bundle,
                                       const Trajectory& tau_single,
                                       std::uint64_t seed) {
  AdaptedPolicies out;
  out.bundle = &bundle;
  auto rng = Rng::derive(seed, 0xADA9);
  if (tau_single.steps.empty()) {
    out.ctx = ContextEncoder::prior_context(bundle.ctx.d_c());
    out.empty_fallback = true;
    return out;
  }
  out.ctx = bundle.infer_context(tau_single, rng);
  return out;
}

}  // namespace m3rec
