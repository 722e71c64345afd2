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
#include <utility>
#include <vector>

#include "m3rec/context.hpp"
#include "m3rec/nn.hpp"
#include "m3rec/rec_agent.hpp"
#include "m3rec/user_model.hpp"

namespace m3rec {

// Statistics network T(z_u, z_rec) for the Jensen-Shannon mutual-information
// lower bound: E_joint[-sp(-T)] - E_marginal[sp(T)].
class StatsNet {
 public:
  StatsNet() = default;

  StatsNet(int d_z, const std::vector<int>& hidden, Activation act, Rng& rng) {
    std::vector<int> sizes{2 * d_z};
    for (int h : hidden) sizes.push_back(h);
    sizes.push_back(1);
    t_net = Mlp(sizes, act, rng);
  }

  Mlp t_net;

  double evaluate(std::span<const double> z_u, std::span<const double> z_rec) const {
    std::vector<double> in(z_u.begin(), z_u.end());
    in.insert(in.end(), z_rec.begin(), z_rec.end());
    return t_net.forward(in)[0];
  }
};

using LatentPair = std::pair<std::vector<double>, std::vector<double>>;

/// Bound value on explicit joint and marginal sample pairs.
inline double jsd_mi_lower_bound(std::span<const LatentPair> joint_pairs,
                                 std::span<const LatentPair> marginal_pairs,
                                 const StatsNet& stats) {
  if (joint_pairs.size() < 2 || marginal_pairs.empty()) {
    throw ValidationError("jsd_mi_lower_bound: batch must have >= 2 pairs");
  }
  double joint_term = 0.0;
  for (const auto& [zu, zr] : joint_pairs) {
    joint_term += -softplus(-stats.evaluate(zu, zr));
  }
  joint_term /= static_cast<double>(joint_pairs.size());
  double marginal_term = 0.0;
  for (const auto& [zu, zr] : marginal_pairs) {
    marginal_term += softplus(stats.evaluate(zu, zr));
  }
  marginal_term /= static_cast<double>(marginal_pairs.size());
  return joint_term - marginal_term;
}

/// Shuffle with no fixed point (retry until deranged); the marginal batch
/// must never pair a z_u with its own z_rec.
inline std::vector<std::size_t> derangement(std::size_t n, Rng& rng) {
  if (n < 2) throw ValidationError("derangement: need n >= 2");
  std::vector<std::size_t> idx(n);
  while (true) {
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    rng.shuffle(idx);
    bool ok = true;
    for (std::size_t i = 0; i < n; ++i) {
      if (idx[i] == i) {
        ok = false;
        break;
      }
    }
    if (ok) return idx;
  }
}

/// One ascent step of the bound in the statistics network alone, on
/// externally supplied samples (synthetic calibration and tests).
inline double mi_train_step(std::span<const LatentPair> joint_pairs,
                            std::span<const std::size_t> marginal_perm,
                            StatsNet& stats, double lr) {
  if (joint_pairs.size() < 2) {
    throw ValidationError("mi_train_step: batch must have >= 2 pairs");
  }
  ad::Tape tape;
  AttachedMlp att(tape, stats.t_net);
  auto t_of = [&](std::span<const double> zu, std::span<const double> zr) {
    std::vector<ad::Var> in;
    in.reserve(zu.size() + zr.size());
    for (double v : zu) in.push_back(ad::constant(v));
    for (double v : zr) in.push_back(ad::constant(v));
    return att.forward(in)[0];
  };
  ad::Var bound = ad::constant(0.0);
  const double nj = static_cast<double>(joint_pairs.size());
  for (const auto& [zu, zr] : joint_pairs) {
    bound = bound - affine(ad::softplus(-t_of(zu, zr)), 1.0 / nj, 0.0);
  }
  const double nm = static_cast<double>(marginal_perm.size());
  for (std::size_t i = 0; i < marginal_perm.size(); ++i) {
    bound = bound - affine(ad::softplus(t_of(joint_pairs[i].first,
                                             joint_pairs[marginal_perm[i]].second)),
                           1.0 / nm, 0.0);
  }
  const ad::Var loss = -bound;
  tape.backward(loss);
  stats.t_net.optimizer_step(att.grads(), lr);
  return bound.v;
}

/// One (user, state) anchor of the in-batch MI estimator.
struct MiBatchItem {
  std::size_t traj_index = 0;
  std::size_t step_index = 0;
  std::size_t ctx_traj_index = 0;
  std::vector<double> c_noise;
  std::vector<double> z_u_noise;
  std::vector<double> z_rec_noise;
};

struct MiStats {
  double bound = 0.0;
};

/// Joint update: ascends the bound in psi and, scaled by lambda_mi, through
/// the reparameterized samples into both variational encoders (and the
/// context encoder feeding them). `detach_rec` cuts the z_rec path, leaving
/// only psi and the user-side encoders to update.
inline MiStats mi_update(std::span<const MiBatchItem> batch,
                         const std::vector<Trajectory>& pool,
                         ContextEncoder& ctx_enc, UserNets& user, RecNets& rec,
                         StatsNet& stats_net, ItemEmbeddings& emb, int window,
                         double lambda_mi, double lr, bool detach_rec,
                         Rng& rng, bool no_context = false) {
  if (batch.size() < 2) {
    throw ValidationError("mi_update: batch must have >= 2 pairs");
  }
  ad::Tape tape;
  AttachedMlp ctx_net(tape, ctx_enc.step_net());
  AttachedUserNets user_nets(tape, user);
  AttachedRecNets rec_nets(tape, rec);
  AttachedMlp t_net(tape, stats_net.t_net);
  AttachedEmbeddings aemb(tape, emb);

  std::vector<std::vector<ad::Var>> z_us, z_recs;
  z_us.reserve(batch.size());
  z_recs.reserve(batch.size());
  for (const auto& item : batch) {
    const auto taped_ctx =
        no_context ? ContextEncoder::zero_taped(ctx_enc.d_c())
                   : ctx_enc.encode_taped(pool[item.ctx_traj_index], ctx_net,
                                          aemb, item.c_noise);
    const auto& traj = pool[item.traj_index];
    const State s = state_at(traj, item.step_index, window);
    const auto s_feat = aemb.featurize(s);
    const auto qu = user_nets.z_posterior(s_feat, taped_ctx.sample);
    z_us.push_back(qu.sample_with_noise(item.z_u_noise));
    const auto qr = rec_nets.z_posterior(s_feat, taped_ctx.sample);
    auto zr = qr.sample_with_noise(item.z_rec_noise);
    if (detach_rec) {
      for (auto& v : zr) v = ad::constant(v.v);
    }
    z_recs.push_back(std::move(zr));
  }

  const auto perm = derangement(batch.size(), rng);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] == i) throw NumericalError("mi_update: shuffle has a fixed point");
  }

  auto t_of = [&](std::span<const ad::Var> zu, std::span<const ad::Var> zr) {
    std::vector<ad::Var> in(zu.begin(), zu.end());
    in.insert(in.end(), zr.begin(), zr.end());
    return t_net.forward(in)[0];
  };

  const double n = static_cast<double>(batch.size());
  ad::Var bound = ad::constant(0.0);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    bound = bound - affine(ad::softplus(-t_of(z_us[i], z_recs[i])), 1.0 / n, 0.0);
  }
  for (std::size_t i = 0; i < batch.size(); ++i) {
    bound = bound - affine(ad::softplus(t_of(z_us[i], z_recs[perm[i]])), 1.0 / n, 0.0);
  }

  const ad::Var loss = -bound;
  tape.backward(loss);

  stats_net.t_net.optimizer_step(t_net.grads(), lr);
  auto scaled = [&](const AttachedMlp& att) {
    auto g = att.grads();
    for (auto& v : g) v *= lambda_mi;
    return g;
  };
  user.z_encoder.optimizer_step(scaled(user_nets.z_encoder), lr);
  rec.z_encoder.optimizer_step(scaled(rec_nets.z_encoder), lr);
  ctx_enc.step_net().optimizer_step(scaled(ctx_net), lr);
  if (emb.trainable()) {
    auto g = aemb.grads();
    for (auto& v : g) v *= lambda_mi;
    emb.optimizer_step(g, lr);
  }

  MiStats out;
  out.bound = bound.v;
  return out;
}

}  // namespace m3rec
