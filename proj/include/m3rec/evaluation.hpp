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

#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "m3rec/metrics.hpp"
#include "m3rec/simulator.hpp"
#include "m3rec/training.hpp"

namespace m3rec {

/// evaluate_online adapter for a trained bundle: the warm-up trajectory is
/// encoded once per user, then greedy slates condition on that context.
inline std::function<SlatePolicy(const Trajectory&)> bundle_online_policy(
    const ModelBundle& bundle, int k, std::uint64_t adapt_seed) {
  return [&bundle, k, adapt_seed](const Trajectory& warmup) -> SlatePolicy {
    const auto adapted = meta_test_adapt(
        bundle, warmup, mix64(adapt_seed ^ static_cast<std::uint64_t>(warmup.user_id)));
    return [&bundle, adapted, k](const EnvState& st, Rng&) {
      const State s = make_state(st.history, bundle.window,
                                 static_cast<int>(st.history.size()));
      return adapted.rec_slate(s, k);
    };
  };
}

struct OnlineReport {
  int k = 0;
  MeanStd reward;
};

/// Table-1-style online evaluation at each configured slate size.
inline std::vector<OnlineReport> evaluate_online_at_ks(
    const ModelBundle& bundle, const Environment& env, int n_users, int horizon,
    std::span<const int> ks, std::uint64_t eval_seed) {
  std::vector<OnlineReport> out;
  for (int k : ks) {
    OnlineReport rep;
    rep.k = k;
    rep.reward = evaluate_online(env, bundle_online_policy(bundle, k, eval_seed),
                                 n_users, horizon, k, eval_seed)
                     .cumulative_reward;
    out.push_back(rep);
  }
  return out;
}

// ---- offline reranking evaluation ----

struct RerankConfig {
  bool catalog_pool = false;  // default: rerank the logged slate
  int seeds = 3;
  std::uint64_t base_seed = 0;
};

struct RerankOutcome {
  MetricTable table;
  std::size_t skipped_users = 0;
};

/// Per test user: a context trajectory plus held-out steps. Users with one
/// trajectory split it in half; users with several use the first for
/// context and the rest held out.
struct RerankUserData {
  Trajectory context;
  std::vector<Trajectory> held_out;  // states are built per trajectory
  Trajectory full;                   // split-user case: the whole trajectory
  std::size_t context_prefix = 0;    // first held-out step index within full
};

inline std::vector<RerankUserData> build_rerank_users(
    const std::vector<Trajectory>& test_pool) {
  std::vector<RerankUserData> users;
  const auto groups = group_by_user(test_pool);
  for (const auto& [uid, idxs] : groups) {
    RerankUserData u;
    if (idxs.size() == 1) {
      const auto& traj = test_pool[idxs[0]];
      if (traj.steps.size() < 2) continue;  // nothing to hold out
      const std::size_t half = traj.steps.size() / 2;
      u.context.user_id = uid;
      u.context.steps.assign(traj.steps.begin(),
                             traj.steps.begin() + static_cast<std::ptrdiff_t>(half));
      Trajectory rest;
      rest.user_id = uid;
      rest.steps.assign(traj.steps.begin() + static_cast<std::ptrdiff_t>(half),
                        traj.steps.end());
      u.held_out.push_back(std::move(rest));
      // held-out states carry the full prefix, context steps included
      u.context_prefix = half;
      u.full = traj;
    } else {
      u.context = test_pool[idxs[0]];
      for (std::size_t i = 1; i < idxs.size(); ++i) {
        u.held_out.push_back(test_pool[idxs[i]]);
      }
      u.context_prefix = 0;
    }
    users.push_back(std::move(u));
  }
  return users;
}

/// Reranks each held-out step's candidate pool by the agent's click scores;
/// the logged click is the single relevant item.
inline RerankOutcome offline_rerank_eval(const ModelBundle& bundle,
                                         const std::vector<Trajectory>& test_pool,
                                         const RerankConfig& rc) {
  const auto users = build_rerank_users(test_pool);
  RerankOutcome out;
  if (users.empty()) {
    throw ValidationError("offline_rerank_eval: no usable test users");
  }

  std::map<std::string, std::vector<double>> per_seed_means;
  for (int seed_ix = 0; seed_ix < rc.seeds; ++seed_ix) {
    std::map<std::string, std::vector<double>> per_user;
    for (std::size_t ui = 0; ui < users.size(); ++ui) {
      const auto& u = users[ui];
      auto rng = Rng::derive(rc.base_seed, 0x5EED + static_cast<std::uint64_t>(seed_ix),
                             static_cast<std::uint64_t>(ui));
      const auto ctx = bundle.infer_context(u.context, rng);

      std::map<std::string, std::vector<double>> per_step;
      for (const auto& held : u.held_out) {
        const bool split_user = u.context_prefix > 0;
        const auto& full = split_user ? u.full : held;
        const std::size_t start = split_user ? u.context_prefix : 0;
        const std::size_t stop = full.steps.size();
        for (std::size_t t = start; t < stop; ++t) {
          const auto& step = full.steps[t];
          const State s = state_at(full, t, bundle.window);
          const auto s_feat = bundle.emb.featurize(s);
          const auto q = bundle.rec.z_posterior(s_feat, ctx.sample);

          std::vector<int> pool;
          if (rc.catalog_pool) {
            pool.resize(static_cast<std::size_t>(bundle.emb.n_items()));
            std::iota(pool.begin(), pool.end(), 0);
          } else {
            pool = step.slate;
          }
          const auto scores = bundle.rec.pool_scores(q.mean, pool, bundle.emb);
          std::vector<int> order(pool.size());
          std::iota(order.begin(), order.end(), 0);
          std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            if (scores[static_cast<std::size_t>(a)] != scores[static_cast<std::size_t>(b)]) {
              return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
            }
            return pool[static_cast<std::size_t>(a)] < pool[static_cast<std::size_t>(b)];
          });
          std::vector<int> ranked(pool.size());
          for (std::size_t j = 0; j < order.size(); ++j) {
            ranked[j] = pool[static_cast<std::size_t>(order[j])];
          }
          const std::set<int> relevant{step.click};
          for (const auto& name : metric_row_names()) {
            per_step[name].push_back(metric_value(name, ranked, relevant));
          }
        }
      }
      if (per_step.empty() || per_step.begin()->second.empty()) {
        out.skipped_users += 1;
        continue;
      }
      for (const auto& [name, vals] : per_step) {
        per_user[name].push_back(mean_std(vals).mean);
      }
    }
    for (const auto& [name, vals] : per_user) {
      per_seed_means[name].push_back(mean_std(vals).mean);
    }
  }

  for (const auto& name : metric_row_names()) {
    const auto it = per_seed_means.find(name);
    if (it == per_seed_means.end()) continue;
    out.table.rows[name] = mean_std(it->second);
  }
  return out;
}

// ---- model-error probe ----

// Exact categorical KL between true and learned slate-choice distributions
// at every (state, slate) the evaluation policy visits.
struct ProbePairRecord {
  std::vector<int> slate;
  std::vector<double> true_probs;
  std::vector<double> model_probs;
  double kl = 0.0;
};

struct ProbeResult {
  double avg_kl = 0.0;
  std::size_t n_pairs = 0;
  std::vector<ProbePairRecord> records;
};

/// Learned (or injected) user-choice distribution given the visible state,
/// the slate, and the inferred context.
using ChoiceProbProvider = std::function<std::vector<double>(
    const State&, std::span<const int>, const UserContext&)>;

inline ChoiceProbProvider learned_choice_provider(const ModelBundle& bundle) {
  return [&bundle](const State& s, std::span<const int> slate,
                   const UserContext& ctx) {
    const auto s_feat = bundle.emb.featurize(s);
    const auto q = bundle.user.z_posterior(s_feat, ctx.sample);
    return bundle.user.policy_probs(q.mean, slate, bundle.emb);
  };
}

inline double categorical_kl(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ValidationError("categorical_kl: size mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    kl += p[i] * std::log(p[i] / std::max(q[i], 1e-300));
  }
  return kl;
}

enum class ProbePolicy { kAgent, kOracle };

/// Rolls the evaluation policy in the true environment and averages the
/// exact KL between the environment's choice distribution and the
/// provider's at every visited (state, slate).
inline ProbeResult model_error_probe(const ModelBundle& bundle,
                                     const Environment& env,
                                     const ChoiceProbProvider& provider,
                                     ProbePolicy policy, int n_users, int horizon,
                                     std::uint64_t seed, bool keep_records = false) {
  ProbeResult res;
  double kl_sum = 0.0;
  for (int uix = 0; uix < n_users; ++uix) {
    auto rng = Rng::derive(seed, 0x9806E, static_cast<std::uint64_t>(uix));
    EnvState warm;
    warm.user = env.sample_user(rng);
    const GroundTruthUser initial_user = warm.user;
    Trajectory warmup;
    warmup.user_id = uix;
    for (int t = 0; t < env.config().horizon; ++t) {
      StepRecord rec;
      rec.slate = env.logging_slate(warm.user, env.config().k, rng);
      const auto sr = env.env_step(warm, rec.slate, rng);
      rec.click = sr.click;
      rec.reward = sr.reward;
      warmup.steps.push_back(std::move(rec));
    }
    UserContext ctx;
    {
      auto ctx_rng = Rng::derive(seed, 0x9806F, static_cast<std::uint64_t>(uix));
      ctx = bundle.infer_context(warmup, ctx_rng);
    }

    EnvState st;
    st.user = initial_user;
    for (int t = 0; t < horizon; ++t) {
      const State s = make_state(st.history, bundle.window,
                                 static_cast<int>(st.history.size()));
      std::vector<int> slate;
      if (policy == ProbePolicy::kOracle) {
        slate = env.oracle_slate(st.user, env.config().k);
      } else {
        const auto s_feat = bundle.emb.featurize(s);
        const auto q = bundle.rec.z_posterior(s_feat, ctx.sample);
        Rng dummy(0);
        slate = bundle.rec
                    .propose_slate(q.mean, bundle.emb, env.config().k,
                                   SlateMode::kGreedy, dummy)
                    .items;
      }
      const auto true_probs = env.choice_probs(st.user, slate);
      const auto model_probs = provider(s, slate, ctx);
      if (model_probs.size() != slate.size()) {
        throw ValidationError("model_error_probe: provider returned wrong size");
      }
      const double kl = categorical_kl(true_probs, model_probs);
      kl_sum += kl;
      res.n_pairs += 1;
      if (keep_records) {
        res.records.push_back({slate, true_probs, model_probs, kl});
      }
      env.env_step(st, slate, rng);
    }
  }
  res.avg_kl = res.n_pairs > 0 ? kl_sum / static_cast<double>(res.n_pairs) : 0.0;
  return res;
}

}  // namespace m3rec
