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

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "m3rec/checkpoint.hpp"
#include "m3rec/evaluation.hpp"
#include "m3rec/training.hpp"

using namespace m3rec;
using Catch::Approx;

namespace {

ExperimentConfig desk_config() {
  ExperimentConfig cfg;
  cfg.seed = 11;
  cfg.sim.n_items = 15;
  cfg.sim.d_item = 6;
  cfg.sim.k = 3;
  cfg.sim.horizon = 8;
  cfg.sim.n_clusters = 2;
  cfg.sim.n_train_users = 30;
  cfg.sim.n_test_users = 8;
  cfg.model.d_c = 4;
  cfg.model.d_z = 4;
  cfg.model.window = 4;
  cfg.model.hidden = {16};
  cfg.train.pretrain_epochs = 1;
  cfg.train.outer_iters = 2;
  cfg.train.batch_trajectories = 8;
  cfg.train.disc_batch = 24;
  cfg.train.disc_batches_per_epoch = 1;
  cfg.train.rollout_users = 6;
  cfg.train.mi_batch = 12;
  cfg.eval.eval_users = 10;
  cfg.eval.probe_users = 6;
  return cfg;
}

std::string file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::filesystem::path tmp_dir() {
  auto dir = std::filesystem::temp_directory_path() / "m3rec_test_training";
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("checkpoint: bit-exact round trip") {
  auto cfg = desk_config();
  Environment env(cfg.sim, cfg.seed);
  auto bundle = ModelBundle::create(cfg, env.embeddings_view());
  const auto path = (tmp_dir() / "roundtrip.ckpt").string();
  bundle.to_checkpoint().save(path);

  auto other = ModelBundle::create(cfg, env.embeddings_view());
  // scramble, then restore
  Rng rng(5);
  std::vector<double> scrambled(other.user.policy_head.param_count());
  for (auto& v : scrambled) v = rng.normal();
  other.user.policy_head.set_params(scrambled);
  other.load_checkpoint(Checkpoint::load(path));

  REQUIRE(std::equal(other.user.policy_head.params().begin(),
                     other.user.policy_head.params().end(),
                     bundle.user.policy_head.params().begin()));
  REQUIRE(std::equal(other.ctx.step_net().params().begin(),
                     other.ctx.step_net().params().end(),
                     bundle.ctx.step_net().params().begin()));

  // saved twice, byte-identical
  const auto path2 = (tmp_dir() / "roundtrip2.ckpt").string();
  other.to_checkpoint().save(path2);
  REQUIRE(file_bytes(path) == file_bytes(path2));
}

TEST_CASE("meta_train: zero outer iterations returns the post-pretrain model") {
  auto cfg = desk_config();
  cfg.train.outer_iters = 0;
  Environment env(cfg.sim, cfg.seed);
  const auto pool = env.generate_offline_logs(cfg.sim.n_train_users, 0, 0);

  auto a = ModelBundle::create(cfg, env.embeddings_view());
  meta_train(cfg, pool, a);

  auto b = ModelBundle::create(cfg, env.embeddings_view());
  auto rng = Rng::derive(cfg.seed, 0x7EA1);
  UserTrainWeights uw;
  uw.beta = cfg.train.beta;
  uw.beta_c = cfg.train.beta_c;
  uw.gamma = cfg.train.gamma;
  uw.lr = cfg.train.lr;
  user_mle_pretrain(pool, b.ctx, b.user, b.emb, cfg.train.pretrain_epochs,
                    cfg.train.batch_trajectories, uw, rng);

  REQUIRE(std::equal(a.user.z_encoder.params().begin(),
                     a.user.z_encoder.params().end(),
                     b.user.z_encoder.params().begin()));
  // the agent was untouched in both
  REQUIRE(std::equal(a.rec.policy_head.params().begin(),
                     a.rec.policy_head.params().end(),
                     b.rec.policy_head.params().begin()));
}

TEST_CASE("meta_train: identical seeds give identical metrics files and checkpoints") {
  auto cfg = desk_config();
  Environment env(cfg.sim, cfg.seed);
  const auto pool = env.generate_offline_logs(cfg.sim.n_train_users, 0, 0);

  const auto m1 = (tmp_dir() / "metrics1.jsonl").string();
  const auto m2 = (tmp_dir() / "metrics2.jsonl").string();
  const auto c1 = (tmp_dir() / "ck1.txt").string();
  const auto c2 = (tmp_dir() / "ck2.txt").string();

  auto a = ModelBundle::create(cfg, env.embeddings_view());
  meta_train(cfg, pool, a, m1);
  a.to_checkpoint().save(c1);

  auto b = ModelBundle::create(cfg, env.embeddings_view());
  meta_train(cfg, pool, b, m2);
  b.to_checkpoint().save(c2);

  REQUIRE(file_bytes(m1) == file_bytes(m2));
  REQUIRE(file_bytes(c1) == file_bytes(c2));
  REQUIRE(!file_bytes(m1).empty());
}

TEST_CASE("meta_train: discriminator separates held-out offline data from noise floor") {
  auto cfg = desk_config();
  cfg.train.outer_iters = 12;
  cfg.train.pretrain_epochs = 2;
  cfg.train.disc_batches_per_epoch = 6;
  cfg.train.lr = 3e-3;
  Environment env(cfg.sim, cfg.seed);
  const auto pool = env.generate_offline_logs(cfg.sim.n_train_users, 0, 0);
  const auto held_out = env.generate_offline_logs(10, 1000, 1ULL << 20);
  auto bundle = ModelBundle::create(cfg, env.embeddings_view());
  const auto result = meta_train(cfg, pool, bundle);
  REQUIRE(result.iterations.size() == 12);
  // mi bound column populated when not ablated
  REQUIRE(result.iterations.back().mi_bound.has_value());

  // discriminator loss evaluated on held-out offline steps against fresh
  // model rollouts ends below its D=0.5 value of 2 log 2
  auto rng = Rng::derive(321, 0);
  const auto groups = group_by_user(held_out);
  std::vector<DiscItem> true_batch, model_batch;
  for (const auto& traj : held_out) {
    UserContext ctx = bundle.ctx.encode_context(traj, bundle.emb, rng);
    for (std::size_t t = 0; t < traj.steps.size(); ++t) {
      DiscItem item;
      item.state = state_at(traj, t, bundle.window);
      item.click = traj.steps[t].click;
      item.slate = traj.steps[t].slate;
      item.context = ctx.sample;
      const auto s_feat = bundle.emb.featurize(item.state);
      const auto z_u = bundle.user.z_posterior(s_feat, ctx.sample).sample(rng);
      const auto probs = bundle.user.policy_probs(z_u, item.slate, bundle.emb);
      for (std::size_t j = 0; j < item.slate.size(); ++j) {
        if (item.slate[j] == item.click) item.pi_val = std::max(probs[j], 1e-12);
      }
      true_batch.push_back(std::move(item));
    }
  }
  for (int i = 0; i < 10; ++i) {
    const auto ro = generate_model_rollout(bundle, held_out, groups,
                                           cfg.sim.horizon, cfg.sim.k, false, rng);
    for (const auto& step : ro.steps) {
      DiscItem item;
      item.state = step.state;
      item.click = step.click;
      item.slate = step.slate;
      item.context = ro.ctx.sample;
      item.pi_val = step.pi_val;
      model_batch.push_back(std::move(item));
    }
  }
  ad::Tape tape;
  AttachedDiscriminator att(tape, bundle.disc);
  AttachedEmbeddings aemb(tape, bundle.emb, false);
  const auto loss = discriminator_loss(att, true_batch, model_batch, aemb);
  REQUIRE(loss.v < 2.0 * std::log(2.0));
}

TEST_CASE("meta_train: no_mi ablation leaves the bound column null-marked") {
  auto cfg = desk_config();
  cfg.ablation.no_mi = true;
  Environment env(cfg.sim, cfg.seed);
  const auto pool = env.generate_offline_logs(cfg.sim.n_train_users, 0, 0);
  auto bundle = ModelBundle::create(cfg, env.embeddings_view());
  const auto metrics = (tmp_dir() / "nomi.jsonl").string();
  const auto result = meta_train(cfg, pool, bundle, metrics);
  for (const auto& it : result.iterations) REQUIRE(!it.mi_bound.has_value());
  std::ifstream in(metrics);
  std::string line;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    REQUIRE(j.at("mi_bound").is_null());
  }
}

TEST_CASE("meta_train: no_context forces every emitted context to the prior") {
  auto cfg = desk_config();
  cfg.ablation.no_context = true;
  Environment env(cfg.sim, cfg.seed);
  const auto pool = env.generate_offline_logs(cfg.sim.n_train_users, 0, 0);
  auto bundle = ModelBundle::create(cfg, env.embeddings_view());
  meta_train(cfg, pool, bundle);

  Rng rng(3);
  const auto ctx = bundle.infer_context(pool[0], rng);
  REQUIRE(ctx.posterior.mean == std::vector<double>(4, 0.0));
  REQUIRE(ctx.posterior.log_std == std::vector<double>(4, 0.0));
  REQUIRE(ctx.sample == std::vector<double>(4, 0.0));

  const auto groups = group_by_user(pool);
  auto r2 = Rng::derive(9, 1);
  const auto ro = generate_model_rollout(bundle, pool, groups, 4, cfg.sim.k,
                                         false, r2);
  REQUIRE(ro.ctx.sample == std::vector<double>(4, 0.0));
}

TEST_CASE("meta_train: model_free trains the agent from logged rewards only") {
  auto cfg = desk_config();
  cfg.ablation.model_free = true;
  Environment env(cfg.sim, cfg.seed);
  const auto pool = env.generate_offline_logs(cfg.sim.n_train_users, 0, 0);
  auto bundle = ModelBundle::create(cfg, env.embeddings_view());
  const auto before =
      std::vector<double>(bundle.user.z_encoder.params().begin(),
                          bundle.user.z_encoder.params().end());
  const auto rec_before =
      std::vector<double>(bundle.rec.policy_head.params().begin(),
                          bundle.rec.policy_head.params().end());
  meta_train(cfg, pool, bundle);
  // user model untouched, agent trained
  REQUIRE(std::equal(before.begin(), before.end(),
                     bundle.user.z_encoder.params().begin()));
  bool rec_moved = false;
  for (std::size_t i = 0; i < rec_before.size(); ++i) {
    if (bundle.rec.policy_head.param(i) != rec_before[i]) rec_moved = true;
  }
  REQUIRE(rec_moved);
}

TEST_CASE("meta_test_adapt: context-only adaptation, deterministic, prior fallback") {
  auto cfg = desk_config();
  Environment env(cfg.sim, cfg.seed);
  const auto pool = env.generate_offline_logs(4, 0, 0);
  auto bundle = ModelBundle::create(cfg, env.embeddings_view());

  const auto before = bundle.to_checkpoint();
  const auto a = meta_test_adapt(bundle, pool[0], 99);
  const auto b = meta_test_adapt(bundle, pool[0], 99);
  REQUIRE(a.ctx.sample == b.ctx.sample);
  REQUIRE(!a.empty_fallback);

  // adaptation performs no parameter updates
  const auto after = bundle.to_checkpoint();
  for (const auto& [name, e] : before.entries()) {
    REQUIRE(after.entries().at(name).params == e.params);
  }

  Trajectory empty;
  const auto c = meta_test_adapt(bundle, empty, 1);
  REQUIRE(c.empty_fallback);
  REQUIRE(c.ctx.posterior.mean == std::vector<double>(4, 0.0));

  // the adapted policy emits k distinct valid items
  const State s = make_state(std::vector<int>{1, 2}, cfg.model.window);
  const auto slate = a.rec_slate(s, cfg.sim.k);
  REQUIRE(slate.size() == 3);
  std::set<int> distinct(slate.begin(), slate.end());
  REQUIRE(distinct.size() == 3);
}

TEST_CASE("meta_test_adapt: users from different clusters get different contexts") {
  auto cfg = desk_config();
  cfg.sim.cluster_dispersion = 0.05;
  cfg.sim.temperature = 0.3;
  cfg.train.pretrain_epochs = 4;
  cfg.train.outer_iters = 0;
  Environment env(cfg.sim, cfg.seed);
  const auto pool = env.generate_offline_logs(cfg.sim.n_train_users, 0, 0);
  auto bundle = ModelBundle::create(cfg, env.embeddings_view());
  meta_train(cfg, pool, bundle);

  // fresh users from each cluster, warmed up with the logging policy
  double cross_cluster = 0.0, within_cluster = 0.0;
  int n_cross = 0, n_within = 0;
  std::vector<std::pair<int, std::vector<double>>> contexts;
  for (int i = 0; i < 24; ++i) {
    auto rng = Rng::derive(1234, static_cast<std::uint64_t>(i));
    EnvState st;
    st.user = env.sample_user(rng);
    Trajectory warm;
    warm.user_id = i;
    for (int t = 0; t < cfg.sim.horizon; ++t) {
      StepRecord rec;
      rec.slate = env.logging_slate(st.user, cfg.sim.k, rng);
      const auto sr = env.env_step(st, rec.slate, rng);
      rec.click = sr.click;
      rec.reward = sr.reward;
      warm.steps.push_back(std::move(rec));
    }
    const auto adapted = meta_test_adapt(bundle, warm, 777);
    contexts.push_back({st.user.cluster_id, adapted.ctx.posterior.mean});
  }
  for (std::size_t i = 0; i < contexts.size(); ++i) {
    for (std::size_t j = i + 1; j < contexts.size(); ++j) {
      double d2 = 0.0;
      for (std::size_t d = 0; d < contexts[i].second.size(); ++d) {
        const double diff = contexts[i].second[d] - contexts[j].second[d];
        d2 += diff * diff;
      }
      if (contexts[i].first == contexts[j].first) {
        within_cluster += std::sqrt(d2);
        ++n_within;
      } else {
        cross_cluster += std::sqrt(d2);
        ++n_cross;
      }
    }
  }
  REQUIRE(n_cross > 0);
  REQUIRE(n_within > 0);
  // cross-cluster contexts are farther apart on average
  REQUIRE(cross_cluster / n_cross > within_cluster / n_within);
}

TEST_CASE("model_error_probe: injected true probabilities give exactly zero") {
  auto cfg = desk_config();
  Environment env(cfg.sim, cfg.seed);
  auto bundle = ModelBundle::create(cfg, env.embeddings_view());

  // a provider that replays the environment's own choice distribution; it
  // must track the drifting user, so recompute it through the probe's
  // per-user stream, which the record mechanism lets us bypass: inject by
  // construction through the recorded true_probs themselves
  int call = 0;
  std::vector<std::vector<double>> true_probs_trace;
  {
    const auto learned = learned_choice_provider(bundle);
    const auto pre = model_error_probe(bundle, env, learned, ProbePolicy::kOracle,
                                       3, 5, 42, /*keep_records=*/true);
    for (const auto& r : pre.records) true_probs_trace.push_back(r.true_probs);
  }
  ChoiceProbProvider injected = [&](const State&, std::span<const int>,
                                    const UserContext&) {
    return true_probs_trace[static_cast<std::size_t>(call++)];
  };
  const auto res = model_error_probe(bundle, env, injected, ProbePolicy::kOracle,
                                     3, 5, 42);
  REQUIRE(res.avg_kl == 0.0);
  REQUIRE(res.n_pairs == 15);
}

TEST_CASE("model_error_probe: uniform model matches the analytic KL per slate") {
  auto cfg = desk_config();
  Environment env(cfg.sim, cfg.seed);
  auto bundle = ModelBundle::create(cfg, env.embeddings_view());
  ChoiceProbProvider uniform = [&](const State&, std::span<const int> slate,
                                   const UserContext&) {
    return std::vector<double>(slate.size(), 1.0 / static_cast<double>(slate.size()));
  };
  const auto res = model_error_probe(bundle, env, uniform, ProbePolicy::kOracle,
                                     4, 6, 43, /*keep_records=*/true);
  double expected = 0.0;
  for (const auto& r : res.records) {
    double kl = 0.0;
    for (double p : r.true_probs) {
      if (p > 0.0) kl += p * std::log(p * static_cast<double>(r.slate.size()));
    }
    expected += kl;
  }
  expected /= static_cast<double>(res.records.size());
  REQUIRE(res.avg_kl == Approx(expected).epsilon(1e-12));
}

TEST_CASE("model_error_probe: training reduces the model error") {
  auto cfg = desk_config();
  cfg.train.pretrain_epochs = 4;
  cfg.train.outer_iters = 3;
  Environment env(cfg.sim, cfg.seed);
  const auto pool = env.generate_offline_logs(cfg.sim.n_train_users, 0, 0);

  auto untrained = ModelBundle::create(cfg, env.embeddings_view());
  auto trained = ModelBundle::create(cfg, env.embeddings_view());
  meta_train(cfg, pool, trained);

  const auto before =
      model_error_probe(untrained, env, learned_choice_provider(untrained),
                        ProbePolicy::kOracle, cfg.eval.probe_users, cfg.sim.horizon, 7);
  const auto after =
      model_error_probe(trained, env, learned_choice_provider(trained),
                        ProbePolicy::kOracle, cfg.eval.probe_users, cfg.sim.horizon, 7);
  REQUIRE(after.avg_kl < before.avg_kl);
}

TEST_CASE("online evaluation through a bundle is deterministic") {
  auto cfg = desk_config();
  Environment env(cfg.sim, cfg.seed);
  auto bundle = ModelBundle::create(cfg, env.embeddings_view());
  const auto a = evaluate_online_at_ks(bundle, env, 5, 4, cfg.eval.ks, 55);
  const auto b = evaluate_online_at_ks(bundle, env, 5, 4, cfg.eval.ks, 55);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].reward.mean == b[i].reward.mean);
    REQUIRE(a[i].reward.std == b[i].reward.std);
  }
}

TEST_CASE("offline rerank: ranking by true affinity beats a random ranker") {
  auto cfg = desk_config();
  Environment env(cfg.sim, cfg.seed);
  const auto test_pool = env.generate_offline_logs(60, 0, 0);

  // affinity ranker: uses the logging users' own trajectories; the click is
  // most often the highest-affinity slate item, so P@1 must beat random
  std::size_t steps = 0, affinity_hits = 0;
  double random_expect = 0.0;
  for (const auto& traj : test_pool) {
    // reconstruct the ground-truth user is not possible from the log alone;
    // instead rank by empirical click popularity within the trajectory as a
    // weak-but-informative stand-in for an informed ranker
    std::map<int, int> clicks;
    for (const auto& s : traj.steps) clicks[s.click] += 1;
    for (const auto& s : traj.steps) {
      int best = s.slate[0];
      int best_count = -1;
      for (int id : s.slate) {
        const int c = clicks.count(id) ? clicks.at(id) : 0;
        if (c > best_count || (c == best_count && id < best)) {
          best = id;
          best_count = c;
        }
      }
      affinity_hits += best == s.click ? 1 : 0;
      random_expect += 1.0 / static_cast<double>(s.slate.size());
      ++steps;
    }
  }
  REQUIRE(static_cast<double>(affinity_hits) > random_expect);
  REQUIRE(steps > 0);
}

TEST_CASE("offline rerank: random ranker P@1 is near 1/slate-size") {
  // a fresh bundle ranks essentially at random w.r.t. the true clicks
  auto cfg = desk_config();
  cfg.sim.k = 5;
  Environment env(cfg.sim, cfg.seed + 1);
  const auto test_pool = env.generate_offline_logs(300, 0, 0);
  auto bundle = ModelBundle::create(cfg, env.embeddings_view());
  RerankConfig rc;
  rc.seeds = 1;
  rc.base_seed = 17;
  const auto outcome = offline_rerank_eval(bundle, test_pool, rc);
  const double p1 = outcome.table.rows.at("P@1").mean;
  // binomial-ish bound around 0.2 over ~1200 steps; generous 3-sigma margin
  REQUIRE(p1 == Approx(0.2).margin(0.06));
}

TEST_CASE("offline rerank: deterministic under seed") {
  auto cfg = desk_config();
  Environment env(cfg.sim, cfg.seed);
  const auto test_pool = env.generate_offline_logs(20, 0, 0);
  auto bundle = ModelBundle::create(cfg, env.embeddings_view());
  RerankConfig rc;
  rc.seeds = 2;
  rc.base_seed = 23;
  const auto a = offline_rerank_eval(bundle, test_pool, rc);
  const auto b = offline_rerank_eval(bundle, test_pool, rc);
  for (const auto& name : metric_row_names()) {
    REQUIRE(a.table.rows.at(name).mean == b.table.rows.at(name).mean);
    REQUIRE(a.table.rows.at(name).std == b.table.rows.at(name).std);
  }
}
