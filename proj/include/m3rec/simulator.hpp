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
#include <span>
#include <vector>

#include "m3rec/common.hpp"
#include "m3rec/data.hpp"

namespace m3rec {

struct SimConfig {
  int n_items = 200;
  int d_item = 16;
  int k = 3;
  int horizon = 20;
  int n_clusters = 4;
  double cluster_dispersion = 0.25;
  double temperature = 0.7;
  double drift_rate = 0.05;
  double reward_noise_std = 0.1;
  double epsilon_logging = 0.5;
  int n_train_users = 2500;
  int n_test_users = 500;

  void validate() const {
    if (n_items < 1) throw ConfigError("sim.n_items must be >= 1");
    if (d_item < 1) throw ConfigError("sim.d_item must be >= 1");
    if (k < 1 || k > n_items) throw ConfigError("sim.k must be in [1, n_items]");
    if (horizon < 0) throw ConfigError("sim.horizon must be >= 0");
    if (n_clusters < 1) throw ConfigError("sim.n_clusters must be >= 1");
    if (temperature <= 0.0) throw ConfigError("sim.temperature must be > 0");
    if (drift_rate < 0.0 || drift_rate >= 1.0) {
      throw ConfigError("sim.drift_rate must be in [0, 1)");
    }
    if (reward_noise_std < 0.0) throw ConfigError("sim.reward_noise_std must be >= 0");
    if (epsilon_logging < 0.0 || epsilon_logging > 1.0) {
      throw ConfigError("sim.epsilon_logging must be in [0, 1]");
    }
  }
};

struct ItemCatalog {
  int n_items = 0;
  int d_item = 0;
  std::vector<double> embeddings;  // n_items x d_item, unit-norm rows
  std::vector<double> quality;     // in [0, 1]

  std::span<const double> emb(int item) const {
    if (item < 0 || item >= n_items) {
      throw ValidationError("catalog: bad item id " + std::to_string(item));
    }
    return {embeddings.data() + static_cast<std::size_t>(item) * d_item,
            static_cast<std::size_t>(d_item)};
  }
};

struct GroundTruthUser {
  std::vector<double> preference;  // unit norm
  double temperature = 0.7;
  double drift_rate = 0.0;
  double reward_noise_std = 0.0;
  int cluster_id = 0;
};

struct EnvState {
  std::vector<int> history;  // clicked item ids, most recent last
  GroundTruthUser user;      // hidden from the agent
  int t = 0;
};

// Ground-truth environment: conditional-logit slate choice, nonnegative
// engagement reward, additive preference drift.
class Environment {
 public:
  Environment(const SimConfig& cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
    cfg_.validate();
    auto rng = Rng::derive(seed, 0xCA7A106ULL);
    catalog_.n_items = cfg_.n_items;
    catalog_.d_item = cfg_.d_item;
    catalog_.embeddings.resize(static_cast<std::size_t>(cfg_.n_items) * cfg_.d_item);
    for (int i = 0; i < cfg_.n_items; ++i) {
      std::vector<double> e = rng.normal_vec(static_cast<std::size_t>(cfg_.d_item));
      normalize_inplace(e);
      std::copy(e.begin(), e.end(),
                catalog_.embeddings.begin() + static_cast<std::size_t>(i) * cfg_.d_item);
    }
    catalog_.quality.resize(static_cast<std::size_t>(cfg_.n_items));
    for (auto& q : catalog_.quality) q = rng.uniform();

    centroids_.resize(static_cast<std::size_t>(cfg_.n_clusters));
    for (auto& c : centroids_) {
      c = rng.normal_vec(static_cast<std::size_t>(cfg_.d_item));
      normalize_inplace(c);
    }
  }

  const SimConfig& config() const { return cfg_; }
  const ItemCatalog& catalog() const { return catalog_; }
  std::uint64_t seed() const { return seed_; }
  std::span<const std::vector<double>> centroids() const { return centroids_; }

  /// preference = normalize(centroid[cluster] + dispersion * N(0, I)).
  GroundTruthUser sample_user(Rng& rng) const {
    GroundTruthUser u;
    u.cluster_id = static_cast<int>(rng.uniform_index(
        static_cast<std::size_t>(cfg_.n_clusters)));
    u.preference = centroids_[static_cast<std::size_t>(u.cluster_id)];
    if (cfg_.cluster_dispersion > 0.0) {
      for (auto& p : u.preference) p += cfg_.cluster_dispersion * rng.normal();
    }
    normalize_inplace(u.preference);
    u.temperature = cfg_.temperature;
    u.drift_rate = cfg_.drift_rate;
    u.reward_noise_std = cfg_.reward_noise_std;
    return u;
  }

  double affinity(const GroundTruthUser& u, int item) const {
    return dot(u.preference, catalog_.emb(item));
  }

  /// Conditional-logit choice over the slate items.
  std::vector<double> choice_probs(const GroundTruthUser& u,
                                   std::span<const int> slate) const {
    std::set<int> seen(slate.begin(), slate.end());
    if (seen.size() != slate.size()) {
      throw ValidationError("user_choice: duplicate slate ids");
    }
    std::vector<double> logits(slate.size());
    for (std::size_t j = 0; j < slate.size(); ++j) {
      logits[j] = affinity(u, slate[j]) / u.temperature;
    }
    return softmax(logits);
  }

  /// Returns (clicked item id, choice probabilities over the slate).
  std::pair<int, std::vector<double>> user_choice(const GroundTruthUser& u,
                                                  std::span<const int> slate,
                                                  Rng& rng) const {
    const auto probs = choice_probs(u, slate);
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
    return {slate[pick], probs};
  }

  /// reward = max(0, quality * (1 + affinity) + noise).
  double user_reward(const GroundTruthUser& u, int click, Rng& rng) const {
    double r = catalog_.quality[static_cast<std::size_t>(click)] *
               (1.0 + affinity(u, click));
    if (u.reward_noise_std > 0.0) r += u.reward_noise_std * rng.normal();
    return std::max(0.0, r);
  }

  struct StepResult {
    int click = 0;
    double reward = 0.0;
    std::vector<double> probs;
  };

  /// Applies one slate: samples the click and reward, appends to history,
  /// and drifts the preference toward the clicked embedding.
  StepResult env_step(EnvState& state, std::span<const int> slate, Rng& rng) const {
    StepResult res;
    auto [click, probs] = user_choice(state.user, slate, rng);
    res.click = click;
    res.probs = std::move(probs);
    res.reward = user_reward(state.user, click, rng);
    state.history.push_back(click);
    if (state.user.drift_rate > 0.0) {
      const auto emb = catalog_.emb(click);
      for (int i = 0; i < cfg_.d_item; ++i) {
        state.user.preference[static_cast<std::size_t>(i)] +=
            state.user.drift_rate * emb[i];
      }
      normalize_inplace(state.user.preference);
    }
    state.t += 1;
    return res;
  }

  /// Top-k items by true affinity (oracle policy), ties by lowest id.
  std::vector<int> oracle_slate(const GroundTruthUser& u, int k) const {
    std::vector<int> ids(static_cast<std::size_t>(cfg_.n_items));
    for (int i = 0; i < cfg_.n_items; ++i) ids[static_cast<std::size_t>(i)] = i;
    std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) {
      const double fa = affinity(u, a), fb = affinity(u, b);
      if (fa != fb) return fa > fb;
      return a < b;
    });
    ids.resize(static_cast<std::size_t>(k));
    return ids;
  }

  std::vector<int> random_slate(int k, Rng& rng) const {
    return rng.sample_distinct(static_cast<std::size_t>(cfg_.n_items),
                               static_cast<std::size_t>(k));
  }

  /// Behavior policy for offline logs: uniformly random slate with
  /// probability epsilon, oracle top-k otherwise.
  std::vector<int> logging_slate(const GroundTruthUser& u, int k, Rng& rng) const {
    if (rng.uniform() < cfg_.epsilon_logging) return random_slate(k, rng);
    return oracle_slate(u, k);
  }

  /// One logged episode for a freshly sampled user; the rng stream is
  /// derived from (seed, stream_tag) so users are independent.
  Trajectory generate_episode(int user_id, std::uint64_t stream_tag) const {
    auto rng = Rng::derive(seed_, 0x10C5ULL, stream_tag);
    EnvState state;
    state.user = sample_user(rng);
    Trajectory traj;
    traj.user_id = user_id;
    for (int t = 0; t < cfg_.horizon; ++t) {
      StepRecord rec;
      rec.slate = logging_slate(state.user, cfg_.k, rng);
      const auto res = env_step(state, rec.slate, rng);
      rec.click = res.click;
      rec.reward = res.reward;
      traj.steps.push_back(std::move(rec));
    }
    return traj;
  }

  /// Offline log generation; stream tags offset by `tag_base` keep train
  /// and test user populations disjoint.
  std::vector<Trajectory> generate_offline_logs(int n_users, int first_user_id,
                                                std::uint64_t tag_base) const {
    std::vector<Trajectory> out;
    out.reserve(static_cast<std::size_t>(n_users));
    for (int i = 0; i < n_users; ++i) {
      out.push_back(generate_episode(first_user_id + i,
                                     tag_base + static_cast<std::uint64_t>(i)));
    }
    return out;
  }

  /// Frozen item features exposed to the learners.
  ItemEmbeddings embeddings_view() const {
    return ItemEmbeddings(catalog_.n_items, catalog_.d_item, catalog_.embeddings,
                          /*trainable=*/false);
  }

 private:
  SimConfig cfg_;
  std::uint64_t seed_ = 0;
  ItemCatalog catalog_;
  std::vector<std::vector<double>> centroids_;
};

// A slate policy under online evaluation: consumes the running click
// history and emits the next slate.
using SlatePolicy = std::function<std::vector<int>(const EnvState&, Rng&)>;

struct OnlineEvalResult {
  MeanStd cumulative_reward;
  std::vector<double> per_user;
};

/// One-shot online protocol: per fresh test user, a warm-up trajectory is
/// generated with the logging policy and handed to `adapt` (context
/// inference); the adapted policy then runs `horizon` live steps on a fresh
/// session of the same user, summing true rewards.
inline OnlineEvalResult evaluate_online(
    const Environment& env,
    const std::function<SlatePolicy(const Trajectory&)>& adapt, int n_users,
    int horizon, int k, std::uint64_t eval_seed) {
  OnlineEvalResult res;
  res.per_user.reserve(static_cast<std::size_t>(n_users));
  for (int uix = 0; uix < n_users; ++uix) {
    auto rng = Rng::derive(eval_seed, 0xE7A1ULL, static_cast<std::uint64_t>(uix));
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
    SlatePolicy policy = adapt(warmup);

    // fresh session with the pre-drift user
    EnvState state;
    state.user = initial_user;
    double total = 0.0;
    for (int t = 0; t < horizon; ++t) {
      const auto slate = policy(state, rng);
      if (static_cast<int>(slate.size()) != k) {
        throw ValidationError("evaluate_online: policy returned slate of size " +
                              std::to_string(slate.size()) + ", expected " +
                              std::to_string(k));
      }
      total += env.env_step(state, slate, rng).reward;
    }
    res.per_user.push_back(total);
  }
  res.cumulative_reward = mean_std(res.per_user);
  return res;
}

}  // namespace m3rec
