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

#include <vector>

#include "m3rec/context.hpp"
#include "m3rec/data.hpp"

namespace m3rec {

// One interaction step generated while the recommendation agent and the
// learned user policy interact. Sampling noise is recorded so that losses
// can be rebuilt on a tape as deterministic functions of the parameters.
struct RolloutStep {
  State state;               // before the click
  std::vector<int> slate;
  int click = 0;
  double pi_val = 1.0;       // user policy prob of the click at generation
  double log_d = 0.0;        // frozen-discriminator outputs at generation
  double log_1m_d = 0.0;
  double r_omega = 0.0;      // recovered reward at generation
  double env_reward = 0.0;   // true reward (offline-data mode only)
  std::vector<double> z_u_noise;
  std::vector<double> z_rec_noise;
};

struct Rollout {
  int user_id = 0;
  std::size_t context_traj_index = 0;  // into the offline trajectory pool
  std::vector<double> c_noise;
  UserContext ctx;                     // as sampled at generation
  std::vector<RolloutStep> steps;
};

/// Discounted return-to-go per step for one reward sequence.
inline std::vector<double> returns_to_go(std::span<const double> rewards,
                                         double gamma) {
  std::vector<double> g(rewards.size(), 0.0);
  double acc = 0.0;
  for (std::size_t t = rewards.size(); t-- > 0;) {
    acc = rewards[t] + gamma * acc;
    g[t] = acc;
  }
  return g;
}

}  // namespace m3rec
