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

#include <cstdlib>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "m3rec/common.hpp"
#include "m3rec/data.hpp"
#include "m3rec/simulator.hpp"

namespace m3rec {

struct ModelConfig {
  int d_c = 8;
  int d_z = 8;
  int window = 10;
  std::vector<int> hidden{32};
  std::string activation = "tanh";

  void validate() const {
    if (d_c < 1 || d_z < 1) throw ConfigError("model dims must be >= 1");
    if (window < 1) throw ConfigError("model.window must be >= 1");
    for (int h : hidden) {
      if (h < 1) throw ConfigError("model.hidden sizes must be >= 1");
    }
    activation_from_name(activation);
  }
};

struct TrainConfig {
  int pretrain_epochs = 20;
  int outer_iters = 50;
  int disc_epochs = 1;
  int user_pg_epochs = 1;
  int rec_pg_epochs = 1;
  int mi_epochs = 1;
  int batch_trajectories = 16;
  int disc_batch = 64;
  int disc_batches_per_epoch = 4;
  int rollout_users = 16;
  int rollout_horizon = 0;  // 0: use sim.horizon
  int mi_batch = 64;
  double lr = 1e-3;
  double beta = 0.1;
  double beta_c = 0.01;
  double lambda_mi = 0.1;
  double gamma = 0.95;
  std::string rollout_slates = "agent";  // agent | logged

  void validate() const {
    for (int v : {pretrain_epochs, outer_iters, disc_epochs, user_pg_epochs,
                  rec_pg_epochs, mi_epochs, rollout_horizon}) {
      if (v < 0) throw ConfigError("train counts must be >= 0");
    }
    for (int v : {batch_trajectories, disc_batch, disc_batches_per_epoch,
                  rollout_users, mi_batch}) {
      if (v < 1) throw ConfigError("train batch sizes must be >= 1");
    }
    if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0");
    if (gamma < 0.0 || gamma > 1.0) throw ConfigError("train.gamma must be in [0, 1]");
    for (double v : {beta, beta_c, lambda_mi}) {
      if (!std::isfinite(v) || v < 0.0) throw ConfigError("loss weights must be finite and >= 0");
    }
    if (rollout_slates != "agent" && rollout_slates != "logged") {
      throw ConfigError("train.rollout_slates must be 'agent' or 'logged'");
    }
  }
};

struct EvalConfig {
  int eval_users = 500;
  int eval_horizon = 0;  // 0: use sim.horizon
  std::vector<int> ks{3, 5};
  std::string rerank_pool = "slate";  // slate | catalog
  int rerank_seeds = 3;
  int probe_users = 50;

  void validate() const {
    if (eval_users < 1) throw ConfigError("eval.eval_users must be >= 1");
    if (eval_horizon < 0) throw ConfigError("eval.eval_horizon must be >= 0");
    if (ks.empty()) throw ConfigError("eval.ks must be nonempty");
    for (int k : ks) {
      if (k < 1) throw ConfigError("eval.ks entries must be >= 1");
    }
    if (rerank_pool != "slate" && rerank_pool != "catalog") {
      throw ConfigError("eval.rerank_pool must be 'slate' or 'catalog'");
    }
    if (rerank_seeds < 1) throw ConfigError("eval.rerank_seeds must be >= 1");
    if (probe_users < 1) throw ConfigError("eval.probe_users must be >= 1");
  }
};

struct AblationConfig {
  bool no_mi = false;
  bool no_context = false;
  bool model_free = false;
};

struct PathsConfig {
  std::string logs = "out/logs.jsonl";
  std::string checkpoint = "out/checkpoint.txt";
  std::string metrics = "out/metrics.jsonl";
  std::string report = "out/report.txt";
  std::string report_csv = "out/report.csv";
};

struct IngestSettings {
  std::string session = "session_id";
  std::string shown = "shown_items";
  std::string clicked = "clicked_item";
  std::string reward;
  std::string order;
  std::string delimiter = ",";
  std::string list_separator = "|";
  double train_frac = 0.8;

  ColumnMap to_column_map() const {
    ColumnMap m;
    m.session = session;
    m.shown = shown;
    m.clicked = clicked;
    m.reward = reward;
    m.order = order;
    if (delimiter.size() != 1 || list_separator.size() != 1) {
      throw ConfigError("ingest separators must be single characters");
    }
    m.delimiter = delimiter[0];
    m.list_separator = list_separator[0];
    return m;
  }

  void validate() const {
    to_column_map();
    if (!(train_frac > 0.0 && train_frac < 1.0)) {
      throw ConfigError("ingest.train_frac must be in (0, 1)");
    }
  }
};

struct ExperimentConfig {
  std::uint64_t seed = 42;
  SimConfig sim;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  AblationConfig ablation;
  PathsConfig paths;
  IngestSettings ingest;

  void validate() const {
    sim.validate();
    model.validate();
    train.validate();
    eval.validate();
    ingest.validate();
  }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j,
                                const std::vector<std::string>& known,
                                const std::string& scope) {
  if (!j.is_object()) {
    throw ConfigError("config section '" + scope + "' must be an object");
  }
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const auto& k : known) {
      if (k == key) {
        ok = true;
        break;
      }
    }
    if (!ok) {
      throw ConfigError("unknown config key '" +
                        (scope.empty() ? key : scope + "." + key) + "'");
    }
  }
}

template <class T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) {
    try {
      out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(std::string("config key '") + key + "' has the wrong type");
    }
  }
}

}  // namespace detail

/// Binds a parsed JSON document onto the defaults, rejecting unknown keys.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig cfg;
  if (const char* env = std::getenv("M3REC_SEED")) {
    cfg.seed = static_cast<std::uint64_t>(std::strtoull(env, nullptr, 10));
  }
  detail::reject_unknown_keys(
      j, {"seed", "sim", "model", "train", "eval", "ablation", "paths", "ingest"},
      "");
  detail::maybe(j, "seed", cfg.seed);
  if (j.contains("sim")) {
    const auto& s = j.at("sim");
    detail::reject_unknown_keys(
        s,
        {"n_items", "d_item", "k", "horizon", "n_clusters", "cluster_dispersion",
         "temperature", "drift_rate", "reward_noise_std", "epsilon_logging",
         "n_train_users", "n_test_users"},
        "sim");
    detail::maybe(s, "n_items", cfg.sim.n_items);
    detail::maybe(s, "d_item", cfg.sim.d_item);
    detail::maybe(s, "k", cfg.sim.k);
    detail::maybe(s, "horizon", cfg.sim.horizon);
    detail::maybe(s, "n_clusters", cfg.sim.n_clusters);
    detail::maybe(s, "cluster_dispersion", cfg.sim.cluster_dispersion);
    detail::maybe(s, "temperature", cfg.sim.temperature);
    detail::maybe(s, "drift_rate", cfg.sim.drift_rate);
    detail::maybe(s, "reward_noise_std", cfg.sim.reward_noise_std);
    detail::maybe(s, "epsilon_logging", cfg.sim.epsilon_logging);
    detail::maybe(s, "n_train_users", cfg.sim.n_train_users);
    detail::maybe(s, "n_test_users", cfg.sim.n_test_users);
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::reject_unknown_keys(m, {"d_c", "d_z", "window", "hidden", "activation"},
                                "model");
    detail::maybe(m, "d_c", cfg.model.d_c);
    detail::maybe(m, "d_z", cfg.model.d_z);
    detail::maybe(m, "window", cfg.model.window);
    detail::maybe(m, "hidden", cfg.model.hidden);
    detail::maybe(m, "activation", cfg.model.activation);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::reject_unknown_keys(
        t,
        {"pretrain_epochs", "outer_iters", "disc_epochs", "user_pg_epochs",
         "rec_pg_epochs", "mi_epochs", "batch_trajectories", "disc_batch",
         "disc_batches_per_epoch", "rollout_users", "rollout_horizon", "mi_batch",
         "lr", "beta", "beta_c", "lambda_mi", "gamma", "rollout_slates"},
        "train");
    detail::maybe(t, "pretrain_epochs", cfg.train.pretrain_epochs);
    detail::maybe(t, "outer_iters", cfg.train.outer_iters);
    detail::maybe(t, "disc_epochs", cfg.train.disc_epochs);
    detail::maybe(t, "user_pg_epochs", cfg.train.user_pg_epochs);
    detail::maybe(t, "rec_pg_epochs", cfg.train.rec_pg_epochs);
    detail::maybe(t, "mi_epochs", cfg.train.mi_epochs);
    detail::maybe(t, "batch_trajectories", cfg.train.batch_trajectories);
    detail::maybe(t, "disc_batch", cfg.train.disc_batch);
    detail::maybe(t, "disc_batches_per_epoch", cfg.train.disc_batches_per_epoch);
    detail::maybe(t, "rollout_users", cfg.train.rollout_users);
    detail::maybe(t, "rollout_horizon", cfg.train.rollout_horizon);
    detail::maybe(t, "mi_batch", cfg.train.mi_batch);
    detail::maybe(t, "lr", cfg.train.lr);
    detail::maybe(t, "beta", cfg.train.beta);
    detail::maybe(t, "beta_c", cfg.train.beta_c);
    detail::maybe(t, "lambda_mi", cfg.train.lambda_mi);
    detail::maybe(t, "gamma", cfg.train.gamma);
    detail::maybe(t, "rollout_slates", cfg.train.rollout_slates);
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    detail::reject_unknown_keys(
        e,
        {"eval_users", "eval_horizon", "ks", "rerank_pool", "rerank_seeds",
         "probe_users"},
        "eval");
    detail::maybe(e, "eval_users", cfg.eval.eval_users);
    detail::maybe(e, "eval_horizon", cfg.eval.eval_horizon);
    detail::maybe(e, "ks", cfg.eval.ks);
    detail::maybe(e, "rerank_pool", cfg.eval.rerank_pool);
    detail::maybe(e, "rerank_seeds", cfg.eval.rerank_seeds);
    detail::maybe(e, "probe_users", cfg.eval.probe_users);
  }
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    detail::reject_unknown_keys(a, {"no_mi", "no_context", "model_free"}, "ablation");
    detail::maybe(a, "no_mi", cfg.ablation.no_mi);
    detail::maybe(a, "no_context", cfg.ablation.no_context);
    detail::maybe(a, "model_free", cfg.ablation.model_free);
  }
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    detail::reject_unknown_keys(
        p, {"logs", "checkpoint", "metrics", "report", "report_csv"}, "paths");
    detail::maybe(p, "logs", cfg.paths.logs);
    detail::maybe(p, "checkpoint", cfg.paths.checkpoint);
    detail::maybe(p, "metrics", cfg.paths.metrics);
    detail::maybe(p, "report", cfg.paths.report);
    detail::maybe(p, "report_csv", cfg.paths.report_csv);
  }
  if (j.contains("ingest")) {
    const auto& g = j.at("ingest");
    detail::reject_unknown_keys(
        g,
        {"session", "shown", "clicked", "reward", "order", "delimiter",
         "list_separator", "train_frac"},
        "ingest");
    detail::maybe(g, "session", cfg.ingest.session);
    detail::maybe(g, "shown", cfg.ingest.shown);
    detail::maybe(g, "clicked", cfg.ingest.clicked);
    detail::maybe(g, "reward", cfg.ingest.reward);
    detail::maybe(g, "order", cfg.ingest.order);
    detail::maybe(g, "delimiter", cfg.ingest.delimiter);
    detail::maybe(g, "list_separator", cfg.ingest.list_separator);
    detail::maybe(g, "train_frac", cfg.ingest.train_frac);
  }
  cfg.validate();
  return cfg;
}

/// `--set key.path=value` overrides; values parse as JSON scalars/arrays,
/// falling back to a plain string.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("override '" + assignment + "' must look like key=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);
  nlohmann::json parsed;
  try {
    parsed = nlohmann::json::parse(value);
  } catch (const nlohmann::json::exception&) {
    parsed = value;  // plain string
  }
  nlohmann::json* cur = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot - start);
    if (key.empty()) throw ConfigError("override path '" + path + "' is malformed");
    if (dot == std::string::npos) {
      (*cur)[key] = parsed;
      break;
    }
    cur = &(*cur)[key];
    start = dot + 1;
  }
}

/// Loads a config file (JSON; // and /* */ comments allowed), applies
/// overrides, and binds. An empty path yields the documented defaults.
inline ExperimentConfig load_config(const std::string& path,
                                    const std::vector<std::string>& overrides = {}) {
  nlohmann::json j = nlohmann::json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path + "'");
    try {
      j = nlohmann::json::parse(in, nullptr, /*allow_exceptions=*/true,
                                /*ignore_comments=*/true);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
    }
  }
  for (const auto& o : overrides) apply_override(j, o);
  return config_from_json(j);
}

}  // namespace m3rec
