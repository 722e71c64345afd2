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

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "m3rec/checkpoint.hpp"
#include "m3rec/config.hpp"
#include "m3rec/data.hpp"
#include "m3rec/evaluation.hpp"
#include "m3rec/simulator.hpp"
#include "m3rec/training.hpp"

namespace {

using namespace m3rec;

void ensure_parent_dir(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
}

void write_text(const std::string& path, const std::string& text) {
  ensure_parent_dir(path);
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw IoError("write to '" + path + "' failed");
}

/// Simulated offline data: meta-train users first, then the held-out test
/// population on a disjoint rng stream.
void cmd_simulate(const ExperimentConfig& cfg, const std::string& out_path) {
  Environment env(cfg.sim, cfg.seed);
  LogFile logs;
  logs.n_items = cfg.sim.n_items;
  logs.k = cfg.sim.k;
  logs.trajectories = env.generate_offline_logs(cfg.sim.n_train_users, 0, 0);
  const auto test = env.generate_offline_logs(
      cfg.sim.n_test_users, cfg.sim.n_train_users, 1ULL << 32);
  logs.trajectories.insert(logs.trajectories.end(), test.begin(), test.end());
  ensure_parent_dir(out_path);
  write_logs(logs, out_path);
  std::printf("wrote %zu trajectories (%d train + %d test users) to %s\n",
              logs.trajectories.size(), cfg.sim.n_train_users,
              cfg.sim.n_test_users, out_path.c_str());
}

LogFile load_logs_or_die(const std::string& path) {
  if (!std::filesystem::exists(path)) {
    throw IoError("offline logs not found at '" + path +
                  "' (run `m3rec simulate` or `m3rec ingest` first)");
  }
  return read_logs(path);
}

ItemEmbeddings make_embeddings(const ExperimentConfig& cfg, const LogFile& logs,
                               bool ingested) {
  if (ingested) {
    auto rng = Rng::derive(cfg.seed, 0xE3B);
    return ItemEmbeddings::random(logs.n_items, cfg.sim.d_item, rng);
  }
  if (logs.n_items != cfg.sim.n_items) {
    throw ConfigError("log file has n_items=" + std::to_string(logs.n_items) +
                      " but sim.n_items=" + std::to_string(cfg.sim.n_items) +
                      "; pass --data-ingested for external logs");
  }
  return Environment(cfg.sim, cfg.seed).embeddings_view();
}

std::vector<Trajectory> train_pool_of(const LogFile& logs,
                                      const ExperimentConfig& cfg) {
  std::vector<Trajectory> pool;
  for (const auto& t : logs.trajectories) {
    if (t.user_id < cfg.sim.n_train_users) pool.push_back(t);
  }
  if (pool.empty()) {
    throw ValidationError("no meta-train trajectories (user_id < " +
                          std::to_string(cfg.sim.n_train_users) + ") in the logs");
  }
  return pool;
}

std::vector<Trajectory> test_pool_of(const LogFile& logs,
                                     const ExperimentConfig& cfg) {
  std::vector<Trajectory> pool;
  for (const auto& t : logs.trajectories) {
    if (t.user_id >= cfg.sim.n_train_users) pool.push_back(t);
  }
  if (pool.empty()) {
    throw ValidationError("no meta-test trajectories (user_id >= " +
                          std::to_string(cfg.sim.n_train_users) + ") in the logs");
  }
  return pool;
}

void cmd_train(const ExperimentConfig& cfg, bool ingested) {
  const auto logs = load_logs_or_die(cfg.paths.logs);
  auto bundle = ModelBundle::create(cfg, make_embeddings(cfg, logs, ingested));
  const auto train_pool = train_pool_of(logs, cfg);
  ensure_parent_dir(cfg.paths.metrics);
  const auto result = meta_train(cfg, train_pool, bundle, cfg.paths.metrics);
  ensure_parent_dir(cfg.paths.checkpoint);
  bundle.to_checkpoint().save(cfg.paths.checkpoint);
  std::printf("trained %d outer iterations (%zu pretrain epochs) on %zu "
              "trajectories; checkpoint at %s, metrics at %s\n",
              cfg.train.outer_iters, result.pretrain.epochs_run,
              train_pool.size(), cfg.paths.checkpoint.c_str(),
              cfg.paths.metrics.c_str());
}

ModelBundle load_bundle(const ExperimentConfig& cfg, const LogFile& logs,
                        bool ingested) {
  if (!std::filesystem::exists(cfg.paths.checkpoint)) {
    throw IoError("checkpoint not found at '" + cfg.paths.checkpoint +
                  "' (run `m3rec train` first)");
  }
  auto bundle = ModelBundle::create(cfg, make_embeddings(cfg, logs, ingested));
  bundle.load_checkpoint(Checkpoint::load(cfg.paths.checkpoint));
  return bundle;
}

void cmd_eval_online(const ExperimentConfig& cfg) {
  const auto logs = load_logs_or_die(cfg.paths.logs);
  const auto bundle = load_bundle(cfg, logs, false);
  Environment env(cfg.sim, cfg.seed);
  const int horizon =
      cfg.eval.eval_horizon > 0 ? cfg.eval.eval_horizon : cfg.sim.horizon;
  const auto reports = evaluate_online_at_ks(bundle, env, cfg.eval.eval_users,
                                             horizon, cfg.eval.ks,
                                             mix64(cfg.seed ^ 0x0E7A1));
  std::string text = "online evaluation: cumulative reward over " +
                     std::to_string(cfg.eval.eval_users) + " users, horizon " +
                     std::to_string(horizon) + "\n";
  for (const auto& r : reports) {
    text += "k=" + std::to_string(r.k) + " mean " + format_double(r.reward.mean) +
            " std " + format_double(r.reward.std) + "\n";
  }
  write_text(cfg.paths.report, text);
  std::fputs(text.c_str(), stdout);
  std::printf("report written to %s\n", cfg.paths.report.c_str());
}

void cmd_eval_offline(const ExperimentConfig& cfg, bool ingested) {
  const auto logs = load_logs_or_die(cfg.paths.logs);
  const auto bundle = load_bundle(cfg, logs, ingested);
  const auto test_pool = test_pool_of(logs, cfg);
  RerankConfig rc;
  rc.catalog_pool = cfg.eval.rerank_pool == "catalog";
  rc.seeds = cfg.eval.rerank_seeds;
  rc.base_seed = mix64(cfg.seed ^ 0x0FF1E);
  const auto outcome = offline_rerank_eval(bundle, test_pool, rc);
  write_text(cfg.paths.report, outcome.table.to_report());
  write_text(cfg.paths.report_csv, outcome.table.to_csv());
  std::fputs(outcome.table.to_report().c_str(), stdout);
  if (outcome.skipped_users > 0) {
    std::fprintf(stderr, "warning: skipped %zu users with no held-out steps\n",
                 outcome.skipped_users);
  }
  std::printf("report written to %s and %s\n", cfg.paths.report.c_str(),
              cfg.paths.report_csv.c_str());
}

void cmd_probe(const ExperimentConfig& cfg) {
  const auto logs = load_logs_or_die(cfg.paths.logs);
  const auto bundle = load_bundle(cfg, logs, false);
  Environment env(cfg.sim, cfg.seed);
  const int horizon =
      cfg.eval.eval_horizon > 0 ? cfg.eval.eval_horizon : cfg.sim.horizon;
  const auto provider = learned_choice_provider(bundle);
  const auto agent = model_error_probe(bundle, env, provider, ProbePolicy::kAgent,
                                       cfg.eval.probe_users, horizon,
                                       mix64(cfg.seed ^ 0x9806E));
  const auto oracle = model_error_probe(bundle, env, provider, ProbePolicy::kOracle,
                                        cfg.eval.probe_users, horizon,
                                        mix64(cfg.seed ^ 0x9806E));
  std::string text =
      "model-error probe: mean KL(true||learned) over visited (state, slate)\n";
  text += "policy=agent  avg_kl " + format_double(agent.avg_kl) + " pairs " +
          std::to_string(agent.n_pairs) + "\n";
  text += "policy=oracle avg_kl " + format_double(oracle.avg_kl) + " pairs " +
          std::to_string(oracle.n_pairs) + "\n";
  write_text(cfg.paths.report, text);
  std::fputs(text.c_str(), stdout);
  std::printf("report written to %s\n", cfg.paths.report.c_str());
}

void cmd_ingest(const ExperimentConfig& cfg, const std::string& input,
                const std::string& out_path) {
  const auto res = ingest_session_log(input, cfg.ingest.to_column_map());
  // renumber users so meta-train ids come first: the train/eval commands
  // split on user_id < n_train_users
  const auto split =
      split_users(res.logs.trajectories, cfg.ingest.train_frac, cfg.seed);
  LogFile out;
  out.n_items = res.logs.n_items;
  out.k = res.logs.k;
  std::map<int, int> renumber;
  std::set<int> train_ids;
  for (const auto& t : split.meta_train) {
    renumber.emplace(t.user_id, static_cast<int>(renumber.size()));
    train_ids.insert(t.user_id);
  }
  for (const auto& t : split.meta_test) {
    renumber.emplace(t.user_id, static_cast<int>(renumber.size()));
  }
  for (const auto* side : {&split.meta_train, &split.meta_test}) {
    for (const auto& t : *side) {
      Trajectory copy = t;
      copy.user_id = renumber.at(t.user_id);
      out.trajectories.push_back(std::move(copy));
    }
  }
  ensure_parent_dir(out_path);
  write_logs(out, out_path);
  std::printf("ingested %zu sessions (%d items, max slate %d) to %s\n",
              out.trajectories.size(), out.n_items, out.k, out_path.c_str());
  if (res.skipped_rows > 0 || res.dropped_steps > 0) {
    std::fprintf(stderr, "warning: skipped %zu rows, dropped %zu steps\n",
                 res.skipped_rows, res.dropped_steps);
  }
  std::printf("meta-train users: %zu; train with `--set sim.n_train_users=%zu "
              "--data-ingested` on this file\n",
              train_ids.size(), train_ids.size());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"m3rec: meta-level model-based RL recommendation laboratory"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("-c,--config", config_path, "config file (JSON, // comments ok)");
  app.add_option("--set", overrides,
                 "override a config key, e.g. --set train.lr=0.01 (repeatable)");

  auto* simulate = app.add_subcommand(
      "simulate", "generate offline interaction logs from the simulator");
  std::string sim_out;
  simulate->add_option("-o,--out", sim_out, "output log path (default paths.logs)");

  auto* train = app.add_subcommand("train", "meta-train on offline logs");
  std::vector<std::string> ablate;
  bool train_ingested = false;
  train->add_option("--ablate", ablate,
                    "no_mi | no_context | model_free (repeatable)");
  train->add_flag("--data-ingested", train_ingested,
                  "logs came from `ingest` (random trainable embeddings)");

  auto* eval_online = app.add_subcommand(
      "eval-online", "one-shot adaptation + live rollout reward in the simulator");
  auto* eval_offline = app.add_subcommand(
      "eval-offline", "offline reranking metrics on held-out users");
  bool eval_ingested = false;
  eval_offline->add_flag("--data-ingested", eval_ingested,
                         "logs came from `ingest`");
  auto* probe = app.add_subcommand(
      "probe", "empirical model-error (KL between true and learned user choices)");

  auto* ingest = app.add_subcommand(
      "ingest", "convert an external delimited session log into m3rec logs");
  std::string ingest_input, ingest_out;
  ingest->add_option("-i,--input", ingest_input, "delimited session file")
      ->required();
  ingest->add_option("-o,--out", ingest_out, "output log path (default paths.logs)");

  CLI11_PARSE(app, argc, argv);

  try {
    auto cfg = load_config(config_path, overrides);
    for (const auto& a : ablate) {
      if (a == "no_mi") {
        cfg.ablation.no_mi = true;
      } else if (a == "no_context") {
        cfg.ablation.no_context = true;
      } else if (a == "model_free") {
        cfg.ablation.model_free = true;
      } else {
        throw ConfigError("unknown ablation '" + a + "'");
      }
    }
    if (simulate->parsed()) {
      cmd_simulate(cfg, sim_out.empty() ? cfg.paths.logs : sim_out);
    } else if (train->parsed()) {
      cmd_train(cfg, train_ingested);
    } else if (eval_online->parsed()) {
      cmd_eval_online(cfg);
    } else if (eval_offline->parsed()) {
      cmd_eval_offline(cfg, eval_ingested);
    } else if (probe->parsed()) {
      cmd_probe(cfg);
    } else if (ingest->parsed()) {
      cmd_ingest(cfg, ingest_input,
                 ingest_out.empty() ? cfg.paths.logs : ingest_out);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
