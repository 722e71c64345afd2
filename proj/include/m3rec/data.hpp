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
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "m3rec/autodiff.hpp"
#include "m3rec/common.hpp"
#include "m3rec/nn.hpp"

namespace m3rec {

/// Reserved id used to left-pad short histories.
inline constexpr int kPadItem = -1;

struct StepRecord {
  std::vector<int> slate;
  int click = kPadItem;
  double reward = 0.0;

  void validate(const std::string& where) const {
    if (slate.empty()) throw ValidationError(where + ": empty slate");
    std::set<int> seen(slate.begin(), slate.end());
    if (seen.size() != slate.size()) {
      throw ValidationError(where + ": duplicate slate ids");
    }
    if (seen.count(click) == 0) {
      throw ValidationError(where + ": click " + std::to_string(click) +
                            " not in slate");
    }
    if (!std::isfinite(reward)) throw ValidationError(where + ": non-finite reward");
  }
};

struct Trajectory {
  int user_id = 0;
  std::vector<StepRecord> steps;

  void validate() const {
    for (std::size_t t = 0; t < steps.size(); ++t) {
      steps[t].validate("user " + std::to_string(user_id) + " step " +
                        std::to_string(t));
    }
  }
};

// Fixed-length window of the most recent clicked items, left-padded.
struct State {
  std::vector<int> window;
  int t = 0;
};

inline State make_state(std::span<const int> history, int window_len,
                        int t = -1) {
  if (window_len < 1) throw ValidationError("make_state: window must be >= 1");
  State s;
  s.t = t >= 0 ? t : static_cast<int>(history.size());
  s.window.assign(static_cast<std::size_t>(window_len), kPadItem);
  const std::size_t n =
      std::min(history.size(), static_cast<std::size_t>(window_len));
  for (std::size_t i = 0; i < n; ++i) {
    s.window[window_len - n + i] = history[history.size() - n + i];
  }
  return s;
}

/// State before step t of a trajectory: the window over its click prefix.
inline State state_at(const Trajectory& traj, std::size_t t, int window_len) {
  if (t > traj.steps.size()) throw ValidationError("state_at: step out of range");
  std::vector<int> prefix;
  prefix.reserve(t);
  for (std::size_t i = 0; i < t; ++i) prefix.push_back(traj.steps[i].click);
  return make_state(prefix, window_len, static_cast<int>(t));
}

// Item embedding table. Rows come from the simulator catalog (frozen item
// features) or are randomly initialized and trained when logs were ingested
// without embeddings.
class ItemEmbeddings {
 public:
  ItemEmbeddings() = default;

  ItemEmbeddings(int n_items, int dim, std::vector<double> flat, bool trainable)
      : n_items_(n_items), dim_(dim), flat_(std::move(flat)), trainable_(trainable) {
    if (flat_.size() != static_cast<std::size_t>(n_items) * dim) {
      throw ValidationError("ItemEmbeddings: size mismatch");
    }
    opt_.m.assign(flat_.size(), 0.0);
    opt_.v.assign(flat_.size(), 0.0);
  }

  static ItemEmbeddings random(int n_items, int dim, Rng& rng) {
    std::vector<double> flat(static_cast<std::size_t>(n_items) * dim);
    const double std = 1.0 / std::sqrt(static_cast<double>(dim));
    for (auto& v : flat) v = std * rng.normal();
    return ItemEmbeddings(n_items, dim, std::move(flat), true);
  }

  int n_items() const { return n_items_; }
  int dim() const { return dim_; }
  bool trainable() const { return trainable_; }
  std::span<const double> flat() const { return flat_; }
  void set_flat(std::span<const double> p) {
    if (p.size() != flat_.size()) throw ValidationError("set_flat: size mismatch");
    std::copy(p.begin(), p.end(), flat_.begin());
  }

  std::span<const double> row(int item) const {
    if (item < 0 || item >= n_items_) {
      throw ValidationError("embedding row: bad item id " + std::to_string(item));
    }
    return {flat_.data() + static_cast<std::size_t>(item) * dim_,
            static_cast<std::size_t>(dim_)};
  }

  /// Concatenated window embeddings; PAD slots featurize to zero.
  std::vector<double> featurize(const State& s) const {
    std::vector<double> f(s.window.size() * static_cast<std::size_t>(dim_), 0.0);
    for (std::size_t i = 0; i < s.window.size(); ++i) {
      if (s.window[i] == kPadItem) continue;
      const auto r = row(s.window[i]);
      std::copy(r.begin(), r.end(), f.begin() + i * dim_);
    }
    return f;
  }

  std::vector<double> slate_mean(std::span<const int> slate) const {
    std::vector<double> m(static_cast<std::size_t>(dim_), 0.0);
    for (int id : slate) {
      const auto r = row(id);
      for (int i = 0; i < dim_; ++i) m[i] += r[i];
    }
    for (auto& v : m) v /= static_cast<double>(slate.size());
    return m;
  }

  void optimizer_step(std::span<const double> grad, double lr) {
    if (grad.size() != flat_.size()) {
      throw ValidationError("embeddings optimizer_step: size mismatch");
    }
    for (double g : grad) {
      if (!std::isfinite(g)) {
        throw NumericalError("embeddings optimizer_step: non-finite gradient");
      }
    }
    opt_.step += 1;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(opt_.step));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(opt_.step));
    for (std::size_t i = 0; i < flat_.size(); ++i) {
      opt_.m[i] = opt_.beta1 * opt_.m[i] + (1.0 - opt_.beta1) * grad[i];
      opt_.v[i] = opt_.beta2 * opt_.v[i] + (1.0 - opt_.beta2) * grad[i] * grad[i];
      flat_[i] -= lr * (opt_.m[i] / bc1) / (std::sqrt(opt_.v[i] / bc2) + opt_.eps);
    }
  }

 private:
  int n_items_ = 0;
  int dim_ = 0;
  std::vector<double> flat_;
  bool trainable_ = false;
  AdamState opt_;
};

// Tape-side view of the embedding table: leaves when trainable, constants
// otherwise, so featurizations share one code path.
class AttachedEmbeddings {
 public:
  AttachedEmbeddings(ad::Tape& tape, const ItemEmbeddings& emb)
      : AttachedEmbeddings(tape, emb, emb.trainable()) {}

  /// attach_leaves = false forces a constant view even for a trainable
  /// table (losses whose gradients must not reach the embeddings).
  AttachedEmbeddings(ad::Tape& tape, const ItemEmbeddings& emb, bool attach_leaves)
      : emb_(&emb), tape_(&tape) {
    if (attach_leaves && emb.trainable()) {
      leaves_.reserve(emb.flat().size());
      for (double v : emb.flat()) leaves_.push_back(tape.leaf(v));
    }
  }

  const ItemEmbeddings& table() const { return *emb_; }

  std::vector<ad::Var> row(int item) const {
    const int d = emb_->dim();
    std::vector<ad::Var> out;
    out.reserve(d);
    if (leaves_.empty()) {
      for (double v : emb_->row(item)) out.push_back(ad::constant(v));
    } else {
      for (int i = 0; i < d; ++i) {
        out.push_back(leaves_[static_cast<std::size_t>(item) * d + i]);
      }
    }
    return out;
  }

  std::vector<ad::Var> featurize(const State& s) const {
    const int d = emb_->dim();
    std::vector<ad::Var> f(s.window.size() * static_cast<std::size_t>(d),
                           ad::constant(0.0));
    for (std::size_t i = 0; i < s.window.size(); ++i) {
      if (s.window[i] == kPadItem) continue;
      const auto r = row(s.window[i]);
      for (int j = 0; j < d; ++j) f[i * d + j] = r[j];
    }
    return f;
  }

  std::vector<ad::Var> slate_mean(std::span<const int> slate) const {
    const int d = emb_->dim();
    std::vector<ad::Var> m(static_cast<std::size_t>(d), ad::constant(0.0));
    const double w = 1.0 / static_cast<double>(slate.size());
    for (int i = 0; i < d; ++i) {
      std::vector<ad::Var> terms;
      terms.reserve(slate.size());
      for (int id : slate) terms.push_back(row(id)[static_cast<std::size_t>(i)]);
      m[i] = affine(ad::sum(terms), w, 0.0);
    }
    return m;
  }

  std::vector<double> grads() const {
    std::vector<double> g(emb_->flat().size(), 0.0);
    for (std::size_t i = 0; i < leaves_.size(); ++i) {
      g[i] = tape_->adjoint(leaves_[i]);
    }
    return g;
  }

 private:
  const ItemEmbeddings* emb_;
  ad::Tape* tape_;
  std::vector<ad::Var> leaves_;
};

// ---- log persistence ----

struct LogFile {
  int n_items = 0;
  int k = 0;
  std::vector<Trajectory> trajectories;
};

inline void write_logs(const LogFile& logs, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  nlohmann::json header{
      {"format", "m3rec-log"}, {"version", 1}, {"n_items", logs.n_items}, {"k", logs.k}};
  out << header.dump() << "\n";
  for (const auto& traj : logs.trajectories) {
    traj.validate();
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& s : traj.steps) {
      steps.push_back({{"slate", s.slate}, {"click", s.click}, {"reward", s.reward}});
    }
    nlohmann::json line{{"user_id", traj.user_id}, {"steps", steps}};
    out << line.dump() << "\n";
  }
  if (!out) throw IoError("write to '" + path + "' failed");
}

inline LogFile read_logs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  LogFile logs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IoError("malformed log line " + std::to_string(line_no) + " in '" +
                    path + "': " + e.what());
    }
    try {
      if (line_no == 1) {
        if (j.value("format", "") != "m3rec-log") {
          throw IoError("not an m3rec-log file");
        }
        logs.n_items = j.at("n_items").get<int>();
        logs.k = j.at("k").get<int>();
        continue;
      }
      Trajectory traj;
      traj.user_id = j.at("user_id").get<int>();
      for (const auto& js : j.at("steps")) {
        StepRecord s;
        s.slate = js.at("slate").get<std::vector<int>>();
        s.click = js.at("click").get<int>();
        s.reward = js.at("reward").get<double>();
        traj.steps.push_back(std::move(s));
      }
      traj.validate();
      logs.trajectories.push_back(std::move(traj));
    } catch (const nlohmann::json::exception& e) {
      throw IoError("malformed log line " + std::to_string(line_no) + " in '" +
                    path + "': " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError("log line " + std::to_string(line_no) + " in '" +
                            path + "': " + e.what());
    }
  }
  if (line_no == 0) throw IoError("empty log file '" + path + "'");
  return logs;
}

// ---- external session-log ingestion ----

struct ColumnMap {
  std::string session = "session_id";
  std::string shown = "shown_items";
  std::string clicked = "clicked_item";
  std::string reward;              // optional; empty means "reward 1.0"
  std::string order;               // optional explicit ordering column
  char delimiter = ',';
  char list_separator = '|';
};

struct IngestResult {
  LogFile logs;
  std::size_t skipped_rows = 0;
  std::size_t dropped_steps = 0;
  /// original item token -> dense id, in first-appearance order
  std::map<std::string, int> item_ids;
};

namespace detail {
inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(s);
  while (std::getline(ss, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.push_back("");
  return out;
}
}  // namespace detail

/// Parses a delimited session log into trajectories. Unmappable rows are
/// skipped and counted; a click missing from its shown list drops that step;
/// zero usable sessions is a hard error.
inline IngestResult ingest_session_log(const std::string& path,
                                       const ColumnMap& cols) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty session file '" + path + "'");
  const auto header = detail::split(line, cols.delimiter);
  auto col_index = [&](const std::string& name) -> int {
    if (name.empty()) return -1;
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return static_cast<int>(i);
    }
    return -1;
  };
  const int c_sess = col_index(cols.session);
  const int c_shown = col_index(cols.shown);
  const int c_click = col_index(cols.clicked);
  const int c_reward = col_index(cols.reward);
  const int c_order = col_index(cols.order);
  if (c_sess < 0 || c_shown < 0 || c_click < 0) {
    throw ConfigError("session file is missing a mapped column (need '" +
                      cols.session + "', '" + cols.shown + "', '" +
                      cols.clicked + "')");
  }

  IngestResult res;
  struct Row {
    double order;
    StepRecord step;
  };
  // session key -> rows, in first-appearance order
  std::vector<std::pair<std::string, std::vector<Row>>> sessions;
  std::map<std::string, std::size_t> session_index;

  auto item_id = [&](const std::string& token) {
    auto it = res.item_ids.find(token);
    if (it != res.item_ids.end()) return it->second;
    const int id = static_cast<int>(res.item_ids.size());
    res.item_ids.emplace(token, id);
    return id;
  };

  std::size_t row_counter = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ++row_counter;
    const auto fields = detail::split(line, cols.delimiter);
    const int needed = std::max({c_sess, c_shown, c_click, c_reward, c_order});
    if (static_cast<int>(fields.size()) <= needed) {
      ++res.skipped_rows;
      continue;
    }
    const auto shown_tokens = detail::split(fields[c_shown], cols.list_separator);
    if (shown_tokens.empty() || fields[c_click].empty()) {
      ++res.skipped_rows;
      continue;
    }
    StepRecord step;
    bool bad = false;
    std::set<int> seen;
    for (const auto& tok : shown_tokens) {
      if (tok.empty()) {
        bad = true;
        break;
      }
      const int id = item_id(tok);
      if (!seen.insert(id).second) continue;  // fold duplicates in shown list
      step.slate.push_back(id);
    }
    if (bad) {
      ++res.skipped_rows;
      continue;
    }
    const auto click_it = res.item_ids.find(fields[c_click]);
    if (click_it == res.item_ids.end() || seen.count(click_it->second) == 0) {
      ++res.dropped_steps;
      continue;
    }
    step.click = click_it->second;
    step.reward = 1.0;
    if (c_reward >= 0 && !fields[c_reward].empty()) {
      try {
        step.reward = std::stod(fields[c_reward]);
      } catch (...) {
        ++res.skipped_rows;
        continue;
      }
    }
    double order = static_cast<double>(row_counter);
    if (c_order >= 0 && !fields[c_order].empty()) {
      try {
        order = std::stod(fields[c_order]);
      } catch (...) {
        ++res.skipped_rows;
        continue;
      }
    }
    const auto& key = fields[c_sess];
    auto it = session_index.find(key);
    if (it == session_index.end()) {
      session_index.emplace(key, sessions.size());
      sessions.push_back({key, {}});
      it = session_index.find(key);
    }
    sessions[it->second].second.push_back({order, std::move(step)});
  }

  int uid = 0;
  int max_k = 0;
  for (auto& [key, rows] : sessions) {
    if (rows.empty()) continue;
    std::stable_sort(rows.begin(), rows.end(),
                     [](const Row& a, const Row& b) { return a.order < b.order; });
    Trajectory traj;
    traj.user_id = uid++;
    for (auto& r : rows) {
      max_k = std::max(max_k, static_cast<int>(r.step.slate.size()));
      traj.steps.push_back(std::move(r.step));
    }
    traj.validate();
    res.logs.trajectories.push_back(std::move(traj));
  }
  if (res.logs.trajectories.empty()) {
    throw ValidationError("ingest: zero usable sessions in '" + path + "'");
  }
  res.logs.n_items = static_cast<int>(res.item_ids.size());
  res.logs.k = max_k;
  return res;
}

// ---- user-level splits ----

struct UserSplit {
  std::vector<Trajectory> meta_train;
  std::vector<Trajectory> meta_test;
};

/// Splits by user id, never by step; deterministic under seed.
inline UserSplit split_users(const std::vector<Trajectory>& trajectories,
                             double train_frac, std::uint64_t seed) {
  if (!(train_frac > 0.0 && train_frac < 1.0)) {
    throw ValidationError("split_users: train_frac must be in (0, 1)");
  }
  std::set<int> users;
  for (const auto& t : trajectories) users.insert(t.user_id);
  std::vector<int> ids(users.begin(), users.end());
  auto rng = Rng::derive(seed, 0x5917ULL);
  rng.shuffle(ids);
  const std::size_t n_train =
      static_cast<std::size_t>(std::llround(train_frac * static_cast<double>(ids.size())));
  std::set<int> train_ids(ids.begin(), ids.begin() + std::min(n_train, ids.size()));
  UserSplit split;
  for (const auto& t : trajectories) {
    (train_ids.count(t.user_id) ? split.meta_train : split.meta_test).push_back(t);
  }
  if (split.meta_train.empty() || split.meta_test.empty()) {
    throw ValidationError("split_users: a split side is empty");
  }
  return split;
}

/// Groups trajectory indices by user id, ordered by user id.
inline std::map<int, std::vector<std::size_t>> group_by_user(
    const std::vector<Trajectory>& trajectories) {
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < trajectories.size(); ++i) {
    groups[trajectories[i].user_id].push_back(i);
  }
  return groups;
}

}  // namespace m3rec
