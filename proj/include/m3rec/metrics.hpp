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

#include <cmath>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "m3rec/common.hpp"

namespace m3rec {

/// Binary-relevance DCG truncated at k: sum of 1/log2(rank+1) over relevant
/// ranked items.
inline double dcg_at_k(std::span<const int> ranked, const std::set<int>& relevant,
                       int k) {
  double dcg = 0.0;
  const std::size_t lim = std::min(ranked.size(), static_cast<std::size_t>(k));
  for (std::size_t j = 0; j < lim; ++j) {
    if (relevant.count(ranked[j]) > 0) {
      dcg += 1.0 / std::log2(static_cast<double>(j) + 2.0);
    }
  }
  return dcg;
}

inline double ndcg_at_k(std::span<const int> ranked, const std::set<int>& relevant,
                        int k) {
  if (ranked.empty() || k < 1) throw ValidationError("ndcg_at_k: bad input");
  if (relevant.empty()) {
    throw ValidationError("ndcg_at_k: empty relevant set (metric undefined)");
  }
  const double dcg = dcg_at_k(ranked, relevant, k);
  double ideal = 0.0;
  const std::size_t ideal_hits =
      std::min(relevant.size(), static_cast<std::size_t>(k));
  for (std::size_t j = 0; j < ideal_hits; ++j) {
    ideal += 1.0 / std::log2(static_cast<double>(j) + 2.0);
  }
  return dcg / ideal;
}

inline double precision_at_k(std::span<const int> ranked,
                             const std::set<int>& relevant, int k) {
  if (ranked.empty() || k < 1) throw ValidationError("precision_at_k: bad input");
  if (relevant.empty()) {
    throw ValidationError("precision_at_k: empty relevant set (metric undefined)");
  }
  std::size_t hits = 0;
  const std::size_t lim = std::min(ranked.size(), static_cast<std::size_t>(k));
  for (std::size_t j = 0; j < lim; ++j) {
    if (relevant.count(ranked[j]) > 0) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(k);
}

inline double recall_at_k(std::span<const int> ranked,
                          const std::set<int>& relevant, int k) {
  if (ranked.empty() || k < 1) throw ValidationError("recall_at_k: bad input");
  if (relevant.empty()) {
    throw ValidationError("recall_at_k: empty relevant set (metric undefined)");
  }
  std::size_t hits = 0;
  const std::size_t lim = std::min(ranked.size(), static_cast<std::size_t>(k));
  for (std::size_t j = 0; j < lim; ++j) {
    if (relevant.count(ranked[j]) > 0) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(relevant.size());
}

/// The reported metric rows, in report order.
inline const std::vector<std::string>& metric_row_names() {
  static const std::vector<std::string> names{
      "P@1", "P@5", "P@10", "NDCG@5", "NDCG@10", "Recall@5", "Recall@10"};
  return names;
}

struct MetricTable {
  // row name -> mean/std aggregate
  std::map<std::string, MeanStd> rows;

  std::string to_report() const {
    std::string out = "metric mean std\n";
    for (const auto& name : metric_row_names()) {
      const auto it = rows.find(name);
      if (it == rows.end()) continue;
      out += name + " " + format_double(it->second.mean) + " " +
             format_double(it->second.std) + "\n";
    }
    return out;
  }

  std::string to_csv() const {
    std::string out = "metric,mean,std\n";
    for (const auto& name : metric_row_names()) {
      const auto it = rows.find(name);
      if (it == rows.end()) continue;
      out += name + "," + format_double(it->second.mean) + "," +
             format_double(it->second.std) + "\n";
    }
    return out;
  }
};

/// Applies one metric row name to (ranked, relevant).
inline double metric_value(const std::string& name, std::span<const int> ranked,
                           const std::set<int>& relevant) {
  const auto at = name.find('@');
  const int k = std::stoi(name.substr(at + 1));
  const auto kind = name.substr(0, at);
  if (kind == "P") return precision_at_k(ranked, relevant, k);
  if (kind == "NDCG") return ndcg_at_k(ranked, relevant, k);
  if (kind == "Recall") return recall_at_k(ranked, relevant, k);
  throw ValidationError("unknown metric row '" + name + "'");
}

}  // namespace m3rec
