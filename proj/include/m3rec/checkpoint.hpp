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

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "m3rec/data.hpp"
#include "m3rec/nn.hpp"

namespace m3rec {

// Named parameter vectors with a shape header. Values are serialized as C
// hexfloats, which round-trip doubles bit-exactly through text.
class Checkpoint {
 public:
  struct Entry {
    std::string kind;        // "mlp" | "embeddings"
    std::string activation;  // mlp only
    std::vector<int> shape;  // mlp: layer sizes; embeddings: {n_items, d_item, trainable}
    std::vector<double> params;
  };

  void add_mlp(const std::string& name, const Mlp& net) {
    Entry e;
    e.kind = "mlp";
    e.activation = activation_name(net.activation());
    e.shape = net.layer_sizes();
    e.params.assign(net.params().begin(), net.params().end());
    entries_[name] = std::move(e);
  }

  void add_embeddings(const std::string& name, const ItemEmbeddings& emb) {
    Entry e;
    e.kind = "embeddings";
    e.shape = {emb.n_items(), emb.dim(), emb.trainable() ? 1 : 0};
    e.params.assign(emb.flat().begin(), emb.flat().end());
    entries_[name] = std::move(e);
  }

  void apply_mlp(const std::string& name, Mlp& net) const {
    const auto& e = entry(name, "mlp");
    if (e.shape != net.layer_sizes() ||
        e.activation != activation_name(net.activation())) {
      throw ValidationError("checkpoint module '" + name + "' shape mismatch");
    }
    net.set_params(e.params);
  }

  void apply_embeddings(const std::string& name, ItemEmbeddings& emb) const {
    const auto& e = entry(name, "embeddings");
    if (e.shape.size() != 3 || e.shape[0] != emb.n_items() ||
        e.shape[1] != emb.dim()) {
      throw ValidationError("checkpoint module '" + name + "' shape mismatch");
    }
    emb.set_flat(e.params);
  }

  bool has(const std::string& name) const { return entries_.count(name) > 0; }

  const std::map<std::string, Entry>& entries() const { return entries_; }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << "m3rec-checkpoint 1\n";
    for (const auto& [name, e] : entries_) {
      out << "module " << name << " " << e.kind;
      if (e.kind == "mlp") out << " " << e.activation;
      out << " " << e.shape.size();
      for (int s : e.shape) out << " " << s;
      out << " " << e.params.size() << "\n";
      char buf[40];
      for (std::size_t i = 0; i < e.params.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%a", e.params[i]);
        out << buf << (i + 1 == e.params.size() ? "" : " ");
      }
      out << "\n";
    }
    if (!out) throw IoError("write to '" + path + "' failed");
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open checkpoint '" + path + "'");
    std::string line;
    if (!std::getline(in, line) || line != "m3rec-checkpoint 1") {
      throw IoError("'" + path + "' is not an m3rec checkpoint");
    }
    Checkpoint ck;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::istringstream ss(line);
      std::string tag, name;
      ss >> tag >> name;
      if (tag != "module") throw IoError("malformed checkpoint header line");
      Entry e;
      ss >> e.kind;
      if (e.kind == "mlp") ss >> e.activation;
      std::size_t n_shape = 0, n_params = 0;
      ss >> n_shape;
      e.shape.resize(n_shape);
      for (auto& s : e.shape) ss >> s;
      ss >> n_params;
      if (!ss) throw IoError("malformed checkpoint header for '" + name + "'");
      if (!std::getline(in, line)) {
        throw IoError("missing parameter line for '" + name + "'");
      }
      e.params.reserve(n_params);
      const char* p = line.c_str();
      char* endp = nullptr;
      for (std::size_t i = 0; i < n_params; ++i) {
        const double v = std::strtod(p, &endp);
        if (endp == p) {
          throw IoError("malformed parameter " + std::to_string(i) + " for '" +
                        name + "'");
        }
        e.params.push_back(v);
        p = endp;
      }
      ck.entries_[name] = std::move(e);
    }
    return ck;
  }

 private:
  const Entry& entry(const std::string& name, const std::string& kind) const {
    const auto it = entries_.find(name);
    if (it == entries_.end()) {
      throw IoError("checkpoint is missing module '" + name + "'");
    }
    if (it->second.kind != kind) {
      throw ValidationError("checkpoint module '" + name + "' has kind '" +
                            it->second.kind + "', expected '" + kind + "'");
    }
    return it->second;
  }

  std::map<std::string, Entry> entries_;
};

}  // namespace m3rec
