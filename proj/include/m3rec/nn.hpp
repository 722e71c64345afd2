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
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "m3rec/autodiff.hpp"
#include "m3rec/common.hpp"

namespace m3rec {

enum class Activation { kTanh, kRelu };

inline std::string activation_name(Activation a) {
  return a == Activation::kTanh ? "tanh" : "relu";
}

inline Activation activation_from_name(const std::string& s) {
  if (s == "tanh") return Activation::kTanh;
  if (s == "relu") return Activation::kRelu;
  throw ConfigError("unknown activation '" + s + "'");
}

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Dense multilayer perceptron over a flat parameter vector. Hidden layers
// use the configured activation, the output layer is linear. Weights are
// drawn from N(0, 1/fan_in), biases start at zero.
class Mlp {
 public:
  Mlp() = default;

  Mlp(std::vector<int> layer_sizes, Activation act, Rng& rng)
      : sizes_(std::move(layer_sizes)), act_(act) {
    if (sizes_.size() < 2) throw ValidationError("Mlp: need >= 2 layer sizes");
    for (int s : sizes_) {
      if (s <= 0) throw ValidationError("Mlp: layer sizes must be positive");
    }
    params_.resize(param_count_for(sizes_));
    std::size_t p = 0;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      const int fan_in = sizes_[l];
      const int fan_out = sizes_[l + 1];
      const double std = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (int i = 0; i < fan_in * fan_out; ++i) params_[p++] = std * rng.normal();
      for (int i = 0; i < fan_out; ++i) params_[p++] = 0.0;  // biases
    }
    opt_.m.assign(params_.size(), 0.0);
    opt_.v.assign(params_.size(), 0.0);
  }

  static std::size_t param_count_for(const std::vector<int>& sizes) {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
      n += static_cast<std::size_t>(sizes[l] + 1) * sizes[l + 1];
    }
    return n;
  }

  const std::vector<int>& layer_sizes() const { return sizes_; }
  int input_dim() const { return sizes_.front(); }
  int output_dim() const { return sizes_.back(); }
  Activation activation() const { return act_; }
  std::size_t param_count() const { return params_.size(); }
  std::span<const double> params() const { return params_; }
  const AdamState& optimizer_state() const { return opt_; }

  void set_params(std::span<const double> p) {
    if (p.size() != params_.size()) {
      throw ValidationError("set_params: size mismatch");
    }
    std::copy(p.begin(), p.end(), params_.begin());
  }

  double param(std::size_t i) const { return params_[i]; }
  void nudge_param(std::size_t i, double delta) { params_[i] += delta; }

  /// Plain forward pass (no gradient recording).
  std::vector<double> forward(std::span<const double> x) const {
    if (static_cast<int>(x.size()) != sizes_.front()) {
      throw ValidationError("Mlp::forward: expected input dim " +
                            std::to_string(sizes_.front()) + ", got " +
                            std::to_string(x.size()));
    }
    std::vector<double> cur(x.begin(), x.end());
    std::vector<double> next;
    std::size_t p = 0;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      const int fan_in = sizes_[l];
      const int fan_out = sizes_[l + 1];
      next.assign(fan_out, 0.0);
      for (int j = 0; j < fan_out; ++j) {
        double s = 0.0;
        const double* w = &params_[p + static_cast<std::size_t>(j) * fan_in];
        for (int i = 0; i < fan_in; ++i) s += w[i] * cur[i];
        next[j] = s;
      }
      p += static_cast<std::size_t>(fan_in) * fan_out;
      for (int j = 0; j < fan_out; ++j) next[j] += params_[p + j];
      p += fan_out;
      if (l + 2 < sizes_.size()) {
        for (auto& v : next) {
          v = act_ == Activation::kTanh ? std::tanh(v) : std::max(v, 0.0);
        }
      }
      cur.swap(next);
    }
    for (double v : cur) {
      if (!std::isfinite(v)) throw NumericalError("Mlp::forward: non-finite output");
    }
    return cur;
  }

  /// Bias-corrected adaptive-moment step. A non-finite gradient refuses the
  /// step and leaves parameters and moments untouched.
  void optimizer_step(std::span<const double> grad, double lr) {
    if (grad.size() != params_.size()) {
      throw ValidationError("optimizer_step: gradient size mismatch");
    }
    for (double g : grad) {
      if (!std::isfinite(g)) {
        throw NumericalError("optimizer_step: non-finite gradient, step refused");
      }
    }
    opt_.step += 1;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(opt_.step));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(opt_.step));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      opt_.m[i] = opt_.beta1 * opt_.m[i] + (1.0 - opt_.beta1) * grad[i];
      opt_.v[i] = opt_.beta2 * opt_.v[i] + (1.0 - opt_.beta2) * grad[i] * grad[i];
      const double mhat = opt_.m[i] / bc1;
      const double vhat = opt_.v[i] / bc2;
      params_[i] -= lr * mhat / (std::sqrt(vhat) + opt_.eps);
    }
  }

 private:
  std::vector<int> sizes_;
  Activation act_ = Activation::kTanh;
  std::vector<double> params_;
  AdamState opt_;
};

// A network's parameters materialized as tape leaves for one recorded
// computation. grads() reads per-parameter adjoints after backward().
class AttachedMlp {
 public:
  AttachedMlp(ad::Tape& tape, const Mlp& net) : net_(&net), tape_(&tape) {
    leaves_.reserve(net.param_count());
    for (double p : net.params()) leaves_.push_back(tape.leaf(p));
  }

  const Mlp& net() const { return *net_; }

  std::vector<ad::Var> forward(std::span<const ad::Var> x) const {
    const auto& sizes = net_->layer_sizes();
    if (static_cast<int>(x.size()) != sizes.front()) {
      throw ValidationError("AttachedMlp::forward: input dim mismatch");
    }
    std::vector<ad::Var> cur(x.begin(), x.end());
    std::vector<ad::Var> next;
    std::size_t p = 0;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
      const int fan_in = sizes[l];
      const int fan_out = sizes[l + 1];
      next.clear();
      next.reserve(fan_out);
      for (int j = 0; j < fan_out; ++j) {
        std::span<const ad::Var> row(&leaves_[p + static_cast<std::size_t>(j) * fan_in],
                                     static_cast<std::size_t>(fan_in));
        ad::Var s = ad::dot(row, cur);
        s = s + leaves_[p + static_cast<std::size_t>(fan_in) * fan_out + j];
        if (l + 2 < sizes.size()) {
          s = net_->activation() == Activation::kTanh ? ad::tanh(s) : ad::relu(s);
        }
        next.push_back(s);
      }
      p += static_cast<std::size_t>(fan_in + 1) * fan_out;
      cur.swap(next);
    }
    return cur;
  }

  std::vector<double> grads() const {
    std::vector<double> g(leaves_.size());
    for (std::size_t i = 0; i < leaves_.size(); ++i) {
      g[i] = tape_->adjoint(leaves_[i]);
    }
    return g;
  }

 private:
  const Mlp* net_;
  ad::Tape* tape_;
  std::vector<ad::Var> leaves_;
};

// Gradient accumulator: collects per-batch gradients for a network and
// applies one optimizer step with the running mean.
class GradAccumulator {
 public:
  explicit GradAccumulator(Mlp& net) : net_(&net), sum_(net.param_count(), 0.0) {}

  void add(const AttachedMlp& attached, double scale = 1.0) {
    const auto g = attached.grads();
    for (std::size_t i = 0; i < sum_.size(); ++i) sum_[i] += scale * g[i];
    n_ += 1;
  }

  void add_raw(std::span<const double> g, double scale = 1.0) {
    if (g.size() != sum_.size()) throw ValidationError("add_raw: size mismatch");
    for (std::size_t i = 0; i < sum_.size(); ++i) sum_[i] += scale * g[i];
    n_ += 1;
  }

  /// Steps with the accumulated sum divided by `denom` (defaults to the
  /// number of add() calls). No-op when nothing was accumulated.
  void step(double lr, double denom = 0.0) {
    if (n_ == 0) return;
    const double d = denom > 0.0 ? denom : static_cast<double>(n_);
    for (auto& g : sum_) g /= d;
    net_->optimizer_step(sum_, lr);
    std::fill(sum_.begin(), sum_.end(), 0.0);
    n_ = 0;
  }

 private:
  Mlp* net_;
  std::vector<double> sum_;
  std::size_t n_ = 0;
};

}  // namespace m3rec
