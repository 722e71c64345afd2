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
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "m3rec/common.hpp"

namespace m3rec::ad {

class Tape;

// A value handle. id < 0 marks a constant that lives outside the tape;
// arithmetic folds constants so mixed Var/double expressions stay cheap.
struct Var {
  double v = 0.0;
  std::int32_t id = -1;
  Tape* tape = nullptr;

  bool is_const() const { return id < 0; }
};

inline Var constant(double v) { return Var{v, -1, nullptr}; }

enum class Op : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kExp,
  kLog,
  kTanh,
  kRelu,
  kSoftplus,
  kSquare,
  kClamp,
  kAffine,
  kSum,
  kDot,
  kLinComb,
  kLogSumExp,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kNeg: return "neg";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kTanh: return "tanh";
    case Op::kRelu: return "relu";
    case Op::kSoftplus: return "softplus";
    case Op::kSquare: return "square";
    case Op::kClamp: return "clamp";
    case Op::kAffine: return "affine";
    case Op::kSum: return "sum";
    case Op::kDot: return "dot";
    case Op::kLinComb: return "lincomb";
    case Op::kLogSumExp: return "logsumexp";
  }
  return "?";
}

// Reverse-mode tape, rebuilt per optimization step. Nodes store local
// partials computed at record time; parents live in a shared side pool so
// n-ary reductions (dot, logsumexp) cost one node instead of a chain.
class Tape {
 public:
  Var leaf(double v) {
    const std::int32_t id = push(v, Op::kLeaf);
    return Var{v, id, this};
  }

  std::size_t size() const { return vals_.size(); }

  void clear() {
    vals_.clear();
    ops_.clear();
    arg_off_.clear();
    arg_n_.clear();
    parents_.clear();
    partials_.clear();
    adjoints_.clear();
  }

  /// Seeds d(loss)/d(loss) = 1 and accumulates adjoints for every node.
  /// Throws NumericalError naming the first offending op if the loss (or
  /// any node feeding it) is non-finite.
  void backward(const Var& loss) {
    if (loss.is_const() || loss.tape != this) {
      throw ValidationError("backward: loss is not a node of this tape");
    }
    if (!std::isfinite(loss.v)) {
      for (std::size_t i = 0; i < vals_.size(); ++i) {
        if (!std::isfinite(vals_[i])) {
          throw NumericalError(std::string("non-finite value produced by op '") +
                               op_name(ops_[i]) + "' at tape node " +
                               std::to_string(i));
        }
      }
      throw NumericalError("non-finite loss");
    }
    adjoints_.assign(vals_.size(), 0.0);
    adjoints_[static_cast<std::size_t>(loss.id)] = 1.0;
    for (std::size_t i = static_cast<std::size_t>(loss.id) + 1; i-- > 0;) {
      const double a = adjoints_[i];
      if (a == 0.0) continue;
      const std::uint32_t off = arg_off_[i];
      const std::uint32_t n = arg_n_[i];
      for (std::uint32_t j = 0; j < n; ++j) {
        adjoints_[parents_[off + j]] += partials_[off + j] * a;
      }
    }
  }

  /// Adjoint of a var after backward(); constants and unreached nodes get
  /// exact zero.
  double adjoint(const Var& x) const {
    if (x.is_const()) return 0.0;
    const auto id = static_cast<std::size_t>(x.id);
    if (id >= adjoints_.size()) return 0.0;
    return adjoints_[id];
  }

  // ---- primitive records (used by the free operators below) ----

  Var unary(Op op, double val, const Var& x, double partial) {
    begin_args(1);
    push_arg(x.id, partial);
    return Var{val, push(val, op), this};
  }

  Var binary(Op op, double val, const Var& x, double px, const Var& y,
             double py) {
    begin_args(2);
    push_arg(x.id, px);
    push_arg(y.id, py);
    return Var{val, push(val, op), this};
  }

  // Builder for n-ary nodes: call begin_args, push_arg for each non-const
  // parent, then finish with the forward value. Growth must stay geometric,
  // so only grow capacity when the hint exceeds it, and then by doubling.
  void begin_args(std::size_t n_hint) {
    pending_off_ = static_cast<std::uint32_t>(parents_.size());
    const std::size_t needed = parents_.size() + n_hint;
    if (needed > parents_.capacity()) {
      const std::size_t cap = std::max(needed, 2 * parents_.capacity());
      parents_.reserve(cap);
      partials_.reserve(cap);
    }
  }

  void push_arg(std::int32_t parent_id, double partial) {
    parents_.push_back(static_cast<std::uint32_t>(parent_id));
    partials_.push_back(partial);
  }

  Var finish(Op op, double val) { return Var{val, push(val, op), this}; }

 private:
  std::int32_t push(double v, Op op) {
    vals_.push_back(v);
    ops_.push_back(op);
    if (op == Op::kLeaf) {
      arg_off_.push_back(0);
      arg_n_.push_back(0);
    } else {
      arg_off_.push_back(pending_off_);
      arg_n_.push_back(static_cast<std::uint32_t>(parents_.size()) -
                       pending_off_);
    }
    return static_cast<std::int32_t>(vals_.size() - 1);
  }

  std::vector<double> vals_;
  std::vector<Op> ops_;
  std::vector<std::uint32_t> arg_off_;
  std::vector<std::uint32_t> arg_n_;
  std::vector<std::uint32_t> parents_;
  std::vector<double> partials_;
  std::vector<double> adjoints_;
  std::uint32_t pending_off_ = 0;
};

inline Tape* tape_of(const Var& a, const Var& b) {
  return a.tape != nullptr ? a.tape : b.tape;
}

// ---- arithmetic ----

inline Var operator+(const Var& a, const Var& b) {
  if (a.is_const() && b.is_const()) return constant(a.v + b.v);
  Tape* t = tape_of(a, b);
  if (a.is_const()) return t->unary(Op::kAdd, a.v + b.v, b, 1.0);
  if (b.is_const()) return t->unary(Op::kAdd, a.v + b.v, a, 1.0);
  return t->binary(Op::kAdd, a.v + b.v, a, 1.0, b, 1.0);
}

inline Var operator-(const Var& a, const Var& b) {
  if (a.is_const() && b.is_const()) return constant(a.v - b.v);
  Tape* t = tape_of(a, b);
  if (a.is_const()) return t->unary(Op::kSub, a.v - b.v, b, -1.0);
  if (b.is_const()) return t->unary(Op::kSub, a.v - b.v, a, 1.0);
  return t->binary(Op::kSub, a.v - b.v, a, 1.0, b, -1.0);
}

inline Var operator*(const Var& a, const Var& b) {
  if (a.is_const() && b.is_const()) return constant(a.v * b.v);
  Tape* t = tape_of(a, b);
  if (a.is_const()) return t->unary(Op::kMul, a.v * b.v, b, a.v);
  if (b.is_const()) return t->unary(Op::kMul, a.v * b.v, a, b.v);
  return t->binary(Op::kMul, a.v * b.v, a, b.v, b, a.v);
}

inline Var operator/(const Var& a, const Var& b) {
  if (a.is_const() && b.is_const()) return constant(a.v / b.v);
  Tape* t = tape_of(a, b);
  const double val = a.v / b.v;
  if (a.is_const()) return t->unary(Op::kDiv, val, b, -a.v / (b.v * b.v));
  if (b.is_const()) return t->unary(Op::kDiv, val, a, 1.0 / b.v);
  return t->binary(Op::kDiv, val, a, 1.0 / b.v, b, -a.v / (b.v * b.v));
}

inline Var operator-(const Var& a) {
  if (a.is_const()) return constant(-a.v);
  return a.tape->unary(Op::kNeg, -a.v, a, -1.0);
}

inline Var operator+(const Var& a, double c) { return a + constant(c); }
inline Var operator+(double c, const Var& a) { return constant(c) + a; }
inline Var operator-(const Var& a, double c) { return a - constant(c); }
inline Var operator-(double c, const Var& a) { return constant(c) - a; }
inline Var operator*(const Var& a, double c) { return a * constant(c); }
inline Var operator*(double c, const Var& a) { return constant(c) * a; }
inline Var operator/(const Var& a, double c) { return a / constant(c); }
inline Var operator/(double c, const Var& a) { return constant(c) / a; }

// ---- elementwise functions ----

inline Var exp(const Var& a) {
  const double val = std::exp(a.v);
  if (a.is_const()) return constant(val);
  return a.tape->unary(Op::kExp, val, a, val);
}

inline Var log(const Var& a) {
  const double val = std::log(a.v);
  if (a.is_const()) return constant(val);
  return a.tape->unary(Op::kLog, val, a, 1.0 / a.v);
}

inline Var tanh(const Var& a) {
  const double val = std::tanh(a.v);
  if (a.is_const()) return constant(val);
  return a.tape->unary(Op::kTanh, val, a, 1.0 - val * val);
}

inline Var relu(const Var& a) {
  const double val = a.v > 0.0 ? a.v : 0.0;
  if (a.is_const()) return constant(val);
  return a.tape->unary(Op::kRelu, val, a, a.v > 0.0 ? 1.0 : 0.0);
}

inline Var softplus(const Var& a) {
  const double val = m3rec::softplus(a.v);
  if (a.is_const()) return constant(val);
  const double sig = 1.0 / (1.0 + std::exp(-a.v));
  return a.tape->unary(Op::kSoftplus, val, a, sig);
}

inline Var square(const Var& a) {
  const double val = a.v * a.v;
  if (a.is_const()) return constant(val);
  return a.tape->unary(Op::kSquare, val, a, 2.0 * a.v);
}

/// Saturating clamp; zero partial outside [lo, hi].
inline Var clamp(const Var& a, double lo, double hi) {
  const double val = std::min(std::max(a.v, lo), hi);
  if (a.is_const()) return constant(val);
  const double partial = (a.v >= lo && a.v <= hi) ? 1.0 : 0.0;
  return a.tape->unary(Op::kClamp, val, a, partial);
}

/// a * scale + shift as a single node.
inline Var affine(const Var& a, double scale, double shift) {
  const double val = a.v * scale + shift;
  if (a.is_const()) return constant(val);
  return a.tape->unary(Op::kAffine, val, a, scale);
}

// ---- n-ary reductions ----

inline Var sum(std::span<const Var> xs) {
  Tape* t = nullptr;
  for (const auto& x : xs) {
    if (!x.is_const()) {
      t = x.tape;
      break;
    }
  }
  double val = 0.0;
  for (const auto& x : xs) val += x.v;
  if (t == nullptr) return constant(val);
  t->begin_args(xs.size());
  for (const auto& x : xs) {
    if (!x.is_const()) t->push_arg(x.id, 1.0);
  }
  return t->finish(Op::kSum, val);
}

/// Inner product; partials are the opposing values, recorded at forward
/// time. Mixed constant/var operands contribute only val or single-sided
/// partials as appropriate.
inline Var dot(std::span<const Var> a, std::span<const Var> b) {
  if (a.size() != b.size()) throw ValidationError("ad::dot: size mismatch");
  Tape* t = nullptr;
  for (std::size_t i = 0; i < a.size() && t == nullptr; ++i) {
    if (!a[i].is_const()) t = a[i].tape;
    else if (!b[i].is_const()) t = b[i].tape;
  }
  double val = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) val += a[i].v * b[i].v;
  if (t == nullptr) return constant(val);
  t->begin_args(2 * a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!a[i].is_const()) t->push_arg(a[i].id, b[i].v);
    if (!b[i].is_const()) t->push_arg(b[i].id, a[i].v);
  }
  return t->finish(Op::kDot, val);
}

/// Sum of coeff[i] * x[i] with constant coefficients.
inline Var lincomb(std::span<const Var> xs, std::span<const double> coeffs) {
  if (xs.size() != coeffs.size()) {
    throw ValidationError("ad::lincomb: size mismatch");
  }
  Tape* t = nullptr;
  for (const auto& x : xs) {
    if (!x.is_const()) {
      t = x.tape;
      break;
    }
  }
  double val = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) val += coeffs[i] * xs[i].v;
  if (t == nullptr) return constant(val);
  t->begin_args(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!xs[i].is_const()) t->push_arg(xs[i].id, coeffs[i]);
  }
  return t->finish(Op::kLinComb, val);
}

/// Max-shifted log-sum-exp as one node; partials are the softmax weights.
inline Var logsumexp(std::span<const Var> xs) {
  if (xs.empty()) throw ValidationError("ad::logsumexp: empty input");
  Tape* t = nullptr;
  double m = -std::numeric_limits<double>::infinity();
  for (const auto& x : xs) {
    m = std::max(m, x.v);
    if (!x.is_const() && t == nullptr) t = x.tape;
  }
  double s = 0.0;
  for (const auto& x : xs) s += std::exp(x.v - m);
  const double val = m + std::log(s);
  if (t == nullptr) return constant(val);
  t->begin_args(xs.size());
  for (const auto& x : xs) {
    if (!x.is_const()) t->push_arg(x.id, std::exp(x.v - val));
  }
  return t->finish(Op::kLogSumExp, val);
}

inline Var logaddexp(const Var& a, const Var& b) {
  const Var xs[2] = {a, b};
  return logsumexp(std::span<const Var>(xs, 2));
}

inline std::vector<Var> constants(std::span<const double> xs) {
  std::vector<Var> out;
  out.reserve(xs.size());
  for (double x : xs) out.push_back(constant(x));
  return out;
}

}  // namespace m3rec::ad
