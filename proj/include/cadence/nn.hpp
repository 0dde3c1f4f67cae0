#pragma once

// Layers built from autodiff ops, parameter initialisation and optimizers.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "cadence/autodiff.hpp"

namespace cadence::nn {

using ad::Graph;
using ad::ParameterStore;
using ad::ParamId;
using ad::Var;

/// Uniform(-limit, limit) initialisation driven by a caller-owned engine.
inline Tensor uniform(std::mt19937_64& rng, Tensor::Shape shape, double limit) {
  Tensor t(std::move(shape), 0.0);
  std::uniform_real_distribution<double> u(-limit, limit);
  for (double& v : t.values()) v = u(rng);
  return t;
}

inline Tensor glorot(std::mt19937_64& rng, std::size_t out, std::size_t in) {
  return uniform(rng, {out, in}, std::sqrt(6.0 / static_cast<double>(in + out)));
}

struct Linear {
  ParamId w = 0;
  ParamId b = 0;
  bool bias = true;

  static Linear make(ParameterStore& store, std::mt19937_64& rng, const std::string& name, std::size_t in,
                     std::size_t out, bool with_bias = true) {
    Linear l;
    l.w = store.add(name + ".w", glorot(rng, out, in));
    l.bias = with_bias;
    if (with_bias) l.b = store.add(name + ".b", Tensor({out}, 0.0));
    return l;
  }

  Var operator()(Graph& g, const ParameterStore& store, Var x) const {
    if (bias) return ad::affine(g.param(store, w), x, g.param(store, b));
    return ad::affine(g.param(store, w), x);
  }

  std::size_t in(const ParameterStore& store) const { return store.value(w).cols(); }
  std::size_t out(const ParameterStore& store) const { return store.value(w).rows(); }
};

struct LstmState {
  Var h;
  Var c;
};

/// Single LSTM cell; gate order i, f, g, o over one [4H x (I + H)] weight.
struct Lstm {
  ParamId w = 0;
  ParamId b = 0;
  std::size_t hidden = 0;

  static Lstm make(ParameterStore& store, std::mt19937_64& rng, const std::string& name, std::size_t in,
                   std::size_t hidden) {
    Lstm l;
    l.hidden = hidden;
    l.w = store.add(name + ".w", uniform(rng, {4 * hidden, in + hidden}, 1.0 / std::sqrt(static_cast<double>(hidden))));
    Tensor b({4 * hidden}, 0.0);
    for (std::size_t i = hidden; i < 2 * hidden; ++i) b[i] = 1.0;  // forget gate
    l.b = store.add(name + ".b", std::move(b));
    return l;
  }

  LstmState zero_state(Graph& g) const {
    return {g.constant(Tensor({hidden}, 0.0)), g.constant(Tensor({hidden}, 0.0))};
  }

  LstmState step(Graph& g, const ParameterStore& store, Var x, LstmState s) const {
    Var z = ad::affine(g.param(store, w), ad::concat({x, s.h}), g.param(store, b));
    Var i = ad::sigmoid(ad::slice(z, 0, hidden));
    Var f = ad::sigmoid(ad::slice(z, hidden, hidden));
    Var u = ad::tanh(ad::slice(z, 2 * hidden, hidden));
    Var o = ad::sigmoid(ad::slice(z, 3 * hidden, hidden));
    Var c = ad::add(ad::mul(f, s.c), ad::mul(i, u));
    Var h = ad::mul(o, ad::tanh(c));
    return {h, c};
  }

  std::size_t in(const ParameterStore& store) const { return store.value(w).cols() - hidden; }
};

/// Runs an LSTM over a sequence of vectors, optionally right to left; outputs
/// are returned in input order.
inline std::vector<Var> run_lstm(Graph& g, const ParameterStore& store, const Lstm& cell, const std::vector<Var>& xs,
                                 bool reverse = false) {
  std::vector<Var> out(xs.size());
  LstmState s = cell.zero_state(g);
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const std::size_t t = reverse ? xs.size() - 1 - k : k;
    s = cell.step(g, store, xs[t], s);
    out[t] = s.h;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

/// Rescales gradients so their global L2 norm is at most max_norm; returns
/// the norm before clipping.
inline double clip_grad_norm(ad::Gradients& g, double max_norm) {
  const double n = g.norm();
  if (max_norm > 0.0 && n > max_norm) g.scale(max_norm / n);
  return n;
}

enum class OptimizerKind { momentum, adam };

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "momentum") return OptimizerKind::momentum;
  if (s == "adam") return OptimizerKind::adam;
  throw DomainError("unknown optimizer '" + s + "' (expected momentum or adam)");
}

inline const char* to_string(OptimizerKind k) { return k == OptimizerKind::momentum ? "momentum" : "adam"; }

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::momentum;
  double learning_rate = 0.01;
  double momentum = 0.9;  // heavy-ball coefficient; Adam's beta1
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Gradient descent with heavy-ball momentum, or Adam. Slot tensors are
/// exposed so checkpoints can carry them.
class Optimizer {
 public:
  Optimizer(const ParameterStore& store, OptimizerConfig cfg) : cfg_(cfg) {
    for (ParamId i = 0; i < store.size(); ++i) {
      m_.emplace_back(store.value(i).shape(), 0.0);
      if (cfg_.kind == OptimizerKind::adam) v_.emplace_back(store.value(i).shape(), 0.0);
    }
  }

  const OptimizerConfig& config() const { return cfg_; }
  void set_learning_rate(double lr) { cfg_.learning_rate = lr; }

  void step(ParameterStore& store, const ad::Gradients& g) {
    ++steps_;
    if (cfg_.kind == OptimizerKind::momentum) {
      for (ParamId p = 0; p < store.size(); ++p) {
        Tensor& w = store.value(p);
        Tensor& m = m_[p];
        for (std::size_t k = 0; k < w.size(); ++k) {
          m[k] = cfg_.momentum * m[k] + g[p][k];
          w[k] -= cfg_.learning_rate * m[k];
        }
      }
      return;
    }
    const double b1 = cfg_.momentum, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
    for (ParamId p = 0; p < store.size(); ++p) {
      Tensor& w = store.value(p);
      Tensor& m = m_[p];
      Tensor& v = v_[p];
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double gk = g[p][k];
        m[k] = b1 * m[k] + (1.0 - b1) * gk;
        v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
        w[k] -= cfg_.learning_rate * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg_.epsilon);
      }
    }
  }

  std::size_t steps() const { return steps_; }
  void set_steps(std::size_t s) { steps_ = s; }
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }

 private:
  OptimizerConfig cfg_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::size_t steps_ = 0;
};

}  // namespace cadence::nn
