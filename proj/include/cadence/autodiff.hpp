#pragma once

// Reverse-mode differentiation over dense tensors.
//
// A Graph is a define-by-run tape: every op is evaluated when it is emitted
// and its node records how to recompute the value (forward) and how to push
// gradients to its inputs (backward). Graph::forward() re-evaluates the tape
// in order, picking up rebound inputs and the current parameter values, which
// is what finite_diff_check relies on.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cadence/error.hpp"
#include "cadence/tensor.hpp"

namespace cadence::ad {

using ParamId = std::size_t;

/// Named leaf tensors in registration order.
class ParameterStore {
 public:
  ParamId add(std::string name, Tensor init) {
    if (index_.count(name)) throw DomainError("duplicate parameter name '" + name + "'");
    if (!init.all_finite()) throw NonFiniteError("parameter '" + name + "' initialised with non-finite values");
    index_.emplace(name, names_.size());
    names_.push_back(std::move(name));
    values_.push_back(std::move(init));
    return values_.size() - 1;
  }

  std::size_t size() const { return values_.size(); }
  const std::string& name(ParamId id) const { return names_.at(id); }
  Tensor& value(ParamId id) { return values_.at(id); }
  const Tensor& value(ParamId id) const { return values_.at(id); }

  std::optional<ParamId> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  ParamId id(const std::string& name) const {
    auto found = find(name);
    if (!found) throw DomainError("unknown parameter '" + name + "'");
    return *found;
  }

  std::size_t total_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Gradient accumulators aligned with a ParameterStore.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(const ParameterStore& store) {
    grads_.reserve(store.size());
    for (ParamId i = 0; i < store.size(); ++i) grads_.emplace_back(store.value(i).shape(), 0.0);
  }

  std::size_t size() const { return grads_.size(); }
  Tensor& operator[](ParamId id) { return grads_.at(id); }
  const Tensor& operator[](ParamId id) const { return grads_.at(id); }

  void zero() {
    for (auto& g : grads_) g.fill(0.0);
  }

  void scale(double s) {
    for (auto& g : grads_) {
      for (double& v : g.values()) v *= s;
    }
  }

  double norm() const {
    double s = 0.0;
    for (const auto& g : grads_) {
      for (double v : g.values()) s += v * v;
    }
    return std::sqrt(s);
  }

 private:
  std::vector<Tensor> grads_;
};

class Graph;

/// Handle to a node of a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Tensor::Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  double item() const { return value().item(); }
};

using Inputs = std::span<const Tensor* const>;
using GradInputs = std::span<Tensor* const>;
using ForwardFn = std::function<void(Inputs in, Tensor& out)>;
// gin[i] is null when input i does not need a gradient.
using BackwardFn = std::function<void(Inputs in, const Tensor& out, const Tensor& gout, GradInputs gin)>;

class Graph {
 public:
  explicit Graph(bool track_gradients = true, bool check_finite = true)
      : track_gradients_(track_gradients), check_finite_(check_finite) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool tracks_gradients() const { return track_gradients_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Tensor t) {
    Node n;
    n.op = "constant";
    n.value = std::move(t);
    ensure_finite(n, nodes_.size());
    return push(std::move(n));
  }

  /// Named, rebindable input. Differentiable when the graph tracks gradients.
  Var input(std::string name, Tensor t) {
    if (input_index_.count(name)) throw DomainError("duplicate graph input '" + name + "'");
    Node n;
    n.op = "input";
    n.value = std::move(t);
    n.needs_grad = track_gradients_;
    ensure_finite(n, nodes_.size());
    input_index_.emplace(std::move(name), nodes_.size());
    return push(std::move(n));
  }

  /// Leaf referencing a parameter; the store must outlive the graph and stay
  /// unmodified while the graph is evaluated (except by finite_diff_check).
  Var param(const ParameterStore& store, ParamId id) {
    if (&store != store_) {
      if (store_ != nullptr) throw DomainError("a graph can reference a single parameter store");
      store_ = &store;
    }
    auto it = param_nodes_.find(id);
    if (it != param_nodes_.end()) return Var{this, it->second};
    Node n;
    n.op = "param";
    n.external = &store.value(id);
    n.param = static_cast<long>(id);
    n.needs_grad = track_gradients_;
    param_nodes_.emplace(id, nodes_.size());
    return push(std::move(n));
  }

  Var param(const ParameterStore& store, const std::string& name) { return param(store, store.id(name)); }

  Var emit(std::string_view op, std::initializer_list<Var> ins, ForwardFn f, BackwardFn b) {
    return emit(op, std::vector<Var>(ins), std::move(f), std::move(b));
  }

  Var emit(std::string_view op, const std::vector<Var>& ins, ForwardFn f, BackwardFn b) {
    Node n;
    n.op = op;
    n.inputs.reserve(ins.size());
    for (const Var& v : ins) {
      if (v.graph != this) throw DomainError(std::string("op ") + std::string(op) + ": input from another graph");
      n.inputs.push_back(v.id);
      n.needs_grad = n.needs_grad || nodes_[v.id].needs_grad;
    }
    n.forward = std::move(f);
    if (n.needs_grad) n.backward = std::move(b);
    run_forward(n, nodes_.size());
    return push(std::move(n));
  }

  /// Re-evaluates the whole tape with the given input bindings and the current
  /// parameter values.
  void forward(const std::map<std::string, Tensor>& bindings = {}) {
    for (const auto& [name, t] : bindings) {
      auto it = input_index_.find(name);
      if (it == input_index_.end()) throw DomainError("unknown graph input '" + name + "'");
      Node& n = nodes_[it->second];
      if (!n.value.same_shape(t)) {
        throw ShapeError("node " + std::to_string(it->second) + " (input '" + name + "'): bound shape " +
                         t.shape_string() + " differs from declared " + n.value.shape_string());
      }
      n.value = t;
      ensure_finite(n, it->second);
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      Node& n = nodes_[i];
      if (n.forward) run_forward(n, i);
    }
  }

  /// Populates gradients of the scalar `output` with respect to every input
  /// and parameter leaf.
  void backward(Var output) {
    if (output.graph != this) throw DomainError("backward: output belongs to another graph");
    const Tensor& out = value_of(output.id);
    if (out.size() != 1) throw ShapeError("backward: seed must be scalar, got shape " + out.shape_string());
    for (auto& n : nodes_) n.grad = Tensor();
    Node& root = nodes_[output.id];
    if (!root.needs_grad) return;
    root.grad = Tensor(out.shape(), 1.0);

    std::vector<const Tensor*> in;
    std::vector<Tensor*> gin;
    for (std::size_t i = output.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      in.clear();
      gin.clear();
      for (std::size_t j : n.inputs) {
        in.push_back(&value_of(j));
        Node& src = nodes_[j];
        if (src.needs_grad) {
          if (src.grad.empty()) src.grad = Tensor(value_of(j).shape(), 0.0);
          gin.push_back(&src.grad);
        } else {
          gin.push_back(nullptr);
        }
      }
      n.backward(in, value_of(i), n.grad, gin);
    }
  }

  const Tensor& value(Var v) const { return value_of(v.id); }

  /// Gradient from the last backward(); zeros when the node was not reached.
  Tensor grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty()) return Tensor(value_of(v.id).shape(), 0.0);
    return n.grad;
  }

  std::string_view op(Var v) const { return nodes_.at(v.id).op; }

  Tensor param_grad(ParamId id) const {
    auto it = param_nodes_.find(id);
    if (it == param_nodes_.end()) {
      if (store_ == nullptr) throw DomainError("param_grad: graph references no parameters");
      return Tensor(store_->value(id).shape(), 0.0);
    }
    return grad(Var{const_cast<Graph*>(this), it->second});
  }

  /// Adds parameter gradients from the last backward() into `into`.
  void accumulate(Gradients& into) const {
    for (const auto& [pid, nid] : param_nodes_) {
      const Node& n = nodes_[nid];
      if (n.grad.empty()) continue;
      Tensor& dst = into[pid];
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += n.grad[k];
    }
  }

  Var input_var(const std::string& name) {
    auto it = input_index_.find(name);
    if (it == input_index_.end()) throw DomainError("unknown graph input '" + name + "'");
    return Var{this, it->second};
  }

  Tensor& mutable_input(const std::string& name) {
    auto it = input_index_.find(name);
    if (it == input_index_.end()) throw DomainError("unknown graph input '" + name + "'");
    return nodes_[it->second].value;
  }

 private:
  struct Node {
    std::string_view op;
    std::vector<std::size_t> inputs;
    Tensor value;
    Tensor grad;
    const Tensor* external = nullptr;
    long param = -1;
    bool needs_grad = false;
    ForwardFn forward;
    BackwardFn backward;
  };

  const Tensor& value_of(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.external ? *n.external : n.value;
  }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  void run_forward(Node& n, std::size_t index) {
    std::vector<const Tensor*> in;
    in.reserve(n.inputs.size());
    for (std::size_t j : n.inputs) in.push_back(&value_of(j));
    try {
      n.forward(in, n.value);
    } catch (const ShapeError& e) {
      throw ShapeError("node " + std::to_string(index) + " (" + std::string(n.op) + "): " + e.what());
    }
    ensure_finite(n, index);
  }

  void ensure_finite(const Node& n, std::size_t index) const {
    if (check_finite_ && !n.value.all_finite()) {
      throw NonFiniteError("node " + std::to_string(index) + " (" + std::string(n.op) + ") produced non-finite values");
    }
  }

  bool track_gradients_;
  bool check_finite_;
  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::size_t> input_index_;
  std::unordered_map<ParamId, std::size_t> param_nodes_;
  const ParameterStore* store_ = nullptr;
};

inline const Tensor& Var::value() const { return graph->value(*this); }

// ---------------------------------------------------------------------------
// Primitive ops
// ---------------------------------------------------------------------------

namespace detail {

inline void require_same(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shapes " + a.shape_string() + " and " + b.shape_string() + " differ");
  }
}

inline void require_rank(const Tensor& a, std::size_t rank, const char* what) {
  if (a.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " + a.shape_string());
  }
}

inline void require_scalar(const Tensor& a, const char* what) {
  if (a.size() != 1) throw ShapeError(std::string(what) + ": expected scalar, got " + a.shape_string());
}

inline void ensure_shape(Tensor& out, const Tensor::Shape& s) {
  if (out.shape() != s) out = Tensor(s, 0.0);
}

template <class F, class D>
Var unary(std::string_view op, Var a, F f, D dfdx_from_out) {
  return a.graph->emit(
      op, {a},
      [f](Inputs in, Tensor& out) {
        detail::ensure_shape(out, in[0]->shape());
        const double* x = in[0]->data();
        double* y = out.data();
        for (std::size_t i = 0; i < out.size(); ++i) y[i] = f(x[i]);
      },
      [dfdx_from_out](Inputs in, const Tensor& out, const Tensor& g, GradInputs gin) {
        if (!gin[0]) return;
        const double* x = in[0]->data();
        double* gx = gin[0]->data();
        for (std::size_t i = 0; i < out.size(); ++i) gx[i] += g[i] * dfdx_from_out(x[i], out[i]);
      });
}

}  // namespace detail

inline Var add(Var a, Var b) {
  return a.graph->emit(
      "add", {a, b},
      [](Inputs in, Tensor& out) {
        detail::require_same(*in[0], *in[1], "add");
        detail::ensure_shape(out, in[0]->shape());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*in[0])[i] + (*in[1])[i];
      },
      [](Inputs, const Tensor&, const Tensor& g, GradInputs gin) {
        for (Tensor* t : gin) {
          if (!t) continue;
          for (std::size_t i = 0; i < g.size(); ++i) (*t)[i] += g[i];
        }
      });
}

inline Var sub(Var a, Var b) {
  return a.graph->emit(
      "sub", {a, b},
      [](Inputs in, Tensor& out) {
        detail::require_same(*in[0], *in[1], "sub");
        detail::ensure_shape(out, in[0]->shape());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*in[0])[i] - (*in[1])[i];
      },
      [](Inputs, const Tensor&, const Tensor& g, GradInputs gin) {
        if (gin[0]) {
          for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
        }
        if (gin[1]) {
          for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] -= g[i];
        }
      });
}

inline Var mul(Var a, Var b) {
  return a.graph->emit(
      "mul", {a, b},
      [](Inputs in, Tensor& out) {
        detail::require_same(*in[0], *in[1], "mul");
        detail::ensure_shape(out, in[0]->shape());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*in[0])[i] * (*in[1])[i];
      },
      [](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
        if (gin[0]) {
          for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * (*in[1])[i];
        }
        if (gin[1]) {
          for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] += g[i] * (*in[0])[i];
        }
      });
}

inline Var scale(Var a, double c) {
  return detail::unary(
      "scale", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Var add_scalar(Var a, double c) {
  return detail::unary(
      "add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

/// 1 - a
inline Var one_minus(Var a) {
  return detail::unary(
      "one_minus", a, [](double x) { return 1.0 - x; }, [](double, double) { return -1.0; });
}

inline Var sigmoid(Var a) {
  return detail::unary(
      "sigmoid", a,
      [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh(Var a) {
  return detail::unary(
      "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var relu(Var a) {
  return detail::unary(
      "relu", a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

inline Var exp(Var a) {
  return detail::unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(Var a) {
  return detail::unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var square(Var a) {
  return detail::unary(
      "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

/// Elementwise min(x, c); gradient 1 where x < c.
inline Var min_const(Var a, double c) {
  return detail::unary(
      "min_const", a, [c](double x) { return x < c ? x : c; }, [c](double x, double) { return x < c ? 1.0 : 0.0; });
}

/// Hard threshold [x]_c: x where x > c, else 0.
inline Var threshold(Var a, double c) {
  return detail::unary(
      "threshold", a, [c](double x) { return x > c ? x : 0.0; }, [c](double x, double) { return x > c ? 1.0 : 0.0; });
}

inline Var sum(Var a) {
  return a.graph->emit(
      "sum", {a},
      [](Inputs in, Tensor& out) {
        detail::ensure_shape(out, {1});
        double s = 0.0;
        for (double v : in[0]->values()) s += v;
        out[0] = s;
      },
      [](Inputs, const Tensor&, const Tensor& g, GradInputs gin) {
        if (!gin[0]) return;
        for (double& v : gin[0]->values()) v += g[0];
      });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

inline Var dot(Var a, Var b) {
  return a.graph->emit(
      "dot", {a, b},
      [](Inputs in, Tensor& out) {
        detail::require_same(*in[0], *in[1], "dot");
        detail::ensure_shape(out, {1});
        double s = 0.0;
        for (std::size_t i = 0; i < in[0]->size(); ++i) s += (*in[0])[i] * (*in[1])[i];
        out[0] = s;
      },
      [](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
        if (gin[0]) {
          for (std::size_t i = 0; i < in[0]->size(); ++i) (*gin[0])[i] += g[0] * (*in[1])[i];
        }
        if (gin[1]) {
          for (std::size_t i = 0; i < in[0]->size(); ++i) (*gin[1])[i] += g[0] * (*in[0])[i];
        }
      });
}

/// s * v for a scalar s.
inline Var mul_scalar(Var s, Var v) {
  return s.graph->emit(
      "mul_scalar", {s, v},
      [](Inputs in, Tensor& out) {
        detail::require_scalar(*in[0], "mul_scalar");
        detail::ensure_shape(out, in[1]->shape());
        const double k = (*in[0])[0];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = k * (*in[1])[i];
      },
      [](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
        const double k = (*in[0])[0];
        if (gin[0]) {
          double s = 0.0;
          for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * (*in[1])[i];
          (*gin[0])[0] += s;
        }
        if (gin[1]) {
          for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] += k * g[i];
        }
      });
}

/// W[m x n] * x[n] (+ b[m] when given).
inline Var affine(Var w, Var x, std::optional<Var> b = std::nullopt) {
  std::vector<Var> ins{w, x};
  if (b) ins.push_back(*b);
  const bool has_bias = b.has_value();
  return w.graph->emit(
      has_bias ? "affine" : "matvec", ins,
      [has_bias](Inputs in, Tensor& out) {
        const Tensor& W = *in[0];
        const Tensor& x = *in[1];
        detail::require_rank(W, 2, "matvec weight");
        detail::require_rank(x, 1, "matvec input");
        const std::size_t m = W.rows(), n = W.cols();
        if (x.size() != n) {
          throw ShapeError("matvec: weight " + W.shape_string() + " incompatible with input " + x.shape_string());
        }
        if (has_bias && (in[2]->rank() != 1 || in[2]->size() != m)) {
          throw ShapeError("affine: bias " + in[2]->shape_string() + " incompatible with weight " + W.shape_string());
        }
        detail::ensure_shape(out, {m});
        const double* wp = W.data();
        const double* xp = x.data();
        for (std::size_t i = 0; i < m; ++i) {
          const double* row = wp + i * n;
          double s = has_bias ? (*in[2])[i] : 0.0;
          for (std::size_t j = 0; j < n; ++j) s += row[j] * xp[j];
          out[i] = s;
        }
      },
      [has_bias](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
        const Tensor& W = *in[0];
        const Tensor& x = *in[1];
        const std::size_t m = W.rows(), n = W.cols();
        if (gin[0]) {
          double* gw = gin[0]->data();
          const double* xp = x.data();
          for (std::size_t i = 0; i < m; ++i) {
            const double gi = g[i];
            if (gi == 0.0) continue;
            double* row = gw + i * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += gi * xp[j];
          }
        }
        if (gin[1]) {
          double* gx = gin[1]->data();
          const double* wp = W.data();
          for (std::size_t i = 0; i < m; ++i) {
            const double gi = g[i];
            if (gi == 0.0) continue;
            const double* row = wp + i * n;
            for (std::size_t j = 0; j < n; ++j) gx[j] += gi * row[j];
          }
        }
        if (has_bias && gin[2]) {
          for (std::size_t i = 0; i < m; ++i) (*gin[2])[i] += g[i];
        }
      });
}

inline Var matvec(Var w, Var x) { return affine(w, x); }

/// A[m x k] * B[k x n]
inline Var matmul(Var a, Var b) {
  return a.graph->emit(
      "matmul", {a, b},
      [](Inputs in, Tensor& out) {
        const Tensor& A = *in[0];
        const Tensor& B = *in[1];
        detail::require_rank(A, 2, "matmul lhs");
        detail::require_rank(B, 2, "matmul rhs");
        if (A.cols() != B.rows()) {
          throw ShapeError("matmul: " + A.shape_string() + " x " + B.shape_string());
        }
        const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
        detail::ensure_shape(out, {m, n});
        out.fill(0.0);
        for (std::size_t i = 0; i < m; ++i) {
          double* orow = out.data() + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double a = A(i, p);
            const double* brow = B.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += a * brow[j];
          }
        }
      },
      [](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
        const Tensor& A = *in[0];
        const Tensor& B = *in[1];
        const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
        if (gin[0]) {
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0.0;
              for (std::size_t j = 0; j < n; ++j) s += g(i, j) * B(p, j);
              (*gin[0])(i, p) += s;
            }
          }
        }
        if (gin[1]) {
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              const double a = A(i, p);
              double* grow = gin[1]->data() + p * n;
              for (std::size_t j = 0; j < n; ++j) grow[j] += a * g(i, j);
            }
          }
        }
      });
}

/// a[n] * M[n x d] -> [d], the attention-weighted sum of the rows of M.
inline Var vecmat(Var a, Var m) {
  return a.graph->emit(
      "vecmat", {a, m},
      [](Inputs in, Tensor& out) {
        const Tensor& a = *in[0];
        const Tensor& M = *in[1];
        detail::require_rank(a, 1, "vecmat weights");
        detail::require_rank(M, 2, "vecmat matrix");
        if (a.size() != M.rows()) throw ShapeError("vecmat: " + a.shape_string() + " x " + M.shape_string());
        const std::size_t n = M.rows(), d = M.cols();
        detail::ensure_shape(out, {d});
        out.fill(0.0);
        for (std::size_t i = 0; i < n; ++i) {
          const double w = a[i];
          const double* row = M.data() + i * d;
          for (std::size_t j = 0; j < d; ++j) out[j] += w * row[j];
        }
      },
      [](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
        const Tensor& a = *in[0];
        const Tensor& M = *in[1];
        const std::size_t n = M.rows(), d = M.cols();
        for (std::size_t i = 0; i < n; ++i) {
          const double* row = M.data() + i * d;
          if (gin[0]) {
            double s = 0.0;
            for (std::size_t j = 0; j < d; ++j) s += g[j] * row[j];
            (*gin[0])[i] += s;
          }
          if (gin[1]) {
            double* grow = gin[1]->data() + i * d;
            for (std::size_t j = 0; j < d; ++j) grow[j] += a[i] * g[j];
          }
        }
      });
}

/// M[m x n] + v[n] broadcast over rows (the only broadcasting op).
inline Var add_rows(Var m, Var v) {
  return m.graph->emit(
      "add_rows", {m, v},
      [](Inputs in, Tensor& out) {
        const Tensor& M = *in[0];
        const Tensor& v = *in[1];
        detail::require_rank(M, 2, "add_rows matrix");
        if (v.rank() != 1 || v.size() != M.cols()) {
          throw ShapeError("add_rows: " + M.shape_string() + " + " + v.shape_string());
        }
        detail::ensure_shape(out, M.shape());
        const std::size_t r = M.rows(), c = M.cols();
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) out(i, j) = M(i, j) + v[j];
        }
      },
      [](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
        const std::size_t r = in[0]->rows(), c = in[0]->cols();
        if (gin[0]) {
          for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
        }
        if (gin[1]) {
          for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) (*gin[1])[j] += g(i, j);
          }
        }
      });
}

inline Var softmax(Var a) {
  return a.graph->emit(
      "softmax", {a},
      [](Inputs in, Tensor& out) {
        const Tensor& x = *in[0];
        detail::require_rank(x, 1, "softmax");
        detail::ensure_shape(out, x.shape());
        const double m = *std::max_element(x.values().begin(), x.values().end());
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
          out[i] = std::exp(x[i] - m);
          s += out[i];
        }
        for (double& v : out.values()) v /= s;
      },
      [](Inputs, const Tensor& y, const Tensor& g, GradInputs gin) {
        if (!gin[0]) return;
        double gy = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) gy += g[i] * y[i];
        for (std::size_t i = 0; i < y.size(); ++i) (*gin[0])[i] += y[i] * (g[i] - gy);
      });
}

/// log sum_i exp(x_i), evaluated with max subtraction.
inline Var logsumexp(Var a) {
  return a.graph->emit(
      "logsumexp", {a},
      [](Inputs in, Tensor& out) {
        const Tensor& x = *in[0];
        detail::ensure_shape(out, {1});
        const double m = *std::max_element(x.values().begin(), x.values().end());
        double s = 0.0;
        for (double v : x.values()) s += std::exp(v - m);
        out[0] = m + std::log(s);
      },
      [](Inputs in, const Tensor& out, const Tensor& g, GradInputs gin) {
        if (!gin[0]) return;
        const Tensor& x = *in[0];
        for (std::size_t i = 0; i < x.size(); ++i) (*gin[0])[i] += g[0] * std::exp(x[i] - out[0]);
      });
}

/// Concatenates 1-D tensors.
inline Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  return parts.front().graph->emit(
      "concat", parts,
      [](Inputs in, Tensor& out) {
        std::size_t n = 0;
        for (const Tensor* t : in) {
          detail::require_rank(*t, 1, "concat");
          n += t->size();
        }
        detail::ensure_shape(out, {n});
        std::size_t off = 0;
        for (const Tensor* t : in) {
          std::copy(t->data(), t->data() + t->size(), out.data() + off);
          off += t->size();
        }
      },
      [](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < in.size(); ++k) {
          if (gin[k]) {
            for (std::size_t i = 0; i < in[k]->size(); ++i) (*gin[k])[i] += g[off + i];
          }
          off += in[k]->size();
        }
      });
}

inline Var slice(Var a, std::size_t offset, std::size_t length) {
  return a.graph->emit(
      "slice", {a},
      [offset, length](Inputs in, Tensor& out) {
        detail::require_rank(*in[0], 1, "slice");
        if (length == 0 || offset + length > in[0]->size()) {
          throw ShapeError("slice [" + std::to_string(offset) + ", +" + std::to_string(length) + ") out of " +
                           in[0]->shape_string());
        }
        detail::ensure_shape(out, {length});
        std::copy(in[0]->data() + offset, in[0]->data() + offset + length, out.data());
      },
      [offset, length](Inputs, const Tensor&, const Tensor& g, GradInputs gin) {
        if (!gin[0]) return;
        for (std::size_t i = 0; i < length; ++i) (*gin[0])[offset + i] += g[i];
      });
}

inline Var row(Var m, std::size_t r) {
  return m.graph->emit(
      "row", {m},
      [r](Inputs in, Tensor& out) {
        detail::require_rank(*in[0], 2, "row");
        if (r >= in[0]->rows()) throw ShapeError("row " + std::to_string(r) + " out of " + in[0]->shape_string());
        const std::size_t c = in[0]->cols();
        detail::ensure_shape(out, {c});
        std::copy(in[0]->data() + r * c, in[0]->data() + (r + 1) * c, out.data());
      },
      [r](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
        if (!gin[0]) return;
        const std::size_t c = in[0]->cols();
        for (std::size_t j = 0; j < c; ++j) (*gin[0])[r * c + j] += g[j];
      });
}

/// Stacks k equal-length vectors as the rows of a [k x n] matrix.
inline Var stack_rows(const std::vector<Var>& rows) {
  if (rows.empty()) throw ShapeError("stack_rows: no inputs");
  return rows.front().graph->emit(
      "stack_rows", rows,
      [](Inputs in, Tensor& out) {
        const std::size_t n = in[0]->size();
        for (const Tensor* t : in) {
          detail::require_rank(*t, 1, "stack_rows");
          if (t->size() != n) throw ShapeError("stack_rows: ragged rows");
        }
        detail::ensure_shape(out, {in.size(), n});
        for (std::size_t k = 0; k < in.size(); ++k) std::copy(in[k]->data(), in[k]->data() + n, out.data() + k * n);
      },
      [](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
        const std::size_t n = in[0]->size();
        for (std::size_t k = 0; k < in.size(); ++k) {
          if (!gin[k]) continue;
          for (std::size_t j = 0; j < n; ++j) (*gin[k])[j] += g[k * n + j];
        }
      });
}

/// Stacks k equal-length vectors as the columns of an [n x k] matrix.
inline Var stack_cols(const std::vector<Var>& cols) {
  if (cols.empty()) throw ShapeError("stack_cols: no inputs");
  return cols.front().graph->emit(
      "stack_cols", cols,
      [](Inputs in, Tensor& out) {
        const std::size_t n = in[0]->size();
        for (const Tensor* t : in) {
          detail::require_rank(*t, 1, "stack_cols");
          if (t->size() != n) throw ShapeError("stack_cols: ragged columns");
        }
        const std::size_t k = in.size();
        detail::ensure_shape(out, {n, k});
        for (std::size_t c = 0; c < k; ++c) {
          for (std::size_t i = 0; i < n; ++i) out(i, c) = (*in[c])[i];
        }
      },
      [](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
        const std::size_t n = in[0]->size();
        const std::size_t k = in.size();
        for (std::size_t c = 0; c < k; ++c) {
          if (!gin[c]) continue;
          for (std::size_t i = 0; i < n; ++i) (*gin[c])[i] += g(i, c);
        }
      });
}

/// Appends the same vector v[k] to every row of M[m x n] -> [m x (n + k)].
inline Var append_cols(Var m, Var v) {
  return m.graph->emit(
      "append_cols", {m, v},
      [](Inputs in, Tensor& out) {
        const Tensor& M = *in[0];
        const Tensor& v = *in[1];
        detail::require_rank(M, 2, "append_cols matrix");
        detail::require_rank(v, 1, "append_cols vector");
        const std::size_t r = M.rows(), c = M.cols(), k = v.size();
        detail::ensure_shape(out, {r, c + k});
        for (std::size_t i = 0; i < r; ++i) {
          std::copy(M.data() + i * c, M.data() + (i + 1) * c, out.data() + i * (c + k));
          std::copy(v.data(), v.data() + k, out.data() + i * (c + k) + c);
        }
      },
      [](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
        const std::size_t r = in[0]->rows(), c = in[0]->cols(), k = in[1]->size();
        for (std::size_t i = 0; i < r; ++i) {
          if (gin[0]) {
            for (std::size_t j = 0; j < c; ++j) (*gin[0])(i, j) += g(i, j);
          }
          if (gin[1]) {
            for (std::size_t j = 0; j < k; ++j) (*gin[1])[j] += g(i, c + j);
          }
        }
      });
}

/// Rows of E[v x d] selected by ids -> [n x d].
inline Var gather_rows(Var table, std::vector<std::size_t> ids) {
  if (ids.empty()) throw ShapeError("gather_rows: empty index list");
  return table.graph->emit(
      "gather_rows", {table},
      [ids](Inputs in, Tensor& out) {
        const Tensor& E = *in[0];
        detail::require_rank(E, 2, "gather_rows");
        const std::size_t d = E.cols();
        detail::ensure_shape(out, {ids.size(), d});
        for (std::size_t i = 0; i < ids.size(); ++i) {
          if (ids[i] >= E.rows()) {
            throw ShapeError("gather_rows: index " + std::to_string(ids[i]) + " out of " + E.shape_string());
          }
          std::copy(E.data() + ids[i] * d, E.data() + (ids[i] + 1) * d, out.data() + i * d);
        }
      },
      [ids](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
        if (!gin[0]) return;
        const std::size_t d = in[0]->cols();
        for (std::size_t i = 0; i < ids.size(); ++i) {
          for (std::size_t j = 0; j < d; ++j) (*gin[0])(ids[i], j) += g(i, j);
        }
      });
}

/// Same-padded 1-D convolution along rows of X[L x Cin] with an odd kernel.
/// Weight layout is [Cout x (Cin * K)], indexed (o, c * K + k).
inline Var conv1d(Var x, Var w, Var b, std::size_t kernel) {
  if (kernel % 2 == 0) throw ShapeError("conv1d: kernel size must be odd");
  return x.graph->emit(
      "conv1d", {x, w, b},
      [kernel](Inputs in, Tensor& out) {
        const Tensor& X = *in[0];
        const Tensor& W = *in[1];
        const Tensor& B = *in[2];
        detail::require_rank(X, 2, "conv1d input");
        detail::require_rank(W, 2, "conv1d weight");
        const std::size_t L = X.rows(), cin = X.cols(), cout = W.rows();
        if (W.cols() != cin * kernel || B.size() != cout) {
          throw ShapeError("conv1d: weight " + W.shape_string() + " / bias " + B.shape_string() +
                           " incompatible with input " + X.shape_string());
        }
        detail::ensure_shape(out, {L, cout});
        const long half = static_cast<long>(kernel / 2);
        for (std::size_t t = 0; t < L; ++t) {
          for (std::size_t o = 0; o < cout; ++o) {
            double s = B[o];
            const double* wrow = W.data() + o * cin * kernel;
            for (std::size_t k = 0; k < kernel; ++k) {
              const long src = static_cast<long>(t) + static_cast<long>(k) - half;
              if (src < 0 || src >= static_cast<long>(L)) continue;
              const double* xrow = X.data() + static_cast<std::size_t>(src) * cin;
              for (std::size_t c = 0; c < cin; ++c) s += wrow[c * kernel + k] * xrow[c];
            }
            out(t, o) = s;
          }
        }
      },
      [kernel](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
        const Tensor& X = *in[0];
        const Tensor& W = *in[1];
        const std::size_t L = X.rows(), cin = X.cols(), cout = W.rows();
        const long half = static_cast<long>(kernel / 2);
        for (std::size_t t = 0; t < L; ++t) {
          for (std::size_t o = 0; o < cout; ++o) {
            const double go = g(t, o);
            if (go == 0.0) continue;
            if (gin[2]) (*gin[2])[o] += go;
            for (std::size_t k = 0; k < kernel; ++k) {
              const long src = static_cast<long>(t) + static_cast<long>(k) - half;
              if (src < 0 || src >= static_cast<long>(L)) continue;
              const std::size_t s = static_cast<std::size_t>(src);
              for (std::size_t c = 0; c < cin; ++c) {
                if (gin[0]) (*gin[0])(s, c) += go * W(o, c * kernel + k);
                if (gin[1]) (*gin[1])(o, c * kernel + k) += go * X(s, c);
              }
            }
          }
        }
      });
}

/// M[t] - M[t-1] for t = 1..T-1 -> [(T-1) x C]; requires T >= 2.
inline Var row_diff(Var m) {
  return m.graph->emit(
      "row_diff", {m},
      [](Inputs in, Tensor& out) {
        const Tensor& M = *in[0];
        detail::require_rank(M, 2, "row_diff");
        if (M.rows() < 2) throw ShapeError("row_diff: need at least two rows, got " + M.shape_string());
        const std::size_t T = M.rows(), C = M.cols();
        detail::ensure_shape(out, {T - 1, C});
        for (std::size_t t = 1; t < T; ++t) {
          for (std::size_t c = 0; c < C; ++c) out(t - 1, c) = M(t, c) - M(t - 1, c);
        }
      },
      [](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
        if (!gin[0]) return;
        const std::size_t T = in[0]->rows(), C = in[0]->cols();
        for (std::size_t t = 1; t < T; ++t) {
          for (std::size_t c = 0; c < C; ++c) {
            (*gin[0])(t, c) += g(t - 1, c);
            (*gin[0])(t - 1, c) -= g(t - 1, c);
          }
        }
      });
}

/// raw / sum(raw) when sum(raw) >= floor, otherwise `fallback` (gradient routes
/// to whichever branch produced the value).
inline Var normalize_or(Var raw, Var fallback, double floor = 1e-8) {
  return raw.graph->emit(
      "normalize_or", {raw, fallback},
      [floor](Inputs in, Tensor& out) {
        detail::require_same(*in[0], *in[1], "normalize_or");
        detail::ensure_shape(out, in[0]->shape());
        double s = 0.0;
        for (double v : in[0]->values()) s += v;
        if (s < floor) {
          out = *in[1];
        } else {
          for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*in[0])[i] / s;
        }
      },
      [floor](Inputs in, const Tensor& y, const Tensor& g, GradInputs gin) {
        double s = 0.0;
        for (double v : in[0]->values()) s += v;
        if (s < floor) {
          if (gin[1]) {
            for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] += g[i];
          }
          return;
        }
        if (!gin[0]) return;
        double gy = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) gy += g[i] * y[i];
        for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += (g[i] - gy) / s;
      });
}

/// out[0] = 0, out[n] = v[n-1], with the last entry also keeping v[N-1].
inline Var shift_sticky(Var v) {
  return v.graph->emit(
      "shift_sticky", {v},
      [](Inputs in, Tensor& out) {
        const Tensor& x = *in[0];
        detail::require_rank(x, 1, "shift_sticky");
        const std::size_t n = x.size();
        detail::ensure_shape(out, x.shape());
        if (n == 1) {
          out[0] = x[0];
          return;
        }
        out[0] = 0.0;
        for (std::size_t i = 1; i < n; ++i) out[i] = x[i - 1];
        out[n - 1] += x[n - 1];
      },
      [](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
        if (!gin[0]) return;
        const std::size_t n = in[0]->size();
        if (n == 1) {
          (*gin[0])[0] += g[0];
          return;
        }
        for (std::size_t i = 1; i < n; ++i) (*gin[0])[i - 1] += g[i];
        (*gin[0])[n - 1] += g[n - 1];
      });
}

/// Mean squared error over all entries.
inline Var mse(Var a, Var b) {
  Var d = sub(a, b);
  return mean(square(d));
}

/// Mean binary cross-entropy of logits against fixed 0/1 targets.
inline Var bce_with_logits(Var logits, const Tensor& targets) {
  return logits.graph->emit(
      "bce_with_logits", {logits},
      [targets](Inputs in, Tensor& out) {
        detail::require_same(*in[0], targets, "bce_with_logits");
        detail::ensure_shape(out, {1});
        double s = 0.0;
        for (std::size_t i = 0; i < targets.size(); ++i) {
          const double z = (*in[0])[i];
          // max(z,0) - z*y + log(1 + exp(-|z|))
          s += std::max(z, 0.0) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
        }
        out[0] = s / static_cast<double>(targets.size());
      },
      [targets](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
        if (!gin[0]) return;
        const double k = g[0] / static_cast<double>(targets.size());
        for (std::size_t i = 0; i < targets.size(); ++i) {
          const double z = (*in[0])[i];
          const double p = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
          (*gin[0])[i] += k * (p - targets[i]);
        }
      });
}

/// Value copy without gradient flow.
inline Var detach(Var a) {
  return a.graph->emit(
      "detach", {a}, [](Inputs in, Tensor& out) { out = *in[0]; },
      [](Inputs, const Tensor&, const Tensor&, GradInputs) {});
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

namespace detail {

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(std::abs(analytic), 1e-8);
}

template <class Perturb>
double finite_diff_core(Graph& graph, Var output, const Tensor& analytic, std::size_t count, double step,
                        Perturb&& perturb) {
  if (!(step > 0.0)) throw DomainError("finite_diff_check: step must be positive");
  double worst = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const double saved = perturb(i, 0.0, true);
    perturb(i, saved + step, false);
    graph.forward();
    const double up = output.item();
    perturb(i, saved - step, false);
    graph.forward();
    const double down = output.item();
    perturb(i, saved, false);
    const double numeric = (up - down) / (2.0 * step);
    if (!std::isfinite(numeric)) throw NonFiniteError("finite_diff_check: non-finite central difference");
    worst = std::max(worst, relative_error(analytic[i], numeric));
  }
  graph.forward();
  return worst;
}

}  // namespace detail

/// Max over the parameter's entries of |analytic - central difference| /
/// max(|analytic|, 1e-8). The store is restored before returning.
inline double finite_diff_check(Graph& graph, Var output, ParameterStore& store, ParamId id, double step) {
  graph.forward();
  graph.backward(output);
  const Tensor analytic = graph.param_grad(id);
  Tensor& value = store.value(id);
  return detail::finite_diff_core(graph, output, analytic, value.size(), step,
                                  [&](std::size_t i, double v, bool read) {
                                    if (read) return value[i];
                                    value[i] = v;
                                    return v;
                                  });
}

/// Same check against a named graph input.
inline double finite_diff_check(Graph& graph, Var output, const std::string& input_name, double step) {
  graph.forward();
  graph.backward(output);
  const Tensor analytic = graph.grad(graph.input_var(input_name));
  Tensor& value = graph.mutable_input(input_name);
  return detail::finite_diff_core(graph, output, analytic, value.size(), step,
                                  [&](std::size_t i, double v, bool read) {
                                    if (read) return value[i];
                                    value[i] = v;
                                    return v;
                                  });
}

}  // namespace cadence::ad
