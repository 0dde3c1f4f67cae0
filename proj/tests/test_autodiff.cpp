#include "cadence/autodiff.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

using namespace cadence;
using namespace cadence::ad;
using Catch::Approx;

namespace {

Tensor random_tensor(std::mt19937_64& rng, Tensor::Shape shape, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = u(rng);
  return t;
}

// Keeps values at least `gap` away from a kink at `at`.
Tensor away_from(Tensor t, double at, double gap = 0.05) {
  for (double& v : t.values()) {
    if (std::abs(v - at) < gap) v = at + (v < at ? -gap : gap);
  }
  return t;
}

// Reduces `y` to a scalar through a fixed random projection so that every
// output entry carries a distinct gradient.
Var project(Graph& g, Var y, std::mt19937_64& rng) {
  Var w = g.constant(random_tensor(rng, y.shape(), -1.0, 1.0));
  return sum(mul(y, w));
}

using OpBuilder = std::function<Var(Graph&, const std::vector<Var>&)>;

double op_gradient_error(const std::vector<Tensor>& inputs, const OpBuilder& build, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Graph g;
  std::vector<Var> vars;
  for (std::size_t i = 0; i < inputs.size(); ++i) vars.push_back(g.input("x" + std::to_string(i), inputs[i]));
  Var out = project(g, build(g, vars), rng);
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    worst = std::max(worst, finite_diff_check(g, out, "x" + std::to_string(i), 1e-5));
  }
  return worst;
}

}  // namespace

TEST_CASE("forward: identity, identity matrix and symmetric softmax", "[autodiff][forward]") {
  Graph g;
  Var x = g.input("x", Tensor::vector({1.0, 2.0}));
  CHECK(x.value() == Tensor::vector({1.0, 2.0}));

  Var eye = g.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  CHECK(matvec(eye, x).value() == Tensor::vector({1.0, 2.0}));

  Var z = g.constant(Tensor::vector({0.0, 0.0, 0.0}));
  Var s = softmax(z);
  for (double p : s.value().values()) CHECK(p == Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("forward re-evaluates with new bindings", "[autodiff][forward]") {
  Graph g;
  Var x = g.input("x", Tensor::vector({1.0, 2.0}));
  Var y = sum(square(x));
  CHECK(y.item() == 5.0);
  g.forward({{"x", Tensor::vector({3.0, 4.0})}});
  CHECK(y.item() == 25.0);
}

TEST_CASE("shape mismatch names the offending node", "[autodiff][errors]") {
  Graph g;
  Var w = g.constant(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  Var x = g.input("x", Tensor::vector({1.0, 2.0}));
  try {
    matvec(w, x);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("node 2") != std::string::npos);
    CHECK(msg.find("matvec") != std::string::npos);
  }

  Graph h;
  Var a = h.input("a", Tensor::vector({1.0, 2.0}));
  Var b = add(a, a);
  CHECK_THROWS_AS(h.forward({{"a", Tensor::vector({1.0, 2.0, 3.0})}}), ShapeError);
  (void)b;
}

TEST_CASE("backward: analytic derivatives", "[autodiff][backward]") {
  SECTION("d(x*x)/dx at 3 is 6") {
    Graph g;
    Var x = g.input("x", Tensor::scalar(3.0));
    Var y = mul(x, x);
    g.backward(y);
    CHECK(g.grad(x)[0] == 6.0);
  }
  SECTION("d sum(tanh(x)) / dx at 0 is all ones") {
    Graph g;
    Var x = g.input("x", Tensor::vector({0.0, 0.0, 0.0, 0.0}));
    g.backward(sum(tanh(x)));
    const Tensor gx = g.grad(x);
    for (double v : gx.values()) CHECK(v == 1.0);
  }
  SECTION("non-scalar seed is rejected") {
    Graph g;
    Var x = g.input("x", Tensor::vector({1.0, 2.0}));
    CHECK_THROWS_AS(g.backward(tanh(x)), ShapeError);
  }
  SECTION("unused parameters receive zero gradient") {
    ParameterStore store;
    auto used = store.add("used", Tensor::vector({1.0, 2.0}));
    auto unused = store.add("unused", Tensor::vector({5.0}));
    Graph g;
    Var u = g.param(store, used);
    g.param(store, unused);
    g.backward(sum(square(u)));
    Gradients grads(store);
    g.accumulate(grads);
    CHECK(grads[used][1] == 4.0);
    CHECK(grads[unused][0] == 0.0);
  }
}

TEST_CASE("finite_diff_check on linear layer, constant graph and log-sum-exp", "[autodiff][gradcheck]") {
  std::mt19937_64 rng(7);
  SECTION("linear layer") {
    ParameterStore store;
    auto w = store.add("w", random_tensor(rng, {3, 4}));
    auto b = store.add("b", random_tensor(rng, {3}));
    Graph g;
    Var x = g.constant(random_tensor(rng, {4}));
    Var y = project(g, affine(g.param(store, w), x, g.param(store, b)), rng);
    CHECK(finite_diff_check(g, y, store, w, 1e-5) < 1e-6);
    CHECK(finite_diff_check(g, y, store, b, 1e-5) < 1e-6);
  }
  SECTION("constant graph") {
    ParameterStore store;
    auto p = store.add("p", random_tensor(rng, {3}));
    Graph g;
    g.param(store, p);
    Var c = sum(g.constant(random_tensor(rng, {3})));
    CHECK(finite_diff_check(g, c, store, p, 1e-5) == 0.0);
  }
  SECTION("log-sum-exp of scaled input") {
    ParameterStore store;
    auto p = store.add("c", random_tensor(rng, {10}, 0.0, 1.0));
    Graph g;
    Var y = scale(logsumexp(scale(g.param(store, p), 10.0)), 0.1);
    CHECK(finite_diff_check(g, y, store, p, 1e-5) < 1e-5);
  }
  SECTION("randomised 5x4 matmul + sigmoid chain") {
    ParameterStore store;
    auto w1 = store.add("w1", random_tensor(rng, {5, 4}));
    auto w2 = store.add("w2", random_tensor(rng, {4, 5}));
    Graph g;
    Var x = g.constant(random_tensor(rng, {4}));
    Var h = sigmoid(matvec(g.param(store, w1), x));
    Var y = project(g, sigmoid(matvec(g.param(store, w2), h)), rng);
    CHECK(finite_diff_check(g, y, store, w1, 1e-5) < 1e-4);
    CHECK(finite_diff_check(g, y, store, w2, 1e-5) < 1e-4);
  }
  SECTION("step must be positive") {
    ParameterStore store;
    auto p = store.add("p", Tensor::vector({1.0}));
    Graph g;
    Var y = sum(g.param(store, p));
    CHECK_THROWS_AS(finite_diff_check(g, y, store, p, 0.0), DomainError);
  }
}

TEST_CASE("non-finite intermediates are reported", "[autodiff][errors]") {
  Graph g;
  Var x = g.input("x", Tensor::vector({1.0, 2.0}));
  Var y = sum(log(x));
  CHECK_THROWS_AS(g.forward({{"x", Tensor::vector({-1.0, 2.0})}}), NonFiniteError);
  (void)y;
}

TEST_CASE("every primitive op matches central differences", "[autodiff][gradcheck]") {
  std::mt19937_64 rng(2024);
  constexpr double kTol = 1e-4;
  auto R = [&](Tensor::Shape s) { return random_tensor(rng, std::move(s)); };

  struct Case {
    const char* name;
    std::vector<Tensor> inputs;
    OpBuilder build;
  };
  std::vector<Case> cases = {
      {"add", {R({6}), R({6})}, [](Graph&, const auto& v) { return add(v[0], v[1]); }},
      {"sub", {R({6}), R({6})}, [](Graph&, const auto& v) { return sub(v[0], v[1]); }},
      {"mul", {R({6}), R({6})}, [](Graph&, const auto& v) { return mul(v[0], v[1]); }},
      {"scale", {R({6})}, [](Graph&, const auto& v) { return scale(v[0], -1.7); }},
      {"add_scalar", {R({6})}, [](Graph&, const auto& v) { return add_scalar(v[0], 0.3); }},
      {"one_minus", {R({6})}, [](Graph&, const auto& v) { return one_minus(v[0]); }},
      {"sigmoid", {R({6})}, [](Graph&, const auto& v) { return sigmoid(v[0]); }},
      {"tanh", {R({6})}, [](Graph&, const auto& v) { return tanh(v[0]); }},
      {"relu", {away_from(R({6}), 0.0)}, [](Graph&, const auto& v) { return relu(v[0]); }},
      {"exp", {R({6})}, [](Graph&, const auto& v) { return exp(v[0]); }},
      {"log", {random_tensor(rng, {6}, 0.2, 2.0)}, [](Graph&, const auto& v) { return log(v[0]); }},
      {"square", {R({6})}, [](Graph&, const auto& v) { return square(v[0]); }},
      {"min_const", {away_from(R({6}), 0.5)}, [](Graph&, const auto& v) { return min_const(v[0], 0.5); }},
      {"threshold", {away_from(R({6}), 0.12)}, [](Graph&, const auto& v) { return threshold(v[0], 0.12); }},
      {"sum", {R({6})}, [](Graph&, const auto& v) { return sum(v[0]); }},
      {"mean", {R({6})}, [](Graph&, const auto& v) { return mean(v[0]); }},
      {"dot", {R({6}), R({6})}, [](Graph&, const auto& v) { return dot(v[0], v[1]); }},
      {"mul_scalar", {R({1}), R({6})}, [](Graph&, const auto& v) { return mul_scalar(v[0], v[1]); }},
      {"matvec", {R({3, 5}), R({5})}, [](Graph&, const auto& v) { return matvec(v[0], v[1]); }},
      {"affine", {R({3, 5}), R({5}), R({3})}, [](Graph&, const auto& v) { return affine(v[0], v[1], v[2]); }},
      {"matmul", {R({3, 4}), R({4, 2})}, [](Graph&, const auto& v) { return matmul(v[0], v[1]); }},
      {"vecmat", {R({4}), R({4, 3})}, [](Graph&, const auto& v) { return vecmat(v[0], v[1]); }},
      {"add_rows", {R({4, 3}), R({3})}, [](Graph&, const auto& v) { return add_rows(v[0], v[1]); }},
      {"softmax", {R({7})}, [](Graph&, const auto& v) { return softmax(v[0]); }},
      {"logsumexp", {R({7})}, [](Graph&, const auto& v) { return logsumexp(v[0]); }},
      {"concat", {R({3}), R({2}), R({4})}, [](Graph&, const auto& v) { return concat({v[0], v[1], v[2]}); }},
      {"slice", {R({8})}, [](Graph&, const auto& v) { return slice(v[0], 2, 4); }},
      {"row", {R({4, 3})}, [](Graph&, const auto& v) { return row(v[0], 2); }},
      {"stack_rows", {R({3}), R({3})}, [](Graph&, const auto& v) { return stack_rows({v[0], v[1]}); }},
      {"stack_cols", {R({3}), R({3})}, [](Graph&, const auto& v) { return stack_cols({v[0], v[1]}); }},
      {"append_cols", {R({4, 3}), R({2})}, [](Graph&, const auto& v) { return append_cols(v[0], v[1]); }},
      {"gather_rows", {R({5, 3})}, [](Graph&, const auto& v) { return gather_rows(v[0], {4, 0, 4, 2}); }},
      {"conv1d", {R({6, 2}), R({3, 2 * 5}), R({3})},
       [](Graph&, const auto& v) { return conv1d(v[0], v[1], v[2], 5); }},
      {"row_diff", {R({5, 3})}, [](Graph&, const auto& v) { return row_diff(v[0]); }},
      {"normalize_or", {random_tensor(rng, {5}, 0.1, 2.0), R({5})},
       [](Graph&, const auto& v) { return normalize_or(v[0], v[1]); }},
      {"shift_sticky", {R({6})}, [](Graph&, const auto& v) { return shift_sticky(v[0]); }},
      {"mse", {R({4, 3}), R({4, 3})}, [](Graph&, const auto& v) { return mse(v[0], v[1]); }},
      {"bce_with_logits", {R({5})},
       [](Graph&, const auto& v) { return bce_with_logits(v[0], Tensor::vector({0, 0, 1, 0, 1})); }},
  };

  std::uint64_t seed = 1;
  for (const auto& c : cases) {
    INFO("op " << c.name);
    CHECK(op_gradient_error(c.inputs, c.build, seed++) < kTol);
  }
}

TEST_CASE("LSTM-style recurrent composition matches central differences", "[autodiff][gradcheck]") {
  std::mt19937_64 rng(11);
  ParameterStore store;
  const std::size_t in = 3, hid = 4;
  auto w = store.add("w", random_tensor(rng, {4 * hid, in + hid}, -0.5, 0.5));
  auto b = store.add("b", random_tensor(rng, {4 * hid}, -0.5, 0.5));
  Graph g;
  Var h = g.constant(Tensor({hid}, 0.0));
  Var c = g.constant(Tensor({hid}, 0.0));
  for (int t = 0; t < 3; ++t) {
    Var x = g.constant(random_tensor(rng, {in}));
    Var gates = affine(g.param(store, w), concat({x, h}), g.param(store, b));
    Var i = sigmoid(slice(gates, 0, hid));
    Var f = sigmoid(slice(gates, hid, hid));
    Var u = tanh(slice(gates, 2 * hid, hid));
    Var o = sigmoid(slice(gates, 3 * hid, hid));
    c = add(mul(f, c), mul(i, u));
    h = mul(o, tanh(c));
  }
  Var y = project(g, h, rng);
  CHECK(finite_diff_check(g, y, store, w, 1e-5) < 1e-4);
  CHECK(finite_diff_check(g, y, store, b, 1e-5) < 1e-4);
}

TEST_CASE("softmax outputs are a distribution", "[autodiff][property]") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    Graph g;
    const std::size_t n = 1 + trial % 17;
    Var s = softmax(g.constant(random_tensor(rng, {n}, -30.0, 30.0)));
    double total = 0.0;
    for (double p : s.value().values()) {
      CHECK(p >= 0.0);
      total += p;
    }
    CHECK(std::abs(total - 1.0) <= 1e-9);
  }
}

TEST_CASE("identical inputs give bit-identical forward and backward", "[autodiff][determinism]") {
  auto run = [] {
    std::mt19937_64 rng(99);
    ParameterStore store;
    auto w = store.add("w", random_tensor(rng, {6, 6}));
    Graph g;
    Var x = g.constant(random_tensor(rng, {6}));
    Var y = sum(tanh(matvec(g.param(store, w), tanh(matvec(g.param(store, w), x)))));
    g.backward(y);
    return std::make_pair(y.item(), g.param_grad(w));
  };
  auto a = run();
  auto b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}
