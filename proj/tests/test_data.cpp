#include "cadence/io.hpp"
#include "cadence/nn.hpp"
#include "cadence/prosody.hpp"
#include "cadence/stats.hpp"
#include "cadence/synthdata.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <sstream>

using namespace cadence;
using namespace cadence::synth;
using Catch::Approx;

namespace {

const std::vector<SyntheticUtterance>& default_corpus() {
  static const auto corpus = generate_corpus(CorpusConfig{});
  return corpus;
}

SyntheticUtterance handmade(std::vector<std::size_t> durations) {
  SyntheticUtterance u;
  u.id = "x";
  u.symbols = SymbolSequence::parse("sil p1:1 p2:0 .", 12);
  u.durations = std::move(durations);
  return u;
}

}  // namespace

// --- synthdata ------------------------------------------------------------

TEST_CASE("default corpus has the configured size and consistent shapes", "[synthdata]") {
  const auto& corpus = default_corpus();
  REQUIRE(corpus.size() == 200);
  for (const auto& u : corpus) {
    CHECK(u.durations.size() == u.symbols.size());
    CHECK(u.features.rows() == u.frames());
    CHECK(u.features.cols() == kFeatureWidth);
    for (std::size_t d : u.durations) CHECK(d >= 1);
    CHECK(u.symbols[0].silence);
    CHECK(u.symbols[u.symbols.size() - 1].silence);
    CHECK(u.features.all_finite());
  }
}

TEST_CASE("same seed gives identical corpora, different seeds differ", "[synthdata]") {
  const auto a = generate_corpus(CorpusConfig{});
  const auto& b = default_corpus();
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].symbols.symbols() == b[i].symbols.symbols());
    CHECK(a[i].durations == b[i].durations);
    CHECK(a[i].pace_factor == b[i].pace_factor);
    CHECK(a[i].features == b[i].features);
  }
  CorpusConfig other;
  other.seed = 2;
  const auto c = generate_corpus(other);
  std::size_t same = 0;
  for (std::size_t i = 0; i < c.size(); ++i) same += c[i].durations == a[i].durations;
  CHECK(same < 10);
}

TEST_CASE("measured pace ranks exactly as the configured factors", "[synthdata][prosody]") {
  const auto& corpus = default_corpus();
  std::vector<double> factors, measured;
  for (const auto& u : corpus) {
    factors.push_back(u.pace_factor);
    measured.push_back(prosody::compute_pace(u.durations, u.symbols.pause_flags(), CorpusConfig{}.frame_period));
  }
  CHECK(stats::spearman(factors, measured) == 1.0);
}

TEST_CASE("pace and pitch factors are drawn independently", "[synthdata]") {
  const auto& corpus = default_corpus();
  std::vector<double> lp, lv;
  for (const auto& u : corpus) {
    lp.push_back(u.pace_factor);
    lv.push_back(u.pitch_factor);
  }
  CHECK(std::abs(stats::pearson(lp, lv)) < 0.1);
  for (auto& x : lp) x = std::log(x);
  for (auto& x : lv) x = std::log(x);
  CHECK(std::abs(stats::pearson(lp, lv)) < 0.1);
}

TEST_CASE("zero pitch variance factor gives zero pitch span everywhere", "[synthdata][prosody]") {
  CorpusConfig cfg;
  cfg.pitch_base = 0.0;
  cfg.utterances = 40;
  cfg.validation = 4;
  for (const auto& u : generate_corpus(cfg)) {
    const auto p = measure_prosody(u, cfg.frame_period);
    REQUIRE(p.has_value());
    CHECK(p->pitch_span == 0.0);
  }
}

TEST_CASE("doubling the frame budget doubles every duration", "[synthdata]") {
  // The allocation behind the pace factor: scaling the total by 2 doubles each share.
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> w(3, 12), total(5, 200);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<std::size_t> weights(1 + trial % 9);
    for (auto& x : weights) x = w(rng);
    const std::size_t t = std::max(weights.size(), total(rng));
    const auto one = allocate_durations(t, weights);
    const auto two = allocate_durations(2 * t, weights);
    REQUIRE(one.size() == two.size());
    bool doubled = true;
    for (std::size_t i = 0; i < one.size(); ++i) doubled = doubled && two[i] == 2 * one[i];
    const std::size_t sum = std::accumulate(one.begin(), one.end(), std::size_t{0});
    CHECK(sum == t);
    // Largest remainder can round one share up at 1x and split it at 2x;
    // when all shares are exact the doubling must hold.
    bool exact = true;
    const std::size_t wsum = std::accumulate(weights.begin(), weights.end(), std::size_t{0});
    for (auto x : weights) exact = exact && (t * x) % wsum == 0;
    if (exact) CHECK(doubled);
  }
  const std::vector<std::size_t> weights{5, 10, 15};
  CHECK(allocate_durations(30, weights) == std::vector<std::size_t>{5, 10, 15});
  CHECK(allocate_durations(60, weights) == std::vector<std::size_t>{10, 20, 30});
  const double period = CorpusConfig{}.frame_period;
  const std::vector<bool> none(3, false);
  CHECK(prosody::compute_pace(allocate_durations(60, weights), none, period) -
            prosody::compute_pace(allocate_durations(30, weights), none, period) ==
        Approx(std::log(2.0)).margin(1e-12));
}

TEST_CASE("rendering expands durations and keeps silence quiet", "[synthdata]") {
  const auto tables = make_tables(CorpusConfig{});
  auto u = handmade({2, 3, 1});
  u.features = render_targets(u, tables);
  CHECK(u.features.rows() == 6);
  for (std::size_t t = 0; t < 2; ++t) {
    for (std::size_t c = 0; c < kTemplateChannels; ++c) CHECK(u.features(t, c) == 0.0);
    CHECK(u.features(t, kPitchChannel) == 0.0);
  }
  CHECK(ground_truth_alignment(u) == std::vector<std::size_t>{0, 0, 1, 1, 1, 2});
  // The ramp channel restarts at every symbol.
  CHECK(u.features(2, kRampChannel) < u.features(3, kRampChannel));
  CHECK(u.features(5, kRampChannel) == 0.5);
  CHECK_THROWS_AS(render_targets(handmade({2, 3}), tables), DomainError);
}

TEST_CASE("distinct symbols render distinct templates", "[synthdata]") {
  const CorpusConfig cfg;
  const auto tables = make_tables(cfg);
  for (std::size_t a = 0; a < tables.templates.size(); ++a) {
    for (std::size_t b = a + 1; b < tables.templates.size(); ++b) CHECK(tables.templates[a] != tables.templates[b]);
  }
}

TEST_CASE("degenerate corpus configs are rejected", "[synthdata]") {
  CorpusConfig cfg;
  cfg.alphabet = 0;
  CHECK_THROWS_AS(generate_corpus(cfg), ConfigError);
  cfg = {};
  cfg.validation = cfg.utterances;
  CHECK_THROWS_AS(generate_corpus(cfg), ConfigError);
  cfg = {};
  cfg.min_phones = 10;
  CHECK_THROWS_AS(generate_corpus(cfg), ConfigError);
}

// --- io -------------------------------------------------------------------

TEST_CASE("matrix container round-trips bit-exactly", "[io]") {
  Tensor t({3, 4}, 0.0);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::sin(1.0 + i) * 1e-300 * (i % 2 ? 1e300 : 1.0);
  t[5] = -0.0;
  t[7] = std::numeric_limits<double>::denorm_min();
  std::stringstream ss;
  io::write_matrix(ss, t);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "CDMX");
  CHECK(bytes.size() == 4 + 4 + 4 + 2 * 4 + 12 * 8);
  const Tensor back = io::read_matrix(ss);
  REQUIRE(back.shape() == t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) CHECK(std::bit_cast<std::uint64_t>(back[i]) == std::bit_cast<std::uint64_t>(t[i]));
}

TEST_CASE("containers are little-endian", "[io]") {
  std::stringstream ss;
  io::write_matrix(ss, Tensor::vector({1.0}));
  const std::string b = ss.str();
  // version 1, rank 1, dim 1, then 1.0 = 0x3FF0000000000000.
  CHECK(b.substr(4, 4) == std::string("\x01\x00\x00\x00", 4));
  CHECK(b.substr(8, 4) == std::string("\x01\x00\x00\x00", 4));
  CHECK(b.substr(16, 8) == std::string("\x00\x00\x00\x00\x00\x00\xf0\x3f", 8));
}

TEST_CASE("malformed containers raise data errors", "[io]") {
  std::stringstream empty;
  CHECK_THROWS_AS(io::read_matrix(empty), DataError);
  std::stringstream magic("XXXX\x01\x00\x00\x00");
  CHECK_THROWS_AS(io::read_matrix(magic), DataError);
  std::stringstream full;
  io::write_matrix(full, Tensor({2, 2}, 1.0));
  std::string bytes = full.str();
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(io::read_matrix(truncated), DataError);
  bytes[4] = 9;
  std::stringstream version(bytes);
  CHECK_THROWS_AS(io::read_matrix(version), DataError);
}

TEST_CASE("checkpoint tables round-trip in name order", "[io]") {
  io::TensorTable t{{"b", Tensor::vector({1, 2, 3})}, {"a", Tensor({2, 1}, -4.5)}};
  std::stringstream ss;
  io::write_checkpoint(ss, t);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "CDCK");
  CHECK(bytes.find('a') < bytes.find('b', 12));
  const auto back = io::read_checkpoint(ss);
  CHECK(back == t);

  std::stringstream dup;
  io::write_checkpoint(dup, t);
  std::string d = dup.str();
  d[8] = 3;  // claims one more entry than present
  std::stringstream dups(d);
  CHECK_THROWS_AS(io::read_checkpoint(dups), DataError);
}

TEST_CASE("CSV export writes full precision rows", "[io]") {
  std::ostringstream os;
  io::write_csv(os, Tensor::matrix(2, 2, {0.1, 2.0, -3.0, 1e-20}));
  CHECK(os.str() == "0.10000000000000001,2\n-3,9.9999999999999995e-21\n");
}

// --- nn -------------------------------------------------------------------

TEST_CASE("linear and LSTM layers differentiate correctly", "[nn][grad]") {
  ad::ParameterStore store;
  std::mt19937_64 rng(9);
  const auto lin = nn::Linear::make(store, rng, "lin", 3, 4);
  const auto cell = nn::Lstm::make(store, rng, "lstm", 4, 5);
  ad::Graph g;
  std::vector<ad::Var> xs;
  for (int t = 0; t < 3; ++t) {
    xs.push_back(lin(g, store, g.input("x" + std::to_string(t), Tensor::vector({0.3 * t, -0.2, 0.7 - t * 0.1}))));
  }
  const auto hs = nn::run_lstm(g, store, cell, xs, true);
  auto loss = ad::sum(ad::square(ad::concat(hs)));
  for (ad::ParamId p = 0; p < store.size(); ++p) CHECK(ad::finite_diff_check(g, loss, store, p, 1e-6) < 1e-4);
  CHECK(ad::finite_diff_check(g, loss, "x1", 1e-6) < 1e-4);
}

TEST_CASE("LSTM forget gate bias starts at one", "[nn]") {
  ad::ParameterStore store;
  std::mt19937_64 rng(1);
  const auto cell = nn::Lstm::make(store, rng, "c", 2, 3);
  const Tensor& b = store.value(cell.b);
  CHECK(std::vector<double>(b.values().begin(), b.values().end()) == std::vector<double>{0, 0, 0, 1, 1, 1, 0, 0, 0, 0, 0, 0});
  CHECK(cell.in(store) == 2);
}

TEST_CASE("gradient clipping caps the global norm", "[nn]") {
  ad::ParameterStore store;
  store.add("a", Tensor::vector({3.0, 0.0}));
  store.add("b", Tensor::vector({4.0}));
  ad::Gradients g(store);
  g[0] = Tensor::vector({3.0, 0.0});
  g[1] = Tensor::vector({4.0});
  CHECK(nn::clip_grad_norm(g, 10.0) == 5.0);
  CHECK(g.norm() == 5.0);
  CHECK(nn::clip_grad_norm(g, 1.0) == 5.0);
  CHECK(g.norm() == Approx(1.0));
  CHECK(g[0][0] == Approx(0.6));
}

TEST_CASE("momentum and Adam steps match hand computation", "[nn][optim]") {
  ad::ParameterStore store;
  const auto w = store.add("w", Tensor::vector({1.0}));
  ad::Gradients g(store);
  g[w] = Tensor::vector({0.5});

  nn::Optimizer sgd(store, {nn::OptimizerKind::momentum, 0.1, 0.9, 0.999, 1e-8});
  sgd.step(store, g);  // m = 0.5, w = 1 - 0.05
  CHECK(store.value(w)[0] == Approx(0.95).epsilon(1e-15));
  sgd.step(store, g);  // m = 0.45 + 0.5
  CHECK(store.value(w)[0] == Approx(0.95 - 0.095).epsilon(1e-15));

  store.value(w)[0] = 1.0;
  nn::Optimizer adam(store, {nn::OptimizerKind::adam, 0.01, 0.9, 0.999, 1e-8});
  adam.step(store, g);  // bias-corrected first step moves by lr * sign(g)
  CHECK(store.value(w)[0] == Approx(0.99).epsilon(1e-9));
  CHECK(adam.steps() == 1);
  CHECK_THROWS_AS(nn::parse_optimizer("sgd"), DomainError);
  CHECK(nn::parse_optimizer(nn::to_string(nn::OptimizerKind::adam)) == nn::OptimizerKind::adam);
}
