#pragma once

// Toy attention encoder-decoder over symbol sequences.
//
// Encoder: phone + stress + phrase embeddings -> conv1d/relu -> BiLSTM, with
// the prosody embedding appended to every output row.
// Decoder step t:
//   s_p = prenet([q_{t-1}; y_{t-1}])          (double feed; [y; y] at inference)
//   h1  = LSTM1([s_p; x_{t-1}])
//   b_t = location-sensitive additive attention(h1, a_{t-1}, sum a_<t)
//   a_t = b_t, or augmented_step(b_t, b_{t-1}, alpha, beta)
//   x_t = a_t * Enc
//   h2  = LSTM2([h1; x_t]);  y_t, stop_t = linear([h2; x_t])
// Post-net: residual conv stack over the whole Y.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cadence/align.hpp"
#include "cadence/autodiff.hpp"
#include "cadence/io.hpp"
#include "cadence/nn.hpp"
#include "cadence/prosody.hpp"
#include "cadence/stats.hpp"
#include "cadence/symbols.hpp"

namespace cadence::seq2seq {

using ad::Graph;
using ad::ParameterStore;
using ad::ParamId;
using ad::Var;

enum class AttentionMode { regular, augmented };
enum class FeedMode { train, infer };

inline AttentionMode parse_attention(const std::string& s) {
  if (s == "regular") return AttentionMode::regular;
  if (s == "augmented") return AttentionMode::augmented;
  throw DomainError("unknown attention mode '" + s + "' (expected regular or augmented)");
}

inline const char* to_string(AttentionMode m) { return m == AttentionMode::regular ? "regular" : "augmented"; }

struct ModelConfig {
  std::size_t alphabet = 12;
  std::size_t embedding = 32;
  std::size_t encoder_kernel = 5;
  std::size_t encoder_hidden = 64;  // per direction
  std::size_t decoder_hidden = 64;
  std::size_t prenet_hidden = 64;
  std::size_t prenet_out = 32;
  std::size_t attention_dim = 32;
  std::size_t location_filters = 8;
  std::size_t location_kernel = 7;
  std::size_t frame_width = 8;
  std::size_t frames_per_step = 3;
  std::size_t postnet_channels = 16;
  std::size_t postnet_kernel = 5;
  bool double_feed = true;
  double prenet_dropout = 0.5;  // training only
  std::uint64_t seed = 1;

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string("model.") + name + " must be positive");
    };
    positive(alphabet, "alphabet");
    positive(embedding, "embedding");
    positive(encoder_hidden, "encoder_hidden");
    positive(decoder_hidden, "decoder_hidden");
    positive(prenet_hidden, "prenet_hidden");
    positive(prenet_out, "prenet_out");
    positive(attention_dim, "attention_dim");
    positive(location_filters, "location_filters");
    positive(frame_width, "frame_width");
    positive(frames_per_step, "frames_per_step");
    positive(postnet_channels, "postnet_channels");
    if (!(prenet_dropout >= 0.0 && prenet_dropout < 1.0)) throw ConfigError("model.prenet_dropout must lie in [0, 1)");
    for (auto [k, name] : {std::pair{encoder_kernel, "encoder_kernel"}, std::pair{location_kernel, "location_kernel"},
                           std::pair{postnet_kernel, "postnet_kernel"}}) {
      if (k % 2 == 0) throw ConfigError(std::string("model.") + name + " must be odd");
    }
  }
};

class Model {
 public:
  Model() = default;
  explicit Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    const std::size_t E = cfg_.embedding, H = cfg_.encoder_hidden, Hd = cfg_.decoder_hidden;
    const std::size_t D = context_width(), A = cfg_.attention_dim, F = cfg_.frame_width;
    const std::size_t vocab = SymbolSequence::vocabulary(cfg_.alphabet);

    emb_phone_ = store_.add("enc.emb_phone", nn::uniform(rng, {vocab, E}, 0.5));
    emb_stress_ = store_.add("enc.emb_stress", nn::uniform(rng, {kStressCount, E}, 0.5));
    emb_phrase_ = store_.add("enc.emb_phrase", nn::uniform(rng, {kPhraseTypeCount, E}, 0.5));
    enc_conv_w_ = store_.add("enc.conv.w", nn::glorot(rng, E, E * cfg_.encoder_kernel));
    enc_conv_b_ = store_.add("enc.conv.b", Tensor({E}, 0.0));
    enc_fwd_ = nn::Lstm::make(store_, rng, "enc.lstm_fwd", E, H);
    enc_bwd_ = nn::Lstm::make(store_, rng, "enc.lstm_bwd", E, H);
    prosody_w_ = store_.add("prosody.embed", nn::uniform(rng, {2, 2}, 1.0));

    prenet1_ = nn::Linear::make(store_, rng, "dec.prenet1", (cfg_.double_feed ? 2 : 1) * F, cfg_.prenet_hidden);
    prenet2_ = nn::Linear::make(store_, rng, "dec.prenet2", cfg_.prenet_hidden, cfg_.prenet_out);
    lstm1_ = nn::Lstm::make(store_, rng, "dec.lstm1", cfg_.prenet_out + D, Hd);
    lstm2_ = nn::Lstm::make(store_, rng, "dec.lstm2", Hd + D, Hd);
    h0_1_ = store_.add("dec.lstm1.h0", Tensor({Hd}, 0.0));
    h0_2_ = store_.add("dec.lstm2.h0", Tensor({Hd}, 0.0));

    att_query_ = nn::Linear::make(store_, rng, "att.query", Hd, A);
    att_key_ = store_.add("att.key", nn::glorot(rng, D, A));
    att_loc_w_ = store_.add("att.loc_conv.w", nn::glorot(rng, cfg_.location_filters, 2 * cfg_.location_kernel));
    att_loc_b_ = store_.add("att.loc_conv.b", Tensor({cfg_.location_filters}, 0.0));
    att_loc_proj_ = store_.add("att.loc_proj", nn::glorot(rng, cfg_.location_filters, A));
    att_v_ = store_.add("att.v", nn::uniform(rng, {A}, std::sqrt(3.0 / static_cast<double>(A))));

    alpha_head_ = nn::Linear::make(store_, rng, "aug.alpha", cfg_.prenet_out + D + Hd, 1);
    beta_head_ = nn::Linear::make(store_, rng, "aug.beta", D, 1);

    out_frame_ = nn::Linear::make(store_, rng, "dec.out_frame", Hd + D, F * cfg_.frames_per_step);
    out_stop_ = nn::Linear::make(store_, rng, "dec.out_stop", Hd + D, cfg_.frames_per_step);

    post1_w_ = store_.add("post.conv1.w", nn::glorot(rng, cfg_.postnet_channels, F * cfg_.postnet_kernel));
    post1_b_ = store_.add("post.conv1.b", Tensor({cfg_.postnet_channels}, 0.0));
    post2_w_ = store_.add("post.conv2.w", Tensor({F, cfg_.postnet_channels * cfg_.postnet_kernel}, 0.0));
    post2_b_ = store_.add("post.conv2.b", Tensor({F}, 0.0));
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& store() { return store_; }
  const ParameterStore& store() const { return store_; }
  std::size_t parameter_count() const { return store_.total_count(); }
  std::size_t encoder_width() const { return 2 * cfg_.encoder_hidden; }
  std::size_t context_width() const { return encoder_width() + 2; }

  // Encoder -----------------------------------------------------------------

  /// N x 2H encoder outputs before prosody conditioning.
  Var encode_base(Graph& g, const SymbolSequence& sym) const {
    if (sym.alphabet() != cfg_.alphabet) throw DomainError("encode: symbol alphabet differs from the model's");
    std::vector<std::size_t> ids, stress, phrase;
    for (const auto& s : sym.symbols()) {
      if (s.id >= SymbolSequence::vocabulary(cfg_.alphabet)) throw DomainError("encode: unknown symbol id");
      ids.push_back(s.id);
      stress.push_back(static_cast<std::size_t>(s.stress));
      phrase.push_back(static_cast<std::size_t>(sym.phrase()));
    }
    Var x = ad::add(ad::add(ad::gather_rows(p(g, emb_phone_), ids), ad::gather_rows(p(g, emb_stress_), stress)),
                    ad::gather_rows(p(g, emb_phrase_), phrase));
    x = ad::relu(ad::conv1d(x, p(g, enc_conv_w_), p(g, enc_conv_b_), cfg_.encoder_kernel));
    std::vector<Var> rows;
    for (std::size_t n = 0; n < sym.size(); ++n) rows.push_back(ad::row(x, n));
    const auto f = nn::run_lstm(g, store_, enc_fwd_, rows);
    const auto b = nn::run_lstm(g, store_, enc_bwd_, rows, true);
    std::vector<Var> out;
    for (std::size_t n = 0; n < rows.size(); ++n) out.push_back(ad::concat({f[n], b[n]}));
    return ad::stack_rows(out);
  }

  Var prosody_embedding(Graph& g, const prosody::NormalizedProsody& pr) const {
    return prosody::embed(g.constant(Tensor::vector({pr.pace, pr.pitch_span})), p(g, prosody_w_));
  }

  /// N x (2H + 2).
  Var encode(Graph& g, const SymbolSequence& sym, Var embedding) const {
    return prosody::condition_encoder(encode_base(g, sym), embedding);
  }

  // Attention ---------------------------------------------------------------

  struct Keys {
    Var enc;       // N x D
    Var enc_proj;  // N x A
  };

  Keys attention_keys(Var enc) const {
    Graph& g = *enc.graph;
    return {enc, ad::matmul(enc, p(g, att_key_))};
  }

  Var initial_attention(Graph& g, Var query, const Keys& keys, Var prev, Var cum, bool use_location = true) const {
    const std::size_t n = keys.enc.shape()[0];
    if (prev.size() != n || cum.size() != n) throw DomainError("initial_attention: alignment length mismatch");
    Var pre = keys.enc_proj;
    if (use_location) {
      Var loc = ad::conv1d(ad::stack_cols({prev, cum}), p(g, att_loc_w_), p(g, att_loc_b_), cfg_.location_kernel);
      pre = ad::add(pre, ad::matmul(loc, p(g, att_loc_proj_)));
    }
    Var energies = ad::matvec(ad::tanh(ad::add_rows(pre, att_query_(g, store_, query))), p(g, att_v_));
    return ad::softmax(energies);
  }

  // Decoder -----------------------------------------------------------------

  /// `dropout` (train mode only) draws inverted-dropout masks for both layers.
  Var prenet_double_feed(Graph& g, Var prev_true, Var prev_pred, FeedMode mode,
                         std::mt19937_64* dropout = nullptr) const {
    if (prev_true.size() != cfg_.frame_width || prev_pred.size() != cfg_.frame_width) {
      throw ShapeError("prenet: frames must have width " + std::to_string(cfg_.frame_width));
    }
    Var in;
    if (cfg_.double_feed) in = mode == FeedMode::train ? ad::concat({prev_true, prev_pred}) : ad::concat({prev_pred, prev_pred});
    else in = mode == FeedMode::train ? prev_true : prev_pred;
    Var h = drop(g, ad::relu(prenet1_(g, store_, in)), dropout);
    return drop(g, ad::relu(prenet2_(g, store_, h)), dropout);
  }

  struct State {
    nn::LstmState l1, l2;
    Var context;    // x_{t-1}
    Var prev;       // a_{t-1}
    Var cum;        // sum of a_<t
    std::optional<Var> prev_initial;  // b_{t-1}
    std::size_t step = 0;
  };

  State initial_state(Graph& g, std::size_t positions) const {
    const std::size_t Hd = cfg_.decoder_hidden;
    State s;
    s.l1 = {p(g, h0_1_), g.constant(Tensor({Hd}, 0.0))};
    s.l2 = {p(g, h0_2_), g.constant(Tensor({Hd}, 0.0))};
    s.context = g.constant(Tensor({context_width()}, 0.0));
    Tensor prev({positions}, 0.0);
    s.prev = g.constant(prev);
    s.cum = g.constant(Tensor({positions}, 0.0));
    return s;
  }

  struct StepOutput {
    std::vector<Var> frames;  // frames_per_step consecutive y_t
    Var stop;                 // one logit per frame
    Var initial;  // b_t
    Var final;    // a_t
    std::optional<Var> alpha, beta;
  };

  StepOutput decoder_step(Graph& g, State& s, Var s_p, const Keys& keys, AttentionMode mode) const {
    s.l1 = lstm1_.step(g, store_, ad::concat({s_p, s.context}), s.l1);
    Var b = initial_attention(g, s.l1.h, keys, s.prev, s.cum);
    StepOutput out{};
    out.initial = b;
    out.final = b;
    if (mode == AttentionMode::augmented && s.prev_initial) {
      Var alpha = ad::sigmoid(alpha_head_(g, store_, ad::concat({s_p, s.context, s.l1.h})));
      Var beta = ad::sigmoid(beta_head_(g, store_, s.context));
      out.final = align::graph::augmented_step(b, *s.prev_initial, alpha, beta);
      out.alpha = alpha;
      out.beta = beta;
    }
    Var context = ad::vecmat(out.final, keys.enc);
    s.l2 = lstm2_.step(g, store_, ad::concat({s.l1.h, context}), s.l2);
    Var feat = ad::concat({s.l2.h, context});
    Var frames = out_frame_(g, store_, feat);
    const std::size_t F = cfg_.frame_width;
    for (std::size_t k = 0; k < cfg_.frames_per_step; ++k) out.frames.push_back(ad::slice(frames, k * F, F));
    out.stop = out_stop_(g, store_, feat);
    s.context = context;
    s.prev = out.final;
    s.cum = ad::add(s.cum, out.final);
    s.prev_initial = b;
    ++s.step;
    return out;
  }

  /// Z = Y + conv(tanh(conv(Y))).
  Var postnet(Graph& g, Var y) const {
    Var h = ad::tanh(ad::conv1d(y, p(g, post1_w_), p(g, post1_b_), cfg_.postnet_kernel));
    return ad::add(y, ad::conv1d(h, p(g, post2_w_), p(g, post2_b_), cfg_.postnet_kernel));
  }

  /// Parameters whose count depends on the feed mode.
  std::size_t prenet_input_width() const { return store_.value(prenet1_.w).cols(); }

 private:
  Var p(Graph& g, ParamId id) const { return g.param(store_, id); }

  Var drop(Graph& g, Var x, std::mt19937_64* rng) const {
    if (!rng || cfg_.prenet_dropout == 0.0) return x;
    const double keep = 1.0 - cfg_.prenet_dropout;
    std::bernoulli_distribution coin(keep);
    Tensor mask(x.shape(), 0.0);
    for (double& v : mask.values()) v = coin(*rng) ? 1.0 / keep : 0.0;
    return ad::mul(x, g.constant(std::move(mask)));
  }

  ModelConfig cfg_;
  ParameterStore store_;
  ParamId emb_phone_ = 0, emb_stress_ = 0, emb_phrase_ = 0, enc_conv_w_ = 0, enc_conv_b_ = 0;
  nn::Lstm enc_fwd_, enc_bwd_;
  ParamId prosody_w_ = 0;
  nn::Linear prenet1_, prenet2_;
  nn::Lstm lstm1_, lstm2_;
  ParamId h0_1_ = 0, h0_2_ = 0;
  nn::Linear att_query_;
  ParamId att_key_ = 0, att_loc_w_ = 0, att_loc_b_ = 0, att_loc_proj_ = 0, att_v_ = 0;
  nn::Linear alpha_head_, beta_head_;
  nn::Linear out_frame_, out_stop_;
  ParamId post1_w_ = 0, post1_b_ = 0, post2_w_ = 0, post2_b_ = 0;
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// 0.5 MSE(Y, Q) + 0.25 MSE(Z, Q) + 0.25 MSE(dZ, dQ); the delta term is
/// absent for T = 1.
inline Var spectral_loss(Var y, Var z, Var q) {
  if (y.shape() != q.shape() || z.shape() != q.shape()) throw ShapeError("spectral_loss: Y, Z and Q must share a shape");
  if (q.shape().size() != 2) throw ShapeError("spectral_loss: expected frames x channels");
  Var loss = ad::add(ad::scale(ad::mse(y, q), 0.5), ad::scale(ad::mse(z, q), 0.25));
  if (q.shape()[0] >= 2) loss = ad::add(loss, ad::scale(ad::mse(ad::row_diff(z), ad::row_diff(q)), 0.25));
  return loss;
}

/// Targets are 1 from the final true frame (index true_length - 1) onwards.
inline Tensor stop_targets(std::size_t steps, std::size_t true_length) {
  if (true_length == 0 || true_length > steps) throw DomainError("stop_targets: true length must lie in [1, steps]");
  Tensor t({steps}, 0.0);
  for (std::size_t i = true_length - 1; i < steps; ++i) t[i] = 1.0;
  return t;
}

inline Var stop_loss(Var logits, std::size_t true_length) {
  return ad::bce_with_logits(logits, stop_targets(logits.size(), true_length));
}

// ---------------------------------------------------------------------------
// Teacher-forced pass and synthesis
// ---------------------------------------------------------------------------

struct TeacherForced {
  Var loss;
  Var spectral;
  Var stop;
  Var guide;  // zero unless ForcingOptions::guide_weight > 0
  Var y, z;
  align::AlignmentMatrix alignment;  // over the true frames only
};

struct ForcingOptions {
  std::size_t stop_pad = 0;
  std::mt19937_64* dropout = nullptr;
  /// Diagonal penalty w * mean(a_t[n] (1 - exp(-(n/N - t/S)^2 / 2g^2))) over
  /// the steps covering true frames. Added to the loss when w > 0.
  double guide_weight = 0.0;
  double guide_width = 0.2;
};

/// Decoder steps run until T + stop_pad frames are covered; frames past T
/// carry only the stop target. Each step sees the last true frame of the
/// previous step (the last target frame once past T).
inline TeacherForced teacher_forced(Graph& g, const Model& m, const SymbolSequence& sym, const Tensor& target,
                                    Var embedding, AttentionMode mode, const ForcingOptions& opt = {}) {
  const std::size_t F = m.config().frame_width, r = m.config().frames_per_step;
  if (target.rank() != 2 || target.cols() != F) throw ShapeError("teacher_forced: target must be T x frame_width");
  const std::size_t T = target.rows();
  const std::size_t steps = (T + opt.stop_pad + r - 1) / r;
  const std::size_t true_steps = (T + r - 1) / r, N = sym.size();
  auto keys = m.attention_keys(m.encode(g, sym, embedding));
  auto state = m.initial_state(g, sym.size());
  Var q = g.constant(target);
  Var zero = g.constant(Tensor({F}, 0.0));
  Var prev_true = zero, prev_pred = zero;
  std::vector<Var> frames, stops, guides;
  TeacherForced out;
  for (std::size_t t = 0; t < steps; ++t) {
    Var s_p = m.prenet_double_feed(g, prev_true, ad::detach(prev_pred), FeedMode::train, opt.dropout);
    auto step = m.decoder_step(g, state, s_p, keys, mode);
    stops.push_back(step.stop);
    if (opt.guide_weight > 0.0 && t < true_steps) {
      Tensor w({N}, 0.0);
      const double tt = static_cast<double>(t) / static_cast<double>(true_steps);
      for (std::size_t n = 0; n < N; ++n) {
        const double d = static_cast<double>(n) / static_cast<double>(N) - tt;
        w[n] = 1.0 - std::exp(-d * d / (2.0 * opt.guide_width * opt.guide_width));
      }
      guides.push_back(ad::dot(step.final, g.constant(std::move(w))));
    }
    for (std::size_t k = 0; k < r; ++k) {
      if (t * r + k >= T) break;
      frames.push_back(step.frames[k]);
      out.alignment.push_back(align::AlignmentVector(step.final.value().storage()));
    }
    prev_true = ad::row(q, std::min(T, (t + 1) * r) - 1);
    prev_pred = step.frames.back();
  }
  out.y = ad::stack_rows(frames);
  out.z = m.postnet(g, out.y);
  out.spectral = spectral_loss(out.y, out.z, q);
  out.stop = stop_loss(ad::concat(stops), T);
  out.loss = ad::add(out.spectral, out.stop);
  if (guides.empty()) {
    out.guide = g.constant(Tensor({1}, 0.0));
  } else {
    out.guide = ad::scale(ad::sum(ad::concat(guides)), 1.0 / static_cast<double>(guides.size() * N));
    out.loss = ad::add(out.loss, ad::scale(out.guide, opt.guide_weight));
  }
  return out;
}

struct SynthesisConfig {
  double stop_threshold = 0.5;
  std::size_t max_length_factor = 10;
};

struct DecoderTrace {
  Tensor y;  // T x F before the post-net
  Tensor z;  // T x F after
  std::vector<double> stop_logits;   // per frame
  align::AlignmentMatrix alignment;  // per frame; frames of one step share a column
  std::vector<double> alpha, beta;   // augmented mode, per step from the second
  std::size_t steps = 0;
  bool truncated = false;

  std::size_t frames() const { return stop_logits.size(); }
};

/// Decodes until a frame's stop probability exceeds the threshold (that frame
/// is the last one kept) or the cap of max_length_factor x N frames.
inline DecoderTrace synthesize(const Model& m, const SymbolSequence& sym, const prosody::NormalizedProsody& pr,
                               AttentionMode mode, const SynthesisConfig& cfg = {}) {
  const std::size_t F = m.config().frame_width;
  const std::size_t cap = cfg.max_length_factor * sym.size();
  if (cap == 0) throw DomainError("synthesize: zero length cap");
  Graph g(false);
  auto keys = m.attention_keys(m.encode(g, sym, m.prosody_embedding(g, pr)));
  auto state = m.initial_state(g, sym.size());
  Var prev = g.constant(Tensor({F}, 0.0));
  DecoderTrace trace;
  std::vector<Var> frames;
  trace.truncated = true;
  while (trace.truncated && frames.size() < cap) {
    Var s_p = m.prenet_double_feed(g, prev, prev, FeedMode::infer);
    auto step = m.decoder_step(g, state, s_p, keys, mode);
    ++trace.steps;
    if (step.alpha) {
      trace.alpha.push_back(step.alpha->item());
      trace.beta.push_back(step.beta->item());
    }
    const Tensor logits = step.stop.value();
    for (std::size_t k = 0; k < step.frames.size() && frames.size() < cap; ++k) {
      frames.push_back(step.frames[k]);
      trace.alignment.push_back(align::AlignmentVector(step.final.value().storage()));
      trace.stop_logits.push_back(logits[k]);
      if (1.0 / (1.0 + std::exp(-logits[k])) > cfg.stop_threshold) {
        trace.truncated = false;
        break;
      }
    }
    prev = step.frames.back();
  }
  Var y = ad::stack_rows(frames);
  trace.y = y.value();
  trace.z = m.postnet(g, y).value();
  return trace;
}

/// q0.95 - q0.05 of one output channel over all frames.
inline double channel_span(const Tensor& frames, std::size_t channel) {
  std::vector<double> v;
  for (std::size_t t = 0; t < frames.rows(); ++t) v.push_back(frames(t, channel));
  std::sort(v.begin(), v.end());
  return stats::quantile_sorted(v, 0.95) - stats::quantile_sorted(v, 0.05);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct Example {
  SymbolSequence symbols;
  Tensor target;  // T x frame_width
  prosody::NormalizedProsody prosody;
};

struct TrainingConfig {
  std::size_t epochs = 90;
  std::size_t batch_size = 4;
  nn::OptimizerConfig optimizer{nn::OptimizerKind::adam, 1e-3};
  double clip_norm = 1.0;
  std::size_t prosody_zero_epochs = 5;
  std::size_t stop_pad = 4;
  double guide_weight = 1.0;
  double guide_width = 0.2;
  std::uint64_t seed = 1;

  void validate() const {
    if (epochs == 0) throw ConfigError("training.epochs must be positive");
    if (batch_size == 0) throw ConfigError("training.batch_size must be positive");
    if (!(optimizer.learning_rate > 0.0)) throw ConfigError("training.learning_rate must be positive");
    if (!(optimizer.momentum >= 0.0 && optimizer.momentum < 1.0)) throw ConfigError("training.momentum must lie in [0, 1)");
    if (!(clip_norm >= 0.0)) throw ConfigError("training.clip_norm must be non-negative");
    if (!(guide_weight >= 0.0)) throw ConfigError("training.guide_weight must be non-negative");
    if (!(guide_width > 0.0)) throw ConfigError("training.guide_width must be positive");
  }
};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double train_spectral = 0.0;
  double train_stop = 0.0;
  double validation_loss = 0.0;
  double validation_entropy = 0.0;
  bool prosody_zeroed = false;
};

struct Evaluation {
  double loss = 0.0;
  double entropy = 0.0;
};

/// Teacher-forced loss and mean alignment entropy over a data set.
inline Evaluation evaluate(const Model& m, std::span<const Example> data, AttentionMode mode, bool zero_prosody,
                           std::size_t stop_pad = 0) {
  if (data.empty()) throw DomainError("evaluate: empty data set");
  Evaluation ev;
  std::vector<align::AlignmentMatrix> alignments;
  for (const auto& ex : data) {
    Graph g(false);
    const auto pr = zero_prosody ? prosody::NormalizedProsody{} : ex.prosody;
    auto tf = teacher_forced(g, m, ex.symbols, ex.target, m.prosody_embedding(g, pr), mode, {stop_pad});
    ev.loss += tf.loss.item();
    alignments.push_back(std::move(tf.alignment));
  }
  ev.loss /= static_cast<double>(data.size());
  ev.entropy = align::mean_entropy(alignments);
  return ev;
}

/// Epoch-at-a-time trainer. Batch order for epoch e depends only on (seed, e),
/// so a run restored from a checkpoint continues exactly as an uninterrupted one.
class Trainer {
 public:
  Trainer(Model& model, TrainingConfig cfg, AttentionMode mode, std::span<const Example> train,
          std::span<const Example> validation)
      : model_(model), cfg_(cfg), mode_(mode), train_(train), validation_(validation),
        opt_(model.store(), cfg.optimizer) {
    cfg_.validate();
    if (train_.empty()) throw DomainError("train: empty training set");
    if (validation_.empty()) throw DomainError("train: empty validation set");
  }

  std::size_t epoch() const { return epoch_; }
  bool done() const { return epoch_ >= cfg_.epochs; }
  AttentionMode mode() const { return mode_; }

  bool prosody_zeroed(std::size_t epoch_1based) const { return epoch_1based <= cfg_.prosody_zero_epochs; }

  EpochLog run_epoch() {
    const std::size_t e = epoch_ + 1;
    const bool zero = prosody_zeroed(e);
    std::vector<std::size_t> order(train_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::seed_seq seq{cfg_.seed, static_cast<std::uint64_t>(e), std::uint64_t{0x7a11}};
    std::mt19937_64 rng(seq);
    std::shuffle(order.begin(), order.end(), rng);
    std::mt19937_64 dropout(rng());

    EpochLog log;
    log.epoch = e;
    log.prosody_zeroed = zero;
    for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
      ad::Gradients grads(model_.store());
      for (std::size_t k = start; k < end; ++k) {
        const Example& ex = train_[order[k]];
        Graph g;
        const auto pr = zero ? prosody::NormalizedProsody{} : ex.prosody;
        ForcingOptions opt{cfg_.stop_pad, &dropout, cfg_.guide_weight, cfg_.guide_width};
        auto tf = teacher_forced(g, model_, ex.symbols, ex.target, model_.prosody_embedding(g, pr), mode_, opt);
        g.backward(tf.loss);
        g.accumulate(grads);
        log.train_loss += tf.loss.item();
        log.train_spectral += tf.spectral.item();
        log.train_stop += tf.stop.item();
      }
      grads.scale(1.0 / static_cast<double>(end - start));
      nn::clip_grad_norm(grads, cfg_.clip_norm);
      opt_.step(model_.store(), grads);
    }
    const double n = static_cast<double>(train_.size());
    log.train_loss /= n;
    log.train_spectral /= n;
    log.train_stop /= n;
    const auto ev = evaluate(model_, validation_, mode_, zero, cfg_.stop_pad);
    log.validation_loss = ev.loss;
    log.validation_entropy = ev.entropy;
    epoch_ = e;
    return log;
  }

  /// Parameters, optimizer slots and the epoch counter.
  io::TensorTable checkpoint() const {
    io::TensorTable t;
    const auto& store = model_.store();
    for (ParamId p = 0; p < store.size(); ++p) {
      t["param/" + store.name(p)] = store.value(p);
      t["opt.m/" + store.name(p)] = opt_.first_moments()[p];
      if (cfg_.optimizer.kind == nn::OptimizerKind::adam) t["opt.v/" + store.name(p)] = opt_.second_moments()[p];
    }
    t["meta/epoch"] = Tensor::vector({static_cast<double>(epoch_)});
    t["meta/steps"] = Tensor::vector({static_cast<double>(opt_.steps())});
    t["meta/attention"] = Tensor::vector({mode_ == AttentionMode::augmented ? 1.0 : 0.0});
    return t;
  }

  /// Validates everything before touching the model or optimizer.
  void restore(const io::TensorTable& t) {
    const bool aug = checked(t, "meta/attention", {1})[0] != 0.0;
    if (aug != (mode_ == AttentionMode::augmented)) throw DataError("checkpoint was trained with the other attention mode");
    const auto& names = model_.store();
    for (ParamId p = 0; p < names.size(); ++p) {
      checked(t, "param/" + names.name(p), names.value(p).shape());
      checked(t, "opt.m/" + names.name(p), names.value(p).shape());
      if (cfg_.optimizer.kind == nn::OptimizerKind::adam) checked(t, "opt.v/" + names.name(p), names.value(p).shape());
    }
    load_parameters(model_.store(), t);
    auto& store = model_.store();
    for (ParamId p = 0; p < store.size(); ++p) {
      opt_.first_moments()[p] = checked(t, "opt.m/" + store.name(p), store.value(p).shape());
      if (cfg_.optimizer.kind == nn::OptimizerKind::adam) {
        opt_.second_moments()[p] = checked(t, "opt.v/" + store.name(p), store.value(p).shape());
      }
    }
    epoch_ = static_cast<std::size_t>(checked(t, "meta/epoch", {1})[0]);
    opt_.set_steps(static_cast<std::size_t>(checked(t, "meta/steps", {1})[0]));
  }

  static Tensor checked(const io::TensorTable& t, const std::string& name, const Tensor::Shape& shape) {
    auto it = t.find(name);
    if (it == t.end()) throw DataError("checkpoint is missing '" + name + "'");
    if (it->second.shape() != shape) throw DataError("checkpoint tensor '" + name + "' has the wrong shape");
    return it->second;
  }

  static void load_parameters(ParameterStore& store, const io::TensorTable& t) {
    for (ParamId p = 0; p < store.size(); ++p) {
      Tensor v = checked(t, "param/" + store.name(p), store.value(p).shape());
      if (!v.all_finite()) throw DataError("checkpoint parameter '" + store.name(p) + "' is not finite");
      store.value(p) = std::move(v);
    }
  }

 private:
  Model& model_;
  TrainingConfig cfg_;
  AttentionMode mode_;
  std::span<const Example> train_;
  std::span<const Example> validation_;
  nn::Optimizer opt_;
  std::size_t epoch_ = 0;
};

}  // namespace cadence::seq2seq
