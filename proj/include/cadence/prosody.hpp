#pragma once

// Utterance-level prosody info (pace, pitch span): extraction, per-speaker
// normalisation, the 2-d embedding that conditions the encoder, inference
// offsets, and a recurrent predictor over encoder outputs.

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "cadence/autodiff.hpp"
#include "cadence/error.hpp"
#include "cadence/nn.hpp"
#include "cadence/stats.hpp"

namespace cadence::prosody {

/// pace = ln(mean non-silence phone duration in seconds);
/// pitch_span = q0.95 - q0.05 of log-pitch over voiced frames.
struct ProsodyInfo {
  double pace = 0.0;
  double pitch_span = 0.0;
  friend bool operator==(const ProsodyInfo&, const ProsodyInfo&) = default;
};

struct NormalizedProsody {
  double pace = 0.0;
  double pitch_span = 0.0;
  std::array<double, 2> as_array() const { return {pace, pitch_span}; }
  friend bool operator==(const NormalizedProsody&, const NormalizedProsody&) = default;
};

struct SpeakerStats {
  double pace_median = 0.0;
  double pace_std = 1.0;
  double span_median = 0.0;
  double span_std = 1.0;
};

inline constexpr std::size_t kMinVoicedFrames = 20;
inline constexpr std::size_t kMinStatsUtterances = 10;
/// Normalised units per std: median +- 3 std maps to +-1.
inline constexpr double kSpanStds = 3.0;

inline double compute_pace(std::span<const std::size_t> durations, const std::vector<bool>& silence,
                           double frame_period) {
  if (durations.size() != silence.size()) throw DomainError("compute_pace: durations and flags differ in length");
  if (!(frame_period > 0.0)) throw DomainError("compute_pace: frame period must be positive");
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < durations.size(); ++i) {
    if (silence[i]) continue;
    total += static_cast<double>(durations[i]) * frame_period;
    ++count;
  }
  if (count == 0) throw DomainError("compute_pace: utterance has no non-silence phones");
  return std::log(total / static_cast<double>(count));
}

/// Empty when fewer than `min_voiced` frames are voiced.
inline std::optional<double> compute_pitch_span(std::span<const double> log_pitch, const std::vector<bool>& voiced,
                                                std::size_t min_voiced = kMinVoicedFrames) {
  if (log_pitch.size() != voiced.size()) throw DomainError("compute_pitch_span: values and mask differ in length");
  std::vector<double> v;
  for (std::size_t i = 0; i < log_pitch.size(); ++i) {
    if (voiced[i]) v.push_back(log_pitch[i]);
  }
  if (v.size() < min_voiced || v.empty()) return std::nullopt;
  std::sort(v.begin(), v.end());
  return std::max(0.0, stats::quantile_sorted(v, 0.95) - stats::quantile_sorted(v, 0.05));
}

inline SpeakerStats fit_speaker_stats(std::span<const ProsodyInfo> values) {
  if (values.size() < kMinStatsUtterances) {
    throw DomainError("fit_speaker_stats: need at least " + std::to_string(kMinStatsUtterances) + " utterances");
  }
  std::vector<double> pace, span;
  for (const auto& p : values) {
    pace.push_back(p.pace);
    span.push_back(p.pitch_span);
  }
  SpeakerStats s{stats::median(pace), stats::population_std(pace), stats::median(span), stats::population_std(span)};
  if (!(s.pace_std > 0.0) || !(s.span_std > 0.0)) {
    throw DomainError("fit_speaker_stats: zero standard deviation (degenerate corpus)");
  }
  return s;
}

inline NormalizedProsody normalize(const ProsodyInfo& p, const SpeakerStats& s) {
  return {(p.pace - s.pace_median) / (kSpanStds * s.pace_std),
          (p.pitch_span - s.span_median) / (kSpanStds * s.span_std)};
}

inline ProsodyInfo denormalize(const NormalizedProsody& n, const SpeakerStats& s) {
  return {s.pace_median + n.pace * kSpanStds * s.pace_std, s.span_median + n.pitch_span * kSpanStds * s.span_std};
}

inline void check_offset(double pace, double pitch) {
  auto ok = [](double v) { return std::isfinite(v) && v >= -1.0 && v <= 1.0; };
  if (!ok(pace) || !ok(pitch)) throw DomainError("prosody offsets must lie in [-1, 1]");
}

inline NormalizedProsody apply_offset(const NormalizedProsody& p, double pace_offset, double pitch_offset) {
  check_offset(pace_offset, pitch_offset);
  return {p.pace + pace_offset, p.pitch_span + pitch_offset};
}

// ---------------------------------------------------------------------------
// Embedding and encoder conditioning
// ---------------------------------------------------------------------------

/// tanh(W p) with W [2 x 2] and no bias.
inline ad::Var embed(ad::Var p, ad::Var w) { return ad::tanh(ad::matvec(w, p)); }

inline std::array<double, 2> embed(const NormalizedProsody& p, const Tensor& w) {
  if (w.shape() != Tensor::Shape{2, 2}) throw ShapeError("prosody embedding weight must be 2 x 2");
  return {std::tanh(w(0, 0) * p.pace + w(0, 1) * p.pitch_span), std::tanh(w(1, 0) * p.pace + w(1, 1) * p.pitch_span)};
}

/// Appends the embedding to every encoder output row.
inline ad::Var condition_encoder(ad::Var encoder_outputs, ad::Var embedding) {
  return ad::append_cols(encoder_outputs, embedding);
}

// ---------------------------------------------------------------------------
// Speaker stats sidecar and prosody table
// ---------------------------------------------------------------------------

inline constexpr int kStatsVersion = 1;

inline nlohmann::ordered_json stats_to_json(const SpeakerStats& s) {
  nlohmann::ordered_json j;
  j["version"] = kStatsVersion;
  j["pace"] = {{"median", s.pace_median}, {"std", s.pace_std}};
  j["pitch_span"] = {{"median", s.span_median}, {"std", s.span_std}};
  return j;
}

inline SpeakerStats stats_from_json(const nlohmann::json& j) {
  try {
    if (j.at("version").get<int>() != kStatsVersion) throw DataError("speaker stats: unsupported version");
    SpeakerStats s{j.at("pace").at("median").get<double>(), j.at("pace").at("std").get<double>(),
                   j.at("pitch_span").at("median").get<double>(), j.at("pitch_span").at("std").get<double>()};
    if (!(s.pace_std > 0.0) || !(s.span_std > 0.0)) throw DataError("speaker stats: non-positive std");
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("speaker stats: ") + e.what());
  }
}

struct ProsodyRow {
  std::string id;
  std::optional<ProsodyInfo> raw;  // empty when the utterance was flagged
  std::string flag;
};

/// id,pace,pitch_span,norm_pace,norm_pitch_span,flag
inline void write_prosody_csv(std::ostream& os, std::span<const ProsodyRow> rows, const SpeakerStats& s) {
  os << "id,pace,pitch_span,norm_pace,norm_pitch_span,flag\n" << std::setprecision(17);
  for (const auto& r : rows) {
    os << r.id << ',';
    if (r.raw) {
      const auto n = normalize(*r.raw, s);
      os << r.raw->pace << ',' << r.raw->pitch_span << ',' << n.pace << ',' << n.pitch_span << ',';
    } else {
      os << ",,,,";
    }
    os << r.flag << '\n';
  }
}

// ---------------------------------------------------------------------------
// Predictor
// ---------------------------------------------------------------------------

struct PredictorConfig {
  std::size_t hidden = 32;
  std::size_t layers = 3;
  std::size_t epochs = 60;
  std::size_t batch_size = 0;  // 0: full batch
  double learning_rate = 3e-3;
  std::uint64_t seed = 1;
};

struct PredictorExample {
  Tensor encoder_outputs;  // N x D, before prosody concatenation
  NormalizedProsody target;
};

/// Stacked LSTMs over the encoder outputs; final top-layer state -> linear -> 2.
class ProsodyPredictor {
 public:
  ProsodyPredictor() = default;
  ProsodyPredictor(std::size_t input, const PredictorConfig& cfg) : input_(input) {
    if (cfg.layers == 0 || cfg.hidden == 0) throw DomainError("predictor needs at least one layer and cell");
    std::mt19937_64 rng(cfg.seed);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      cells_.push_back(nn::Lstm::make(store_, rng, "pred.lstm" + std::to_string(l), l ? cfg.hidden : input, cfg.hidden));
    }
    out_ = nn::Linear::make(store_, rng, "pred.out", cfg.hidden, 2);
  }

  std::size_t input_width() const { return input_; }
  ad::ParameterStore& store() { return store_; }
  const ad::ParameterStore& store() const { return store_; }

  ad::Var forward(ad::Graph& g, ad::Var enc) const {
    if (enc.shape().size() != 2 || enc.shape()[1] != input_) {
      throw ShapeError("predictor: expected N x " + std::to_string(input_) + " encoder outputs");
    }
    std::vector<ad::Var> xs;
    for (std::size_t n = 0; n < enc.shape()[0]; ++n) xs.push_back(ad::row(enc, n));
    for (const auto& cell : cells_) xs = nn::run_lstm(g, store_, cell, xs);
    return out_(g, store_, xs.back());
  }

  NormalizedProsody predict(const Tensor& enc) const {
    if (enc.empty()) throw DomainError("predict: empty encoder sequence");
    ad::Graph g(false);
    const auto y = forward(g, g.constant(enc)).value();
    return {y[0], y[1]};
  }

 private:
  std::size_t input_ = 0;
  ad::ParameterStore store_;
  std::vector<nn::Lstm> cells_;
  nn::Linear out_;
};

inline double predictor_mse(const ProsodyPredictor& p, std::span<const PredictorExample> data) {
  if (data.empty()) throw DomainError("predictor_mse: empty dataset");
  double s = 0.0;
  for (const auto& ex : data) {
    const auto y = p.predict(ex.encoder_outputs);
    s += 0.5 * ((y.pace - ex.target.pace) * (y.pace - ex.target.pace) +
                (y.pitch_span - ex.target.pitch_span) * (y.pitch_span - ex.target.pitch_span));
  }
  return s / static_cast<double>(data.size());
}

struct PredictorTraining {
  ProsodyPredictor predictor;
  std::vector<double> train_mse;  // full-dataset MSE after each epoch
};

/// Adam on the per-component mean squared error.
inline PredictorTraining train_predictor(std::span<const PredictorExample> data, const PredictorConfig& cfg) {
  if (data.empty()) throw DomainError("train_predictor: empty dataset");
  PredictorTraining out{ProsodyPredictor(data.front().encoder_outputs.cols(), cfg), {}};
  ProsodyPredictor& pred = out.predictor;
  nn::Optimizer opt(pred.store(), {nn::OptimizerKind::adam, cfg.learning_rate, 0.9, 0.999, 1e-8});
  const std::size_t batch = cfg.batch_size == 0 ? data.size() : std::min(cfg.batch_size, data.size());
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (batch < data.size()) std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      ad::Gradients grads(pred.store());
      for (std::size_t k = start; k < end; ++k) {
        const auto& ex = data[order[k]];
        ad::Graph g;
        auto y = pred.forward(g, g.constant(ex.encoder_outputs));
        auto loss = ad::mse(y, g.constant(Tensor::vector({ex.target.pace, ex.target.pitch_span})));
        g.backward(loss);
        g.accumulate(grads);
      }
      grads.scale(1.0 / static_cast<double>(end - start));
      opt.step(pred.store(), grads);
    }
    out.train_mse.push_back(predictor_mse(pred, data));
  }
  return out;
}

}  // namespace cadence::prosody
