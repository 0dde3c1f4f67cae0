#pragma once

// Deterministic synthetic corpus: symbol sequences with known per-symbol
// durations, a per-utterance pace factor and an independent pitch variance
// factor, rendered to frames x 8 feature matrices.
//
// Feature channels: 0-5 symbol template shaped by position inside the
// symbol, 6 within-symbol ramp (j + 0.5) / d, 7 pitch contour (0 on pauses).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "cadence/error.hpp"
#include "cadence/prosody.hpp"
#include "cadence/symbols.hpp"
#include "cadence/tensor.hpp"

namespace cadence::synth {

inline constexpr std::size_t kFeatureWidth = 8;
inline constexpr std::size_t kTemplateChannels = 6;
inline constexpr std::size_t kRampChannel = 6;
inline constexpr std::size_t kPitchChannel = 7;

struct CorpusConfig {
  std::size_t alphabet = 12;
  std::size_t utterances = 200;
  std::size_t validation = 20;  // the last `validation` utterances
  std::size_t min_phones = 5;
  std::size_t max_phones = 9;
  std::size_t max_word_phones = 4;
  std::size_t base_min = 3;  // per-phone base duration range, frames
  std::size_t base_max = 12;
  double mean_base = 7.5;    // frames per phone at pace factor 1
  std::size_t silence_frames = 5;
  std::size_t word_break_frames = 2;
  double pace_sigma = 0.15;  // of ln(pace factor) around the phrase-type bias
  std::array<double, kPhraseTypeCount> phrase_pace_bias{0.0, 0.25, -0.25, 0.1};
  double pitch_base = 1.0;   // pitch variance factor = base * exp(N(0, pitch_sigma))
  double pitch_sigma = 0.3;
  double frame_period = 256.0 / 22050.0;
  std::uint64_t seed = 7;

  void validate() const {
    if (alphabet == 0) throw ConfigError("corpus.alphabet must be positive");
    if (utterances == 0) throw ConfigError("corpus.utterances must be positive");
    if (validation >= utterances) throw ConfigError("corpus.validation must be smaller than corpus.utterances");
    if (min_phones == 0 || min_phones > max_phones) throw ConfigError("corpus.min_phones must lie in [1, max_phones]");
    if (max_word_phones == 0) throw ConfigError("corpus.max_word_phones must be positive");
    if (base_min == 0 || base_min > base_max) throw ConfigError("corpus.base_min must lie in [1, base_max]");
    if (!(mean_base > 0.0)) throw ConfigError("corpus.mean_base must be positive");
    if (silence_frames == 0 || word_break_frames == 0) throw ConfigError("corpus pause frame counts must be positive");
    if (!(pace_sigma >= 0.0)) throw ConfigError("corpus.pace_sigma must be non-negative");
    if (!(pitch_base >= 0.0)) throw ConfigError("corpus.pitch_base must be non-negative");
    if (!(pitch_sigma >= 0.0)) throw ConfigError("corpus.pitch_sigma must be non-negative");
    if (!(frame_period > 0.0)) throw ConfigError("corpus.frame_period must be positive");
  }
};

struct SyntheticUtterance {
  std::string id;
  SymbolSequence symbols;
  std::vector<std::size_t> durations;
  double pace_factor = 1.0;
  double pitch_factor = 1.0;
  Tensor features;  // frames x kFeatureWidth

  std::size_t frames() const { return std::accumulate(durations.begin(), durations.end(), std::size_t{0}); }
};

/// Per-symbol tables shared by every utterance of a corpus.
struct SymbolTables {
  std::vector<std::size_t> base_duration;  // per phone id
  std::vector<std::array<double, kTemplateChannels>> templates;  // per vocabulary id
};

inline SymbolTables make_tables(const CorpusConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> dur(cfg.base_min, cfg.base_max);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  SymbolTables t;
  for (std::size_t i = 0; i < cfg.alphabet; ++i) t.base_duration.push_back(dur(rng));
  const std::size_t vocab = SymbolSequence::vocabulary(cfg.alphabet);
  t.templates.resize(vocab);
  for (std::size_t i = 0; i < cfg.alphabet; ++i) {
    for (double& v : t.templates[i]) v = u(rng);
  }
  t.templates[cfg.alphabet].fill(0.0);  // silence
  for (double& v : t.templates[cfg.alphabet + 1]) v = 0.2 * u(rng);  // word break
  return t;
}

/// Splits `total` frames over weights by largest remainder (ties to the lower
/// index); every share is at least 1 when total >= weights.size().
inline std::vector<std::size_t> allocate_durations(std::size_t total, const std::vector<std::size_t>& weights) {
  if (weights.empty()) throw DomainError("allocate_durations: no weights");
  const std::size_t wsum = std::accumulate(weights.begin(), weights.end(), std::size_t{0});
  if (wsum == 0) throw DomainError("allocate_durations: weights sum to zero");
  std::vector<std::size_t> d(weights.size());
  std::vector<std::pair<std::size_t, std::size_t>> rem;  // (remainder numerator, index)
  std::size_t used = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const std::size_t num = total * weights[i];
    d[i] = num / wsum;
    used += d[i];
    rem.emplace_back(num % wsum, i);
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; used < total; ++k, ++used) ++d[rem[k].second];
  if (total >= weights.size()) {
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (d[i] > 0) continue;
      const auto big = static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
      --d[big];
      d[i] = 1;
    }
  }
  return d;
}

/// Piecewise-linear contour through per-phone targets at phone centres,
/// held flat before the first and after the last centre; pauses are 0.
inline std::vector<double> pitch_contour(const SymbolSequence& s, const std::vector<std::size_t>& durations) {
  std::vector<double> centres, targets;
  std::size_t start = 0;
  std::size_t last_phone = s.size();
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!s[i].silence && !s[i].word_break) last_phone = i;
  }
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!s[i].silence && !s[i].word_break) {
      double target = s[i].stress == Stress::primary ? 1.0 : s[i].stress == Stress::secondary ? 0.3 : -0.6;
      if (i == last_phone && s.phrase() == PhraseType::interrogative) target += 0.8;
      centres.push_back(static_cast<double>(start) + 0.5 * static_cast<double>(durations[i]) - 0.5);
      targets.push_back(target);
    }
    start += durations[i];
  }
  std::vector<double> out(start, 0.0);
  if (centres.empty()) return out;
  start = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const bool pause = s[i].silence || s[i].word_break;
    for (std::size_t j = 0; j < durations[i]; ++j) {
      const double t = static_cast<double>(start + j);
      if (pause) continue;
      double v;
      if (t <= centres.front()) v = targets.front();
      else if (t >= centres.back()) v = targets.back();
      else {
        const auto k = static_cast<std::size_t>(std::upper_bound(centres.begin(), centres.end(), t) - centres.begin());
        const double w = (t - centres[k - 1]) / (centres[k] - centres[k - 1]);
        v = targets[k - 1] + w * (targets[k] - targets[k - 1]);
      }
      out[start + j] = v;
    }
    start += durations[i];
  }
  return out;
}

inline Tensor render_targets(const SyntheticUtterance& u, const SymbolTables& tables) {
  if (u.durations.size() != u.symbols.size()) throw DomainError("render_targets: one duration per symbol required");
  const std::size_t frames = u.frames();
  if (frames == 0) throw DomainError("render_targets: utterance has no frames");
  const auto contour = pitch_contour(u.symbols, u.durations);
  Tensor out({frames, kFeatureWidth}, 0.0);
  std::size_t t = 0;
  for (std::size_t i = 0; i < u.symbols.size(); ++i) {
    const auto& tpl = tables.templates.at(u.symbols[i].id);
    const double d = static_cast<double>(u.durations[i]);
    for (std::size_t j = 0; j < u.durations[i]; ++j, ++t) {
      const double pos = (static_cast<double>(j) + 0.5) / d;
      const double shape = 0.75 + 0.25 * std::cos(std::numbers::pi * pos);
      for (std::size_t c = 0; c < kTemplateChannels; ++c) {
        // Alternate channels fall instead of rise across the symbol.
        out(t, c) = tpl[c] * (c % 2 ? shape : 1.5 - shape);
      }
      out(t, kRampChannel) = pos;
      out(t, kPitchChannel) = u.pitch_factor * contour[t];
    }
  }
  return out;
}

/// Symbol index per frame.
inline std::vector<std::size_t> ground_truth_alignment(const SyntheticUtterance& u) {
  std::vector<std::size_t> a;
  for (std::size_t i = 0; i < u.durations.size(); ++i) a.insert(a.end(), u.durations[i], i);
  return a;
}

/// Measured prosody from ground truth: pace from durations, pitch span from
/// channel 7 over non-pause frames.
inline std::optional<prosody::ProsodyInfo> measure_prosody(const SyntheticUtterance& u, double frame_period) {
  const auto pauses = u.symbols.pause_flags();
  const double pace = prosody::compute_pace(u.durations, pauses, frame_period);
  std::vector<double> pitch;
  std::vector<bool> voiced;
  for (std::size_t i = 0; i < u.symbols.size(); ++i) {
    for (std::size_t j = 0; j < u.durations[i]; ++j) voiced.push_back(!pauses[i]);
  }
  for (std::size_t t = 0; t < u.features.rows(); ++t) pitch.push_back(u.features(t, kPitchChannel));
  const auto span = prosody::compute_pitch_span(pitch, voiced);
  if (!span) return std::nullopt;
  return prosody::ProsodyInfo{pace, *span};
}

inline std::vector<SyntheticUtterance> generate_corpus(const CorpusConfig& cfg) {
  cfg.validate();
  const SymbolTables tables = make_tables(cfg);
  std::vector<SyntheticUtterance> corpus;
  std::vector<std::size_t> totals;
  std::vector<std::size_t> phone_counts;

  for (std::size_t u = 0; u < cfg.utterances; ++u) {
    // Independent stream per utterance.
    std::seed_seq seq{cfg.seed, static_cast<std::uint64_t>(u), std::uint64_t{0x5eed}};
    std::mt19937_64 rng(seq);
    std::uniform_int_distribution<std::size_t> nphones(cfg.min_phones, cfg.max_phones);
    std::uniform_int_distribution<std::size_t> phone_id(0, cfg.alphabet - 1);
    std::uniform_int_distribution<std::size_t> word_len(1, cfg.max_word_phones);
    std::uniform_int_distribution<int> phrase_dist(0, kPhraseTypeCount - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);

    const auto phrase = static_cast<PhraseType>(phrase_dist(rng));
    const std::size_t n = nphones(rng);
    std::vector<Symbol> syms{SymbolSequence::silence(cfg.alphabet)};
    std::size_t placed = 0;
    while (placed < n) {
      const std::size_t len = std::min(word_len(rng), n - placed);
      const std::size_t primary = std::uniform_int_distribution<std::size_t>(0, len - 1)(rng);
      if (placed > 0) syms.push_back(SymbolSequence::word_break(cfg.alphabet));
      for (std::size_t k = 0; k < len; ++k) {
        const Stress s = k == primary ? Stress::primary : unit(rng) < 0.25 ? Stress::secondary : Stress::unstressed;
        syms.push_back(SymbolSequence::phone(phone_id(rng), s));
      }
      placed += len;
    }
    syms.push_back(SymbolSequence::silence(cfg.alphabet));

    const double bias = cfg.phrase_pace_bias[static_cast<std::size_t>(phrase)];
    const double z_pitch = normal(rng);

    // Redraw the pace until its integer phone-frame total orders strictly
    // like the factor against every earlier utterance; measured pace then
    // ranks exactly as the configured factors.
    double pace = 0.0;
    std::size_t total = 0;
    for (std::size_t attempt = 0;; ++attempt) {
      if (attempt == 100000) throw DomainError("generate_corpus: cannot place a distinct pace; widen the duration range");
      pace = std::exp(bias + cfg.pace_sigma * normal(rng));
      total = std::max<std::size_t>(n, static_cast<std::size_t>(std::llround(pace * cfg.mean_base * n)));
      bool ok = true;
      for (std::size_t v = 0; v < corpus.size() && ok; ++v) {
        const std::size_t lhs = total * phone_counts[v], rhs = totals[v] * n;
        ok = lhs != rhs && (pace < corpus[v].pace_factor) == (lhs < rhs);
      }
      if (ok) break;
    }

    SyntheticUtterance utt;
    char id[16];
    std::snprintf(id, sizeof id, "utt%03zu", u);
    utt.id = id;
    utt.symbols = SymbolSequence(std::move(syms), phrase, cfg.alphabet);
    utt.pace_factor = pace;
    utt.pitch_factor = cfg.pitch_base * std::exp(cfg.pitch_sigma * z_pitch);
    corpus.push_back(std::move(utt));
    totals.push_back(total);
    phone_counts.push_back(n);
  }

  for (std::size_t u = 0; u < corpus.size(); ++u) {
    SyntheticUtterance& utt = corpus[u];
    std::vector<std::size_t> weights;
    for (const auto& s : utt.symbols.symbols()) {
      if (!s.silence && !s.word_break) weights.push_back(tables.base_duration[s.id]);
    }
    const auto phone_dur = allocate_durations(totals[u], weights);
    std::size_t k = 0;
    for (const auto& s : utt.symbols.symbols()) {
      if (s.silence) utt.durations.push_back(cfg.silence_frames);
      else if (s.word_break) utt.durations.push_back(cfg.word_break_frames);
      else utt.durations.push_back(phone_dur[k++]);
    }
    utt.features = render_targets(utt, tables);
  }
  return corpus;
}

}  // namespace cadence::synth
