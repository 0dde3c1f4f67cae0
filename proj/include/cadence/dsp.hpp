#pragma once

// Vocoder-side signal processing: mu-law companding, pre/de-emphasis, a
// look-ahead limiter, silence detection, mel features, nearest-frame
// upsampling and an autocorrelation pitch tracker.

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <memory>
#include <numbers>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "cadence/error.hpp"
#include "cadence/stats.hpp"
#include "cadence/tensor.hpp"

namespace cadence::dsp {

/// Largest positive sample a 16-bit PCM file can represent.
inline constexpr double kPcmMax = 1.0 - 1.0 / 32768.0;

/// Samples are only required to be finite: the limiter exists to bring
/// over-range signals back into [-1, kPcmMax].
struct AudioBuffer {
  std::vector<double> samples;
  double sample_rate = 22050.0;

  AudioBuffer() = default;
  AudioBuffer(std::vector<double> s, double rate) : samples(std::move(s)), sample_rate(rate) { validate(); }

  std::size_t size() const { return samples.size(); }

  void validate() const {
    if (!(sample_rate > 0.0) || !std::isfinite(sample_rate)) throw DomainError("sample rate must be positive");
    for (double x : samples) {
      if (!std::isfinite(x)) throw NonFiniteError("audio buffer contains non-finite samples");
    }
  }
};

// ---------------------------------------------------------------------------
// mu-law
// ---------------------------------------------------------------------------

inline constexpr int kMuLawLevels = 256;

/// Mid-rise quantizer over the companded domain; 0 maps to code 128.
/// Inputs beyond [-1, 1] are clipped; `clipped` (if given) is set accordingly.
inline std::uint8_t mulaw_encode(double x, bool* clipped = nullptr) {
  if (!std::isfinite(x)) throw NonFiniteError("mulaw_encode: non-finite input");
  const bool clip = std::abs(x) > 1.0;
  if (clipped) *clipped = clip;
  x = std::clamp(x, -1.0, 1.0);
  const double mu = kMuLawLevels - 1;
  const double y = std::copysign(std::log1p(mu * std::abs(x)) / std::log1p(mu), x);
  const auto code = static_cast<long>(std::floor((y + 1.0) / 2.0 * kMuLawLevels));
  return static_cast<std::uint8_t>(std::clamp(code, 0L, static_cast<long>(kMuLawLevels - 1)));
}

inline double mulaw_expand(double y) {
  const double mu = kMuLawLevels - 1;
  return std::copysign((std::pow(mu + 1.0, std::abs(y)) - 1.0) / mu, y);
}

inline double mulaw_decode(std::uint8_t code) {
  const double y = (code + 0.5) / kMuLawLevels * 2.0 - 1.0;
  return mulaw_expand(y);
}

/// Largest |x - decode(encode(x))| over [-1, 1]: the worst distance from a
/// bin's reconstruction point to either of its edges.
inline double mulaw_error_bound() {
  double worst = 0.0;
  for (int c = 0; c < kMuLawLevels; ++c) {
    const double lo = mulaw_expand(2.0 * c / kMuLawLevels - 1.0);
    const double hi = mulaw_expand(2.0 * (c + 1) / kMuLawLevels - 1.0);
    const double mid = mulaw_decode(static_cast<std::uint8_t>(c));
    worst = std::max({worst, mid - lo, hi - mid});
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Emphasis filters
// ---------------------------------------------------------------------------

inline constexpr double kDefaultEmphasis = 0.85;

inline void check_emphasis(double coeff) {
  if (!(coeff >= 0.0 && coeff < 1.0)) throw DomainError("emphasis coefficient must lie in [0, 1)");
}

inline AudioBuffer preemphasis(const AudioBuffer& a, double coeff = kDefaultEmphasis) {
  check_emphasis(coeff);
  AudioBuffer out = a;
  for (std::size_t n = 1; n < a.size(); ++n) out.samples[n] = a.samples[n] - coeff * a.samples[n - 1];
  return out;
}

inline AudioBuffer deemphasis(const AudioBuffer& a, double coeff = kDefaultEmphasis) {
  check_emphasis(coeff);
  AudioBuffer out = a;
  for (std::size_t n = 1; n < a.size(); ++n) out.samples[n] = a.samples[n] + coeff * out.samples[n - 1];
  return out;
}

// ---------------------------------------------------------------------------
// Look-ahead limiter
// ---------------------------------------------------------------------------

struct AgcConfig {
  std::size_t lookahead = 1024;
  std::size_t block = 512;
};

struct AgcResult {
  AudioBuffer audio;
  std::vector<double> gain;
};

/// Block gains are taken over each block widened by max(lookahead, block) on
/// both sides, so that the two gains interpolated at any sample are each safe
/// for that sample. Gains are joined by half-cosine ramps between block
/// centres; the final clamp only absorbs rounding.
inline AgcResult agc_limit(const AudioBuffer& a, AgcConfig cfg = {}) {
  if (cfg.block == 0) throw DomainError("agc block length must be positive");
  const std::size_t n = a.size();
  AgcResult r{a, std::vector<double>(n, 1.0)};
  if (n == 0) return r;

  const std::size_t ext = std::max(cfg.lookahead, cfg.block);
  const std::size_t blocks = (n + cfg.block - 1) / cfg.block;
  std::vector<double> g(blocks, 1.0);
  bool any = false;
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t start = b * cfg.block;
    const std::size_t lo = start > ext ? start - ext : 0;
    const std::size_t hi = std::min(n, start + cfg.block + ext);
    double pos = 0.0, neg = 0.0;
    for (std::size_t i = lo; i < hi; ++i) {
      pos = std::max(pos, a.samples[i]);
      neg = std::max(neg, -a.samples[i]);
    }
    if (pos > kPcmMax) g[b] = std::min(g[b], kPcmMax / pos);
    if (neg > 1.0) g[b] = std::min(g[b], 1.0 / neg);
    any = any || g[b] < 1.0;
  }
  if (!any) return r;

  auto centre = [&](std::size_t b) {
    const std::size_t start = b * cfg.block;
    const std::size_t end = std::min(n, start + cfg.block);
    return 0.5 * static_cast<double>(start + end - 1);
  };
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t b = i / cfg.block;
    const double x = static_cast<double>(i);
    std::size_t b0 = b, b1 = b;
    if (x < centre(b) && b > 0) b0 = b - 1;
    else if (x > centre(b) && b + 1 < blocks) b1 = b + 1;
    double gi = g[b0];
    if (b0 != b1) {
      const double c0 = centre(b0), c1 = centre(b1);
      const double t = (x - c0) / (c1 - c0);
      gi = g[b0] + (g[b1] - g[b0]) * 0.5 * (1.0 - std::cos(std::numbers::pi * t));
    }
    r.gain[i] = gi;
    r.audio.samples[i] = std::clamp(a.samples[i] * gi, -1.0, kPcmMax);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Silence detection and segment selection
// ---------------------------------------------------------------------------

struct SilenceConfig {
  std::size_t frame = 256;
  double rel_db = 40.0;
  double min_run_seconds = 0.05;
};

/// Half-open sample range [begin, end).
struct Region {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t length() const { return end - begin; }
  bool contains(std::size_t i) const { return i >= begin && i < end; }
  friend bool operator==(const Region&, const Region&) = default;
};

inline std::vector<double> frame_rms(const AudioBuffer& a, std::size_t frame) {
  std::vector<double> rms;
  for (std::size_t start = 0; start < a.size(); start += frame) {
    const std::size_t end = std::min(a.size(), start + frame);
    double s = 0.0;
    for (std::size_t i = start; i < end; ++i) s += a.samples[i] * a.samples[i];
    rms.push_back(std::sqrt(s / static_cast<double>(end - start)));
  }
  return rms;
}

/// Frames whose RMS lies more than rel_db below the 0.95-quantile frame RMS
/// (or is exactly zero) are silent; runs shorter than min_run_seconds are dropped.
inline std::vector<Region> detect_silence(const AudioBuffer& a, SilenceConfig cfg = {}) {
  if (cfg.frame == 0) throw DomainError("silence frame length must be positive");
  std::vector<Region> out;
  if (a.size() == 0) return out;
  const auto rms = frame_rms(a, cfg.frame);
  const double ref = stats::quantile(rms, 0.95);
  const double thr = ref * std::pow(10.0, -cfg.rel_db / 20.0);
  const auto min_len = static_cast<std::size_t>(std::ceil(cfg.min_run_seconds * a.sample_rate));

  std::size_t f = 0;
  while (f < rms.size()) {
    if (!(rms[f] == 0.0 || rms[f] < thr)) {
      ++f;
      continue;
    }
    std::size_t g = f;
    while (g < rms.size() && (rms[g] == 0.0 || rms[g] < thr)) ++g;
    Region r{f * cfg.frame, std::min(a.size(), g * cfg.frame)};
    if (r.length() >= min_len) out.push_back(r);
    f = g;
  }
  return out;
}

/// Segment start offsets inside detected silent regions, every `stride`
/// samples, such that [offset, offset + seg_len) fits in the buffer.
inline std::vector<std::size_t> select_training_segments(const AudioBuffer& a, std::size_t seg_len,
                                                         SilenceConfig cfg = {}, std::size_t stride = 256) {
  if (seg_len == 0 || seg_len > a.size()) throw DomainError("segment length must lie in [1, audio length]");
  if (stride == 0) throw DomainError("segment stride must be positive");
  std::vector<std::size_t> offsets;
  for (const Region& r : detect_silence(a, cfg)) {
    for (std::size_t o = r.begin; o < r.end && o + seg_len <= a.size(); o += stride) offsets.push_back(o);
  }
  return offsets;
}

// ---------------------------------------------------------------------------
// Mel spectrogram
// ---------------------------------------------------------------------------

struct MelConfig {
  double sample_rate = 22050.0;
  std::size_t hop = 256;
  std::size_t window = 1024;
  std::size_t channels = 80;
  double log_floor = 1e-5;

  void validate() const {
    if (!(sample_rate > 0.0)) throw DomainError("mel: sample rate must be positive");
    if (hop == 0 || window == 0 || hop > window) throw DomainError("mel: need 0 < hop <= window");
    if (channels == 0) throw DomainError("mel: need at least one channel");
    if (!(log_floor > 0.0)) throw DomainError("mel: log floor must be positive");
  }
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Non-centred framing.
inline std::size_t frame_count(std::size_t samples, std::size_t window, std::size_t hop) {
  if (samples < window) return 0;
  return (samples - window) / hop + 1;
}

/// channels x (window / 2 + 1) triangular filters, peak 1, HTK mel scale
/// from 0 Hz to Nyquist.
inline Tensor mel_filterbank(const MelConfig& cfg) {
  cfg.validate();
  const std::size_t bins = cfg.window / 2 + 1;
  const double top = hz_to_mel(cfg.sample_rate / 2.0);
  std::vector<double> edges(cfg.channels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(top * static_cast<double>(i) / static_cast<double>(cfg.channels + 1));
  }
  Tensor fb({cfg.channels, bins}, 0.0);
  for (std::size_t m = 0; m < cfg.channels; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * cfg.sample_rate / static_cast<double>(cfg.window);
      double w = 0.0;
      if (f > lo && f <= mid) w = (f - lo) / (mid - lo);
      else if (f > mid && f < hi) w = (hi - f) / (hi - mid);
      fb(m, k) = w;
    }
  }
  return fb;
}

inline double mel_centre_hz(const MelConfig& cfg, std::size_t channel) {
  const double top = hz_to_mel(cfg.sample_rate / 2.0);
  return mel_to_hz(top * static_cast<double>(channel + 1) / static_cast<double>(cfg.channels + 1));
}

namespace detail {

struct FftwPlan {
  std::size_t n;
  double* in;
  fftw_complex* out;
  fftw_plan plan;

  explicit FftwPlan(std::size_t size) : n(size) {
    in = fftw_alloc_real(n);
    out = fftw_alloc_complex(n / 2 + 1);
    plan = fftw_plan_dft_r2c_1d(static_cast<int>(n), in, out, FFTW_ESTIMATE);
  }
  ~FftwPlan() {
    fftw_destroy_plan(plan);
    fftw_free(in);
    fftw_free(out);
  }
  FftwPlan(const FftwPlan&) = delete;
  FftwPlan& operator=(const FftwPlan&) = delete;
};

}  // namespace detail

/// frames x channels matrix of ln(max(floor, mel-weighted magnitude)).
inline Tensor melspectrogram(const AudioBuffer& a, const MelConfig& cfg = {}) {
  cfg.validate();
  if (a.size() < cfg.window) throw DomainError("melspectrogram: audio shorter than one analysis window");
  if (std::abs(a.sample_rate - cfg.sample_rate) > 1e-9) throw DomainError("melspectrogram: sample rate mismatch");
  const std::size_t frames = frame_count(a.size(), cfg.window, cfg.hop);
  const std::size_t bins = cfg.window / 2 + 1;
  const Tensor fb = mel_filterbank(cfg);

  std::vector<double> hann(cfg.window);
  for (std::size_t i = 0; i < cfg.window; ++i) {
    hann[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(cfg.window));
  }

  detail::FftwPlan fft(cfg.window);
  std::vector<double> mag(bins);
  Tensor out({frames, cfg.channels}, 0.0);
  for (std::size_t t = 0; t < frames; ++t) {
    const double* x = a.samples.data() + t * cfg.hop;
    for (std::size_t i = 0; i < cfg.window; ++i) fft.in[i] = x[i] * hann[i];
    fftw_execute(fft.plan);
    for (std::size_t k = 0; k < bins; ++k) mag[k] = std::hypot(fft.out[k][0], fft.out[k][1]);
    for (std::size_t m = 0; m < cfg.channels; ++m) {
      double e = 0.0;
      for (std::size_t k = 0; k < bins; ++k) e += fb(m, k) * mag[k];
      out(t, m) = std::log(std::max(e, cfg.log_floor));
    }
  }
  return out;
}

/// Repeats every row `hop` times.
inline Tensor upsample_nearest(const Tensor& frames, std::size_t hop) {
  if (hop == 0) throw DomainError("upsample_nearest: hop must be positive");
  if (frames.rank() != 2) throw ShapeError("upsample_nearest: expected a frames x channels matrix");
  const std::size_t t = frames.rows(), c = frames.cols();
  Tensor out({t * hop, c}, 0.0);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t r = 0; r < hop; ++r) {
      std::copy_n(frames.data() + i * c, c, out.data() + (i * hop + r) * c);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pitch
// ---------------------------------------------------------------------------

struct PitchConfig {
  std::size_t window = 1024;
  std::size_t hop = 256;
  double min_hz = 50.0;
  double max_hz = 500.0;
  double voicing = 0.5;
};

struct PitchTrack {
  std::vector<double> log_pitch;  // ln Hz; 0 where unvoiced
  std::vector<bool> voiced;

  std::size_t voiced_count() const { return static_cast<std::size_t>(std::count(voiced.begin(), voiced.end(), true)); }
};

/// Normalised autocorrelation per frame. The chosen lag is the first local
/// maximum reaching 0.9 of the best value in range (guards against octave
/// errors), refined by a parabola through its neighbours.
inline PitchTrack estimate_pitch(const AudioBuffer& a, const PitchConfig& cfg = {}) {
  if (cfg.hop == 0 || cfg.window == 0) throw DomainError("pitch: window and hop must be positive");
  if (!(cfg.min_hz > 0.0 && cfg.max_hz > cfg.min_hz)) throw DomainError("pitch: need 0 < min_hz < max_hz");
  const auto min_lag = static_cast<std::size_t>(std::floor(a.sample_rate / cfg.max_hz));
  const auto max_lag = static_cast<std::size_t>(std::ceil(a.sample_rate / cfg.min_hz));
  if (min_lag < 2 || max_lag + 2 >= cfg.window) throw DomainError("pitch: lag range does not fit the window");

  const std::size_t frames = frame_count(a.size(), cfg.window, cfg.hop);
  PitchTrack track{std::vector<double>(frames, 0.0), std::vector<bool>(frames, false)};
  std::vector<double> x(cfg.window), r(max_lag + 2, 0.0);
  for (std::size_t t = 0; t < frames; ++t) {
    const double* src = a.samples.data() + t * cfg.hop;
    double m = 0.0;
    for (std::size_t i = 0; i < cfg.window; ++i) m += src[i];
    m /= static_cast<double>(cfg.window);
    for (std::size_t i = 0; i < cfg.window; ++i) x[i] = src[i] - m;

    // Prefix energies give both normalisers in O(1) per lag.
    std::vector<double> e(cfg.window + 1, 0.0);
    for (std::size_t i = 0; i < cfg.window; ++i) e[i + 1] = e[i] + x[i] * x[i];
    if (e[cfg.window] <= 1e-20) continue;

    double best = -1.0;
    for (std::size_t lag = min_lag - 1; lag <= max_lag + 1; ++lag) {
      const std::size_t len = cfg.window - lag;
      double s = 0.0;
      for (std::size_t i = 0; i < len; ++i) s += x[i] * x[i + lag];
      const double den = std::sqrt(e[len] * (e[cfg.window] - e[lag]));
      r[lag] = den > 0.0 ? s / den : 0.0;
      if (lag >= min_lag && lag <= max_lag) best = std::max(best, r[lag]);
    }
    if (best <= cfg.voicing) continue;

    for (std::size_t lag = min_lag; lag <= max_lag; ++lag) {
      if (r[lag] < 0.9 * best || r[lag] < r[lag - 1] || r[lag] < r[lag + 1]) continue;
      const double denom = r[lag - 1] - 2.0 * r[lag] + r[lag + 1];
      const double shift = denom < 0.0 ? 0.5 * (r[lag - 1] - r[lag + 1]) / denom : 0.0;
      track.voiced[t] = true;
      track.log_pitch[t] = std::log(a.sample_rate / (static_cast<double>(lag) + shift));
      break;
    }
  }
  return track;
}

// ---------------------------------------------------------------------------
// WAV (16-bit PCM, mono, little-endian)
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}
inline std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | p[1] << 8);
}
inline void put_u32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8), static_cast<char>(v >> 16),
                     static_cast<char>(v >> 24)};
  os.write(b, 4);
}
inline void put_u16(std::ostream& os, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v), static_cast<char>(v >> 8)};
  os.write(b, 2);
}

}  // namespace detail

inline AudioBuffer read_wav(std::istream& is) {
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw DataError("wav: missing RIFF/WAVE header");
  }
  std::size_t pos = 12;
  bool have_fmt = false;
  std::uint32_t rate = 0;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const std::uint32_t len = detail::read_u32(chunk + 4);
    const std::size_t body = pos + 8;
    if (body + len > bytes.size()) throw DataError("wav: truncated chunk");
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (len < 16) throw DataError("wav: short fmt chunk");
      const unsigned char* f = bytes.data() + body;
      if (detail::read_u16(f) != 1) throw DataError("wav: only PCM is supported");
      if (detail::read_u16(f + 2) != 1) throw DataError("wav: only mono is supported");
      if (detail::read_u16(f + 14) != 16) throw DataError("wav: only 16-bit samples are supported");
      rate = detail::read_u32(f + 4);
      if (rate == 0) throw DataError("wav: zero sample rate");
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      if (!have_fmt) throw DataError("wav: data chunk before fmt chunk");
      if (len % 2) throw DataError("wav: odd data length");
      std::vector<double> s(len / 2);
      for (std::size_t i = 0; i < s.size(); ++i) {
        const auto v = static_cast<std::int16_t>(detail::read_u16(bytes.data() + body + 2 * i));
        s[i] = v / 32768.0;
      }
      return AudioBuffer(std::move(s), rate);
    }
    pos = body + len + (len & 1);
  }
  throw DataError("wav: no data chunk");
}

inline std::int16_t to_pcm16(double x) {
  const double v = std::nearbyint(std::clamp(x, -1.0, 1.0) * 32768.0);
  return static_cast<std::int16_t>(std::clamp(v, -32768.0, 32767.0));
}

inline void write_wav(std::ostream& os, const AudioBuffer& a) {
  const double r = std::nearbyint(a.sample_rate);
  if (r < 1.0 || r > 4294967295.0) throw DomainError("wav: sample rate not representable");
  const auto rate = static_cast<std::uint32_t>(r);
  const auto data_len = static_cast<std::uint32_t>(2 * a.size());
  os.write("RIFF", 4);
  detail::put_u32(os, 36 + data_len);
  os.write("WAVEfmt ", 8);
  detail::put_u32(os, 16);
  detail::put_u16(os, 1);
  detail::put_u16(os, 1);
  detail::put_u32(os, rate);
  detail::put_u32(os, rate * 2);
  detail::put_u16(os, 2);
  detail::put_u16(os, 16);
  os.write("data", 4);
  detail::put_u32(os, data_len);
  for (double x : a.samples) detail::put_u16(os, static_cast<std::uint16_t>(to_pcm16(x)));
}

}  // namespace cadence::dsp
