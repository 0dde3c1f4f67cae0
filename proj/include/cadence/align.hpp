#pragma once

// Augmented attention post-processing and alignment diagnostics.
//
// Given the initial alignment b_t of the current decoder step and the previous
// initial alignment b_{t-1}, the final alignment is produced in two stages:
//
//   d   = alpha * shift(b_{t-1}) + (1 - alpha) * b_{t-1}
//   a_t = (1 - gamma) * beta * d + gamma * (1 - beta) * b_t,   renormalised
//
// with gamma = f(b_t) * (1 - f(d)) and f the thresholded structure metric
// f(c) = [f1(c) * f2(c)]_{0.12}, clamped to [0, 1].
//
// Every function exists twice: on plain AlignmentVectors (below) and as
// differentiable graph ops (namespace graph) used inside the decoder.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "cadence/autodiff.hpp"
#include "cadence/error.hpp"

namespace cadence::align {

struct StructureConstants {
  double lse_gain = 10.0;    // exp(gain * c[n]) inside the soft maximum
  double lse_scale = 0.1;    // outer factor of the soft maximum
  double boost = 1.67;       // peak sharpness boost
  double threshold = 0.12;   // raw scores at or below this map to 0
};

inline constexpr StructureConstants kStructure{};

// Floor on the unnormalised stage-2 mass before falling back to d.
inline constexpr double kRenormFloor = 1e-8;

class AlignmentVector {
 public:
  static constexpr double kSumTolerance = 1e-6;

  explicit AlignmentVector(std::vector<double> probs) : probs_(std::move(probs)) {
    if (probs_.empty()) throw DomainError("alignment vector must have at least one entry");
    double s = 0.0;
    for (double p : probs_) {
      if (!std::isfinite(p) || p < 0.0) throw DomainError("alignment vector entries must be finite and non-negative");
      s += p;
    }
    if (std::abs(s - 1.0) > kSumTolerance) {
      throw DomainError("alignment vector must sum to 1, got " + std::to_string(s));
    }
  }

  static AlignmentVector flat(std::size_t n) {
    if (n == 0) throw DomainError("alignment vector must have at least one entry");
    return AlignmentVector(std::vector<double>(n, 1.0 / static_cast<double>(n)));
  }

  static AlignmentVector one_hot(std::size_t n, std::size_t k) {
    if (k >= n) throw DomainError("one_hot index out of range");
    std::vector<double> v(n, 0.0);
    v[k] = 1.0;
    return AlignmentVector(std::move(v));
  }

  std::size_t size() const { return probs_.size(); }
  double operator[](std::size_t i) const { return probs_[i]; }
  std::span<const double> values() const { return probs_; }
  const std::vector<double>& probs() const { return probs_; }
  std::size_t argmax() const {
    return static_cast<std::size_t>(std::max_element(probs_.begin(), probs_.end()) - probs_.begin());
  }

 private:
  std::vector<double> probs_;
};

/// N x T alignment: one AlignmentVector column per decoder step.
class AlignmentMatrix {
 public:
  AlignmentMatrix() = default;
  explicit AlignmentMatrix(std::vector<AlignmentVector> columns) {
    for (auto& c : columns) push_back(std::move(c));
  }

  void push_back(AlignmentVector column) {
    if (!columns_.empty() && column.size() != columns_.front().size()) {
      throw DomainError("alignment matrix columns must share the encoder length");
    }
    columns_.push_back(std::move(column));
  }

  std::size_t steps() const { return columns_.size(); }
  std::size_t positions() const { return columns_.empty() ? 0 : columns_.front().size(); }
  bool empty() const { return columns_.empty(); }
  const AlignmentVector& operator[](std::size_t t) const { return columns_[t]; }
  const std::vector<AlignmentVector>& columns() const { return columns_; }

 private:
  std::vector<AlignmentVector> columns_;
};

struct StructureScore {
  double value = 0.0;  // thresholded and clamped, in [0, 1]
  double raw = 0.0;    // f1 * f2 before thresholding
};

struct SelectionWeights {
  double alpha = 0.5;
  double beta = 0.5;
};

inline AlignmentVector shift_sticky(const AlignmentVector& v) {
  const std::size_t n = v.size();
  if (n == 1) return v;
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 1; i < n; ++i) out[i] = v[i - 1];
  out[n - 1] += v[n - 1];
  return AlignmentVector(std::move(out));
}

struct CandidateSet {
  AlignmentVector current;
  AlignmentVector previous;
  AlignmentVector previous_shifted;
};

inline CandidateSet candidate_set(const AlignmentVector& b_t, const AlignmentVector& b_prev) {
  if (b_t.size() != b_prev.size()) throw DomainError("candidate_set: length mismatch");
  return {b_t, b_prev, shift_sticky(b_prev)};
}

/// Soft maximum: scale * log sum exp(gain * c[n]).
inline double f1(const AlignmentVector& c, const StructureConstants& k = kStructure) {
  double m = -std::numeric_limits<double>::infinity();
  for (double p : c.values()) m = std::max(m, k.lse_gain * p);
  double s = 0.0;
  for (double p : c.values()) s += std::exp(k.lse_gain * p - m);
  return k.lse_scale * (m + std::log(s));
}

/// Peak sharpness min(boost * (N |c|^2 - 1) / (N - 1), 1); 1 for N = 1.
inline double f2(const AlignmentVector& c, const StructureConstants& k = kStructure) {
  const std::size_t n = c.size();
  if (n == 1) return 1.0;
  double sq = 0.0;
  for (double p : c.values()) sq += p * p;
  const double nd = static_cast<double>(n);
  return std::min(k.boost * (nd * sq - 1.0) / (nd - 1.0), 1.0);
}

inline StructureScore structure_metric(const AlignmentVector& c, const StructureConstants& k = kStructure) {
  StructureScore s;
  s.raw = f1(c, k) * f2(c, k);
  s.value = s.raw > k.threshold ? std::min(s.raw, 1.0) : 0.0;
  return s;
}

inline AlignmentVector stage1_select(const AlignmentVector& b_prev, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw DomainError("stage1_select: alpha must lie in [0, 1]");
  const AlignmentVector shifted = shift_sticky(b_prev);
  std::vector<double> d(b_prev.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = alpha * shifted[i] + (1.0 - alpha) * b_prev[i];
  return AlignmentVector(std::move(d));
}

inline AlignmentVector stage2_select(const AlignmentVector& d, const AlignmentVector& b_t, double beta,
                                     const StructureConstants& k = kStructure) {
  if (d.size() != b_t.size()) throw DomainError("stage2_select: length mismatch");
  if (!(beta >= 0.0 && beta <= 1.0)) throw DomainError("stage2_select: beta must lie in [0, 1]");
  const double gamma = structure_metric(b_t, k).value * (1.0 - structure_metric(d, k).value);
  const double wd = (1.0 - gamma) * beta;
  const double wb = gamma * (1.0 - beta);
  std::vector<double> raw(d.size());
  double total = 0.0;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    raw[i] = wd * d[i] + wb * b_t[i];
    total += raw[i];
  }
  if (total < kRenormFloor) return d;
  for (double& v : raw) v /= total;
  return AlignmentVector(std::move(raw));
}

/// Final alignment for one decoder step; `b_prev == nullptr` marks the first
/// step, where b_t passes through unchanged.
inline AlignmentVector augmented_step(const AlignmentVector& b_t, const AlignmentVector* b_prev, SelectionWeights w,
                                      const StructureConstants& k = kStructure) {
  if (b_prev == nullptr) return b_t;
  if (b_prev->size() != b_t.size()) throw DomainError("augmented_step: length mismatch");
  return stage2_select(stage1_select(*b_prev, w.alpha), b_t, w.beta, k);
}

/// Shannon entropy in nats, with 0 ln 0 = 0.
inline double entropy(const AlignmentVector& a) {
  double h = 0.0;
  for (double p : a.values()) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

/// Unweighted mean entropy over every column of every matrix.
inline double mean_entropy(std::span<const AlignmentMatrix> matrices) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& m : matrices) {
    for (const auto& col : m.columns()) {
      total += entropy(col);
      ++count;
    }
  }
  if (count == 0) throw DomainError("mean_entropy: no alignment columns");
  return total / static_cast<double>(count);
}

/// T rows x N columns, full precision.
inline void write_csv(std::ostream& os, const AlignmentMatrix& m) {
  os << std::setprecision(17);
  for (const auto& col : m.columns()) {
    for (std::size_t n = 0; n < col.size(); ++n) {
      if (n) os << ',';
      os << col[n];
    }
    os << '\n';
  }
}

/// Binary PGM, width T (decoder steps) by height N (encoder positions), with
/// encoder position 0 on the bottom row; pixel = round(255 * prob).
inline void write_pgm(std::ostream& os, const AlignmentMatrix& m) {
  if (m.empty()) throw DomainError("write_pgm: empty alignment matrix");
  const std::size_t width = m.steps(), height = m.positions();
  os << "P5\n" << width << ' ' << height << "\n255\n";
  for (std::size_t r = 0; r < height; ++r) {
    const std::size_t n = height - 1 - r;
    for (std::size_t t = 0; t < width; ++t) {
      const auto px = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(m[t][n], 0.0, 1.0)));
      os.put(static_cast<char>(px));
    }
  }
}

// ---------------------------------------------------------------------------
// Differentiable versions over graph values
// ---------------------------------------------------------------------------

namespace graph {

using ad::Var;

inline Var f1(Var c, const StructureConstants& k = kStructure) {
  return ad::scale(ad::logsumexp(ad::scale(c, k.lse_gain)), k.lse_scale);
}

inline Var f2(Var c, const StructureConstants& k = kStructure) {
  const std::size_t n = c.size();
  if (n == 1) return c.graph->constant(Tensor::scalar(1.0));
  const double nd = static_cast<double>(n);
  Var sq = ad::sum(ad::square(c));
  return ad::min_const(ad::scale(ad::add_scalar(ad::scale(sq, nd), -1.0), k.boost / (nd - 1.0)), 1.0);
}

inline Var structure_metric(Var c, const StructureConstants& k = kStructure) {
  return ad::min_const(ad::threshold(ad::mul(f1(c, k), f2(c, k)), k.threshold), 1.0);
}

/// alpha is a scalar graph value in [0, 1].
inline Var stage1_select(Var b_prev, Var alpha) {
  Var shifted = ad::shift_sticky(b_prev);
  return ad::add(ad::mul_scalar(alpha, shifted), ad::mul_scalar(ad::one_minus(alpha), b_prev));
}

inline Var stage2_select(Var d, Var b_t, Var beta, const StructureConstants& k = kStructure) {
  Var gamma = ad::mul(structure_metric(b_t, k), ad::one_minus(structure_metric(d, k)));
  Var wd = ad::mul(ad::one_minus(gamma), beta);
  Var wb = ad::mul(gamma, ad::one_minus(beta));
  Var raw = ad::add(ad::mul_scalar(wd, d), ad::mul_scalar(wb, b_t));
  return ad::normalize_or(raw, d, kRenormFloor);
}

inline Var augmented_step(Var b_t, Var b_prev, Var alpha, Var beta, const StructureConstants& k = kStructure) {
  return stage2_select(stage1_select(b_prev, alpha), b_t, beta, k);
}

}  // namespace graph

}  // namespace cadence::align
