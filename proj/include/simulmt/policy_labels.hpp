#pragma once

// Read/write pseudo-labels from attention.
//
//   F = row-wise cumulative sum of A, T_ij = 1 - F_ij = sum over k > j of A_ik
//   raw l_ij = 1  iff  T_ij <= 1 - gamma  and  argmax_j' A_ij' <= j
//   l_i|x| is always 1 (every target token is writable once the source ends)
//   then, for increasing i:  l_ij = 0 wherever l_(i-1)j = 0
//
// The remaining mass T is summed right to left in float, so a tiny tail
// keeps gamma = 1 from firing before the last column, as a rounded-up
// running sum would. Argmax ties resolve to the smallest column. Thresholds
// compare with plain <=, no epsilon.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "simulmt/error.hpp"
#include "simulmt/seq2seq.hpp"

namespace simulmt {

struct PolicyLabelMatrix {
  std::size_t target_len = 0;
  std::size_t source_len = 0;
  float gamma = 0.5f;
  std::vector<std::uint8_t> labels;  // row-major 0/1

  std::uint8_t operator()(std::size_t i, std::size_t j) const { return labels[i * source_len + j]; }
  std::uint8_t& operator()(std::size_t i, std::size_t j) { return labels[i * source_len + j]; }

  /// Row non-decreasing, last column set, columns monotone down the rows.
  bool valid() const {
    if (labels.size() != target_len * source_len) return false;
    for (std::size_t i = 0; i < target_len; ++i) {
      if (source_len == 0 || (*this)(i, source_len - 1) != 1) return false;
      for (std::size_t j = 0; j < source_len; ++j) {
        const auto v = (*this)(i, j);
        if (v > 1) return false;
        if (j + 1 < source_len && v > (*this)(i, j + 1)) return false;
        if (i > 0 && v == 1 && (*this)(i - 1, j) == 0) return false;
      }
    }
    return true;
  }

  friend bool operator==(const PolicyLabelMatrix&, const PolicyLabelMatrix&) = default;
};

inline void check_gamma(float gamma) {
  if (!(gamma > 0.0f && gamma <= 1.0f)) throw ConfigError("gamma must be in (0, 1], got " + std::to_string(gamma));
}

inline void check_attention(const AttentionMatrix& a) {
  if (a.weights.size() != a.target_len * a.source_len) throw ContractError("attention matrix size mismatch");
  if (a.target_len > 0 && a.source_len == 0) throw ContractError("attention matrix has no source columns");
  for (float w : a.weights) {
    if (!std::isfinite(w)) throw ContractError("attention matrix contains a non-finite entry");
    if (w < 0.0f) throw ContractError("attention matrix contains a negative entry");
  }
}

/// Row-wise running sum, accumulated left to right in float.
inline AttentionMatrix cumulative(const AttentionMatrix& a) {
  check_attention(a);
  AttentionMatrix f = a;
  for (std::size_t i = 0; i < a.target_len; ++i) {
    float acc = 0.0f;
    for (std::size_t j = 0; j < a.source_len; ++j) {
      acc += a(i, j);
      f(i, j) = acc;
    }
  }
  return f;
}

/// Row-wise mass strictly right of each column, accumulated right to left in float.
inline AttentionMatrix remaining_mass(const AttentionMatrix& a) {
  check_attention(a);
  AttentionMatrix t = a;
  for (std::size_t i = 0; i < a.target_len; ++i) {
    float acc = 0.0f;
    for (std::size_t j = a.source_len; j-- > 0;) {
      t(i, j) = acc;
      acc += a(i, j);
    }
  }
  return t;
}

inline PolicyLabelMatrix gen_policy_labels(const AttentionMatrix& a, float gamma) {
  check_gamma(gamma);
  const AttentionMatrix t = remaining_mass(a);
  const float budget = 1.0f - gamma;
  PolicyLabelMatrix out;
  out.target_len = a.target_len;
  out.source_len = a.source_len;
  out.gamma = gamma;
  out.labels.assign(a.target_len * a.source_len, 0);
  for (std::size_t i = 0; i < a.target_len; ++i) {
    const std::size_t peak = argmax<float>(a.row(i));
    for (std::size_t j = peak; j < a.source_len; ++j) out(i, j) = t(i, j) <= budget ? 1 : 0;
    out(i, a.source_len - 1) = 1;
    if (i == 0) continue;
    for (std::size_t j = 0; j < a.source_len; ++j) {
      if (out(i - 1, j) == 0) out(i, j) = 0;
    }
  }
  return out;
}

/// j_i = first column (1-based) holding a 1 in row i.
inline std::vector<std::size_t> read_offsets(const PolicyLabelMatrix& l) {
  std::vector<std::size_t> offsets(l.target_len);
  for (std::size_t i = 0; i < l.target_len; ++i) {
    std::size_t j = 0;
    while (j < l.source_len && l(i, j) == 0) ++j;
    if (j == l.source_len) throw ContractError("label row " + std::to_string(i + 1) + " has no write label");
    offsets[i] = j + 1;
  }
  return offsets;
}

struct LabelDensity {
  std::size_t matrices = 0;
  std::size_t cells = 0;
  std::size_t ones = 0;
  double mean_offset_fraction = 0;  // mean of j_i / |x|
  double mean_lag = 0;              // mean of j_i - i over rows, signed

  double density() const { return cells ? static_cast<double>(ones) / static_cast<double>(cells) : 0.0; }
};

inline LabelDensity label_density(std::span<const PolicyLabelMatrix> labels) {
  LabelDensity d;
  std::size_t rows = 0;
  for (const auto& l : labels) {
    ++d.matrices;
    d.cells += l.labels.size();
    for (auto v : l.labels) d.ones += v;
    const auto offsets = read_offsets(l);
    for (std::size_t i = 0; i < offsets.size(); ++i) {
      d.mean_offset_fraction += static_cast<double>(offsets[i]) / static_cast<double>(l.source_len);
      d.mean_lag += static_cast<double>(offsets[i]) - static_cast<double>(i + 1);
      ++rows;
    }
  }
  if (rows) {
    d.mean_offset_fraction /= static_cast<double>(rows);
    d.mean_lag /= static_cast<double>(rows);
  }
  return d;
}

}  // namespace simulmt
