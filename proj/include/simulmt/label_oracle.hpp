#pragma once

// Naive reference for gen_policy_labels, kept deliberately separate from the
// production path: every remaining-mass value is re-summed from the last
// column, the argmax is rescanned per cell, and the monotonic rule is evaluated in its
// closed form l_ij = AND over i' <= i of raw l_i'j.

#include <cmath>
#include <cstdint>
#include <vector>

#include "simulmt/policy_labels.hpp"
#include "simulmt/rng.hpp"

namespace simulmt {

inline PolicyLabelMatrix brute_force_labels(const AttentionMatrix& a, float gamma) {
  check_gamma(gamma);
  check_attention(a);
  const std::size_t ny = a.target_len, nx = a.source_len;

  std::vector<std::vector<int>> raw(ny, std::vector<int>(nx, 0));
  for (std::size_t i = 0; i < ny; ++i) {
    for (std::size_t j = 0; j < nx; ++j) {
      float t = 0.0f;
      for (std::size_t k = nx - 1; k > j; --k) t = t + a.weights[i * nx + k];

      std::size_t best = 0;
      float best_value = a.weights[i * nx];
      for (std::size_t k = 1; k < nx; ++k) {
        if (a.weights[i * nx + k] > best_value) {
          best_value = a.weights[i * nx + k];
          best = k;
        }
      }
      const bool last = j + 1 == nx;
      raw[i][j] = (last || (t <= 1.0f - gamma && best <= j)) ? 1 : 0;
    }
  }

  PolicyLabelMatrix out;
  out.target_len = ny;
  out.source_len = nx;
  out.gamma = gamma;
  out.labels.assign(ny * nx, 0);
  for (std::size_t i = 0; i < ny; ++i) {
    for (std::size_t j = 0; j < nx; ++j) {
      int v = 1;
      for (std::size_t p = 0; p <= i; ++p) v = v * raw[p][j];
      out.labels[i * nx + j] = static_cast<std::uint8_t>(v);
    }
  }
  return out;
}

/// Random row-stochastic matrix. Rows are exponentiated uniforms, so some
/// are peaked; with `allow_zeros` about 30% of entries are exactly zero.
inline AttentionMatrix random_stochastic(Rng& rng, std::size_t ny, std::size_t nx, bool allow_zeros) {
  AttentionMatrix a;
  a.target_len = ny;
  a.source_len = nx;
  a.weights.resize(ny * nx);
  for (std::size_t i = 0; i < ny; ++i) {
    float sum = 0;
    for (std::size_t j = 0; j < nx; ++j) {
      float w = rng.uniform();
      if (allow_zeros && rng.bernoulli(0.3)) w = 0;
      w = std::exp(4.0f * w) - (allow_zeros && w == 0 ? 1.0f : 0.0f);
      a(i, j) = w;
      sum += w;
    }
    if (sum == 0) a(i, nx - 1) = sum = 1;
    for (std::size_t j = 0; j < nx; ++j) a(i, j) /= sum;
  }
  return a;
}

/// All rows of length nx with entries k/steps (k >= 0) summing to 1.
inline std::vector<std::vector<float>> quantized_rows(std::size_t nx, int steps) {
  std::vector<std::vector<float>> out;
  std::vector<int> parts(nx, 0);
  auto fill = [&](auto&& self, std::size_t j, int left) -> void {
    if (j + 1 == nx) {
      parts[j] = left;
      std::vector<float> row(nx);
      for (std::size_t k = 0; k < nx; ++k) row[k] = static_cast<float>(parts[k]) / static_cast<float>(steps);
      out.push_back(std::move(row));
      return;
    }
    for (int v = 0; v <= left; ++v) {
      parts[j] = v;
      self(self, j + 1, left - v);
    }
  };
  if (nx > 0) fill(fill, 0, steps);
  return out;
}

}  // namespace simulmt
