#pragma once

// Single-token nullification interventions and the likelihood-difference
// causal weight B^i = |P(a|y) - P(a|y with y^i := NULL)|.

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "coso/scm.hpp"
#include "coso/textmdp.hpp"

namespace coso {

enum class WeightMode { raw, maxnorm };

struct CausalWeights {
  std::vector<double> raw;
  std::vector<double> normalized;
  WeightMode mode = WeightMode::raw;

  /// The weights the objective consumes under the current mode.
  std::span<const double> effective() const {
    return mode == WeightMode::raw ? std::span<const double>(raw)
                                   : std::span<const double>(normalized);
  }
};

inline Utterance nullify(std::span<const TokenId> y, std::size_t i) {
  if (i >= y.size()) throw std::out_of_range("nullify: position out of range");
  Utterance out(y.begin(), y.end());
  out[i] = kNullToken;
  return out;
}

/// Raw weights from one base evaluation and n interventions.
inline CausalWeights causal_weights(const ScmParams& phi, std::span<const TokenId> y,
                                    std::size_t action_class,
                                    std::size_t* eval_count = nullptr) {
  if (action_class >= phi.classes) throw std::invalid_argument("causal_weights: class out of range");
  const double base = scm_likelihood(phi, y, eval_count)[action_class];
  CausalWeights w;
  w.raw.resize(y.size());
  Utterance probe(y.begin(), y.end());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const TokenId keep = probe[i];
    probe[i] = kNullToken;
    const double p = scm_likelihood(phi, probe, eval_count)[action_class];
    probe[i] = keep;
    w.raw[i] = std::min(1.0, std::abs(base - p));
  }
  w.normalized = w.raw;
  w.mode = WeightMode::raw;
  return w;
}

struct NormalizeOptions {
  double eps = 1e-6;
  double floor = 0.01;
};

inline CausalWeights normalize_weights(CausalWeights w, WeightMode mode,
                                       NormalizeOptions opt = {}) {
  w.mode = mode;
  if (mode == WeightMode::raw) {
    w.normalized = w.raw;
    return w;
  }
  const double mx = w.raw.empty() ? 0.0 : *std::max_element(w.raw.begin(), w.raw.end());
  w.normalized.resize(w.raw.size());
  for (std::size_t i = 0; i < w.raw.size(); ++i)
    w.normalized[i] = mx > opt.eps ? std::max(opt.floor, w.raw[i] / mx) : opt.floor;
  return w;
}

struct WeightHistogram {
  std::vector<double> edges{0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
  std::vector<std::size_t> counts;
  std::vector<double> fractions;
  std::size_t total = 0;

  /// Fraction in the first bin [edges[0], edges[1]).
  double low_fraction() const { return fractions.empty() ? 0.0 : fractions.front(); }
};

/// Histogram of normalized weights across every position of every sequence.
/// Bins are half-open except the last, which includes its upper edge.
inline WeightHistogram weight_stats(std::span<const CausalWeights> batch,
                                    std::vector<double> edges = {0.0, 0.2, 0.4, 0.6, 0.8, 1.0}) {
  if (batch.empty()) throw std::invalid_argument("weight_stats: empty batch");
  if (edges.size() < 2) throw std::invalid_argument("weight_stats: need at least one bin");
  WeightHistogram h;
  h.edges = std::move(edges);
  const std::size_t bins = h.edges.size() - 1;
  h.counts.assign(bins, 0);
  for (const auto& w : batch) {
    for (double v : w.normalized) {
      std::size_t b = static_cast<std::size_t>(
          std::upper_bound(h.edges.begin(), h.edges.end(), v) - h.edges.begin());
      b = b == 0 ? 0 : std::min(b - 1, bins - 1);
      ++h.counts[b];
      ++h.total;
    }
  }
  h.fractions.resize(bins);
  for (std::size_t b = 0; b < bins; ++b)
    h.fractions[b] = static_cast<double>(h.counts[b]) / static_cast<double>(h.total);
  return h;
}

}  // namespace coso
