#pragma once

// Autoregressive linear-softmax token policy.
//
// logits(y^i | y^{1:i-1}, s) = sum of weight rows for the active features:
//   one-hot of every state feature, one-hot of each of the last K tokens
//   (a BOS pad id fills missing history), and one-hot of the position.
// The NULL column is masked before normalization so NULL is never emitted.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "coso/rng.hpp"
#include "coso/textmdp.hpp"

namespace coso {

class FeatureLayout {
public:
  FeatureLayout() = default;
  FeatureLayout(std::vector<int> state_cards, std::size_t vocab, std::size_t length,
                std::size_t context)
      : state_cards_(std::move(state_cards)), vocab_(vocab), length_(length), context_(context) {
    if (vocab_ < 3) throw std::invalid_argument("FeatureLayout: vocabulary too small");
    if (length_ == 0) throw std::invalid_argument("FeatureLayout: zero utterance length");
    std::size_t off = 0;
    for (int c : state_cards_) {
      if (c <= 0) throw std::invalid_argument("FeatureLayout: nonpositive state cardinality");
      state_offsets_.push_back(off);
      off += static_cast<std::size_t>(c);
    }
    context_offset_ = off;
    off += context_ * (vocab_ + 1);
    position_offset_ = off;
    off += length_;
    size_ = off;
  }

  std::size_t vocab() const { return vocab_; }
  std::size_t length() const { return length_; }
  std::size_t context() const { return context_; }
  std::size_t size() const { return size_; }
  std::span<const int> state_cardinalities() const { return state_cards_; }
  std::size_t state_feature_count() const { return context_offset_; }

  /// Active feature rows for predicting position prefix.size().
  void active(std::span<const int> state, std::span<const TokenId> prefix,
              std::vector<std::size_t>& out) const {
    if (state.size() != state_cards_.size())
      throw std::invalid_argument("FeatureLayout: state dimension mismatch");
    if (prefix.size() >= length_) throw std::invalid_argument("next_token_dist: prefix too long");
    out.clear();
    for (std::size_t f = 0; f < state.size(); ++f) {
      if (state[f] < 0 || state[f] >= state_cards_[f])
        throw std::invalid_argument("FeatureLayout: state feature out of range");
      out.push_back(state_offsets_[f] + static_cast<std::size_t>(state[f]));
    }
    const std::size_t pos = prefix.size();
    for (std::size_t j = 1; j <= context_; ++j) {
      std::size_t tok = vocab_;  // BOS pad
      if (pos >= j) {
        tok = prefix[pos - j];
        if (tok >= vocab_) throw std::invalid_argument("token out of vocabulary");
      }
      out.push_back(context_offset_ + (j - 1) * (vocab_ + 1) + tok);
    }
    out.push_back(position_offset_ + pos);
  }

  /// Rows that hold state one-hots (used by the linear value baseline).
  void state_rows(std::span<const int> state, std::vector<std::size_t>& out) const {
    out.clear();
    for (std::size_t f = 0; f < state.size(); ++f)
      out.push_back(state_offsets_[f] + static_cast<std::size_t>(state[f]));
  }

  friend bool operator==(const FeatureLayout&, const FeatureLayout&) = default;

private:
  std::vector<int> state_cards_;
  std::vector<std::size_t> state_offsets_;
  std::size_t vocab_ = 0;
  std::size_t length_ = 0;
  std::size_t context_ = 0;
  std::size_t context_offset_ = 0;
  std::size_t position_offset_ = 0;
  std::size_t size_ = 0;
};

/// Weight matrix of shape features x vocab (row-major) plus a snapshot version.
struct PolicyParams {
  FeatureLayout layout;
  std::vector<double> weights;
  std::uint64_t version = 0;

  PolicyParams() = default;
  explicit PolicyParams(FeatureLayout l)
      : layout(std::move(l)), weights(layout.size() * layout.vocab(), 0.0) {}

  static PolicyParams for_env(const Environment& env, std::size_t context = 3) {
    auto cards = env.feature_cardinalities();
    return PolicyParams(FeatureLayout(std::vector<int>(cards.begin(), cards.end()),
                                      env.vocab().size(), env.utterance_length(), context));
  }

  double& at(std::size_t row, std::size_t tok) { return weights[row * layout.vocab() + tok]; }
  double at(std::size_t row, std::size_t tok) const { return weights[row * layout.vocab() + tok]; }
};

struct TokenDist {
  std::vector<double> probs;
  std::vector<double> logprobs;

  double entropy() const {
    double h = 0.0;
    for (std::size_t k = 1; k < probs.size(); ++k)
      if (probs[k] > 0.0) h -= probs[k] * logprobs[k];
    return h < 0.0 ? 0.0 : h;
  }
};

struct SampledUtterance {
  Utterance utterance;
  std::vector<double> per_token_logprob;
  std::vector<double> per_token_entropy;

  double logprob() const {
    double s = 0.0;
    for (double v : per_token_logprob) s += v;
    return s;
  }
  double entropy() const {
    double s = 0.0;
    for (double v : per_token_entropy) s += v;
    return s;
  }
};

namespace detail {

inline TokenDist softmax_masked(std::span<const double> logits) {
  const std::size_t v = logits.size();
  TokenDist d;
  d.probs.assign(v, 0.0);
  d.logprobs.assign(v, -std::numeric_limits<double>::infinity());
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 1; k < v; ++k) mx = std::max(mx, logits[k]);
  double z = 0.0;
  for (std::size_t k = 1; k < v; ++k) z += std::exp(logits[k] - mx);
  const double logz = mx + std::log(z);
  for (std::size_t k = 1; k < v; ++k) {
    d.logprobs[k] = logits[k] - logz;
    d.probs[k] = std::exp(d.logprobs[k]);
  }
  return d;
}

inline void logits_from_rows(const PolicyParams& p, std::span<const std::size_t> rows,
                             std::vector<double>& logits) {
  const std::size_t v = p.layout.vocab();
  logits.assign(v, 0.0);
  for (std::size_t r : rows) {
    const double* w = &p.weights[r * v];
    for (std::size_t k = 0; k < v; ++k) logits[k] += w[k];
  }
}

}  // namespace detail

inline TokenDist next_token_dist(const PolicyParams& p, std::span<const int> state,
                                 std::span<const TokenId> prefix) {
  std::vector<std::size_t> rows;
  p.layout.active(state, prefix, rows);
  std::vector<double> logits;
  detail::logits_from_rows(p, rows, logits);
  return detail::softmax_masked(logits);
}

inline SampledUtterance sample_utterance(const PolicyParams& p, std::span<const int> state,
                                         Rng& rng) {
  const std::size_t n = p.layout.length();
  SampledUtterance s;
  s.utterance.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto d = next_token_dist(p, state, s.utterance);
    const auto tok = static_cast<TokenId>(rng.categorical(d.probs));
    s.utterance.push_back(tok);
    s.per_token_logprob.push_back(d.logprobs[tok]);
    s.per_token_entropy.push_back(d.entropy());
  }
  return s;
}

/// Per-position argmax decoding (lowest index on ties).
inline SampledUtterance greedy_utterance(const PolicyParams& p, std::span<const int> state) {
  const std::size_t n = p.layout.length();
  SampledUtterance s;
  for (std::size_t i = 0; i < n; ++i) {
    auto d = next_token_dist(p, state, s.utterance);
    std::size_t best = 1;
    for (std::size_t k = 2; k < d.probs.size(); ++k)
      if (d.probs[k] > d.probs[best]) best = k;
    s.utterance.push_back(static_cast<TokenId>(best));
    s.per_token_logprob.push_back(d.logprobs[best]);
    s.per_token_entropy.push_back(d.entropy());
  }
  return s;
}

/// Teacher-forced per-token log-probabilities and conditional entropies.
inline SampledUtterance logprob_and_entropy(const PolicyParams& p, std::span<const int> state,
                                            std::span<const TokenId> y) {
  if (y.size() != p.layout.length()) throw std::invalid_argument("utterance length mismatch");
  SampledUtterance s;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] >= p.layout.vocab()) throw std::invalid_argument("token out of vocabulary");
    auto d = next_token_dist(p, state, y.first(i));
    s.utterance.push_back(y[i]);
    s.per_token_logprob.push_back(d.logprobs[y[i]]);
    s.per_token_entropy.push_back(d.entropy());
  }
  return s;
}

enum class ObjectiveKind { logprob_weighted, entropy, weighted_entropy };

/// One teacher-forced example for gradient evaluation.
struct PolicyExample {
  std::vector<int> state;
  Utterance utterance;
  /// Multiplies sum_i log pi(y^i|.) for logprob_weighted.
  double logprob_weight = 1.0;
  /// Per-position entropy weights for weighted_entropy (B).
  std::vector<double> causal_weights;
};

/// Accumulates d/dW of  lp_coef * sum_i log pi_i + sum_i ent_coef[i] * H_i  into grad.
/// ent_coef may be empty (no entropy term). Returns the term's value.
inline double accumulate_gradient(const PolicyParams& p, std::span<const int> state,
                                  std::span<const TokenId> y, double lp_coef,
                                  std::span<const double> ent_coef, std::span<double> grad) {
  const std::size_t v = p.layout.vocab();
  if (grad.size() != p.weights.size()) throw std::invalid_argument("gradient size mismatch");
  if (y.size() != p.layout.length()) throw std::invalid_argument("utterance length mismatch");
  if (!ent_coef.empty() && ent_coef.size() != y.size())
    throw std::invalid_argument("entropy coefficient length mismatch");
  std::vector<std::size_t> rows;
  std::vector<double> logits, dz(v);
  double value = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    p.layout.active(state, y.first(i), rows);
    detail::logits_from_rows(p, rows, logits);
    const auto d = detail::softmax_masked(logits);
    const double h = d.entropy();
    const double ec = ent_coef.empty() ? 0.0 : ent_coef[i];
    value += lp_coef * d.logprobs[y[i]] + ec * h;
    dz[0] = 0.0;
    for (std::size_t k = 1; k < v; ++k) {
      const double pk = d.probs[k];
      double g = -lp_coef * pk;
      if (ec != 0.0 && pk > 0.0) g -= ec * pk * (d.logprobs[k] + h);
      dz[k] = g;
    }
    dz[y[i]] += lp_coef;
    for (std::size_t r : rows) {
      double* gr = &grad[r * v];
      for (std::size_t k = 1; k < v; ++k) gr[k] += dz[k];
    }
  }
  return value;
}

inline double objective_value(const PolicyParams& p, std::span<const PolicyExample> batch,
                              ObjectiveKind kind) {
  double total = 0.0;
  for (const auto& ex : batch) {
    auto s = logprob_and_entropy(p, ex.state, ex.utterance);
    for (std::size_t i = 0; i < s.utterance.size(); ++i) {
      switch (kind) {
        case ObjectiveKind::logprob_weighted:
          total += ex.logprob_weight * s.per_token_logprob[i];
          break;
        case ObjectiveKind::entropy: total += s.per_token_entropy[i]; break;
        case ObjectiveKind::weighted_entropy:
          total += ex.causal_weights.at(i) * s.per_token_entropy[i];
          break;
      }
    }
  }
  return total;
}

/// Analytic gradient of objective_value with respect to the weights.
inline std::vector<double> grad_objective(const PolicyParams& p,
                                          std::span<const PolicyExample> batch,
                                          ObjectiveKind kind) {
  if (batch.empty()) throw std::invalid_argument("grad_objective: empty batch");
  std::vector<double> grad(p.weights.size(), 0.0);
  const std::size_t n = p.layout.length();
  std::vector<double> ones(n, 1.0);
  for (const auto& ex : batch) {
    switch (kind) {
      case ObjectiveKind::logprob_weighted:
        accumulate_gradient(p, ex.state, ex.utterance, ex.logprob_weight, {}, grad);
        break;
      case ObjectiveKind::entropy:
        accumulate_gradient(p, ex.state, ex.utterance, 0.0, ones, grad);
        break;
      case ObjectiveKind::weighted_entropy:
        if (ex.causal_weights.size() != n)
          throw std::invalid_argument("grad_objective: causal weight length mismatch");
        accumulate_gradient(p, ex.state, ex.utterance, 0.0, ex.causal_weights, grad);
        break;
    }
  }
  return grad;
}

}  // namespace coso
