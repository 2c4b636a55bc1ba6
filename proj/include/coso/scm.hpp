#pragma once

// Surrogate structural causal model P_phi(a | y): a linear softmax classifier
// over position x token one-hots. The NULL token has its own column at every
// position so nullified utterances stay in-domain.

#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "coso/optim.hpp"
#include "coso/textmdp.hpp"

namespace coso {

struct ScmParams {
  std::size_t length = 0;
  std::size_t vocab = 0;
  std::size_t classes = 0;
  /// (position * vocab + token) * classes + class
  std::vector<double> weights;
  std::vector<double> bias;
  Adam optimizer;

  ScmParams() = default;
  ScmParams(std::size_t n, std::size_t vocab_size, std::size_t num_classes, double lr = 1e-3)
      : length(n), vocab(vocab_size), classes(num_classes),
        weights(n * vocab_size * num_classes, 0.0), bias(num_classes, 0.0),
        optimizer(n * vocab_size * num_classes + num_classes, lr) {
    if (n == 0 || vocab_size == 0 || num_classes == 0)
      throw std::invalid_argument("ScmParams: empty dimension");
  }

  static ScmParams for_env(const Environment& env, double lr = 1e-3) {
    return ScmParams(env.utterance_length(), env.vocab().size(), env.action_space().size(), lr);
  }

  std::size_t parameter_count() const { return weights.size() + bias.size(); }
};

using ActionLikelihood = std::vector<double>;

namespace detail {

inline void scm_logits(const ScmParams& phi, std::span<const TokenId> y, std::vector<double>& z) {
  if (y.size() != phi.length) throw std::invalid_argument("scm: utterance length mismatch");
  z.assign(phi.bias.begin(), phi.bias.end());
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] >= phi.vocab) throw std::invalid_argument("scm: token out of vocabulary");
    const double* w = &phi.weights[(i * phi.vocab + y[i]) * phi.classes];
    for (std::size_t c = 0; c < phi.classes; ++c) z[c] += w[c];
  }
}

inline ActionLikelihood softmax(std::span<const double> z) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : z) mx = std::max(mx, v);
  ActionLikelihood p(z.size());
  double s = 0.0;
  for (std::size_t c = 0; c < z.size(); ++c) s += (p[c] = std::exp(z[c] - mx));
  for (double& v : p) v /= s;
  return p;
}

}  // namespace detail

/// Class probabilities; bumps *eval_count when provided.
inline ActionLikelihood scm_likelihood(const ScmParams& phi, std::span<const TokenId> y,
                                       std::size_t* eval_count = nullptr) {
  std::vector<double> z;
  detail::scm_logits(phi, y, z);
  if (eval_count) ++*eval_count;
  return detail::softmax(z);
}

/// Argmax class, lowest index on ties.
inline std::size_t scm_predict(const ScmParams& phi, std::span<const TokenId> y) {
  auto p = scm_likelihood(phi, y);
  std::size_t best = 0;
  for (std::size_t c = 1; c < p.size(); ++c)
    if (p[c] > p[best]) best = c;
  return best;
}

struct ScmExample {
  Utterance utterance;
  std::size_t label = 0;
};

/// Mean cross-entropy of the batch under phi.
inline double scm_loss(const ScmParams& phi, std::span<const ScmExample> batch) {
  if (batch.empty()) throw std::invalid_argument("scm_loss: empty batch");
  double loss = 0.0;
  std::vector<double> z;
  for (const auto& ex : batch) {
    detail::scm_logits(phi, ex.utterance, z);
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : z) mx = std::max(mx, v);
    double s = 0.0;
    for (double v : z) s += std::exp(v - mx);
    loss += (mx + std::log(s)) - z.at(ex.label);
  }
  return loss / static_cast<double>(batch.size());
}

/// One Adam step on mean cross-entropy. Returns the loss before the step.
inline double scm_update(ScmParams& phi, std::span<const ScmExample> batch) {
  if (batch.empty()) throw std::invalid_argument("scm_update: empty batch");
  const std::size_t nw = phi.weights.size();
  std::vector<double> grad(phi.parameter_count(), 0.0);
  std::vector<double> z;
  double loss = 0.0;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (const auto& ex : batch) {
    if (ex.label >= phi.classes) throw std::invalid_argument("scm_update: label out of range");
    detail::scm_logits(phi, ex.utterance, z);
    auto p = detail::softmax(z);
    loss -= std::log(std::max(p[ex.label], std::numeric_limits<double>::min()));
    p[ex.label] -= 1.0;
    for (std::size_t i = 0; i < phi.length; ++i) {
      double* g = &grad[(i * phi.vocab + ex.utterance[i]) * phi.classes];
      for (std::size_t c = 0; c < phi.classes; ++c) g[c] += p[c] * inv;
    }
    for (std::size_t c = 0; c < phi.classes; ++c) grad[nw + c] += p[c] * inv;
  }
  loss *= inv;
  if (!std::isfinite(loss)) throw std::runtime_error("scm_update: non-finite loss");

  std::vector<double> flat(phi.parameter_count());
  std::copy(phi.weights.begin(), phi.weights.end(), flat.begin());
  std::copy(phi.bias.begin(), phi.bias.end(), flat.begin() + static_cast<std::ptrdiff_t>(nw));
  phi.optimizer.step(flat, grad);
  std::copy(flat.begin(), flat.begin() + static_cast<std::ptrdiff_t>(nw), phi.weights.begin());
  std::copy(flat.begin() + static_cast<std::ptrdiff_t>(nw), flat.end(), phi.bias.begin());
  return loss;
}

}  // namespace coso
