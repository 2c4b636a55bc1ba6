#include <gtest/gtest.h>

#include <cmath>

#include "coso/counterfactual.hpp"
#include "support/oracles.hpp"

namespace {

using coso::CausalWeights;
using coso::ScmParams;
using coso::Utterance;
using coso::WeightMode;

TEST(Nullify, ReplacesExactlyOnePosition) {
  const Utterance y{5, 3, 9};
  const auto z = coso::nullify(y, 1);
  EXPECT_EQ(z, (Utterance{5, coso::kNullToken, 9}));
  EXPECT_EQ(y, (Utterance{5, 3, 9}));
  auto restored = z;
  restored[1] = y[1];
  EXPECT_EQ(restored, y);
  for (std::size_t i = 0; i < y.size(); ++i) {
    const auto w = coso::nullify(y, i);
    std::size_t diff = 0;
    for (std::size_t k = 0; k < y.size(); ++k) diff += w[k] != y[k] ? 1 : 0;
    EXPECT_EQ(diff, 1u);
  }
  EXPECT_THROW(coso::nullify(y, 3), std::out_of_range);
}

TEST(CausalWeights, ZeroScmGivesZeroWeights) {
  ScmParams phi(6, 32, 8);
  std::size_t evals = 0;
  auto w = coso::causal_weights(phi, Utterance{13, 14, 15, 11, 2, 7}, 0, &evals);
  for (double v : w.raw) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(evals, 7u);  // one base + n interventions
}

// Oracle: recompute every intervention by hand from explicit softmaxes.
TEST(CausalWeights, MatchesDirectDefinition) {
  ScmParams phi(4, 10, 3);
  coso::Rng rng(12);
  for (auto& w : phi.weights) w = rng.uniform(-3.0, 3.0);
  for (int trial = 0; trial < 200; ++trial) {
    Utterance y(4);
    for (auto& t : y) t = static_cast<coso::TokenId>(1 + rng.index(9));
    const std::size_t a = rng.index(3);
    const auto w = coso::causal_weights(phi, y, a);
    auto prob = [&](const Utterance& u) {
      std::vector<double> z(3, 0.0);
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t c = 0; c < 3; ++c) z[c] += phi.weights[(i * 10 + u[i]) * 3 + c];
      double s = 0.0;
      for (double v : z) s += std::exp(v);
      return std::exp(z[a]) / s;
    };
    for (std::size_t i = 0; i < 4; ++i) {
      auto u = y;
      u[i] = 0;
      EXPECT_NEAR(w.raw[i], std::abs(prob(y) - prob(u)), 1e-12);
      EXPECT_GE(w.raw[i], 0.0);
      EXPECT_LE(w.raw[i], 1.0);
    }
    EXPECT_EQ(coso::causal_weights(phi, y, a).raw, w.raw);  // pure function
  }
}

TEST(CausalWeights, IdenticalNullColumnGivesExactZero) {
  ScmParams phi(3, 8, 3);
  coso::Rng rng(1);
  for (auto& w : phi.weights) w = rng.uniform(-2.0, 2.0);
  // Make token 5's column at position 1 equal to the NULL column there.
  for (std::size_t c = 0; c < 3; ++c) phi.weights[(1 * 8 + 5) * 3 + c] = phi.weights[(1 * 8 + 0) * 3 + c];
  const auto w = coso::causal_weights(phi, Utterance{2, 5, 7}, 1);
  EXPECT_NEAR(w.raw[1], 0.0, 1e-12);
}

TEST(CausalWeights, ClassOutOfRangeThrows) {
  ScmParams phi(3, 8, 3);
  EXPECT_THROW(coso::causal_weights(phi, Utterance{1, 2, 3}, 3), std::invalid_argument);
}

TEST(Normalize, MaxnormWithFloor) {
  CausalWeights w;
  w.raw = {0.0, 0.0, 0.5};
  auto n = coso::normalize_weights(w, WeightMode::maxnorm);
  EXPECT_EQ(n.normalized, (std::vector<double>{0.01, 0.01, 1.0}));
  EXPECT_EQ(n.mode, WeightMode::maxnorm);

  w.raw = {0.0, 0.0, 0.0};
  EXPECT_EQ(coso::normalize_weights(w, WeightMode::maxnorm).normalized,
            (std::vector<double>{0.01, 0.01, 0.01}));
  w.raw = {1e-7, 5e-7, 0.0};  // below eps
  EXPECT_EQ(coso::normalize_weights(w, WeightMode::maxnorm).normalized,
            (std::vector<double>{0.01, 0.01, 0.01}));

  w.raw = {0.3, 0.1, 0.6};
  auto raw = coso::normalize_weights(w, WeightMode::raw);
  EXPECT_EQ(raw.normalized, w.raw);
  std::vector<double> eff(raw.effective().begin(), raw.effective().end());
  EXPECT_EQ(eff, w.raw);
}

TEST(Normalize, MaxnormIsIdempotent) {
  coso::Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    CausalWeights w;
    for (int i = 0; i < 6; ++i) w.raw.push_back(rng.uniform());
    auto once = coso::normalize_weights(w, WeightMode::maxnorm);
    CausalWeights again;
    again.raw = once.normalized;
    auto twice = coso::normalize_weights(again, WeightMode::maxnorm);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(twice.normalized[i], once.normalized[i], 1e-15);
    EXPECT_DOUBLE_EQ(*std::max_element(once.normalized.begin(), once.normalized.end()), 1.0);
  }
}

TEST(WeightStats, CountsAndPartition) {
  CausalWeights w;
  w.normalized = {0.01, 0.01, 1.0};
  std::vector<CausalWeights> batch{w};
  auto h = coso::weight_stats(batch);
  EXPECT_NEAR(h.low_fraction(), 2.0 / 3.0, 1e-15);
  EXPECT_EQ(h.counts.back(), 1u);

  coso::Rng rng(9);
  std::vector<CausalWeights> many(50);
  for (auto& c : many)
    for (int i = 0; i < 5; ++i) c.normalized.push_back(rng.index(7) == 0 ? 0.2 : rng.uniform());
  auto hm = coso::weight_stats(many);
  double s = 0.0;
  for (double f : hm.fractions) s += f;
  EXPECT_NEAR(s, 1.0, 1e-9);
  EXPECT_EQ(hm.total, 250u);

  std::vector<CausalWeights> none;
  EXPECT_THROW(coso::weight_stats(none), std::invalid_argument);
}

// A converged SCM concentrates raw weight on the operator slot.
TEST(CausalWeights, ConvergedScmLocalizesTheActionSlot) {
  auto env = coso::make_env("numberline");
  auto phi = ScmParams::for_env(*env);
  auto policy = coso::PolicyParams::for_env(*env);
  coso::Rng rng(5);
  const auto data = coso::testing::rollout_pairs(*env, policy, 10000, rng);
  coso::testing::train_scm_epochs(phi, data, 50, 100, rng);

  const auto& g = env->grammar();
  double kind = 0.0, filler = 0.0;
  std::size_t count = 0;
  for (std::size_t k = 0; k < 1000; ++k) {
    const Utterance& y = data[k].utterance;
    if (!coso::parse_ok(coso::parse(g, y))) continue;
    const auto w = coso::causal_weights(phi, y, data[k].label);
    kind += w.raw[2];
    filler += 0.5 * (w.raw[0] + w.raw[1]);
    ++count;
  }
  ASSERT_GT(count, 0u);
  EXPECT_GE(kind / count, 5.0 * filler / count);

  // Both filler slots holding the same token: neither dominates on average.
  double dup_a = 0.0, dup_b = 0.0;
  for (std::size_t k = 0; k < 1000; ++k) {
    const auto t = static_cast<coso::TokenId>(1 + rng.index(15));
    const auto op = g.legal[2][rng.index(g.legal[2].size())];
    const Utterance y{t, t, op};
    const auto w = coso::causal_weights(phi, y, env->action_class(coso::parse(g, y)));
    dup_a += w.raw[0];
    dup_b += w.raw[1];
  }
  const double ratio = (dup_a + 1e-12) / (dup_b + 1e-12);
  EXPECT_LE(ratio, 2.0);
  EXPECT_GE(ratio, 0.5);
}

}  // namespace
