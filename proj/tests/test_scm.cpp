#include <gtest/gtest.h>

#include <cmath>

#include "coso/scm.hpp"
#include "support/oracles.hpp"

namespace {

using coso::ScmExample;
using coso::ScmParams;
using coso::Utterance;

TEST(ScmLikelihood, ZeroParamsAreUniform) {
  ScmParams phi(3, 16, 3);
  auto p = coso::scm_likelihood(phi, Utterance{4, 5, 2});
  for (double v : p) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  EXPECT_EQ(coso::scm_predict(phi, Utterance{4, 5, 2}), 0u);
}

TEST(ScmLikelihood, NormalizedFiniteAndNullInDomain) {
  ScmParams phi(6, 32, 8);
  coso::Rng rng(4);
  for (auto& w : phi.weights) w = rng.uniform(-30.0, 30.0);
  for (auto& b : phi.bias) b = rng.uniform(-5.0, 5.0);
  for (int trial = 0; trial < 2000; ++trial) {
    Utterance y(6);
    for (auto& t : y) t = static_cast<coso::TokenId>(rng.index(32));  // NULL allowed
    auto p = coso::scm_likelihood(phi, y);
    double s = 0.0;
    for (double v : p) {
      EXPECT_TRUE(std::isfinite(v));
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(ScmLikelihood, DimensionErrors) {
  ScmParams phi(3, 16, 3);
  EXPECT_THROW(coso::scm_likelihood(phi, Utterance{1, 2}), std::invalid_argument);
  EXPECT_THROW(coso::scm_likelihood(phi, Utterance{1, 2, 16}), std::invalid_argument);
  EXPECT_THROW(ScmParams(0, 16, 3), std::invalid_argument);
}

TEST(ScmPredict, InvariantToLogitShift) {
  ScmParams phi(3, 16, 3);
  coso::Rng rng(2);
  for (auto& w : phi.weights) w = rng.uniform(-2.0, 2.0);
  for (int trial = 0; trial < 200; ++trial) {
    Utterance y{static_cast<coso::TokenId>(rng.index(16)), static_cast<coso::TokenId>(rng.index(16)),
                static_cast<coso::TokenId>(rng.index(16))};
    const auto before = coso::scm_predict(phi, y);
    const auto p_before = coso::scm_likelihood(phi, y);
    ScmParams shifted = phi;
    for (auto& b : shifted.bias) b += 123.25;
    EXPECT_EQ(coso::scm_predict(shifted, y), before);
    const auto p_after = coso::scm_likelihood(shifted, y);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(p_after[c], p_before[c], 1e-12);
  }
}

TEST(ScmUpdate, FirstLossIsLogClassCount) {
  ScmParams phi(6, 32, 8);
  std::vector<ScmExample> batch{{Utterance{3, 4, 5, 11, 2, 7}, 0}, {Utterance{9, 9, 9, 12, 3, 8}, 4}};
  EXPECT_NEAR(coso::scm_update(phi, batch), std::log(8.0), 1e-12);
  EXPECT_EQ(phi.optimizer.t, 1u);
}

TEST(ScmUpdate, OverfitsOneExample) {
  ScmParams phi(3, 16, 3, 1e-2);
  std::vector<ScmExample> batch{{Utterance{7, 3, 2}, 0}};
  for (int k = 0; k < 1000; ++k) coso::scm_update(phi, batch);
  const double loss = coso::scm_loss(phi, batch);
  EXPECT_LE(loss, 0.01);
}

TEST(ScmUpdate, LossNonIncreasingOnFixedBatch) {
  auto env = coso::make_env("menunav");
  auto phi = ScmParams::for_env(*env);
  auto policy = coso::PolicyParams::for_env(*env);
  coso::Rng rng(6);
  const auto batch = coso::testing::rollout_pairs(*env, policy, 64, rng);
  double prev = coso::scm_loss(phi, batch);
  for (int block = 0; block < 20; ++block) {
    for (int k = 0; k < 100; ++k) coso::scm_update(phi, batch);
    const double cur = coso::scm_loss(phi, batch);
    EXPECT_LE(cur, prev + 1e-3) << "block " << block;
    prev = cur;
  }
}

TEST(ScmUpdate, FuzzNeverProducesNaN) {
  ScmParams phi(4, 12, 5, 0.05);
  coso::Rng rng(17);
  for (int b = 0; b < 10000; ++b) {
    std::vector<ScmExample> batch(1 + rng.index(8));
    for (auto& ex : batch) {
      ex.utterance.resize(4);
      for (auto& t : ex.utterance) t = static_cast<coso::TokenId>(rng.index(12));
      ex.label = rng.index(5);
    }
    const double loss = coso::scm_update(phi, batch);
    ASSERT_TRUE(std::isfinite(loss));
    ASSERT_GE(loss, 0.0);
  }
  for (double w : phi.weights) EXPECT_TRUE(std::isfinite(w));
}

TEST(ScmUpdate, Errors) {
  ScmParams phi(3, 16, 3);
  std::vector<ScmExample> empty;
  EXPECT_THROW(coso::scm_update(phi, empty), std::invalid_argument);
  std::vector<ScmExample> bad{{Utterance{1, 2, 3}, 3}};
  EXPECT_THROW(coso::scm_update(phi, bad), std::invalid_argument);
}

// Label fidelity against the parser oracle on held-out rollouts.
TEST(ScmFidelity, LearnsTheParser) {
  for (const auto& [id, bar] : std::vector<std::pair<std::string, double>>{{"numberline", 0.99},
                                                                            {"menunav", 0.95}}) {
    auto env = coso::make_env(id);
    auto phi = ScmParams::for_env(*env);
    auto policy = coso::PolicyParams::for_env(*env);
    coso::Rng rng(2024);
    const auto train = coso::testing::rollout_pairs(*env, policy, 10000, rng);
    const auto held_out = coso::testing::rollout_pairs(*env, policy, 2000, rng);
    coso::testing::train_scm_epochs(phi, train, 50, 100, rng);
    EXPECT_GE(coso::testing::scm_accuracy(phi, held_out), bar) << id;
  }
}

}  // namespace
