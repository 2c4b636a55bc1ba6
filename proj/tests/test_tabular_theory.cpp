#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "coso/tabular_theory.hpp"
#include "support/oracles.hpp"

namespace {

namespace tb = coso::tabular;
using tb::QTable;
using tb::TabularMdp;
using tb::TabularPolicy;

// Independent joint-entropy oracle: walks every sequence and multiplies the
// conditionals itself instead of going through sequence_probs.
double joint_entropy_oracle(const TabularPolicy& pi, std::size_t s) {
  const std::size_t m = pi.tokens(), n = pi.length();
  double h = 0.0;
  for (std::size_t y = 0; y < tb::ipow(m, n); ++y) {
    std::size_t prefix = 0;
    double p = 1.0;
    for (std::size_t l = 0; l < n; ++l) {
      const std::size_t tok = (y / tb::ipow(m, n - 1 - l)) % m;
      p *= pi.cond(s, l, prefix)[tok];
      prefix = prefix * m + tok;
    }
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

TabularMdp two_state_mdp() {
  TabularMdp m;
  m.states = 2;
  m.tokens = 2;
  m.length = 1;
  m.actions = 2;
  m.parse = {0, 1};
  // P(s'|s,a) rows for (0,0), (0,1), (1,0), (1,1).
  m.transition = {0.9, 0.1, 0.2, 0.8, 0.5, 0.5, 0.0, 1.0};
  m.reward = {1.0, 0.0, -0.5, 2.0};
  m.gamma = 0.8;
  m.validate();
  return m;
}

TEST(WeightedEntropyExact, Examples) {
  const auto u = TabularPolicy::uniform(1, 3, 2);
  EXPECT_NEAR(tb::weighted_entropy_exact(u, 0, std::vector<double>{1, 1}), 2.0 * std::log(3.0), 1e-14);
  EXPECT_EQ(tb::weighted_entropy_exact(u, 0, std::vector<double>{0, 0}), 0.0);

  TabularMdp m;
  m.states = 1;
  m.tokens = 3;
  m.length = 2;
  const auto det = coso::testing::deterministic_policy(m, {5});
  EXPECT_NEAR(tb::weighted_entropy_exact(det, 0, std::vector<double>{1, 1}), 0.0, 1e-12);
  EXPECT_THROW(tb::weighted_entropy_exact(u, 0, std::vector<double>{1}), std::invalid_argument);
}

TEST(EntropyDecomposition, MatchesBruteForceJoint) {
  coso::Rng rng(101);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = 1 + rng.index(4), n = 1 + rng.index(4);
    const auto pi = TabularPolicy::random(2, m, n, rng, 3.0);
    for (std::size_t s = 0; s < 2; ++s) {
      const auto c = tb::entropy_decomposition_check(pi, s);
      EXPECT_LE(c.diff, 1e-10);
      EXPECT_NEAR(c.joint, joint_entropy_oracle(pi, s), 1e-12);
    }
  }
}

TEST(EntropyDecomposition, ProductPolicyIsSumOfMarginals) {
  coso::Rng rng(7);
  const std::size_t m = 3, n = 3;
  auto pi = TabularPolicy::uniform(1, m, n);
  double marginal_sum = 0.0;
  for (std::size_t l = 0; l < n; ++l) {
    std::vector<double> q(m);
    double z = 0.0;
    for (double& v : q) z += (v = rng.uniform(0.1, 1.0));
    for (double& v : q) v /= z;
    for (std::size_t pre = 0; pre < pi.prefixes(l); ++pre) {
      auto c = pi.cond(0, l, pre);
      std::copy(q.begin(), q.end(), c.begin());
    }
    for (double v : q) marginal_sum -= v * std::log(v);
  }
  const auto c = tb::entropy_decomposition_check(pi, 0);
  EXPECT_NEAR(c.joint, marginal_sum, 1e-12);
  EXPECT_NEAR(c.sum_conditionals, marginal_sum, 1e-12);
}

TEST(BellmanBackup, MyopicAndEntropyFreeCases) {
  coso::Rng rng(3);
  auto mdp = tb::random_mdp(rng);
  const auto pi = TabularPolicy::random(mdp.states, mdp.tokens, mdp.length, rng);
  const auto B = tb::random_weights(rng, mdp.length);
  QTable q(mdp.states, mdp.actions);
  for (double& v : q.q) v = rng.uniform(-5.0, 5.0);

  auto myopic = mdp;
  myopic.gamma = 0.0;
  const auto r_only = tb::bellman_backup(myopic, q, pi, B, 0.7);
  for (std::size_t s = 0; s < mdp.states; ++s)
    for (std::size_t a = 0; a < mdp.actions; ++a) EXPECT_EQ(r_only(s, a), mdp.r(s, a));

  // alpha = 0: the classical expectation backup, written out directly.
  const auto plain = tb::bellman_backup(mdp, q, pi, B, 0.0);
  for (std::size_t s = 0; s < mdp.states; ++s) {
    for (std::size_t a = 0; a < mdp.actions; ++a) {
      double expect = mdp.r(s, a);
      for (std::size_t s2 = 0; s2 < mdp.states; ++s2) {
        const auto act = tb::action_distribution(mdp, pi, s2);
        double v = 0.0;
        for (std::size_t a2 = 0; a2 < mdp.actions; ++a2) v += act[a2] * q(s2, a2);
        expect += mdp.gamma * mdp.p(s, a, s2) * v;
      }
      EXPECT_NEAR(plain(s, a), expect, 1e-12);
    }
  }
}

TEST(BellmanBackup, ContractionAndNegativeControl) {
  coso::Rng rng(55);
  for (int inst = 0; inst < 20; ++inst) {
    const auto mdp = tb::random_mdp(rng);
    const auto pi = TabularPolicy::random(mdp.states, mdp.tokens, mdp.length, rng);
    const auto B = tb::random_weights(rng, mdp.length);
    const auto st = tb::policy_stats(mdp, pi, B, 0.5);
    double worst = 0.0, worst_bad = 0.0;
    for (int pair = 0; pair < 100; ++pair) {
      QTable q1(mdp.states, mdp.actions), q2(mdp.states, mdp.actions);
      for (double& v : q1.q) v = rng.uniform(-10.0, 10.0);
      for (double& v : q2.q) v = rng.uniform(-10.0, 10.0);
      const double d = tb::sup_distance(q1, q2);
      worst = std::max(worst, tb::sup_distance(tb::bellman_backup(mdp, q1, st),
                                               tb::bellman_backup(mdp, q2, st)) / d);
      tb::OperatorHooks bad;
      bad.gamma_override = 1.5;
      worst_bad = std::max(worst_bad, tb::sup_distance(tb::bellman_backup(mdp, q1, st, bad),
                                                       tb::bellman_backup(mdp, q2, st, bad)) / d);
    }
    EXPECT_LE(worst, mdp.gamma + 1e-9);
    EXPECT_GT(worst_bad, mdp.gamma + 1e-9);
  }
}

TEST(PolicyEvaluation, TwoStateClosedForm) {
  const auto mdp = two_state_mdp();
  auto pi = TabularPolicy::uniform(2, 2, 1);
  const double p0 = 0.3, p1 = 0.6;  // P(action 0 | s)
  pi.cond(0, 0, 0)[0] = p0;
  pi.cond(0, 0, 0)[1] = 1.0 - p0;
  pi.cond(1, 0, 0)[0] = p1;
  pi.cond(1, 0, 0)[1] = 1.0 - p1;

  // V = (I - gamma P_pi)^{-1} r_pi by the explicit 2x2 inverse.
  const double g = mdp.gamma;
  const double r0 = p0 * 1.0 + (1 - p0) * 0.0, r1 = p1 * -0.5 + (1 - p1) * 2.0;
  const double P00 = p0 * 0.9 + (1 - p0) * 0.2, P01 = 1 - P00;
  const double P10 = p1 * 0.5 + (1 - p1) * 0.0, P11 = 1 - P10;
  const double a = 1 - g * P00, b = -g * P01, c = -g * P10, d = 1 - g * P11;
  const double det = a * d - b * c;
  const double V0 = (d * r0 - b * r1) / det, V1 = (-c * r0 + a * r1) / det;
  auto q_of = [&](std::size_t s, std::size_t act) {
    return mdp.r(s, act) + g * (mdp.p(s, act, 0) * V0 + mdp.p(s, act, 1) * V1);
  };

  const std::vector<double> B{1.0};
  const auto it = tb::policy_evaluation(mdp, pi, B, 0.0, 1e-13);
  const auto direct = tb::evaluate_linear_solve(mdp, pi, B, 0.0);
  for (std::size_t s = 0; s < 2; ++s) {
    for (std::size_t act = 0; act < 2; ++act) {
      EXPECT_NEAR(direct(s, act), q_of(s, act), 1e-12);
      EXPECT_NEAR(it.q(s, act), q_of(s, act), 1e-11);
    }
  }
}

TEST(PolicyEvaluation, ResidualsContractAndMatchDirectSolve) {
  coso::Rng rng(77);
  for (int inst = 0; inst < 30; ++inst) {
    const auto mdp = tb::random_mdp(rng);
    const auto pi = TabularPolicy::random(mdp.states, mdp.tokens, mdp.length, rng);
    const auto B = tb::random_weights(rng, mdp.length);
    const double alpha = rng.uniform(0.0, 1.0);
    const auto res = tb::policy_evaluation(mdp, pi, B, alpha, 1e-12);
    // Computed residuals carry a few ulps of |Q| of absolute rounding error, which
    // dominates the ratio once residuals approach 1e-12.
    double qmax = 0.0;
    for (double v : res.q.q) qmax = std::max(qmax, std::abs(v));
    const double roundoff = 64.0 * std::numeric_limits<double>::epsilon() * (1.0 + qmax);
    for (std::size_t k = 1; k < res.residuals.size(); ++k)
      EXPECT_LE(res.residuals[k], (mdp.gamma + 1e-9) * res.residuals[k - 1] + roundoff) << "k=" << k;
    const auto direct = tb::evaluate_linear_solve(mdp, pi, B, alpha);
    EXPECT_LE(tb::sup_distance(res.q, direct), 1e-8);
    const auto again = tb::bellman_backup(mdp, direct, pi, B, alpha);
    EXPECT_LE(tb::sup_distance(again, direct), 1e-8);
    const auto [lo, hi] = tb::q_bounds(mdp, B, alpha);
    for (double v : direct.q) {
      EXPECT_GE(v, lo - 1e-9);
      EXPECT_LE(v, hi + 1e-9);
    }
  }
}

TEST(PolicyEvaluation, RewardShiftAndIterationCap) {
  coso::Rng rng(8);
  const auto mdp = tb::random_mdp(rng);
  const auto pi = TabularPolicy::random(mdp.states, mdp.tokens, mdp.length, rng);
  const auto B = tb::random_weights(rng, mdp.length);
  auto shifted = mdp;
  const double c = 0.75;
  for (double& r : shifted.reward) r += c;
  const auto q = tb::evaluate_linear_solve(mdp, pi, B, 0.4);
  const auto qs = tb::evaluate_linear_solve(shifted, pi, B, 0.4);
  for (std::size_t i = 0; i < q.q.size(); ++i) EXPECT_NEAR(qs.q[i] - q.q[i], c / (1.0 - mdp.gamma), 1e-9);

  EXPECT_THROW(tb::policy_evaluation(mdp, pi, B, 0.4, 1e-12, 2), tb::IterationCapExceeded);
  EXPECT_THROW(tb::policy_evaluation(mdp, pi, B, 0.4, 0.0), std::invalid_argument);
}

TEST(SoftImprove, GreedyWhenEntropyIsOff) {
  coso::Rng rng(12);
  for (int inst = 0; inst < 20; ++inst) {
    const auto mdp = tb::random_mdp(rng);
    const auto pi = TabularPolicy::random(mdp.states, mdp.tokens, mdp.length, rng);
    const auto B = tb::random_weights(rng, mdp.length);
    const auto q = tb::evaluate_linear_solve(mdp, pi, B, 0.0);
    const auto next = tb::soft_improve(mdp, q, pi, B, 0.0);
    for (std::size_t s = 0; s < mdp.states; ++s) {
      std::size_t best = 0;
      for (std::size_t a = 1; a < mdp.actions; ++a)
        if (q(s, a) > q(s, best)) best = a;
      EXPECT_NEAR(tb::action_distribution(mdp, next, s)[best], 1.0, 1e-12);
    }
  }
}

TEST(SoftImprove, TiesBreakToLowestIndex) {
  TabularMdp mdp = two_state_mdp();
  QTable q(2, 2, 1.0);
  const auto next = tb::soft_improve(mdp, q, TabularPolicy::uniform(2, 2, 1), std::vector<double>{1.0}, 0.0);
  EXPECT_EQ(next.cond(0, 0, 0)[0], 1.0);
  EXPECT_EQ(next.cond(1, 0, 0)[0], 1.0);
}

TEST(SoftImprove, ConstantQGivesUniform) {
  coso::Rng rng(4);
  TabularMdp mdp;
  mdp.states = 2;
  mdp.tokens = 3;
  mdp.length = 2;
  mdp.actions = 3;
  mdp.parse = {0, 1, 2, 0, 1, 2, 0, 1, 2};
  QTable q(2, 3, 4.2);
  const auto start = TabularPolicy::random(2, 3, 2, rng);
  const auto next = tb::soft_improve(mdp, q, start, std::vector<double>{1.0, 1.0}, 0.5);
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t l = 0; l < 2; ++l)
      for (std::size_t pre = 0; pre < next.prefixes(l); ++pre)
        for (double p : next.cond(s, l, pre)) EXPECT_NEAR(p, 1.0 / 3.0, 1e-12);
}

TEST(SoftImprove, ImprovesObjectiveAndQ) {
  coso::Rng rng(2718);
  for (int inst = 0; inst < 50; ++inst) {
    const auto mdp = tb::random_mdp(rng);
    const auto pi = TabularPolicy::random(mdp.states, mdp.tokens, mdp.length, rng);
    const auto B = tb::random_weights(rng, mdp.length);
    const double alpha = rng.uniform(0.05, 1.0);
    const auto q = tb::evaluate_linear_solve(mdp, pi, B, alpha);
    const auto next = tb::soft_improve(mdp, q, pi, B, alpha);
    for (std::size_t s = 0; s < mdp.states; ++s)
      EXPECT_GE(tb::soft_objective(mdp, q, next, s, B, alpha),
                tb::soft_objective(mdp, q, pi, s, B, alpha) - 1e-12);
    const auto q_next = tb::evaluate_linear_solve(mdp, next, B, alpha);
    for (std::size_t i = 0; i < q.q.size(); ++i) EXPECT_GE(q_next.q[i], q.q[i] - 1e-8);
  }
}

TEST(PolicyIteration, MonotoneConvergentAndFixed) {
  coso::Rng rng(31415);
  for (int inst = 0; inst < 50; ++inst) {
    const auto mdp = tb::random_mdp(rng);
    const auto B = tb::random_weights(rng, mdp.length);
    const double alpha = rng.uniform(0.0, 1.0);
    const auto res = tb::policy_iteration(mdp, B, alpha, 1e-10, 1000);
    EXPECT_TRUE(res.converged);
    EXPECT_LE(res.iterations, 1000u);
    for (double m : res.monotonicity) EXPECT_GE(m, -1e-7);
    const auto extra = tb::soft_improve(mdp, res.q, res.policy, B, alpha);
    EXPECT_LE(tb::sup_distance(tb::evaluate_linear_solve(mdp, extra, B, alpha), res.q), 1e-8);
  }
  EXPECT_THROW(tb::policy_iteration(tb::random_mdp(rng), std::vector<double>{1.0}, 0.1, 1e-9, 0),
               std::invalid_argument);
}

TEST(PolicyIteration, ClassicalCaseReachesBruteForceOptimum) {
  coso::Rng rng(99);
  tb::RandomMdpOptions o;
  o.min_states = o.max_states = 3;
  o.min_actions = o.max_actions = 2;
  o.max_tokens = 2;
  o.max_length = 2;
  for (int inst = 0; inst < 10; ++inst) {
    const auto mdp = tb::random_mdp(rng, o);
    ASSERT_EQ(mdp.actions, 2u);
    const std::vector<double> B(mdp.length, 1.0);
    const auto res = tb::policy_iteration(mdp, B, 0.0, 1e-12, 1000);
    const auto best = coso::testing::brute_force_optimum(mdp);
    const auto v = coso::testing::state_values(mdp, res.policy, B, 0.0);
    for (std::size_t s = 0; s < mdp.states; ++s) EXPECT_NEAR(v[s], best.values[s], 1e-8);
  }
}

TEST(TabularMdp, ValidationCatchesBrokenTables) {
  auto m = two_state_mdp();
  m.transition[0] = 0.95;
  EXPECT_THROW(m.validate(), std::invalid_argument);
  m = two_state_mdp();
  m.parse[1] = 2;
  EXPECT_THROW(m.validate(), std::invalid_argument);
  m = two_state_mdp();
  m.gamma = 1.0;
  EXPECT_THROW(m.validate(), std::invalid_argument);
}

}  // namespace
