#pragma once

// Exact finite-MDP machinery for the causal-weighted soft Bellman operator:
// utterance-level tabular policies pushed through a parse table, the backup
// T^B Q(s,a) = r(s,a) + gamma * E_{s'}[alpha * H^B(pi(.|s')) + E_{a'~pi} Q(s',a')],
// iterative and direct policy evaluation, soft improvement and policy iteration.
// Weight profiles B are fixed per position and independent of the state.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "coso/rng.hpp"

namespace coso::tabular {

inline std::size_t ipow(std::size_t b, std::size_t e) {
  std::size_t r = 1;
  for (std::size_t i = 0; i < e; ++i) r *= b;
  return r;
}

/// Finite MDP whose actions are produced by parsing length-n token sequences
/// over m non-NULL tokens. Sequence codes are base-m with the first token most
/// significant.
struct TabularMdp {
  std::size_t states = 0;
  std::size_t tokens = 0;
  std::size_t length = 0;
  std::size_t actions = 0;
  std::vector<std::size_t> parse;   // [sequence] -> action
  std::vector<double> transition;   // [(s * A + a) * S + s']
  std::vector<double> reward;       // [s * A + a]
  double gamma = 0.9;

  std::size_t sequences() const { return ipow(tokens, length); }
  double p(std::size_t s, std::size_t a, std::size_t s2) const {
    return transition[(s * actions + a) * states + s2];
  }
  double r(std::size_t s, std::size_t a) const { return reward[s * actions + a]; }
  double r_min() const { return *std::min_element(reward.begin(), reward.end()); }
  double r_max() const { return *std::max_element(reward.begin(), reward.end()); }

  void validate() const {
    if (states == 0 || tokens == 0 || length == 0 || actions == 0)
      throw std::invalid_argument("TabularMdp: empty dimension");
    if (parse.size() != sequences()) throw std::invalid_argument("TabularMdp: parse table size");
    for (auto a : parse)
      if (a >= actions) throw std::invalid_argument("TabularMdp: parse maps outside the action set");
    if (transition.size() != states * actions * states || reward.size() != states * actions)
      throw std::invalid_argument("TabularMdp: table sizes");
    for (std::size_t sa = 0; sa < states * actions; ++sa) {
      double sum = 0.0;
      for (std::size_t s2 = 0; s2 < states; ++s2) {
        const double v = transition[sa * states + s2];
        if (v < 0.0) throw std::invalid_argument("TabularMdp: negative transition probability");
        sum += v;
      }
      if (std::abs(sum - 1.0) > 1e-12) throw std::invalid_argument("TabularMdp: row not a simplex");
    }
    if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("TabularMdp: gamma outside [0,1)");
  }
};

/// Full autoregressive conditional tables pi(y^i | y^{1:i-1}, s).
class TabularPolicy {
public:
  TabularPolicy() = default;
  TabularPolicy(std::size_t states, std::size_t tokens, std::size_t length)
      : states_(states), tokens_(tokens), length_(length) {
    std::size_t off = 0;
    for (std::size_t l = 0; l < length_; ++l) {
      level_offset_.push_back(off);
      off += ipow(tokens_, l) * tokens_;
    }
    per_state_ = off;
    table_.assign(states_ * per_state_, 1.0 / static_cast<double>(tokens_));
  }

  std::size_t states() const { return states_; }
  std::size_t tokens() const { return tokens_; }
  std::size_t length() const { return length_; }
  std::size_t prefixes(std::size_t level) const { return ipow(tokens_, level); }

  std::span<double> cond(std::size_t s, std::size_t level, std::size_t prefix) {
    return {&table_[s * per_state_ + level_offset_[level] + prefix * tokens_], tokens_};
  }
  std::span<const double> cond(std::size_t s, std::size_t level, std::size_t prefix) const {
    return {&table_[s * per_state_ + level_offset_[level] + prefix * tokens_], tokens_};
  }

  static TabularPolicy uniform(std::size_t states, std::size_t tokens, std::size_t length) {
    return TabularPolicy(states, tokens, length);
  }

  /// Random conditionals from uniform logits in [-sharpness, sharpness].
  static TabularPolicy random(std::size_t states, std::size_t tokens, std::size_t length, Rng& rng,
                              double sharpness = 2.0) {
    TabularPolicy p(states, tokens, length);
    for (double& v : p.table_) v = std::exp(sharpness * (2.0 * rng.uniform() - 1.0));
    p.renormalize();
    return p;
  }

  void renormalize() {
    for (std::size_t base = 0; base < table_.size(); base += tokens_) {
      double s = 0.0;
      for (std::size_t t = 0; t < tokens_; ++t) s += table_[base + t];
      for (std::size_t t = 0; t < tokens_; ++t) table_[base + t] /= s;
    }
  }

  friend bool operator==(const TabularPolicy&, const TabularPolicy&) = default;

private:
  std::size_t states_ = 0, tokens_ = 0, length_ = 0, per_state_ = 0;
  std::vector<std::size_t> level_offset_;
  std::vector<double> table_;
};

struct QTable {
  std::size_t states = 0;
  std::size_t actions = 0;
  std::vector<double> q;

  QTable() = default;
  QTable(std::size_t s, std::size_t a, double fill = 0.0) : states(s), actions(a), q(s * a, fill) {}
  double& operator()(std::size_t s, std::size_t a) { return q[s * actions + a]; }
  double operator()(std::size_t s, std::size_t a) const { return q[s * actions + a]; }
};

inline double sup_distance(const QTable& x, const QTable& y) {
  double d = 0.0;
  for (std::size_t i = 0; i < x.q.size(); ++i) d = std::max(d, std::abs(x.q[i] - y.q[i]));
  return d;
}

inline double entropy_of(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

/// Joint probability of every full sequence at state s.
inline std::vector<double> sequence_probs(const TabularPolicy& pi, std::size_t s) {
  std::vector<double> probs{1.0};
  for (std::size_t l = 0; l < pi.length(); ++l) {
    std::vector<double> next(probs.size() * pi.tokens());
    for (std::size_t pre = 0; pre < probs.size(); ++pre) {
      auto q = pi.cond(s, l, pre);
      for (std::size_t t = 0; t < pi.tokens(); ++t) next[pre * pi.tokens() + t] = probs[pre] * q[t];
    }
    probs = std::move(next);
  }
  return probs;
}

inline std::vector<double> action_distribution(const TabularMdp& mdp, const TabularPolicy& pi,
                                               std::size_t s) {
  std::vector<double> out(mdp.actions, 0.0);
  auto probs = sequence_probs(pi, s);
  for (std::size_t y = 0; y < probs.size(); ++y) out[mdp.parse[y]] += probs[y];
  return out;
}

/// sum_i B_i * sum_{prefix of length i} p(prefix) H(pi(.|prefix)).
inline double weighted_entropy_exact(const TabularPolicy& pi, std::size_t s,
                                     std::span<const double> weights) {
  if (weights.size() != pi.length()) throw std::invalid_argument("weight profile length mismatch");
  std::vector<double> probs{1.0};
  double total = 0.0;
  for (std::size_t l = 0; l < pi.length(); ++l) {
    double level = 0.0;
    std::vector<double> next(probs.size() * pi.tokens());
    for (std::size_t pre = 0; pre < probs.size(); ++pre) {
      auto q = pi.cond(s, l, pre);
      if (probs[pre] > 0.0) level += probs[pre] * entropy_of(q);
      for (std::size_t t = 0; t < pi.tokens(); ++t) next[pre * pi.tokens() + t] = probs[pre] * q[t];
    }
    total += weights[l] * level;
    probs = std::move(next);
  }
  return total;
}

struct DecompositionCheck {
  double joint = 0.0;
  double sum_conditionals = 0.0;
  double diff = 0.0;
};

inline DecompositionCheck entropy_decomposition_check(const TabularPolicy& pi, std::size_t s) {
  DecompositionCheck c;
  c.joint = entropy_of(sequence_probs(pi, s));
  std::vector<double> ones(pi.length(), 1.0);
  c.sum_conditionals = weighted_entropy_exact(pi, s, ones);
  c.diff = std::abs(c.joint - c.sum_conditionals);
  return c;
}

/// Per-state successor bonus alpha*H^B and action distributions, shared by both evaluators.
struct PolicyStats {
  std::vector<double> bonus;                // [s]
  std::vector<std::vector<double>> action;  // [s][a]
};

inline PolicyStats policy_stats(const TabularMdp& mdp, const TabularPolicy& pi,
                                std::span<const double> weights, double alpha) {
  PolicyStats st;
  for (std::size_t s = 0; s < mdp.states; ++s) {
    st.bonus.push_back(alpha == 0.0 ? 0.0 : alpha * weighted_entropy_exact(pi, s, weights));
    st.action.push_back(action_distribution(mdp, pi, s));
  }
  return st;
}

/// Test hooks for negative controls.
struct OperatorHooks {
  /// When set, replaces the discount inside the backup (not in the bound checks).
  double gamma_override = std::numeric_limits<double>::quiet_NaN();
};

inline QTable bellman_backup(const TabularMdp& mdp, const QTable& q, const PolicyStats& st,
                             OperatorHooks hooks = {}) {
  const double gamma = std::isnan(hooks.gamma_override) ? mdp.gamma : hooks.gamma_override;
  std::vector<double> next_value(mdp.states);
  for (std::size_t s2 = 0; s2 < mdp.states; ++s2) {
    double v = st.bonus[s2];
    for (std::size_t a2 = 0; a2 < mdp.actions; ++a2) v += st.action[s2][a2] * q(s2, a2);
    next_value[s2] = v;
  }
  QTable out(mdp.states, mdp.actions);
  for (std::size_t s = 0; s < mdp.states; ++s)
    for (std::size_t a = 0; a < mdp.actions; ++a) {
      double e = 0.0;
      for (std::size_t s2 = 0; s2 < mdp.states; ++s2) e += mdp.p(s, a, s2) * next_value[s2];
      out(s, a) = mdp.r(s, a) + gamma * e;
    }
  return out;
}

inline QTable bellman_backup(const TabularMdp& mdp, const QTable& q, const TabularPolicy& pi,
                             std::span<const double> weights, double alpha,
                             OperatorHooks hooks = {}) {
  return bellman_backup(mdp, q, policy_stats(mdp, pi, weights, alpha), hooks);
}

struct EvaluationResult {
  QTable q;
  std::vector<double> residuals;
  std::size_t iterations = 0;
};

class IterationCapExceeded : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Iterates T^B from Q = 0 until successive tables differ by less than tol.
inline EvaluationResult policy_evaluation(const TabularMdp& mdp, const TabularPolicy& pi,
                                          std::span<const double> weights, double alpha,
                                          double tol, std::size_t max_iters = 100000) {
  if (!(tol > 0.0)) throw std::invalid_argument("policy_evaluation: tol must be positive");
  const auto st = policy_stats(mdp, pi, weights, alpha);
  EvaluationResult res;
  res.q = QTable(mdp.states, mdp.actions);
  for (std::size_t k = 0; k < max_iters; ++k) {
    QTable next = bellman_backup(mdp, res.q, st);
    const double d = sup_distance(next, res.q);
    res.q = std::move(next);
    res.residuals.push_back(d);
    res.iterations = k + 1;
    if (d < tol) return res;
  }
  throw IterationCapExceeded("policy_evaluation: iteration cap exceeded");
}

/// Direct solve of (I - gamma * P * Pi) Q = r + gamma * P * bonus.
inline QTable evaluate_linear_solve(const TabularMdp& mdp, const TabularPolicy& pi,
                                    std::span<const double> weights, double alpha) {
  const auto st = policy_stats(mdp, pi, weights, alpha);
  const auto sa = static_cast<Eigen::Index>(mdp.states * mdp.actions);
  Eigen::MatrixXd m = Eigen::MatrixXd::Identity(sa, sa);
  Eigen::VectorXd rhs(sa);
  for (std::size_t s = 0; s < mdp.states; ++s)
    for (std::size_t a = 0; a < mdp.actions; ++a) {
      const auto row = static_cast<Eigen::Index>(s * mdp.actions + a);
      double b = mdp.r(s, a);
      for (std::size_t s2 = 0; s2 < mdp.states; ++s2) {
        const double p = mdp.p(s, a, s2);
        b += mdp.gamma * p * st.bonus[s2];
        for (std::size_t a2 = 0; a2 < mdp.actions; ++a2)
          m(row, static_cast<Eigen::Index>(s2 * mdp.actions + a2)) -=
              mdp.gamma * p * st.action[s2][a2];
      }
      rhs(row) = b;
    }
  Eigen::VectorXd x = m.partialPivLu().solve(rhs);
  QTable out(mdp.states, mdp.actions);
  for (Eigen::Index i = 0; i < sa; ++i) out.q[static_cast<std::size_t>(i)] = x(i);
  return out;
}

/// Per-state soft objective E_{a~pi}[Q(s,a)] + alpha * H^B(pi(.|s)).
inline double soft_objective(const TabularMdp& mdp, const QTable& q, const TabularPolicy& pi,
                             std::size_t s, std::span<const double> weights, double alpha) {
  auto ad = action_distribution(mdp, pi, s);
  double v = 0.0;
  for (std::size_t a = 0; a < mdp.actions; ++a) v += ad[a] * q(s, a);
  return v + alpha * weighted_entropy_exact(pi, s, weights);
}

namespace detail {

// Node objective alpha*B*H(q) + sum_t q_t * child_t.
inline double node_value(std::span<const double> q, std::span<const double> child, double temp) {
  double v = temp > 0.0 ? temp * entropy_of(q) : 0.0;
  for (std::size_t t = 0; t < q.size(); ++t)
    if (q[t] > 0.0) v += q[t] * child[t];
  return v;
}

// Exact maximizer of node_value over the simplex (softmax, or argmax at temp 0).
inline std::vector<double> node_maximizer(std::span<const double> child, double temp) {
  std::vector<double> q(child.size(), 0.0);
  if (temp <= 0.0) {
    std::size_t best = 0;
    for (std::size_t t = 1; t < child.size(); ++t)
      if (child[t] > child[best]) best = t;
    q[best] = 1.0;
    return q;
  }
  const double mx = *std::max_element(child.begin(), child.end());
  double z = 0.0;
  for (std::size_t t = 0; t < child.size(); ++t) z += (q[t] = std::exp((child[t] - mx) / temp));
  for (double& v : q) v /= z;
  return q;
}

}  // namespace detail

/// Coordinate ascent over the autoregressive conditionals of each state, from
/// the deepest level to the root. Every node update is the exact maximizer of
/// its subtree objective given its children and is kept only if it does not
/// decrease that objective, so the per-state objective never decreases.
inline TabularPolicy soft_improve(const TabularMdp& mdp, const QTable& q, const TabularPolicy& pi,
                                  std::span<const double> weights, double alpha,
                                  std::size_t max_sweeps = 3) {
  if (weights.size() != pi.length()) throw std::invalid_argument("weight profile length mismatch");
  TabularPolicy out = pi;
  const std::size_t m = pi.tokens();
  for (std::size_t s = 0; s < mdp.states; ++s) {
    for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
      bool changed = false;
      // child values for the level being processed; starts at the leaves.
      std::vector<double> values(ipow(m, pi.length()));
      for (std::size_t y = 0; y < values.size(); ++y) values[y] = q(s, mdp.parse[y]);
      for (std::size_t l = pi.length(); l-- > 0;) {
        const double temp = alpha * weights[l];
        std::vector<double> parent(pi.prefixes(l));
        for (std::size_t pre = 0; pre < parent.size(); ++pre) {
          std::span<const double> child(&values[pre * m], m);
          auto cur = out.cond(s, l, pre);
          const double old_v = detail::node_value(cur, child, temp);
          auto cand = detail::node_maximizer(child, temp);
          const double new_v = detail::node_value(cand, child, temp);
          if (new_v >= old_v && !std::equal(cand.begin(), cand.end(), cur.begin())) {
            std::copy(cand.begin(), cand.end(), cur.begin());
            parent[pre] = new_v;
            changed = true;
          } else {
            parent[pre] = old_v;
          }
        }
        values = std::move(parent);
      }
      if (!changed) break;
    }
  }
  return out;
}

struct PolicyIterationResult {
  TabularPolicy policy;
  QTable q;
  std::vector<double> monotonicity;  // min_{s,a} Q^{k+1} - Q^k per iteration
  std::vector<double> deltas;        // sup |Q^{k+1} - Q^k|
  std::size_t iterations = 0;
  bool converged = false;
};

class MonotonicityViolation : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline PolicyIterationResult policy_iteration(const TabularMdp& mdp, std::span<const double> weights,
                                              double alpha, double tol, std::size_t max_iters,
                                              TabularPolicy start = {},
                                              double eval_tol = 1e-12) {
  if (max_iters == 0) throw std::invalid_argument("policy_iteration: max_iters must be >= 1");
  PolicyIterationResult res;
  res.policy = start.states() == 0 ? TabularPolicy::uniform(mdp.states, mdp.tokens, mdp.length)
                                   : std::move(start);
  res.q = policy_evaluation(mdp, res.policy, weights, alpha, eval_tol).q;
  for (std::size_t k = 0; k < max_iters; ++k) {
    TabularPolicy next = soft_improve(mdp, res.q, res.policy, weights, alpha);
    QTable q_next = policy_evaluation(mdp, next, weights, alpha, eval_tol).q;
    double worst = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < q_next.q.size(); ++i) worst = std::min(worst, q_next.q[i] - res.q.q[i]);
    const double delta = sup_distance(q_next, res.q);
    res.monotonicity.push_back(worst);
    res.deltas.push_back(delta);
    res.policy = std::move(next);
    res.q = std::move(q_next);
    res.iterations = k + 1;
    if (worst < -1e-7)
      throw MonotonicityViolation("policy_iteration: Q decreased by " + std::to_string(-worst));
    if (delta < tol) {
      res.converged = true;
      break;
    }
  }
  return res;
}

struct RandomMdpOptions {
  std::size_t min_states = 2, max_states = 10;
  std::size_t min_tokens = 2, max_tokens = 3;
  std::size_t min_length = 1, max_length = 3;
  std::size_t min_actions = 2, max_actions = 4;
  double min_gamma = 0.5, max_gamma = 0.95;
};

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.index(hi - lo + 1); }

/// Random MDP with a surjective parse table.
inline TabularMdp random_mdp(Rng& rng, const RandomMdpOptions& o = {}) {
  TabularMdp m;
  m.states = pick(rng, o.min_states, o.max_states);
  m.tokens = pick(rng, o.min_tokens, o.max_tokens);
  m.length = pick(rng, o.min_length, o.max_length);
  m.actions = std::min(pick(rng, o.min_actions, o.max_actions), m.sequences());
  m.parse.resize(m.sequences());
  for (std::size_t y = 0; y < m.parse.size(); ++y)
    m.parse[y] = y < m.actions ? y : rng.index(m.actions);
  rng.shuffle(m.parse.begin(), m.parse.end());
  m.transition.resize(m.states * m.actions * m.states);
  for (std::size_t sa = 0; sa < m.states * m.actions; ++sa) {
    double sum = 0.0;
    for (std::size_t s2 = 0; s2 < m.states; ++s2) {
      double v = rng.uniform();
      v = v * v * v;  // skewed rows
      m.transition[sa * m.states + s2] = v;
      sum += v;
    }
    for (std::size_t s2 = 0; s2 < m.states; ++s2) m.transition[sa * m.states + s2] /= sum;
  }
  m.reward.resize(m.states * m.actions);
  for (double& r : m.reward) r = rng.uniform(-1.0, 1.0);
  m.gamma = rng.uniform(o.min_gamma, o.max_gamma);
  return m;
}

inline std::vector<double> random_weights(Rng& rng, std::size_t n) {
  std::vector<double> b(n);
  for (double& v : b) v = rng.uniform();
  return b;
}

/// Interval that every Q^pi must lie in.
inline std::pair<double, double> q_bounds(const TabularMdp& mdp, std::span<const double> weights,
                                          double alpha) {
  const double bmax = weights.empty() ? 0.0 : *std::max_element(weights.begin(), weights.end());
  const double hmax = alpha * bmax * static_cast<double>(mdp.length) *
                      std::log(static_cast<double>(mdp.tokens));
  return {mdp.r_min() / (1.0 - mdp.gamma), (mdp.r_max() + hmax) / (1.0 - mdp.gamma)};
}

}  // namespace coso::tabular
