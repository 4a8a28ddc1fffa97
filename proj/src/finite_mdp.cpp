#include "dpe/finite_mdp.hpp"

#include <cmath>

namespace dpe {

void FiniteMDP::validate() const {
  if (num_states < 1 || num_actions < 1)
    throw InvalidInput("MDP needs at least one state and one action");
  if (static_cast<int>(transition.size()) != num_actions)
    throw ShapeError("one transition matrix per action required");
  for (const Eigen::MatrixXd& P : transition) {
    if (P.rows() != num_states || P.cols() != num_states)
      throw ShapeError("transition matrix must be S x S");
    for (int s = 0; s < num_states; ++s) {
      if (P.row(s).minCoeff() < 0.0) throw InvalidInput("negative transition probability");
      if (std::abs(P.row(s).sum() - 1.0) > 1e-12)
        throw InvalidInput("transition row does not sum to 1");
    }
  }
  if (reward.rows() != num_states || reward.cols() != num_actions)
    throw ShapeError("reward table must be S x A");
  if (initial.size() != num_states) throw ShapeError("initial distribution must have S entries");
  if (initial.minCoeff() < 0.0 || std::abs(initial.sum() - 1.0) > 1e-12)
    throw InvalidInput("initial distribution must be a probability vector");
  if (horizon < 0) throw InvalidInput("horizon must be non-negative");
  if (!(discount > 0.0 && discount <= 1.0)) throw InvalidInput("discount must lie in (0, 1]");
}

double enumeration_path_count(const FiniteMDP& mdp) {
  return std::pow(static_cast<double>(mdp.num_states) * mdp.num_actions, mdp.horizon + 1);
}

namespace {

void check_policy_shape(const FiniteMDP& mdp, const CategoricalPolicy& pi) {
  if (pi.num_states() != mdp.num_states || pi.num_actions() != mdp.num_actions)
    throw ShapeError("policy does not match MDP state/action counts");
}

void require_enumerable(const FiniteMDP& mdp) {
  if (enumeration_path_count(mdp) > kEnumerationGuard)
    throw OracleScaleError("enumeration guard exceeded (> 1e6 trajectories)");
}

// Depth-first walk over every (state, action) path; visit(prob, return).
template <typename Visit>
void enumerate_paths(const FiniteMDP& mdp, const CategoricalPolicy& pi_prob,
                     const Visit& visit) {
  auto walk = [&](auto&& self, int s, int t, double prob, double ret, double disc) -> void {
    for (int a = 0; a < mdp.num_actions; ++a) {
      const double p = prob * pi_prob.probs(s)[a];
      const double g = ret + disc * mdp.reward(s, a);
      if (t == mdp.horizon) {
        visit(p, g);
        continue;
      }
      const Eigen::MatrixXd& P = mdp.transition[a];
      for (int s2 = 0; s2 < mdp.num_states; ++s2) {
        const double pt = P(s, s2);
        if (pt == 0.0) continue;
        self(self, s2, t + 1, p * pt, g, disc * mdp.discount);
      }
    }
  };
  for (int s0 = 0; s0 < mdp.num_states; ++s0) {
    if (mdp.initial[s0] == 0.0) continue;
    walk(walk, s0, 0, mdp.initial[s0], 0.0, 1.0);
  }
}

}  // namespace

double exact_policy_value(const FiniteMDP& mdp, const CategoricalPolicy& pi, bool cross_check) {
  mdp.validate();
  check_policy_shape(mdp, pi);

  // v_t(s) = sum_a pi(a|s)[ R(s,a) + gamma * sum_s' P(s'|s,a) v_{t+1}(s') ]
  Eigen::VectorXd v = Eigen::VectorXd::Zero(mdp.num_states);
  for (int t = mdp.horizon; t >= 0; --t) {
    Eigen::VectorXd next(mdp.num_states);
    for (int s = 0; s < mdp.num_states; ++s) {
      double total = 0.0;
      const Eigen::VectorXd pa = pi.probs(s);
      for (int a = 0; a < mdp.num_actions; ++a) {
        double q = mdp.reward(s, a);
        if (t < mdp.horizon) q += mdp.discount * mdp.transition[a].row(s).dot(v);
        total += pa[a] * q;
      }
      next[s] = total;
    }
    v = std::move(next);
  }
  const double value = mdp.initial.dot(v);

  if (cross_check && enumeration_path_count(mdp) <= kEnumerationGuard) {
    const double enumerated = enumeration_value(mdp, pi);
    if (std::abs(enumerated - value) > 1e-12 * std::max(1.0, std::abs(value)))
      throw NumericError("dynamic programming and enumeration oracles disagree");
  }
  return value;
}

double enumeration_value(const FiniteMDP& mdp, const CategoricalPolicy& pi) {
  mdp.validate();
  check_policy_shape(mdp, pi);
  require_enumerable(mdp);
  double total = 0.0;
  enumerate_paths(mdp, pi, [&](double p, double g) { total += p * g; });
  return total;
}

double enumeration_ois_expectation(const FiniteMDP& mdp, const CategoricalPolicy& pi_e,
                                   const CategoricalPolicy& pi_b) {
  mdp.validate();
  check_policy_shape(mdp, pi_e);
  check_policy_shape(mdp, pi_b);
  require_enumerable(mdp);

  // Walk under the behavior policy, carrying the cumulative likelihood ratio.
  double total = 0.0;
  auto walk = [&](auto&& self, int s, int t, double prob, double ratio, double ret,
                  double disc) -> void {
    const Eigen::VectorXd pb = pi_b.probs(s);
    const Eigen::VectorXd pe = pi_e.probs(s);
    for (int a = 0; a < mdp.num_actions; ++a) {
      const double p = prob * pb[a];
      if (p == 0.0) continue;
      const double nu = ratio * pe[a] / pb[a];
      const double g = ret + disc * mdp.reward(s, a);
      if (t == mdp.horizon) {
        total += p * nu * g;
        continue;
      }
      const Eigen::MatrixXd& P = mdp.transition[a];
      for (int s2 = 0; s2 < mdp.num_states; ++s2) {
        if (P(s, s2) == 0.0) continue;
        self(self, s2, t + 1, p * P(s, s2), nu, g, disc * mdp.discount);
      }
    }
  };
  for (int s0 = 0; s0 < mdp.num_states; ++s0) {
    if (mdp.initial[s0] == 0.0) continue;
    walk(walk, s0, 0, mdp.initial[s0], 1.0, 0.0, 1.0);
  }
  return total;
}

namespace {
Eigen::VectorXd index_vec(int i) {
  Eigen::VectorXd v(1);
  v << static_cast<double>(i);
  return v;
}

int sample_from(const Eigen::VectorXd& dist, Rng& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double u = unif(rng);
  double acc = 0.0;
  for (int i = 0; i + 1 < dist.size(); ++i) {
    acc += dist[i];
    if (u < acc) return i;
  }
  return static_cast<int>(dist.size()) - 1;
}
}  // namespace

Trajectory rollout_mdp(const FiniteMDP& mdp, const CategoricalPolicy& pi, Rng& rng) {
  check_policy_shape(mdp, pi);
  Trajectory traj;
  int s = sample_from(mdp.initial, rng);
  for (int t = 0; t <= mdp.horizon; ++t) {
    const int a = pi.sample(s, rng);
    traj.states.push_back(index_vec(s));
    traj.actions.push_back(index_vec(a));
    traj.rewards.push_back(mdp.reward(s, a));
    if (t < mdp.horizon) s = sample_from(mdp.transition[a].row(s), rng);
  }
  return traj;
}

TrajectoryDataset rollout_mdp_dataset(const FiniteMDP& mdp, const CategoricalPolicy& pi,
                                      int m, std::uint64_t seed) {
  if (m < 1) throw InvalidInput("dataset needs m >= 1 trajectories");
  mdp.validate();
  TrajectoryDataset ds;
  ds.state_dim = 1;
  ds.action_dim = 1;
  ds.horizon = mdp.horizon;
  ds.discount = mdp.discount;
  ds.behavior_descriptor = "finite-mdp rollout";
  for (int i = 0; i < m; ++i) {
    Rng rng = make_rng(seed, static_cast<std::uint64_t>(i));
    ds.trajectories.push_back(rollout_mdp(mdp, pi, rng));
  }
  return ds;
}

FiniteMDP chain_mdp_3s2a_h2() {
  FiniteMDP mdp;
  mdp.num_states = 3;
  mdp.num_actions = 2;
  mdp.horizon = 2;
  mdp.discount = 1.0;
  Eigen::MatrixXd stay(3, 3), advance(3, 3);
  stay << 0.8, 0.15, 0.05,
          0.10, 0.80, 0.10,
          0.05, 0.15, 0.80;
  advance << 0.10, 0.70, 0.20,
             0.05, 0.25, 0.70,
             0.10, 0.10, 0.80;
  mdp.transition = {stay, advance};
  mdp.reward.resize(3, 2);
  mdp.reward << 0.0, -0.1,
                0.5,  0.3,
                1.0,  1.5;
  mdp.initial.resize(3);
  mdp.initial << 0.6, 0.3, 0.1;
  return mdp;
}

FiniteMDP chain_mdp_2s2a_h2() {
  FiniteMDP mdp;
  mdp.num_states = 2;
  mdp.num_actions = 2;
  mdp.horizon = 2;
  mdp.discount = 1.0;
  Eigen::MatrixXd a0(2, 2), a1(2, 2);
  a0 << 0.9, 0.1,
        0.3, 0.7;
  a1 << 0.4, 0.6,
        0.2, 0.8;
  mdp.transition = {a0, a1};
  mdp.reward.resize(2, 2);
  mdp.reward << 0.0, 0.2,
                1.0, 0.6;
  mdp.initial.resize(2);
  mdp.initial << 0.7, 0.3;
  return mdp;
}

FiniteMDP random_mdp(int num_states, int num_actions, int horizon, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0x3d9);
  std::uniform_real_distribution<double> unif(0.05, 1.0);
  FiniteMDP mdp;
  mdp.num_states = num_states;
  mdp.num_actions = num_actions;
  mdp.horizon = horizon;
  mdp.discount = 1.0;
  for (int a = 0; a < num_actions; ++a) {
    Eigen::MatrixXd P(num_states, num_states);
    for (int s = 0; s < num_states; ++s) {
      for (int s2 = 0; s2 < num_states; ++s2) P(s, s2) = unif(rng);
      P.row(s) /= P.row(s).sum();
    }
    mdp.transition.push_back(P);
  }
  mdp.reward.resize(num_states, num_actions);
  for (int s = 0; s < num_states; ++s)
    for (int a = 0; a < num_actions; ++a) mdp.reward(s, a) = 2.0 * unif(rng) - 1.0;
  mdp.initial.resize(num_states);
  for (int s = 0; s < num_states; ++s) mdp.initial[s] = unif(rng);
  mdp.initial /= mdp.initial.sum();
  return mdp;
}

CategoricalPolicy random_categorical(int num_states, int num_actions, std::uint64_t seed,
                                     double logit_scale) {
  Rng rng = make_rng(seed, 0x51c);
  std::normal_distribution<double> dist(0.0, logit_scale);
  Eigen::MatrixXd logits(num_states, num_actions);
  for (int s = 0; s < num_states; ++s)
    for (int a = 0; a < num_actions; ++a) logits(s, a) = dist(rng);
  return CategoricalPolicy(logits);
}

}  // namespace dpe
