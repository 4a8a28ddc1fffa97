#pragma once

#include <Eigen/Core>
#include <vector>

#include "dpe/policy.hpp"
#include "dpe/trajectory.hpp"

namespace dpe {

// Finite episodic MDP used by the verification oracles. Trajectories carry
// state/action indices as 1-dim real vectors.
struct FiniteMDP {
  int num_states = 0;
  int num_actions = 0;
  std::vector<Eigen::MatrixXd> transition;  // per action: S x S, row s -> P(s'|s,a)
  Eigen::MatrixXd reward;                   // S x A
  Eigen::VectorXd initial;                  // d_0 over states
  int horizon = 0;                          // steps t = 0..H
  double discount = 1.0;

  void validate() const;
};

// Count of distinct (s_0,a_0,...,s_H,a_H) paths; the enumeration oracles
// refuse anything above this guard so they stay exact and fast.
constexpr double kEnumerationGuard = 1e6;
double enumeration_path_count(const FiniteMDP& mdp);

// v(pi) by backward dynamic programming; when the path count is under the
// guard the result is cross-checked against full enumeration.
double exact_policy_value(const FiniteMDP& mdp, const CategoricalPolicy& pi,
                          bool cross_check = true);

// v(pi) by summing g(omega) * P(omega) over every path. Independent of the
// DP recursion on purpose.
double enumeration_value(const FiniteMDP& mdp, const CategoricalPolicy& pi);

// sum_omega P_b(omega) * prod_t pi_e/pi_b * g(omega): the exact expectation
// of the OIS estimator under the behavior policy.
double enumeration_ois_expectation(const FiniteMDP& mdp, const CategoricalPolicy& pi_e,
                                   const CategoricalPolicy& pi_b);

Trajectory rollout_mdp(const FiniteMDP& mdp, const CategoricalPolicy& pi, Rng& rng);
TrajectoryDataset rollout_mdp_dataset(const FiniteMDP& mdp, const CategoricalPolicy& pi,
                                      int m, std::uint64_t seed);

// Canonical fixtures: small chains with distinct transition probabilities
// and rewards, gamma = 1.
FiniteMDP chain_mdp_3s2a_h2();
FiniteMDP chain_mdp_2s2a_h2();
// Deterministically randomized chain instances for property sweeps.
FiniteMDP random_mdp(int num_states, int num_actions, int horizon, std::uint64_t seed);
CategoricalPolicy random_categorical(int num_states, int num_actions, std::uint64_t seed,
                                     double logit_scale = 1.0);

}  // namespace dpe
