#pragma once

#include <Eigen/Core>
#include <functional>
#include <memory>
#include <string>

#include "dpe/finite_mdp.hpp"
#include "dpe/policy.hpp"
#include "dpe/trajectory.hpp"

namespace dpe {

// Episodic environment with a fixed horizon; rewards live on every step
// including the last.
class Environment {
 public:
  virtual ~Environment() = default;
  virtual std::string name() const = 0;
  virtual int state_dim() const = 0;
  virtual int action_dim() const = 0;
  virtual int horizon() const = 0;
  virtual double discount() const = 0;
  virtual Eigen::VectorXd reset(Rng& rng) const = 0;
  virtual std::pair<Eigen::VectorXd, double> step(const Eigen::VectorXd& state,
                                                  const Eigen::VectorXd& action,
                                                  Rng& rng) const = 0;
  virtual Eigen::VectorXd clamp_action(const Eigen::VectorXd& a) const { return a; }
};

struct PointMassConfig {
  double dt = 0.1;
  double goal = 0.0;
  double start_range = 1.0;  // p_0 ~ U(-range, range), v_0 = 0
  int horizon = 19;
  double discount = 1.0;
};

// 1-d point mass: state (position, velocity), scalar thrust clamped to
// [-1, 1], reward -|position' - goal| after the transition.
class PointMass1D final : public Environment {
 public:
  explicit PointMass1D(PointMassConfig cfg = {});
  std::string name() const override { return "point_mass_1d"; }
  int state_dim() const override { return 2; }
  int action_dim() const override { return 1; }
  int horizon() const override { return cfg_.horizon; }
  double discount() const override { return cfg_.discount; }
  Eigen::VectorXd reset(Rng& rng) const override;
  std::pair<Eigen::VectorXd, double> step(const Eigen::VectorXd& state,
                                          const Eigen::VectorXd& action,
                                          Rng& rng) const override;
  Eigen::VectorXd clamp_action(const Eigen::VectorXd& a) const override;
  const PointMassConfig& config() const { return cfg_; }

 private:
  PointMassConfig cfg_;
};

// Finite MDP exposed through the continuous-embedding convention (indices as
// 1-dim real vectors).
class ChainMdpEnv final : public Environment {
 public:
  explicit ChainMdpEnv(FiniteMDP mdp);
  std::string name() const override { return "chain_mdp"; }
  int state_dim() const override { return 1; }
  int action_dim() const override { return 1; }
  int horizon() const override { return mdp_.horizon; }
  double discount() const override { return mdp_.discount; }
  Eigen::VectorXd reset(Rng& rng) const override;
  std::pair<Eigen::VectorXd, double> step(const Eigen::VectorXd& state,
                                          const Eigen::VectorXd& action,
                                          Rng& rng) const override;
  Eigen::VectorXd clamp_action(const Eigen::VectorXd& a) const override;
  const FiniteMDP& mdp() const { return mdp_; }

 private:
  FiniteMDP mdp_;
};

using ActionSampler = std::function<Eigen::VectorXd(const RolloutState&, Rng&)>;

// m seeded rollouts of the sampler; bit-identical for identical seeds.
TrajectoryDataset generate_dataset(const Environment& env, const ActionSampler& policy, int m,
                                   std::uint64_t seed, const std::string& descriptor);

ActionSampler uniform_random_sampler(int action_dim, double lo, double hi);
// Saturating PD controller toward the goal; effectively bang-bang when far.
ActionSampler point_mass_expert(const PointMassConfig& cfg = {});
// Base sampler plus N(0, sigma^2) exploration noise.
ActionSampler noisy_sampler(ActionSampler base, double sigma);
ActionSampler gaussian_policy_sampler(std::shared_ptr<const GaussianPolicy> policy);

// Half near-optimal (noisy expert), half uniform-random behavior; the
// desk-scale analog of a mixed-quality replay dataset.
TrajectoryDataset make_mixed_point_mass_dataset(const PointMass1D& env, int m,
                                                std::uint64_t seed,
                                                double expert_noise = 0.1);

}  // namespace dpe
