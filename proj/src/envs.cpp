#include "dpe/envs.hpp"

#include <cmath>

namespace dpe {

PointMass1D::PointMass1D(PointMassConfig cfg) : cfg_(cfg) {
  if (!(cfg_.dt > 0.0)) throw InvalidInput("dt must be positive");
  if (cfg_.horizon < 0) throw InvalidInput("horizon must be non-negative");
  if (!(cfg_.discount > 0.0 && cfg_.discount <= 1.0))
    throw InvalidInput("discount must lie in (0, 1]");
}

Eigen::VectorXd PointMass1D::reset(Rng& rng) const {
  std::uniform_real_distribution<double> unif(-cfg_.start_range, cfg_.start_range);
  Eigen::VectorXd s(2);
  s << unif(rng), 0.0;
  return s;
}

Eigen::VectorXd PointMass1D::clamp_action(const Eigen::VectorXd& a) const {
  if (a.size() != 1) throw ShapeError("point mass takes a scalar action");
  Eigen::VectorXd out(1);
  out[0] = std::clamp(a[0], -1.0, 1.0);
  return out;
}

std::pair<Eigen::VectorXd, double> PointMass1D::step(const Eigen::VectorXd& state,
                                                     const Eigen::VectorXd& action,
                                                     Rng&) const {
  if (state.size() != 2) throw ShapeError("point mass state is (position, velocity)");
  if (action.size() != 1) throw ShapeError("point mass takes a scalar action");
  const double u = std::clamp(action[0], -1.0, 1.0);
  Eigen::VectorXd next(2);
  next[1] = state[1] + u * cfg_.dt;
  next[0] = state[0] + next[1] * cfg_.dt;
  if (!next.allFinite()) throw ComputeError("simulation produced a non-finite state");
  const double reward = -std::abs(next[0] - cfg_.goal);
  return {std::move(next), reward};
}

ChainMdpEnv::ChainMdpEnv(FiniteMDP mdp) : mdp_(std::move(mdp)) { mdp_.validate(); }

namespace {
int sample_index(const Eigen::VectorXd& dist, Rng& rng) {
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

Eigen::VectorXd ChainMdpEnv::reset(Rng& rng) const {
  Eigen::VectorXd s(1);
  s << static_cast<double>(sample_index(mdp_.initial, rng));
  return s;
}

Eigen::VectorXd ChainMdpEnv::clamp_action(const Eigen::VectorXd& a) const {
  if (a.size() != 1) throw ShapeError("chain MDP takes a scalar action index");
  Eigen::VectorXd out(1);
  out[0] = std::clamp(std::round(a[0]), 0.0, static_cast<double>(mdp_.num_actions - 1));
  return out;
}

std::pair<Eigen::VectorXd, double> ChainMdpEnv::step(const Eigen::VectorXd& state,
                                                     const Eigen::VectorXd& action,
                                                     Rng& rng) const {
  const int s = static_cast<int>(std::lround(state[0]));
  const int a = static_cast<int>(std::lround(clamp_action(action)[0]));
  if (s < 0 || s >= mdp_.num_states) throw IndexError("state index out of range");
  const double reward = mdp_.reward(s, a);
  Eigen::VectorXd next(1);
  next << static_cast<double>(sample_index(mdp_.transition[a].row(s), rng));
  return {std::move(next), reward};
}

TrajectoryDataset generate_dataset(const Environment& env, const ActionSampler& policy, int m,
                                   std::uint64_t seed, const std::string& descriptor) {
  if (m < 1) throw InvalidInput("dataset needs m >= 1 trajectories");
  TrajectoryDataset ds;
  ds.state_dim = env.state_dim();
  ds.action_dim = env.action_dim();
  ds.horizon = env.horizon();
  ds.discount = env.discount();
  ds.behavior_descriptor = descriptor;
  for (int i = 0; i < m; ++i) {
    Rng rng = make_rng(seed, static_cast<std::uint64_t>(i));
    RolloutState rs;
    Eigen::VectorXd s = env.reset(rng);
    Trajectory traj;
    for (int t = 0; t <= env.horizon(); ++t) {
      rs.states.push_back(s);
      const Eigen::VectorXd a = env.clamp_action(policy(rs, rng));
      auto [next, reward] = env.step(s, a, rng);
      traj.states.push_back(s);
      traj.actions.push_back(a);
      traj.rewards.push_back(reward);
      rs.actions.push_back(a);
      s = std::move(next);
    }
    traj.validate(ds.state_dim, ds.action_dim);
    ds.trajectories.push_back(std::move(traj));
  }
  return ds;
}

ActionSampler uniform_random_sampler(int action_dim, double lo, double hi) {
  if (!(lo < hi)) throw InvalidInput("uniform sampler needs lo < hi");
  return [action_dim, lo, hi](const RolloutState&, Rng& rng) {
    std::uniform_real_distribution<double> unif(lo, hi);
    Eigen::VectorXd a(action_dim);
    for (int j = 0; j < action_dim; ++j) a[j] = unif(rng);
    return a;
  };
}

ActionSampler point_mass_expert(const PointMassConfig& cfg) {
  // saturating PD law: thrust toward the goal, brake on approach
  const double kp = 4.0, kd = 5.0;
  return [cfg, kp, kd](const RolloutState& rs, Rng&) {
    const Eigen::VectorXd& s = rs.states.back();
    Eigen::VectorXd a(1);
    a[0] = std::clamp(kp * (cfg.goal - s[0]) - kd * s[1], -1.0, 1.0);
    return a;
  };
}

ActionSampler noisy_sampler(ActionSampler base, double sigma) {
  if (!(sigma >= 0.0)) throw InvalidInput("noise sigma must be non-negative");
  return [base = std::move(base), sigma](const RolloutState& rs, Rng& rng) {
    Eigen::VectorXd a = base(rs, rng);
    std::normal_distribution<double> dist(0.0, sigma);
    for (Eigen::Index j = 0; j < a.size(); ++j) a[j] += dist(rng);
    return a;
  };
}

ActionSampler gaussian_policy_sampler(std::shared_ptr<const GaussianPolicy> policy) {
  if (!policy) throw InvalidInput("null policy");
  return [policy = std::move(policy)](const RolloutState& rs, Rng& rng) {
    return policy->sample(policy->context_vector(rs), rng);
  };
}

TrajectoryDataset make_mixed_point_mass_dataset(const PointMass1D& env, int m,
                                                std::uint64_t seed, double expert_noise) {
  if (m < 2) throw InvalidInput("mixed dataset needs m >= 2");
  const int m_expert = m / 2;
  TrajectoryDataset good = generate_dataset(
      env, noisy_sampler(point_mass_expert(env.config()), expert_noise), m_expert, seed,
      "point_mass mixed: noisy expert half");
  TrajectoryDataset rand = generate_dataset(env, uniform_random_sampler(1, -1.0, 1.0),
                                            m - m_expert, seed + 0x517, "uniform half");
  TrajectoryDataset ds = std::move(good);
  for (Trajectory& t : rand.trajectories) ds.trajectories.push_back(std::move(t));
  ds.behavior_descriptor = "point_mass_1d 50/50 noisy-expert + uniform-random";
  return ds;
}

}  // namespace dpe
