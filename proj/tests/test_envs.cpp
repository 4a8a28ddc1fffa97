#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dpe/envs.hpp"

using namespace dpe;

TEST_CASE("point mass dynamics and rewards") {
  PointMass1D env;
  Rng rng = make_rng(1);
  Eigen::VectorXd s(2);
  s << 0.5, 0.0;
  Eigen::VectorXd a(1);
  a << 2.0;  // clamped to 1
  auto [next, reward] = env.step(s, a, rng);
  CHECK(next[1] == doctest::Approx(0.1));
  CHECK(next[0] == doctest::Approx(0.5 + 0.1 * 0.1));
  CHECK(reward == doctest::Approx(-std::abs(next[0])));
  CHECK(env.clamp_action(a)[0] == 1.0);
}

TEST_CASE("dataset generation is seed-deterministic") {
  PointMass1D env;
  const ActionSampler pol = uniform_random_sampler(1, -1.0, 1.0);
  const TrajectoryDataset a = generate_dataset(env, pol, 12, 7, "unit");
  const TrajectoryDataset b = generate_dataset(env, pol, 12, 7, "unit");
  REQUIRE(a.size() == b.size());
  for (int i = 0; i < a.size(); ++i)
    for (int t = 0; t < a.trajectories[i].length(); ++t) {
      CHECK(a.trajectories[i].states[t] == b.trajectories[i].states[t]);
      CHECK(a.trajectories[i].actions[t] == b.trajectories[i].actions[t]);
      CHECK(a.trajectories[i].rewards[t] == b.trajectories[i].rewards[t]);
    }
  CHECK(a.behavior_descriptor == "unit");
  CHECK(a.trajectories[0].length() == env.horizon() + 1);
  CHECK_THROWS_AS(generate_dataset(env, pol, 0, 1, "x"), InvalidInput);
}

TEST_CASE("expert policy beats uniform random on mean return") {
  PointMass1D env;
  const TrajectoryDataset expert =
      generate_dataset(env, point_mass_expert(env.config()), 100, 3, "expert");
  const TrajectoryDataset random =
      generate_dataset(env, uniform_random_sampler(1, -1.0, 1.0), 100, 3, "random");
  auto mean_return = [](const TrajectoryDataset& ds) {
    double total = 0.0;
    for (const Trajectory& t : ds.trajectories) total += return_to_go(t, 0);
    return total / ds.size();
  };
  CHECK(mean_return(expert) > mean_return(random));
}

TEST_CASE("chain env rollouts stay inside the index ranges") {
  ChainMdpEnv env(chain_mdp_3s2a_h2());
  const TrajectoryDataset ds =
      generate_dataset(env, uniform_random_sampler(1, -0.4, 1.4), 30, 11, "chain");
  for (const Trajectory& t : ds.trajectories) {
    for (int k = 0; k < t.length(); ++k) {
      const double s = t.states[k][0];
      const double a = t.actions[k][0];
      CHECK(s == std::round(s));
      CHECK(s >= 0.0);
      CHECK(s <= 2.0);
      CHECK((a == 0.0 || a == 1.0));
    }
  }
}

TEST_CASE("mixed dataset halves carry their generators") {
  PointMass1D env;
  const TrajectoryDataset ds = make_mixed_point_mass_dataset(env, 40, 5);
  CHECK(ds.size() == 40);
  // the noisy-expert half collects more return than the uniform half
  double good = 0.0, bad = 0.0;
  for (int i = 0; i < 20; ++i) good += return_to_go(ds.trajectories[i], 0);
  for (int i = 20; i < 40; ++i) bad += return_to_go(ds.trajectories[i], 0);
  CHECK(good / 20.0 > bad / 20.0);
}
