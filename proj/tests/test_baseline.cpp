#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dpe/baseline.hpp"
#include "dpe/rng.hpp"

using namespace dpe;

namespace {

Eigen::VectorXd vec1(double x) {
  Eigen::VectorXd v(1);
  v << x;
  return v;
}

TrajectoryDataset random_dataset(int m, int steps, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  TrajectoryDataset ds;
  ds.state_dim = 1;
  ds.action_dim = 1;
  ds.horizon = steps - 1;
  for (int i = 0; i < m; ++i) {
    Trajectory t;
    for (int s = 0; s < steps; ++s) {
      t.states.push_back(vec1(dist(rng)));
      t.actions.push_back(vec1(dist(rng)));
      t.rewards.push_back(dist(rng));
    }
    ds.trajectories.push_back(t);
  }
  return ds;
}

// q_{t:H} samples in fit order
std::vector<double> all_targets(const TrajectoryDataset& ds) {
  std::vector<double> q;
  for (const Trajectory& traj : ds.trajectories) {
    const std::vector<double> qt = return_to_go_all(traj);
    q.insert(q.end(), qt.begin(), qt.end());
  }
  return q;
}

}  // namespace

TEST_CASE("constant feature fits the mean of all return-to-go samples") {
  const TrajectoryDataset ds = random_dataset(7, 4, 3);
  const BaselineModel model = fit_baseline(ds, constant_feature());
  const std::vector<double> q = all_targets(ds);
  double mean = 0.0;
  for (double x : q) mean += x;
  mean /= static_cast<double>(q.size());
  CHECK(model.xi[0] == doctest::Approx(mean).epsilon(1e-12));
  CHECK_FALSE(model.rank_deficient);
}

TEST_CASE("exactly linear targets are recovered exactly") {
  // construct rewards so q_{t:H} = 2 + 3 s_t - 1.5 t/H exactly
  TrajectoryDataset ds;
  ds.state_dim = 1;
  ds.action_dim = 1;
  const int steps = 5;
  ds.horizon = steps - 1;
  Rng rng = make_rng(17);
  std::normal_distribution<double> dist(0.0, 1.0);
  auto target = [&](double s, int t) {
    return 2.0 + 3.0 * s - 1.5 * static_cast<double>(t) / ds.horizon;
  };
  for (int i = 0; i < 12; ++i) {
    Trajectory traj;
    std::vector<double> states(steps);
    for (int t = 0; t < steps; ++t) states[t] = dist(rng);
    // r_t = q_t - q_{t+1}, q_H = r_H
    for (int t = 0; t < steps; ++t) {
      traj.states.push_back(vec1(states[t]));
      traj.actions.push_back(vec1(0.0));
      const double qt = target(states[t], t);
      const double qn = t + 1 < steps ? target(states[t + 1], t + 1) : 0.0;
      traj.rewards.push_back(qt - qn);
    }
    ds.trajectories.push_back(traj);
  }
  const BaselineModel model = fit_baseline(ds, state_time_features(1));
  CHECK(model.xi[0] == doctest::Approx(2.0).epsilon(1e-8));
  CHECK(model.xi[1] == doctest::Approx(3.0).epsilon(1e-8));
  CHECK(model.xi[2] == doctest::Approx(-1.5).epsilon(1e-8));
  for (const Trajectory& traj : ds.trajectories)
    for (int t = 0; t < steps; ++t)
      CHECK(model.predict(traj.states[t], t, ds.horizon) ==
            doctest::Approx(return_to_go(traj, t)).epsilon(1e-8));
}

TEST_CASE("zero returns give the zero (minimum-norm) solution") {
  TrajectoryDataset ds = random_dataset(5, 3, 5);
  for (Trajectory& t : ds.trajectories)
    for (double& r : t.rewards) r = 0.0;
  const BaselineModel model = fit_baseline(ds, state_time_features(1));
  CHECK(model.xi.norm() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("residuals are orthogonal to every feature") {
  const TrajectoryDataset ds = random_dataset(30, 6, 21);
  const BaselineModel model = fit_baseline(ds, state_time_features(1));
  Eigen::VectorXd dot = Eigen::VectorXd::Zero(model.features.dim);
  double qn = 0.0, fn = 0.0;
  long n = 0;
  for (const Trajectory& traj : ds.trajectories) {
    const std::vector<double> q = return_to_go_all(traj);
    for (int t = 0; t < traj.length(); ++t, ++n) {
      const Eigen::VectorXd phi = model.feature_vector(traj.states[t], t, ds.horizon);
      const double r = q[t] - phi.dot(model.xi);
      dot += phi * r;
      qn += q[t] * q[t];
      fn += phi.squaredNorm();
    }
  }
  const double scale = std::max(1.0, std::sqrt(qn / n) * std::sqrt(fn / n));
  CHECK((dot / static_cast<double>(n)).lpNorm<Eigen::Infinity>() / scale <= 1e-8);
}

TEST_CASE("collinear features flag rank deficiency and still fit") {
  FeatureMap dup;
  dup.dim = 2;
  dup.name = "dup";
  dup.fn = [](const Eigen::VectorXd& s, int, int) {
    Eigen::VectorXd phi(2);
    phi << s[0], 2.0 * s[0];
    return phi;
  };
  const TrajectoryDataset ds = random_dataset(10, 4, 8);
  const BaselineModel model = fit_baseline(ds, dup);
  CHECK(model.rank_deficient);
  CHECK(model.xi.allFinite());
}

TEST_CASE("weighted fits reweight samples") {
  const TrajectoryDataset ds = random_dataset(6, 2, 99);
  // give all weight to the first trajectory's samples
  std::vector<double> w;
  for (int i = 0; i < ds.size(); ++i)
    for (int t = 0; t < ds.trajectories[i].length(); ++t) w.push_back(i == 0 ? 1.0 : 0.0);
  const BaselineModel model = fit_baseline(ds, constant_feature(), &w);
  const std::vector<double> q0 = return_to_go_all(ds.trajectories[0]);
  double mean = 0.0;
  for (double x : q0) mean += x;
  mean /= static_cast<double>(q0.size());
  CHECK(model.xi[0] == doctest::Approx(mean).epsilon(1e-10));
}

TEST_CASE("feature dimension larger than sample count is rejected") {
  const TrajectoryDataset ds = random_dataset(1, 2, 1);
  FeatureMap wide;
  wide.dim = 5;
  wide.name = "wide";
  wide.fn = [](const Eigen::VectorXd&, int, int) { return Eigen::VectorXd::Ones(5); };
  CHECK_THROWS_AS(fit_baseline(ds, wide), InvalidInput);
}
