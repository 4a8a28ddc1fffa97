#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "dpe/trajectory.hpp"

using namespace dpe;

namespace {

Eigen::VectorXd vec1(double x) {
  Eigen::VectorXd v(1);
  v << x;
  return v;
}

Trajectory make_traj(std::vector<double> rewards) {
  Trajectory t;
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    t.states.push_back(vec1(static_cast<double>(i)));
    t.actions.push_back(vec1(0.5 * static_cast<double>(i)));
    t.rewards.push_back(rewards[i]);
  }
  return t;
}

std::filesystem::path temp_file(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove(p);
  return p;
}

}  // namespace

TEST_CASE("discounted_return basics") {
  CHECK(discounted_return(make_traj({0, 0, 0}), 0.9) == doctest::Approx(0.0));
  CHECK(discounted_return(make_traj({1, 2, 3}), 1.0) == doctest::Approx(6.0));
  // hand evaluation: 1 + 0.5*2 + 0.25*3
  CHECK(discounted_return(make_traj({1, 2, 3}), 0.5) == doctest::Approx(2.75));
  CHECK_THROWS_AS(discounted_return(make_traj({1, 2, 3}), 0.0), InvalidInput);
  CHECK_THROWS_AS(discounted_return(make_traj({1, 2, 3}), 1.5), InvalidInput);
  Trajectory bad = make_traj({1, 2, 3});
  bad.rewards[1] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(discounted_return(bad, 0.9), InvalidInput);
}

TEST_CASE("return_to_go basics and recursion property") {
  Trajectory t = make_traj({1, 2, 3});
  CHECK(return_to_go(t, 2) == doctest::Approx(3.0));  // single-term tail
  CHECK(return_to_go(t, 0) == doctest::Approx(6.0));
  CHECK(return_to_go(t, 1) == doctest::Approx(5.0));  // hand sum 2+3
  CHECK_THROWS_AS(return_to_go(t, 3), IndexError);
  CHECK_THROWS_AS(return_to_go(t, -1), IndexError);

  // q_t = r_t + q_{t+1} for every t, q_H = r_H
  Trajectory u = make_traj({0.3, -1.2, 4.5, 0.0, 2.25});
  for (int s = 0; s + 1 < u.length(); ++s)
    CHECK(return_to_go(u, s) == doctest::Approx(u.rewards[s] + return_to_go(u, s + 1)));
  CHECK(return_to_go(u, u.last_step()) == doctest::Approx(u.rewards.back()));

  // gamma = 1 discounted return equals the full tail sum exactly
  CHECK(discounted_return(u, 1.0) == return_to_go(u, 0));

  const std::vector<double> all = return_to_go_all(u);
  for (int s = 0; s < u.length(); ++s) CHECK(all[s] == return_to_go(u, s));
}

TEST_CASE("rtg_conditioning_sequence recursion") {
  Trajectory t = make_traj({1, 2, 3});
  const std::vector<double> g = rtg_conditioning_sequence(t, 6.0);
  CHECK(g == std::vector<double>{6.0, 5.0, 3.0});

  Trajectory z = make_traj({0, 0, 0, 0});
  const std::vector<double> gz = rtg_conditioning_sequence(z, 2.5);
  for (double v : gz) CHECK(v == 2.5);

  // starting from the true return, the final element is r_H
  Trajectory u = make_traj({0.7, -0.1, 2.0, 1.1});
  const std::vector<double> gu = rtg_conditioning_sequence(u, return_to_go(u, 0));
  CHECK(gu.back() == doctest::Approx(u.rewards.back()));
  for (int s = 0; s < u.length(); ++s) CHECK(gu[s] == doctest::Approx(return_to_go(u, s)));

  CHECK_THROWS_AS(rtg_conditioning_sequence(u, std::numeric_limits<double>::infinity()),
                  InvalidInput);
}

TEST_CASE("dataset round-trip is the identity") {
  TrajectoryDataset ds;
  ds.state_dim = 1;
  ds.action_dim = 1;
  ds.horizon = 4;
  ds.discount = 0.97;
  ds.behavior_descriptor = "unit fixture";
  ds.trajectories.push_back(make_traj({1.0, -2.5, 0.125}));
  ds.trajectories.push_back(make_traj({0.1, 0.2, 0.3, 0.4, 5e-17}));

  const auto path = temp_file("dpe_roundtrip.jsonl");
  save_dataset(ds, path);
  const TrajectoryDataset back = load_dataset(path);

  REQUIRE(back.size() == ds.size());
  CHECK(back.state_dim == ds.state_dim);
  CHECK(back.action_dim == ds.action_dim);
  CHECK(back.horizon == ds.horizon);
  CHECK(back.discount == ds.discount);
  CHECK(back.behavior_descriptor == ds.behavior_descriptor);
  for (int i = 0; i < ds.size(); ++i) {
    const Trajectory& a = ds.trajectories[i];
    const Trajectory& b = back.trajectories[i];
    REQUIRE(a.length() == b.length());
    for (int t = 0; t < a.length(); ++t) {
      CHECK(a.states[t] == b.states[t]);      // bit-exact
      CHECK(a.actions[t] == b.actions[t]);
      CHECK(a.rewards[t] == b.rewards[t]);
    }
  }
  std::filesystem::remove(path);
}

TEST_CASE("dataset load failure modes") {
  const auto path = temp_file("dpe_bad.jsonl");

  {
    std::ofstream(path) << "";
    CHECK_THROWS_AS(load_dataset(path), SchemaError);
  }
  {
    std::ofstream(path) << R"({"state_dim":1,"action_dim":1,"horizon":2,"discount":1.0})"
                        << "\n";
    CHECK_THROWS_AS(load_dataset(path), SchemaError);  // zero trajectories
  }
  {
    std::ofstream out(path);
    out << R"({"state_dim":1,"action_dim":1,"horizon":2,"discount":1.0})" << "\n";
    out << R"({"states":[[0]],"actions":[[NaN]],"rewards":[0]})" << "\n";
    out.close();
    // a bare NaN token is not valid JSON; the parse error carries the line
    try {
      load_dataset(path);
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(e.line == 2);
    }
  }
  {
    std::ofstream out(path);
    out << R"({"state_dim":2,"action_dim":1,"horizon":2,"discount":1.0})" << "\n";
    out << R"({"states":[[0]],"actions":[[1]],"rewards":[0]})" << "\n";
    out.close();
    CHECK_THROWS_AS(load_dataset(path), SchemaError);  // state dim mismatch
  }
  {
    std::ofstream out(path);
    out << R"({"state_dim":1,"action_dim":1,"horizon":2,"discount":1.0})" << "\n";
    out << R"({"states":[[0]],"actions":[[null]],"rewards":[0]})" << "\n";
    out.close();
    CHECK_THROWS_AS(load_dataset(path), InvalidInput);  // non-numeric action
  }
  std::filesystem::remove(path);
}

TEST_CASE("trajectory invariant enforcement") {
  Trajectory t = make_traj({1, 2});
  CHECK_NOTHROW(t.validate(1, 1));
  t.actions[0][0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(t.validate(1, 1), InvalidInput);

  Trajectory uneven = make_traj({1, 2});
  uneven.rewards.pop_back();
  CHECK_THROWS_AS(uneven.validate(1, 1), InvalidInput);

  TrajectoryDataset empty;
  empty.state_dim = 1;
  empty.action_dim = 1;
  CHECK_THROWS_AS(empty.validate(), SchemaError);
}
