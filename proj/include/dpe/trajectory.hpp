#pragma once

#include <Eigen/Core>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dpe/common.hpp"

namespace dpe {

// One episode of (s_t, a_t, r_t) steps, t = 0..H. All three sequences have
// the same length; a reward is stored for every step including the last.
struct Trajectory {
  std::vector<Eigen::VectorXd> states;
  std::vector<Eigen::VectorXd> actions;
  std::vector<double> rewards;

  int length() const { return static_cast<int>(rewards.size()); }  // H+1
  int last_step() const { return length() - 1; }                   // H

  // Enforces equal lengths, length >= 1, finite components.
  void validate(int state_dim, int action_dim) const;
};

struct TrajectoryDataset {
  std::vector<Trajectory> trajectories;
  int state_dim = 0;
  int action_dim = 0;
  double discount = 1.0;  // gamma in (0, 1]
  int horizon = 0;        // H; trajectory lengths are <= H+1
  std::string behavior_descriptor;

  int size() const { return static_cast<int>(trajectories.size()); }
  void validate() const;
};

// Sum_t gamma^t r_t.
double discounted_return(const Trajectory& traj, double gamma);

// Undiscounted tail sum q_{t:H} = sum_{s=t}^{H} r_s.
double return_to_go(const Trajectory& traj, int t);

// All tail sums q_{0:H}, ..., q_{H:H} in one pass.
std::vector<double> return_to_go_all(const Trajectory& traj);

// Conditioning sequence (g_0, ..., g_H) with g_{t+1} = g_t - r_t, so g_t is
// the return still to be collected when g_0 is the episode target.
std::vector<double> rtg_conditioning_sequence(const Trajectory& traj, double g0);

// JSON Lines: line 1 metadata, one trajectory per following line.
void save_dataset(const TrajectoryDataset& ds, const std::filesystem::path& path);
TrajectoryDataset load_dataset(const std::filesystem::path& path);

}  // namespace dpe
