#pragma once

#include <Eigen/Core>
#include <functional>
#include <string>
#include <vector>

#include "dpe/trajectory.hpp"

namespace dpe {

// Feature map for the return-to-go baseline: (state, step, horizon) -> phi.
struct FeatureMap {
  std::function<Eigen::VectorXd(const Eigen::VectorXd& state, int t, int horizon)> fn;
  int dim = 0;
  std::string name;
};

// [1, s..., t / max(H,1)]: intercept, raw state, normalized timestep.
FeatureMap state_time_features(int state_dim);
// [1, s...]: intercept and raw state (no timestep column).
FeatureMap intercept_state_features(int state_dim);
FeatureMap constant_feature();
FeatureMap zero_features();  // dim 0; the baseline predicts 0 everywhere

FeatureMap feature_map_from_string(const std::string& name, int state_dim);

// Linear-in-features return-to-go predictor b_t = phi(s_t, t) . xi. Linearity
// is load-bearing: the second derivative in xi vanishes identically, which
// the variance-decomposition analysis assumes.
struct BaselineModel {
  Eigen::VectorXd xi;
  FeatureMap features;
  bool rank_deficient = false;  // minimum-norm solution was used

  double predict(const Eigen::VectorXd& state, int t, int horizon) const;
  Eigen::VectorXd feature_vector(const Eigen::VectorXd& state, int t, int horizon) const;
};

// Least squares of q_{t:H} on features over every (trajectory, step) sample;
// optional per-sample weights. Rank-deficient designs fall back to the
// minimum-norm solution and set the flag.
BaselineModel fit_baseline(const TrajectoryDataset& ds, FeatureMap features,
                           const std::vector<double>* sample_weights = nullptr);

}  // namespace dpe
