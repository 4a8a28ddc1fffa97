#include "dpe/baseline.hpp"

#include <Eigen/Dense>

namespace dpe {

FeatureMap state_time_features(int state_dim) {
  FeatureMap fm;
  fm.dim = state_dim + 2;
  fm.name = "state_time";
  fm.fn = [state_dim](const Eigen::VectorXd& state, int t, int horizon) {
    if (state.size() != state_dim) throw ShapeError("baseline feature state dim mismatch");
    Eigen::VectorXd phi(state_dim + 2);
    phi[0] = 1.0;
    phi.segment(1, state_dim) = state;
    phi[state_dim + 1] = static_cast<double>(t) / std::max(horizon, 1);
    return phi;
  };
  return fm;
}

FeatureMap intercept_state_features(int state_dim) {
  FeatureMap fm;
  fm.dim = state_dim + 1;
  fm.name = "intercept_state";
  fm.fn = [state_dim](const Eigen::VectorXd& state, int, int) {
    if (state.size() != state_dim) throw ShapeError("baseline feature state dim mismatch");
    Eigen::VectorXd phi(state_dim + 1);
    phi[0] = 1.0;
    phi.segment(1, state_dim) = state;
    return phi;
  };
  return fm;
}

FeatureMap feature_map_from_string(const std::string& name, int state_dim) {
  if (name == "state_time") return state_time_features(state_dim);
  if (name == "intercept_state") return intercept_state_features(state_dim);
  if (name == "constant") return constant_feature();
  if (name == "zero") return zero_features();
  throw InvalidInput("unknown baseline feature map: " + name);
}

FeatureMap constant_feature() {
  FeatureMap fm;
  fm.dim = 1;
  fm.name = "constant";
  fm.fn = [](const Eigen::VectorXd&, int, int) {
    Eigen::VectorXd phi(1);
    phi[0] = 1.0;
    return phi;
  };
  return fm;
}

FeatureMap zero_features() {
  FeatureMap fm;
  fm.dim = 0;
  fm.name = "zero";
  fm.fn = [](const Eigen::VectorXd&, int, int) { return Eigen::VectorXd(0); };
  return fm;
}

Eigen::VectorXd BaselineModel::feature_vector(const Eigen::VectorXd& state, int t,
                                              int horizon) const {
  return features.fn(state, t, horizon);
}

double BaselineModel::predict(const Eigen::VectorXd& state, int t, int horizon) const {
  if (features.dim == 0) return 0.0;
  return features.fn(state, t, horizon).dot(xi);
}

BaselineModel fit_baseline(const TrajectoryDataset& ds, FeatureMap features,
                           const std::vector<double>* sample_weights) {
  ds.validate();
  BaselineModel model;
  model.features = std::move(features);
  if (model.features.dim == 0) {
    model.xi = Eigen::VectorXd(0);
    return model;
  }

  long total = 0;
  for (const Trajectory& traj : ds.trajectories) total += traj.length();
  if (model.features.dim > total)
    throw InvalidInput("baseline feature dimension exceeds sample count");
  if (sample_weights && static_cast<long>(sample_weights->size()) != total)
    throw ShapeError("sample weight count must equal (trajectory, step) samples");

  Eigen::MatrixXd design(total, model.features.dim);
  Eigen::VectorXd target(total);
  long row = 0;
  for (const Trajectory& traj : ds.trajectories) {
    const std::vector<double> q = return_to_go_all(traj);
    for (int t = 0; t < traj.length(); ++t, ++row) {
      Eigen::VectorXd phi =
          model.features.fn(traj.states[static_cast<std::size_t>(t)], t, ds.horizon);
      if (phi.size() != model.features.dim) throw ShapeError("feature dim mismatch");
      double w = 1.0;
      if (sample_weights) {
        w = (*sample_weights)[static_cast<std::size_t>(row)];
        if (w < 0.0) throw InvalidInput("negative sample weight");
        w = std::sqrt(w);
      }
      design.row(row) = w * phi.transpose();
      target[row] = w * q[static_cast<std::size_t>(t)];
    }
  }

  auto svd = design.bdcSvd(Eigen::ComputeThinU | Eigen::ComputeThinV);
  svd.setThreshold(1e-10);
  model.xi = svd.solve(target);  // minimum-norm when rank deficient
  model.rank_deficient = svd.rank() < model.features.dim;
  return model;
}

}  // namespace dpe
