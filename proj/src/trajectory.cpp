#include "dpe/trajectory.hpp"

#include <charconv>
#include <fstream>

#include <nlohmann/json.hpp>

namespace dpe {

using nlohmann::json;

namespace {

bool vector_finite(const Eigen::VectorXd& v) { return v.allFinite(); }

Eigen::VectorXd to_vector(const json& arr) {
  Eigen::VectorXd v(arr.size());
  for (std::size_t i = 0; i < arr.size(); ++i) {
    if (!arr[i].is_number()) throw SchemaError("expected a number in vector entry");
    v[static_cast<Eigen::Index>(i)] = arr[i].get<double>();
  }
  return v;
}

json from_vector(const Eigen::VectorXd& v) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
  return arr;
}

}  // namespace

void Trajectory::validate(int state_dim, int action_dim) const {
  const std::size_t n = rewards.size();
  if (n < 1) throw InvalidInput("trajectory must have at least one step");
  if (states.size() != n || actions.size() != n)
    throw InvalidInput("trajectory state/action/reward sequences differ in length");
  for (std::size_t t = 0; t < n; ++t) {
    if (states[t].size() != state_dim)
      throw ShapeError("state dimension mismatch at step " + std::to_string(t));
    if (actions[t].size() != action_dim)
      throw ShapeError("action dimension mismatch at step " + std::to_string(t));
    if (!vector_finite(states[t]) || !vector_finite(actions[t]) || !std::isfinite(rewards[t]))
      throw InvalidInput("non-finite value in trajectory at step " + std::to_string(t));
  }
}

void TrajectoryDataset::validate() const {
  if (trajectories.empty()) throw SchemaError("dataset must contain at least one trajectory");
  if (state_dim < 1 || action_dim < 1) throw SchemaError("state/action dimensions must be positive");
  if (!(discount > 0.0 && discount <= 1.0)) throw SchemaError("discount must lie in (0, 1]");
  if (horizon < 0) throw SchemaError("horizon must be non-negative");
  for (const Trajectory& traj : trajectories) {
    traj.validate(state_dim, action_dim);
    if (traj.length() > horizon + 1)
      throw SchemaError("trajectory longer than horizon+1");
  }
}

double discounted_return(const Trajectory& traj, double gamma) {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw InvalidInput("gamma must lie in (0, 1]");
  if (!all_finite(traj.rewards)) throw InvalidInput("non-finite reward in trajectory");
  double total = 0.0;
  double weight = 1.0;
  for (double r : traj.rewards) {
    total += weight * r;
    weight *= gamma;
  }
  return total;
}

double return_to_go(const Trajectory& traj, int t) {
  if (t < 0 || t >= traj.length())
    throw IndexError("return_to_go step " + std::to_string(t) + " out of range");
  double total = 0.0;
  for (int s = traj.last_step(); s >= t; --s) total += traj.rewards[s];
  return total;
}

std::vector<double> return_to_go_all(const Trajectory& traj) {
  std::vector<double> q(traj.length());
  double acc = 0.0;
  for (int t = traj.last_step(); t >= 0; --t) {
    acc += traj.rewards[t];
    q[t] = acc;
  }
  return q;
}

std::vector<double> rtg_conditioning_sequence(const Trajectory& traj, double g0) {
  if (!std::isfinite(g0)) throw InvalidInput("g0 must be finite");
  if (!all_finite(traj.rewards)) throw InvalidInput("non-finite reward in trajectory");
  std::vector<double> g(traj.length());
  g[0] = g0;
  for (int t = 0; t + 1 < traj.length(); ++t) g[t + 1] = g[t] - traj.rewards[t];
  return g;
}

void save_dataset(const TrajectoryDataset& ds, const std::filesystem::path& path) {
  ds.validate();
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot open for writing: " + path.string());

  json meta;
  meta["state_dim"] = ds.state_dim;
  meta["action_dim"] = ds.action_dim;
  meta["horizon"] = ds.horizon;
  meta["discount"] = ds.discount;
  if (!ds.behavior_descriptor.empty()) meta["behavior_descriptor"] = ds.behavior_descriptor;
  out << meta.dump() << "\n";

  for (const Trajectory& traj : ds.trajectories) {
    json rec;
    rec["states"] = json::array();
    rec["actions"] = json::array();
    for (const auto& s : traj.states) rec["states"].push_back(from_vector(s));
    for (const auto& a : traj.actions) rec["actions"].push_back(from_vector(a));
    rec["rewards"] = traj.rewards;
    out << rec.dump() << "\n";
  }
  if (!out) throw ComputeError("write failure: " + path.string());
}

TrajectoryDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open for reading: " + path.string());

  std::string line;
  long line_no = 0;
  TrajectoryDataset ds;

  auto parse_line = [&](const std::string& text) -> json {
    try {
      return json::parse(text);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("malformed record: ") + e.what(), line_no);
    }
  };

  if (!std::getline(in, line)) throw SchemaError("empty dataset file (m >= 1 required)");
  ++line_no;
  json meta = parse_line(line);
  try {
    ds.state_dim = meta.at("state_dim").get<int>();
    ds.action_dim = meta.at("action_dim").get<int>();
    ds.horizon = meta.at("horizon").get<int>();
    ds.discount = meta.at("discount").get<double>();
    if (meta.contains("behavior_descriptor"))
      ds.behavior_descriptor = meta["behavior_descriptor"].get<std::string>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad metadata record: ") + e.what(), line_no);
  }

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json rec = parse_line(line);
    Trajectory traj;
    try {
      for (const json& s : rec.at("states")) traj.states.push_back(to_vector(s));
      for (const json& a : rec.at("actions")) traj.actions.push_back(to_vector(a));
      traj.rewards = rec.at("rewards").get<std::vector<double>>();
    } catch (const json::exception& e) {
      throw ParseError(std::string("bad trajectory record: ") + e.what(), line_no);
    } catch (const SchemaError& e) {
      throw ParseError(std::string("bad trajectory record: ") + e.what(), line_no);
    }
    try {
      traj.validate(ds.state_dim, ds.action_dim);
    } catch (const ShapeError& e) {
      throw SchemaError(std::string(e.what()) + " (line " + std::to_string(line_no) + ")");
    } catch (const InvalidInput& e) {
      throw InvalidInput(std::string(e.what()) + " (line " + std::to_string(line_no) + ")");
    }
    ds.trajectories.push_back(std::move(traj));
  }
  ds.validate();
  return ds;
}

}  // namespace dpe
