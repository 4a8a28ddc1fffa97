#include "dpe/estimators.hpp"

#include <cmath>

#include "dpe/csv.hpp"

namespace dpe {

namespace {
constexpr double kWeightFloor = 1e-300;  // below this a ratio is degenerate
}

WeightMode weight_mode_from_string(const std::string& s) {
  if (s == "pdf") return WeightMode::pdf;
  if (s == "exp_clipped_loglik" || s == "exp_clipped") return WeightMode::exp_clipped_loglik;
  if (s == "cdf_window" || s == "cdf") return WeightMode::cdf_window;
  if (s == "unit") return WeightMode::unit;
  throw InvalidInput("unknown weight mode: " + s);
}

std::string to_string(WeightMode mode) {
  switch (mode) {
    case WeightMode::pdf: return "pdf";
    case WeightMode::exp_clipped_loglik: return "exp_clipped_loglik";
    case WeightMode::cdf_window: return "cdf_window";
    case WeightMode::unit: return "unit";
  }
  throw InvalidInput("bad weight mode");
}

GradientForm gradient_form_from_string(const std::string& s) {
  if (s == "episode") return GradientForm::episode;
  if (s == "stepwise") return GradientForm::stepwise;
  throw InvalidInput("unknown gradient form: " + s);
}

std::string to_string(GradientForm form) {
  return form == GradientForm::episode ? "episode" : "stepwise";
}

void WeightConfig::validate() const {
  if (!(clip_lo > 0.0 && clip_lo < clip_hi && clip_hi <= 1.0))
    throw InvalidInput("weight clip bounds must satisfy 0 < lo < hi <= 1");
  if (mode == WeightMode::cdf_window && !(beta > 0.0))
    throw InvalidInput("cdf_window mode needs beta > 0");
  if (per_step_cap && !(*per_step_cap > 0.0))
    throw InvalidInput("per-step ratio cap must be positive");
}

double weight_transform(double log_likelihood, const Eigen::VectorXd& mu,
                        const Eigen::VectorXd& sigma, const Eigen::VectorXd& action,
                        const WeightConfig& cfg) {
  cfg.validate();
  switch (cfg.mode) {
    case WeightMode::pdf:
      return std::exp(log_likelihood);
    case WeightMode::exp_clipped_loglik: {
      if (cfg.clip_log_space)
        return std::exp(std::clamp(log_likelihood, cfg.clip_lo, cfg.clip_hi));
      return std::clamp(std::exp(log_likelihood), cfg.clip_lo, cfg.clip_hi);
    }
    case WeightMode::cdf_window: {
      if (mu.size() != action.size() || sigma.size() != action.size())
        throw ShapeError("cdf_window weight needs per-dimension mean and sigma");
      double w = 1.0;
      for (Eigen::Index j = 0; j < action.size(); ++j) {
        const double hi = normal_cdf((action[j] + cfg.beta - mu[j]) / sigma[j]);
        const double lo = normal_cdf((action[j] - cfg.beta - mu[j]) / sigma[j]);
        w *= hi - lo;
      }
      return w;
    }
    case WeightMode::unit:
      return 1.0;
  }
  throw InvalidInput("bad weight mode");
}

namespace {

// Per-step transformed weights for one policy along one trajectory.
std::vector<double> step_weights(const Policy& policy, const Trajectory& traj,
                                 const WeightConfig& cfg) {
  const int T = traj.length();
  std::vector<double> out(static_cast<std::size_t>(T));
  if (cfg.mode == WeightMode::unit) {
    for (auto& w : out) w = 1.0;
    return out;
  }
  if (cfg.mode == WeightMode::cdf_window) {
    const std::vector<GaussianStep> steps = policy.gaussian_steps(traj);
    if (static_cast<int>(steps.size()) != T)
      throw InvalidInput("cdf_window weights need a Gaussian policy");
    for (int t = 0; t < T; ++t) {
      const GaussianStep& g = steps[static_cast<std::size_t>(t)];
      out[static_cast<std::size_t>(t)] = weight_transform(
          g.log_prob, g.mean, g.sigma, traj.actions[static_cast<std::size_t>(t)], cfg);
    }
    return out;
  }
  const std::vector<double> lps = policy.log_probs(traj);
  const Eigen::VectorXd none;
  for (int t = 0; t < T; ++t)
    out[static_cast<std::size_t>(t)] =
        weight_transform(lps[static_cast<std::size_t>(t)], none, none,
                         traj.actions[static_cast<std::size_t>(t)], cfg);
  return out;
}

}  // namespace

DensityRatioSeries density_ratio_series(const Policy& numerator, const Policy& denominator,
                                        const Trajectory& traj, const WeightConfig& cfg) {
  cfg.validate();
  const std::vector<double> w_num = step_weights(numerator, traj, cfg);
  const std::vector<double> w_den = step_weights(denominator, traj, cfg);
  DensityRatioSeries series;
  series.per_step.resize(w_num.size());
  series.cumulative.resize(w_num.size());
  double running = 1.0;
  for (std::size_t k = 0; k < w_num.size(); ++k) {
    if (!(w_den[k] >= kWeightFloor))
      throw DegenerateRatioError("denominator weight under machine floor",
                                 static_cast<int>(k));
    if (!(w_num[k] >= kWeightFloor))
      throw DegenerateRatioError("numerator weight under machine floor",
                                 static_cast<int>(k));
    double v = w_num[k] / w_den[k];
    if (cfg.per_step_cap) v = std::min(v, *cfg.per_step_cap);
    if (!std::isfinite(v))
      throw DegenerateRatioError("non-finite density ratio", static_cast<int>(k));
    series.per_step[k] = v;
    running *= v;
    series.cumulative[k] = running;
  }
  return series;
}

namespace {

GradientEstimate finalize_estimate(std::vector<Eigen::VectorXd> per_traj,
                                   std::vector<double> ratios, std::vector<double> centered) {
  GradientEstimate est;
  est.per_trajectory = std::move(per_traj);
  est.final_ratio = std::move(ratios);
  est.centered_return = std::move(centered);
  const auto m = static_cast<double>(est.per_trajectory.size());
  if (est.per_trajectory.empty()) throw InvalidInput("gradient estimate over zero trajectories");
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(est.per_trajectory.front().size());
  for (const Eigen::VectorXd& mu : est.per_trajectory) sum += mu;
  est.gradient = sum / m;
  double trace = 0.0;
  if (est.per_trajectory.size() > 1) {
    for (const Eigen::VectorXd& mu : est.per_trajectory)
      trace += (mu - est.gradient).squaredNorm();
    trace /= (m - 1.0);
  }
  est.sample_variance = trace / m;
  return est;
}

}  // namespace

double ois_value(const TrajectoryDataset& ds, const Policy& pi_e, const Policy& pi_b) {
  ds.validate();
  std::vector<double> terms;
  terms.reserve(static_cast<std::size_t>(ds.size()));
  for (const Trajectory& traj : ds.trajectories) {
    const std::vector<double> lpe = pi_e.log_probs(traj);
    const std::vector<double> lpb = pi_b.log_probs(traj);
    double nu = 1.0;
    for (int t = 0; t < traj.length(); ++t)
      nu *= std::exp(lpe[static_cast<std::size_t>(t)] - lpb[static_cast<std::size_t>(t)]);
    if (!std::isfinite(nu)) throw NumericError("non-finite OIS weight");
    terms.push_back(nu * discounted_return(traj, ds.discount));
  }
  return pairwise_sum(terms) / static_cast<double>(terms.size());
}

GradientEstimate ois_gradient(const TrajectoryDataset& ds, const Policy& pi_e,
                              const Policy& pi_b, GradientForm form) {
  ds.validate();
  std::vector<Eigen::VectorXd> per_traj;
  std::vector<double> ratios, centered;
  for (const Trajectory& traj : ds.trajectories) {
    const int T = traj.length();
    const std::vector<double> lpe = pi_e.log_probs(traj);
    const std::vector<double> lpb = pi_b.log_probs(traj);
    std::vector<double> nu(static_cast<std::size_t>(T));
    double running = 1.0;
    for (int t = 0; t < T; ++t) {
      running *= std::exp(lpe[static_cast<std::size_t>(t)] - lpb[static_cast<std::size_t>(t)]);
      nu[static_cast<std::size_t>(t)] = running;
    }
    const std::vector<double> q = return_to_go_all(traj);
    std::vector<double> coeff(static_cast<std::size_t>(T));
    if (form == GradientForm::episode) {
      const double c = nu.back() * q.front();
      for (auto& x : coeff) x = c;
    } else {
      for (int t = 0; t < T; ++t)
        coeff[static_cast<std::size_t>(t)] =
            nu[static_cast<std::size_t>(t)] * q[static_cast<std::size_t>(t)];
    }
    Eigen::VectorXd mu = pi_e.weighted_score(traj, coeff);
    if (!mu.allFinite())
      throw NumericError("non-finite OIS gradient term",
                         static_cast<long>(per_traj.size()));
    per_traj.push_back(std::move(mu));
    ratios.push_back(nu.back());
    centered.push_back(q.front());
  }
  return finalize_estimate(std::move(per_traj), std::move(ratios), std::move(centered));
}

DpeTrajectoryTerm dpe_trajectory_term(const Trajectory& traj, int horizon, const Policy& pi_t,
                                      const Policy& pi_b, const BaselineModel& baseline,
                                      GradientForm form, const WeightConfig& cfg) {
  const int T = traj.length();
  const DensityRatioSeries ratios = density_ratio_series(pi_t, pi_b, traj, cfg);
  const std::vector<double> q = return_to_go_all(traj);

  DpeTrajectoryTerm term;
  term.final_ratio = ratios.cumulative.back();
  const double b0 = baseline.predict(traj.states.front(), 0, horizon);
  term.centered_return = q.front() - b0;

  std::vector<double> coeff(static_cast<std::size_t>(T));
  if (form == GradientForm::episode) {
    const double c = term.centered_return * ratios.cumulative.back();
    for (auto& x : coeff) x = c;
  } else {
    for (int t = 0; t < T; ++t) {
      const double bt =
          baseline.predict(traj.states[static_cast<std::size_t>(t)], t, horizon);
      coeff[static_cast<std::size_t>(t)] =
          (q[static_cast<std::size_t>(t)] - bt) * ratios.cumulative[static_cast<std::size_t>(t)];
    }
  }
  term.mu = pi_t.weighted_score(traj, coeff);
  if (!term.mu.allFinite()) throw NumericError("non-finite DPE gradient term");
  return term;
}

GradientEstimate dpe_gradient(const TrajectoryDataset& ds, const Policy& pi_t,
                              const Policy& pi_b, const BaselineModel& baseline,
                              GradientForm form, const WeightConfig& cfg) {
  ds.validate();
  cfg.validate();
  std::vector<Eigen::VectorXd> per_traj;
  std::vector<double> ratios, centered;
  for (int i = 0; i < ds.size(); ++i) {
    try {
      DpeTrajectoryTerm term = dpe_trajectory_term(ds.trajectories[static_cast<std::size_t>(i)],
                                                   ds.horizon, pi_t, pi_b, baseline, form, cfg);
      per_traj.push_back(std::move(term.mu));
      ratios.push_back(term.final_ratio);
      centered.push_back(term.centered_return);
    } catch (const DegenerateRatioError& e) {
      throw DegenerateRatioError("degenerate density ratio", e.step, i);
    }
  }
  return finalize_estimate(std::move(per_traj), std::move(ratios), std::move(centered));
}

double dpe_value_ratio(const TrajectoryDataset& ds, const Policy& pi_t, const Policy& pi_b,
                       const WeightConfig& cfg) {
  ds.validate();
  cfg.validate();
  std::vector<double> terms;
  terms.reserve(static_cast<std::size_t>(ds.size()));
  for (int i = 0; i < ds.size(); ++i) {
    const Trajectory& traj = ds.trajectories[static_cast<std::size_t>(i)];
    try {
      const DensityRatioSeries ratios = density_ratio_series(pi_t, pi_b, traj, cfg);
      terms.push_back(return_to_go(traj, 0) * ratios.cumulative.back());
    } catch (const DegenerateRatioError& e) {
      throw DegenerateRatioError("degenerate density ratio", e.step, i);
    }
  }
  return pairwise_sum(terms) / static_cast<double>(terms.size());
}

void export_gradient_csv(const GradientEstimate& estimate, const std::filesystem::path& path,
                         bool per_coordinate) {
  std::vector<std::string> header = {"row", "trajectory", "mu_norm", "ratio",
                                     "centered_return"};
  const Eigen::Index dim = estimate.gradient.size();
  if (per_coordinate)
    for (Eigen::Index j = 0; j < dim; ++j) header.push_back("mu_" + std::to_string(j));
  CsvWriter csv(path, header);
  for (std::size_t i = 0; i < estimate.per_trajectory.size(); ++i) {
    std::vector<std::string> cells = {
        "trajectory", std::to_string(i), format_double(estimate.per_trajectory[i].norm()),
        format_double(estimate.final_ratio[i]), format_double(estimate.centered_return[i])};
    if (per_coordinate)
      for (Eigen::Index j = 0; j < dim; ++j)
        cells.push_back(format_double(estimate.per_trajectory[i][j]));
    csv.row(cells);
  }
  double mean_ratio = 0.0, mean_centered = 0.0;
  for (double r : estimate.final_ratio) mean_ratio += r;
  for (double c : estimate.centered_return) mean_centered += c;
  const auto m = static_cast<double>(estimate.per_trajectory.size());
  std::vector<std::string> cells = {"summary", std::to_string(estimate.per_trajectory.size()),
                                    format_double(estimate.gradient.norm()),
                                    format_double(mean_ratio / m),
                                    format_double(mean_centered / m)};
  if (per_coordinate)
    for (Eigen::Index j = 0; j < dim; ++j) cells.push_back(format_double(estimate.gradient[j]));
  csv.row(cells);
}

}  // namespace dpe
