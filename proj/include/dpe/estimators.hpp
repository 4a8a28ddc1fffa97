#pragma once

#include <Eigen/Core>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dpe/baseline.hpp"
#include "dpe/policy.hpp"
#include "dpe/trajectory.hpp"

namespace dpe {

// How a per-step likelihood becomes an importance weight. `unit` forces every
// weight to 1 and exists for reduction diagnostics.
enum class WeightMode { pdf, exp_clipped_loglik, cdf_window, unit };

WeightMode weight_mode_from_string(const std::string& s);
std::string to_string(WeightMode mode);

struct WeightConfig {
  WeightMode mode = WeightMode::pdf;
  double clip_lo = 0.05;
  double clip_hi = 0.995;
  // Interpretation switch: clamp the exponentiated likelihood (default) or
  // the raw log-likelihood before exponentiating.
  bool clip_log_space = false;
  double beta = 0.1;  // cdf window half-width
  std::optional<double> per_step_cap;  // truncate individual ratios

  void validate() const;
};

// One per-step likelihood -> weight. mu/sigma are needed by cdf_window mode
// only; pass empty vectors otherwise.
double weight_transform(double log_likelihood, const Eigen::VectorXd& mu,
                        const Eigen::VectorXd& sigma, const Eigen::VectorXd& action,
                        const WeightConfig& cfg);

struct DensityRatioSeries {
  std::vector<double> per_step;    // v_k
  std::vector<double> cumulative;  // nu_{0:t} = prod_{k<=t} v_k
};

// Per-step transformed-likelihood ratios of two policies along a trajectory,
// the same transform applied to numerator and denominator.
DensityRatioSeries density_ratio_series(const Policy& numerator, const Policy& denominator,
                                        const Trajectory& traj, const WeightConfig& cfg);

enum class GradientForm { episode, stepwise };
GradientForm gradient_form_from_string(const std::string& s);
std::string to_string(GradientForm form);

struct GradientEstimate {
  Eigen::VectorXd gradient;                     // mean of per_trajectory
  std::vector<Eigen::VectorXd> per_trajectory;  // mu_i
  double sample_variance = 0.0;                 // tr(cov(mu_i)) / m
  std::vector<double> final_ratio;              // nu_{0:H_i} per trajectory
  std::vector<double> centered_return;          // q_{0:H} - b_0 per trajectory
};

// (1/m) sum_i g(omega_i) nu_{0:H}; the true behavior policy's densities in
// the denominator (pdf weights by definition).
double ois_value(const TrajectoryDataset& ds, const Policy& pi_e, const Policy& pi_b);

// Off-policy REINFORCE gradient of the evaluation policy under OIS; episode
// form weights the whole score sum, stepwise weights each step.
GradientEstimate ois_gradient(const TrajectoryDataset& ds, const Policy& pi_e,
                              const Policy& pi_b, GradientForm form);

// DPE gradient: ratios from the two *estimated* policies via the configured
// weight transform, returns centered by the fitted baseline.
GradientEstimate dpe_gradient(const TrajectoryDataset& ds, const Policy& pi_t,
                              const Policy& pi_b, const BaselineModel& baseline,
                              GradientForm form, const WeightConfig& cfg);

// Per-trajectory DPE term; lets callers skip degenerate trajectories
// individually (training does).
struct DpeTrajectoryTerm {
  Eigen::VectorXd mu;
  double final_ratio = 1.0;
  double centered_return = 0.0;
};
DpeTrajectoryTerm dpe_trajectory_term(const Trajectory& traj, int horizon, const Policy& pi_t,
                                      const Policy& pi_b, const BaselineModel& baseline,
                                      GradientForm form, const WeightConfig& cfg);

// Ratio-form value objective: (1/m) sum_i q_{0:H} prod_t w_t(pi_t)/w_t(pi_b).
double dpe_value_ratio(const TrajectoryDataset& ds, const Policy& pi_t, const Policy& pi_b,
                       const WeightConfig& cfg);

// One row per trajectory (index, |mu_i|, ratio, centered return, optionally
// every coordinate) plus a summary row.
void export_gradient_csv(const GradientEstimate& estimate, const std::filesystem::path& path,
                         bool per_coordinate = false);

}  // namespace dpe
