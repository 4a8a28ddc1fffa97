#pragma once

#include <Eigen/Core>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dpe/baseline.hpp"
#include "dpe/policy.hpp"
#include "dpe/trajectory.hpp"

namespace dpe {

// Central-difference audit of a reported gradient. Returns the worst
// per-coordinate relative error, with |fd|, |reported| and 1 in the
// denominator so near-zero coordinates degrade to absolute error.
double finite_difference_check(const std::function<double(const Eigen::VectorXd&)>& fn,
                               const Eigen::VectorXd& reported_gradient,
                               const Eigen::VectorXd& point, double step = 1e-5);

// Per-trajectory quantities feeding the variance decomposition: estimator
// contributions mu_i, behavior log-likelihood scores S_eta_i, baseline
// feature rows S_xi_i, and their second-moment (Fisher) matrices.
struct ScoreSet {
  std::vector<Eigen::VectorXd> mu;
  std::vector<Eigen::VectorXd> s_eta;
  std::vector<Eigen::VectorXd> s_xi;
  Eigen::MatrixXd fisher_eta;  // (1/m) sum s_eta s_eta^T
  Eigen::MatrixXd fisher_xi;   // (1/m) sum s_xi s_xi^T

  void finalize();  // fills the Fisher matrices from the score vectors
};

// Empirical Fisher of the behavior policy: outer products of whole-trajectory
// scores. Equals the expected Hessian form at the true parameter.
Eigen::MatrixXd fisher_eta(const TrajectoryDataset& ds, const Policy& pi_b);

// Analytic negative-Hessian Fisher for the linear-mean, fixed-sigma Gaussian
// family (the case where the Hessian is data-independent and exact).
Eigen::MatrixXd fisher_eta_hessian_gaussian(const TrajectoryDataset& ds,
                                            const GaussianPolicy& pi_b);

// (1/m) sum over trajectories of the baseline feature outer product at
// (s_0, t=0), matching the episode-level expansion.
Eigen::MatrixXd fisher_xi(const TrajectoryDataset& ds, const BaselineModel& baseline);

struct ProjectionResult {
  std::vector<Eigen::VectorXd> v_a;  // projection of mu onto span(S_eta)
  std::vector<Eigen::VectorXd> v_b;  // projection of mu onto span(S_xi)
  bool pseudo_inverse_used = false;
};
ProjectionResult projection_terms(const ScoreSet& scores);

// Trace of the (n-1)-normalized sample covariance.
double trace_variance(const std::vector<Eigen::VectorXd>& xs);

// Synthetic one-step family: x ~ N(0,1); behavior a ~ N(eta0.[1,x], sigma_b^2);
// target density with psi0; return G = c0 + c1 x + c2 a + noise * eps;
// linear baseline with features [1, x] (or [1] only).
struct LocationFamilyConfig {
  Eigen::Vector2d eta0{0.3, 0.5};
  double sigma_b = 0.6;
  Eigen::Vector2d psi0{0.45, 0.6};
  double sigma_t = 0.6;
  double c0 = 1.0, c1 = 1.0, c2 = 0.3;
  double noise = 0.1;
  bool constant_baseline_only = false;
  bool gradient_form_mu = false;  // mu_i = nu (G-b) score_e; else scalar value form
};

ScoreSet sample_location_family(const LocationFamilyConfig& cfg, long n, std::uint64_t seed);

struct DecompositionReport {
  double var_mu = 0.0;
  double var_va = 0.0;
  double var_vb = 0.0;
  double var_residual = 0.0;
  double relative_gap = 0.0;
};

DecompositionReport variance_decomposition_check(const LocationFamilyConfig& cfg, long n,
                                                 std::uint64_t seed);
void write_decomposition_csv(const std::vector<std::pair<std::uint64_t, DecompositionReport>>& rows,
                             const std::filesystem::path& path);

// Designed Gaussian bandit (H = 0): behavior a ~ N(w_b x + c_b, sigma_b^2),
// evaluation policy with (w_e, c_e, sigma_e), reward r0 + r_x x + r_a a + eps.
// Defaults give corr(q, baseline features) >= 0.9.
struct GaussianBanditConfig {
  double w_b = 0.2, c_b = 0.1, sigma_b = 0.5;
  double w_e = 0.35, c_e = 0.2, sigma_e = 0.5;
  double r0 = 2.0, r_x = 1.0, r_a = 0.3, r_noise = 0.1;
};

TrajectoryDataset sample_gaussian_bandit(const GaussianBanditConfig& cfg, int m,
                                         std::uint64_t seed);
GaussianPolicy bandit_behavior_policy(const GaussianBanditConfig& cfg);
GaussianPolicy bandit_evaluation_policy(const GaussianBanditConfig& cfg);
// corr(q, best linear predictor from [1, x]) on a large sample: sqrt(R^2).
double bandit_return_feature_correlation(const GaussianBanditConfig& cfg, long n,
                                         std::uint64_t seed);

struct VarianceStudyConfig {
  long replicates = 2000;
  int dataset_size = 50;  // m per replicate
  std::uint64_t seed = 0;
  long bootstrap_resamples = 10000;
  double ci_level = 0.99;
  bool fit_behavior = true;   // false: DPE uses the true behavior policy
  bool fit_baseline = true;   // false: DPE uses b = 0
  GaussianBanditConfig instance;
};

struct VarianceStudyResult {
  std::vector<Eigen::VectorXd> z_ois, z_dpe;  // empty rows for failures
  std::vector<std::string> replicate_status;  // "ok" or the failure message
  long failures = 0;
  Eigen::VectorXd var_ois_coord, var_dpe_coord, ratio_coord;
  double var_ois_trace = 0.0, var_dpe_trace = 0.0, ratio = 0.0;
  double ratio_ci_lo = 0.0, ratio_ci_hi = 0.0;
};

// Refit the behavior MLE and baseline per replicate, compare the DPE gradient
// against OIS with the true behavior and no baseline, bootstrap the variance
// ratio. Replicates are seed-deterministic and ordered.
VarianceStudyResult variance_study(const VarianceStudyConfig& cfg);
void write_variance_study_csv(const VarianceStudyResult& result,
                              const std::filesystem::path& path);

}  // namespace dpe
