#pragma once

#include <Eigen/Core>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dpe/baseline.hpp"
#include "dpe/envs.hpp"
#include "dpe/estimators.hpp"
#include "dpe/policy.hpp"
#include "dpe/sequence_model.hpp"
#include "dpe/trajectory.hpp"

namespace dpe {

struct TrainConfig {
  long pretrain_steps = 500;
  long train_steps = 500;
  int batch_size = 64;
  double learning_rate = 1e-4;
  double grad_clip = 0.25;
  std::uint64_t seed = 0;
  int context_steps = 20;  // K
  std::optional<double> target_return;  // evaluation g_0; default 0.9 * best in data
  WeightConfig weights;
  std::string baseline_features = "state_time";
  GradientForm dpe_form = GradientForm::stepwise;
  double entropy_beta = 0.0;
  double sup_coeff = 1.0;     // additive weight of the supervised l2 term
  long baseline_refresh = 100;
  int behavior_window = 1;    // Markov behavior estimate by default

  void validate() const;
};

// Plain Adam on a flat parameter vector (descent).
class AdamOptimizer {
 public:
  AdamOptimizer(Eigen::Index dim, double learning_rate);
  void set_learning_rate(double lr) { lr_ = lr; }
  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad);

 private:
  double lr_;
  long t_ = 0;
  Eigen::VectorXd m_, v_;
};

// Linear warmup over the first tenth of the run, then the configured rate.
double warmup_learning_rate(double base, long step, long total_steps);

struct TrainLogRow {
  long step = 0;
  double sup_loss = 0.0;
  double dpe_grad_norm = 0.0;
  double mean_cum_ratio = 0.0;
  long skipped_count = 0;
  double baseline_mse = 0.0;
  double running_mse = 0.0;
};

struct TrainResult {
  std::vector<TrainLogRow> log;
  std::vector<double> holdout_curve;  // fixed-batch loss per recorded epoch
};

void write_train_log_csv(const std::vector<TrainLogRow>& log,
                         const std::filesystem::path& path);

// Behavior warm-up: the maximum-likelihood Gaussian fit with the configured
// context window and cfg.pretrain_steps iterations.
BehaviorFitResult pretrain_behavior(const TrajectoryDataset& ds, const TrainConfig& cfg);

// Supervised l2 training of the sequence model on (g, s, a) windows with
// g_0 set to the episode return. Maintains the running MSE.
TrainResult train_bc(const TrajectoryDataset& ds, SequencePolicyModel& model,
                     const TrainConfig& cfg);

// DPE policy-gradient training: per batch the model is forwarded, the running
// MSE updated, the target estimate formed, ratios and baseline-centered
// returns weighted into the gradient, and an ascent step taken on the
// combined objective. Trajectories with degenerate ratios are skipped and
// counted; more than 10% skipped in one batch aborts training.
TrainResult train_dpe(const TrajectoryDataset& ds, SequencePolicyModel& model,
                      const GaussianPolicy& behavior, const TrainConfig& cfg);

double default_target_return(const TrajectoryDataset& ds);  // 0.9 * best return

struct EvalResult {
  double mean_return = 0.0;
  std::vector<double> returns;
  std::optional<double> action_mse;  // vs the reference policy, when given
};

// Closed-loop conditioned rollouts: act on the model's mean action, update
// the conditioning return g_{t+1} = g_t - r_t, slide the K-step window.
EvalResult evaluate_policy(const Environment& env, const SequencePolicyModel& model,
                           double target_return, int episodes, std::uint64_t seed,
                           const ActionSampler* reference = nullptr);

}  // namespace dpe
