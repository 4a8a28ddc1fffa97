#pragma once

#include <Eigen/Core>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "dpe/autodiff.hpp"
#include "dpe/policy.hpp"
#include "dpe/trajectory.hpp"

namespace dpe {

struct SequenceModelConfig {
  int state_dim = 1;
  int action_dim = 1;
  int context_steps = 20;  // K
  int layers = 2;
  int heads = 1;
  int embed_dim = 32;
  double sigma_floor = kDefaultSigmaFloor;  // variance floor is its square
  double mse_ema_decay = 0.99;
  std::uint64_t init_seed = 0;
};

// A window of interleaved (g_t, s_t, a_t) steps. The final action may be
// absent (that is the inference shape: predict a_t from ..., g_t, s_t).
struct TokenWindow {
  std::vector<double> rtg;
  std::vector<Eigen::VectorXd> states;
  std::vector<Eigen::VectorXd> actions;

  int steps() const { return static_cast<int>(rtg.size()); }
  bool has_final_action() const { return actions.size() == rtg.size(); }
  void validate(const SequenceModelConfig& cfg) const;  // SequenceFormatError
};

// Window ending at (g_t, s_t) with at most K steps of history; no final action.
TokenWindow window_for_step(const Trajectory& traj, std::span<const double> rtg, int t, int K);
// Whole trajectory as one window including every action; requires length <= K.
TokenWindow full_window(const Trajectory& traj, std::span<const double> rtg);

// Causal self-attention stack over interleaved tokens producing per-step
// action means. Parameters live in one flat vector.
class SequencePolicyModel {
 public:
  explicit SequencePolicyModel(SequenceModelConfig cfg);

  const SequenceModelConfig& config() const { return cfg_; }
  int param_dim() const { return static_cast<int>(params_.size()); }
  Eigen::VectorXd params() const { return params_; }
  void set_params(const Eigen::VectorXd& p);

  // Action-mean prediction at every state token of the window.
  std::vector<Eigen::VectorXd> forward_all(const TokenWindow& window) const;
  Eigen::VectorXd forward_last(const TokenWindow& window) const;

  // Predictions at every step of a trajectory under the sliding-window rule
  // (single forward when the trajectory fits in K steps).
  std::vector<Eigen::VectorXd> predict_trajectory(const Trajectory& traj,
                                                  std::span<const double> rtg) const;

  // d/dtheta of sum_t w_t |targets_t - pred_t|^2 over the window's steps.
  Eigen::VectorXd grad_weighted_sq_error(const TokenWindow& window,
                                         const Eigen::MatrixXd& targets,
                                         const Eigen::VectorXd& row_weights,
                                         double* value = nullptr) const;
  // d/dtheta of sum_t c_t log N(targets_t; pred_t, sigma2 I) with sigma2 fixed.
  Eigen::VectorXd grad_weighted_log_prob(const TokenWindow& window,
                                         const Eigen::MatrixXd& targets,
                                         const Eigen::VectorXd& coeffs, double sigma2,
                                         double* value = nullptr) const;
  // Both objectives over one forward graph (two backward passes); the
  // training loop's per-trajectory workhorse.
  struct PairGrads {
    Eigen::VectorXd log_prob_grad;
    Eigen::VectorXd sq_error_grad;
    double sq_error_value = 0.0;
  };
  PairGrads grad_log_prob_and_sq_error(const TokenWindow& window,
                                       const Eigen::MatrixXd& targets,
                                       const Eigen::VectorXd& coeffs, double sigma2,
                                       const Eigen::VectorXd& sq_row_weights) const;

  bool mse_initialized() const { return mse_initialized_; }
  double running_mse() const;  // UninitializedEstimator until trained
  void update_running_mse(double batch_mse);
  void set_running_mse(double value);  // checkpoint restore
  double variance() const;             // max(running_mse, floor^2)
  double sigma() const;

 private:
  struct Entry {
    int offset, rows, cols;
  };
  // Tape lives on the heap so Var handles stay valid across moves.
  struct Graph {
    std::unique_ptr<ad::Tape> tape;
    ad::Var predictions;                // n_steps x action_dim
    std::vector<std::pair<ad::Var, Entry>> leaves;
  };

  Graph build_graph(const TokenWindow& window, bool track_gradients) const;
  Eigen::VectorXd collect_grad(const Graph& graph) const;

  SequenceModelConfig cfg_;
  std::vector<Entry> entries_;
  Eigen::VectorXd params_;
  double running_mse_ = 0.0;
  bool mse_initialized_ = false;
};

// The spec-level forward operation: action mean at the last state token.
Eigen::VectorXd sequence_forward(const SequencePolicyModel& model, const TokenWindow& window);

// pi_t^psi: diagonal Gaussian with mean from the sequence model and variance
// equal to its running MSE (floored). Parameter vector is the model's theta;
// sigma is a recorded statistic, not a parameter.
class SequenceGaussianPolicy final : public Policy {
 public:
  explicit SequenceGaussianPolicy(SequencePolicyModel& model);

  int param_dim() const override { return model_->param_dim(); }
  Eigen::VectorXd params() const override { return model_->params(); }
  void set_params(const Eigen::VectorXd& p) override { model_->set_params(p); }

  double sigma() const { return sigma_; }

  std::vector<double> log_probs(const Trajectory& traj) const override;
  std::vector<GaussianStep> gaussian_steps(const Trajectory& traj) const override;
  Eigen::VectorXd weighted_score(const Trajectory& traj,
                                 std::span<const double> coeff) const override;

 private:
  SequencePolicyModel* model_;
  double sigma_;
};

SequenceGaussianPolicy target_policy_estimate(SequencePolicyModel& model);

}  // namespace dpe
