#pragma once

#include <Eigen/Core>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "dpe/common.hpp"
#include "dpe/rng.hpp"
#include "dpe/trajectory.hpp"

namespace dpe {

// Per-step Gaussian summary (diagonal), exposed by policies whose action
// density is Gaussian so CDF-window weights can be formed.
struct GaussianStep {
  Eigen::VectorXd mean;
  Eigen::VectorXd sigma;
  double log_prob = 0.0;
};

// Partial history available to a policy while an episode is being rolled out:
// states s_0..s_t, actions a_0..a_{t-1}, conditioning returns g_0..g_t.
struct RolloutState {
  std::vector<Eigen::VectorXd> states;
  std::vector<Eigen::VectorXd> actions;
  std::vector<double> rtg;
};

// Stochastic policy over continuous or embedded-discrete actions. Everything
// a policy must answer about a logged trajectory: the log-density of each
// logged action and parameter scores. Parameters live in one flat vector.
class Policy {
 public:
  virtual ~Policy() = default;

  virtual int param_dim() const = 0;
  virtual Eigen::VectorXd params() const = 0;
  virtual void set_params(const Eigen::VectorXd& p) = 0;

  // log pi(a_t | context_t) for every step of the trajectory.
  virtual std::vector<double> log_probs(const Trajectory& traj) const = 0;

  // Per-step Gaussian densities; empty when the policy is not Gaussian.
  virtual std::vector<GaussianStep> gaussian_steps(const Trajectory&) const { return {}; }

  // sum_t coeff[t] * d/dparams log pi(a_t | context_t), a single vector.
  virtual Eigen::VectorXd weighted_score(const Trajectory& traj,
                                         std::span<const double> coeff) const = 0;

  double log_prob(const Trajectory& traj, int t) const;
  Eigen::VectorXd score(const Trajectory& traj, int t) const;
};

// Exposed for the spec-level operation names.
double gaussian_log_prob(const Policy& policy, const Trajectory& traj, int t);
Eigen::VectorXd policy_score(const Policy& policy, const Trajectory& traj, int t);

struct GaussianPolicyConfig {
  int state_dim = 1;
  int action_dim = 1;
  int context_window = 1;  // n recent states form the conditioning context
  enum class MeanMap { linear, mlp } mean_map = MeanMap::linear;
  int hidden_dim = 32;  // mlp only
  // fixed: constant non-trainable log-std; constant: trainable per-dim
  // log-std; head: per-dim log-std emitted by the mean map.
  enum class StdMode { fixed, constant, head } std_mode = StdMode::constant;
  Eigen::VectorXd fixed_log_std;  // used by StdMode::fixed
  double sigma_floor = kDefaultSigmaFloor;
  std::uint64_t init_seed = 0;
};

// Diagonal Gaussian over actions; mean (and optionally log-std) produced by a
// differentiable map of the context vector (the last n states, repeated-state
// padded at the episode start).
class GaussianPolicy final : public Policy {
 public:
  explicit GaussianPolicy(GaussianPolicyConfig cfg);

  const GaussianPolicyConfig& config() const { return cfg_; }

  int param_dim() const override { return static_cast<int>(params_.size()); }
  Eigen::VectorXd params() const override { return params_; }
  void set_params(const Eigen::VectorXd& p) override;

  Eigen::VectorXd context_vector(const Trajectory& traj, int t) const;
  Eigen::VectorXd context_vector(const RolloutState& rs) const;

  // sigma already floored at sigma_floor.
  std::pair<Eigen::VectorXd, Eigen::VectorXd> mean_sigma(const Eigen::VectorXd& context) const;
  // Batched action means, one context per row.
  Eigen::MatrixXd mean_batch(const Eigen::MatrixXd& contexts) const;
  double log_prob_context(const Eigen::VectorXd& context, const Eigen::VectorXd& action) const;
  Eigen::VectorXd score_context(const Eigen::VectorXd& context,
                                const Eigen::VectorXd& action) const;
  Eigen::VectorXd sample(const Eigen::VectorXd& context, Rng& rng) const;

  std::vector<double> log_probs(const Trajectory& traj) const override;
  std::vector<GaussianStep> gaussian_steps(const Trajectory& traj) const override;
  Eigen::VectorXd weighted_score(const Trajectory& traj,
                                 std::span<const double> coeff) const override;

  // Weighted negative log-likelihood over arbitrary (context, action) rows
  // and its gradient; the building block for maximum-likelihood fitting.
  std::pair<double, Eigen::VectorXd> weighted_nll_grad(
      const Eigen::MatrixXd& contexts, const Eigen::MatrixXd& actions,
      const Eigen::VectorXd& weights) const;
  double weighted_nll(const Eigen::MatrixXd& contexts, const Eigen::MatrixXd& actions,
                      const Eigen::VectorXd& weights) const;

  // Exact maximizer of the Gaussian likelihood for the linear-mean,
  // constant-std configuration (ordinary least squares + 1/N residual
  // variance).
  static GaussianPolicy fit_mle_closed_form(const TrajectoryDataset& ds, int context_window,
                                            double sigma_floor = kDefaultSigmaFloor);

  int context_dim() const { return cfg_.state_dim * cfg_.context_window; }

 private:
  struct Layout {
    // offsets into the flat parameter vector; matrices stored column-major
    int w1 = 0, b1 = 0, w2 = -1, b2 = -1, log_std = -1;
    int in = 0, hidden = 0, out = 0;
    int total = 0;
  };
  Layout layout_;
  GaussianPolicyConfig cfg_;
  Eigen::VectorXd params_;

  Eigen::MatrixXd map_forward(const Eigen::MatrixXd& contexts) const;  // rows = samples
  void init_params();
};

// Tabular softmax policy over finite states/actions; used by the enumeration
// oracle. Trajectory states/actions hold the indices as 1-dim real vectors.
class CategoricalPolicy final : public Policy {
 public:
  CategoricalPolicy(int num_states, int num_actions);
  explicit CategoricalPolicy(Eigen::MatrixXd logits);  // S x A

  int num_states() const { return static_cast<int>(logits_.rows()); }
  int num_actions() const { return static_cast<int>(logits_.cols()); }

  int param_dim() const override { return static_cast<int>(logits_.size()); }
  Eigen::VectorXd params() const override;
  void set_params(const Eigen::VectorXd& p) override;

  double log_prob_sa(int state, int action) const;
  Eigen::VectorXd probs(int state) const;
  int sample(int state, Rng& rng) const;  // inverse-CDF, platform independent

  std::vector<double> log_probs(const Trajectory& traj) const override;
  Eigen::VectorXd weighted_score(const Trajectory& traj,
                                 std::span<const double> coeff) const override;

 private:
  Eigen::MatrixXd logits_;
};

// Mean over contexts of the diagonal-Gaussian differential entropy
// 0.5 * sum_j log(2 pi e sigma_j^2).
double gaussian_entropy(const GaussianPolicy& policy,
                        const std::vector<Eigen::VectorXd>& contexts);
double gaussian_entropy_sigma(const Eigen::VectorXd& sigma);

struct BehaviorFitOptions {
  GaussianPolicyConfig::MeanMap mean_map = GaussianPolicyConfig::MeanMap::linear;
  int hidden_dim = 32;
  GaussianPolicyConfig::StdMode std_mode = GaussianPolicyConfig::StdMode::constant;
  double sigma_floor = kDefaultSigmaFloor;
  double grad_tol = 1e-7;  // stop when the mean-score inf-norm falls below
};

struct BehaviorFitResult {
  GaussianPolicy policy;
  std::vector<double> mean_log_likelihood;  // recorded ascent curve
  long iterations = 0;
};

// Maximum-likelihood behavior estimate via full-batch gradient ascent with
// Armijo backtracking (the recorded likelihood curve is non-decreasing by
// construction).
BehaviorFitResult fit_behavior_mle(const TrajectoryDataset& ds, int context_window,
                                   long steps, std::uint64_t seed,
                                   const BehaviorFitOptions& opts = {});

// L - beta * H: negative mean log-likelihood of the dataset actions under the
// policy minus beta times its Gaussian entropy.
double joint_objective(const Policy& policy, const TrajectoryDataset& ds, double beta);

}  // namespace dpe
