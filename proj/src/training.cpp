#include "dpe/training.hpp"

#include <cmath>

#include "dpe/csv.hpp"

namespace dpe {

void TrainConfig::validate() const {
  if (pretrain_steps < 1 || train_steps < 0) throw InvalidInput("bad step counts");
  if (batch_size < 1) throw InvalidInput("batch size must be positive");
  if (!(learning_rate >= 0.0)) throw InvalidInput("learning rate must be non-negative");
  if (!(grad_clip > 0.0)) throw InvalidInput("gradient clip must be positive");
  if (context_steps < 1) throw InvalidInput("context length must be positive");
  if (entropy_beta < 0.0) throw InvalidInput("entropy coefficient must be non-negative");
  if (sup_coeff < 0.0) throw InvalidInput("supervised coefficient must be non-negative");
  if (baseline_refresh < 1) throw InvalidInput("baseline refresh cadence must be positive");
  if (behavior_window < 1) throw InvalidInput("behavior window must be positive");
  weights.validate();
}

AdamOptimizer::AdamOptimizer(Eigen::Index dim, double learning_rate)
    : lr_(learning_rate),
      m_(Eigen::VectorXd::Zero(dim)),
      v_(Eigen::VectorXd::Zero(dim)) {}

void AdamOptimizer::step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ++t_;
  m_ = b1 * m_ + (1.0 - b1) * grad;
  v_ = b2 * v_.array().matrix() + (1.0 - b2) * grad.array().square().matrix();
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  params -=
      (lr_ / bc1) * (m_.array() / ((v_.array() / bc2).sqrt() + eps)).matrix();
}

double warmup_learning_rate(double base, long step, long total_steps) {
  const long warmup = std::max<long>(1, total_steps / 10);
  const double scale = std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(warmup));
  return base * scale;
}

void write_train_log_csv(const std::vector<TrainLogRow>& log,
                         const std::filesystem::path& path) {
  CsvWriter csv(path, {"step", "sup_loss", "dpe_grad_norm", "mean_cum_ratio",
                       "skipped_count", "baseline_mse", "running_mse"});
  for (const TrainLogRow& r : log)
    csv.row({std::to_string(r.step), format_double(r.sup_loss),
             format_double(r.dpe_grad_norm), format_double(r.mean_cum_ratio),
             std::to_string(r.skipped_count), format_double(r.baseline_mse),
             format_double(r.running_mse)});
}

BehaviorFitResult pretrain_behavior(const TrajectoryDataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  return fit_behavior_mle(ds, cfg.behavior_window, cfg.pretrain_steps, cfg.seed);
}

double default_target_return(const TrajectoryDataset& ds) {
  ds.validate();
  double best = -std::numeric_limits<double>::infinity();
  for (const Trajectory& traj : ds.trajectories) best = std::max(best, return_to_go(traj, 0));
  return 0.9 * best;
}

namespace {

// clip to the configured norm, in place
void clip_norm(Eigen::VectorXd& g, double max_norm) {
  const double n = g.norm();
  if (n > max_norm) g *= max_norm / n;
}

struct BatchWindows {
  std::vector<int> index;                 // trajectory indices
  std::vector<int> start;                 // first trajectory step of each window
  std::vector<TokenWindow> windows;       // training windows
  std::vector<Eigen::MatrixXd> targets;   // logged actions per window row
  long total_steps = 0;
};

// Conditioning sequences: g_0 is the episode return, so g_t = q_{t:H}.
std::vector<std::vector<double>> conditioning_all(const TrajectoryDataset& ds) {
  std::vector<std::vector<double>> rtg;
  rtg.reserve(static_cast<std::size_t>(ds.size()));
  for (const Trajectory& traj : ds.trajectories)
    rtg.push_back(rtg_conditioning_sequence(traj, return_to_go(traj, 0)));
  return rtg;
}

BatchWindows sample_batch(const TrajectoryDataset& ds,
                          const std::vector<std::vector<double>>& rtg, int batch_size, int K,
                          Rng& rng) {
  BatchWindows batch;
  std::uniform_int_distribution<int> pick(0, ds.size() - 1);
  for (int b = 0; b < batch_size; ++b) {
    const int i = pick(rng);
    const Trajectory& traj = ds.trajectories[static_cast<std::size_t>(i)];
    TokenWindow window;
    int start = 0, end = traj.length() - 1;
    if (traj.length() <= K) {
      window = full_window(traj, rtg[static_cast<std::size_t>(i)]);
    } else {
      std::uniform_int_distribution<int> pick_end(0, traj.length() - 1);
      end = pick_end(rng);
      start = std::max(0, end - (K - 1));
      for (int t = start; t <= end; ++t) {
        window.rtg.push_back(rtg[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)]);
        window.states.push_back(traj.states[static_cast<std::size_t>(t)]);
        window.actions.push_back(traj.actions[static_cast<std::size_t>(t)]);
      }
    }
    Eigen::MatrixXd targets(window.steps(), ds.action_dim);
    for (int t = 0; t < window.steps(); ++t)
      targets.row(t) = traj.actions[static_cast<std::size_t>(start + t)];
    batch.total_steps += window.steps();
    batch.index.push_back(i);
    batch.start.push_back(start);
    batch.windows.push_back(std::move(window));
    batch.targets.push_back(std::move(targets));
  }
  return batch;
}

double holdout_loss(const TrajectoryDataset& ds,
                    const std::vector<std::vector<double>>& rtg,
                    const SequencePolicyModel& model, int count) {
  double se = 0.0;
  long steps = 0;
  const int n = std::min(count, ds.size());
  for (int i = 0; i < n; ++i) {
    const Trajectory& traj = ds.trajectories[static_cast<std::size_t>(i)];
    const std::vector<Eigen::VectorXd> preds =
        model.predict_trajectory(traj, rtg[static_cast<std::size_t>(i)]);
    for (int t = 0; t < traj.length(); ++t) {
      se += (preds[static_cast<std::size_t>(t)] - traj.actions[static_cast<std::size_t>(t)])
                .squaredNorm();
      steps += 1;
    }
  }
  return se / (static_cast<double>(steps) * ds.action_dim);
}

std::vector<double> to_std(const Eigen::VectorXd& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

}  // namespace

TrainResult train_bc(const TrajectoryDataset& ds, SequencePolicyModel& model,
                     const TrainConfig& cfg) {
  cfg.validate();
  ds.validate();
  if (model.config().context_steps != cfg.context_steps)
    throw InvalidInput("model context length differs from the training config");

  const std::vector<std::vector<double>> rtg = conditioning_all(ds);
  Rng rng = make_rng(cfg.seed, 0xbc);
  AdamOptimizer opt(model.param_dim(), cfg.learning_rate);
  TrainResult result;

  const long record_every = std::max<long>(1, cfg.train_steps / 20);
  for (long step = 0; step < cfg.train_steps; ++step) {
    const BatchWindows batch =
        sample_batch(ds, rtg, cfg.batch_size, cfg.context_steps, rng);

    Eigen::VectorXd grad = Eigen::VectorXd::Zero(model.param_dim());
    double loss = 0.0;
    const double row_weight =
        1.0 / (static_cast<double>(batch.total_steps) * ds.action_dim);
    for (std::size_t b = 0; b < batch.windows.size(); ++b) {
      double value = 0.0;
      grad += model.grad_weighted_sq_error(
          batch.windows[b], batch.targets[b],
          Eigen::VectorXd::Constant(batch.windows[b].steps(), row_weight), &value);
      loss += value;
    }
    if (!std::isfinite(loss) || !grad.allFinite())
      throw TrainingFailure("divergent supervised loss", to_std(model.params()));

    model.update_running_mse(loss);

    clip_norm(grad, cfg.grad_clip);
    opt.set_learning_rate(warmup_learning_rate(cfg.learning_rate, step, cfg.train_steps));
    Eigen::VectorXd params = model.params();
    opt.step(params, grad);
    model.set_params(params);

    TrainLogRow row;
    row.step = step;
    row.sup_loss = loss;
    row.running_mse = model.running_mse();
    result.log.push_back(row);

    if (step % record_every == 0 || step + 1 == cfg.train_steps)
      result.holdout_curve.push_back(holdout_loss(ds, rtg, model, cfg.batch_size));
  }
  return result;
}

TrainResult train_dpe(const TrajectoryDataset& ds, SequencePolicyModel& model,
                      const GaussianPolicy& behavior, const TrainConfig& cfg) {
  cfg.validate();
  ds.validate();
  if (model.config().context_steps != cfg.context_steps)
    throw InvalidInput("model context length differs from the training config");
  if (!model.mse_initialized())
    throw UninitializedEstimator("train_dpe expects a behavior-cloned model (no MSE yet)");

  const std::vector<std::vector<double>> rtg = conditioning_all(ds);
  const FeatureMap features = feature_map_from_string(cfg.baseline_features, ds.state_dim);
  Rng rng = make_rng(cfg.seed, 0xd9e);
  AdamOptimizer opt(model.param_dim(), cfg.learning_rate);
  TrainResult result;

  BaselineModel baseline;
  const int da = ds.action_dim;

  for (long step = 0; step < cfg.train_steps; ++step) {
    if (step % cfg.baseline_refresh == 0) baseline = fit_baseline(ds, features);

    const BatchWindows batch =
        sample_batch(ds, rtg, cfg.batch_size, cfg.context_steps, rng);

    // Pass 1: predictions for the batch MSE (the spec orders the MSE update
    // before the target-policy estimate is formed).
    std::vector<Eigen::MatrixXd> preds(batch.windows.size());
    double batch_se = 0.0;
    for (std::size_t b = 0; b < batch.windows.size(); ++b) {
      const std::vector<Eigen::VectorXd> rows = model.forward_all(batch.windows[b]);
      Eigen::MatrixXd p(batch.windows[b].steps(), da);
      for (int t = 0; t < batch.windows[b].steps(); ++t) p.row(t) = rows[static_cast<std::size_t>(t)];
      batch_se += (p - batch.targets[b]).squaredNorm();
      preds[b] = std::move(p);
    }
    const double batch_mse = batch_se / (static_cast<double>(batch.total_steps) * da);
    if (!std::isfinite(batch_mse))
      throw TrainingFailure("divergent model output", to_std(model.params()));
    model.update_running_mse(batch_mse);
    const double sigma2 = model.variance();
    const double sigma = std::sqrt(sigma2);

    // Pass 2: per trajectory, form the DPE coefficients from the ratio path
    // and take gradients of both objectives over one graph.
    Eigen::VectorXd dpe_grad = Eigen::VectorXd::Zero(model.param_dim());
    Eigen::VectorXd sup_grad = Eigen::VectorXd::Zero(model.param_dim());
    long skipped = 0;
    long used = 0;
    double ratio_sum = 0.0;
    double baseline_se = 0.0;
    long baseline_n = 0;
    const double sup_row_weight =
        1.0 / (static_cast<double>(batch.total_steps) * da);

    for (std::size_t b = 0; b < batch.windows.size(); ++b) {
      const TokenWindow& window = batch.windows[b];
      const Trajectory& traj = ds.trajectories[static_cast<std::size_t>(batch.index[b])];
      const int n = window.steps();
      const int start = batch.start[b];

      try {
        // per-step weights of the estimated target and behavior policies
        std::vector<double> coeff(static_cast<std::size_t>(n));
        double cumulative = 1.0;
        std::vector<double> cum(static_cast<std::size_t>(n));
        for (int t = 0; t < n; ++t) {
          const int global_t = start + t;
          const Eigen::VectorXd& a = traj.actions[static_cast<std::size_t>(global_t)];
          const Eigen::VectorXd mu_t = preds[b].row(t);
          double lp_t = 0.0;
          for (int j = 0; j < da; ++j) {
            const double z = (a[j] - mu_t[j]) / sigma;
            lp_t += -std::log(sigma) - 0.9189385332046727 - 0.5 * z * z;
          }
          const Eigen::VectorXd sig_vec = Eigen::VectorXd::Constant(da, sigma);
          const double w_num = weight_transform(lp_t, mu_t, sig_vec, a, cfg.weights);

          const Eigen::VectorXd ctx = behavior.context_vector(traj, global_t);
          auto [mu_b, sig_b] = behavior.mean_sigma(ctx);
          const double lp_b = [&] {
            double lp = 0.0;
            for (int j = 0; j < da; ++j) {
              const double z = (a[j] - mu_b[j]) / sig_b[j];
              lp += -std::log(sig_b[j]) - 0.9189385332046727 - 0.5 * z * z;
            }
            return lp;
          }();
          const double w_den = weight_transform(lp_b, mu_b, sig_b, a, cfg.weights);
          if (!(w_den >= 1e-300) || !(w_num >= 1e-300))
            throw DegenerateRatioError("weight under machine floor", t);
          double v = w_num / w_den;
          if (cfg.weights.per_step_cap) v = std::min(v, *cfg.weights.per_step_cap);
          cumulative *= v;
          cum[static_cast<std::size_t>(t)] = cumulative;
        }

        const std::vector<double> q = return_to_go_all(traj);
        if (cfg.dpe_form == GradientForm::episode) {
          const double b0 = baseline.predict(traj.states.front(), 0, ds.horizon);
          const double c = (q.front() - b0) * cumulative;
          for (auto& x : coeff) x = c;
        } else {
          for (int t = 0; t < n; ++t) {
            const int global_t = start + t;
            const double bt = baseline.predict(
                traj.states[static_cast<std::size_t>(global_t)], global_t, ds.horizon);
            coeff[static_cast<std::size_t>(t)] =
                (q[static_cast<std::size_t>(global_t)] - bt) * cum[static_cast<std::size_t>(t)];
          }
        }
        for (int t = 0; t < n; ++t) {
          const int global_t = start + t;
          const double bt = baseline.predict(
              traj.states[static_cast<std::size_t>(global_t)], global_t, ds.horizon);
          baseline_se += (q[static_cast<std::size_t>(global_t)] - bt) *
                         (q[static_cast<std::size_t>(global_t)] - bt);
          ++baseline_n;
        }

        Eigen::VectorXd c(n);
        for (int t = 0; t < n; ++t) c[t] = coeff[static_cast<std::size_t>(t)];
        const SequencePolicyModel::PairGrads grads = model.grad_log_prob_and_sq_error(
            window, batch.targets[b], c, sigma2,
            Eigen::VectorXd::Constant(n, sup_row_weight));
        dpe_grad += grads.log_prob_grad;
        sup_grad += grads.sq_error_grad;
        ratio_sum += cumulative;
        ++used;
      } catch (const DegenerateRatioError&) {
        ++skipped;
      }
    }

    if (skipped * 10 > static_cast<long>(batch.windows.size()))
      throw TrainingFailure("more than 10% of the batch had degenerate ratios",
                            to_std(model.params()));
    if (used > 0) dpe_grad /= static_cast<double>(used);
    if (!dpe_grad.allFinite() || !sup_grad.allFinite())
      throw TrainingFailure("non-finite gradient", to_std(model.params()));

    // ascent on Z_DPE, descent on the supervised term
    Eigen::VectorXd direction = dpe_grad - cfg.sup_coeff * sup_grad;
    clip_norm(direction, cfg.grad_clip);
    opt.set_learning_rate(warmup_learning_rate(cfg.learning_rate, step, cfg.train_steps));
    Eigen::VectorXd params = model.params();
    Eigen::VectorXd descent = -direction;
    opt.step(params, descent);
    model.set_params(params);

    TrainLogRow row;
    row.step = step;
    row.sup_loss = batch_mse;
    row.dpe_grad_norm = dpe_grad.norm();
    row.mean_cum_ratio = used > 0 ? ratio_sum / static_cast<double>(used) : 0.0;
    row.skipped_count = skipped;
    row.baseline_mse = baseline_n > 0 ? baseline_se / static_cast<double>(baseline_n) : 0.0;
    row.running_mse = model.running_mse();
    result.log.push_back(row);
  }
  return result;
}

EvalResult evaluate_policy(const Environment& env, const SequencePolicyModel& model,
                           double target_return, int episodes, std::uint64_t seed,
                           const ActionSampler* reference) {
  if (!std::isfinite(target_return)) throw InvalidInput("target return must be finite");
  if (episodes < 1) throw InvalidInput("episodes must be >= 1");
  const int K = model.config().context_steps;

  EvalResult result;
  double mse = 0.0;
  long mse_n = 0;
  for (int e = 0; e < episodes; ++e) {
    Rng rng = make_rng(seed, 0xe7a1 + static_cast<std::uint64_t>(e));
    // separate stream for the reference so its draws cannot perturb the
    // episode's dynamics
    Rng ref_rng = make_rng(seed, 0x4ef0 + static_cast<std::uint64_t>(e));
    Eigen::VectorXd s = env.reset(rng);
    double g = target_return;
    RolloutState rs;
    double ep_return = 0.0;
    double disc = 1.0;
    for (int t = 0; t <= env.horizon(); ++t) {
      rs.states.push_back(s);
      rs.rtg.push_back(g);

      TokenWindow window;
      const int count = static_cast<int>(rs.states.size());
      const int start = std::max(0, count - K);
      for (int k = start; k < count; ++k) {
        window.rtg.push_back(rs.rtg[static_cast<std::size_t>(k)]);
        window.states.push_back(rs.states[static_cast<std::size_t>(k)]);
        if (k < count - 1) window.actions.push_back(rs.actions[static_cast<std::size_t>(k)]);
      }
      const Eigen::VectorXd a = env.clamp_action(model.forward_last(window));

      if (reference) {
        const Eigen::VectorXd ref = env.clamp_action((*reference)(rs, ref_rng));
        mse += (a - ref).squaredNorm();
        ++mse_n;
      }

      auto [next, reward] = env.step(s, a, rng);
      rs.actions.push_back(a);
      ep_return += disc * reward;
      disc *= env.discount();
      g = g - reward;
      s = std::move(next);
    }
    result.returns.push_back(ep_return);
  }
  double total = 0.0;
  for (double r : result.returns) total += r;
  result.mean_return = total / static_cast<double>(result.returns.size());
  if (reference) result.action_mse = mse / (static_cast<double>(mse_n) * env.action_dim());
  return result;
}

}  // namespace dpe
