#include "dpe/sequence_model.hpp"

#include <cmath>
#include <limits>

namespace dpe {

namespace {
constexpr double kLogTwoPi = 1.8378770664093453;
}

void TokenWindow::validate(const SequenceModelConfig& cfg) const {
  const std::size_t n = rtg.size();
  if (n < 1) throw SequenceFormatError("window needs at least one step");
  if (states.size() != n)
    throw SequenceFormatError("window state count must match return-to-go count");
  if (actions.size() != n && actions.size() + 1 != n)
    throw SequenceFormatError("window must interleave (g, s, a) with at most one trailing action missing");
  if (static_cast<int>(n) > cfg.context_steps)
    throw SequenceFormatError("window exceeds the context length");
  for (std::size_t t = 0; t < n; ++t) {
    if (!std::isfinite(rtg[t])) throw SequenceFormatError("non-finite return-to-go token");
    if (states[t].size() != cfg.state_dim || !states[t].allFinite())
      throw SequenceFormatError("bad state token at step " + std::to_string(t));
  }
  for (std::size_t t = 0; t < actions.size(); ++t) {
    if (actions[t].size() != cfg.action_dim || !actions[t].allFinite())
      throw SequenceFormatError("bad action token at step " + std::to_string(t));
  }
}

TokenWindow window_for_step(const Trajectory& traj, std::span<const double> rtg, int t, int K) {
  if (t < 0 || t >= traj.length()) throw IndexError("window step out of range");
  if (static_cast<int>(rtg.size()) != traj.length())
    throw ShapeError("conditioning sequence length mismatch");
  const int start = std::max(0, t - (K - 1));
  TokenWindow w;
  for (int s = start; s <= t; ++s) {
    w.rtg.push_back(rtg[static_cast<std::size_t>(s)]);
    w.states.push_back(traj.states[static_cast<std::size_t>(s)]);
    if (s < t) w.actions.push_back(traj.actions[static_cast<std::size_t>(s)]);
  }
  return w;
}

TokenWindow full_window(const Trajectory& traj, std::span<const double> rtg) {
  if (static_cast<int>(rtg.size()) != traj.length())
    throw ShapeError("conditioning sequence length mismatch");
  TokenWindow w;
  w.rtg.assign(rtg.begin(), rtg.end());
  w.states = traj.states;
  w.actions = traj.actions;
  return w;
}

SequencePolicyModel::SequencePolicyModel(SequenceModelConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.state_dim < 1 || cfg_.action_dim < 1)
    throw InvalidInput("state/action dimensions must be positive");
  if (cfg_.context_steps < 1) throw InvalidInput("context length must be >= 1");
  if (cfg_.layers < 1 || cfg_.heads < 1 || cfg_.embed_dim < 1)
    throw InvalidInput("layers/heads/embed_dim must be positive");
  if (cfg_.embed_dim % cfg_.heads != 0)
    throw InvalidInput("embed_dim must be divisible by heads");
  if (!(cfg_.mse_ema_decay > 0.0 && cfg_.mse_ema_decay < 1.0))
    throw InvalidInput("mse_ema_decay must lie in (0, 1)");

  const int d = cfg_.embed_dim;
  int at = 0;
  auto add = [&](int rows, int cols) {
    entries_.push_back({at, rows, cols});
    at += rows * cols;
  };
  add(1, d);              // 0 rtg embed weight
  add(1, d);              // 1 rtg embed bias
  add(cfg_.state_dim, d); // 2 state embed weight
  add(1, d);              // 3 state embed bias
  add(cfg_.action_dim, d);// 4 action embed weight
  add(1, d);              // 5 action embed bias
  add(cfg_.context_steps, d);  // 6 positional table
  for (int l = 0; l < cfg_.layers; ++l) {
    add(1, d);        // ln1 gain
    add(1, d);        // ln1 bias
    add(d, 3 * d);    // qkv weight
    add(1, 3 * d);    // qkv bias
    add(d, d);        // attn out weight
    add(1, d);        // attn out bias
    add(1, d);        // ln2 gain
    add(1, d);        // ln2 bias
    add(d, 4 * d);    // mlp in weight
    add(1, 4 * d);    // mlp in bias
    add(4 * d, d);    // mlp out weight
    add(1, d);        // mlp out bias
  }
  add(1, d);                 // final ln gain
  add(1, d);                 // final ln bias
  add(d, cfg_.action_dim);   // head weight
  add(1, cfg_.action_dim);   // head bias

  params_ = Eigen::VectorXd::Zero(at);
  Rng rng = make_rng(cfg_.init_seed, 0x5e9);
  std::normal_distribution<double> dist(0.0, 0.02);
  auto fill = [&](int entry) {
    const Entry& e = entries_[static_cast<std::size_t>(entry)];
    for (int i = 0; i < e.rows * e.cols; ++i) params_[e.offset + i] = dist(rng);
  };
  auto ones = [&](int entry) {
    const Entry& e = entries_[static_cast<std::size_t>(entry)];
    for (int i = 0; i < e.rows * e.cols; ++i) params_[e.offset + i] = 1.0;
  };
  // weights random, biases zero, layer-norm gains one
  fill(0); fill(2); fill(4); fill(6);
  int idx = 7;
  for (int l = 0; l < cfg_.layers; ++l) {
    ones(idx);          // ln1 gain
    fill(idx + 2);      // qkv
    fill(idx + 4);      // attn out
    ones(idx + 6);      // ln2 gain
    fill(idx + 8);      // mlp in
    fill(idx + 10);     // mlp out
    idx += 12;
  }
  ones(idx);       // final ln gain
  fill(idx + 2);   // head weight
}

void SequencePolicyModel::set_params(const Eigen::VectorXd& p) {
  if (p.size() != params_.size()) throw ShapeError("parameter vector size mismatch");
  if (!p.allFinite()) throw InvalidInput("non-finite parameters");
  params_ = p;
}

SequencePolicyModel::Graph SequencePolicyModel::build_graph(const TokenWindow& window,
                                                            bool track_gradients) const {
  window.validate(cfg_);
  Graph g;
  g.tape = std::make_unique<ad::Tape>();
  ad::Tape& tape = *g.tape;
  const int d = cfg_.embed_dim;
  const int n = window.steps();
  const int n_act = static_cast<int>(window.actions.size());
  const int n_tok = 2 * n + n_act;

  int cursor = 0;
  auto param = [&]() {
    const Entry& e = entries_[static_cast<std::size_t>(cursor)];
    ++cursor;
    Eigen::MatrixXd value =
        Eigen::Map<const Eigen::MatrixXd>(params_.data() + e.offset, e.rows, e.cols);
    ad::Var v = track_gradients ? tape.leaf(std::move(value)) : tape.constant(std::move(value));
    if (track_gradients) g.leaves.emplace_back(v, e);
    return v;
  };

  ad::Var w_rtg = param(), b_rtg = param();
  ad::Var w_state = param(), b_state = param();
  ad::Var w_act = param(), b_act = param();
  ad::Var pos = param();

  Eigen::MatrixXd rtg_in(n, 1);
  Eigen::MatrixXd state_in(n, cfg_.state_dim);
  for (int t = 0; t < n; ++t) {
    rtg_in(t, 0) = window.rtg[static_cast<std::size_t>(t)];
    state_in.row(t) = window.states[static_cast<std::size_t>(t)];
  }
  ad::Var g_emb = tape.add_rowvec(tape.matmul(tape.constant(rtg_in), w_rtg), b_rtg);
  ad::Var s_emb = tape.add_rowvec(tape.matmul(tape.constant(state_in), w_state), b_state);

  std::vector<ad::Var> parts = {g_emb, s_emb};
  if (n_act > 0) {
    Eigen::MatrixXd act_in(n_act, cfg_.action_dim);
    for (int t = 0; t < n_act; ++t) act_in.row(t) = window.actions[static_cast<std::size_t>(t)];
    parts.push_back(tape.add_rowvec(tape.matmul(tape.constant(act_in), w_act), b_act));
  }
  ad::Var stacked = tape.concat_rows(parts);

  // interleave (g_t, s_t, a_t); rows of `stacked` are [g..., s..., a...]
  std::vector<int> order;
  std::vector<int> pos_index;  // the step whose positional row each token gets
  order.reserve(static_cast<std::size_t>(n_tok));
  for (int t = 0; t < n; ++t) {
    order.push_back(t);
    pos_index.push_back(t);
    order.push_back(n + t);
    pos_index.push_back(t);
    if (t < n_act) {
      order.push_back(2 * n + t);
      pos_index.push_back(t);
    }
  }
  ad::Var x = tape.add(tape.rows(stacked, order), tape.rows(pos, pos_index));

  const double neg_inf = -std::numeric_limits<double>::infinity();
  Eigen::MatrixXd mask = Eigen::MatrixXd::Zero(n_tok, n_tok);
  for (int i = 0; i < n_tok; ++i)
    for (int j = i + 1; j < n_tok; ++j) mask(i, j) = neg_inf;

  const int dh = d / cfg_.heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int l = 0; l < cfg_.layers; ++l) {
    ad::Var ln1_g = param(), ln1_b = param();
    ad::Var w_qkv = param(), b_qkv = param();
    ad::Var w_o = param(), b_o = param();
    ad::Var ln2_g = param(), ln2_b = param();
    ad::Var w_fc1 = param(), b_fc1 = param();
    ad::Var w_fc2 = param(), b_fc2 = param();

    ad::Var h1 = tape.layer_norm_rows(x, ln1_g, ln1_b);
    ad::Var qkv = tape.add_rowvec(tape.matmul(h1, w_qkv), b_qkv);
    std::vector<ad::Var> heads;
    for (int h = 0; h < cfg_.heads; ++h) {
      ad::Var q = tape.cols(qkv, h * dh, dh);
      ad::Var k = tape.cols(qkv, d + h * dh, dh);
      ad::Var v = tape.cols(qkv, 2 * d + h * dh, dh);
      ad::Var scores = tape.scale(tape.matmul(q, tape.transpose(k)), att_scale);
      ad::Var probs = tape.softmax_rows(scores, mask);
      heads.push_back(tape.matmul(probs, v));
    }
    ad::Var merged = cfg_.heads == 1 ? heads[0] : tape.concat_cols(heads);
    x = tape.add(x, tape.add_rowvec(tape.matmul(merged, w_o), b_o));

    ad::Var h2 = tape.layer_norm_rows(x, ln2_g, ln2_b);
    ad::Var m = tape.relu(tape.add_rowvec(tape.matmul(h2, w_fc1), b_fc1));
    x = tape.add(x, tape.add_rowvec(tape.matmul(m, w_fc2), b_fc2));
  }

  ad::Var lnf_g = param(), lnf_b = param();
  ad::Var w_head = param(), b_head = param();
  ad::Var final_x = tape.layer_norm_rows(x, lnf_g, lnf_b);

  std::vector<int> state_rows;
  state_rows.reserve(static_cast<std::size_t>(n));
  for (int t = 0; t < n; ++t) state_rows.push_back(3 * t + 1);
  g.predictions =
      tape.add_rowvec(tape.matmul(tape.rows(final_x, state_rows), w_head), b_head);
  return g;
}

Eigen::VectorXd SequencePolicyModel::collect_grad(const Graph& graph) const {
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(params_.size());
  for (const auto& [var, entry] : graph.leaves) {
    Eigen::MatrixXd gm = graph.tape->grad_or_zero(var);
    Eigen::Map<Eigen::MatrixXd>(grad.data() + entry.offset, entry.rows, entry.cols) = gm;
  }
  return grad;
}

std::vector<Eigen::VectorXd> SequencePolicyModel::forward_all(const TokenWindow& window) const {
  Graph g = build_graph(window, /*track_gradients=*/false);
  const Eigen::MatrixXd& preds = g.tape->value(g.predictions);
  std::vector<Eigen::VectorXd> out(static_cast<std::size_t>(preds.rows()));
  for (Eigen::Index t = 0; t < preds.rows(); ++t) out[static_cast<std::size_t>(t)] = preds.row(t);
  return out;
}

Eigen::VectorXd SequencePolicyModel::forward_last(const TokenWindow& window) const {
  return forward_all(window).back();
}

std::vector<Eigen::VectorXd> SequencePolicyModel::predict_trajectory(
    const Trajectory& traj, std::span<const double> rtg) const {
  if (traj.length() <= cfg_.context_steps) return forward_all(full_window(traj, rtg));
  std::vector<Eigen::VectorXd> out;
  out.reserve(static_cast<std::size_t>(traj.length()));
  for (int t = 0; t < traj.length(); ++t)
    out.push_back(forward_last(window_for_step(traj, rtg, t, cfg_.context_steps)));
  return out;
}

Eigen::VectorXd SequencePolicyModel::grad_weighted_sq_error(const TokenWindow& window,
                                                            const Eigen::MatrixXd& targets,
                                                            const Eigen::VectorXd& row_weights,
                                                            double* value) const {
  Graph g = build_graph(window, /*track_gradients=*/true);
  if (targets.rows() != window.steps() || targets.cols() != cfg_.action_dim)
    throw ShapeError("target shape mismatch");
  if (row_weights.size() != window.steps()) throw ShapeError("row weight count mismatch");
  ad::Tape& tape = *g.tape;
  ad::Var diff = tape.sub(tape.constant(targets), g.predictions);
  ad::Var loss = tape.sum(tape.mul_rows(tape.square(diff), row_weights));
  tape.backward(loss);
  if (value) *value = tape.value(loss)(0, 0);
  return collect_grad(g);
}

Eigen::VectorXd SequencePolicyModel::grad_weighted_log_prob(const TokenWindow& window,
                                                            const Eigen::MatrixXd& targets,
                                                            const Eigen::VectorXd& coeffs,
                                                            double sigma2, double* value) const {
  if (!(sigma2 > 0.0)) throw InvalidInput("sigma2 must be positive");
  Graph g = build_graph(window, /*track_gradients=*/true);
  if (targets.rows() != window.steps() || targets.cols() != cfg_.action_dim)
    throw ShapeError("target shape mismatch");
  if (coeffs.size() != window.steps()) throw ShapeError("coefficient count mismatch");
  ad::Tape& tape = *g.tape;
  ad::Var diff = tape.sub(tape.constant(targets), g.predictions);
  ad::Var quad = tape.sum(tape.mul_rows(tape.square(diff), coeffs));
  ad::Var obj = tape.scale(quad, -0.5 / sigma2);
  tape.backward(obj);
  if (value) {
    const double const_term =
        -0.5 * cfg_.action_dim * (kLogTwoPi + std::log(sigma2)) * coeffs.sum();
    *value = tape.value(obj)(0, 0) + const_term;
  }
  return collect_grad(g);
}

SequencePolicyModel::PairGrads SequencePolicyModel::grad_log_prob_and_sq_error(
    const TokenWindow& window, const Eigen::MatrixXd& targets, const Eigen::VectorXd& coeffs,
    double sigma2, const Eigen::VectorXd& sq_row_weights) const {
  if (!(sigma2 > 0.0)) throw InvalidInput("sigma2 must be positive");
  Graph g = build_graph(window, /*track_gradients=*/true);
  if (targets.rows() != window.steps() || targets.cols() != cfg_.action_dim)
    throw ShapeError("target shape mismatch");
  if (coeffs.size() != window.steps() || sq_row_weights.size() != window.steps())
    throw ShapeError("coefficient count mismatch");
  ad::Tape& tape = *g.tape;
  ad::Var diff = tape.sub(tape.constant(targets), g.predictions);
  ad::Var sq = tape.square(diff);
  ad::Var log_prob_obj = tape.scale(tape.sum(tape.mul_rows(sq, coeffs)), -0.5 / sigma2);
  ad::Var sq_obj = tape.sum(tape.mul_rows(sq, sq_row_weights));

  PairGrads out;
  tape.backward(log_prob_obj);
  out.log_prob_grad = collect_grad(g);
  tape.zero_grads();
  tape.backward(sq_obj);
  out.sq_error_grad = collect_grad(g);
  out.sq_error_value = tape.value(sq_obj)(0, 0);
  return out;
}

double SequencePolicyModel::running_mse() const {
  if (!mse_initialized_)
    throw UninitializedEstimator("running MSE requested before any training batch");
  return running_mse_;
}

void SequencePolicyModel::update_running_mse(double batch_mse) {
  if (!std::isfinite(batch_mse) || batch_mse < 0.0)
    throw InvalidInput("batch MSE must be finite and non-negative");
  const double floor = cfg_.sigma_floor * cfg_.sigma_floor;
  if (!mse_initialized_) {
    running_mse_ = std::max(batch_mse, floor);
    mse_initialized_ = true;
  } else {
    running_mse_ = std::max(
        cfg_.mse_ema_decay * running_mse_ + (1.0 - cfg_.mse_ema_decay) * batch_mse, floor);
  }
}

void SequencePolicyModel::set_running_mse(double value) {
  if (!std::isfinite(value) || value < 0.0) throw InvalidInput("bad running MSE value");
  running_mse_ = std::max(value, cfg_.sigma_floor * cfg_.sigma_floor);
  mse_initialized_ = true;
}

double SequencePolicyModel::variance() const {
  return std::max(running_mse(), cfg_.sigma_floor * cfg_.sigma_floor);
}

double SequencePolicyModel::sigma() const { return std::sqrt(variance()); }

Eigen::VectorXd sequence_forward(const SequencePolicyModel& model, const TokenWindow& window) {
  return model.forward_last(window);
}

// ---------------------------------------------------------------------------

SequenceGaussianPolicy::SequenceGaussianPolicy(SequencePolicyModel& model)
    : model_(&model), sigma_(model.sigma()) {}

SequenceGaussianPolicy target_policy_estimate(SequencePolicyModel& model) {
  if (!model.mse_initialized())
    throw UninitializedEstimator(
        "target policy estimate needs a trained model with a recorded MSE");
  return SequenceGaussianPolicy(model);
}

std::vector<double> SequenceGaussianPolicy::log_probs(const Trajectory& traj) const {
  const std::vector<double> rtg = return_to_go_all(traj);
  const std::vector<Eigen::VectorXd> preds = model_->predict_trajectory(traj, rtg);
  const int da = model_->config().action_dim;
  std::vector<double> out(static_cast<std::size_t>(traj.length()));
  for (int t = 0; t < traj.length(); ++t) {
    const Eigen::VectorXd& a = traj.actions[static_cast<std::size_t>(t)];
    const Eigen::VectorXd& mu = preds[static_cast<std::size_t>(t)];
    double lp = 0.0;
    for (int j = 0; j < da; ++j) {
      const double z = (a[j] - mu[j]) / sigma_;
      lp += -std::log(sigma_) - 0.5 * kLogTwoPi - 0.5 * z * z;
    }
    out[static_cast<std::size_t>(t)] = lp;
  }
  return out;
}

std::vector<GaussianStep> SequenceGaussianPolicy::gaussian_steps(const Trajectory& traj) const {
  const std::vector<double> rtg = return_to_go_all(traj);
  const std::vector<Eigen::VectorXd> preds = model_->predict_trajectory(traj, rtg);
  const int da = model_->config().action_dim;
  std::vector<GaussianStep> out(static_cast<std::size_t>(traj.length()));
  for (int t = 0; t < traj.length(); ++t) {
    GaussianStep& g = out[static_cast<std::size_t>(t)];
    g.mean = preds[static_cast<std::size_t>(t)];
    g.sigma = Eigen::VectorXd::Constant(da, sigma_);
    const Eigen::VectorXd& a = traj.actions[static_cast<std::size_t>(t)];
    double lp = 0.0;
    for (int j = 0; j < da; ++j) {
      const double z = (a[j] - g.mean[j]) / sigma_;
      lp += -std::log(sigma_) - 0.5 * kLogTwoPi - 0.5 * z * z;
    }
    g.log_prob = lp;
  }
  return out;
}

Eigen::VectorXd SequenceGaussianPolicy::weighted_score(const Trajectory& traj,
                                                       std::span<const double> coeff) const {
  if (static_cast<int>(coeff.size()) != traj.length())
    throw ShapeError("coefficient count must equal trajectory length");
  const std::vector<double> rtg = return_to_go_all(traj);
  const int T = traj.length();
  const int K = model_->config().context_steps;
  const double sigma2 = sigma_ * sigma_;

  if (T <= K) {
    const TokenWindow window = full_window(traj, rtg);
    Eigen::MatrixXd targets(T, model_->config().action_dim);
    Eigen::VectorXd c(T);
    for (int t = 0; t < T; ++t) {
      targets.row(t) = traj.actions[static_cast<std::size_t>(t)];
      c[t] = coeff[static_cast<std::size_t>(t)];
    }
    return model_->grad_weighted_log_prob(window, targets, c, sigma2);
  }

  Eigen::VectorXd total = Eigen::VectorXd::Zero(model_->param_dim());
  for (int t = 0; t < T; ++t) {
    const double c = coeff[static_cast<std::size_t>(t)];
    if (c == 0.0) continue;
    TokenWindow window = window_for_step(traj, rtg, t, K);
    const int n = window.steps();
    Eigen::MatrixXd targets = Eigen::MatrixXd::Zero(n, model_->config().action_dim);
    Eigen::VectorXd cs = Eigen::VectorXd::Zero(n);
    targets.row(n - 1) = traj.actions[static_cast<std::size_t>(t)];
    cs[n - 1] = c;
    total += model_->grad_weighted_log_prob(window, targets, cs, sigma2);
  }
  return total;
}

}  // namespace dpe
