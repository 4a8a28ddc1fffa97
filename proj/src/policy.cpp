#include "dpe/policy.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <numbers>

#include "dpe/autodiff.hpp"

namespace dpe {

namespace {
constexpr double kLogTwoPi = 1.8378770664093453;  // log(2*pi)

Eigen::Map<const Eigen::MatrixXd> view(const Eigen::VectorXd& p, int offset, int rows, int cols) {
  return Eigen::Map<const Eigen::MatrixXd>(p.data() + offset, rows, cols);
}

double diag_gaussian_log_prob(const Eigen::VectorXd& action, const Eigen::VectorXd& mean,
                              const Eigen::VectorXd& sigma) {
  double lp = 0.0;
  for (Eigen::Index j = 0; j < action.size(); ++j) {
    const double z = (action[j] - mean[j]) / sigma[j];
    lp += -std::log(sigma[j]) - 0.5 * kLogTwoPi - 0.5 * z * z;
  }
  return lp;
}
}  // namespace

double Policy::log_prob(const Trajectory& traj, int t) const {
  if (t < 0 || t >= traj.length()) throw IndexError("log_prob step out of range");
  return log_probs(traj)[static_cast<std::size_t>(t)];
}

Eigen::VectorXd Policy::score(const Trajectory& traj, int t) const {
  if (t < 0 || t >= traj.length()) throw IndexError("score step out of range");
  std::vector<double> coeff(static_cast<std::size_t>(traj.length()), 0.0);
  coeff[static_cast<std::size_t>(t)] = 1.0;
  return weighted_score(traj, coeff);
}

double gaussian_log_prob(const Policy& policy, const Trajectory& traj, int t) {
  return policy.log_prob(traj, t);
}

Eigen::VectorXd policy_score(const Policy& policy, const Trajectory& traj, int t) {
  return policy.score(traj, t);
}

// ---------------------------------------------------------------------------
// GaussianPolicy

GaussianPolicy::GaussianPolicy(GaussianPolicyConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.state_dim < 1 || cfg_.action_dim < 1)
    throw InvalidInput("state/action dimensions must be positive");
  if (cfg_.context_window < 1) throw InvalidInput("context window must be >= 1");
  if (cfg_.sigma_floor <= 0.0) throw InvalidInput("sigma floor must be positive");
  if (cfg_.std_mode == GaussianPolicyConfig::StdMode::fixed &&
      cfg_.fixed_log_std.size() != cfg_.action_dim)
    throw ShapeError("fixed_log_std must have action_dim entries");

  const int in = context_dim();
  const int out = cfg_.action_dim *
                  (cfg_.std_mode == GaussianPolicyConfig::StdMode::head ? 2 : 1);
  Layout& L = layout_;
  L.in = in;
  L.out = out;
  int at = 0;
  if (cfg_.mean_map == GaussianPolicyConfig::MeanMap::linear) {
    L.w1 = at; at += in * out;
    L.b1 = at; at += out;
  } else {
    L.hidden = cfg_.hidden_dim;
    if (L.hidden < 1) throw InvalidInput("hidden_dim must be >= 1");
    L.w1 = at; at += in * L.hidden;
    L.b1 = at; at += L.hidden;
    L.w2 = at; at += L.hidden * out;
    L.b2 = at; at += out;
  }
  if (cfg_.std_mode == GaussianPolicyConfig::StdMode::constant) {
    L.log_std = at; at += cfg_.action_dim;
  }
  L.total = at;
  params_ = Eigen::VectorXd::Zero(L.total);
  init_params();
}

void GaussianPolicy::init_params() {
  Rng rng = make_rng(cfg_.init_seed, 0x9a55);
  std::normal_distribution<double> dist(0.0, 1.0);
  const Layout& L = layout_;
  if (cfg_.mean_map == GaussianPolicyConfig::MeanMap::mlp) {
    const double s1 = 1.0 / std::sqrt(static_cast<double>(L.in));
    for (int i = 0; i < L.in * L.hidden; ++i) params_[L.w1 + i] = s1 * dist(rng);
    const double s2 = 1.0 / std::sqrt(static_cast<double>(L.hidden));
    for (int i = 0; i < L.hidden * L.out; ++i) params_[L.w2 + i] = s2 * dist(rng);
  }
  // Linear mean map starts at zero (the fit is convex from anywhere);
  // trainable log-std starts at 0, i.e. sigma = 1.
}

void GaussianPolicy::set_params(const Eigen::VectorXd& p) {
  if (p.size() != params_.size()) throw ShapeError("parameter vector size mismatch");
  params_ = p;
}

Eigen::VectorXd GaussianPolicy::context_vector(const Trajectory& traj, int t) const {
  if (t < 0 || t >= traj.length()) throw IndexError("context step out of range");
  const int n = cfg_.context_window;
  const int ds = cfg_.state_dim;
  Eigen::VectorXd ctx(n * ds);
  for (int k = 0; k < n; ++k) {
    const int idx = std::max(0, t - (n - 1) + k);  // repeat s_0 before the start
    ctx.segment(k * ds, ds) = traj.states[static_cast<std::size_t>(idx)];
  }
  return ctx;
}

Eigen::VectorXd GaussianPolicy::context_vector(const RolloutState& rs) const {
  if (rs.states.empty()) throw InvalidInput("rollout state has no states");
  const int n = cfg_.context_window;
  const int ds = cfg_.state_dim;
  const int t = static_cast<int>(rs.states.size()) - 1;
  Eigen::VectorXd ctx(n * ds);
  for (int k = 0; k < n; ++k) {
    const int idx = std::max(0, t - (n - 1) + k);
    ctx.segment(k * ds, ds) = rs.states[static_cast<std::size_t>(idx)];
  }
  return ctx;
}

Eigen::MatrixXd GaussianPolicy::map_forward(const Eigen::MatrixXd& contexts) const {
  const Layout& L = layout_;
  if (contexts.cols() != L.in) throw ShapeError("context dimension mismatch");
  if (cfg_.mean_map == GaussianPolicyConfig::MeanMap::linear) {
    Eigen::MatrixXd out = contexts * view(params_, L.w1, L.in, L.out);
    out.rowwise() += view(params_, L.b1, 1, L.out).row(0);
    return out;
  }
  Eigen::MatrixXd h = contexts * view(params_, L.w1, L.in, L.hidden);
  h.rowwise() += view(params_, L.b1, 1, L.hidden).row(0);
  h = h.array().tanh();
  Eigen::MatrixXd out = h * view(params_, L.w2, L.hidden, L.out);
  out.rowwise() += view(params_, L.b2, 1, L.out).row(0);
  return out;
}

Eigen::MatrixXd GaussianPolicy::mean_batch(const Eigen::MatrixXd& contexts) const {
  return map_forward(contexts).leftCols(cfg_.action_dim);
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> GaussianPolicy::mean_sigma(
    const Eigen::VectorXd& context) const {
  Eigen::MatrixXd out = map_forward(context.transpose());
  const int da = cfg_.action_dim;
  Eigen::VectorXd mean = out.row(0).head(da);
  Eigen::VectorXd log_std;
  switch (cfg_.std_mode) {
    case GaussianPolicyConfig::StdMode::fixed:
      log_std = cfg_.fixed_log_std;
      break;
    case GaussianPolicyConfig::StdMode::constant:
      log_std = params_.segment(layout_.log_std, da);
      break;
    case GaussianPolicyConfig::StdMode::head:
      log_std = out.row(0).segment(da, da);
      break;
  }
  Eigen::VectorXd sigma = log_std.array().exp().max(cfg_.sigma_floor);
  return {std::move(mean), std::move(sigma)};
}

double GaussianPolicy::log_prob_context(const Eigen::VectorXd& context,
                                        const Eigen::VectorXd& action) const {
  if (action.size() != cfg_.action_dim) throw ShapeError("action dimension mismatch");
  auto [mean, sigma] = mean_sigma(context);
  return diag_gaussian_log_prob(action, mean, sigma);
}

Eigen::VectorXd GaussianPolicy::sample(const Eigen::VectorXd& context, Rng& rng) const {
  auto [mean, sigma] = mean_sigma(context);
  std::normal_distribution<double> dist(0.0, 1.0);
  Eigen::VectorXd a(cfg_.action_dim);
  for (int j = 0; j < cfg_.action_dim; ++j) a[j] = mean[j] + sigma[j] * dist(rng);
  return a;
}

std::vector<double> GaussianPolicy::log_probs(const Trajectory& traj) const {
  std::vector<double> out(static_cast<std::size_t>(traj.length()));
  for (int t = 0; t < traj.length(); ++t)
    out[static_cast<std::size_t>(t)] =
        log_prob_context(context_vector(traj, t), traj.actions[static_cast<std::size_t>(t)]);
  return out;
}

std::vector<GaussianStep> GaussianPolicy::gaussian_steps(const Trajectory& traj) const {
  std::vector<GaussianStep> out(static_cast<std::size_t>(traj.length()));
  for (int t = 0; t < traj.length(); ++t) {
    GaussianStep& g = out[static_cast<std::size_t>(t)];
    auto [mean, sigma] = mean_sigma(context_vector(traj, t));
    g.mean = std::move(mean);
    g.sigma = std::move(sigma);
    g.log_prob = diag_gaussian_log_prob(traj.actions[static_cast<std::size_t>(t)], g.mean, g.sigma);
  }
  return out;
}

std::pair<double, Eigen::VectorXd> GaussianPolicy::weighted_nll_grad(
    const Eigen::MatrixXd& contexts, const Eigen::MatrixXd& actions,
    const Eigen::VectorXd& weights) const {
  const Layout& L = layout_;
  const int da = cfg_.action_dim;
  if (contexts.rows() != actions.rows() || contexts.rows() != weights.size())
    throw ShapeError("contexts/actions/weights row mismatch");
  if (actions.cols() != da) throw ShapeError("action dimension mismatch");

  ad::Tape tape;
  struct LeafRef {
    ad::Var var;
    int offset, rows, cols;
  };
  std::vector<LeafRef> leaves;
  auto make_leaf = [&](int offset, int rows, int cols) {
    ad::Var v = tape.leaf(view(params_, offset, rows, cols));
    leaves.push_back({v, offset, rows, cols});
    return v;
  };

  ad::Var x = tape.constant(contexts);
  ad::Var net;
  if (cfg_.mean_map == GaussianPolicyConfig::MeanMap::linear) {
    ad::Var w1 = make_leaf(L.w1, L.in, L.out);
    ad::Var b1 = make_leaf(L.b1, 1, L.out);
    net = tape.add_rowvec(tape.matmul(x, w1), b1);
  } else {
    ad::Var w1 = make_leaf(L.w1, L.in, L.hidden);
    ad::Var b1 = make_leaf(L.b1, 1, L.hidden);
    ad::Var w2 = make_leaf(L.w2, L.hidden, L.out);
    ad::Var b2 = make_leaf(L.b2, 1, L.out);
    ad::Var h = tape.tanh(tape.add_rowvec(tape.matmul(x, w1), b1));
    net = tape.add_rowvec(tape.matmul(h, w2), b2);
  }

  ad::Var mu = (L.out == da) ? net : tape.cols(net, 0, da);
  ad::Var diff = tape.sub(tape.constant(actions), mu);
  ad::Var dsq = tape.square(diff);

  ad::Var nll;
  if (cfg_.std_mode == GaussianPolicyConfig::StdMode::head) {
    ad::Var ls = tape.cols(net, da, da);
    ad::Var sigma = tape.cwise_max(tape.exp(ls), cfg_.sigma_floor);
    ad::Var invsq = tape.square(tape.cwise_inverse(sigma));
    ad::Var quad = tape.sum(tape.mul_rows(tape.hadamard(dsq, invsq), weights));
    ad::Var logdet = tape.sum(tape.mul_rows(tape.log(sigma), weights));
    nll = tape.add(tape.scale(quad, 0.5), logdet);
  } else {
    ad::Var sigma;
    if (cfg_.std_mode == GaussianPolicyConfig::StdMode::constant) {
      ad::Var ls = make_leaf(L.log_std, 1, da);
      sigma = tape.cwise_max(tape.exp(ls), cfg_.sigma_floor);
    } else {
      Eigen::MatrixXd s = cfg_.fixed_log_std.transpose().array().exp().matrix();
      sigma = tape.constant(s.cwiseMax(cfg_.sigma_floor));
    }
    ad::Var invsq = tape.square(tape.cwise_inverse(sigma));
    ad::Var quad = tape.sum(tape.mul_rows(tape.mul_rowvec(dsq, invsq), weights));
    ad::Var logdet = tape.scale(tape.sum(tape.log(sigma)), weights.sum());
    nll = tape.add(tape.scale(quad, 0.5), logdet);
  }

  tape.backward(nll);

  Eigen::VectorXd grad = Eigen::VectorXd::Zero(params_.size());
  for (const LeafRef& leaf : leaves) {
    Eigen::MatrixXd g = tape.grad_or_zero(leaf.var);
    Eigen::Map<Eigen::MatrixXd>(grad.data() + leaf.offset, leaf.rows, leaf.cols) = g;
  }
  const double value = tape.value(nll)(0, 0) + 0.5 * kLogTwoPi * da * weights.sum();
  return {value, std::move(grad)};
}

double GaussianPolicy::weighted_nll(const Eigen::MatrixXd& contexts,
                                    const Eigen::MatrixXd& actions,
                                    const Eigen::VectorXd& weights) const {
  if (contexts.rows() != actions.rows() || contexts.rows() != weights.size())
    throw ShapeError("contexts/actions/weights row mismatch");
  Eigen::MatrixXd out = map_forward(contexts);
  const int da = cfg_.action_dim;
  double nll = 0.0;
  Eigen::VectorXd sigma_const;
  if (cfg_.std_mode == GaussianPolicyConfig::StdMode::constant)
    sigma_const = params_.segment(layout_.log_std, da).array().exp().max(cfg_.sigma_floor);
  else if (cfg_.std_mode == GaussianPolicyConfig::StdMode::fixed)
    sigma_const = cfg_.fixed_log_std.array().exp().max(cfg_.sigma_floor);
  for (Eigen::Index r = 0; r < contexts.rows(); ++r) {
    Eigen::VectorXd mean = out.row(r).head(da);
    Eigen::VectorXd sigma =
        cfg_.std_mode == GaussianPolicyConfig::StdMode::head
            ? Eigen::VectorXd(out.row(r).segment(da, da).array().exp().max(cfg_.sigma_floor))
            : sigma_const;
    nll -= weights[r] * diag_gaussian_log_prob(actions.row(r), mean, sigma);
  }
  return nll;
}

Eigen::VectorXd GaussianPolicy::weighted_score(const Trajectory& traj,
                                               std::span<const double> coeff) const {
  if (static_cast<int>(coeff.size()) != traj.length())
    throw ShapeError("coefficient count must equal trajectory length");
  const int T = traj.length();
  Eigen::MatrixXd contexts(T, context_dim());
  Eigen::MatrixXd actions(T, cfg_.action_dim);
  Eigen::VectorXd w(T);
  for (int t = 0; t < T; ++t) {
    contexts.row(t) = context_vector(traj, t);
    actions.row(t) = traj.actions[static_cast<std::size_t>(t)];
    w[t] = coeff[static_cast<std::size_t>(t)];
  }
  // score = -d(NLL)/dparams with per-row weights equal to the coefficients
  auto [value, grad] = weighted_nll_grad(contexts, actions, w);
  (void)value;
  return -grad;
}

GaussianPolicy GaussianPolicy::fit_mle_closed_form(const TrajectoryDataset& ds,
                                                   int context_window, double sigma_floor) {
  ds.validate();
  GaussianPolicyConfig cfg;
  cfg.state_dim = ds.state_dim;
  cfg.action_dim = ds.action_dim;
  cfg.context_window = context_window;
  cfg.mean_map = GaussianPolicyConfig::MeanMap::linear;
  cfg.std_mode = GaussianPolicyConfig::StdMode::constant;
  cfg.sigma_floor = sigma_floor;
  GaussianPolicy policy(cfg);

  long total = 0;
  for (const Trajectory& traj : ds.trajectories) total += traj.length();
  const int in = policy.context_dim();
  Eigen::MatrixXd design(total, in + 1);  // context features plus intercept
  Eigen::MatrixXd targets(total, ds.action_dim);
  long row = 0;
  for (const Trajectory& traj : ds.trajectories) {
    for (int t = 0; t < traj.length(); ++t, ++row) {
      design.row(row).head(in) = policy.context_vector(traj, t);
      design(row, in) = 1.0;
      targets.row(row) = traj.actions[static_cast<std::size_t>(t)];
    }
  }
  Eigen::MatrixXd coef =
      design.bdcSvd(Eigen::ComputeThinU | Eigen::ComputeThinV).solve(targets);
  Eigen::MatrixXd residual = targets - design * coef;
  // MLE variance normalizes by N, not N-1.
  Eigen::VectorXd var = residual.array().square().colwise().mean();

  Eigen::VectorXd p = Eigen::VectorXd::Zero(policy.param_dim());
  const Layout& L = policy.layout_;
  Eigen::Map<Eigen::MatrixXd>(p.data() + L.w1, L.in, L.out) = coef.topRows(in);
  Eigen::Map<Eigen::MatrixXd>(p.data() + L.b1, 1, L.out) = coef.bottomRows(1);
  for (int j = 0; j < ds.action_dim; ++j)
    p[L.log_std + j] = std::log(std::max(std::sqrt(var[j]), sigma_floor));
  policy.set_params(p);
  return policy;
}

// ---------------------------------------------------------------------------
// CategoricalPolicy

CategoricalPolicy::CategoricalPolicy(int num_states, int num_actions)
    : logits_(Eigen::MatrixXd::Zero(num_states, num_actions)) {
  if (num_states < 1 || num_actions < 1)
    throw InvalidInput("categorical policy needs at least one state and action");
}

CategoricalPolicy::CategoricalPolicy(Eigen::MatrixXd logits) : logits_(std::move(logits)) {
  if (logits_.rows() < 1 || logits_.cols() < 1)
    throw InvalidInput("categorical policy needs at least one state and action");
  if (!logits_.allFinite()) throw InvalidInput("non-finite logits");
}

Eigen::VectorXd CategoricalPolicy::params() const {
  return Eigen::Map<const Eigen::VectorXd>(logits_.data(), logits_.size());
}

void CategoricalPolicy::set_params(const Eigen::VectorXd& p) {
  if (p.size() != logits_.size()) throw ShapeError("parameter vector size mismatch");
  logits_ = Eigen::Map<const Eigen::MatrixXd>(p.data(), logits_.rows(), logits_.cols());
}

double CategoricalPolicy::log_prob_sa(int state, int action) const {
  if (state < 0 || state >= num_states()) throw IndexError("state index out of range");
  if (action < 0 || action >= num_actions()) throw IndexError("action index out of range");
  const Eigen::RowVectorXd row = logits_.row(state);
  const double m = row.maxCoeff();
  const double lse = m + std::log((row.array() - m).exp().sum());
  return row[action] - lse;
}

Eigen::VectorXd CategoricalPolicy::probs(int state) const {
  if (state < 0 || state >= num_states()) throw IndexError("state index out of range");
  const Eigen::RowVectorXd row = logits_.row(state);
  const double m = row.maxCoeff();
  Eigen::ArrayXd e = (row.transpose().array() - m).exp();
  return (e / e.sum()).matrix();
}

int CategoricalPolicy::sample(int state, Rng& rng) const {
  Eigen::VectorXd p = probs(state);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double u = unif(rng);
  double acc = 0.0;
  for (int a = 0; a + 1 < num_actions(); ++a) {
    acc += p[a];
    if (u < acc) return a;
  }
  return num_actions() - 1;
}

namespace {
int index_of(const Eigen::VectorXd& v, const char* what, int limit) {
  if (v.size() != 1) throw ShapeError(std::string("categorical ") + what + " must be 1-dim");
  const double x = v[0];
  const int idx = static_cast<int>(std::lround(x));
  if (std::abs(x - idx) > 1e-9 || idx < 0 || idx >= limit)
    throw IndexError(std::string("categorical ") + what + " index out of range");
  return idx;
}
}  // namespace

std::vector<double> CategoricalPolicy::log_probs(const Trajectory& traj) const {
  std::vector<double> out(static_cast<std::size_t>(traj.length()));
  for (int t = 0; t < traj.length(); ++t) {
    const int s = index_of(traj.states[static_cast<std::size_t>(t)], "state", num_states());
    const int a = index_of(traj.actions[static_cast<std::size_t>(t)], "action", num_actions());
    out[static_cast<std::size_t>(t)] = log_prob_sa(s, a);
  }
  return out;
}

Eigen::VectorXd CategoricalPolicy::weighted_score(const Trajectory& traj,
                                                  std::span<const double> coeff) const {
  if (static_cast<int>(coeff.size()) != traj.length())
    throw ShapeError("coefficient count must equal trajectory length");
  const int S = num_states();
  Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(S, num_actions());
  for (int t = 0; t < traj.length(); ++t) {
    const double c = coeff[static_cast<std::size_t>(t)];
    if (c == 0.0) continue;
    const int s = index_of(traj.states[static_cast<std::size_t>(t)], "state", S);
    const int a = index_of(traj.actions[static_cast<std::size_t>(t)], "action", num_actions());
    Eigen::VectorXd p = probs(s);
    grad.row(s) -= c * p.transpose();
    grad(s, a) += c;
  }
  return Eigen::Map<const Eigen::VectorXd>(grad.data(), grad.size());
}

// ---------------------------------------------------------------------------

double gaussian_entropy_sigma(const Eigen::VectorXd& sigma) {
  double h = 0.0;
  for (Eigen::Index j = 0; j < sigma.size(); ++j) {
    if (!(sigma[j] > 0.0)) throw InvalidInput("entropy needs positive sigma");
    h += 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e * sigma[j] * sigma[j]);
  }
  return h;
}

double gaussian_entropy(const GaussianPolicy& policy,
                        const std::vector<Eigen::VectorXd>& contexts) {
  if (contexts.empty()) {
    if (policy.config().std_mode == GaussianPolicyConfig::StdMode::head)
      throw InvalidInput("state-dependent std needs contexts for entropy");
    Eigen::VectorXd zero = Eigen::VectorXd::Zero(policy.context_dim());
    return gaussian_entropy_sigma(policy.mean_sigma(zero).second);
  }
  double total = 0.0;
  for (const Eigen::VectorXd& ctx : contexts)
    total += gaussian_entropy_sigma(policy.mean_sigma(ctx).second);
  return total / static_cast<double>(contexts.size());
}

BehaviorFitResult fit_behavior_mle(const TrajectoryDataset& ds, int context_window,
                                   long steps, std::uint64_t seed,
                                   const BehaviorFitOptions& opts) {
  ds.validate();
  if (context_window < 1) throw InvalidInput("context window must be >= 1");
  if (steps < 1) throw InvalidInput("steps must be >= 1");

  GaussianPolicyConfig cfg;
  cfg.state_dim = ds.state_dim;
  cfg.action_dim = ds.action_dim;
  cfg.context_window = context_window;
  cfg.mean_map = opts.mean_map;
  cfg.hidden_dim = opts.hidden_dim;
  cfg.std_mode = opts.std_mode;
  cfg.sigma_floor = opts.sigma_floor;
  cfg.init_seed = seed;
  GaussianPolicy policy(cfg);

  long total = 0;
  for (const Trajectory& traj : ds.trajectories) total += traj.length();
  Eigen::MatrixXd contexts(total, policy.context_dim());
  Eigen::MatrixXd actions(total, ds.action_dim);
  long row = 0;
  for (const Trajectory& traj : ds.trajectories) {
    for (int t = 0; t < traj.length(); ++t, ++row) {
      contexts.row(row) = policy.context_vector(traj, t);
      actions.row(row) = traj.actions[static_cast<std::size_t>(t)];
    }
  }
  const Eigen::VectorXd w = Eigen::VectorXd::Constant(total, 1.0 / static_cast<double>(total));

  BehaviorFitResult result{std::move(policy), {}, 0};
  GaussianPolicy& pol = result.policy;

  Eigen::VectorXd theta = pol.params();
  auto nll_at = [&](const Eigen::VectorXd& p) {
    pol.set_params(p);
    return pol.weighted_nll(contexts, actions, w);
  };

  // Exact minimizer of the NLL over log-std given the current mean map; a
  // block-coordinate step that never increases the objective and sidesteps
  // the 1/sigma^2 curvature blow-up near the floor.
  auto sigma_m_step = [&](Eigen::VectorXd& p) {
    if (cfg.std_mode != GaussianPolicyConfig::StdMode::constant) return;
    pol.set_params(p);
    const Eigen::MatrixXd mu = pol.mean_batch(contexts);
    const Eigen::MatrixXd sq = (actions - mu).array().square();
    const Eigen::VectorXd mse = (sq.transpose() * w) / w.sum();
    for (int j = 0; j < ds.action_dim; ++j) {
      const double sigma = std::max(std::sqrt(mse[j]), cfg.sigma_floor);
      p[p.size() - ds.action_dim + j] = std::log(sigma);
    }
    pol.set_params(p);
  };

  double nll = nll_at(theta);
  if (!std::isfinite(nll))
    throw TrainingFailure("non-finite initial likelihood",
                          std::vector<double>(theta.data(), theta.data() + theta.size()));
  result.mean_log_likelihood.push_back(-nll);

  double step_size = 1.0;
  for (long it = 0; it < steps; ++it) {
    sigma_m_step(theta);
    pol.set_params(theta);
    auto [value, grad] = pol.weighted_nll_grad(contexts, actions, w);
    if (!grad.allFinite() || !std::isfinite(value))
      throw TrainingFailure("divergent behavior fit (non-finite gradient)",
                            std::vector<double>(theta.data(), theta.data() + theta.size()));
    nll = value;
    const double gnorm2 = grad.squaredNorm();
    if (grad.lpNorm<Eigen::Infinity>() <= opts.grad_tol) break;

    // Armijo backtracking on the mean NLL; accepted steps never decrease the
    // recorded likelihood.
    double alpha = std::min(step_size * 2.0, 1e3);
    bool accepted = false;
    for (int half = 0; half < 60; ++half) {
      Eigen::VectorXd cand = theta - alpha * grad;
      const double cand_nll = nll_at(cand);
      if (std::isfinite(cand_nll) && cand_nll <= nll - 1e-4 * alpha * gnorm2) {
        theta = std::move(cand);
        nll = cand_nll;
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) break;  // no admissible step; stationary for our purposes
    step_size = alpha;
    result.mean_log_likelihood.push_back(-nll);
    ++result.iterations;
  }
  pol.set_params(theta);
  return result;
}

double joint_objective(const Policy& policy, const TrajectoryDataset& ds, double beta) {
  if (beta < 0.0) throw InvalidInput("beta must be non-negative");
  ds.validate();
  double ll = 0.0;
  double entropy = 0.0;
  long count = 0;
  for (const Trajectory& traj : ds.trajectories) {
    const std::vector<double> lps = policy.log_probs(traj);
    for (double lp : lps) ll += lp;
    count += traj.length();
    if (beta != 0.0) {
      const std::vector<GaussianStep> steps = policy.gaussian_steps(traj);
      if (steps.empty())
        throw InvalidInput("entropy term requires a Gaussian policy");
      for (const GaussianStep& g : steps) entropy += gaussian_entropy_sigma(g.sigma);
    }
  }
  const double L = -ll / static_cast<double>(count);
  const double H = beta != 0.0 ? entropy / static_cast<double>(count) : 0.0;
  return L - beta * H;
}

}  // namespace dpe
