#include "dpe/theory.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "dpe/csv.hpp"
#include "dpe/estimators.hpp"

namespace dpe {

double finite_difference_check(const std::function<double(const Eigen::VectorXd&)>& fn,
                               const Eigen::VectorXd& reported_gradient,
                               const Eigen::VectorXd& point, double step) {
  if (reported_gradient.size() != point.size())
    throw ShapeError("gradient and point dimensions differ");
  if (!(step > 0.0)) throw InvalidInput("step must be positive");
  double worst = 0.0;
  Eigen::VectorXd x = point;
  for (Eigen::Index i = 0; i < point.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + step;
    const double hi = fn(x);
    x[i] = keep - step;
    const double lo = fn(x);
    x[i] = keep;
    const double fd = (hi - lo) / (2.0 * step);
    const double denom = std::max({1.0, std::abs(fd), std::abs(reported_gradient[i])});
    worst = std::max(worst, std::abs(fd - reported_gradient[i]) / denom);
  }
  return worst;
}

void ScoreSet::finalize() {
  const auto m = static_cast<double>(mu.size());
  if (mu.empty() || s_eta.size() != mu.size() || s_xi.size() != mu.size())
    throw ShapeError("score set needs equally many mu, s_eta, s_xi entries");
  const Eigen::Index de = s_eta.front().size();
  const Eigen::Index dx = s_xi.front().size();
  fisher_eta = Eigen::MatrixXd::Zero(de, de);
  fisher_xi = Eigen::MatrixXd::Zero(dx, dx);
  for (const auto& s : s_eta) fisher_eta.noalias() += s * s.transpose();
  for (const auto& s : s_xi) fisher_xi.noalias() += s * s.transpose();
  fisher_eta /= m;
  fisher_xi /= m;
}

Eigen::MatrixXd fisher_eta(const TrajectoryDataset& ds, const Policy& pi_b) {
  ds.validate();
  const int d = pi_b.param_dim();
  Eigen::MatrixXd fisher = Eigen::MatrixXd::Zero(d, d);
  for (const Trajectory& traj : ds.trajectories) {
    const std::vector<double> ones(static_cast<std::size_t>(traj.length()), 1.0);
    const Eigen::VectorXd score = pi_b.weighted_score(traj, ones);
    if (!score.allFinite()) throw NumericError("non-finite trajectory score");
    fisher.noalias() += score * score.transpose();
  }
  return fisher / static_cast<double>(ds.size());
}

Eigen::MatrixXd fisher_eta_hessian_gaussian(const TrajectoryDataset& ds,
                                            const GaussianPolicy& pi_b) {
  ds.validate();
  const GaussianPolicyConfig& cfg = pi_b.config();
  if (cfg.mean_map != GaussianPolicyConfig::MeanMap::linear ||
      cfg.std_mode != GaussianPolicyConfig::StdMode::fixed)
    throw InvalidInput("analytic Hessian requires a linear-mean fixed-sigma Gaussian policy");
  const int in = pi_b.context_dim();
  const int da = cfg.action_dim;
  const int d = pi_b.param_dim();  // in*da weights + da biases
  Eigen::VectorXd sigma = cfg.fixed_log_std.array().exp().max(cfg.sigma_floor);

  Eigen::MatrixXd fisher = Eigen::MatrixXd::Zero(d, d);
  for (const Trajectory& traj : ds.trajectories) {
    for (int t = 0; t < traj.length(); ++t) {
      const Eigen::VectorXd ctx = pi_b.context_vector(traj, t);
      Eigen::VectorXd design(in + 1);
      design.head(in) = ctx;
      design[in] = 1.0;
      // parameter index of W(i, j) is i + j*in; bias j sits at in*da + j
      for (int j = 0; j < da; ++j) {
        const double inv_var = 1.0 / (sigma[j] * sigma[j]);
        for (int p = 0; p <= in; ++p) {
          const int gp = p < in ? p + j * in : in * da + j;
          for (int q = 0; q <= in; ++q) {
            const int gq = q < in ? q + j * in : in * da + j;
            fisher(gp, gq) += design[p] * design[q] * inv_var;
          }
        }
      }
    }
  }
  return fisher / static_cast<double>(ds.size());
}

Eigen::MatrixXd fisher_xi(const TrajectoryDataset& ds, const BaselineModel& baseline) {
  ds.validate();
  if (baseline.features.dim == 0) throw InvalidInput("zero-dimensional baseline has no Fisher");
  Eigen::MatrixXd fisher = Eigen::MatrixXd::Zero(baseline.features.dim, baseline.features.dim);
  for (const Trajectory& traj : ds.trajectories) {
    const Eigen::VectorXd phi =
        baseline.feature_vector(traj.states.front(), 0, ds.horizon);
    fisher.noalias() += phi * phi.transpose();
  }
  return fisher / static_cast<double>(ds.size());
}

ProjectionResult projection_terms(const ScoreSet& scores) {
  if (scores.fisher_eta.size() == 0 || scores.fisher_xi.size() == 0)
    throw InvalidInput("finalize() the score set before projecting");
  const auto m = static_cast<double>(scores.mu.size());
  const Eigen::Index p = scores.mu.front().size();
  const Eigen::Index de = scores.s_eta.front().size();
  const Eigen::Index dx = scores.s_xi.front().size();

  Eigen::MatrixXd c_eta = Eigen::MatrixXd::Zero(p, de);
  Eigen::MatrixXd c_xi = Eigen::MatrixXd::Zero(p, dx);
  for (std::size_t i = 0; i < scores.mu.size(); ++i) {
    c_eta.noalias() += scores.mu[i] * scores.s_eta[i].transpose();
    c_xi.noalias() += scores.mu[i] * scores.s_xi[i].transpose();
  }
  c_eta /= m;
  c_xi /= m;

  ProjectionResult result;
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod_eta(scores.fisher_eta);
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod_xi(scores.fisher_xi);
  result.pseudo_inverse_used = cod_eta.rank() < de || cod_xi.rank() < dx;
  const Eigen::MatrixXd a_eta = c_eta * cod_eta.pseudoInverse();
  const Eigen::MatrixXd a_xi = c_xi * cod_xi.pseudoInverse();

  result.v_a.reserve(scores.mu.size());
  result.v_b.reserve(scores.mu.size());
  for (std::size_t i = 0; i < scores.mu.size(); ++i) {
    result.v_a.push_back(a_eta * scores.s_eta[i]);
    result.v_b.push_back(a_xi * scores.s_xi[i]);
  }
  return result;
}

double trace_variance(const std::vector<Eigen::VectorXd>& xs) {
  if (xs.size() < 2) return 0.0;
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(xs.front().size());
  for (const auto& x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double trace = 0.0;
  for (const auto& x : xs) trace += (x - mean).squaredNorm();
  return trace / (static_cast<double>(xs.size()) - 1.0);
}

namespace {
constexpr double kLogTwoPi = 1.8378770664093453;

double gaussian_logpdf(double x, double mean, double sigma) {
  const double z = (x - mean) / sigma;
  return -std::log(sigma) - 0.5 * kLogTwoPi - 0.5 * z * z;
}
}  // namespace

ScoreSet sample_location_family(const LocationFamilyConfig& cfg, long n, std::uint64_t seed) {
  if (n < 2) throw InvalidInput("family sample needs n >= 2");
  Rng rng = make_rng(seed, 0xfa31);
  std::normal_distribution<double> std_normal(0.0, 1.0);

  // population MMSE baseline coefficients for E[G | x]
  const double xi0_intercept = cfg.c0 + cfg.c2 * cfg.eta0[0];
  const double xi0_slope = cfg.c1 + cfg.c2 * cfg.eta0[1];

  ScoreSet set;
  set.mu.reserve(static_cast<std::size_t>(n));
  set.s_eta.reserve(static_cast<std::size_t>(n));
  set.s_xi.reserve(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) {
    const double x = std_normal(rng);
    const double mean_b = cfg.eta0[0] + cfg.eta0[1] * x;
    const double a = mean_b + cfg.sigma_b * std_normal(rng);
    const double G = cfg.c0 + cfg.c1 * x + cfg.c2 * a + cfg.noise * std_normal(rng);

    const double mean_t = cfg.psi0[0] + cfg.psi0[1] * x;
    const double nu =
        std::exp(gaussian_logpdf(a, mean_t, cfg.sigma_t) - gaussian_logpdf(a, mean_b, cfg.sigma_b));

    const double b = cfg.constant_baseline_only ? xi0_intercept
                                                : xi0_intercept + xi0_slope * x;
    const double centered = G - b;

    Eigen::VectorXd s_eta(2);
    s_eta << (a - mean_b) / (cfg.sigma_b * cfg.sigma_b),
        (a - mean_b) / (cfg.sigma_b * cfg.sigma_b) * x;

    Eigen::VectorXd s_xi;
    if (cfg.constant_baseline_only) {
      s_xi = Eigen::VectorXd::Ones(1);
    } else {
      s_xi.resize(2);
      s_xi << 1.0, x;
    }

    Eigen::VectorXd mu;
    if (cfg.gradient_form_mu) {
      // score of the evaluation policy's (intercept, slope) mean parameters
      mu.resize(2);
      const double resid_t = (a - mean_t) / (cfg.sigma_t * cfg.sigma_t);
      mu << nu * centered * resid_t, nu * centered * resid_t * x;
    } else {
      mu.resize(1);
      mu << nu * centered;
    }
    set.mu.push_back(std::move(mu));
    set.s_eta.push_back(std::move(s_eta));
    set.s_xi.push_back(std::move(s_xi));
  }
  set.finalize();
  return set;
}

DecompositionReport variance_decomposition_check(const LocationFamilyConfig& cfg, long n,
                                                 std::uint64_t seed) {
  ScoreSet set = sample_location_family(cfg, n, seed);
  const ProjectionResult proj = projection_terms(set);

  std::vector<Eigen::VectorXd> residual(set.mu.size());
  for (std::size_t i = 0; i < set.mu.size(); ++i)
    residual[i] = set.mu[i] - proj.v_a[i] - proj.v_b[i];

  DecompositionReport report;
  report.var_mu = trace_variance(set.mu);
  report.var_va = trace_variance(proj.v_a);
  report.var_vb = trace_variance(proj.v_b);
  report.var_residual = trace_variance(residual);
  if (report.var_mu <= 0.0) throw ComputeError("degenerate family: var(mu) is zero");
  report.relative_gap =
      std::abs(report.var_mu - report.var_va - report.var_vb - report.var_residual) /
      report.var_mu;
  return report;
}

void write_decomposition_csv(
    const std::vector<std::pair<std::uint64_t, DecompositionReport>>& rows,
    const std::filesystem::path& path) {
  CsvWriter csv(path, {"seed", "var_mu", "var_va", "var_vb", "var_residual", "relative_gap"});
  for (const auto& [seed, r] : rows)
    csv.row({std::to_string(seed), format_double(r.var_mu), format_double(r.var_va),
             format_double(r.var_vb), format_double(r.var_residual),
             format_double(r.relative_gap)});
}

// ---------------------------------------------------------------------------
// Gaussian bandit instance and the variance study

TrajectoryDataset sample_gaussian_bandit(const GaussianBanditConfig& cfg, int m,
                                         std::uint64_t seed) {
  if (m < 1) throw InvalidInput("dataset needs m >= 1 trajectories");
  Rng rng = make_rng(seed, 0xba4d);
  std::normal_distribution<double> std_normal(0.0, 1.0);
  TrajectoryDataset ds;
  ds.state_dim = 1;
  ds.action_dim = 1;
  ds.horizon = 0;
  ds.discount = 1.0;
  ds.behavior_descriptor = "gaussian bandit";
  for (int i = 0; i < m; ++i) {
    const double x = std_normal(rng);
    const double a = cfg.w_b * x + cfg.c_b + cfg.sigma_b * std_normal(rng);
    const double r =
        cfg.r0 + cfg.r_x * x + cfg.r_a * a + cfg.r_noise * std_normal(rng);
    Trajectory traj;
    traj.states.push_back(Eigen::VectorXd::Constant(1, x));
    traj.actions.push_back(Eigen::VectorXd::Constant(1, a));
    traj.rewards.push_back(r);
    ds.trajectories.push_back(std::move(traj));
  }
  return ds;
}

namespace {
GaussianPolicy fixed_sigma_policy(double w, double c, double sigma) {
  GaussianPolicyConfig cfg;
  cfg.state_dim = 1;
  cfg.action_dim = 1;
  cfg.std_mode = GaussianPolicyConfig::StdMode::fixed;
  cfg.fixed_log_std = Eigen::VectorXd::Constant(1, std::log(sigma));
  GaussianPolicy pol(cfg);
  Eigen::VectorXd p(2);
  p << w, c;
  pol.set_params(p);
  return pol;
}
}  // namespace

GaussianPolicy bandit_behavior_policy(const GaussianBanditConfig& cfg) {
  return fixed_sigma_policy(cfg.w_b, cfg.c_b, cfg.sigma_b);
}

GaussianPolicy bandit_evaluation_policy(const GaussianBanditConfig& cfg) {
  return fixed_sigma_policy(cfg.w_e, cfg.c_e, cfg.sigma_e);
}

double bandit_return_feature_correlation(const GaussianBanditConfig& cfg, long n,
                                         std::uint64_t seed) {
  const TrajectoryDataset ds = sample_gaussian_bandit(cfg, static_cast<int>(n), seed);
  // R^2 of q on [1, x]
  Eigen::MatrixXd design(n, 2);
  Eigen::VectorXd target(n);
  for (long i = 0; i < n; ++i) {
    design(i, 0) = 1.0;
    design(i, 1) = ds.trajectories[static_cast<std::size_t>(i)].states[0][0];
    target[i] = ds.trajectories[static_cast<std::size_t>(i)].rewards[0];
  }
  const Eigen::VectorXd coef =
      design.bdcSvd(Eigen::ComputeThinU | Eigen::ComputeThinV).solve(target);
  const Eigen::VectorXd resid = target - design * coef;
  const double mean = target.mean();
  const double total = (target.array() - mean).square().sum();
  const double r2 = 1.0 - resid.squaredNorm() / total;
  return std::sqrt(std::max(0.0, r2));
}

VarianceStudyResult variance_study(const VarianceStudyConfig& cfg) {
  if (cfg.replicates < 2) throw InvalidInput("study needs at least two replicates");
  if (!(cfg.ci_level > 0.0 && cfg.ci_level < 1.0)) throw InvalidInput("bad ci level");

  const GaussianPolicy pi_b = bandit_behavior_policy(cfg.instance);
  const GaussianPolicy pi_e = bandit_evaluation_policy(cfg.instance);
  FeatureMap features = intercept_state_features(1);

  VarianceStudyResult result;
  result.z_ois.resize(static_cast<std::size_t>(cfg.replicates));
  result.z_dpe.resize(static_cast<std::size_t>(cfg.replicates));
  result.replicate_status.assign(static_cast<std::size_t>(cfg.replicates), "ok");

  WeightConfig pdf_weights;  // pdf mode
  for (long i = 0; i < cfg.replicates; ++i) {
    try {
      const TrajectoryDataset ds =
          sample_gaussian_bandit(cfg.instance, cfg.dataset_size,
                                 cfg.seed * 1315423911ull + static_cast<std::uint64_t>(i));
      const GradientEstimate ois =
          ois_gradient(ds, pi_e, pi_b, GradientForm::episode);
      result.z_ois[static_cast<std::size_t>(i)] = ois.gradient;

      const BaselineModel baseline =
          cfg.fit_baseline ? fit_baseline(ds, features)
                           : fit_baseline(ds, zero_features());
      if (cfg.fit_behavior) {
        const GaussianPolicy fitted = GaussianPolicy::fit_mle_closed_form(ds, 1);
        const GradientEstimate dpe =
            dpe_gradient(ds, pi_e, fitted, baseline, GradientForm::episode, pdf_weights);
        result.z_dpe[static_cast<std::size_t>(i)] = dpe.gradient;
      } else {
        const GradientEstimate dpe =
            dpe_gradient(ds, pi_e, pi_b, baseline, GradientForm::episode, pdf_weights);
        result.z_dpe[static_cast<std::size_t>(i)] = dpe.gradient;
      }
    } catch (const std::exception& e) {
      result.replicate_status[static_cast<std::size_t>(i)] = e.what();
      ++result.failures;
    }
  }

  std::vector<Eigen::VectorXd> ok_ois, ok_dpe;
  for (long i = 0; i < cfg.replicates; ++i) {
    if (result.replicate_status[static_cast<std::size_t>(i)] == "ok") {
      ok_ois.push_back(result.z_ois[static_cast<std::size_t>(i)]);
      ok_dpe.push_back(result.z_dpe[static_cast<std::size_t>(i)]);
    }
  }
  if (ok_ois.size() < 2) throw ComputeError("too few successful replicates");

  const Eigen::Index dim = ok_ois.front().size();
  auto coord_variance = [&](const std::vector<Eigen::VectorXd>& xs) {
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(dim);
    for (const auto& x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    Eigen::VectorXd var = Eigen::VectorXd::Zero(dim);
    for (const auto& x : xs) var += (x - mean).array().square().matrix();
    return Eigen::VectorXd(var / (static_cast<double>(xs.size()) - 1.0));
  };
  result.var_ois_coord = coord_variance(ok_ois);
  result.var_dpe_coord = coord_variance(ok_dpe);
  result.ratio_coord = result.var_dpe_coord.cwiseQuotient(result.var_ois_coord);
  result.var_ois_trace = trace_variance(ok_ois);
  result.var_dpe_trace = trace_variance(ok_dpe);
  result.ratio = result.var_dpe_trace / result.var_ois_trace;

  // percentile bootstrap over replicates for the trace-variance ratio
  const auto n_ok = ok_ois.size();
  Rng rng = make_rng(cfg.seed, 0xb007);
  std::uniform_int_distribution<std::size_t> pick(0, n_ok - 1);
  std::vector<double> ratios(static_cast<std::size_t>(cfg.bootstrap_resamples));
  std::vector<Eigen::VectorXd> res_ois(n_ok), res_dpe(n_ok);
  for (long b = 0; b < cfg.bootstrap_resamples; ++b) {
    for (std::size_t i = 0; i < n_ok; ++i) {
      const std::size_t j = pick(rng);
      res_ois[i] = ok_ois[j];
      res_dpe[i] = ok_dpe[j];
    }
    ratios[static_cast<std::size_t>(b)] =
        trace_variance(res_dpe) / trace_variance(res_ois);
  }
  std::sort(ratios.begin(), ratios.end());
  const double alpha = (1.0 - cfg.ci_level) / 2.0;
  const auto lo_idx = static_cast<std::size_t>(
      std::floor(alpha * (static_cast<double>(ratios.size()) - 1.0)));
  const auto hi_idx = static_cast<std::size_t>(
      std::ceil((1.0 - alpha) * (static_cast<double>(ratios.size()) - 1.0)));
  result.ratio_ci_lo = ratios[lo_idx];
  result.ratio_ci_hi = ratios[hi_idx];
  return result;
}

void write_variance_study_csv(const VarianceStudyResult& result,
                              const std::filesystem::path& path) {
  CsvWriter csv(path, {"row", "replicate", "status", "var_ois_trace", "var_dpe_trace", "ratio",
                       "ci_lo", "ci_hi"});
  for (std::size_t i = 0; i < result.replicate_status.size(); ++i) {
    const bool ok = result.replicate_status[i] == "ok";
    csv.row({"replicate", std::to_string(i), ok ? "ok" : result.replicate_status[i],
             ok ? format_double(result.z_ois[i].squaredNorm()) : "",
             ok ? format_double(result.z_dpe[i].squaredNorm()) : "", "", "", ""});
  }
  csv.row({"summary_trace", std::to_string(result.replicate_status.size()), "ok",
           format_double(result.var_ois_trace), format_double(result.var_dpe_trace),
           format_double(result.ratio), format_double(result.ratio_ci_lo),
           format_double(result.ratio_ci_hi)});
  for (Eigen::Index j = 0; j < result.var_ois_coord.size(); ++j) {
    csv.row({"summary_coord_" + std::to_string(j), std::to_string(j), "ok",
             format_double(result.var_ois_coord[j]), format_double(result.var_dpe_coord[j]),
             format_double(result.ratio_coord[j]), "", ""});
  }
}

}  // namespace dpe
