#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "dpe/estimators.hpp"
#include "dpe/rng.hpp"
#include "dpe/theory.hpp"

using namespace dpe;

namespace {

Eigen::VectorXd vec1(double x) {
  Eigen::VectorXd v(1);
  v << x;
  return v;
}

Trajectory one_step(double s, double a, double r) {
  Trajectory t;
  t.states.push_back(vec1(s));
  t.actions.push_back(vec1(a));
  t.rewards.push_back(r);
  return t;
}

}  // namespace

TEST_CASE("finite difference check") {
  SUBCASE("quadratic is matched to near machine precision") {
    Eigen::VectorXd x(4);
    x << 0.3, -1.2, 2.0, 0.01;
    auto f = [](const Eigen::VectorXd& v) { return 0.5 * v.squaredNorm(); };
    CHECK(finite_difference_check(f, x, x) <= 1e-8);
  }
  SUBCASE("gaussian log density in the mean") {
    const double a = 0.4;
    auto f = [&](const Eigen::VectorXd& mu) {
      const double z = a - mu[0];
      return -0.5 * std::log(2.0 * M_PI) - 0.5 * z * z;
    };
    Eigen::VectorXd mu = vec1(-0.3);
    Eigen::VectorXd grad = vec1(a - mu[0]);
    CHECK(finite_difference_check(f, grad, mu) <= 1e-5);
  }
  SUBCASE("a corrupted gradient is detected") {
    Eigen::VectorXd x(3);
    x << 0.5, -0.25, 1.5;
    auto f = [](const Eigen::VectorXd& v) { return 0.5 * v.squaredNorm(); };
    Eigen::VectorXd bad = x;
    bad[1] += 0.1;
    CHECK(finite_difference_check(f, bad, x) >= 0.01);
  }
}

TEST_CASE("fisher_eta outer-product estimator") {
  SUBCASE("gaussian location family approaches 1/sigma^2") {
    // context 0 kills the weight column; the bias is a pure location
    // parameter with Fisher information 1 at sigma = 1
    GaussianPolicyConfig cfg;
    cfg.state_dim = 1;
    cfg.action_dim = 1;
    cfg.std_mode = GaussianPolicyConfig::StdMode::fixed;
    cfg.fixed_log_std = vec1(0.0);
    GaussianPolicy pol(cfg);
    Eigen::VectorXd p(2);
    p << 0.0, 0.25;
    pol.set_params(p);

    Rng rng = make_rng(7);
    std::normal_distribution<double> dist(0.0, 1.0);
    TrajectoryDataset ds;
    ds.state_dim = 1;
    ds.action_dim = 1;
    ds.horizon = 0;
    const int m = 10000;
    for (int i = 0; i < m; ++i)
      ds.trajectories.push_back(one_step(0.0, 0.25 + dist(rng), 0.0));

    const Eigen::MatrixXd fisher = fisher_eta(ds, pol);
    CHECK(fisher(1, 1) == doctest::Approx(1.0).epsilon(0.05));
    CHECK((fisher - fisher.transpose()).norm() == 0.0);

    // duplicating every trajectory leaves the mean outer product unchanged
    TrajectoryDataset doubled = ds;
    doubled.trajectories.insert(doubled.trajectories.end(), ds.trajectories.begin(),
                                ds.trajectories.end());
    CHECK((fisher_eta(doubled, pol) - fisher).norm() == doctest::Approx(0.0).epsilon(1e-14));
  }
  SUBCASE("analytic Hessian form agrees with the outer-product form at the MLE") {
    Rng rng = make_rng(21);
    std::normal_distribution<double> dist(0.0, 1.0);
    TrajectoryDataset ds;
    ds.state_dim = 1;
    ds.action_dim = 1;
    ds.horizon = 0;
    const int m = 20000;
    const double sigma = 0.7;
    for (int i = 0; i < m; ++i) {
      const double x = dist(rng);
      ds.trajectories.push_back(one_step(x, 0.4 * x - 0.1 + sigma * dist(rng), 0.0));
    }
    GaussianPolicyConfig cfg;
    cfg.state_dim = 1;
    cfg.action_dim = 1;
    cfg.std_mode = GaussianPolicyConfig::StdMode::fixed;
    cfg.fixed_log_std = vec1(std::log(sigma));
    GaussianPolicy pol(cfg);
    Eigen::VectorXd p(2);
    p << 0.4, -0.1;
    pol.set_params(p);
    const Eigen::MatrixXd outer = fisher_eta(ds, pol);
    const Eigen::MatrixXd hessian = fisher_eta_hessian_gaussian(ds, pol);
    // equal in expectation at the true parameter; 1/sqrt(m) agreement here
    CHECK((outer - hessian).norm() / hessian.norm() < 0.05);
    // PSD up to the eigenvalue floor
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(outer);
    CHECK(eig.eigenvalues().minCoeff() >= -1e-10);
  }
}

TEST_CASE("fisher_xi feature second moments") {
  SUBCASE("constant feature gives the scalar 1") {
    TrajectoryDataset ds;
    ds.state_dim = 1;
    ds.action_dim = 1;
    ds.horizon = 0;
    for (int i = 0; i < 6; ++i) ds.trajectories.push_back(one_step(0.1 * i, 0.0, 0.0));
    BaselineModel b;
    b.features = constant_feature();
    b.xi = vec1(0.0);
    const Eigen::MatrixXd f = fisher_xi(ds, b);
    CHECK(f.rows() == 1);
    CHECK(f(0, 0) == doctest::Approx(1.0).epsilon(1e-14));
  }
  SUBCASE("scaling features by c scales the matrix by c^2") {
    TrajectoryDataset ds;
    ds.state_dim = 1;
    ds.action_dim = 1;
    ds.horizon = 0;
    Rng rng = make_rng(3);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (int i = 0; i < 50; ++i) ds.trajectories.push_back(one_step(dist(rng), 0.0, 0.0));

    const double c = 2.5;
    BaselineModel plain, scaled;
    plain.features = intercept_state_features(1);
    scaled.features = intercept_state_features(1);
    auto base_fn = plain.features.fn;
    scaled.features.fn = [base_fn, c](const Eigen::VectorXd& s, int t, int h) {
      return Eigen::VectorXd(c * base_fn(s, t, h));
    };
    const Eigen::MatrixXd f1 = fisher_xi(ds, plain);
    const Eigen::MatrixXd f2 = fisher_xi(ds, scaled);
    CHECK((f2 - c * c * f1).norm() <= 1e-12 * f2.norm());
  }
  SUBCASE("orthonormal design gives identity over m") {
    const int m = 4;
    TrajectoryDataset ds;
    ds.state_dim = 1;
    ds.action_dim = 1;
    ds.horizon = 0;
    for (int i = 0; i < m; ++i) ds.trajectories.push_back(one_step(i, 0.0, 0.0));
    BaselineModel b;
    b.features.dim = m;
    b.features.name = "onehot";
    b.features.fn = [m](const Eigen::VectorXd& s, int, int) {
      Eigen::VectorXd phi = Eigen::VectorXd::Zero(m);
      phi[static_cast<int>(std::lround(s[0]))] = 1.0;
      return phi;
    };
    const Eigen::MatrixXd f = fisher_xi(ds, b);
    CHECK((f - Eigen::MatrixXd::Identity(m, m) / m).norm() == doctest::Approx(0.0));
  }
}

TEST_CASE("projection terms") {
  SUBCASE("zero cross moment gives zero projections") {
    ScoreSet set;
    for (int i = 0; i < 4; ++i) {
      set.mu.push_back(vec1(1.0));  // constant
      set.s_eta.push_back(vec1(i % 2 == 0 ? 1.0 : -1.0));
      set.s_xi.push_back(vec1(i < 2 ? 1.0 : -1.0));
    }
    set.finalize();
    const ProjectionResult proj = projection_terms(set);
    for (const auto& v : proj.v_a) CHECK(v.norm() == doctest::Approx(0.0));
    for (const auto& v : proj.v_b) CHECK(v.norm() == doctest::Approx(0.0));
  }
  SUBCASE("mu inside the score span projects onto itself") {
    Rng rng = make_rng(5);
    std::normal_distribution<double> dist(0.0, 1.0);
    ScoreSet set;
    for (int i = 0; i < 50; ++i) {
      Eigen::VectorXd s(2);
      s << dist(rng), dist(rng);
      set.s_eta.push_back(s);
      set.mu.push_back(s);                // mu_i = S_eta_i exactly
      set.s_xi.push_back(vec1(dist(rng)));
    }
    set.finalize();
    const ProjectionResult proj = projection_terms(set);
    for (int i = 0; i < 50; ++i)
      CHECK((proj.v_a[i] - set.mu[i]).lpNorm<Eigen::Infinity>() < 1e-10);
  }
  SUBCASE("projection equals an uncentered least-squares regression") {
    Rng rng = make_rng(9);
    std::normal_distribution<double> dist(0.0, 1.0);
    const int n = 40;
    ScoreSet set;
    Eigen::MatrixXd S(n, 2);
    Eigen::MatrixXd M(n, 2);
    for (int i = 0; i < n; ++i) {
      Eigen::VectorXd s(2), mu(2);
      s << dist(rng), dist(rng);
      mu << dist(rng), dist(rng);
      S.row(i) = s;
      M.row(i) = mu;
      set.s_eta.push_back(s);
      set.mu.push_back(mu);
      set.s_xi.push_back(vec1(1.0));
    }
    set.finalize();
    const ProjectionResult proj = projection_terms(set);
    // coefficients of mu ~ s from ordinary least squares, column by column
    const Eigen::MatrixXd coef =
        S.bdcSvd(Eigen::ComputeThinU | Eigen::ComputeThinV).solve(M);
    for (int i = 0; i < n; ++i) {
      const Eigen::VectorXd expect = coef.transpose() * set.s_eta[i];
      CHECK((proj.v_a[i] - expect).lpNorm<Eigen::Infinity>() < 1e-10);
    }
  }
  SUBCASE("singular score matrix falls back to the pseudo-inverse") {
    ScoreSet set;
    for (int i = 0; i < 6; ++i) {
      Eigen::VectorXd s(2);
      s << 1.0, 2.0;  // rank one
      set.s_eta.push_back(s);
      set.mu.push_back(vec1(static_cast<double>(i)));
      set.s_xi.push_back(vec1(1.0));
    }
    set.finalize();
    const ProjectionResult proj = projection_terms(set);
    CHECK(proj.pseudo_inverse_used);
    for (const auto& v : proj.v_a) CHECK(v.allFinite());
  }
}

TEST_CASE("variance decomposition on the synthetic family") {
  SUBCASE("degenerate family: constant baseline, mu uncorrelated with scores") {
    LocationFamilyConfig cfg;
    cfg.psi0 = cfg.eta0;   // identical policies: nu = 1
    cfg.sigma_t = cfg.sigma_b;
    cfg.c1 = 0.0;
    cfg.c2 = 0.0;          // G = c0 + noise only
    cfg.constant_baseline_only = true;
    const DecompositionReport r = variance_decomposition_check(cfg, 20000, 11);
    CHECK(r.var_va <= 0.02 * r.var_mu);
    CHECK(r.var_vb <= 0.02 * r.var_mu);
    CHECK(r.relative_gap <= 0.05);
  }
  SUBCASE("informative instance strictly shrinks the residual variance") {
    LocationFamilyConfig cfg;  // defaults: strong return-feature correlation
    const DecompositionReport r = variance_decomposition_check(cfg, 50000, 13);
    CHECK(r.var_residual < r.var_mu);
    CHECK(r.var_va > 0.0);
    CHECK(r.var_vb > 0.0);
    // the projections account for the entire drop, up to the reported gap
    CHECK(r.var_mu - r.var_residual ==
          doctest::Approx(r.var_va + r.var_vb).epsilon(0.05 * r.var_mu));
    CHECK(r.relative_gap <= 0.05);
  }
  SUBCASE("gradient-form mu also decomposes") {
    LocationFamilyConfig cfg;
    cfg.gradient_form_mu = true;
    const DecompositionReport r = variance_decomposition_check(cfg, 50000, 17);
    CHECK(r.relative_gap <= 0.08);
    CHECK(r.var_residual < r.var_mu);
  }
  SUBCASE("mini seed sweep holds the 5% gap") {
    LocationFamilyConfig cfg;
    int ok = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed)
      if (variance_decomposition_check(cfg, 20000, seed).relative_gap <= 0.05) ++ok;
    CHECK(ok >= 4);
  }
}

TEST_CASE("score/feature orthogonality at the fitted optimum") {
  // Gaussian-location family, constant baseline: at the fitted MLE the mean
  // score vanishes, so the empirical cross moment with a constant feature is
  // numerically zero; state-feature entries stay within 3 standard errors.
  const GaussianBanditConfig cfg;
  const TrajectoryDataset ds = sample_gaussian_bandit(cfg, 4000, 23);
  const GaussianPolicy fitted = GaussianPolicy::fit_mle_closed_form(ds, 1);

  const int d = fitted.param_dim();
  std::vector<Eigen::VectorXd> scores;
  for (const Trajectory& traj : ds.trajectories) {
    const std::vector<double> ones(1, 1.0);
    scores.push_back(fitted.weighted_score(traj, ones));
  }
  Eigen::VectorXd mean_score = Eigen::VectorXd::Zero(d);
  for (const auto& s : scores) mean_score += s;
  mean_score /= static_cast<double>(scores.size());
  CHECK(mean_score.lpNorm<Eigen::Infinity>() <= 1e-8);  // constant-feature cross moment

  // cross moment against [1, x] features
  Eigen::MatrixXd cross = Eigen::MatrixXd::Zero(d, 2);
  for (int i = 0; i < ds.size(); ++i) {
    Eigen::VectorXd phi(2);
    phi << 1.0, ds.trajectories[i].states[0][0];
    cross += scores[static_cast<std::size_t>(i)] * phi.transpose();
  }
  cross /= static_cast<double>(ds.size());
  // entrywise standard errors
  Eigen::MatrixXd second = Eigen::MatrixXd::Zero(d, 2);
  for (int i = 0; i < ds.size(); ++i) {
    Eigen::VectorXd phi(2);
    phi << 1.0, ds.trajectories[i].states[0][0];
    const Eigen::MatrixXd term = scores[static_cast<std::size_t>(i)] * phi.transpose();
    second += term.cwiseProduct(term);
  }
  second /= static_cast<double>(ds.size());
  for (int r = 0; r < d; ++r) {
    for (int c = 0; c < 2; ++c) {
      const double se = std::sqrt(
          std::max(second(r, c) - cross(r, c) * cross(r, c), 0.0) / ds.size());
      CHECK(std::abs(cross(r, c)) <= std::max(3.0 * se, 1e-8));
    }
  }
}

TEST_CASE("variance study") {
  SUBCASE("estimators disabled: ratio is exactly one") {
    VarianceStudyConfig cfg;
    cfg.replicates = 50;
    cfg.dataset_size = 20;
    cfg.bootstrap_resamples = 200;
    cfg.fit_behavior = false;
    cfg.fit_baseline = false;
    cfg.seed = 3;
    const VarianceStudyResult r = variance_study(cfg);
    CHECK(r.ratio == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.ratio_ci_lo <= 1.0);
    CHECK(r.ratio_ci_hi >= 1.0);
    CHECK(r.failures == 0);
  }
  SUBCASE("designed instance reduces variance with CI excluding one") {
    VarianceStudyConfig cfg;
    cfg.replicates = 400;
    cfg.dataset_size = 50;
    cfg.bootstrap_resamples = 2000;
    cfg.seed = 5;
    CHECK(bandit_return_feature_correlation(cfg.instance, 200000, 1) >= 0.9);
    const VarianceStudyResult r = variance_study(cfg);
    CHECK(r.ratio < 0.95);
    CHECK(r.ratio_ci_hi < 1.0);
  }
  SUBCASE("quadrupling replicates roughly halves the CI width") {
    VarianceStudyConfig small;
    small.replicates = 500;
    small.dataset_size = 30;
    small.bootstrap_resamples = 4000;
    small.seed = 11;
    VarianceStudyConfig big = small;
    big.replicates = 2000;
    const VarianceStudyResult rs = variance_study(small);
    const VarianceStudyResult rb = variance_study(big);
    const double ws = rs.ratio_ci_hi - rs.ratio_ci_lo;
    const double wb = rb.ratio_ci_hi - rb.ratio_ci_lo;
    CHECK(wb / ws == doctest::Approx(0.5).epsilon(0.4));
  }
  SUBCASE("study csv is written with summary rows") {
    VarianceStudyConfig cfg;
    cfg.replicates = 10;
    cfg.dataset_size = 10;
    cfg.bootstrap_resamples = 50;
    const VarianceStudyResult r = variance_study(cfg);
    const auto path = std::filesystem::temp_directory_path() / "dpe_study.csv";
    write_variance_study_csv(r, path);
    std::ifstream in(path);
    std::string line;
    int rows = 0;
    bool has_summary = false;
    while (std::getline(in, line)) {
      ++rows;
      if (line.rfind("summary_trace", 0) == 0) has_summary = true;
    }
    CHECK(rows == 1 + 10 + 1 + 2);  // header + replicates + trace + coords
    CHECK(has_summary);
    std::filesystem::remove(path);
  }
}
