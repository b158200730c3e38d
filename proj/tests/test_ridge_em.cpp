#include "doctest.h"

#include <Eigen/Eigenvalues>

#include <random>

#include "oracles.hpp"
#include "panelglmm/errors.hpp"
#include "panelglmm/ridge_em.hpp"

using namespace panelglmm;

namespace {

// Gaussian LMM data drawn directly from the dense model covariance.
struct LmmData {
  DesignSet designs;
  VectorXd y;
};

LmmData gaussian_lmm(std::mt19937_64& rng, Index N, Index T, const ModelParams& truth,
                     double noise_sd) {
  const PanelLayout layout(N, T);
  MatrixXd X(N * T, truth.beta.size());
  X.col(0).setOnes();
  X.rightCols(X.cols() - 1) = oracle::random_matrix(N * T, X.cols() - 1, rng);
  DesignSet d = build_designs(layout, X);
  const MatrixXd L = random_effect_factor(layout, truth);
  const VectorXd xi = L * oracle::random_vector(N + T, rng);
  VectorXd y = X * truth.beta + d.U * xi + noise_sd * oracle::random_vector(N * T, rng);
  return {std::move(d), std::move(y)};
}

WorkingModel gaussian_working_model(const VectorXd& y, double dispersion) {
  return linearize(y, y, FamilyLink::gaussian_identity(dispersion));
}

}  // namespace

TEST_CASE("gcv_score") {
  std::mt19937_64 rng(2);
  SUBCASE("perfect fit") {
    const VectorXd z = oracle::random_vector(4, rng);
    // S z = z with trace 2: project onto z and one orthogonal direction.
    const Eigen::HouseholderQR<MatrixXd> qr(
        (MatrixXd(4, 2) << z, oracle::random_vector(4, rng)).finished());
    const MatrixXd Q = qr.householderQ() * MatrixXd::Identity(4, 2);
    CHECK(gcv_score(z, Q * Q.transpose(), VectorXd::Ones(4)) == doctest::Approx(0.0).epsilon(1e-20));
  }
  SUBCASE("zero smoother") {
    const VectorXd z = oracle::random_vector(6, rng);
    const VectorXd g = oracle::random_positive(6, rng, 0.5, 2.0);
    const double expected = (z.array().square() / g.array()).sum() / 6.0;
    CHECK(gcv_score(z, MatrixXd::Zero(6, 6), g) == doctest::Approx(expected).epsilon(1e-14));
  }
  SUBCASE("degenerate trace") {
    CHECK_THROWS_AS(gcv_score(VectorXd::Ones(3), MatrixXd::Identity(3, 3), VectorXd::Ones(3)),
                    DegenerateFitError);
  }
  SUBCASE("Gamma = I reproduces the classical ridge GCV") {
    for (int trial = 0; trial < 20; ++trial) {
      const PanelLayout layout(4, 3);
      const DesignSet d = build_designs(layout, oracle::random_matrix(12, 4, rng));
      const VectorXd z = oracle::random_vector(12, rng);
      const ModelParams fixed{VectorXd::Zero(4), 0.0, 0.0, 0.0};
      for (double lambda : {1e-3, 0.5, 20.0}) {
        const auto hm = hat_matrix_apply(d, fixed, VectorXd::Ones(12), lambda, VectorXd::Ones(4));
        const double ours = gcv_score(z, hm.S, VectorXd::Ones(12));
        const double textbook = oracle::classical_ridge_gcv(d.X, z, lambda);
        CHECK(std::abs(ours - textbook) <= 1e-10 * std::max(1.0, textbook));
      }
    }
  }
}

TEST_CASE("select_lambda") {
  std::mt19937_64 rng(4);
  const PanelLayout layout(5, 4);
  MatrixXd X(20, 4);
  X.col(0).setOnes();
  X.col(1) = oracle::random_vector(20, rng);
  X.col(2) = X.col(1) + 1e-3 * oracle::random_vector(20, rng);
  X.col(3) = oracle::random_vector(20, rng);
  const DesignSet d = build_designs(layout, X);
  const ModelParams theta{VectorXd::Zero(4), 0.3, 0.2, 0.1};
  FitConfig cfg;
  cfg.intercept_column = 0;

  SUBCASE("single-point grid") {
    cfg.lambda_grid = {0.37};
    const WorkingModel wm = gaussian_working_model(oracle::random_vector(20, rng), 1.0);
    const auto sel = select_lambda(wm, d, theta, cfg);
    CHECK(sel.lambda == 0.37);
    CHECK(sel.curve.size() == 1);
  }
  SUBCASE("curve contract and exact argmin") {
    for (int trial = 0; trial < 10; ++trial) {
      const WorkingModel wm = gaussian_working_model(oracle::random_vector(20, rng), 1.0);
      const auto sel = select_lambda(wm, d, theta, cfg);
      REQUIRE(sel.curve.size() == cfg.lambda_grid.size());
      for (std::size_t k = 0; k < sel.curve.size(); ++k) {
        if (std::isnan(sel.curve[k])) continue;
        CHECK(std::isfinite(sel.curve[k]));
        CHECK(sel.curve[k] >= sel.gcv);
        if (sel.curve[k] == sel.gcv) CHECK(cfg.lambda_grid[k] <= sel.lambda);
      }
    }
  }
  SUBCASE("pure noise with collinear columns selects a positive lambda") {
    int positive = 0;
    for (int trial = 0; trial < 10; ++trial) {
      const WorkingModel wm = gaussian_working_model(oracle::random_vector(20, rng), 1.0);
      const auto sel = select_lambda(wm, d, theta, cfg);
      positive += sel.lambda > 0.0;
      CHECK(std::isfinite(sel.curve[0]));
      CHECK(sel.curve[0] > sel.gcv);
    }
    CHECK(positive == 10);
  }
  SUBCASE("ties go to the larger lambda") {
    // With D = 0 and an all-zero response every lambda fits perfectly.
    cfg.lambda_grid = {0.0, 1.0, 3.0, 2.0};
    const WorkingModel wm = gaussian_working_model(VectorXd::Zero(20), 1.0);
    const DesignSet d2 = build_designs(layout, X.leftCols(2));
    FitConfig c2 = cfg;
    const auto sel = select_lambda(wm, d2, {VectorXd::Zero(2), 0.0, 0.0, 0.0}, c2);
    CHECK(sel.lambda == 3.0);
  }
  SUBCASE("every point excluded") {
    MatrixXd Xc(20, 2);
    Xc.col(0) = X.col(1);
    Xc.col(1) = X.col(1);
    cfg.lambda_grid = {0.0};
    cfg.intercept_column.reset();
    const WorkingModel wm = gaussian_working_model(oracle::random_vector(20, rng), 1.0);
    CHECK_THROWS_AS(select_lambda(wm, build_designs(layout, Xc), {VectorXd::Zero(2), 0.3, 0.2, 0.1},
                                  cfg),
                    SelectionError);
  }
}

TEST_CASE("penalized E-step") {
  std::mt19937_64 rng(6);
  const PanelLayout layout(3, 3);
  const DesignSet d = build_designs(layout, oracle::random_matrix(9, 2, rng));
  const VectorXd y = oracle::random_vector(9, rng);
  const WorkingModel wm = gaussian_working_model(y, 0.7);

  SUBCASE("D -> 0 reduces to fixed-effect quantities") {
    const ModelParams theta{oracle::random_vector(2, rng), 0.0, 0.0, 0.0};
    const QPenStats st = penalized_e_step(wm, d, theta, 0.0);
    CHECK(st.xi1_sq == 0.0);
    CHECK(st.xi2_second.norm() == 0.0);
    CHECK((st.residual_target - wm.z).norm() == 0.0);
    CHECK(st.trace_gram_cov == 0.0);
  }
  SUBCASE("statistics match exact posterior sampling within 3 standard errors") {
    const ModelParams theta{oracle::random_vector(2, rng), 0.8, 0.5, 0.6};
    const QPenStats st = penalized_e_step(wm, d, theta, 0.0);
    const MatrixXd D = random_effect_covariance(layout, theta);
    const auto cond =
        oracle::joint_gaussian_conditioning(d.U, D, wm.gamma_diag, wm.z - d.X * theta.beta);
    const MatrixXd Lc = Eigen::LLT<MatrixXd>(cond.cov).matrixL();
    std::mt19937_64 draw_rng(77);
    const long draws = 100000;
    VectorXd sum_mean = VectorXd::Zero(6);
    double s1 = 0.0, s1sq = 0.0;
    MatrixXd s2 = MatrixXd::Zero(3, 3), s2sq = MatrixXd::Zero(3, 3);
    for (long k = 0; k < draws; ++k) {
      const VectorXd xi = cond.mean + Lc * oracle::random_vector(6, draw_rng);
      sum_mean += xi;
      const double a = xi.head(3).squaredNorm();
      s1 += a;
      s1sq += a * a;
      const MatrixXd outer = xi.tail(3) * xi.tail(3).transpose();
      s2 += outer;
      s2sq += outer.cwiseProduct(outer);
    }
    const double nd = static_cast<double>(draws);
    const VectorXd mc_mean = sum_mean / nd;
    const VectorXd se_mean = (cond.cov.diagonal() / nd).cwiseSqrt();
    for (Index j = 0; j < 6; ++j) {
      CHECK(std::abs(mc_mean(j) - st.posterior.mean_xi(j)) <= 3.0 * se_mean(j));
    }
    const double m1 = s1 / nd;
    const double se1 = std::sqrt((s1sq / nd - m1 * m1) / nd);
    CHECK(std::abs(m1 - st.xi1_sq) <= 3.0 * se1);
    for (Index a = 0; a < 3; ++a) {
      for (Index b = 0; b < 3; ++b) {
        const double m = s2(a, b) / nd;
        const double se = std::sqrt((s2sq(a, b) / nd - m * m) / nd);
        CHECK(std::abs(m - st.xi2_second(a, b)) <= 3.0 * se);
      }
    }
  }
  SUBCASE("second moment dominates the outer product of the mean") {
    const ModelParams theta{oracle::random_vector(2, rng), 0.4, 0.9, -0.5};
    const QPenStats st = penalized_e_step(wm, d, theta, 0.0);
    const VectorXd m2 = st.posterior.mean_xi.tail(3);
    const MatrixXd gap = st.xi2_second - m2 * m2.transpose();
    CHECK(Eigen::SelfAdjointEigenSolver<MatrixXd>(gap).eigenvalues().minCoeff() >= -1e-12);
  }
}

TEST_CASE("profiled AR(1) M-step") {
  std::mt19937_64 rng(10);
  const RhoSearch search;
  SUBCASE("white-noise second moment gives rho near zero") {
    const double c = 0.37;
    const auto up = profile_ar1(c * MatrixXd::Identity(200, 200), 0.4, search);
    CHECK(std::abs(up.rho) <= 0.01);
    CHECK(up.sigma2_sq == doctest::Approx(c).epsilon(1e-3));
  }
  SUBCASE("zero moment keeps rho and sets sigma2 to zero") {
    const auto up = profile_ar1(MatrixXd::Zero(5, 5), 0.3, search);
    CHECK(up.sigma2_sq == 0.0);
    CHECK(up.rho == 0.3);
  }
  SUBCASE("matches a 1e5-point brute-force scan on random moments") {
    std::uniform_real_distribution<double> ur(-0.95, 0.95);
    for (int trial = 0; trial < 20; ++trial) {
      const Index T = 3 + trial % 10;
      const double rho_true = ur(rng);
      const MatrixXd L = ar1_cholesky_factor(T, rho_true, 0.5);
      MatrixXd S = MatrixXd::Zero(T, T);
      for (int k = 0; k < 3; ++k) {
        const VectorXd x = L * oracle::random_vector(T, rng);
        S += x * x.transpose() / 3.0;
      }
      const MatrixXd A = oracle::random_matrix(T, T, rng);
      S += 0.05 * A * A.transpose() / static_cast<double>(T);

      const auto up = profile_ar1(S, 0.0, search);
      const double bound = 1.0 - kRhoMargin;
      double best_rho = 0.0, best_val = -std::numeric_limits<double>::infinity();
      const int G = 100000;
      for (int k = 0; k < G; ++k) {
        const double r = -bound + 2.0 * bound * k / (G - 1);
        const double v = profiled_ar1_objective(S, r);
        if (v > best_val) {
          best_val = v;
          best_rho = r;
        }
      }
      CHECK(std::abs(up.rho - best_rho) <= 1e-3);
      // sigma2 is the closed-form optimizer at the returned rho.
      const double f0 = ar1_expected_logdensity(S, up.rho, up.sigma2_sq);
      CHECK(f0 >= ar1_expected_logdensity(S, up.rho, up.sigma2_sq * 1.001));
      CHECK(f0 >= ar1_expected_logdensity(S, up.rho, up.sigma2_sq * 0.999));
    }
  }
}

TEST_CASE("M-step") {
  std::mt19937_64 rng(12);
  const PanelLayout layout(6, 4);
  MatrixXd X(24, 3);
  X.col(0).setOnes();
  X.rightCols(2) = oracle::random_matrix(24, 2, rng);
  const DesignSet d = build_designs(layout, X);
  FitConfig cfg;
  cfg.intercept_column = 0;

  SUBCASE("zero individual moment gives zero sigma1") {
    const WorkingModel wm = gaussian_working_model(oracle::random_vector(24, rng), 1.0);
    QPenStats st = penalized_e_step(wm, d, {VectorXd::Zero(3), 0.5, 0.5, 0.0}, 0.0);
    st.xi1_sq = 0.0;
    const ModelParams next = m_step(st, d, wm, 0.0, cfg, {VectorXd::Zero(3), 0.5, 0.5, 0.0});
    CHECK(next.sigma1_sq == 0.0);
  }
  SUBCASE("beta update reduces to OLS when lambda = 0, Gamma = I, E[xi] = 0") {
    const WorkingModel wm = gaussian_working_model(oracle::random_vector(24, rng), 1.0);
    const ModelParams zero_d{VectorXd::Zero(3), 0.0, 0.0, 0.0};
    const QPenStats st = penalized_e_step(wm, d, zero_d, 0.0);
    const ModelParams next = m_step(st, d, wm, 0.0, cfg, zero_d);
    const VectorXd ols = X.colPivHouseholderQr().solve(wm.z);
    CHECK((next.beta - ols).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("finite-difference gradient of Q_pen vanishes in (beta, sigma1_sq)") {
    for (int trial = 0; trial < 10; ++trial) {
      const WorkingModel wm =
          linearize(oracle::random_vector(24, rng), VectorXd::Zero(24),
                    FamilyLink::gaussian_identity(0.5 + 0.1 * trial));
      const ModelParams cur{oracle::random_vector(3, rng), 0.6, 0.4, 0.3};
      const double lambda = 0.1 * trial;
      const QPenStats st = penalized_e_step(wm, d, cur, lambda);
      const ModelParams next = m_step(st, d, wm, lambda, cfg, cur);
      const VectorXd mask = cfg.penalty_mask_for(3);
      const double h = 1e-6;
      for (Index j = 0; j < 3; ++j) {
        ModelParams a = next, b = next;
        a.beta(j) += h;
        b.beta(j) -= h;
        const double grad = (q_pen(st, wm, d, a, lambda, mask) - q_pen(st, wm, d, b, lambda, mask)) /
                            (2.0 * h);
        CHECK(std::abs(grad) <= 1e-5);
      }
      ModelParams a = next, b = next;
      a.sigma1_sq += h;
      b.sigma1_sq -= h;
      const double grad =
          (q_pen(st, wm, d, a, lambda, mask) - q_pen(st, wm, d, b, lambda, mask)) / (2.0 * h);
      CHECK(std::abs(grad) <= 1e-5);
      CHECK(q_pen(st, wm, d, next, lambda, mask) >= q_pen(st, wm, d, cur, lambda, mask));
    }
  }
}

TEST_CASE("inner EM sweeps do not decrease the penalized marginal likelihood") {
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 8; ++trial) {
    const ModelParams truth{(VectorXd(3) << 0.5, 1.0, -0.7).finished(), 0.5, 0.3, 0.6};
    const LmmData data = gaussian_lmm(rng, 6, 5, truth, 0.8);
    const WorkingModel wm = gaussian_working_model(data.y, 0.64);
    FitConfig cfg;
    cfg.intercept_column = 0;
    const VectorXd mask = cfg.penalty_mask_for(3);
    const double lambda = 0.5 * trial;
    const ModelParams start{VectorXd::Zero(3), 1.0, 1.0, 0.0};
    const auto path = em_sweeps(wm, data.designs, start, lambda, 50, cfg);
    double prev = penalized_marginal_loglik(wm, data.designs, path[0], lambda, mask);
    for (std::size_t s = 1; s < path.size(); ++s) {
      const double cur = penalized_marginal_loglik(wm, data.designs, path[s], lambda, mask);
      CHECK(cur >= prev - 1e-9);
      prev = cur;
    }
  }
}

TEST_CASE("fit on gaussian data matches the dense LMM solution at the fitted variances") {
  std::mt19937_64 rng(15);
  const ModelParams truth{(VectorXd(3) << 1.0, 0.5, -0.5).finished(), 0.4, 0.3, 0.5};
  const LmmData data = gaussian_lmm(rng, 12, 8, truth, 1.0);
  FitConfig cfg;
  cfg.intercept_column = 0;
  cfg.lambda_grid = {0.0};
  cfg.tol = 1e-11;
  cfg.max_outer_iter = 5000;
  const auto fam = FamilyLink::gaussian_identity(1.0);
  const FitResult res = fit(data.y, data.designs, fam, cfg);
  REQUIRE(res.converged);
  const MatrixXd D = random_effect_covariance(data.designs.layout, res.params);
  const auto [beta_h, xi_h] =
      oracle::henderson_blup(data.designs.X, data.designs.U, D, VectorXd::Ones(96), data.y);
  CHECK((res.params.beta - beta_h).cwiseAbs().maxCoeff() <= 1e-6 * beta_h.cwiseAbs().maxCoeff());
  CHECK((res.xi_hat.stacked() - xi_h).cwiseAbs().maxCoeff() <= 1e-6 * xi_h.cwiseAbs().maxCoeff());

  // The same fixed point through explicit EM sweeps at the single exact linearization.
  const WorkingModel wm = gaussian_working_model(data.y, 1.0);
  const auto path = em_sweeps(wm, data.designs, initial_params(data.y, data.designs, fam), 0.0,
                              5000, cfg);
  CHECK((path.back().beta - res.params.beta).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(res.lambda_path.size() == static_cast<std::size_t>(res.n_iter));
}

TEST_CASE("constant response drives the variance components towards zero") {
  const PanelLayout layout(10, 6);
  std::mt19937_64 rng(16);
  MatrixXd X(60, 2);
  X.col(0).setOnes();
  X.col(1) = oracle::random_vector(60, rng);
  const DesignSet d = build_designs(layout, X);
  FitConfig cfg;
  cfg.intercept_column = 0;
  SUBCASE("poisson") {
    const FitResult res = fit(VectorXd::Constant(60, 3.0), d, FamilyLink::poisson_log(), cfg);
    CHECK(res.params.beta(0) == doctest::Approx(std::log(3.0)).epsilon(1e-4));
    CHECK(std::abs(res.params.beta(1)) < 1e-4);
    CHECK(res.params.sigma1_sq < 1e-3);
    CHECK(res.params.sigma2_sq < 1e-3);
  }
  SUBCASE("gaussian") {
    const FitResult res = fit(VectorXd::Constant(60, -1.5), d, FamilyLink::gaussian_identity(), cfg);
    CHECK(res.params.beta(0) == doctest::Approx(-1.5).epsilon(1e-8));
    CHECK(res.params.sigma1_sq < 1e-3);
    CHECK(res.params.sigma2_sq < 1e-3);
  }
}

TEST_CASE("rescaling a covariate with lambda = 0 rescales its coefficient") {
  std::mt19937_64 rng(18);
  const PanelLayout layout(8, 5);
  MatrixXd X(40, 3);
  X.col(0).setOnes();
  X.rightCols(2) = 0.5 * oracle::random_matrix(40, 2, rng);
  const DesignSet d = build_designs(layout, X);
  const VectorXd eta = X * Eigen::Vector3d(0.8, 0.4, -0.3);
  std::poisson_distribution<int> dummy;
  VectorXd y(40);
  for (Index i = 0; i < 40; ++i) {
    std::poisson_distribution<int> pd(std::exp(eta(i)));
    y(i) = pd(rng);
  }
  FitConfig cfg;
  cfg.intercept_column = 0;
  cfg.lambda_grid = {0.0};
  cfg.tol = 1e-10;
  cfg.max_outer_iter = 2000;
  const auto fam = FamilyLink::poisson_log();
  const FitResult base = fit(y, d, fam, cfg);
  for (double c : {2.5, -0.1}) {
    MatrixXd Xs = X;
    Xs.col(2) *= c;
    const FitResult scaled = fit(y, build_designs(layout, Xs), fam, cfg);
    CHECK(scaled.params.beta(2) * c == doctest::Approx(base.params.beta(2)).epsilon(1e-6));
    CHECK((scaled.eta - base.eta).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("fit configuration validation") {
  FitConfig cfg;
  cfg.lambda_grid.clear();
  CHECK_THROWS_AS(cfg.validate(2), ConfigError);
  cfg = FitConfig{};
  cfg.tol = 0.0;
  CHECK_THROWS_AS(cfg.validate(2), ConfigError);
  cfg = FitConfig{};
  cfg.intercept_column = 0;
  CHECK(cfg.penalty_mask_for(3) == Eigen::Vector3d(0, 1, 1));
  cfg.penalize_intercept = true;
  CHECK(cfg.penalty_mask_for(3) == Eigen::Vector3d(1, 1, 1));
}

TEST_CASE("divergence guard") {
  SUBCASE("rising deviance with growing steps trips after the window") {
    DivergenceGuard guard(3);
    CHECK_FALSE(guard.update(10.0, 0.1));
    CHECK_FALSE(guard.update(11.0, 0.2));
    CHECK_FALSE(guard.update(12.0, 0.3));
    CHECK(guard.update(13.0, 0.4));
  }
  SUBCASE("contracting steps reset the count") {
    DivergenceGuard guard(3);
    double dev = 10.0, step = 1.0;
    for (int k = 0; k < 20; ++k) {
      dev += 0.5;
      step *= 0.5;
      CHECK_FALSE(guard.update(dev, step));
    }
  }
  SUBCASE("rises below the noise threshold do not count") {
    DivergenceGuard guard(2);
    CHECK_FALSE(guard.update(100.0, 1.0));
    CHECK_FALSE(guard.update(100.0 + 1e-8, 1.0));
    CHECK_FALSE(guard.update(100.0 + 2e-8, 1.0));
    CHECK(guard.rising() == 0);
  }
}
