#include "doctest.h"

#include <Eigen/Eigenvalues>

#include <numeric>
#include <random>

#include "oracles.hpp"
#include "panelglmm/errors.hpp"
#include "panelglmm/model_core.hpp"

using namespace panelglmm;

TEST_CASE("panel layout enforces N, T >= 2 and the row ordering") {
  CHECK_THROWS_AS(PanelLayout(1, 3), InvalidInput);
  CHECK_THROWS_AS(PanelLayout(3, 1), InvalidInput);
  const PanelLayout layout(3, 4);
  CHECK(layout.n_rows() == 12);
  CHECK(layout.row(2, 1) == 9);
  CHECK(layout.individual_of(9) == 2);
  CHECK(layout.time_of(9) == 1);
}

TEST_CASE("build_designs expands the Kronecker incidence matrices") {
  const PanelLayout layout(2, 2);
  const DesignSet d = build_designs(layout, MatrixXd::Ones(4, 1));
  MatrixXd U1(4, 2), U2(4, 2);
  U1 << 1, 0, 1, 0, 0, 1, 0, 1;
  U2 << 1, 0, 0, 1, 1, 0, 0, 1;
  CHECK(d.U1 == U1);
  CHECK(d.U2 == U2);
  CHECK(d.U.cols() == 4);
  CHECK(d.U.leftCols(2) == U1);

  CHECK_THROWS_AS(build_designs(layout, MatrixXd::Ones(5, 1)), InvalidInput);
}

TEST_CASE("incidence Gram matrices for N=3, T=4") {
  const PanelLayout layout(3, 4);
  const DesignSet d = build_designs(layout, MatrixXd::Ones(12, 1));
  CHECK((d.U1.transpose() * d.U1 - 4.0 * MatrixXd::Identity(3, 3)).norm() == 0.0);
  CHECK((d.U2.transpose() * d.U2 - 3.0 * MatrixXd::Identity(4, 4)).norm() == 0.0);
  for (Index r = 0; r < 12; ++r) {
    CHECK(d.U1.row(r).sum() == 1.0);
    CHECK(d.U2.row(r).sum() == 1.0);
  }
}

TEST_CASE("structured U products agree with the dense incidence matrices") {
  std::mt19937_64 rng(7);
  const PanelLayout layout(4, 3);
  const DesignSet d = build_designs(layout, MatrixXd::Ones(12, 1));
  const VectorXd xi = oracle::random_vector(7, rng);
  CHECK((apply_u(layout, xi) - d.U * xi).norm() < 1e-14);
  const MatrixXd B = oracle::random_matrix(12, 3, rng);
  CHECK((apply_ut(layout, B) - d.U.transpose() * B).norm() < 1e-13);
  const VectorXd w = oracle::random_positive(12, rng, 0.5, 2.0);
  CHECK((weighted_gram_u(layout, w) - d.U.transpose() * w.asDiagonal() * d.U).norm() < 1e-13);
}

TEST_CASE("ar1_covariance closed form") {
  SUBCASE("independence") {
    CHECK((ar1_covariance(3, 0.0, 2.0) - 2.0 * MatrixXd::Identity(3, 3)).norm() == 0.0);
  }
  SUBCASE("stationarity margin") {
    CHECK_THROWS_AS(ar1_covariance(3, 0.99995, 1.0), StationarityError);
    CHECK_THROWS_AS(ar1_covariance(3, -1.0, 1.0), StationarityError);
    CHECK_NOTHROW(ar1_covariance(3, 1.0 - kRhoMargin, 1.0));
  }
  SUBCASE("positive semi-definite for valid parameters") {
    for (double rho : {-0.9999, -0.7, 0.0, 0.3, 0.95, 0.9999}) {
      const MatrixXd S = ar1_covariance(25, rho, 0.4);
      CHECK(Eigen::SelfAdjointEigenSolver<MatrixXd>(S).eigenvalues().minCoeff() >= -1e-10);
    }
  }
  SUBCASE("Cholesky factor reproduces the covariance") {
    for (double rho : {-0.9, 0.0, 0.5, 0.99}) {
      const MatrixXd L = ar1_cholesky_factor(6, rho, 0.7);
      CHECK((L * L.transpose() - ar1_covariance(6, rho, 0.7)).norm() < 1e-12);
    }
    CHECK(ar1_cholesky_factor(4, 0.5, 0.0).norm() == 0.0);
  }
}

TEST_CASE("ar1_covariance matches the Monte-Carlo covariance of simulated paths") {
  struct Case {
    double rho, sigma2_sq, diag, off;
  };
  for (const Case c : {Case{0.5, 0.75, 1.0, 0.5}, Case{-0.9, 0.19, 1.0, -0.9}}) {
    const MatrixXd mc = oracle::ar1_monte_carlo_covariance(2, c.rho, c.sigma2_sq, 1000000, 11);
    const MatrixXd S = ar1_covariance(2, c.rho, c.sigma2_sq);
    CHECK(S(0, 0) == doctest::Approx(c.diag).epsilon(1e-12));
    CHECK(S(0, 1) == doctest::Approx(c.off).epsilon(1e-12));
    CHECK((S - mc).cwiseAbs().maxCoeff() < 1e-2);
  }
  // Longer path, every entry.
  const MatrixXd mc = oracle::ar1_monte_carlo_covariance(5, 0.7, 0.51, 1000000, 12);
  CHECK((ar1_covariance(5, 0.7, 0.51) - mc).cwiseAbs().maxCoeff() < 1e-2);
}

TEST_CASE("random_effect_covariance is block diagonal") {
  const PanelLayout layout(2, 2);
  SUBCASE("identity") {
    ModelParams p{VectorXd::Zero(1), 1.0, 1.0, 0.0};
    CHECK((random_effect_covariance(layout, p) - MatrixXd::Identity(4, 4)).norm() == 0.0);
  }
  SUBCASE("degenerate individual block") {
    const PanelLayout big(5, 3);
    ModelParams p{VectorXd::Zero(1), 0.0, 1.0, 0.4};
    const MatrixXd D = random_effect_covariance(big, p);
    CHECK(D.topLeftCorner(5, 5).norm() == 0.0);
    Eigen::FullPivLU<MatrixXd> lu(D);
    CHECK(lu.rank() <= 3);
  }
  SUBCASE("composition of the two blocks") {
    ModelParams p{VectorXd::Zero(1), 2.0, 0.75, 0.5};
    MatrixXd expected = MatrixXd::Zero(4, 4);
    expected.topLeftCorner(2, 2) = 2.0 * MatrixXd::Identity(2, 2);
    expected.bottomRightCorner(2, 2) << 1.0, 0.5, 0.5, 1.0;
    const MatrixXd D = random_effect_covariance(layout, p);
    CHECK((D - expected).norm() < 1e-14);
    CHECK(D.topRightCorner(2, 2).norm() == 0.0);
    CHECK(D.bottomLeftCorner(2, 2).norm() == 0.0);
  }
  SUBCASE("factor matches") {
    const PanelLayout big(4, 5);
    ModelParams p{VectorXd::Zero(1), 0.3, 0.2, -0.6};
    const MatrixXd L = random_effect_factor(big, p);
    CHECK((L * L.transpose() - random_effect_covariance(big, p)).norm() < 1e-13);
  }
}

TEST_CASE("linear predictor and mean response") {
  const PanelLayout layout(2, 2);
  SUBCASE("zero parameters") {
    const DesignSet d = build_designs(layout, MatrixXd::Ones(4, 2));
    ModelParams p{VectorXd::Zero(2), 1.0, 1.0, 0.0};
    const VectorXd eta = linear_predictor(d, p, RandomEffectState::zeros(layout));
    CHECK(eta.norm() == 0.0);
    const VectorXd mu = mean_response(eta, FamilyLink::poisson_log());
    CHECK((mu.array() == 1.0).all());
    CHECK(mean_response(eta, FamilyLink::gaussian_identity()) == eta);
  }
  SUBCASE("hand arithmetic for one row") {
    MatrixXd X(4, 2);
    X << 1, 2, 0, 0, 0, 0, 0, 0;
    const DesignSet d = build_designs(layout, X);
    ModelParams p{VectorXd::Constant(2, 0.5), 1.0, 1.0, 0.0};
    RandomEffectState xi{VectorXd::Zero(2), VectorXd::Zero(2)};
    xi.xi1(0) = 0.1;
    xi.xi2(0) = -0.1;
    const VectorXd eta = linear_predictor(d, p, xi);
    CHECK(eta(0) == doctest::Approx(1.5).epsilon(1e-15));
    const VectorXd brute = d.X * p.beta + d.U * xi.stacked();
    CHECK((eta - brute).norm() < 1e-15);
  }
  SUBCASE("clipping is reported") {
    Diagnostics diag;
    VectorXd eta(3);
    eta << 40.0, -45.0, 1.0;
    const VectorXd mu = mean_response(eta, FamilyLink::poisson_log(), &diag);
    CHECK(mu(0) == doctest::Approx(std::exp(30.0)));
    CHECK(mu(1) == doctest::Approx(std::exp(-30.0)));
    CHECK(diag.count("eta_clipped") == 1);
  }
}

TEST_CASE("family link inverse and variance functions") {
  const auto pois = FamilyLink::poisson_log();
  const auto gaus = FamilyLink::gaussian_identity(2.5);
  for (double eta = -20.0; eta <= 20.0; eta += 0.37) {
    CHECK(pois.g(pois.inverse_link(eta)) == doctest::Approx(eta).epsilon(1e-14));
    CHECK(gaus.g(gaus.inverse_link(eta)) == eta);
  }
  CHECK(pois.variance(3.0) == 3.0);
  CHECK(pois.g_prime(4.0) == 0.25);
  CHECK(gaus.variance(3.0) == 2.5);
  CHECK(gaus.g_prime(3.0) == 1.0);
  CHECK_THROWS_AS(FamilyLink(Family::poisson, Link::identity), InvalidInput);
  CHECK_THROWS_AS(FamilyLink::from_names("binomial", "logit"), InvalidInput);
}

TEST_CASE("complete_loglik") {
  std::mt19937_64 rng(3);
  const PanelLayout layout(3, 4);
  const DesignSet d = build_designs(layout, oracle::random_matrix(12, 2, rng));
  ModelParams p{oracle::random_vector(2, rng), 0.6, 0.3, 0.4};
  const double log2pi = std::log(2.0 * M_PI);

  SUBCASE("perfect fit with zero random effects") {
    const VectorXd z = d.X * p.beta;
    const auto ll = complete_loglik(z, d, p, RandomEffectState::zeros(layout), VectorXd::Ones(12));
    const MatrixXd S2 = ar1_covariance(4, p.rho, p.sigma2_sq);
    const double expected = -6.0 * log2pi +
                            oracle::mvn_logpdf(VectorXd::Zero(3), VectorXd::Zero(3),
                                               p.sigma1_sq * MatrixXd::Identity(3, 3)) +
                            oracle::mvn_logpdf(VectorXd::Zero(4), VectorXd::Zero(4), S2);
    CHECK_FALSE(ll.degenerate);
    CHECK(ll.value == doctest::Approx(expected).epsilon(1e-12));
  }
  SUBCASE("dense density oracle for a random state") {
    const RandomEffectState xi{oracle::random_vector(3, rng), oracle::random_vector(4, rng)};
    const VectorXd gamma = oracle::random_positive(12, rng, 0.2, 3.0);
    const VectorXd z = oracle::random_vector(12, rng);
    const auto ll = complete_loglik(z, d, p, xi, gamma);
    const double expected =
        oracle::mvn_logpdf(z, d.X * p.beta + d.U * xi.stacked(), MatrixXd(gamma.asDiagonal())) +
        oracle::mvn_logpdf(xi.xi1, VectorXd::Zero(3), p.sigma1_sq * MatrixXd::Identity(3, 3)) +
        oracle::mvn_logpdf(xi.xi2, VectorXd::Zero(4), ar1_covariance(4, p.rho, p.sigma2_sq));
    CHECK(ll.value == doctest::Approx(expected).epsilon(1e-12));
  }
  SUBCASE("doubling Gamma on a perfect fit costs (n/2) log 2") {
    const RandomEffectState xi{oracle::random_vector(3, rng), oracle::random_vector(4, rng)};
    const VectorXd z = linear_predictor(d, p, xi);
    const double a = complete_loglik(z, d, p, xi, VectorXd::Ones(12)).value;
    const double b = complete_loglik(z, d, p, xi, VectorXd::Constant(12, 2.0)).value;
    CHECK(a - b == doctest::Approx(6.0 * std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("zero variance with a nonzero effect is flagged") {
    ModelParams q = p;
    q.sigma1_sq = 0.0;
    RandomEffectState xi = RandomEffectState::zeros(layout);
    xi.xi1(1) = 0.2;
    const auto ll = complete_loglik(d.X * p.beta, d, q, xi, VectorXd::Ones(12));
    CHECK(ll.degenerate);
    CHECK(std::isinf(ll.value));
    xi.xi1.setZero();
    CHECK_FALSE(complete_loglik(d.X * p.beta, d, q, xi, VectorXd::Ones(12)).degenerate);
  }
}

TEST_CASE("complete_loglik is invariant under permutation of individuals") {
  std::mt19937_64 rng(99);
  const PanelLayout layout(5, 3);
  const Index T = 3;
  const DesignSet d = build_designs(layout, oracle::random_matrix(15, 2, rng));
  ModelParams p{oracle::random_vector(2, rng), 0.8, 0.5, -0.3};
  const RandomEffectState xi{oracle::random_vector(5, rng), oracle::random_vector(3, rng)};
  const VectorXd z = oracle::random_vector(15, rng);
  const VectorXd gamma = oracle::random_positive(15, rng, 0.5, 2.0);
  const double base = complete_loglik(z, d, p, xi, gamma).value;

  for (int trial = 0; trial < 10; ++trial) {
    std::vector<Index> perm(5);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    MatrixXd Xp(15, 2);
    VectorXd zp(15), gp(15);
    RandomEffectState xip = xi;
    for (Index i = 0; i < 5; ++i) {
      xip.xi1(i) = xi.xi1(perm[i]);
      for (Index t = 0; t < T; ++t) {
        Xp.row(i * T + t) = d.X.row(perm[i] * T + t);
        zp(i * T + t) = z(perm[i] * T + t);
        gp(i * T + t) = gamma(perm[i] * T + t);
      }
    }
    const DesignSet dp = build_designs(layout, Xp);
    CHECK(complete_loglik(zp, dp, p, xip, gp).value == doctest::Approx(base).epsilon(1e-13));
  }
}

TEST_CASE("model params validation") {
  ModelParams p{VectorXd::Zero(2), 1.0, 1.0, 0.0};
  CHECK_NOTHROW(p.validate());
  p.rho = 0.99999;
  CHECK_THROWS_AS(p.validate(), StationarityError);
  p.rho = 0.0;
  p.sigma1_sq = -1.0;
  CHECK_THROWS_AS(p.validate(), InvalidInput);
}
