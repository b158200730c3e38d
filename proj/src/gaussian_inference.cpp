#include "panelglmm/gaussian_inference.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <sstream>

#include "panelglmm/errors.hpp"

namespace panelglmm {

namespace {

// Relative pivot threshold below which a ridge system is declared singular.
constexpr double kSingularPivot = 1e-12;

void check_gamma(const VectorXd& gamma, Index n) {
  if (gamma.size() != n) throw InvalidInput("Gamma diagonal has the wrong length");
  for (Index i = 0; i < n; ++i) {
    if (!(gamma(i) > 0.0) || !std::isfinite(gamma(i))) {
      throw InvalidInput("Gamma diagonal must be positive and finite");
    }
  }
}

}  // namespace

MarginalSystem::MarginalSystem(const PanelLayout& layout, const ModelParams& params,
                               const VectorXd& gamma_diag)
    : layout_(layout), gamma_(gamma_diag) {
  check_gamma(gamma_diag, layout.n_rows());
  weights_ = gamma_.cwiseInverse();
  factor_ = random_effect_factor(layout, params);

  const Index q = layout.n_effects();
  const MatrixXd gram = weighted_gram_u(layout, weights_);
  const MatrixXd ltgl = factor_.transpose() * gram * factor_;
  MatrixXd M = MatrixXd::Identity(q, q) + ltgl;
  inner_.compute(M);
  if (inner_.info() != Eigen::Success) {
    throw NumericalError("I + L'U'WUL is not positive definite",
                         Eigen::SelfAdjointEigenSolver<MatrixXd>(M).eigenvalues().minCoeff());
  }
  const MatrixXd& LM = inner_.matrixL();
  log_det_ = gamma_.array().log().sum() + 2.0 * LM.diagonal().array().log().sum();
  trace_gamma_vinv_ =
      static_cast<double>(layout.n_rows()) - inner_.solve(ltgl).trace();
}

MatrixXd MarginalSystem::solve(const MatrixXd& B) const {
  if (B.rows() != layout_.n_rows()) throw InvalidInput("V^-1 B: row count mismatch");
  const MatrixXd WB = weights_.asDiagonal() * B;
  const MatrixXd inner = factor_ * inner_.solve(factor_.transpose() * apply_ut(layout_, WB));
  MatrixXd out = WB;
  const Index N = layout_.n_individuals();
  const Index T = layout_.n_times();
  for (Index i = 0; i < N; ++i) {
    for (Index t = 0; t < T; ++t) {
      const Index r = i * T + t;
      out.row(r) -= weights_(r) * (inner.row(i) + inner.row(N + t));
    }
  }
  return out;
}

VectorXd MarginalSystem::solve(const VectorXd& b) const { return solve(MatrixXd(b)).col(0); }

PosteriorMoments MarginalSystem::posterior(const VectorXd& residual) const {
  if (residual.size() != layout_.n_rows()) throw InvalidInput("residual has the wrong length");
  const VectorXd utwr = apply_ut(layout_, VectorXd(weights_.cwiseProduct(residual)));
  PosteriorMoments pm;
  pm.mean_xi = factor_ * inner_.solve(factor_.transpose() * utwr);
  pm.cov_xi = factor_ * inner_.solve(factor_.transpose());
  pm.cov_xi = 0.5 * (pm.cov_xi + pm.cov_xi.transpose());
  pm.second_moment_xi = pm.cov_xi + pm.mean_xi * pm.mean_xi.transpose();
  return pm;
}

MatrixXd marginal_covariance(const DesignSet& designs, const ModelParams& params,
                             const VectorXd& gamma_diag) {
  check_gamma(gamma_diag, designs.n());
  const MatrixXd D = random_effect_covariance(designs.layout, params);
  MatrixXd V = designs.U * D * designs.U.transpose();
  V.diagonal() += gamma_diag;
  Eigen::LLT<MatrixXd> llt(V);
  if (llt.info() != Eigen::Success) {
    const double min_eig = Eigen::SelfAdjointEigenSolver<MatrixXd>(V).eigenvalues().minCoeff();
    std::ostringstream msg;
    msg << "marginal covariance is not positive definite (min eigenvalue " << min_eig << ")";
    throw NumericalError(msg.str(), min_eig);
  }
  return V;
}

RidgeSystem::RidgeSystem(const DesignSet& designs, const MarginalSystem& marginal,
                         const VectorXd& z, const VectorXd& penalty_mask)
    : gamma_(marginal.gamma_diag()), mask_(penalty_mask) {
  if (z.size() != designs.n()) throw InvalidInput("z has the wrong length");
  if (mask_.size() != designs.p()) throw InvalidInput("penalty mask length differs from X columns");
  vinv_x_ = marginal.solve(designs.X);
  vinv_z_ = marginal.solve(z);
  xt_vinv_x_ = designs.X.transpose() * vinv_x_;
  xt_vinv_x_ = 0.5 * (xt_vinv_x_ + xt_vinv_x_.transpose());
  xt_vinv_z_ = designs.X.transpose() * vinv_z_;
  xt_vinv_gamma_vinv_x_ = vinv_x_.transpose() * gamma_.asDiagonal() * vinv_x_;
  trace_gamma_vinv_ = marginal.trace_gamma_vinv();
}

Eigen::LLT<MatrixXd> RidgeSystem::factorize(double lambda) const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw InvalidInput("lambda must be >= 0");
  MatrixXd K = xt_vinv_x_;
  K.diagonal() += lambda * mask_;
  Eigen::LLT<MatrixXd> llt(K);
  bool singular = llt.info() != Eigen::Success;
  if (!singular && K.rows() > 0) {
    const VectorXd piv = llt.matrixLLT().diagonal().array().square();
    singular = piv.minCoeff() <= kSingularPivot * piv.maxCoeff();
  }
  if (singular) {
    std::ostringstream msg;
    msg << "X'V^-1 X + lambda P is singular at lambda = " << lambda
        << "; collinear columns need lambda > 0";
    throw SingularSystemError(msg.str());
  }
  return llt;
}

VectorXd RidgeSystem::beta(double lambda) const { return factorize(lambda).solve(xt_vinv_z_); }

RidgeSystem::Evaluation RidgeSystem::evaluate(double lambda) const {
  const auto llt = factorize(lambda);
  Evaluation ev;
  ev.beta = llt.solve(xt_vinv_z_);
  const double n = static_cast<double>(vinv_z_.size());
  ev.trace = n - trace_gamma_vinv_ + llt.solve(xt_vinv_gamma_vinv_x_).trace();
  const VectorXd v = vinv_z_ - vinv_x_ * ev.beta;  // V^-1 (z - X beta)
  ev.weighted_rss = (v.array().square() * gamma_.array()).sum();
  return ev;
}

VectorXd ridge_gls_beta(const DesignSet& designs, const ModelParams& params,
                        const VectorXd& gamma_diag, const VectorXd& z, double lambda,
                        const VectorXd& penalty_mask) {
  const MarginalSystem marginal(designs.layout, params, gamma_diag);
  return RidgeSystem(designs, marginal, z, penalty_mask).beta(lambda);
}

PosteriorMoments posterior_xi(const DesignSet& designs, const ModelParams& params,
                              const VectorXd& gamma_diag, const VectorXd& z, const VectorXd& beta) {
  if (beta.size() != designs.p()) throw InvalidInput("beta length differs from X columns");
  const MarginalSystem marginal(designs.layout, params, gamma_diag);
  return marginal.posterior(z - designs.X * beta);
}

HatMatrix hat_matrix_apply(const DesignSet& designs, const ModelParams& params,
                           const VectorXd& gamma_diag, double lambda,
                           const VectorXd& penalty_mask) {
  const Index n = designs.n();
  const MarginalSystem marginal(designs.layout, params, gamma_diag);
  if (penalty_mask.size() != designs.p()) {
    throw InvalidInput("penalty mask length differs from X columns");
  }
  const MatrixXd vinv = marginal.solve(MatrixXd(MatrixXd::Identity(n, n)));
  const MatrixXd vinv_x = vinv * designs.X;
  MatrixXd K = designs.X.transpose() * vinv_x;
  K = 0.5 * (K + K.transpose());
  K.diagonal() += lambda * penalty_mask;
  Eigen::LLT<MatrixXd> llt(K);
  if (llt.info() != Eigen::Success) throw SingularSystemError("X'V^-1 X + lambda P is singular");
  // H maps z to beta_lambda.
  const MatrixXd H = llt.solve(vinv_x.transpose());
  // S = I - Gamma V^-1 (I - X H)
  MatrixXd resid_map = MatrixXd::Identity(n, n) - designs.X * H;
  HatMatrix out;
  out.S = MatrixXd::Identity(n, n) - gamma_diag.asDiagonal() * (vinv * resid_map);
  out.trace = out.S.trace();
  return out;
}

}  // namespace panelglmm
