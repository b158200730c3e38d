#pragma once

#include <Eigen/Cholesky>

#include "panelglmm/model_core.hpp"

namespace panelglmm {

/// Conditional moments of xi given the working response.
struct PosteriorMoments {
  VectorXd mean_xi;            // E[xi | z], length N + T
  MatrixXd cov_xi;             // Var[xi | z]
  MatrixXd second_moment_xi;   // E[xi xi' | z] = cov + mean mean'
};

/// Structured representation of the marginal covariance V = U D U' + Gamma.
///
/// With D = L L' (L from random_effect_factor) and W = Gamma^{-1}, everything
/// is routed through the (N + T) x (N + T) matrix M = I + L' U' W U L, which is
/// positive definite for any PSD D. This handles zero variance components
/// exactly, without jitter:
///   V^{-1}      = W - W U L M^{-1} L' U' W
///   log det V   = log det Gamma + log det M
///   E[xi | r]   = L M^{-1} L' U' W r
///   Var[xi | r] = L M^{-1} L'
class MarginalSystem {
 public:
  MarginalSystem(const PanelLayout& layout, const ModelParams& params, const VectorXd& gamma_diag);

  const PanelLayout& layout() const noexcept { return layout_; }
  const VectorXd& weights() const noexcept { return weights_; }
  const VectorXd& gamma_diag() const noexcept { return gamma_; }
  const MatrixXd& factor() const noexcept { return factor_; }

  // V^{-1} B.
  MatrixXd solve(const MatrixXd& B) const;
  VectorXd solve(const VectorXd& b) const;
  double log_det() const noexcept { return log_det_; }
  // tr(Gamma V^{-1}).
  double trace_gamma_vinv() const noexcept { return trace_gamma_vinv_; }

  // Posterior of xi given the residual z - X beta.
  PosteriorMoments posterior(const VectorXd& residual) const;

 private:
  PanelLayout layout_;
  VectorXd gamma_;
  VectorXd weights_;
  MatrixXd factor_;
  Eigen::LLT<MatrixXd> inner_;
  double log_det_ = 0.0;
  double trace_gamma_vinv_ = 0.0;
};

/// Dense V = U D U' + Gamma. Throws NumericalError (carrying the minimum
/// eigenvalue) when V is not numerically positive definite.
MatrixXd marginal_covariance(const DesignSet& designs, const ModelParams& params,
                             const VectorXd& gamma_diag);

/// Quantities of the ridge-GLS problem that do not depend on lambda. One
/// instance serves every lambda of a GCV grid.
class RidgeSystem {
 public:
  RidgeSystem(const DesignSet& designs, const MarginalSystem& marginal, const VectorXd& z,
              const VectorXd& penalty_mask);

  struct Evaluation {
    VectorXd beta;
    double trace = 0.0;           // tr(S_lambda)
    double weighted_rss = 0.0;    // ||z - S_lambda z||^2 in the Gamma^{-1} metric
  };

  // beta = (X' V^-1 X + lambda P)^{-1} X' V^-1 z. Throws SingularSystemError.
  VectorXd beta(double lambda) const;
  // Beta plus the GCV ingredients: since U D U' V^-1 = I - Gamma V^-1, the
  // residual z - S z equals Gamma V^-1 (z - X beta).
  Evaluation evaluate(double lambda) const;

  Index n() const noexcept { return vinv_z_.size(); }

 private:
  Eigen::LLT<MatrixXd> factorize(double lambda) const;

  VectorXd gamma_;
  VectorXd mask_;
  MatrixXd vinv_x_;
  VectorXd vinv_z_;
  MatrixXd xt_vinv_x_;
  VectorXd xt_vinv_z_;
  MatrixXd xt_vinv_gamma_vinv_x_;
  double trace_gamma_vinv_ = 0.0;
};

VectorXd ridge_gls_beta(const DesignSet& designs, const ModelParams& params,
                        const VectorXd& gamma_diag, const VectorXd& z, double lambda,
                        const VectorXd& penalty_mask);

/// E[xi | z] = D U' V^{-1} (z - X beta), Var[xi | z] = D - D U' V^{-1} U D.
/// A zero variance component yields mean 0 and covariance 0 for its block.
PosteriorMoments posterior_xi(const DesignSet& designs, const ModelParams& params,
                              const VectorXd& gamma_diag, const VectorXd& z, const VectorXd& beta);

struct HatMatrix {
  MatrixXd S;
  double trace = 0.0;
};

/// The linear map z -> X beta_lambda + U E[xi | z, beta_lambda], returned densely.
HatMatrix hat_matrix_apply(const DesignSet& designs, const ModelParams& params,
                           const VectorXd& gamma_diag, double lambda,
                           const VectorXd& penalty_mask);

}  // namespace panelglmm
