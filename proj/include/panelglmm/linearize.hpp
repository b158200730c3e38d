#pragma once

#include "panelglmm/model_core.hpp"

namespace panelglmm {

// Poisson/log means are floored here before g, g' and Gamma are evaluated.
inline constexpr double kMuFloor = 1e-8;

/// Linearized model z = X beta + U xi + e with Var(e | xi) = diag(gamma_diag).
struct WorkingModel {
  VectorXd z;
  VectorXd gamma_diag;
  VectorXd mu;
  VectorXd eta;
};

/// z_i = g(mu_i) + (y_i - mu_i) g'(mu_i). Throws LinearizationError naming the
/// first row that produces a non-finite value.
VectorXd working_response(const VectorXd& y, const VectorXd& mu, const FamilyLink& family);

/// Gamma_ii = g'(mu_i)^2 Var(Y_i | xi); equals 1 / mu_i for poisson/log.
VectorXd working_variance(const VectorXd& mu, const FamilyLink& family);

/// Builds the working model around the linear predictor eta.
WorkingModel linearize(const VectorXd& y, const VectorXd& eta, const FamilyLink& family,
                       Diagnostics* diag = nullptr);

/// Total deviance of y under conditional means mu.
double deviance(const VectorXd& y, const VectorXd& mu, const FamilyLink& family);

}  // namespace panelglmm
