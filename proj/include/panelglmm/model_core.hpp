#pragma once

#include <Eigen/Dense>

#include <string>

#include "panelglmm/diagnostics.hpp"

namespace panelglmm {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

// |rho| must stay at most 1 - kRhoMargin so that the AR(1) covariance is invertible.
inline constexpr double kRhoMargin = 1e-4;
// Poisson/log linear predictors are clipped to [-kEtaClip, kEtaClip] before exp().
inline constexpr double kEtaClip = 30.0;

/// Dimensions of a balanced panel of N individuals each observed at T times.
///
/// Rows are ordered individuals-outer, time-inner: the row of individual i at
/// time t (both zero-based) is i * T + t. This ordering is what makes
/// U1 = I_N (x) 1_T and U2 = 1_N (x) I_T exact.
class PanelLayout {
 public:
  PanelLayout(Index n_individuals, Index n_times);

  Index n_individuals() const noexcept { return n_individuals_; }
  Index n_times() const noexcept { return n_times_; }
  Index n_rows() const noexcept { return n_individuals_ * n_times_; }
  // Number of random effects, N + T.
  Index n_effects() const noexcept { return n_individuals_ + n_times_; }

  Index row(Index individual, Index time) const noexcept { return individual * n_times_ + time; }
  Index individual_of(Index row) const noexcept { return row / n_times_; }
  Index time_of(Index row) const noexcept { return row % n_times_; }

  bool operator==(const PanelLayout&) const = default;

 private:
  Index n_individuals_;
  Index n_times_;
};

/// theta = (beta, sigma1_sq, sigma2_sq, rho).
///
/// sigma2_sq is the *innovation* variance of the AR(1) time effect, i.e. the
/// variance of nu_t in xi2[t+1] = rho * xi2[t] + nu_t. The marginal variance of
/// each xi2[t] is sigma2_sq / (1 - rho^2).
struct ModelParams {
  VectorXd beta;
  double sigma1_sq = 0.0;
  double sigma2_sq = 0.0;
  double rho = 0.0;

  // Throws InvalidInput / StationarityError.
  void validate() const;
};

enum class Family { poisson, gaussian };
enum class Link { log, identity };

/// Exponential family + link pair. Supported: poisson/log and gaussian/identity.
class FamilyLink {
 public:
  FamilyLink(Family family, Link link, double dispersion = 1.0);

  static FamilyLink poisson_log() { return {Family::poisson, Link::log}; }
  static FamilyLink gaussian_identity(double dispersion = 1.0) {
    return {Family::gaussian, Link::identity, dispersion};
  }
  // Parses "poisson"/"gaussian" and "log"/"identity"; throws InvalidInput.
  static FamilyLink from_names(const std::string& family, const std::string& link,
                               double dispersion = 1.0);

  Family family() const noexcept { return family_; }
  Link link() const noexcept { return link_; }
  double dispersion() const noexcept { return dispersion_; }
  std::string family_name() const;
  std::string link_name() const;

  double g(double mu) const;
  double g_prime(double mu) const;
  double inverse_link(double eta) const;
  // Var(Y | xi) as a function of the conditional mean.
  double variance(double mu) const;
  // Contribution of one observation to the deviance.
  double unit_deviance(double y, double mu) const;
  bool in_support(double y) const;

 private:
  Family family_;
  Link link_;
  double dispersion_;
};

/// Fixed-effect design X and the random-effect incidence matrices.
struct DesignSet {
  PanelLayout layout;
  MatrixXd X;   // n x p
  MatrixXd U1;  // n x N, I_N (x) 1_T
  MatrixXd U2;  // n x T, 1_N (x) I_T
  MatrixXd U;   // n x (N + T), [U1 | U2]

  Index n() const noexcept { return layout.n_rows(); }
  Index p() const noexcept { return X.cols(); }
  Index q() const noexcept { return layout.n_effects(); }
};

/// xi = (xi1', xi2')' in the same order as the columns of U = [U1 | U2].
struct RandomEffectState {
  VectorXd xi1;  // length N
  VectorXd xi2;  // length T

  static RandomEffectState zeros(const PanelLayout& layout);
  static RandomEffectState from_stacked(const PanelLayout& layout, const VectorXd& xi);
  VectorXd stacked() const;
};

DesignSet build_designs(const PanelLayout& layout, const MatrixXd& X_raw);

/// Stationary AR(1) covariance: (sigma2_sq / (1 - rho^2)) * rho^|t - s|.
MatrixXd ar1_covariance(Index n_times, double rho, double sigma2_sq);

/// Lower-triangular L with L L' = ar1_covariance(n_times, rho, sigma2_sq).
///
/// Closed form from the recursion: column 0 carries the stationary start
/// sqrt(sigma2_sq / (1 - rho^2)) * rho^t, column s > 0 carries sqrt(sigma2_sq) * rho^(t - s).
MatrixXd ar1_cholesky_factor(Index n_times, double rho, double sigma2_sq);

/// D = blockdiag(sigma1_sq * I_N, Sigma2(rho, sigma2_sq)).
MatrixXd random_effect_covariance(const PanelLayout& layout, const ModelParams& params);

/// Block-diagonal factor L of D (D = L L'), exact even when a variance is zero.
MatrixXd random_effect_factor(const PanelLayout& layout, const ModelParams& params);

// Structured products with U that avoid forming the dense incidence matrices.
VectorXd apply_u(const PanelLayout& layout, const VectorXd& xi);
MatrixXd apply_ut(const PanelLayout& layout, const MatrixXd& B);
VectorXd apply_ut(const PanelLayout& layout, const VectorXd& b);
// U' diag(w) U, a (N + T) x (N + T) matrix.
MatrixXd weighted_gram_u(const PanelLayout& layout, const VectorXd& w);

VectorXd linear_predictor(const DesignSet& designs, const ModelParams& params,
                          const RandomEffectState& xi);

/// mu = g^{-1}(eta). For poisson/log, eta is clipped to [-30, 30]; each clip is
/// reported through `diag` under the code "eta_clipped".
VectorXd mean_response(const VectorXd& eta, const FamilyLink& family, Diagnostics* diag = nullptr);

struct LogLikelihood {
  double value = 0.0;
  // True when a prior is singular and the value is the -infinity sentinel.
  bool degenerate = false;
};

/// Complete-data Gaussian log-likelihood of the linearized model:
/// log N(z; X beta + U xi, Gamma) + log N(xi1; 0, sigma1_sq I) + log N(xi2; 0, Sigma2).
LogLikelihood complete_loglik(const VectorXd& z, const DesignSet& designs, const ModelParams& params,
                              const RandomEffectState& xi, const VectorXd& gamma_diag);

}  // namespace panelglmm
