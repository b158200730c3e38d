#pragma once

#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "panelglmm/gaussian_inference.hpp"
#include "panelglmm/linearize.hpp"

namespace panelglmm {

/// Settings for the profiled AR(1) M-step: a uniform grid over
/// [-1 + margin, 1 - margin] followed by golden-section refinement.
struct RhoSearch {
  int grid_points = 201;
  // Kept well below the outer tolerance so that rho does not jitter between iterations.
  double tol = 1e-10;
};

/// 0 followed by 50 log-spaced values from 1e-4 to 1e4.
std::vector<double> default_lambda_grid();

struct FitConfig {
  std::vector<double> lambda_grid = default_lambda_grid();
  int max_outer_iter = 200;
  int inner_em_iter = 1;
  double tol = 1e-6;
  RhoSearch rho_search;
  // Column of X that holds the intercept, if any. It is left unpenalized
  // unless penalize_intercept is set.
  std::optional<Index> intercept_column;
  bool penalize_intercept = false;
  // Explicit per-coefficient penalty weights; overrides the two fields above.
  std::optional<VectorXd> penalty_mask;
  // Abort when the working-model deviance rises this many outer iterations in a row.
  int divergence_window = 10;

  void validate(Index p) const;
  VectorXd penalty_mask_for(Index p) const;
};

enum class FitStatus { converged, max_iterations, diverged };
std::string to_string(FitStatus status);

struct FitResult {
  ModelParams params;
  RandomEffectState xi_hat;
  VectorXd eta;  // final X beta + U xi_hat
  VectorXd mu;
  std::vector<double> lambda_path;               // selected lambda per outer iteration
  std::vector<double> gcv_path;                  // GCV minimum per outer iteration
  std::vector<std::vector<double>> gcv_curves;   // full curve per outer iteration (NaN = excluded)
  std::vector<double> deviance_path;             // working-model deviance after each iteration
  std::vector<ModelParams> trace;                // theta after each outer iteration
  int n_iter = 0;
  bool converged = false;
  FitStatus status = FitStatus::max_iterations;
  std::vector<DiagnosticEvent> warnings;
};

/// GCV(lambda) = n^-1 ||z - S z||^2_{Gamma^-1} / (1 - n^-1 tr S)^2.
/// Throws DegenerateFitError when tr(S) >= n.
double gcv_score(const VectorXd& z, const MatrixXd& S, const VectorXd& gamma_diag);
// Same criterion from precomputed ingredients.
double gcv_from_parts(double weighted_rss, double trace, Index n);

struct LambdaSelection {
  double lambda = 0.0;
  double gcv = 0.0;
  std::vector<double> curve;  // one entry per grid point, NaN where excluded
};

/// Grid argmin of GCV; ties go to the larger lambda. Grid points whose system is
/// singular or whose hat matrix is degenerate are excluded. Throws
/// SelectionError when every point is excluded.
LambdaSelection select_lambda(const WorkingModel& wm, const DesignSet& designs,
                              const ModelParams& params, const FitConfig& config);

/// Sufficient statistics of Q_pen(., theta_t) for the linearized model.
struct QPenStats {
  PosteriorMoments posterior;
  double lambda = 0.0;
  double xi1_sq = 0.0;            // E[xi1' xi1 | z]
  MatrixXd xi2_second;            // E[xi2 xi2' | z], T x T
  VectorXd residual_target;       // z - U E[xi | z]
  double trace_gram_cov = 0.0;    // tr(U' W U Var[xi | z])
};

QPenStats penalized_e_step(const WorkingModel& wm, const DesignSet& designs,
                           const ModelParams& params, double lambda);
// Same statistics for an arbitrary fixed-effect predictor (used when X beta is
// not parameterized by the design, e.g. component models).
QPenStats penalized_e_step_offset(const WorkingModel& wm, const PanelLayout& layout,
                                  const ModelParams& params, const VectorXd& fixed_predictor,
                                  double lambda);

/// Q_pen(theta, theta_t) = E[L(theta; z, xi) | z, theta_t] - lambda/2 beta' P beta.
double q_pen(const QPenStats& stats, const WorkingModel& wm, const DesignSet& designs,
             const ModelParams& theta, double lambda, const VectorXd& penalty_mask);

/// Stationary AR(1) expected log-density, up to the -T/2 log(2 pi) constant:
/// -1/2 log det Sigma2 - 1/2 tr(Sigma2^{-1} S).
double ar1_expected_logdensity(const MatrixXd& xi2_second, double rho, double sigma2_sq);

struct Ar1Update {
  double rho = 0.0;
  double sigma2_sq = 0.0;
};

/// Maximizes ar1_expected_logdensity over (rho, sigma2_sq). sigma2_sq is profiled
/// out in closed form; rho is found by grid search plus golden-section
/// refinement. The current rho is kept if it scores at least as well.
Ar1Update profile_ar1(const MatrixXd& xi2_second, double current_rho, const RhoSearch& search);

/// Profiled objective in rho alone (sigma2_sq at its closed-form optimum).
double profiled_ar1_objective(const MatrixXd& xi2_second, double rho);

/// theta_{t+1} = argmax Q_pen(., theta_t).
ModelParams m_step(const QPenStats& stats, const DesignSet& designs, const WorkingModel& wm,
                   double lambda, const FitConfig& config, const ModelParams& current);

/// log N(z; X beta, U D U' + Gamma) - lambda/2 beta' P beta.
double penalized_marginal_loglik(const WorkingModel& wm, const DesignSet& designs,
                                 const ModelParams& params, double lambda,
                                 const VectorXd& penalty_mask);

/// -2 log N(z; fixed_predictor, U D U' + Gamma) for the linearized model.
double working_deviance(const WorkingModel& wm, const PanelLayout& layout, const ModelParams& params,
                        const VectorXd& fixed_predictor);

/// Flags divergence when the working-model deviance rises materially while the
/// parameter steps stop shrinking, for `window` outer iterations in a row. A
/// rising deviance with contracting steps is the normal approach to a fixed
/// point whose variance components are still moving.
class DivergenceGuard {
 public:
  explicit DivergenceGuard(int window) : window_(window) {}
  // Returns true once the guard trips.
  bool update(double deviance, double step);
  int rising() const noexcept { return rising_; }

 private:
  int window_;
  int rising_ = 0;
  double last_deviance_ = std::numeric_limits<double>::infinity();
  double last_step_ = std::numeric_limits<double>::infinity();
};

/// One inner sweep at fixed linearization and lambda. beta is first moved to its
/// penalized GLS value at the current variance parameters (the fixed point of
/// the beta update, so this only removes the slow intercept/random-effect-mean
/// drift of plain EM), then one E-step and one M-step update all of theta.
/// Each sweep does not decrease the penalized marginal log-likelihood.
ModelParams em_sweep(const WorkingModel& wm, const DesignSet& designs, const ModelParams& current,
                     double lambda, const FitConfig& config);

/// Runs `sweeps` E/M iterations at fixed linearization and lambda; returns theta
/// after each sweep (the first entry is the starting point).
std::vector<ModelParams> em_sweeps(const WorkingModel& wm, const DesignSet& designs,
                                   const ModelParams& start, double lambda, int sweeps,
                                   const FitConfig& config);

/// Unpenalized GLM ignoring random effects, with a small ridge if X is singular.
VectorXd glm_start(const VectorXd& y, const MatrixXd& X, const FamilyLink& family,
                   Diagnostics* diag = nullptr);

/// beta from glm_start, sigma1_sq = sigma2_sq = 0.1 Var(z - X beta), rho = 0.
ModelParams initial_params(const VectorXd& y, const DesignSet& designs, const FamilyLink& family,
                           Diagnostics* diag = nullptr);

/// Largest relative change between two parameter vectors, with an absolute
/// fallback for entries whose previous value is below 1e-8 in magnitude.
double relative_change(const ModelParams& previous, const ModelParams& next);

/// Penalized EM for the GLMM with an i.i.d. individual effect and an AR(1) time
/// effect. Each outer iteration linearizes around the current (beta, xi),
/// selects lambda by heteroscedastic GCV, runs `inner_em_iter` E/M sweeps and
/// refreshes xi = E[xi | z, theta_{t+1}].
FitResult fit(const VectorXd& y, const DesignSet& designs, const FamilyLink& family,
              const FitConfig& config, const std::optional<ModelParams>& init = std::nullopt);

}  // namespace panelglmm
