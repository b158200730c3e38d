#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "panelglmm/ridge_em.hpp"

namespace panelglmm {

/// Principal components of the centered, unit-variance columns of X.
///
/// With Xs = Us S Vs' (thin SVD, singular values above 1e-10 times the
/// largest), the component scores are C = Us S = Xs Vs and Xs = C Vs'.
/// A component f = C w therefore has per-variable weights Vs w on the
/// standardized scale.
struct ComponentBasis {
  MatrixXd C;                    // n x r
  MatrixXd orthonormal_scores;   // n x r, Us
  VectorXd singular_values;      // r
  MatrixXd loadings_back_map;    // r x p_kept, Vs'
  MatrixXd standardized;         // n x p_kept, Xs
  VectorXd center;               // per original column
  VectorXd scale;                // per original column (0 for dropped columns)
  std::vector<Index> kept_columns;
  Index n_original_columns = 0;

  Index rank() const noexcept { return C.cols(); }
  // Weights on the original columns of X for the component C w (dropped columns get 0).
  VectorXd original_weights(const VectorXd& w) const;
};

/// Constant columns are dropped and reported as "constant_column".
ComponentBasis build_component_basis(const MatrixXd& X_raw, Diagnostics* diag = nullptr);

/// phi(w) = (sum_j cor(x_j, C w)^(2 l))^(1 / l) over the retained columns.
/// Throws RelevanceError when C w has zero variance.
double structural_relevance(const VectorXd& w, const ComponentBasis& basis, double l);

struct SCConfig {
  std::vector<double> s_grid{0.9, 0.97, 0.99, 0.995};
  std::vector<double> l_grid{1.0, 4.0};
  std::vector<int> k_grid{1, 2, 3};
  int cv_folds = 5;
  int restarts = 20;
  // fit_hd searches from random starts at the first outer iteration and then
  // continues each component from its previous value; set this to search
  // globally at every outer iteration instead.
  bool restart_every_iteration = false;
  std::uint64_t seed = 20170607;
  double tol = 1e-8;
  int max_ascent_iter = 5000;
  // Closed-form leading eigenvector when s = 1 and l = 1.
  bool eigen_shortcut = true;
  int threads = 1;

  void validate() const;
};

/// The rank-h component problem at fixed linearization: maximize
///   (1 - s) Q(gamma_hat(w)) + s phi(w)
/// over w subject to |w| = 1 and C w orthogonal to every previous component.
/// Q(gamma_hat(w)) is the expected complete log-likelihood of the linearized
/// model when the fixed part is the weighted regression of z - U E[xi | z] on
/// an intercept, the previous components and f = C w.
class ComponentProblem {
 public:
  ComponentProblem(const ComponentBasis& basis, const WorkingModel& wm, const QPenStats& stats,
                   const PanelLayout& layout, const ModelParams& current,
                   const std::vector<VectorXd>& previous_components, double s, double l);

  double objective(const VectorXd& w) const;
  double expected_loglik(const VectorXd& w) const;
  double relevance(const VectorXd& w) const;

  double s() const noexcept { return s_; }
  double l() const noexcept { return l_; }
  Index dimension() const noexcept { return corr_map_.cols(); }
  Index feasible_dimension() const noexcept { return corr_map_.cols() - prev_.cols(); }

  // Internal coordinates y = S w (so that C w = Us y and the empirical inner
  // product of components is the Euclidean one).
  VectorXd to_internal(const VectorXd& w) const;
  VectorXd from_internal(const VectorXd& y) const;
  double objective_internal(const VectorXd& y) const;
  // Objective minus its w-independent part; used for convergence tests.
  double variable_part(const VectorXd& y) const;
  VectorXd gradient_internal(const VectorXd& y) const;
  // Removes the directions of previous components.
  VectorXd project(const VectorXd& y) const;
  // Leading eigenvector of the l = 1 relevance form on the feasible subspace.
  VectorXd relevance_eigenvector() const;

 private:
  double fit_gain(const VectorXd& y) const;
  double relevance_internal(const VectorXd& y) const;

  const ComponentBasis* basis_;
  double s_;
  double l_;
  MatrixXd corr_map_;     // p_kept x r; cor(x_j, Us y) = corr_map_.row(j) y / |y|
  MatrixXd prev_;         // r x (h - 1), orthonormal internal directions of previous components
  VectorXd cross_;        // Us~' W r~
  MatrixXd gram_;         // Us~' W Us~
  double constant_ = 0.0; // Q at the best fit on the intercept and previous components
};

struct ExtractedComponent {
  VectorXd w;        // unit norm, length r
  VectorXd f;        // C w
  double objective = 0.0;
  std::vector<double> ascent_path;  // objective after each accepted step of the winning start
};

/// Projected gradient ascent on the sphere from `restarts` seeded random starts
/// (plus `warm_start` when given); the best end point wins. Reports
/// "component_no_improvement" when no start improves on the best starting
/// value by more than tol.
ExtractedComponent extract_component(const ComponentProblem& problem, const SCConfig& config,
                                     std::uint64_t seed, const VectorXd* warm_start = nullptr,
                                     Diagnostics* diag = nullptr);

struct HdFitResult {
  // params.beta has length p + 1: the intercept followed by one coefficient per
  // original column of X (0 for dropped constant columns).
  FitResult fit;
  double s = 0.0;
  double l = 1.0;
  int n_components = 0;
  MatrixXd component_weights;     // r x K, the unit-norm w_h
  MatrixXd variable_loadings;     // p x K, original-scale weights of each component
  MatrixXd components;            // n x K, f_h
  VectorXd gammas;                // K regression coefficients on the components
  double intercept = 0.0;
  VectorXd beta;                  // p coefficients on the original columns
};

/// Regularized EM where the beta update is replaced by K supervised components
/// built on the PCA basis of X, followed by the weighted regression of the
/// working residual on them. X holds only explanatory columns: the intercept
/// is always part of the model.
HdFitResult fit_hd(const VectorXd& y, const PanelLayout& layout, const MatrixXd& X,
                   const FamilyLink& family, double s, double l, int n_components,
                   const SCConfig& sc_config, const FitConfig& fit_config);

struct CvRow {
  double s = 0.0;
  double l = 1.0;
  int k = 1;
  int fold = 0;
  Index n_heldout = 0;
  double deviance = 0.0;  // +inf when the training fit failed
  bool ok = true;
};

struct CvResult {
  double s = 0.0;
  double l = 1.0;
  int k = 1;
  double best_score = std::numeric_limits<double>::infinity();
  std::vector<CvRow> table;  // |s grid| * |l grid| * |K grid| * folds rows
};

/// Folds of whole individuals (seeded assignment).
std::vector<int> individual_folds(Index n_individuals, int folds, std::uint64_t seed);

/// Out-of-fold predictive deviance with xi1 = 0 for held-out individuals and
/// xi2 at the training posterior mean.
// Rows are ordered individual-major with n_times rows per held-out individual.
double heldout_deviance(const HdFitResult& model, const VectorXd& y_test, const MatrixXd& X_test,
                        Index n_times, const FamilyLink& family);

/// Grid search over (s, l, K) scored by total out-of-fold deviance; ties go to
/// the earliest candidate in (s, l, K) order.
CvResult cv_tune(const VectorXd& y, const PanelLayout& layout, const MatrixXd& X,
                 const FamilyLink& family, const SCConfig& sc_config, const FitConfig& fit_config);

/// Rows of individuals in `individuals` (in that order), all times.
MatrixXd panel_rows(const MatrixXd& M, const PanelLayout& layout,
                    const std::vector<Index>& individuals);
VectorXd panel_rows(const VectorXd& v, const PanelLayout& layout,
                    const std::vector<Index>& individuals);

}  // namespace panelglmm
