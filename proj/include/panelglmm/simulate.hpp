#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "panelglmm/sc_em.hpp"

namespace panelglmm {

/// Generative settings for one synthetic panel.
struct SimSpec {
  PanelLayout layout{2, 2};
  ModelParams true_params;
  FamilyLink family = FamilyLink::poisson_log();
  // By default every column of X is standard normal. When set, the first
  // column is all ones and true_params.beta(0) is the intercept.
  bool intercept = false;
  // Pairwise correlation of the generated (non-intercept) columns.
  double x_correlation = 0.0;
  std::uint64_t seed = 1;

  Index n_features() const;
  void validate() const;
};

struct SimData {
  VectorXd y;
  MatrixXd X;  // full design, including the intercept column when requested
  RandomEffectState xi;
  VectorXd eta;
  VectorXd mu;

  // X without the intercept column.
  MatrixXd features(bool intercept) const;
};

/// Stationary AR(1) path: the first entry is drawn from N(0, sigma2_sq / (1 - rho^2)).
VectorXd gen_ar1_path(Index T, double rho, double sigma2_sq, std::mt19937_64& rng);

/// Draws X, xi and y. Throws InvalidInput when a Poisson mean exceeds 1e6.
SimData gen_panel(const SimSpec& spec);

enum class StudyKind { single, grid_nt, grid_rho };
enum class FitFlavor { ridge_em, sc_em };
std::string to_string(StudyKind kind);
std::string to_string(FitFlavor flavor);

struct StudyConfig {
  StudyKind kind = StudyKind::single;
  std::vector<std::pair<Index, Index>> nt_grid;  // grid_nt cells
  std::vector<double> rho_grid;                   // grid_rho cells
  SimSpec base;           // layout and rho are overridden per cell
  int n_replicates = 20;
  FitFlavor flavor = FitFlavor::ridge_em;
  FitConfig fit;
  // sc_em flavor: (s, l, K) are tuned by cross-validation when a grid has more
  // than one value, otherwise the single values are used directly.
  SCConfig sc;
  std::uint64_t seed = 1;
  int threads = 1;

  void validate() const;
};

struct StudyCell {
  Index N = 0;
  Index T = 0;
  double rho = 0.0;
};

struct ReplicateResult {
  int cell = 0;
  int replicate = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  ModelParams estimate;
  int n_iter = 0;
  bool converged = false;
  FitStatus status = FitStatus::max_iterations;
};

struct CellSummary {
  StudyCell cell;
  std::vector<double> mse;  // one per parameter, over successful replicates
  double median_iterations = 0.0;
  double convergence_rate = 0.0;
  double failure_rate = 0.0;
  int n_ok = 0;
};

struct StudyResult {
  StudyConfig config;
  std::vector<std::string> parameter_names;  // beta[0..p-1], sigma1_sq, sigma2_sq, rho
  std::vector<StudyCell> cells;
  std::vector<CellSummary> summaries;
  std::vector<ReplicateResult> replicates;  // cell-major, then replicate
};

std::vector<StudyCell> study_cells(const StudyConfig& config);
// True parameter vector of a cell, in parameter_names order.
VectorXd true_parameter_vector(const StudyConfig& config, const StudyCell& cell);
VectorXd parameter_vector(const ModelParams& params);
std::vector<std::string> parameter_names(Index p);

/// Simulates and fits every (cell, replicate); replicate failures are recorded.
StudyResult run_study(const StudyConfig& config);

}  // namespace panelglmm
