#include "panelglmm/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "panelglmm/errors.hpp"
#include "panelglmm/parallel.hpp"
#include "panelglmm/seeding.hpp"

namespace panelglmm {

namespace {

constexpr double kMaxPoissonMean = 1e6;

double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

bool singleton_grids(const SCConfig& sc) {
  return sc.s_grid.size() == 1 && sc.l_grid.size() == 1 && sc.k_grid.size() == 1;
}

}  // namespace

Index SimSpec::n_features() const {
  return true_params.beta.size() - (intercept ? 1 : 0);
}

void SimSpec::validate() const {
  true_params.validate();
  if (true_params.beta.size() == 0) {
    throw InvalidInput("true beta must have at least one entry");
  }
  if (!(x_correlation >= 0.0 && x_correlation < 1.0)) {
    throw InvalidInput("x_correlation must lie in [0, 1)");
  }
}

MatrixXd SimData::features(bool intercept) const {
  return intercept ? MatrixXd(X.rightCols(X.cols() - 1)) : X;
}

VectorXd gen_ar1_path(Index T, double rho, double sigma2_sq, std::mt19937_64& rng) {
  if (std::abs(rho) > 1.0 - kRhoMargin) {
    std::ostringstream msg;
    msg << "AR(1) coefficient rho = " << rho << " violates |rho| <= 1 - " << kRhoMargin;
    throw StationarityError(msg.str());
  }
  if (sigma2_sq < 0.0) throw InvalidInput("sigma2_sq must be non-negative");
  std::normal_distribution<double> nd;
  VectorXd path(T);
  if (T == 0) return path;
  const double innovation_sd = std::sqrt(sigma2_sq);
  path(0) = innovation_sd / std::sqrt(1.0 - rho * rho) * nd(rng);
  for (Index t = 1; t < T; ++t) path(t) = rho * path(t - 1) + innovation_sd * nd(rng);
  return path;
}

SimData gen_panel(const SimSpec& spec) {
  spec.validate();
  const PanelLayout& layout = spec.layout;
  const Index n = layout.n_rows();
  const Index p = spec.true_params.beta.size();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> nd;

  // Draw order is fixed: X row by row, then xi1, then xi2, then y.
  SimData d;
  d.X.resize(n, p);
  const double common_sd = std::sqrt(spec.x_correlation);
  const double own_sd = std::sqrt(1.0 - spec.x_correlation);
  const Index first = spec.intercept ? 1 : 0;
  for (Index row = 0; row < n; ++row) {
    if (spec.intercept) d.X(row, 0) = 1.0;
    const double common = spec.x_correlation > 0.0 ? nd(rng) : 0.0;
    for (Index j = first; j < p; ++j) d.X(row, j) = common_sd * common + own_sd * nd(rng);
  }

  d.xi = RandomEffectState::zeros(layout);
  const double sd1 = std::sqrt(spec.true_params.sigma1_sq);
  for (Index i = 0; i < layout.n_individuals(); ++i) d.xi.xi1(i) = sd1 * nd(rng);
  d.xi.xi2 = gen_ar1_path(layout.n_times(), spec.true_params.rho, spec.true_params.sigma2_sq, rng);

  d.eta = d.X * spec.true_params.beta + apply_u(layout, d.xi.stacked());
  d.y.resize(n);
  d.mu.resize(n);
  const FamilyLink& fam = spec.family;
  for (Index row = 0; row < n; ++row) {
    if (fam.family() == Family::poisson) {
      const double mu = std::exp(d.eta(row));
      if (!(mu <= kMaxPoissonMean)) {
        std::ostringstream msg;
        msg << "Poisson mean " << mu << " at row " << row << " exceeds " << kMaxPoissonMean
            << "; reduce beta or the random-effect variances";
        throw InvalidInput(msg.str());
      }
      d.mu(row) = mu;
      std::poisson_distribution<long long> pois(mu);
      d.y(row) = static_cast<double>(pois(rng));
    } else {
      d.mu(row) = fam.inverse_link(d.eta(row));
      d.y(row) = d.mu(row) + std::sqrt(fam.dispersion()) * nd(rng);
    }
  }
  return d;
}

std::string to_string(StudyKind kind) {
  switch (kind) {
    case StudyKind::single:
      return "single";
    case StudyKind::grid_nt:
      return "grid_nt";
    case StudyKind::grid_rho:
      return "grid_rho";
  }
  return "unknown";
}

std::string to_string(FitFlavor flavor) {
  return flavor == FitFlavor::ridge_em ? "ridge_em" : "sc_em";
}

void StudyConfig::validate() const {
  if (n_replicates < 1) throw ConfigError("n_replicates must be >= 1");
  if (threads < 1) throw ConfigError("threads must be >= 1");
  if (kind == StudyKind::grid_nt && nt_grid.empty()) throw ConfigError("grid_nt study needs an nt_grid");
  if (kind == StudyKind::grid_rho && rho_grid.empty()) throw ConfigError("grid_rho study needs a rho_grid");
  for (const auto& [N, T] : nt_grid) {
    if (N < 2 || T < 2) throw ConfigError("every (N, T) cell needs N >= 2 and T >= 2");
  }
  for (double rho : rho_grid) {
    if (!(std::abs(rho) <= 1.0 - kRhoMargin)) throw ConfigError("rho grid values must satisfy |rho| < 1");
  }
  try {
    base.validate();
  } catch (const InvalidInput& e) {
    throw ConfigError(e.what());
  }
  if (flavor == FitFlavor::sc_em) {
    if (!base.intercept) throw ConfigError("the sc_em flavor always fits an intercept; set intercept = true");
    if (base.n_features() < 1) throw ConfigError("the sc_em flavor needs at least one feature column");
    sc.validate();
  }
  fit.validate(base.true_params.beta.size());
}

std::vector<StudyCell> study_cells(const StudyConfig& config) {
  std::vector<StudyCell> cells;
  const StudyCell base{config.base.layout.n_individuals(), config.base.layout.n_times(),
                       config.base.true_params.rho};
  switch (config.kind) {
    case StudyKind::single:
      cells.push_back(base);
      break;
    case StudyKind::grid_nt:
      for (const auto& [N, T] : config.nt_grid) cells.push_back({N, T, base.rho});
      break;
    case StudyKind::grid_rho:
      for (double rho : config.rho_grid) cells.push_back({base.N, base.T, rho});
      break;
  }
  return cells;
}

std::vector<std::string> parameter_names(Index p) {
  std::vector<std::string> names;
  for (Index j = 0; j < p; ++j) names.push_back("beta[" + std::to_string(j) + "]");
  names.insert(names.end(), {"sigma1_sq", "sigma2_sq", "rho"});
  return names;
}

VectorXd parameter_vector(const ModelParams& params) {
  const Index p = params.beta.size();
  VectorXd v(p + 3);
  v.head(p) = params.beta;
  v(p) = params.sigma1_sq;
  v(p + 1) = params.sigma2_sq;
  v(p + 2) = params.rho;
  return v;
}

VectorXd true_parameter_vector(const StudyConfig& config, const StudyCell& cell) {
  ModelParams truth = config.base.true_params;
  truth.rho = cell.rho;
  return parameter_vector(truth);
}

StudyResult run_study(const StudyConfig& config) {
  config.validate();
  StudyResult result;
  result.config = config;
  result.cells = study_cells(config);
  const Index p = config.base.true_params.beta.size();
  result.parameter_names = parameter_names(p);

  const std::size_t reps = static_cast<std::size_t>(config.n_replicates);
  result.replicates.resize(result.cells.size() * reps);
  parallel_for(result.replicates.size(), config.threads, [&](std::size_t job) {
    const std::size_t c = job / reps;
    const std::size_t k = job % reps;
    const StudyCell& cell = result.cells[c];
    ReplicateResult& rr = result.replicates[job];
    rr.cell = static_cast<int>(c);
    rr.replicate = static_cast<int>(k);
    rr.seed = derive_seed(config.seed, {c, k});
    try {
      SimSpec spec = config.base;
      spec.layout = PanelLayout(cell.N, cell.T);
      spec.true_params.rho = cell.rho;
      spec.seed = rr.seed;
      const SimData data = gen_panel(spec);
      FitResult fr;
      if (config.flavor == FitFlavor::ridge_em) {
        FitConfig fc = config.fit;
        if (spec.intercept && !fc.intercept_column && !fc.penalty_mask) fc.intercept_column = 0;
        fr = fit(data.y, build_designs(spec.layout, data.X), spec.family, fc);
      } else {
        SCConfig sc = config.sc;
        sc.threads = 1;
        sc.seed = derive_seed(config.seed, {c, k, 1});
        const MatrixXd features = data.features(true);
        double s = sc.s_grid.front();
        double l = sc.l_grid.front();
        int K = sc.k_grid.front();
        if (!singleton_grids(sc)) {
          const CvResult cv = cv_tune(data.y, spec.layout, features, spec.family, sc, config.fit);
          s = cv.s;
          l = cv.l;
          K = cv.k;
        }
        fr = fit_hd(data.y, spec.layout, features, spec.family, s, l, K, sc, config.fit).fit;
      }
      rr.estimate = fr.params;
      rr.n_iter = fr.n_iter;
      rr.converged = fr.converged;
      rr.status = fr.status;
      rr.ok = true;
    } catch (const Error& e) {
      rr.ok = false;
      rr.error = e.what();
    }
  });

  for (std::size_t c = 0; c < result.cells.size(); ++c) {
    CellSummary s;
    s.cell = result.cells[c];
    const VectorXd truth = true_parameter_vector(config, s.cell);
    VectorXd sq = VectorXd::Zero(truth.size());
    std::vector<double> iterations;
    int converged = 0;
    int failed = 0;
    for (std::size_t k = 0; k < reps; ++k) {
      const ReplicateResult& rr = result.replicates[c * reps + k];
      if (!rr.ok) {
        ++failed;
        continue;
      }
      ++s.n_ok;
      sq += (parameter_vector(rr.estimate) - truth).array().square().matrix();
      iterations.push_back(rr.n_iter);
      converged += rr.converged ? 1 : 0;
    }
    s.mse.resize(static_cast<std::size_t>(truth.size()));
    for (Index j = 0; j < truth.size(); ++j) {
      s.mse[static_cast<std::size_t>(j)] =
          s.n_ok > 0 ? sq(j) / s.n_ok : std::numeric_limits<double>::quiet_NaN();
    }
    s.median_iterations = median(iterations);
    s.convergence_rate = static_cast<double>(converged) / static_cast<double>(reps);
    s.failure_rate = static_cast<double>(failed) / static_cast<double>(reps);
    result.summaries.push_back(std::move(s));
  }
  return result;
}

}  // namespace panelglmm
