#include "panelglmm/sc_em.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "panelglmm/errors.hpp"
#include "panelglmm/parallel.hpp"
#include "panelglmm/seeding.hpp"

namespace panelglmm {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kRankTol = 1e-10;
// Loose tolerance used to rank the random starts before polishing the best one.
constexpr double kScreeningTol = 1e-4;

// Expected log prior of xi at the current variance parameters (w-independent).
double expected_log_prior(const QPenStats& st, const PanelLayout& layout, const ModelParams& theta) {
  double q = 0.0;
  const double N = static_cast<double>(layout.n_individuals());
  if (theta.sigma1_sq > 0.0) {
    q += -0.5 * N * (kLog2Pi + std::log(theta.sigma1_sq)) - 0.5 * st.xi1_sq / theta.sigma1_sq;
  }
  if (theta.sigma2_sq > 0.0) {
    q += -0.5 * static_cast<double>(layout.n_times()) * kLog2Pi +
         ar1_expected_logdensity(st.xi2_second, theta.rho, theta.sigma2_sq);
  }
  return q;
}

// Weighted least squares of `target` on the columns of B.
VectorXd weighted_ls(const MatrixXd& B, const VectorXd& w, const VectorXd& target) {
  const MatrixXd G = B.transpose() * w.asDiagonal() * B;
  Eigen::LDLT<MatrixXd> ldlt(G);
  if (ldlt.info() != Eigen::Success) throw SingularSystemError("component regression is singular");
  return ldlt.solve(B.transpose() * w.cwiseProduct(target));
}

VectorXd random_unit(Index r, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  VectorXd v(r);
  for (Index k = 0; k < r; ++k) v(k) = nd(rng);
  return v;
}

struct AscentOutcome {
  VectorXd y;
  double value = kNegInf;
};

// Projected gradient ascent along great circles of the feasible sphere, with
// Armijo backtracking on the step angle.
AscentOutcome ascend(const ComponentProblem& pb, VectorXd y, double tol, int max_iter,
                     std::vector<double>* path) {
  double J = pb.objective_internal(y);
  double angle = 0.25;
  for (int it = 0; it < max_iter; ++it) {
    const VectorXd g = pb.project(pb.gradient_internal(y));
    VectorXd t = g - y.dot(g) * y;
    const double tn = t.norm();
    const double scale = std::max(1.0, std::abs(pb.variable_part(y)));
    if (!(tn > tol * scale)) break;
    t /= tn;
    angle = std::min(2.0 * angle, M_PI / 4.0);
    const double previous = J;
    bool accepted = false;
    while (angle > 1e-15) {
      VectorXd cand = std::cos(angle) * y + std::sin(angle) * t;
      cand = pb.project(cand);
      cand.normalize();
      const double Jc = pb.objective_internal(cand);
      if (Jc >= J + 1e-4 * angle * tn) {
        y = std::move(cand);
        J = Jc;
        accepted = true;
        break;
      }
      angle *= 0.5;
    }
    if (!accepted) break;
    if (path != nullptr) path->push_back(J);
    if (J - previous < tol * scale) break;
  }
  return {std::move(y), J};
}

}  // namespace

VectorXd ComponentBasis::original_weights(const VectorXd& w) const {
  const VectorXd std_weights = loadings_back_map.transpose() * w;
  VectorXd out = VectorXd::Zero(n_original_columns);
  for (std::size_t k = 0; k < kept_columns.size(); ++k) {
    const Index j = kept_columns[k];
    out(j) = std_weights(static_cast<Index>(k)) / scale(j);
  }
  return out;
}

ComponentBasis build_component_basis(const MatrixXd& X_raw, Diagnostics* diag) {
  const Index n = X_raw.rows();
  const Index p = X_raw.cols();
  if (n < 2) throw InvalidInput("component basis needs at least two rows");
  ComponentBasis b;
  b.n_original_columns = p;
  b.center = X_raw.colwise().mean().transpose();
  b.scale = VectorXd::Zero(p);
  for (Index j = 0; j < p; ++j) {
    const double sd =
        std::sqrt((X_raw.col(j).array() - b.center(j)).square().sum() / static_cast<double>(n));
    if (sd <= 1e-12 * std::max(1.0, std::abs(b.center(j)))) {
      std::ostringstream msg;
      msg << "column " << j << " has zero variance and is dropped";
      warn(diag, "constant_column", msg.str());
      continue;
    }
    b.scale(j) = sd;
    b.kept_columns.push_back(j);
  }
  const Index pk = static_cast<Index>(b.kept_columns.size());
  if (pk == 0) throw InvalidInput("every column of X is constant");
  b.standardized.resize(n, pk);
  for (Index k = 0; k < pk; ++k) {
    const Index j = b.kept_columns[static_cast<std::size_t>(k)];
    b.standardized.col(k) = (X_raw.col(j).array() - b.center(j)) / b.scale(j);
  }
  const Eigen::BDCSVD<MatrixXd> svd(b.standardized, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const VectorXd sv = svd.singularValues();
  Index r = 0;
  while (r < sv.size() && sv(r) > kRankTol * sv(0)) ++r;
  b.singular_values = sv.head(r);
  b.orthonormal_scores = svd.matrixU().leftCols(r);
  b.C = b.orthonormal_scores * b.singular_values.asDiagonal();
  b.loadings_back_map = svd.matrixV().leftCols(r).transpose();
  return b;
}

double structural_relevance(const VectorXd& w, const ComponentBasis& basis, double l) {
  if (w.size() != basis.rank()) throw InvalidInput("w length differs from the basis rank");
  if (!(l >= 1.0)) throw InvalidInput("relevance exponent l must be >= 1");
  const VectorXd f = basis.C * w;
  const double fn = f.norm();
  if (!(fn > 0.0)) throw RelevanceError("component has zero variance");
  const double n = static_cast<double>(f.size());
  const VectorXd cor = basis.standardized.transpose() * f / (std::sqrt(n) * fn);
  const VectorXd c = cor.array().square();
  const double cmax = c.maxCoeff();
  if (cmax == 0.0) return 0.0;
  return cmax * std::pow((c / cmax).array().pow(l).sum(), 1.0 / l);
}

void SCConfig::validate() const {
  if (s_grid.empty() || l_grid.empty() || k_grid.empty()) throw ConfigError("SC grids must be non-empty");
  for (double s : s_grid) {
    if (!(s >= 0.0 && s <= 1.0)) throw ConfigError("s must lie in [0, 1]");
  }
  for (double l : l_grid) {
    if (!(l >= 1.0) || !std::isfinite(l)) throw ConfigError("l must be >= 1");
  }
  for (int k : k_grid) {
    if (k < 1) throw ConfigError("number of components K must be >= 1");
  }
  if (cv_folds < 2) throw ConfigError("cv_folds must be >= 2");
  if (restarts < 1) throw ConfigError("restarts must be >= 1");
  if (!(tol > 0.0)) throw ConfigError("component tolerance must be > 0");
  if (max_ascent_iter < 1) throw ConfigError("max_ascent_iter must be >= 1");
}

ComponentProblem::ComponentProblem(const ComponentBasis& basis, const WorkingModel& wm,
                                   const QPenStats& stats, const PanelLayout& layout,
                                   const ModelParams& current,
                                   const std::vector<VectorXd>& previous_components, double s,
                                   double l)
    : basis_(&basis), s_(s), l_(l) {
  if (!(s >= 0.0 && s <= 1.0)) throw InvalidInput("s must lie in [0, 1]");
  if (!(l >= 1.0)) throw InvalidInput("l must be >= 1");
  const Index n = basis.C.rows();
  const Index r = basis.rank();
  if (wm.z.size() != n) throw InvalidInput("working model and basis row counts differ");
  const MatrixXd& Us = basis.orthonormal_scores;
  const VectorXd w = wm.gamma_diag.cwiseInverse();

  MatrixXd B(n, 1 + static_cast<Index>(previous_components.size()));
  B.col(0).setOnes();
  for (std::size_t h = 0; h < previous_components.size(); ++h) {
    B.col(static_cast<Index>(h) + 1) = previous_components[h];
  }
  const MatrixXd BtW = B.transpose() * w.asDiagonal();
  const Eigen::LDLT<MatrixXd> ldlt(BtW * B);
  const MatrixXd Us_tilde = Us - B * ldlt.solve(BtW * Us);
  const VectorXd r_tilde = stats.residual_target - B * ldlt.solve(BtW * stats.residual_target);

  cross_ = Us_tilde.transpose() * w.cwiseProduct(r_tilde);
  gram_ = Us_tilde.transpose() * w.asDiagonal() * Us_tilde;
  gram_ = 0.5 * (gram_ + gram_.transpose());

  constant_ = -0.5 * static_cast<double>(n) * kLog2Pi - 0.5 * wm.gamma_diag.array().log().sum() -
              0.5 * ((r_tilde.array().square() * w.array()).sum() + stats.trace_gram_cov) +
              expected_log_prior(stats, layout, current);

  corr_map_ = basis.standardized.transpose() * Us / std::sqrt(static_cast<double>(n));

  MatrixXd prev(r, static_cast<Index>(previous_components.size()));
  for (std::size_t h = 0; h < previous_components.size(); ++h) {
    prev.col(static_cast<Index>(h)) = Us.transpose() * previous_components[h];
  }
  if (prev.cols() > 0) {
    const Eigen::HouseholderQR<MatrixXd> qr(prev);
    prev_ = qr.householderQ() * MatrixXd::Identity(r, prev.cols());
  } else {
    prev_.resize(r, 0);
  }
}

VectorXd ComponentProblem::to_internal(const VectorXd& w) const {
  return basis_->singular_values.cwiseProduct(w);
}

VectorXd ComponentProblem::from_internal(const VectorXd& y) const {
  return y.cwiseQuotient(basis_->singular_values);
}

VectorXd ComponentProblem::project(const VectorXd& y) const {
  if (prev_.cols() == 0) return y;
  return y - prev_ * (prev_.transpose() * y);
}

double ComponentProblem::fit_gain(const VectorXd& y) const {
  const double den = y.dot(gram_ * y);
  if (!(den > 1e-14 * y.squaredNorm() * std::max(1.0, gram_.diagonal().maxCoeff()))) return kNegInf;
  const double num = cross_.dot(y);
  return 0.5 * num * num / den;
}

double ComponentProblem::relevance_internal(const VectorXd& y) const {
  const double ny2 = y.squaredNorm();
  if (!(ny2 > 0.0)) throw RelevanceError("component has zero variance");
  const VectorXd c = (corr_map_ * y).array().square() / ny2;
  const double cmax = c.maxCoeff();
  if (cmax == 0.0) return 0.0;
  return cmax * std::pow((c / cmax).array().pow(l_).sum(), 1.0 / l_);
}

double ComponentProblem::variable_part(const VectorXd& y) const {
  double v = 0.0;
  if (s_ < 1.0) v += (1.0 - s_) * fit_gain(y);
  if (s_ > 0.0) v += s_ * relevance_internal(y);
  return v;
}

double ComponentProblem::objective_internal(const VectorXd& y) const {
  return (1.0 - s_) * constant_ + variable_part(y);
}

VectorXd ComponentProblem::gradient_internal(const VectorXd& y) const {
  VectorXd g = VectorXd::Zero(y.size());
  if (s_ < 1.0) {
    const VectorXd Gy = gram_ * y;
    const double den = y.dot(Gy);
    const double num = cross_.dot(y);
    if (den > 0.0) g += (1.0 - s_) * ((num / den) * cross_ - (num * num / (den * den)) * Gy);
  }
  if (s_ > 0.0) {
    const double ny2 = y.squaredNorm();
    const VectorXd u = corr_map_ * y;
    const VectorXd c = u.array().square() / ny2;
    const double phi = relevance_internal(y);
    if (phi > 0.0) {
      // d phi / d c_j = (c_j / phi)^(l - 1)
      const VectorXd weight = (c / phi).array().pow(l_ - 1.0);
      const VectorXd wu = weight.cwiseProduct(u);
      const VectorXd grad = (2.0 / ny2) * (corr_map_.transpose() * wu) -
                            (2.0 / (ny2 * ny2)) * wu.dot(u) * y;
      g += s_ * grad;
    }
  }
  return g;
}

double ComponentProblem::objective(const VectorXd& w) const {
  return objective_internal(to_internal(w));
}

double ComponentProblem::expected_loglik(const VectorXd& w) const {
  return constant_ + fit_gain(to_internal(w));
}

double ComponentProblem::relevance(const VectorXd& w) const {
  return relevance_internal(to_internal(w));
}

VectorXd ComponentProblem::relevance_eigenvector() const {
  const Index r = corr_map_.cols();
  MatrixXd A = corr_map_.transpose() * corr_map_;
  if (prev_.cols() > 0) {
    const MatrixXd P = MatrixXd::Identity(r, r) - prev_ * prev_.transpose();
    A = P * A * P;
  }
  A = 0.5 * (A + A.transpose());
  const Eigen::SelfAdjointEigenSolver<MatrixXd> es(A);
  VectorXd y = project(es.eigenvectors().col(r - 1));
  return y.normalized();
}

ExtractedComponent extract_component(const ComponentProblem& problem, const SCConfig& config,
                                     std::uint64_t seed, const VectorXd* warm_start,
                                     Diagnostics* diag) {
  const Index r = problem.dimension();
  const auto finish = [&](const VectorXd& y, std::vector<double> path) {
    ExtractedComponent out;
    out.w = problem.from_internal(y).normalized();
    out.objective = problem.objective(out.w);
    out.ascent_path = std::move(path);
    return out;
  };

  if (config.eigen_shortcut && problem.s() == 1.0 && problem.l() == 1.0) {
    const VectorXd y = problem.relevance_eigenvector();
    return finish(y, {problem.objective_internal(y)});
  }

  std::vector<VectorXd> starts;
  std::mt19937_64 rng(seed);
  for (int k = 0; k < config.restarts; ++k) starts.push_back(random_unit(r, rng));
  const std::size_t n_random = starts.size();
  if (warm_start != nullptr && warm_start->size() == r) starts.push_back(problem.to_internal(*warm_start));

  struct Run {
    VectorXd y;
    double start_value = kNegInf;
    double value = kNegInf;
    std::vector<double> path;
  };
  std::vector<Run> runs(starts.size());
  const double screening_tol = std::max(config.tol, kScreeningTol);
  parallel_for(starts.size(), config.threads, [&](std::size_t k) {
    Run& run = runs[k];
    VectorXd y = problem.project(starts[k]);
    if (!(y.norm() > 1e-12)) return;
    y.normalize();
    run.start_value = problem.objective_internal(y);
    run.path.push_back(run.start_value);
    AscentOutcome o = ascend(problem, std::move(y), screening_tol, config.max_ascent_iter, &run.path);
    run.y = std::move(o.y);
    run.value = o.value;
  });

  std::size_t best = runs.size();
  double best_random_start = kNegInf;
  double worst_random_start = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < runs.size(); ++k) {
    if (k < n_random) {
      best_random_start = std::max(best_random_start, runs[k].start_value);
      worst_random_start = std::min(worst_random_start, runs[k].start_value);
    }
    if (runs[k].y.size() == 0 || !std::isfinite(runs[k].value)) continue;
    if (best == runs.size() || runs[k].value > runs[best].value) best = k;
  }
  if (best == runs.size()) throw RelevanceError("no feasible start for the component problem");

  Run& winner = runs[best];
  AscentOutcome polished =
      ascend(problem, winner.y, config.tol, config.max_ascent_iter, &winner.path);
  // A flat objective (e.g. a one-dimensional feasible set) has nothing to improve.
  const bool flat = !(best_random_start - worst_random_start > config.tol);
  if (!flat && !(polished.value - best_random_start > config.tol)) {
    warn(diag, "component_no_improvement",
         "no restart improved on the best random start of the component problem");
  }
  return finish(polished.y, std::move(winner.path));
}

namespace {

struct ComponentFit {
  std::vector<VectorXd> weights;  // w_h
  std::vector<VectorXd> scores;   // f_h
  VectorXd coef;                  // intercept followed by gamma_h
  VectorXd fixed;                 // fitted fixed predictor
};

MatrixXd component_design(const std::vector<VectorXd>& scores, Index n) {
  MatrixXd B(n, 1 + static_cast<Index>(scores.size()));
  B.col(0).setOnes();
  for (std::size_t h = 0; h < scores.size(); ++h) B.col(static_cast<Index>(h) + 1) = scores[h];
  return B;
}

void regress_components(ComponentFit& cf, const QPenStats& st, const WorkingModel& wm) {
  const MatrixXd B = component_design(cf.scores, wm.z.size());
  cf.coef = weighted_ls(B, wm.gamma_diag.cwiseInverse(), st.residual_target);
  cf.fixed = B * cf.coef;
}

ModelParams variance_step(const QPenStats& st, const PanelLayout& layout, const ModelParams& current,
                          const RhoSearch& search) {
  ModelParams next = current;
  next.sigma1_sq = st.xi1_sq / static_cast<double>(layout.n_individuals());
  const Ar1Update ar = profile_ar1(st.xi2_second, current.rho, search);
  next.rho = ar.rho;
  next.sigma2_sq = ar.sigma2_sq;
  return next;
}

void check_support(const VectorXd& y, const FamilyLink& family) {
  for (Index i = 0; i < y.size(); ++i) {
    if (!family.in_support(y(i))) {
      std::ostringstream msg;
      msg << "y[" << i << "] = " << y(i) << " is outside the " << family.family_name() << " support";
      throw InvalidInput(msg.str());
    }
  }
}

}  // namespace

HdFitResult fit_hd(const VectorXd& y, const PanelLayout& layout, const MatrixXd& X,
                   const FamilyLink& family, double s, double l, int n_components,
                   const SCConfig& sc_config, const FitConfig& fit_config) {
  sc_config.validate();
  if (n_components < 1) throw ConfigError("number of components K must be >= 1");
  if (!(s >= 0.0 && s <= 1.0)) throw ConfigError("s must lie in [0, 1]");
  if (!(l >= 1.0)) throw ConfigError("l must be >= 1");
  if (fit_config.max_outer_iter < 1 || fit_config.inner_em_iter < 1 || !(fit_config.tol > 0.0)) {
    throw ConfigError("max_outer_iter, inner_em_iter and tol must be positive");
  }
  if (y.size() != layout.n_rows() || X.rows() != layout.n_rows()) {
    throw InvalidInput("y and X must have one row per panel cell");
  }
  check_support(y, family);

  Diagnostics diag;
  const ComponentBasis basis = build_component_basis(X, &diag);
  int K = n_components;
  if (K > basis.rank()) {
    std::ostringstream msg;
    msg << "K = " << K << " exceeds the rank " << basis.rank() << " of X; using " << basis.rank();
    diag.warn("components_clipped", msg.str());
    K = static_cast<int>(basis.rank());
  }

  const Index n = layout.n_rows();
  const Index p = X.cols();
  const double b0 = family.g(std::max(y.mean(), kMuFloor));
  VectorXd fixed = VectorXd::Constant(n, b0);

  ModelParams theta;
  theta.beta = VectorXd::Zero(p + 1);
  theta.beta(0) = b0;
  {
    const WorkingModel wm0 = linearize(y, fixed, family, &diag);
    const VectorXd resid = wm0.z - fixed;
    const double var = (resid.array() - resid.mean()).square().sum() / static_cast<double>(n - 1);
    theta.sigma1_sq = 0.1 * var;
    theta.sigma2_sq = 0.1 * var;
    theta.rho = 0.0;
  }

  HdFitResult out;
  FitResult& res = out.fit;
  RandomEffectState xi = RandomEffectState::zeros(layout);
  ComponentFit cf;
  std::vector<VectorXd> warm;
  DivergenceGuard guard(fit_config.divergence_window);
  SCConfig tracking = sc_config;
  tracking.restarts = 0;
  const auto predictor = [&](const VectorXd& fx, const RandomEffectState& re) {
    return VectorXd(fx + apply_u(layout, re.stacked()));
  };

  for (int iter = 1; iter <= fit_config.max_outer_iter; ++iter) {
    const WorkingModel wm = linearize(y, predictor(fixed, xi), family, &diag);
    const ModelParams previous = theta;

    for (int sweep = 0; sweep < fit_config.inner_em_iter; ++sweep) {
      const QPenStats st = penalized_e_step_offset(wm, layout, theta, fixed, 0.0);
      if (sweep == 0) {
        cf.weights.clear();
        cf.scores.clear();
        for (int h = 0; h < K; ++h) {
          const ComponentProblem problem(basis, wm, st, layout, theta, cf.scores, s, l);
          const VectorXd* ws = static_cast<std::size_t>(h) < warm.size() ? &warm[h] : nullptr;
          const std::uint64_t seed = derive_seed(
              sc_config.seed, {static_cast<std::uint64_t>(iter), static_cast<std::uint64_t>(h)});
          ExtractedComponent comp = extract_component(
              problem, ws != nullptr && !sc_config.restart_every_iteration ? tracking : sc_config,
              seed, ws, &diag);
          cf.scores.push_back(basis.C * comp.w);
          cf.weights.push_back(std::move(comp.w));
        }
        warm = cf.weights;
      }
      regress_components(cf, st, wm);
      theta = variance_step(st, layout, theta, fit_config.rho_search);
      fixed = cf.fixed;
    }

    // Back-map to coefficients on the original columns.
    MatrixXd Wk(basis.rank(), K);
    for (int h = 0; h < K; ++h) Wk.col(h) = cf.weights[static_cast<std::size_t>(h)];
    const VectorXd beta_orig = basis.original_weights(Wk * cf.coef.tail(K));
    theta.beta(0) = cf.coef(0) - beta_orig.dot(basis.center);
    theta.beta.tail(p) = beta_orig;

    const MarginalSystem marginal(layout, theta, wm.gamma_diag);
    xi = RandomEffectState::from_stacked(layout, marginal.posterior(wm.z - fixed).mean_xi);

    res.lambda_path.push_back(0.0);
    res.gcv_path.push_back(std::numeric_limits<double>::quiet_NaN());
    res.trace.push_back(theta);
    res.n_iter = iter;

    const double dev = working_deviance(wm, layout, theta, fixed);
    res.deviance_path.push_back(dev);
    const double step = relative_change(previous, theta);
    if (guard.update(dev, step)) {
      res.status = FitStatus::diverged;
      std::ostringstream msg;
      msg << "working-model deviance increased for " << guard.rising() << " consecutive iterations (last "
          << dev << ")";
      diag.warn("diverged", msg.str());
      break;
    }
    if (step < fit_config.tol) {
      res.status = FitStatus::converged;
      res.converged = true;
      break;
    }
  }

  res.params = theta;
  res.xi_hat = xi;
  res.eta = predictor(fixed, xi);
  res.mu = mean_response(res.eta, family, &diag);
  res.warnings = diag.events();

  out.s = s;
  out.l = l;
  out.n_components = K;
  out.component_weights.resize(basis.rank(), K);
  out.variable_loadings.resize(p, K);
  out.components.resize(n, K);
  for (int h = 0; h < K; ++h) {
    out.component_weights.col(h) = cf.weights[static_cast<std::size_t>(h)];
    out.variable_loadings.col(h) = basis.original_weights(cf.weights[static_cast<std::size_t>(h)]);
    out.components.col(h) = cf.scores[static_cast<std::size_t>(h)];
  }
  out.gammas = cf.coef.tail(K);
  out.intercept = theta.beta(0);
  out.beta = theta.beta.tail(p);
  return out;
}

std::vector<int> individual_folds(Index n_individuals, int folds, std::uint64_t seed) {
  if (folds < 2) throw ConfigError("cv_folds must be >= 2");
  if (n_individuals < folds) throw InvalidInput("fewer individuals than CV folds");
  std::vector<Index> order(static_cast<std::size_t>(n_individuals));
  for (Index i = 0; i < n_individuals; ++i) order[static_cast<std::size_t>(i)] = i;
  std::mt19937_64 rng(seed);
  for (Index i = n_individuals - 1; i > 0; --i) {
    std::uniform_int_distribution<Index> pick(0, i);
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(pick(rng))]);
  }
  std::vector<int> fold(static_cast<std::size_t>(n_individuals));
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    fold[static_cast<std::size_t>(order[pos])] = static_cast<int>(pos % static_cast<std::size_t>(folds));
  }
  return fold;
}

MatrixXd panel_rows(const MatrixXd& M, const PanelLayout& layout,
                    const std::vector<Index>& individuals) {
  const Index T = layout.n_times();
  MatrixXd out(static_cast<Index>(individuals.size()) * T, M.cols());
  for (std::size_t k = 0; k < individuals.size(); ++k) {
    out.middleRows(static_cast<Index>(k) * T, T) = M.middleRows(layout.row(individuals[k], 0), T);
  }
  return out;
}

VectorXd panel_rows(const VectorXd& v, const PanelLayout& layout,
                    const std::vector<Index>& individuals) {
  const MatrixXd m = panel_rows(MatrixXd(v), layout, individuals);
  return m.col(0);
}

double heldout_deviance(const HdFitResult& model, const VectorXd& y_test, const MatrixXd& X_test,
                        Index n_times, const FamilyLink& family) {
  const VectorXd& xi2 = model.fit.xi_hat.xi2;
  if (xi2.size() != n_times || y_test.size() % n_times != 0 || X_test.rows() != y_test.size()) {
    throw InvalidInput("held-out block does not match the training time grid");
  }
  VectorXd eta = (X_test * model.beta).array() + model.intercept;
  for (Index row = 0; row < eta.size(); ++row) eta(row) += xi2(row % n_times);
  const VectorXd mu = mean_response(eta, family, nullptr);
  return deviance(y_test, mu, family);
}

CvResult cv_tune(const VectorXd& y, const PanelLayout& layout, const MatrixXd& X,
                 const FamilyLink& family, const SCConfig& sc_config, const FitConfig& fit_config) {
  sc_config.validate();
  const Index N = layout.n_individuals();
  const std::vector<int> fold = individual_folds(N, sc_config.cv_folds, sc_config.seed);

  struct Candidate {
    double s;
    double l;
    int k;
  };
  std::vector<Candidate> candidates;
  for (double s : sc_config.s_grid) {
    for (double l : sc_config.l_grid) {
      for (int k : sc_config.k_grid) candidates.push_back({s, l, k});
    }
  }
  const std::size_t F = static_cast<std::size_t>(sc_config.cv_folds);

  std::vector<std::vector<Index>> train(F), test(F);
  for (Index i = 0; i < N; ++i) {
    for (std::size_t f = 0; f < F; ++f) {
      (static_cast<std::size_t>(fold[static_cast<std::size_t>(i)]) == f ? test[f] : train[f]).push_back(i);
    }
  }

  SCConfig inner = sc_config;
  inner.threads = 1;
  CvResult result;
  result.table.resize(candidates.size() * F);
  parallel_for(result.table.size(), sc_config.threads, [&](std::size_t job) {
    const Candidate& c = candidates[job / F];
    const std::size_t f = job % F;
    CvRow& row = result.table[job];
    row.s = c.s;
    row.l = c.l;
    row.k = c.k;
    row.fold = static_cast<int>(f);
    row.n_heldout = static_cast<Index>(test[f].size()) * layout.n_times();
    try {
      const PanelLayout train_layout(static_cast<Index>(train[f].size()), layout.n_times());
      const HdFitResult model =
          fit_hd(panel_rows(y, layout, train[f]), train_layout, panel_rows(X, layout, train[f]),
                 family, c.s, c.l, c.k, inner, fit_config);
      row.deviance = heldout_deviance(model, panel_rows(y, layout, test[f]),
                                      panel_rows(X, layout, test[f]), layout.n_times(), family);
      row.ok = std::isfinite(row.deviance);
      if (!row.ok) row.deviance = std::numeric_limits<double>::infinity();
    } catch (const Error&) {
      row.deviance = std::numeric_limits<double>::infinity();
      row.ok = false;
    }
  });

  bool found = false;
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    double score = 0.0;
    for (std::size_t f = 0; f < F; ++f) score += result.table[c * F + f].deviance;
    if (!std::isfinite(score)) continue;
    if (!found || score < result.best_score) {
      found = true;
      result.best_score = score;
      result.s = candidates[c].s;
      result.l = candidates[c].l;
      result.k = candidates[c].k;
    }
  }
  if (!found) throw SelectionError("every cross-validation candidate failed");
  return result;
}

}  // namespace panelglmm
