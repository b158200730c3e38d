#include "panelglmm/ridge_em.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "panelglmm/errors.hpp"

namespace panelglmm {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kAbsFallback = 1e-8;
// Relative deviance increase that counts as a rise; smaller ones are relinearization noise.
constexpr double kMaterialRise = 1e-6;

struct Ar1Moments {
  double total = 0.0;     // sum_t S_tt
  double interior = 0.0;  // sum_{t = 2..T-1} S_tt
  double lag1 = 0.0;      // sum_t S_{t, t+1}
  double T = 0.0;

  // tr(Q S) where Sigma2^{-1} = Q / sigma2_sq.
  double quadratic(double rho) const { return total + rho * rho * interior - 2.0 * rho * lag1; }
};

Ar1Moments ar1_moments(const MatrixXd& S) {
  const Index T = S.rows();
  if (T < 2 || S.cols() != T) throw InvalidInput("AR(1) second-moment matrix must be T x T, T >= 2");
  Ar1Moments m;
  m.T = static_cast<double>(T);
  m.total = S.trace();
  m.interior = m.total - S(0, 0) - S(T - 1, T - 1);
  for (Index t = 0; t + 1 < T; ++t) m.lag1 += 0.5 * (S(t, t + 1) + S(t + 1, t));
  return m;
}

double profiled_value(const Ar1Moments& m, double rho) {
  const double sigma2 = m.quadratic(rho) / m.T;
  if (!(sigma2 > 0.0)) return kNegInf;
  return -0.5 * (m.T * std::log(sigma2) - std::log(1.0 - rho * rho) + m.T);
}

double golden_section_max(const Ar1Moments& m, double lo, double hi, double tol) {
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo;
  double b = hi;
  double c = b - inv_phi * (b - a);
  double d = a + inv_phi * (b - a);
  double fc = profiled_value(m, c);
  double fd = profiled_value(m, d);
  while (b - a > tol) {
    if (fc >= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = profiled_value(m, c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = profiled_value(m, d);
    }
  }
  return 0.5 * (a + b);
}

double sup_norm(const VectorXd& v) { return v.size() == 0 ? 0.0 : v.cwiseAbs().maxCoeff(); }

double scalar_change(double prev, double next) {
  const double delta = std::abs(next - prev);
  return std::abs(prev) > kAbsFallback ? delta / std::abs(prev) : delta;
}

VectorXd solve_weighted_ridge(const MatrixXd& X, const VectorXd& w, const VectorXd& target,
                              double lambda, const VectorXd& mask) {
  MatrixXd K = X.transpose() * w.asDiagonal() * X;
  K.diagonal() += lambda * mask;
  Eigen::LLT<MatrixXd> llt(K);
  bool singular = llt.info() != Eigen::Success;
  if (!singular && K.rows() > 0) {
    const VectorXd piv = llt.matrixLLT().diagonal().array().square();
    singular = piv.minCoeff() <= 1e-12 * piv.maxCoeff();
  }
  if (singular) {
    std::ostringstream msg;
    msg << "M-step normal equations are singular at lambda = " << lambda
        << "; collinear columns need lambda > 0";
    throw SingularSystemError(msg.str());
  }
  return llt.solve(X.transpose() * w.cwiseProduct(target));
}

}  // namespace

std::vector<double> default_lambda_grid() {
  std::vector<double> grid{0.0};
  for (int k = 0; k < 50; ++k) grid.push_back(std::pow(10.0, -4.0 + 8.0 * k / 49.0));
  return grid;
}

void FitConfig::validate(Index p) const {
  if (lambda_grid.empty()) throw ConfigError("lambda grid is empty");
  for (double l : lambda_grid) {
    if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("lambda grid values must be >= 0");
  }
  if (max_outer_iter < 1) throw ConfigError("max_outer_iter must be >= 1");
  if (inner_em_iter < 1) throw ConfigError("inner_em_iter must be >= 1");
  if (!(tol > 0.0)) throw ConfigError("tol must be > 0");
  if (rho_search.grid_points < 3) throw ConfigError("rho grid needs at least 3 points");
  if (!(rho_search.tol > 0.0)) throw ConfigError("rho tolerance must be > 0");
  if (divergence_window < 1) throw ConfigError("divergence_window must be >= 1");
  if (intercept_column && (*intercept_column < 0 || *intercept_column >= p)) {
    throw ConfigError("intercept column is outside X");
  }
  if (penalty_mask) {
    if (penalty_mask->size() != p) throw ConfigError("penalty mask length differs from X columns");
    if ((penalty_mask->array() < 0.0).any()) throw ConfigError("penalty mask must be >= 0");
  }
}

VectorXd FitConfig::penalty_mask_for(Index p) const {
  if (penalty_mask) return *penalty_mask;
  VectorXd mask = VectorXd::Ones(p);
  if (intercept_column && !penalize_intercept) mask(*intercept_column) = 0.0;
  return mask;
}

std::string to_string(FitStatus status) {
  switch (status) {
    case FitStatus::converged:
      return "converged";
    case FitStatus::max_iterations:
      return "max_iterations";
    case FitStatus::diverged:
      return "diverged";
  }
  return "unknown";
}

double gcv_from_parts(double weighted_rss, double trace, Index n) {
  const double nd = static_cast<double>(n);
  if (!(trace < nd)) {
    std::ostringstream msg;
    msg << "hat matrix trace " << trace << " reaches n = " << n;
    throw DegenerateFitError(msg.str());
  }
  const double denom = 1.0 - trace / nd;
  return (weighted_rss / nd) / (denom * denom);
}

double gcv_score(const VectorXd& z, const MatrixXd& S, const VectorXd& gamma_diag) {
  const Index n = z.size();
  if (S.rows() != n || S.cols() != n || gamma_diag.size() != n) {
    throw InvalidInput("gcv_score: dimension mismatch");
  }
  const VectorXd resid = z - S * z;
  const double wrss = (resid.array().square() / gamma_diag.array()).sum();
  return gcv_from_parts(wrss, S.trace(), n);
}

LambdaSelection select_lambda(const WorkingModel& wm, const DesignSet& designs,
                              const ModelParams& params, const FitConfig& config) {
  if (config.lambda_grid.empty()) throw SelectionError("lambda grid is empty");
  const MarginalSystem marginal(designs.layout, params, wm.gamma_diag);
  const RidgeSystem ridge(designs, marginal, wm.z, config.penalty_mask_for(designs.p()));

  LambdaSelection sel;
  sel.curve.assign(config.lambda_grid.size(), kNaN);
  bool found = false;
  for (std::size_t k = 0; k < config.lambda_grid.size(); ++k) {
    const double lambda = config.lambda_grid[k];
    double score;
    try {
      const auto ev = ridge.evaluate(lambda);
      score = gcv_from_parts(ev.weighted_rss, ev.trace, ridge.n());
    } catch (const SingularSystemError&) {
      continue;
    } catch (const DegenerateFitError&) {
      continue;
    }
    if (!std::isfinite(score)) continue;
    sel.curve[k] = score;
    if (!found || score < sel.gcv || (score == sel.gcv && lambda > sel.lambda)) {
      sel.lambda = lambda;
      sel.gcv = score;
      found = true;
    }
  }
  if (!found) throw SelectionError("every lambda on the grid gives a singular or degenerate fit");
  return sel;
}

QPenStats penalized_e_step_offset(const WorkingModel& wm, const PanelLayout& layout,
                                  const ModelParams& params, const VectorXd& fixed_predictor,
                                  double lambda) {
  const MarginalSystem marginal(layout, params, wm.gamma_diag);
  QPenStats st;
  st.lambda = lambda;
  st.posterior = marginal.posterior(wm.z - fixed_predictor);
  const Index N = layout.n_individuals();
  const Index T = layout.n_times();
  st.xi1_sq = st.posterior.second_moment_xi.topLeftCorner(N, N).trace();
  st.xi2_second = st.posterior.second_moment_xi.bottomRightCorner(T, T);
  st.residual_target = wm.z - apply_u(layout, st.posterior.mean_xi);
  st.trace_gram_cov =
      (weighted_gram_u(layout, marginal.weights()).cwiseProduct(st.posterior.cov_xi)).sum();
  return st;
}

QPenStats penalized_e_step(const WorkingModel& wm, const DesignSet& designs,
                           const ModelParams& params, double lambda) {
  if (params.beta.size() != designs.p()) throw InvalidInput("beta length differs from X columns");
  return penalized_e_step_offset(wm, designs.layout, params, designs.X * params.beta, lambda);
}

double ar1_expected_logdensity(const MatrixXd& xi2_second, double rho, double sigma2_sq) {
  const Ar1Moments m = ar1_moments(xi2_second);
  const double quad = m.quadratic(rho);
  if (sigma2_sq <= 0.0) return quad > 0.0 ? kNegInf : 0.0;
  return -0.5 * (m.T * std::log(sigma2_sq) - std::log(1.0 - rho * rho)) - 0.5 * quad / sigma2_sq;
}

double profiled_ar1_objective(const MatrixXd& xi2_second, double rho) {
  return profiled_value(ar1_moments(xi2_second), rho);
}

Ar1Update profile_ar1(const MatrixXd& xi2_second, double current_rho, const RhoSearch& search) {
  const Ar1Moments m = ar1_moments(xi2_second);
  if (!(m.total > 0.0)) return {current_rho, 0.0};

  const double bound = 1.0 - kRhoMargin;
  const int G = search.grid_points;
  const double step = 2.0 * bound / (G - 1);
  const auto grid_rho = [&](int k) { return std::clamp(-bound + step * k, -bound, bound); };
  int best_k = -1;
  double best_val = kNegInf;
  for (int k = 0; k < G; ++k) {
    const double v = profiled_value(m, grid_rho(k));
    if (best_k < 0 || v > best_val) {
      best_k = k;
      best_val = v;
    }
  }
  if (!std::isfinite(best_val)) {
    std::ostringstream msg;
    msg << "AR(1) profile is non-finite on the whole rho grid (trace " << m.total << ", lag-1 "
        << m.lag1 << ")";
    throw MStepError(msg.str());
  }
  const double lo = std::max(-bound, -bound + step * (best_k - 1));
  const double hi = std::min(bound, -bound + step * (best_k + 1));
  double rho = golden_section_max(m, lo, hi, search.tol);
  double val = profiled_value(m, rho);
  if (val < best_val) {
    rho = grid_rho(best_k);
    val = best_val;
  }
  if (std::abs(current_rho) <= bound && profiled_value(m, current_rho) >= val) rho = current_rho;
  return {rho, m.quadratic(rho) / m.T};
}

ModelParams m_step(const QPenStats& stats, const DesignSet& designs, const WorkingModel& wm,
                   double lambda, const FitConfig& config, const ModelParams& current) {
  ModelParams next;
  const VectorXd w = wm.gamma_diag.cwiseInverse();
  next.beta = solve_weighted_ridge(designs.X, w, stats.residual_target, lambda,
                                   config.penalty_mask_for(designs.p()));
  next.sigma1_sq = stats.xi1_sq / static_cast<double>(designs.layout.n_individuals());
  const Ar1Update ar = profile_ar1(stats.xi2_second, current.rho, config.rho_search);
  next.rho = ar.rho;
  next.sigma2_sq = ar.sigma2_sq;
  return next;
}

double q_pen(const QPenStats& stats, const WorkingModel& wm, const DesignSet& designs,
             const ModelParams& theta, double lambda, const VectorXd& penalty_mask) {
  const Index n = designs.n();
  const VectorXd resid = stats.residual_target - designs.X * theta.beta;
  double q = -0.5 * static_cast<double>(n) * kLog2Pi - 0.5 * wm.gamma_diag.array().log().sum();
  q -= 0.5 * ((resid.array().square() / wm.gamma_diag.array()).sum() + stats.trace_gram_cov);

  const double N = static_cast<double>(designs.layout.n_individuals());
  if (theta.sigma1_sq > 0.0) {
    q += -0.5 * N * (kLog2Pi + std::log(theta.sigma1_sq)) - 0.5 * stats.xi1_sq / theta.sigma1_sq;
  } else if (stats.xi1_sq > 0.0) {
    return kNegInf;
  }
  if (theta.sigma2_sq > 0.0) {
    q += -0.5 * static_cast<double>(designs.layout.n_times()) * kLog2Pi;
  }
  q += ar1_expected_logdensity(stats.xi2_second, theta.rho, theta.sigma2_sq);
  q -= 0.5 * lambda * (penalty_mask.array() * theta.beta.array().square()).sum();
  return q;
}

double penalized_marginal_loglik(const WorkingModel& wm, const DesignSet& designs,
                                 const ModelParams& params, double lambda,
                                 const VectorXd& penalty_mask) {
  const MarginalSystem marginal(designs.layout, params, wm.gamma_diag);
  const VectorXd r = wm.z - designs.X * params.beta;
  const double n = static_cast<double>(designs.n());
  const double quad = r.dot(marginal.solve(r));
  return -0.5 * (n * kLog2Pi + marginal.log_det() + quad) -
         0.5 * lambda * (penalty_mask.array() * params.beta.array().square()).sum();
}

bool DivergenceGuard::update(double deviance, double step) {
  const bool rose = deviance > last_deviance_ + kMaterialRise * (1.0 + std::abs(last_deviance_));
  rising_ = rose && !(step < last_step_) ? rising_ + 1 : 0;
  last_deviance_ = deviance;
  last_step_ = step;
  return rising_ >= window_;
}

double working_deviance(const WorkingModel& wm, const PanelLayout& layout, const ModelParams& params,
                        const VectorXd& fixed_predictor) {
  const MarginalSystem marginal(layout, params, wm.gamma_diag);
  const VectorXd r = wm.z - fixed_predictor;
  return static_cast<double>(r.size()) * kLog2Pi + marginal.log_det() + r.dot(marginal.solve(r));
}

ModelParams em_sweep(const WorkingModel& wm, const DesignSet& designs, const ModelParams& current,
                     double lambda, const FitConfig& config) {
  ModelParams anchor = current;
  const MarginalSystem marginal(designs.layout, current, wm.gamma_diag);
  anchor.beta =
      RidgeSystem(designs, marginal, wm.z, config.penalty_mask_for(designs.p())).beta(lambda);
  const QPenStats st = penalized_e_step(wm, designs, anchor, lambda);
  return m_step(st, designs, wm, lambda, config, anchor);
}

std::vector<ModelParams> em_sweeps(const WorkingModel& wm, const DesignSet& designs,
                                   const ModelParams& start, double lambda, int sweeps,
                                   const FitConfig& config) {
  std::vector<ModelParams> path{start};
  ModelParams theta = start;
  for (int s = 0; s < sweeps; ++s) {
    theta = em_sweep(wm, designs, theta, lambda, config);
    path.push_back(theta);
  }
  return path;
}

VectorXd glm_start(const VectorXd& y, const MatrixXd& X, const FamilyLink& family,
                   Diagnostics* diag) {
  const Index p = X.cols();
  VectorXd eta(y.size());
  for (Index i = 0; i < y.size(); ++i) {
    eta(i) = family.link() == Link::log ? std::log(y(i) + 0.5) : y(i);
  }
  VectorXd beta = VectorXd::Zero(p);
  double ridge = 0.0;
  for (int iter = 0; iter < 50; ++iter) {
    const WorkingModel wm = linearize(y, eta, family, nullptr);
    const VectorXd w = wm.gamma_diag.cwiseInverse();
    MatrixXd K = X.transpose() * w.asDiagonal() * X;
    const VectorXd rhs = X.transpose() * w.cwiseProduct(wm.z);
    if (ridge == 0.0) {
      Eigen::LLT<MatrixXd> llt(K);
      bool singular = llt.info() != Eigen::Success;
      if (!singular) {
        const VectorXd piv = llt.matrixLLT().diagonal().array().square();
        singular = piv.minCoeff() <= 1e-10 * piv.maxCoeff();
      }
      if (singular) {
        ridge = 1e-6 * std::max(K.trace() / static_cast<double>(p), 1.0);
        warn(diag, "glm_start_ridge", "X is singular; starting GLM uses a small ridge");
      }
    }
    K.diagonal().array() += ridge;
    const VectorXd next = K.ldlt().solve(rhs);
    const double change = sup_norm(next - beta);
    beta = next;
    eta = X * beta;
    if (change < 1e-10 * (1.0 + sup_norm(beta))) break;
  }
  return beta;
}

ModelParams initial_params(const VectorXd& y, const DesignSet& designs, const FamilyLink& family,
                           Diagnostics* diag) {
  ModelParams theta;
  theta.beta = glm_start(y, designs.X, family, diag);
  const VectorXd eta = designs.X * theta.beta;
  const WorkingModel wm = linearize(y, eta, family, diag);
  const VectorXd resid = wm.z - eta;
  const double mean = resid.mean();
  const double var = (resid.array() - mean).square().sum() / static_cast<double>(resid.size() - 1);
  theta.sigma1_sq = 0.1 * var;
  theta.sigma2_sq = 0.1 * var;
  theta.rho = 0.0;
  return theta;
}

double relative_change(const ModelParams& previous, const ModelParams& next) {
  const double beta_prev = sup_norm(previous.beta);
  const double beta_delta = sup_norm(next.beta - previous.beta);
  double change = beta_prev > kAbsFallback ? beta_delta / beta_prev : beta_delta;
  change = std::max(change, scalar_change(previous.sigma1_sq, next.sigma1_sq));
  change = std::max(change, scalar_change(previous.sigma2_sq, next.sigma2_sq));
  change = std::max(change, scalar_change(previous.rho, next.rho));
  return change;
}

FitResult fit(const VectorXd& y, const DesignSet& designs, const FamilyLink& family,
              const FitConfig& config, const std::optional<ModelParams>& init) {
  config.validate(designs.p());
  if (y.size() != designs.n()) throw InvalidInput("y length differs from the panel rows");
  for (Index i = 0; i < y.size(); ++i) {
    if (!family.in_support(y(i))) {
      std::ostringstream msg;
      msg << "y[" << i << "] = " << y(i) << " is outside the " << family.family_name()
          << " support";
      throw InvalidInput(msg.str());
    }
  }

  Diagnostics diag;
  FitResult res;
  ModelParams theta = init ? *init : initial_params(y, designs, family, &diag);
  theta.validate();
  if (theta.beta.size() != designs.p()) throw InvalidInput("initial beta has the wrong length");

  RandomEffectState xi = RandomEffectState::zeros(designs.layout);
  DivergenceGuard guard(config.divergence_window);

  for (int iter = 1; iter <= config.max_outer_iter; ++iter) {
    const VectorXd eta = linear_predictor(designs, theta, xi);
    const WorkingModel wm = linearize(y, eta, family, &diag);

    const LambdaSelection sel = select_lambda(wm, designs, theta, config);

    const ModelParams previous = theta;
    for (int s = 0; s < config.inner_em_iter; ++s) {
      theta = em_sweep(wm, designs, theta, sel.lambda, config);
    }
    const PosteriorMoments post = posterior_xi(designs, theta, wm.gamma_diag, wm.z, theta.beta);
    xi = RandomEffectState::from_stacked(designs.layout, post.mean_xi);

    res.lambda_path.push_back(sel.lambda);
    res.gcv_path.push_back(sel.gcv);
    res.gcv_curves.push_back(sel.curve);
    res.trace.push_back(theta);
    res.n_iter = iter;

    const double dev = working_deviance(wm, designs.layout, theta, designs.X * theta.beta);
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
    if (step < config.tol) {
      res.status = FitStatus::converged;
      res.converged = true;
      break;
    }
  }

  res.params = theta;
  res.xi_hat = xi;
  res.eta = linear_predictor(designs, theta, xi);
  res.mu = mean_response(res.eta, family, &diag);
  res.warnings = diag.events();
  return res;
}

}  // namespace panelglmm
