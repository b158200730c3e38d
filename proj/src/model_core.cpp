#include "panelglmm/model_core.hpp"

#include <cmath>
#include <limits>
#include <algorithm>
#include <sstream>

#include "panelglmm/errors.hpp"

namespace panelglmm {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;  // log(2 pi)

void check_rho(double rho) {
  if (!std::isfinite(rho) || std::abs(rho) > 1.0 - kRhoMargin) {
    std::ostringstream msg;
    msg << "AR(1) coefficient rho = " << rho << " violates |rho| <= 1 - " << kRhoMargin;
    throw StationarityError(msg.str());
  }
}

void check_variance(double v, const char* name) {
  if (!std::isfinite(v) || v < 0.0) {
    std::ostringstream msg;
    msg << name << " must be finite and non-negative, got " << v;
    throw InvalidInput(msg.str());
  }
}

// Quadratic form x' Q x where Sigma2^{-1} = Q / sigma2_sq (tridiagonal precision).
double ar1_precision_quadratic(const VectorXd& x, double rho) {
  const Index T = x.size();
  double acc = (1.0 - rho * rho) * x(0) * x(0);
  for (Index t = 1; t < T; ++t) {
    const double innov = x(t) - rho * x(t - 1);
    acc += innov * innov;
  }
  return acc;
}

}  // namespace

PanelLayout::PanelLayout(Index n_individuals, Index n_times)
    : n_individuals_(n_individuals), n_times_(n_times) {
  if (n_individuals < 2 || n_times < 2) {
    std::ostringstream msg;
    msg << "balanced panel needs N >= 2 and T >= 2, got N = " << n_individuals
        << ", T = " << n_times;
    throw InvalidInput(msg.str());
  }
}

void ModelParams::validate() const {
  for (Index j = 0; j < beta.size(); ++j) {
    if (!std::isfinite(beta(j))) throw InvalidInput("beta contains a non-finite entry");
  }
  check_variance(sigma1_sq, "sigma1_sq");
  check_variance(sigma2_sq, "sigma2_sq");
  check_rho(rho);
}

FamilyLink::FamilyLink(Family family, Link link, double dispersion)
    : family_(family), link_(link), dispersion_(dispersion) {
  const bool supported = (family == Family::poisson && link == Link::log) ||
                         (family == Family::gaussian && link == Link::identity);
  if (!supported) throw InvalidInput("supported family/link pairs: poisson/log, gaussian/identity");
  if (!(dispersion > 0.0) || !std::isfinite(dispersion)) {
    throw InvalidInput("dispersion must be positive and finite");
  }
}

FamilyLink FamilyLink::from_names(const std::string& family, const std::string& link,
                                  double dispersion) {
  Family f;
  if (family == "poisson") {
    f = Family::poisson;
  } else if (family == "gaussian") {
    f = Family::gaussian;
  } else {
    throw InvalidInput("unknown family '" + family + "'");
  }
  Link l;
  if (link == "log") {
    l = Link::log;
  } else if (link == "identity") {
    l = Link::identity;
  } else {
    throw InvalidInput("unknown link '" + link + "'");
  }
  return {f, l, dispersion};
}

std::string FamilyLink::family_name() const {
  return family_ == Family::poisson ? "poisson" : "gaussian";
}

std::string FamilyLink::link_name() const { return link_ == Link::log ? "log" : "identity"; }

double FamilyLink::g(double mu) const { return link_ == Link::log ? std::log(mu) : mu; }

double FamilyLink::g_prime(double mu) const { return link_ == Link::log ? 1.0 / mu : 1.0; }

double FamilyLink::inverse_link(double eta) const {
  return link_ == Link::log ? std::exp(eta) : eta;
}

double FamilyLink::variance(double mu) const {
  return family_ == Family::poisson ? mu : dispersion_;
}

double FamilyLink::unit_deviance(double y, double mu) const {
  if (family_ == Family::poisson) {
    const double ylogy = y > 0.0 ? y * std::log(y / mu) : 0.0;
    return 2.0 * (ylogy - (y - mu));
  }
  const double r = y - mu;
  return r * r / dispersion_;
}

bool FamilyLink::in_support(double y) const {
  if (!std::isfinite(y)) return false;
  if (family_ == Family::poisson) return y >= 0.0 && y == std::floor(y);
  return true;
}

RandomEffectState RandomEffectState::zeros(const PanelLayout& layout) {
  return {VectorXd::Zero(layout.n_individuals()), VectorXd::Zero(layout.n_times())};
}

RandomEffectState RandomEffectState::from_stacked(const PanelLayout& layout, const VectorXd& xi) {
  if (xi.size() != layout.n_effects()) throw InvalidInput("stacked xi has the wrong length");
  return {xi.head(layout.n_individuals()), xi.tail(layout.n_times())};
}

VectorXd RandomEffectState::stacked() const {
  VectorXd out(xi1.size() + xi2.size());
  out << xi1, xi2;
  return out;
}

DesignSet build_designs(const PanelLayout& layout, const MatrixXd& X_raw) {
  if (X_raw.rows() != layout.n_rows()) {
    std::ostringstream msg;
    msg << "X has " << X_raw.rows() << " rows, layout expects " << layout.n_rows();
    throw InvalidInput(msg.str());
  }
  const Index n = layout.n_rows();
  const Index N = layout.n_individuals();
  const Index T = layout.n_times();
  DesignSet d{layout, X_raw, MatrixXd::Zero(n, N), MatrixXd::Zero(n, T), MatrixXd()};
  for (Index r = 0; r < n; ++r) {
    d.U1(r, layout.individual_of(r)) = 1.0;
    d.U2(r, layout.time_of(r)) = 1.0;
  }
  d.U.resize(n, N + T);
  d.U << d.U1, d.U2;
  return d;
}

MatrixXd ar1_covariance(Index n_times, double rho, double sigma2_sq) {
  check_rho(rho);
  check_variance(sigma2_sq, "sigma2_sq");
  const double marginal = sigma2_sq / (1.0 - rho * rho);
  MatrixXd S(n_times, n_times);
  for (Index t = 0; t < n_times; ++t) {
    for (Index s = 0; s < n_times; ++s) {
      S(t, s) = marginal * std::pow(rho, static_cast<double>(std::abs(t - s)));
    }
  }
  return S;
}

MatrixXd ar1_cholesky_factor(Index n_times, double rho, double sigma2_sq) {
  check_rho(rho);
  check_variance(sigma2_sq, "sigma2_sq");
  MatrixXd L = MatrixXd::Zero(n_times, n_times);
  const double innov_sd = std::sqrt(sigma2_sq);
  const double start_sd = std::sqrt(sigma2_sq / (1.0 - rho * rho));
  for (Index t = 0; t < n_times; ++t) {
    double power = 1.0;  // rho^(t - s)
    for (Index s = t; s >= 0; --s) {
      L(t, s) = (s == 0 ? start_sd : innov_sd) * power;
      power *= rho;
    }
  }
  return L;
}

MatrixXd random_effect_covariance(const PanelLayout& layout, const ModelParams& params) {
  check_variance(params.sigma1_sq, "sigma1_sq");
  const Index N = layout.n_individuals();
  const Index T = layout.n_times();
  MatrixXd D = MatrixXd::Zero(N + T, N + T);
  D.topLeftCorner(N, N).diagonal().setConstant(params.sigma1_sq);
  D.bottomRightCorner(T, T) = ar1_covariance(T, params.rho, params.sigma2_sq);
  return D;
}

MatrixXd random_effect_factor(const PanelLayout& layout, const ModelParams& params) {
  check_variance(params.sigma1_sq, "sigma1_sq");
  const Index N = layout.n_individuals();
  const Index T = layout.n_times();
  MatrixXd L = MatrixXd::Zero(N + T, N + T);
  L.topLeftCorner(N, N).diagonal().setConstant(std::sqrt(params.sigma1_sq));
  L.bottomRightCorner(T, T) = ar1_cholesky_factor(T, params.rho, params.sigma2_sq);
  return L;
}

VectorXd apply_u(const PanelLayout& layout, const VectorXd& xi) {
  if (xi.size() != layout.n_effects()) throw InvalidInput("xi has the wrong length");
  const Index N = layout.n_individuals();
  const Index T = layout.n_times();
  VectorXd out(layout.n_rows());
  for (Index i = 0; i < N; ++i) {
    for (Index t = 0; t < T; ++t) out(i * T + t) = xi(i) + xi(N + t);
  }
  return out;
}

MatrixXd apply_ut(const PanelLayout& layout, const MatrixXd& B) {
  if (B.rows() != layout.n_rows()) throw InvalidInput("U' B: row count mismatch");
  const Index N = layout.n_individuals();
  const Index T = layout.n_times();
  MatrixXd out = MatrixXd::Zero(N + T, B.cols());
  for (Index i = 0; i < N; ++i) {
    const auto block = B.middleRows(i * T, T);
    out.row(i) = block.colwise().sum();
    out.bottomRows(T) += block;
  }
  return out;
}

VectorXd apply_ut(const PanelLayout& layout, const VectorXd& b) {
  return apply_ut(layout, MatrixXd(b)).col(0);
}

MatrixXd weighted_gram_u(const PanelLayout& layout, const VectorXd& w) {
  if (w.size() != layout.n_rows()) throw InvalidInput("weights have the wrong length");
  const Index N = layout.n_individuals();
  const Index T = layout.n_times();
  MatrixXd G = MatrixXd::Zero(N + T, N + T);
  for (Index i = 0; i < N; ++i) {
    for (Index t = 0; t < T; ++t) {
      const double wi = w(i * T + t);
      G(i, i) += wi;
      G(N + t, N + t) += wi;
      G(i, N + t) = wi;
      G(N + t, i) = wi;
    }
  }
  return G;
}

VectorXd linear_predictor(const DesignSet& designs, const ModelParams& params,
                          const RandomEffectState& xi) {
  if (params.beta.size() != designs.p()) throw InvalidInput("beta length differs from X columns");
  if (xi.xi1.size() != designs.layout.n_individuals() ||
      xi.xi2.size() != designs.layout.n_times()) {
    throw InvalidInput("random effects do not match the panel layout");
  }
  return designs.X * params.beta + apply_u(designs.layout, xi.stacked());
}

VectorXd mean_response(const VectorXd& eta, const FamilyLink& family, Diagnostics* diag) {
  VectorXd mu(eta.size());
  if (family.link() == Link::identity) {
    mu = eta;
    return mu;
  }
  Index clipped = 0;
  for (Index i = 0; i < eta.size(); ++i) {
    double e = eta(i);
    if (e > kEtaClip || e < -kEtaClip) {
      e = std::clamp(e, -kEtaClip, kEtaClip);
      ++clipped;
    }
    mu(i) = family.inverse_link(e);
  }
  if (clipped > 0) {
    std::ostringstream msg;
    msg << clipped << " linear predictor value(s) clipped to [-" << kEtaClip << ", " << kEtaClip
        << "]";
    warn(diag, "eta_clipped", msg.str());
  }
  return mu;
}

LogLikelihood complete_loglik(const VectorXd& z, const DesignSet& designs, const ModelParams& params,
                              const RandomEffectState& xi, const VectorXd& gamma_diag) {
  const Index n = designs.n();
  if (z.size() != n || gamma_diag.size() != n) throw InvalidInput("z / Gamma length mismatch");
  if ((gamma_diag.array() <= 0.0).any()) throw InvalidInput("Gamma must be positive");
  params.validate();

  const VectorXd resid = z - linear_predictor(designs, params, xi);
  double data = -0.5 * static_cast<double>(n) * kLog2Pi;
  data -= 0.5 * gamma_diag.array().log().sum();
  data -= 0.5 * (resid.array().square() / gamma_diag.array()).sum();

  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  LogLikelihood out;
  out.value = data;

  const double N = static_cast<double>(xi.xi1.size());
  if (params.sigma1_sq > 0.0) {
    out.value += -0.5 * N * (kLog2Pi + std::log(params.sigma1_sq)) -
                 0.5 * xi.xi1.squaredNorm() / params.sigma1_sq;
  } else if (xi.xi1.squaredNorm() > 0.0) {
    return {kNegInf, true};
  }

  const double T = static_cast<double>(xi.xi2.size());
  if (params.sigma2_sq > 0.0) {
    const double rho2 = params.rho * params.rho;
    out.value += -0.5 * T * kLog2Pi -
                 0.5 * (T * std::log(params.sigma2_sq) - std::log(1.0 - rho2)) -
                 0.5 * ar1_precision_quadratic(xi.xi2, params.rho) / params.sigma2_sq;
  } else if (xi.xi2.squaredNorm() > 0.0) {
    return {kNegInf, true};
  }
  return out;
}

}  // namespace panelglmm
