#include "panelglmm/linearize.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "panelglmm/errors.hpp"

namespace panelglmm {

namespace {

double floored(double mu, const FamilyLink& family) {
  return family.family() == Family::poisson ? std::max(mu, kMuFloor) : mu;
}

}  // namespace

VectorXd working_response(const VectorXd& y, const VectorXd& mu, const FamilyLink& family) {
  if (y.size() != mu.size()) throw InvalidInput("y and mu lengths differ");
  VectorXd z(y.size());
  for (Index i = 0; i < y.size(); ++i) {
    const double m = floored(mu(i), family);
    // g = id makes the linearization exact.
    z(i) = family.link() == Link::identity ? y(i) : family.g(m) + (y(i) - m) * family.g_prime(m);
    if (!std::isfinite(z(i))) {
      std::ostringstream msg;
      msg << "non-finite working response at row " << i << " (y = " << y(i) << ", mu = " << mu(i)
          << ")";
      throw LinearizationError(msg.str(), i);
    }
  }
  return z;
}

VectorXd working_variance(const VectorXd& mu, const FamilyLink& family) {
  VectorXd gamma(mu.size());
  for (Index i = 0; i < mu.size(); ++i) {
    const double m = floored(mu(i), family);
    const double gp = family.g_prime(m);
    gamma(i) = gp * gp * family.variance(m);
  }
  return gamma;
}

WorkingModel linearize(const VectorXd& y, const VectorXd& eta, const FamilyLink& family,
                       Diagnostics* diag) {
  WorkingModel wm;
  wm.eta = eta;
  wm.mu = mean_response(eta, family, diag);
  wm.z = working_response(y, wm.mu, family);
  wm.gamma_diag = working_variance(wm.mu, family);
  return wm;
}

double deviance(const VectorXd& y, const VectorXd& mu, const FamilyLink& family) {
  if (y.size() != mu.size()) throw InvalidInput("y and mu lengths differ");
  double d = 0.0;
  for (Index i = 0; i < y.size(); ++i) d += family.unit_deviance(y(i), floored(mu(i), family));
  return d;
}

}  // namespace panelglmm
