#pragma once

#include <vector>

#include "metastab/flux.hpp"

namespace metastab {

enum class side { minus, plus };

// One matched profile U(.;xi): a layer of width O(epsilon) at xi glued
// from two exact boundary solutions. kappa_minus/kappa_plus are the
// integration constants of the two halves; their mismatch is the whole
// story of the slow dynamics, so the exponentially small gaps
// gamma_pm = kappa_pm - f(u_pm) are carried explicitly instead of being
// recovered by subtraction.
struct matched_profile {
  double xi = 0.0;
  double epsilon = 0.0;
  double ell = 0.0;
  double kappa_minus = 0.0;
  double kappa_plus = 0.0;
  double gamma_minus = 0.0;
  double gamma_plus = 0.0;
  std::vector<double> grid;
  std::vector<double> u_values;
  std::vector<double> dxi_values;  // centered difference in xi
  double jump_dxU = 0.0;           // (kappa_minus - kappa_plus) / epsilon
};

struct steady_state_result {
  double kappa = 0.0;
  double xi_star = 0.0;
  matched_profile profile;
};

// Admissible layer positions keep 4*eps*|ln eps| away from the walls
// (kappa_pm diverge there), capped at ell/4 so the window never closes
// at coarse epsilon.
double admissible_margin(double epsilon, double ell);

// Integral of 1/(kappa - f(s)) from u_star to u. Signed: negative for
// u below u_star. kappa must exceed f on the whole segment.
double psi_star(const flux_model& flux, double kappa, double u);

struct kappa_pair {
  double kappa_minus = 0.0, kappa_plus = 0.0;
  double gamma_minus = 0.0, gamma_plus = 0.0;
};

// Matching constants for the layer at xi: eps * psi_star(kappa_pm, u_pm)
// = xi -+ ell. Solved on the log of the gap gamma = kappa - f(u_pm),
// which stays well-conditioned down to gaps of order exp(-700).
double solve_kappa(const flux_model& flux, double xi, double epsilon,
                   double ell, side s);
kappa_pair solve_kappa_pair(const flux_model& flux, double xi, double epsilon,
                            double ell);

// Profile values at the given ascending positions, by inverting
// eps * psi_star(kappa_pm, u) + x = xi per node. March from the layer
// outward so each inversion starts from the neighbor's bracket.
std::vector<double> sample_profile(const flux_model& flux, double xi,
                                   double epsilon, double ell,
                                   const kappa_pair& kp,
                                   const std::vector<double>& xs);

// Centered difference (U(x; xi+h) - U(x; xi-h)) / 2h with h = eps/100.
std::vector<double> sample_dxi(const flux_model& flux, double xi,
                               double epsilon, double ell,
                               const std::vector<double>& xs);

// Full profile on a layer-refined grid with at least n_nodes base nodes.
matched_profile build_profile(const flux_model& flux, double xi,
                              double epsilon, double ell, int n_nodes);

// The defect of U(.;xi) as a steady state is a point mass at xi; this is
// its weight, (kappa_minus - kappa_plus)/eps.
double residual(const matched_profile& profile);

// |residual|: the sharp constant in the duality bound of the defect.
double omega_bound(const matched_profile& profile);

// The unique exact steady state: kappa from the two-sided transit-time
// equation, xi_star independently from kappa_minus(xi) = kappa_plus(xi),
// cross-checked against each other.
steady_state_result steady_state(const flux_model& flux, double epsilon,
                                 double ell, int n_nodes = 512);

}  // namespace metastab
