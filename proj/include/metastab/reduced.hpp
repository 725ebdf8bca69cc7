#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "metastab/flux.hpp"
#include "metastab/spectral.hpp"

namespace metastab {

// Drift rate of the layer position in the slow clock: the pairing of the
// leading adjoint mode with the profile defect. Because the defect is a
// point mass at xi carrying (kappa_minus - kappa_plus), the pairing reduces
// to psi_1(xi) * (kappa_minus - kappa_plus) / epsilon.
//
// The decomposition must come from the matched operator at the same xi,
// normalized so that <psi_1, dU/dxi> = 1.
double theta(const flux_model& flux, double xi, double epsilon, double ell,
             const spectral_decomposition& dec);

// The three independent evaluations of the drift rate. `pairing` is the
// defining one (see theta above); `kappa_ratio` replaces psi_1(xi) by its
// sharp-interface value 1/(u_minus - u_plus); `closed_form` is the explicit
// exponential formula available for the abs and Burgers fluxes (NaN and
// has_closed_form = false for other fluxes).
struct theta_estimates {
  double pairing = 0.0;
  double kappa_ratio = 0.0;
  double closed_form = 0.0;
  bool has_closed_form = false;
};

theta_estimates estimate_theta(const flux_model& flux, double xi,
                               double epsilon, double ell,
                               const spectral_decomposition& dec);

// Layer position under the reduced scalar law dzeta/dt = theta(zeta).
struct reduced_trajectory {
  std::vector<double> times;         // increasing, starts at 0
  std::vector<double> zeta;          // layer position per time
  std::vector<double> theta_values;  // drift rate per time
  bool exited_range = false;  // stopped early at the admissible boundary
};

// Integrates dzeta/dt = theta(zeta) from xi0. theta is sampled once on a
// position grid covering the reach of the trajectory and interpolated with
// a monotone cubic, so no eigensolve runs inside the time loop. Steps are
// explicit fourth order with dt <= 0.01 / max(|theta'|, 1/t_final).
reduced_trajectory integrate_drift(const flux_model& flux, double xi0,
                                   double epsilon, double ell,
                                   double t_final);

// One record of the modal system: layer position zeta plus the retained
// modal coefficients. w_coeffs[k-1] multiplies mode k along the tracked
// basis of the run; the first entry is pinned at zero (the perturbation is
// kept out of the slow mode by construction).
struct quasilinear_state {
  double time = 0.0;
  double zeta = 0.0;
  std::vector<double> w_coeffs;
  int retained_modes = 0;
};

// Comparison of the evolved perturbation w against the freely decaying
// spectral representation z (initial coefficients carried by the
// accumulated decay factors alone), with the a-priori envelope
// bound_rhs(t) = omega_sup * (E_1(0,t)^2 |w0|^2 + 1).
struct remainder_report {
  std::vector<double> times;
  std::vector<double> z_norm;
  std::vector<double> w_minus_z_norm;
  std::vector<double> bound_rhs;
  double fitted_c = 0.0;  // max of w_minus_z_norm / bound_rhs up to horizon
  double horizon = 0.0;   // validity_horizon(omega_sup, w0_norm)
  bool horizon_degenerate = false;
};

struct quasilinear_result {
  std::vector<quasilinear_state> states;
  remainder_report report;

  // Per state, per mode: the accumulated integral of lambda_k along the
  // trajectory, so E_k(s,t) = exp(row_t[k] - row_s[k]).
  std::vector<std::vector<double>> mode_decay_log;
  // Per state: grid L2 norm of the perturbation field.
  std::vector<double> w_norm;

  // The integrator's own reconstruction of the perturbation field at a
  // subsample of states, kept so the slow-mode content can be re-measured
  // against fresh eigendata afterwards.
  std::vector<std::size_t> snapshot_indices;
  std::vector<std::vector<double>> snapshot_fields;
  std::vector<double> grid;  // interior nodes carrying the fields
  double grid_h = 0.0;

  double omega_sup = 0.0;       // max |defect amplitude| over visited zeta
  double w0_norm = 0.0;         // L2 norm of the projected initial field
  double coupling_tail = 0.0;   // estimated truncated mass of the slow-mode
                                // coupling row, sum_{K<j<=2K} |c_j| at xi0
  bool exited_range = false;
};

// Evolves the layer position coupled to the retained modal coefficients:
//   dzeta/dt = theta(zeta) (1 + S),            S = <d/dzeta psi_1, w>
//   dw_k/dt  = lambda_k(zeta) w_k + psi_k(zeta) res(zeta)
//              - theta(zeta)(1 + S)(P_k - Q_k)
// with P_k = <psi_k, dU/dzeta> and Q_k = <d/dzeta psi_k, w>. The last two
// terms carry the forcing and the basis transport; mode 1 is held at zero.
// w0 is the initial perturbation as a plain function of x ({} means zero);
// it is projected off the slow mode before the run.
//
// Throws validation_error when retained_modes < 8, when the projected w0
// leaves more than 1% of its energy beyond the retained modes, or when xi0
// is out of the admissible range.
quasilinear_result integrate_quasilinear(
    const flux_model& flux, double xi0,
    const std::function<double(double)>& w0, double epsilon, double ell,
    int retained_modes, double t_final);

// Time window over which the remainder envelope stays meaningful:
//   T = ln(1/omega_sup - w0_norm^2) / omega_sup
// (reporting convention: the prefactor constant is taken as 1). When the
// argument of the logarithm is <= 1 there is no positive window; the
// function returns 0 and sets *degenerate when the caller passes a flag.
double validity_horizon(double omega_sup, double w0_norm,
                        bool* degenerate = nullptr);

// Checks the two conditions that make the layer position a stable slow
// variable: theta points toward the rest position xi_star on both sides,
// and theta crosses zero there with negative slope. beta = |theta'(xi_star)|
// is the local exponential approach rate.
struct drift_stability_report {
  double xi_star = 0.0;
  double beta = 0.0;
  double worst_sign_product = 0.0;  // max of (xi - xi_star) * theta(xi),
                                    // negative when the sign condition holds
  bool sign_condition = false;
  bool derivative_negative = false;
  int samples = 0;
};

drift_stability_report drift_stability_check(const flux_model& flux,
                                             double epsilon, double ell);

}  // namespace metastab
