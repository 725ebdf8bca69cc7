#pragma once

#include <functional>
#include <vector>

#include "metastab/flux.hpp"

namespace metastab {

// Finite-volume solution of the inviscid law on [-ell, ell]: cell averages
// on a uniform cell-centered grid. The interval endpoints are the outer
// cell faces, so ell = centers.back() + dx/2.
struct hyperbolic_field {
  std::vector<double> centers;
  std::vector<double> cell_values;
  double time = 0.0;
};

// Edges of the boundary plateaus: zeta_minus is the right edge of the
// largest run of cells holding u_minus from the left wall, zeta_plus the
// left edge of the u_plus run from the right wall.
struct front_state {
  double zeta_minus = 0.0;
  double zeta_plus = 0.0;
  double time = 0.0;
};

struct stabilization_report {
  bool stabilized = false;
  double time = 0.0;       // first detection time, or t_max when timed out
  double xi = 0.0;         // step position, meaningful when stabilized
  double speed_gap = 0.0;  // A, the infimum of the approach-speed function
  double bound = 0.0;      // (2 ell + 3 dx) / A, the predicted ceiling
  long steps = 0;
};

hyperbolic_field make_cell_field(double ell, int n_cells,
                                 const std::function<double(double)>& u0,
                                 double time = 0.0);

// Sharp admissible step: u_minus on cells left of xi, u_plus from xi on.
hyperbolic_field step_field(const flux_model& flux, double xi, double ell,
                            int n_cells);

// The state on the other flux branch with the same flux value: w != u with
// f(w) = f(u), and the sonic point maps to itself.
double conjugate_state(const flux_model& flux, double u);

// Exact-Riemann interface flux for convex f: the minimum of f over
// [ul, ur] when ul <= ur, the maximum over [ur, ul] otherwise.
double godunov_flux(const flux_model& flux, double ul, double ur);

// Largest step satisfying the 0.9 advective bound for this field,
// boundary data included.
double cfl_dt(const flux_model& flux, const hyperbolic_field& field);

// One conservative update with exact Riemann fluxes; the wall interfaces
// solve Riemann problems against exterior states u_minus (left) and
// u_plus (right), which realizes the admissible boundary-trace sets for
// this flux class. Rejects dt above the 0.9 advective bound.
hyperbolic_field godunov_step(const hyperbolic_field& field,
                              const flux_model& flux, double dt);

// Plateau edges within tol of the boundary data; tol <= 0 picks the
// default 1e-3 * |u_plus - u_minus|. A field entirely at u_minus has
// zeta_minus = ell (the sup in the definition), and an empty prefix gives
// -ell; symmetrically for zeta_plus.
front_state track_fronts(const hyperbolic_field& field,
                         const flux_model& flux, double tol = 0.0);

// Total variation including the jumps against the exterior boundary data;
// this is the quantity the monotone update cannot increase.
double total_variation(const hyperbolic_field& field, const flux_model& flux);

// A = inf of the approach-speed function
// Phi(u) = (f(u_pm) - f(u)) (u_minus - u_plus) / ((u_minus - u)(u - u_plus))
// over the open state interval, by dense sampling.
double speed_gap(const flux_model& flux);

// Marches at the CFL step until every cell is within tol of u_minus or
// u_plus with at most one transition cell, or until t_max. The report
// carries the detection time, the step position, and the predicted
// time ceiling (2 ell + 3 dx) / A.
stabilization_report stabilization_time(const hyperbolic_field& u0,
                                        const flux_model& flux, double t_max);

}  // namespace metastab
