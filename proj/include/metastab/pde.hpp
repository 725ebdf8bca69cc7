#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "metastab/flux.hpp"
#include "metastab/reduced.hpp"

namespace metastab {

// Nodal solution of the viscous balance law on a uniform grid over
// [-ell, ell]. Boundary nodes are Dirichlet data: the stepper never writes
// them, so whatever the initial field carries at the walls persists.
struct grid_field {
  std::vector<double> x;       // ascending, uniform
  std::vector<double> values;  // one per node
  double time = 0.0;
};

// Layer position over time, read off the computed fields. Positions come
// from the sonic-value crossing nearest the steepest node; times where no
// crossing exists are simply absent. layer_formed_time is the first
// recorded time the steepness test held with a crossing present, or -1.
struct shock_track {
  std::vector<double> times;
  std::vector<double> positions;
  std::string method = "crossing";
  double layer_formed_time = -1.0;
};

struct pde_run_result {
  std::vector<grid_field> snapshots;  // at the requested times, in order
  shock_track track;
};

// Window comparison of a computed layer track against a reduced drift
// trajectory. The drift runs in the slow clock and is taken to start at
// the instant the track's layer formed; the map between the two clocks is
// s = epsilon * (t - layer_formed_time), applied internally.
struct drift_comparison {
  double sup_diff = 0.0;        // max |track - drift| over the window
  double mean_diff = 0.0;       // time-weighted average of the same
  double window_start = 0.0;    // in viscous (fast) time
  double window_end = 0.0;
  std::size_t points = 0;
  bool velocity_sign_agreement = false;
};

// Smallest node count that resolves the layer width, plus one for the
// closing node.
int suggested_nodes(double epsilon, double ell);

grid_field make_uniform_field(double ell, int n_nodes,
                              const std::function<double(double)>& u0,
                              double time = 0.0);

// Samples the matched viscous profile with layer position xi onto a fresh
// uniform grid.
grid_field profile_field(const flux_model& flux, double xi, double epsilon,
                         double ell, int n_nodes);

// Largest advective speed |f'(u)| over the field, and the step size the
// explicit convection update tolerates at that speed.
double max_wave_speed(const flux_model& flux, const grid_field& field);
double stable_dt(const flux_model& flux, const grid_field& field);

// One semi-implicit step: explicit conservative convection with interface
// dissipation max(0, |a|/2 - eps/h) that vanishes on layer-resolving
// grids, then implicit trapezoidal diffusion via a tridiagonal solve.
// Rejects dt above the advective bound, suggesting a usable value.
grid_field step_viscous(const grid_field& field, double dt,
                        const flux_model& flux, double epsilon);

// Sonic-value crossing nearest the steepest node, by linear interpolation;
// empty when the field never crosses the sonic value.
std::optional<double> locate_shock(const grid_field& field,
                                   const flux_model& flux);

// Steepness test separating the fast formation stage from the slow drift:
// max |du/dx| at least u_minus / (4 eps).
bool layer_formed(const grid_field& field, const flux_model& flux,
                  double epsilon);

// Integrates to t_final with automatic step control, recording snapshots
// at the requested times and the layer track at a bounded cadence. Aborts
// with a numerical error if values blow past ten times the data scale.
pde_run_result run_viscous(const grid_field& u0, const flux_model& flux,
                           double epsilon, double t_final,
                           const std::vector<double>& snapshot_times);

// Compares the recorded track against a reduced drift trajectory on the
// overlap window that starts once the layer has formed.
drift_comparison compare_with_drift(const shock_track& track,
                                    const reduced_trajectory& trajectory,
                                    double epsilon);

}  // namespace metastab
