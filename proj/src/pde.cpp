#include "metastab/pde.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>

#include "metastab/errors.hpp"
#include "metastab/manifold.hpp"
#include "metastab/numerics.hpp"

namespace metastab {

namespace {

void check_field(const grid_field& field, const char* where) {
  if (field.x.size() < 3) {
    std::ostringstream msg;
    msg << where << ": field needs at least 3 nodes, got " << field.x.size();
    throw validation_error(msg.str());
  }
  if (field.values.size() != field.x.size()) {
    std::ostringstream msg;
    msg << where << ": " << field.x.size() << " nodes but "
        << field.values.size() << " values";
    throw validation_error(msg.str());
  }
  const std::size_t n = field.x.size();
  const double h = (field.x.back() - field.x.front()) / double(n - 1);
  if (!(h > 0.0)) {
    std::ostringstream msg;
    msg << where << ": grid must be ascending";
    throw validation_error(msg.str());
  }
  for (std::size_t i = 0; i + 1 < n; ++i) {
    if (std::abs(field.x[i + 1] - field.x[i] - h) > 1e-8 * h) {
      std::ostringstream msg;
      msg << where << ": grid must be uniform, spacing at node " << i
          << " is " << field.x[i + 1] - field.x[i] << " vs " << h;
      throw validation_error(msg.str());
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(field.values[i])) {
      std::ostringstream msg;
      msg << where << ": non-finite value at node " << i;
      throw validation_error(msg.str());
    }
  }
}

double spacing(const grid_field& field) {
  return (field.x.back() - field.x.front()) / double(field.x.size() - 1);
}

// Solves (I - r D2) out = rhs in place, where D2 is the second-difference
// stencil on interior rows and the first and last rows are identities (the
// Dirichlet pins). Plain tridiagonal forward elimination; cwork holds the
// modified superdiagonal.
void solve_diffusion(std::vector<double>& rhs, double r,
                     std::vector<double>& cwork) {
  const std::size_t n = rhs.size();
  cwork[0] = 0.0;  // identity row: no superdiagonal
  double cp_prev = 0.0;
  const double b = 1.0 + 2.0 * r;
  for (std::size_t i = 1; i + 1 < n; ++i) {
    const double m = 1.0 / (b + r * cp_prev);
    cwork[i] = -r * m;
    rhs[i] = (rhs[i] + r * rhs[i - 1]) * m;
    cp_prev = cwork[i];
  }
  // last row is an identity with no subdiagonal, so rhs[n-1] already holds
  // the solution there
  for (std::size_t i = n - 1; i-- > 1;) {
    rhs[i] -= cwork[i] * rhs[i + 1];
  }
}

// One step of the interior update, boundaries left untouched. Explicit
// conservative convection with interface dissipation max(0, a/2 - eps/h),
// which is zero wherever the grid resolves the layer (the scheme is then
// plain second-order central) and falls back to local Lax-Friedrichs
// smearing where it does not; then trapezoidal-in-time diffusion through
// the tridiagonal solve above.
void step_core(const flux_model& flux, double epsilon, double h, double dt,
               std::vector<double>& u, std::vector<double>& face,
               std::vector<double>& rhs, std::vector<double>& cwork) {
  const std::size_t n = u.size();
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const double a =
        std::max(std::abs(flux.df(u[i])), std::abs(flux.df(u[i + 1])));
    const double nu = std::max(0.0, 0.5 * a - epsilon / h);
    face[i] = 0.5 * (flux.f(u[i]) + flux.f(u[i + 1])) - nu * (u[i + 1] - u[i]);
  }
  const double r = epsilon * dt / (2.0 * h * h);
  rhs[0] = u[0];
  rhs[n - 1] = u[n - 1];
  for (std::size_t i = 1; i + 1 < n; ++i) {
    rhs[i] = u[i] - (dt / h) * (face[i] - face[i - 1]) +
             r * (u[i - 1] - 2.0 * u[i] + u[i + 1]);
  }
  solve_diffusion(rhs, r, cwork);
  u.swap(rhs);
}

double max_speed_of(const flux_model& flux, const std::vector<double>& u) {
  double s = 0.0;
  for (const double v : u) s = std::max(s, std::abs(flux.df(v)));
  return s;
}

// Advective step limit for the explicit convection stage; the implicit
// diffusion stage imposes none. A field with no advection at all gets a
// grid-scale step as a usable convention.
double dt_limit(double speed, double h) {
  return speed > 1e-12 ? 0.4 * h / speed : 0.4 * h;
}

}  // namespace

int suggested_nodes(double epsilon, double ell) {
  if (!(epsilon > 0.0) || !(ell > 0.0)) {
    std::ostringstream msg;
    msg << "suggested_nodes: epsilon and ell must be positive, got epsilon="
        << epsilon << " ell=" << ell;
    throw validation_error(msg.str());
  }
  // at least 64 cells per unit of ell/epsilon, plus the closing node
  return static_cast<int>(std::ceil(64.0 * ell / epsilon)) + 1;
}

grid_field make_uniform_field(double ell, int n_nodes,
                              const std::function<double(double)>& u0,
                              double time) {
  if (!(ell > 0.0) || n_nodes < 3) {
    std::ostringstream msg;
    msg << "make_uniform_field: need ell > 0 and at least 3 nodes, got ell="
        << ell << " n_nodes=" << n_nodes;
    throw validation_error(msg.str());
  }
  if (!u0) {
    throw validation_error("make_uniform_field: empty initial function");
  }
  grid_field field;
  field.time = time;
  field.x.resize(n_nodes);
  field.values.resize(n_nodes);
  for (int i = 0; i < n_nodes; ++i) {
    field.x[i] = -ell + 2.0 * ell * i / double(n_nodes - 1);
  }
  field.x.back() = ell;  // close the interval exactly
  for (int i = 0; i < n_nodes; ++i) {
    field.values[i] = u0(field.x[i]);
  }
  check_field(field, "make_uniform_field");
  return field;
}

grid_field profile_field(const flux_model& flux, double xi, double epsilon,
                         double ell, int n_nodes) {
  grid_field field = make_uniform_field(ell, n_nodes, [](double) {
    return 0.0;
  });
  const kappa_pair kp = solve_kappa_pair(flux, xi, epsilon, ell);
  field.values = sample_profile(flux, xi, epsilon, ell, kp, field.x);
  return field;
}

double max_wave_speed(const flux_model& flux, const grid_field& field) {
  check_field(field, "max_wave_speed");
  return max_speed_of(flux, field.values);
}

double stable_dt(const flux_model& flux, const grid_field& field) {
  check_field(field, "stable_dt");
  return dt_limit(max_speed_of(flux, field.values), spacing(field));
}

grid_field step_viscous(const grid_field& field, double dt,
                        const flux_model& flux, double epsilon) {
  check_field(field, "step_viscous");
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) {
    std::ostringstream msg;
    msg << "step_viscous: epsilon must be positive, got " << epsilon;
    throw validation_error(msg.str());
  }
  if (!(dt > 0.0) || !std::isfinite(dt)) {
    std::ostringstream msg;
    msg << "step_viscous: dt must be positive, got " << dt;
    throw validation_error(msg.str());
  }
  const double h = spacing(field);
  const double speed = max_speed_of(flux, field.values);
  const double limit = dt_limit(speed, h);
  if (speed > 1e-12 && dt > limit * (1.0 + 1e-12)) {
    std::ostringstream msg;
    msg << "step_viscous: dt=" << dt << " exceeds the advective limit "
        << limit << " (0.4 h / max |f'|); use dt <= " << limit;
    throw validation_error(msg.str());
  }
  grid_field out = field;
  std::vector<double> face(field.x.size() - 1), rhs(field.x.size()),
      cwork(field.x.size());
  step_core(flux, epsilon, h, dt, out.values, face, rhs, cwork);
  out.time = field.time + dt;
  return out;
}

std::optional<double> locate_shock(const grid_field& field,
                                   const flux_model& flux) {
  check_field(field, "locate_shock");
  const double ustar = flux.u_star();
  const std::size_t n = field.x.size();

  // steepest interval, as the anchor for picking among several crossings
  std::size_t steep = 0;
  double steep_jump = -1.0;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const double jump = std::abs(field.values[i + 1] - field.values[i]);
    if (jump > steep_jump) {
      steep_jump = jump;
      steep = i;
    }
  }
  const double anchor = 0.5 * (field.x[steep] + field.x[steep + 1]);

  bool found = false;
  double best = 0.0;
  double best_dist = 0.0;
  auto consider = [&](double pos) {
    const double dist = std::abs(pos - anchor);
    if (!found || dist < best_dist) {
      found = true;
      best = pos;
      best_dist = dist;
    }
  };
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const double a = field.values[i] - ustar;
    const double b = field.values[i + 1] - ustar;
    if (a == 0.0) {
      consider(field.x[i]);
    } else if (a * b < 0.0) {
      consider(field.x[i] + (field.x[i + 1] - field.x[i]) * a / (a - b));
    }
  }
  if (field.values[n - 1] - ustar == 0.0) {
    consider(field.x[n - 1]);
  }
  if (!found) return std::nullopt;
  return best;
}

bool layer_formed(const grid_field& field, const flux_model& flux,
                  double epsilon) {
  check_field(field, "layer_formed");
  if (!(epsilon > 0.0)) {
    std::ostringstream msg;
    msg << "layer_formed: epsilon must be positive, got " << epsilon;
    throw validation_error(msg.str());
  }
  const double h = spacing(field);
  double steep = 0.0;
  for (std::size_t i = 0; i + 1 < field.x.size(); ++i) {
    steep = std::max(steep,
                     std::abs(field.values[i + 1] - field.values[i]) / h);
  }
  return steep >= std::abs(flux.u_minus()) / (4.0 * epsilon);
}

pde_run_result run_viscous(const grid_field& u0, const flux_model& flux,
                           double epsilon, double t_final,
                           const std::vector<double>& snapshot_times) {
  check_field(u0, "run_viscous");
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) {
    std::ostringstream msg;
    msg << "run_viscous: epsilon must be positive, got " << epsilon;
    throw validation_error(msg.str());
  }
  if (!(t_final > u0.time)) {
    std::ostringstream msg;
    msg << "run_viscous: t_final=" << t_final
        << " must exceed the initial time " << u0.time;
    throw validation_error(msg.str());
  }
  for (std::size_t i = 0; i < snapshot_times.size(); ++i) {
    const double s = snapshot_times[i];
    if (s < u0.time || s > t_final) {
      std::ostringstream msg;
      msg << "run_viscous: snapshot time " << s << " outside ["
          << u0.time << ", " << t_final << "]";
      throw validation_error(msg.str());
    }
    if (i > 0 && s <= snapshot_times[i - 1]) {
      throw validation_error(
          "run_viscous: snapshot times must be strictly increasing");
    }
  }

  const double h = spacing(u0);
  double data_scale = std::max(std::abs(flux.u_minus()),
                               std::abs(flux.u_plus()));
  for (const double v : u0.values) data_scale = std::max(data_scale, std::abs(v));
  const double guard = 10.0 * data_scale;

  pde_run_result result;
  result.track.method = "crossing";

  std::vector<double> u = u0.values;
  std::vector<double> face(u.size() - 1), rhs(u.size()), cwork(u.size());
  double t = u0.time;

  // cadence for track recording: aim for at most ~20k records
  const double dt0 = dt_limit(max_speed_of(flux, u), h);
  const long est_steps =
      static_cast<long>(std::ceil((t_final - t) / dt0)) + 1;
  const long stride = std::max(1L, est_steps / 16384L);

  grid_field scratch;
  scratch.x = u0.x;
  auto record_track = [&](void) {
    scratch.values = u;
    scratch.time = t;
    for (const double v : u) {
      if (!std::isfinite(v) || std::abs(v) > guard) {
        std::ostringstream msg;
        msg << "run_viscous: solution blew past " << guard << " at t=" << t
            << "; the scheme has lost stability";
        throw numerical_error(msg.str());
      }
    }
    const std::optional<double> pos = locate_shock(scratch, flux);
    if (!pos) return;
    result.track.times.push_back(t);
    result.track.positions.push_back(*pos);
    if (result.track.layer_formed_time < 0.0 &&
        layer_formed(scratch, flux, epsilon)) {
      result.track.layer_formed_time = t;
    }
  };

  std::size_t next_snap = 0;
  auto flush_snapshots = [&](void) {
    while (next_snap < snapshot_times.size() &&
           snapshot_times[next_snap] <= t + 1e-13 * std::max(1.0, t)) {
      result.snapshots.push_back(grid_field{u0.x, u, t});
      ++next_snap;
    }
  };

  record_track();
  flush_snapshots();

  long step_count = 0;
  while (t < t_final - 1e-13 * std::max(1.0, t_final)) {
    double dt = dt_limit(max_speed_of(flux, u), h);
    double event = t_final;
    if (next_snap < snapshot_times.size()) {
      event = std::min(event, snapshot_times[next_snap]);
    }
    bool landed = false;
    if (t + dt >= event - 1e-13 * std::max(1.0, event)) {
      dt = event - t;
      landed = true;
    }
    step_core(flux, epsilon, h, dt, u, face, rhs, cwork);
    t = landed ? event : t + dt;
    ++step_count;
    if (landed || step_count % stride == 0) {
      record_track();
      flush_snapshots();
    }
  }
  // the final iteration always lands on t_final, so the end state is on
  // the track already
  return result;
}

drift_comparison compare_with_drift(const shock_track& track,
                                    const reduced_trajectory& trajectory,
                                    double epsilon) {
  if (track.times.size() != track.positions.size()) {
    throw validation_error(
        "compare_with_drift: track times and positions differ in length");
  }
  if (track.times.empty()) {
    throw validation_error("compare_with_drift: empty track");
  }
  if (trajectory.times.size() != trajectory.zeta.size() ||
      trajectory.times.size() < 2) {
    throw validation_error(
        "compare_with_drift: trajectory needs at least two samples");
  }
  if (!(epsilon > 0.0)) {
    std::ostringstream msg;
    msg << "compare_with_drift: epsilon must be positive, got " << epsilon;
    throw validation_error(msg.str());
  }
  if (track.layer_formed_time < 0.0) {
    throw validation_error(
        "compare_with_drift: track never recorded a formed layer, nothing "
        "to compare against the drift");
  }

  // The drift trajectory lives in the slow clock and starts where the
  // track's layer has formed: a track instant t corresponds to drift time
  // s = epsilon * (t - layer_formed_time).
  const monotone_cubic zeta_of_s(trajectory.times, trajectory.zeta);
  const double t0 = track.layer_formed_time;
  const double s_lo = trajectory.times.front();
  const double s_hi = trajectory.times.back();

  drift_comparison report;
  std::vector<double> ts, diffs;
  std::size_t first_kept = 0, last_kept = 0;
  for (std::size_t i = 0; i < track.times.size(); ++i) {
    const double t = track.times[i];
    const double s = epsilon * (t - t0);
    if (t < t0 || s < s_lo || s > s_hi) continue;
    if (ts.empty()) first_kept = i;
    last_kept = i;
    ts.push_back(t);
    diffs.push_back(std::abs(track.positions[i] - zeta_of_s(s)));
  }
  if (ts.size() < 2) {
    throw validation_error(
        "compare_with_drift: overlap window between the track and the "
        "drift trajectory is empty");
  }
  report.points = ts.size();
  report.window_start = ts.front();
  report.window_end = ts.back();
  double area = 0.0;
  for (std::size_t i = 0; i + 1 < ts.size(); ++i) {
    area += 0.5 * (diffs[i] + diffs[i + 1]) * (ts[i + 1] - ts[i]);
    report.sup_diff = std::max(report.sup_diff, diffs[i]);
  }
  report.sup_diff = std::max(report.sup_diff, diffs.back());
  report.mean_diff = area / (ts.back() - ts.front());

  // direction of travel over the window, track vs drift
  const double track_delta =
      track.positions[last_kept] - track.positions[first_kept];
  const double drift_delta = zeta_of_s(epsilon * (ts.back() - t0)) -
                             zeta_of_s(epsilon * (ts.front() - t0));
  report.velocity_sign_agreement =
      track_delta * drift_delta > 0.0 ||
      (std::abs(track_delta) < 1e-6 && std::abs(drift_delta) < 1e-6);
  return report;
}

}  // namespace metastab
