#include "metastab/hyperbolic.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <sstream>
#include <utility>

#include "metastab/errors.hpp"
#include "metastab/numerics.hpp"

namespace metastab {

namespace {

void check_cells(const hyperbolic_field& field, const char* where) {
  if (field.centers.size() < 2) {
    std::ostringstream msg;
    msg << where << ": field needs at least 2 cells, got "
        << field.centers.size();
    throw validation_error(msg.str());
  }
  if (field.cell_values.size() != field.centers.size()) {
    std::ostringstream msg;
    msg << where << ": " << field.centers.size() << " cells but "
        << field.cell_values.size() << " values";
    throw validation_error(msg.str());
  }
  const std::size_t n = field.centers.size();
  const double dx =
      (field.centers.back() - field.centers.front()) / double(n - 1);
  if (!(dx > 0.0)) {
    std::ostringstream msg;
    msg << where << ": cell centers must be ascending";
    throw validation_error(msg.str());
  }
  for (std::size_t i = 0; i + 1 < n; ++i) {
    if (std::abs(field.centers[i + 1] - field.centers[i] - dx) > 1e-8 * dx) {
      std::ostringstream msg;
      msg << where << ": cell centers must be uniform, spacing at cell " << i
          << " is " << field.centers[i + 1] - field.centers[i] << " vs " << dx;
      throw validation_error(msg.str());
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(field.cell_values[i])) {
      std::ostringstream msg;
      msg << where << ": non-finite value in cell " << i;
      throw validation_error(msg.str());
    }
  }
}

double cell_width(const hyperbolic_field& field) {
  return (field.centers.back() - field.centers.front()) /
         double(field.centers.size() - 1);
}

double half_length(const hyperbolic_field& field) {
  return field.centers.back() + 0.5 * cell_width(field);
}

double max_speed(const flux_model& flux, const std::vector<double>& u) {
  double s = std::max(std::abs(flux.df(flux.u_minus())),
                      std::abs(flux.df(flux.u_plus())));
  for (const double v : u) s = std::max(s, std::abs(flux.df(v)));
  return s;
}

// prefix / suffix cell counts within tol of the boundary data
std::pair<std::size_t, std::size_t> plateau_counts(
    const hyperbolic_field& field, const flux_model& flux, double tol) {
  const std::size_t n = field.cell_values.size();
  std::size_t k = 0;
  while (k < n && std::abs(field.cell_values[k] - flux.u_minus()) <= tol) ++k;
  std::size_t m = 0;
  while (m < n &&
         std::abs(field.cell_values[n - 1 - m] - flux.u_plus()) <= tol)
    ++m;
  return {k, m};
}

double default_tol(const flux_model& flux) {
  return 1e-3 * std::abs(flux.jump());
}

}  // namespace

hyperbolic_field make_cell_field(double ell, int n_cells,
                                 const std::function<double(double)>& u0,
                                 double time) {
  if (!(ell > 0.0) || n_cells < 2) {
    std::ostringstream msg;
    msg << "make_cell_field: need ell > 0 and at least 2 cells, got ell="
        << ell << " n_cells=" << n_cells;
    throw validation_error(msg.str());
  }
  if (!u0) {
    throw validation_error("make_cell_field: empty initial function");
  }
  hyperbolic_field field;
  field.time = time;
  const double dx = 2.0 * ell / n_cells;
  field.centers.resize(n_cells);
  field.cell_values.resize(n_cells);
  for (int i = 0; i < n_cells; ++i) {
    field.centers[i] = -ell + (i + 0.5) * dx;
    field.cell_values[i] = u0(field.centers[i]);
  }
  check_cells(field, "make_cell_field");
  return field;
}

hyperbolic_field step_field(const flux_model& flux, double xi, double ell,
                            int n_cells) {
  return make_cell_field(ell, n_cells, [&](double x) {
    return x < xi ? flux.u_minus() : flux.u_plus();
  });
}

double conjugate_state(const flux_model& flux, double u) {
  const double lo = flux.u_plus();
  const double hi = flux.u_minus();
  const double slack = 1e-12 * (hi - lo);
  if (u < lo - slack || u > hi + slack) {
    std::ostringstream msg;
    msg << "conjugate_state: u=" << u << " outside the state interval ["
        << lo << ", " << hi << "]";
    throw validation_error(msg.str());
  }
  const double us = flux.u_star();
  if (u == us) return us;
  if (u == hi) return lo;
  if (u == lo) return hi;
  const double target = flux.f(u);
  // the conjugate sits on the other branch, where f - target brackets:
  // f = target at the far endpoint side and f = f(u_star) < target at u_star
  auto g = [&](double w) { return flux.f(w) - target; };
  if (u > us) return find_root(g, lo, us);
  return find_root(g, us, hi);
}

double godunov_flux(const flux_model& flux, double ul, double ur) {
  const double us = flux.u_star();
  if (ul <= ur) {
    // transonic rarefaction picks the sonic flux, the minimum of convex f
    if (ul <= us && us <= ur) return flux.f(us);
    return std::min(flux.f(ul), flux.f(ur));
  }
  return std::max(flux.f(ul), flux.f(ur));
}

double cfl_dt(const flux_model& flux, const hyperbolic_field& field) {
  check_cells(field, "cfl_dt");
  const double s = max_speed(flux, field.cell_values);
  const double dx = cell_width(field);
  return s > 1e-12 ? 0.9 * dx / s : 0.9 * dx;
}

hyperbolic_field godunov_step(const hyperbolic_field& field,
                              const flux_model& flux, double dt) {
  check_cells(field, "godunov_step");
  if (!(dt > 0.0) || !std::isfinite(dt)) {
    std::ostringstream msg;
    msg << "godunov_step: dt must be positive, got " << dt;
    throw validation_error(msg.str());
  }
  const double dx = cell_width(field);
  const double s = max_speed(flux, field.cell_values);
  if (dt * s > 0.9 * dx * (1.0 + 1e-12)) {
    std::ostringstream msg;
    msg << "godunov_step: dt=" << dt << " violates the 0.9 advective bound; "
        << "use dt <= " << 0.9 * dx / s;
    throw validation_error(msg.str());
  }
  const std::size_t n = field.cell_values.size();
  const std::vector<double>& u = field.cell_values;
  hyperbolic_field out = field;
  double left_flux = godunov_flux(flux, flux.u_minus(), u[0]);
  for (std::size_t i = 0; i < n; ++i) {
    const double right_flux = i + 1 < n
                                  ? godunov_flux(flux, u[i], u[i + 1])
                                  : godunov_flux(flux, u[i], flux.u_plus());
    out.cell_values[i] = u[i] - dt / dx * (right_flux - left_flux);
    left_flux = right_flux;
  }
  out.time = field.time + dt;
  return out;
}

front_state track_fronts(const hyperbolic_field& field,
                         const flux_model& flux, double tol) {
  check_cells(field, "track_fronts");
  if (tol <= 0.0) tol = default_tol(flux);
  const auto [k, m] = plateau_counts(field, flux, tol);
  const double dx = cell_width(field);
  const double ell = half_length(field);
  front_state fronts;
  fronts.zeta_minus = -ell + double(k) * dx;
  fronts.zeta_plus = ell - double(m) * dx;
  fronts.time = field.time;
  return fronts;
}

double total_variation(const hyperbolic_field& field,
                       const flux_model& flux) {
  check_cells(field, "total_variation");
  double tv = std::abs(field.cell_values.front() - flux.u_minus()) +
              std::abs(flux.u_plus() - field.cell_values.back());
  for (std::size_t i = 0; i + 1 < field.cell_values.size(); ++i) {
    tv += std::abs(field.cell_values[i + 1] - field.cell_values[i]);
  }
  return tv;
}

double speed_gap(const flux_model& flux) {
  const double up = flux.u_plus();
  const double um = flux.u_minus();
  const double fb = flux.f_boundary();
  const int samples = 10000;
  double a = std::numeric_limits<double>::infinity();
  for (int j = 0; j < samples; ++j) {
    const double u = up + (um - up) * (j + 0.5) / samples;
    const double phi = (fb - flux.f(u)) * (um - up) / ((um - u) * (u - up));
    a = std::min(a, phi);
  }
  return a;
}

stabilization_report stabilization_time(const hyperbolic_field& u0,
                                        const flux_model& flux,
                                        double t_max) {
  check_cells(u0, "stabilization_time");
  if (!(t_max > 0.0) || !std::isfinite(t_max)) {
    std::ostringstream msg;
    msg << "stabilization_time: t_max must be positive, got " << t_max;
    throw validation_error(msg.str());
  }
  const double dx = cell_width(u0);
  const double ell = half_length(u0);
  const double tol = default_tol(flux);

  stabilization_report report;
  report.speed_gap = speed_gap(flux);
  report.bound = (2.0 * ell + 3.0 * dx) / report.speed_gap;

  hyperbolic_field field = u0;
  auto is_step = [&](void) {
    const auto [k, m] = plateau_counts(field, flux, tol);
    return field.cell_values.size() - (k + m) <= 1;
  };
  auto finish = [&](void) {
    const front_state fronts = track_fronts(field, flux, tol);
    report.stabilized = true;
    report.time = field.time - u0.time;
    report.xi = 0.5 * (fronts.zeta_minus + fronts.zeta_plus);
  };

  if (is_step()) {
    finish();
    return report;
  }
  const double t_end = u0.time + t_max;
  while (field.time < t_end - 1e-13 * std::max(1.0, t_end)) {
    const double dt = std::min(cfl_dt(flux, field), t_end - field.time);
    field = godunov_step(field, flux, dt);
    ++report.steps;
    if (is_step()) {
      finish();
      return report;
    }
  }
  report.stabilized = false;
  report.time = t_max;
  return report;
}

}  // namespace metastab
