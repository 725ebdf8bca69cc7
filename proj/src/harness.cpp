#include "metastab/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "metastab/errors.hpp"
#include "metastab/hyperbolic.hpp"
#include "metastab/manifold.hpp"
#include "metastab/numerics.hpp"
#include "metastab/pde.hpp"
#include "metastab/reduced.hpp"
#include "metastab/spectral.hpp"

namespace metastab {
namespace {

std::string trim(const std::string& s) {
  const std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_fields(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double parse_double(const std::string& where, const std::string& text) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(text, &pos);
    if (pos != text.size()) throw std::invalid_argument("trailing text");
    return v;
  } catch (const std::exception&) {
    throw validation_error(where + ": cannot parse '" + text +
                           "' as a number");
  }
}

long parse_integer(const std::string& where, const std::string& text) {
  try {
    std::size_t pos = 0;
    const long v = std::stol(text, &pos);
    if (pos != text.size()) throw std::invalid_argument("trailing text");
    return v;
  } catch (const std::exception&) {
    throw validation_error(where + ": cannot parse '" + text +
                           "' as an integer");
  }
}

std::string fmt_key(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4e", v);
  return buf;
}

std::string fmt_value(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.16e", v);
  return buf;
}

std::string eps_key(const char* module, double eps) {
  return std::string(module) + "/eps=" + fmt_key(eps);
}

// One CSV file produced by a work item, held until the single-threaded
// merge writes it out.
struct csv_payload {
  std::string filename;
  std::string header;
  std::vector<std::vector<double>> rows;
};

struct item_output {
  std::map<std::string, std::map<std::string, double>> records;
  std::map<std::string, exp_fit> fits;
  std::vector<csv_payload> csvs;
};

struct work_item {
  std::string key;
  std::function<item_output()> run;
};

// Row indices kept when a long time series is thinned for CSV output:
// every stride-th row plus the final one, at most ~2k rows.
std::vector<std::size_t> thinned_rows(std::size_t n) {
  std::vector<std::size_t> idx;
  if (n == 0) return idx;
  const std::size_t stride = std::max<std::size_t>(1, n / 2048);
  for (std::size_t i = 0; i < n; i += stride) idx.push_back(i);
  if (idx.back() != n - 1) idx.push_back(n - 1);
  return idx;
}

bool has_module(const scenario_config& cfg, const std::string& name) {
  return std::find(cfg.modules.begin(), cfg.modules.end(), name) !=
         cfg.modules.end();
}

// Layer positions the manifold and spectral items fan over.
std::vector<double> layer_positions(const scenario_config& cfg,
                                    const flux_model& flux, double eps) {
  if (!cfg.xi_list.empty()) return cfg.xi_list;
  if (std::isfinite(cfg.xi0)) return {cfg.xi0};
  return {steady_state(flux, eps, cfg.ell).xi_star};
}

// Piecewise-linear sample of a grid function on interior nodes, tapered
// to zero at the walls where the modes vanish.
double sample_interior(const std::vector<double>& xs,
                       const std::vector<double>& ys, double ell, double x) {
  if (x <= -ell || x >= ell) return 0.0;
  if (x <= xs.front())
    return ys.front() * (x + ell) / (xs.front() + ell);
  if (x >= xs.back()) return ys.back() * (ell - x) / (ell - xs.back());
  const auto it = std::upper_bound(xs.begin(), xs.end(), x);
  const std::size_t i = static_cast<std::size_t>(it - xs.begin());
  const double t = (x - xs[i - 1]) / (xs[i] - xs[i - 1]);
  return ys[i - 1] + t * (ys[i] - ys[i - 1]);
}

spectral_decomposition matched_decomposition(const flux_model& flux,
                                             double xi, double eps,
                                             double ell, int n_modes) {
  const matched_profile p = build_profile(flux, xi, eps, ell, 64);
  return eigensolve(assemble_operator(matched_coefficient(flux, p)), n_modes);
}

// Drift rate as a function of position, sampled across [zlo, zhi] and
// interpolated, so a recorded trajectory can be annotated without an
// eigensolve per row.
monotone_cubic theta_interpolant(const flux_model& flux, double eps,
                                 double ell, int n_modes, double zlo,
                                 double zhi) {
  if (zhi - zlo < 1e-6) {
    const double mid = 0.5 * (zlo + zhi);
    zlo = mid - 5e-7;
    zhi = mid + 5e-7;
  }
  const int samples = 12;
  std::vector<double> zs(samples), ths(samples);
  for (int i = 0; i < samples; ++i) {
    zs[i] = zlo + (zhi - zlo) * i / (samples - 1);
    const auto dec = matched_decomposition(flux, zs[i], eps, ell, n_modes);
    ths[i] = theta(flux, zs[i], eps, ell, dec);
  }
  return monotone_cubic(std::move(zs), std::move(ths));
}

item_output manifold_item(const scenario_config& cfg, const flux_model& flux,
                          double eps, std::size_t eps_index) {
  item_output out;
  const std::string base = eps_key("manifold", eps);
  const auto steady = steady_state(flux, eps, cfg.ell);
  const double margin = admissible_margin(eps, cfg.ell);
  auto& top = out.records[base];
  top["eps"] = eps;
  top["xi_star"] = steady.xi_star;
  top["kappa_star"] = steady.kappa;
  top["margin"] = margin;

  for (const double xi : layer_positions(cfg, flux, eps)) {
    const matched_profile profile = build_profile(flux, xi, eps, cfg.ell, 512);
    auto& rec = out.records[base + "/xi=" + fmt_key(xi)];
    rec["eps"] = eps;
    rec["xi"] = xi;
    rec["kappa_minus"] = profile.kappa_minus;
    rec["kappa_plus"] = profile.kappa_plus;
    rec["residual"] = residual(profile);
    rec["omega"] = omega_bound(profile);
    // |kappa_minus - kappa_plus| without subtracting the near-equal
    // constants themselves.
    rec["gap"] = eps * std::abs(residual(profile));
  }

  if (cfg.xi_count > 0) {
    // Randomized probe positions, seeded per epsilon so reruns and any
    // worker count draw the same points.
    std::mt19937_64 rng(cfg.seed ^ (0x9e3779b97f4a7c15ULL * (eps_index + 1)));
    const double reach = 0.999 * (cfg.ell - margin);
    std::uniform_real_distribution<double> pos(-reach, reach);
    for (int j = 0; j < cfg.xi_count; ++j) {
      const double xi = pos(rng);
      const matched_profile profile =
          build_profile(flux, xi, eps, cfg.ell, 256);
      char tag[24];
      std::snprintf(tag, sizeof tag, "/probe=%02d", j);
      auto& rec = out.records[base + tag];
      rec["xi"] = xi;
      rec["residual"] = residual(profile);
      rec["omega"] = omega_bound(profile);
    }
  }
  return out;
}

item_output spectral_item(const scenario_config& cfg, const flux_model& flux,
                          double eps) {
  item_output out;
  const std::string base = eps_key("spectral", eps);
  const double am = flux.df(flux.u_minus());
  const double ap = flux.df(flux.u_plus());
  const int n_interior = cfg.n_nodes > 0 ? cfg.n_nodes : 0;

  for (const double xi : layer_positions(cfg, flux, eps)) {
    const matched_profile profile = build_profile(flux, xi, eps, cfg.ell, 64);
    const coefficient_field coeff =
        cfg.coefficient == "step"
            ? step_coefficient(am, ap, xi, eps, cfg.ell, n_interior)
            : matched_coefficient(flux, profile, n_interior);
    const spectral_decomposition dec =
        eigensolve(assemble_operator(coeff), cfg.n_modes);

    auto& rec = out.records[base + "/xi=" + fmt_key(xi)];
    rec["eps"] = eps;
    rec["xi"] = xi;
    for (int k = 0; k < cfg.n_modes; ++k) {
      char name[24];
      std::snprintf(name, sizeof name, "lambda_%02d", k + 1);
      rec[name] = dec.lambdas[static_cast<std::size_t>(k)];
    }
    rec["lambda1_asym"] =
        lambda1_asymptotic(am, ap, cfg.ell + xi, cfg.ell - xi, eps);
    const step_spectrum roots =
        step_eigenvalues({am, ap, cfg.ell + xi, cfg.ell - xi, eps}, 1);
    if (!roots.lambdas.empty())
      rec["lambda1_transcendental"] = roots.lambdas.front();
    if (cfg.n_modes >= 2) {
      rec["eps_lambda2"] = eps * dec.lambdas[1];
      if (dec.lambdas[0] != 0.0)
        rec["gap_ratio"] = std::abs(dec.lambdas[1] / dec.lambdas[0]);
    }
    bool used_asymptotic = false;
    rec["meta_ratio"] = meta_ratio(profile, dec, &used_asymptotic);
    rec["used_asymptotic"] = used_asymptotic ? 1.0 : 0.0;
  }
  return out;
}

item_output reduced_item(const scenario_config& cfg, const flux_model& flux,
                         double eps) {
  item_output out;
  const std::string base = eps_key("reduced", eps);
  const std::string eps_tag = fmt_key(eps);
  const auto steady = steady_state(flux, eps, cfg.ell);
  auto& rec = out.records[base];
  rec["eps"] = eps;
  rec["xi_star"] = steady.xi_star;
  rec["kappa_star"] = steady.kappa;

  const double xi_r = std::isfinite(cfg.xi0) ? cfg.xi0 : steady.xi_star;
  // Alongside a viscous run the drift covers the same window mapped to
  // the slow clock; standalone it runs the configured window directly.
  const double t_drift =
      has_module(cfg, "pde") ? eps * cfg.t_final : cfg.t_final;
  const reduced_trajectory traj =
      integrate_drift(flux, xi_r, eps, cfg.ell, t_drift);
  rec["zeta_end"] = traj.zeta.back();
  rec["theta_start"] = traj.theta_values.front();
  rec["exited_range"] = traj.exited_range ? 1.0 : 0.0;
  rec["drift_points"] = static_cast<double>(traj.times.size());

  csv_payload drift;
  drift.filename = "drift_eps=" + eps_tag + ".csv";
  drift.header = "t,zeta,theta";
  for (const std::size_t i : thinned_rows(traj.times.size()))
    drift.rows.push_back({traj.times[i], traj.zeta[i], traj.theta_values[i]});
  out.csvs.push_back(std::move(drift));

  // Least-squares line through log|zeta - xi_star| over the last decade
  // of the approach. Points past the first arrival at the decade floor
  // are dropped so a resolution plateau cannot pollute the fit.
  {
    std::vector<double> ts, logd;
    const double d_end = std::abs(traj.zeta.back() - steady.xi_star);
    const double d_lo = std::max(d_end, 1e-9);
    for (std::size_t i = 0; i < traj.times.size(); ++i) {
      const double d = std::abs(traj.zeta[i] - steady.xi_star);
      if (d <= 10.0 * d_lo && d > 0.0) {
        ts.push_back(traj.times[i]);
        logd.push_back(std::log(d));
      }
      if (d <= d_lo) break;
    }
    if (ts.size() >= 4) {
      const line_fit fit = fit_line(ts, logd);
      out.fits["relaxation/eps=" + eps_tag] = {fit.slope, fit.intercept,
                                               fit.residual};
    }
  }

  if (cfg.w0_amplitude > 0.0) {
    // Seed the perturbation with the second mode of the operator at the
    // starting position; the integrator projects off the slow mode.
    const auto dec =
        matched_decomposition(flux, xi_r, eps, cfg.ell, cfg.n_modes);
    const double amp = cfg.w0_amplitude;
    const double ell = cfg.ell;
    const auto w0 = [dec, amp, ell](double x) {
      return amp * sample_interior(dec.x, dec.phis[1], ell, x);
    };
    const quasilinear_result qr = integrate_quasilinear(
        flux, xi_r, w0, eps, cfg.ell, cfg.n_modes, cfg.t_final);

    rec["omega_sup"] = qr.omega_sup;
    rec["fitted_c"] = qr.report.fitted_c;
    rec["horizon"] = qr.report.horizon;
    rec["horizon_degenerate"] = qr.report.horizon_degenerate ? 1.0 : 0.0;
    rec["w0_norm"] = qr.w0_norm;
    rec["coupling_tail"] = qr.coupling_tail;
    rec["quasi_exited"] = qr.exited_range ? 1.0 : 0.0;
    rec["quasi_zeta_end"] = qr.states.back().zeta;
    rec["quasi_states"] = static_cast<double>(qr.states.size());
    double w1_max = 0.0;
    double zlo = qr.states.front().zeta, zhi = zlo;
    for (const auto& st : qr.states) {
      w1_max = std::max(w1_max, std::abs(st.w_coeffs[0]));
      zlo = std::min(zlo, st.zeta);
      zhi = std::max(zhi, st.zeta);
    }
    rec["w1_max"] = w1_max;

    const monotone_cubic th =
        theta_interpolant(flux, eps, cfg.ell, cfg.n_modes, zlo, zhi);
    csv_payload series;
    series.filename = "reduce_eps=" + eps_tag + ".csv";
    series.header = "t,zeta,theta,w_norm,w_minus_z,bound_rhs";
    for (const std::size_t i : thinned_rows(qr.states.size())) {
      series.rows.push_back({qr.states[i].time, qr.states[i].zeta,
                             th(qr.states[i].zeta), qr.w_norm[i],
                             qr.report.w_minus_z_norm[i],
                             qr.report.bound_rhs[i]});
    }
    out.csvs.push_back(std::move(series));
  }
  return out;
}

grid_field initial_state(const scenario_config& cfg, const flux_model& flux,
                         double eps, int n_nodes) {
  const std::string& preset = cfg.u0_preset;
  if (preset == "manifold")
    return profile_field(flux, cfg.xi0, eps, cfg.ell, n_nodes);
  if (preset == "steady") {
    const double xi_star = steady_state(flux, eps, cfg.ell).xi_star;
    return profile_field(flux, xi_star, eps, cfg.ell, n_nodes);
  }
  if (preset == "figure1") {
    // Entering parabola through the boundary states that steepens into a
    // layer right of center before the slow drift takes over.
    const double um = flux.u_minus(), up = flux.u_plus(), ell = cfg.ell;
    const double a = (um - up) / (4.0 * ell * ell);
    const double b = (up - um) / (2.0 * ell);
    const double c = 0.5 * (um + up) - 0.25 * (um - up);
    return make_uniform_field(
        ell, n_nodes, [a, b, c](double x) { return (a * x + b) * x + c; });
  }
  if (preset.rfind("poly:", 0) == 0) {
    std::vector<double> coeffs;
    for (const std::string& f : split_fields(preset.substr(5)))
      coeffs.push_back(parse_double("u0_preset", f));
    if (coeffs.empty())
      throw validation_error("u0_preset poly: needs coefficients");
    return make_uniform_field(cfg.ell, n_nodes, [coeffs](double x) {
      double v = 0.0;
      for (std::size_t k = coeffs.size(); k-- > 0;) v = v * x + coeffs[k];
      return v;
    });
  }
  throw validation_error("unknown u0 preset '" + preset + "'");
}

item_output pde_item(const scenario_config& cfg, const flux_model& flux,
                     double eps) {
  item_output out;
  const std::string base = eps_key("pde", eps);
  const std::string eps_tag = fmt_key(eps);
  const int n =
      cfg.n_nodes > 0 ? cfg.n_nodes : suggested_nodes(eps, cfg.ell);
  const grid_field u0 = initial_state(cfg, flux, eps, n);
  const pde_run_result run =
      run_viscous(u0, flux, eps, cfg.t_final, cfg.snapshot_times);
  const auto steady = steady_state(flux, eps, cfg.ell);
  const double h = 2.0 * cfg.ell / (n - 1);

  auto& rec = out.records[base];
  rec["eps"] = eps;
  rec["n_nodes"] = n;
  rec["xi_star"] = steady.xi_star;
  rec["snapshots"] = static_cast<double>(run.snapshots.size());
  rec["track_points"] = static_cast<double>(run.track.positions.size());
  rec["layer_formed_time"] = run.track.layer_formed_time;
  if (!run.track.positions.empty())
    rec["final_position"] = run.track.positions.back();

  const auto& times = run.track.times;
  const auto& pos = run.track.positions;
  if (run.track.layer_formed_time >= 0.0 && !pos.empty()) {
    const double t0 = run.track.layer_formed_time;
    std::size_t k0 = 0;
    while (k0 + 1 < times.size() && times[k0] < t0 - 1e-12) ++k0;
    rec["formation_position"] = pos[k0];

    // Stage timestamps: when the track first leaves its formation
    // position by a visible margin, and when it first reaches the rest
    // position within the configured tolerance.
    rec["drift_onset_time"] = -1.0;
    rec["equilibrium_time"] = -1.0;
    for (std::size_t k = k0; k < times.size(); ++k) {
      if (rec["drift_onset_time"] < 0.0 &&
          std::abs(pos[k] - pos[k0]) > 2.0 * h)
        rec["drift_onset_time"] = times[k];
      if (rec["equilibrium_time"] < 0.0 &&
          std::abs(pos[k] - steady.xi_star) <= cfg.equilibrium_tol)
        rec["equilibrium_time"] = times[k];
    }

    const double s_end = eps * (cfg.t_final - t0);
    const bool admissible =
        std::abs(pos[k0]) < cfg.ell - admissible_margin(eps, cfg.ell);
    if (s_end > 0.0 && admissible && times.size() - k0 >= 2) {
      const reduced_trajectory traj =
          integrate_drift(flux, pos[k0], eps, cfg.ell, s_end);
      const drift_comparison cmp =
          compare_with_drift(run.track, traj, eps);
      rec["sup_vs_drift"] = cmp.sup_diff;
      rec["mean_vs_drift"] = cmp.mean_diff;
      rec["compare_points"] = static_cast<double>(cmp.points);
      rec["sign_agreement"] = cmp.velocity_sign_agreement ? 1.0 : 0.0;
      rec["window_start"] = cmp.window_start;
      rec["window_end"] = cmp.window_end;
    }
  }

  if (!pos.empty()) {
    csv_payload track;
    track.filename = "track_eps=" + eps_tag + ".csv";
    track.header = "t,position";
    for (const std::size_t i : thinned_rows(times.size()))
      track.rows.push_back({times[i], pos[i]});
    out.csvs.push_back(std::move(track));
  }

  if (!run.snapshots.empty()) {
    csv_payload snaps;
    snaps.filename = "snapshots_eps=" + eps_tag + ".csv";
    std::ostringstream head;
    head << "x";
    for (const auto& field : run.snapshots) {
      char col[40];
      std::snprintf(col, sizeof col, ",u_t=%.6g", field.time);
      head << col;
    }
    snaps.header = head.str();
    const auto& xs = run.snapshots.front().x;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      std::vector<double> row;
      row.reserve(run.snapshots.size() + 1);
      row.push_back(xs[i]);
      for (const auto& field : run.snapshots) row.push_back(field.values[i]);
      snaps.rows.push_back(std::move(row));
    }
    out.csvs.push_back(std::move(snaps));
  }
  return out;
}

item_output hyperbolic_item(const scenario_config& cfg,
                            const flux_model& flux) {
  item_output out;
  const double um = flux.u_minus(), up = flux.u_plus(), ell = cfg.ell;
  const double mid = 0.5 * (um + up), half = 0.5 * (um - up);
  const double a = speed_gap(flux);
  const double dx = 2.0 * ell / cfg.n_cells;
  const double bound = (2.0 * ell + 3.0 * dx) / a;
  const double budget = cfg.t_max > 0.0 ? cfg.t_max : 2.0 * bound;

  struct preset {
    const char* name;
    std::function<double(double)> u0;
  };
  const preset presets[] = {
      {"clamp",
       [=](double x) { return mid - half * std::clamp(3.0 * x / ell, -1.0, 1.0); }},
      {"parabola",
       [=](double x) {
         const double qa = (um - up) / (4.0 * ell * ell);
         const double qb = (up - um) / (2.0 * ell);
         const double qc = 0.5 * (um + up) - 0.25 * (um - up);
         return (qa * x + qb) * x + qc;
       }},
      {"ramp", [=](double x) { return um + (up - um) * (x + ell) / (2.0 * ell); }},
      {"smoothstep",
       [=](double x) {
         return mid - half * std::tanh((x - 0.3 * ell) / (0.15 * ell));
       }},
      {"staircase",
       [=](double x) {
         if (x < -0.5 * ell) return um;
         if (x < 0.4 * ell) return 0.25 * (um + 3.0 * up);
         return up;
       }},
  };

  for (const auto& p : presets) {
    const hyperbolic_field u0 = make_cell_field(ell, cfg.n_cells, p.u0);
    const stabilization_report rep = stabilization_time(u0, flux, budget);
    auto& rec = out.records[std::string("hyperbolic/preset=") + p.name];
    rec["stabilized"] = rep.stabilized ? 1.0 : 0.0;
    rec["time"] = rep.time;
    rec["xi"] = rep.xi;
    rec["steps"] = static_cast<double>(rep.steps);
    rec["speed_gap"] = rep.speed_gap;
    rec["bound"] = rep.bound;
  }
  return out;
}

std::filesystem::path resolve_out_dir(const scenario_config& cfg) {
  if (!cfg.out_dir.empty()) return std::filesystem::path(cfg.out_dir);
  return std::filesystem::path("out") /
         (cfg.name.empty() ? "scenario" : cfg.name);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw validation_error("cannot write '" + path.string() + "'");
  f << text;
}

void write_csv(const std::filesystem::path& dir, const csv_payload& csv) {
  std::ostringstream os;
  os << csv.header << "\n";
  for (const auto& row : csv.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) os << ",";
      os << fmt_value(row[i]);
    }
    os << "\n";
  }
  write_text(dir / csv.filename, os.str());
}

// eps -> metric value for records matching "<module>/eps=...<suffix_tag>",
// used by the sweep-level fits. Only the lexicographically first xi group
// is fitted when a scenario fans over several positions.
std::map<double, double> sweep_series(const sweep_result& result,
                                      const std::string& module,
                                      const std::string& metric) {
  std::string chosen_tag;
  std::map<double, double> series;
  for (const auto& [key, rec] : result.records) {
    if (key.rfind(module + "/eps=", 0) != 0) continue;
    const std::size_t at = key.find("/xi=");
    if (at == std::string::npos) continue;
    const std::string tag = key.substr(at);
    if (chosen_tag.empty()) chosen_tag = tag;
    if (tag != chosen_tag) continue;
    const auto eps_it = rec.find("eps");
    const auto val_it = rec.find(metric);
    if (eps_it == rec.end() || val_it == rec.end()) continue;
    series[eps_it->second] = val_it->second;
  }
  return series;
}

void add_sweep_fit(sweep_result& result, const std::string& name,
                   const std::map<double, double>& series) {
  std::vector<double> xs, ys;
  for (const auto& [eps, v] : series) {
    const double mag = std::abs(v);
    if (mag > 0.0 && std::isfinite(mag)) {
      xs.push_back(1.0 / eps);
      ys.push_back(std::log(mag));
    }
  }
  if (xs.size() >= 4) result.fits[name] = fit_exponential(xs, ys);
}

std::string render_summary(const scenario_config& cfg,
                           const sweep_result& result) {
  std::ostringstream os;
  os << "scenario = " << cfg.name << "\n";
  for (const auto& [key, rec] : result.records)
    for (const auto& [metric, value] : rec)
      os << summary_line("record." + key, metric, value) << "\n";
  for (const auto& [key, fit] : result.fits) {
    os << summary_line("fit." + key, "slope", fit.slope) << "\n";
    os << summary_line("fit." + key, "intercept", fit.intercept) << "\n";
    os << summary_line("fit." + key, "residual", fit.residual) << "\n";
  }
  return os.str();
}

// Aggregate per-epsilon records into one sweep CSV with fixed columns.
csv_payload aggregate_csv(const sweep_result& result,
                          const std::string& module,
                          const std::vector<std::string>& metrics,
                          const std::string& filename) {
  csv_payload csv;
  csv.filename = filename;
  std::ostringstream head;
  head << "eps,inv_eps,xi";
  for (const auto& m : metrics) head << "," << m;
  csv.header = head.str();
  for (const auto& [key, rec] : result.records) {
    if (key.rfind(module + "/eps=", 0) != 0) continue;
    if (key.find("/xi=") == std::string::npos) continue;
    std::vector<double> row;
    const double eps = rec.at("eps");
    row.push_back(eps);
    row.push_back(1.0 / eps);
    row.push_back(rec.at("xi"));
    for (const auto& m : metrics) {
      const auto it = rec.find(m);
      row.push_back(it == rec.end() ? std::nan("") : it->second);
    }
    csv.rows.push_back(std::move(row));
  }
  return csv;
}

}  // namespace

config_file config_file::parse_string(const std::string& text) {
  config_file out;
  std::istringstream is(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[') {
      if (t.size() < 3 || t.back() != ']' ||
          trim(t.substr(1, t.size() - 2)).empty()) {
        std::ostringstream os;
        os << "config line " << line_no << ": malformed section header '" << t
           << "'";
        throw validation_error(os.str());
      }
      section = trim(t.substr(1, t.size() - 2));
      out.data_[section];
      continue;
    }
    const std::size_t eq = t.find('=');
    if (eq == std::string::npos || trim(t.substr(0, eq)).empty()) {
      std::ostringstream os;
      os << "config line " << line_no << ": expected key=value, got '" << t
         << "'";
      throw validation_error(os.str());
    }
    out.data_[section][trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
  }
  return out;
}

config_file config_file::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw validation_error("cannot read config file '" + path + "'");
  std::ostringstream os;
  os << f.rdbuf();
  return parse_string(os.str());
}

bool config_file::has(const std::string& section,
                      const std::string& key) const {
  const auto s = data_.find(section);
  return s != data_.end() && s->second.count(key) > 0;
}

std::string config_file::get(const std::string& section,
                             const std::string& key) const {
  const auto s = data_.find(section);
  if (s != data_.end()) {
    const auto k = s->second.find(key);
    if (k != s->second.end()) return k->second;
  }
  const std::string name = section.empty() ? key : section + "." + key;
  throw validation_error("config key '" + name + "' is missing");
}

std::string config_file::get_or(const std::string& section,
                                const std::string& key,
                                const std::string& fallback) const {
  return has(section, key) ? get(section, key) : fallback;
}

double config_file::get_double(const std::string& section,
                               const std::string& key) const {
  return parse_double("config key '" + key + "'", get(section, key));
}

double config_file::get_double_or(const std::string& section,
                                  const std::string& key,
                                  double fallback) const {
  return has(section, key) ? get_double(section, key) : fallback;
}

int config_file::get_int_or(const std::string& section, const std::string& key,
                            int fallback) const {
  if (!has(section, key)) return fallback;
  return static_cast<int>(
      parse_integer("config key '" + key + "'", get(section, key)));
}

std::vector<double> config_file::get_list(const std::string& section,
                                          const std::string& key) const {
  std::vector<double> out;
  for (const std::string& f : split_fields(get(section, key)))
    out.push_back(parse_double("config key '" + key + "'", f));
  return out;
}

std::vector<std::string> config_file::sections() const {
  std::vector<std::string> out;
  out.reserve(data_.size());
  for (const auto& [name, keys] : data_) out.push_back(name);
  return out;
}

scenario_config scenario_from(const config_file& cfg) {
  // Scenario keys may sit in a [scenario] section or at the top level.
  const auto where = [&cfg](const std::string& key) {
    return cfg.has("scenario", key) ? std::string("scenario")
                                    : std::string();
  };
  const auto have = [&](const std::string& key) {
    return cfg.has("scenario", key) || cfg.has("", key);
  };
  const auto text = [&](const std::string& key, const std::string& fb) {
    return have(key) ? cfg.get(where(key), key) : fb;
  };
  const auto number = [&](const std::string& key, double fb) {
    return have(key) ? cfg.get_double(where(key), key) : fb;
  };
  const auto integer = [&](const std::string& key, int fb) {
    return cfg.get_int_or(where(key), key, fb);
  };
  const auto list = [&](const std::string& key) {
    return have(key) ? cfg.get_list(where(key), key) : std::vector<double>{};
  };

  scenario_config out;
  out.name = text("name", "");
  out.flux_kind = text("flux", "burgers");
  out.poly_coeffs = list("poly_coeffs");
  out.u_minus = number("u_minus", 1.0);
  out.u_plus = number("u_plus", std::nan(""));
  out.ell = number("ell", 1.0);
  out.epsilons = list("epsilons");
  out.xi0 = number("xi0", std::nan(""));
  out.xi_list = list("xi_list");
  out.u0_preset = text("u0_preset", "");
  out.coefficient = text("coefficient", "matched");
  out.n_modes = integer("n_modes", 8);
  out.w0_amplitude = number("w0_amplitude", 0.0);
  out.n_nodes = integer("n_nodes", 0);
  out.n_cells = integer("n_cells", 400);
  out.t_final = number("t_final", 0.0);
  out.snapshot_times = list("snapshot_times");
  out.t_max = number("t_max", 0.0);
  out.equilibrium_tol = number("equilibrium_tol", 0.05);
  out.xi_count = integer("xi_count", 0);
  out.out_dir = text("out", "");
  const std::string seed_text = text("seed", "0");
  out.seed = static_cast<unsigned long long>(
      parse_integer("config key 'seed'", seed_text));

  for (const std::string& m : split_fields(text("modules", ""))) {
    if (m != "manifold" && m != "spectral" && m != "reduced" && m != "pde" &&
        m != "hyperbolic")
      throw validation_error("unknown module '" + m + "'");
    if (std::find(out.modules.begin(), out.modules.end(), m) ==
        out.modules.end())
      out.modules.push_back(m);
  }

  for (const double eps : out.epsilons) {
    if (!(eps > 0.0) || eps > 0.5) {
      std::ostringstream os;
      os << "epsilon " << eps << " out of range (0, 0.5]";
      throw validation_error(os.str());
    }
  }
  if (!(out.ell > 0.0)) throw validation_error("ell must be positive");
  if (out.coefficient != "matched" && out.coefficient != "step")
    throw validation_error("coefficient must be 'matched' or 'step', got '" +
                           out.coefficient + "'");
  if (out.n_modes < 2)
    throw validation_error("n_modes must be at least 2");
  if (out.n_cells < 2)
    throw validation_error("n_cells must be at least 2");
  if (out.n_nodes != 0 && out.n_nodes < 3)
    throw validation_error("n_nodes must be 0 (automatic) or at least 3");
  if (out.xi_count < 0)
    throw validation_error("xi_count must be non-negative");
  if (!(out.equilibrium_tol > 0.0))
    throw validation_error("equilibrium_tol must be positive");
  if (out.w0_amplitude < 0.0)
    throw validation_error("w0_amplitude must be non-negative");
  if (out.t_final < 0.0) throw validation_error("t_final must be non-negative");
  if (out.t_max < 0.0) throw validation_error("t_max must be non-negative");

  if (!out.u0_preset.empty() && out.u0_preset != "manifold" &&
      out.u0_preset != "steady" && out.u0_preset != "figure1" &&
      out.u0_preset.rfind("poly:", 0) != 0)
    throw validation_error("unknown u0 preset '" + out.u0_preset + "'");
  if (out.u0_preset.rfind("poly:", 0) == 0 &&
      split_fields(out.u0_preset.substr(5)).empty())
    throw validation_error("u0_preset poly: needs coefficients");

  const bool wants_eps = has_module(out, "manifold") ||
                         has_module(out, "spectral") ||
                         has_module(out, "reduced") || has_module(out, "pde");
  if (wants_eps && out.epsilons.empty())
    throw validation_error("scenario selects epsilon sweeps but lists no "
                           "epsilon values");
  if (has_module(out, "pde")) {
    if (out.u0_preset.empty())
      throw validation_error("pde module needs u0_preset");
    if (out.u0_preset == "manifold" && !std::isfinite(out.xi0))
      throw validation_error("u0_preset manifold needs xi0");
    if (!(out.t_final > 0.0))
      throw validation_error("pde module needs a positive t_final");
  }
  if (has_module(out, "reduced") && !(out.t_final > 0.0))
    throw validation_error("reduced module needs a positive t_final");

  scenario_flux(out);  // validates the flux selection eagerly
  return out;
}

scenario_config load_scenario(const std::string& path) {
  scenario_config out = scenario_from(config_file::load(path));
  if (out.name.empty()) out.name = std::filesystem::path(path).stem().string();
  return out;
}

flux_model scenario_flux(const scenario_config& cfg) {
  const double up = std::isfinite(cfg.u_plus) ? cfg.u_plus : -cfg.u_minus;
  return make_flux(cfg.flux_kind, cfg.poly_coeffs, cfg.u_minus, up);
}

exp_fit fit_exponential(const std::vector<double>& xs,
                        const std::vector<double>& ys) {
  if (xs.size() != ys.size()) {
    std::ostringstream os;
    os << "fit_exponential: got " << xs.size() << " xs and " << ys.size()
       << " ys";
    throw validation_error(os.str());
  }
  if (xs.size() < 4) {
    std::ostringstream os;
    os << "fit_exponential: needs at least 4 points, got " << xs.size();
    throw validation_error(os.str());
  }
  double lo = xs[0], hi = xs[0];
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!std::isfinite(xs[i]) || !std::isfinite(ys[i]))
      throw validation_error("fit_exponential: non-finite sample");
    lo = std::min(lo, xs[i]);
    hi = std::max(hi, xs[i]);
  }
  if (hi - lo <= 1e-12 * std::max({1.0, std::abs(lo), std::abs(hi)}))
    throw validation_error("fit_exponential: degenerate xs, no spread to fit");
  const line_fit fit = fit_line(xs, ys);
  return {fit.slope, fit.intercept, fit.residual};
}

std::string summary_line(const std::string& key, const std::string& metric,
                         double value) {
  return key + "." + metric + " = " + fmt_value(value);
}

sweep_result run_scenario(const scenario_config& cfg, int jobs) {
  if (jobs < 1) throw validation_error("jobs must be positive");
  const flux_model flux = scenario_flux(cfg);

  std::vector<work_item> items;
  for (const std::string& module : cfg.modules) {
    if (module == "hyperbolic") {
      items.push_back(
          {"hyperbolic", [&cfg, flux] { return hyperbolic_item(cfg, flux); }});
      continue;
    }
    for (std::size_t i = 0; i < cfg.epsilons.size(); ++i) {
      const double eps = cfg.epsilons[i];
      work_item item;
      item.key = eps_key(module.c_str(), eps);
      if (module == "manifold")
        item.run = [&cfg, flux, eps, i] {
          return manifold_item(cfg, flux, eps, i);
        };
      else if (module == "spectral")
        item.run = [&cfg, flux, eps] { return spectral_item(cfg, flux, eps); };
      else if (module == "reduced")
        item.run = [&cfg, flux, eps] { return reduced_item(cfg, flux, eps); };
      else
        item.run = [&cfg, flux, eps] { return pde_item(cfg, flux, eps); };
      items.push_back(std::move(item));
    }
  }

  // Items are pure, so any worker count produces the same outputs; the
  // merge below is single-threaded and ordered.
  std::vector<item_output> outputs(items.size());
  std::vector<std::exception_ptr> failures(items.size());
  std::atomic<std::size_t> cursor{0};
  const auto worker = [&] {
    for (;;) {
      const std::size_t i = cursor.fetch_add(1);
      if (i >= items.size()) return;
      try {
        outputs[i] = items[i].run();
      } catch (...) {
        failures[i] = std::current_exception();
      }
    }
  };
  const int workers = static_cast<int>(std::min<std::size_t>(
      static_cast<std::size_t>(jobs), std::max<std::size_t>(items.size(), 1)));
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (!failures[i]) continue;
    const std::string prefix = cfg.name + "/" + items[i].key + ": ";
    try {
      std::rethrow_exception(failures[i]);
    } catch (const validation_error& e) {
      throw validation_error(prefix + e.what());
    } catch (const numerical_error& e) {
      throw numerical_error(prefix + e.what());
    } catch (const std::exception& e) {
      throw numerical_error(prefix + e.what());
    }
  }

  sweep_result result;
  std::vector<csv_payload> csvs;
  for (auto& out : outputs) {
    for (auto& [key, rec] : out.records) result.records[key].merge(rec);
    for (auto& [key, fit] : out.fits) result.fits[key] = fit;
    for (auto& csv : out.csvs) csvs.push_back(std::move(csv));
  }

  add_sweep_fit(result, "lambda1",
                sweep_series(result, "spectral", "lambda_01"));
  add_sweep_fit(result, "lambda2",
                sweep_series(result, "spectral", "lambda_02"));
  add_sweep_fit(result, "residual", sweep_series(result, "manifold", "gap"));

  if (has_module(cfg, "spectral")) {
    std::vector<std::string> cols;
    for (int k = 0; k < cfg.n_modes; ++k) {
      char name[24];
      std::snprintf(name, sizeof name, "lambda_%02d", k + 1);
      cols.push_back(name);
    }
    cols.insert(cols.end(), {"lambda1_asym", "lambda1_transcendental",
                             "gap_ratio", "eps_lambda2", "meta_ratio"});
    csvs.push_back(aggregate_csv(result, "spectral", cols, "spectrum.csv"));
  }
  if (has_module(cfg, "manifold")) {
    csvs.push_back(aggregate_csv(
        result, "manifold",
        {"kappa_minus", "kappa_plus", "gap", "residual", "omega"},
        "manifold.csv"));
  }

  const std::filesystem::path dir = resolve_out_dir(cfg);
  std::filesystem::create_directories(dir);
  std::sort(csvs.begin(), csvs.end(),
            [](const csv_payload& a, const csv_payload& b) {
              return a.filename < b.filename;
            });
  for (const auto& csv : csvs) write_csv(dir, csv);
  write_text(dir / "summary.txt", render_summary(cfg, result));
  return result;
}

void emit_plots(const sweep_result& result, const scenario_config& cfg) {
  if (result.records.empty())
    throw validation_error("emit_plots: result carries no records");
  const std::filesystem::path dir = resolve_out_dir(cfg);
  std::filesystem::create_directories(dir);

  // First epsilon tag per module family, for the per-run plot scripts.
  std::string pde_tag, reduced_tag;
  int snapshot_count = 0;
  double t0 = 0.0;
  double pde_eps = 0.0;
  for (const auto& [key, rec] : result.records) {
    if (pde_tag.empty() && key.rfind("pde/eps=", 0) == 0) {
      pde_tag = key.substr(8);
      pde_eps = rec.at("eps");
      const auto snaps = rec.find("snapshots");
      if (snaps != rec.end())
        snapshot_count = static_cast<int>(snaps->second);
      const auto formed = rec.find("layer_formed_time");
      if (formed != rec.end() && formed->second > 0.0) t0 = formed->second;
    }
    if (reduced_tag.empty() && key.rfind("reduced/eps=", 0) == 0)
      reduced_tag = key.substr(12);
  }

  if (!pde_tag.empty() && snapshot_count > 0) {
    const std::string csv = "snapshots_eps=" + pde_tag + ".csv";
    std::ostringstream gp;
    gp << "# profile snapshots, one panel per stage of the run\n"
       << "set datafile separator ','\n"
       << "set terminal pngcairo size 1500,460\n"
       << "set output 'profiles.png'\n"
       << "set key top right\n"
       << "set xlabel 'x'\n"
       << "set ylabel 'u'\n";
    const int cols = snapshot_count;
    if (cols >= 3) {
      const int a = cols / 3, b = (2 * cols) / 3;
      const char* titles[3] = {"'formation'", "'drift'", "'late time'"};
      const int lo[3] = {2, 2 + a, 2 + b};
      const int hi[3] = {1 + a, 1 + b, 1 + cols};
      gp << "set multiplot layout 1,3\n";
      for (int p = 0; p < 3; ++p) {
        gp << "set title " << titles[p] << "\n" << "plot ";
        for (int c = lo[p]; c <= hi[p]; ++c) {
          if (c > lo[p]) gp << ", ";
          gp << "'" << csv << "' using 1:" << c
             << " with lines title columnheader(" << c << ")";
        }
        gp << "\n";
      }
      gp << "unset multiplot\n";
    } else {
      gp << "plot ";
      for (int c = 2; c <= 1 + cols; ++c) {
        if (c > 2) gp << ", ";
        gp << "'" << csv << "' using 1:" << c
           << " with lines title columnheader(" << c << ")";
      }
      gp << "\n";
    }
    write_text(dir / "profiles.gp", gp.str());
  }

  if (!pde_tag.empty() && pde_tag == reduced_tag) {
    std::ostringstream gp;
    gp << "# viscous shock track against the drift prediction, mapped from\n"
       << "# the slow clock s to the run clock t = t0 + s / eps\n"
       << "set datafile separator ','\n"
       << "set terminal pngcairo size 900,520\n"
       << "set output 'track_vs_drift.png'\n"
       << "eps = " << fmt_value(pde_eps) << "\n"
       << "t0 = " << fmt_value(t0) << "\n"
       << "set xlabel 't'\n"
       << "set ylabel 'layer position'\n"
       << "plot 'track_eps=" << pde_tag
       << ".csv' using 1:2 with lines title 'shock track', "
       << "'drift_eps=" << reduced_tag
       << ".csv' using (t0 + $1/eps):2 with lines dashtype 2 "
          "title 'drift prediction'\n";
    write_text(dir / "track_vs_drift.gp", gp.str());
  }

  bool have_spectrum = false;
  for (const auto& [key, rec] : result.records)
    if (key.rfind("spectral/eps=", 0) == 0 &&
        key.find("/xi=") != std::string::npos)
      have_spectrum = true;
  if (have_spectrum) {
    std::ostringstream gp;
    gp << "# leading eigenvalue magnitudes against 1/epsilon\n"
       << "set datafile separator ','\n"
       << "set terminal pngcairo size 900,520\n"
       << "set output 'spectrum.png'\n"
       << "set logscale y\n"
       << "set xlabel '1/epsilon'\n"
       << "set ylabel '|lambda|'\n"
       << "plot 'spectrum.csv' using 2:(abs($4)) with linespoints "
          "title '|lambda_1|', "
          "'' using 2:(abs($5)) with linespoints title '|lambda_2|'\n";
    write_text(dir / "spectrum.gp", gp.str());
  }
}

}  // namespace metastab
