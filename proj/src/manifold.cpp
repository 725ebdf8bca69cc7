#include "metastab/manifold.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "metastab/errors.hpp"
#include "metastab/numerics.hpp"

namespace metastab {

namespace {

// Quadrature settings for everything the kappa root-finders consume;
// tighter than the default so root accuracy is not noise-limited.
quadrature_options solve_quad() {
  quadrature_options q;
  q.rel_tol = 1e-13;
  return q;
}

// Integral of 1 / (gamma + f(u_ref) - f(s)) over [lo, hi], a subinterval
// of the segment between u_star and u_ref. Identical to 1/(kappa - f(s))
// with kappa = f(u_ref) + gamma, but evaluated without forming either
// difference: the integration variable is tau = -ln|u_ref - s|, and the
// flux difference is computed directly in the distance. This stays exact
// even where the distance falls below one ulp of u_ref, which happens
// whenever gamma is smaller than machine precision (eps below ~0.05).
double gap_quad(const flux_model& flux, double u_ref, double gamma,
                double lo, double hi, const quadrature_options& opt) {
  if (!(gamma > 0.0))
    throw numerical_error("gap_quad: nonpositive gap " +
                          std::to_string(gamma));
  if (lo >= hi) return 0.0;
  const bool ref_above = u_ref >= hi;
  const double sgn = ref_above ? -1.0 : 1.0;  // s = u_ref + sgn * delta
  const double d_near = ref_above ? u_ref - hi : lo - u_ref;
  const double d_far = ref_above ? u_ref - lo : hi - u_ref;
  if (!(d_far > 0.0)) return 0.0;

  auto integrand = [&flux, u_ref, gamma, sgn](double tau) {
    const double delta = std::exp(-tau);
    return delta / (gamma + flux.fdiff_near(u_ref, sgn * delta));
  };

  // Once gamma dominates the flux difference the integrand decays like
  // e^{-tau}/gamma; beyond delta = 1e-14*gamma the remaining tail is
  // below 1e-14 absolute.
  const double tau_far = -std::log(d_far);
  double tau_near;
  if (d_near > 0.0) {
    tau_near = -std::log(d_near);
  } else {
    tau_near = std::min(-std::log(gamma) + 32.3, 744.0);
    tau_near = std::max(tau_near, tau_far);
  }
  if (tau_near <= tau_far) {
    // Entire interval is one machine-width sliver next to u_ref.
    return (hi - lo) / (gamma + flux.fdiff_near(u_ref, sgn * d_far));
  }
  std::vector<double> pts;
  for (double t = std::ceil(tau_far) + 1.0; t < tau_near; t += 2.0)
    pts.push_back(t);
  return integrate_split(integrand, tau_far, tau_near, pts, opt);
}

double margin_checked_xi(double xi, double epsilon, double ell) {
  const double delta = admissible_margin(epsilon, ell);
  if (!(xi > -ell + delta && xi < ell - delta)) {
    std::ostringstream os;
    os << "layer position xi=" << xi << " outside the admissible range ("
       << -ell + delta << ", " << ell - delta << ") at epsilon=" << epsilon;
    throw validation_error(os.str());
  }
  return xi;
}

// Root of |psi_star(f(u_ref) + gamma, u_ref)| = target, solved on
// x = ln(gamma). The seed comes from linearizing f at u_ref, which is
// exact for |u| and within a couple of bracket-doublings otherwise.
double solve_gap(const flux_model& flux, double u_ref, double target) {
  const double us = flux.u_star();
  const double lo_u = std::min(us, u_ref);
  const double hi_u = std::max(us, u_ref);
  const double dfr = std::abs(flux.df(u_ref));
  const double span = std::abs(u_ref - us);
  const auto opt = solve_quad();

  auto g = [&](double x) {
    return gap_quad(flux, u_ref, std::exp(x), lo_u, hi_u, opt) - target;
  };

  const double e = dfr * target;
  double x0 = (e > 500.0) ? std::log(dfr * span) - e
                          : std::log(dfr * span / std::expm1(e));
  x0 = std::clamp(x0, -705.0, 30.0);

  double a = x0 - 0.7, b = x0 + 0.7;
  if (!expand_bracket(g, a, b, -706.0, 40.0))
    throw numerical_error("solve_kappa: no bracket for the gap after "
                          "geometric expansion (target " +
                          std::to_string(target) + ")");
  root_options ropt;
  ropt.rel_tol = 1e-13;
  ropt.abs_tol = 1e-13;
  return std::exp(find_root(g, a, b, ropt));
}

}  // namespace

double admissible_margin(double epsilon, double ell) {
  return std::min(4.0 * epsilon * std::abs(std::log(epsilon)), 0.25 * ell);
}

double psi_star(const flux_model& flux, double kappa, double u) {
  const double us = flux.u_star();
  if (u == us) return 0.0;
  // f is monotone between u_star and u, so the closest approach of kappa
  // to f happens at u itself.
  const double gap = kappa - flux.f(u);
  if (!(gap > 0.0)) {
    std::ostringstream os;
    os << "psi_star: kappa=" << kappa << " does not clear f on the segment; "
       << "kappa - f(u) = " << gap;
    throw validation_error(os.str());
  }
  const double mag =
      gap_quad(flux, u, gap, std::min(us, u), std::max(us, u), {});
  return u > us ? mag : -mag;
}

double solve_kappa(const flux_model& flux, double xi, double epsilon,
                   double ell, side s) {
  margin_checked_xi(xi, epsilon, ell);
  const bool minus = s == side::minus;
  const double u_ref = minus ? flux.u_minus() : flux.u_plus();
  const double target = (minus ? ell + xi : ell - xi) / epsilon;
  return flux.f(u_ref) + solve_gap(flux, u_ref, target);
}

kappa_pair solve_kappa_pair(const flux_model& flux, double xi, double epsilon,
                            double ell) {
  margin_checked_xi(xi, epsilon, ell);
  kappa_pair kp;
  kp.gamma_minus = solve_gap(flux, flux.u_minus(), (ell + xi) / epsilon);
  kp.gamma_plus = solve_gap(flux, flux.u_plus(), (ell - xi) / epsilon);
  kp.kappa_minus = flux.f(flux.u_minus()) + kp.gamma_minus;
  kp.kappa_plus = flux.f(flux.u_plus()) + kp.gamma_plus;
  return kp;
}

namespace {

// (kappa_minus - kappa_plus) without forming the near-equal kappas:
// the gamma difference plus the (tiny, possibly zero) boundary-flux
// mismatch of the model itself.
double kappa_gap_difference(const flux_model& flux, const kappa_pair& kp) {
  return (kp.gamma_minus - kp.gamma_plus) +
         flux.fdiff(flux.u_minus(), flux.u_plus());
}

}  // namespace

std::vector<double> sample_profile(const flux_model& flux, double xi,
                                   double epsilon, double ell,
                                   const kappa_pair& kp,
                                   const std::vector<double>& xs) {
  const double us = flux.u_star();
  const double um = flux.u_minus();
  const double up = flux.u_plus();
  const auto opt = solve_quad();
  std::vector<double> out(xs.size());

  for (size_t i = 0; i + 1 < xs.size(); ++i)
    if (!(xs[i] <= xs[i + 1]))
      throw validation_error("sample_profile: positions must ascend");
  if (!xs.empty() && (xs.front() < -ell || xs.back() > ell)) {
    std::ostringstream os;
    os << "sample_profile: positions [" << xs.front() << ", " << xs.back()
       << "] leave the domain [" << -ell << ", " << ell << "]";
    throw validation_error(os.str());
  }

  // Left half: march from the layer toward -ell; u climbs from u_star
  // to u_minus, each node bracketed by its predecessor.
  auto invert_side = [&](bool minus_side) {
    const double u_ref = minus_side ? um : up;
    const double gamma = minus_side ? kp.gamma_minus : kp.gamma_plus;
    double u_prev = us;
    double x_prev = xi;
    // Nodes on this side ordered by increasing distance from the layer.
    std::vector<size_t> order;
    for (size_t i = 0; i < xs.size(); ++i)
      if (minus_side ? xs[i] < xi : xs[i] > xi) order.push_back(i);
    if (minus_side) std::reverse(order.begin(), order.end());

    for (size_t i : order) {
      const double dtau = std::abs(xs[i] - x_prev) / epsilon;
      if (dtau == 0.0) {
        out[i] = u_prev;
        continue;
      }
      // Transit-time increment from u_prev to the unknown u.
      auto h = [&](double u) {
        const double lo = minus_side ? u_prev : u;
        const double hi = minus_side ? u : u_prev;
        return gap_quad(flux, u_ref, gamma, lo, hi, opt) - dtau;
      };
      const double h_end = h(u_ref);
      if (h_end <= 0.0) {
        // Past the resolvable tail: the remaining transit to the wall is
        // (numerically) shorter than requested, so the value has merged
        // with the boundary state.
        out[i] = u_ref;
      } else {
        root_options ropt;
        ropt.rel_tol = 1e-13;
        ropt.abs_tol = 1e-15;
        try {
          const double a = minus_side ? u_prev : u_ref;
          const double b = minus_side ? u_ref : u_prev;
          out[i] = find_root(h, a, b, ropt);
        } catch (const numerical_error& err) {
          throw numerical_error("profile inversion failed at x=" +
                                std::to_string(xs[i]) + ": " + err.what());
        }
      }
      u_prev = out[i];
      x_prev = xs[i];
    }
  };
  invert_side(true);
  invert_side(false);
  for (size_t i = 0; i < xs.size(); ++i)
    if (xs[i] == xi) out[i] = us;
  return out;
}

std::vector<double> sample_dxi(const flux_model& flux, double xi,
                               double epsilon, double ell,
                               const std::vector<double>& xs) {
  const double h = epsilon / 100.0;
  const auto kp_fwd = solve_kappa_pair(flux, xi + h, epsilon, ell);
  const auto kp_bwd = solve_kappa_pair(flux, xi - h, epsilon, ell);
  const auto u_fwd = sample_profile(flux, xi + h, epsilon, ell, kp_fwd, xs);
  const auto u_bwd = sample_profile(flux, xi - h, epsilon, ell, kp_bwd, xs);
  std::vector<double> d(xs.size());
  for (size_t i = 0; i < xs.size(); ++i)
    d[i] = (u_fwd[i] - u_bwd[i]) / (2.0 * h);
  return d;
}

matched_profile build_profile(const flux_model& flux, double xi,
                              double epsilon, double ell, int n_nodes) {
  if (n_nodes < 64)
    throw validation_error("build_profile: need n_nodes >= 64");
  margin_checked_xi(xi, epsilon, ell);

  // Uniform base grid plus geometric refinement around the layer: each
  // halving of the window also halves the spacing, ending at eps/16
  // inside the innermost eps-window.
  std::vector<double> grid;
  for (int i = 0; i < n_nodes; ++i)
    grid.push_back(-ell + 2.0 * ell * i / (n_nodes - 1));
  for (double r = 8.0 * epsilon; r >= 0.5 * epsilon; r *= 0.5) {
    const double spacing = r / 8.0;
    for (double x = xi - r; x <= xi + r + 0.5 * spacing; x += spacing)
      if (x > -ell && x < ell) grid.push_back(x);
  }
  grid.push_back(xi);
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end(),
                         [ell](double a, double b) {
                           return std::abs(a - b) < 1e-13 * ell;
                         }),
             grid.end());
  grid.front() = -ell;
  grid.back() = ell;
  // Deduplication keeps the first member of each near-equal run, which can
  // displace the exact layer position by a rounding residue; snap the
  // nearest node back onto xi so the matching point is represented exactly.
  const auto near = std::min_element(
      grid.begin(), grid.end(), [xi](double a, double b) {
        return std::abs(a - xi) < std::abs(b - xi);
      });
  *near = xi;

  matched_profile p;
  p.xi = xi;
  p.epsilon = epsilon;
  p.ell = ell;
  const auto kp = solve_kappa_pair(flux, xi, epsilon, ell);
  p.kappa_minus = kp.kappa_minus;
  p.kappa_plus = kp.kappa_plus;
  p.gamma_minus = kp.gamma_minus;
  p.gamma_plus = kp.gamma_plus;
  p.grid = grid;
  p.u_values = sample_profile(flux, xi, epsilon, ell, kp, grid);
  p.dxi_values = sample_dxi(flux, xi, epsilon, ell, grid);
  p.jump_dxU = kappa_gap_difference(flux, kp) / epsilon;
  return p;
}

double residual(const matched_profile& profile) { return profile.jump_dxU; }

double omega_bound(const matched_profile& profile) {
  return std::abs(profile.jump_dxU);
}

steady_state_result steady_state(const flux_model& flux, double epsilon,
                                 double ell, int n_nodes) {
  const double um = flux.u_minus();
  const double up = flux.u_plus();
  const double us = flux.u_star();
  const auto opt = solve_quad();

  // Boundary fluxes may differ by construction tolerance; measure the
  // mismatch stably and key both gaps off the larger value.
  const double d = flux.fdiff(um, up);  // f(u_minus) - f(u_plus)
  auto total_transit = [&](double gm) {
    // gm is kappa - max(f(u_minus), f(u_plus)).
    const double gamma_m = d >= 0 ? gm : gm - d;
    const double gamma_p = d >= 0 ? gm + d : gm;
    return gap_quad(flux, um, gamma_m, us, um, opt) +
           gap_quad(flux, up, gamma_p, up, us, opt);
  };
  const double target = 2.0 * ell / epsilon;
  auto g = [&](double x) { return total_transit(std::exp(x)) - target; };

  const double dm = std::abs(flux.df(um)), dp = std::abs(flux.df(up));
  const double harm = 1.0 / dm + 1.0 / dp;
  double x0 = std::clamp(-target / harm, -705.0, 30.0);
  double a = x0 - 0.7, b = x0 + 0.7;
  if (!expand_bracket(g, a, b, -706.0, 40.0))
    throw numerical_error("steady_state: no bracket for the transit-time "
                          "equation");
  root_options ropt;
  ropt.rel_tol = 1e-13;
  ropt.abs_tol = 1e-13;
  const double gm = std::exp(find_root(g, a, b, ropt));
  const double kappa = flux.f(d >= 0 ? um : up) + gm;

  // Independent route: the position where the two one-sided constants
  // agree. The difference is monotone decreasing in xi.
  const double delta = admissible_margin(epsilon, ell);
  const double lo = -ell + delta * 1.0000001, hi = ell - delta * 1.0000001;
  auto mismatch = [&](double xi) {
    return kappa_gap_difference(flux, solve_kappa_pair(flux, xi, epsilon, ell));
  };
  const double xi_star = find_root(mismatch, lo, hi, ropt);

  steady_state_result res;
  res.kappa = kappa;
  res.xi_star = xi_star;
  res.profile = build_profile(flux, xi_star, epsilon, ell, n_nodes);

  // Cross-check the two constructions against each other.
  const double kref = std::max(1.0, std::abs(kappa));
  if (std::abs(res.profile.kappa_minus - kappa) > 1e-8 * kref ||
      std::abs(res.profile.kappa_plus - kappa) > 1e-8 * kref)
    throw numerical_error(
        "steady_state: transit-time and matching constructions disagree: "
        "kappa=" + std::to_string(kappa) + " vs profile " +
        std::to_string(res.profile.kappa_minus) + "/" +
        std::to_string(res.profile.kappa_plus));
  return res;
}

}  // namespace metastab
