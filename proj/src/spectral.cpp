#include "metastab/spectral.hpp"

#include <lapacke.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "metastab/errors.hpp"
#include "metastab/numerics.hpp"

namespace metastab {

namespace {

// Uniform interior nodes x_i = -ell + (i+1) h and the n+1 cell faces
// between consecutive grid points (boundaries included).
struct layout {
  double h = 0.0;
  std::vector<double> grid;   // n + 2 nodes including the walls
  std::vector<double> faces;  // n + 1 midpoints
};

layout make_layout(double ell, int n_interior) {
  layout g;
  g.h = 2.0 * ell / (n_interior + 1);
  g.grid.resize(n_interior + 2);
  for (int k = 0; k < n_interior + 2; ++k) g.grid[k] = -ell + k * g.h;
  g.grid.front() = -ell;
  g.grid.back() = ell;
  g.faces.resize(n_interior + 1);
  for (int k = 0; k <= n_interior; ++k) g.faces[k] = -ell + (k + 0.5) * g.h;
  return g;
}

int checked_interior(double epsilon, double ell, int n_interior) {
  if (!(epsilon > 0.0) || !(ell > 0.0)) {
    std::ostringstream os;
    os << "coefficient field needs epsilon > 0 and ell > 0, got epsilon="
       << epsilon << " ell=" << ell;
    throw validation_error(os.str());
  }
  const int n = n_interior > 0 ? n_interior : resolution_rule(epsilon, ell);
  if (n < 16) {
    std::ostringstream os;
    os << "interior node count " << n << " is below the minimum of 16";
    throw validation_error(os.str());
  }
  return n;
}

double trapezoid_weight(std::size_t i, std::size_t n_pts) {
  return (i == 0 || i + 1 == n_pts) ? 0.5 : 1.0;
}

// Half-line kernels of the matching determinant. For squared rate
// eta2 = (a^2 + 4 eps lambda) / (2 eps)^2 and half-width x they are
//   S = sinh(eta x)/eta, C = cosh(eta x)              (eta2 > 0)
//   S = sin(w x)/w,      C = cos(w x), w = sqrt(-eta2) (eta2 < 0)
//   S = x,               C = 1                         (eta2 = 0)
// On the growing side both are damped by e^{-eta x} so that products never
// overflow; the damping factor is positive and tends to 1 at eta = 0, so
// roots, sign changes, and continuity across eta2 = 0 are all preserved.
struct kernel {
  double s = 0.0;
  double c = 0.0;
};

kernel scaled_kernel(double eta2, double x) {
  kernel k;
  if (eta2 > 0.0) {
    const double eta = std::sqrt(eta2);
    k.s = -std::expm1(-2.0 * eta * x) / (2.0 * eta);
    k.c = 0.5 * (1.0 + std::exp(-2.0 * eta * x));
  } else if (eta2 < 0.0) {
    const double w = std::sqrt(-eta2);
    k.s = std::sin(w * x) / w;
    k.c = std::cos(w * x);
  } else {
    k.s = x;
    k.c = 1.0;
  }
  return k;
}

// Matching determinant for the piecewise-constant coefficient, in the
// form that is entire in lambda:
//   d(lambda) = (a_+ - a_-)/2 S_- S_+ + eps (C_- S_+ + S_- C_+).
// This equals the raw exponential-basis determinant divided by the
// positive factor 8 e^{(a_- alpha - a_+ beta)/(2 eps)} eta_- eta_+; the
// eta factors vanish where a discriminant changes sign, which is a basis
// degeneracy and not an eigenvalue, so dividing them out removes the
// spurious zeros and keeps a single real-analytic expression valid on the
// whole real axis. The kernels carry their own overflow damping.
double det_scaled(const step_operator_spec& spec, double lambda) {
  const double am = spec.a_minus, ap = spec.a_plus, eps = spec.epsilon;
  const double denom = 4.0 * eps * eps;
  const kernel m =
      scaled_kernel((am * am + 4.0 * eps * lambda) / denom, spec.alpha);
  const kernel p =
      scaled_kernel((ap * ap + 4.0 * eps * lambda) / denom, spec.beta);
  return 0.5 * (ap - am) * m.s * p.s + eps * (m.c * p.s + m.s * p.c);
}

void validate_step_spec(const step_operator_spec& spec) {
  if (!(spec.epsilon > 0.0) || !(spec.alpha > 0.0) || !(spec.beta > 0.0)) {
    std::ostringstream os;
    os << "step operator needs positive epsilon, alpha, beta; got epsilon="
       << spec.epsilon << " alpha=" << spec.alpha << " beta=" << spec.beta;
    throw validation_error(os.str());
  }
  if (!(spec.a_minus > 0.0) || !(spec.a_plus < 0.0)) {
    std::ostringstream os;
    os << "step operator needs a_minus > 0 > a_plus (inward transport);"
       << " got a_minus=" << spec.a_minus << " a_plus=" << spec.a_plus;
    throw validation_error(os.str());
  }
}

// Scan d over [lo, hi] (lo < hi <= 0) on the given grid of lambda values
// (descending), refining each sign change. Appends roots in descending
// order until n_want roots are held in out.
void collect_roots(const step_operator_spec& spec,
                   const std::vector<double>& lambdas_desc,
                   std::size_t n_want, std::vector<double>& out) {
  auto fn = [&spec](double lam) { return det_scaled(spec, lam); };
  root_options opt;
  opt.rel_tol = 1e-13;
  double prev_l = lambdas_desc.front();
  double prev_d = fn(prev_l);
  for (std::size_t j = 1; j < lambdas_desc.size(); ++j) {
    if (out.size() >= n_want) return;
    const double cur_l = lambdas_desc[j];
    const double cur_d = fn(cur_l);
    if (prev_d == 0.0) {
      if (out.empty() || out.back() != prev_l) out.push_back(prev_l);
    } else if (cur_d != 0.0 && std::signbit(cur_d) != std::signbit(prev_d)) {
      out.push_back(find_root(fn, cur_l, prev_l, opt));
    }
    prev_l = cur_l;
    prev_d = cur_d;
  }
  if (prev_d == 0.0 && out.size() < n_want &&
      (out.empty() || out.back() != prev_l))
    out.push_back(prev_l);
}

// Shared by eigensolve and hypothesis_check: largest K eigenpairs of the
// symmetric form, eigenvalues ascending as LAPACK returns them.
struct symm_modes {
  std::vector<double> mu;            // ascending, size K
  std::vector<std::vector<double>> w;  // unit 2-norm columns
};

symm_modes solve_symmetric(const operator_pair& pair, int n_modes) {
  const int n = static_cast<int>(pair.m_diag.size());
  if (n_modes < 1 || n_modes > n) {
    std::ostringstream os;
    os << "requested " << n_modes << " modes from an operator with " << n
       << " interior nodes";
    throw validation_error(os.str());
  }
  std::vector<double> d = pair.m_diag;
  std::vector<double> e = pair.m_off;
  e.resize(n, 0.0);  // dstevr reads n-1 entries; keep the buffer full size
  std::vector<double> w(n);
  std::vector<double> z(static_cast<std::size_t>(n) * n_modes);
  std::vector<lapack_int> isuppz(2 * static_cast<std::size_t>(n_modes));
  lapack_int found = 0;
  const lapack_int il = n - n_modes + 1, iu = n;
  const lapack_int info = LAPACKE_dstevr(
      LAPACK_COL_MAJOR, 'V', 'I', n, d.data(), e.data(), 0.0, 0.0, il, iu,
      0.0, &found, w.data(), z.data(), n, isuppz.data());
  if (info != 0 || found != n_modes) {
    std::ostringstream os;
    os << "tridiagonal eigensolver failed: info=" << info << " found="
       << found << " of " << n_modes;
    throw numerical_error(os.str());
  }
  symm_modes out;
  out.mu.assign(w.begin(), w.begin() + n_modes);
  out.w.resize(n_modes);
  for (int k = 0; k < n_modes; ++k)
    out.w[k].assign(z.begin() + static_cast<std::size_t>(k) * n,
                    z.begin() + static_cast<std::size_t>(k + 1) * n);
  return out;
}

}  // namespace

int resolution_rule(double epsilon, double ell) {
  if (!(epsilon > 0.0) || !(ell > 0.0))
    throw validation_error("resolution_rule needs epsilon > 0 and ell > 0");
  const double by_layer = std::ceil(64.0 * ell / epsilon);
  return std::max(1024, static_cast<int>(by_layer));
}

coefficient_field matched_coefficient(const flux_model& flux,
                                      const matched_profile& profile,
                                      int n_interior) {
  const int n = checked_interior(profile.epsilon, profile.ell, n_interior);
  const layout g = make_layout(profile.ell, n);

  // One ascending pass through the profile inversion covers nodes and
  // faces alike; they interleave exactly.
  std::vector<double> xs;
  xs.reserve(g.grid.size() + g.faces.size());
  for (std::size_t k = 0; k < g.grid.size(); ++k) {
    xs.push_back(g.grid[k]);
    if (k < g.faces.size()) xs.push_back(g.faces[k]);
  }
  kappa_pair kp;
  kp.kappa_minus = profile.kappa_minus;
  kp.kappa_plus = profile.kappa_plus;
  kp.gamma_minus = profile.gamma_minus;
  kp.gamma_plus = profile.gamma_plus;
  const std::vector<double> u =
      sample_profile(flux, profile.xi, profile.epsilon, profile.ell, kp, xs);

  coefficient_field out;
  out.grid = g.grid;
  out.a_values.resize(g.grid.size());
  out.a_faces.resize(g.faces.size());
  for (std::size_t k = 0; k < g.grid.size(); ++k)
    out.a_values[k] = flux.df(u[2 * k]);
  for (std::size_t k = 0; k < g.faces.size(); ++k)
    out.a_faces[k] = flux.df(u[2 * k + 1]);
  out.dxi_u =
      sample_dxi(flux, profile.xi, profile.epsilon, profile.ell, g.grid);
  out.a0_minus = flux.df(flux.u_minus());
  out.a0_plus = flux.df(flux.u_plus());
  out.xi = profile.xi;
  out.epsilon = profile.epsilon;
  out.ell = profile.ell;
  return out;
}

coefficient_field step_coefficient(double a_minus, double a_plus, double xi,
                                   double epsilon, double ell,
                                   int n_interior) {
  const int n = checked_interior(epsilon, ell, n_interior);
  if (!(xi > -ell && xi < ell)) {
    std::ostringstream os;
    os << "step position xi=" << xi << " outside (-" << ell << ", " << ell
       << ")";
    throw validation_error(os.str());
  }
  const layout g = make_layout(ell, n);
  auto step = [=](double x) {
    if (x < xi) return a_minus;
    if (x > xi) return a_plus;
    return 0.5 * (a_minus + a_plus);
  };
  coefficient_field out;
  out.grid = g.grid;
  out.a_values.resize(g.grid.size());
  out.a_faces.resize(g.faces.size());
  for (std::size_t k = 0; k < g.grid.size(); ++k)
    out.a_values[k] = step(g.grid[k]);
  for (std::size_t k = 0; k < g.faces.size(); ++k)
    out.a_faces[k] = step(g.faces[k]);
  out.a0_minus = a_minus;
  out.a0_plus = a_plus;
  out.xi = xi;
  out.epsilon = epsilon;
  out.ell = ell;
  return out;
}

coefficient_field constant_coefficient(double a, double epsilon, double ell,
                                       int n_interior) {
  const int n = checked_interior(epsilon, ell, n_interior);
  const layout g = make_layout(ell, n);
  coefficient_field out;
  out.grid = g.grid;
  out.a_values.assign(g.grid.size(), a);
  out.a_faces.assign(g.faces.size(), a);
  out.a0_minus = a;
  out.a0_plus = a;
  out.xi = 0.0;
  out.epsilon = epsilon;
  out.ell = ell;
  return out;
}

operator_pair assemble_operator(const coefficient_field& coeff) {
  const std::size_t n_all = coeff.grid.size();
  if (n_all < 18 || coeff.a_values.size() != n_all ||
      coeff.a_faces.size() + 1 != n_all) {
    std::ostringstream os;
    os << "inconsistent coefficient field: " << n_all << " nodes, "
       << coeff.a_values.size() << " values, " << coeff.a_faces.size()
       << " faces";
    throw validation_error(os.str());
  }
  if (!coeff.dxi_u.empty() && coeff.dxi_u.size() != n_all)
    throw validation_error(
        "coefficient field carries a profile derivative of the wrong size");
  const double eps = coeff.epsilon, ell = coeff.ell;
  if (!(eps > 0.0) || !(ell > 0.0))
    throw validation_error("coefficient field has nonpositive epsilon or ell");
  const int n = static_cast<int>(n_all) - 2;
  const double h = 2.0 * ell / (n + 1);
  for (std::size_t k = 1; k < n_all; ++k) {
    if (std::abs(coeff.grid[k] - coeff.grid[k - 1] - h) > 1e-9 * h)
      throw validation_error("coefficient grid is not uniform");
  }
  if (h > eps / 8.0) {
    const int needed =
        static_cast<int>(std::ceil(16.0 * ell / eps)) - 1;
    std::ostringstream os;
    os << "grid spacing h=" << h << " exceeds epsilon/8=" << eps / 8.0
       << "; at least " << needed << " interior nodes are required";
    throw validation_error(os.str());
  }
  double a_max = 0.0;
  for (double a : coeff.a_faces) a_max = std::max(a_max, std::abs(a));
  if (a_max * h / 2.0 >= eps) {
    const int needed = static_cast<int>(std::ceil(a_max * ell / eps));
    std::ostringstream os;
    os << "cell Peclet number " << a_max * h / (2.0 * eps)
       << " reaches 1; at least " << needed << " interior nodes are required";
    throw validation_error(os.str());
  }

  operator_pair out;
  out.h = h;
  out.epsilon = eps;
  out.ell = ell;
  out.xi = coeff.xi;
  out.a0_minus = coeff.a0_minus;
  out.a0_plus = coeff.a0_plus;
  out.x.assign(coeff.grid.begin() + 1, coeff.grid.end() - 1);
  if (!coeff.dxi_u.empty())
    out.dxi_u.assign(coeff.dxi_u.begin() + 1, coeff.dxi_u.end() - 1);

  const double visc = eps / (h * h);
  out.l_diag.resize(n);
  out.l_sub.resize(n - 1);
  out.l_sup.resize(n - 1);
  for (int i = 0; i < n; ++i)
    out.l_diag[i] =
        -2.0 * visc - (coeff.a_faces[i + 1] - coeff.a_faces[i]) / (2.0 * h);
  // Row i+1's left coupling and row i's right coupling both straddle face
  // i+1; their product being positive is what makes the similarity real.
  for (int i = 0; i + 1 < n; ++i) {
    out.l_sub[i] = visc + coeff.a_faces[i + 1] / (2.0 * h);
    out.l_sup[i] = visc - coeff.a_faces[i + 1] / (2.0 * h);
  }

  out.m_diag.resize(n);
  out.m_off.resize(n - 1);
  out.log_weight.assign(n, 0.0);
  for (int i = 0; i < n; ++i) out.m_diag[i] = eps * out.l_diag[i];
  for (int i = 0; i + 1 < n; ++i) {
    out.m_off[i] = eps * std::sqrt(out.l_sup[i] * out.l_sub[i]);
    out.log_weight[i + 1] =
        out.log_weight[i] + 0.5 * std::log(out.l_sub[i] / out.l_sup[i]);
  }
  // Center the similarity weight; phi/psi scales are fixed later by
  // normalization, and a centered exponent cannot overflow first.
  const auto [lo, hi] =
      std::minmax_element(out.log_weight.begin(), out.log_weight.end());
  const double mid = 0.5 * (*lo + *hi);
  for (double& v : out.log_weight) v -= mid;
  return out;
}

spectral_decomposition eigensolve(const operator_pair& pair, int n_modes) {
  const symm_modes sym = solve_symmetric(pair, n_modes);
  const int n = static_cast<int>(pair.m_diag.size());
  const double h = pair.h;

  spectral_decomposition dec;
  dec.x = pair.x;
  dec.h = h;
  dec.epsilon = pair.epsilon;
  dec.ell = pair.ell;
  dec.xi = pair.xi;
  dec.a0_minus = pair.a0_minus;
  dec.a0_plus = pair.a0_plus;
  dec.lambdas.resize(n_modes);
  dec.phis.resize(n_modes);
  dec.psis.resize(n_modes);
  dec.normalized_to_dxi_u = !pair.dxi_u.empty();

  for (int k = 0; k < n_modes; ++k) {
    const std::vector<double>& w = sym.w[n_modes - 1 - k];  // descending
    dec.lambdas[k] = sym.mu[n_modes - 1 - k] / pair.epsilon;
    std::vector<double> phi(n), psi(n);
    for (int i = 0; i < n; ++i) {
      phi[i] = w[i] * std::exp(pair.log_weight[i]);
      psi[i] = w[i] * std::exp(-pair.log_weight[i]);
    }
    if (k == 0 && dec.normalized_to_dxi_u) {
      // Slow mode: scale the adjoint against the layer-translation
      // direction, then the right mode against the adjoint.
      const double s = inner(psi, pair.dxi_u, h);
      if (std::abs(s) < 1e-300)
        throw numerical_error(
            "first adjoint mode is orthogonal to the layer translation");
      for (double& v : psi) v /= s;
      const double t = inner(psi, phi, h);
      for (double& v : phi) v /= t;
    } else {
      const auto it = std::max_element(
          phi.begin(), phi.end(),
          [](double a, double b) { return std::abs(a) < std::abs(b); });
      const double peak = *it;
      for (double& v : phi) v /= peak;
      const double t = inner(psi, phi, h);
      for (double& v : psi) v /= t;
    }
    dec.phis[k] = std::move(phi);
    dec.psis[k] = std::move(psi);
  }
  return dec;
}

double lambda1_asymptotic(double a_minus, double a_plus, double alpha,
                          double beta, double epsilon) {
  step_operator_spec spec{a_minus, a_plus, alpha, beta, epsilon};
  validate_step_spec(spec);
  const double left = a_minus * std::exp(-a_minus * alpha / epsilon);
  const double right = -a_plus * std::exp(a_plus * beta / epsilon);
  return -(a_plus * a_minus) / (a_plus - a_minus) * (right + left) / epsilon;
}

double step_determinant(const step_operator_spec& spec, double lambda) {
  validate_step_spec(spec);
  const double a2min =
      std::min(spec.a_minus * spec.a_minus, spec.a_plus * spec.a_plus);
  if (a2min + 4.0 * spec.epsilon * lambda < 0.0) {
    std::ostringstream os;
    os << "lambda=" << lambda
       << " lies in the oscillatory range; the real determinant needs"
       << " lambda >= " << -a2min / (4.0 * spec.epsilon);
    throw validation_error(os.str());
  }
  return det_scaled(spec, lambda);
}

step_spectrum step_eigenvalues(const step_operator_spec& spec, int n) {
  validate_step_spec(spec);
  if (n < 1) throw validation_error("step_eigenvalues needs n >= 1");
  const double a2min =
      std::min(spec.a_minus * spec.a_minus, spec.a_plus * spec.a_plus);
  const double th = a2min / (4.0 * spec.epsilon);

  step_spectrum out;
  const std::size_t want = static_cast<std::size_t>(n);

  // Slow-root window: the leading root sits exponentially close to zero,
  // so the scan is logarithmic in |lambda| over [0.99 th, 1e-30].
  {
    const double lo = std::log(1e-30), hi = std::log(0.99 * th);
    const int m = 1000000;
    std::vector<double> grid(m + 1);
    for (int j = 0; j <= m; ++j)
      grid[j] = -std::exp(lo + (hi - lo) * j / m);
    collect_roots(spec, grid, want, out.lambdas);
  }

  // Below the window the roots are spaced like sqrt(eps |lambda|), so a
  // linear scan in fixed-width blocks is enough; march until n roots.
  double block_lo = -0.99 * th;
  const double width = 10.0 * th;
  const int per_block = 60000;
  for (int b = 0; b < 24 && out.lambdas.size() < want; ++b) {
    std::vector<double> grid(per_block + 1);
    for (int j = 0; j <= per_block; ++j)
      grid[j] = block_lo - width * j / per_block;
    collect_roots(spec, grid, want, out.lambdas);
    block_lo -= width;
  }
  out.complete = out.lambdas.size() == want;
  return out;
}

check_report hypothesis_check(const coefficient_field& coeff) {
  const std::size_t n_all = coeff.grid.size();
  if (n_all < 18 || coeff.a_values.size() != n_all)
    throw validation_error("hypothesis_check needs a full coefficient field");
  const double eps = coeff.epsilon, xi = coeff.xi;
  const double h = coeff.grid[1] - coeff.grid[0];
  const std::vector<double>& a = coeff.a_values;
  const std::vector<double>& x = coeff.grid;

  // Centered first and second differences on the interior nodes.
  std::vector<double> da(n_all, 0.0), d2a(n_all, 0.0);
  for (std::size_t i = 1; i + 1 < n_all; ++i) {
    da[i] = (a[i + 1] - a[i - 1]) / (2.0 * h);
    d2a[i] = (a[i + 1] - 2.0 * a[i] + a[i - 1]) / (h * h);
  }

  check_report rep;

  double a_abs = 0.0, da_abs = 0.0, d2a_abs = 0.0;
  for (std::size_t i = 0; i < n_all; ++i) a_abs = std::max(a_abs, std::abs(a[i]));
  for (std::size_t i = 1; i + 1 < n_all; ++i) {
    da_abs = std::max(da_abs, std::abs(da[i]));
    d2a_abs = std::max(d2a_abs, std::abs(d2a[i]));
  }
  const double c0 = a_abs + eps * da_abs;
  rep.add("uniform_bound", c0 <= 100.0, c0,
          "max|a| + eps max|a'| against the fixed budget 100");

  // Transport must point at the layer: positive on the left, negative on
  // the right, judged outside a 2h collar where the sign turns over.
  double sign_worst = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n_all; ++i) {
    if (x[i] <= xi - 2.0 * h) sign_worst = std::min(sign_worst, a[i]);
    if (x[i] >= xi + 2.0 * h) sign_worst = std::min(sign_worst, -a[i]);
  }
  rep.add("sign_pattern", sign_worst > 0.0, sign_worst,
          "min of a on the left and -a on the right, 2h collar skipped");

  double slope_worst = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i + 1 < n_all; ++i)
    slope_worst = std::max(slope_worst, da[i]);
  const bool monotone = slope_worst <= 1e-9 * da_abs;
  rep.add("monotone_decrease", monotone, slope_worst,
          "largest a' anywhere; positive values above noise fail");

  double curve_worst = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i + 1 < n_all; ++i) {
    if (x[i] <= xi - 2.0 * h) curve_worst = std::max(curve_worst, d2a[i]);
    if (x[i] >= xi + 2.0 * h) curve_worst = std::max(curve_worst, -d2a[i]);
  }
  rep.add("curvature_split", curve_worst <= 1e-8 * d2a_abs, curve_worst,
          "a'' must be concave left of the layer and convex right of it");

  // L1 distance to the sharp step, relative to eps: the layer carries
  // O(eps) area, so the ratio is an eps-independent constant.
  double l1 = 0.0;
  for (std::size_t i = 0; i < n_all; ++i) {
    const double a0 = x[i] < xi ? coeff.a0_minus : coeff.a0_plus;
    l1 += trapezoid_weight(i, n_all) * h * std::abs(a[i] - a0);
  }
  const double l1_ratio = l1 / eps;
  const double l1_budget =
      8.0 * (std::abs(coeff.a0_minus) + std::abs(coeff.a0_plus));
  {
    std::ostringstream os;
    os << "|a - step|_L1 / eps against " << l1_budget;
    rep.add("step_closeness", l1_ratio <= l1_budget, l1_ratio, os.str());
  }

  // The layer must actually be steep: eps |a'| next to xi stays above a
  // fixed fraction of |a0- a0+|.
  double left_slope = 0.0, right_slope = 0.0;
  bool saw_left = false, saw_right = false;
  for (std::size_t i = 1; i + 1 < n_all; ++i) {
    if (x[i] < xi && x[i] >= xi - 4.0 * h) {
      left_slope = std::max(left_slope, std::abs(da[i]));
      saw_left = true;
    }
    if (x[i] > xi && x[i] <= xi + 4.0 * h) {
      right_slope = std::max(right_slope, std::abs(da[i]));
      saw_right = true;
    }
  }
  const double slope_floor = 0.01 * std::abs(coeff.a0_minus * coeff.a0_plus);
  const double layer_slope = eps * std::min(left_slope, right_slope);
  rep.add("layer_slope", saw_left && saw_right && layer_slope >= slope_floor,
          layer_slope,
          saw_left && saw_right ? "eps |a'| beside the layer vs 1% of |a0- a0+|"
                                : "no nodes beside the layer");

  // Potential b = (a/2)^2 + (eps/2) a': decreasing into the layer from
  // the left, increasing out of it to the right.
  std::vector<double> b(n_all, 0.0);
  double b_abs = 0.0;
  for (std::size_t i = 1; i + 1 < n_all; ++i) {
    b[i] = 0.25 * a[i] * a[i] + 0.5 * eps * da[i];
    b_abs = std::max(b_abs, std::abs(b[i]));
  }
  const double slack = 1e-6 * b_abs;
  double pot_worst = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i + 2 < n_all; ++i) {
    const double diff = b[i + 1] - b[i];
    if (x[i] <= xi - 2.0 * h && x[i + 1] <= xi - 2.0 * h)
      pot_worst = std::max(pot_worst, diff);
    if (x[i] >= xi + 2.0 * h && x[i + 1] >= xi + 2.0 * h)
      pot_worst = std::max(pot_worst, -diff);
  }
  rep.add("potential_monotone", pot_worst <= slack, pot_worst,
          "largest wrong-way step of (a/2)^2 + eps a'/2 off the layer");

  // Dichotomy: b + eps lambda_1 is negative in a well of width O(eps)
  // around the layer and positive outside it.
  {
    const operator_pair pair = assemble_operator(coeff);
    const spectral_decomposition dec = eigensolve(pair, 1);
    const double shift = eps * dec.lambdas[0];
    std::vector<double> g(n_all - 2);
    for (std::size_t i = 1; i + 1 < n_all; ++i) g[i - 1] = b[i] + shift;

    std::size_t j0 = 1;
    for (std::size_t i = 1; i + 1 < n_all; ++i)
      if (std::abs(x[i] - xi) < std::abs(x[j0] - xi)) j0 = i;
    const std::size_t g0 = j0 - 1;  // index into g

    bool ok = g[g0] < 0.0;
    double y_minus = 0.0, y_plus = 0.0;
    std::size_t cross_l = 0, cross_r = 0;
    if (ok) {
      ok = false;
      for (std::size_t i = g0; i > 0; --i) {
        if (g[i - 1] >= 0.0 && g[i] < 0.0) {
          const double t = g[i - 1] / (g[i - 1] - g[i]);
          y_minus = x[i] + t * h;  // g index i sits at grid index i+1
          cross_l = i;
          ok = true;
          break;
        }
      }
    }
    if (ok) {
      ok = false;
      for (std::size_t i = g0; i + 1 < g.size(); ++i) {
        if (g[i] < 0.0 && g[i + 1] >= 0.0) {
          const double t = g[i] / (g[i] - g[i + 1]);
          y_plus = x[i + 1] + t * h;
          cross_r = i + 1;
          ok = true;
          break;
        }
      }
    }
    double outside_min = std::numeric_limits<double>::infinity();
    double width = 0.0;
    if (ok) {
      for (std::size_t i = 0; i < cross_l; ++i)
        outside_min = std::min(outside_min, g[i]);
      for (std::size_t i = cross_r + 1; i < g.size(); ++i)
        outside_min = std::min(outside_min, g[i]);
      width = std::max(std::abs(y_minus - xi), std::abs(y_plus - xi));
      ok = width <= 4.0 * eps && outside_min > 0.0;
    }
    std::ostringstream os;
    if (ok)
      os << "well edges at " << y_minus << " and " << y_plus
         << ", floor outside " << outside_min;
    else
      os << "no single negative well around the layer";
    rep.add("potential_well", ok, width / eps, os.str());
  }

  return rep;
}

double meta_ratio(const matched_profile& profile,
                  const spectral_decomposition& dec, bool* used_asymptotic) {
  if (dec.lambdas.empty())
    throw validation_error("meta_ratio needs at least one computed mode");
  auto close = [](double p, double q) {
    return std::abs(p - q) <= 1e-9 * std::max(1.0, std::max(std::abs(p),
                                                            std::abs(q)));
  };
  if (!close(profile.epsilon, dec.epsilon) || !close(profile.ell, dec.ell) ||
      !close(profile.xi, dec.xi)) {
    std::ostringstream os;
    os << "profile (xi=" << profile.xi << ", epsilon=" << profile.epsilon
       << ", ell=" << profile.ell << ") and spectrum (xi=" << dec.xi
       << ", epsilon=" << dec.epsilon << ", ell=" << dec.ell
       << ") describe different problems";
    throw validation_error(os.str());
  }
  // Below the eigensolver's absolute noise floor the computed lambda_1 is
  // meaningless; fall back to the sharp-interface closed form. The floor
  // scales with the largest operator entry, 4 eps / h^2.
  const double noise = 4.0 * dec.epsilon / (dec.h * dec.h) * 1e-13;
  double lam1 = dec.lambdas.front();
  bool fallback = std::abs(lam1) <= noise;
  if (fallback)
    lam1 = lambda1_asymptotic(dec.a0_minus, dec.a0_plus, dec.ell + dec.xi,
                              dec.ell - dec.xi, dec.epsilon);
  if (used_asymptotic) *used_asymptotic = fallback;
  if (!(std::abs(lam1) > 0.0))
    throw numerical_error("meta_ratio: first eigenvalue underflowed to zero");
  return omega_bound(profile) / std::abs(lam1);
}

double inner(const std::vector<double>& f, const std::vector<double>& g,
             double h) {
  if (f.size() != g.size()) {
    std::ostringstream os;
    os << "inner product of mismatched lengths " << f.size() << " and "
       << g.size();
    throw validation_error(os.str());
  }
  double s = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) s += f[i] * g[i];
  return s * h;
}

}  // namespace metastab
