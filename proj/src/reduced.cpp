#include "metastab/reduced.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <utility>

#include "metastab/errors.hpp"
#include "metastab/manifold.hpp"
#include "metastab/numerics.hpp"

namespace metastab {

namespace {

constexpr int kDriftNodes = 65;        // theta samples behind the cubic
constexpr int kCacheNodes = 64;        // eigendata nodes per modal run
constexpr double kBiorthTol = 1e-6;    // interpolated-basis quality gate
constexpr int kStabilitySamples = 200;

// Linear interpolation of a nodal vector at an interior point q.
double value_at(const std::vector<double>& x, const std::vector<double>& v,
                double q) {
  if (q <= x.front()) return v.front();
  if (q >= x.back()) return v.back();
  const auto it = std::upper_bound(x.begin(), x.end(), q);
  const std::size_t i = static_cast<std::size_t>(it - x.begin()) - 1;
  const double t = (q - x[i]) / (x[i + 1] - x[i]);
  return v[i] + t * (v[i + 1] - v[i]);
}

void check_xi_admissible(const char* who, double xi, double epsilon,
                         double ell) {
  const double delta = admissible_margin(epsilon, ell);
  if (!(std::abs(xi) < ell - delta)) {
    std::ostringstream os;
    os << who << ": layer position xi=" << xi
       << " outside the admissible range (|xi| < " << ell - delta << ")";
    throw validation_error(os.str());
  }
}

// Drift rate by the defining pairing at one position. n_modes = 1 keeps the
// eigensolve as cheap as possible when only theta is wanted.
double pairing_theta(const flux_model& flux, double xi, double epsilon,
                     double ell) {
  const matched_profile p = build_profile(flux, xi, epsilon, ell, 64);
  const auto dec =
      eigensolve(assemble_operator(matched_coefficient(flux, p)), 1);
  return value_at(dec.x, dec.psis[0], xi) * residual(p);
}

// phi1(z) = (e^z - 1)/z and phi2(z) = (e^z - 1 - z)/z^2 with series
// fallbacks near zero; both appear in the exponential two-stage step.
double phi1(double z) {
  if (std::abs(z) < 1e-5) return 1.0 + z * (0.5 + z / 6.0);
  return std::expm1(z) / z;
}

double phi2(double z) {
  if (std::abs(z) < 1e-4) return 0.5 + z * (1.0 / 6.0 + z / 24.0);
  return (std::expm1(z) - z) / (z * z);
}

// Everything the modal system needs at one layer position: eigendata,
// defect amplitude, drift rate, forcing ingredients, and the coupling rows
// obtained by differentiating the adjoint modes in the layer position.
struct eigen_node {
  double zeta = 0.0;
  double res = 0.0;    // defect amplitude (kappa_minus - kappa_plus)/eps
  double theta = 0.0;  // psi_1(zeta) * res
  std::vector<double> lambdas;             // K
  std::vector<double> psi_at;              // psi_k evaluated at zeta
  std::vector<double> p;                   // <psi_k, dU/dzeta>
  std::vector<double> c;                   // <d/dzeta psi_1, phi_j>
  std::vector<std::vector<double>> g;      // <d/dzeta psi_k, phi_j>
  std::vector<std::vector<double>> phis;   // K x N
  std::vector<std::vector<double>> psis;   // K x N
  bool has_coupling = false;
};

spectral_decomposition decompose_at(const flux_model& flux, double zeta,
                                    double epsilon, double ell, int modes) {
  const matched_profile p = build_profile(flux, zeta, epsilon, ell, 64);
  return eigensolve(assemble_operator(matched_coefficient(flux, p)), modes);
}

// Matches the overall sign of each mode pair in `dec` to the reference
// basis. The solver pins signs through the max-magnitude node, which can
// hop between lobes as the layer moves; pairing against a nearby basis
// removes that arbitrariness. A pairing far from +-1 means the mode index
// no longer tracks the same branch, which is not recoverable here.
void align_modes(spectral_decomposition& dec, const eigen_node& ref,
                 double h) {
  for (std::size_t k = 0; k < dec.phis.size(); ++k) {
    const double s = inner(dec.psis[k], ref.phis[k], h);
    if (std::abs(s) < 0.5) {
      std::ostringstream os;
      os << "mode " << k + 1 << " lost continuity between layer positions "
         << ref.zeta << " and " << dec.xi << " (pairing " << s << ")";
      throw numerical_error(os.str());
    }
    if (s < 0.0)
      for (std::size_t i = 0; i < dec.phis[k].size(); ++i) {
        dec.phis[k][i] = -dec.phis[k][i];
        dec.psis[k][i] = -dec.psis[k][i];
      }
  }
}

// Re-gauges a finite-difference side solve so each mode pair carries the
// same normalization as the center basis: scaling phi by the cross pairing
// c = <psi_side, phi_center> (and psi by 1/c) cancels whatever gauge the
// side solve picked, leaving only the genuine dependence on the layer
// position visible to the difference quotient.
void anchor_gauge(spectral_decomposition& side, const eigen_node& center,
                  double h) {
  for (std::size_t k = 0; k < side.phis.size(); ++k) {
    const double c = inner(side.psis[k], center.phis[k], h);
    if (std::abs(c) < 0.5) {
      std::ostringstream os;
      os << "mode " << k + 1 << " lost continuity in the difference stencil at "
         << center.zeta;
      throw numerical_error(os.str());
    }
    for (double& v : side.phis[k]) v *= c;
    for (double& v : side.psis[k]) v /= c;
  }
}

class eigen_cache {
 public:
  eigen_cache(const flux_model& flux, double epsilon, double ell, int modes,
              double lo, double hi)
      : flux_(flux), epsilon_(epsilon), ell_(ell), modes_(modes) {
    fd_delta_ = epsilon / 200.0;
    const double span = hi - lo;
    nodes_.reserve(kCacheNodes);
    for (int i = 0; i < kCacheNodes; ++i) {
      const double z = lo + span * i / (kCacheNodes - 1);
      nodes_.push_back(solve_node(z, /*with_coupling=*/true));
    }
    scratch_ = nodes_.front();
  }

  // Eigendata at an arbitrary position: linear blend of the bracketing
  // nodes unless the blended basis fails the biorthogonality gate, in which
  // case a fresh solve at the query point is inserted and used. Inserted
  // nodes keep the blended coupling rows; those vary on the slow scale and
  // feed only small correction terms, while the basis itself must stay
  // biorthonormal to keep the modal coefficients meaningful.
  //
  // The result is copied into dst: an insert reallocates the node store,
  // so handing out references would tie the caller to cache internals.
  void query(double zeta, eigen_node& dst) {
    const eigen_node& out = query_impl(zeta);
    omega_seen_ = std::max(omega_seen_, std::abs(out.res));
    dst = out;
  }

  double omega_seen() const { return omega_seen_; }
  std::size_t insert_count() const { return inserts_; }
  const eigen_node& node_at(std::size_t i) const { return nodes_[i]; }
  const eigen_node& nearest(double zeta) const {
    std::size_t best = 0;
    for (std::size_t i = 1; i < nodes_.size(); ++i)
      if (std::abs(nodes_[i].zeta - zeta) < std::abs(nodes_[best].zeta - zeta))
        best = i;
    return nodes_[best];
  }
  double grid_h() const { return h_; }
  const std::vector<double>& grid() const { return grid_; }

 private:
  const eigen_node& query_impl(double zeta) {
    for (int attempt = 0; attempt < 2; ++attempt) {
      auto it = std::lower_bound(
          nodes_.begin(), nodes_.end(), zeta,
          [](const eigen_node& n, double z) { return n.zeta < z; });
      if (it != nodes_.end() && it->zeta == zeta) return *it;
      if (it == nodes_.begin() || it == nodes_.end())
        return insert(zeta);  // outside the prepared hull; solve directly

      const eigen_node& a = *(it - 1);
      const eigen_node& b = *it;
      const double t = (zeta - a.zeta) / (b.zeta - a.zeta);
      blend(a, b, t, zeta);
      const double err = biorth_drift(scratch_);
      if (err <= kBiorthTol) return scratch_;
      if (attempt == 0) {
        // Refine the whole bracketing interval at the spacing the measured
        // drift calls for. Inserting only at the query point would leave
        // every later blend paired with the same distant neighbor, forcing
        // a fresh solve every few steps; subdividing once settles the
        // interval for the rest of the traversal.
        refine_interval(a.zeta, b.zeta, zeta, err);
      } else {
        return insert(zeta);  // curvature estimate was off; solve exactly
      }
    }
    return insert(zeta);  // not reached
  }

  void refine_interval(double za, double zb, double zeta, double err) {
    // Blend error grows like c2 * d_left * d_right / 2, so the measured
    // failure pins the curvature scale c2 and with it the equal spacing
    // whose midpoint error sits at half the gate.
    const double d1 = zeta - za;
    const double d2 = zb - zeta;
    const double c2 = 2.0 * err / std::max(d1 * d2, 1e-30);
    const double target = std::sqrt(4.0 * kBiorthTol / c2);
    const int pieces =
        std::clamp(static_cast<int>(std::ceil((zb - za) / target)), 2, 40);
    for (int i = 1; i < pieces; ++i) {
      const double z = za + (zb - za) * i / pieces;
      // Skip positions already resolved by an earlier refinement.
      const auto it = std::lower_bound(
          nodes_.begin(), nodes_.end(), z,
          [](const eigen_node& n, double x) { return n.zeta < x; });
      const double spacing = (zb - za) / pieces;
      if (it != nodes_.end() && std::abs(it->zeta - z) < 0.25 * spacing)
        continue;
      if (it != nodes_.begin() &&
          std::abs((it - 1)->zeta - z) < 0.25 * spacing)
        continue;
      insert(z);
    }
  }

  void blend(const eigen_node& a, const eigen_node& b, double t,
             double zeta) {
    eigen_node& s = scratch_;
    s.zeta = zeta;
    s.res = mix(a.res, b.res, t);
    s.theta = mix(a.theta, b.theta, t);
    for (int k = 0; k < modes_; ++k) {
      s.lambdas[k] = mix(a.lambdas[k], b.lambdas[k], t);
      s.psi_at[k] = mix(a.psi_at[k], b.psi_at[k], t);
      s.p[k] = mix(a.p[k], b.p[k], t);
      s.c[k] = mix(a.c[k], b.c[k], t);
      for (int j = 0; j < modes_; ++j)
        s.g[k][j] = mix(a.g[k][j], b.g[k][j], t);
      for (std::size_t i = 0; i < grid_.size(); ++i) {
        s.phis[k][i] = mix(a.phis[k][i], b.phis[k][i], t);
        s.psis[k][i] = mix(a.psis[k][i], b.psis[k][i], t);
      }
    }
    s.has_coupling = true;
  }

  static double mix(double a, double b, double t) { return a + t * (b - a); }

  double biorth_drift(const eigen_node& n) const {
    double worst = 0.0;
    for (int j = 0; j < modes_; ++j)
      for (int k = 0; k < modes_; ++k) {
        const double pair = inner(n.psis[j], n.phis[k], h_);
        worst = std::max(worst, std::abs(pair - (j == k ? 1.0 : 0.0)));
      }
    return worst;
  }

  const eigen_node& insert(double zeta) {
    eigen_node fresh = solve_node(zeta, /*with_coupling=*/false);
    // Coupling rows stay on the coarse grid: inherit the blend.
    const eigen_node& near = nearest(zeta);
    auto it = std::lower_bound(
        nodes_.begin(), nodes_.end(), zeta,
        [](const eigen_node& n, double z) { return n.zeta < z; });
    if (it != nodes_.begin() && it != nodes_.end()) {
      const eigen_node& a = *(it - 1);
      const eigen_node& b = *it;
      const double t = (zeta - a.zeta) / (b.zeta - a.zeta);
      fresh.c = a.c;
      fresh.g = a.g;
      for (int k = 0; k < modes_; ++k) {
        fresh.c[k] = mix(a.c[k], b.c[k], t);
        for (int j = 0; j < modes_; ++j)
          fresh.g[k][j] = mix(a.g[k][j], b.g[k][j], t);
      }
    } else {
      fresh.c = near.c;
      fresh.g = near.g;
    }
    fresh.has_coupling = true;
    ++inserts_;
    it = nodes_.insert(it, std::move(fresh));
    return *it;
  }

  eigen_node solve_node(double zeta, bool with_coupling) {
    const matched_profile prof = build_profile(flux_, zeta, epsilon_, ell_, 64);
    const auto field = matched_coefficient(flux_, prof);
    const auto op = assemble_operator(field);
    auto dec = eigensolve(op, modes_);
    if (grid_.empty()) {
      grid_ = dec.x;
      h_ = op.h;
    }
    if (!nodes_.empty()) align_modes(dec, nearest(zeta), h_);

    eigen_node n;
    n.zeta = zeta;
    n.res = residual(prof);
    n.lambdas = dec.lambdas;
    n.psi_at.resize(modes_);
    n.p.resize(modes_);
    for (int k = 0; k < modes_; ++k) {
      n.psi_at[k] = value_at(dec.x, dec.psis[k], zeta);
      n.p[k] = inner(dec.psis[k], op.dxi_u, h_);
    }
    n.theta = n.psi_at[0] * n.res;
    n.phis = std::move(dec.phis);
    n.psis = std::move(dec.psis);
    n.c.assign(modes_, 0.0);
    n.g.assign(modes_, std::vector<double>(modes_, 0.0));

    if (with_coupling) {
      auto minus = decompose_at(flux_, zeta - fd_delta_, epsilon_, ell_,
                                modes_);
      auto plus = decompose_at(flux_, zeta + fd_delta_, epsilon_, ell_,
                               modes_);
      anchor_gauge(minus, n, h_);
      anchor_gauge(plus, n, h_);
      std::vector<double> dpsi(grid_.size());
      for (int k = 0; k < modes_; ++k) {
        for (std::size_t i = 0; i < grid_.size(); ++i)
          dpsi[i] = (plus.psis[k][i] - minus.psis[k][i]) / (2.0 * fd_delta_);
        for (int j = 0; j < modes_; ++j)
          n.g[k][j] = inner(dpsi, n.phis[j], h_);
      }
      n.c = n.g[0];
      n.has_coupling = true;
    }
    return n;
  }

  const flux_model& flux_;
  double epsilon_;
  double ell_;
  int modes_;
  double fd_delta_ = 0.0;
  double h_ = 0.0;
  std::vector<double> grid_;
  std::vector<eigen_node> nodes_;  // sorted by zeta
  eigen_node scratch_;
  double omega_seen_ = 0.0;
  std::size_t inserts_ = 0;
};

// Truncated mass of the slow-mode coupling row beyond the retained modes,
// measured with a doubled basis at the starting position. Reported so a
// run documents how much of <d/dzeta psi_1, .> its truncation dropped.
double coupling_tail_estimate(const flux_model& flux, double xi0,
                              double epsilon, double ell, int modes) {
  const int wide = 2 * modes;
  const double delta = epsilon / 200.0;
  auto center = decompose_at(flux, xi0, epsilon, ell, wide);
  auto minus = decompose_at(flux, xi0 - delta, epsilon, ell, wide);
  auto plus = decompose_at(flux, xi0 + delta, epsilon, ell, wide);
  const double h = center.h;
  for (int k = 0; k < wide; ++k) {
    for (auto* side : {&minus, &plus}) {
      const double c = inner(side->psis[k], center.phis[k], h);
      if (std::abs(c) < 0.5) return std::numeric_limits<double>::quiet_NaN();
      for (double& v : side->phis[k]) v *= c;
      for (double& v : side->psis[k]) v /= c;
    }
  }
  std::vector<double> dpsi1(center.x.size());
  for (std::size_t i = 0; i < dpsi1.size(); ++i)
    dpsi1[i] = (plus.psis[0][i] - minus.psis[0][i]) / (2.0 * delta);
  double tail = 0.0;
  for (int j = modes; j < wide; ++j)
    tail += std::abs(inner(dpsi1, center.phis[j], h));
  return tail;
}

double grid_norm(const std::vector<double>& v, double h) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(h * s);
}

}  // namespace

double theta(const flux_model& flux, double xi, double epsilon, double ell,
             const spectral_decomposition& dec) {
  if (dec.psis.empty())
    throw validation_error("theta: decomposition carries no adjoint modes");
  if (!dec.normalized_to_dxi_u)
    throw validation_error(
        "theta: decomposition must be normalized against dU/dxi");
  if (std::abs(dec.xi - xi) > 1e-9 * std::max(1.0, std::abs(xi)))
    throw validation_error(
        "theta: decomposition was built at a different layer position");
  const kappa_pair kp = solve_kappa_pair(flux, xi, epsilon, ell);
  const double res = (kp.kappa_minus - kp.kappa_plus) / epsilon;
  return value_at(dec.x, dec.psis[0], xi) * res;
}

theta_estimates estimate_theta(const flux_model& flux, double xi,
                               double epsilon, double ell,
                               const spectral_decomposition& dec) {
  theta_estimates out;
  out.pairing = theta(flux, xi, epsilon, ell, dec);
  const kappa_pair kp = solve_kappa_pair(flux, xi, epsilon, ell);
  out.kappa_ratio = (kp.kappa_plus - kp.kappa_minus) /
                    (epsilon * (flux.u_plus() - flux.u_minus()));
  out.closed_form = std::numeric_limits<double>::quiet_NaN();
  if (flux.name() == "abs") {
    // Both outer decay rates equal 1/eps regardless of the state values,
    // and the sharp-interface weight cancels the jump.
    out.closed_form = -std::exp(-ell / epsilon) * std::sinh(xi / epsilon) /
                      epsilon;
    out.has_closed_form = true;
  } else if (flux.name() == "burgers") {
    const double b = flux.u_minus();
    out.closed_form = (b / epsilon) * (std::exp(-b * (ell + xi) / epsilon) -
                                       std::exp(-b * (ell - xi) / epsilon));
    out.has_closed_form = true;
  }
  return out;
}

reduced_trajectory integrate_drift(const flux_model& flux, double xi0,
                                   double epsilon, double ell,
                                   double t_final) {
  if (!(t_final > 0.0))
    throw validation_error("integrate_drift: t_final must be positive");
  check_xi_admissible("integrate_drift", xi0, epsilon, ell);

  const double delta = admissible_margin(epsilon, ell);
  const double xi_star = steady_state(flux, epsilon, ell).xi_star;

  // theta is sampled once over the reach of the trajectory (it can only
  // move between xi0 and the rest position) and interpolated; the time
  // loop then never touches an eigensolve.
  double lo = std::min(xi0, xi_star);
  double hi = std::max(xi0, xi_star);
  const double pad = 0.05 * (hi - lo) + 1e-3 * ell;
  lo = std::max(lo - pad, -(ell - delta) * (1.0 - 1e-9));
  hi = std::min(hi + pad, (ell - delta) * (1.0 - 1e-9));
  std::vector<double> zs(kDriftNodes), ths(kDriftNodes);
  for (int i = 0; i < kDriftNodes; ++i) {
    zs[i] = lo + (hi - lo) * i / (kDriftNodes - 1);
    ths[i] = pairing_theta(flux, zs[i], epsilon, ell);
  }
  const monotone_cubic rate(zs, ths);
  const auto clamped = [&](double z) {
    return std::clamp(z, rate.x_min(), rate.x_max());
  };

  reduced_trajectory out;
  double t = 0.0, z = xi0;
  out.times.push_back(t);
  out.zeta.push_back(z);
  out.theta_values.push_back(rate(z));
  while (t < t_final) {
    const double slope = std::abs(rate.derivative(clamped(z)));
    double dt = 0.01 / std::max(slope, 1.0 / t_final);
    dt = std::min(dt, t_final - t);
    const double k1 = rate(clamped(z));
    const double k2 = rate(clamped(z + 0.5 * dt * k1));
    const double k3 = rate(clamped(z + 0.5 * dt * k2));
    const double k4 = rate(clamped(z + dt * k3));
    z += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    t += dt;
    if (std::abs(z) >= ell - delta) {
      out.exited_range = true;
      out.times.push_back(t);
      out.zeta.push_back(z);
      out.theta_values.push_back(rate(clamped(z)));
      break;
    }
    out.times.push_back(t);
    out.zeta.push_back(z);
    out.theta_values.push_back(rate(clamped(z)));
  }
  return out;
}

quasilinear_result integrate_quasilinear(
    const flux_model& flux, double xi0,
    const std::function<double(double)>& w0, double epsilon, double ell,
    int retained_modes, double t_final) {
  if (retained_modes < 8) {
    std::ostringstream os;
    os << "integrate_quasilinear: retained_modes=" << retained_modes
       << " is below the minimum of 8";
    throw validation_error(os.str());
  }
  if (!(t_final > 0.0))
    throw validation_error("integrate_quasilinear: t_final must be positive");
  check_xi_admissible("integrate_quasilinear", xi0, epsilon, ell);

  const int K = retained_modes;
  const double delta = admissible_margin(epsilon, ell);
  const double fd_delta = epsilon / 200.0;

  // Screen the initial field against the starting basis before paying for
  // the full eigendata hull, so an under-resolved field fails fast. The
  // tail fraction is gauge-invariant, so this single solve agrees with the
  // projection made later against the chained cache basis.
  if (w0) {
    const spectral_decomposition probe =
        decompose_at(flux, xi0, epsilon, ell, K);
    const std::vector<double>& px = probe.x;
    const double ph = probe.h;
    const std::size_t pn = px.size();
    std::vector<double> pv(pn, 0.0);
    for (std::size_t i = 0; i < pn; ++i) pv[i] = w0(px[i]);
    std::vector<double> pw(K, 0.0);
    for (int k = 0; k < K; ++k) pw[k] = inner(probe.psis[k], pv, ph);
    for (std::size_t i = 0; i < pn; ++i) pv[i] -= pw[0] * probe.phis[0][i];
    const double pnorm = grid_norm(pv, ph);
    if (pnorm > 0.0) {
      std::vector<double> rec(pn, 0.0);
      for (int k = 1; k < K; ++k)
        for (std::size_t i = 0; i < pn; ++i) rec[i] += pw[k] * probe.phis[k][i];
      double tail2 = 0.0;
      for (std::size_t i = 0; i < pn; ++i) {
        const double d = pv[i] - rec[i];
        tail2 += d * d;
      }
      tail2 *= ph;
      if (tail2 > 0.01 * pnorm * pnorm) {
        std::ostringstream os;
        os << "integrate_quasilinear: initial field leaves "
           << 100.0 * tail2 / (pnorm * pnorm) << "% of its energy beyond "
           << K << " modes (limit 1%)";
        throw validation_error(os.str());
      }
    }
  }

  const double xi_star = steady_state(flux, epsilon, ell).xi_star;

  // Size the eigendata hull from the unperturbed reach: the layer cannot
  // outrun |theta(xi0)| by more than the small modal correction, and it
  // cannot pass the rest position.
  const double theta0 = pairing_theta(flux, xi0, epsilon, ell);
  double reach = std::min(1.05 * std::abs(theta0) * t_final,
                          std::abs(xi_star - xi0));
  const double z_far = xi0 + (theta0 < 0.0 ? -reach : reach);
  double lo = std::min(xi0, z_far);
  double hi = std::max(xi0, z_far);
  const double pad = 0.05 * (hi - lo) + 4.0 * fd_delta;
  lo = std::max(lo - pad, -(ell - delta) + 2.5 * fd_delta);
  hi = std::min(hi + pad, (ell - delta) - 2.5 * fd_delta);

  eigen_cache cache(flux, epsilon, ell, K, lo, hi);
  const std::vector<double>& x = cache.grid();
  const double h = cache.grid_h();
  const std::size_t n = x.size();

  // Initial data: sample, take modal coefficients against the starting
  // basis, and remove the slow-mode component the way the reduced system
  // assumes (subtracting its phi_1 multiple).
  eigen_node q0;
  cache.query(xi0, q0);
  std::vector<double> v0(n, 0.0);
  if (w0)
    for (std::size_t i = 0; i < n; ++i) v0[i] = w0(x[i]);
  std::vector<double> w(K, 0.0);
  for (int k = 0; k < K; ++k) w[k] = inner(q0.psis[k], v0, h);
  for (std::size_t i = 0; i < n; ++i) v0[i] -= w[0] * q0.phis[0][i];
  w[0] = 0.0;
  const double w0_norm = grid_norm(v0, h);
  if (w0_norm > 0.0) {
    std::vector<double> rec(n, 0.0);
    for (int k = 1; k < K; ++k)
      for (std::size_t i = 0; i < n; ++i) rec[i] += w[k] * q0.phis[k][i];
    double tail2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = v0[i] - rec[i];
      tail2 += d * d;
    }
    tail2 *= h;
    if (tail2 > 0.01 * w0_norm * w0_norm) {
      std::ostringstream os;
      os << "integrate_quasilinear: initial field leaves "
         << 100.0 * tail2 / (w0_norm * w0_norm) << "% of its energy beyond "
         << K << " modes (limit 1%)";
      throw validation_error(os.str());
    }
  }
  const std::vector<double> w_init = w;

  // Fixed step: stable for the stiffest retained mode and fine enough in
  // time; the exponential two-stage update handles the linear decay
  // exactly at frozen coefficients.
  const double lam_fast = std::abs(q0.lambdas[K - 1]);
  double dt = std::min(0.25 / std::max(lam_fast, 1e-12), t_final / 2048.0);
  const int n_steps = static_cast<int>(std::ceil(t_final / dt - 1e-12));
  dt = t_final / n_steps;
  const int snap_stride = std::max(1, n_steps / 32);

  quasilinear_result out;
  out.grid = x;
  out.grid_h = h;
  out.w0_norm = w0_norm;

  std::vector<double> decay(K, 0.0);  // integral of lambda_k along the run
  std::vector<double> field(n), zfield(n), dfield(n);
  const auto record = [&](int step, double t, double zeta,
                          const eigen_node& q) {
    quasilinear_state st;
    st.time = t;
    st.zeta = zeta;
    st.w_coeffs = w;
    st.retained_modes = K;
    out.states.push_back(std::move(st));
    out.mode_decay_log.push_back(decay);
    std::fill(field.begin(), field.end(), 0.0);
    std::fill(zfield.begin(), zfield.end(), 0.0);
    for (int k = 1; k < K; ++k) {
      const double zk = w_init[k] * std::exp(decay[k]);
      for (std::size_t i = 0; i < n; ++i) {
        field[i] += w[k] * q.phis[k][i];
        zfield[i] += zk * q.phis[k][i];
      }
    }
    for (std::size_t i = 0; i < n; ++i) dfield[i] = field[i] - zfield[i];
    out.w_norm.push_back(grid_norm(field, h));
    out.report.times.push_back(t);
    out.report.z_norm.push_back(grid_norm(zfield, h));
    out.report.w_minus_z_norm.push_back(grid_norm(dfield, h));
    if (step % snap_stride == 0 || step == n_steps) {
      out.snapshot_indices.push_back(out.states.size() - 1);
      out.snapshot_fields.push_back(field);
    }
  };

  double t = 0.0, zeta = xi0;
  record(0, t, zeta, q0);

  eigen_node qa, qe;
  std::vector<double> a(K, 0.0), n0(K, 0.0), na(K, 0.0), grow(K, 0.0),
      f1(K, 0.0), f2(K, 0.0);
  const auto forcing = [&](const eigen_node& q, const std::vector<double>& wk,
                           std::vector<double>& dst, double& rate) {
    double s = 0.0;
    for (int j = 1; j < K; ++j) s += q.c[j] * wk[j];
    rate = q.theta * (1.0 + s);
    for (int k = 1; k < K; ++k) {
      double qk = 0.0;
      for (int j = 1; j < K; ++j) qk += q.g[k][j] * wk[j];
      dst[k] = q.psi_at[k] * q.res - rate * (q.p[k] - qk);
    }
  };

  for (int step = 1; step <= n_steps; ++step) {
    double rate0 = 0.0, rate_a = 0.0;
    forcing(q0, w, n0, rate0);
    for (int k = 1; k < K; ++k) {
      const double z = q0.lambdas[k] * dt;
      grow[k] = std::exp(z);
      f1[k] = phi1(z);
      f2[k] = phi2(z);
      a[k] = w[k] * grow[k] + dt * f1[k] * n0[k];
    }
    const double zeta_a =
        std::clamp(zeta + dt * rate0, -(ell - delta), ell - delta);
    cache.query(zeta_a, qa);
    forcing(qa, a, na, rate_a);
    for (int k = 1; k < K; ++k)
      w[k] = a[k] + dt * f2[k] * (na[k] - n0[k]);
    zeta += 0.5 * dt * (rate0 + rate_a);
    for (int k = 0; k < K; ++k)
      decay[k] += 0.5 * dt * (q0.lambdas[k] + qa.lambdas[k]);
    t = dt * step;
    if (std::abs(zeta) >= ell - delta) {
      out.exited_range = true;
      zeta = std::clamp(zeta, -(ell - delta), ell - delta);
      record(step, t, zeta, qa);
      break;
    }
    cache.query(zeta, qe);
    record(step, t, zeta, qe);
    std::swap(q0, qe);
  }

  out.omega_sup = cache.omega_seen();
  out.coupling_tail = coupling_tail_estimate(flux, xi0, epsilon, ell, K);

  bool degenerate = false;
  out.report.horizon = validity_horizon(out.omega_sup, w0_norm, &degenerate);
  out.report.horizon_degenerate = degenerate;
  out.report.bound_rhs.resize(out.report.times.size());
  double fitted = 0.0;
  for (std::size_t i = 0; i < out.report.times.size(); ++i) {
    const double e1sq = std::exp(2.0 * out.mode_decay_log[i][0]);
    out.report.bound_rhs[i] =
        out.omega_sup * (e1sq * w0_norm * w0_norm + 1.0);
    if (out.report.times[i] <= out.report.horizon)
      fitted = std::max(
          fitted, out.report.w_minus_z_norm[i] / out.report.bound_rhs[i]);
  }
  out.report.fitted_c = fitted;
  return out;
}

double validity_horizon(double omega_sup, double w0_norm, bool* degenerate) {
  if (!(omega_sup > 0.0))
    throw validation_error("validity_horizon: omega_sup must be positive");
  if (degenerate) *degenerate = false;
  const double arg = 1.0 / omega_sup - w0_norm * w0_norm;
  if (arg <= 1.0) {
    // No positive window: either the perturbation already saturates the
    // envelope or the defect amplitude is too large for the estimate.
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  return std::log(arg) / omega_sup;
}

drift_stability_report drift_stability_check(const flux_model& flux,
                                             double epsilon, double ell) {
  drift_stability_report rep;
  rep.samples = kStabilitySamples;
  rep.xi_star = steady_state(flux, epsilon, ell).xi_star;

  const double delta = admissible_margin(epsilon, ell);
  const double lo = -(ell - delta);
  const double hi = ell - delta;
  const double spacing = (hi - lo) / kStabilitySamples;
  bool sign_ok = true;
  double worst = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < kStabilitySamples; ++i) {
    const double xi = lo + (i + 0.5) * spacing;
    if (std::abs(xi - rep.xi_star) <= spacing) continue;
    const double product =
        (xi - rep.xi_star) * pairing_theta(flux, xi, epsilon, ell);
    worst = std::max(worst, product);
    if (!(product < 0.0)) sign_ok = false;
  }
  rep.worst_sign_product = worst;
  rep.sign_condition = sign_ok;

  const double fd = epsilon / 8.0;
  const double slope = (pairing_theta(flux, rep.xi_star + fd, epsilon, ell) -
                        pairing_theta(flux, rep.xi_star - fd, epsilon, ell)) /
                       (2.0 * fd);
  rep.derivative_negative = slope < 0.0;
  rep.beta = std::abs(slope);
  return rep;
}

}  // namespace metastab
