#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "metastab/errors.hpp"
#include "metastab/flux.hpp"
#include "metastab/manifold.hpp"
#include "metastab/numerics.hpp"
#include "metastab/reduced.hpp"
#include "metastab/spectral.hpp"

using namespace metastab;

namespace {

// Frozen pairing values for the layer-drift rate at eps=0.1, ell=1. The
// closed forms below reproduce them to a few tenths of a percent, which
// pins the physics; the extra digits pin determinism of the pipeline.
struct theta_pin {
  double xi, value;
};
const std::vector<theta_pin> kBurgersTheta = {
    {0.1, -1.067014e-3}, {0.3, -9.087743e-3}, {0.5, -6.686978e-2}};
const std::vector<theta_pin> kAbsTheta = {
    {0.1, -5.341575e-4}, {0.3, -4.573380e-3}, {0.5, -3.464795e-2}};

double closed_theta_burgers(double b, double xi, double eps, double ell) {
  return (b / eps) *
         (std::exp(-b * (ell + xi) / eps) - std::exp(-b * (ell - xi) / eps));
}

double closed_theta_abs(double xi, double eps, double ell) {
  return -std::exp(-ell / eps) * std::sinh(xi / eps) / eps;
}

double lin_at(const std::vector<double>& xs, const std::vector<double>& ys,
              double x) {
  std::size_t i = 0;
  while (i + 2 < xs.size() && xs[i + 1] <= x) ++i;
  const double u = (x - xs[i]) / (xs[i + 1] - xs[i]);
  return ys[i] + u * (ys[i + 1] - ys[i]);
}

double l2(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

spectral_decomposition solve_basis(const flux_model& flux, double xi,
                                   double eps, double ell, int modes) {
  return eigensolve(
      assemble_operator(matched_coefficient(
          flux, build_profile(flux, xi, eps, ell, 64))),
      modes);
}

// Initial field built from one eigenmode of the starting basis, scaled to a
// requested grid norm. Captures the mode by value so the basis can go away.
std::function<double(double)> mode_field(const spectral_decomposition& dec,
                                         int mode, double norm) {
  double n = 0.0;
  for (double v : dec.phis[mode]) n += v * v;
  n = std::sqrt(dec.h * n);
  const double scale = norm / n;
  std::vector<double> xs = dec.x, ys = dec.phis[mode];
  return [xs, ys, scale](double x) { return scale * lin_at(xs, ys, x); };
}

// Independent eigendata table for the pure-forcing oracle: fresh solves on
// a uniform layer-position grid, sign-chained for continuity, side solves
// re-gauged against the center pair before differencing. Interpolation is
// shape-preserving cubic, unlike the integrator's blended cache, and the
// time integration below is adaptive embedded Runge-Kutta, unlike the
// integrator's exponential stepper, so agreement is evidence rather than
// construction.
struct oracle_table {
  int K = 0;
  std::vector<double> zs;
  monotone_cubic res_c;
  std::vector<monotone_cubic> lam_c, psi_c, p_c;
  std::vector<std::vector<monotone_cubic>> g_c;
};

oracle_table build_oracle_table(const flux_model& flux, double zlo,
                                double zhi, double eps, double ell, int K,
                                int n_nodes) {
  struct node_data {
    double res;
    std::vector<double> lam, psi_at, p;
    std::vector<std::vector<double>> G;
  };
  oracle_table T;
  T.K = K;
  std::vector<node_data> data;
  const double fd = eps / 200.0;
  std::vector<std::vector<double>> prev_phis;
  for (int i = 0; i < n_nodes; ++i) {
    const double z = zlo + (zhi - zlo) * i / (n_nodes - 1);
    const auto kp = solve_kappa_pair(flux, z, eps, ell);
    const auto op = assemble_operator(matched_coefficient(
        flux, build_profile(flux, z, eps, ell, 64)));
    auto dec = eigensolve(op, K);
    const double h = dec.h;
    if (!prev_phis.empty())
      for (int k = 0; k < K; ++k) {
        const double s = inner(dec.psis[k], prev_phis[k], h);
        REQUIRE(std::abs(s) > 0.5);
        if (s < 0.0)
          for (std::size_t q = 0; q < dec.phis[k].size(); ++q) {
            dec.phis[k][q] = -dec.phis[k][q];
            dec.psis[k][q] = -dec.psis[k][q];
          }
      }
    auto side = [&](double zz) {
      auto d = eigensolve(assemble_operator(matched_coefficient(
                              flux, build_profile(flux, zz, eps, ell, 64))),
                          K);
      for (int k = 0; k < K; ++k) {
        const double c = inner(d.psis[k], dec.phis[k], h);
        REQUIRE(std::abs(c) > 0.5);
        for (std::size_t q = 0; q < d.phis[k].size(); ++q) {
          d.phis[k][q] *= c;
          d.psis[k][q] /= c;
        }
      }
      return d;
    };
    const auto dm = side(z - fd);
    const auto dp = side(z + fd);
    node_data nd;
    nd.res = (kp.kappa_minus - kp.kappa_plus) / eps;
    nd.lam.resize(K);
    nd.psi_at.resize(K);
    nd.p.resize(K);
    nd.G.assign(K, std::vector<double>(K, 0.0));
    std::vector<double> dpsi(dec.x.size());
    for (int k = 0; k < K; ++k) {
      nd.lam[k] = dec.lambdas[k];
      nd.psi_at[k] = lin_at(dec.x, dec.psis[k], z);
      nd.p[k] = inner(dec.psis[k], op.dxi_u, h);
      for (std::size_t q = 0; q < dpsi.size(); ++q)
        dpsi[q] = (dp.psis[k][q] - dm.psis[k][q]) / (2.0 * fd);
      for (int j = 0; j < K; ++j) nd.G[k][j] = inner(dpsi, dec.phis[j], h);
    }
    prev_phis = dec.phis;
    T.zs.push_back(z);
    data.push_back(std::move(nd));
  }
  const int n = n_nodes;
  std::vector<double> col(n);
  auto mk = [&](auto get) {
    for (int i = 0; i < n; ++i) col[i] = get(data[i]);
    return monotone_cubic(T.zs, col);
  };
  T.res_c = mk([](const node_data& d) { return d.res; });
  for (int k = 0; k < K; ++k) {
    T.lam_c.push_back(mk([k](const node_data& d) { return d.lam[k]; }));
    T.psi_c.push_back(mk([k](const node_data& d) { return d.psi_at[k]; }));
    T.p_c.push_back(mk([k](const node_data& d) { return d.p[k]; }));
  }
  T.g_c.resize(K);
  for (int k = 0; k < K; ++k)
    for (int j = 0; j < K; ++j)
      T.g_c[k].push_back(mk([k, j](const node_data& d) { return d.G[k][j]; }));
  return T;
}

}  // namespace

TEST_CASE("theta route pins and three-way agreement") {
  const auto burgers = make_burgers(1.0);
  const auto absf = make_abs(1.0);
  const double ell = 1.0;

  // Frozen pairing values at eps=0.1 and the closed forms within a percent.
  for (const auto& pin : kBurgersTheta) {
    const auto dec = solve_basis(burgers, pin.xi, 0.1, ell, 1);
    const auto est = estimate_theta(burgers, pin.xi, 0.1, ell, dec);
    CHECK(est.pairing == doctest::Approx(pin.value).epsilon(1e-6));
    CHECK(est.has_closed_form);
    CHECK(est.closed_form ==
          doctest::Approx(closed_theta_burgers(1.0, pin.xi, 0.1, ell))
              .epsilon(1e-12));
    CHECK(theta(burgers, pin.xi, 0.1, ell, dec) ==
          doctest::Approx(est.pairing).epsilon(1e-12));
  }
  for (const auto& pin : kAbsTheta) {
    const auto dec = solve_basis(absf, pin.xi, 0.1, ell, 1);
    const auto est = estimate_theta(absf, pin.xi, 0.1, ell, dec);
    CHECK(est.pairing == doctest::Approx(pin.value).epsilon(1e-6));
    CHECK(est.closed_form ==
          doctest::Approx(closed_theta_abs(pin.xi, 0.1, ell)).epsilon(1e-12));
  }

  // All three evaluation routes stay within ten percent of each other over
  // the inner half of the interval, for both step sizes of interest.
  for (double eps : {0.1, 0.07})
    for (double axi : {0.1, 0.3, 0.5})
      for (double sgn : {1.0, -1.0}) {
        const double xi = sgn * axi;
        for (const flux_model* f : {&burgers, &absf}) {
          const auto dec = solve_basis(*f, xi, eps, ell, 1);
          const auto est = estimate_theta(*f, xi, eps, ell, dec);
          const double ref = std::abs(est.pairing);
          CHECK(std::abs(est.kappa_ratio - est.pairing) < 0.10 * ref);
          CHECK(std::abs(est.closed_form - est.pairing) < 0.10 * ref);
        }
      }
}

TEST_CASE("theta is odd for symmetric data and vanishes at rest") {
  const auto burgers = make_burgers(1.0);
  for (double xi : {0.1, 0.25, 0.4}) {
    const auto dp = solve_basis(burgers, xi, 0.1, 1.0, 1);
    const auto dm = solve_basis(burgers, -xi, 0.1, 1.0, 1);
    const double tp = theta(burgers, xi, 0.1, 1.0, dp);
    const double tm = theta(burgers, -xi, 0.1, 1.0, dm);
    CHECK(std::abs(tp + tm) <= 1e-8 * std::abs(tp));
    // restoring sign: the rate pushes the layer back toward the center
    CHECK(xi * tp < 0.0);
  }
  const auto d0 = solve_basis(burgers, 0.0, 0.1, 1.0, 1);
  CHECK(std::abs(theta(burgers, 0.0, 0.1, 1.0, d0)) < 1e-12);
}

TEST_CASE("theta validates its decomposition argument") {
  const auto burgers = make_burgers(1.0);
  const auto dec = solve_basis(burgers, 0.3, 0.1, 1.0, 1);

  CHECK_THROWS_AS(theta(burgers, 0.2, 0.1, 1.0, dec), validation_error);

  auto denorm = dec;
  denorm.normalized_to_dxi_u = false;
  CHECK_THROWS_AS(theta(burgers, 0.3, 0.1, 1.0, denorm), validation_error);

  spectral_decomposition empty;
  CHECK_THROWS_AS(theta(burgers, 0.3, 0.1, 1.0, empty), validation_error);
}

TEST_CASE("drift from the rest position stays put") {
  const auto tr = integrate_drift(make_burgers(1.0), 0.0, 0.1, 1.0, 5.0);
  REQUIRE(!tr.zeta.empty());
  for (std::size_t i = 0; i < tr.zeta.size(); ++i) {
    CHECK(std::abs(tr.zeta[i]) < 1e-10);
    CHECK(std::abs(tr.theta_values[i]) < 1e-10);
  }
  CHECK(!tr.exited_range);
}

TEST_CASE("abs-flux drift matches the separable closed-form ODE") {
  const double eps = 0.1, ell = 1.0, xi0 = 0.3, T = 20.0;
  const auto tr = integrate_drift(make_abs(1.0), xi0, eps, ell, T);
  REQUIRE(tr.times.size() >= 4);
  CHECK(!tr.exited_range);

  // Oracle: the closed drift law integrated adaptively at 1e-12, far
  // tighter than the one-percent agreement demanded of the trajectory.
  auto rhs = [&](double, const std::vector<double>& y,
                 std::vector<double>& d) {
    d[0] = -std::exp(-ell / eps) * std::sinh(y[0] / eps) / eps;
  };
  ode_options opt;
  opt.rel_tol = 1e-12;
  opt.abs_tol = 1e-14;
  const auto sol = integrate_ode(rhs, {xi0}, 0.0, T, opt);
  std::vector<double> oz(sol.times.size());
  for (std::size_t i = 0; i < sol.times.size(); ++i) oz[i] = sol.states[i][0];
  const monotone_cubic zc(sol.times, oz);

  double worst = 0.0;
  for (std::size_t i = 0; i < tr.times.size(); ++i) {
    worst = std::max(worst, std::abs(tr.zeta[i] - zc(tr.times[i])));
    CHECK(tr.zeta[i] > -(ell) + admissible_margin(eps, ell));
    CHECK(tr.zeta[i] < (ell)-admissible_margin(eps, ell));
    if (i) {
      CHECK(tr.times[i] > tr.times[i - 1]);
      // distance to rest is non-increasing under the restoring sign
      CHECK(std::abs(tr.zeta[i]) <= std::abs(tr.zeta[i - 1]) + 1e-14);
    }
  }
  CHECK(worst < 0.01 * xi0);  // measured 2.0e-4

  // the stored rate series matches a fresh pairing evaluation at the start
  const auto dec = solve_basis(make_abs(1.0), xi0, eps, ell, 1);
  CHECK(tr.theta_values.front() ==
        doctest::Approx(theta(make_abs(1.0), xi0, eps, ell, dec))
            .epsilon(1e-6));
}

TEST_CASE("time-to-half scaling across eps follows the closed-form rate") {
  const auto burgers = make_burgers(1.0);
  const double ell = 1.0, xi0 = 0.3, half = 0.15;
  const double epss[2] = {0.1, 0.07};
  const double t_final[2] = {100.0, 5000.0};
  double t_half[2] = {0.0, 0.0};

  for (int c = 0; c < 2; ++c) {
    const auto tr = integrate_drift(burgers, xi0, epss[c], ell, t_final[c]);
    for (std::size_t i = 1; i < tr.zeta.size(); ++i) {
      CHECK(tr.zeta[i] <= tr.zeta[i - 1] + 1e-12);  // monotone decay
      if (t_half[c] == 0.0 && tr.zeta[i] <= half) {
        const double u =
            (half - tr.zeta[i - 1]) / (tr.zeta[i] - tr.zeta[i - 1]);
        t_half[c] = tr.times[i - 1] + u * (tr.times[i] - tr.times[i - 1]);
      }
    }
    REQUIRE(t_half[c] > 0.0);
  }

  // Oracle: time of passage from xi0 to half under the closed-form rate,
  // by Simpson quadrature of the inverse speed.
  auto passage = [&](double eps) {
    const int n = 40001;
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
      const double x = half + (xi0 - half) * i / (n - 1);
      const double th = closed_theta_burgers(1.0, x, eps, ell);
      s += ((i == 0 || i == n - 1) ? 1.0 : ((i % 2) ? 4.0 : 2.0)) /
           std::abs(th);
    }
    return s * (xi0 - half) / (n - 1) / 3.0;
  };
  const double ratio = t_half[1] / t_half[0];
  const double oracle = passage(0.07) / passage(0.1);
  CHECK(ratio == doctest::Approx(oracle).epsilon(0.02));  // measured 0.035%
  CHECK(ratio > 10.0);  // exponentially slower dynamics at smaller eps
}

TEST_CASE("drift rejects bad starts") {
  const auto burgers = make_burgers(1.0);
  CHECK_THROWS_AS(integrate_drift(burgers, 0.9, 0.1, 1.0, 1.0),
                  validation_error);
  CHECK_THROWS_AS(integrate_drift(burgers, 0.3, 0.1, 1.0, 0.0),
                  validation_error);
  CHECK_THROWS_AS(integrate_drift(burgers, 0.3, 0.1, 1.0, -2.0),
                  validation_error);
}

TEST_CASE("zero-perturbation quasilinear run follows drift and forcing") {
  const auto burgers = make_burgers(1.0);
  const double eps = 0.1, ell = 1.0, xi0 = 0.3, T = 6.0;
  const int K = 8;

  const auto drift = integrate_drift(burgers, xi0, eps, ell, T);
  const monotone_cubic drift_c(drift.times, drift.zeta);
  const auto run = integrate_quasilinear(burgers, xi0, {}, eps, ell, K, T);

  REQUIRE(!run.states.empty());
  CHECK(!run.exited_range);
  CHECK(run.w0_norm == 0.0);

  // The layer position must agree with the scalar drift integration, which
  // uses a different cache, interpolation, and stepper.
  double dworst = 0.0;
  for (const auto& st : run.states) {
    dworst = std::max(dworst, std::abs(st.zeta - drift_c(st.time)));
    CHECK(st.w_coeffs[0] == 0.0);
    CHECK(st.retained_modes == K);
  }
  CHECK(dworst < 1e-6);  // measured 7.0e-7

  // Pure-forcing oracle: the same modal system integrated independently
  // (fresh eigendata, cubic in the layer position, embedded Runge-Kutta in
  // time). With no initial perturbation the run must match it to within
  // the quasi-static response scale |H|/|lambda_1| times 1e-8; the modal
  // feedback it neglects enters only quadratically.
  const double zmin =
      std::min(run.states.back().zeta, drift.zeta.back()) - 2e-4;
  const double zmax = xi0 + 2e-4;
  const auto tab = build_oracle_table(burgers, zmin, zmax, eps, ell, K, 65);

  auto rhs = [&](double, const std::vector<double>& y,
                 std::vector<double>& d) {
    const double z = std::clamp(y[0], tab.zs.front(), tab.zs.back());
    const double res = tab.res_c(z);
    const double th = tab.psi_c[0](z) * res;
    d[0] = th;
    for (int k = 1; k < K; ++k) {
      double q = 0.0;
      for (int j = 1; j < K; ++j) q += tab.g_c[k][j](z) * y[j];
      d[k] = tab.lam_c[k](z) * y[k] + tab.psi_c[k](z) * res -
             th * (tab.p_c[k](z) - q);
    }
  };
  ode_options opt;
  opt.rel_tol = 1e-10;
  opt.abs_tol = 1e-14;
  std::vector<double> y(K, 0.0);
  y[0] = xi0;
  double tprev = 0.0;
  double worst = 0.0, h_sup = 0.0;
  for (std::size_t si = 0; si < run.snapshot_indices.size(); ++si) {
    const auto& st = run.states[run.snapshot_indices[si]];
    if (st.time > tprev) {
      y = integrate_ode(rhs, y, tprev, st.time, opt).states.back();
      tprev = st.time;
    }
    std::vector<double> dw(K - 1);
    for (int k = 1; k < K; ++k) dw[k - 1] = st.w_coeffs[k] - y[k];
    worst = std::max(worst, l2(dw));
    std::vector<double> hv(K);
    const double z = std::clamp(st.zeta, tab.zs.front(), tab.zs.back());
    for (int k = 0; k < K; ++k) hv[k] = tab.psi_c[k](z) * tab.res_c(z);
    h_sup = std::max(h_sup, l2(hv));
  }
  const double scale = h_sup / std::abs(tab.lam_c[0](xi0));
  CHECK(worst < 1e-8 * scale);  // measured 1.35e-8 vs budget 2.7e-8

  // bookkeeping exposed by the run
  CHECK(run.omega_sup > 0.0);
  CHECK(run.coupling_tail >= 0.0);
  CHECK(run.coupling_tail < 1e-2);
}

TEST_CASE("perturbed run satisfies the remainder bound, stable across eps") {
  const auto burgers = make_burgers(1.0);
  const double ell = 1.0, xi0 = 0.3, T = 6.0;
  const int K = 8;
  double fitted[2] = {0.0, 0.0};
  const double epss[2] = {0.1, 0.07};

  for (int c = 0; c < 2; ++c) {
    const double eps = epss[c];
    const auto dec0 = solve_basis(burgers, xi0, eps, ell, K);
    const auto run = integrate_quasilinear(burgers, xi0,
                                           mode_field(dec0, 1, 0.01), eps,
                                           ell, K, T);
    fitted[c] = run.report.fitted_c;
    REQUIRE(!run.report.times.empty());
    CHECK(run.w0_norm == doctest::Approx(0.01).epsilon(1e-9));
    CHECK(!run.report.horizon_degenerate);
    CHECK(run.report.horizon ==
          doctest::Approx(validity_horizon(run.omega_sup, run.w0_norm))
              .epsilon(1e-12));

    // the defect amplitude sup is attained at the start, where the layer
    // is farthest from rest
    const auto kp = solve_kappa_pair(burgers, xi0, eps, ell);
    const double res0 = std::abs(kp.kappa_minus - kp.kappa_plus) / eps;
    CHECK(run.omega_sup == doctest::Approx(res0).epsilon(1e-6));

    // remainder comparison: starts at zero, frozen-coefficient modal decay
    // drains z, and the fitted bound holds pointwise inside the horizon
    CHECK(run.report.w_minus_z_norm.front() < 1e-12);
    CHECK(run.report.z_norm.front() ==
          doctest::Approx(run.w0_norm).epsilon(1e-4));
    CHECK(run.report.z_norm.back() < 1e-6 * run.w0_norm);
    CHECK(run.report.fitted_c > 0.0);
    CHECK(run.report.fitted_c < 10.0);
    for (std::size_t i = 0; i < run.report.times.size(); ++i) {
      if (run.report.times[i] > run.report.horizon) break;
      CHECK(run.report.w_minus_z_norm[i] <=
            run.report.fitted_c * run.report.bound_rhs[i] * (1.0 + 1e-12));
      // the envelope is rebuilt from the logged slow-mode decay integral
      const double rebuilt =
          run.omega_sup *
          (std::exp(2.0 * run.mode_decay_log[i][0]) * run.w0_norm *
               run.w0_norm +
           1.0);
      CHECK(run.report.bound_rhs[i] ==
            doctest::Approx(rebuilt).epsilon(1e-12));
    }

    if (c == 0) {
      // mode-decay log: zero at start, non-increasing, slow mode on top
      REQUIRE(run.mode_decay_log.size() == run.states.size());
      for (int k = 0; k < K; ++k)
        CHECK(run.mode_decay_log.front()[k] == 0.0);
      for (std::size_t i = 1; i < run.mode_decay_log.size(); ++i)
        for (int k = 0; k < K; ++k) {
          CHECK(run.mode_decay_log[i][k] <=
                run.mode_decay_log[i - 1][k] + 1e-14);
          CHECK(run.mode_decay_log[i][k] <= run.mode_decay_log[i][0] + 1e-14);
        }

      // Faster modes decay at least quadratically faster: with the rate
      // gap fitted from the logged derivatives, every sampled interval
      // satisfies the k^2-weighted domination inequality.
      double cfit = 1e300;
      for (std::size_t i = 0; i + 1 < run.states.size(); ++i) {
        const double dt = run.states[i + 1].time - run.states[i].time;
        const double l1 =
            (run.mode_decay_log[i + 1][0] - run.mode_decay_log[i][0]) / dt;
        for (int k = 1; k < K; ++k) {
          const double lk =
              (run.mode_decay_log[i + 1][k] - run.mode_decay_log[i][k]) / dt;
          cfit = std::min(cfit, (l1 - lk) / double((k + 1) * (k + 1)));
        }
      }
      CHECK(cfit > 0.0);
      const auto& si = run.snapshot_indices;
      for (std::size_t a = 0; a < si.size(); a += 2)
        for (std::size_t b = a + 1; b < si.size(); b += 2) {
          const double ds =
              run.states[si[b]].time - run.states[si[a]].time;
          for (int k = 1; k < K; ++k) {
            const double lhs = run.mode_decay_log[si[b]][k] -
                               run.mode_decay_log[si[a]][k];
            const double bound = run.mode_decay_log[si[b]][0] -
                                 run.mode_decay_log[si[a]][0] -
                                 cfit * double((k + 1) * (k + 1)) * ds;
            CHECK(lhs <= bound + 1e-9);
          }
        }

      // The projection constraint is re-measured from stored fields
      // against fresh eigendata, not from the integrator's own ledger.
      REQUIRE(run.snapshot_fields.size() == run.snapshot_indices.size());
      for (std::size_t s = 0; s < si.size(); s += 8) {
        const auto& st = run.states[si[s]];
        const auto dec = solve_basis(burgers, st.zeta, eps, ell, 1);
        const double w1 =
            inner(dec.psis[0], run.snapshot_fields[s], run.grid_h);
        CHECK(std::abs(w1) < 1e-8);  // measured 2.5e-12
      }
    }
  }

  // the fitted constant is a stable feature of the dynamics, not a tuning
  const double r = fitted[1] / fitted[0];
  CHECK(r > 1.0 / 3.0);
  CHECK(r < 3.0);  // measured 0.71
}

TEST_CASE("doubling the retained modes leaves shared coefficients put") {
  const auto burgers = make_burgers(1.0);
  const double eps = 0.1, ell = 1.0, xi0 = 0.3, T = 3.0;
  const auto dec0 = solve_basis(burgers, xi0, eps, ell, 8);
  const auto w0 = mode_field(dec0, 1, 0.01);

  const auto r8 = integrate_quasilinear(burgers, xi0, w0, eps, ell, 8, T);
  const auto r16 = integrate_quasilinear(burgers, xi0, w0, eps, ell, 16, T);
  REQUIRE(r8.states.size() == r16.states.size());

  // The comparison is on the first eight coefficients: the added modes
  // carry their own directly forced response, so the full modal norm
  // legitimately grows with K; truncation quality shows in whether the
  // retained coefficients move.
  double dpref = 0.0, wmax = 0.0;
  for (std::size_t i = 0; i < r8.states.size(); ++i) {
    CHECK(r8.states[i].time == doctest::Approx(r16.states[i].time));
    std::vector<double> d(8);
    for (int k = 0; k < 8; ++k)
      d[k] = r8.states[i].w_coeffs[k] - r16.states[i].w_coeffs[k];
    dpref = std::max(dpref, l2(d));
    wmax = std::max(wmax, r8.w_norm[i]);
  }
  CHECK(dpref < 0.01 * wmax);  // measured 0.009% of max |w|
  CHECK(std::abs(r8.states.back().zeta - r16.states.back().zeta) < 1e-8);
}

TEST_CASE("quasilinear rejects bad inputs and under-resolved fields") {
  const auto burgers = make_burgers(1.0);
  CHECK_THROWS_AS(
      integrate_quasilinear(burgers, 0.3, {}, 0.1, 1.0, 7, 1.0),
      validation_error);
  CHECK_THROWS_AS(
      integrate_quasilinear(burgers, 0.9, {}, 0.1, 1.0, 8, 1.0),
      validation_error);
  CHECK_THROWS_AS(
      integrate_quasilinear(burgers, 0.3, {}, 0.1, 1.0, 8, 0.0),
      validation_error);

  // an initial field living in mode nine cannot be carried by eight modes
  const auto dec16 = solve_basis(burgers, 0.3, 0.1, 1.0, 16);
  CHECK_THROWS_AS(
      integrate_quasilinear(burgers, 0.3, mode_field(dec16, 8, 0.01), 0.1,
                            1.0, 8, 1.0),
      validation_error);
}

TEST_CASE("initial fields lose their slow component by projection") {
  const auto burgers = make_burgers(1.0);
  const double eps = 0.1, ell = 1.0, xi0 = 0.3;
  const auto dec0 = solve_basis(burgers, xi0, eps, ell, 8);
  const auto f1 = mode_field(dec0, 0, 0.02);
  const auto f2 = mode_field(dec0, 1, 0.005);
  auto w0 = [&](double x) { return f1(x) + f2(x); };

  const auto run =
      integrate_quasilinear(burgers, xi0, w0, eps, ell, 8, 0.1);
  REQUIRE(!run.states.empty());
  const auto& first = run.states.front();
  CHECK(first.w_coeffs[0] == 0.0);
  // The slow multiple is gone, the genuine second-mode content survives.
  // mode_field fixes the grid norm, so the expected coefficient is the
  // requested norm divided by the mode's own.
  double n2 = 0.0;
  for (double v : dec0.phis[1]) n2 += v * v;
  n2 = std::sqrt(dec0.h * n2);
  CHECK(std::abs(first.w_coeffs[1]) ==
        doctest::Approx(0.005 / n2).epsilon(2e-3));
  for (int k = 2; k < 8; ++k) CHECK(std::abs(first.w_coeffs[k]) < 1e-4);
  for (const auto& st : run.states) CHECK(st.w_coeffs[0] == 0.0);
}

TEST_CASE("validity horizon: formula value, degeneracy, halving gain") {
  CHECK(validity_horizon(1e-4, 0.0) ==
        doctest::Approx(1e4 * std::log(1e4)).epsilon(1e-12));

  bool degenerate = false;
  CHECK(validity_horizon(0.5, 2.0, &degenerate) == 0.0);
  CHECK(degenerate);
  degenerate = false;
  CHECK(validity_horizon(1e-3, 0.0, &degenerate) > 0.0);
  CHECK(!degenerate);

  for (double omega : {1e-2, 1e-4, 1e-6})
    for (double w0 : {0.0, 0.05})
      CHECK(validity_horizon(omega / 2.0, w0) >
            2.0 * validity_horizon(omega, w0));

  CHECK_THROWS_AS(validity_horizon(0.0, 0.0), validation_error);
  CHECK_THROWS_AS(validity_horizon(-1.0, 0.0), validation_error);
}

TEST_CASE("drift stability reports for symmetric and skewed fluxes") {
  const double ell = 1.0;

  const auto rb = drift_stability_check(make_burgers(1.0), 0.1, ell);
  CHECK(rb.sign_condition);
  CHECK(rb.derivative_negative);
  CHECK(rb.worst_sign_product < 0.0);
  CHECK(std::abs(rb.xi_star) < 1e-9);
  CHECK(rb.samples == 200);
  // local restoring rate against the closed-form slope at the center
  const double beta_b = 2.0 / (0.1 * 0.1) * std::exp(-ell / 0.1);
  CHECK(rb.beta == doctest::Approx(beta_b).epsilon(0.01));

  const auto ra = drift_stability_check(make_abs(1.0), 0.1, ell);
  CHECK(ra.sign_condition);
  CHECK(ra.derivative_negative);
  // abs-flux closed slope at center: -(1/eps^2) e^{-ell/eps} cosh(0)
  const double beta_a = std::exp(-ell / 0.1) / (0.1 * 0.1);
  CHECK(ra.beta == doctest::Approx(beta_a).epsilon(0.01));

  // a skewed convex flux moves the rest position off center; the sign and
  // slope conditions are checked about the shifted rest position
  const auto poly = make_convex({0.0, 0.0, 0.5, 0.1}, 1.0,
                                -1.2679491924311228);
  const auto ss = steady_state(poly, 0.1, ell);
  const auto rp = drift_stability_check(poly, 0.1, ell);
  CHECK(rp.xi_star == doctest::Approx(ss.xi_star).epsilon(1e-9));
  CHECK(std::abs(rp.xi_star + 0.211580) < 1e-3);
  CHECK(rp.sign_condition);
  CHECK(rp.derivative_negative);
  CHECK(rp.beta > 0.0);
}
