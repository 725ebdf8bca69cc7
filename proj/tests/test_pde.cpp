#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "metastab/errors.hpp"
#include "metastab/flux.hpp"
#include "metastab/manifold.hpp"
#include "metastab/pde.hpp"
#include "metastab/reduced.hpp"

using namespace metastab;

namespace {

double max_dev(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// decreasing initial datum compatible with u_pm = (1, -1); its slope
// steepens into an interior layer near x = 1 - sqrt(2)
double parabola(double x) { return 0.5 * (x * x - 2.0 * x - 1.0); }

}  // namespace

TEST_CASE("uniform fields and node suggestions validate their inputs") {
  const flux_model burgers = make_burgers(1.0);

  const grid_field f = make_uniform_field(1.0, 5, [](double x) { return x; },
                                          2.5);
  CHECK(f.x.size() == 5);
  CHECK(f.x.front() == -1.0);
  CHECK(f.x.back() == 1.0);
  CHECK(f.x[2] == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(f.values[1] == doctest::Approx(-0.5));
  CHECK(f.time == 2.5);

  CHECK(suggested_nodes(0.1, 1.0) == 641);
  CHECK(suggested_nodes(0.07, 1.0) == 916);
  CHECK_THROWS_AS(suggested_nodes(0.0, 1.0), validation_error);
  CHECK_THROWS_AS(suggested_nodes(0.1, -1.0), validation_error);

  CHECK_THROWS_AS(make_uniform_field(1.0, 2, [](double) { return 0.0; }),
                  validation_error);
  CHECK_THROWS_AS(make_uniform_field(-1.0, 5, [](double) { return 0.0; }),
                  validation_error);
  CHECK_THROWS_AS(make_uniform_field(1.0, 5, nullptr), validation_error);

  // sampled profile carries the boundary data at the walls
  const grid_field p = profile_field(burgers, 0.2, 0.1, 1.0, 321);
  CHECK(p.values.front() == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(p.values.back() == doctest::Approx(-1.0).epsilon(1e-9));
  CHECK(std::is_sorted(p.values.rbegin(), p.values.rend()));
}

TEST_CASE("constant fields are fixed points of the step") {
  const flux_model burgers = make_burgers(1.0);
  for (double c : {0.0, 0.37, -0.8}) {
    grid_field f =
        make_uniform_field(1.0, 257, [c](double) { return c; });
    const grid_field g = step_viscous(f, 1e-3, burgers, 0.1);
    CHECK(max_dev(f.values, g.values) <= 1e-14);
    CHECK(g.time == doctest::Approx(1e-3));
  }
}

TEST_CASE("sampled equilibrium profile is numerically steady") {
  const flux_model burgers = make_burgers(1.0);
  grid_field f = profile_field(burgers, 0.0, 0.1, 1.0, 4097);
  const std::vector<double> ref = f.values;
  const double dt = stable_dt(burgers, f);
  for (int k = 0; k < 1000; ++k) f = step_viscous(f, dt, burgers, 0.1);
  CHECK(max_dev(f.values, ref) <= 1e-6);  // measured 2.9e-7
}

TEST_CASE("grid refinement on the steady scenario converges at second order") {
  const flux_model burgers = make_burgers(1.0);
  std::vector<double> errs;
  for (int n : {1025, 2049, 4097}) {
    grid_field f = profile_field(burgers, 0.0, 0.1, 1.0, n);
    const std::vector<double> ref = f.values;
    const pde_run_result r = run_viscous(f, burgers, 0.1, 0.5, {0.5});
    errs.push_back(max_dev(r.snapshots[0].values, ref));
  }
  // measured 5.0e-6 / 1.25e-6 / 3.1e-7: ratios 4.000 and 4.000
  CHECK(errs[0] / errs[1] >= 3.0);
  CHECK(errs[0] / errs[1] <= 5.0);
  CHECK(errs[1] / errs[2] >= 3.0);
  CHECK(errs[1] / errs[2] <= 5.0);
}

TEST_CASE("interior mass update telescopes to the face fluxes exactly") {
  const flux_model burgers = make_burgers(1.0);
  const int n = 641;
  const double h = 2.0 / (n - 1);
  const double eps = 0.1;
  grid_field f = make_uniform_field(1.0, n, parabola);
  const double dt = stable_dt(burgers, f);
  auto face = [&](const std::vector<double>& u, int i) {
    const double a =
        std::max(std::abs(burgers.df(u[i])), std::abs(burgers.df(u[i + 1])));
    const double nu = std::max(0.0, 0.5 * a - eps / h);
    return 0.5 * (burgers.f(u[i]) + burgers.f(u[i + 1])) -
           nu * (u[i + 1] - u[i]);
  };
  double worst = 0.0;
  for (int k = 0; k < 50; ++k) {
    const grid_field g = step_viscous(f, dt, burgers, eps);
    double mass = 0.0;
    for (int i = 1; i + 1 < n; ++i) mass += (g.values[i] - f.values[i]) * h;
    // conservation form: interior change balances the end faces plus the
    // trapezoidal diffusion flux through the first and last intervals
    const double wl =
        (f.values[0] + g.values[0]) - (f.values[1] + g.values[1]);
    const double wr = (f.values[n - 1] + g.values[n - 1]) -
                      (f.values[n - 2] + g.values[n - 2]);
    const double budget = -dt * (face(f.values, n - 2) - face(f.values, 0)) +
                          eps * dt / (2.0 * h) * (wl + wr);
    worst = std::max(worst, std::abs(mass - budget));
    f = g;
  }
  CHECK(worst <= 1e-12);  // identity up to roundoff, measured 1.3e-16
}

TEST_CASE("mass rate matches the boundary flux budget within scheme slack") {
  const flux_model burgers = make_burgers(1.0);
  std::vector<double> worsts;
  for (int n : {641, 1281}) {
    const double h = 2.0 / (n - 1);
    grid_field f = make_uniform_field(1.0, n, parabola);
    const double dt = stable_dt(burgers, f);
    auto dxl = [&](const std::vector<double>& u) {
      return (-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * h);
    };
    auto dxr = [&](const std::vector<double>& u) {
      return (3.0 * u[n - 1] - 4.0 * u[n - 2] + u[n - 3]) / (2.0 * h);
    };
    double worst = 0.0;
    for (int k = 0; k < 200; ++k) {
      const grid_field g = step_viscous(f, dt, burgers, 0.1);
      double dmass = 0.0;
      for (int i = 0; i < n; ++i) dmass += (g.values[i] - f.values[i]) * h;
      const double budget =
          0.1 * 0.5 *
              (dxr(f.values) + dxr(g.values) - dxl(f.values) -
               dxl(g.values)) -
          (burgers.f(f.values[n - 1]) - burgers.f(f.values[0]));
      worst = std::max(worst, std::abs(dmass / dt - budget));
      f = g;
    }
    worsts.push_back(worst);
  }
  // the frozen walls force a starting boundary layer, so the budget error
  // is dominated by the one-sided derivatives there; measured 1.1e-3 at
  // n=641 shrinking 2.7x per halving
  CHECK(worsts[0] <= 2.5e-3);
  CHECK(worsts[1] <= worsts[0] / 2.0);
}

TEST_CASE("step rejects oversized dt and malformed fields") {
  const flux_model burgers = make_burgers(1.0);
  grid_field f = profile_field(burgers, 0.0, 0.1, 1.0, 257);
  const double limit = stable_dt(burgers, f);

  CHECK_NOTHROW(step_viscous(f, limit, burgers, 0.1));
  CHECK_THROWS_WITH_AS(step_viscous(f, 2.0 * limit, burgers, 0.1),
                       doctest::Contains("use dt <="), validation_error);
  CHECK_THROWS_AS(step_viscous(f, 0.0, burgers, 0.1), validation_error);
  CHECK_THROWS_AS(step_viscous(f, -1e-3, burgers, 0.1), validation_error);
  CHECK_THROWS_AS(step_viscous(f, limit, burgers, 0.0), validation_error);
  CHECK_THROWS_AS(step_viscous(f, limit, burgers, -0.1), validation_error);

  grid_field bad = f;
  bad.values.pop_back();
  CHECK_THROWS_AS(step_viscous(bad, limit, burgers, 0.1), validation_error);
  bad = f;
  bad.x[5] += 1e-4;  // non-uniform
  CHECK_THROWS_AS(step_viscous(bad, limit, burgers, 0.1), validation_error);
  bad = f;
  bad.values[3] = std::nan("");
  CHECK_THROWS_AS(step_viscous(bad, limit, burgers, 0.1), validation_error);
  bad.x.clear();
  bad.values.clear();
  CHECK_THROWS_AS(step_viscous(bad, limit, burgers, 0.1), validation_error);
}

TEST_CASE("shock location finds the sonic crossing nearest the steepest "
          "slope") {
  const flux_model burgers = make_burgers(1.0);
  const int n = 641;
  const double dx = 2.0 / (n - 1);

  // sampled sharp step at 0.2
  const grid_field step = make_uniform_field(
      1.0, n, [](double x) { return x < 0.2 ? 1.0 : -1.0; });
  auto pos = locate_shock(step, burgers);
  REQUIRE(pos.has_value());
  CHECK(std::abs(*pos - 0.2) <= dx);

  // matched profiles cross the sonic value at their layer position
  for (double xi : {-0.4, 0.2, 0.5}) {
    const grid_field p = profile_field(burgers, xi, 0.1, 1.0, n);
    auto q = locate_shock(p, burgers);
    REQUIRE(q.has_value());
    CHECK(std::abs(*q - xi) <= dx);
  }

  // symmetric equilibrium crosses at the center
  const grid_field c = profile_field(burgers, 0.0, 0.1, 1.0, n);
  auto q0 = locate_shock(c, burgers);
  REQUIRE(q0.has_value());
  CHECK(std::abs(*q0) <= dx);

  // no crossing at all
  const grid_field flat =
      make_uniform_field(1.0, n, [](double) { return 0.5; });
  CHECK_FALSE(locate_shock(flat, burgers).has_value());

  // an exact nodal hit is returned as that node
  grid_field nodal = make_uniform_field(
      1.0, 5, [](double x) { return -x; });  // node at 0 with value 0
  auto qn = locate_shock(nodal, burgers);
  REQUIRE(qn.has_value());
  CHECK(*qn == 0.0);
}

TEST_CASE("layer detector separates formation from drift") {
  const flux_model burgers = make_burgers(1.0);
  const double eps = 0.07;
  const int n = suggested_nodes(eps, 1.0);

  const grid_field smooth = make_uniform_field(1.0, n, parabola);
  CHECK_FALSE(layer_formed(smooth, burgers, eps));  // max slope 2 < 1/(4 eps)

  const grid_field sharp = profile_field(burgers, 0.0, eps, 1.0, n);
  CHECK(layer_formed(sharp, burgers, eps));

  // characteristics of the parabola cross at t = 0.5; the detector fires
  // shortly after (measured 0.52)
  const pde_run_result r = run_viscous(smooth, burgers, eps, 1.0, {});
  CHECK(r.track.layer_formed_time >= 0.45);
  CHECK(r.track.layer_formed_time <= 0.75);
}

TEST_CASE("track from an off-center profile drifts monotonically to the "
          "center") {
  const flux_model burgers = make_burgers(1.0);
  const double eps = 0.1;
  const int n = suggested_nodes(eps, 1.0);
  const grid_field f = profile_field(burgers, 0.4, eps, 1.0, n);
  const pde_run_result r = run_viscous(f, burgers, eps, 150.0, {});

  REQUIRE(r.track.times.size() >= 100);
  CHECK(r.track.method == "crossing");
  CHECK(r.track.layer_formed_time == 0.0);  // profile data starts formed
  CHECK(r.track.positions.front() == doctest::Approx(0.4).epsilon(1e-2));
  for (std::size_t i = 0; i + 1 < r.track.times.size(); ++i) {
    CHECK(r.track.times[i] < r.track.times[i + 1]);
    CHECK(r.track.positions[i + 1] <= r.track.positions[i]);  // toward 0
    CHECK(std::abs(r.track.positions[i]) < 1.0);
  }
  CHECK(r.track.positions.back() < 0.3);  // measured 0.245 at t=150

  // ground truth vs the reduced drift, fast clock t <-> slow clock eps*t
  const reduced_trajectory traj =
      integrate_drift(burgers, 0.4, eps, 1.0, eps * 150.0);
  const drift_comparison rep = compare_with_drift(r.track, traj, eps);
  CHECK(rep.sup_diff <= 0.01);  // measured 2e-4 scale on the 0.3 run
  CHECK(rep.mean_diff <= rep.sup_diff);
  CHECK(rep.points >= 100);
  CHECK(rep.window_start == doctest::Approx(0.0));
  CHECK(rep.window_end == doctest::Approx(150.0));
  CHECK(rep.velocity_sign_agreement);
}

TEST_CASE("long-time limit lands on the centered steady profile") {
  const flux_model burgers = make_burgers(1.0);
  const double eps = 0.25;
  const int n = 513;
  const grid_field f = profile_field(burgers, 0.3, eps, 1.0, n);
  const pde_run_result r = run_viscous(f, burgers, eps, 44.0, {44.0});
  const grid_field target = profile_field(burgers, 0.0, eps, 1.0, n);
  CHECK(max_dev(r.snapshots[0].values, target.values) <= 1e-3);
  CHECK(std::abs(r.track.positions.back()) <= 2.0 / (n - 1));
}

TEST_CASE("steady data leaves the track constant and matching the resting "
          "drift") {
  const flux_model burgers = make_burgers(1.0);
  const double eps = 0.1;
  const int n = suggested_nodes(eps, 1.0);
  const double dx = 2.0 / (n - 1);
  const grid_field f = profile_field(burgers, 0.0, eps, 1.0, n);
  const pde_run_result r = run_viscous(f, burgers, eps, 20.0, {});
  for (double p : r.track.positions) CHECK(std::abs(p) <= dx);

  const reduced_trajectory traj = integrate_drift(burgers, 0.0, eps, 1.0, 2.1);
  const drift_comparison rep = compare_with_drift(r.track, traj, eps);
  CHECK(rep.sup_diff <= dx);  // measured 4e-14
  CHECK(rep.velocity_sign_agreement);
}

TEST_CASE("steepening scenario forms a layer then drifts with the predicted "
          "sign") {
  const flux_model burgers = make_burgers(1.0);
  const double eps = 0.07;
  const int n = suggested_nodes(eps, 1.0);
  const double dx = 2.0 / (n - 1);
  const grid_field f = make_uniform_field(1.0, n, parabola);
  const pde_run_result r = run_viscous(f, burgers, eps, 30.0, {1.0, 15.0, 30.0});

  REQUIRE(r.snapshots.size() == 3);
  CHECK(r.snapshots[0].time == doctest::Approx(1.0));
  CHECK(r.snapshots[2].time == doctest::Approx(30.0));
  CHECK(r.snapshots[0].x == f.x);

  // values confined by the boundary data (discrete max principle)
  for (const grid_field& s : r.snapshots) {
    for (double v : s.values) {
      CHECK(v <= 1.0 + 1e-8);
      CHECK(v >= -1.0 - 1e-8);
    }
  }

  // the initial crossing sits where the datum changes sign, at 1 - sqrt(2)
  CHECK(std::abs(r.track.positions.front() - (1.0 - std::sqrt(2.0))) <= dx);

  const double t_formed = r.track.layer_formed_time;
  CHECK(t_formed >= 0.45);
  CHECK(t_formed <= 0.75);

  // after formation the layer moves right, toward the centered equilibrium,
  // at every recorded instant
  std::size_t i0 = 0;
  while (r.track.times[i0] < t_formed) ++i0;
  for (std::size_t i = i0; i + 1 < r.track.times.size(); ++i) {
    CHECK(r.track.positions[i + 1] >= r.track.positions[i]);
  }
  CHECK(r.track.positions.back() > r.track.positions[i0]);

  // drift launched from the formation position agrees in direction
  const reduced_trajectory traj = integrate_drift(
      burgers, r.track.positions[i0], eps, 1.0, eps * (30.0 - t_formed));
  const drift_comparison rep = compare_with_drift(r.track, traj, eps);
  CHECK(rep.velocity_sign_agreement);
  CHECK(rep.sup_diff <= 0.05);
}

TEST_CASE("run validates its window and snapshot times") {
  const flux_model burgers = make_burgers(1.0);
  const grid_field f = profile_field(burgers, 0.0, 0.1, 1.0, 257);
  CHECK_THROWS_AS(run_viscous(f, burgers, 0.1, 0.0, {}), validation_error);
  CHECK_THROWS_AS(run_viscous(f, burgers, 0.1, -1.0, {}), validation_error);
  CHECK_THROWS_AS(run_viscous(f, burgers, -0.1, 1.0, {}), validation_error);
  CHECK_THROWS_AS(run_viscous(f, burgers, 0.1, 1.0, {2.0}), validation_error);
  CHECK_THROWS_AS(run_viscous(f, burgers, 0.1, 1.0, {-0.5}), validation_error);
  CHECK_THROWS_AS(run_viscous(f, burgers, 0.1, 1.0, {0.5, 0.5}),
                  validation_error);
  CHECK_THROWS_AS(run_viscous(f, burgers, 0.1, 1.0, {0.8, 0.2}),
                  validation_error);
}

TEST_CASE("drift comparison rejects mismatched or disjoint inputs") {
  shock_track track;
  track.times = {0.0, 1.0, 2.0};
  track.positions = {0.1, 0.1, 0.1};
  track.layer_formed_time = 0.0;

  reduced_trajectory traj;
  traj.times = {0.0, 0.1, 0.2, 0.3};
  traj.zeta = {0.1, 0.1, 0.1, 0.1};

  CHECK_NOTHROW(compare_with_drift(track, traj, 0.1));
  CHECK_THROWS_AS(compare_with_drift(track, traj, 0.0), validation_error);

  shock_track unformed = track;
  unformed.layer_formed_time = -1.0;
  CHECK_THROWS_AS(compare_with_drift(unformed, traj, 0.1), validation_error);

  shock_track ragged = track;
  ragged.positions.pop_back();
  CHECK_THROWS_AS(compare_with_drift(ragged, traj, 0.1), validation_error);

  shock_track empty;
  empty.layer_formed_time = 0.0;
  CHECK_THROWS_AS(compare_with_drift(empty, traj, 0.1), validation_error);

  reduced_trajectory stub;
  stub.times = {0.0};
  stub.zeta = {0.1};
  CHECK_THROWS_AS(compare_with_drift(track, stub, 0.1), validation_error);

  // drift window too short to overlap two track records
  reduced_trajectory brief;
  brief.times = {0.0, 0.05};
  brief.zeta = {0.1, 0.1};
  CHECK_THROWS_AS(compare_with_drift(track, brief, 0.1), validation_error);
}
