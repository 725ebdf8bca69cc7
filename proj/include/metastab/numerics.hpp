#pragma once

#include <functional>
#include <vector>

namespace metastab {

using real_fn = std::function<double(double)>;

struct root_options {
  double rel_tol = 1e-12;   // on the root location
  double abs_tol = 0.0;     // absolute floor, for roots near zero
  int max_iter = 200;
};

// Root of f on a given bracket [a,b] with f(a)*f(b) <= 0, by a hybrid of
// bisection and secant steps: the secant step is taken when it lands
// safely inside the bracket and shrinks it, otherwise bisect. Robust for
// the monotone functions this project solves, with secant-level speed.
double find_root(const real_fn& f, double a, double b,
                 const root_options& opt = {});

// Expand [a,b] geometrically about its midpoint (factor 2 per step, at
// most max_steps) until f changes sign. Returns false if no sign change
// was found. lo_limit/hi_limit clip the expansion.
bool expand_bracket(const real_fn& f, double& a, double& b,
                    double lo_limit, double hi_limit, int max_steps = 60);

struct quadrature_options {
  double rel_tol = 1e-11;
  double abs_tol = 1e-300;
  int max_intervals = 20000;
};

// Adaptive Gauss-Kronrod 7-15 on [a,b]. Orientation-aware: a > b gives
// the negated integral.
double integrate(const real_fn& f, double a, double b,
                 const quadrature_options& opt = {});

// Same, but with interior breakpoints pre-seeded (integrand kinks,
// near-singular endpoints). Breakpoints outside (a,b) are ignored.
double integrate_split(const real_fn& f, double a, double b,
                       const std::vector<double>& breakpoints,
                       const quadrature_options& opt = {});

// Thomas algorithm for a tridiagonal system. sub is the subdiagonal
// (n-1 entries), diag the diagonal (n), sup the superdiagonal (n-1).
// No pivoting: every system in this project is diagonally dominant.
std::vector<double> solve_tridiagonal(const std::vector<double>& sub,
                                      const std::vector<double>& diag,
                                      const std::vector<double>& sup,
                                      const std::vector<double>& rhs);

struct line_fit {
  double slope = 0.0;
  double intercept = 0.0;
  // sqrt(SS_res / SS_tot): 0 for an exact line, ~1 for no linear trend.
  double residual = 0.0;
};

line_fit fit_line(const std::vector<double>& xs,
                  const std::vector<double>& ys);

// Monotone cubic interpolant (Fritsch-Carlson slopes). Preserves the
// monotonicity of the data on each interval, which the drift integrator
// relies on: an overshooting interpolant could flip the sign of theta.
class monotone_cubic {
 public:
  monotone_cubic() = default;
  monotone_cubic(std::vector<double> xs, std::vector<double> ys);

  double operator()(double x) const;
  double derivative(double x) const;
  double x_min() const { return xs_.front(); }
  double x_max() const { return xs_.back(); }

 private:
  int interval(double x) const;
  std::vector<double> xs_, ys_, slopes_;
};

struct ode_options {
  double rel_tol = 1e-9;
  double abs_tol = 1e-12;
  double initial_dt = 0.0;  // 0: pick automatically
  double max_dt = 0.0;      // 0: unbounded
};

struct ode_solution {
  std::vector<double> times;
  std::vector<std::vector<double>> states;
};

// Adaptive Cash-Karp RK45 for small systems. rhs(t, y, dydt).
// stop_when, if set, ends integration once it returns true (checked on
// accepted steps).
ode_solution integrate_ode(
    const std::function<void(double, const std::vector<double>&,
                             std::vector<double>&)>& rhs,
    std::vector<double> y0, double t0, double t1,
    const ode_options& opt = {},
    const std::function<bool(double, const std::vector<double>&)>& stop_when =
        nullptr);

}  // namespace metastab
