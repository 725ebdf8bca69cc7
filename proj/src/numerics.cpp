#include "metastab/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>
#include <sstream>

#include "metastab/errors.hpp"

namespace metastab {

namespace {

std::string fmt_bracket(double a, double fa, double b, double fb) {
  std::ostringstream os;
  os << "f(" << a << ")=" << fa << ", f(" << b << ")=" << fb;
  return os.str();
}

}  // namespace

double find_root(const real_fn& f, double a, double b,
                 const root_options& opt) {
  double fa = f(a);
  double fb = f(b);
  if (fa == 0.0) return a;
  if (fb == 0.0) return b;
  if (std::signbit(fa) == std::signbit(fb)) {
    throw numerical_error("find_root: not a bracket: " +
                          fmt_bracket(a, fa, b, fb));
  }
  double width_prev = std::abs(b - a);
  for (int it = 0; it < opt.max_iter; ++it) {
    const double mid = 0.5 * (a + b);
    const double tol =
        std::max(opt.abs_tol, opt.rel_tol * std::abs(mid)) +
        2.0 * std::numeric_limits<double>::epsilon() * std::abs(mid);
    if (std::abs(b - a) <= 2.0 * tol) return mid;

    // Secant through the bracket endpoints; fall back to bisection when
    // the step leaves the bracket or stops making real progress.
    double x = mid;
    const double denom = fb - fa;
    if (denom != 0.0) {
      const double xs = b - fb * (b - a) / denom;
      const double lo = std::min(a, b), hi = std::max(a, b);
      const bool inside = xs > lo + 0.01 * tol && xs < hi - 0.01 * tol;
      if (inside && std::abs(b - a) <= 0.75 * width_prev) x = xs;
    }
    width_prev = std::abs(b - a);

    const double fx = f(x);
    if (fx == 0.0) return x;
    if (std::signbit(fx) == std::signbit(fa)) {
      a = x;
      fa = fx;
    } else {
      b = x;
      fb = fx;
    }
  }
  throw numerical_error("find_root: no convergence after " +
                        std::to_string(opt.max_iter) + " iterations, " +
                        fmt_bracket(a, fa, b, fb));
}

bool expand_bracket(const real_fn& f, double& a, double& b,
                    double lo_limit, double hi_limit, int max_steps) {
  if (!(a < b)) throw validation_error("expand_bracket: need a < b");
  double fa = f(a);
  double fb = f(b);
  for (int it = 0; it < max_steps; ++it) {
    if (std::signbit(fa) != std::signbit(fb) || fa == 0.0 || fb == 0.0)
      return true;
    const double mid = 0.5 * (a + b);
    const double half = (b - a);  // doubles the width each round
    const double na = std::max(lo_limit, mid - half);
    const double nb = std::min(hi_limit, mid + half);
    if (na == a && nb == b) return false;  // pinned at both limits
    if (na != a) {
      a = na;
      fa = f(a);
    }
    if (nb != b) {
      b = nb;
      fb = f(b);
    }
  }
  return std::signbit(fa) != std::signbit(fb);
}

namespace {

// Gauss-Kronrod 7-15 nodes and weights (positive half; node 0 last).
constexpr double kXgk[8] = {
    0.9914553711208126, 0.9491079123427585, 0.8648644233597691,
    0.7415311855993944, 0.5860872354676911, 0.4058451513773972,
    0.2077849550078985, 0.0};
constexpr double kWgk[8] = {
    0.02293532201052922, 0.06309209262997855, 0.1047900103222502,
    0.1406532597155259,  0.1690047266392679,  0.1903505780647854,
    0.2044329400752989,  0.2094821410847278};
constexpr double kWg[4] = {0.1294849661688697, 0.2797053914892767,
                           0.3818300505051189, 0.4179591836734694};

struct panel {
  double a, b, value, error;
  bool operator<(const panel& o) const { return error < o.error; }
};

panel gk15(const real_fn& f, double a, double b) {
  const double c = 0.5 * (a + b);
  const double h = 0.5 * (b - a);
  double resk = kWgk[7] * f(c);
  double resg = kWg[3] * f(c);
  for (int j = 0; j < 7; ++j) {
    const double dx = h * kXgk[j];
    const double fsum = f(c - dx) + f(c + dx);
    resk += kWgk[j] * fsum;
    if (j % 2 == 1) resg += kWg[j / 2] * fsum;
  }
  panel p;
  p.a = a;
  p.b = b;
  p.value = resk * h;
  // QUADPACK-style conservative error estimate.
  const double diff = std::abs((resk - resg) * h);
  p.error = std::min(diff, std::pow(200.0 * diff, 1.5));
  if (!std::isfinite(p.value))
    throw numerical_error("integrate: non-finite integrand value in [" +
                          std::to_string(a) + ", " + std::to_string(b) + "]");
  return p;
}

double adaptive_gk(const real_fn& f, const std::vector<panel>& seed,
                   const quadrature_options& opt) {
  std::priority_queue<panel> heap;
  double total = 0.0, err = 0.0;
  for (const panel& p : seed) {
    total += p.value;
    err += p.error;
    heap.push(p);
  }
  int n = static_cast<int>(seed.size());
  while (err > std::max(opt.abs_tol, opt.rel_tol * std::abs(total))) {
    if (n >= opt.max_intervals)
      throw numerical_error(
          "integrate: interval budget exhausted (error " +
          std::to_string(err) + ", value " + std::to_string(total) + ")");
    const panel worst = heap.top();
    heap.pop();
    const double m = 0.5 * (worst.a + worst.b);
    if (m <= worst.a || m >= worst.b) {
      // Interval at machine resolution: accept its estimate as-is.
      if (heap.empty()) break;
      err -= worst.error;  // stop re-splitting it
      continue;
    }
    const panel left = gk15(f, worst.a, m);
    const panel right = gk15(f, m, worst.b);
    total += left.value + right.value - worst.value;
    err += left.error + right.error - worst.error;
    heap.push(left);
    heap.push(right);
    ++n;
  }
  return total;
}

}  // namespace

double integrate(const real_fn& f, double a, double b,
                 const quadrature_options& opt) {
  if (a == b) return 0.0;
  if (a > b) return -integrate(f, b, a, opt);
  return adaptive_gk(f, {gk15(f, a, b)}, opt);
}

double integrate_split(const real_fn& f, double a, double b,
                       const std::vector<double>& breakpoints,
                       const quadrature_options& opt) {
  if (a == b) return 0.0;
  if (a > b) return -integrate_split(f, b, a, breakpoints, opt);
  std::vector<double> pts{a};
  for (double p : breakpoints)
    if (p > a && p < b) pts.push_back(p);
  pts.push_back(b);
  std::sort(pts.begin(), pts.end());
  std::vector<panel> seed;
  for (size_t i = 0; i + 1 < pts.size(); ++i)
    if (pts[i + 1] > pts[i]) seed.push_back(gk15(f, pts[i], pts[i + 1]));
  return adaptive_gk(f, seed, opt);
}

std::vector<double> solve_tridiagonal(const std::vector<double>& sub,
                                      const std::vector<double>& diag,
                                      const std::vector<double>& sup,
                                      const std::vector<double>& rhs) {
  const size_t n = diag.size();
  if (sub.size() != n - 1 || sup.size() != n - 1 || rhs.size() != n)
    throw validation_error("solve_tridiagonal: inconsistent sizes");
  std::vector<double> c(n - 1), d(n), x(n);
  double piv = diag[0];
  if (piv == 0.0) throw numerical_error("solve_tridiagonal: zero pivot");
  c[0] = sup[0] / piv;
  d[0] = rhs[0] / piv;
  for (size_t i = 1; i < n; ++i) {
    piv = diag[i] - sub[i - 1] * c[i - 1];
    if (piv == 0.0) throw numerical_error("solve_tridiagonal: zero pivot");
    if (i < n - 1) c[i] = sup[i] / piv;
    d[i] = (rhs[i] - sub[i - 1] * d[i - 1]) / piv;
  }
  x[n - 1] = d[n - 1];
  for (size_t i = n - 1; i-- > 0;) x[i] = d[i] - c[i] * x[i + 1];
  return x;
}

line_fit fit_line(const std::vector<double>& xs,
                  const std::vector<double>& ys) {
  const size_t n = xs.size();
  if (n != ys.size() || n < 2)
    throw validation_error("fit_line: need two or more matched points");
  double sx = 0, sy = 0;
  for (size_t i = 0; i < n; ++i) {
    sx += xs[i];
    sy += ys[i];
  }
  const double mx = sx / n, my = sy / n;
  double sxx = 0, sxy = 0;
  for (size_t i = 0; i < n; ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
  }
  if (sxx == 0.0) throw validation_error("fit_line: degenerate abscissae");
  line_fit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double ss_res = 0, ss_tot = 0;
  for (size_t i = 0; i < n; ++i) {
    const double e = ys[i] - (fit.intercept + fit.slope * xs[i]);
    ss_res += e * e;
    ss_tot += (ys[i] - my) * (ys[i] - my);
  }
  fit.residual = ss_tot > 0 ? std::sqrt(ss_res / ss_tot)
                            : (ss_res > 0 ? 1.0 : 0.0);
  return fit;
}

monotone_cubic::monotone_cubic(std::vector<double> xs, std::vector<double> ys)
    : xs_(std::move(xs)), ys_(std::move(ys)) {
  const size_t n = xs_.size();
  if (n < 2 || ys_.size() != n)
    throw validation_error("monotone_cubic: need two or more matched points");
  for (size_t i = 0; i + 1 < n; ++i)
    if (!(xs_[i] < xs_[i + 1]))
      throw validation_error("monotone_cubic: abscissae must increase");

  std::vector<double> d(n - 1);
  for (size_t i = 0; i + 1 < n; ++i)
    d[i] = (ys_[i + 1] - ys_[i]) / (xs_[i + 1] - xs_[i]);

  slopes_.assign(n, 0.0);
  slopes_[0] = d[0];
  slopes_[n - 1] = d[n - 2];
  for (size_t i = 1; i + 1 < n; ++i)
    slopes_[i] = (d[i - 1] * d[i] > 0.0) ? 0.5 * (d[i - 1] + d[i]) : 0.0;

  // Fritsch-Carlson limiter: clamp slopes into the monotone region.
  for (size_t i = 0; i + 1 < n; ++i) {
    if (d[i] == 0.0) {
      slopes_[i] = slopes_[i + 1] = 0.0;
      continue;
    }
    const double alpha = slopes_[i] / d[i];
    const double beta = slopes_[i + 1] / d[i];
    const double s = alpha * alpha + beta * beta;
    if (s > 9.0) {
      const double tau = 3.0 / std::sqrt(s);
      slopes_[i] = tau * alpha * d[i];
      slopes_[i + 1] = tau * beta * d[i];
    }
  }
}

int monotone_cubic::interval(double x) const {
  const auto it = std::upper_bound(xs_.begin(), xs_.end(), x);
  int i = static_cast<int>(it - xs_.begin()) - 1;
  return std::clamp(i, 0, static_cast<int>(xs_.size()) - 2);
}

double monotone_cubic::operator()(double x) const {
  const int i = interval(x);
  const double h = xs_[i + 1] - xs_[i];
  const double t = (x - xs_[i]) / h;
  const double t2 = t * t, t3 = t2 * t;
  const double h00 = 2 * t3 - 3 * t2 + 1;
  const double h10 = t3 - 2 * t2 + t;
  const double h01 = -2 * t3 + 3 * t2;
  const double h11 = t3 - t2;
  return h00 * ys_[i] + h10 * h * slopes_[i] + h01 * ys_[i + 1] +
         h11 * h * slopes_[i + 1];
}

double monotone_cubic::derivative(double x) const {
  const int i = interval(x);
  const double h = xs_[i + 1] - xs_[i];
  const double t = (x - xs_[i]) / h;
  const double t2 = t * t;
  const double dh00 = (6 * t2 - 6 * t) / h;
  const double dh10 = 3 * t2 - 4 * t + 1;
  const double dh01 = (-6 * t2 + 6 * t) / h;
  const double dh11 = 3 * t2 - 2 * t;
  return dh00 * ys_[i] + dh10 * slopes_[i] + dh01 * ys_[i + 1] +
         dh11 * slopes_[i + 1];
}

namespace {

// Cash-Karp embedded 4(5) coefficients.
constexpr double kA2[] = {1.0 / 5};
constexpr double kA3[] = {3.0 / 40, 9.0 / 40};
constexpr double kA4[] = {3.0 / 10, -9.0 / 10, 6.0 / 5};
constexpr double kA5[] = {-11.0 / 54, 5.0 / 2, -70.0 / 27, 35.0 / 27};
constexpr double kA6[] = {1631.0 / 55296, 175.0 / 512, 575.0 / 13824,
                          44275.0 / 110592, 253.0 / 4096};
constexpr double kB5[] = {37.0 / 378,  0.0, 250.0 / 621,
                          125.0 / 594, 0.0, 512.0 / 1771};
constexpr double kB4[] = {2825.0 / 27648,  0.0,           18575.0 / 48384,
                          13525.0 / 55296, 277.0 / 14336, 1.0 / 4};

}  // namespace

ode_solution integrate_ode(
    const std::function<void(double, const std::vector<double>&,
                             std::vector<double>&)>& rhs,
    std::vector<double> y0, double t0, double t1, const ode_options& opt,
    const std::function<bool(double, const std::vector<double>&)>& stop_when) {
  const size_t n = y0.size();
  ode_solution sol;
  sol.times.push_back(t0);
  sol.states.push_back(y0);
  if (t1 <= t0) return sol;

  std::vector<std::vector<double>> k(6, std::vector<double>(n));
  std::vector<double> y = std::move(y0), ytmp(n), y5(n), y4(n);

  double t = t0;
  double dt = opt.initial_dt > 0 ? opt.initial_dt : (t1 - t0) * 1e-6;
  if (opt.max_dt > 0) dt = std::min(dt, opt.max_dt);

  const int max_steps = 50'000'000;
  for (int step = 0; step < max_steps && t < t1; ++step) {
    dt = std::min(dt, t1 - t);
    rhs(t, y, k[0]);
    auto stage = [&](int s, const double* a, double c) {
      for (size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int j = 0; j < s; ++j) acc += a[j] * k[j][i];
        ytmp[i] = y[i] + dt * acc;
      }
      rhs(t + c * dt, ytmp, k[s]);
    };
    stage(1, kA2, 1.0 / 5);
    stage(2, kA3, 3.0 / 10);
    stage(3, kA4, 3.0 / 5);
    stage(4, kA5, 1.0);
    stage(5, kA6, 7.0 / 8);

    double err_ratio = 0.0;
    for (size_t i = 0; i < n; ++i) {
      double acc5 = 0.0, acc4 = 0.0;
      for (int j = 0; j < 6; ++j) {
        acc5 += kB5[j] * k[j][i];
        acc4 += kB4[j] * k[j][i];
      }
      y5[i] = y[i] + dt * acc5;
      y4[i] = y[i] + dt * acc4;
      const double scale =
          opt.abs_tol + opt.rel_tol * std::max(std::abs(y[i]), std::abs(y5[i]));
      err_ratio = std::max(err_ratio, std::abs(y5[i] - y4[i]) / scale);
    }

    if (err_ratio <= 1.0) {
      t += dt;
      y = y5;
      sol.times.push_back(t);
      sol.states.push_back(y);
      if (stop_when && stop_when(t, y)) return sol;
    }
    const double grow =
        err_ratio > 0 ? 0.9 * std::pow(err_ratio, -0.2) : 5.0;
    dt *= std::clamp(grow, 0.2, 5.0);
    if (opt.max_dt > 0) dt = std::min(dt, opt.max_dt);
    if (dt <= std::numeric_limits<double>::min() * 1e4)
      throw numerical_error("integrate_ode: step size collapsed at t=" +
                            std::to_string(t));
  }
  if (t < t1)
    throw numerical_error("integrate_ode: step budget exhausted at t=" +
                          std::to_string(t));
  return sol;
}

}  // namespace metastab
