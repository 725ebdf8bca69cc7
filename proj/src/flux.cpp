#include "metastab/flux.hpp"

#include <cmath>
#include <limits>

#include "metastab/errors.hpp"
#include "metastab/numerics.hpp"

namespace metastab {

double flux_model::raw_f(double u) const {
  switch (kind_) {
    case kind::burgers:
      return 0.5 * u * u;
    case kind::abs_value:
      return std::abs(u);
    case kind::poly: {
      double acc = 0.0;
      for (size_t k = coeffs_.size(); k-- > 0;) acc = acc * u + coeffs_[k];
      return acc;
    }
  }
  return 0.0;
}

double flux_model::f(double u) const { return raw_f(u) - f_shift_; }

double flux_model::df(double u) const {
  switch (kind_) {
    case kind::burgers:
      return u;
    case kind::abs_value:
      return u > 0 ? 1.0 : (u < 0 ? -1.0 : 0.0);
    case kind::poly: {
      double acc = 0.0;
      for (size_t k = coeffs_.size(); k-- > 1;)
        acc = acc * u + static_cast<double>(k) * coeffs_[k];
      return acc;
    }
  }
  return 0.0;
}

double flux_model::d2f(double u) const {
  switch (kind_) {
    case kind::burgers:
      return 1.0;
    case kind::abs_value:
      throw validation_error("flux 'abs' is nonsmooth: no second derivative");
    case kind::poly: {
      double acc = 0.0;
      for (size_t k = coeffs_.size(); k-- > 2;)
        acc = acc * u + static_cast<double>(k * (k - 1)) * coeffs_[k];
      return acc;
    }
  }
  return 0.0;
}

double flux_model::fdiff(double a, double b) const {
  switch (kind_) {
    case kind::burgers:
      return 0.5 * (a - b) * (a + b);
    case kind::abs_value:
      if (a >= 0 && b >= 0) return a - b;
      if (a <= 0 && b <= 0) return b - a;
      return std::abs(a) - std::abs(b);  // one rounded op, already tight
    case kind::poly: {
      // sum_k c_k (a^k - b^k) = (a-b) sum_k c_k sum_{j<k} a^j b^{k-1-j};
      // degrees stay small, so the inner sums are built directly.
      double total = 0.0;
      for (size_t k = 1; k < coeffs_.size(); ++k) {
        if (coeffs_[k] == 0.0) continue;
        double inner = 0.0;
        double aj = 1.0;
        for (size_t j = 0; j < k; ++j) {
          inner += aj * std::pow(b, static_cast<double>(k - 1 - j));
          aj *= a;
        }
        total += coeffs_[k] * inner;
      }
      return (a - b) * total;
    }
  }
  return 0.0;
}

double flux_model::fdiff_near(double u, double h) const {
  switch (kind_) {
    case kind::burgers:
      return -h * (u + 0.5 * h);
    case kind::abs_value:
      if (u >= 0 && u + h >= 0) return -h;
      if (u <= 0 && u + h <= 0) return h;
      return std::abs(u) - std::abs(u + h);
    case kind::poly: {
      // Taylor shift: f(u + h) - f(u) = sum_m f^(m)(u) h^m / m!, a finite
      // sum for a polynomial. Coefficients by repeated synthetic division.
      std::vector<double> c = coeffs_;
      const size_t n = c.size();
      for (size_t m = 0; m + 1 < n; ++m)
        for (size_t k = n - 1; k > m; --k) c[k - 1] += c[k] * u;
      double acc = 0.0;  // Horner in h over the shifted tail, degree >= 1
      for (size_t k = n; k-- > 1;) acc = acc * h + c[k];
      return -h * acc;
    }
  }
  return 0.0;
}

check_report flux_model::validate() const {
  check_report rep;
  rep.add("ordering u_plus < u_star < u_minus",
          u_plus_ < u_star_ && u_star_ < u_minus_,
          std::min(u_star_ - u_plus_, u_minus_ - u_star_));
  rep.add("df(u_plus) < 0 < df(u_minus)",
          df(u_plus_) < 0.0 && df(u_minus_) > 0.0,
          std::min(-df(u_plus_), df(u_minus_)));
  if (smooth()) {
    rep.add("sonic point |df(u_star)| <= 1e-12", std::abs(df(u_star_)) <= 1e-12,
            std::abs(df(u_star_)));
  } else {
    rep.add("sonic point is the kink", u_star_ == 0.0, 0.0,
            "nonsmooth model, f' jumps across u_star");
  }
  const double bdiff = std::abs(f(u_plus_) - f(u_minus_));
  rep.add("equal boundary fluxes |f(u_plus)-f(u_minus)| <= 1e-12",
          bdiff <= 1e-12, bdiff);
  rep.add("normalized f(u_star) = 0", std::abs(f(u_star_)) <= 1e-14,
          std::abs(f(u_star_)));
  if (smooth()) {
    rep.add("convexity c0 > 0", c0_ > 0.0, c0_);
  } else {
    rep.add("convexity c0 > 0", true, 0.0,
            "nonsmooth model, c0 flagged 0 and smoothness absent");
  }
  return rep;
}

flux_model make_burgers(double u_minus) {
  if (!(u_minus > 0)) throw validation_error("make_burgers: need u_minus > 0");
  flux_model m;
  m.kind_ = flux_model::kind::burgers;
  m.u_minus_ = u_minus;
  m.u_plus_ = -u_minus;
  m.u_star_ = 0.0;
  m.f_shift_ = 0.0;
  m.f_boundary_ = 0.5 * u_minus * u_minus;
  m.c0_ = 1.0;
  m.name_ = "burgers";
  return m;
}

flux_model make_abs(double u_minus) {
  if (!(u_minus > 0)) throw validation_error("make_abs: need u_minus > 0");
  flux_model m;
  m.kind_ = flux_model::kind::abs_value;
  m.u_minus_ = u_minus;
  m.u_plus_ = -u_minus;
  m.u_star_ = 0.0;
  m.f_shift_ = 0.0;
  m.f_boundary_ = u_minus;
  m.c0_ = 0.0;
  m.name_ = "abs";
  return m;
}

flux_model make_convex(const std::vector<double>& coeffs, double u_minus,
                       double u_plus) {
  if (coeffs.size() < 3)
    throw validation_error("make_convex: need a polynomial of degree >= 2");
  if (!(u_plus < u_minus))
    throw validation_error("make_convex: need u_plus < u_minus");
  flux_model m;
  m.kind_ = flux_model::kind::poly;
  m.coeffs_ = coeffs;
  m.u_minus_ = u_minus;
  m.u_plus_ = u_plus;
  m.name_ = "poly";

  const double fm = m.raw_f(u_minus);
  const double fp = m.raw_f(u_plus);
  if (std::abs(fp - fm) > 1e-10 * std::max(1.0, std::abs(fm)))
    throw validation_error("make_convex: f(u_plus) != f(u_minus), diff " +
                           std::to_string(fp - fm));

  // Convexity bound by dense sampling; symbolic minimization is overkill
  // for a validation constant.
  const int n_sample = 10000;
  double c0 = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= n_sample; ++i) {
    const double u = u_plus + (u_minus - u_plus) * i / n_sample;
    c0 = std::min(c0, m.d2f(u));
  }
  if (!(c0 > 0))
    throw validation_error("make_convex: polynomial not strictly convex, "
                           "min f'' = " + std::to_string(c0));
  m.c0_ = c0;

  if (!(m.df(u_plus) < 0 && m.df(u_minus) > 0))
    throw validation_error("make_convex: f' does not change sign on "
                           "[u_plus, u_minus]");
  m.u_star_ = find_root([&m](double u) { return m.df(u); }, u_plus, u_minus);
  m.f_shift_ = m.raw_f(m.u_star_);
  m.f_boundary_ = 0.5 * (fm + fp) - m.f_shift_;
  return m;
}

flux_model make_flux(const std::string& name,
                     const std::vector<double>& coeffs, double u_minus,
                     double u_plus) {
  if (name == "burgers") return make_burgers(u_minus);
  if (name == "abs") return make_abs(u_minus);
  if (name == "poly") return make_convex(coeffs, u_minus, u_plus);
  throw validation_error("unknown flux model '" + name + "'");
}

}  // namespace metastab
