#pragma once

#include <string>
#include <vector>

#include "metastab/report.hpp"

namespace metastab {

// Convex flux with equal boundary fluxes f(u_plus) = f(u_minus),
// entropic ordering u_plus < u_star < u_minus, and the sonic point
// normalized to f(u_star) = 0. The |u| model is admitted as the one
// nonsmooth member of the family; code that needs f'' must check
// smooth() first.
class flux_model {
 public:
  double f(double u) const;        // normalized: vanishes at u_star
  double df(double u) const;       // at the |u| kink returns 0
  double d2f(double u) const;      // throws for the nonsmooth model

  // f(a) - f(b) without cancellation. The manifold solves involve
  // kappa - f(s) where both terms are O(1) but the difference is
  // e^{-c/eps}; every such difference goes through here.
  double fdiff(double a, double b) const;

  // f(u) - f(u + h), exact in h. For h below one ulp of u the point
  // u + h is not representable, so this is the only way to evaluate the
  // layer integrand at sub-machine distances from a boundary state.
  double fdiff_near(double u, double h) const;

  double u_minus() const { return u_minus_; }
  double u_plus() const { return u_plus_; }
  double u_star() const { return u_star_; }
  double f_boundary() const { return f_boundary_; }  // f(u_plus)=f(u_minus)
  double jump() const { return u_plus_ - u_minus_; } // [[u]], negative
  double c0() const { return c0_; }                  // 0 for |u|
  bool smooth() const { return kind_ != kind::abs_value; }
  const std::string& name() const { return name_; }

  check_report validate() const;

 private:
  enum class kind { burgers, abs_value, poly };

  flux_model() = default;
  double raw_f(double u) const;  // before the f(u_star) shift

  friend flux_model make_burgers(double u_minus);
  friend flux_model make_abs(double u_minus);
  friend flux_model make_convex(const std::vector<double>& coeffs,
                                double u_minus, double u_plus);

  kind kind_ = kind::burgers;
  std::vector<double> coeffs_;  // poly only, lowest degree first
  double u_minus_ = 1.0;
  double u_plus_ = -1.0;
  double u_star_ = 0.0;
  double f_shift_ = 0.0;  // raw f(u_star), subtracted in f()
  double f_boundary_ = 0.0;
  double c0_ = 0.0;
  std::string name_;
};

flux_model make_burgers(double u_minus);
flux_model make_abs(double u_minus);

// General convex polynomial flux, coefficients lowest degree first.
// Requires f(u_plus) = f(u_minus) up to 1e-10 and strict convexity on
// [u_plus, u_minus]; u_star is located by bracketed root finding on f'.
flux_model make_convex(const std::vector<double>& coeffs, double u_minus,
                       double u_plus);

// Config-facing constructor: "burgers" / "abs" / "poly".
flux_model make_flux(const std::string& name,
                     const std::vector<double>& coeffs, double u_minus,
                     double u_plus);

}  // namespace metastab
