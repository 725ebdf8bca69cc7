#pragma once

#include <vector>

#include "metastab/flux.hpp"
#include "metastab/manifold.hpp"
#include "metastab/report.hpp"

namespace metastab {

// Advection coefficient a(x) sampled on a uniform grid over [-ell, ell],
// together with the step limit (a0_minus, a0_plus) it approaches as the
// layer sharpens. Face samples are kept separately so the conservative
// assembly does not smear jumps across two cells.
struct coefficient_field {
  std::vector<double> grid;       // all nodes, size n_interior + 2
  std::vector<double> a_values;   // coefficient at the nodes
  std::vector<double> a_faces;    // coefficient at cell midpoints, size n_interior + 1
  std::vector<double> dxi_u;      // layer-position derivative of the profile at
                                  // the nodes; empty when no profile backs the field
  double a0_minus = 0.0;
  double a0_plus = 0.0;
  double xi = 0.0;
  double epsilon = 0.0;
  double ell = 0.0;
};

// Interior node count used when a caller does not pin one explicitly.
int resolution_rule(double epsilon, double ell);

// a = f'(U) for a matched profile; also carries dU/dxi for normalization.
coefficient_field matched_coefficient(const flux_model& flux,
                                      const matched_profile& profile,
                                      int n_interior = 0);

// Sharp-interface limit: a_minus left of xi, a_plus right of it.
coefficient_field step_coefficient(double a_minus, double a_plus, double xi,
                                   double epsilon, double ell,
                                   int n_interior = 0);

// Constant coefficient; deliberately violates the sign pattern whenever
// a != 0, which makes it the negative control for hypothesis_check.
coefficient_field constant_coefficient(double a, double epsilon, double ell,
                                       int n_interior = 0);

// Discretization of L u = eps u'' - (a u)' with Dirichlet rows eliminated,
// plus M = eps * S where S is the diagonal-similarity symmetrization of L.
// The pair satisfies mu_k(M) = eps * lambda_k(L) exactly, so the spectrum
// is real by construction.
struct operator_pair {
  std::vector<double> x;                     // interior nodes
  std::vector<double> l_sub, l_diag, l_sup;  // row i acts on u_{i-1}, u_i, u_{i+1}
  std::vector<double> m_diag, m_off;         // symmetric tridiagonal M
  std::vector<double> log_weight;            // phi = w e^{+lw}, psi = w e^{-lw}
  std::vector<double> dxi_u;                 // dU/dxi at interior nodes (may be empty)
  double h = 0.0;
  double epsilon = 0.0;
  double ell = 0.0;
  double xi = 0.0;
  double a0_minus = 0.0;
  double a0_plus = 0.0;
};

operator_pair assemble_operator(const coefficient_field& coeff);

// Eigenpairs of L and of its adjoint, biorthogonally normalized:
// <psi_j, phi_k> = delta_jk, and when the field carries dU/dxi the first
// adjoint mode is scaled so that <psi_1, dU/dxi> = 1.
struct spectral_decomposition {
  std::vector<double> lambdas;             // sorted decreasing (lambda_1 first)
  std::vector<std::vector<double>> phis;   // right eigenfunctions, interior nodes
  std::vector<std::vector<double>> psis;   // adjoint eigenfunctions
  std::vector<double> x;                   // interior nodes
  double h = 0.0;
  double epsilon = 0.0;
  double ell = 0.0;
  double xi = 0.0;
  double a0_minus = 0.0;
  double a0_plus = 0.0;
  bool normalized_to_dxi_u = false;
};

spectral_decomposition eigensolve(const operator_pair& pair, int n_modes);

// Closed-form small-eps approximation of the first eigenvalue for the step
// coefficient with left width alpha and right width beta.
double lambda1_asymptotic(double a_minus, double a_plus, double alpha,
                          double beta, double epsilon);

// Piecewise-constant coefficient on (-alpha, 0) u (0, beta) with value
// a_minus / a_plus; its spectrum is the root set of a transcendental
// determinant, evaluated independently of any grid.
struct step_operator_spec {
  double a_minus = 0.0;
  double a_plus = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
  double epsilon = 0.0;
};

// Matching determinant divided by its positive exponential and
// discriminant prefactors, so the value is overflow-safe and keeps the
// roots and signs of the true determinant. Requires both discriminants
// a^2 + 4 eps lambda to be nonnegative (real characteristic rates).
double step_determinant(const step_operator_spec& spec, double lambda);

struct step_spectrum {
  std::vector<double> lambdas;  // largest first
  bool complete = false;        // false when fewer than n roots were found
};

step_spectrum step_eigenvalues(const step_operator_spec& spec, int n);

// Report on the structural hypotheses the metastability estimates rest on:
// uniform bounds, sign pattern, L1 step-closeness, layer slope, potential
// monotonicity and the dichotomy zeros around the layer.
check_report hypothesis_check(const coefficient_field& coeff);

// |kappa_- - kappa_+|/eps divided by |lambda_1| of the supplied
// decomposition. Falls back to the closed-form asymptotic lambda_1 when the
// computed one is indistinguishable from zero; *used_asymptotic reports it.
double meta_ratio(const matched_profile& profile,
                  const spectral_decomposition& dec,
                  bool* used_asymptotic = nullptr);

// h-weighted interior inner product.
double inner(const std::vector<double>& f, const std::vector<double>& g,
             double h);

}  // namespace metastab
