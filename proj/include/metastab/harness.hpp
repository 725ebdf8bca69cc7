#pragma once

#include <map>
#include <string>
#include <vector>

#include "metastab/flux.hpp"

namespace metastab {

// Line-oriented key=value store with [section] headers. '#' starts a
// comment, blank lines are skipped, whitespace around keys and values is
// trimmed. Keys seen before any header land in the unnamed section "".
// Values stay strings until a typed getter asks for them, so one parser
// serves every scenario field.
class config_file {
 public:
  static config_file parse_string(const std::string& text);
  static config_file load(const std::string& path);

  bool has(const std::string& section, const std::string& key) const;
  std::string get(const std::string& section, const std::string& key) const;
  std::string get_or(const std::string& section, const std::string& key,
                     const std::string& fallback) const;
  double get_double(const std::string& section, const std::string& key) const;
  double get_double_or(const std::string& section, const std::string& key,
                       double fallback) const;
  int get_int_or(const std::string& section, const std::string& key,
                 int fallback) const;
  // Comma-separated numbers; empty value means empty list.
  std::vector<double> get_list(const std::string& section,
                               const std::string& key) const;
  std::vector<std::string> sections() const;

 private:
  std::map<std::string, std::map<std::string, std::string>> data_;
};

// One runnable scenario: which flux, which epsilons, what initial state,
// and which modules to dispatch to. Built from a config file; every field
// has a config key of the same name (lists are comma-separated).
struct scenario_config {
  std::string name;

  // Flux selection, forwarded to make_flux.
  std::string flux_kind = "burgers";
  std::vector<double> poly_coeffs;
  double u_minus = 1.0;
  double u_plus = 0.0;  // NaN in configs means -u_minus
  double ell = 1.0;

  std::vector<double> epsilons;  // each positive and <= 0.5

  // Layer positions. xi0 seeds the evolution modules; xi_list, when set,
  // fans the manifold/spectral records over several positions.
  double xi0 = 0.0;  // NaN means "unset": evolution modules fall back to
                     // the rest position of the drift field
  std::vector<double> xi_list;

  // Initial state preset for the viscous run: "manifold" (profile at
  // xi0), "steady" (profile at the rest position), "figure1" (entering
  // parabola through (-ell,u_minus),(ell,u_plus) that steepens into a
  // layer), or "poly:c0,c1,..." (explicit polynomial in x).
  std::string u0_preset;

  std::vector<std::string> modules;  // subset of the five module names

  // Spectral / reduced knobs.
  std::string coefficient = "matched";  // or "step": sharp-interface a0
  int n_modes = 8;
  double w0_amplitude = 0.0;  // >0: couple the drift to modal coefficients,
                              // seeding w0 = amplitude * phi_2

  // Viscous and hyperbolic run knobs.
  int n_nodes = 0;  // 0: resolution follows the layer width
  int n_cells = 400;
  double t_final = 0.0;
  std::vector<double> snapshot_times;
  double t_max = 0.0;  // hyperbolic budget; 0 means twice the proven bound
  double equilibrium_tol = 0.05;

  // Randomized manifold probe positions (0 disables them).
  int xi_count = 0;
  unsigned long long seed = 0;

  std::string out_dir;
};

scenario_config scenario_from(const config_file& cfg);
scenario_config load_scenario(const std::string& path);

// The flux the scenario describes; validates the selection.
flux_model scenario_flux(const scenario_config& cfg);

// Least-squares line through (xs, ys) where xs are inverse-epsilon values
// and ys are log-magnitudes, so the slope is the decay exponent. residual
// is sqrt(SS_res / SS_tot), the scale-free misfit of the line.
struct exp_fit {
  double slope = 0.0;
  double intercept = 0.0;
  double residual = 0.0;
};

// Requires at least 4 points and a non-degenerate spread in xs.
exp_fit fit_exponential(const std::vector<double>& xs,
                        const std::vector<double>& ys);

// Everything a scenario run produced, keyed for stable ordering:
// records["<module>/eps=.../..."]["metric"] plus named fits. Maps keep
// the emission deterministic; reruns of the same config and seed write
// byte-identical summaries regardless of worker count.
struct sweep_result {
  std::map<std::string, std::map<std::string, double>> records;
  std::map<std::string, exp_fit> fits;
};

// Dispatches the scenario to its modules, one work item per (module,
// epsilon) pair, executed on `jobs` threads. Items are pure; records and
// CSV payloads are merged by sorted key afterwards and written to
// cfg.out_dir along with summary.txt. Module errors are rethrown with the
// scenario and item key prefixed. An empty module selection is a no-op
// that still writes a valid (empty) summary.
sweep_result run_scenario(const scenario_config& cfg, int jobs = 1);

// Writes self-contained gnuplot scripts next to the CSVs run_scenario
// produced: profile snapshots, shock track vs drift prediction, spectrum
// vs inverse epsilon. Scripts are emitted only for the record families
// present in the result. Requires a non-empty result.
void emit_plots(const sweep_result& result, const scenario_config& cfg);

// Formats one line of summary.txt; exposed so tests can pin the format.
std::string summary_line(const std::string& key, const std::string& metric,
                         double value);

}  // namespace metastab
