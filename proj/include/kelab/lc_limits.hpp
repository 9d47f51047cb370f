#pragma once

#include "kelab/hyperbolic.hpp"
#include "kelab/ma_solver.hpp"

namespace kelab {

// Canonical measures along t D for t increasing toward 1.
struct TSweep {
  std::vector<Rational> t_values;
  std::vector<Eigen::ArrayXd> log_densities;
  std::vector<Eigen::ArrayXd> potentials;
  std::vector<double> areas;
  std::vector<double> monotonicity_margins;  // min log-ratio between consecutive t
  GridPtr grid;
};

struct SweepOptions {
  PerturbationSchedule schedule;  // shared delta continuation per t
  double tol = 1e-10;
  SweepOptions() { schedule.delta_values = {0.2, 0.1}; }
};

TSweep sweep_t(const MarkedSphereModel& model, const LogDivisor& divisor,
               const std::vector<Rational>& t_values, const GridPtr& grid,
               const SweepOptions& opts = {});

// grid adapted to the sweep: cluster orders derived from the final t
GridPtr sweep_grid(const MarkedSphereModel& model, const LogDivisor& divisor,
                   const Rational& t_max, int resolution);

struct CuspFit {
  int point;
  double slope;  // d log(density) / d log r over the fit window
};

struct LCLimitResult {
  Eigen::ArrayXd log_density;   // monotone limit with Aitken tail
  std::vector<CuspFit> cusp_fits;
  double tail_gap = 0.0;        // last increment, the extrapolation error scale
  GridPtr grid;
};

LCLimitResult lc_limit(const TSweep& sweep, double violation_tol = 1e-8);

// per-t Yau-Schwarz domination against a complete metric on a larger
// puncture set; margins must stay below the tolerance
struct DominationReport {
  std::vector<double> max_log_ratio;  // per t, over the common regular set
  bool dominated(double tol = 1e-6) const {
    for (double m : max_log_ratio)
      if (m > tol) return false;
    return true;
  }
};

DominationReport schwarz_domination_check(const TSweep& sweep,
                                          const HyperbolicMetric& omega_H,
                                          double excision = 0.08);

struct AzdRow {
  int power;                  // pluricanonical power m
  std::vector<double> excised_integrals;
  bool convergent = false;
};

// excised integrals of |sigma|^2 (d mu_can)^{-m} dV across shrinking radii
AzdRow azd_integrability_probe(const LCLimitResult& limit, const LogDivisor& divisor, int power,
                               const std::vector<double>& radii,
                               const Eigen::ArrayXd* density_override = nullptr);

}  // namespace kelab
