#pragma once

#include "kelab/ma_solver.hpp"

namespace kelab {

// Full record of a Ricci iteration run.  Classes evolve by the exact affine
// recursion d_m = ((a-1)/a) d_{m-1} + deg(K+L), kept in rational arithmetic
// independently of the floating-point solves.
struct IterationTrace {
  long long a = 1;
  std::vector<Eigen::ArrayXd> potentials;
  std::vector<Eigen::ArrayXd> log_densities;  // of omega_m against omega_FS
  std::vector<double> areas;                  // measured masses
  std::vector<Rational> class_degrees;        // exact: area_m = 2 pi d_m
  std::vector<double> sup_diffs, inf_diffs;
  std::vector<double> residuals;
  std::vector<Rational> alpha;                // (1/a)((a-1)/a)^{m-1}
  std::vector<double> chern_lu;               // max trace_{omega_m} omega_0
  std::vector<double> azd_masses;             // P5: mass of the h_m measure
  bool converged = false;
  std::string message;
  Eigen::ArrayXd limit_u;
  Eigen::ArrayXd limit_log_density;
  double fixed_point_residual = 0.0;
};

// Twisted iteration with smooth drift (L, h_L), Theta_{h_L} >= 0 and K+L ample.
IterationTrace iterate_smooth(const MarkedSphereModel& model, const MetricWeight& drift,
                              const MetricWeight& omega0, long long a, int m_max, double tol);

// Singular drift (D, 1/|sigma_D|^2) on a KLT pair of log general type, sharing
// one delta schedule across all m (outer delta loop, inner m loop).
struct SingularIterationOptions {
  std::vector<double> delta_values = {0.2, 0.1};
  double epsilon = 0.05;
  std::optional<MetricWeight> E_weight;
  const Eigen::ArrayXd* h_P_smooth = nullptr;
};

IterationTrace iterate_singular(const MarkedSphereModel& model, const LogDivisor& divisor,
                                const GridPtr& grid, long long a, int m_max, double tol,
                                const SingularIterationOptions& opts = {});

struct ContractionReport {
  std::vector<double> sup_ratios, inf_ratios;
  double max_sup_ratio = 0.0;
  double bound = 0.0;  // (a-1)/a
  bool within_bound(double slack = 0.02) const { return max_sup_ratio <= bound + slack; }
};

ContractionReport contraction_report(const IterationTrace& trace, double tol);

struct UniquenessReport {
  double limit_discrepancy = 0.0;             // sup |log densities| difference
  std::vector<double> per_step_discrepancy;   // decays like ((a-1)/a)^m
};

UniquenessReport uniqueness_check(const MarkedSphereModel& model, const LogDivisor& divisor,
                                  const GridPtr& grid, long long a, int m_max, double tol,
                                  const MetricWeight& h_P_first, const MetricWeight& h_P_second,
                                  const SingularIterationOptions& opts = {});

}  // namespace kelab
