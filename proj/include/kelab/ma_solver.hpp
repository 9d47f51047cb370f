#pragma once

#include <optional>
#include <string>

#include "kelab/weights.hpp"

namespace kelab {

// Discrete Liouville problem: find u with
//   curvature(background) + L u = rhs * exp(c u + drift)   nodewise,
// the one-dimensional form of the Monge-Ampere equations driving every
// construction here.
struct LiouvilleProblem {
  MetricWeight background;
  Density rhs;
  double exponent_coeff = 1.0;
  std::optional<Eigen::ArrayXd> drift;
};

struct SolveOptions {
  int max_iterations = 60;
  const Eigen::ArrayXd* initial = nullptr;
  double reporting_floor = -30.0;  // scaled-rhs log threshold for the residual norm
  bool require_big = true;
};

struct SolveReport {
  GridField u;
  double residual_norm = 0.0;   // sup log-form residual on the reporting set
  double deep_residual = 0.0;   // same, over nodes below the floor
  int newton_iterations = 0;
  double sup_u = 0.0, inf_u = 0.0;
  double area = 0.0;            // mass of rhs * exp(c u + drift)
  bool converged = false;
  bool max_principle_ok = true;
  std::string message;
};

SolveReport solve_liouville(const LiouvilleProblem& problem, double tol,
                            const SolveOptions& opts = {});

// log of the solved density rhs * exp(c u + drift) per node
Eigen::ArrayXd solved_log_density(const LiouvilleProblem& problem, const GridField& u);

struct PerturbationSchedule {
  std::vector<double> delta_values;  // strictly decreasing, positive
  double epsilon = 0.05;
  std::optional<MetricWeight> E_weight;  // empty on the reference geometry

  static PerturbationSchedule geometric(double first = 0.5, double last = 1e-4);
};

struct DeltaTraceRow {
  double delta;
  int iterations;
  double residual, area, sup_u, inf_u;
};

struct CanonicalKEResult {
  SolveReport report;                       // the delta -> 0 solution
  LiouvilleProblem problem;                 // the delta = 0 problem it solves
  std::vector<DeltaTraceRow> trace;
  std::vector<Eigen::ArrayXd> delta_log_densities;
  Eigen::ArrayXd log_density;
  double extrapolation_gap = 0.0;  // extrapolated vs solved log density, sup norm
};

// Continuation along the perturbed family, warm-starting each delta from the
// previous one, then the limit solve.  h_P_smooth perturbs the reference
// weight (uniqueness experiments); the solution is invariant under it.
CanonicalKEResult solve_canonical_KE_klt(const MarkedSphereModel& model,
                                         const LogDivisor& divisor, const GridPtr& grid,
                                         const PerturbationSchedule& schedule, double tol,
                                         const Eigen::ArrayXd* h_P_smooth = nullptr,
                                         const Eigen::ArrayXd* warm_start = nullptr);

struct AlmostBoundednessReport {
  double c_plus;
  std::vector<std::pair<double, double>> c_minus;  // (delta0, tightest constant)
};

AlmostBoundednessReport almost_boundedness_report(const GridField& u,
                                                  const std::optional<MetricWeight>& E_weight,
                                                  const std::vector<double>& delta0_values);

}  // namespace kelab
