#pragma once

#include <optional>

#include "kelab/grid.hpp"
#include "kelab/rational.hpp"

namespace kelab {

// The paper-side convention i dz^dz~ equals this factor times the internal
// area element dA = dx dy.  Fixed once; validated by the unit-disk family
// integral int (1-|t|^2)^l = 2 pi / (l+1) in that convention.
inline constexpr double kPaperMeasureFactor = 2.0;

// Measure rho * prod ||sigma_i||^{2 e_i} * omega_FS with smooth positive rho.
struct Density {
  GridField smooth;
  std::vector<std::pair<int, double>> exponents;

  Density() = default;
  Density(GridField s, std::vector<std::pair<int, double>> e);

  const GridPtr& grid() const { return smooth.grid; }
  // log of the full density against omega_FS at node n
  double log_at(int n) const;
  Eigen::ArrayXd log_values() const;
  bool finite_mass() const;
};

// Singular hermitian metric on a Q-line bundle of rational degree: the total
// trivialized weight is  degree*log(1+|z|^2) + smooth + sum c_i log||sigma_i||^2.
struct MetricWeight {
  GridPtr grid;
  QLineBundle bundle;
  Eigen::ArrayXd smooth;
  std::vector<std::pair<int, double>> poles;  // (marked point, c_i)
  double curv_const_extra = 0.0;              // delta-family perturbations

  MetricWeight() = default;
  MetricWeight(GridPtr g, Rational degree);

  double pole_sum() const;
  // absolutely continuous curvature density w.r.t. omega_FS
  GridField curvature_density() const;
  // total curvature integral including the 2 pi c_i atoms at the poles
  double curvature_integral() const;
};

// Fubini-Study weight on O(1) and its area form (total mass 2 pi).
std::pair<MetricWeight, Density> reference_metric(const GridPtr& grid);

double integrate(const Density& density);

// log( ||sigma_i(x)||^{2/b} scaled below 1 ), the orbifold smoothing bump of
// the continuation family: phi = -sum_i log(1 - 0.7 ||sigma_i||^{2/b_i}).
GridField orbifold_bump(const GridPtr& grid, const std::vector<std::pair<int, long long>>& orders);

}  // namespace kelab
