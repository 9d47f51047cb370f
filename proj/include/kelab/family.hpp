#pragma once

#include "kelab/bergman.hpp"
#include "kelab/lc_limits.hpp"

namespace kelab {

// Family over a base disk: fixed marked points plus one moving point at
// base + y.  Coefficients are constant in y; only the position moves.  Every
// fiber shares one grid topology (the moving patch translates), so fields
// restrict to a common cylinder lattice without interpolation.
struct FamilySpec {
  MarkedSphereModel reference_model;     // moving point at its base position
  LogDivisor divisor;
  int moving_index = -1;                 // -1: product family (nothing moves)
  double base_radius = 0.3;
  int base_n = 11;                       // base lattice is base_n^2 clipped to the disk
  bool lc_fibers = false;                // LC pairs via the t-limit path
  bool clip_to_disk = true;              // keep only |y| <= base_radius

  std::vector<Complex> base_nodes() const;  // row-major, clipped to the disk
  MarkedSphereModel fiber_model(Complex y) const;
};

struct FamilyOptions {
  int resolution = 96;
  double tol = 1e-10;
  PerturbationSchedule schedule;          // KLT continuation per fiber
  std::vector<Rational> t_values = {{4, 5}, {9, 10}, {19, 20}, {39, 40}};
  int workers = 2;
  FamilyOptions() { schedule.delta_values = {0.1}; }
};

struct RelativeDensityField {
  FamilySpec spec;
  std::vector<Complex> base;             // base nodes, row-major over the clipped lattice
  std::vector<int> lattice_index;        // position in the full base_n x base_n lattice
  GridPtr reference_grid;                // fiber grid of the base configuration
  // psi(x, y) = log density + log fs at the shared cylinder lattice
  std::vector<Eigen::ArrayXd> psi;       // one per base node, cylinder nodes only
  std::vector<double> areas;
  std::vector<int> failed;               // base indices whose solve failed
  bool complete() const { return failed.empty(); }
};

RelativeDensityField solve_family(const FamilySpec& spec, const FamilyOptions& opts = {});

struct PshReport {
  double min_eigenvalue = 0.0;
  Complex arg_x;                         // location of the minimum
  Complex arg_y;
  long long tested = 0, excluded = 0;
  bool pass(double tol) const { return min_eigenvalue >= -tol; }
};

// discrete 2x2 complex Hessian of psi over the product grid, interior base
// nodes, cylinder nodes away from every singular track
PshReport psh_test(const RelativeDensityField& field, double exclusion = 0.12);

// the same PSD test applied to log of fiberwise Bergman kernels of O(degree)
// under the family of pack weights; flip_sign negates the pack (the
// constructed negative control with negative curvature drift)
PshReport fiber_bergman_psh_test(const FamilySpec& spec, int degree,
                                 const FamilyOptions& opts = {}, bool flip_sign = false);

}  // namespace kelab
