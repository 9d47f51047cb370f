#pragma once

#include <Eigen/Dense>
#include <memory>

#include "kelab/geometry.hpp"

namespace kelab {

// Stand-alone solver for the complete hyperbolic (curvature -1 after the
// -Ric w = w normalization) metric on the sphere punctured at k >= 3 points,
// two of which must be the chart origins 0 and infinity.  Cusp neighborhoods
// are discretized in log-radial coordinates and closed by the nonlinear Robin
// condition that every metric in the local cusp family satisfies, which pins
// the horocycle scale without guessing it.
//
// This solver shares no discretization machinery with the production grid:
// it is the independent oracle the LC-limit path is measured against.
class HyperbolicMetric {
 public:
  // punctures: finite points plus optionally infinity; must contain 0 and inf
  static std::shared_ptr<const HyperbolicMetric> solve(
      const std::vector<SpherePoint>& punctures, int resolution = 96,
      double cusp_depth = 12.0, double tol = 1e-10);

  // log of the metric density against omega_FS at a finite chart point
  double log_density(const Complex& z_std) const;

  // total mass of the density; Gauss-Bonnet gives 2 pi (k - 2)
  double area() const;

  // fitted d log(density)/d log r near the cusp at p over [r0, r1]
  double cusp_loglog_slope(const SpherePoint& p, double r0, double r1) const;

  double max_residual() const { return residual_; }
  int puncture_count() const { return static_cast<int>(punctures_.size()); }

 private:
  struct Domain {
    bool cylinder = false;
    Complex center{0, 0};     // finite cusp patches
    double q0 = 0, q1 = 0;    // sigma (log-radius) range, or s-range for the cylinder
    int nr = 0, nth = 0;
    int base = 0;
    double h() const { return (q1 - q0) / nr; }
    double hth() const { return 2.0 * M_PI / nth; }
    int node(int i, int j) const { return base + i * nth + j; }
  };

  std::vector<SpherePoint> punctures_;
  std::vector<Domain> domains_;
  Eigen::ArrayXd v_;  // log density against omega_FS
  double residual_ = 0.0;
  double area_ = 0.0;

  friend struct HyperbolicBuilder;
};

}  // namespace kelab
