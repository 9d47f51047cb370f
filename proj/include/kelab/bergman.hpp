#pragma once

#include <memory>

#include "kelab/gauss.hpp"
#include "kelab/weights.hpp"

namespace kelab {

// Monomial section basis of O(beta): z^0..z^beta in the standard chart with
// cap representations w^{beta-j}.  All evaluations are Fubini-Study
// normalized, v_j = t^j s^{beta-j} with t = z/sqrt(1+|z|^2), s = 1/sqrt(1+|z|^2),
// so every component is bounded by one in either chart.
struct SectionBasis {
  int degree = 0;
  int dim() const { return degree + 1; }
  Eigen::VectorXcd values_at(const ChartPoint& x) const;
};

// Ring-structured quadrature for the L^2 pairings: rings about the chart
// origins admit banded (Fourier) accumulation; rings about off-origin sites
// are accumulated densely.  Weights absorb the prescribed radial exponents.
struct BergmanQuadrature {
  struct Ring {
    Chart chart;
    Complex center;          // 0 for origin rings
    double radius;           // local radius (or |z| for cylinder rings)
    bool origin_centered;
    int ntheta;
    Eigen::ArrayXd log_w;    // per point, includes measure, blend, exponents
    Eigen::ArrayXcd points;  // chart coordinates
  };
  std::vector<Ring> rings;
  int total_points = 0;

  // layout and blend bumps are borrowed from an existing grid
  static BergmanQuadrature build(const GridPtr& layout,
                                 const std::vector<std::pair<SpherePoint, double>>& exponents,
                                 int max_section_degree, int radial_nodes = 28);
};

struct KernelState;

// FS-relative logarithmic weight: constant + chordal poles + kernel terms +
// grid-sampled fields, each chart-invariant.
struct AnalyticWeight {
  double constant = 0.0;
  std::vector<std::pair<SpherePoint, double>> poles;  // + c log||sigma_p||^2
  struct KernelTerm {
    std::shared_ptr<const KernelState> kernel;
    double power;  // + power * log K
  };
  std::vector<KernelTerm> kernels;
  struct FieldTerm {
    GridPtr grid;
    Eigen::ArrayXd values;
    double power;
  };
  std::vector<FieldTerm> fields;

  double log_at(const ChartPoint& x) const;
  // total pole coefficient at p (for integrability bookkeeping)
  double pole_coefficient(const SpherePoint& p) const;
  std::vector<std::pair<SpherePoint, double>> radial_exponents() const;
};

struct GramOptions {
  double cond_fallback = 1e12;  // switch to long double beyond this
};

// Hermitian Gram matrix of the monomial basis under exp(-weight) d omega_FS.
struct GramMatrix {
  Eigen::MatrixXcd entries;
  double condition = 0.0;
  bool long_double_pass = false;
};

GramMatrix gram_matrix(const SectionBasis& basis, const AnalyticWeight& weight,
                       const BergmanQuadrature& quad, const GramOptions& opts = {});

// Orthonormalized section space: C with C G C^H = I via eigendecomposition.
struct KernelState {
  SectionBasis basis;
  GramMatrix gram;
  Eigen::MatrixXcd transform;  // rows are orthonormal sections
  Eigen::MatrixXcd inverse;    // G^{-1} (the dual evaluation path)

  double log_kernel_at(const ChartPoint& x) const;        // eigen path
  double log_kernel_dual_at(const ChartPoint& x) const;   // Gram-inverse path
  // banded evaluation over every non-dead node of a grid
  Eigen::ArrayXd log_kernel_on_grid(const GridPtr& grid) const;
};

std::shared_ptr<const KernelState> orthonormalize(const SectionBasis& basis, GramMatrix gram);

// membership of a section with prescribed vanishing orders in the multiplier
// ideal of the weight: exact rational test plus a quadrature finiteness probe
struct MembershipReport {
  bool member = false;
  std::string reason;
  double probe_ratio = 0.0;  // refined-integral ratio; near 1 iff convergent
};
MembershipReport multiplier_membership(const MarkedSphereModel& model,
                                       const std::vector<std::pair<int, Rational>>& orders,
                                       const std::vector<std::pair<int, Rational>>& weight_poles,
                                       const GridPtr& probe_layout);

// One inner dynamical system at fixed outer index m.
struct InnerRow {
  int ell;
  long long bundle_degree;
  long long dim;
  double int_dV;        // mass of dV_ell
  double holder_bound;  // (prod_k dim_k)^{1/ell}
  double condition;
};

struct InnerRun {
  long long a = 1;
  Rational step_degree;   // a (K+D) degree times a = integer
  long long A_degree = 2;
  std::vector<InnerRow> rows;
  std::vector<int> kept_ells;
  std::vector<std::shared_ptr<const KernelState>> kept_kernels;
  AnalyticWeight pack;    // the drift pack used at this level
};

struct BergmanOptions {
  long long A_degree = 2;
  int radial_nodes = 28;
  std::vector<int> keep_ells = {4, 8, 16, 32};  // kernels kept for the limit fit
  double cond_fallback = 1e12;
};

// Inner recursion K_{l} = K(X, A + l a(K+D), h_{l-1} pack), h_l = 1/K_l.
InnerRun run_inner(const MarkedSphereModel& model, const GridPtr& layout,
                   const AnalyticWeight& pack, long long a, const Rational& tau, int ell_max,
                   const BergmanOptions& opts = {});

// c0 + c1/l fit of the dimension-normalized kernel logs; returns the limit
// log density of omega_m against omega_FS together with fit diagnostics.
struct ScaledLimit {
  Eigen::ArrayXd log_kernel;   // log K_m, FS-relative at degree a tau
  Eigen::ArrayXd log_density;  // log of omega_m / omega_FS = log(2 pi K_m) - pack
  double fit_residual = 0.0;
  bool low_confidence = false;
};

ScaledLimit scaled_limit(const InnerRun& run, const GridPtr& grid);

struct OuterRun {
  std::vector<ScaledLimit> levels;  // m = 1..m_max
  std::vector<double> areas;
  std::vector<InnerRun> inner;
};

OuterRun run_outer(const MarkedSphereModel& model, const GridPtr& grid,
                   const LogDivisor& divisor, long long a, int ell_max, int m_max,
                   const BergmanOptions& opts = {});

// the drift pack (h_P h_sigma_N)^{a-1} h_sigma_D of the first level
AnalyticWeight canonical_pack(const MarkedSphereModel& model, const LogDivisor& divisor,
                              long long a, const Eigen::ArrayXd* h_P_smooth = nullptr,
                              const GridPtr& grid = nullptr);

struct VolumeInvariant {
  Rational mu;
  std::vector<std::pair<long long, Rational>> probes;  // (ell, exact ratio)
};
VolumeInvariant volume_mu(const Rational& tau, long long a,
                          const std::vector<long long>& ell_probes);

}  // namespace kelab
