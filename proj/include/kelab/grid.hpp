#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "kelab/geometry.hpp"

namespace kelab {

enum class Chart : std::uint8_t { Std, Cap };

enum class NodeStatus : std::uint8_t { Interior, Fringe, Dead };

struct ChartPoint {
  Chart chart = Chart::Std;
  Complex coord{0.0, 0.0};
};

ChartPoint to_chart(Chart chart, const ChartPoint& p);
ChartPoint chart_point(const SpherePoint& p);

// log ||sigma_p||^2 evaluated at an arbitrary chart point.
double log_section_norm_sq(const SpherePoint& p, const ChartPoint& x);
// log of the Fubini-Study area density 2/(1+|.|^2)^2 w.r.t. dA in x's chart.
double log_fs_density(const ChartPoint& x);

struct PatchSpec {
  enum class Kind : std::uint8_t { Disk, Cylinder } kind = Kind::Disk;
  Chart chart = Chart::Std;
  Complex center{0.0, 0.0};  // Disk only, in `chart`
  double radius = 1.0;       // Disk: local radius R; radial map r = R q^b
  long long b = 1;           // cluster order
  double s0 = 0.0, s1 = 0.0; // Cylinder: s = log|z| range
  int nr = 0, nth = 0;
  int site = -1;             // marked point resolved by this disk, -1 otherwise
  int base = 0;              // first node index
  Complex blend_center{0.0, 0.0};  // quadrature ownership bump (fixed for families)
  double blend_in = 0.0, blend_out = 0.0;

  double hq() const { return kind == Kind::Disk ? 1.0 / nr : (s1 - s0) / nr; }
  double hth() const { return 2.0 * M_PI / nth; }
  int node(int i, int j) const { return base + i * nth + j; }
};

struct GridOptions {
  int cylinder_angles = 0;       // 0 = 2 * resolution
  int disk_rings = 0;            // 0 = max(16, resolution / 2)
  int disk_angles = 0;           // 0 = max(32, resolution / 2)
  int moving_site = -1;          // site whose patch translates across a family
  double moving_margin = 0.0;    // worst-case travel of the moving site
  SpherePoint moving_base;       // layout anchor for the moving site
  bool moving_base_valid = false;
  double site_radius_factor = 0.45;
};

// Composite grid: one clustered polar disk per marked point (and per chart
// origin), plus a log-radial cylinder covering the bulk.  Disk patches are
// stitched to the cylinder by biquadratic fringe interpolation; quadrature
// weights form an exact partition of unity with disjoint blend transitions.
class RadialGrid {
 public:
  static std::shared_ptr<const RadialGrid> build(const MarkedSphereModel& model,
                                                 int resolution,
                                                 const std::vector<long long>& cluster_orders,
                                                 const GridOptions& opts = {});

  const MarkedSphereModel& model() const { return model_; }
  int resolution() const { return resolution_; }
  const std::vector<PatchSpec>& patches() const { return patches_; }
  int node_count() const { return static_cast<int>(status_.size()); }
  int valid_count() const { return valid_count_; }

  NodeStatus status(int n) const { return status_[n]; }
  const ChartPoint& point(int n) const { return pos_[n]; }
  int patch_of(int n) const { return patch_of_[n]; }

  // quadrature weight for the FS reference measure; 0 on dead nodes
  double quad_weight(int n) const { return quad_w_[n]; }
  // log(cell * blend) + log fs density, valid where blend > 0
  double log_quad_weight(int n) const { return log_quad_w_[n]; }
  bool quad_positive(int n) const { return quad_w_[n] > 0.0; }

  double log_chordal(int n, int marked) const { return log_chord_[n][marked]; }

  // i ddbar u / omega_FS as a row-scaled sparse operator in difference form:
  // for interior row n,  (Lu)(n) = exp(-log_scale[n]) * ((A u)(n) - row_sum(n) u(n)),
  // where A holds the off-diagonal stencil and row_sum = A 1.
  const Eigen::SparseMatrix<double, Eigen::RowMajor>& scaled_operator() const { return A_; }
  const Eigen::VectorXd& log_scale() const { return log_scale_; }
  const Eigen::VectorXd& row_sum() const { return row_sum_; }

  // fringe rows: u(n) = sum_k w_k u(donor_k)
  struct FringeRow {
    int node;
    int donors[9];
    double w[9];
  };
  const std::vector<FringeRow>& fringe_rows() const { return fringe_; }

  // biquadratic interpolation of a node field at an arbitrary point
  double interpolate(const Eigen::ArrayXd& field, const ChartPoint& x) const;

  // distance from node n to an arbitrary sphere point (chordal)
  double chordal_to(int n, const SpherePoint& p) const;

  SpherePoint node_sphere_point(int n) const;

 private:
  MarkedSphereModel model_;
  int resolution_ = 0;
  int valid_count_ = 0;
  std::vector<PatchSpec> patches_;
  std::vector<NodeStatus> status_;
  std::vector<ChartPoint> pos_;
  std::vector<int> patch_of_;
  std::vector<double> quad_w_, log_quad_w_;
  std::vector<std::vector<double>> log_chord_;
  Eigen::SparseMatrix<double, Eigen::RowMajor> A_;
  Eigen::VectorXd log_scale_;
  Eigen::VectorXd row_sum_;
  std::vector<FringeRow> fringe_;

  friend struct GridBuilder;
};

using GridPtr = std::shared_ptr<const RadialGrid>;

struct GridField {
  GridPtr grid;
  Eigen::ArrayXd v;

  GridField() = default;
  explicit GridField(GridPtr g, double fill = 0.0)
      : grid(std::move(g)), v(Eigen::ArrayXd::Constant(grid->node_count(), fill)) {}
  GridField(GridPtr g, Eigen::ArrayXd values) : grid(std::move(g)), v(std::move(values)) {}
};

// Evaluate f(chart point) at every non-dead node.
GridField evaluate_on_grid(const GridPtr& grid, const std::function<double(const ChartPoint&)>& f);

// Discrete i ddbar relative to the FS form; exact zero on constants.
GridField laplacian(const GridField& field);

// Fill fringe values by donor interpolation (for fields built nodewise).
void sync_fringe(GridField& field);

double integrate(const GridField& field);

struct Extrema {
  double sup, inf;
  int argmax, argmin;
};
Extrema extrema(const GridField& field);

struct Density;  // weights.hpp
double integrate(const Density& density);

}  // namespace kelab
