#include "kelab/weights.hpp"

#include <stdexcept>

namespace kelab {

Density::Density(GridField s, std::vector<std::pair<int, double>> e)
    : smooth(std::move(s)), exponents(std::move(e)) {
  for (int n = 0; n < grid()->node_count(); ++n) {
    if (grid()->status(n) == NodeStatus::Dead) continue;
    if (!(smooth.v(n) > 0.0) || !std::isfinite(smooth.v(n)))
      throw std::invalid_argument("density smooth part must be positive and finite");
  }
  if (!finite_mass())
    throw std::invalid_argument("density has infinite mass: an exponent is <= -1");
}

double Density::log_at(int n) const {
  double acc = std::log(smooth.v(n));
  for (const auto& [idx, e] : exponents) acc += e * grid()->log_chordal(n, idx);
  return acc;
}

Eigen::ArrayXd Density::log_values() const {
  Eigen::ArrayXd out(grid()->node_count());
  for (int n = 0; n < grid()->node_count(); ++n)
    out(n) = grid()->status(n) == NodeStatus::Dead ? 0.0 : log_at(n);
  return out;
}

bool Density::finite_mass() const {
  for (const auto& [idx, e] : exponents)
    if (e <= -1.0) return false;
  return true;
}

double integrate(const Density& density) {
  const RadialGrid& g = *density.grid();
  double acc = 0.0;
  for (int n = 0; n < g.node_count(); ++n) {
    if (!g.quad_positive(n)) continue;
    acc += std::exp(g.log_quad_weight(n) + density.log_at(n));
  }
  return acc;
}

MetricWeight::MetricWeight(GridPtr g, Rational degree)
    : grid(std::move(g)),
      bundle{degree, 1},
      smooth(Eigen::ArrayXd::Zero(grid->node_count())) {}

double MetricWeight::pole_sum() const {
  double s = 0.0;
  for (const auto& [idx, c] : poles) s += c;
  return s;
}

GridField MetricWeight::curvature_density() const {
  GridField phi(grid, smooth);
  GridField curv = laplacian(phi);
  const double c0 = bundle.degree.value() - pole_sum() + curv_const_extra;
  curv.v += c0;
  sync_fringe(curv);
  return curv;
}

double MetricWeight::curvature_integral() const {
  double atoms = 0.0;
  for (const auto& [idx, c] : poles) atoms += 2.0 * M_PI * c;
  return integrate(curvature_density()) + atoms;
}

std::pair<MetricWeight, Density> reference_metric(const GridPtr& grid) {
  MetricWeight w(grid, Rational(1));
  Density area(GridField(grid, 1.0), {});
  return {std::move(w), std::move(area)};
}

GridField orbifold_bump(const GridPtr& grid,
                        const std::vector<std::pair<int, long long>>& orders) {
  GridField out(grid);
  for (int n = 0; n < grid->node_count(); ++n) {
    if (grid->status(n) == NodeStatus::Dead) continue;
    double acc = 0.0;
    for (const auto& [idx, b] : orders) {
      const double xi = 0.7 * std::exp(grid->log_chordal(n, idx) / static_cast<double>(b));
      acc -= std::log1p(-xi);
    }
    out.v(n) = acc;
  }
  return out;
}

}  // namespace kelab
