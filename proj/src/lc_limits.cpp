#include "kelab/lc_limits.hpp"

#include <stdexcept>

namespace kelab {

GridPtr sweep_grid(const MarkedSphereModel& model, const LogDivisor& divisor,
                   const Rational& t_max, int resolution) {
  std::vector<long long> orders(model.size(), 1);
  for (const auto& e : divisor.entries) {
    const Rational d = e.coefficient * t_max;
    orders[e.point] = cluster_order(d);
  }
  return RadialGrid::build(model, resolution, orders);
}

TSweep sweep_t(const MarkedSphereModel& model, const LogDivisor& divisor,
               const std::vector<Rational>& t_values, const GridPtr& grid,
               const SweepOptions& opts) {
  auto pair = classify_pair(model, divisor);
  if (pair.classification == PairClass::Invalid)
    throw std::invalid_argument("sweep_t: invalid divisor");
  const Rational coeff_sum = divisor.coefficient_sum();
  if (!(coeff_sum > Rational(2)))
    throw std::invalid_argument("sweep_t: deg(K_X+D) <= 0 at t = 1; no admissible window");
  // admissible window: t sum(d_i) > 2, i.e. t > 1 - eps_0
  const Rational t_low = Rational(2) / coeff_sum;
  const Rational eps0 = Rational(1) - t_low;
  for (const auto& t : t_values) {
    if (!(t * coeff_sum > Rational(2)))
      throw std::invalid_argument("sweep_t: t = " + t.str() +
                                  " is outside the admissible window (need t > 1 - eps_0, "
                                  "eps_0 = " + eps0.str() + ")");
    if (t > Rational(1)) throw std::invalid_argument("sweep_t: t must not exceed 1");
  }
  for (std::size_t k = 1; k < t_values.size(); ++k)
    if (!(t_values[k] >= t_values[k - 1]))
      throw std::invalid_argument("sweep_t: t values must be nondecreasing");

  TSweep sweep;
  sweep.grid = grid;
  Eigen::ArrayXd warm;
  const Eigen::ArrayXd* init = nullptr;
  for (const auto& t : t_values) {
    auto dt = divisor.scaled(model, t);
    auto res = solve_canonical_KE_klt(model, dt, grid, opts.schedule, opts.tol, nullptr, init);
    sweep.t_values.push_back(t);
    sweep.log_densities.push_back(res.log_density);
    sweep.potentials.push_back(res.report.u.v);
    sweep.areas.push_back(res.report.area);
    warm = res.report.u.v;
    init = &warm;
  }
  const RadialGrid& g = *grid;
  for (std::size_t k = 1; k < sweep.t_values.size(); ++k) {
    double margin = 1e300;
    for (int n = 0; n < g.node_count(); ++n)
      if (g.status(n) != NodeStatus::Dead)
        margin = std::min(margin, sweep.log_densities[k](n) - sweep.log_densities[k - 1](n));
    sweep.monotonicity_margins.push_back(margin);
  }
  return sweep;
}

LCLimitResult lc_limit(const TSweep& sweep, double violation_tol) {
  if (sweep.log_densities.empty()) throw std::invalid_argument("lc_limit: empty sweep");
  for (double m : sweep.monotonicity_margins)
    if (m < -violation_tol)
      throw std::runtime_error(
          "lc_limit: sweep is not monotone within tolerance; aborting (margin " +
          std::to_string(m) + ")");

  LCLimitResult out;
  out.grid = sweep.grid;
  const RadialGrid& g = *sweep.grid;
  const std::size_t K = sweep.log_densities.size();
  out.log_density = sweep.log_densities.back();
  if (K >= 3) {
    const auto& a0 = sweep.log_densities[K - 3];
    const auto& a1 = sweep.log_densities[K - 2];
    const auto& a2 = sweep.log_densities[K - 1];
    double gap = 0.0;
    for (int n = 0; n < g.node_count(); ++n) {
      if (g.status(n) == NodeStatus::Dead) continue;
      const double d1 = a1(n) - a0(n), d2 = a2(n) - a1(n);
      gap = std::max(gap, std::abs(d2));
      const double denom = d1 - d2;
      if (std::abs(denom) > 1e-12 + 0.15 * std::abs(d1)) {
        const double r = d2 / d1;
        if (std::isfinite(r) && r > 0.0 && r < 0.95)
          out.log_density(n) = a2(n) + d2 * r / (1.0 - r);
      }
    }
    out.tail_gap = gap;
  }

  // fitted local slope of the limit density at each divisor point, over
  // log-radius buckets so steeply clustered rings cannot dominate the fit
  const auto& model = g.model();
  const double r_lo = 3e-5, r_hi = 0.1;
  const int buckets = 10;
  for (std::size_t p = 0; p < model.size(); ++p) {
    std::vector<double> bsum(buckets, 0.0), bx(buckets, 0.0);
    std::vector<int> bcount(buckets, 0);
    for (int n = 0; n < g.node_count(); ++n) {
      if (g.status(n) != NodeStatus::Interior) continue;
      const double logr = 0.5 * g.log_chordal(n, static_cast<int>(p));
      if (logr < std::log(r_lo) || logr > std::log(r_hi)) continue;
      const int b = std::min(buckets - 1,
                             static_cast<int>(buckets * (logr - std::log(r_lo)) /
                                              (std::log(r_hi) - std::log(r_lo))));
      bsum[b] += out.log_density(n);
      bx[b] += logr;
      ++bcount[b];
    }
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int count = 0;
    for (int b = 0; b < buckets; ++b) {
      if (bcount[b] == 0) continue;
      const double x = bx[b] / bcount[b], y = bsum[b] / bcount[b];
      sx += x;
      sy += y;
      sxx += x * x;
      sxy += x * y;
      ++count;
    }
    if (count >= 4) {
      const double slope = (count * sxy - sx * sy) / (count * sxx - sx * sx);
      out.cusp_fits.push_back({static_cast<int>(p), slope});
    }
  }
  return out;
}

DominationReport schwarz_domination_check(const TSweep& sweep, const HyperbolicMetric& omega_H,
                                          double excision) {
  DominationReport rep;
  const RadialGrid& g = *sweep.grid;
  const auto& model = g.model();
  for (const auto& logg : sweep.log_densities) {
    double worst = -1e300;
    for (int n = 0; n < g.node_count(); ++n) {
      if (g.status(n) != NodeStatus::Interior) continue;
      bool regular = true;
      for (const auto& mp : model.marked_points)
        if (g.chordal_to(n, mp) < excision) regular = false;
      if (!regular) continue;
      const SpherePoint z = g.node_sphere_point(n);
      if (z.at_infinity || std::abs(z.z) > 25.0) continue;
      double oracle;
      try {
        oracle = omega_H.log_density(z.z);
      } catch (const std::exception&) {
        continue;  // too deep inside an oracle cusp
      }
      worst = std::max(worst, logg(n) - oracle);
    }
    rep.max_log_ratio.push_back(worst);
  }
  return rep;
}

AzdRow azd_integrability_probe(const LCLimitResult& limit, const LogDivisor& divisor, int power,
                               const std::vector<double>& radii,
                               const Eigen::ArrayXd* density_override) {
  const RadialGrid& g = *limit.grid;
  const Eigen::ArrayXd& logdens = density_override ? *density_override : limit.log_density;
  AzdRow row;
  row.power = power;
  for (double r : radii) {
    double acc = 0.0;
    for (int n = 0; n < g.node_count(); ++n) {
      if (!g.quad_positive(n)) continue;
      bool keep = true;
      double log_sigma_d = 0.0;
      for (const auto& e : divisor.entries) {
        const double lc = g.log_chordal(n, static_cast<int>(e.point));
        if (lc < 2.0 * std::log(r)) keep = false;
        log_sigma_d += e.coefficient.value() * lc;
      }
      if (!keep) continue;
      // |sigma|^2 h_K^m dV with sigma the constant pluricanonical section and
      // h_K = (density)^{-1} h_sigma_D, all FS-relative
      acc += std::exp(g.log_quad_weight(n) - power * (logdens(n) + log_sigma_d));
    }
    row.excised_integrals.push_back(acc);
  }
  // convergent iff the tail increments between excision levels die out
  const std::size_t K = row.excised_integrals.size();
  if (K >= 3) {
    const double scale = std::abs(row.excised_integrals.back()) + 1e-300;
    const double d1 = row.excised_integrals[K - 2] - row.excised_integrals[K - 3];
    const double d2 = row.excised_integrals[K - 1] - row.excised_integrals[K - 2];
    row.convergent = std::abs(d2) <= 0.75 * std::abs(d1) + 1e-10 * scale;
  }
  return row;
}

}  // namespace kelab
