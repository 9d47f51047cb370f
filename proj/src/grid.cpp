#include "kelab/grid.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>

namespace kelab {

namespace {

// C^4 smoothstep on [0,1]
double smoothstep9(double t) {
  if (t <= 0.0) return 0.0;
  if (t >= 1.0) return 1.0;
  const double t2 = t * t;
  return t2 * t2 * t * (126.0 + t * (-420.0 + t * (540.0 + t * (-315.0 + t * 70.0))));
}

}  // namespace

namespace {
// derivative of smoothstep9
double smoothstep9_d(double t) {
  if (t <= 0.0 || t >= 1.0) return 0.0;
  const double a = t * (1.0 - t);
  return 630.0 * a * a * a * a;
}
}  // namespace

// Radial map r(q) on [0,1] with a variable clustering exponent:
//   d log r / d q = b_eff(q) / q,   b_eff = 1 + (b-1)(1 - S((q-qa)/(qb-qa))).
// Exact power law r ~ q^b in the core, linear near the rim (so the outer rings
// stay usable as interpolation donors at any cluster order), monotone for
// every b because the log-derivative is positive by construction.
struct RadialMap {
  double R = 1.0;
  long long b = 1;
  double qa = 0.35, qb = 0.75;
  double Iqa = 0.0;

  static double gauss16(const std::function<double(double)>& f, double a, double b2) {
    static const double x[8] = {0.0950125098376374, 0.2816035507792589, 0.4580167776572274,
                                0.6178762444026438, 0.7554044083550030, 0.8656312023878318,
                                0.9445750230732326, 0.9894009349916499};
    static const double w[8] = {0.1894506104550685, 0.1826034150449236, 0.1691565193950025,
                                0.1495959888165767, 0.1246289712555339, 0.0951585116824928,
                                0.0622535239386479, 0.0271524594117541};
    const double c = 0.5 * (a + b2), h = 0.5 * (b2 - a);
    double acc = 0.0;
    for (int k = 0; k < 8; ++k) acc += w[k] * (f(c + h * x[k]) + f(c - h * x[k]));
    return acc * h;
  }

  double transition_integral(double q) const {
    // I(q) = int_q^1 (1 - S(t)) / t dt
    const double L = qb - qa;
    auto integrand = [&](double t) { return (1.0 - smoothstep9((t - qa) / L)) / t; };
    if (q >= qb) return 0.0;
    if (q >= qa) return gauss16(integrand, q, qb);
    return Iqa + std::log(qa / q);
  }

  void init(double R_, long long b_) {
    R = R_;
    b = b_;
    const double L = qb - qa;
    Iqa = gauss16([&](double t) { return (1.0 - smoothstep9((t - qa) / L)) / t; }, qa, qb);
  }

  double b_eff(double q) const {
    const double s = smoothstep9((q - qa) / (qb - qa));
    return 1.0 + static_cast<double>(b - 1) * (1.0 - s);
  }

  void eval(double q, double& logr, double& logrp, double& rpp_over_rp) const {
    const double be = b_eff(q);
    logr = std::log(R) + std::log(q) - static_cast<double>(b - 1) * transition_integral(q);
    logrp = logr + std::log(be) - std::log(q);
    const double L = qb - qa;
    const double bep = -static_cast<double>(b - 1) * smoothstep9_d((q - qa) / L) / L;
    rpp_over_rp = (be - 1.0) / q + bep / be;
  }

  double radius_at(double q) const {
    if (q <= 0.0) return 0.0;
    if (q >= 1.0) return R;
    double lr, lrp, ror;
    eval(q, lr, lrp, ror);
    return std::exp(lr);
  }

  // invert r -> q by bisection
  double q_of_radius(double r) const {
    double lo = 0.0, hi = 1.0;
    for (int it = 0; it < 64; ++it) {
      const double mid = 0.5 * (lo + hi);
      (radius_at(mid) < r ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
  }
};

struct Blend {
  Chart chart = Chart::Std;
  Complex center{0, 0};
  double r_in = 0, r_out = 0;

  double chi(const ChartPoint& x) const {
    double d;
    if (x.chart == chart) {
      d = std::abs(x.coord - center);
    } else {
      const double ax = std::abs(x.coord);
      if (ax < 1.0 / (std::abs(center) + r_out + 1.0)) return 0.0;
      d = std::abs(1.0 / x.coord - center);
    }
    if (d <= r_in) return 1.0;
    if (d >= r_out) return 0.0;
    return 1.0 - smoothstep9((d - r_in) / (r_out - r_in));
  }
};

ChartPoint to_chart(Chart chart, const ChartPoint& p) {
  if (p.chart == chart) return p;
  return ChartPoint{chart, 1.0 / p.coord};
}

ChartPoint chart_point(const SpherePoint& p) {
  if (p.at_infinity) return ChartPoint{Chart::Cap, Complex(0, 0)};
  if (std::abs(p.z) > 1.5) return ChartPoint{Chart::Cap, 1.0 / p.z};
  return ChartPoint{Chart::Std, p.z};
}

double log_section_norm_sq(const SpherePoint& p, const ChartPoint& x) {
  return x.chart == Chart::Std ? log_section_norm_sq(p, x.coord)
                               : log_section_norm_sq_cap(p, x.coord);
}

double log_fs_density(const ChartPoint& x) {
  return std::log(2.0) - 2.0 * std::log1p(std::norm(x.coord));
}

struct GridBuilder {
  const MarkedSphereModel& model;
  int resolution;
  std::vector<long long> orders;
  GridOptions opts;

  std::vector<PatchSpec> patches;
  std::vector<RadialMap> maps;
  std::vector<Blend> blends;
  struct Band {  // cylinder fringe band delegated to a disk
    int patch;
    Chart chart;
    Complex center;  // blend/base center, fixed across a family
    double radius;
  };
  std::vector<Band> bands;
  int cyl = -1;
  int stencil_w = 4;
  int fw = 2;

  RadialGrid g;

  GridBuilder(const MarkedSphereModel& m, int res, std::vector<long long> ords, GridOptions o)
      : model(m), resolution(res), orders(std::move(ords)), opts(o) {
    g.model_ = m;
    g.resolution_ = res;
  }

  double min_anchor_distance(const ChartPoint& c, int skip_site) const {
    double dmin = 1e30;
    auto consider = [&](const ChartPoint& a) {
      const ChartPoint ac = to_chart(c.chart, a);
      if (std::abs(ac.coord) > 3.2) return;
      const double d = std::abs(ac.coord - c.coord);
      if (d > 1e-12) dmin = std::min(dmin, d);
    };
    consider(ChartPoint{Chart::Std, Complex(0, 0)});
    consider(ChartPoint{Chart::Cap, Complex(0, 0)});
    for (std::size_t i = 0; i < model.size(); ++i) {
      if (static_cast<int>(i) == skip_site) continue;
      if (opts.moving_site == static_cast<int>(i) && opts.moving_base_valid) {
        consider(chart_point(opts.moving_base));
        continue;
      }
      consider(chart_point(model.marked_points[i]));
    }
    return dmin;
  }

  void make_patches() {
    const int nq = opts.disk_rings > 0 ? opts.disk_rings : std::max(16, resolution / 2);
    const int nth_d = opts.disk_angles > 0 ? opts.disk_angles : std::max(32, resolution / 2);
    const int nth_c = opts.cylinder_angles > 0 ? opts.cylinder_angles : 2 * resolution;
    if (nth_d % 2 != 0 || nth_c % 2 != 0)
      throw std::invalid_argument("angular resolutions must be even");
    stencil_w = 4; fw = 2;
    if (opts.moving_site >= 0) { stencil_w = 6; fw = 3; }

    long long b0 = 1, binf = 1;
    int site0 = -1, siteinf = -1;
    for (std::size_t i = 0; i < model.size(); ++i) {
      const SpherePoint& p = model.marked_points[i];
      if (p.at_infinity) { binf = orders[i]; siteinf = static_cast<int>(i); }
      else if (std::abs(p.z) < 1e-12) { b0 = orders[i]; site0 = static_cast<int>(i); }
    }

    auto add_disk = [&](Chart chart, Complex center, double R, long long b, int site,
                        double blend_in, double blend_out, Complex blend_center) {
      PatchSpec ps;
      ps.kind = PatchSpec::Kind::Disk;
      ps.chart = chart;
      ps.center = center;
      ps.radius = R;
      ps.b = b;
      ps.nr = nq;
      ps.nth = nth_d;
      ps.site = site;
      patches.push_back(ps);
      RadialMap m;
      m.init(R, b);
      maps.push_back(m);
      blends.push_back(Blend{chart, blend_center, blend_in, blend_out});
      return static_cast<int>(patches.size()) - 1;
    };

    const double f = opts.site_radius_factor;
    const int nth_c_shadow = nth_c; (void)nth_c_shadow;
    const double d0 = min_anchor_distance(ChartPoint{Chart::Std, Complex(0, 0)}, site0);
    const double dinf = min_anchor_distance(ChartPoint{Chart::Cap, Complex(0, 0)}, siteinf);
    const double R0 = std::clamp(f * d0, 0.08, 0.7);
    const double Rinf = std::clamp(f * dinf, 0.08, 0.7);
    add_disk(Chart::Std, Complex(0, 0), R0, b0, site0, 0.60 * R0, 0.85 * R0, Complex(0, 0));
    add_disk(Chart::Cap, Complex(0, 0), Rinf, binf, siteinf, 0.60 * Rinf, 0.85 * Rinf,
             Complex(0, 0));

    for (std::size_t i = 0; i < model.size(); ++i) {
      if (static_cast<int>(i) == site0 || static_cast<int>(i) == siteinf) continue;
      const bool moving = opts.moving_site == static_cast<int>(i);
      const SpherePoint pos = model.marked_points[i];
      const SpherePoint base = (moving && opts.moving_base_valid) ? opts.moving_base : pos;
      ChartPoint cb = chart_point(base);
      if (moving && !base.at_infinity && std::abs(base.z) <= 2.3)
        cb = ChartPoint{Chart::Std, base.z};  // keep translating patches in one chart
      const double dmin = min_anchor_distance(cb, static_cast<int>(i));
      // cylinder cell scale near the patch, and the inward dip of the rim
      // donor stencils in the log-radial cylinder coordinates
      const double hs_est =
          (std::log(1.0 / (0.25 * R0 * Rinf)) + 1e-9) / resolution;  // ~ (s1 - s0)/nr
      const double kappa = (0.5 * stencil_w + 0.5) * std::max(hs_est, 2.0 * M_PI / nth_c);
      if (moving) {
        const double margin = opts.moving_margin;
        const double Rout = std::min(0.8 * (dmin - margin), 1.45);
        const double cell = std::max(2.0 * M_PI / nth_c, hs_est) *
                                (std::abs(cb.coord) + 0.6 * Rout) + 1e-6;
        const double reach =
            Rout * (1.0 - (static_cast<double>(fw + stencil_w) - 2.5) / nq);
        const double rim = Rout * (1.0 - (fw - 0.5) / nq);
        const double rim_budget =
            rim - (std::abs(cb.coord) + rim) * (1.0 - std::exp(-kappa)) - margin - 0.5 * cell;
        const double band =
            std::min({0.55 * Rout, reach - margin - 0.5 * cell, rim_budget});
        if (band - margin < std::max(0.08 * Rout, 3.0 * cell))
          throw std::invalid_argument(
              "moving site: travel margin too large for the surrounding geometry "
              "(raise the resolution or shrink the base disk)");
        const ChartPoint cc = to_chart(cb.chart, chart_point(pos));
        const int idx = add_disk(cb.chart, cc.coord, Rout, orders[i], static_cast<int>(i),
                                 band + 0.08 * Rout,
                                 std::min(band + 0.35 * Rout, dmin - margin - 0.05), cb.coord);
        bands.push_back(Band{idx, cb.chart, cb.coord, band});
      } else {
        const double R = std::clamp(f * dmin, 0.05, 0.62);
        if (f * dmin < 0.05)
          throw std::invalid_argument("marked points too close together for this grid layout");
        // push the cylinder handoff as far from the cone as the donor window
        // allows (the unadapted cylinder rows near a cone dominate the
        // conservation defect) without letting the rim donors dip inside it
        const double cell = std::abs(cb.coord) * std::max(2.0 * M_PI / nth_c, hs_est) + 1e-6;
        const int idx = add_disk(cb.chart, cb.coord, R, orders[i], static_cast<int>(i), 0.0,
                                 0.0, cb.coord);
        const double reach = maps[idx].radius_at(1.0 - static_cast<double>(fw + stencil_w) / nq);
        const double rim = maps[idx].radius_at(1.0 - (fw - 0.5) / nq);
        const double rim_budget =
            rim - (std::abs(cb.coord) + rim) * (1.0 - std::exp(-kappa)) - 0.5 * cell;
        const double band = std::clamp(std::min(0.97 * (reach - 2.6 * cell), rim_budget),
                                       0.25 * R, 0.75 * R);
        if (band < std::max(0.2 * R, 1.8 * cell))
          throw std::invalid_argument(
              "grid layout: resolution too coarse for the marked-point separation");
        blends[idx].r_in = std::min(band + 0.05 * R, 0.90 * R);
        blends[idx].r_out = std::min(blends[idx].r_in + 0.22 * R, 0.96 * R);
        bands.push_back(Band{idx, cb.chart, cb.coord, band});
      }
    }

    // pairwise disjoint blend transitions keep the partition of unity exact;
    // cross-chart pairs are tested by mapping one support boundary into the
    // other patch's chart
    for (std::size_t a = 0; a < blends.size(); ++a)
      for (std::size_t b2 = a + 1; b2 < blends.size(); ++b2) {
        bool overlap;
        if (blends[a].chart == blends[b2].chart) {
          overlap = std::abs(blends[a].center - blends[b2].center) <
                    blends[a].r_out + blends[b2].r_out;
        } else {
          overlap = false;
          for (int k = 0; k < 32; ++k) {
            const double th = 2.0 * M_PI * k / 32.0;
            const Complex w =
                blends[b2].center + blends[b2].r_out * Complex(std::cos(th), std::sin(th));
            if (std::abs(w) < 1e-14) { overlap = true; break; }
            const Complex z = 1.0 / w;
            if (std::abs(z - blends[a].center) < blends[a].r_out) overlap = true;
          }
          // also guard against one support swallowing the other chart's origin
          if (std::abs(blends[a].center) + blends[a].r_out > 1e3) overlap = true;
        }
        if (overlap)
          throw std::invalid_argument("grid layout: blend supports of two patches overlap");
      }

    const double s0 = std::log(0.5 * R0);
    const double s1 = -std::log(0.5 * Rinf);
    PatchSpec cy;
    cy.kind = PatchSpec::Kind::Cylinder;
    cy.chart = Chart::Std;
    cy.s0 = s0;
    cy.s1 = s1;
    cy.nr = resolution;
    cy.nth = nth_c;
    cyl = static_cast<int>(patches.size());
    patches.push_back(cy);

    int base = 0;
    for (auto& p : patches) {
      p.base = base;
      base += p.nr * p.nth;
    }
  }

  ChartPoint node_pos(int pi, int i, int j) const {
    const PatchSpec& p = patches[pi];
    if (p.kind == PatchSpec::Kind::Cylinder) {
      const double s = p.s0 + (i + 0.5) * p.hq();
      const double th = j * p.hth();
      return ChartPoint{Chart::Std, std::exp(s) * Complex(std::cos(th), std::sin(th))};
    }
    double lr, lrp, ror;
    maps[pi].eval((i + 0.5) * p.hq(), lr, lrp, ror);
    const double th = j * p.hth();
    return ChartPoint{p.chart, p.center + std::exp(lr) * Complex(std::cos(th), std::sin(th))};
  }

  void make_nodes() {
    int total = 0;
    for (const auto& p : patches) total += p.nr * p.nth;
    g.status_.assign(total, NodeStatus::Interior);
    g.pos_.resize(total);
    g.patch_of_.resize(total);
    for (std::size_t pi = 0; pi < patches.size(); ++pi) {
      const PatchSpec& p = patches[pi];
      for (int i = 0; i < p.nr; ++i)
        for (int j = 0; j < p.nth; ++j) {
          const int n = p.node(i, j);
          g.patch_of_[n] = static_cast<int>(pi);
          g.pos_[n] = node_pos(static_cast<int>(pi), i, j);
        }
    }

    for (std::size_t pi = 0; pi < patches.size(); ++pi) {
      const PatchSpec& p = patches[pi];
      if (p.kind == PatchSpec::Kind::Disk) {
        for (int i = p.nr - fw; i < p.nr; ++i)
          for (int j = 0; j < p.nth; ++j) g.status_[p.node(i, j)] = NodeStatus::Fringe;
      } else {
        for (int j = 0; j < p.nth; ++j)
          for (int i = 0; i < p.nr; ++i)
            if (i < fw || i >= p.nr - fw) g.status_[p.node(i, j)] = NodeStatus::Fringe;
      }
    }

    // cylinder nodes under a site disk defer to it across a band around the
    // (fixed) blend center, so no finite-difference row straddles a cone point
    const PatchSpec& cp = patches[cyl];
    for (const Band& bd : bands) {
      for (int i = 0; i < cp.nr; ++i)
        for (int j = 0; j < cp.nth; ++j) {
          const int n = cp.node(i, j);
          const ChartPoint x = to_chart(bd.chart, g.pos_[n]);
          if (std::abs(x.coord - bd.center) < bd.radius) g.status_[n] = NodeStatus::Fringe;
        }
    }
    g.valid_count_ = total;
  }

  static void lagrange_1d(double t, int W, double* w) {
    for (int k = 0; k < W; ++k) {
      double num = 1, den = 1;
      for (int m = 0; m < W; ++m) {
        if (m == k) continue;
        num *= (t - m);
        den *= static_cast<double>(k - m);
      }
      w[k] = num / den;
    }
  }

  bool donor_stencil(int pi, const ChartPoint& x, int* nodes, double* weights) const {
    const PatchSpec& p = patches[pi];
    const int W = stencil_w;
    double q, tj;
    if (p.kind == PatchSpec::Kind::Cylinder) {
      const ChartPoint xs = to_chart(Chart::Std, x);
      const double a = std::abs(xs.coord);
      if (!(a > 0)) return false;
      const double s = std::log(a);
      if (s < p.s0 || s > p.s1) return false;
      q = (s - p.s0) / p.hq() - 0.5;
      double th = std::arg(xs.coord);
      if (th < 0) th += 2 * M_PI;
      tj = th / p.hth();
    } else {
      const ChartPoint xs = to_chart(p.chart, x);
      const Complex d = xs.coord - p.center;
      const double r = std::abs(d);
      if (r >= p.radius || !(r >= 0)) return false;
      q = (r > 0 ? maps[pi].q_of_radius(r) : 0.25 * p.hq()) / p.hq() - 0.5;
      if (q < -0.499) q = -0.499;
      double th = r > 0 ? std::arg(d) : 0.0;
      if (th < 0) th += 2 * M_PI;
      tj = th / p.hth();
    }
    // donors must be interior rows
    const int lo = p.kind == PatchSpec::Kind::Cylinder ? fw : 0;
    const int hi = p.nr - fw - W;
    if (hi < lo) return false;
    int ib = std::clamp(static_cast<int>(std::floor(q)) - (W - 2) / 2, lo, hi);
    if (q - ib < -1.0 || q - ib > W) {
#ifdef DEBUG_DONORS
      fprintf(stderr, "  reject: extrapolation q=%g ib=%d lo=%d hi=%d\n", q, ib, lo, hi);
#endif
      return false;
    }
    int jb = static_cast<int>(std::floor(tj)) - (W - 2) / 2;

    double wq[6], wt[6];
    lagrange_1d(q - ib, W, wq);
    lagrange_1d(tj - jb, W, wt);
    int idx = 0;
    for (int a = 0; a < W; ++a)
      for (int c = 0; c < W; ++c) {
        const int i = ib + a;
        const int j = ((jb + c) % p.nth + p.nth) % p.nth;
        const int n = p.node(i, j);
        if (g.status_[n] != NodeStatus::Interior) {
#ifdef DEBUG_DONORS
          fprintf(stderr, "  reject: donor (%d,%d) of patch %ld status=%d pos=%g%+gi\n", i, j,
                  (long)pi, (int)g.status_[n], g.pos_[n].coord.real(), g.pos_[n].coord.imag());
#endif
          return false;
        }
        nodes[idx] = n;
        weights[idx] = wq[a] * wt[c];
        ++idx;
      }
    return true;
  }

  void make_fringe() {
    int nodes[36];
    double w[36];
    for (std::size_t pi = 0; pi < patches.size(); ++pi) {
      const PatchSpec& p = patches[pi];
      for (int i = 0; i < p.nr; ++i)
        for (int j = 0; j < p.nth; ++j) {
          const int n = p.node(i, j);
          if (g.status_[n] != NodeStatus::Fringe) continue;
          bool ok = false;
          if (p.kind == PatchSpec::Kind::Disk) {
            ok = donor_stencil(cyl, g.pos_[n], nodes, w);
          } else {
            double best = 1e30;
            int bestp = -1;
            for (std::size_t dj = 0; dj < patches.size(); ++dj) {
              if (patches[dj].kind != PatchSpec::Kind::Disk) continue;
              const ChartPoint x = to_chart(patches[dj].chart, g.pos_[n]);
              const double rel = std::abs(x.coord - patches[dj].center) / patches[dj].radius;
              if (rel < 1.0 && rel < best) { best = rel; bestp = static_cast<int>(dj); }
            }
            if (bestp >= 0) ok = donor_stencil(bestp, g.pos_[n], nodes, w);
          }
          if (!ok) {
            char buf[240];
            snprintf(buf, sizeof(buf),
                     "grid build: no donors for fringe node (patch %d kind %d i=%d j=%d "
                     "chart %d coord %.4f%+.4fi); increase the resolution for this layout",
                     static_cast<int>(pi), static_cast<int>(p.kind), i, j,
                     static_cast<int>(g.pos_[n].chart), g.pos_[n].coord.real(),
                     g.pos_[n].coord.imag());
            throw std::invalid_argument(buf);
          }
          const int count = W() * W();
          std::size_t k = 0;
          while (k < static_cast<std::size_t>(count)) {
            RadialGrid::FringeRow row;
            row.node = n;
            for (int t = 0; t < 9; ++t) {
              if (k < static_cast<std::size_t>(count)) {
                row.donors[t] = nodes[k];
                row.w[t] = w[k];
                ++k;
              } else {
                row.donors[t] = nodes[0];
                row.w[t] = 0.0;
              }
            }
            g.fringe_.push_back(row);
          }
        }
    }
  }

  int W() const { return stencil_w; }

  void make_quadrature() {
    const int total = g.node_count();
    g.quad_w_.assign(total, 0.0);
    g.log_quad_w_.assign(total, -1e300);
    for (std::size_t pi = 0; pi < patches.size(); ++pi) {
      const PatchSpec& p = patches[pi];
      for (int i = 0; i < p.nr; ++i) {
        double corr = 1.0;
        if (p.kind == PatchSpec::Kind::Disk) {
          if (i == 0) corr = 13.0 / 12.0;
          else if (i == 1) corr = 7.0 / 8.0;
          else if (i == 2) corr = 25.0 / 24.0;
        }
        for (int j = 0; j < p.nth; ++j) {
          const int n = p.node(i, j);
          double log_cell;
          if (p.kind == PatchSpec::Kind::Cylinder) {
            const double s = p.s0 + (i + 0.5) * p.hq();
            log_cell = 2.0 * s + std::log(p.hq()) + std::log(p.hth());
          } else {
            double lr, lrp, ror;
            maps[pi].eval((i + 0.5) * p.hq(), lr, lrp, ror);
            log_cell = lr + lrp + std::log(p.hq()) + std::log(p.hth());
          }
          double blend;
          if (p.kind == PatchSpec::Kind::Disk) {
            blend = blends[pi].chi(g.pos_[n]);
          } else {
            double sch = 0.0;
            for (const auto& bl : blends) sch += bl.chi(g.pos_[n]);
            blend = std::max(0.0, 1.0 - sch);
          }
          blend *= corr;
          if (blend <= 0.0) continue;
          const double lw = log_cell + log_fs_density(g.pos_[n]) + std::log(blend);
          g.log_quad_w_[n] = lw;
          g.quad_w_[n] = std::exp(lw);
        }
      }
    }
  }

  void make_chordal_cache() {
    const int total = g.node_count();
    g.log_chord_.assign(total, std::vector<double>(model.size(), 0.0));
    for (int n = 0; n < total; ++n) {
      const int pi = g.patch_of_[n];
      const PatchSpec& p = patches[pi];
      for (std::size_t mpt = 0; mpt < model.size(); ++mpt) {
        const SpherePoint& mp = model.marked_points[mpt];
        if (p.kind == PatchSpec::Kind::Disk && p.site == static_cast<int>(mpt)) {
          const int i = (n - p.base) / p.nth;
          double lr, lrp, ror;
          maps[pi].eval((i + 0.5) * p.hq(), lr, lrp, ror);
          const ChartPoint& x = g.pos_[n];
          double lognorm = 2.0 * lr - std::log1p(std::norm(x.coord));
          if (!mp.at_infinity) {
            if (p.chart == Chart::Cap) lognorm += 2.0 * std::log(std::abs(mp.z));
            lognorm -= std::log1p(std::norm(mp.z));
          }
          g.log_chord_[n][mpt] = lognorm;
        } else {
          g.log_chord_[n][mpt] = log_section_norm_sq(mp, g.pos_[n]);
        }
      }
    }
  }

  void make_operator() {
    const int total = g.node_count();
    g.log_scale_ = Eigen::VectorXd::Zero(total);
    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(static_cast<std::size_t>(total) * 6);
    for (std::size_t pi = 0; pi < patches.size(); ++pi) {
      const PatchSpec& p = patches[pi];
      const double h = p.hq(), hth = p.hth();
      for (int i = 0; i < p.nr; ++i)
        for (int j = 0; j < p.nth; ++j) {
          const int n = p.node(i, j);
          if (g.status_[n] != NodeStatus::Interior) continue;
          const int jp = p.node(i, (j + 1) % p.nth);
          const int jm = p.node(i, (j - 1 + p.nth) % p.nth);
          // flux (divergence) form: r r' Delta u = d_q(alpha u_q) + gamma u_thth
          // with alpha = r/r' at the cell faces, gamma = r'/r at the node, so
          // the quadrature-weighted row sums telescope within each patch
          double cplus, cminus, cth, log_pre;
          int np, nm;
          if (p.kind == PatchSpec::Kind::Cylinder) {
            const double s = p.s0 + (i + 0.5) * h;
            cplus = cminus = 1.0;
            cth = (h / hth) * (h / hth);
            log_pre = 2.0 * std::log(std::cosh(s)) - 2.0 * std::log(h);
            np = p.node(i + 1, j);
            nm = p.node(i - 1, j);
          } else {
            const RadialMap& mp = maps[pi];
            double lr, lrp, ror;
            mp.eval((i + 0.5) * h, lr, lrp, ror);
            auto alpha_face = [&](double qf) {
              if (qf <= 0.0) return 0.0;
              double flr, flrp, fror;
              mp.eval(qf, flr, flrp, fror);
              return std::exp(flr - flrp) * std::exp(lrp - lr);
              // normalized by the node value of r/r' to keep coefficients O(1)
            };
            cplus = alpha_face((i + 1) * h);
            cminus = alpha_face(i * h);
            const double rp_over_r = std::exp(lrp - lr);
            cth = rp_over_r * rp_over_r * (h / hth) * (h / hth);
            const double a2 = std::norm(g.pos_[n].coord);
            // Lu = (1+|z|^2)^2 / (4 r r' h^2) * (r/r')(node) * row u
            log_pre = 2.0 * std::log1p(a2) - std::log(4.0) - 2.0 * lrp - 2.0 * std::log(h);
            np = p.node(i + 1, j);
            nm = i > 0 ? p.node(i - 1, j) : n;  // zero inner flux at the axis
          }
          const double rowmax = std::max({std::abs(cplus), std::abs(cminus), cth, 1.0});
          const double inv = 1.0 / rowmax;
          // off-diagonal part only; the diagonal is applied as the exact row
          // sum so constants are annihilated to the last bit
          trips.emplace_back(n, np, cplus * inv);
          trips.emplace_back(n, nm, cminus * inv);
          trips.emplace_back(n, jp, cth * inv);
          trips.emplace_back(n, jm, cth * inv);
          g.log_scale_(n) = -(log_pre + std::log(rowmax));
        }
    }
    g.A_.resize(total, total);
    g.A_.setFromTriplets(trips.begin(), trips.end());
    g.row_sum_ = g.A_ * Eigen::VectorXd::Ones(total);
  }
};

std::shared_ptr<const RadialGrid> RadialGrid::build(const MarkedSphereModel& model, int resolution,
                                                    const std::vector<long long>& cluster_orders,
                                                    const GridOptions& opts) {
  model.validate();
  if (resolution < 8) throw std::invalid_argument("grid resolution must be at least 8 rings");
  if (cluster_orders.size() != model.size())
    throw std::invalid_argument("one cluster order per marked point required");
  for (long long b : cluster_orders)
    if (b < 1) throw std::invalid_argument("cluster exponents must be >= 1");

  GridBuilder builder(model, resolution, cluster_orders, opts);
  builder.make_patches();
  builder.make_nodes();
  builder.make_fringe();
  builder.make_quadrature();
  builder.make_chordal_cache();
  builder.make_operator();
  for (std::size_t pi = 0; pi < builder.blends.size(); ++pi) {
    builder.patches[pi].blend_center = builder.blends[pi].center;
    builder.patches[pi].blend_in = builder.blends[pi].r_in;
    builder.patches[pi].blend_out = builder.blends[pi].r_out;
  }
  builder.g.patches_ = builder.patches;

  return std::make_shared<const RadialGrid>(std::move(builder.g));
}

double RadialGrid::interpolate(const Eigen::ArrayXd& field, const ChartPoint& x) const {
  auto try_patch = [&](int pi, double& out) -> bool {
    const PatchSpec& p = patches_[pi];
    double q, tj;
    if (p.kind == PatchSpec::Kind::Cylinder) {
      const ChartPoint xs = to_chart(Chart::Std, x);
      const double a = std::abs(xs.coord);
      if (!(a > 0)) return false;
      const double s = std::log(a);
      if (s < p.s0 + 0.5 * p.hq() || s > p.s1 - 0.5 * p.hq()) return false;
      q = (s - p.s0) / p.hq() - 0.5;
      double th = std::arg(xs.coord);
      if (th < 0) th += 2 * M_PI;
      tj = th / p.hth();
    } else {
      const ChartPoint xs = to_chart(p.chart, x);
      const Complex d = xs.coord - p.center;
      const double r = std::abs(d);
      auto ring_r = [&](int i) { return std::abs(pos_[p.node(i, 0)].coord - p.center); };
      if (!(r >= 0) || r >= ring_r(p.nr - 1)) return false;
      if (r <= ring_r(0)) {
        q = 0.0;
      } else {
        int lo = 0, hi = p.nr - 1;
        while (hi - lo > 1) {
          const int mid = (lo + hi) / 2;
          (ring_r(mid) < r ? lo : hi) = mid;
        }
        const double r0 = ring_r(lo), r1 = ring_r(hi);
        q = lo + (r - r0) / (r1 - r0);
      }
      double th = r > 0 ? std::arg(d) : 0.0;
      if (th < 0) th += 2 * M_PI;
      tj = th / p.hth();
    }
    const int W = 3;
    const int ib = std::clamp(static_cast<int>(std::floor(q)) - (W - 2) / 2, 0, p.nr - W);
    const int jb = static_cast<int>(std::floor(tj)) - (W - 2) / 2;
    double wq[3], wt[3];
    GridBuilder::lagrange_1d(q - ib, W, wq);
    GridBuilder::lagrange_1d(tj - jb, W, wt);
    double acc = 0.0;
    for (int a2 = 0; a2 < W; ++a2)
      for (int c = 0; c < W; ++c) {
        const int n = p.node(ib + a2, ((jb + c) % p.nth + p.nth) % p.nth);
        acc += wq[a2] * wt[c] * field(n);
      }
    out = acc;
    return true;
  };

  std::vector<std::pair<double, int>> order;
  for (std::size_t pi = 0; pi < patches_.size(); ++pi) {
    if (patches_[pi].kind != PatchSpec::Kind::Disk) continue;
    const ChartPoint xs = to_chart(patches_[pi].chart, x);
    order.emplace_back(std::abs(xs.coord - patches_[pi].center) / patches_[pi].radius,
                       static_cast<int>(pi));
  }
  std::sort(order.begin(), order.end());
  double out = 0.0;
  for (const auto& [d, pi] : order)
    if (d < 0.9 && try_patch(pi, out)) return out;
  for (std::size_t pi = 0; pi < patches_.size(); ++pi)
    if (patches_[pi].kind == PatchSpec::Kind::Cylinder && try_patch(static_cast<int>(pi), out))
      return out;
  for (const auto& [d, pi] : order)
    if (try_patch(pi, out)) return out;
  throw std::runtime_error("interpolate: point not covered by any patch");
}

double RadialGrid::chordal_to(int n, const SpherePoint& p) const {
  return std::exp(0.5 * log_section_norm_sq(p, pos_[n]));
}

SpherePoint RadialGrid::node_sphere_point(int n) const {
  const ChartPoint& x = pos_[n];
  if (x.chart == Chart::Std) return SpherePoint::finite(x.coord);
  if (std::abs(x.coord) < 1e-140) return SpherePoint::infinity();
  return SpherePoint::finite(1.0 / x.coord);
}

GridField evaluate_on_grid(const GridPtr& grid,
                           const std::function<double(const ChartPoint&)>& f) {
  GridField out(grid);
  for (int n = 0; n < grid->node_count(); ++n)
    if (grid->status(n) != NodeStatus::Dead) out.v(n) = f(grid->point(n));
  return out;
}

GridField laplacian(const GridField& field) {
  const RadialGrid& g = *field.grid;
  if (field.v.size() != g.node_count())
    throw std::invalid_argument("laplacian: field does not live on this grid");
  GridField out(field.grid);
  const auto& A = g.scaled_operator();
  for (int n = 0; n < g.node_count(); ++n) {
    if (g.status(n) != NodeStatus::Interior) continue;
    double acc = 0.0;
    for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(A, n); it; ++it)
      acc += it.value() * (field.v(it.col()) - field.v(n));
    out.v(n) = std::exp(-g.log_scale()(n)) * acc;
  }
  return out;
}

void sync_fringe(GridField& field) {
  const RadialGrid& g = *field.grid;
  std::map<int, double> acc;
  for (const auto& row : g.fringe_rows()) {
    double s = 0.0;
    for (int k = 0; k < 9; ++k) s += row.w[k] * field.v(row.donors[k]);
    acc[row.node] += s;
  }
  for (const auto& [n, val] : acc) field.v(n) = val;
}

double integrate(const GridField& field) {
  const RadialGrid& g = *field.grid;
  double acc = 0.0;
  for (int n = 0; n < g.node_count(); ++n)
    if (g.quad_positive(n)) acc += g.quad_weight(n) * field.v(n);
  return acc;
}

Extrema extrema(const GridField& field) {
  const RadialGrid& g = *field.grid;
  Extrema e{-1e300, 1e300, -1, -1};
  for (int n = 0; n < g.node_count(); ++n) {
    if (g.status(n) == NodeStatus::Dead) continue;
    if (field.v(n) > e.sup) { e.sup = field.v(n); e.argmax = n; }
    if (field.v(n) < e.inf) { e.inf = field.v(n); e.argmin = n; }
  }
  return e;
}

}  // namespace kelab
