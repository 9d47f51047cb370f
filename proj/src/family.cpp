#include "kelab/family.hpp"

#include <atomic>
#include <stdexcept>
#include <thread>

namespace kelab {

std::vector<Complex> FamilySpec::base_nodes() const {
  std::vector<Complex> out;
  for (int j = 0; j < base_n; ++j)
    for (int k = 0; k < base_n; ++k) {
      const double re = base_n == 1 ? 0.0 : -base_radius + 2.0 * base_radius * k / (base_n - 1);
      const double im = base_n == 1 ? 0.0 : -base_radius + 2.0 * base_radius * j / (base_n - 1);
      const Complex y(re, im);
      if (!clip_to_disk || std::abs(y) <= base_radius * 1.0001) out.push_back(y);
    }
  return out;
}

MarkedSphereModel FamilySpec::fiber_model(Complex y) const {
  MarkedSphereModel m = reference_model;
  if (moving_index >= 0) m.marked_points[moving_index].z += y;
  return m;
}

namespace {

GridOptions family_grid_options(const FamilySpec& spec) {
  GridOptions o;
  if (spec.moving_index >= 0) {
    o.moving_site = spec.moving_index;
    o.moving_margin = spec.base_radius * 1.05 * (spec.clip_to_disk ? 1.0 : 1.45);
    o.moving_base = spec.reference_model.marked_points[spec.moving_index];
    o.moving_base_valid = true;
    o.disk_rings = 48;  // the translating patch needs donor reach at any margin
  }
  o.cylinder_angles = 0;  // default 2 x resolution
  return o;
}

std::vector<long long> family_orders(const FamilySpec& spec) {
  std::vector<long long> orders(spec.reference_model.size(), 1);
  const Rational t_max = spec.lc_fibers ? Rational(39, 40) : Rational(1);
  for (const auto& e : spec.divisor.entries) {
    Rational d = e.coefficient;
    if (spec.lc_fibers) d = d * t_max;
    orders[e.point] = cluster_order(d);
  }
  return orders;
}

}  // namespace

RelativeDensityField solve_family(const FamilySpec& spec, const FamilyOptions& opts) {
  auto pair = classify_pair(spec.reference_model, spec.divisor);
  if (pair.classification == PairClass::Invalid)
    throw std::invalid_argument("solve_family: invalid fiber divisor");
  if (spec.lc_fibers && pair.classification != PairClass::LCNotKLT)
    throw std::invalid_argument("solve_family: lc_fibers set but the pair is not LC");
  if (!spec.lc_fibers && pair.classification != PairClass::KLT)
    throw std::invalid_argument("solve_family: KLT fibers requested but the pair is LC");
  if (!pair.log_general_type && !spec.lc_fibers)
    throw std::invalid_argument("solve_family: fibers are not of log general type");

  RelativeDensityField field;
  field.spec = spec;
  field.base = spec.base_nodes();
  {
    int li = 0;
    for (int j = 0; j < spec.base_n; ++j)
      for (int k = 0; k < spec.base_n; ++k) {
        const double re =
            spec.base_n == 1 ? 0.0 : -spec.base_radius + 2.0 * spec.base_radius * k /
                                         (spec.base_n - 1);
        const double im =
            spec.base_n == 1 ? 0.0 : -spec.base_radius + 2.0 * spec.base_radius * j /
                                         (spec.base_n - 1);
        if (!spec.clip_to_disk || std::abs(Complex(re, im)) <= spec.base_radius * 1.0001)
          field.lattice_index.push_back(j * spec.base_n + k);
        (void)li;
      }
  }

  const auto orders = family_orders(spec);
  const auto gopts = family_grid_options(spec);
  field.reference_grid =
      RadialGrid::build(spec.reference_model, opts.resolution, orders, gopts);

  const std::size_t F = field.base.size();
  field.psi.assign(F, Eigen::ArrayXd());
  field.areas.assign(F, 0.0);
  std::vector<int> status(F, 0);

  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const std::size_t f = next.fetch_add(1);
      if (f >= F) return;
      try {
        const MarkedSphereModel m = spec.fiber_model(field.base[f]);
        GridPtr g = spec.moving_index >= 0
                        ? RadialGrid::build(m, opts.resolution, orders, gopts)
                        : field.reference_grid;
        Eigen::ArrayXd logg;
        double area;
        if (!spec.lc_fibers) {
          auto res = solve_canonical_KE_klt(m, spec.divisor, g, opts.schedule, opts.tol);
          logg = res.log_density;
          area = res.report.area;
        } else {
          SweepOptions so;
          so.schedule = opts.schedule;
          so.tol = opts.tol;
          auto sweep = sweep_t(m, spec.divisor, opts.t_values, g, so);
          auto lim = lc_limit(sweep);
          logg = lim.log_density;
          area = sweep.areas.back();
        }
        // restrict to the shared cylinder lattice, adding the FS term of the
        // trivialized relative weight
        const auto& patches = g->patches();
        const PatchSpec& cyl = patches.back();
        Eigen::ArrayXd psi(cyl.nr * cyl.nth);
        for (int i = 0; i < cyl.nr; ++i)
          for (int j = 0; j < cyl.nth; ++j) {
            const int n = cyl.node(i, j);
            psi(i * cyl.nth + j) = logg(n) + log_fs_density(g->point(n));
          }
        field.psi[f] = std::move(psi);
        field.areas[f] = area;
      } catch (const std::exception&) {
        status[f] = 1;
      }
    }
  };
  std::vector<std::thread> pool;
  const int W = std::max(1, opts.workers);
  for (int w = 0; w < W; ++w) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  for (std::size_t f = 0; f < F; ++f)
    if (status[f]) field.failed.push_back(static_cast<int>(f));
  return field;
}

namespace {

struct LatticeView {
  // maps clipped base nodes back onto the full lattice for stencils
  int n;
  std::vector<int> slot;  // -1 where outside the disk

  LatticeView(const RelativeDensityField& f) : n(f.spec.base_n), slot(n * n, -1) {
    for (std::size_t k = 0; k < f.lattice_index.size(); ++k)
      slot[f.lattice_index[k]] = static_cast<int>(k);
  }
  int at(int j, int k) const {
    if (j < 0 || k < 0 || j >= n || k >= n) return -1;
    return slot[j * n + k];
  }
};

}  // namespace

PshReport psh_test(const RelativeDensityField& field, double exclusion) {
  if (!field.complete())
    throw std::invalid_argument("psh_test: field is incomplete (failed fibers present)");
  const FamilySpec& spec = field.spec;
  const RadialGrid& g = *field.reference_grid;
  const PatchSpec& cyl = g.patches().back();
  const double hy = spec.base_n > 1 ? 2.0 * spec.base_radius / (spec.base_n - 1) : 1.0;
  LatticeView lat(field);

  PshReport rep;
  rep.min_eigenvalue = 1e300;

  const double hs = cyl.hq(), hth = cyl.hth();
  for (int j = 1; j + 1 < spec.base_n; ++j)
    for (int k = 1; k + 1 < spec.base_n; ++k) {
      const int c = lat.at(j, k);
      if (c < 0) continue;
      const int yE = lat.at(j, k + 1), yW = lat.at(j, k - 1);
      const int yN = lat.at(j + 1, k), yS = lat.at(j - 1, k);
      const int yNE = lat.at(j + 1, k + 1), yNW = lat.at(j + 1, k - 1);
      const int ySE = lat.at(j - 1, k + 1), ySW = lat.at(j - 1, k - 1);
      if (yE < 0 || yW < 0 || yN < 0 || yS < 0 || yNE < 0 || yNW < 0 || ySE < 0 || ySW < 0)
        continue;
      const Complex y = field.base[c];

      for (int i = 2; i + 2 < cyl.nr; ++i)
        for (int t = 0; t < cyl.nth; ++t) {
          const int n = cyl.node(i, t);
          if (g.status(n) != NodeStatus::Interior) continue;
          const Complex x = g.point(n).coord;
          // exclusion near every singular track across the y-stencil
          bool excl = false;
          for (std::size_t p = 0; p < spec.reference_model.size(); ++p) {
            Complex pos = spec.reference_model.marked_points[p].at_infinity
                              ? Complex(1e9, 0)
                              : spec.reference_model.marked_points[p].z;
            if (spec.reference_model.marked_points[p].at_infinity) {
              if (std::abs(x) > 1.0 / exclusion) excl = true;
              continue;
            }
            double dist = std::abs(x - pos);
            if (static_cast<int>(p) == spec.moving_index)
              dist = std::max(0.0, dist - std::abs(y) - 1.5 * hy);
            if (dist < exclusion) excl = true;
          }
          if (excl) {
            ++rep.excluded;
            continue;
          }
          const int q = i * cyl.nth + t;
          auto PSI = [&](int slot2) { return field.psi[slot2](q); };
          const double p0 = PSI(c);

          // fiber direction: dz dz~ = (1/4) e^{-2s}(psi_ss + psi_thth)
          const int qsp = (i + 1) * cyl.nth + t, qsm = (i - 1) * cyl.nth + t;
          const int qtp = i * cyl.nth + (t + 1) % cyl.nth,
                    qtm = i * cyl.nth + (t - 1 + cyl.nth) % cyl.nth;
          const double s = cyl.s0 + (i + 0.5) * hs;
          const double lap_x = (field.psi[c](qsp) + field.psi[c](qsm) - 2 * p0) / (hs * hs) +
                               (field.psi[c](qtp) + field.psi[c](qtm) - 2 * p0) / (hth * hth);
          const double a = 0.25 * std::exp(-2.0 * s) * lap_x;

          // base direction: dy dy~ = (1/4)(four-point laplacian)
          const double lap_y =
              (PSI(yE) + PSI(yW) + PSI(yN) + PSI(yS) - 4.0 * p0) / (hy * hy);
          const double b = 0.25 * lap_y;

          // mixed term: dz of the y-antiholomorphic derivative
          auto dybar = [&](int qq) {
            const double dre = (field.psi[yE](qq) - field.psi[yW](qq)) / (2 * hy);
            const double dim = (field.psi[yN](qq) - field.psi[yS](qq)) / (2 * hy);
            return 0.5 * Complex(dre, dim);
          };
          const Complex ws = (dybar(qsp) - dybar(qsm)) / (2 * hs);
          const Complex wt = (dybar(qtp) - dybar(qtm)) / (2 * hth);
          const double th = t * hth;
          const Complex cmix =
              0.5 * std::exp(-s) * Complex(std::cos(th), -std::sin(th)) *
              (ws - Complex(0, 1) * wt);

          const double tr = 0.5 * (a + b);
          const double det = std::sqrt(0.25 * (a - b) * (a - b) + std::norm(cmix));
          const double lam = tr - det;
          ++rep.tested;
          if (lam < rep.min_eigenvalue) {
            rep.min_eigenvalue = lam;
            rep.arg_x = x;
            rep.arg_y = y;
          }
        }
    }
  return rep;
}

PshReport fiber_bergman_psh_test(const FamilySpec& spec, int degree, const FamilyOptions& opts,
                                 bool flip_sign) {
  const auto orders = family_orders(spec);
  const auto gopts = family_grid_options(spec);
  RelativeDensityField field;
  field.spec = spec;
  field.base = spec.base_nodes();
  {
    for (int j = 0; j < spec.base_n; ++j)
      for (int k = 0; k < spec.base_n; ++k) {
        const double re =
            spec.base_n == 1 ? 0.0 : -spec.base_radius + 2.0 * spec.base_radius * k /
                                         (spec.base_n - 1);
        const double im =
            spec.base_n == 1 ? 0.0 : -spec.base_radius + 2.0 * spec.base_radius * j /
                                         (spec.base_n - 1);
        if (!spec.clip_to_disk || std::abs(Complex(re, im)) <= spec.base_radius * 1.0001)
          field.lattice_index.push_back(j * spec.base_n + k);
      }
  }
  field.reference_grid =
      RadialGrid::build(spec.reference_model, opts.resolution, orders, gopts);

  const std::size_t F = field.base.size();
  field.psi.assign(F, Eigen::ArrayXd());
  field.areas.assign(F, 0.0);

  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const std::size_t f = next.fetch_add(1);
      if (f >= F) return;
      const MarkedSphereModel m = spec.fiber_model(field.base[f]);
      GridPtr g = spec.moving_index >= 0
                      ? RadialGrid::build(m, opts.resolution, orders, gopts)
                      : field.reference_grid;
      AnalyticWeight pack = canonical_pack(m, spec.divisor, 1);
      if (flip_sign)
        for (auto& [p, cc] : pack.poles) cc = -cc;
      SectionBasis basis{degree};
      auto quad = BergmanQuadrature::build(g, pack.radial_exponents(), degree);
      auto ks = orthonormalize(basis, gram_matrix(basis, pack, quad));
      Eigen::ArrayXd lk = ks->log_kernel_on_grid(g);

      const PatchSpec& cyl = g->patches().back();
      Eigen::ArrayXd psi(cyl.nr * cyl.nth);
      for (int i = 0; i < cyl.nr; ++i)
        for (int j = 0; j < cyl.nth; ++j) {
          const int n = cyl.node(i, j);
          // trivialized log kernel: FS-relative value plus degree log(1+|z|^2)
          psi(i * cyl.nth + j) =
              lk(n) + degree * std::log1p(std::norm(g->point(n).coord));
        }
      field.psi[f] = std::move(psi);
    }
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < std::max(1, opts.workers); ++w) pool.emplace_back(worker);
  for (auto& th : pool) th.join();

  return psh_test(field, 0.12);
}

}  // namespace kelab
