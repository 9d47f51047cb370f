#include "kelab/bergman.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <stdexcept>

namespace kelab {

namespace {

double log1p_sq(const Complex& c) { return std::log1p(std::norm(c)); }

// half the log binomial coefficient: the FS-orthonormal prescaling that keeps
// monomial Gram matrices well conditioned at high degree
double half_log_binom(int beta, int j) {
  return 0.5 * (std::lgamma(beta + 1.0) - std::lgamma(j + 1.0) - std::lgamma(beta - j + 1.0));
}

// |t|, s factors of the FS-normalized monomials at a point
struct PointFactors {
  double logt, logs;  // log|t|, log s
  double theta;       // arg of the chart coordinate
  bool cap;
};

PointFactors factors_at(const ChartPoint& x) {
  PointFactors f;
  const double l1 = log1p_sq(x.coord);
  const double a = std::abs(x.coord);
  f.logt = (a > 0 ? std::log(a) : -1e300) - 0.5 * l1;
  f.logs = -0.5 * l1;
  f.theta = (a > 0) ? std::arg(x.coord) : 0.0;
  f.cap = x.chart == Chart::Cap;
  return f;
}

// real radial profiles rho_j of the FS-normalized monomials on a ring
Eigen::ArrayXd ring_profiles(const BergmanQuadrature::Ring& ring, int beta) {
  // origin ring: radius in the ring's chart
  const double r = ring.radius;
  const double l1 = std::log1p(r * r);
  const double logt = std::log(r) - 0.5 * l1;
  const double logs = -0.5 * l1;
  Eigen::ArrayXd rho(beta + 1);
  for (int j = 0; j <= beta; ++j) {
    const double lg = (ring.chart == Chart::Std
                           ? j * logt + (beta - j) * logs
                           : (beta - j) * logt + j * logs) +
                      half_log_binom(beta, j);
    rho(j) = std::exp(std::max(lg, -745.0));
  }
  return rho;
}

}  // namespace

Eigen::VectorXcd SectionBasis::values_at(const ChartPoint& x) const {
  PointFactors f = factors_at(x);
  Eigen::VectorXcd v(dim());
  for (int j = 0; j <= degree; ++j) {
    const int tp = f.cap ? degree - j : j;
    const int sp = degree - tp;
    const double lg = tp * f.logt + sp * f.logs + half_log_binom(degree, j);
    const double ph = tp * f.theta;
    v(j) = std::exp(std::max(lg, -745.0)) * Complex(std::cos(ph), std::sin(ph));
  }
  return v;
}

double AnalyticWeight::log_at(const ChartPoint& x) const {
  double acc = constant;
  for (const auto& [p, c] : poles) acc += c * log_section_norm_sq(p, x);
  for (const auto& kt : kernels) acc += kt.power * kt.kernel->log_kernel_at(x);
  for (const auto& ft : fields) acc += ft.power * ft.grid->interpolate(ft.values, x);
  return acc;
}

double AnalyticWeight::pole_coefficient(const SpherePoint& p) const {
  double c = 0.0;
  for (const auto& [q, cq] : poles)
    if (chordal_distance(p, q) < 1e-9) c += cq;
  return c;
}

std::vector<std::pair<SpherePoint, double>> AnalyticWeight::radial_exponents() const {
  std::vector<std::pair<SpherePoint, double>> out;
  for (const auto& [p, c] : poles) {
    bool merged = false;
    for (auto& [q, e] : out)
      if (chordal_distance(p, q) < 1e-9) { e -= c; merged = true; }
    if (!merged) out.emplace_back(p, -c);
  }
  return out;
}

BergmanQuadrature BergmanQuadrature::build(
    const GridPtr& layout, const std::vector<std::pair<SpherePoint, double>>& exponents,
    int max_section_degree, int radial_nodes) {
  BergmanQuadrature q;
  const auto& model = layout->model();
  const int Mfull = 2 * max_section_degree + 16;

  auto exponent_at = [&](const SpherePoint& p) {
    double e = 0.0;
    for (const auto& [s, es] : exponents)
      if (chordal_distance(p, s) < 1e-9) e += es;
    return e;
  };

  auto chi_of_disk = [&](const PatchSpec& p, const ChartPoint& x) {
    const ChartPoint xs = to_chart(p.chart, x);
    const double d = std::abs(xs.coord - p.blend_center);
    if (d <= p.blend_in) return 1.0;
    if (d >= p.blend_out) return 0.0;
    const double t = (d - p.blend_in) / (p.blend_out - p.blend_in);
    const double t2 = t * t;
    return 1.0 - t2 * t2 * t * (126.0 + t * (-420.0 + t * (540.0 + t * (-315.0 + t * 70.0))));
  };

  auto add_ring = [&](Chart chart, Complex center, double radius, int M,
                      const std::function<double(const ChartPoint&)>& log_base) {
    Ring ring;
    ring.chart = chart;
    ring.center = center;
    ring.radius = radius;
    ring.origin_centered = std::abs(center) < 1e-14;
    ring.ntheta = M;
    ring.log_w.resize(M);
    ring.points.resize(M);
    bool any = false;
    for (int m = 0; m < M; ++m) {
      const double th = 2.0 * M_PI * m / M;
      const Complex z = center + radius * Complex(std::cos(th), std::sin(th));
      ring.points(m) = z;
      const double lw = log_base(ChartPoint{chart, z});
      ring.log_w(m) = lw;
      if (lw > -1e290) any = true;
    }
    if (!any) return;
    q.total_points += M;
    q.rings.push_back(std::move(ring));
  };

  for (const auto& p : layout->patches()) {
    if (p.kind != PatchSpec::Kind::Disk) continue;
    SpherePoint site = p.site >= 0 ? model.marked_points[p.site]
                                   : (p.chart == Chart::Std && std::abs(p.center) < 1e-12
                                          ? SpherePoint::finite({0, 0})
                                          : SpherePoint::infinity());
    // the local exponent of the weight at this patch's own center
    double e = 0.0;
    if (std::abs(p.center) < 1e-12 || p.site >= 0) {
      SpherePoint center_pt = p.site >= 0 ? model.marked_points[p.site] : site;
      e = exponent_at(center_pt);
    }
    const bool origin = std::abs(p.center) < 1e-14;
    const double dist_origin = std::abs(p.center);
    auto M_for = [&](double r) {
      if (origin) return Mfull;
      const int osc = static_cast<int>(2.6 * max_section_degree * r /
                                       std::max(0.05, dist_origin - r)) + 48;
      return std::min(Mfull, osc + (osc % 2));
    };

    // singular panel [0, blend_in] with the exact radial exponent
    {
      GaussRule jac = gauss_jacobi01(radial_nodes, 2.0 * e + 1.0);
      const double a = p.blend_in;
      for (int k = 0; k < radial_nodes; ++k) {
        const double r = a * jac.x(k);
        const double lw0 = std::log(jac.w(k)) + (2.0 * e + 2.0) * std::log(a) -
                           2.0 * e * std::log(r);
        const int M = M_for(r);
        add_ring(p.chart, p.center, r, M, [&](const ChartPoint& x) {
          return lw0 + std::log(2.0 * M_PI / M) + log_fs_density(x);
        });
      }
    }
    // smooth transition panel [blend_in, blend_out] weighted by chi
    {
      GaussRule leg = gauss_legendre(radial_nodes);
      const double a = p.blend_in, b = p.blend_out;
      const double half = 0.5 * (b - a), mid = 0.5 * (a + b);
      for (int k = 0; k < radial_nodes; ++k) {
        const double r = mid + half * leg.x(k);
        const double lw0 = std::log(leg.w(k) * half * r);
        const int M = M_for(r);
        add_ring(p.chart, p.center, r, M, [&](const ChartPoint& x) {
          const double chi = chi_of_disk(p, x);
          return chi > 0 ? lw0 + std::log(2.0 * M_PI / M) + log_fs_density(x) + std::log(chi)
                         : -1e300;
        });
      }
    }
  }

  // cylinder: log-radial panels split at the cap blend radii
  for (const auto& p : layout->patches()) {
    if (p.kind != PatchSpec::Kind::Cylinder) continue;
    std::vector<double> cuts = {p.s0, p.s1};
    for (const auto& d : layout->patches()) {
      if (d.kind != PatchSpec::Kind::Disk || std::abs(d.center) > 1e-14) continue;
      for (double r : {d.blend_in, d.blend_out}) {
        const double s = d.chart == Chart::Std ? std::log(r) : -std::log(r);
        if (s > p.s0 + 1e-9 && s < p.s1 - 1e-9) cuts.push_back(s);
      }
    }
    std::sort(cuts.begin(), cuts.end());
    GaussRule leg = gauss_legendre(16);
    for (std::size_t c = 0; c + 1 < cuts.size(); ++c) {
      const double a = cuts[c], b = cuts[c + 1];
      const int sub = std::max(1, static_cast<int>((b - a) / 0.4));
      for (int s2 = 0; s2 < sub; ++s2) {
        const double aa = a + (b - a) * s2 / sub, bb = a + (b - a) * (s2 + 1) / sub;
        const double half = 0.5 * (bb - aa), mid = 0.5 * (aa + bb);
        for (int k = 0; k < 16; ++k) {
          const double s = mid + half * leg.x(k);
          const double lw0 = std::log(leg.w(k) * half) + 2.0 * s;
          add_ring(Chart::Std, Complex(0, 0), std::exp(s), Mfull, [&](const ChartPoint& x) {
            double chi_sum = 0.0;
            for (const auto& d : layout->patches())
              if (d.kind == PatchSpec::Kind::Disk) chi_sum += chi_of_disk(d, x);
            const double blend = 1.0 - chi_sum;
            return blend > 1e-15
                       ? lw0 + std::log(2.0 * M_PI / Mfull) + log_fs_density(x) + std::log(blend)
                       : -1e300;
          });
        }
      }
    }
  }
  return q;
}

namespace {

// log weight of an AnalyticWeight on a full ring (banded kernel path on
// origin-centered rings)
Eigen::ArrayXd weight_log_on_ring(const AnalyticWeight& w, const BergmanQuadrature::Ring& ring);

template <typename Real>
void accumulate_ring_banded(Eigen::Matrix<std::complex<Real>, Eigen::Dynamic, Eigen::Dynamic>& G,
                            const BergmanQuadrature::Ring& ring, int beta,
                            const Eigen::ArrayXd& log_weight_total) {
  const int M = ring.ntheta;
  Eigen::ArrayXd rho = ring_profiles(ring, beta);
  // c_d = sum_m wfull_m e^{i d theta_m}, wfull = exp(log_w - phi)
  std::vector<std::complex<Real>> c(beta + 1, std::complex<Real>(0, 0));
  for (int m = 0; m < M; ++m) {
    const double lw = log_weight_total(m);
    if (lw < -700.0) continue;
    const Real wm = static_cast<Real>(std::exp(lw));
    const double th = 2.0 * M_PI * m / M;
    const std::complex<Real> e1(static_cast<Real>(std::cos(th)), static_cast<Real>(std::sin(th)));
    std::complex<Real> ed(1, 0);
    for (int d = 0; d <= beta; ++d) {
      c[d] += wm * ed;
      ed *= e1;
    }
  }
  const bool capf = ring.chart == Chart::Cap;
  for (int j = 0; j <= beta; ++j)
    for (int k = 0; k <= j; ++k) {
      const int d = capf ? (k - j) : (j - k);
      const std::complex<Real> cd = d >= 0 ? c[d] : std::conj(c[-d]);
      G(j, k) += static_cast<Real>(rho(j) * rho(k)) * cd;
    }
}

template <typename Real>
void accumulate_ring_dense(Eigen::Matrix<std::complex<Real>, Eigen::Dynamic, Eigen::Dynamic>& G,
                           const BergmanQuadrature::Ring& ring, const SectionBasis& basis,
                           const Eigen::ArrayXd& log_weight_total) {
  using VecC = Eigen::Matrix<std::complex<Real>, Eigen::Dynamic, 1>;
  const int M = ring.ntheta;
  VecC v(basis.dim());
  for (int m = 0; m < M; ++m) {
    const double lw = log_weight_total(m);
    if (lw < -700.0) continue;
    const Real wm = static_cast<Real>(std::exp(lw));
    Eigen::VectorXcd vd = basis.values_at(ChartPoint{ring.chart, ring.points(m)});
    for (int j = 0; j < basis.dim(); ++j) v(j) = std::complex<Real>(vd(j).real(), vd(j).imag());
    for (int j = 0; j < basis.dim(); ++j)
      for (int k = 0; k <= j; ++k) G(j, k) += wm * v(j) * std::conj(v(k));
  }
}

template <typename Real>
Eigen::MatrixXcd assemble_gram(const SectionBasis& basis, const AnalyticWeight& weight,
                               const BergmanQuadrature& quad) {
  using MatC = Eigen::Matrix<std::complex<Real>, Eigen::Dynamic, Eigen::Dynamic>;
  MatC G = MatC::Zero(basis.dim(), basis.dim());
  for (const auto& ring : quad.rings) {
    Eigen::ArrayXd phi = weight_log_on_ring(weight, ring);
    Eigen::ArrayXd lw = ring.log_w - phi;
    if (ring.origin_centered)
      accumulate_ring_banded<Real>(G, ring, basis.degree, lw);
    else
      accumulate_ring_dense<Real>(G, ring, basis, lw);
  }
  Eigen::MatrixXcd out(basis.dim(), basis.dim());
  for (int j = 0; j < basis.dim(); ++j)
    for (int k = 0; k <= j; ++k) {
      const std::complex<Real>& g = G(j, k);
      out(j, k) = Complex(static_cast<double>(g.real()), static_cast<double>(g.imag()));
      out(k, j) = std::conj(out(j, k));
    }
  return out;
}

// banded kernel evaluation on an origin ring
Eigen::ArrayXd kernel_log_on_origin_ring(const KernelState& ks,
                                         const BergmanQuadrature::Ring& ring) {
  const int beta = ks.basis.degree;
  Eigen::ArrayXd rho = ring_profiles(ring, beta);
  // p_d = sum_{j-k=d} Q_jk rho_j rho_k with Q = G^{-1} (hermitian)
  std::vector<Complex> p(beta + 1, Complex(0, 0));
  for (int j = 0; j <= beta; ++j)
    for (int k = 0; k <= j; ++k) {
      const Complex q = ks.inverse(j, k) * rho(j) * rho(k);
      const int d = j - k;
      if (d == 0)
        p[0] += q;
      else
        p[d] += q;
    }
  const bool capf = ring.chart == Chart::Cap;
  Eigen::ArrayXd out(ring.ntheta);
  for (int m = 0; m < ring.ntheta; ++m) {
    const double th = 2.0 * M_PI * m / ring.ntheta;
    double acc = p[0].real();
    // sum over d>0 of 2 Re(p_d e^{+/- i d theta}); the cap orientation flips d
    const double sgn = capf ? -1.0 : 1.0;
    Complex e1(std::cos(sgn * th), std::sin(sgn * th));
    Complex ed = e1;
    for (int d = 1; d <= beta; ++d) {
      acc += 2.0 * (p[d] * ed).real();
      ed *= e1;
    }
    out(m) = std::log(std::max(acc, 1e-300));
  }
  return out;
}

Eigen::ArrayXd weight_log_on_ring(const AnalyticWeight& w, const BergmanQuadrature::Ring& ring) {
  Eigen::ArrayXd phi = Eigen::ArrayXd::Constant(ring.ntheta, w.constant);
  for (int m = 0; m < ring.ntheta; ++m) {
    const ChartPoint x{ring.chart, ring.points(m)};
    double acc = 0.0;
    for (const auto& [p, c] : w.poles) acc += c * log_section_norm_sq(p, x);
    for (const auto& ft : w.fields) acc += ft.power * ft.grid->interpolate(ft.values, x);
    phi(m) += acc;
  }
  for (const auto& kt : w.kernels) {
    if (ring.origin_centered) {
      phi += kt.power * kernel_log_on_origin_ring(*kt.kernel, ring);
    } else {
      for (int m = 0; m < ring.ntheta; ++m)
        phi(m) += kt.power * kt.kernel->log_kernel_at(ChartPoint{ring.chart, ring.points(m)});
    }
  }
  return phi;
}

}  // namespace

GramMatrix gram_matrix(const SectionBasis& basis, const AnalyticWeight& weight,
                       const BergmanQuadrature& quad, const GramOptions& opts) {
  for (const auto& [p, e] : weight.radial_exponents())
    if (e <= -1.0)
      throw std::invalid_argument(
          "gram_matrix: weight is not integrable at a marked point (exponent <= -1)");
  GramMatrix g;
  g.entries = assemble_gram<double>(basis, weight, quad);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(g.entries);
  const double lo = es.eigenvalues().minCoeff(), hi = es.eigenvalues().maxCoeff();
  g.condition = lo > 0 ? hi / lo : 1e300;
  if (g.condition > opts.cond_fallback) {
    g.entries = assemble_gram<long double>(basis, weight, quad);
    g.long_double_pass = true;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es2(g.entries);
    const double lo2 = es2.eigenvalues().minCoeff();
    g.condition = lo2 > 0 ? es2.eigenvalues().maxCoeff() / lo2 : 1e300;
  }
  return g;
}

std::shared_ptr<const KernelState> orthonormalize(const SectionBasis& basis, GramMatrix gram) {
  auto ks = std::make_shared<KernelState>();
  ks->basis = basis;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(gram.entries);
  if (es.eigenvalues().minCoeff() <= 0)
    throw std::runtime_error("orthonormalize: Gram matrix is not positive definite");
  const Eigen::ArrayXd inv_sqrt = es.eigenvalues().array().rsqrt();
  ks->transform = inv_sqrt.matrix().asDiagonal() * es.eigenvectors().adjoint();
  ks->inverse = es.eigenvectors() *
                es.eigenvalues().array().inverse().matrix().asDiagonal() *
                es.eigenvectors().adjoint();
  ks->gram = std::move(gram);
  return ks;
}

double KernelState::log_kernel_at(const ChartPoint& x) const {
  const Eigen::VectorXcd v = basis.values_at(x);
  return std::log(std::max((transform * v).squaredNorm(), 1e-300));
}

double KernelState::log_kernel_dual_at(const ChartPoint& x) const {
  const Eigen::VectorXcd v = basis.values_at(x);
  const Eigen::VectorXcd sol = gram.entries.ldlt().solve(v);
  return std::log(std::max(v.dot(sol).real(), 1e-300));
}

Eigen::ArrayXd KernelState::log_kernel_on_grid(const GridPtr& grid) const {
  Eigen::ArrayXd out = Eigen::ArrayXd::Zero(grid->node_count());
  for (const auto& p : grid->patches()) {
    const bool origin = p.kind == PatchSpec::Kind::Cylinder ||
                        (p.kind == PatchSpec::Kind::Disk && std::abs(p.center) < 1e-14);
    for (int i = 0; i < p.nr; ++i) {
      if (origin) {
        BergmanQuadrature::Ring ring;
        ring.chart = p.chart;
        ring.center = Complex(0, 0);
        const int n0 = p.node(i, 0);
        ring.radius = std::abs(grid->point(n0).coord);
        ring.origin_centered = true;
        ring.ntheta = p.nth;
        ring.points.resize(p.nth);
        for (int j = 0; j < p.nth; ++j) ring.points(j) = grid->point(p.node(i, j)).coord;
        Eigen::ArrayXd lk = kernel_log_on_origin_ring(*this, ring);
        for (int j = 0; j < p.nth; ++j) out(p.node(i, j)) = lk(j);
      } else {
        for (int j = 0; j < p.nth; ++j) {
          const int n = p.node(i, j);
          out(n) = log_kernel_at(grid->point(n));
        }
      }
    }
  }
  return out;
}

MembershipReport multiplier_membership(const MarkedSphereModel& model,
                                       const std::vector<std::pair<int, Rational>>& orders,
                                       const std::vector<std::pair<int, Rational>>& weight_poles,
                                       const GridPtr& probe_layout) {
  MembershipReport rep;
  rep.member = true;
  for (std::size_t i = 0; i < model.size(); ++i) {
    Rational mult(0), pole(0);
    for (const auto& [idx, m] : orders)
      if (idx == static_cast<int>(i)) mult += m;
    for (const auto& [idx, c] : weight_poles)
      if (idx == static_cast<int>(i)) pole += c;
    // local integrand |z-p|^{2(mult - pole)}: integrable iff mult - pole > -1
    if (!(mult - pole > Rational(-1))) {
      rep.member = false;
      rep.reason = "exponent " + (mult - pole).str() + " at marked point " + std::to_string(i) +
                   " is not integrable";
    }
  }
  // quadrature probe: excised radial integrals around the worst point
  Rational worst(10);
  for (std::size_t i = 0; i < model.size(); ++i) {
    Rational mult(0), pole(0);
    for (const auto& [idx, m] : orders)
      if (idx == static_cast<int>(i)) mult += m;
    for (const auto& [idx, c] : weight_poles)
      if (idx == static_cast<int>(i)) pole += c;
    if (mult - pole < worst) worst = mult - pole;
  }
  auto excised = [&](double eps) {
    const double a = 2.0 * worst.value() + 1.0;
    // int_eps^0.1 r^a dr via a hundred-panel midpoint rule in log r
    double acc = 0.0;
    const int N = 400;
    const double l0 = std::log(eps), l1 = std::log(0.1);
    for (int k = 0; k < N; ++k) {
      const double s = l0 + (l1 - l0) * (k + 0.5) / N;
      acc += std::exp((a + 1.0) * s) * (l1 - l0) / N;
    }
    return acc;
  };
  const double i1 = excised(1e-4), i2 = excised(1e-8);
  rep.probe_ratio = i2 / i1;
  (void)probe_layout;
  return rep;
}

AnalyticWeight canonical_pack(const MarkedSphereModel& model, const LogDivisor& divisor,
                              long long a, const Eigen::ArrayXd* h_P_smooth,
                              const GridPtr& grid) {
  AnalyticWeight pack;
  for (const auto& e : divisor.entries)
    pack.poles.emplace_back(model.marked_points[e.point], e.coefficient.value());
  if (h_P_smooth && grid)
    pack.fields.push_back({grid, *h_P_smooth, static_cast<double>(a - 1)});
  return pack;
}

InnerRun run_inner(const MarkedSphereModel& model, const GridPtr& layout,
                   const AnalyticWeight& pack, long long a, const Rational& tau, int ell_max,
                   const BergmanOptions& opts) {
  (void)model;
  InnerRun run;
  run.a = a;
  run.step_degree = Rational(a) * tau;
  run.A_degree = opts.A_degree;
  run.pack = pack;
  if (!run.step_degree.is_integer())
    throw std::invalid_argument("run_inner: a deg(K_X+D) must be an integer");
  const long long step = run.step_degree.num();
  if (step <= 0) throw std::invalid_argument("run_inner: deg(K_X+D) must be positive");
  const long long beta_max = opts.A_degree + static_cast<long long>(ell_max) * step;
  if (opts.A_degree + step < 0)
    throw std::invalid_argument("run_inner: ample twist too small for the first step");

  BergmanQuadrature quad = BergmanQuadrature::build(layout, pack.radial_exponents(),
                                                    static_cast<int>(beta_max),
                                                    opts.radial_nodes);

  std::shared_ptr<const KernelState> prev;
  double log_dim_sum = 0.0;
  GramOptions gopts;
  gopts.cond_fallback = opts.cond_fallback;
  for (int ell = 1; ell <= ell_max; ++ell) {
    const long long beta = opts.A_degree + step * ell;
    SectionBasis basis{static_cast<int>(beta)};
    AnalyticWeight w = pack;
    if (prev) w.kernels.push_back({prev, 1.0});
    GramMatrix G = gram_matrix(basis, w, quad, gopts);
    auto ks = orthonormalize(basis, std::move(G));

    InnerRow row;
    row.ell = ell;
    row.bundle_degree = beta;
    row.dim = beta + 1;
    row.condition = ks->gram.condition;
    log_dim_sum += std::log(static_cast<double>(beta + 1));
    row.holder_bound = std::exp(log_dim_sum / ell);

    // mass of dV_ell = K^{1/ell} e^{-pack} e^{-phi_A/ell} as an FS density
    double mass = 0.0;
    for (const auto& ring : quad.rings) {
      Eigen::ArrayXd lk = ring.origin_centered
                              ? kernel_log_on_origin_ring(*ks, ring)
                              : [&] {
                                  Eigen::ArrayXd t(ring.ntheta);
                                  for (int m = 0; m < ring.ntheta; ++m)
                                    t(m) = ks->log_kernel_at(ChartPoint{ring.chart, ring.points(m)});
                                  return t;
                                }();
      Eigen::ArrayXd lpack = weight_log_on_ring(pack, ring);
      for (int m = 0; m < ring.ntheta; ++m) {
        const double lw = ring.log_w(m) + lk(m) / ell - lpack(m);
        if (lw > -700.0) mass += std::exp(lw);
      }
    }
    row.int_dV = mass;
    run.rows.push_back(row);

    if (std::find(opts.keep_ells.begin(), opts.keep_ells.end(), ell) != opts.keep_ells.end() ||
        ell == ell_max) {
      run.kept_ells.push_back(ell);
      run.kept_kernels.push_back(ks);
    }
    prev = ks;
  }
  return run;
}

ScaledLimit scaled_limit(const InnerRun& run, const GridPtr& grid) {
  if (run.kept_kernels.size() < 2)
    throw std::invalid_argument("scaled_limit: need at least two stored inner kernels");
  ScaledLimit out;
  const int N = grid->node_count();
  const std::size_t K = run.kept_kernels.size();

  // V_l = (1/l)(log K_l - sum log dim), fitted against {1, 1/l}
  std::vector<Eigen::ArrayXd> V(K);
  std::vector<double> ells(K);
  for (std::size_t k = 0; k < K; ++k) {
    const int ell = run.kept_ells[k];
    double logdim = 0.0;
    for (int j = 1; j <= ell; ++j)
      logdim += std::log(static_cast<double>(run.A_degree + run.step_degree.num() * j + 1));
    V[k] = (run.kept_kernels[k]->log_kernel_on_grid(grid) - logdim) / ell;
    ells[k] = ell;
  }
  Eigen::Matrix2d AtA = Eigen::Matrix2d::Zero();
  for (std::size_t k = 0; k < K; ++k) {
    Eigen::Vector2d r(1.0, 1.0 / ells[k]);
    AtA += r * r.transpose();
  }
  const Eigen::Matrix2d AtAinv = AtA.inverse();

  out.log_kernel = Eigen::ArrayXd::Zero(N);
  const double shift = std::log(run.step_degree.value());
  double worst_res = 0.0;
  for (int n = 0; n < N; ++n) {
    if (grid->status(n) == NodeStatus::Dead) continue;
    Eigen::Vector2d Atb = Eigen::Vector2d::Zero();
    for (std::size_t k = 0; k < K; ++k)
      Atb += Eigen::Vector2d(1.0, 1.0 / ells[k]) * V[k](n);
    const Eigen::Vector2d c = AtAinv * Atb;
    out.log_kernel(n) = c(0) + shift;
    double res = 0.0;
    for (std::size_t k = 0; k < K; ++k)
      res = std::max(res, std::abs(c(0) + c(1) / ells[k] - V[k](n)));
    worst_res = std::max(worst_res, res);
  }
  out.fit_residual = worst_res;
  out.low_confidence = worst_res > 0.2;

  // omega_m density: log g = log(2 pi K_m) - pack
  out.log_density = Eigen::ArrayXd::Zero(N);
  for (int n = 0; n < N; ++n) {
    if (grid->status(n) == NodeStatus::Dead) continue;
    double lpack = run.pack.constant;
    for (const auto& [p, c] : run.pack.poles) {
      // use the cached chordal logs where the point is marked
      lpack += c * log_section_norm_sq(p, grid->point(n));
    }
    for (const auto& ft : run.pack.fields) lpack += ft.power * ft.values(n);
    out.log_density(n) = std::log(2.0 * M_PI) + out.log_kernel(n) - lpack;
  }
  return out;
}

OuterRun run_outer(const MarkedSphereModel& model, const GridPtr& grid,
                   const LogDivisor& divisor, long long a, int ell_max, int m_max,
                   const BergmanOptions& opts) {
  auto pair = classify_pair(model, divisor);
  if (pair.classification != PairClass::KLT || !pair.log_general_type)
    throw std::invalid_argument("run_outer: need a KLT pair of log general type");
  OuterRun out;
  AnalyticWeight pack = canonical_pack(model, divisor, a, nullptr, grid);
  for (int m = 1; m <= m_max; ++m) {
    InnerRun inner = run_inner(model, grid, pack, a, pair.degree, ell_max, opts);
    ScaledLimit lim = scaled_limit(inner, grid);
    double mass = 0.0;
    for (int n = 0; n < grid->node_count(); ++n)
      if (grid->quad_positive(n))
        mass += std::exp(grid->log_quad_weight(n) + lim.log_density(n));
    out.areas.push_back(mass);
    // next drift pack: h_m^{(a-1)/a} h_sigma_D with h_m = (2 pi K_m)^{-1}
    AnalyticWeight next;
    next.poles = canonical_pack(model, divisor, a, nullptr, grid).poles;
    Eigen::ArrayXd log_hm = std::log(2.0 * M_PI) + lim.log_kernel;
    GridField f(grid, log_hm);
    sync_fringe(f);
    next.fields.push_back({grid, f.v, static_cast<double>(a - 1) / static_cast<double>(a)});
    out.levels.push_back(std::move(lim));
    out.inner.push_back(std::move(inner));
    pack = std::move(next);
  }
  return out;
}

VolumeInvariant volume_mu(const Rational& tau, long long a,
                          const std::vector<long long>& ell_probes) {
  VolumeInvariant v;
  auto dim_of = [&](long long ell) {
    const Rational deg = Rational(ell) * Rational(a) * tau;
    return deg + Rational(1);  // h^0(O(deg)) = deg + 1 on the sphere
  };
  for (long long ell : ell_probes)
    v.probes.emplace_back(ell, dim_of(ell) / (Rational(a) * Rational(ell)));
  // exact stabilized limit from a dimension difference
  const long long l1 = ell_probes.empty() ? 8 : ell_probes.back();
  const long long l2 = 2 * l1;
  v.mu = (dim_of(l2) - dim_of(l1)) / (Rational(a) * Rational(l2 - l1));
  return v;
}

}  // namespace kelab
