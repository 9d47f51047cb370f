#include "kelab/hyperbolic.hpp"

#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include <algorithm>
#include <stdexcept>

namespace kelab {

namespace {

double sq(double x) { return x * x; }

}  // namespace

struct HyperbolicBuilder {
  using Domain = HyperbolicMetric::Domain;

  std::vector<SpherePoint> punctures;
  double S;       // cusp depth
  int res;
  double tol;

  std::vector<Domain> domains;
  std::vector<Complex> pos;          // std-chart position (finite nodes only valid)
  std::vector<double> sigma_local;   // log-radius in the domain's own coordinate
  std::vector<double> log1p_z2;      // log(1+|z|^2) in the standard chart sense
  enum class Row : std::uint8_t { Interior, Fringe, RobinLow };
  std::vector<Row> row_kind;
  std::vector<std::array<int, 9>> fringe_nodes;
  std::vector<std::array<double, 9>> fringe_w;
  std::vector<int> fringe_of;  // -1 or index into fringe rows

  int total = 0;

  // geometric data of finite cusps away from the origin
  struct Site {
    Complex p;
    double R;
    int domain;
  };
  std::vector<Site> sites;

  void build_domains() {
    const int nth = res;
    const double hth = 2.0 * M_PI / nth;

    Domain cyl;
    cyl.cylinder = true;
    cyl.q0 = -S;
    cyl.q1 = S;
    cyl.nth = nth;
    cyl.nr = static_cast<int>(std::ceil(2.0 * S / hth));
    cyl.nr += cyl.nr % 2;  // keep the lattice off s = 0, where punctures often sit
    domains.push_back(cyl);

    for (const auto& p : punctures) {
      if (p.at_infinity || std::abs(p.z) < 1e-12) continue;
      double dmin = std::abs(p.z);  // distance to the origin cusp
      for (const auto& q : punctures) {
        if (q.at_infinity || std::abs(q.z - p.z) < 1e-12) continue;
        dmin = std::min(dmin, std::abs(q.z - p.z));
      }
      Domain d;
      d.cylinder = false;
      d.center = p.z;
      const double R = 0.5 * dmin;
      d.q1 = std::log(R);
      d.q0 = -S;
      d.nth = std::max(32, res / 2);
      d.nr = static_cast<int>(std::ceil((d.q1 - d.q0) / (2.0 * M_PI / d.nth)));
      d.nr += d.nr % 2;
      sites.push_back({p.z, R, static_cast<int>(domains.size())});
      domains.push_back(d);
    }

    total = 0;
    for (auto& d : domains) {
      d.base = total;
      total += d.nr * d.nth;
    }
  }

  void build_nodes() {
    pos.resize(total);
    sigma_local.resize(total);
    log1p_z2.resize(total);
    row_kind.assign(total, Row::Interior);
    fringe_of.assign(total, -1);
    for (std::size_t di = 0; di < domains.size(); ++di) {
      const Domain& d = domains[di];
      for (int i = 0; i < d.nr; ++i)
        for (int j = 0; j < d.nth; ++j) {
          const int n = d.node(i, j);
          const double q = d.q0 + (i + 0.5) * d.h();
          const double th = j * d.hth();
          sigma_local[n] = q;
          if (d.cylinder) {
            pos[n] = std::exp(q) * Complex(std::cos(th), std::sin(th));
            log1p_z2[n] = std::log1p(std::exp(2.0 * q));
          } else {
            pos[n] = d.center + std::exp(q) * Complex(std::cos(th), std::sin(th));
            log1p_z2[n] = std::log1p(std::norm(pos[n]));
          }
        }
    }

    // row classification
    for (std::size_t di = 0; di < domains.size(); ++di) {
      const Domain& d = domains[di];
      for (int j = 0; j < d.nth; ++j) {
        row_kind[d.node(0, j)] = Row::RobinLow;
        if (d.cylinder) {
          // the top of the cylinder is the deep end of the infinity cusp
          row_kind[d.node(d.nr - 1, j)] = Row::RobinLow;
        } else {
          row_kind[d.node(d.nr - 1, j)] = Row::Fringe;
        }
      }
    }
    const Domain& cyl = domains[0];
    for (int i = 0; i < cyl.nr; ++i)
      for (int j = 0; j < cyl.nth; ++j) {
        const int n = cyl.node(i, j);
        if (row_kind[n] != Row::Interior) continue;
        for (const auto& s : sites)
          if (std::abs(pos[n] - s.p) < 0.45 * s.R) row_kind[n] = Row::Fringe;
      }
  }

  // biquadratic donors from domain di at local (q, theta)
  bool donors(std::size_t di, double q, double th, std::array<int, 9>& nodes,
              std::array<double, 9>& w) const {
    const Domain& d = domains[di];
    const double qi = std::max((q - d.q0) / d.h() - 0.5, 0.6);
    double tj = th / d.hth();
    int ib = std::clamp(static_cast<int>(std::floor(qi + 0.5)) - 1, 1, d.nr - 4);
    int jb = static_cast<int>(std::floor(tj + 0.5)) - 1;
    auto lag = [](double t, double* ww) {
      ww[0] = 0.5 * (t - 1.0) * (t - 2.0);
      ww[1] = t * (2.0 - t);
      ww[2] = 0.5 * t * (t - 1.0);
    };
    double wq[3], wt[3];
    lag(qi - ib, wq);
    lag(tj - jb, wt);
    int idx = 0;
    for (int a = 0; a < 3; ++a)
      for (int c = 0; c < 3; ++c) {
        const int n = d.node(ib + a, ((jb + c) % d.nth + d.nth) % d.nth);
        if (row_kind[n] != Row::Interior) return false;
        nodes[idx] = n;
        w[idx] = wq[a] * wt[c];
        ++idx;
      }
    return true;
  }

  void build_fringe() {
    for (std::size_t di = 0; di < domains.size(); ++di) {
      const Domain& d = domains[di];
      for (int i = 0; i < d.nr; ++i)
        for (int j = 0; j < d.nth; ++j) {
          const int n = d.node(i, j);
          if (row_kind[n] != Row::Fringe) continue;
          std::array<int, 9> nodes;
          std::array<double, 9> w;
          bool ok = false;
          if (!d.cylinder) {
            // patch rim interpolates from the cylinder
            const Complex z = pos[n];
            ok = donors(0, std::log(std::abs(z)), std::fmod(std::arg(z) + 2 * M_PI, 2 * M_PI),
                        nodes, w);
          } else {
            for (const auto& s : sites) {
              const Complex loc = pos[n] - s.p;
              if (std::abs(loc) < 0.9 * s.R) {
                ok = donors(s.domain, std::log(std::abs(loc)),
                            std::fmod(std::arg(loc) + 2 * M_PI, 2 * M_PI), nodes, w);
                break;
              }
            }
          }
          if (!ok) {
            char buf[200];
            snprintf(buf, sizeof(buf),
                     "hyperbolic oracle: no donors for node in domain %d (cyl=%d) i=%d j=%d "
                     "pos=(%.3f,%.3f)",
                     (int)di, (int)d.cylinder, i, j, pos[n].real(), pos[n].imag());
            throw std::runtime_error(buf);
          }
          fringe_of[n] = static_cast<int>(fringe_nodes.size());
          fringe_nodes.push_back(nodes);
          fringe_w.push_back(w);
        }
    }
  }

  // scaled residual: interior rows are divided by the stencil prefactor
  // L v = pre * (five-point difference), pre = (1+|z|^2)^2 e^{-2 sigma} / (4 h^2)
  double log_pre(int n, const Domain& d) const {
    return 2.0 * log1p_z2[n] - 2.0 * sigma_local[n] - std::log(4.0) - 2.0 * std::log(d.h());
  }

  const Domain& domain_of(int n) const {
    for (const auto& d : domains)
      if (n >= d.base && n < d.base + d.nr * d.nth) return d;
    throw std::logic_error("node out of range");
  }

  // Robin closure of the cusp family: v_sigma + 2 = 2 sqrt(2) e^{(v_W + 2 sigma)/2},
  // v_W = v - 2 log(1+|z|^2) (+ chart symmetry at the infinity end)
  double robin_residual(const Eigen::ArrayXd& v, int n, const Domain& d, double* dself,
                        double* dnext, int* next) const {
    const bool top = d.cylinder && n >= d.node(d.nr - 1, 0);
    const int j = (n - d.base) % d.nth;
    const int nb = top ? d.node(d.nr - 2, j) : d.node(1, j);
    const double h = d.h();
    double sigma, vw;
    if (!d.cylinder) {
      sigma = sigma_local[n];
      vw = v(n) - 2.0 * log1p_z2[n];
    } else if (!top) {
      sigma = sigma_local[n];
      vw = v(n) - 2.0 * std::log1p(std::exp(2.0 * sigma_local[n]));
    } else {
      sigma = -sigma_local[n];  // local coordinate w = 1/z
      vw = v(n) - 2.0 * std::log1p(std::exp(-2.0 * sigma_local[n]));
    }
    const double grad = (v(nb) - v(n)) / h;  // equals +v_sigma toward the bulk
    const double expterm = 2.0 * std::sqrt(2.0) * std::exp(0.5 * (vw + 2.0 * sigma));
    *dself = -1.0 / h - 0.5 * expterm;
    *dnext = 1.0 / h;
    *next = nb;
    return grad + 2.0 - expterm;
  }

  void residual(const Eigen::ArrayXd& v, Eigen::VectorXd& F) const {
    for (std::size_t di = 0; di < domains.size(); ++di) {
      const Domain& d = domains[di];
      for (int i = 0; i < d.nr; ++i)
        for (int j = 0; j < d.nth; ++j) {
          const int n = d.node(i, j);
          switch (row_kind[n]) {
            case Row::Interior: {
              const int np = d.node(i + 1, j), nm = d.node(i - 1, j);
              const int jp = d.node(i, (j + 1) % d.nth), jm = d.node(i, (j - 1 + d.nth) % d.nth);
              const double lap = (v(np) - v(n)) + (v(nm) - v(n)) + (v(jp) - v(n)) + (v(jm) - v(n));
              F(n) = lap - std::exp(std::log(std::exp(v(n)) + 2.0) - log_pre(n, d));
              break;
            }
            case Row::Fringe: {
              const int f = fringe_of[n];
              double s = v(n);
              for (int k = 0; k < 9; ++k) s -= fringe_w[f][k] * v(fringe_nodes[f][k]);
              F(n) = s;
              break;
            }
            case Row::RobinLow: {
              double a, b;
              int nb;
              F(n) = robin_residual(v, n, d, &a, &b, &nb);
              break;
            }
          }
        }
    }
  }

  Eigen::ArrayXd initial_guess() const {
    Eigen::ArrayXd v(total);
    for (int n = 0; n < total; ++n) {
      double acc = 0.0;
      auto model = [&](double sigma_p) {
        const double L = std::max(1.5, -sigma_p);
        return std::exp(-2.0 * sigma_p - 2.0 * std::log(L) - std::log(2.0));
      };
      for (const auto& p : punctures) {
        double sigma_p, conv;
        if (p.at_infinity) {
          sigma_p = -std::log(std::abs(pos[n]));
          if (domain_of(n).cylinder) sigma_p = -sigma_local[n];
          conv = 2.0 * std::log1p(std::exp(2.0 * sigma_p));  // (1+|w|^2)^2, |w| = e^sigma
        } else {
          const double dist = std::abs(pos[n] - p.z);
          sigma_p = std::log(std::max(dist, 1e-18));
          conv = 2.0 * log1p_z2[n];
        }
        acc += model(sigma_p) * std::exp(conv);
      }
      v(n) = std::log(std::max(acc, 1e-12));
    }
    return v;
  }

  void solve(HyperbolicMetric& out) {
    Eigen::ArrayXd v = initial_guess();
    Eigen::VectorXd F(total), Fnew(total);
    residual(v, F);
    double fnorm = F.norm();

    Eigen::SparseMatrix<double> J(total, total);
    std::vector<Eigen::Triplet<double>> trips;
    Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
    bool analyzed = false;

    double rel = 1e300;
    for (int iter = 0; iter < 80; ++iter) {
      rel = 0.0;
      for (int n = 0; n < total; ++n) {
        const double scale =
            row_kind[n] == Row::Interior
                ? std::exp(std::log(std::exp(v(n)) + 2.0) - log_pre(n, domain_of(n))) + 1e-14
                : 1.0;
        rel = std::max(rel, std::abs(F(n)) / scale);
      }
      if (rel < tol) break;

      trips.clear();
      for (std::size_t di = 0; di < domains.size(); ++di) {
        const Domain& d = domains[di];
        for (int i = 0; i < d.nr; ++i)
          for (int j = 0; j < d.nth; ++j) {
            const int n = d.node(i, j);
            switch (row_kind[n]) {
              case Row::Interior: {
                const int np = d.node(i + 1, j), nm = d.node(i - 1, j);
                const int jp = d.node(i, (j + 1) % d.nth),
                          jm = d.node(i, (j - 1 + d.nth) % d.nth);
                trips.emplace_back(n, np, 1.0);
                trips.emplace_back(n, nm, 1.0);
                trips.emplace_back(n, jp, 1.0);
                trips.emplace_back(n, jm, 1.0);
                const double dexp =
                    std::exp(v(n) - log_pre(n, d));  // d/dv of e^{v - pre-log} part
                trips.emplace_back(n, n, -4.0 - dexp);
                break;
              }
              case Row::Fringe: {
                const int f = fringe_of[n];
                trips.emplace_back(n, n, 1.0);
                for (int k = 0; k < 9; ++k)
                  trips.emplace_back(n, fringe_nodes[f][k], -fringe_w[f][k]);
                break;
              }
              case Row::RobinLow: {
                double a, b;
                int nb;
                robin_residual(v, n, d, &a, &b, &nb);
                trips.emplace_back(n, n, a);
                trips.emplace_back(n, nb, b);
                break;
              }
            }
          }
      }
      J.setFromTriplets(trips.begin(), trips.end());
      if (!analyzed) {
        lu.analyzePattern(J);
        analyzed = true;
      }
      lu.factorize(J);
      if (lu.info() != Eigen::Success)
        throw std::runtime_error("hyperbolic oracle: Jacobian factorization failed");
      Eigen::VectorXd step = lu.solve(-F);
      double alpha = 1.0;
      bool ok = false;
      for (int bt = 0; bt < 40; ++bt) {
        Eigen::ArrayXd trial = v + alpha * step.array();
        residual(trial, Fnew);
        if (Fnew.norm() <= (1.0 - 0.25 * alpha) * fnorm) {
          v = trial;
          F = Fnew;
          fnorm = F.norm();
          ok = true;
          break;
        }
        alpha *= 0.5;
      }
      if (!ok) break;
    }
    out.v_ = v;
    out.residual_ = rel;

    // hyperbolic area with analytic cusp tails below the resolved depth
    double mass = 0.0;
    for (std::size_t di = 0; di < domains.size(); ++di) {
      const Domain& d = domains[di];
      for (int i = 0; i < d.nr; ++i)
        for (int j = 0; j < d.nth; ++j) {
          const int n = d.node(i, j);
          if (row_kind[n] == Row::RobinLow) continue;
          bool owned = true;
          if (d.cylinder) {
            for (const auto& s : sites)
              if (std::abs(pos[n] - s.p) < 0.7 * s.R) owned = false;
          } else {
            owned = std::abs(pos[n] - d.center) < 0.7 *
                        sites[di - 1].R;  // patches follow the cylinder in `domains`
          }
          if (!owned) continue;
          const double log_fs = std::log(2.0) - 2.0 * log1p_z2[n];
          const double cell = 2.0 * sigma_local[n] + std::log(d.h() * d.hth());
          // cylinder cells measure dA via e^{2s}; patch cells via e^{2 sigma}
          mass += std::exp(v(n) + log_fs + cell);
        }
    }
    // tails: area below a horocycle is 2 pi / (c - sigma), read off the Robin state
    for (std::size_t di = 0; di < domains.size(); ++di) {
      const Domain& d = domains[di];
      auto tail_at = [&](int i_row, bool top) {
        double acc = 0.0;
        for (int j = 0; j < d.nth; ++j) {
          const int n = d.node(i_row, j);
          double sigma, vw;
          if (!d.cylinder) {
            sigma = sigma_local[n];
            vw = v(n) - 2.0 * log1p_z2[n];
          } else if (!top) {
            sigma = sigma_local[n];
            vw = v(n) - 2.0 * std::log1p(std::exp(2.0 * sigma));
          } else {
            sigma = -sigma_local[n];
            vw = v(n) - 2.0 * std::log1p(std::exp(-2.0 * sigma_local[n]));
          }
          const double c_minus_sigma = 1.0 / (std::sqrt(2.0) * std::exp(0.5 * (vw + 2 * sigma)));
          acc += 2.0 * M_PI / c_minus_sigma / d.nth;
        }
        return acc;
      };
      if (d.cylinder) {
        mass += tail_at(0, false);
        mass += tail_at(d.nr - 1, true);
      } else {
        mass += tail_at(0, false);
      }
    }
    out.area_ = mass;
  }
};

std::shared_ptr<const HyperbolicMetric> HyperbolicMetric::solve(
    const std::vector<SpherePoint>& punctures, int resolution, double cusp_depth, double tol) {
  if (punctures.size() < 3)
    throw std::invalid_argument("hyperbolic metric needs at least three punctures");
  bool has0 = false, hasinf = false;
  for (const auto& p : punctures) {
    if (p.at_infinity) hasinf = true;
    else if (std::abs(p.z) < 1e-12) has0 = true;
  }
  if (!has0 || !hasinf)
    throw std::invalid_argument(
        "hyperbolic oracle expects punctures at both chart origins (0 and infinity)");

  auto metric = std::make_shared<HyperbolicMetric>();
  HyperbolicBuilder b{punctures, cusp_depth, resolution, tol};
  b.build_domains();
  b.build_nodes();
  b.build_fringe();
  b.solve(*metric);
  metric->punctures_ = punctures;
  metric->domains_ = b.domains;
  return metric;
}

double HyperbolicMetric::log_density(const Complex& z) const {
  // choose the best domain, then interpolate biquadratically in (sigma, theta)
  auto interp = [&](const Domain& d, double q, double th, double& out) -> bool {
    const double qi = (q - d.q0) / d.h() - 0.5;
    if (qi < 0.6 || qi > d.nr - 1.6) return false;
    const int ib = std::clamp(static_cast<int>(std::floor(qi + 0.5)) - 1, 0, d.nr - 3);
    const double tj = th / d.hth();
    const int jb = static_cast<int>(std::floor(tj + 0.5)) - 1;
    auto lag = [](double t, double* ww) {
      ww[0] = 0.5 * (t - 1.0) * (t - 2.0);
      ww[1] = t * (2.0 - t);
      ww[2] = 0.5 * t * (t - 1.0);
    };
    double wq[3], wt[3];
    lag(qi - ib, wq);
    lag(tj - jb, wt);
    out = 0.0;
    for (int a = 0; a < 3; ++a)
      for (int c = 0; c < 3; ++c)
        out += wq[a] * wt[c] * v_(d.node(ib + a, ((jb + c) % d.nth + d.nth) % d.nth));
    return true;
  };

  for (std::size_t di = 1; di < domains_.size(); ++di) {
    const Domain& d = domains_[di];
    const Complex loc = z - d.center;
    if (std::abs(loc) < std::exp(d.q1) * 0.8) {
      double out;
      if (interp(d, std::log(std::abs(loc)), std::fmod(std::arg(loc) + 2 * M_PI, 2 * M_PI), out))
        return out;
    }
  }
  const Domain& cyl = domains_[0];
  double out;
  if (!interp(cyl, std::log(std::abs(z)), std::fmod(std::arg(z) + 2 * M_PI, 2 * M_PI), out))
    throw std::invalid_argument("hyperbolic oracle: point too deep in a cusp to evaluate");
  return out;
}

double HyperbolicMetric::area() const { return area_; }

double HyperbolicMetric::cusp_loglog_slope(const SpherePoint& p, double r0, double r1) const {
  // theta-averaged least-squares slope of log density against log r
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int count = 0;
  for (int k = 0; k < 24; ++k) {
    const double r = r0 * std::pow(r1 / r0, (k + 0.5) / 24.0);
    double avg = 0.0;
    for (int j = 0; j < 16; ++j) {
      const double th = 2.0 * M_PI * j / 16.0;
      Complex z;
      if (p.at_infinity)
        z = (1.0 / r) * Complex(std::cos(th), std::sin(th));
      else
        z = p.z + r * Complex(std::cos(th), std::sin(th));
      avg += log_density(z);
    }
    avg /= 16.0;
    const double x = std::log(r);
    sx += x;
    sy += avg;
    sxx += x * x;
    sxy += x * avg;
    ++count;
  }
  return (count * sxy - sx * sy) / (count * sxx - sx * sx);
}

}  // namespace kelab
