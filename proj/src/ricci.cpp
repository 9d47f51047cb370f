#include "kelab/ricci.hpp"

#include <stdexcept>

namespace kelab {

namespace {

// per-node Aitken tail, falling back to the fixed-ratio geometric sum
Eigen::ArrayXd extrapolate_tail(const std::vector<Eigen::ArrayXd>& u, double t) {
  const std::size_t m = u.size();
  if (m < 3) return u.back();
  const Eigen::ArrayXd& a0 = u[m - 3];
  const Eigen::ArrayXd& a1 = u[m - 2];
  const Eigen::ArrayXd& a2 = u[m - 1];
  Eigen::ArrayXd out = a2;
  for (int n = 0; n < out.size(); ++n) {
    const double d1 = a1(n) - a0(n), d2 = a2(n) - a1(n);
    const double denom = d1 - d2;
    if (std::abs(denom) > 1e-14 + 0.2 * std::abs(d1)) {
      const double r = d2 / d1;
      if (std::isfinite(r) && r > -0.2 && r < 0.98) {
        out(n) = a2(n) + d2 * r / (1.0 - r);
        continue;
      }
    }
    out(n) = a2(n) + d2 * t / (1.0 - t);
  }
  return out;
}

void record_step(IterationTrace& tr, const LiouvilleProblem& prob, const SolveReport& rep,
                 const Eigen::ArrayXd& log_density, const Eigen::ArrayXd* g0_log) {
  const RadialGrid& g = *prob.background.grid;
  tr.potentials.push_back(rep.u.v);
  tr.log_densities.push_back(log_density);
  tr.residuals.push_back(rep.residual_norm);
  double mass = 0.0;
  for (int n = 0; n < g.node_count(); ++n)
    if (g.quad_positive(n)) mass += std::exp(g.log_quad_weight(n) + log_density(n));
  tr.areas.push_back(mass);
  if (tr.potentials.size() >= 2) {
    const Eigen::ArrayXd diff = tr.potentials.back() - tr.potentials[tr.potentials.size() - 2];
    double sup = -1e300, inf = 1e300;
    for (int n = 0; n < g.node_count(); ++n) {
      if (g.status(n) == NodeStatus::Dead) continue;
      sup = std::max(sup, diff(n));
      inf = std::min(inf, diff(n));
    }
    tr.sup_diffs.push_back(sup);
    tr.inf_diffs.push_back(inf);
  }
  if (g0_log) {
    double worst = 0.0;
    for (int n = 0; n < g.node_count(); ++n)
      if (g.status(n) == NodeStatus::Interior)
        worst = std::max(worst, std::exp((*g0_log)(n) - log_density(n)));
    tr.chern_lu.push_back(worst);
  }
}

}  // namespace

IterationTrace iterate_smooth(const MarkedSphereModel& model, const MetricWeight& drift,
                              const MetricWeight& omega0, long long a, int m_max, double tol) {
  const GridPtr grid = drift.grid;
  if (a < 1) throw std::invalid_argument("iterate_smooth: a must be a positive integer");
  const Rational deg_KL = Rational(-2) + drift.bundle.degree;
  if (!(deg_KL > Rational(0)))
    throw std::invalid_argument("iterate_smooth: K_X + L has degree " + deg_KL.str() +
                                " <= 0; the iteration is undefined");
  {
    auto curv = drift.curvature_density();
    for (int n = 0; n < grid->node_count(); ++n)
      if (grid->status(n) == NodeStatus::Interior && curv.v(n) < -1e-9)
        throw std::invalid_argument("iterate_smooth: drift curvature is negative somewhere");
  }
  if (!(omega0.bundle.degree > Rational(0)))
    throw std::invalid_argument("iterate_smooth: omega_0 must be a Kaehler class");

  const double t = static_cast<double>(a - 1) / static_cast<double>(a);
  const Rational t_rat(a - 1, a);

  (void)model;
  // rhs density: e^{-phi_L} omega_FS, the gauge in which each step's equation
  // matches the Ricci identity for the evolving class
  GridField rho(grid);
  for (int n = 0; n < grid->node_count(); ++n) rho.v(n) = std::exp(-drift.smooth(n));
  const double drift_pole = drift.pole_sum();
  std::vector<std::pair<int, double>> expo;
  for (const auto& [idx, c] : drift.poles) expo.emplace_back(idx, -c);
  (void)drift_pole;

  IterationTrace tr;
  tr.a = a;
  Eigen::ArrayXd u_prev = omega0.smooth;  // u_0, relative to the FS background
  Rational d_m = omega0.bundle.degree;
  tr.class_degrees.push_back(d_m);
  {
    // record omega_0 itself
    MetricWeight bg0(grid, d_m);
    GridField g0 = bg0.curvature_density();
    GridField lap0 = laplacian(GridField(grid, u_prev));
    Eigen::ArrayXd logg0(grid->node_count());
    for (int n = 0; n < grid->node_count(); ++n)
      logg0(n) = std::log(std::max(1e-300, g0.v(n) + lap0.v(n)));
    tr.potentials.push_back(u_prev);
    tr.log_densities.push_back(logg0);
    tr.areas.push_back(2.0 * M_PI * d_m.value());
    tr.residuals.push_back(0.0);
  }
  const Eigen::ArrayXd g0_log = tr.log_densities[0];

  for (int m = 1; m <= m_max; ++m) {
    d_m = t_rat * d_m + deg_KL;
    tr.class_degrees.push_back(d_m);
    tr.alpha.push_back(Rational(1, a) * [&] {
      Rational p(1);
      for (int k = 1; k < m; ++k) p *= t_rat;
      return p;
    }());

    LiouvilleProblem prob;
    prob.background = MetricWeight(grid, d_m);
    prob.rhs = Density(rho, expo);
    prob.exponent_coeff = 1.0;
    prob.drift = -t * u_prev;
    SolveOptions o;
    o.initial = &u_prev;
    SolveReport rep = solve_liouville(prob, tol * 1e-2, o);
    if (!rep.converged && rep.residual_norm > tol) {
      tr.message = "step " + std::to_string(m) + " diverged: " + rep.message;
      record_step(tr, prob, rep, solved_log_density(prob, rep.u), &g0_log);
      return tr;
    }
    record_step(tr, prob, rep, solved_log_density(prob, rep.u), &g0_log);
    u_prev = rep.u.v;

    if (a == 1) {
      tr.converged = true;  // the drift coefficient vanishes: u_1 is the answer
      break;
    }
    if (!tr.sup_diffs.empty()) {
      const double gap =
          std::max(std::abs(tr.sup_diffs.back()), std::abs(tr.inf_diffs.back()));
      if (gap < tol) {
        tr.converged = true;
        break;
      }
    }
  }
  if (!tr.converged && tr.message.empty())
    tr.message = "iteration cap reached before the sup-difference dropped below tol";

  tr.limit_u = extrapolate_tail(tr.potentials, t);
  // fixed point: log((theta + L u)/rho) = u/a against the limit class a(K+L)
  const Rational d_inf = Rational(a) * deg_KL;
  {
    MetricWeight bg(grid, d_inf);
    GridField lap = laplacian(GridField(grid, tr.limit_u));
    Eigen::ArrayXd logg(grid->node_count());
    double worst = 0.0;
    for (int n = 0; n < grid->node_count(); ++n) {
      if (grid->status(n) != NodeStatus::Interior) { logg(n) = 0; continue; }
      const double dens = d_inf.value() + lap.v(n);
      logg(n) = std::log(std::max(dens, 1e-300));
      double logrho = std::log(rho.v(n));
      for (const auto& [idx, e] : expo) logrho += e * grid->log_chordal(n, idx);
      worst = std::max(worst,
                       std::abs(logg(n) - logrho - tr.limit_u(n) / static_cast<double>(a)));
    }
    tr.fixed_point_residual = worst;
    tr.limit_log_density = logg;
  }
  return tr;
}

IterationTrace iterate_singular(const MarkedSphereModel& model, const LogDivisor& divisor,
                                const GridPtr& grid, long long a, int m_max, double tol,
                                const SingularIterationOptions& opts) {
  auto pair = classify_pair(model, divisor);
  if (pair.classification != PairClass::KLT)
    throw std::invalid_argument("iterate_singular: pair is " + to_string(pair.classification) +
                                "; LC input is rejected here");
  if (!pair.log_general_type)
    throw std::invalid_argument("iterate_singular: deg(K_X+D) <= 0");
  const auto bundle = QLineBundle::log_canonical(divisor);
  if (a != bundle.denominator)
    throw std::invalid_argument("iterate_singular: a = " + std::to_string(a) +
                                " does not clear the divisor denominators (need " +
                                std::to_string(bundle.denominator) + ")");

  const double t = static_cast<double>(a - 1) / static_cast<double>(a);
  const Rational t_rat(a - 1, a);
  const Rational tau = pair.degree;

  std::vector<std::pair<int, long long>> orders;
  for (const auto& e : divisor.entries)
    orders.emplace_back(static_cast<int>(e.point), cluster_order(e.coefficient));
  GridField bump = orbifold_bump(grid, orders);
  sync_fringe(bump);

  GridField rho(grid, 1.0);
  if (opts.h_P_smooth) rho.v = opts.h_P_smooth->exp();
  std::vector<std::pair<int, double>> expo;
  for (const auto& e : divisor.entries)
    expo.emplace_back(static_cast<int>(e.point), -e.coefficient.value());

  std::vector<double> deltas = opts.delta_values;
  deltas.push_back(0.0);

  IterationTrace tr;
  tr.a = a;
  std::vector<Eigen::ArrayXd> prev_chain;  // same m, previous delta
  for (double delta : deltas) {
    const bool last = delta == 0.0;
    IterationTrace local;
    local.a = a;
    Eigen::ArrayXd u_prev = Eigen::ArrayXd::Zero(grid->node_count());
    std::vector<Eigen::ArrayXd> chain;
    double tpow = t;
    Rational alpha_m(1, a);
    for (int m = 1; m <= m_max; ++m) {
      MetricWeight bg(grid, Rational(a) * tau);
      const double aa = static_cast<double>(a);
      if (opts.h_P_smooth) bg.smooth = aa * (*opts.h_P_smooth);
      GridField rho_m = rho;
      if (delta > 0.0) {
        bg.smooth += aa * delta * tpow * opts.epsilon * bump.v;
        if (opts.E_weight) bg.curv_const_extra -= aa * delta * tpow *
                                                  opts.E_weight->bundle.degree.value();
      }
      LiouvilleProblem prob;
      prob.background = std::move(bg);
      prob.rhs = Density(rho_m, expo);
      prob.drift = -t * u_prev;
      SolveOptions o;
      const Eigen::ArrayXd* init =
          static_cast<std::size_t>(m - 1) < prev_chain.size() ? &prev_chain[m - 1] : &u_prev;
      o.initial = init;
      SolveReport rep = solve_liouville(prob, tol * 1e-2, o);
      if (!rep.converged && rep.residual_norm > tol)
        throw std::runtime_error("iterate_singular: step solve failed at m = " +
                                 std::to_string(m) + ", delta = " + std::to_string(delta) +
                                 ": " + rep.message);
      if (last) {
        local.alpha.push_back(alpha_m);
        record_step(local, prob, rep, solved_log_density(prob, rep.u), nullptr);
        // P5: the AZD measure of h_m has density (g_m g_{m-1}^{a-1})^{1/a}
        if (local.log_densities.size() >= 2) {
          const auto& gm = local.log_densities.back();
          const auto& gp = local.log_densities[local.log_densities.size() - 2];
          double mass = 0.0;
          for (int n = 0; n < grid->node_count(); ++n)
            if (grid->quad_positive(n))
              mass += std::exp(grid->log_quad_weight(n) +
                               (gm(n) + (aa - 1.0) * gp(n)) / aa);
          local.azd_masses.push_back(mass);
        }
      }
      chain.push_back(rep.u.v);
      u_prev = rep.u.v;
      tpow *= t;
      alpha_m *= t_rat;
      if (m >= 2) {
        double gap = 0.0;
        for (int n = 0; n < grid->node_count(); ++n)
          if (grid->status(n) != NodeStatus::Dead)
            gap = std::max(gap, std::abs(chain[m - 1](n) - chain[m - 2](n)));
        if (gap < tol) break;
      }
    }
    prev_chain = std::move(chain);
    if (last) {
      tr = std::move(local);
      tr.converged = tr.sup_diffs.empty()
                         ? false
                         : std::max(std::abs(tr.sup_diffs.back()),
                                    std::abs(tr.inf_diffs.back())) < tol;
      if (!tr.converged) tr.message = "m cap reached; tail extrapolation still applies";
    }
  }

  // class bookkeeping: constant at 2 pi a tau by the fixed-point start (P1/P2)
  tr.class_degrees.assign(tr.potentials.size() + 1, Rational(a) * tau);

  tr.limit_u = extrapolate_tail(tr.potentials, t);
  {
    MetricWeight bg(grid, Rational(a) * tau);
    if (opts.h_P_smooth) bg.smooth = static_cast<double>(a) * (*opts.h_P_smooth);
    GridField lap = laplacian(GridField(grid, tr.limit_u));
    GridField curv = bg.curvature_density();
    Eigen::ArrayXd logg(grid->node_count());
    double worst = 0.0;
    for (int n = 0; n < grid->node_count(); ++n) {
      if (grid->status(n) != NodeStatus::Interior) { logg(n) = 0; continue; }
      logg(n) = std::log(std::max(curv.v(n) + lap.v(n), 1e-300));
      double logrho = std::log(rho.v(n));
      for (const auto& [idx, e] : expo) logrho += e * grid->log_chordal(n, idx);
      worst = std::max(worst, std::abs(logg(n) - logrho -
                                       tr.limit_u(n) / static_cast<double>(a)));
    }
    tr.fixed_point_residual = worst;
    tr.limit_log_density = logg;
    GridField lg(grid, logg);
    sync_fringe(lg);
    tr.limit_log_density = lg.v;
  }
  return tr;
}

ContractionReport contraction_report(const IterationTrace& trace, double tol) {
  if (trace.sup_diffs.size() < 2)
    throw std::invalid_argument("contraction_report: need at least three iterates");
  ContractionReport rep;
  rep.bound = static_cast<double>(trace.a - 1) / static_cast<double>(trace.a);
  for (std::size_t m = 1; m < trace.sup_diffs.size(); ++m) {
    if (std::abs(trace.sup_diffs[m - 1]) < 1e3 * tol) break;  // ratios drown in solver noise
    rep.sup_ratios.push_back(trace.sup_diffs[m] / trace.sup_diffs[m - 1]);
    rep.inf_ratios.push_back(trace.inf_diffs[m] / trace.inf_diffs[m - 1]);
    rep.max_sup_ratio = std::max(rep.max_sup_ratio, rep.sup_ratios.back());
  }
  return rep;
}

UniquenessReport uniqueness_check(const MarkedSphereModel& model, const LogDivisor& divisor,
                                  const GridPtr& grid, long long a, int m_max, double tol,
                                  const MetricWeight& h_P_first, const MetricWeight& h_P_second,
                                  const SingularIterationOptions& opts) {
  if (!(h_P_first.bundle.degree == h_P_second.bundle.degree))
    throw std::invalid_argument("uniqueness_check: the two reference weights metrize "
                                "different classes");
  SingularIterationOptions o1 = opts, o2 = opts;
  Eigen::ArrayXd s1 = h_P_first.smooth, s2 = h_P_second.smooth;
  o1.h_P_smooth = &s1;
  o2.h_P_smooth = &s2;
  IterationTrace t1 = iterate_singular(model, divisor, grid, a, m_max, tol, o1);
  IterationTrace t2 = iterate_singular(model, divisor, grid, a, m_max, tol, o2);

  UniquenessReport rep;
  const RadialGrid& g = *grid;
  for (int n = 0; n < g.node_count(); ++n)
    if (g.status(n) == NodeStatus::Interior)
      rep.limit_discrepancy = std::max(
          rep.limit_discrepancy, std::abs(t1.limit_log_density(n) - t2.limit_log_density(n)));
  const std::size_t steps = std::min(t1.log_densities.size(), t2.log_densities.size());
  for (std::size_t m = 0; m < steps; ++m) {
    double d = 0.0;
    for (int n = 0; n < g.node_count(); ++n)
      if (g.status(n) == NodeStatus::Interior)
        d = std::max(d, std::abs(t1.log_densities[m](n) - t2.log_densities[m](n)));
    rep.per_step_discrepancy.push_back(d);
  }
  return rep;
}

}  // namespace kelab
