#include "kelab/ma_solver.hpp"

#include <Eigen/SparseLU>

#include <cmath>
#include <stdexcept>

namespace kelab {

namespace {

double expc(double x) { return std::exp(std::min(x, 600.0)); }

struct Assembled {
  const RadialGrid& g;
  Eigen::ArrayXd bscaled;    // scaled background curvature per interior row
  Eigen::ArrayXd lrhs;       // log_scale + log rhs density
  Eigen::ArrayXd drift;
  double c;

  Assembled(const LiouvilleProblem& p)
      : g(*p.background.grid),
        bscaled(Eigen::ArrayXd::Zero(g.node_count())),
        lrhs(Eigen::ArrayXd::Constant(g.node_count(), -1e300)),
        drift(p.drift ? *p.drift : Eigen::ArrayXd::Zero(g.node_count())),
        c(p.exponent_coeff) {
    const auto& A = g.scaled_operator();
    const double c0 = p.background.bundle.degree.value() - p.background.pole_sum() +
                      p.background.curv_const_extra;
    for (int n = 0; n < g.node_count(); ++n) {
      if (g.status(n) != NodeStatus::Interior) continue;
      double acc = 0.0;
      for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(A, n); it; ++it)
        acc += it.value() * (p.background.smooth(it.col()) - p.background.smooth(n));
      bscaled(n) = acc + std::exp(g.log_scale()(n)) * c0;
      lrhs(n) = g.log_scale()(n) + p.rhs.log_at(n);
    }
  }

  double rhs_term(int n, const Eigen::ArrayXd& u) const {
    return expc(lrhs(n) + c * u(n) + drift(n));
  }

  void residual(const Eigen::ArrayXd& u, Eigen::VectorXd& F) const {
    const auto& A = g.scaled_operator();
    for (int n = 0; n < g.node_count(); ++n) {
      if (g.status(n) == NodeStatus::Interior) {
        double acc = 0.0;
        for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(A, n); it; ++it)
          acc += it.value() * (u(it.col()) - u(n));
        F(n) = acc + bscaled(n) - rhs_term(n, u);
      } else {
        F(n) = u(n);
      }
    }
    for (const auto& row : g.fringe_rows()) {
      double s = 0.0;
      for (int k = 0; k < 9; ++k) s += row.w[k] * u(row.donors[k]);
      F(row.node) -= s;
    }
  }
};

}  // namespace

SolveReport solve_liouville(const LiouvilleProblem& problem, double tol,
                            const SolveOptions& opts) {
  const RadialGrid& g = *problem.background.grid;
  if (problem.rhs.grid().get() != &g)
    throw std::invalid_argument("solve_liouville: rhs lives on a different grid");
  if (problem.drift && problem.drift->size() != g.node_count())
    throw std::invalid_argument("solve_liouville: drift lives on a different grid");
  if (opts.require_big && !(problem.background.bundle.degree > Rational(0)))
    throw std::invalid_argument(
        "solve_liouville: background class is not big (degree <= 0); refusing");

  const int N = g.node_count();
  Assembled as(problem);

  // per-row magnitude for the irreducible cancellation noise of the stencil
  Eigen::ArrayXd rowabs = Eigen::ArrayXd::Ones(N);
  {
    const auto& A = g.scaled_operator();
    for (int n = 0; n < N; ++n) {
      if (g.status(n) != NodeStatus::Interior) continue;
      double acc = std::abs(g.row_sum()(n));
      for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(A, n); it; ++it)
        acc += std::abs(it.value());
      rowabs(n) = acc;
    }
  }

  Eigen::ArrayXd u = opts.initial ? *opts.initial : Eigen::ArrayXd::Zero(N);
  Eigen::VectorXd F(N), Fnew(N);
  as.residual(u, F);
  double fnorm = F.norm();

  Eigen::SparseMatrix<double> J(N, N);
  std::vector<Eigen::Triplet<double>> trips;
  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
  bool analyzed = false;

  SolveReport rep;
  rep.u = GridField(problem.background.grid);
  int iter = 0;
  for (; iter < opts.max_iterations; ++iter) {
    // convergence test on the relative (log-form) residual, after deducting
    // the cancellation noise floor of each row
    const double unorm = 1.0 + u.abs().maxCoeff();
    double rmain = 0.0, rdeep = 0.0;
    for (int n = 0; n < N; ++n) {
      const double guard = 100.0 * 2.2e-16 * rowabs(n) * unorm;
      if (g.status(n) == NodeStatus::Interior) {
        const double scale = std::abs(as.rhs_term(n, u)) + std::abs(as.bscaled(n)) + 1e-300;
        const double rel = std::max(0.0, std::abs(F(n)) - guard) / scale;
        if (as.lrhs(n) + as.c * u(n) + as.drift(n) >= opts.reporting_floor)
          rmain = std::max(rmain, rel);
        else
          rdeep = std::max(rdeep, rel);
      } else {
        rmain = std::max(rmain, std::max(0.0, std::abs(F(n)) - guard));
      }
    }
    rep.residual_norm = rmain;
    rep.deep_residual = rdeep;
    if (rmain <= tol) {
      rep.converged = true;
      break;
    }

    trips.clear();
    const auto& A = g.scaled_operator();
    for (int n = 0; n < N; ++n) {
      if (g.status(n) == NodeStatus::Interior) {
        for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(A, n); it; ++it)
          trips.emplace_back(n, it.col(), it.value());
        trips.emplace_back(n, n, -g.row_sum()(n) - as.c * as.rhs_term(n, u));
      } else {
        trips.emplace_back(n, n, 1.0);
      }
    }
    for (const auto& row : g.fringe_rows())
      for (int k = 0; k < 9; ++k)
        if (row.w[k] != 0.0) trips.emplace_back(row.node, row.donors[k], -row.w[k]);
    J.setFromTriplets(trips.begin(), trips.end());
    if (!analyzed) {
      lu.analyzePattern(J);
      analyzed = true;
    }
    lu.factorize(J);
    if (lu.info() != Eigen::Success) {
      rep.message = "Newton Jacobian factorization failed";
      break;
    }
    Eigen::VectorXd step = lu.solve(-F);
    // one round of iterative refinement to push past poor column scaling
    {
      Eigen::VectorXd r2 = -F - J * step;
      step += lu.solve(r2);
    }

    double alpha = 1.0;
    bool accepted = false;
    for (int bt = 0; bt < 30; ++bt) {
      Eigen::ArrayXd trial = u + alpha * step.array();
      as.residual(trial, Fnew);
      if (Fnew.norm() <= (1.0 - 0.25 * alpha) * fnorm) {
        u = trial;
        F = Fnew;
        fnorm = F.norm();
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) {
      rep.message = "Newton stalled at the floating-point floor; residual recorded";
      break;
    }
  }
  rep.newton_iterations = iter;
  rep.u.v = u;
  auto ext = extrema(rep.u);
  rep.sup_u = ext.sup;
  rep.inf_u = ext.inf;

  // area of the solved density
  double mass = 0.0;
  for (int n = 0; n < N; ++n)
    if (g.quad_positive(n))
      mass += std::exp(g.log_quad_weight(n) + problem.rhs.log_at(n) + as.c * u(n) + as.drift(n));
  rep.area = mass;

  // discrete maximum-principle consistency at the argmax (driftless case):
  // L u <= 0 there forces c u <= log(background curvature / rhs)
  if (!problem.drift && rep.converged) {
    const int nmax = ext.argmax;
    if (g.status(nmax) == NodeStatus::Interior) {
      const double theta = as.bscaled(nmax) * std::exp(-g.log_scale()(nmax));
      const double logrho = problem.rhs.log_at(nmax);
      if (theta > 0.0)
        rep.max_principle_ok = as.c * u(nmax) <= std::log(theta) - logrho + 100.0 * tol;
    }
  }
  if (!rep.converged && rep.message.empty()) rep.message = "Newton hit the iteration cap";
  return rep;
}

Eigen::ArrayXd solved_log_density(const LiouvilleProblem& problem, const GridField& u) {
  const RadialGrid& g = *problem.background.grid;
  Eigen::ArrayXd out(g.node_count());
  for (int n = 0; n < g.node_count(); ++n) {
    const double drift = problem.drift ? (*problem.drift)(n) : 0.0;
    out(n) = g.status(n) == NodeStatus::Dead
                 ? -1e300
                 : problem.rhs.log_at(n) + problem.exponent_coeff * u.v(n) + drift;
  }
  return out;
}

PerturbationSchedule PerturbationSchedule::geometric(double first, double last) {
  PerturbationSchedule s;
  for (double d = first; d > last; d *= 0.5) s.delta_values.push_back(d);
  s.delta_values.push_back(last);
  return s;
}

namespace {

// the delta-perturbed problem of the continuation family
LiouvilleProblem perturbed_problem(const MarkedSphereModel& model, const LogDivisor& divisor,
                                   const GridPtr& grid, const PerturbationSchedule& schedule,
                                   double delta, const Eigen::ArrayXd* h_P_smooth,
                                   const GridField& bump) {
  auto pair = classify_pair(model, divisor);
  MetricWeight bg(grid, pair.degree);
  if (h_P_smooth) bg.smooth = *h_P_smooth;

  GridField rho(grid, 1.0);
  if (h_P_smooth) rho.v = h_P_smooth->exp();
  std::vector<std::pair<int, double>> expo;
  for (const auto& e : divisor.entries)
    expo.emplace_back(static_cast<int>(e.point), -e.coefficient.value());

  if (delta > 0.0) {
    bg.smooth += delta * schedule.epsilon * bump.v;
    rho.v *= (delta * schedule.epsilon * bump.v).exp();
    if (schedule.E_weight) {
      const MetricWeight& E = *schedule.E_weight;
      bg.curv_const_extra -= delta * E.bundle.degree.value();
      for (const auto& [idx, cq] : E.poles) expo.emplace_back(idx, delta * cq);
    }
  }

  LiouvilleProblem prob;
  prob.background = std::move(bg);
  prob.rhs = Density(std::move(rho), std::move(expo));
  prob.exponent_coeff = 1.0;
  return prob;
}

}  // namespace

CanonicalKEResult solve_canonical_KE_klt(const MarkedSphereModel& model,
                                         const LogDivisor& divisor, const GridPtr& grid,
                                         const PerturbationSchedule& schedule, double tol,
                                         const Eigen::ArrayXd* h_P_smooth,
                                         const Eigen::ArrayXd* warm_start) {
  auto pair = classify_pair(model, divisor);
  if (pair.classification != PairClass::KLT)
    throw std::invalid_argument("solve_canonical_KE_klt: pair is " +
                                to_string(pair.classification) +
                                "; only KLT input is accepted (use the LC limit path)");
  if (!pair.log_general_type)
    throw std::invalid_argument("solve_canonical_KE_klt: deg(K_X+D) = " + pair.degree.str() +
                                " is not positive");
  for (std::size_t i = 1; i < schedule.delta_values.size(); ++i)
    if (!(schedule.delta_values[i] < schedule.delta_values[i - 1]))
      throw std::invalid_argument("perturbation schedule must be strictly decreasing");

  std::vector<std::pair<int, long long>> orders;
  for (const auto& e : divisor.entries)
    orders.emplace_back(static_cast<int>(e.point), cluster_order(e.coefficient));
  GridField bump = orbifold_bump(grid, orders);
  // fringe values must satisfy the interpolation identity exactly, so the
  // delta-family stays a pure gauge of the limit problem on this grid
  sync_fringe(bump);

  CanonicalKEResult out;
  Eigen::ArrayXd u_prev;
  const Eigen::ArrayXd* init = warm_start;
  for (double delta : schedule.delta_values) {
    LiouvilleProblem prob =
        perturbed_problem(model, divisor, grid, schedule, delta, h_P_smooth, bump);
    SolveOptions o;
    o.initial = init;
    SolveReport rep = solve_liouville(prob, tol, o);
    if (!rep.converged)
      throw std::runtime_error("continuation solve diverged at delta = " + std::to_string(delta) +
                               ": " + rep.message);
    out.trace.push_back({delta, rep.newton_iterations, rep.residual_norm, rep.area, rep.sup_u,
                         rep.inf_u});
    out.delta_log_densities.push_back(solved_log_density(prob, rep.u));
    u_prev = rep.u.v;
    init = &u_prev;
  }

  LiouvilleProblem prob =
      perturbed_problem(model, divisor, grid, schedule, 0.0, h_P_smooth, bump);
  SolveOptions o;
  o.initial = init;
  out.report = solve_liouville(prob, tol, o);
  if (!out.report.converged)
    throw std::runtime_error("limit solve (delta = 0) diverged: " + out.report.message);
  out.log_density = solved_log_density(prob, out.report.u);
  out.trace.push_back({0.0, out.report.newton_iterations, out.report.residual_norm,
                       out.report.area, out.report.sup_u, out.report.inf_u});

  // Richardson check: densities are smooth in delta, so the linear tail
  // extrapolation must land on the solved limit
  const std::size_t m = out.delta_log_densities.size();
  if (m >= 2) {
    const double d1 = schedule.delta_values[m - 1], d0 = schedule.delta_values[m - 2];
    const Eigen::ArrayXd& g1 = out.delta_log_densities[m - 1];
    const Eigen::ArrayXd& g0 = out.delta_log_densities[m - 2];
    Eigen::ArrayXd extrap = g1 + (g1 - g0) * (d1 / (d0 - d1));
    double gap = 0.0;
    for (int n = 0; n < grid->node_count(); ++n)
      if (grid->status(n) != NodeStatus::Dead)
        gap = std::max(gap, std::abs(extrap(n) - out.log_density(n)));
    out.extrapolation_gap = gap;
  }
  out.problem = std::move(prob);
  return out;
}

AlmostBoundednessReport almost_boundedness_report(const GridField& u,
                                                  const std::optional<MetricWeight>& E_weight,
                                                  const std::vector<double>& delta0_values) {
  const RadialGrid& g = *u.grid;
  AlmostBoundednessReport rep;
  rep.c_plus = extrema(u).sup;
  for (double d0 : delta0_values) {
    double cmin = 1e300;
    for (int n = 0; n < g.node_count(); ++n) {
      if (g.status(n) == NodeStatus::Dead) continue;
      double log_sigma_e = 0.0;
      if (E_weight)
        for (const auto& [idx, cq] : E_weight->poles) log_sigma_e += cq * g.log_chordal(n, idx);
      cmin = std::min(cmin, u.v(n) - d0 * log_sigma_e);
    }
    rep.c_minus.emplace_back(d0, cmin);
  }
  return rep;
}

}  // namespace kelab
