#include "kelab/gauss.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <stdexcept>

namespace kelab {

namespace {

// Golub-Welsch from a symmetric tridiagonal recurrence
GaussRule golub_welsch(const Eigen::ArrayXd& diag, const Eigen::ArrayXd& offdiag, double mu0) {
  const int n = static_cast<int>(diag.size());
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    J(i, i) = diag(i);
    if (i + 1 < n) J(i, i + 1) = J(i + 1, i) = offdiag(i);
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
  GaussRule rule;
  rule.x = es.eigenvalues().array();
  rule.w = mu0 * es.eigenvectors().row(0).array().square();
  return rule;
}

}  // namespace

GaussRule gauss_legendre(int n) {
  if (n < 1) throw std::invalid_argument("gauss_legendre: n >= 1");
  Eigen::ArrayXd d = Eigen::ArrayXd::Zero(n), e(n - 1 >= 0 ? n - 1 : 0);
  for (int k = 1; k < n; ++k) {
    const double kk = k;
    e(k - 1) = kk / std::sqrt(4.0 * kk * kk - 1.0);
  }
  return golub_welsch(d, e, 2.0);
}

GaussRule gauss_jacobi01(int n, double beta) {
  if (n < 1) throw std::invalid_argument("gauss_jacobi01: n >= 1");
  if (beta <= -1.0) throw std::invalid_argument("gauss_jacobi01: beta must exceed -1");
  // Jacobi weight (1+x)^beta on [-1,1] (alpha = 0), then map to [0,1]
  const double a = 0.0, b = beta;
  Eigen::ArrayXd d(n), e(n > 1 ? n - 1 : 0);
  for (int k = 0; k < n; ++k) {
    const double kk = k;
    const double den = (2 * kk + a + b) * (2 * kk + a + b + 2);
    d(k) = den == 0.0 ? 0.0 : (b * b - a * a) / den;
  }
  for (int k = 1; k < n; ++k) {
    const double kk = k;
    const double num = 4.0 * kk * (kk + a) * (kk + b) * (kk + a + b);
    const double den = std::pow(2 * kk + a + b, 2.0) * (2 * kk + a + b + 1) * (2 * kk + a + b - 1);
    e(k - 1) = std::sqrt(num / den);
  }
  // mu0 = int_{-1}^1 (1+x)^b dx = 2^{b+1}/(b+1)
  const double mu0 = std::pow(2.0, b + 1.0) / (b + 1.0);
  GaussRule r = golub_welsch(d, e, mu0);
  // map x -> (1+x)/2 and rescale: int_0^1 f u^b du = 2^{-b-1} sum w f((1+x)/2)
  GaussRule out;
  out.x = (r.x + 1.0) / 2.0;
  out.w = r.w * std::pow(2.0, -b - 1.0);
  return out;
}

}  // namespace kelab
