#pragma once

#include <Eigen/Dense>

namespace kelab {

struct GaussRule {
  Eigen::ArrayXd x, w;
};

// nodes/weights for int_{-1}^{1} f
GaussRule gauss_legendre(int n);

// nodes/weights for int_0^1 f(x) x^beta dx, beta > -1 (weight absorbed in w)
GaussRule gauss_jacobi01(int n, double beta);

}  // namespace kelab
