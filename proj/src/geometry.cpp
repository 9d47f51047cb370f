#include "kelab/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace kelab {

double chordal_distance(const SpherePoint& a, const SpherePoint& b) {
  if (a.at_infinity && b.at_infinity) return 0.0;
  if (a.at_infinity || b.at_infinity) {
    const Complex z = a.at_infinity ? b.z : a.z;
    return 1.0 / std::sqrt(1.0 + std::norm(z));
  }
  return std::abs(a.z - b.z) /
         std::sqrt((1.0 + std::norm(a.z)) * (1.0 + std::norm(b.z)));
}

double log_section_norm_sq(const SpherePoint& p, Complex x) {
  const double log1x = std::log1p(std::norm(x));
  if (p.at_infinity) return -log1x;
  return std::log(std::norm(x - p.z)) - log1x - std::log1p(std::norm(p.z));
}

double log_section_norm_sq_cap(const SpherePoint& p, Complex w) {
  const double log1w = std::log1p(std::norm(w));
  if (p.at_infinity) return std::log(std::norm(w)) - log1w;
  return std::log(std::norm(Complex(1, 0) - p.z * w)) - log1w - std::log1p(std::norm(p.z));
}

void MarkedSphereModel::validate() const {
  for (std::size_t i = 0; i < marked_points.size(); ++i) {
    if (!marked_points[i].at_infinity && !std::isfinite(std::abs(marked_points[i].z)))
      throw std::invalid_argument("marked point " + std::to_string(i) +
                                  " is not representable in any chart");
    for (std::size_t j = i + 1; j < marked_points.size(); ++j) {
      if (chordal_distance(marked_points[i], marked_points[j]) < 1e-9)
        throw std::invalid_argument("marked points " + std::to_string(i) + " and " +
                                    std::to_string(j) + " coincide");
    }
  }
}

LogDivisor LogDivisor::make(const MarkedSphereModel& model, std::vector<DivisorEntry> entries) {
  LogDivisor d;
  for (const auto& e : entries) {
    if (e.point >= model.size())
      throw std::invalid_argument("divisor entry references unknown marked point " +
                                  std::to_string(e.point));
    if (e.coefficient == Rational(0)) continue;  // dropped on construction
    d.entries.push_back(e);
  }
  bool invalid = false, has_one = false;
  for (const auto& e : d.entries) {
    if (e.coefficient > Rational(1) || e.coefficient <= Rational(0)) invalid = true;
    if (e.coefficient == Rational(1)) has_one = true;
  }
  d.classification = invalid ? PairClass::Invalid
                             : (has_one ? PairClass::LCNotKLT : PairClass::KLT);
  return d;
}

Rational LogDivisor::coefficient_sum() const {
  Rational s(0);
  for (const auto& e : entries) s += e.coefficient;
  return s;
}

LogDivisor LogDivisor::scaled(const MarkedSphereModel& model, const Rational& t) const {
  std::vector<DivisorEntry> scaled_entries;
  for (const auto& e : entries) scaled_entries.push_back({e.point, e.coefficient * t});
  return LogDivisor::make(model, scaled_entries);
}

QLineBundle QLineBundle::log_canonical(const LogDivisor& d) {
  long long a = 1;
  for (const auto& e : d.entries) a = lcm_denominator(a, e.coefficient);
  return QLineBundle{Rational(-2) + d.coefficient_sum(), a};
}

PairReport classify_pair(const MarkedSphereModel& model, const LogDivisor& divisor) {
  PairReport r;
  r.classification = divisor.classification;
  r.degree = Rational(-2) + divisor.coefficient_sum();
  if (divisor.classification == PairClass::Invalid) {
    for (const auto& e : divisor.entries) {
      if (e.coefficient > Rational(1) || e.coefficient <= Rational(0)) {
        r.diagnostic = "coefficient " + e.coefficient.str() + " at marked point " +
                       std::to_string(e.point) + " lies outside (0,1]";
        break;
      }
    }
    return r;
  }
  (void)model;
  r.log_general_type = r.degree > Rational(0);
  return r;
}

ZariskiData zariski_decompose(const PairReport& pair) {
  ZariskiData z;
  z.p_degree = pair.degree;
  if (pair.degree > Rational(0)) {
    z.big = true;
    z.report = "P = " + pair.degree.str() + ", N empty";
  } else {
    z.big = false;
    z.report = "deg(K_X+D) = " + pair.degree.str() + " is not big; solvers refuse this input";
  }
  return z;
}

long long cluster_order(const Rational& d) {
  // smallest b with d*b < b-1, exact in rational arithmetic
  if (d >= Rational(1)) throw std::domain_error("cluster_order requires d < 1");
  if (d <= Rational(0)) return 1;
  long long b = 2;
  while (!(d * Rational(b) < Rational(b - 1))) ++b;
  return b;
}

std::string to_string(PairClass c) {
  switch (c) {
    case PairClass::KLT: return "KLT";
    case PairClass::LCNotKLT: return "LC-not-KLT";
    default: return "invalid";
  }
}

}  // namespace kelab
