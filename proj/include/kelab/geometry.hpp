#pragma once

#include <complex>
#include <optional>
#include <string>
#include <vector>

#include "kelab/rational.hpp"

namespace kelab {

using Complex = std::complex<double>;

// Point on the sphere in the two-chart atlas z <-> w = 1/z.
struct SpherePoint {
  Complex z{0.0, 0.0};   // standard-chart coordinate, ignored when at_infinity
  bool at_infinity = false;

  static SpherePoint infinity() { return SpherePoint{Complex(0, 0), true}; }
  static SpherePoint finite(Complex z) { return SpherePoint{z, false}; }
};

// Chordal distance on the unit-diameter sphere metric induced by Fubini-Study.
double chordal_distance(const SpherePoint& a, const SpherePoint& b);

// log ||sigma_p||^2 at x, where sigma_p is the O(1) section vanishing at p with
// sup norm 1.  Smooth away from p, equal to log|z-p|^2 plus smooth terms.
double log_section_norm_sq(const SpherePoint& p, Complex x_std);
double log_section_norm_sq_cap(const SpherePoint& p, Complex x_cap);

struct MarkedSphereModel {
  std::vector<SpherePoint> marked_points;
  // Two-chart atlas with transition z -> 1/z; fields are stored on the
  // standard chart plus a cap patch around infinity.
  std::string chart_convention = "two-chart z->1/z";

  // throws std::invalid_argument when marked points collide
  void validate() const;
  std::size_t size() const { return marked_points.size(); }
};

enum class PairClass { KLT, LCNotKLT, Invalid };

struct DivisorEntry {
  std::size_t point;   // index into MarkedSphereModel::marked_points
  Rational coefficient;
};

struct LogDivisor {
  std::vector<DivisorEntry> entries;
  PairClass classification = PairClass::Invalid;

  // Drops zero entries, classifies, throws on out-of-range point indices.
  static LogDivisor make(const MarkedSphereModel& model, std::vector<DivisorEntry> entries);

  Rational coefficient_sum() const;
  LogDivisor scaled(const MarkedSphereModel& model, const Rational& t) const;
};

struct QLineBundle {
  Rational degree;
  long long denominator = 1;  // smallest a with a*degree data integral

  static QLineBundle canonical() { return QLineBundle{Rational(-2), 1}; }
  static QLineBundle log_canonical(const LogDivisor& d);
};

struct PairReport {
  PairClass classification = PairClass::Invalid;
  Rational degree;               // deg(K_X + D) = -2 + sum d_i
  bool log_general_type = false;
  std::string diagnostic;        // names the offending entry on rejection
};

PairReport classify_pair(const MarkedSphereModel& model, const LogDivisor& divisor);

struct ZariskiData {
  Rational p_degree;
  std::vector<DivisorEntry> n_entries;  // always empty on the curve at positive degree
  bool big = false;
  std::string report;
};

ZariskiData zariski_decompose(const PairReport& pair);

// Smallest integer b with d < (b-1)/b, i.e. the clustering order of the
// power-law radial map replacing the local cyclic covering.
long long cluster_order(const Rational& d);

std::string to_string(PairClass c);

}  // namespace kelab
