#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "kelab/geometry.hpp"
#include "kelab/rational.hpp"

using namespace kelab;

namespace {

MarkedSphereModel cube_roots() {
  MarkedSphereModel m;
  for (int k = 0; k < 3; ++k) {
    const double th = 2.0 * M_PI * k / 3.0;
    m.marked_points.push_back(SpherePoint::finite({std::cos(th), std::sin(th)}));
  }
  return m;
}

}  // namespace

TEST_CASE("rational arithmetic and parsing") {
  CHECK(Rational::parse("5/6") == Rational(5, 6));
  CHECK(Rational(1, 2) + Rational(1, 3) == Rational(5, 6));
  CHECK(Rational(-2) + Rational(5, 2) == Rational(1, 2));
  CHECK(Rational(4, 8) == Rational(1, 2));
  CHECK(Rational(1, 2) < Rational(2, 3));
  CHECK(Rational(3, 6).str() == "1/2");
}

TEST_CASE("classify_pair on the three stated examples") {
  MarkedSphereModel m = cube_roots();

  auto d1 = LogDivisor::make(m, {{0, {5, 6}}, {1, {5, 6}}, {2, {5, 6}}});
  auto r1 = classify_pair(m, d1);
  CHECK(r1.classification == PairClass::KLT);
  CHECK(r1.degree == Rational(1, 2));
  CHECK(r1.log_general_type);

  auto d2 = LogDivisor::make(m, {{0, 1}, {1, 1}, {2, 1}});
  auto r2 = classify_pair(m, d2);
  CHECK(r2.classification == PairClass::LCNotKLT);
  CHECK(r2.degree == Rational(1));

  auto d3 = LogDivisor::make(m, {{0, {3, 2}}});
  auto r3 = classify_pair(m, d3);
  CHECK(r3.classification == PairClass::Invalid);
  CHECK(r3.diagnostic.find("3/2") != std::string::npos);
}

TEST_CASE("classification is monotone under scaling into (0,1)") {
  MarkedSphereModel m = cube_roots();
  auto lc = LogDivisor::make(m, {{0, 1}, {1, 1}, {2, 1}});
  for (auto t : {Rational(1, 2), Rational(9, 10), Rational(99, 100)}) {
    auto scaled = lc.scaled(m, t);
    CHECK(scaled.classification == PairClass::KLT);
  }
  auto klt = LogDivisor::make(m, {{0, {5, 6}}, {1, {2, 3}}, {2, {5, 6}}});
  for (auto t : {Rational(1, 3), Rational(3, 4)})
    CHECK(klt.scaled(m, t).classification == PairClass::KLT);
}

TEST_CASE("zero coefficients are dropped, invalid ones rejected") {
  MarkedSphereModel m = cube_roots();
  auto d = LogDivisor::make(m, {{0, {5, 6}}, {1, 0}});
  CHECK(d.entries.size() == 1);
  CHECK(d.classification == PairClass::KLT);
  auto neg = LogDivisor::make(m, {{0, {-1, 2}}});
  CHECK(neg.classification == PairClass::Invalid);
  CHECK_THROWS(LogDivisor::make(m, {{7, {1, 2}}}));
}

TEST_CASE("zariski decomposition on the curve") {
  MarkedSphereModel m = cube_roots();
  auto r = classify_pair(m, LogDivisor::make(m, {{0, {5, 6}}, {1, {5, 6}}, {2, {5, 6}}}));
  auto z = zariski_decompose(r);
  CHECK(z.big);
  CHECK(z.p_degree == Rational(1, 2));
  CHECK(z.n_entries.empty());

  PairReport zero;
  zero.degree = Rational(0);
  CHECK_FALSE(zariski_decompose(zero).big);
  PairReport neg;
  neg.degree = Rational(-1, 3);
  CHECK_FALSE(zariski_decompose(neg).big);
}

TEST_CASE("P_degree + deg N equals deg(K_X + D)") {
  MarkedSphereModel m = cube_roots();
  auto r = classify_pair(m, LogDivisor::make(m, {{0, {3, 4}}, {1, {3, 4}}, {2, {3, 4}}}));
  auto z = zariski_decompose(r);
  Rational n_deg(0);
  for (const auto& e : z.n_entries) n_deg += e.coefficient;
  CHECK(z.p_degree + n_deg == r.degree);
}

TEST_CASE("cluster order derivation") {
  CHECK(cluster_order(Rational(5, 6)) == 7);
  CHECK(cluster_order(Rational(1, 2)) == 3);
  CHECK(cluster_order(Rational(2, 3)) == 4);
  CHECK(cluster_order(Rational(99, 100)) == 101);
}

TEST_CASE("log canonical bundle bookkeeping") {
  MarkedSphereModel m = cube_roots();
  auto d = LogDivisor::make(m, {{0, {5, 6}}, {1, {5, 6}}, {2, {5, 6}}});
  auto kd = QLineBundle::log_canonical(d);
  CHECK(kd.degree == Rational(1, 2));
  CHECK(kd.denominator == 6);
  CHECK((kd.degree * Rational(kd.denominator)).is_integer());
  CHECK(QLineBundle::canonical().degree == Rational(-2));
}

TEST_CASE("marked points must be distinct and representable") {
  MarkedSphereModel m;
  m.marked_points.push_back(SpherePoint::finite({1.0, 0.0}));
  m.marked_points.push_back(SpherePoint::finite({1.0, 0.0}));
  CHECK_THROWS(m.validate());

  MarkedSphereModel ok;
  ok.marked_points.push_back(SpherePoint::finite({0.0, 0.0}));
  ok.marked_points.push_back(SpherePoint::infinity());
  CHECK_NOTHROW(ok.validate());
}

TEST_CASE("chordal distance basics") {
  CHECK(chordal_distance(SpherePoint::finite({0, 0}), SpherePoint::infinity()) ==
        doctest::Approx(1.0));
  CHECK(chordal_distance(SpherePoint::finite({1, 0}), SpherePoint::finite({1, 0})) ==
        doctest::Approx(0.0));
}
