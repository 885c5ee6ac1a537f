#pragma once

#include <Eigen/Core>
#include <cmath>
#include <ostream>

namespace shlab {

// First-order dual number: a + b*eps with eps^2 = 0. Evaluating the whole
// reverse-mode pass in Dual arithmetic at theta + eps*v turns every gradient
// into gradient + eps*(H v), which is how hvp() gets exact Hessian-vector
// products without building a Hessian.
struct Dual {
  double a = 0.0;  // value
  double b = 0.0;  // tangent

  constexpr Dual() = default;
  constexpr Dual(double value) : a(value) {}  // NOLINT: constants promote implicitly
  constexpr Dual(double value, double tangent) : a(value), b(tangent) {}
};

constexpr Dual operator+(Dual x, Dual y) { return {x.a + y.a, x.b + y.b}; }
constexpr Dual operator-(Dual x, Dual y) { return {x.a - y.a, x.b - y.b}; }
constexpr Dual operator-(Dual x) { return {-x.a, -x.b}; }
constexpr Dual operator*(Dual x, Dual y) {
  return {x.a * y.a, x.a * y.b + x.b * y.a};
}
constexpr Dual operator/(Dual x, Dual y) {
  const double inv = 1.0 / y.a;
  return {x.a * inv, (x.b - x.a * inv * y.b) * inv};
}

inline Dual& operator+=(Dual& x, Dual y) { return x = x + y; }
inline Dual& operator-=(Dual& x, Dual y) { return x = x - y; }
inline Dual& operator*=(Dual& x, Dual y) { return x = x * y; }
inline Dual& operator/=(Dual& x, Dual y) { return x = x / y; }

// Ordering and equality follow the value part; tangents ride along.
constexpr bool operator<(Dual x, Dual y) { return x.a < y.a; }
constexpr bool operator>(Dual x, Dual y) { return x.a > y.a; }
constexpr bool operator<=(Dual x, Dual y) { return x.a <= y.a; }
constexpr bool operator>=(Dual x, Dual y) { return x.a >= y.a; }
constexpr bool operator==(Dual x, Dual y) { return x.a == y.a; }
constexpr bool operator!=(Dual x, Dual y) { return x.a != y.a; }

inline Dual sqrt(Dual x) {
  const double r = std::sqrt(x.a);
  return {r, x.b * 0.5 / r};
}
inline Dual exp(Dual x) {
  const double e = std::exp(x.a);
  return {e, x.b * e};
}
inline Dual log(Dual x) { return {std::log(x.a), x.b / x.a}; }
inline Dual tanh(Dual x) {
  const double t = std::tanh(x.a);
  return {t, x.b * (1.0 - t * t)};
}
inline Dual erf(Dual x) {
  // erf'(x) = 2/sqrt(pi) * exp(-x^2)
  const double d = 1.1283791670955125738961589031215 * std::exp(-x.a * x.a);
  return {std::erf(x.a), x.b * d};
}
inline Dual abs(Dual x) { return x.a < 0.0 ? -x : x; }
inline bool isfinite(Dual x) { return std::isfinite(x.a) && std::isfinite(x.b); }

inline std::ostream& operator<<(std::ostream& os, Dual x) {
  return os << x.a << "+" << x.b << "e";
}

}  // namespace shlab

namespace Eigen {

template <>
struct NumTraits<shlab::Dual> : NumTraits<double> {
  typedef shlab::Dual Real;
  typedef shlab::Dual NonInteger;
  typedef shlab::Dual Nested;
  typedef shlab::Dual Literal;
  enum {
    IsComplex = 0,
    IsInteger = 0,
    IsSigned = 1,
    RequireInitialization = 1,
    ReadCost = 2,
    AddCost = 4,
    MulCost = 8,
  };
  static inline Real epsilon() { return {NumTraits<double>::epsilon()}; }
  static inline Real dummy_precision() {
    return {NumTraits<double>::dummy_precision()};
  }
  static inline Real highest() { return {NumTraits<double>::highest()}; }
  static inline Real lowest() { return {NumTraits<double>::lowest()}; }
  static inline int digits10() { return NumTraits<double>::digits10(); }
};

namespace internal {
template <>
struct scalar_random_op<shlab::Dual>;  // intentionally undefined
}  // namespace internal

}  // namespace Eigen
