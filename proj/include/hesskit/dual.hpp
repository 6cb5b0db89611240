#pragma once

#include <cmath>
#include <numbers>

namespace hesskit {

/// First-order dual number. Running the engine's recorded arithmetic on
/// Dual<double> instead of double turns every intermediate value into a
/// (value, directional-derivative) pair, which is how the library forms
/// Hessian-vector products: the tangent of a reverse-mode gradient is H*v.
template <typename T>
struct Dual {
  T v{};  // primal value
  T t{};  // tangent along the seeded direction

  constexpr Dual() = default;
  constexpr Dual(T value) : v(value), t(T(0)) {}
  constexpr Dual(T value, T tangent) : v(value), t(tangent) {}
};

using Dual64 = Dual<double>;

template <typename T>
constexpr Dual<T> operator-(const Dual<T>& x) {
  return {-x.v, -x.t};
}

template <typename T>
constexpr Dual<T> operator+(const Dual<T>& a, const Dual<T>& b) {
  return {a.v + b.v, a.t + b.t};
}
template <typename T>
constexpr Dual<T> operator-(const Dual<T>& a, const Dual<T>& b) {
  return {a.v - b.v, a.t - b.t};
}
template <typename T>
constexpr Dual<T> operator*(const Dual<T>& a, const Dual<T>& b) {
  return {a.v * b.v, a.t * b.v + a.v * b.t};
}
template <typename T>
constexpr Dual<T> operator/(const Dual<T>& a, const Dual<T>& b) {
  const T q = a.v / b.v;
  return {q, (a.t - q * b.t) / b.v};
}

template <typename T>
constexpr Dual<T> operator+(const Dual<T>& a, T b) {
  return {a.v + b, a.t};
}
template <typename T>
constexpr Dual<T> operator+(T a, const Dual<T>& b) {
  return {a + b.v, b.t};
}
template <typename T>
constexpr Dual<T> operator-(const Dual<T>& a, T b) {
  return {a.v - b, a.t};
}
template <typename T>
constexpr Dual<T> operator-(T a, const Dual<T>& b) {
  return {a - b.v, -b.t};
}
template <typename T>
constexpr Dual<T> operator*(const Dual<T>& a, T b) {
  return {a.v * b, a.t * b};
}
template <typename T>
constexpr Dual<T> operator*(T a, const Dual<T>& b) {
  return {a * b.v, a * b.t};
}
template <typename T>
constexpr Dual<T> operator/(const Dual<T>& a, T b) {
  return {a.v / b, a.t / b};
}
template <typename T>
constexpr Dual<T> operator/(T a, const Dual<T>& b) {
  const T q = a / b.v;
  return {q, -q * b.t / b.v};
}

template <typename T>
constexpr Dual<T>& operator+=(Dual<T>& a, const Dual<T>& b) {
  a.v += b.v;
  a.t += b.t;
  return a;
}
template <typename T>
constexpr Dual<T>& operator-=(Dual<T>& a, const Dual<T>& b) {
  a.v -= b.v;
  a.t -= b.t;
  return a;
}

template <typename T>
Dual<T> exp(const Dual<T>& x) {
  const T e = std::exp(x.v);
  return {e, e * x.t};
}

template <typename T>
Dual<T> log(const Dual<T>& x) {
  return {std::log(x.v), x.t / x.v};
}

template <typename T>
Dual<T> sqrt(const Dual<T>& x) {
  const T s = std::sqrt(x.v);
  return {s, x.t / (T(2) * s)};
}

template <typename T>
Dual<T> erf(const Dual<T>& x) {
  // d/dx erf(x) = 2/sqrt(pi) * exp(-x^2)
  const T d = T(2) * std::numbers::inv_sqrtpi_v<T> * std::exp(-x.v * x.v);
  return {std::erf(x.v), d * x.t};
}

/// Primal part of a scalar; identity for plain doubles. Branch conditions in
/// kernels (masking, ReLU) compare primal values only.
inline double primal(double x) { return x; }
template <typename T>
T primal(const Dual<T>& x) {
  return x.v;
}

inline bool all_finite(double x) { return std::isfinite(x); }
template <typename T>
bool all_finite(const Dual<T>& x) {
  return std::isfinite(x.v) && std::isfinite(x.t);
}

}  // namespace hesskit
