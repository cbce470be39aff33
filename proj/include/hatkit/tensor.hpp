#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "hatkit/errors.hpp"
#include "hatkit/rng.hpp"

namespace hatkit {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

// Dense row-major real tensor. Values are immutable once handed to a Graph;
// scalar type is float for training and double for verification work.
template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;

  Tensor() = default;
  Tensor(Shape s, std::vector<T> d, bool rg = false)
      : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    for (int64_t d : shape)
      if (d <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape));
  }

  static Tensor zeros(Shape s) {
    int64_t n = shape_numel(s);
    return Tensor(std::move(s), std::vector<T>(static_cast<size_t>(n), T(0)));
  }

  static Tensor full(Shape s, T v) {
    int64_t n = shape_numel(s);
    return Tensor(std::move(s), std::vector<T>(static_cast<size_t>(n), v));
  }

  static Tensor scalar(T v) { return Tensor({}, {v}); }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

  T& at(std::initializer_list<int64_t> idx) {
    return data[static_cast<size_t>(flat_index(idx))];
  }
  T at(std::initializer_list<int64_t> idx) const {
    return data[static_cast<size_t>(flat_index(idx))];
  }

  int64_t flat_index(std::initializer_list<int64_t> idx) const {
    int64_t flat = 0;
    int i = 0;
    for (int64_t v : idx) flat = flat * shape[static_cast<size_t>(i++)] + v;
    return flat;
  }

  Tensor<T> with_grad(bool rg = true) const {
    Tensor<T> t = *this;
    t.requires_grad = rg;
    return t;
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data.size());
    for (size_t i = 0; i < data.size(); ++i) out[i] = static_cast<U>(data[i]);
    return Tensor<U>(shape, std::move(out), requires_grad);
  }
};

template <class T>
inline bool all_finite(const std::vector<T>& v) {
  // (x - x) == 0 fails for both NaN and Inf; keeps the scan branch-light.
  for (const T& x : v)
    if (!(x - x == T(0))) return false;
  return true;
}

template <class T>
inline void check_finite(const Tensor<T>& t, const char* who) {
  if (!all_finite(t.data))
    throw NumericError(std::string("non-finite value produced by ") + who);
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

// Random fills, driven by the deterministic Rng.
template <class T>
Tensor<T> random_normal(Shape s, Rng& rng, double stddev = 1.0) {
  Tensor<T> t = Tensor<T>::zeros(std::move(s));
  for (auto& v : t.data) v = static_cast<T>(rng.normal() * stddev);
  return t;
}

template <class T>
Tensor<T> random_uniform(Shape s, Rng& rng, double lo = 0.0, double hi = 1.0) {
  Tensor<T> t = Tensor<T>::zeros(std::move(s));
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <class T>
Tensor<T> truncated_normal(Shape s, Rng& rng, double stddev) {
  Tensor<T> t = Tensor<T>::zeros(std::move(s));
  for (auto& v : t.data) v = static_cast<T>(rng.truncated_normal(stddev));
  return t;
}

template <class T>
double max_abs(const Tensor<T>& t) {
  double m = 0.0;
  for (const T& v : t.data) m = std::max(m, std::fabs(static_cast<double>(v)));
  return m;
}

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (!same_shape(a.shape, b.shape))
    throw ShapeError("max_abs_diff shape mismatch " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
  double m = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::fabs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
  return m;
}

}  // namespace hatkit
