#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "revode/rng.hpp"

namespace revode {

using index_t = std::int64_t;

// (batch, channels, height, width), row-major with width contiguous.
struct Shape {
  index_t n = 0, c = 0, h = 0, w = 0;

  index_t numel() const { return n * c * h * w; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << n << "x" << c << "x" << h << "x" << w;
    return os.str();
  }
};

template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(s), data(static_cast<std::size_t>(s.numel()), T{0}) {
    if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0)
      throw std::invalid_argument("tensor: negative dimension in shape " + s.str());
  }
  Tensor(index_t n, index_t c, index_t h, index_t w) : Tensor(Shape{n, c, h, w}) {}

  index_t numel() const { return shape.numel(); }
  bool empty() const { return data.empty(); }

  T* plane(index_t b, index_t ch) { return data.data() + ((b * shape.c + ch) * shape.h) * shape.w; }
  const T* plane(index_t b, index_t ch) const {
    return data.data() + ((b * shape.c + ch) * shape.h) * shape.w;
  }

  T& at(index_t b, index_t ch, index_t y, index_t x) {
    return data[static_cast<std::size_t>(((b * shape.c + ch) * shape.h + y) * shape.w + x)];
  }
  const T& at(index_t b, index_t ch, index_t y, index_t x) const {
    return data[static_cast<std::size_t>(((b * shape.c + ch) * shape.h + y) * shape.w + x)];
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  void fill_uniform(Rng& rng, double lo, double hi) {
    for (auto& v : data) v = static_cast<T>(rng.uniform(lo, hi));
  }
  void fill_normal(Rng& rng, double stddev) {
    for (auto& v : data) v = static_cast<T>(stddev * rng.normal());
  }
};

template <typename T>
Tensor<T> zeros_like(const Tensor<T>& t) {
  return Tensor<T>(t.shape);
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (const T v : t.data)
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

template <typename T>
double max_abs(const Tensor<T>& t) {
  double m = 0.0;
  for (const T v : t.data) m = std::max(m, std::abs(static_cast<double>(v)));
  return m;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape == b.shape))
    throw std::invalid_argument("max_abs_diff: shape mismatch " + a.shape.str() + " vs " +
                                b.shape.str());
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
  return m;
}

// Relative max-abs error with an absolute floor on the denominator.
template <typename T>
double max_rel_diff(const Tensor<T>& a, const Tensor<T>& b, double floor = 1e-30) {
  if (!(a.shape == b.shape))
    throw std::invalid_argument("max_rel_diff: shape mismatch " + a.shape.str() + " vs " +
                                b.shape.str());
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double x = static_cast<double>(a.data[i]);
    const double y = static_cast<double>(b.data[i]);
    const double denom = std::max({std::abs(x), std::abs(y), floor});
    m = std::max(m, std::abs(x - y) / denom);
  }
  return m;
}

// Inner product accumulated in double.
template <typename T>
double dot(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape == b.shape))
    throw std::invalid_argument("dot: shape mismatch " + a.shape.str() + " vs " + b.shape.str());
  double s = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    s += static_cast<double>(a.data[i]) * static_cast<double>(b.data[i]);
  return s;
}

template <typename T>
double norm2(const Tensor<T>& a) {
  return std::sqrt(dot(a, a));
}

template <typename T>
void axpy(T alpha, const Tensor<T>& x, Tensor<T>& y) {
  if (!(x.shape == y.shape))
    throw std::invalid_argument("axpy: shape mismatch " + x.shape.str() + " vs " + y.shape.str());
  for (std::size_t i = 0; i < x.data.size(); ++i) y.data[i] += alpha * x.data[i];
}

template <typename T>
void scale(Tensor<T>& t, T alpha) {
  for (auto& v : t.data) v *= alpha;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> r = a;
  axpy(T{1}, b, r);
  return r;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> r = a;
  axpy(T{-1}, b, r);
  return r;
}

template <typename T>
Tensor<T> scaled(const Tensor<T>& a, T alpha) {
  Tensor<T> r = a;
  scale(r, alpha);
  return r;
}

template <typename To, typename From>
Tensor<To> cast_tensor(const Tensor<From>& t) {
  Tensor<To> r(t.shape);
  for (std::size_t i = 0; i < t.data.size(); ++i) r.data[i] = static_cast<To>(t.data[i]);
  return r;
}

}  // namespace revode
