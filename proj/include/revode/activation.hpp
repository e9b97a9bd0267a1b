#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "revode/tensor.hpp"

namespace revode {

enum class Activation { relu, tanh, identity };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::identity: return "identity";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "identity") return Activation::identity;
  throw std::invalid_argument("unknown activation '" + s + "' (relu|tanh|identity)");
}

// relu'(0) := 0, so forward/adjoint paths agree at the kink.
template <typename T>
inline T act_value(Activation a, T x) {
  switch (a) {
    case Activation::relu: return x > T{0} ? x : T{0};
    case Activation::tanh: return std::tanh(x);
    case Activation::identity: return x;
  }
  return x;
}

template <typename T>
inline T act_deriv(Activation a, T x) {
  switch (a) {
    case Activation::relu: return x > T{0} ? T{1} : T{0};
    case Activation::tanh: {
      const T t = std::tanh(x);
      return T{1} - t * t;
    }
    case Activation::identity: return T{1};
  }
  return T{1};
}

template <typename T>
Tensor<T> activate(const Tensor<T>& x, Activation a) {
  Tensor<T> r(x.shape);
  for (std::size_t i = 0; i < x.data.size(); ++i) r.data[i] = act_value(a, x.data[i]);
  return r;
}

template <typename T>
Tensor<T> activate_deriv(const Tensor<T>& x, Activation a) {
  Tensor<T> r(x.shape);
  for (std::size_t i = 0; i < x.data.size(); ++i) r.data[i] = act_deriv(a, x.data[i]);
  return r;
}

}  // namespace revode
