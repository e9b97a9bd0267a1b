#pragma once

#include <stdexcept>
#include <string>
#include <utility>

#include "revode/activation.hpp"
#include "revode/conv.hpp"
#include "revode/tensor.hpp"

namespace revode {

// Discrete propagation rules. All reversible kinds admit an exact algebraic
// inverse; `residual` is the non-reversible baseline.
enum class BlockKind { residual, hamiltonian, hamiltonian_one_layer, midpoint, leapfrog };

inline std::string to_string(BlockKind k) {
  switch (k) {
    case BlockKind::residual: return "resnet";
    case BlockKind::hamiltonian: return "hamiltonian";
    case BlockKind::hamiltonian_one_layer: return "hamiltonian1";
    case BlockKind::midpoint: return "midpoint";
    case BlockKind::leapfrog: return "leapfrog";
  }
  return "?";
}

inline BlockKind parse_block_kind(const std::string& s) {
  if (s == "resnet" || s == "residual") return BlockKind::residual;
  if (s == "hamiltonian") return BlockKind::hamiltonian;
  if (s == "hamiltonian1") return BlockKind::hamiltonian_one_layer;
  if (s == "midpoint") return BlockKind::midpoint;
  if (s == "leapfrog") return BlockKind::leapfrog;
  throw std::invalid_argument("unknown block kind '" + s +
                              "' (hamiltonian|midpoint|leapfrog|resnet)");
}

inline bool is_reversible(BlockKind k) { return k != BlockKind::residual; }

// Two-step kinds carry a (Y_j, Y_{j-1}) history and start from a dedicated
// init step; pair kinds split channels into (Y, Z).
inline bool is_two_step(BlockKind k) {
  return k == BlockKind::midpoint || k == BlockKind::leapfrog;
}

// How the leapfrog chain is seeded. `as_printed` drops the Y_{-1} term
// entirely (Y_1 = 2 Y_0 - h^2 K^T sigma(K Y_0 + b)); `zero_velocity`
// substitutes Y_{-1} = Y_0.
enum class LeapfrogInit { as_printed, zero_velocity };

inline std::string to_string(LeapfrogInit m) {
  return m == LeapfrogInit::as_printed ? "as-printed" : "zero-velocity";
}

inline LeapfrogInit parse_leapfrog_init(const std::string& s) {
  if (s == "as-printed") return LeapfrogInit::as_printed;
  if (s == "zero-velocity") return LeapfrogInit::zero_velocity;
  throw std::invalid_argument("unknown leapfrog init '" + s + "' (as-printed|zero-velocity)");
}

// Per-block parameters. Single-kernel kinds (midpoint, leapfrog, the
// one-layer Hamiltonian) use k1/b1 and leave k2/b2 empty.
template <typename T>
struct BlockParams {
  ConvKernel<T> k1;
  ConvKernel<T> k2;
  std::vector<T> b1;
  std::vector<T> b2;
  double h = 0.1;
  Activation act = Activation::relu;

  void validate() const {
    if (h < 0) throw std::invalid_argument("block params: step size h must be non-negative");
  }
};

// Kind-dependent state:
//   hamiltonian / one-layer: (y, z) = channel partition (Y_j, Z_j)
//   midpoint / leapfrog:     (y, z) = history (Y_j, Y_{j-1})
//   residual:                y only
template <typename T>
struct BlockState {
  Tensor<T> y;
  Tensor<T> z;
};

template <typename T>
struct BlockGrads {
  ConvKernel<T> k1;
  ConvKernel<T> k2;
  std::vector<T> b1;
  std::vector<T> b2;

  static BlockGrads zeros_of(const BlockParams<T>& p) {
    BlockGrads g;
    if (!p.k1.empty()) g.k1 = ConvKernel<T>(p.k1.out_c, p.k1.in_c, p.k1.kh, p.k1.kw);
    if (!p.k2.empty()) g.k2 = ConvKernel<T>(p.k2.out_c, p.k2.in_c, p.k2.kh, p.k2.kw);
    g.b1.assign(p.b1.size(), T{0});
    g.b2.assign(p.b2.size(), T{0});
    return g;
  }
};

namespace detail {

template <typename T>
void check_pair_state(const BlockState<T>& s, const char* op) {
  if (s.y.empty() || s.z.empty())
    throw std::invalid_argument(std::string(op) + ": state requires both members");
  if (s.y.shape.n != s.z.shape.n || s.y.shape.h != s.z.shape.h || s.y.shape.w != s.z.shape.w)
    throw std::invalid_argument(std::string(op) + ": state members disagree, " + s.y.shape.str() +
                                " vs " + s.z.shape.str());
}

template <typename T>
void add_bias_inplace(Tensor<T>& t, const std::vector<T>& bias, const char* op) {
  if (bias.empty()) return;
  if (static_cast<index_t>(bias.size()) != t.shape.c)
    throw std::invalid_argument(std::string(op) + ": bias length " + std::to_string(bias.size()) +
                                " != channels " + std::to_string(t.shape.c));
  for (index_t b = 0; b < t.shape.n; ++b)
    for (index_t c = 0; c < t.shape.c; ++c) {
      T* p = t.plane(b, c);
      const T v = bias[static_cast<std::size_t>(c)];
      for (index_t i = 0; i < t.shape.h * t.shape.w; ++i) p[i] += v;
    }
}

// sigma(conv(x, k) + bias)
template <typename T>
Tensor<T> pre_activation(const Tensor<T>& x, const ConvKernel<T>& k, const std::vector<T>& bias,
                         const char* op) {
  Tensor<T> a = conv2d(x, k);
  add_bias_inplace(a, bias, op);
  return a;
}

// (K - K^T) x + bias : the antisymmetric operator of the midpoint rule.
template <typename T>
Tensor<T> antisym_pre_activation(const Tensor<T>& x, const ConvKernel<T>& k,
                                 const std::vector<T>& bias, const char* op) {
  if (k.in_c != k.out_c)
    throw std::invalid_argument(std::string(op) + ": antisymmetric operator needs square kernel, " +
                                std::to_string(k.out_c) + "x" + std::to_string(k.in_c));
  Tensor<T> a = conv2d(x, k);
  Tensor<T> at = conv2d_transpose(x, k);
  axpy(T{-1}, at, a);
  add_bias_inplace(a, bias, op);
  return a;
}

template <typename T>
void pointwise_mul_deriv_inplace(Tensor<T>& g, const Tensor<T>& pre, Activation act) {
  for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] *= act_deriv(act, pre.data[i]);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Two-layer Hamiltonian block (Verlet stepping):
//   Y_{j+1} = Y_j + h K1^T sigma(K1 Z_j     + b1)
//   Z_{j+1} = Z_j - h K2^T sigma(K2 Y_{j+1} + b2)
// Note the sequential dependence: the Z update sees Y_{j+1}.
// ---------------------------------------------------------------------------

template <typename T>
BlockState<T> hamiltonian_forward(const BlockState<T>& s, const BlockParams<T>& p) {
  detail::check_pair_state(s, "hamiltonian_forward");
  const T h = static_cast<T>(p.h);
  Tensor<T> a1 = detail::pre_activation(s.z, p.k1, p.b1, "hamiltonian_forward");
  Tensor<T> y_next = s.y;
  {
    Tensor<T> s1 = activate(a1, p.act);
    Tensor<T> u = conv2d_transpose(s1, p.k1);
    axpy(h, u, y_next);
  }
  Tensor<T> a2 = detail::pre_activation(y_next, p.k2, p.b2, "hamiltonian_forward");
  Tensor<T> z_next = s.z;
  {
    Tensor<T> s2 = activate(a2, p.act);
    Tensor<T> v = conv2d_transpose(s2, p.k2);
    axpy(-h, v, z_next);
  }
  return {std::move(y_next), std::move(z_next)};
}

// Exact algebraic inverse of hamiltonian_forward.
template <typename T>
BlockState<T> hamiltonian_inverse(const BlockState<T>& s_next, const BlockParams<T>& p) {
  detail::check_pair_state(s_next, "hamiltonian_inverse");
  const T h = static_cast<T>(p.h);
  Tensor<T> a2 = detail::pre_activation(s_next.y, p.k2, p.b2, "hamiltonian_inverse");
  Tensor<T> z = s_next.z;
  {
    Tensor<T> s2 = activate(a2, p.act);
    Tensor<T> v = conv2d_transpose(s2, p.k2);
    axpy(h, v, z);
  }
  Tensor<T> a1 = detail::pre_activation(z, p.k1, p.b1, "hamiltonian_inverse");
  Tensor<T> y = s_next.y;
  {
    Tensor<T> s1 = activate(a1, p.act);
    Tensor<T> u = conv2d_transpose(s1, p.k1);
    axpy(-h, u, y);
  }
  return {std::move(y), std::move(z)};
}

// ---------------------------------------------------------------------------
// One-layer Hamiltonian (comparison variant), Verlet stepping of
//   Y' = sigma(K Z + b), Z' = -sigma(K^T Y + b).
// Uses k1/b1; k2, b2 are unused.
// ---------------------------------------------------------------------------

template <typename T>
BlockState<T> one_layer_hamiltonian_forward(const BlockState<T>& s, const BlockParams<T>& p) {
  detail::check_pair_state(s, "one_layer_hamiltonian_forward");
  const T h = static_cast<T>(p.h);
  Tensor<T> y_next = s.y;
  {
    Tensor<T> a1 = detail::pre_activation(s.z, p.k1, p.b1, "one_layer_hamiltonian_forward");
    Tensor<T> s1 = activate(a1, p.act);
    axpy(h, s1, y_next);
  }
  Tensor<T> z_next = s.z;
  {
    Tensor<T> a2 = conv2d_transpose(y_next, p.k1);
    detail::add_bias_inplace(a2, p.b1, "one_layer_hamiltonian_forward");
    Tensor<T> s2 = activate(a2, p.act);
    axpy(-h, s2, z_next);
  }
  return {std::move(y_next), std::move(z_next)};
}

template <typename T>
BlockState<T> one_layer_hamiltonian_inverse(const BlockState<T>& s_next,
                                            const BlockParams<T>& p) {
  detail::check_pair_state(s_next, "one_layer_hamiltonian_inverse");
  const T h = static_cast<T>(p.h);
  Tensor<T> z = s_next.z;
  {
    Tensor<T> a2 = conv2d_transpose(s_next.y, p.k1);
    detail::add_bias_inplace(a2, p.b1, "one_layer_hamiltonian_inverse");
    Tensor<T> s2 = activate(a2, p.act);
    axpy(h, s2, z);
  }
  Tensor<T> y = s_next.y;
  {
    Tensor<T> a1 = detail::pre_activation(z, p.k1, p.b1, "one_layer_hamiltonian_inverse");
    Tensor<T> s1 = activate(a1, p.act);
    axpy(-h, s1, y);
  }
  return {std::move(y), std::move(z)};
}

// ---------------------------------------------------------------------------
// Midpoint (central-difference) block:
//   Y_{j+1} = Y_{j-1} + 2h sigma((K - K^T) Y_j + b), state (Y_j, Y_{j-1}).
// ---------------------------------------------------------------------------

template <typename T>
BlockState<T> midpoint_forward(const BlockState<T>& s, const BlockParams<T>& p) {
  detail::check_pair_state(s, "midpoint_forward");
  if (!(s.y.shape == s.z.shape))
    throw std::invalid_argument("midpoint_forward: history members disagree, " + s.y.shape.str() +
                                " vs " + s.z.shape.str());
  Tensor<T> pre = detail::antisym_pre_activation(s.y, p.k1, p.b1, "midpoint_forward");
  Tensor<T> f = activate(pre, p.act);
  Tensor<T> y_next = s.z;
  axpy(static_cast<T>(2.0 * p.h), f, y_next);
  return {std::move(y_next), s.y};
}

// First step: one forward Euler step Y_1 = Y_0 + h sigma((K - K^T) Y_0 + b).
template <typename T>
BlockState<T> midpoint_init(const Tensor<T>& y0, const BlockParams<T>& p) {
  Tensor<T> pre = detail::antisym_pre_activation(y0, p.k1, p.b1, "midpoint_init");
  Tensor<T> f = activate(pre, p.act);
  Tensor<T> y1 = y0;
  axpy(static_cast<T>(p.h), f, y1);
  return {std::move(y1), y0};
}

template <typename T>
BlockState<T> midpoint_inverse(const BlockState<T>& s_next, const BlockParams<T>& p) {
  detail::check_pair_state(s_next, "midpoint_inverse");
  Tensor<T> pre = detail::antisym_pre_activation(s_next.z, p.k1, p.b1, "midpoint_inverse");
  Tensor<T> f = activate(pre, p.act);
  Tensor<T> y_prev = s_next.y;
  axpy(static_cast<T>(-2.0 * p.h), f, y_prev);
  return {s_next.z, std::move(y_prev)};
}

// ---------------------------------------------------------------------------
// Leapfrog block (second-difference scheme):
//   Y_{j+1} = 2 Y_j - Y_{j-1} - h^2 K^T sigma(K Y_j + b), state (Y_j, Y_{j-1}).
// ---------------------------------------------------------------------------

namespace detail {

// G(y) = K^T sigma(K y + b)
template <typename T>
Tensor<T> leapfrog_force(const Tensor<T>& y, const BlockParams<T>& p, const char* op) {
  Tensor<T> pre = pre_activation(y, p.k1, p.b1, op);
  Tensor<T> s = activate(pre, p.act);
  return conv2d_transpose(s, p.k1);
}

}  // namespace detail

template <typename T>
BlockState<T> leapfrog_forward(const BlockState<T>& s, const BlockParams<T>& p) {
  detail::check_pair_state(s, "leapfrog_forward");
  if (!(s.y.shape == s.z.shape))
    throw std::invalid_argument("leapfrog_forward: history members disagree, " + s.y.shape.str() +
                                " vs " + s.z.shape.str());
  const T h2 = static_cast<T>(p.h * p.h);
  Tensor<T> g = detail::leapfrog_force(s.y, p, "leapfrog_forward");
  Tensor<T> y_next = scaled(s.y, T{2});
  axpy(T{-1}, s.z, y_next);
  axpy(-h2, g, y_next);
  return {std::move(y_next), s.y};
}

template <typename T>
BlockState<T> leapfrog_init(const Tensor<T>& y0, const BlockParams<T>& p,
                            LeapfrogInit mode = LeapfrogInit::as_printed) {
  const T h2 = static_cast<T>(p.h * p.h);
  Tensor<T> g = detail::leapfrog_force(y0, p, "leapfrog_init");
  Tensor<T> y1 = mode == LeapfrogInit::as_printed ? scaled(y0, T{2}) : y0;
  axpy(-h2, g, y1);
  return {std::move(y1), y0};
}

template <typename T>
BlockState<T> leapfrog_inverse(const BlockState<T>& s_next, const BlockParams<T>& p) {
  detail::check_pair_state(s_next, "leapfrog_inverse");
  const T h2 = static_cast<T>(p.h * p.h);
  Tensor<T> g = detail::leapfrog_force(s_next.z, p, "leapfrog_inverse");
  Tensor<T> y_prev = scaled(s_next.z, T{2});
  axpy(T{-1}, s_next.y, y_prev);
  axpy(-h2, g, y_prev);
  return {s_next.z, std::move(y_prev)};
}

// ---------------------------------------------------------------------------
// Baseline two-layer residual block (non-reversible):
//   Y_{j+1} = Y_j + h K2^T sigma(K1 Y_j + b1)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> residual_forward(const Tensor<T>& y, const BlockParams<T>& p) {
  const T h = static_cast<T>(p.h);
  Tensor<T> pre = detail::pre_activation(y, p.k1, p.b1, "residual_forward");
  Tensor<T> s = activate(pre, p.act);
  Tensor<T> u = conv2d_transpose(s, p.k2);
  Tensor<T> out = y;
  axpy(h, u, out);
  return out;
}

// ---------------------------------------------------------------------------
// Dispatchers
// ---------------------------------------------------------------------------

template <typename T>
BlockState<T> block_forward(BlockKind kind, const BlockState<T>& s, const BlockParams<T>& p) {
  switch (kind) {
    case BlockKind::hamiltonian: return hamiltonian_forward(s, p);
    case BlockKind::hamiltonian_one_layer: return one_layer_hamiltonian_forward(s, p);
    case BlockKind::midpoint: return midpoint_forward(s, p);
    case BlockKind::leapfrog: return leapfrog_forward(s, p);
    case BlockKind::residual: return {residual_forward(s.y, p), Tensor<T>{}};
  }
  throw std::invalid_argument("block_forward: bad kind");
}

template <typename T>
BlockState<T> block_inverse(BlockKind kind, const BlockState<T>& s_next,
                            const BlockParams<T>& p) {
  switch (kind) {
    case BlockKind::hamiltonian: return hamiltonian_inverse(s_next, p);
    case BlockKind::hamiltonian_one_layer: return one_layer_hamiltonian_inverse(s_next, p);
    case BlockKind::midpoint: return midpoint_inverse(s_next, p);
    case BlockKind::leapfrog: return leapfrog_inverse(s_next, p);
    case BlockKind::residual:
      throw std::invalid_argument("block_inverse: residual blocks are not invertible");
  }
  throw std::invalid_argument("block_inverse: bad kind");
}

// ---------------------------------------------------------------------------
// Reverse-mode vector-Jacobian products. `s` is the block INPUT state
// (possibly reconstructed by the inverse op); forward internals are
// recomputed here so nothing but the input needs to be stored.
// ---------------------------------------------------------------------------

template <typename T>
std::pair<BlockState<T>, BlockGrads<T>> hamiltonian_vjp(const BlockState<T>& s,
                                                        const BlockParams<T>& p,
                                                        const BlockState<T>& upstream) {
  const T h = static_cast<T>(p.h);
  BlockGrads<T> pg = BlockGrads<T>::zeros_of(p);

  Tensor<T> a1 = detail::pre_activation(s.z, p.k1, p.b1, "hamiltonian_vjp");
  Tensor<T> s1 = activate(a1, p.act);
  Tensor<T> y_next = s.y;
  axpy(h, conv2d_transpose(s1, p.k1), y_next);
  Tensor<T> a2 = detail::pre_activation(y_next, p.k2, p.b2, "hamiltonian_vjp");
  Tensor<T> s2 = activate(a2, p.act);

  // Z' = Z - h K2^T sigma(K2 Y' + b2)
  Tensor<T> g_v = scaled(upstream.z, -h);
  {
    ConvKernel<T> kg = conv2d_kernel_grad(g_v, s2, p.k2.kh, p.k2.kw);
    axpy_kernel(kg, pg.k2);
  }
  Tensor<T> g_a2 = conv2d(g_v, p.k2);
  detail::pointwise_mul_deriv_inplace(g_a2, a2, p.act);
  add_vec(pg.b2, conv2d_bias_grad(g_a2));
  {
    ConvKernel<T> kg = conv2d_kernel_grad(y_next, g_a2, p.k2.kh, p.k2.kw);
    axpy_kernel(kg, pg.k2);
  }
  Tensor<T> g_y_next = conv2d_transpose(g_a2, p.k2);
  axpy(T{1}, upstream.y, g_y_next);

  // Y' = Y + h K1^T sigma(K1 Z + b1)
  Tensor<T> g_u = scaled(g_y_next, h);
  {
    ConvKernel<T> kg = conv2d_kernel_grad(g_u, s1, p.k1.kh, p.k1.kw);
    axpy_kernel(kg, pg.k1);
  }
  Tensor<T> g_a1 = conv2d(g_u, p.k1);
  detail::pointwise_mul_deriv_inplace(g_a1, a1, p.act);
  add_vec(pg.b1, conv2d_bias_grad(g_a1));
  {
    ConvKernel<T> kg = conv2d_kernel_grad(s.z, g_a1, p.k1.kh, p.k1.kw);
    axpy_kernel(kg, pg.k1);
  }
  Tensor<T> g_z = conv2d_transpose(g_a1, p.k1);
  axpy(T{1}, upstream.z, g_z);

  return {BlockState<T>{std::move(g_y_next), std::move(g_z)}, std::move(pg)};
}

template <typename T>
std::pair<BlockState<T>, BlockGrads<T>> one_layer_hamiltonian_vjp(const BlockState<T>& s,
                                                                  const BlockParams<T>& p,
                                                                  const BlockState<T>& upstream) {
  const T h = static_cast<T>(p.h);
  BlockGrads<T> pg = BlockGrads<T>::zeros_of(p);

  Tensor<T> a1 = detail::pre_activation(s.z, p.k1, p.b1, "one_layer_hamiltonian_vjp");
  Tensor<T> y_next = s.y;
  axpy(h, activate(a1, p.act), y_next);
  Tensor<T> a2 = conv2d_transpose(y_next, p.k1);
  detail::add_bias_inplace(a2, p.b1, "one_layer_hamiltonian_vjp");

  // Z' = Z - h sigma(K^T Y' + b)
  Tensor<T> g_s2 = scaled(upstream.z, -h);
  detail::pointwise_mul_deriv_inplace(g_s2, a2, p.act);  // now d/d a2
  add_vec(pg.b1, conv2d_bias_grad(g_s2));
  {
    ConvKernel<T> kg = conv2d_kernel_grad(g_s2, y_next, p.k1.kh, p.k1.kw);
    axpy_kernel(kg, pg.k1);
  }
  Tensor<T> g_y_next = conv2d(g_s2, p.k1);
  axpy(T{1}, upstream.y, g_y_next);

  // Y' = Y + h sigma(K Z + b)
  Tensor<T> g_a1 = scaled(g_y_next, h);
  detail::pointwise_mul_deriv_inplace(g_a1, a1, p.act);
  add_vec(pg.b1, conv2d_bias_grad(g_a1));
  {
    ConvKernel<T> kg = conv2d_kernel_grad(s.z, g_a1, p.k1.kh, p.k1.kw);
    axpy_kernel(kg, pg.k1);
  }
  Tensor<T> g_z = conv2d_transpose(g_a1, p.k1);
  axpy(T{1}, upstream.z, g_z);

  return {BlockState<T>{std::move(g_y_next), std::move(g_z)}, std::move(pg)};
}

namespace detail {

// Shared chain for F(y) = sigma((K - K^T) y + b): given dL/dF scaled into
// `g_f`, accumulates kernel/bias grads and returns dL/dy contribution.
template <typename T>
Tensor<T> antisym_chain_vjp(const Tensor<T>& y, const Tensor<T>& pre, const BlockParams<T>& p,
                            Tensor<T> g_f, BlockGrads<T>& pg) {
  pointwise_mul_deriv_inplace(g_f, pre, p.act);  // now d/d pre
  add_vec(pg.b1, conv2d_bias_grad(g_f));
  ConvKernel<T> kg_fwd = conv2d_kernel_grad(y, g_f, p.k1.kh, p.k1.kw);
  axpy_kernel(kg_fwd, pg.k1);
  ConvKernel<T> kg_t = conv2d_kernel_grad(g_f, y, p.k1.kh, p.k1.kw);
  axpy_kernel(kg_t, pg.k1, T{-1});
  Tensor<T> g_y = conv2d_transpose(g_f, p.k1);
  Tensor<T> g_y2 = conv2d(g_f, p.k1);
  axpy(T{-1}, g_y2, g_y);
  return g_y;
}

// Shared chain for G(y) = K^T sigma(K y + b): given dL/dG in `g_out`,
// accumulates grads and returns dL/dy contribution.
template <typename T>
Tensor<T> leapfrog_force_vjp(const Tensor<T>& y, const BlockParams<T>& p, const Tensor<T>& g_out,
                             BlockGrads<T>& pg) {
  Tensor<T> pre = pre_activation(y, p.k1, p.b1, "leapfrog_force_vjp");
  Tensor<T> s = activate(pre, p.act);
  ConvKernel<T> kg_t = conv2d_kernel_grad(g_out, s, p.k1.kh, p.k1.kw);
  axpy_kernel(kg_t, pg.k1);
  Tensor<T> g_pre = conv2d(g_out, p.k1);
  pointwise_mul_deriv_inplace(g_pre, pre, p.act);
  add_vec(pg.b1, conv2d_bias_grad(g_pre));
  ConvKernel<T> kg_fwd = conv2d_kernel_grad(y, g_pre, p.k1.kh, p.k1.kw);
  axpy_kernel(kg_fwd, pg.k1);
  return conv2d_transpose(g_pre, p.k1);
}

}  // namespace detail

template <typename T>
std::pair<BlockState<T>, BlockGrads<T>> midpoint_vjp(const BlockState<T>& s,
                                                     const BlockParams<T>& p,
                                                     const BlockState<T>& upstream) {
  // (A, B) -> (B + 2h F(A), A)
  BlockGrads<T> pg = BlockGrads<T>::zeros_of(p);
  Tensor<T> pre = detail::antisym_pre_activation(s.y, p.k1, p.b1, "midpoint_vjp");
  Tensor<T> g_f = scaled(upstream.y, static_cast<T>(2.0 * p.h));
  Tensor<T> g_a = detail::antisym_chain_vjp(s.y, pre, p, std::move(g_f), pg);
  axpy(T{1}, upstream.z, g_a);
  return {BlockState<T>{std::move(g_a), upstream.y}, std::move(pg)};
}

// VJP of midpoint_init: y0 -> (y0 + h F(y0), y0).
template <typename T>
std::pair<Tensor<T>, BlockGrads<T>> midpoint_init_vjp(const Tensor<T>& y0,
                                                      const BlockParams<T>& p,
                                                      const BlockState<T>& upstream) {
  BlockGrads<T> pg = BlockGrads<T>::zeros_of(p);
  Tensor<T> pre = detail::antisym_pre_activation(y0, p.k1, p.b1, "midpoint_init_vjp");
  Tensor<T> g_f = scaled(upstream.y, static_cast<T>(p.h));
  Tensor<T> g_y0 = detail::antisym_chain_vjp(y0, pre, p, std::move(g_f), pg);
  axpy(T{1}, upstream.y, g_y0);
  axpy(T{1}, upstream.z, g_y0);
  return {std::move(g_y0), std::move(pg)};
}

template <typename T>
std::pair<BlockState<T>, BlockGrads<T>> leapfrog_vjp(const BlockState<T>& s,
                                                     const BlockParams<T>& p,
                                                     const BlockState<T>& upstream) {
  // (A, B) -> (2A - B - h^2 G(A), A)
  BlockGrads<T> pg = BlockGrads<T>::zeros_of(p);
  const T h2 = static_cast<T>(p.h * p.h);
  Tensor<T> g_gout = scaled(upstream.y, -h2);
  Tensor<T> g_a = detail::leapfrog_force_vjp(s.y, p, g_gout, pg);
  axpy(T{2}, upstream.y, g_a);
  axpy(T{1}, upstream.z, g_a);
  Tensor<T> g_b = scaled(upstream.y, T{-1});
  return {BlockState<T>{std::move(g_a), std::move(g_b)}, std::move(pg)};
}

// VJP of leapfrog_init for either seeding mode.
template <typename T>
std::pair<Tensor<T>, BlockGrads<T>> leapfrog_init_vjp(const Tensor<T>& y0,
                                                      const BlockParams<T>& p,
                                                      const BlockState<T>& upstream,
                                                      LeapfrogInit mode) {
  BlockGrads<T> pg = BlockGrads<T>::zeros_of(p);
  const T h2 = static_cast<T>(p.h * p.h);
  Tensor<T> g_gout = scaled(upstream.y, -h2);
  Tensor<T> g_y0 = detail::leapfrog_force_vjp(y0, p, g_gout, pg);
  axpy(mode == LeapfrogInit::as_printed ? T{2} : T{1}, upstream.y, g_y0);
  axpy(T{1}, upstream.z, g_y0);
  return {std::move(g_y0), std::move(pg)};
}

template <typename T>
std::pair<BlockState<T>, BlockGrads<T>> residual_vjp(const BlockState<T>& s,
                                                     const BlockParams<T>& p,
                                                     const BlockState<T>& upstream) {
  BlockGrads<T> pg = BlockGrads<T>::zeros_of(p);
  const T h = static_cast<T>(p.h);
  Tensor<T> pre = detail::pre_activation(s.y, p.k1, p.b1, "residual_vjp");
  Tensor<T> sig = activate(pre, p.act);
  Tensor<T> g_u = scaled(upstream.y, h);
  {
    ConvKernel<T> kg = conv2d_kernel_grad(g_u, sig, p.k2.kh, p.k2.kw);
    axpy_kernel(kg, pg.k2);
  }
  Tensor<T> g_pre = conv2d(g_u, p.k2);
  detail::pointwise_mul_deriv_inplace(g_pre, pre, p.act);
  add_vec(pg.b1, conv2d_bias_grad(g_pre));
  {
    ConvKernel<T> kg = conv2d_kernel_grad(s.y, g_pre, p.k1.kh, p.k1.kw);
    axpy_kernel(kg, pg.k1);
  }
  Tensor<T> g_y = conv2d_transpose(g_pre, p.k1);
  axpy(T{1}, upstream.y, g_y);
  return {BlockState<T>{std::move(g_y), Tensor<T>{}}, std::move(pg)};
}

// s is the block INPUT state; returns (d/d input-state, d/d params).
template <typename T>
std::pair<BlockState<T>, BlockGrads<T>> block_vjp(BlockKind kind, const BlockState<T>& s,
                                                  const BlockParams<T>& p,
                                                  const BlockState<T>& upstream) {
  switch (kind) {
    case BlockKind::hamiltonian: return hamiltonian_vjp(s, p, upstream);
    case BlockKind::hamiltonian_one_layer: return one_layer_hamiltonian_vjp(s, p, upstream);
    case BlockKind::midpoint: return midpoint_vjp(s, p, upstream);
    case BlockKind::leapfrog: return leapfrog_vjp(s, p, upstream);
    case BlockKind::residual: return residual_vjp(s, p, upstream);
  }
  throw std::invalid_argument("block_vjp: bad kind");
}

}  // namespace revode
