#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "revode/network.hpp"
#include "revode/stability.hpp"

namespace revode {

struct CheckResult {
  std::string suite;
  std::string name;
  double worst = 0.0;
  double tol = 0.0;
  bool pass = false;
};

inline CheckResult make_check(std::string suite, std::string name, double worst, double tol) {
  return {std::move(suite), std::move(name), worst, tol, worst <= tol};
}

namespace detail {

template <typename T>
BlockParams<T> random_block_params(BlockKind kind, index_t channels, index_t ksize, double h,
                                   Activation act, Rng& rng) {
  BlockParams<T> p;
  p.h = h;
  p.act = act;
  p.k1 = ConvKernel<T>(channels, channels, ksize, ksize);
  p.k1.fill_uniform(rng, -1.0, 1.0);
  p.b1.resize(static_cast<std::size_t>(channels));
  for (auto& v : p.b1) v = static_cast<T>(rng.uniform(-1.0, 1.0));
  if (kind == BlockKind::hamiltonian || kind == BlockKind::residual) {
    p.k2 = ConvKernel<T>(channels, channels, ksize, ksize);
    p.k2.fill_uniform(rng, -1.0, 1.0);
    p.b2.resize(static_cast<std::size_t>(channels));
    for (auto& v : p.b2) v = static_cast<T>(rng.uniform(-1.0, 1.0));
  }
  return p;
}

template <typename T>
BlockState<T> random_block_state(index_t channels, index_t h, index_t w, Rng& rng,
                                 index_t batch = 2) {
  BlockState<T> s;
  s.y = Tensor<T>(batch, channels, h, w);
  s.y.fill_uniform(rng, -1.0, 1.0);
  s.z = Tensor<T>(batch, channels, h, w);
  s.z.fill_uniform(rng, -1.0, 1.0);
  return s;
}

template <typename T>
double block_round_trip_worst(std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0.0;
  for (BlockKind kind : {BlockKind::hamiltonian, BlockKind::hamiltonian_one_layer,
                         BlockKind::midpoint, BlockKind::leapfrog}) {
    for (index_t ks : {index_t{1}, index_t{3}}) {
      for (index_t ch : {index_t{2}, index_t{4}, index_t{8}}) {
        auto p = random_block_params<T>(kind, ch, ks, 0.1, Activation::relu, rng);
        auto s = random_block_state<T>(ch, 5, 5, rng);
        auto back = block_inverse(kind, block_forward(kind, s, p), p);
        worst = std::max({worst, max_abs_diff(back.y, s.y), max_abs_diff(back.z, s.z)});
      }
    }
  }
  return worst;
}

// Deep-chain reconstruction: 3 units x `blocks` blocks, reconstruction error
// measured against the stored-mode trace. Returns the worst error, relative
// to the activation scale when `relative` is set.
template <typename T>
double deep_reconstruction_worst(BlockKind kind, int blocks, std::uint64_t seed, bool relative) {
  ArchSpec arch;
  arch.kind = kind;
  arch.units = {{blocks, 8}, {blocks, 12}, {blocks, 16}};
  arch.in_channels = 3;
  arch.in_h = 8;
  arch.in_w = 8;
  arch.classes = 4;
  arch.h = 0.05;
  arch.act = Activation::tanh;
  Network<T> net = init_network<T>(arch, seed);
  Rng rng(seed + 1);
  Tensor<T> x(2, arch.in_channels, arch.in_h, arch.in_w);
  x.fill_uniform(rng, -1.0, 1.0);

  auto rev = net_forward(net, x, Mode::train_reversible);
  auto sto = net_forward(net, x, Mode::train_stored);
  Tensor<T> g(rev.logits.shape);
  g.fill_uniform(rng, -1.0, 1.0);
  auto back = net_backward_reversible(net, rev.cp, g, &sto.trace);
  if (!relative) return back.reconstruction_error;
  double scale = 0.0;
  for (const auto& unit : sto.trace.block_inputs)
    for (const auto& s : unit) {
      scale = std::max(scale, max_abs(s.y));
      if (!s.z.empty()) scale = std::max(scale, max_abs(s.z));
    }
  return back.reconstruction_error / std::max(scale, 1e-30);
}

template <typename T>
double grad_mode_equivalence_worst(BlockKind kind, std::uint64_t seed) {
  ArchSpec arch;
  arch.kind = kind;
  arch.units = {{3, 4}, {3, 8}};
  arch.in_channels = 3;
  arch.in_h = 8;
  arch.in_w = 8;
  arch.classes = 3;
  arch.h = 0.1;
  arch.act = Activation::tanh;
  Network<T> net = init_network<T>(arch, seed);
  Rng rng(seed + 5);
  Tensor<T> x(2, 3, 8, 8);
  x.fill_uniform(rng, -1.0, 1.0);
  std::vector<int> labels = {0, 1};

  auto rev = net_forward(net, x, Mode::train_reversible);
  auto sto = net_forward(net, x, Mode::train_stored);
  auto loss = softmax_cross_entropy(rev.logits, labels);
  auto g_rev = net_backward_reversible(net, rev.cp, loss.grad);
  auto g_sto = net_backward_stored(net, sto.trace, loss.grad);
  double worst = 0.0;
  for_each_param_pair(g_rev.grads, g_sto,
                      [&worst](const std::string&, std::vector<T>& a, std::vector<T>& b) {
                        for (std::size_t i = 0; i < a.size(); ++i)
                          worst = std::max(worst, std::abs(static_cast<double>(a[i]) -
                                                           static_cast<double>(b[i])));
                      });
  return worst;
}

inline double net_fd_gradcheck_worst(BlockKind kind, std::uint64_t seed, int probes = 25) {
  ArchSpec arch;
  arch.kind = kind;
  arch.units = {{2, 4}, {2, 8}};
  arch.in_channels = 3;
  arch.in_h = 8;
  arch.in_w = 8;
  arch.classes = 3;
  arch.h = 0.1;
  arch.act = Activation::tanh;
  Network<double> net = init_network<double>(arch, seed);
  Rng rng(seed + 9);
  Tensor<double> x(2, 3, 8, 8);
  x.fill_uniform(rng, -1.0, 1.0);
  std::vector<int> labels = {0, 2};

  const Mode mode = is_reversible(kind) ? Mode::train_reversible : Mode::train_stored;
  auto fwd = net_forward(net, x, mode);
  auto loss = softmax_cross_entropy(fwd.logits, labels);
  Network<double> grads = is_reversible(kind)
                              ? net_backward_reversible(net, fwd.cp, loss.grad).grads
                              : net_backward_stored(net, fwd.trace, loss.grad);

  std::vector<double*> ptrs;
  std::vector<double> analytic;
  for_each_param(net, [&ptrs](const std::string&, std::vector<double>& v) {
    for (auto& p : v) ptrs.push_back(&p);
  });
  for_each_param(grads, [&analytic](const std::string&, std::vector<double>& v) {
    analytic.insert(analytic.end(), v.begin(), v.end());
  });

  double worst = 0.0;
  const double eps = 1e-5;
  for (int probe = 0; probe < probes; ++probe) {
    const std::size_t i = rng.uniform_int(ptrs.size());
    const double orig = *ptrs[i];
    *ptrs[i] = orig + eps;
    const double lp =
        softmax_cross_entropy(net_forward(net, x, Mode::infer).logits, labels).loss;
    *ptrs[i] = orig - eps;
    const double lm =
        softmax_cross_entropy(net_forward(net, x, Mode::infer).logits, labels).loss;
    *ptrs[i] = orig;
    const double fd = (lp - lm) / (2.0 * eps);
    const double an = analytic[i];
    worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}));
  }
  return worst;
}

}  // namespace detail

// Round-trip and deep-chain reconstruction checks at the requested precision.
inline std::vector<CheckResult> verify_reversibility(const std::string& precision,
                                                     std::uint64_t seed = 1) {
  std::vector<CheckResult> out;
  const bool f64 = precision != "f32";
  if (f64) {
    out.push_back(make_check("reversibility", "block-round-trip-f64",
                             detail::block_round_trip_worst<double>(seed), 1e-12));
    for (BlockKind kind : {BlockKind::hamiltonian, BlockKind::midpoint, BlockKind::leapfrog})
      out.push_back(make_check("reversibility", "chain-32x3-" + to_string(kind) + "-f64",
                               detail::deep_reconstruction_worst<double>(kind, 32, seed, false),
                               1e-8));
  } else {
    out.push_back(make_check("reversibility", "block-round-trip-f32",
                             detail::block_round_trip_worst<float>(seed), 1e-4));
    for (BlockKind kind : {BlockKind::hamiltonian, BlockKind::midpoint, BlockKind::leapfrog})
      out.push_back(make_check("reversibility", "chain-32x3-" + to_string(kind) + "-f32-rel",
                               detail::deep_reconstruction_worst<float>(kind, 32, seed, true),
                               1e-3));
  }
  return out;
}

// Spectral checks: the imaginary-spectrum property of the block Jacobians and
// the characteristic-root analysis of the linear coupled recurrence.
inline std::vector<CheckResult> verify_spectrum(std::uint64_t seed = 1, int trials = 50,
                                                int size = 32) {
  std::vector<CheckResult> out;
  out.push_back(make_check("spectrum", "hamiltonian-relu",
                           verify_imaginary_spectrum(trials, size, Activation::relu, seed), 1e-9));
  out.push_back(make_check("spectrum", "hamiltonian-tanh",
                           verify_imaginary_spectrum(trials, size, Activation::tanh, seed + 1),
                           1e-9));
  out.push_back(make_check("spectrum", "midpoint-relu",
                           verify_imaginary_spectrum(trials, size, Activation::relu, seed + 2,
                                                     JacobianKind::midpoint),
                           1e-9));
  out.push_back(make_check("spectrum", "midpoint-tanh",
                           verify_imaginary_spectrum(trials, size, Activation::tanh, seed + 3,
                                                     JacobianKind::midpoint),
                           1e-9));

  double worst_product = 0.0, worst_unit = 0.0;
  bool dichotomy_ok = true;
  for (int i = 0; i <= 40; ++i)
    for (int j = 0; j <= 40; ++j) {
      const double alpha = -2.0 + 4.0 * i / 40.0;
      const double beta = -2.0 + 4.0 * j / 40.0;
      const auto r = characteristic_roots(alpha, beta);
      worst_product = std::max(worst_product, std::abs(r.xi1 * r.xi2 - complexd(1.0, 0.0)));
      if (r.a * r.a <= 1.0) {
        worst_unit = std::max({worst_unit, std::abs(std::abs(r.xi1) - 1.0),
                               std::abs(std::abs(r.xi2) - 1.0)});
      } else if (r.max_abs() <= 1.0) {
        dichotomy_ok = false;
      }
    }
  out.push_back(make_check("spectrum", "root-product-unity", worst_product, 1e-14));
  out.push_back(make_check("spectrum", "unit-modulus-inside-stability-region", worst_unit, 1e-12));
  out.push_back(make_check("spectrum", "growth-outside-stability-region",
                           dichotomy_ok ? 0.0 : 1.0, 0.5));

  Rng rng(seed + 7);
  double worst_rate = 0.0;
  int tested = 0;
  while (tested < 50) {
    const double alpha = rng.uniform(-2.0, 2.0);
    const double beta = rng.uniform(-2.0, 2.0);
    const auto roots = characteristic_roots(alpha, beta);
    if (roots.a * roots.a <= 1.1025) continue;
    const auto ro = linear_revnet_rollout(alpha, beta, 1.0, 1.0, 200);
    if (ro.norms.size() < 40) continue;
    const double want = std::log(roots.max_abs());
    worst_rate = std::max(worst_rate, std::abs(rollout_log_growth_rate(ro) - want) / want);
    ++tested;
  }
  out.push_back(make_check("spectrum", "rollout-growth-vs-roots", worst_rate, 0.10));
  return out;
}

// Gradient checks: reversible vs stored backprop, and both against central
// finite differences.
inline std::vector<CheckResult> verify_gradcheck(std::uint64_t seed = 1) {
  std::vector<CheckResult> out;
  for (BlockKind kind : {BlockKind::hamiltonian, BlockKind::midpoint, BlockKind::leapfrog})
    out.push_back(make_check("gradcheck", "mode-equivalence-" + to_string(kind),
                             detail::grad_mode_equivalence_worst<double>(kind, seed), 1e-10));
  for (BlockKind kind : {BlockKind::hamiltonian, BlockKind::midpoint, BlockKind::leapfrog,
                         BlockKind::residual})
    out.push_back(make_check("gradcheck", "fd-" + to_string(kind),
                             detail::net_fd_gradcheck_worst(kind, seed + 3), 1e-5));
  return out;
}

inline std::vector<CheckResult> verify_all(const std::string& precision, std::uint64_t seed = 1) {
  auto out = verify_reversibility(precision, seed);
  auto sp = verify_spectrum(seed);
  out.insert(out.end(), sp.begin(), sp.end());
  auto gc = verify_gradcheck(seed);
  out.insert(out.end(), gc.begin(), gc.end());
  return out;
}

}  // namespace revode
