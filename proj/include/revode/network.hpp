#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "revode/blocks.hpp"
#include "revode/conv.hpp"
#include "revode/rng.hpp"
#include "revode/tensor.hpp"

namespace revode {

struct UnitSpec {
  int blocks = 0;
  index_t channels = 0;
};

// Network layout: stem convolution -> units of identical blocks, joined by
// (avg-pool, channel-zero-pad) boundaries -> global average pool -> affine
// classifier.
struct ArchSpec {
  BlockKind kind = BlockKind::hamiltonian;
  std::vector<UnitSpec> units;
  index_t in_channels = 3;
  index_t in_h = 32;
  index_t in_w = 32;
  index_t classes = 10;
  double h = 0.1;
  Activation act = Activation::relu;
  index_t stem_kernel = 3;
  index_t block_kernel = 3;
  LeapfrogInit leapfrog_init = LeapfrogInit::as_printed;

  void validate() const {
    if (units.empty()) throw std::invalid_argument("arch: at least one unit required");
    if (classes < 2) throw std::invalid_argument("arch: classes must be >= 2");
    if (h < 0) throw std::invalid_argument("arch: h must be non-negative");
    index_t prev_c = 0;
    for (std::size_t u = 0; u < units.size(); ++u) {
      const auto& us = units[u];
      if (us.blocks < 1)
        throw std::invalid_argument("arch: unit " + std::to_string(u) + " has no blocks");
      if (us.channels < 1)
        throw std::invalid_argument("arch: unit " + std::to_string(u) + " has no channels");
      if ((kind == BlockKind::hamiltonian || kind == BlockKind::hamiltonian_one_layer) &&
          us.channels % 2 != 0)
        throw std::invalid_argument("arch: unit " + std::to_string(u) + " channels " +
                                    std::to_string(us.channels) +
                                    " must be even for the channel-wise partition");
      if (us.channels < prev_c)
        throw std::invalid_argument("arch: channels may not shrink across units (unit " +
                                    std::to_string(u) + ")");
      prev_c = us.channels;
    }
    const index_t halvings = static_cast<index_t>(units.size()) - 1;
    if ((in_h >> halvings) << halvings != in_h || (in_w >> halvings) << halvings != in_w ||
        (in_h >> halvings) < 1 || (in_w >> halvings) < 1)
      throw std::invalid_argument("arch: input " + std::to_string(in_h) + "x" +
                                  std::to_string(in_w) + " not divisible by " +
                                  std::to_string(halvings) + " average-pool halvings");
  }

  index_t unit_height(std::size_t u) const { return in_h >> u; }
  index_t unit_width(std::size_t u) const { return in_w >> u; }

  // Convolution layers per block: the two-layer Hamiltonian uses 4, all other
  // kinds 2; plus the stem convolution and the final affine layer.
  index_t layer_count() const {
    index_t total = 0;
    for (const auto& us : units) total += us.blocks;
    return total * (kind == BlockKind::hamiltonian ? 4 : 2) + 2;
  }

  index_t param_count() const {
    const index_t k2 = block_kernel * block_kernel;
    index_t total = units.front().channels * in_channels * stem_kernel * stem_kernel +
                    units.front().channels;
    for (const auto& us : units) {
      index_t per_block = 0;
      switch (kind) {
        case BlockKind::hamiltonian: {
          const index_t m = us.channels / 2;
          per_block = 2 * m * m * k2 + 2 * m;
          break;
        }
        case BlockKind::hamiltonian_one_layer: {
          const index_t m = us.channels / 2;
          per_block = m * m * k2 + m;
          break;
        }
        case BlockKind::midpoint:
        case BlockKind::leapfrog:
          per_block = us.channels * us.channels * k2 + us.channels;
          break;
        case BlockKind::residual:
          per_block = 2 * us.channels * us.channels * k2 + us.channels;
          break;
      }
      total += per_block * us.blocks;
    }
    total += classes * units.back().channels + classes;
    return total;
  }
};

template <typename T>
struct AffineParams {
  index_t in = 0, out = 0;
  std::vector<T> w;  // row-major (out, in)
  std::vector<T> b;
};

template <typename T>
struct Network {
  ArchSpec arch;
  ConvKernel<T> stem_k;
  std::vector<T> stem_b;
  std::vector<std::vector<BlockParams<T>>> units;
  AffineParams<T> head;
};

template <typename T>
Network<T> init_network(const ArchSpec& arch, std::uint64_t seed) {
  arch.validate();
  Network<T> net;
  net.arch = arch;
  Rng rng(seed);

  const index_t c0 = arch.units.front().channels;
  net.stem_k = ConvKernel<T>(c0, arch.in_channels, arch.stem_kernel, arch.stem_kernel);
  net.stem_k.fill_normal(rng, std::sqrt(2.0 / static_cast<double>(arch.in_channels *
                                                                  arch.stem_kernel *
                                                                  arch.stem_kernel)));
  net.stem_b.assign(static_cast<std::size_t>(c0), T{0});

  for (const auto& us : arch.units) {
    std::vector<BlockParams<T>> blocks;
    const index_t bk = arch.block_kernel;
    for (int j = 0; j < us.blocks; ++j) {
      BlockParams<T> p;
      p.h = arch.h;
      p.act = arch.act;
      const double kstd = std::sqrt(2.0 / static_cast<double>(bk * bk));
      switch (arch.kind) {
        case BlockKind::hamiltonian: {
          const index_t m = us.channels / 2;
          p.k1 = ConvKernel<T>(m, m, bk, bk);
          p.k1.fill_normal(rng, kstd / std::sqrt(static_cast<double>(m)));
          p.k2 = ConvKernel<T>(m, m, bk, bk);
          p.k2.fill_normal(rng, kstd / std::sqrt(static_cast<double>(m)));
          p.b1.assign(static_cast<std::size_t>(m), T{0});
          p.b2.assign(static_cast<std::size_t>(m), T{0});
          break;
        }
        case BlockKind::hamiltonian_one_layer: {
          const index_t m = us.channels / 2;
          p.k1 = ConvKernel<T>(m, m, bk, bk);
          p.k1.fill_normal(rng, kstd / std::sqrt(static_cast<double>(m)));
          p.b1.assign(static_cast<std::size_t>(m), T{0});
          break;
        }
        case BlockKind::midpoint:
        case BlockKind::leapfrog: {
          p.k1 = ConvKernel<T>(us.channels, us.channels, bk, bk);
          p.k1.fill_normal(rng, kstd / std::sqrt(static_cast<double>(us.channels)));
          p.b1.assign(static_cast<std::size_t>(us.channels), T{0});
          break;
        }
        case BlockKind::residual: {
          p.k1 = ConvKernel<T>(us.channels, us.channels, bk, bk);
          p.k1.fill_normal(rng, kstd / std::sqrt(static_cast<double>(us.channels)));
          p.k2 = ConvKernel<T>(us.channels, us.channels, bk, bk);
          p.k2.fill_normal(rng, kstd / std::sqrt(static_cast<double>(us.channels)));
          p.b1.assign(static_cast<std::size_t>(us.channels), T{0});
          break;
        }
      }
      blocks.push_back(std::move(p));
    }
    net.units.push_back(std::move(blocks));
  }

  const index_t cl = arch.units.back().channels;
  net.head.in = cl;
  net.head.out = arch.classes;
  net.head.w.resize(static_cast<std::size_t>(cl * arch.classes));
  const double hstd = std::sqrt(2.0 / static_cast<double>(cl));
  for (auto& v : net.head.w) v = static_cast<T>(hstd * rng.normal());
  net.head.b.assign(static_cast<std::size_t>(arch.classes), T{0});
  return net;
}

// Zero-valued parameter structure with the same shapes (used for gradients).
template <typename T>
Network<T> make_zero_grads(const Network<T>& net) {
  Network<T> g;
  g.arch = net.arch;
  g.stem_k = ConvKernel<T>(net.stem_k.out_c, net.stem_k.in_c, net.stem_k.kh, net.stem_k.kw);
  g.stem_b.assign(net.stem_b.size(), T{0});
  for (const auto& unit : net.units) {
    std::vector<BlockParams<T>> blocks;
    for (const auto& p : unit) {
      BlockParams<T> z;
      z.h = p.h;
      z.act = p.act;
      z.k1 = ConvKernel<T>(p.k1.out_c, p.k1.in_c, p.k1.kh, p.k1.kw);
      if (!p.k2.empty()) z.k2 = ConvKernel<T>(p.k2.out_c, p.k2.in_c, p.k2.kh, p.k2.kw);
      z.b1.assign(p.b1.size(), T{0});
      z.b2.assign(p.b2.size(), T{0});
      blocks.push_back(std::move(z));
    }
    g.units.push_back(std::move(blocks));
  }
  g.head.in = net.head.in;
  g.head.out = net.head.out;
  g.head.w.assign(net.head.w.size(), T{0});
  g.head.b.assign(net.head.b.size(), T{0});
  return g;
}

// Visits every parameter array in a fixed order shared by gradients,
// optimizer state and checkpoint files.
template <typename T, typename Fn>
void for_each_param(Network<T>& net, Fn&& fn) {
  fn("stem.kernel", net.stem_k.data);
  fn("stem.bias", net.stem_b);
  for (std::size_t u = 0; u < net.units.size(); ++u)
    for (std::size_t j = 0; j < net.units[u].size(); ++j) {
      auto& p = net.units[u][j];
      const std::string prefix = "unit" + std::to_string(u) + ".block" + std::to_string(j) + ".";
      fn(prefix + "k1", p.k1.data);
      if (!p.k2.empty()) fn(prefix + "k2", p.k2.data);
      fn(prefix + "b1", p.b1);
      if (!p.b2.empty()) fn(prefix + "b2", p.b2);
    }
  fn("head.weight", net.head.w);
  fn("head.bias", net.head.b);
}

template <typename T, typename Fn>
void for_each_param_pair(Network<T>& a, Network<T>& b, Fn&& fn) {
  std::vector<std::vector<T>*> bufs;
  for_each_param(b, [&bufs](const std::string&, std::vector<T>& v) { bufs.push_back(&v); });
  std::size_t i = 0;
  for_each_param(a, [&](const std::string& name, std::vector<T>& v) {
    if (i >= bufs.size() || bufs[i]->size() != v.size())
      throw std::invalid_argument("parameter structures disagree at '" + name + "'");
    fn(name, v, *bufs[i]);
    ++i;
  });
}

template <typename T>
index_t param_count_actual(const Network<T>& net) {
  index_t total = 0;
  for_each_param(const_cast<Network<T>&>(net),
                 [&total](const std::string&, std::vector<T>& v) {
                   total += static_cast<index_t>(v.size());
                 });
  return total;
}

// ---------------------------------------------------------------------------
// Forward propagation
// ---------------------------------------------------------------------------

enum class Mode { infer, train_reversible, train_stored };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::infer: return "infer";
    case Mode::train_reversible: return "reversible";
    case Mode::train_stored: return "stored";
  }
  return "?";
}

struct MemoryCounts {
  index_t tensors = 0;
  index_t scalars = 0;
};

// What the reversible backward pass needs: the concatenated state at each
// unit end (one tensor per unit), the logits, and the input batch for the
// stem gradient. Cardinality of checkpointed activations is units + 1
// regardless of blocks per unit.
template <typename T>
struct CheckpointSet {
  Tensor<T> input;
  std::vector<Tensor<T>> boundary;
  Tensor<T> logits;
  std::vector<Tensor<T>> drift_refs;  // optional per-unit input copies

  MemoryCounts counts() const {
    MemoryCounts c;
    c.tensors = static_cast<index_t>(boundary.size()) + 1;
    for (const auto& t : boundary) c.scalars += t.numel();
    c.scalars += logits.numel();
    return c;
  }
};

// Full trace for the stored-activation oracle path.
template <typename T>
struct ActivationTrace {
  Tensor<T> input;
  std::vector<std::vector<BlockState<T>>> block_inputs;  // [unit][block]
  std::vector<Tensor<T>> unit_end;
  Tensor<T> logits;

  MemoryCounts counts() const {
    MemoryCounts c;
    for (const auto& unit : block_inputs) {
      c.tensors += static_cast<index_t>(unit.size());
      for (const auto& s : unit) {
        c.scalars += s.y.numel();
        if (!s.z.empty()) c.scalars += s.z.numel();
      }
    }
    c.tensors += static_cast<index_t>(unit_end.size()) + 1;
    for (const auto& t : unit_end) c.scalars += t.numel();
    c.scalars += logits.numel();
    return c;
  }
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;
  CheckpointSet<T> cp;
  ActivationTrace<T> trace;
  MemoryCounts counts;
};

namespace detail {

template <typename T>
Tensor<T> affine_forward(const AffineParams<T>& head, const Tensor<T>& pooled) {
  Tensor<T> logits(pooled.shape.n, head.out, 1, 1);
  for (index_t b = 0; b < pooled.shape.n; ++b)
    for (index_t k = 0; k < head.out; ++k) {
      double s = static_cast<double>(head.b[static_cast<std::size_t>(k)]);
      for (index_t c = 0; c < head.in; ++c)
        s += static_cast<double>(head.w[static_cast<std::size_t>(k * head.in + c)]) *
             static_cast<double>(pooled.at(b, c, 0, 0));
      logits.at(b, k, 0, 0) = static_cast<T>(s);
    }
  return logits;
}

// Builds the unit-entry state from the incoming flow tensor. For two-step
// kinds this applies the init step (which consumes block 0's parameters).
template <typename T>
BlockState<T> unit_entry_state(BlockKind kind, const Tensor<T>& t, const BlockParams<T>& first,
                               LeapfrogInit lf_mode) {
  switch (kind) {
    case BlockKind::hamiltonian:
    case BlockKind::hamiltonian_one_layer: {
      auto [y, z] = split_channels(t);
      return {std::move(y), std::move(z)};
    }
    case BlockKind::midpoint: return midpoint_init(t, first);
    case BlockKind::leapfrog: return leapfrog_init(t, first, lf_mode);
    case BlockKind::residual: return {t, Tensor<T>{}};
  }
  throw std::invalid_argument("unit_entry_state: bad kind");
}

// The tensor that flows onward from a unit: the concatenated pair for
// channel-partition kinds, the current member for history kinds.
template <typename T>
Tensor<T> unit_exit_flow(BlockKind kind, const BlockState<T>& s) {
  if (kind == BlockKind::hamiltonian || kind == BlockKind::hamiltonian_one_layer)
    return concat_channels(s.y, s.z);
  return s.y;
}

// The checkpoint stored at a unit end: the full state, packed as one tensor.
template <typename T>
Tensor<T> pack_state(BlockKind kind, const BlockState<T>& s) {
  if (kind == BlockKind::residual) return s.y;
  return concat_channels(s.y, s.z);
}

template <typename T>
BlockState<T> unpack_state(BlockKind kind, const Tensor<T>& packed) {
  if (kind == BlockKind::residual) return {packed, Tensor<T>{}};
  auto [y, z] = split_channels(packed);
  return {std::move(y), std::move(z)};
}

}  // namespace detail

// Runs the network. In train_reversible mode only unit-end states are
// retained; train_stored keeps every block input (the oracle path); infer
// keeps nothing. All three modes execute identical arithmetic.
template <typename T>
ForwardResult<T> net_forward(const Network<T>& net, const Tensor<T>& x, Mode mode,
                             bool retain_drift_refs = false) {
  const ArchSpec& arch = net.arch;
  arch.validate();
  if (x.shape.c != arch.in_channels || x.shape.h != arch.in_h || x.shape.w != arch.in_w)
    throw std::invalid_argument("net_forward: input " + x.shape.str() + " does not match arch " +
                                std::to_string(arch.in_channels) + "x" + std::to_string(arch.in_h) +
                                "x" + std::to_string(arch.in_w));

  ForwardResult<T> res;
  const bool rev = mode == Mode::train_reversible;
  const bool stored = mode == Mode::train_stored;
  if (rev && !is_reversible(arch.kind))
    throw std::invalid_argument("net_forward: " + to_string(arch.kind) +
                                " blocks are not invertible; use stored mode");

  Tensor<T> t = conv2d(x, net.stem_k, net.stem_b);
  const std::size_t num_units = net.units.size();
  for (std::size_t u = 0; u < num_units; ++u) {
    const auto& blocks = net.units[u];
    if (t.shape.c != arch.units[u].channels)
      throw std::invalid_argument("net_forward: unit " + std::to_string(u) + " expected " +
                                  std::to_string(arch.units[u].channels) + " channels, got " +
                                  std::to_string(t.shape.c));
    if (rev && retain_drift_refs) res.cp.drift_refs.push_back(t);
    if (stored) res.trace.block_inputs.emplace_back();

    BlockState<T> state =
        detail::unit_entry_state(arch.kind, t, blocks.front(), arch.leapfrog_init);
    const std::size_t first_block = is_two_step(arch.kind) ? 1 : 0;
    if (stored && is_two_step(arch.kind))
      res.trace.block_inputs[u].push_back(BlockState<T>{t, Tensor<T>{}});

    for (std::size_t j = first_block; j < blocks.size(); ++j) {
      if (stored) res.trace.block_inputs[u].push_back(state);
      state = block_forward(arch.kind, state, blocks[j]);
    }

    Tensor<T> flow = detail::unit_exit_flow(arch.kind, state);
    if (rev) res.cp.boundary.push_back(detail::pack_state(arch.kind, state));
    if (stored) res.trace.unit_end.push_back(detail::pack_state(arch.kind, state));

    if (u + 1 < num_units) {
      t = channel_zero_pad(avg_pool2(flow), arch.units[u + 1].channels);
    } else {
      t = std::move(flow);
    }
  }

  Tensor<T> pooled = global_avg_pool(t);
  res.logits = detail::affine_forward(net.head, pooled);

  if (rev) {
    res.cp.input = x;
    res.cp.logits = res.logits;
    res.counts = res.cp.counts();
  } else if (stored) {
    res.trace.input = x;
    res.trace.logits = res.logits;
    res.counts = res.trace.counts();
  }
  return res;
}

// ---------------------------------------------------------------------------
// Backward propagation
// ---------------------------------------------------------------------------

template <typename T>
struct BackwardResult {
  Network<T> grads;
  // Worst max-abs deviation of reconstructed block inputs from a reference
  // trace (reversible path only; NaN when no reference was supplied).
  double reconstruction_error = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

template <typename T>
struct HeadBackward {
  Tensor<T> g_flow;  // gradient w.r.t. the last unit's exit flow
};

template <typename T>
HeadBackward<T> head_vjp(const Network<T>& net, const Tensor<T>& last_flow,
                         const Tensor<T>& loss_grad, Network<T>& grads) {
  const Tensor<T> pooled = global_avg_pool(last_flow);
  const index_t classes = net.head.out, cl = net.head.in;
  if (loss_grad.shape.n != pooled.shape.n || loss_grad.shape.c != classes)
    throw std::invalid_argument("net_backward: loss gradient " + loss_grad.shape.str() +
                                " does not match logits (batch x " + std::to_string(classes) +
                                ")");
  for (index_t b = 0; b < pooled.shape.n; ++b)
    for (index_t k = 0; k < classes; ++k) {
      const double g = static_cast<double>(loss_grad.at(b, k, 0, 0));
      grads.head.b[static_cast<std::size_t>(k)] += static_cast<T>(g);
      for (index_t c = 0; c < cl; ++c)
        grads.head.w[static_cast<std::size_t>(k * cl + c)] +=
            static_cast<T>(g * static_cast<double>(pooled.at(b, c, 0, 0)));
    }
  Tensor<T> g_pooled(pooled.shape);
  for (index_t b = 0; b < pooled.shape.n; ++b)
    for (index_t c = 0; c < cl; ++c) {
      double s = 0.0;
      for (index_t k = 0; k < classes; ++k)
        s += static_cast<double>(net.head.w[static_cast<std::size_t>(k * cl + c)]) *
             static_cast<double>(loss_grad.at(b, k, 0, 0));
      g_pooled.at(b, c, 0, 0) = static_cast<T>(s);
    }
  return {global_avg_pool_vjp(g_pooled, last_flow.shape.h, last_flow.shape.w)};
}

// Gradient of the unit exit flow mapped onto a state gradient.
template <typename T>
BlockState<T> exit_flow_grad_to_state(BlockKind kind, const Tensor<T>& g_flow,
                                      const BlockState<T>& end_state) {
  if (kind == BlockKind::hamiltonian || kind == BlockKind::hamiltonian_one_layer) {
    auto [gy, gz] = split_channels(g_flow);
    return {std::move(gy), std::move(gz)};
  }
  if (kind == BlockKind::residual) return {g_flow, Tensor<T>{}};
  // history kinds: only the current member flows onward
  return {g_flow, zeros_like(end_state.z)};
}

template <typename T>
void accumulate_block_grads(BlockParams<T>& dst, const BlockGrads<T>& src) {
  axpy_kernel(src.k1, dst.k1);
  if (!src.k2.empty()) axpy_kernel(src.k2, dst.k2);
  add_vec(dst.b1, src.b1);
  if (!src.b2.empty()) add_vec(dst.b2, src.b2);
}

}  // namespace detail

// Walks units in reverse, reconstructing each block's input via the block
// inverse and applying block_vjp. Boundary stages (pool, pad, split/concat)
// are linear, so no activations beyond the checkpoints are needed.
// `reference` (a stored-mode trace) enables reconstruction-drift measurement.
template <typename T>
BackwardResult<T> net_backward_reversible(const Network<T>& net, const CheckpointSet<T>& cp,
                                          const Tensor<T>& loss_grad,
                                          const ActivationTrace<T>* reference = nullptr) {
  const ArchSpec& arch = net.arch;
  if (!is_reversible(arch.kind))
    throw std::invalid_argument("net_backward_reversible: " + to_string(arch.kind) +
                                " blocks are not invertible");
  const std::size_t num_units = net.units.size();
  if (cp.boundary.size() != num_units)
    throw std::invalid_argument("net_backward_reversible: checkpoint count " +
                                std::to_string(cp.boundary.size()) + " != units " +
                                std::to_string(num_units));

  BackwardResult<T> res{make_zero_grads(net), 0.0};
  bool measured = false;

  BlockState<T> end_state = detail::unpack_state(arch.kind, cp.boundary.back());
  Tensor<T> last_flow = detail::unit_exit_flow(arch.kind, end_state);
  auto head = detail::head_vjp(net, last_flow, loss_grad, res.grads);
  Tensor<T> g_flow = std::move(head.g_flow);

  for (std::size_t ui = num_units; ui-- > 0;) {
    const auto& blocks = net.units[ui];
    BlockState<T> state = detail::unpack_state(arch.kind, cp.boundary[ui]);
    BlockState<T> g_state = detail::exit_flow_grad_to_state(arch.kind, g_flow, state);

    const std::size_t first_block = is_two_step(arch.kind) ? 1 : 0;
    for (std::size_t j = blocks.size(); j-- > first_block;) {
      BlockState<T> prev = block_inverse(arch.kind, state, blocks[j]);
      if (reference) {
        const auto& want = (*reference).block_inputs[ui][j];
        res.reconstruction_error =
            std::max({res.reconstruction_error, max_abs_diff(prev.y, want.y),
                      want.z.empty() ? 0.0 : max_abs_diff(prev.z, want.z)});
        measured = true;
      }
      auto [g_prev, pg] = block_vjp(arch.kind, prev, blocks[j], g_state);
      detail::accumulate_block_grads(res.grads.units[ui][j], pg);
      state = std::move(prev);
      g_state = std::move(g_prev);
    }

    Tensor<T> g_t;
    if (is_two_step(arch.kind)) {
      const Tensor<T>& y0 = state.z;  // after inverting to (Y_1, Y_0)
      if (reference) {
        res.reconstruction_error =
            std::max(res.reconstruction_error,
                     max_abs_diff(y0, (*reference).block_inputs[ui][0].y));
        measured = true;
      }
      if (arch.kind == BlockKind::midpoint) {
        auto [g_y0, pg] = midpoint_init_vjp(y0, blocks[0], g_state);
        detail::accumulate_block_grads(res.grads.units[ui][0], pg);
        g_t = std::move(g_y0);
      } else {
        auto [g_y0, pg] = leapfrog_init_vjp(y0, blocks[0], g_state, arch.leapfrog_init);
        detail::accumulate_block_grads(res.grads.units[ui][0], pg);
        g_t = std::move(g_y0);
      }
    } else {
      g_t = concat_channels(g_state.y, g_state.z);
    }

    if (!cp.drift_refs.empty()) {
      const Tensor<T> rec = is_two_step(arch.kind)
                                ? state.z
                                : concat_channels(state.y, state.z);
      res.reconstruction_error =
          std::max(res.reconstruction_error, max_abs_diff(rec, cp.drift_refs[ui]));
      measured = true;
    }

    if (ui > 0) {
      Tensor<T> g_pool_out = channel_slice(g_t, net.arch.units[ui - 1].channels);
      g_flow = avg_pool2_vjp(g_pool_out, arch.unit_height(ui - 1), arch.unit_width(ui - 1));
    } else {
      ConvKernel<T> kg = conv2d_kernel_grad(cp.input, g_t, net.stem_k.kh, net.stem_k.kw);
      axpy_kernel(kg, res.grads.stem_k);
      add_vec(res.grads.stem_b, conv2d_bias_grad(g_t));
    }
  }
  if (!measured) res.reconstruction_error = std::numeric_limits<double>::quiet_NaN();
  return res;
}

// Oracle path: identical walk but block inputs come from the stored trace.
template <typename T>
Network<T> net_backward_stored(const Network<T>& net, const ActivationTrace<T>& trace,
                               const Tensor<T>& loss_grad) {
  const ArchSpec& arch = net.arch;
  const std::size_t num_units = net.units.size();
  if (trace.block_inputs.size() != num_units || trace.unit_end.size() != num_units)
    throw std::invalid_argument("net_backward_stored: trace does not match network");

  Network<T> grads = make_zero_grads(net);
  BlockState<T> end_state = detail::unpack_state(arch.kind, trace.unit_end.back());
  Tensor<T> last_flow = detail::unit_exit_flow(arch.kind, end_state);
  auto head = detail::head_vjp(net, last_flow, loss_grad, grads);
  Tensor<T> g_flow = std::move(head.g_flow);

  for (std::size_t ui = num_units; ui-- > 0;) {
    const auto& blocks = net.units[ui];
    BlockState<T> end = detail::unpack_state(arch.kind, trace.unit_end[ui]);
    BlockState<T> g_state = detail::exit_flow_grad_to_state(arch.kind, g_flow, end);

    const std::size_t first_block = is_two_step(arch.kind) ? 1 : 0;
    for (std::size_t j = blocks.size(); j-- > first_block;) {
      const BlockState<T>& prev = trace.block_inputs[ui][j];
      auto [g_prev, pg] = block_vjp(arch.kind, prev, blocks[j], g_state);
      detail::accumulate_block_grads(grads.units[ui][j], pg);
      g_state = std::move(g_prev);
    }

    Tensor<T> g_t;
    if (is_two_step(arch.kind)) {
      const Tensor<T>& y0 = trace.block_inputs[ui][0].y;
      if (arch.kind == BlockKind::midpoint) {
        auto [g_y0, pg] = midpoint_init_vjp(y0, blocks[0], g_state);
        detail::accumulate_block_grads(grads.units[ui][0], pg);
        g_t = std::move(g_y0);
      } else {
        auto [g_y0, pg] = leapfrog_init_vjp(y0, blocks[0], g_state, arch.leapfrog_init);
        detail::accumulate_block_grads(grads.units[ui][0], pg);
        g_t = std::move(g_y0);
      }
    } else if (arch.kind == BlockKind::residual) {
      g_t = g_state.y;
    } else {
      g_t = concat_channels(g_state.y, g_state.z);
    }

    if (ui > 0) {
      Tensor<T> g_pool_out = channel_slice(g_t, net.arch.units[ui - 1].channels);
      g_flow = avg_pool2_vjp(g_pool_out, arch.unit_height(ui - 1), arch.unit_width(ui - 1));
    } else {
      ConvKernel<T> kg = conv2d_kernel_grad(trace.input, g_t, net.stem_k.kh, net.stem_k.kw);
      axpy_kernel(kg, grads.stem_k);
      add_vec(grads.stem_b, conv2d_bias_grad(g_t));
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Memory accounting
// ---------------------------------------------------------------------------

// Activation retention for one forward+backward pass, computed analytically
// from the architecture. Matches the instrumentation counters produced by
// net_forward.
inline MemoryCounts memory_report(const ArchSpec& arch, Mode mode, index_t batch = 1) {
  arch.validate();
  MemoryCounts c;
  if (mode == Mode::infer) return c;
  const bool two_step = is_two_step(arch.kind);
  const index_t classes = arch.classes;
  auto state_scalars = [&](std::size_t u) {
    const index_t spatial = arch.unit_height(u) * arch.unit_width(u);
    const index_t width = arch.units[u].channels;
    // channel-partition kinds: pair of halves == width; history kinds: two
    // full-width members; residual: single member
    if (arch.kind == BlockKind::residual) return batch * width * spatial;
    return batch * (two_step ? 2 * width : width) * spatial;
  };
  if (mode == Mode::train_reversible) {
    c.tensors = static_cast<index_t>(arch.units.size()) + 1;
    for (std::size_t u = 0; u < arch.units.size(); ++u) c.scalars += state_scalars(u);
    c.scalars += batch * classes;
    return c;
  }
  // stored mode: every block input plus unit ends plus logits
  for (std::size_t u = 0; u < arch.units.size(); ++u) {
    const index_t n = arch.units[u].blocks;
    c.tensors += n + 1;
    if (two_step) {
      // init input is a single full-width tensor; the rest are pairs
      const index_t spatial = arch.unit_height(u) * arch.unit_width(u);
      c.scalars += batch * arch.units[u].channels * spatial;          // init y0
      c.scalars += (n - 1) * state_scalars(u);                        // later block inputs
      c.scalars += state_scalars(u);                                  // unit end
    } else {
      c.scalars += (n + 1) * state_scalars(u);
    }
  }
  c.tensors += 1;
  c.scalars += batch * classes;
  return c;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

template <typename T>
struct LossResult {
  double loss = 0.0;
  Tensor<T> grad;  // d(mean cross-entropy)/d(logits)
  index_t correct = 0;
};

template <typename T>
LossResult<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  const index_t n = logits.shape.n, classes = logits.shape.c;
  if (static_cast<index_t>(labels.size()) != n)
    throw std::invalid_argument("softmax_cross_entropy: batch " + std::to_string(n) + " vs " +
                                std::to_string(labels.size()) + " labels");
  LossResult<T> res;
  res.grad = Tensor<T>(logits.shape);
  double total = 0.0;
  for (index_t b = 0; b < n; ++b) {
    const int label = labels[static_cast<std::size_t>(b)];
    if (label < 0 || label >= classes)
      throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(label) +
                                  " out of range for " + std::to_string(classes) + " classes");
    double mx = -std::numeric_limits<double>::infinity();
    index_t argmax = 0;
    for (index_t k = 0; k < classes; ++k) {
      const double v = static_cast<double>(logits.at(b, k, 0, 0));
      if (v > mx) {
        mx = v;
        argmax = k;
      }
    }
    double denom = 0.0;
    for (index_t k = 0; k < classes; ++k)
      denom += std::exp(static_cast<double>(logits.at(b, k, 0, 0)) - mx);
    const double log_denom = std::log(denom);
    total += log_denom - (static_cast<double>(logits.at(b, label, 0, 0)) - mx);
    if (argmax == label) ++res.correct;
    for (index_t k = 0; k < classes; ++k) {
      const double p = std::exp(static_cast<double>(logits.at(b, k, 0, 0)) - mx) / denom;
      res.grad.at(b, k, 0, 0) =
          static_cast<T>((p - (k == label ? 1.0 : 0.0)) / static_cast<double>(n));
    }
  }
  res.loss = total / static_cast<double>(n);
  return res;
}

}  // namespace revode
