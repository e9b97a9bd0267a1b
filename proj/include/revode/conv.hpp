#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "revode/tensor.hpp"

namespace revode {

// 2-D convolution weights, (out_channels, in_channels, kh, kw).
// Stride is fixed at 1 and padding is "same", so kh/kw must be odd.
template <typename T>
struct ConvKernel {
  index_t out_c = 0, in_c = 0, kh = 0, kw = 0;
  std::vector<T> data;

  ConvKernel() = default;
  ConvKernel(index_t oc, index_t ic, index_t h, index_t w)
      : out_c(oc), in_c(ic), kh(h), kw(w), data(static_cast<std::size_t>(oc * ic * h * w), T{0}) {
    if (h <= 0 || w <= 0 || h % 2 == 0 || w % 2 == 0)
      throw std::invalid_argument("conv kernel: spatial size " + std::to_string(h) + "x" +
                                  std::to_string(w) + " must be odd for same padding");
  }

  index_t numel() const { return out_c * in_c * kh * kw; }
  bool empty() const { return data.empty(); }

  T& at(index_t oc, index_t ic, index_t y, index_t x) {
    return data[static_cast<std::size_t>(((oc * in_c + ic) * kh + y) * kw + x)];
  }
  const T& at(index_t oc, index_t ic, index_t y, index_t x) const {
    return data[static_cast<std::size_t>(((oc * in_c + ic) * kh + y) * kw + x)];
  }

  void fill_uniform(Rng& rng, double lo, double hi) {
    for (auto& v : data) v = static_cast<T>(rng.uniform(lo, hi));
  }
  void fill_normal(Rng& rng, double stddev) {
    for (auto& v : data) v = static_cast<T>(stddev * rng.normal());
  }
};

template <typename T>
void axpy_kernel(const ConvKernel<T>& x, ConvKernel<T>& y, T alpha = T{1}) {
  if (x.out_c != y.out_c || x.in_c != y.in_c || x.kh != y.kh || x.kw != y.kw)
    throw std::invalid_argument("axpy_kernel: kernel shape mismatch");
  for (std::size_t i = 0; i < x.data.size(); ++i) y.data[i] += alpha * x.data[i];
}

template <typename T>
void add_vec(std::vector<T>& y, const std::vector<T>& x) {
  if (x.size() != y.size())
    throw std::invalid_argument("add_vec: length mismatch " + std::to_string(y.size()) + " vs " +
                                std::to_string(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += x[i];
}

namespace detail {

// out[y][x] += w * in[y+dy][x+dx] over the valid intersection.
template <typename T>
inline void add_shifted_plane(T* out, const T* in, index_t h, index_t w_dim, T weight, index_t dy,
                              index_t dx) {
  const index_t y0 = dy < 0 ? -dy : 0;
  const index_t y1 = dy > 0 ? h - dy : h;
  const index_t x0 = dx < 0 ? -dx : 0;
  const index_t x1 = dx > 0 ? w_dim - dx : w_dim;
  for (index_t y = y0; y < y1; ++y) {
    T* orow = out + y * w_dim;
    const T* irow = in + (y + dy) * w_dim + dx;
    for (index_t x = x0; x < x1; ++x) orow[x] += weight * irow[x];
  }
}

// sum over valid (y,x) of a[y][x] * b[y+dy][x+dx], accumulated in double.
template <typename T>
inline double dot_shifted_plane(const T* a, const T* b, index_t h, index_t w_dim, index_t dy,
                                index_t dx) {
  const index_t y0 = dy < 0 ? -dy : 0;
  const index_t y1 = dy > 0 ? h - dy : h;
  const index_t x0 = dx < 0 ? -dx : 0;
  const index_t x1 = dx > 0 ? w_dim - dx : w_dim;
  double s = 0.0;
  for (index_t y = y0; y < y1; ++y) {
    const T* arow = a + y * w_dim;
    const T* brow = b + (y + dy) * w_dim + dx;
    T row{0};
    for (index_t x = x0; x < x1; ++x) row += arow[x] * brow[x];
    s += static_cast<double>(row);
  }
  return s;
}

// Fused 3x3 same-padding accumulation: out += correlate(in, k) in a single
// plane pass. `k` is row-major (ky, kx) with taps at offsets ky-1, kx-1.
template <typename T>
inline void accum_plane_3x3(T* out, const T* in, index_t h, index_t w, const T* k) {
  auto edge_rows = [&](index_t y, const T* r0, const T* r1, const T* r2) {
    T* orow = out + y * w;
    const T* rows[3] = {r0, r1, r2};
    for (int j = 0; j < 3; ++j) {
      const T* r = rows[j];
      if (!r) continue;
      const T k0 = k[3 * j], k1 = k[3 * j + 1], k2 = k[3 * j + 2];
      for (index_t x = 1; x + 1 < w; ++x) orow[x] += k0 * r[x - 1] + k1 * r[x] + k2 * r[x + 1];
      orow[0] += k1 * r[0] + (w > 1 ? k2 * r[1] : T{0});
      if (w > 1) orow[w - 1] += k0 * r[w - 2] + k1 * r[w - 1];
    }
  };
  if (h == 1) {
    edge_rows(0, nullptr, in, nullptr);
    return;
  }
  edge_rows(0, nullptr, in, in + w);
  for (index_t y = 1; y + 1 < h; ++y) {
    const T* r0 = in + (y - 1) * w;
    const T* r1 = in + y * w;
    const T* r2 = in + (y + 1) * w;
    T* orow = out + y * w;
    const T k00 = k[0], k01 = k[1], k02 = k[2];
    const T k10 = k[3], k11 = k[4], k12 = k[5];
    const T k20 = k[6], k21 = k[7], k22 = k[8];
    for (index_t x = 1; x + 1 < w; ++x) {
      orow[x] += k00 * r0[x - 1] + k01 * r0[x] + k02 * r0[x + 1] + k10 * r1[x - 1] +
                 k11 * r1[x] + k12 * r1[x + 1] + k20 * r2[x - 1] + k21 * r2[x] +
                 k22 * r2[x + 1];
    }
    orow[0] += k01 * r0[0] + k11 * r1[0] + k21 * r2[0];
    if (w > 1) {
      orow[0] += k02 * r0[1] + k12 * r1[1] + k22 * r2[1];
      orow[w - 1] += k00 * r0[w - 2] + k01 * r0[w - 1] + k10 * r1[w - 2] + k11 * r1[w - 1] +
                     k20 * r2[w - 2] + k21 * r2[w - 1];
    }
  }
  edge_rows(h - 1, in + (h - 2) * w, in + (h - 1) * w, nullptr);
}

// Fused 3x3 kernel-gradient pass: acc[ky*3+kx] += sum over (y,x) of
// up[y][x] * in[y+ky-1][x+kx-1], one plane traversal.
template <typename T>
inline void kernel_grad_plane_3x3(const T* up, const T* in, index_t h, index_t w, double* acc) {
  T partial[9] = {};
  auto edge_rows = [&](index_t y, const T* r0, const T* r1, const T* r2) {
    const T* urow = up + y * w;
    const T* rows[3] = {r0, r1, r2};
    for (int j = 0; j < 3; ++j) {
      const T* r = rows[j];
      if (!r) continue;
      T p0{0}, p1{0}, p2{0};
      for (index_t x = 1; x + 1 < w; ++x) {
        const T v = urow[x];
        p0 += v * r[x - 1];
        p1 += v * r[x];
        p2 += v * r[x + 1];
      }
      p1 += urow[0] * r[0];
      if (w > 1) {
        p2 += urow[0] * r[1];
        p0 += urow[w - 1] * r[w - 2];
        p1 += urow[w - 1] * r[w - 1];
      }
      partial[3 * j] += p0;
      partial[3 * j + 1] += p1;
      partial[3 * j + 2] += p2;
    }
  };
  if (h == 1) {
    edge_rows(0, nullptr, in, nullptr);
  } else {
    edge_rows(0, nullptr, in, in + w);
    for (index_t y = 1; y + 1 < h; ++y) {
      const T* r0 = in + (y - 1) * w;
      const T* r1 = in + y * w;
      const T* r2 = in + (y + 1) * w;
      const T* urow = up + y * w;
      T q00{0}, q01{0}, q02{0}, q10{0}, q11{0}, q12{0}, q20{0}, q21{0}, q22{0};
      for (index_t x = 1; x + 1 < w; ++x) {
        const T v = urow[x];
        q00 += v * r0[x - 1];
        q01 += v * r0[x];
        q02 += v * r0[x + 1];
        q10 += v * r1[x - 1];
        q11 += v * r1[x];
        q12 += v * r1[x + 1];
        q20 += v * r2[x - 1];
        q21 += v * r2[x] ;
        q22 += v * r2[x + 1];
      }
      const T v0 = urow[0];
      q01 += v0 * r0[0];
      q11 += v0 * r1[0];
      q21 += v0 * r2[0];
      if (w > 1) {
        q02 += v0 * r0[1];
        q12 += v0 * r1[1];
        q22 += v0 * r2[1];
        const T vl = urow[w - 1];
        q00 += vl * r0[w - 2];
        q01 += vl * r0[w - 1];
        q10 += vl * r1[w - 2];
        q11 += vl * r1[w - 1];
        q20 += vl * r2[w - 2];
        q21 += vl * r2[w - 1];
      }
      partial[0] += q00;
      partial[1] += q01;
      partial[2] += q02;
      partial[3] += q10;
      partial[4] += q11;
      partial[5] += q12;
      partial[6] += q20;
      partial[7] += q21;
      partial[8] += q22;
    }
    edge_rows(h - 1, in + (h - 2) * w, in + (h - 1) * w, nullptr);
  }
  for (int j = 0; j < 9; ++j) acc[j] += static_cast<double>(partial[j]);
}

}  // namespace detail

// Cross-correlation with zero "same" padding, stride 1, plus per-channel bias.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvKernel<T>& k, const std::vector<T>& bias) {
  if (x.shape.c != k.in_c)
    throw std::invalid_argument("conv2d: input channels " + std::to_string(x.shape.c) +
                                " != kernel in_channels " + std::to_string(k.in_c));
  if (!bias.empty() && static_cast<index_t>(bias.size()) != k.out_c)
    throw std::invalid_argument("conv2d: bias length " + std::to_string(bias.size()) +
                                " != kernel out_channels " + std::to_string(k.out_c));
  const index_t ph = k.kh / 2, pw = k.kw / 2;
  Tensor<T> out(x.shape.n, k.out_c, x.shape.h, x.shape.w);
#pragma omp parallel for collapse(2) schedule(static)
  for (index_t b = 0; b < x.shape.n; ++b) {
    for (index_t oc = 0; oc < k.out_c; ++oc) {
      T* oplane = out.plane(b, oc);
      if (!bias.empty()) {
        const T bv = bias[static_cast<std::size_t>(oc)];
        for (index_t i = 0; i < x.shape.h * x.shape.w; ++i) oplane[i] = bv;
      }
      for (index_t ic = 0; ic < k.in_c; ++ic) {
        const T* iplane = x.plane(b, ic);
        if (k.kh == 3 && k.kw == 3) {
          detail::accum_plane_3x3(oplane, iplane, x.shape.h, x.shape.w, &k.at(oc, ic, 0, 0));
        } else {
          for (index_t ky = 0; ky < k.kh; ++ky)
            for (index_t kx = 0; kx < k.kw; ++kx)
              detail::add_shifted_plane(oplane, iplane, x.shape.h, x.shape.w,
                                        k.at(oc, ic, ky, kx), ky - ph, kx - pw);
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvKernel<T>& k) {
  return conv2d(x, k, std::vector<T>{});
}

// Exact linear adjoint of conv2d with the same kernel and padding:
// <conv2d(u,k,0), v> == <u, conv2d_transpose(v,k)>.
template <typename T>
Tensor<T> conv2d_transpose(const Tensor<T>& v, const ConvKernel<T>& k) {
  if (v.shape.c != k.out_c)
    throw std::invalid_argument("conv2d_transpose: input channels " + std::to_string(v.shape.c) +
                                " != kernel out_channels " + std::to_string(k.out_c));
  const index_t ph = k.kh / 2, pw = k.kw / 2;
  Tensor<T> out(v.shape.n, k.in_c, v.shape.h, v.shape.w);
#pragma omp parallel for collapse(2) schedule(static)
  for (index_t b = 0; b < v.shape.n; ++b) {
    for (index_t ic = 0; ic < k.in_c; ++ic) {
      T* oplane = out.plane(b, ic);
      for (index_t oc = 0; oc < k.out_c; ++oc) {
        const T* iplane = v.plane(b, oc);
        if (k.kh == 3 && k.kw == 3) {
          // the adjoint correlates with the 180-degree-rotated kernel
          const T* kk = &k.at(oc, ic, 0, 0);
          const T rot[9] = {kk[8], kk[7], kk[6], kk[5], kk[4], kk[3], kk[2], kk[1], kk[0]};
          detail::accum_plane_3x3(oplane, iplane, v.shape.h, v.shape.w, rot);
        } else {
          for (index_t ky = 0; ky < k.kh; ++ky)
            for (index_t kx = 0; kx < k.kw; ++kx)
              detail::add_shifted_plane(oplane, iplane, v.shape.h, v.shape.w,
                                        k.at(oc, ic, ky, kx), ph - ky, pw - kx);
        }
      }
    }
  }
  return out;
}

// d(loss)/d(kernel) for y = conv2d(x, k): upstream has out_c channels, x has in_c.
// Also serves w = conv2d_transpose(v, k) with (x := upstream-of-w, upstream := v).
template <typename T>
ConvKernel<T> conv2d_kernel_grad(const Tensor<T>& x, const Tensor<T>& upstream, index_t kh,
                                 index_t kw) {
  if (x.shape.n != upstream.shape.n || x.shape.h != upstream.shape.h ||
      x.shape.w != upstream.shape.w)
    throw std::invalid_argument("kernel_grad: batch/spatial mismatch " + x.shape.str() + " vs " +
                                upstream.shape.str());
  const index_t ph = kh / 2, pw = kw / 2;
  ConvKernel<T> g(upstream.shape.c, x.shape.c, kh, kw);
  const index_t oc_n = g.out_c, ic_n = g.in_c;
#pragma omp parallel for collapse(2) schedule(static)
  for (index_t oc = 0; oc < oc_n; ++oc) {
    for (index_t ic = 0; ic < ic_n; ++ic) {
      if (kh == 3 && kw == 3) {
        double acc[9] = {};
        for (index_t b = 0; b < x.shape.n; ++b)
          detail::kernel_grad_plane_3x3(upstream.plane(b, oc), x.plane(b, ic), x.shape.h,
                                        x.shape.w, acc);
        for (index_t ky = 0; ky < 3; ++ky)
          for (index_t kx = 0; kx < 3; ++kx)
            g.at(oc, ic, ky, kx) = static_cast<T>(acc[ky * 3 + kx]);
      } else {
        for (index_t ky = 0; ky < kh; ++ky)
          for (index_t kx = 0; kx < kw; ++kx) {
            double acc = 0.0;
            for (index_t b = 0; b < x.shape.n; ++b)
              acc += detail::dot_shifted_plane(upstream.plane(b, oc), x.plane(b, ic), x.shape.h,
                                               x.shape.w, ky - ph, kx - pw);
            g.at(oc, ic, ky, kx) = static_cast<T>(acc);
          }
      }
    }
  }
  return g;
}

// d(loss)/d(bias): per-channel sum of the upstream gradient.
template <typename T>
std::vector<T> conv2d_bias_grad(const Tensor<T>& upstream) {
  std::vector<T> g(static_cast<std::size_t>(upstream.shape.c), T{0});
  for (index_t b = 0; b < upstream.shape.n; ++b)
    for (index_t c = 0; c < upstream.shape.c; ++c) {
      const T* p = upstream.plane(b, c);
      double s = 0.0;
      for (index_t i = 0; i < upstream.shape.h * upstream.shape.w; ++i)
        s += static_cast<double>(p[i]);
      g[static_cast<std::size_t>(c)] += static_cast<T>(s);
    }
  return g;
}

// 2x2 non-overlapping mean; spatial dims halved.
template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& x) {
  if (x.shape.h % 2 != 0 || x.shape.w % 2 != 0)
    throw std::invalid_argument("avg_pool2: spatial dims " + std::to_string(x.shape.h) + "x" +
                                std::to_string(x.shape.w) + " must be even");
  Tensor<T> out(x.shape.n, x.shape.c, x.shape.h / 2, x.shape.w / 2);
  for (index_t b = 0; b < x.shape.n; ++b)
    for (index_t c = 0; c < x.shape.c; ++c) {
      const T* ip = x.plane(b, c);
      T* op = out.plane(b, c);
      for (index_t y = 0; y < out.shape.h; ++y)
        for (index_t x2 = 0; x2 < out.shape.w; ++x2) {
          const T* r0 = ip + (2 * y) * x.shape.w + 2 * x2;
          const T* r1 = r0 + x.shape.w;
          op[y * out.shape.w + x2] = (r0[0] + r0[1] + r1[0] + r1[1]) * T{0.25};
        }
    }
  return out;
}

template <typename T>
Tensor<T> avg_pool2_vjp(const Tensor<T>& upstream, index_t in_h, index_t in_w) {
  if (upstream.shape.h * 2 != in_h || upstream.shape.w * 2 != in_w)
    throw std::invalid_argument("avg_pool2_vjp: upstream " + upstream.shape.str() +
                                " incompatible with input " + std::to_string(in_h) + "x" +
                                std::to_string(in_w));
  Tensor<T> g(upstream.shape.n, upstream.shape.c, in_h, in_w);
  for (index_t b = 0; b < upstream.shape.n; ++b)
    for (index_t c = 0; c < upstream.shape.c; ++c) {
      const T* up = upstream.plane(b, c);
      T* gp = g.plane(b, c);
      for (index_t y = 0; y < upstream.shape.h; ++y)
        for (index_t x = 0; x < upstream.shape.w; ++x) {
          const T v = up[y * upstream.shape.w + x] * T{0.25};
          T* r0 = gp + (2 * y) * in_w + 2 * x;
          T* r1 = r0 + in_w;
          r0[0] = v;
          r0[1] = v;
          r1[0] = v;
          r1[1] = v;
        }
    }
  return g;
}

// Mean over all spatial positions; output is (n, c, 1, 1).
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  Tensor<T> out(x.shape.n, x.shape.c, 1, 1);
  const double inv = 1.0 / static_cast<double>(x.shape.h * x.shape.w);
  for (index_t b = 0; b < x.shape.n; ++b)
    for (index_t c = 0; c < x.shape.c; ++c) {
      const T* p = x.plane(b, c);
      double s = 0.0;
      for (index_t i = 0; i < x.shape.h * x.shape.w; ++i) s += static_cast<double>(p[i]);
      out.at(b, c, 0, 0) = static_cast<T>(s * inv);
    }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool_vjp(const Tensor<T>& upstream, index_t in_h, index_t in_w) {
  Tensor<T> g(upstream.shape.n, upstream.shape.c, in_h, in_w);
  const T inv = static_cast<T>(1.0 / static_cast<double>(in_h * in_w));
  for (index_t b = 0; b < upstream.shape.n; ++b)
    for (index_t c = 0; c < upstream.shape.c; ++c) {
      const T v = upstream.at(b, c, 0, 0) * inv;
      T* gp = g.plane(b, c);
      for (index_t i = 0; i < in_h * in_w; ++i) gp[i] = v;
    }
  return g;
}

// First x.channels copied, remainder zero.
template <typename T>
Tensor<T> channel_zero_pad(const Tensor<T>& x, index_t new_channels) {
  if (new_channels < x.shape.c)
    throw std::invalid_argument("channel_zero_pad: new channel count " +
                                std::to_string(new_channels) + " < existing " +
                                std::to_string(x.shape.c));
  Tensor<T> out(x.shape.n, new_channels, x.shape.h, x.shape.w);
  for (index_t b = 0; b < x.shape.n; ++b)
    for (index_t c = 0; c < x.shape.c; ++c) {
      const T* ip = x.plane(b, c);
      T* op = out.plane(b, c);
      std::copy(ip, ip + x.shape.h * x.shape.w, op);
    }
  return out;
}

// VJP of channel_zero_pad: keep the first `channels` channels.
template <typename T>
Tensor<T> channel_slice(const Tensor<T>& x, index_t channels) {
  if (channels > x.shape.c)
    throw std::invalid_argument("channel_slice: requested " + std::to_string(channels) +
                                " channels from " + std::to_string(x.shape.c));
  Tensor<T> out(x.shape.n, channels, x.shape.h, x.shape.w);
  for (index_t b = 0; b < x.shape.n; ++b)
    for (index_t c = 0; c < channels; ++c) {
      const T* ip = x.plane(b, c);
      T* op = out.plane(b, c);
      std::copy(ip, ip + x.shape.h * x.shape.w, op);
    }
  return out;
}

// Equal channel-wise partition: first half -> Y, second half -> Z.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& x) {
  if (x.shape.c % 2 != 0)
    throw std::invalid_argument("split_channels: channel count " + std::to_string(x.shape.c) +
                                " is odd");
  const index_t half = x.shape.c / 2;
  Tensor<T> y(x.shape.n, half, x.shape.h, x.shape.w);
  Tensor<T> z(x.shape.n, half, x.shape.h, x.shape.w);
  const index_t plane_sz = x.shape.h * x.shape.w;
  for (index_t b = 0; b < x.shape.n; ++b)
    for (index_t c = 0; c < half; ++c) {
      std::copy(x.plane(b, c), x.plane(b, c) + plane_sz, y.plane(b, c));
      std::copy(x.plane(b, c + half), x.plane(b, c + half) + plane_sz, z.plane(b, c));
    }
  return {std::move(y), std::move(z)};
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& y, const Tensor<T>& z) {
  if (y.shape.n != z.shape.n || y.shape.h != z.shape.h || y.shape.w != z.shape.w)
    throw std::invalid_argument("concat_channels: batch/spatial mismatch " + y.shape.str() +
                                " vs " + z.shape.str());
  Tensor<T> out(y.shape.n, y.shape.c + z.shape.c, y.shape.h, y.shape.w);
  const index_t plane_sz = y.shape.h * y.shape.w;
  for (index_t b = 0; b < y.shape.n; ++b) {
    for (index_t c = 0; c < y.shape.c; ++c)
      std::copy(y.plane(b, c), y.plane(b, c) + plane_sz, out.plane(b, c));
    for (index_t c = 0; c < z.shape.c; ++c)
      std::copy(z.plane(b, c), z.plane(b, c) + plane_sz, out.plane(b, c + y.shape.c));
  }
  return out;
}

}  // namespace revode
