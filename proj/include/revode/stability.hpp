#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "revode/activation.hpp"
#include "revode/rng.hpp"

namespace revode {

using complexd = std::complex<double>;

// Square real matrix, row-major, float64.
struct DenseMatrix {
  int n = 0;
  std::vector<double> a;

  DenseMatrix() = default;
  explicit DenseMatrix(int size) : n(size), a(static_cast<std::size_t>(size) * size, 0.0) {
    if (size < 0) throw std::invalid_argument("dense matrix: negative size");
  }

  double& at(int i, int j) { return a[static_cast<std::size_t>(i) * n + j]; }
  double at(int i, int j) const { return a[static_cast<std::size_t>(i) * n + j]; }

  static DenseMatrix identity(int size) {
    DenseMatrix m(size);
    for (int i = 0; i < size; ++i) m.at(i, i) = 1.0;
    return m;
  }

  static DenseMatrix random_uniform(int size, Rng& rng, double lo = -1.0, double hi = 1.0) {
    DenseMatrix m(size);
    for (auto& v : m.a) v = rng.uniform(lo, hi);
    return m;
  }

  double frobenius_norm() const {
    double s = 0.0;
    for (double v : a) s += v * v;
    return std::sqrt(s);
  }
};

inline DenseMatrix dm_mul(const DenseMatrix& x, const DenseMatrix& y) {
  if (x.n != y.n) throw std::invalid_argument("dm_mul: size mismatch");
  DenseMatrix r(x.n);
  for (int i = 0; i < x.n; ++i)
    for (int k = 0; k < x.n; ++k) {
      const double v = x.at(i, k);
      if (v == 0.0) continue;
      for (int j = 0; j < x.n; ++j) r.at(i, j) += v * y.at(k, j);
    }
  return r;
}

inline DenseMatrix dm_transpose(const DenseMatrix& x) {
  DenseMatrix r(x.n);
  for (int i = 0; i < x.n; ++i)
    for (int j = 0; j < x.n; ++j) r.at(j, i) = x.at(i, j);
  return r;
}

inline std::vector<double> dm_apply(const DenseMatrix& m, const std::vector<double>& v) {
  if (static_cast<int>(v.size()) != m.n) throw std::invalid_argument("dm_apply: size mismatch");
  std::vector<double> r(v.size(), 0.0);
  for (int i = 0; i < m.n; ++i) {
    double s = 0.0;
    for (int j = 0; j < m.n; ++j) s += m.at(i, j) * v[j];
    r[static_cast<std::size_t>(i)] = s;
  }
  return r;
}

namespace detail {

// Parlett-Reinsch balancing (radix-2 diagonal similarity). Eigenvalues are
// unchanged; conditioning of the QR iteration improves.
inline void balance_inplace(DenseMatrix& m) {
  const double radix = 2.0, sq = radix * radix;
  bool done = false;
  while (!done) {
    done = true;
    for (int i = 0; i < m.n; ++i) {
      double r = 0.0, c = 0.0;
      for (int j = 0; j < m.n; ++j)
        if (j != i) {
          c += std::abs(m.at(j, i));
          r += std::abs(m.at(i, j));
        }
      if (c == 0.0 || r == 0.0) continue;
      double g = r / radix, f = 1.0;
      const double s = c + r;
      while (c < g) {
        f *= radix;
        c *= sq;
      }
      g = r * radix;
      while (c > g) {
        f /= radix;
        c /= sq;
      }
      if ((c + r) / f < 0.95 * s) {
        done = false;
        const double ginv = 1.0 / f;
        for (int j = 0; j < m.n; ++j) m.at(i, j) *= ginv;
        for (int j = 0; j < m.n; ++j) m.at(j, i) *= f;
      }
    }
  }
}

// Householder reduction to upper Hessenberg form (similarity transform).
// Subcolumns whose norm is at rounding level relative to the matrix are
// zeroed outright: normalizing such noise underflows and loses orthogonality.
inline void hessenberg_inplace(DenseMatrix& m) {
  const int n = m.n;
  double fro2 = 0.0;
  for (double x : m.a) fro2 += x * x;
  const double tiny2 = fro2 * 1e-60;  // (~1e-30 * ||A||_F)^2
  std::vector<double> v(static_cast<std::size_t>(n), 0.0);
  for (int k = 0; k + 2 < n; ++k) {
    double norm2 = 0.0;
    for (int i = k + 1; i < n; ++i) norm2 += m.at(i, k) * m.at(i, k);
    if (norm2 <= tiny2) {
      for (int i = k + 1; i < n; ++i) m.at(i, k) = 0.0;
      continue;
    }
    const double x0 = m.at(k + 1, k);
    double alpha = std::sqrt(norm2);
    if (x0 > 0) alpha = -alpha;
    double vnorm2 = norm2 - 2.0 * alpha * x0 + alpha * alpha;
    if (vnorm2 <= 0.0) continue;
    v[static_cast<std::size_t>(k + 1)] = x0 - alpha;
    for (int i = k + 2; i < n; ++i) v[static_cast<std::size_t>(i)] = m.at(i, k);
    const double beta = 2.0 / vnorm2;
    // A <- (I - beta v v^T) A
    for (int j = k; j < n; ++j) {
      double s = 0.0;
      for (int i = k + 1; i < n; ++i) s += v[static_cast<std::size_t>(i)] * m.at(i, j);
      s *= beta;
      for (int i = k + 1; i < n; ++i) m.at(i, j) -= s * v[static_cast<std::size_t>(i)];
    }
    // A <- A (I - beta v v^T)
    for (int i = 0; i < n; ++i) {
      double s = 0.0;
      for (int j = k + 1; j < n; ++j) s += m.at(i, j) * v[static_cast<std::size_t>(j)];
      s *= beta;
      for (int j = k + 1; j < n; ++j) m.at(i, j) -= s * v[static_cast<std::size_t>(j)];
    }
    for (int i = k + 2; i < n; ++i) m.at(i, k) = 0.0;
  }
}

inline double sign_of(double a, double b) { return b >= 0.0 ? std::abs(a) : -std::abs(a); }

// Francis double-shift QR on an upper Hessenberg matrix; returns all
// eigenvalues. Shifts come from the trailing 2x2 (the real-arithmetic form of
// the Wilkinson strategy), with ad-hoc exceptional shifts on stagnation.
inline std::vector<complexd> hessenberg_qr_eigenvalues(DenseMatrix& h, long max_total_steps) {
  const int n = h.n;
  std::vector<complexd> eig;
  eig.reserve(static_cast<std::size_t>(n));
  const double eps = std::numeric_limits<double>::epsilon();

  double anorm = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = std::max(0, i - 1); j < n; ++j) anorm += std::abs(h.at(i, j));
  if (anorm == 0.0) {
    for (int i = 0; i < n; ++i) eig.emplace_back(0.0, 0.0);
    return eig;
  }

  long total_steps = 0;
  int en = n - 1;
  double t_shift = 0.0;
  int its = 0;

  while (en >= 0) {
    // find the smallest l with a negligible subdiagonal h(l, l-1); when the
    // local diagonal scale degenerates (zero-diagonal structures such as
    // antisymmetric or companion matrices) fall back to the global norm,
    // which keeps the deflation backward stable
    int l = en;
    while (l > 0) {
      double s = std::abs(h.at(l - 1, l - 1)) + std::abs(h.at(l, l));
      if (s < 1e-12 * anorm) s = anorm;
      if (std::abs(h.at(l, l - 1)) <= eps * s) {
        h.at(l, l - 1) = 0.0;
        break;
      }
      --l;
    }

    double x = h.at(en, en);
    if (l == en) {
      eig.emplace_back(x + t_shift, 0.0);
      --en;
      its = 0;
      continue;
    }
    double y = h.at(en - 1, en - 1);
    double w = h.at(en, en - 1) * h.at(en - 1, en);
    if (l == en - 1) {
      double p = 0.5 * (y - x);
      double q = p * p + w;
      double z = std::sqrt(std::abs(q));
      x += t_shift;
      if (q >= 0.0) {
        z = p + sign_of(z, p);
        eig.emplace_back(x + z, 0.0);
        eig.emplace_back(z != 0.0 ? x - w / z : x + z, 0.0);
      } else {
        eig.emplace_back(x + p, z);
        eig.emplace_back(x + p, -z);
      }
      en -= 2;
      its = 0;
      continue;
    }

    if (++total_steps > max_total_steps)
      throw std::runtime_error("eigenvalues: QR iteration exceeded cap of " +
                               std::to_string(max_total_steps) + " steps at block size " +
                               std::to_string(en - l + 1) + " of " + std::to_string(n));
    if (its > 0 && its % 10 == 0) {
      // exceptional shift
      t_shift += x;
      for (int i = 0; i <= en; ++i) h.at(i, i) -= x;
      const double s = std::abs(h.at(en, en - 1)) + std::abs(h.at(en - 1, en - 2));
      x = 0.75 * s;
      y = x;
      w = -0.4375 * s * s;
    }
    if (its >= 50) {
      throw std::runtime_error("eigenvalues: no convergence in 50 iterations for block [" +
                               std::to_string(l) + "," + std::to_string(en) + "] of size " +
                               std::to_string(n));
    }
    ++its;

    // look for two consecutive small subdiagonals
    int m = en - 2;
    double p = 0.0, q = 0.0, r = 0.0;
    for (; m >= l; --m) {
      const double z = h.at(m, m);
      const double rr = x - z;
      const double ss = y - z;
      p = (rr * ss - w) / h.at(m + 1, m) + h.at(m, m + 1);
      q = h.at(m + 1, m + 1) - z - rr - ss;
      r = h.at(m + 2, m + 1);
      const double s = std::abs(p) + std::abs(q) + std::abs(r);
      p /= s;
      q /= s;
      r /= s;
      if (m == l) break;
      const double u = std::abs(h.at(m, m - 1)) * (std::abs(q) + std::abs(r));
      const double v = std::abs(p) * (std::abs(h.at(m - 1, m - 1)) + std::abs(z) +
                                      std::abs(h.at(m + 1, m + 1)));
      if (u <= eps * v) break;
    }
    for (int i = m + 2; i <= en; ++i) h.at(i, i - 2) = 0.0;
    for (int i = m + 3; i <= en; ++i) h.at(i, i - 3) = 0.0;

    // double QR sweep (bulge chase) over rows l..en
    for (int k = m; k <= en - 1; ++k) {
      const bool notlast = (k != en - 1);
      if (k != m) {
        p = h.at(k, k - 1);
        q = h.at(k + 1, k - 1);
        r = notlast ? h.at(k + 2, k - 1) : 0.0;
        x = std::abs(p) + std::abs(q) + std::abs(r);
        if (x == 0.0) continue;
        p /= x;
        q /= x;
        r /= x;
      }
      double s = sign_of(std::sqrt(p * p + q * q + r * r), p);
      if (s == 0.0) continue;
      if (k == m) {
        if (l != m) h.at(k, k - 1) = -h.at(k, k - 1);
      } else {
        h.at(k, k - 1) = -s * x;
      }
      p += s;
      x = p / s;
      y = q / s;
      double z = r / s;
      q /= p;
      r /= p;
      // row modification
      for (int j = k; j <= en; ++j) {
        double pp = h.at(k, j) + q * h.at(k + 1, j);
        if (notlast) {
          pp += r * h.at(k + 2, j);
          h.at(k + 2, j) -= pp * z;
        }
        h.at(k + 1, j) -= pp * y;
        h.at(k, j) -= pp * x;
      }
      // column modification
      const int imax = std::min(en, k + 3);
      for (int i = l; i <= imax; ++i) {
        double pp = x * h.at(i, k) + y * h.at(i, k + 1);
        if (notlast) {
          pp += z * h.at(i, k + 2);
          h.at(i, k + 2) -= pp * r;
        }
        h.at(i, k + 1) -= pp * q;
        h.at(i, k) -= pp;
      }
    }
  }
  return eig;
}

}  // namespace detail

// All eigenvalues of a real square matrix via balancing, Householder
// Hessenberg reduction and shifted QR iteration. Throws with diagnostics if
// the iteration fails to converge.
inline std::vector<complexd> eigenvalues(const DenseMatrix& m) {
  if (m.n > 512) throw std::invalid_argument("eigenvalues: size > 512 not supported");
  if (m.n == 0) return {};
  for (double v : m.a)
    if (!std::isfinite(v)) throw std::invalid_argument("eigenvalues: non-finite matrix entry");
  DenseMatrix work = m;
  detail::balance_inplace(work);
  detail::hessenberg_inplace(work);
  const long cap = 100L * m.n * m.n + 1000;
  auto eig = detail::hessenberg_qr_eigenvalues(work, cap);
  std::sort(eig.begin(), eig.end(), [](const complexd& a, const complexd& b) {
    if (a.real() != b.real()) return a.real() < b.real();
    return a.imag() < b.imag();
  });
  return eig;
}

inline double max_real_part(const std::vector<complexd>& eig) {
  double m = -std::numeric_limits<double>::infinity();
  for (const auto& e : eig) m = std::max(m, e.real());
  return m;
}

inline double max_abs_real_part(const std::vector<complexd>& eig) {
  double m = 0.0;
  for (const auto& e : eig) m = std::max(m, std::abs(e.real()));
  return m;
}

// ---------------------------------------------------------------------------
// Jacobians of the block ODE right-hand sides, with dense matrices standing
// in for the convolution operators.
// ---------------------------------------------------------------------------

// RHS of the two-layer Hamiltonian system at state (y, z):
//   [ K1^T sigma(K1 z) ; -K2^T sigma(K2 y) ]
inline std::vector<double> hamiltonian_rhs(const DenseMatrix& k1, const DenseMatrix& k2,
                                           const std::vector<double>& point, Activation act) {
  const int m = k1.n;
  if (k2.n != m || static_cast<int>(point.size()) != 2 * m)
    throw std::invalid_argument("hamiltonian_rhs: dimension mismatch");
  std::vector<double> y(point.begin(), point.begin() + m);
  std::vector<double> z(point.begin() + m, point.end());
  std::vector<double> out(static_cast<std::size_t>(2 * m), 0.0);
  std::vector<double> s1 = dm_apply(k1, z);
  for (auto& v : s1) v = act_value(act, v);
  std::vector<double> s2 = dm_apply(k2, y);
  for (auto& v : s2) v = act_value(act, v);
  for (int i = 0; i < m; ++i) {
    double a = 0.0, b = 0.0;
    for (int j = 0; j < m; ++j) {
      a += k1.at(j, i) * s1[static_cast<std::size_t>(j)];
      b += k2.at(j, i) * s2[static_cast<std::size_t>(j)];
    }
    out[static_cast<std::size_t>(i)] = a;
    out[static_cast<std::size_t>(m + i)] = -b;
  }
  return out;
}

// J = blockdiag(K1^T, -K2^T) diag(sigma') [[0, K1], [K2, 0]] evaluated at the
// pre-activations [K1 z ; K2 y].
inline DenseMatrix assemble_hamiltonian_jacobian(const DenseMatrix& k1, const DenseMatrix& k2,
                                                 const std::vector<double>& point,
                                                 Activation act) {
  const int m = k1.n;
  if (k2.n != m)
    throw std::invalid_argument("assemble_hamiltonian_jacobian: K1 size " + std::to_string(m) +
                                " != K2 size " + std::to_string(k2.n));
  if (static_cast<int>(point.size()) != 2 * m)
    throw std::invalid_argument("assemble_hamiltonian_jacobian: point length " +
                                std::to_string(point.size()) + " != 2m = " +
                                std::to_string(2 * m));
  std::vector<double> y(point.begin(), point.begin() + m);
  std::vector<double> z(point.begin() + m, point.end());
  std::vector<double> d1 = dm_apply(k1, z);
  for (auto& v : d1) v = act_deriv(act, v);
  std::vector<double> d2 = dm_apply(k2, y);
  for (auto& v : d2) v = act_deriv(act, v);

  // top-right block K1^T D1 K1, bottom-left block -K2^T D2 K2
  DenseMatrix j(2 * m);
  for (int i = 0; i < m; ++i)
    for (int jj = 0; jj < m; ++jj) {
      double a = 0.0, b = 0.0;
      for (int k = 0; k < m; ++k) {
        a += k1.at(k, i) * d1[static_cast<std::size_t>(k)] * k1.at(k, jj);
        b += k2.at(k, i) * d2[static_cast<std::size_t>(k)] * k2.at(k, jj);
      }
      j.at(i, m + jj) = a;
      j.at(m + i, jj) = -b;
    }
  return j;
}

// RHS of the midpoint system: sigma((K - K^T) y).
inline std::vector<double> midpoint_rhs(const DenseMatrix& k, const std::vector<double>& point,
                                        Activation act) {
  const int n = k.n;
  if (static_cast<int>(point.size()) != n)
    throw std::invalid_argument("midpoint_rhs: dimension mismatch");
  std::vector<double> out(point.size(), 0.0);
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += (k.at(i, j) - k.at(j, i)) * point[static_cast<std::size_t>(j)];
    out[static_cast<std::size_t>(i)] = act_value(act, s);
  }
  return out;
}

// J = diag(sigma') (K - K^T) at the given point.
inline DenseMatrix assemble_midpoint_jacobian(const DenseMatrix& k,
                                              const std::vector<double>& point, Activation act) {
  const int n = k.n;
  if (static_cast<int>(point.size()) != n)
    throw std::invalid_argument("assemble_midpoint_jacobian: point length " +
                                std::to_string(point.size()) + " != matrix size " +
                                std::to_string(n));
  std::vector<double> pre(point.size(), 0.0);
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += (k.at(i, j) - k.at(j, i)) * point[static_cast<std::size_t>(j)];
    pre[static_cast<std::size_t>(i)] = s;
  }
  DenseMatrix j(n);
  for (int i = 0; i < n; ++i) {
    const double d = act_deriv(act, pre[static_cast<std::size_t>(i)]);
    for (int jj = 0; jj < n; ++jj) j.at(i, jj) = d * (k.at(i, jj) - k.at(jj, i));
  }
  return j;
}

// ---------------------------------------------------------------------------
// Spectra through the antisymmetric similar form.
//
// The assembled Jacobian is a product A diag(d) B with d = sigma' >= 0.
// Writing S = diag(sqrt(d)), the products (A S)(S B) and (S B)(A S) share all
// nonzero eigenvalues, and S (B A) S is exactly antisymmetric for these
// blocks. QR on the antisymmetric form keeps computed real parts at rounding
// level, whereas the raw product can carry a defective zero cluster whose
// computed eigenvalues scatter like sqrt(eps).
// ---------------------------------------------------------------------------

inline std::vector<complexd> hamiltonian_jacobian_spectrum(const DenseMatrix& k1,
                                                           const DenseMatrix& k2,
                                                           const std::vector<double>& point,
                                                           Activation act) {
  const int m = k1.n;
  if (k2.n != m || static_cast<int>(point.size()) != 2 * m)
    throw std::invalid_argument("hamiltonian_jacobian_spectrum: dimension mismatch");
  std::vector<double> y(point.begin(), point.begin() + m);
  std::vector<double> z(point.begin() + m, point.end());
  std::vector<double> s1 = dm_apply(k1, z);
  for (auto& v : s1) v = std::sqrt(act_deriv(act, v));
  std::vector<double> s2 = dm_apply(k2, y);
  for (auto& v : s2) v = std::sqrt(act_deriv(act, v));

  // Q = S2 (K2 K1^T) S1; the similar form is [[0, -Q^T], [Q, 0]].
  DenseMatrix q(m);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) {
      double s = 0.0;
      for (int k = 0; k < m; ++k) s += k2.at(i, k) * k1.at(j, k);
      q.at(i, j) = s2[static_cast<std::size_t>(i)] * s * s1[static_cast<std::size_t>(j)];
    }
  DenseMatrix sms(2 * m);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) {
      sms.at(m + i, j) = q.at(i, j);
      sms.at(j, m + i) = -q.at(i, j);
    }
  return eigenvalues(sms);
}

inline std::vector<complexd> midpoint_jacobian_spectrum(const DenseMatrix& k,
                                                        const std::vector<double>& point,
                                                        Activation act) {
  const int n = k.n;
  if (static_cast<int>(point.size()) != n)
    throw std::invalid_argument("midpoint_jacobian_spectrum: dimension mismatch");
  std::vector<double> pre(point.size(), 0.0);
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += (k.at(i, j) - k.at(j, i)) * point[static_cast<std::size_t>(j)];
    pre[static_cast<std::size_t>(i)] = s;
  }
  std::vector<double> sd(pre.size());
  for (std::size_t i = 0; i < pre.size(); ++i) sd[i] = std::sqrt(act_deriv(act, pre[i]));
  DenseMatrix sas(n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double w = k.at(i, j) - k.at(j, i);
      const double v = sd[static_cast<std::size_t>(i)] * w * sd[static_cast<std::size_t>(j)];
      sas.at(i, j) = v;
      sas.at(j, i) = -v;
    }
  return eigenvalues(sas);
}

enum class JacobianKind { hamiltonian, midpoint };

// Samples random weights and evaluation points, assembles the block
// Jacobians, and returns the worst |Re lambda| observed across all trials.
inline double verify_imaginary_spectrum(int trials, int size, Activation act, std::uint64_t seed,
                                        JacobianKind kind = JacobianKind::hamiltonian) {
  if (size < 1 || size > 128)
    throw std::invalid_argument("verify_imaginary_spectrum: size must be in [1,128], got " +
                                std::to_string(size));
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    Rng rng = Rng::stream(seed, static_cast<std::uint64_t>(t));
    if (kind == JacobianKind::hamiltonian) {
      DenseMatrix k1 = DenseMatrix::random_uniform(size, rng);
      DenseMatrix k2 = DenseMatrix::random_uniform(size, rng);
      std::vector<double> point(static_cast<std::size_t>(2 * size));
      for (auto& v : point) v = rng.uniform(-1.0, 1.0);
      worst = std::max(worst, max_abs_real_part(hamiltonian_jacobian_spectrum(k1, k2, point, act)));
    } else {
      DenseMatrix k = DenseMatrix::random_uniform(size, rng);
      std::vector<double> point(static_cast<std::size_t>(size));
      for (auto& v : point) v = rng.uniform(-1.0, 1.0);
      worst = std::max(worst, max_abs_real_part(midpoint_jacobian_spectrum(k, point, act)));
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Lyapunov exponent estimation (Benettin-style renormalization).
// ---------------------------------------------------------------------------

struct LyapunovOptions {
  // Perturbation is rescaled each step to renorm_norm times the trajectory
  // amplitude (floored at 1), so growing orbits never absorb it into
  // rounding and shrinking orbits keep an absolute floor.
  double renorm_norm = 1e-6;
};

// Propagates y and y + delta through `step`, renormalizing delta each step;
// returns the average of log(growth)/h. Forward propagation is well-posed
// when the result is <= 0.
inline double lyapunov_estimate(const std::function<std::vector<double>(const std::vector<double>&)>& step,
                                std::vector<double> y, std::vector<double> delta, long steps,
                                double h, LyapunovOptions opts = {}) {
  if (steps <= 0) throw std::invalid_argument("lyapunov_estimate: steps must be positive");
  if (h <= 0) throw std::invalid_argument("lyapunov_estimate: h must be positive");
  auto vnorm = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  };
  const double dn0 = vnorm(delta);
  if (dn0 == 0.0) throw std::invalid_argument("lyapunov_estimate: perturbation must be nonzero");
  double ref = opts.renorm_norm * std::max(1.0, vnorm(y));
  for (auto& v : delta) v *= ref / dn0;

  double log_sum = 0.0;
  for (long k = 0; k < steps; ++k) {
    std::vector<double> yp(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) yp[i] = y[i] + delta[i];
    std::vector<double> y1 = step(y);
    std::vector<double> yp1 = step(yp);
    double n1 = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      delta[i] = yp1[i] - y1[i];
      n1 += delta[i] * delta[i];
    }
    n1 = std::sqrt(n1);
    y = std::move(y1);
    for (double v : y)
      if (!std::isfinite(v) || std::abs(v) > 1e150)
        throw std::runtime_error("lyapunov_estimate: trajectory diverged at step " +
                                 std::to_string(k));
    if (n1 == 0.0)
      throw std::runtime_error("lyapunov_estimate: perturbation collapsed to zero at step " +
                               std::to_string(k));
    log_sum += std::log(n1 / ref);
    ref = opts.renorm_norm * std::max(1.0, vnorm(y));
    for (auto& v : delta) v *= ref / n1;
  }
  return log_sum / (static_cast<double>(steps) * h);
}

// One Verlet step of the dense two-layer Hamiltonian system; the Z update
// sees the already-updated Y.
inline std::vector<double> hamiltonian_verlet_step(const DenseMatrix& k1, const DenseMatrix& k2,
                                                   const std::vector<double>& point,
                                                   Activation act, double h) {
  const int m = k1.n;
  if (k2.n != m || static_cast<int>(point.size()) != 2 * m)
    throw std::invalid_argument("hamiltonian_verlet_step: dimension mismatch");
  std::vector<double> y(point.begin(), point.begin() + m);
  std::vector<double> z(point.begin() + m, point.end());
  std::vector<double> s1 = dm_apply(k1, z);
  for (auto& v : s1) v = act_value(act, v);
  for (int i = 0; i < m; ++i) {
    double a = 0.0;
    for (int j = 0; j < m; ++j) a += k1.at(j, i) * s1[static_cast<std::size_t>(j)];
    y[static_cast<std::size_t>(i)] += h * a;
  }
  std::vector<double> s2 = dm_apply(k2, y);
  for (auto& v : s2) v = act_value(act, v);
  for (int i = 0; i < m; ++i) {
    double a = 0.0;
    for (int j = 0; j < m; ++j) a += k2.at(j, i) * s2[static_cast<std::size_t>(j)];
    z[static_cast<std::size_t>(i)] -= h * a;
  }
  std::vector<double> out(static_cast<std::size_t>(2 * m));
  std::copy(y.begin(), y.end(), out.begin());
  std::copy(z.begin(), z.end(), out.begin() + m);
  return out;
}

// ---------------------------------------------------------------------------
// Characteristic roots of the linear coupled recurrence
//   Y_{j+1} = Y_j + beta Z_j,  Z_{j+1} = Z_j + alpha Y_{j+1},
// i.e. roots of xi^2 - (2 + alpha beta) xi + 1 = 0.
// ---------------------------------------------------------------------------

struct CharacteristicRoots {
  complexd xi1, xi2;
  double a = 0.0;  // (2 + alpha*beta)/2
  bool stable = false;

  double max_abs() const { return std::max(std::abs(xi1), std::abs(xi2)); }
};

inline CharacteristicRoots characteristic_roots(double alpha, double beta) {
  CharacteristicRoots r;
  r.a = 1.0 + 0.5 * alpha * beta;
  const double disc = r.a * r.a - 1.0;
  if (disc <= 0.0) {
    const double im = std::sqrt(-disc);
    r.xi1 = complexd(r.a, im);
    r.xi2 = complexd(r.a, -im);
  } else {
    const double s = std::sqrt(disc);
    r.xi1 = complexd(r.a + s, 0.0);
    r.xi2 = complexd(r.a - s, 0.0);
  }
  r.stable = r.max_abs() <= 1.0 + 1e-12;
  return r;
}

struct Rollout {
  std::vector<double> norms;  // ||(Y_j, Z_j)|| for j = 0..layers
  bool overflowed = false;
};

inline Rollout linear_revnet_rollout(double alpha, double beta, double y0, double z0,
                                     int layers) {
  if (layers < 1) throw std::invalid_argument("linear_revnet_rollout: layers must be >= 1");
  Rollout r;
  r.norms.reserve(static_cast<std::size_t>(layers) + 1);
  double y = y0, z = z0;
  r.norms.push_back(std::hypot(y, z));
  for (int j = 0; j < layers; ++j) {
    y = y + beta * z;
    z = z + alpha * y;
    const double nn = std::hypot(y, z);
    if (!std::isfinite(nn) || nn > 1e280) {
      r.overflowed = true;
      break;
    }
    r.norms.push_back(nn);
  }
  return r;
}

// Least-squares slope of log(norms) over the second half of a rollout;
// compares against log(max |xi|).
inline double rollout_log_growth_rate(const Rollout& r) {
  const std::size_t n = r.norms.size();
  if (n < 4) throw std::invalid_argument("rollout_log_growth_rate: trajectory too short");
  const std::size_t lo = n / 2;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  std::size_t cnt = 0;
  for (std::size_t j = lo; j < n; ++j) {
    if (r.norms[j] <= 0.0) continue;
    const double x = static_cast<double>(j);
    const double y = std::log(r.norms[j]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    ++cnt;
  }
  if (cnt < 2) throw std::runtime_error("rollout_log_growth_rate: degenerate trajectory");
  const double denom = static_cast<double>(cnt) * sxx - sx * sx;
  return (static_cast<double>(cnt) * sxy - sx * sy) / denom;
}

// ---------------------------------------------------------------------------
// Aggregate report
// ---------------------------------------------------------------------------

struct StabilityReport {
  std::vector<complexd> eigs;
  double max_real = 0.0;
  double lyapunov = 0.0;
  CharacteristicRoots roots;
  bool spectrum_stable = false;

  static StabilityReport from_spectrum(std::vector<complexd> eigenvals, double tol = 1e-9) {
    StabilityReport r;
    r.eigs = std::move(eigenvals);
    r.max_real = r.eigs.empty() ? 0.0 : max_real_part(r.eigs);
    r.spectrum_stable = r.max_real <= tol;
    return r;
  }
};

}  // namespace revode
