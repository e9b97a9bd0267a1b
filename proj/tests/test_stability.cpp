#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <complex>

#include "revode/stability.hpp"
#include "support/oracles.hpp"

using namespace revode;

namespace {

std::vector<complexd> sorted_eigs(std::vector<complexd> v) {
  std::sort(v.begin(), v.end(), [](const complexd& a, const complexd& b) {
    if (a.real() != b.real()) return a.real() < b.real();
    return a.imag() < b.imag();
  });
  return v;
}

}  // namespace

TEST_CASE("eigenvalues of a diagonal matrix") {
  DenseMatrix m(3);
  m.at(0, 0) = 1.0;
  m.at(1, 1) = 2.0;
  m.at(2, 2) = 3.0;
  auto eig = eigenvalues(m);
  REQUIRE(eig.size() == 3);
  CHECK(eig[0].real() == doctest::Approx(1.0));
  CHECK(eig[1].real() == doctest::Approx(2.0));
  CHECK(eig[2].real() == doctest::Approx(3.0));
  for (auto& e : eig) CHECK(std::abs(e.imag()) < 1e-14);
}

TEST_CASE("eigenvalues of the planar rotation generator are +-i") {
  DenseMatrix m(2);
  m.at(0, 1) = 1.0;
  m.at(1, 0) = -1.0;
  auto eig = sorted_eigs(eigenvalues(m));
  REQUIRE(eig.size() == 2);
  CHECK(std::abs(eig[0] - complexd(0.0, -1.0)) < 1e-14);
  CHECK(std::abs(eig[1] - complexd(0.0, 1.0)) < 1e-14);
}

TEST_CASE("eigenvalues of companion matrices match analytic roots") {
  // (x-1)(x-2)(x-3) = x^3 - 6x^2 + 11x - 6
  {
    auto eig = eigenvalues(oracle::companion_matrix({-6.0, 11.0, -6.0}));
    REQUIRE(eig.size() == 3);
    CHECK(std::abs(eig[0] - complexd(1.0, 0.0)) < 1e-8);
    CHECK(std::abs(eig[1] - complexd(2.0, 0.0)) < 1e-8);
    CHECK(std::abs(eig[2] - complexd(3.0, 0.0)) < 1e-8);
  }
  // (x^2 - x + 1)(x - 2) = x^3 - 3x^2 + 3x - 2, roots e^{+-i pi/3}, 2
  {
    auto eig = sorted_eigs(eigenvalues(oracle::companion_matrix({-2.0, 3.0, -3.0})));
    REQUIRE(eig.size() == 3);
    CHECK(std::abs(eig[0] - complexd(0.5, -std::sqrt(3.0) / 2.0)) < 1e-8);
    CHECK(std::abs(eig[1] - complexd(0.5, std::sqrt(3.0) / 2.0)) < 1e-8);
    CHECK(std::abs(eig[2] - complexd(2.0, 0.0)) < 1e-8);
  }
  // higher degree with clustered magnitudes: roots {1, -1, 0.5, -0.5, 2}
  {
    // (x^2-1)(x^2-0.25)(x-2) = x^5 -2x^4 -1.25x^3 +2.5x^2 +0.25x -0.5
    auto eig = sorted_eigs(eigenvalues(oracle::companion_matrix({-0.5, 0.25, 2.5, -1.25, -2.0})));
    REQUIRE(eig.size() == 5);
    const double want[] = {-1.0, -0.5, 0.5, 1.0, 2.0};
    for (int i = 0; i < 5; ++i) {
      CHECK(std::abs(eig[static_cast<std::size_t>(i)].real() - want[i]) < 1e-8);
      CHECK(std::abs(eig[static_cast<std::size_t>(i)].imag()) < 1e-8);
    }
  }
}

TEST_CASE("random symmetric matrix agrees with the Jacobi-rotation oracle") {
  Rng rng(4242);
  DenseMatrix b = DenseMatrix::random_uniform(16, rng);
  DenseMatrix a(16);
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j) a.at(i, j) = 0.5 * (b.at(i, j) + b.at(j, i));
  auto eig = eigenvalues(a);
  std::vector<double> got;
  for (auto& e : eig) {
    CHECK(std::abs(e.imag()) < 1e-10);
    got.push_back(e.real());
  }
  std::sort(got.begin(), got.end());
  auto want = oracle::jacobi_eigenvalues_symmetric(a);
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) <= 1e-9);
}

TEST_CASE("eigenpair residuals from inverse iteration") {
  Rng rng(515);
  DenseMatrix a = DenseMatrix::random_uniform(12, rng);
  auto eig = eigenvalues(a);
  for (const auto& lambda : eig) {
    CHECK(oracle::eigen_residual(a, lambda) <= 1e-8);
  }
}

TEST_CASE("eigenvalues input validation") {
  CHECK_THROWS_AS(eigenvalues(DenseMatrix(600)), std::invalid_argument);
  DenseMatrix bad(2);
  bad.at(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(eigenvalues(bad), std::invalid_argument);
}

TEST_CASE("hamiltonian jacobian: zero kernels and the 2x2 hand case") {
  DenseMatrix z(2);
  auto j0 = assemble_hamiltonian_jacobian(z, z, {0.1, 0.2, 0.3, 0.4}, Activation::relu);
  for (double v : j0.a) CHECK(v == 0.0);

  DenseMatrix one(1);
  one.at(0, 0) = 1.0;
  auto j = assemble_hamiltonian_jacobian(one, one, {1.0, 1.0}, Activation::identity);
  CHECK(j.at(0, 0) == 0.0);
  CHECK(j.at(0, 1) == 1.0);
  CHECK(j.at(1, 0) == -1.0);
  CHECK(j.at(1, 1) == 0.0);
  auto eig = sorted_eigs(eigenvalues(j));
  CHECK(std::abs(eig[0] - complexd(0.0, -1.0)) < 1e-14);
  CHECK(std::abs(eig[1] - complexd(0.0, 1.0)) < 1e-14);
}

TEST_CASE("hamiltonian jacobian equals finite differences of the rhs") {
  Rng rng(808);
  const int m = 8;
  DenseMatrix k1 = DenseMatrix::random_uniform(m, rng);
  DenseMatrix k2 = DenseMatrix::random_uniform(m, rng);
  std::vector<double> point(2 * m);
  for (auto& v : point) v = rng.uniform(-1.0, 1.0);

  for (auto act : {Activation::relu, Activation::tanh}) {
    if (act == Activation::relu) {
      // keep finite differences away from the relu kink
      auto pre1 = dm_apply(k1, {point.begin() + m, point.end()});
      auto pre2 = dm_apply(k2, {point.begin(), point.begin() + m});
      double closest = 1e9;
      for (double v : pre1) closest = std::min(closest, std::abs(v));
      for (double v : pre2) closest = std::min(closest, std::abs(v));
      REQUIRE(closest > 1e-3);
    }
    auto jac = assemble_hamiltonian_jacobian(k1, k2, point, act);
    auto fd = oracle::fd_jacobian(
        [&](const std::vector<double>& x) { return hamiltonian_rhs(k1, k2, x, act); }, point,
        1e-6);
    double worst = 0.0;
    for (int i = 0; i < 2 * m; ++i)
      for (int j = 0; j < 2 * m; ++j)
        worst = std::max(worst, std::abs(jac.at(i, j) -
                                         fd[static_cast<std::size_t>(i * 2 * m + j)]));
    CHECK(worst <= 1e-6);
  }
}

TEST_CASE("midpoint jacobian: symmetric kernel annihilates; hand 2x2; fd check") {
  Rng rng(909);
  DenseMatrix s(4);
  for (int i = 0; i < 4; ++i)
    for (int j = i; j < 4; ++j) {
      const double v = rng.uniform(-1.0, 1.0);
      s.at(i, j) = v;
      s.at(j, i) = v;
    }
  auto j0 = assemble_midpoint_jacobian(s, {0.1, -0.2, 0.3, 0.4}, Activation::tanh);
  for (double v : j0.a) CHECK(v == 0.0);

  DenseMatrix k(2);
  k.at(0, 1) = 1.0;
  auto j = assemble_midpoint_jacobian(k, {0.3, 0.4}, Activation::identity);
  CHECK(j.at(0, 0) == 0.0);
  CHECK(j.at(0, 1) == 1.0);
  CHECK(j.at(1, 0) == -1.0);
  CHECK(j.at(1, 1) == 0.0);

  DenseMatrix kr = DenseMatrix::random_uniform(8, rng);
  std::vector<double> point(8);
  for (auto& v : point) v = rng.uniform(-1.0, 1.0);
  auto jac = assemble_midpoint_jacobian(kr, point, Activation::tanh);
  auto fd = oracle::fd_jacobian(
      [&](const std::vector<double>& x) { return midpoint_rhs(kr, x, Activation::tanh); }, point,
      1e-6);
  double worst = 0.0;
  for (int i = 0; i < 8; ++i)
    for (int j2 = 0; j2 < 8; ++j2)
      worst = std::max(worst, std::abs(jac.at(i, j2) - fd[static_cast<std::size_t>(i * 8 + j2)]));
  CHECK(worst <= 1e-6);
}

TEST_CASE("antisymmetric-form spectrum agrees with the raw jacobian spectrum (tanh)") {
  Rng rng(333);
  const int m = 4;
  DenseMatrix k1 = DenseMatrix::random_uniform(m, rng);
  DenseMatrix k2 = DenseMatrix::random_uniform(m, rng);
  std::vector<double> point(2 * m);
  for (auto& v : point) v = rng.uniform(-1.0, 1.0);

  auto direct = eigenvalues(assemble_hamiltonian_jacobian(k1, k2, point, Activation::tanh));
  auto form = hamiltonian_jacobian_spectrum(k1, k2, point, Activation::tanh);
  REQUIRE(direct.size() == form.size());
  // real parts are rounding noise; pair the spectra by imaginary part
  auto by_imag = [](const complexd& a, const complexd& b) { return a.imag() < b.imag(); };
  std::sort(direct.begin(), direct.end(), by_imag);
  std::sort(form.begin(), form.end(), by_imag);
  for (std::size_t i = 0; i < direct.size(); ++i) {
    CHECK(std::abs(direct[i].imag() - form[i].imag()) < 1e-7);
    CHECK(std::abs(direct[i].real()) < 1e-7);
  }
}

TEST_CASE("imaginary spectrum verification") {
  // spec-sized run: 100 trials at size 32
  CHECK(verify_imaginary_spectrum(100, 32, Activation::relu, 7) <= 1e-9);
  CHECK(verify_imaginary_spectrum(25, 16, Activation::tanh, 8) <= 1e-9);
  CHECK(verify_imaginary_spectrum(25, 16, Activation::relu, 9, JacobianKind::midpoint) <= 1e-9);
  CHECK(verify_imaginary_spectrum(25, 16, Activation::tanh, 10, JacobianKind::midpoint) <= 1e-9);

  // size 1: the 2x2 hand case has purely imaginary pair
  CHECK(verify_imaginary_spectrum(10, 1, Activation::tanh, 11) <= 1e-12);

  // zero-weight trial: all eigenvalues exactly zero
  DenseMatrix z(6);
  auto eig = hamiltonian_jacobian_spectrum(z, z, std::vector<double>(12, 0.5), Activation::relu);
  for (auto& e : eig) CHECK(std::abs(e) == 0.0);

  CHECK_THROWS_AS(verify_imaginary_spectrum(1, 500, Activation::relu, 1), std::invalid_argument);
}

TEST_CASE("lyapunov estimator: identity, linear flows, divergence error") {
  auto identity_step = [](const std::vector<double>& y) { return y; };
  CHECK(std::abs(lyapunov_estimate(identity_step, {1.0, 2.0}, {1e-3, 0.0}, 1000, 0.01)) <= 1e-6);

  for (double c : {-1.0, -0.5, 0.5}) {
    const double h = 0.01;
    auto step = [c, h](const std::vector<double>& y) {
      std::vector<double> r(y.size());
      for (std::size_t i = 0; i < y.size(); ++i) r[i] = y[i] + h * c * y[i];
      return r;
    };
    const double lam = lyapunov_estimate(step, {1.0}, {1.0}, 10000, h);
    CHECK(std::abs(lam - c) <= 0.05 * std::abs(c));
  }

  auto exploding = [](const std::vector<double>& y) {
    std::vector<double> r(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) r[i] = 11.0 * y[i];
    return r;
  };
  CHECK_THROWS_AS(lyapunov_estimate(exploding, {1.0}, {1.0}, 1000, 1.0), std::runtime_error);
  CHECK_THROWS_AS(lyapunov_estimate(identity_step, {1.0}, {0.0}, 10, 0.1), std::invalid_argument);
}

TEST_CASE("characteristic roots: hand cases") {
  {
    auto r = characteristic_roots(0.0, 0.7);
    CHECK(r.xi1 == complexd(1.0, 0.0));
    CHECK(r.xi2 == complexd(1.0, 0.0));
    CHECK(r.stable);
  }
  {
    auto r = characteristic_roots(0.2, -0.2);
    CHECK(r.a == doctest::Approx(0.98));
    CHECK(r.xi1.real() == doctest::Approx(0.98));
    CHECK(std::abs(r.xi1.imag()) == doctest::Approx(0.19899748742132398).epsilon(1e-12));
    CHECK(std::abs(r.xi1) == doctest::Approx(1.0).epsilon(1e-13));
    CHECK(r.stable);
  }
  {
    auto r = characteristic_roots(1.0, 1.0);
    CHECK(r.a == doctest::Approx(1.5));
    CHECK(std::max(r.xi1.real(), r.xi2.real()) == doctest::Approx(2.618033988749895).epsilon(1e-12));
    CHECK(std::min(r.xi1.real(), r.xi2.real()) == doctest::Approx(0.3819660112501051).epsilon(1e-12));
    CHECK_FALSE(r.stable);
  }
}

TEST_CASE("characteristic roots: product and unit-modulus dichotomy on a grid") {
  for (int i = 0; i <= 40; ++i)
    for (int j = 0; j <= 40; ++j) {
      const double alpha = -2.0 + 4.0 * i / 40.0;
      const double beta = -2.0 + 4.0 * j / 40.0;
      auto r = characteristic_roots(alpha, beta);
      CHECK(std::abs(r.xi1 * r.xi2 - complexd(1.0, 0.0)) <= 1e-14);
      if (r.a * r.a <= 1.0) {
        CHECK(std::abs(std::abs(r.xi1) - 1.0) <= 1e-12);
        CHECK(std::abs(std::abs(r.xi2) - 1.0) <= 1e-12);
      } else {
        CHECK(r.max_abs() > 1.0);
      }
    }
}

TEST_CASE("linear revnet rollout") {
  {
    auto r = linear_revnet_rollout(0.0, 0.0, 1.0, 1.0, 50);
    for (double n : r.norms) CHECK(n == doctest::Approx(std::sqrt(2.0)));
  }
  {
    auto r = linear_revnet_rollout(0.5, 0.5, 1.0, 1.0, 200);
    REQUIRE_FALSE(r.norms.empty());
    CHECK(r.norms.back() / r.norms.front() >= 10.0);
  }
  {
    auto r = linear_revnet_rollout(0.5, -0.5, 1.0, 1.0, 200);
    REQUIRE(r.norms.size() == 201);
    double worst = 0.0;
    for (double n : r.norms) worst = std::max(worst, n / r.norms.front());
    CHECK(worst <= 3.0);
    CHECK_FALSE(r.overflowed);
  }
  CHECK_THROWS_AS(linear_revnet_rollout(0.1, 0.1, 1.0, 1.0, 0), std::invalid_argument);
}

TEST_CASE("rollout growth rate matches log max|xi| within 10% for 50 random pairs") {
  Rng rng(2024);
  int tested = 0;
  while (tested < 50) {
    const double alpha = rng.uniform(-2.0, 2.0);
    const double beta = rng.uniform(-2.0, 2.0);
    auto roots = characteristic_roots(alpha, beta);
    // growth-rate comparison is only well-posed away from the neutral circle
    if (roots.a * roots.a <= 1.1025) continue;  // |a| <= 1.05
    auto ro = linear_revnet_rollout(alpha, beta, 1.0, 1.0, 200);
    if (ro.norms.size() < 40) continue;  // overflowed too early to fit
    const double slope = rollout_log_growth_rate(ro);
    const double want = std::log(roots.max_abs());
    CHECK(std::abs(slope - want) <= 0.10 * want);
    ++tested;
  }
}

TEST_CASE("stability report aggregates spectrum verdict") {
  auto rep = StabilityReport::from_spectrum({complexd(0.0, 1.0), complexd(-1e-12, -1.0)});
  CHECK(rep.max_real == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(rep.spectrum_stable);
  auto bad = StabilityReport::from_spectrum({complexd(0.1, 0.0)});
  CHECK_FALSE(bad.spectrum_stable);
}
