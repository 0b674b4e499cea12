#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "qkscope/linalg.hpp"
#include "test_util.hpp"

using namespace qkscope;
using qkscope::testing::error_kind_of;

namespace {

MatrixD reconstruct(const linalg::SvdResult& r) {
  MatrixD out(r.u.rows(), r.v.rows());
  for (std::size_t k = 0; k < r.sigma.size(); ++k)
    for (std::size_t i = 0; i < out.rows(); ++i)
      for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += r.u(i, k) * r.sigma[k] * r.v(j, k);
  return out;
}

double frob_diff(const MatrixD& a, const MatrixD& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

}  // namespace

TEST_SUITE("linalg") {
  TEST_CASE("matmul variants agree with the triple-loop oracle") {
    std::mt19937_64 rng(1);
    for (int t = 0; t < 20; ++t) {
      const std::size_t m = 1 + t % 5, k = 2 + t % 7, n = 1 + t % 4;
      const MatrixD a = oracle::random_matrix(rng, m, k);
      const MatrixD b = oracle::random_matrix(rng, k, n);
      const MatrixD ref = oracle::naive_matmul(a, b);
      CHECK(linalg::max_abs_diff(linalg::matmul(a, b), ref) <= 1e-12);
      CHECK(linalg::max_abs_diff(linalg::matmul_at_b(oracle::naive_transpose(a), b), ref) <= 1e-12);
      CHECK(linalg::max_abs_diff(linalg::matmul_a_bt(a, oracle::naive_transpose(b)), ref) <= 1e-12);
    }
    CHECK(error_kind_of([] { linalg::matmul(MatrixD(2, 3), MatrixD(2, 3)); }) == ErrorKind::ShapeMismatch);
  }

  TEST_CASE("svd of a diagonal matrix") {
    const MatrixD m{{3, 0}, {0, 2}};
    const auto r = linalg::svd(m);
    REQUIRE(r.sigma.size() == 2);
    CHECK(r.sigma[0] == doctest::Approx(3.0).epsilon(1e-15));
    CHECK(r.sigma[1] == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(std::abs(r.u(0, 0)) == doctest::Approx(1.0));
    CHECK(std::abs(r.v(0, 0)) == doctest::Approx(1.0));
    CHECK(std::abs(r.u(1, 1)) == doctest::Approx(1.0));
    CHECK(std::abs(r.v(1, 1)) == doctest::Approx(1.0));
    // u and v carry the same sign since the matrix is positive definite.
    CHECK(r.u(0, 0) * r.v(0, 0) > 0);
    CHECK(r.u(1, 1) * r.v(1, 1) > 0);
  }

  TEST_CASE("svd of [[3,0],[4,0]] gives sigma 5 and 0") {
    const MatrixD m{{3, 0}, {4, 0}};
    const auto r = linalg::svd(m);
    CHECK(r.sigma[0] == doctest::Approx(5.0).epsilon(1e-14));
    CHECK(std::abs(r.sigma[1]) <= 1e-14);
    const double s = r.v(0, 0) > 0 ? 1.0 : -1.0;
    CHECK(s * r.v(0, 0) == doctest::Approx(1.0));
    CHECK(s * r.u(0, 0) == doctest::Approx(0.6));
    CHECK(s * r.u(1, 0) == doctest::Approx(0.8));
    CHECK(linalg::orthonormality_error(r.u) <= 1e-12);
    CHECK(linalg::orthonormality_error(r.v) <= 1e-12);
  }

  TEST_CASE("svd of the zero matrix") {
    const MatrixD m(3, 3);
    const auto r = linalg::svd(m);
    for (double s : r.sigma) CHECK(s == 0.0);
    CHECK(frob_diff(reconstruct(r), m) == 0.0);
    CHECK(linalg::orthonormality_error(r.u) <= 1e-12);
    CHECK(linalg::orthonormality_error(r.v) <= 1e-12);
  }

  TEST_CASE("svd rejects empty and non-finite input") {
    CHECK(error_kind_of([] { linalg::svd(MatrixD()); }) == ErrorKind::ShapeError);
    MatrixD m{{1, 2}, {3, 4}};
    m(1, 0) = std::nan("");
    CHECK(error_kind_of([&] { linalg::svd(m); }) == ErrorKind::NonFiniteInput);
    m(1, 0) = INFINITY;
    CHECK(error_kind_of([&] { linalg::svd(m); }) == ErrorKind::NonFiniteInput);
  }

  TEST_CASE("svd reports ConvergenceFailure when the sweep cap is too small") {
    std::mt19937_64 rng(5);
    const MatrixD m = oracle::random_matrix(rng, 12, 12);
    linalg::SvdOptions opts;
    opts.max_sweeps = 1;
    CHECK(error_kind_of([&] { linalg::svd(m, opts); }) == ErrorKind::ConvergenceFailure);
  }

  TEST_CASE("svd singular values match the eigensolver oracle on random shapes") {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 60; ++t) {
      std::uniform_int_distribution<std::size_t> dim(1, 16);
      const std::size_t m = dim(rng), n = dim(rng);
      const MatrixD a = oracle::random_matrix(rng, m, n);
      const auto r = linalg::svd(a);
      const auto ref = oracle::singular_values_by_eigen(a);
      REQUIRE(r.sigma.size() == std::min(m, n));
      CHECK(r.u.rows() == m);
      CHECK(r.v.rows() == n);
      for (std::size_t i = 0; i < r.sigma.size(); ++i) {
        CHECK(std::abs(r.sigma[i] - ref[i]) <= 1e-8 * ref[0]);
        if (i > 0) CHECK(r.sigma[i] <= r.sigma[i - 1]);
        CHECK(r.sigma[i] >= 0.0);
      }
      CHECK(frob_diff(reconstruct(r), a) <= 1e-9 * std::max(1.0, linalg::frobenius_norm(a)));
      CHECK(linalg::orthonormality_error(r.u) <= 1e-10);
      CHECK(linalg::orthonormality_error(r.v) <= 1e-10);
    }
  }

  TEST_CASE("svd scales with the matrix and is deterministic") {
    std::mt19937_64 rng(3);
    const MatrixD a = oracle::random_matrix(rng, 9, 7);
    const auto r = linalg::svd(a);
    for (double c : {2.5, -0.75, 1e-3}) {
      MatrixD ca = a;
      for (auto& v : ca.data()) v *= c;
      const auto rc = linalg::svd(ca);
      for (std::size_t i = 0; i < r.sigma.size(); ++i) {
        CHECK(std::abs(rc.sigma[i] - std::abs(c) * r.sigma[i]) <= 1e-10 * std::abs(c) * r.sigma[0]);
      }
      if (c > 0) {
        for (std::size_t k = 0; k < r.sigma.size(); ++k) {
          const double s = linalg::dot<double>(r.u.column(k), rc.u.column(k)) > 0 ? 1.0 : -1.0;
          for (std::size_t i = 0; i < a.rows(); ++i) CHECK(std::abs(rc.u(i, k) - s * r.u(i, k)) <= 1e-10);
        }
      }
    }
    const auto again = linalg::svd(a);
    CHECK(again.u == r.u);
    CHECK(again.v == r.v);
    CHECK(again.sigma == r.sigma);
  }

  TEST_CASE("svd_verify passes a valid result and flags constructed failures") {
    std::mt19937_64 rng(4);
    const MatrixD a = oracle::random_matrix(rng, 8, 8);
    const auto r = linalg::svd(a);
    const auto ok = linalg::svd_verify(a, r, 1e-9);
    CHECK(ok.passed);
    CHECK(ok.ordering_violations == 0);

    auto flipped = r;
    for (std::size_t i = 0; i < flipped.u.rows(); ++i) flipped.u(i, 0) = -flipped.u(i, 0);
    const auto bad = linalg::svd_verify(a, flipped, 1e-9);
    CHECK_FALSE(bad.passed);
    // Residual is ‖2σ₁u₁v₁ᵀ‖_F / ‖M‖_F = 2σ₁ / ‖M‖_F.
    CHECK(bad.reconstruction_residual ==
          doctest::Approx(2.0 * r.sigma[0] / linalg::frobenius_norm(a)).epsilon(1e-9));

    auto reordered = r;
    std::reverse(reordered.sigma.begin(), reordered.sigma.end());
    const auto unordered = linalg::svd_verify(a, reordered, 1e-9);
    CHECK_FALSE(unordered.passed);
    CHECK(unordered.ordering_violations > 0);

    auto negative = r;
    negative.sigma.back() = -1.0;
    CHECK(linalg::svd_verify(a, negative, 1e-9).negative_sigmas == 1);

    auto wrong_shape = r;
    wrong_shape.sigma.pop_back();
    const auto shaped = linalg::svd_verify(a, wrong_shape, 1e-9);
    CHECK_FALSE(shaped.shapes_consistent);
    CHECK_FALSE(shaped.passed);
    CHECK_FALSE(shaped.summary().empty());
  }

  TEST_CASE("principal angles") {
    MatrixD e1(3, 1), e2(3, 1);
    e1(0, 0) = 1.0;
    e2(1, 0) = 1.0;
    const auto same = linalg::principal_angles(e1, e1);
    CHECK(same[0] == 0.0);
    const auto orth = linalg::principal_angles(e1, e2);
    CHECK(orth[0] == doctest::Approx(std::numbers::pi / 2).epsilon(1e-15));

    std::mt19937_64 rng(6);
    for (int t = 0; t < 10; ++t) {
      const MatrixD a = oracle::random_orthonormal(rng, 10, 4);
      const MatrixD rot = oracle::random_orthonormal(rng, 4, 4);
      const auto angles = linalg::principal_angles(a, oracle::naive_matmul(a, rot));
      for (double x : angles) CHECK(x <= 1e-8);
    }

    // A known angle: span(e1) against span(cos θ e1 + sin θ e2).
    for (double theta : {1e-9, 0.3, 1.2, 1.5707}) {
      MatrixD b(3, 1);
      b(0, 0) = std::cos(theta);
      b(1, 0) = std::sin(theta);
      CHECK(linalg::principal_angles(e1, b)[0] == doctest::Approx(theta).epsilon(1e-12));
    }

    const MatrixD a = oracle::random_orthonormal(rng, 6, 3);
    const MatrixD b = oracle::random_orthonormal(rng, 6, 3);
    const auto angles = linalg::principal_angles(a, b);
    for (std::size_t i = 0; i < angles.size(); ++i) {
      CHECK(angles[i] >= 0.0);
      CHECK(angles[i] <= std::numbers::pi / 2 + 1e-15);
      if (i > 0) CHECK(angles[i] >= angles[i - 1]);
    }

    MatrixD not_unit = e1;
    not_unit(0, 0) = 2.0;
    CHECK(error_kind_of([&] { linalg::principal_angles(not_unit, e1); }) == ErrorKind::NotOrthonormal);
    CHECK(error_kind_of([&] { linalg::principal_angles(e1, MatrixD(4, 1)); }) == ErrorKind::ShapeMismatch);
  }

  TEST_CASE("thin QR, inverse and condition number") {
    std::mt19937_64 rng(7);
    const MatrixD a = oracle::random_matrix(rng, 9, 4);
    const auto qr = linalg::thin_qr(a);
    CHECK(linalg::orthonormality_error(qr.q) <= 1e-12);
    CHECK(linalg::max_abs_diff(oracle::naive_matmul(qr.q, qr.r), a) <= 1e-12);
    for (std::size_t i = 0; i < qr.r.rows(); ++i)
      for (std::size_t j = 0; j < i; ++j) CHECK(qr.r(i, j) == 0.0);

    const MatrixD b = oracle::random_well_conditioned(rng, 5, 4.0);
    const MatrixD inv = linalg::inverse(b);
    CHECK(linalg::max_abs_diff(oracle::naive_matmul(b, inv), MatrixD::identity(5)) <= 1e-12);
    CHECK(linalg::condition_number(b) == doctest::Approx(4.0).epsilon(1e-9));
    CHECK(error_kind_of([] { linalg::inverse(MatrixD{{1, 2}, {2, 4}}); }) == ErrorKind::SingularMatrix);
    CHECK(std::isinf(linalg::condition_number(MatrixD{{1, 0}, {0, 0}})));
  }
}
