#pragma once

// Independent reference computations for tests. Nothing here calls into the
// library's linear algebra.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "qkscope/matrix.hpp"

namespace qkscope::oracle {

inline MatrixD naive_matmul(const MatrixD& a, const MatrixD& b) {
  MatrixD c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      c(i, j) = acc;
    }
  return c;
}

inline MatrixD naive_transpose(const MatrixD& a) {
  MatrixD t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline double bilinear(const std::vector<double>& x, const MatrixD& m, const std::vector<double>& y) {
  double acc = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) acc += x[i] * m(i, j) * y[j];
  return acc;
}

/// Classical two-sided cyclic Jacobi eigenvalue iteration for a symmetric matrix.
/// Returns eigenvalues sorted descending.
inline std::vector<double> jacobi_eigenvalues(MatrixD s) {
  const std::size_t n = s.rows();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0, total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        total += s(i, j) * s(i, j);
        if (i != j) off += s(i, j) * s(i, j);
      }
    if (off <= 1e-30 * total || off == 0.0) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (s(p, q) == 0.0) continue;
        const double theta = (s(q, q) - s(p, p)) / (2.0 * s(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double skp = s(k, p), skq = s(k, q);
          s(k, p) = c * skp - sn * skq;
          s(k, q) = sn * skp + c * skq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double spk = s(p, k), sqk = s(q, k);
          s(p, k) = c * spk - sn * sqk;
          s(q, k) = sn * spk + c * sqk;
        }
      }
    }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = s(i, i);
  std::sort(ev.begin(), ev.end(), std::greater<>());
  return ev;
}

/// Singular values via eigenvalues of MᵀM (or MMᵀ for wide M), length min(m, n).
inline std::vector<double> singular_values_by_eigen(const MatrixD& m) {
  const MatrixD mt = naive_transpose(m);
  const MatrixD gram = m.rows() >= m.cols() ? naive_matmul(mt, m) : naive_matmul(m, mt);
  auto ev = jacobi_eigenvalues(gram);
  for (auto& e : ev) e = std::sqrt(std::max(e, 0.0));
  return ev;
}

inline MatrixD random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols,
                             double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  MatrixD m(rows, cols);
  for (auto& v : m.data()) v = dist(rng);
  return m;
}

inline std::vector<double> random_vector(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

/// Orthonormalizes the columns of a random matrix by modified Gram-Schmidt.
inline MatrixD random_orthonormal(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  MatrixD a = random_matrix(rng, rows, cols);
  for (std::size_t j = 0; j < cols; ++j) {
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t k = 0; k < j; ++k) {
        double proj = 0.0;
        for (std::size_t i = 0; i < rows; ++i) proj += a(i, k) * a(i, j);
        for (std::size_t i = 0; i < rows; ++i) a(i, j) -= proj * a(i, k);
      }
    }
    double len = 0.0;
    for (std::size_t i = 0; i < rows; ++i) len += a(i, j) * a(i, j);
    len = std::sqrt(len);
    for (std::size_t i = 0; i < rows; ++i) a(i, j) /= len;
  }
  return a;
}

/// Random A = Q1 diag(s) Q2 with singular values spread in [1, cond_target].
inline MatrixD random_well_conditioned(std::mt19937_64& rng, std::size_t n, double cond_target) {
  const MatrixD q1 = random_orthonormal(rng, n, n);
  const MatrixD q2 = random_orthonormal(rng, n, n);
  std::uniform_real_distribution<double> u(1.0, cond_target);
  MatrixD d(n, n);
  for (std::size_t i = 0; i < n; ++i) d(i, i) = i == 0 ? 1.0 : (i == 1 ? cond_target : u(rng));
  return naive_matmul(naive_matmul(q1, d), q2);
}

}  // namespace qkscope::oracle
