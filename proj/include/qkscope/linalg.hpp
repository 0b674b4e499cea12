#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "qkscope/error.hpp"
#include "qkscope/matrix.hpp"

namespace qkscope::linalg {

template <typename T>
void require_same_inner(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw Error(ErrorKind::ShapeMismatch,
                std::string(what) + ": inner dimensions " + std::to_string(a) + " and " +
                    std::to_string(b) + " differ");
  }
}

/// C = A * B. Loop order i-k-j keeps the inner loop a contiguous axpy.
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  require_same_inner<T>(a.cols(), b.rows(), "matmul");
  Matrix<T> c(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T* out = c.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const T s = a(i, k);
      if (s == T{0}) continue;
      const T* in = b.row(k).data();
      for (std::size_t j = 0; j < n; ++j) out[j] += s * in[j];
    }
  }
  return c;
}

/// C = Aᵀ * B without materializing Aᵀ.
template <typename T>
Matrix<T> matmul_at_b(const Matrix<T>& a, const Matrix<T>& b) {
  require_same_inner<T>(a.rows(), b.rows(), "matmul_at_b");
  Matrix<T> c(a.cols(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const T* in = b.row(k).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const T s = a(k, i);
      if (s == T{0}) continue;
      T* out = c.row(i).data();
      for (std::size_t j = 0; j < n; ++j) out[j] += s * in[j];
    }
  }
  return c;
}

/// C = A * Bᵀ.
template <typename T>
Matrix<T> matmul_a_bt(const Matrix<T>& a, const Matrix<T>& b) {
  require_same_inner<T>(a.cols(), b.cols(), "matmul_a_bt");
  return matmul(a, b.transposed());
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
  T acc{0};
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
T norm2(std::span<const T> a) {
  return std::sqrt(dot(a, a));
}

template <typename T>
T frobenius_norm(const Matrix<T>& m) {
  return norm2<T>(m.data());
}

template <typename T>
T max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
  T worst{0};
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(x[i] - y[i]));
  return worst;
}

/// Thin singular value decomposition M = U diag(sigma) Vᵀ with r = min(m, n).
struct SvdResult {
  MatrixD u;                  // m x r, orthonormal columns
  std::vector<double> sigma;  // length r, non-increasing, non-negative
  MatrixD v;                  // n x r, orthonormal columns
  int sweeps = 0;

  std::size_t rank_bound() const noexcept { return sigma.size(); }
};

struct SvdOptions {
  double rotation_tol = 1e-12;
  int max_sweeps = 60;
};

/// One-sided Jacobi SVD with cyclic sweeps. Deterministic for identical input.
/// Throws NonFiniteInput, ShapeError (empty input) or ConvergenceFailure.
SvdResult svd(const MatrixD& m, const SvdOptions& options = {});

struct SvdReport {
  double reconstruction_residual = 0.0;  // ‖M − UΣVᵀ‖_F / max(1, ‖M‖_F)
  double u_orthonormality = 0.0;         // max |UᵀU − I|
  double v_orthonormality = 0.0;
  std::size_t ordering_violations = 0;   // sigma[i] < sigma[i + 1]
  std::size_t negative_sigmas = 0;
  bool shapes_consistent = true;
  bool passed = false;

  std::string summary() const;
};

SvdReport svd_verify(const MatrixD& m, const SvdResult& result, double tol);

/// Principal angles (radians, non-decreasing) between span(A) and span(B).
/// Small angles come from the sines, large ones from the cosines.
std::vector<double> principal_angles(const MatrixD& a, const MatrixD& b);

struct QrResult {
  MatrixD q;  // m x n, orthonormal columns
  MatrixD r;  // n x n, upper triangular
};

/// Householder QR of a tall matrix (m >= n).
QrResult thin_qr(const MatrixD& a);

/// Inverse via LU with partial pivoting; throws SingularMatrix.
MatrixD inverse(const MatrixD& a);

/// σ_max / σ_min; infinity for singular input.
double condition_number(const MatrixD& a);

/// max |AᵀA − I|.
double orthonormality_error(const MatrixD& a);

}  // namespace qkscope::linalg
