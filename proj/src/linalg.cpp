#include "qkscope/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

namespace qkscope::linalg {

namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();

double dot_raw(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void rotate_rows(double* p, double* q, std::size_t n, double c, double s) {
  for (std::size_t i = 0; i < n; ++i) {
    const double x = p[i];
    const double y = q[i];
    p[i] = c * x - s * y;
    q[i] = s * x + c * y;
  }
}

// Fills rows of `basis` flagged in `missing` with unit vectors orthogonal to every
// other row. Rows are length `dim`; candidates are the standard basis in order.
void complete_orthonormal_rows(MatrixD& basis, const std::vector<bool>& missing) {
  const std::size_t count = basis.rows();
  const std::size_t dim = basis.cols();
  std::vector<bool> accepted(count);
  for (std::size_t j = 0; j < count; ++j) accepted[j] = !missing[j];
  std::size_t candidate = 0;
  for (std::size_t j = 0; j < count; ++j) {
    if (!missing[j]) continue;
    std::vector<double> w(dim);
    while (candidate < dim) {
      std::fill(w.begin(), w.end(), 0.0);
      w[candidate++] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t o = 0; o < count; ++o) {
          if (!accepted[o]) continue;
          const double proj = dot_raw(w.data(), basis.row(o).data(), dim);
          const double* b = basis.row(o).data();
          for (std::size_t i = 0; i < dim; ++i) w[i] -= proj * b[i];
        }
      }
      const double len = std::sqrt(dot_raw(w.data(), w.data(), dim));
      if (len > 0.1) {
        for (std::size_t i = 0; i < dim; ++i) basis(j, i) = w[i] / len;
        accepted[j] = true;
        break;
      }
    }
  }
}

// SVD of a tall (m >= n) matrix given as its transpose (rows are columns of A).
SvdResult svd_tall(MatrixD columns, const SvdOptions& options) {
  const std::size_t n = columns.rows();
  const std::size_t m = columns.cols();
  MatrixD v_rows = MatrixD::identity(n);

  int sweep = 0;
  double worst_ratio = 0.0;
  bool converged = n < 2;
  while (!converged) {
    if (sweep >= options.max_sweeps) {
      std::ostringstream msg;
      msg << "one-sided Jacobi did not converge after " << options.max_sweeps
          << " sweeps (residual off-diagonal ratio " << worst_ratio << ")";
      throw Error(ErrorKind::ConvergenceFailure, msg.str());
    }
    ++sweep;
    bool rotated = false;
    worst_ratio = 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double* cp = columns.row(p).data();
        double* cq = columns.row(q).data();
        const double alpha = dot_raw(cp, cp, m);
        const double beta = dot_raw(cq, cq, m);
        const double gamma = dot_raw(cp, cq, m);
        if (gamma == 0.0) continue;
        const double ratio = std::abs(gamma) / std::sqrt(alpha * beta);
        if (!(ratio > options.rotation_tol)) continue;
        worst_ratio = std::max(worst_ratio, ratio);
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::hypot(1.0, zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        rotate_rows(cp, cq, m, c, s);
        rotate_rows(v_rows.row(p).data(), v_rows.row(q).data(), n, c, s);
      }
    }
    converged = !rotated;
  }

  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j) norms[j] = norm2<double>(columns.row(j));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });

  MatrixD u_rows(n, m);
  MatrixD v_sorted(n, n);
  std::vector<double> sigma(n);
  std::vector<bool> missing(n, false);
  const double tiny = std::numeric_limits<double>::min() * 1e4;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    sigma[k] = norms[j];
    std::copy_n(v_rows.row(j).data(), n, v_sorted.row(k).data());
    if (norms[j] <= tiny) {
      sigma[k] = 0.0;
      missing[k] = true;
      continue;
    }
    const double* src = columns.row(j).data();
    for (std::size_t i = 0; i < m; ++i) u_rows(k, i) = src[i] / norms[j];
  }
  complete_orthonormal_rows(u_rows, missing);

  SvdResult out;
  out.u = u_rows.transposed();
  out.v = v_sorted.transposed();
  out.sigma = std::move(sigma);
  out.sweeps = sweep;
  return out;
}

}  // namespace

SvdResult svd(const MatrixD& m, const SvdOptions& options) {
  if (m.rows() == 0 || m.cols() == 0) {
    throw Error(ErrorKind::ShapeError, "svd: empty matrix");
  }
  if (!all_finite(m)) {
    throw Error(ErrorKind::NonFiniteInput, "svd: matrix contains NaN or Inf");
  }
  if (m.rows() >= m.cols()) {
    return svd_tall(m.transposed(), options);
  }
  SvdResult flipped = svd_tall(m, options);
  std::swap(flipped.u, flipped.v);
  return flipped;
}

std::string SvdReport::summary() const {
  std::ostringstream os;
  os << "reconstruction=" << reconstruction_residual << " u_orth=" << u_orthonormality
     << " v_orth=" << v_orthonormality << " ordering_violations=" << ordering_violations
     << " negative_sigmas=" << negative_sigmas << (passed ? " PASS" : " FAIL");
  return os.str();
}

double orthonormality_error(const MatrixD& a) {
  const MatrixD gram = matmul_at_b(a, a);
  double worst = 0.0;
  for (std::size_t i = 0; i < gram.rows(); ++i)
    for (std::size_t j = 0; j < gram.cols(); ++j)
      worst = std::max(worst, std::abs(gram(i, j) - (i == j ? 1.0 : 0.0)));
  return worst;
}

SvdReport svd_verify(const MatrixD& m, const SvdResult& result, double tol) {
  SvdReport report;
  const std::size_t r = result.sigma.size();
  if (result.u.rows() != m.rows() || result.v.rows() != m.cols() || result.u.cols() != r ||
      result.v.cols() != r) {
    report.shapes_consistent = false;
    report.passed = false;
    return report;
  }
  MatrixD scaled = result.u;
  for (std::size_t i = 0; i < scaled.rows(); ++i)
    for (std::size_t k = 0; k < r; ++k) scaled(i, k) *= result.sigma[k];
  const MatrixD rebuilt = matmul_a_bt(scaled, result.v);
  double diff = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double d = m.data()[i] - rebuilt.data()[i];
    diff += d * d;
  }
  report.reconstruction_residual = std::sqrt(diff) / std::max(1.0, frobenius_norm(m));
  report.u_orthonormality = orthonormality_error(result.u);
  report.v_orthonormality = orthonormality_error(result.v);
  for (std::size_t k = 0; k < r; ++k) {
    if (result.sigma[k] < 0.0) ++report.negative_sigmas;
    if (k + 1 < r && result.sigma[k] < result.sigma[k + 1]) ++report.ordering_violations;
  }
  report.passed = report.reconstruction_residual <= tol && report.u_orthonormality <= tol &&
                  report.v_orthonormality <= tol && report.ordering_violations == 0 &&
                  report.negative_sigmas == 0;
  return report;
}

std::vector<double> principal_angles(const MatrixD& a, const MatrixD& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols() || a.cols() == 0) {
    throw Error(ErrorKind::ShapeMismatch, "principal_angles: bases must share shape d x k");
  }
  constexpr double kOrthTol = 1e-8;
  if (orthonormality_error(a) > kOrthTol || orthonormality_error(b) > kOrthTol) {
    throw Error(ErrorKind::NotOrthonormal, "principal_angles: input columns not orthonormal");
  }
  const std::size_t k = a.cols();
  const MatrixD cross = matmul_at_b(a, b);
  const std::vector<double> cosines = svd(cross).sigma;
  MatrixD residual = b;
  const MatrixD projected = matmul(a, cross);
  for (std::size_t i = 0; i < residual.size(); ++i) residual.data()[i] -= projected.data()[i];
  const std::vector<double> sines = svd(residual).sigma;

  std::vector<double> angles(k);
  for (std::size_t i = 0; i < k; ++i) {
    const double c = std::clamp(cosines[i], 0.0, 1.0);
    const double s = std::clamp(sines[k - 1 - i], 0.0, 1.0);
    angles[i] = c * c >= 0.5 ? std::asin(s) : std::acos(c);
  }
  std::sort(angles.begin(), angles.end());
  return angles;
}

QrResult thin_qr(const MatrixD& a) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  if (m < n || n == 0) {
    throw Error(ErrorKind::ShapeError, "thin_qr: requires rows >= cols > 0");
  }
  MatrixD cols = a.transposed();
  std::vector<std::vector<double>> reflectors(n);
  for (std::size_t j = 0; j < n; ++j) {
    double* x = cols.row(j).data() + j;
    const std::size_t len = m - j;
    const double xnorm = std::sqrt(dot_raw(x, x, len));
    std::vector<double> v(x, x + len);
    if (xnorm == 0.0) continue;
    const double alpha = x[0] > 0.0 ? -xnorm : xnorm;
    v[0] -= alpha;
    const double vnorm = std::sqrt(dot_raw(v.data(), v.data(), len));
    if (vnorm == 0.0) continue;
    for (auto& e : v) e /= vnorm;
    for (std::size_t c = j; c < n; ++c) {
      double* y = cols.row(c).data() + j;
      const double w = 2.0 * dot_raw(v.data(), y, len);
      for (std::size_t i = 0; i < len; ++i) y[i] -= w * v[i];
    }
    reflectors[j] = std::move(v);
  }

  QrResult out;
  out.r = MatrixD(n, n);
  for (std::size_t c = 0; c < n; ++c)
    for (std::size_t i = 0; i <= c; ++i) out.r(i, c) = cols(c, i);

  MatrixD q_cols(n, m);
  for (std::size_t c = 0; c < n; ++c) q_cols(c, c) = 1.0;
  for (std::size_t jj = n; jj-- > 0;) {
    const auto& v = reflectors[jj];
    if (v.empty()) continue;
    const std::size_t len = m - jj;
    for (std::size_t c = 0; c < n; ++c) {
      double* y = q_cols.row(c).data() + jj;
      const double w = 2.0 * dot_raw(v.data(), y, len);
      for (std::size_t i = 0; i < len; ++i) y[i] -= w * v[i];
    }
  }
  out.q = q_cols.transposed();
  return out;
}

MatrixD inverse(const MatrixD& a) {
  const std::size_t n = a.rows();
  if (n == 0 || a.cols() != n) {
    throw Error(ErrorKind::ShapeError, "inverse: matrix must be square and non-empty");
  }
  MatrixD lu = a;
  MatrixD inv = MatrixD::identity(n);
  double scale = 0.0;
  for (double v : a.data()) scale = std::max(scale, std::abs(v));
  const double pivot_floor = static_cast<double>(n) * kEps * scale;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(lu(r, col)) > std::abs(lu(pivot, col))) pivot = r;
    if (!(std::abs(lu(pivot, col)) > pivot_floor)) {
      throw Error(ErrorKind::SingularMatrix, "inverse: matrix is singular to working precision");
    }
    if (pivot != col) {
      for (std::size_t c = 0; c < n; ++c) {
        std::swap(lu(pivot, c), lu(col, c));
        std::swap(inv(pivot, c), inv(col, c));
      }
    }
    const double d = lu(col, col);
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = lu(r, col) / d;
      if (f == 0.0) continue;
      for (std::size_t c = 0; c < n; ++c) {
        lu(r, c) -= f * lu(col, c);
        inv(r, c) -= f * inv(col, c);
      }
    }
  }
  for (std::size_t r = 0; r < n; ++r) {
    const double d = lu(r, r);
    for (std::size_t c = 0; c < n; ++c) inv(r, c) /= d;
  }
  return inv;
}

double condition_number(const MatrixD& a) {
  const auto s = svd(a).sigma;
  if (s.back() == 0.0) return std::numeric_limits<double>::infinity();
  return s.front() / s.back();
}

}  // namespace qkscope::linalg
