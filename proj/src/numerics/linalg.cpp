#include "lipcert/numerics/linalg.hpp"

#include <algorithm>
#include <cmath>

#include "lipcert/kernels/kernels.hpp"

namespace lipcert::numerics {

namespace {
const kernels::Ops& K() { return kernels::active(); }

void require_matrix(const Matrix& a, const char* what) {
  if (a.rank() != 2) throw ShapeMismatch(std::string(what) + ": rank-2 tensor required");
}

void require_square(const Matrix& a, const char* what) {
  require_matrix(a, what);
  if (a.rows() != a.cols())
    throw ShapeMismatch(std::string(what) + ": square matrix required");
}
}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) throw ShapeMismatch("matmul: inner dimensions differ");
  Matrix c({a.rows(), b.cols()});
  K().gemm_acc(a.rows(), b.cols(), a.cols(), a.data(), a.cols(), b.data(),
               b.cols(), c.data(), c.cols());
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  if (a.cols() != b.cols()) throw ShapeMismatch("matmul_nt: inner dimensions differ");
  Matrix c({a.rows(), b.rows()});
  const std::size_t n = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j)
      c(i, j) = K().dot(a.data() + i * n, b.data() + j * n, n);
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  if (a.rows() != b.rows()) throw ShapeMismatch("matmul_tn: inner dimensions differ");
  Matrix c({a.cols(), b.cols()});
  // C += a_row^T * b_row accumulated over rows.
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t i = 0; i < a.cols(); ++i)
      K().axpy(a(r, i), b.data() + r * b.cols(), c.data() + i * c.cols(), b.cols());
  return c;
}

Matrix transpose(const Matrix& a) {
  require_matrix(a, "transpose");
  Matrix t({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

Matrix gram_rows(const Matrix& a) {
  require_matrix(a, "gram_rows");
  const std::size_t n = a.rows(), k = a.cols();
  Matrix g({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      const double d = K().dot(a.data() + i * k, a.data() + j * k, k);
      g(i, j) = d;
      g(j, i) = d;
    }
  }
  return g;
}

Matrix add(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeMismatch("add: shapes differ");
  Matrix c(a.shape());
  K().vadd(a.data(), b.data(), c.data(), a.size());
  return c;
}

Matrix sub(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeMismatch("sub: shapes differ");
  Matrix c(a.shape());
  K().vsub(a.data(), b.data(), c.data(), a.size());
  return c;
}

Matrix scale(const Matrix& a, double c) {
  Matrix out = a;
  K().scal(c, out.data(), out.size());
  return out;
}

double frobenius_norm(const Matrix& a) {
  return std::sqrt(K().sumsq(a.data(), a.size()));
}

double norm2(std::span<const double> v) {
  return std::sqrt(K().sumsq(v.data(), v.size()));
}

double orthogonality_residual(const Matrix& w) {
  Matrix g = matmul_tn(w, w);
  for (std::size_t i = 0; i < g.rows(); ++i) g(i, i) -= 1.0;
  return frobenius_norm(g);
}

bool is_symmetric(const Matrix& a, double rel_tol) {
  if (a.rank() != 2 || a.rows() != a.cols()) return false;
  const double scale = std::max(frobenius_norm(a), 1e-300);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = i + 1; j < a.cols(); ++j)
      if (std::abs(a(i, j) - a(j, i)) > rel_tol * scale) return false;
  return true;
}

namespace {

// One factorization attempt; returns false on a non-positive pivot.
bool try_cholesky(const Matrix& sigma, double jitter, Matrix& l_out) {
  const std::size_t n = sigma.rows();
  Matrix l({n, n});
  for (std::size_t j = 0; j < n; ++j) {
    double d = sigma(j, j) + jitter - K().sumsq(l.data() + j * n, j);
    if (!(d > 0.0)) return false;
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      const double s = K().dot(l.data() + i * n, l.data() + j * n, j);
      l(i, j) = (sigma(i, j) - s) / ljj;
    }
  }
  l_out = std::move(l);
  return true;
}

}  // namespace

Matrix cholesky(const Matrix& sigma) {
  require_square(sigma, "cholesky");
  sigma.check_finite();
  if (!is_symmetric(sigma, 1e-10))
    throw ShapeMismatch("cholesky: input is not symmetric");
  Matrix l;
  if (try_cholesky(sigma, 0.0, l)) return l;
  // jitter retry: numerically semidefinite input gets one diagonal bump
  double trace = 0.0;
  for (std::size_t i = 0; i < sigma.rows(); ++i) trace += sigma(i, i);
  const double jitter = 1e-10 * trace / static_cast<double>(sigma.rows());
  if (jitter > 0.0 && try_cholesky(sigma, jitter, l)) return l;
  throw NotPositiveDefinite("cholesky: non-positive pivot after jitter retry");
}

Matrix cholesky_strict(const Matrix& sigma, double rel_floor) {
  require_square(sigma, "cholesky_strict");
  sigma.check_finite();
  if (!is_symmetric(sigma, 1e-10))
    throw ShapeMismatch("cholesky_strict: input is not symmetric");
  const std::size_t n = sigma.rows();
  Matrix l({n, n});
  for (std::size_t j = 0; j < n; ++j) {
    const double d = sigma(j, j) - K().sumsq(l.data() + j * n, j);
    if (!(d > rel_floor * std::abs(sigma(j, j))))
      throw NotPositiveDefinite("cholesky_strict: pivot below relative floor");
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      const double s = K().dot(l.data() + i * n, l.data() + j * n, j);
      l(i, j) = (sigma(i, j) - s) / ljj;
    }
  }
  return l;
}

Matrix solve_triangular(const Matrix& l, const Matrix& b) {
  require_square(l, "solve_triangular");
  require_matrix(b, "solve_triangular");
  if (l.rows() != b.rows())
    throw ShapeMismatch("solve_triangular: dimension mismatch");
  const std::size_t n = l.rows(), m = b.cols();
  const double pivot_floor = 1e-14 * frobenius_norm(l);
  Matrix x = b;
  for (std::size_t i = 0; i < n; ++i) {
    if (std::abs(l(i, i)) <= pivot_floor)
      throw SingularTriangular("solve_triangular: tiny pivot");
    double* xi = x.data() + i * m;
    for (std::size_t k = 0; k < i; ++k)
      K().axpy(-l(i, k), x.data() + k * m, xi, m);
    K().scal(1.0 / l(i, i), xi, m);
  }
  return x;
}

Matrix solve_triangular_upper(const Matrix& u, const Matrix& b) {
  require_square(u, "solve_triangular_upper");
  require_matrix(b, "solve_triangular_upper");
  if (u.rows() != b.rows())
    throw ShapeMismatch("solve_triangular_upper: dimension mismatch");
  const std::size_t n = u.rows(), m = b.cols();
  const double pivot_floor = 1e-14 * frobenius_norm(u);
  Matrix x = b;
  for (std::size_t ii = n; ii-- > 0;) {
    if (std::abs(u(ii, ii)) <= pivot_floor)
      throw SingularTriangular("solve_triangular_upper: tiny pivot");
    double* xi = x.data() + ii * m;
    for (std::size_t k = ii + 1; k < n; ++k)
      K().axpy(-u(ii, k), x.data() + k * m, xi, m);
    K().scal(1.0 / u(ii, ii), xi, m);
  }
  return x;
}

LuFactors lu_factor(const Matrix& a) {
  require_square(a, "lu_factor");
  const std::size_t n = a.rows();
  const double pivot_floor = 1e-12 * frobenius_norm(a);
  LuFactors f{a, std::vector<std::size_t>(n)};
  for (std::size_t i = 0; i < n; ++i) f.perm[i] = i;
  Matrix& lu = f.lu;
  for (std::size_t j = 0; j < n; ++j) {
    std::size_t piv = j;
    double best = std::abs(lu(j, j));
    for (std::size_t i = j + 1; i < n; ++i) {
      const double m = std::abs(lu(i, j));
      if (m > best) {
        best = m;
        piv = i;
      }
    }
    if (best <= pivot_floor) throw SingularMatrix("lu_factor: tiny pivot");
    if (piv != j) {
      for (std::size_t k = 0; k < n; ++k) std::swap(lu(j, k), lu(piv, k));
      std::swap(f.perm[j], f.perm[piv]);
    }
    const double inv = 1.0 / lu(j, j);
    for (std::size_t i = j + 1; i < n; ++i) {
      const double mult = lu(i, j) * inv;
      lu(i, j) = mult;
      if (mult != 0.0)
        K().axpy(-mult, lu.data() + j * n + (j + 1), lu.data() + i * n + (j + 1),
                 n - j - 1);
    }
  }
  return f;
}

Matrix lu_solve(const LuFactors& f, const Matrix& b) {
  const std::size_t n = f.lu.rows(), m = b.cols();
  if (b.rows() != n) throw ShapeMismatch("lu_solve: dimension mismatch");
  Matrix x({n, m});
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(b.data() + f.perm[i] * m, m, x.data() + i * m);
  // unit-lower forward pass
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < i; ++k)
      K().axpy(-f.lu(i, k), x.data() + k * m, x.data() + i * m, m);
  // upper back substitution
  for (std::size_t ii = n; ii-- > 0;) {
    double* xi = x.data() + ii * m;
    for (std::size_t k = ii + 1; k < n; ++k)
      K().axpy(-f.lu(ii, k), x.data() + k * m, xi, m);
    K().scal(1.0 / f.lu(ii, ii), xi, m);
  }
  return x;
}

Matrix solve_general(const Matrix& a, const Matrix& b) {
  return lu_solve(lu_factor(a), b);
}

Matrix mat_exp(const Matrix& v) {
  require_square(v, "mat_exp");
  v.check_finite();
  const std::size_t n = v.rows();
  const double norm = frobenius_norm(v);
  int squarings = 0;
  double s = 1.0;
  while (norm * s > 0.5) {
    s *= 0.5;
    ++squarings;
  }
  Matrix t = scale(v, s);
  // Horner evaluation of the degree-18 Taylor polynomial.
  constexpr int kOrder = 18;
  Matrix acc = Tensor::identity(n);
  for (int term = kOrder; term >= 1; --term) {
    acc = matmul(t, acc);
    K().scal(1.0 / static_cast<double>(term), acc.data(), acc.size());
    for (std::size_t i = 0; i < n; ++i) acc(i, i) += 1.0;
  }
  for (int i = 0; i < squarings; ++i) acc = matmul(acc, acc);
  return acc;
}

}  // namespace lipcert::numerics
