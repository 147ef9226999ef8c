#pragma once

#include "lipcert/tensor.hpp"

namespace lipcert::numerics {

// Dense helpers built on the kernel table. All matrices are rank-2 row-major
// tensors; shape errors throw ShapeMismatch.

Matrix matmul(const Matrix& a, const Matrix& b);      // A * B
Matrix matmul_nt(const Matrix& a, const Matrix& b);   // A * B^T
Matrix matmul_tn(const Matrix& a, const Matrix& b);   // A^T * B
Matrix transpose(const Matrix& a);

// A * A^T; computes the lower triangle once and mirrors it.
Matrix gram_rows(const Matrix& a);

Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double c);

double frobenius_norm(const Matrix& a);
double norm2(std::span<const double> v);

// ||W^T W - I||_F, the orthogonality residual used throughout.
double orthogonality_residual(const Matrix& w);

bool is_symmetric(const Matrix& a, double rel_tol);

// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
// Retries once with +1e-10*(trace/n) jitter on the diagonal before throwing
// NotPositiveDefinite. Rejects non-square and asymmetric (1e-10 relative)
// input.
Matrix cholesky(const Matrix& sigma);

// Cholesky without the jitter retry. Every pivot must clear
// rel_floor * its diagonal entry, so numerically semidefinite input fails
// loudly instead of factoring into a near-singular L. Orthogonalization
// wants this variant: a tiny pivot would silently amplify into a garbage
// basis.
Matrix cholesky_strict(const Matrix& sigma, double rel_floor = 1e-12);

// X with L*X = B for lower-triangular L. Throws SingularTriangular when a
// diagonal entry is below 1e-14*||L||_F.
Matrix solve_triangular(const Matrix& l, const Matrix& b);

// X with U*X = B for upper-triangular U (same pivot rule).
Matrix solve_triangular_upper(const Matrix& u, const Matrix& b);

// Partial-pivot LU factorization; row-swapped in place.
struct LuFactors {
  Matrix lu;                      // unit-lower below, upper on/above diagonal
  std::vector<std::size_t> perm;  // row permutation applied to the input
};
LuFactors lu_factor(const Matrix& a);
Matrix lu_solve(const LuFactors& f, const Matrix& b);

// X with A*X = B via partial-pivot LU. Throws SingularMatrix when a pivot
// magnitude drops below 1e-12*||A||_F.
Matrix solve_general(const Matrix& a, const Matrix& b);

// exp(V) by scaling-and-squaring: scale so ||V/2^s||_F <= 0.5, Taylor
// series to order 18, then square s times.
Matrix mat_exp(const Matrix& v);

}  // namespace lipcert::numerics
