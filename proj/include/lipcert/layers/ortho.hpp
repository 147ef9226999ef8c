#pragma once

#include "lipcert/autodiff/tape.hpp"
#include "lipcert/tensor.hpp"

namespace lipcert::layers {

// (V - V^T)/2
Matrix skew(const Matrix& v);

// W = (I + S)^{-1}(I - S) with S = skew(v_raw); always solvable.
Matrix orthogonalize_cayley(const Matrix& v_raw);

// W = exp(skew(v_raw))
Matrix orthogonalize_matexp(const Matrix& v_raw);

// W = solve_triangular(cholesky(A A^T), A): rows of A orthonormalized, same
// result as modified Gram-Schmidt with the positive-diagonal convention.
// Throws RankDeficient when A A^T is not numerically positive definite.
Matrix orthogonalize_cholesky(const Matrix& a);

// W = (VV^T)^{-1/2} V via the coupled Newton-Schulz iteration on VV^T
// pre-scaled by its Frobenius norm; runs exactly newton_iters steps and
// throws NonConvergence if the orthogonality residual still exceeds 1e-4.
Matrix orthogonalize_lot(const Matrix& v, std::size_t newton_iters = 12);

// Tape counterparts: identical arithmetic recorded as differentiable graphs.
autodiff::NodeId build_skew(autodiff::Tape& t, autodiff::NodeId v);
autodiff::NodeId build_cayley(autodiff::Tape& t, autodiff::NodeId v_raw);
autodiff::NodeId build_mat_exp(autodiff::Tape& t, autodiff::NodeId v);
autodiff::NodeId build_matexp_ortho(autodiff::Tape& t, autodiff::NodeId v_raw);
autodiff::NodeId build_cholesky_ortho(autodiff::Tape& t, autodiff::NodeId a);
autodiff::NodeId build_lot_ortho(autodiff::Tape& t, autodiff::NodeId v,
                                 std::size_t newton_iters);

}  // namespace lipcert::layers
