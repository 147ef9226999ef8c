#include "lipcert/layers/ortho.hpp"

#include <cmath>

#include "lipcert/errors.hpp"
#include "lipcert/numerics/linalg.hpp"

namespace lipcert::layers {

using autodiff::NodeId;
using autodiff::Tape;

namespace {

void require_square(const Matrix& v, const char* who) {
  if (v.rank() != 2 || v.rows() != v.cols())
    throw ShapeMismatch(std::string(who) + ": square matrix required");
}

}  // namespace

Matrix skew(const Matrix& v) {
  require_square(v, "skew");
  return numerics::scale(numerics::sub(v, numerics::transpose(v)), 0.5);
}

Matrix orthogonalize_cayley(const Matrix& v_raw) {
  const Matrix s = skew(v_raw);
  const Matrix id = Tensor::identity(s.rows());
  return numerics::solve_general(numerics::add(id, s), numerics::sub(id, s));
}

Matrix orthogonalize_matexp(const Matrix& v_raw) {
  return numerics::mat_exp(skew(v_raw));
}

Matrix orthogonalize_cholesky(const Matrix& a) {
  if (a.rank() != 2) throw ShapeMismatch("orthogonalize_cholesky: rank-2 input required");
  // the row Gram is symmetric: one triangle of dots, mirrored
  const Matrix sigma = numerics::gram_rows(a);
  Matrix l{{1, 1}};
  try {
    l = numerics::cholesky_strict(sigma);
  } catch (const NotPositiveDefinite&) {
    throw RankDeficient("orthogonalize_cholesky: row Gram not positive definite");
  }
  return numerics::solve_triangular(l, a);
}

Matrix orthogonalize_lot(const Matrix& v, std::size_t newton_iters) {
  require_square(v, "orthogonalize_lot");
  const std::size_t n = v.rows();
  const Matrix s = numerics::gram_rows(v);
  const double c = numerics::frobenius_norm(s);
  if (c == 0.0) throw RankDeficient("orthogonalize_lot: zero matrix");

  const Matrix id = Tensor::identity(n);
  const Matrix three_id = numerics::scale(id, 3.0);
  Matrix y = numerics::scale(s, 1.0 / c);
  Matrix z = id;
  for (std::size_t it = 0; it < newton_iters; ++it) {
    const Matrix t = numerics::scale(numerics::sub(three_id, numerics::matmul(z, y)), 0.5);
    y = numerics::matmul(y, t);
    z = numerics::matmul(t, z);
  }
  const Matrix w = numerics::matmul(numerics::scale(z, 1.0 / std::sqrt(c)), v);
  if (!(numerics::orthogonality_residual(w) <= 1e-4))
    throw NonConvergence("orthogonalize_lot: residual above 1e-4 after iteration budget");
  return w;
}

NodeId build_skew(Tape& t, NodeId v) {
  return t.scale(t.sub(v, t.transpose(v)), 0.5);
}

NodeId build_cayley(Tape& t, NodeId v_raw) {
  const NodeId s = build_skew(t, v_raw);
  const NodeId id = t.constant(Tensor::identity(t.value(s).rows()));
  return t.solve_general(t.add(id, s), t.sub(id, s));
}

NodeId build_mat_exp(Tape& t, NodeId v) {
  const Matrix& cur = t.value(v);
  require_square(cur, "build_mat_exp");
  const std::size_t n = cur.rows();

  // Same scaling-and-squaring schedule as the numeric kernel; the squaring
  // count is frozen into the graph structure (piecewise constant in v).
  double norm = numerics::frobenius_norm(cur);
  std::size_t squarings = 0;
  double scale_factor = 1.0;
  while (norm * scale_factor > 0.5) {
    scale_factor *= 0.5;
    ++squarings;
  }

  const NodeId id = t.constant(Tensor::identity(n));
  NodeId x = t.scale(v, scale_factor);
  NodeId acc = id;
  for (int term = 18; term >= 1; --term)
    acc = t.add(t.scale(t.matmul(x, acc), 1.0 / term), id);
  for (std::size_t i = 0; i < squarings; ++i) acc = t.matmul(acc, acc);
  return acc;
}

NodeId build_matexp_ortho(Tape& t, NodeId v_raw) {
  return build_mat_exp(t, build_skew(t, v_raw));
}

NodeId build_cholesky_ortho(Tape& t, NodeId a) {
  const NodeId sigma = t.matmul(a, t.transpose(a));
  return t.solve_triangular(t.cholesky(sigma), a);
}

NodeId build_lot_ortho(Tape& t, NodeId v, std::size_t newton_iters) {
  const Matrix& cur = t.value(v);
  require_square(cur, "build_lot_ortho");
  const std::size_t n = cur.rows();

  const NodeId s = t.matmul(v, t.transpose(v));
  const NodeId c = t.pow_nonneg(t.reduce_sum(t.mul(s, s)), 0.5);
  const NodeId id = t.constant(Tensor::identity(n));
  const NodeId three_id = t.constant(numerics::scale(Tensor::identity(n), 3.0));

  NodeId y = t.mul_scalar(s, t.pow_nonneg(c, -1.0));
  NodeId z = id;
  for (std::size_t it = 0; it < newton_iters; ++it) {
    const NodeId step = t.scale(t.sub(three_id, t.matmul(z, y)), 0.5);
    y = t.matmul(y, step);
    z = t.matmul(step, z);
  }
  return t.matmul(t.mul_scalar(z, t.pow_nonneg(c, -0.5)), v);
}

}  // namespace lipcert::layers
