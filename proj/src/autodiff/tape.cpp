#include "lipcert/autodiff/tape.hpp"

#include <algorithm>
#include <cmath>

#include "lipcert/errors.hpp"
#include "lipcert/kernels/kernels.hpp"
#include "lipcert/numerics/linalg.hpp"

namespace lipcert::autodiff {

namespace {

const kernels::Ops& K() { return kernels::active(); }

// (outer, channel, inner) view used by minmax: rank-2 is (B, n, 1),
// rank-4 pairs along the channel axis.
struct Axis1View {
  std::size_t outer, channels, inner;
};

Axis1View axis1_view(const Tensor& x) {
  if (x.rank() == 2) return {x.dim(0), x.dim(1), 1};
  if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)};
  throw ShapeMismatch("minmax: rank-2 or rank-4 input required");
}

struct ConvDims {
  std::size_t batch, cin, h, w, cout, kh, kw, ph, pw;
};

ConvDims conv_dims(const Tensor& x, const Tensor& wt) {
  if (x.rank() != 4 || wt.rank() != 4)
    throw ShapeMismatch("conv2d: x (B,C,H,W) and w (O,C,kh,kw) required");
  ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3),
             wt.dim(0), wt.dim(2), wt.dim(3), 0, 0};
  if (wt.dim(1) != d.cin) throw ShapeMismatch("conv2d: channel mismatch");
  if (d.kh % 2 == 0 || d.kw % 2 == 0)
    throw ShapeMismatch("conv2d: kernel sides must be odd");
  d.ph = d.kh / 2;
  d.pw = d.kw / 2;
  return d;
}

// col is (cin*kh*kw) x (h*w) for one batch element, zero-padded borders.
void im2col(const Tensor& x, std::size_t b, const ConvDims& d,
            std::vector<double>& col) {
  const std::size_t hw = d.h * d.w;
  col.assign(d.cin * d.kh * d.kw * hw, 0.0);
  const double* xb = x.data() + b * d.cin * hw;
  for (std::size_t c = 0; c < d.cin; ++c)
    for (std::size_t dy = 0; dy < d.kh; ++dy)
      for (std::size_t dx = 0; dx < d.kw; ++dx) {
        double* row = col.data() + ((c * d.kh + dy) * d.kw + dx) * hw;
        for (std::size_t y = 0; y < d.h; ++y) {
          const std::ptrdiff_t sy =
              static_cast<std::ptrdiff_t>(y + dy) - static_cast<std::ptrdiff_t>(d.ph);
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(d.h)) continue;
          // valid x-range of the shifted row
          const std::ptrdiff_t shift =
              static_cast<std::ptrdiff_t>(dx) - static_cast<std::ptrdiff_t>(d.pw);
          std::size_t x0 = shift < 0 ? static_cast<std::size_t>(-shift) : 0;
          std::size_t x1 = shift > 0 ? d.w - static_cast<std::size_t>(shift) : d.w;
          const double* src = xb + c * hw + static_cast<std::size_t>(sy) * d.w;
          double* dst = row + y * d.w;
          for (std::size_t xx = x0; xx < x1; ++xx)
            dst[xx] = src[static_cast<std::size_t>(
                static_cast<std::ptrdiff_t>(xx) + shift)];
        }
      }
}

// scatter-add of a col buffer back onto dx for one batch element
void col2im_acc(const std::vector<double>& col, std::size_t b,
                const ConvDims& d, Tensor& dx) {
  const std::size_t hw = d.h * d.w;
  double* xb = dx.data() + b * d.cin * hw;
  for (std::size_t c = 0; c < d.cin; ++c)
    for (std::size_t dy = 0; dy < d.kh; ++dy)
      for (std::size_t dx_ = 0; dx_ < d.kw; ++dx_) {
        const double* row = col.data() + ((c * d.kh + dy) * d.kw + dx_) * hw;
        for (std::size_t y = 0; y < d.h; ++y) {
          const std::ptrdiff_t sy =
              static_cast<std::ptrdiff_t>(y + dy) - static_cast<std::ptrdiff_t>(d.ph);
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(d.h)) continue;
          const std::ptrdiff_t shift =
              static_cast<std::ptrdiff_t>(dx_) - static_cast<std::ptrdiff_t>(d.pw);
          std::size_t x0 = shift < 0 ? static_cast<std::size_t>(-shift) : 0;
          std::size_t x1 = shift > 0 ? d.w - static_cast<std::size_t>(shift) : d.w;
          double* dst = xb + c * hw + static_cast<std::size_t>(sy) * d.w;
          const double* src = row + y * d.w;
          for (std::size_t xx = x0; xx < x1; ++xx)
            dst[static_cast<std::size_t>(static_cast<std::ptrdiff_t>(xx) + shift)] +=
                src[xx];
        }
      }
}

// lower triangle, diagonal halved — the reflection map in the Cholesky adjoint
Tensor phi_lower(const Tensor& a) {
  Tensor out(a.shape());
  const std::size_t n = a.rows();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) out(i, j) = a(i, j);
    out(i, i) = 0.5 * a(i, i);
  }
  return out;
}

Tensor tril(const Tensor& a) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j <= i && j < a.cols(); ++j) out(i, j) = a(i, j);
  return out;
}

std::size_t argmax_excluding(const Tensor& f, std::size_t row,
                             std::size_t excluded) {
  const std::size_t k = f.cols();
  std::size_t best = k;  // sentinel
  double best_v = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    if (j == excluded) continue;
    if (best == k || f(row, j) > best_v) {
      best = j;
      best_v = f(row, j);
    }
  }
  return best;
}

}  // namespace

NodeId Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

const Tensor& Tape::value(NodeId id) const { return nodes_.at(id).value; }

NodeId Tape::leaf(Tensor v) {
  Node n{Op::kLeaf, {}, std::move(v), true, {}, {}};
  return push(std::move(n));
}

NodeId Tape::constant(Tensor v) {
  Node n{Op::kConstant, {}, std::move(v), false, {}, {}};
  return push(std::move(n));
}

void Tape::set_value(NodeId id, Tensor v) {
  Node& n = nodes_.at(id);
  if (n.op != Op::kLeaf && n.op != Op::kConstant)
    throw Error("set_value: only leaves and constants can be reassigned");
  if (!n.value.same_shape(v))
    throw ShapeMismatch("set_value: shape change not allowed");
  n.value = std::move(v);
}

// ---------------------------------------------------------------------------
// forward computation, shared by op recording and replay

namespace {

Tensor compute(const std::vector<Node>& nodes, const Node& n) {
  auto P = [&](std::size_t i) -> const Tensor& {
    return nodes[n.parents[i]].value;
  };
  switch (n.op) {
    case Op::kLeaf:
    case Op::kConstant:
      return n.value;
    case Op::kDetach:
      return P(0);
    case Op::kReshape:
      return P(0).reshaped(n.iaux);
    case Op::kTranspose:
      return numerics::transpose(P(0));
    case Op::kMatmul:
      return numerics::matmul(P(0), P(1));
    case Op::kAdd:
      return numerics::add(P(0), P(1));
    case Op::kSub:
      return numerics::sub(P(0), P(1));
    case Op::kScale:
      return numerics::scale(P(0), n.daux[0]);
    case Op::kMul: {
      const Tensor &a = P(0), &b = P(1);
      if (!a.same_shape(b)) throw ShapeMismatch("mul: shapes differ");
      Tensor out(a.shape());
      K().vmul(a.data(), b.data(), out.data(), a.size());
      return out;
    }
    case Op::kMulScalar:
      return numerics::scale(P(0), P(1)[0]);
    case Op::kAddRowVec: {
      const Tensor &x = P(0), &b = P(1);
      Tensor out = x;
      const std::size_t c = x.cols();
      for (std::size_t i = 0; i < x.rows(); ++i)
        K().axpy(1.0, b.data(), out.data() + i * c, c);
      return out;
    }
    case Op::kAddChanVec: {
      const Tensor &x = P(0), &b = P(1);
      Tensor out = x;
      const std::size_t ch = x.dim(1), inner = x.dim(2) * x.dim(3);
      for (std::size_t bi = 0; bi < x.dim(0); ++bi)
        for (std::size_t c = 0; c < ch; ++c) {
          double* row = out.data() + (bi * ch + c) * inner;
          for (std::size_t s = 0; s < inner; ++s) row[s] += b[c];
        }
      return out;
    }
    case Op::kRowScale: {
      const Tensor &x = P(0), &d = P(1);
      Tensor out = x;
      for (std::size_t i = 0; i < x.rows(); ++i)
        K().scal(d[i], out.data() + i * x.cols(), x.cols());
      return out;
    }
    case Op::kColScale: {
      const Tensor &x = P(0), &d = P(1);
      Tensor out(x.shape());
      for (std::size_t i = 0; i < x.rows(); ++i)
        K().vmul(x.data() + i * x.cols(), d.data(), out.data() + i * x.cols(),
                 x.cols());
      return out;
    }
    case Op::kExp: {
      Tensor out(P(0).shape());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(P(0)[i]);
      return out;
    }
    case Op::kLog: {
      Tensor out(P(0).shape());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(P(0)[i]);
      return out;
    }
    case Op::kAbs: {
      Tensor out(P(0).shape());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(P(0)[i]);
      return out;
    }
    case Op::kRelu: {
      Tensor out(P(0).shape());
      for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = P(0)[i] > 0.0 ? P(0)[i] : 0.0;
      return out;
    }
    case Op::kPowNonneg: {
      Tensor out(P(0).shape());
      const double p = n.daux[0];
      for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = P(0)[i] > 0.0 ? std::pow(P(0)[i], p) : 0.0;
      return out;
    }
    case Op::kDivOrZero: {
      const Tensor &a = P(0), &b = P(1);
      if (!a.same_shape(b)) throw ShapeMismatch("div_or_zero: shapes differ");
      Tensor out(a.shape());
      for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = b[i] != 0.0 ? a[i] / b[i] : 0.0;
      return out;
    }
    case Op::kRowSum: {
      const Tensor& x = P(0);
      Tensor out({x.rows()});
      for (std::size_t i = 0; i < x.rows(); ++i)
        out[i] = K().sum(x.data() + i * x.cols(), x.cols());
      return out;
    }
    case Op::kReduceSum: {
      Tensor out({1});
      out[0] = K().sum(P(0).data(), P(0).size());
      return out;
    }
    case Op::kCholesky:
      return numerics::cholesky(P(0));
    case Op::kSolveTriangular:
      return numerics::solve_triangular(P(0), P(1));
    case Op::kSolveGeneral:
      return numerics::solve_general(P(0), P(1));
    case Op::kConv2d: {
      const Tensor &x = P(0), &wt = P(1);
      const ConvDims d = conv_dims(x, wt);
      const std::size_t hw = d.h * d.w, ck = d.cin * d.kh * d.kw;
      Tensor out({d.batch, d.cout, d.h, d.w});
      std::vector<double> col;
      for (std::size_t b = 0; b < d.batch; ++b) {
        im2col(x, b, d, col);
        K().gemm_acc(d.cout, hw, ck, wt.data(), ck, col.data(), hw,
                     out.data() + b * d.cout * hw, hw);
      }
      return out;
    }
    case Op::kMinMax: {
      const Tensor& x = P(0);
      const Axis1View v = axis1_view(x);
      if (v.channels % 2 != 0) throw OddWidth("minmax: odd width");
      Tensor out(x.shape());
      for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t t = 0; t < v.channels / 2; ++t)
          for (std::size_t s = 0; s < v.inner; ++s) {
            const std::size_t i0 = (o * v.channels + 2 * t) * v.inner + s;
            const std::size_t i1 = i0 + v.inner;
            const double a = x[i0], b = x[i1];
            out[i0] = a <= b ? a : b;
            out[i1] = a <= b ? b : a;
          }
      return out;
    }
    case Op::kAppendCol: {
      const Tensor &f = P(0), &s = P(1);
      if (s.rank() != 1 || s.dim(0) != f.rows())
        throw ShapeMismatch("append_col: column length mismatch");
      Tensor out({f.rows(), f.cols() + 1});
      for (std::size_t i = 0; i < f.rows(); ++i) {
        std::copy_n(f.data() + i * f.cols(), f.cols(),
                    out.data() + i * (f.cols() + 1));
        out(i, f.cols()) = s[i];
      }
      return out;
    }
    case Op::kPickPerRow: {
      const Tensor& f = P(0);
      Tensor out({n.iaux.size()});
      for (std::size_t i = 0; i < n.iaux.size(); ++i) out[i] = f(i, n.iaux[i]);
      return out;
    }
    case Op::kRowMaxExcluding: {
      const Tensor& f = P(0);
      Tensor out({n.iaux.size()});
      for (std::size_t i = 0; i < n.iaux.size(); ++i) {
        const std::size_t j = argmax_excluding(f, i, n.iaux[i]);
        out[i] = f(i, j);
      }
      return out;
    }
    case Op::kRowLse: {
      const Tensor& f = P(0);
      Tensor out({f.rows()});
      for (std::size_t i = 0; i < f.rows(); ++i) {
        const double* row = f.data() + i * f.cols();
        double m = row[0];
        for (std::size_t j = 1; j < f.cols(); ++j) m = std::max(m, row[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < f.cols(); ++j) s += std::exp(row[j] - m);
        out[i] = m + std::log(s);
      }
      return out;
    }
    case Op::kHeadPairBounds: {
      const Tensor& w = P(0);
      const std::size_t k = w.rows(), d = w.cols();
      Tensor out({n.iaux.size(), k});
      std::vector<double> diff(d);
      for (std::size_t r = 0; r < n.iaux.size(); ++r) {
        const double* wj = w.data() + n.iaux[r] * d;
        for (std::size_t i = 0; i < k; ++i) {
          K().vsub(wj, w.data() + i * d, diff.data(), d);
          out(r, i) = std::sqrt(K().sumsq(diff.data(), d));
        }
      }
      return out;
    }
    case Op::kSliceChannels: {
      const Tensor& x = P(0);
      const std::size_t c0 = n.iaux[0], c1 = n.iaux[1];
      const std::size_t inner = x.dim(2) * x.dim(3), ch = x.dim(1);
      Tensor out({x.dim(0), c1 - c0, x.dim(2), x.dim(3)});
      for (std::size_t b = 0; b < x.dim(0); ++b)
        std::copy_n(x.data() + (b * ch + c0) * inner, (c1 - c0) * inner,
                    out.data() + b * (c1 - c0) * inner);
      return out;
    }
    case Op::kConcatChannels: {
      std::size_t total = 0;
      for (NodeId p : n.parents) total += nodes[p].value.dim(1);
      const Tensor& x0 = nodes[n.parents[0]].value;
      const std::size_t inner = x0.dim(2) * x0.dim(3), batch = x0.dim(0);
      Tensor out({batch, total, x0.dim(2), x0.dim(3)});
      std::size_t at = 0;
      for (NodeId p : n.parents) {
        const Tensor& x = nodes[p].value;
        for (std::size_t b = 0; b < batch; ++b)
          std::copy_n(x.data() + b * x.dim(1) * inner, x.dim(1) * inner,
                      out.data() + (b * total + at) * inner);
        at += x.dim(1);
      }
      return out;
    }
    case Op::kPadMatrix: {
      const Tensor& x = P(0);
      Tensor out({n.iaux[0], n.iaux[1]});
      for (std::size_t i = 0; i < x.rows(); ++i)
        std::copy_n(x.data() + i * x.cols(), x.cols(),
                    out.data() + i * n.iaux[1]);
      return out;
    }
  }
  throw Error("compute: unknown op");
}

}  // namespace

void Tape::forward() {
  for (Node& n : nodes_)
    if (n.op != Op::kLeaf && n.op != Op::kConstant) n.value = compute(nodes_, n);
}

// ---------------------------------------------------------------------------
// op recording

namespace {

bool any_requires(const std::vector<Node>& nodes,
                  const std::vector<NodeId>& parents) {
  for (NodeId p : parents)
    if (nodes[p].requires_grad) return true;
  return false;
}

}  // namespace

#define LIPCERT_RECORD(opname, ...)                                     \
  Node n{opname, {__VA_ARGS__}, {}, false, {}, {}};                     \
  n.requires_grad = any_requires(nodes_, n.parents);                    \
  n.value = compute(nodes_, n);                                         \
  return push(std::move(n))

NodeId Tape::detach(NodeId x) {
  Node n{Op::kDetach, {x}, {}, false, {}, {}};
  n.value = compute(nodes_, n);
  return push(std::move(n));
}

NodeId Tape::reshape(NodeId x, std::vector<std::size_t> shape) {
  Node n{Op::kReshape, {x}, {}, nodes_[x].requires_grad, std::move(shape), {}};
  n.value = compute(nodes_, n);
  return push(std::move(n));
}

NodeId Tape::transpose(NodeId x) { LIPCERT_RECORD(Op::kTranspose, x); }
NodeId Tape::matmul(NodeId a, NodeId b) { LIPCERT_RECORD(Op::kMatmul, a, b); }
NodeId Tape::add(NodeId a, NodeId b) { LIPCERT_RECORD(Op::kAdd, a, b); }
NodeId Tape::sub(NodeId a, NodeId b) { LIPCERT_RECORD(Op::kSub, a, b); }

NodeId Tape::scale(NodeId x, double c) {
  Node n{Op::kScale, {x}, {}, nodes_[x].requires_grad, {}, {c}};
  n.value = compute(nodes_, n);
  return push(std::move(n));
}

NodeId Tape::mul(NodeId a, NodeId b) { LIPCERT_RECORD(Op::kMul, a, b); }
NodeId Tape::mul_scalar(NodeId x, NodeId s) {
  if (nodes_[s].value.size() != 1)
    throw ShapeMismatch("mul_scalar: scalar node must have one element");
  LIPCERT_RECORD(Op::kMulScalar, x, s);
}
NodeId Tape::add_rowvec(NodeId x, NodeId b) {
  if (nodes_[x].value.rank() != 2 || nodes_[b].value.rank() != 1 ||
      nodes_[b].value.dim(0) != nodes_[x].value.cols())
    throw ShapeMismatch("add_rowvec: need (B,n) and {n}");
  LIPCERT_RECORD(Op::kAddRowVec, x, b);
}
NodeId Tape::add_chanvec(NodeId x, NodeId b) {
  if (nodes_[x].value.rank() != 4 || nodes_[b].value.rank() != 1 ||
      nodes_[b].value.dim(0) != nodes_[x].value.dim(1))
    throw ShapeMismatch("add_chanvec: need (B,C,H,W) and {C}");
  LIPCERT_RECORD(Op::kAddChanVec, x, b);
}
NodeId Tape::row_scale(NodeId x, NodeId d) {
  if (nodes_[x].value.rank() != 2 || nodes_[d].value.rank() != 1 ||
      nodes_[d].value.dim(0) != nodes_[x].value.rows())
    throw ShapeMismatch("row_scale: need (r,c) and {r}");
  LIPCERT_RECORD(Op::kRowScale, x, d);
}
NodeId Tape::col_scale(NodeId x, NodeId d) {
  if (nodes_[x].value.rank() != 2 || nodes_[d].value.rank() != 1 ||
      nodes_[d].value.dim(0) != nodes_[x].value.cols())
    throw ShapeMismatch("col_scale: need (r,c) and {c}");
  LIPCERT_RECORD(Op::kColScale, x, d);
}
NodeId Tape::exp(NodeId x) { LIPCERT_RECORD(Op::kExp, x); }
NodeId Tape::log(NodeId x) { LIPCERT_RECORD(Op::kLog, x); }
NodeId Tape::abs(NodeId x) { LIPCERT_RECORD(Op::kAbs, x); }
NodeId Tape::relu(NodeId x) { LIPCERT_RECORD(Op::kRelu, x); }

NodeId Tape::pow_nonneg(NodeId x, double p) {
  Node n{Op::kPowNonneg, {x}, {}, nodes_[x].requires_grad, {}, {p}};
  n.value = compute(nodes_, n);
  return push(std::move(n));
}

NodeId Tape::div_or_zero(NodeId a, NodeId b) {
  LIPCERT_RECORD(Op::kDivOrZero, a, b);
}
NodeId Tape::row_sum(NodeId x) {
  if (nodes_[x].value.rank() != 2) throw ShapeMismatch("row_sum: rank-2 input");
  LIPCERT_RECORD(Op::kRowSum, x);
}
NodeId Tape::reduce_sum(NodeId x) { LIPCERT_RECORD(Op::kReduceSum, x); }
NodeId Tape::cholesky(NodeId sigma) { LIPCERT_RECORD(Op::kCholesky, sigma); }
NodeId Tape::solve_triangular(NodeId l, NodeId b) {
  LIPCERT_RECORD(Op::kSolveTriangular, l, b);
}
NodeId Tape::solve_general(NodeId a, NodeId b) {
  LIPCERT_RECORD(Op::kSolveGeneral, a, b);
}
NodeId Tape::conv2d(NodeId x, NodeId w) { LIPCERT_RECORD(Op::kConv2d, x, w); }
NodeId Tape::minmax(NodeId x) { LIPCERT_RECORD(Op::kMinMax, x); }
NodeId Tape::append_col(NodeId f, NodeId s) {
  LIPCERT_RECORD(Op::kAppendCol, f, s);
}

NodeId Tape::pick_per_row(NodeId f, std::vector<std::size_t> idx) {
  const Tensor& fv = nodes_[f].value;
  if (fv.rank() != 2 || idx.size() != fv.rows())
    throw ShapeMismatch("pick_per_row: index count must equal row count");
  for (std::size_t j : idx)
    if (j >= fv.cols()) throw ShapeMismatch("pick_per_row: index out of range");
  Node n{Op::kPickPerRow, {f}, {}, nodes_[f].requires_grad, std::move(idx), {}};
  n.value = compute(nodes_, n);
  return push(std::move(n));
}

NodeId Tape::row_max_excluding(NodeId f, std::vector<std::size_t> excluded) {
  const Tensor& fv = nodes_[f].value;
  if (fv.rank() != 2 || excluded.size() != fv.rows() || fv.cols() < 2)
    throw ShapeMismatch("row_max_excluding: need (B,k) with k >= 2");
  for (std::size_t j : excluded)
    if (j >= fv.cols())
      throw ShapeMismatch("row_max_excluding: index out of range");
  Node n{Op::kRowMaxExcluding, {f},         {}, nodes_[f].requires_grad,
         std::move(excluded), {}};
  n.value = compute(nodes_, n);
  return push(std::move(n));
}

NodeId Tape::row_lse(NodeId f) {
  if (nodes_[f].value.rank() != 2 || nodes_[f].value.cols() == 0)
    throw ShapeMismatch("row_lse: rank-2 input with columns required");
  LIPCERT_RECORD(Op::kRowLse, f);
}

NodeId Tape::head_pair_bounds(NodeId w, std::vector<std::size_t> rows) {
  const Tensor& wv = nodes_[w].value;
  if (wv.rank() != 2) throw ShapeMismatch("head_pair_bounds: rank-2 weight");
  for (std::size_t j : rows)
    if (j >= wv.rows())
      throw ShapeMismatch("head_pair_bounds: row index out of range");
  Node n{Op::kHeadPairBounds, {w}, {}, nodes_[w].requires_grad,
         std::move(rows),     {}};
  n.value = compute(nodes_, n);
  return push(std::move(n));
}

NodeId Tape::slice_channels(NodeId x, std::size_t c0, std::size_t c1) {
  const Tensor& xv = nodes_[x].value;
  if (xv.rank() != 4 || c0 >= c1 || c1 > xv.dim(1))
    throw ShapeMismatch("slice_channels: bad channel range");
  Node n{Op::kSliceChannels, {x}, {}, nodes_[x].requires_grad, {c0, c1}, {}};
  n.value = compute(nodes_, n);
  return push(std::move(n));
}

NodeId Tape::concat_channels(const std::vector<NodeId>& xs) {
  if (xs.empty()) throw ShapeMismatch("concat_channels: empty list");
  const Tensor& first = nodes_[xs[0]].value;
  for (NodeId p : xs) {
    const Tensor& x = nodes_[p].value;
    if (x.rank() != 4 || x.dim(0) != first.dim(0) || x.dim(2) != first.dim(2) ||
        x.dim(3) != first.dim(3))
      throw ShapeMismatch("concat_channels: incompatible shapes");
  }
  Node n{Op::kConcatChannels, xs, {}, any_requires(nodes_, xs), {}, {}};
  n.value = compute(nodes_, n);
  return push(std::move(n));
}

NodeId Tape::pad_matrix(NodeId x, std::size_t rows, std::size_t cols) {
  const Tensor& xv = nodes_[x].value;
  if (xv.rank() != 2 || rows < xv.rows() || cols < xv.cols())
    throw ShapeMismatch("pad_matrix: target must cover the input block");
  Node n{Op::kPadMatrix, {x}, {}, nodes_[x].requires_grad, {rows, cols}, {}};
  n.value = compute(nodes_, n);
  return push(std::move(n));
}

#undef LIPCERT_RECORD

// ---------------------------------------------------------------------------
// reverse sweep

void Tape::accumulate(NodeId id, const Tensor& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (grads_[id].size() == 0) grads_[id] = Tensor(n.value.shape());
  if (!grads_[id].same_shape(g))
    throw ShapeMismatch("gradient shape does not match node shape");
  K().axpy(1.0, g.data(), grads_[id].data(), g.size());
}

void Tape::backward(NodeId root, const Tensor& seed) {
  const Node& r = nodes_.at(root);
  if (!seed.same_shape(r.value))
    throw ShapeMismatch("backward: seed shape must match root shape");
  grads_.assign(nodes_.size(), Tensor());
  if (!r.requires_grad) return;  // no parameter feeds the root
  grads_[root] = seed;
  for (NodeId id = root + 1; id-- > 0;) {
    if (grads_[id].size() == 0) continue;
    adjoint(id);
  }
}

const Tensor& Tape::grad(NodeId id) {
  if (grads_.size() != nodes_.size()) grads_.resize(nodes_.size());
  if (grads_[id].size() == 0) grads_[id] = Tensor(nodes_[id].value.shape());
  return grads_[id];
}

void Tape::adjoint(NodeId id) {
  Node& n = nodes_[id];
  const Tensor& g = grads_[id];
  auto P = [&](std::size_t i) -> const Tensor& {
    return nodes_[n.parents[i]].value;
  };
  switch (n.op) {
    case Op::kLeaf:
    case Op::kConstant:
    case Op::kDetach:
      return;
    case Op::kReshape:
      accumulate(n.parents[0], g.reshaped(P(0).shape()));
      return;
    case Op::kTranspose:
      accumulate(n.parents[0], numerics::transpose(g));
      return;
    case Op::kMatmul:
      if (nodes_[n.parents[0]].requires_grad)
        accumulate(n.parents[0], numerics::matmul_nt(g, P(1)));
      if (nodes_[n.parents[1]].requires_grad)
        accumulate(n.parents[1], numerics::matmul_tn(P(0), g));
      return;
    case Op::kAdd:
      accumulate(n.parents[0], g);
      accumulate(n.parents[1], g);
      return;
    case Op::kSub:
      accumulate(n.parents[0], g);
      accumulate(n.parents[1], numerics::scale(g, -1.0));
      return;
    case Op::kScale:
      accumulate(n.parents[0], numerics::scale(g, n.daux[0]));
      return;
    case Op::kMul: {
      if (nodes_[n.parents[0]].requires_grad) {
        Tensor da(g.shape());
        K().vmul(g.data(), P(1).data(), da.data(), g.size());
        accumulate(n.parents[0], da);
      }
      if (nodes_[n.parents[1]].requires_grad) {
        Tensor db(g.shape());
        K().vmul(g.data(), P(0).data(), db.data(), g.size());
        accumulate(n.parents[1], db);
      }
      return;
    }
    case Op::kMulScalar: {
      if (nodes_[n.parents[0]].requires_grad)
        accumulate(n.parents[0], numerics::scale(g, P(1)[0]));
      if (nodes_[n.parents[1]].requires_grad) {
        Tensor ds({1});
        ds[0] = K().dot(g.data(), P(0).data(), g.size());
        accumulate(n.parents[1], ds);
      }
      return;
    }
    case Op::kAddRowVec: {
      accumulate(n.parents[0], g);
      if (nodes_[n.parents[1]].requires_grad) {
        Tensor db({g.cols()});
        for (std::size_t i = 0; i < g.rows(); ++i)
          K().axpy(1.0, g.data() + i * g.cols(), db.data(), g.cols());
        accumulate(n.parents[1], db);
      }
      return;
    }
    case Op::kAddChanVec: {
      accumulate(n.parents[0], g);
      if (nodes_[n.parents[1]].requires_grad) {
        const std::size_t ch = g.dim(1), inner = g.dim(2) * g.dim(3);
        Tensor db({ch});
        for (std::size_t b = 0; b < g.dim(0); ++b)
          for (std::size_t c = 0; c < ch; ++c)
            db[c] += K().sum(g.data() + (b * ch + c) * inner, inner);
        accumulate(n.parents[1], db);
      }
      return;
    }
    case Op::kRowScale: {
      const Tensor &x = P(0), &d = P(1);
      if (nodes_[n.parents[0]].requires_grad) {
        Tensor dx = g;
        for (std::size_t i = 0; i < g.rows(); ++i)
          K().scal(d[i], dx.data() + i * g.cols(), g.cols());
        accumulate(n.parents[0], dx);
      }
      if (nodes_[n.parents[1]].requires_grad) {
        Tensor dd({g.rows()});
        for (std::size_t i = 0; i < g.rows(); ++i)
          dd[i] = K().dot(g.data() + i * g.cols(), x.data() + i * g.cols(),
                          g.cols());
        accumulate(n.parents[1], dd);
      }
      return;
    }
    case Op::kColScale: {
      const Tensor &x = P(0), &d = P(1);
      if (nodes_[n.parents[0]].requires_grad) {
        Tensor dx(g.shape());
        for (std::size_t i = 0; i < g.rows(); ++i)
          K().vmul(g.data() + i * g.cols(), d.data(), dx.data() + i * g.cols(),
                   g.cols());
        accumulate(n.parents[0], dx);
      }
      if (nodes_[n.parents[1]].requires_grad) {
        Tensor dd({g.cols()});
        std::vector<double> tmp(g.cols());
        for (std::size_t i = 0; i < g.rows(); ++i) {
          K().vmul(g.data() + i * g.cols(), x.data() + i * g.cols(), tmp.data(),
                   g.cols());
          K().axpy(1.0, tmp.data(), dd.data(), g.cols());
        }
        accumulate(n.parents[1], dd);
      }
      return;
    }
    case Op::kExp: {
      Tensor dx(g.shape());
      K().vmul(g.data(), n.value.data(), dx.data(), g.size());
      accumulate(n.parents[0], dx);
      return;
    }
    case Op::kLog: {
      Tensor dx(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] = g[i] / P(0)[i];
      accumulate(n.parents[0], dx);
      return;
    }
    case Op::kAbs: {
      Tensor dx(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double x = P(0)[i];
        dx[i] = x > 0.0 ? g[i] : (x < 0.0 ? -g[i] : 0.0);
      }
      accumulate(n.parents[0], dx);
      return;
    }
    case Op::kRelu: {
      Tensor dx(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i)
        dx[i] = P(0)[i] > 0.0 ? g[i] : 0.0;
      accumulate(n.parents[0], dx);
      return;
    }
    case Op::kPowNonneg: {
      const double p = n.daux[0];
      Tensor dx(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double x = P(0)[i];
        dx[i] = x > 0.0 ? p * std::pow(x, p - 1.0) * g[i] : 0.0;
      }
      accumulate(n.parents[0], dx);
      return;
    }
    case Op::kDivOrZero: {
      const Tensor &a = P(0), &b = P(1);
      if (nodes_[n.parents[0]].requires_grad) {
        Tensor da(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i)
          da[i] = b[i] != 0.0 ? g[i] / b[i] : 0.0;
        accumulate(n.parents[0], da);
      }
      if (nodes_[n.parents[1]].requires_grad) {
        Tensor db(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i)
          db[i] = b[i] != 0.0 ? -g[i] * a[i] / (b[i] * b[i]) : 0.0;
        accumulate(n.parents[1], db);
      }
      return;
    }
    case Op::kRowSum: {
      const Tensor& x = P(0);
      Tensor dx(x.shape());
      for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) dx(i, j) = g[i];
      accumulate(n.parents[0], dx);
      return;
    }
    case Op::kReduceSum:
      accumulate(n.parents[0], Tensor::full(P(0).shape(), g[0]));
      return;
    case Op::kCholesky: {
      const Tensor& l = n.value;
      Tensor glow = tril(g);
      Tensor p = phi_lower(numerics::matmul_tn(l, glow));
      Tensor s = numerics::add(p, numerics::transpose(p));
      Tensor lt = numerics::transpose(l);
      Tensor t1 = numerics::solve_triangular_upper(lt, s);
      Tensor t2 = numerics::transpose(
          numerics::solve_triangular_upper(lt, numerics::transpose(t1)));
      accumulate(n.parents[0], numerics::scale(t2, 0.5));
      return;
    }
    case Op::kSolveTriangular: {
      const Tensor& l = P(0);
      const Tensor& x = n.value;
      Tensor db = numerics::solve_triangular_upper(numerics::transpose(l), g);
      if (nodes_[n.parents[0]].requires_grad) {
        Tensor dl = numerics::matmul_nt(db, x);
        // forward reads only the lower triangle of L
        Tensor masked(dl.shape());
        for (std::size_t i = 0; i < dl.rows(); ++i)
          for (std::size_t j = 0; j <= i; ++j) masked(i, j) = -dl(i, j);
        accumulate(n.parents[0], masked);
      }
      accumulate(n.parents[1], db);
      return;
    }
    case Op::kSolveGeneral: {
      const Tensor& x = n.value;
      Tensor db = numerics::solve_general(numerics::transpose(P(0)), g);
      if (nodes_[n.parents[0]].requires_grad)
        accumulate(n.parents[0],
                   numerics::scale(numerics::matmul_nt(db, x), -1.0));
      accumulate(n.parents[1], db);
      return;
    }
    case Op::kConv2d: {
      const Tensor &x = P(0), &wt = P(1);
      const ConvDims d = conv_dims(x, wt);
      const std::size_t hw = d.h * d.w, ck = d.cin * d.kh * d.kw;
      const bool need_dx = nodes_[n.parents[0]].requires_grad;
      const bool need_dw = nodes_[n.parents[1]].requires_grad;
      Tensor dx(x.shape()), dw(wt.shape());
      std::vector<double> col, dcol;
      for (std::size_t b = 0; b < d.batch; ++b) {
        const double* gb = g.data() + b * d.cout * hw;
        if (need_dw) {
          im2col(x, b, d, col);
          // dW(o,r) += <g_o, col_r>
          for (std::size_t o = 0; o < d.cout; ++o)
            for (std::size_t r = 0; r < ck; ++r)
              dw[o * ck + r] +=
                  K().dot(gb + o * hw, col.data() + r * hw, hw);
        }
        if (need_dx) {
          dcol.assign(ck * hw, 0.0);
          // dcol = W^T g_b
          for (std::size_t o = 0; o < d.cout; ++o)
            for (std::size_t r = 0; r < ck; ++r)
              K().axpy(wt[o * ck + r], gb + o * hw, dcol.data() + r * hw, hw);
          col2im_acc(dcol, b, d, dx);
        }
      }
      if (need_dx) accumulate(n.parents[0], dx);
      if (need_dw) accumulate(n.parents[1], dw);
      return;
    }
    case Op::kMinMax: {
      const Tensor& x = P(0);
      const Axis1View v = axis1_view(x);
      Tensor dx(x.shape());
      for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t t = 0; t < v.channels / 2; ++t)
          for (std::size_t s = 0; s < v.inner; ++s) {
            const std::size_t i0 = (o * v.channels + 2 * t) * v.inner + s;
            const std::size_t i1 = i0 + v.inner;
            if (x[i0] <= x[i1]) {
              dx[i0] += g[i0];
              dx[i1] += g[i1];
            } else {
              dx[i1] += g[i0];
              dx[i0] += g[i1];
            }
          }
      accumulate(n.parents[0], dx);
      return;
    }
    case Op::kAppendCol: {
      const Tensor& f = P(0);
      const std::size_t k = f.cols();
      if (nodes_[n.parents[0]].requires_grad) {
        Tensor df(f.shape());
        for (std::size_t i = 0; i < f.rows(); ++i)
          std::copy_n(g.data() + i * (k + 1), k, df.data() + i * k);
        accumulate(n.parents[0], df);
      }
      if (nodes_[n.parents[1]].requires_grad) {
        Tensor ds({f.rows()});
        for (std::size_t i = 0; i < f.rows(); ++i) ds[i] = g(i, k);
        accumulate(n.parents[1], ds);
      }
      return;
    }
    case Op::kPickPerRow: {
      const Tensor& f = P(0);
      Tensor df(f.shape());
      for (std::size_t i = 0; i < n.iaux.size(); ++i) df(i, n.iaux[i]) = g[i];
      accumulate(n.parents[0], df);
      return;
    }
    case Op::kRowMaxExcluding: {
      const Tensor& f = P(0);
      Tensor df(f.shape());
      for (std::size_t i = 0; i < n.iaux.size(); ++i)
        df(i, argmax_excluding(f, i, n.iaux[i])) = g[i];
      accumulate(n.parents[0], df);
      return;
    }
    case Op::kRowLse: {
      const Tensor& f = P(0);
      Tensor df(f.shape());
      for (std::size_t i = 0; i < f.rows(); ++i) {
        const double* row = f.data() + i * f.cols();
        double m = row[0];
        for (std::size_t j = 1; j < f.cols(); ++j) m = std::max(m, row[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < f.cols(); ++j) s += std::exp(row[j] - m);
        for (std::size_t j = 0; j < f.cols(); ++j)
          df(i, j) = g[i] * std::exp(row[j] - m) / s;
      }
      accumulate(n.parents[0], df);
      return;
    }
    case Op::kHeadPairBounds: {
      const Tensor& w = P(0);
      const std::size_t k = w.rows(), d = w.cols();
      Tensor dw(w.shape());
      std::vector<double> diff(d);
      for (std::size_t r = 0; r < n.iaux.size(); ++r) {
        const std::size_t j = n.iaux[r];
        for (std::size_t i = 0; i < k; ++i) {
          const double dist = n.value(r, i);
          if (dist <= 0.0 || g(r, i) == 0.0) continue;
          K().vsub(w.data() + j * d, w.data() + i * d, diff.data(), d);
          const double c = g(r, i) / dist;
          K().axpy(c, diff.data(), dw.data() + j * d, d);
          K().axpy(-c, diff.data(), dw.data() + i * d, d);
        }
      }
      accumulate(n.parents[0], dw);
      return;
    }
    case Op::kSliceChannels: {
      const Tensor& x = P(0);
      const std::size_t c0 = n.iaux[0], c1 = n.iaux[1];
      const std::size_t inner = x.dim(2) * x.dim(3), ch = x.dim(1);
      Tensor dx(x.shape());
      for (std::size_t b = 0; b < x.dim(0); ++b)
        std::copy_n(g.data() + b * (c1 - c0) * inner, (c1 - c0) * inner,
                    dx.data() + (b * ch + c0) * inner);
      accumulate(n.parents[0], dx);
      return;
    }
    case Op::kConcatChannels: {
      const std::size_t total = n.value.dim(1);
      const std::size_t inner = n.value.dim(2) * n.value.dim(3);
      const std::size_t batch = n.value.dim(0);
      std::size_t at = 0;
      for (NodeId p : n.parents) {
        const Tensor& x = nodes_[p].value;
        if (nodes_[p].requires_grad) {
          Tensor dx(x.shape());
          for (std::size_t b = 0; b < batch; ++b)
            std::copy_n(g.data() + (b * total + at) * inner, x.dim(1) * inner,
                        dx.data() + b * x.dim(1) * inner);
          accumulate(p, dx);
        }
        at += x.dim(1);
      }
      return;
    }
    case Op::kPadMatrix: {
      const Tensor& x = P(0);
      Tensor dx(x.shape());
      for (std::size_t i = 0; i < x.rows(); ++i)
        std::copy_n(g.data() + i * n.iaux[1], x.cols(),
                    dx.data() + i * x.cols());
      accumulate(n.parents[0], dx);
      return;
    }
  }
  throw Error("adjoint: unknown op");
}

}  // namespace lipcert::autodiff
