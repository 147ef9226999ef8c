#pragma once

#include <vector>

#include "lipcert/tensor.hpp"

namespace lipcert::autodiff {

using NodeId = std::size_t;

enum class Op {
  kLeaf,
  kConstant,
  kDetach,
  kReshape,
  kTranspose,
  kMatmul,
  kAdd,
  kSub,
  kScale,
  kMul,
  kMulScalar,
  kAddRowVec,
  kAddChanVec,
  kRowScale,
  kColScale,
  kExp,
  kLog,
  kAbs,
  kRelu,
  kPowNonneg,
  kDivOrZero,
  kRowSum,
  kReduceSum,
  kCholesky,
  kSolveTriangular,
  kSolveGeneral,
  kConv2d,
  kMinMax,
  kAppendCol,
  kPickPerRow,
  kRowMaxExcluding,
  kRowLse,
  kHeadPairBounds,
  kSliceChannels,
  kConcatChannels,
  kPadMatrix,
};

struct Node {
  Op op;
  std::vector<NodeId> parents;
  Tensor value;
  bool requires_grad = false;
  std::vector<std::size_t> iaux;  // indices, slice bounds, conv dims
  std::vector<double> daux;       // scale factors, exponents
};

// Append-only computation tape, define-by-run: each op computes its value as it
// is recorded, so the graph is always topologically ordered. One tape per
// training step; leaves are parameters (gradients tracked), constants are
// batch data and detached quantities.
class Tape {
 public:
  NodeId leaf(Tensor value);
  NodeId constant(Tensor value);

  // Replace a leaf/constant value (same shape) and recompute derived nodes
  // with forward(). Replays are bit-identical for identical inputs.
  void set_value(NodeId id, Tensor value);
  void forward();

  const Tensor& value(NodeId id) const;
  const Node& node(NodeId id) const { return nodes_[id]; }
  std::size_t size() const { return nodes_.size(); }

  // Reverse sweep from root. Seeds dRoot = seed; gradients of all
  // requires-grad nodes accumulate. A parameter with no path to the root
  // simply keeps a zero gradient.
  void backward(NodeId root, const Tensor& seed);
  const Tensor& grad(NodeId id);

  // --- primitives ---
  NodeId detach(NodeId x);
  NodeId reshape(NodeId x, std::vector<std::size_t> shape);
  NodeId transpose(NodeId x);
  NodeId matmul(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId scale(NodeId x, double c);
  NodeId mul(NodeId a, NodeId b);
  // x * s with s a single-element node, broadcast over x
  NodeId mul_scalar(NodeId x, NodeId s);
  // rows of x plus vector b (bias broadcast)
  NodeId add_rowvec(NodeId x, NodeId b);
  // x (B,C,H,W) plus per-channel vector b {C}
  NodeId add_chanvec(NodeId x, NodeId b);
  NodeId row_scale(NodeId x, NodeId d);  // out(i,j) = d[i] * x(i,j)
  NodeId col_scale(NodeId x, NodeId d);  // out(i,j) = x(i,j) * d[j]
  NodeId exp(NodeId x);
  NodeId log(NodeId x);
  NodeId abs(NodeId x);
  NodeId relu(NodeId x);
  // x_i > 0 ? x_i^p : 0  (negative-base-safe power for diagonal scalings)
  NodeId pow_nonneg(NodeId x, double p);
  // a_i / b_i where b_i != 0, else 0
  NodeId div_or_zero(NodeId a, NodeId b);
  NodeId row_sum(NodeId x);     // rank-2 -> {rows}
  NodeId reduce_sum(NodeId x);  // any shape -> {1}
  NodeId cholesky(NodeId sigma);
  NodeId solve_triangular(NodeId l, NodeId b);
  NodeId solve_general(NodeId a, NodeId b);
  // stride-1, zero-padded "same" convolution; x (B,C,H,W), w (O,C,kh,kw),
  // odd kernel sides
  NodeId conv2d(NodeId x, NodeId w);
  // adjacent columns paired into (min, max); width must be even
  NodeId minmax(NodeId x);
  // f (B,k) plus one extra column s {B} -> (B,k+1)
  NodeId append_col(NodeId f, NodeId s);
  // out{B}: f(b, idx[b])
  NodeId pick_per_row(NodeId f, std::vector<std::size_t> idx);
  // out{B}: max over j != excluded[b] of f(b,j); ties pick the first max
  NodeId row_max_excluding(NodeId f, std::vector<std::size_t> excluded);
  // out{B}: log sum_j exp(f(b,j)), max-shifted
  NodeId row_lse(NodeId f);
  // w (k,d), rows{B}: out(r,i) = ||w_rows[r] - w_i||_2
  NodeId head_pair_bounds(NodeId w, std::vector<std::size_t> rows);
  // rank-4 channel slice [c0, c1) / concat along channel axis
  NodeId slice_channels(NodeId x, std::size_t c0, std::size_t c1);
  NodeId concat_channels(const std::vector<NodeId>& xs);
  // embed a rank-2 block at the top-left corner of a rows x cols zero matrix
  NodeId pad_matrix(NodeId x, std::size_t rows, std::size_t cols);

 private:
  NodeId push(Node n);
  void accumulate(NodeId id, const Tensor& g);
  void adjoint(NodeId id);

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

}  // namespace lipcert::autodiff
