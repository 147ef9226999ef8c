#pragma once

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "lipcert/autodiff/tape.hpp"
#include "lipcert/numerics/power_iteration.hpp"
#include "lipcert/tensor.hpp"

namespace lipcert::layers {

enum class Kind {
  kDenseGloro,
  kDenseCayley,
  kDenseMatexp,
  kDenseCholeskyResidual,
  kDenseLot,
  kAol,
  kSll,
  kSandwich,
  kResidualDenseGloro,
  kMinMax,
  kConvGloro,
  kLiresnetBlock,
  kSpatialMlp,
  kFlatten,
  kHead,
};

const char* kind_name(Kind k);
Kind kind_from_name(const std::string& name);

using Shape = std::vector<std::size_t>;
using autodiff::NodeId;
using autodiff::Tape;

// A network layer. Raw parameters live in the layer; training tapes get one
// leaf per parameter (in params() order) and build() wires the forward graph
// from those leaves, re-deriving any constrained weight on-tape so gradients
// reach the raw parameterization. Frozen paths (certification, attacks) use
// the cached effective weights from the last refresh instead.
class Layer {
 public:
  virtual ~Layer() = default;

  virtual Kind kind() const = 0;
  virtual Shape in_shape() const = 0;
  virtual Shape out_shape() const = 0;
  virtual std::vector<Tensor*> params() = 0;
  virtual void init(std::mt19937_64& rng) = 0;
  virtual std::string spec_line() const = 0;

  virtual NodeId build(Tape& t, NodeId x, const std::vector<NodeId>& pids) = 0;
  virtual NodeId build_frozen(Tape& t, NodeId x) const = 0;

  // One warm-started power-iteration sweep (cheap, once per training step)
  // for spectrally-bounded layers; constrained layers re-derive their
  // effective weights from the raw parameters instead.
  virtual void refresh_train_step() = 0;
  // Converged bound refresh used before any certification or reported VRA.
  virtual void refresh_converged() = 0;

  virtual double lip_bound() const = 0;
  // True when the bound depends on parameters (enters the training loss).
  virtual bool bound_is_parametric() const { return false; }
  // Scalar {1} node for the bound with the iteration vectors held constant;
  // only meaningful when bound_is_parametric().
  virtual NodeId lip_node(Tape& t, const std::vector<NodeId>& pids);

  // Frozen numeric forward (batch-leading), evaluated through build_frozen
  // so eval and attack graphs are computed by the same code path.
  Tensor forward_eval(const Tensor& x) const;
};

// ---------------------------------------------------------------------------
// spectrally-bounded (power-iteration) layers

class DenseGloro : public Layer {
 public:
  DenseGloro(std::size_t in, std::size_t out);
  Kind kind() const override { return Kind::kDenseGloro; }
  Shape in_shape() const override { return {in_}; }
  Shape out_shape() const override { return {out_}; }
  std::vector<Tensor*> params() override { return {&w_, &b_}; }
  void init(std::mt19937_64& rng) override;
  std::string spec_line() const override;
  NodeId build(Tape& t, NodeId x, const std::vector<NodeId>& pids) override;
  NodeId build_frozen(Tape& t, NodeId x) const override;
  void refresh_train_step() override;
  void refresh_converged() override;
  double lip_bound() const override;
  bool bound_is_parametric() const override { return true; }
  NodeId lip_node(Tape& t, const std::vector<NodeId>& pids) override;

  const Tensor& weight() const { return w_; }

 private:
  std::size_t in_, out_;
  Tensor w_, b_;
  numerics::SpectralEstimate pi_;
};

class ResidualDenseGloro : public Layer {
 public:
  explicit ResidualDenseGloro(std::size_t n);
  Kind kind() const override { return Kind::kResidualDenseGloro; }
  Shape in_shape() const override { return {n_}; }
  Shape out_shape() const override { return {n_}; }
  std::vector<Tensor*> params() override { return {&w_, &b_}; }
  void init(std::mt19937_64& rng) override;
  std::string spec_line() const override;
  NodeId build(Tape& t, NodeId x, const std::vector<NodeId>& pids) override;
  NodeId build_frozen(Tape& t, NodeId x) const override;
  void refresh_train_step() override;
  void refresh_converged() override;
  double lip_bound() const override;
  bool bound_is_parametric() const override { return true; }
  NodeId lip_node(Tape& t, const std::vector<NodeId>& pids) override;

 private:
  std::size_t n_;
  Tensor w_, b_;
  numerics::SpectralEstimate pi_;
};

class ConvGloro : public Layer {
 public:
  ConvGloro(std::size_t in_ch, std::size_t out_ch, std::size_t h,
            std::size_t w, std::size_t k);
  Kind kind() const override { return Kind::kConvGloro; }
  Shape in_shape() const override { return {c_, h_, w_dim_}; }
  Shape out_shape() const override { return {o_, h_, w_dim_}; }
  std::vector<Tensor*> params() override { return {&w_, &b_}; }
  void init(std::mt19937_64& rng) override;
  std::string spec_line() const override;
  NodeId build(Tape& t, NodeId x, const std::vector<NodeId>& pids) override;
  NodeId build_frozen(Tape& t, NodeId x) const override;
  void refresh_train_step() override;
  void refresh_converged() override;
  double lip_bound() const override;
  bool bound_is_parametric() const override { return true; }
  NodeId lip_node(Tape& t, const std::vector<NodeId>& pids) override;

  const Tensor& kernel() const { return w_; }

 private:
  numerics::LinearOperator op() const;
  std::size_t c_, o_, h_, w_dim_, k_;
  Tensor w_, b_;
  numerics::SpectralEstimate pi_;
};

class LiresnetBlock : public Layer {
 public:
  LiresnetBlock(std::size_t ch, std::size_t h, std::size_t w, std::size_t k);
  Kind kind() const override { return Kind::kLiresnetBlock; }
  Shape in_shape() const override { return {c_, h_, w_dim_}; }
  Shape out_shape() const override { return {c_, h_, w_dim_}; }
  std::vector<Tensor*> params() override { return {&w_, &b_}; }
  void init(std::mt19937_64& rng) override;
  std::string spec_line() const override;
  NodeId build(Tape& t, NodeId x, const std::vector<NodeId>& pids) override;
  NodeId build_frozen(Tape& t, NodeId x) const override;
  void refresh_train_step() override;
  void refresh_converged() override;
  double lip_bound() const override;
  bool bound_is_parametric() const override { return true; }
  NodeId lip_node(Tape& t, const std::vector<NodeId>& pids) override;

 private:
  numerics::LinearOperator op() const;
  std::size_t c_, h_, w_dim_, k_;
  Tensor w_, b_;
  numerics::SpectralEstimate pi_;
};

class SpatialMlp : public Layer {
 public:
  SpatialMlp(std::size_t ch, std::size_t s, std::size_t groups);
  Kind kind() const override { return Kind::kSpatialMlp; }
  Shape in_shape() const override { return {c_, s_, s_}; }
  Shape out_shape() const override { return {c_, s_, s_}; }
  std::vector<Tensor*> params() override;
  void init(std::mt19937_64& rng) override;
  std::string spec_line() const override;
  NodeId build(Tape& t, NodeId x, const std::vector<NodeId>& pids) override;
  NodeId build_frozen(Tape& t, NodeId x) const override;
  void refresh_train_step() override;
  void refresh_converged() override;
  double lip_bound() const override;
  bool bound_is_parametric() const override { return true; }
  NodeId lip_node(Tape& t, const std::vector<NodeId>& pids) override;

 private:
  void refresh(std::size_t iters, double tol);
  std::size_t c_, s_, g_;
  std::vector<Tensor> w_;  // one (s^2, s^2) mixing matrix per group
  Tensor b_;
  std::vector<numerics::SpectralEstimate> pi_;
};

class Head : public Layer {
 public:
  Head(std::size_t in, std::size_t classes);
  Kind kind() const override { return Kind::kHead; }
  Shape in_shape() const override { return {in_}; }
  Shape out_shape() const override { return {classes_}; }
  std::vector<Tensor*> params() override { return {&w_, &b_}; }
  void init(std::mt19937_64& rng) override;
  std::string spec_line() const override;
  NodeId build(Tape& t, NodeId x, const std::vector<NodeId>& pids) override;
  NodeId build_frozen(Tape& t, NodeId x) const override;
  void refresh_train_step() override;
  void refresh_converged() override;
  double lip_bound() const override;
  bool bound_is_parametric() const override { return true; }
  NodeId lip_node(Tape& t, const std::vector<NodeId>& pids) override;

  std::size_t classes() const { return classes_; }
  const Tensor& weight() const { return w_; }
  const Tensor& bias() const { return b_; }

 private:
  std::size_t in_, classes_;
  Tensor w_, b_;
  numerics::SpectralEstimate pi_;
};

// ---------------------------------------------------------------------------
// 1-Lipschitz-by-construction layers

// Dense layer whose weight is orthogonal by one of four mechanisms; for
// rectangular shapes the square core of size min(in, out) is orthogonalized
// and embedded top-left in a zero matrix.
class DenseOrtho : public Layer {
 public:
  DenseOrtho(Kind mechanism, std::size_t in, std::size_t out,
             std::size_t newton_iters = 20);
  Kind kind() const override { return mech_; }
  Shape in_shape() const override { return {in_}; }
  Shape out_shape() const override { return {out_}; }
  std::vector<Tensor*> params() override { return {&v_, &b_}; }
  void init(std::mt19937_64& rng) override;
  std::string spec_line() const override;
  NodeId build(Tape& t, NodeId x, const std::vector<NodeId>& pids) override;
  NodeId build_frozen(Tape& t, NodeId x) const override;
  void refresh_train_step() override;
  void refresh_converged() override { refresh_train_step(); }
  double lip_bound() const override { return 1.0; }

  const Tensor& effective_weight() const { return w_eff_; }

 private:
  Matrix core() const;
  NodeId build_core(Tape& t, NodeId v) const;
  Kind mech_;
  std::size_t in_, out_, core_n_, newton_iters_;
  Tensor v_, b_, w_eff_;
};

class AolDense : public Layer {
 public:
  AolDense(std::size_t in, std::size_t out, double exponent = -0.5);
  Kind kind() const override { return Kind::kAol; }
  Shape in_shape() const override { return {in_}; }
  Shape out_shape() const override { return {out_}; }
  std::vector<Tensor*> params() override { return {&v_, &b_}; }
  void init(std::mt19937_64& rng) override;
  std::string spec_line() const override;
  NodeId build(Tape& t, NodeId x, const std::vector<NodeId>& pids) override;
  NodeId build_frozen(Tape& t, NodeId x) const override;
  void refresh_train_step() override;
  void refresh_converged() override { refresh_train_step(); }
  double lip_bound() const override { return 1.0; }

  double exponent() const { return exponent_; }
  const Tensor& effective_weight() const { return w_eff_; }

 private:
  std::size_t in_, out_;
  double exponent_;
  Tensor v_, b_, w_eff_;
};

// Residual SDP-certified block x - 2 W^T D^{-1} sigma(W x + b); the outer
// factor is the transpose of the inner one so the Gram pairing that makes
// the SDP certificate valid is preserved.
class SllBlock : public Layer {
 public:
  explicit SllBlock(std::size_t n);
  Kind kind() const override { return Kind::kSll; }
  Shape in_shape() const override { return {n_}; }
  Shape out_shape() const override { return {n_}; }
  std::vector<Tensor*> params() override { return {&w_, &q_log_, &b_}; }
  void init(std::mt19937_64& rng) override;
  std::string spec_line() const override;
  NodeId build(Tape& t, NodeId x, const std::vector<NodeId>& pids) override;
  NodeId build_frozen(Tape& t, NodeId x) const override;
  void refresh_train_step() override;
  void refresh_converged() override { refresh_train_step(); }
  double lip_bound() const override { return 1.0; }

  void set_weight(const Tensor& w, const Tensor& q_log, const Tensor& b);

 private:
  std::size_t n_;
  Tensor w_, q_log_, b_;
  Tensor dinv_;  // cached rescaling vector for the frozen path
};

// sqrt(2) A^T Psi sigma(Psi^{-1} B x + b) with [A^T; B^T] the two halves of
// a column-orthonormal 2n x n matrix built by a Cayley transform.
class SandwichBlock : public Layer {
 public:
  explicit SandwichBlock(std::size_t n);
  Kind kind() const override { return Kind::kSandwich; }
  Shape in_shape() const override { return {n_}; }
  Shape out_shape() const override { return {n_}; }
  std::vector<Tensor*> params() override {
    return {&pu_, &pv_, &psi_log_, &b_};
  }
  void init(std::mt19937_64& rng) override;
  std::string spec_line() const override;
  NodeId build(Tape& t, NodeId x, const std::vector<NodeId>& pids) override;
  NodeId build_frozen(Tape& t, NodeId x) const override;
  void refresh_train_step() override;
  void refresh_converged() override { refresh_train_step(); }
  double lip_bound() const override { return 1.0; }

  // Q1 = A^T and Q2 = B^T stacked as [Q1; Q2] are column-orthonormal.
  const Tensor& q1() const { return q1_; }
  const Tensor& q2t() const { return q2t_; }

 private:
  std::size_t n_;
  Tensor pu_, pv_, psi_log_, b_;
  Tensor q1_, q2t_, psi_, psi_inv_;
};

// ---------------------------------------------------------------------------
// stateless layers

class MinMaxLayer : public Layer {
 public:
  explicit MinMaxLayer(Shape feature_shape);
  Kind kind() const override { return Kind::kMinMax; }
  Shape in_shape() const override { return shape_; }
  Shape out_shape() const override { return shape_; }
  std::vector<Tensor*> params() override { return {}; }
  void init(std::mt19937_64&) override {}
  std::string spec_line() const override;
  NodeId build(Tape& t, NodeId x, const std::vector<NodeId>& pids) override;
  NodeId build_frozen(Tape& t, NodeId x) const override;
  void refresh_train_step() override {}
  void refresh_converged() override {}
  double lip_bound() const override { return 1.0; }

 private:
  Shape shape_;
};

class Flatten : public Layer {
 public:
  Flatten(std::size_t ch, std::size_t h, std::size_t w);
  Kind kind() const override { return Kind::kFlatten; }
  Shape in_shape() const override { return {c_, h_, w_dim_}; }
  Shape out_shape() const override { return {c_ * h_ * w_dim_}; }
  std::vector<Tensor*> params() override { return {}; }
  void init(std::mt19937_64&) override {}
  std::string spec_line() const override;
  NodeId build(Tape& t, NodeId x, const std::vector<NodeId>& pids) override;
  NodeId build_frozen(Tape& t, NodeId x) const override;
  void refresh_train_step() override {}
  void refresh_converged() override {}
  double lip_bound() const override { return 1.0; }

 private:
  std::size_t c_, h_, w_dim_;
};

// ---------------------------------------------------------------------------

struct Network {
  std::vector<std::unique_ptr<Layer>> layers;  // last one must be a Head
  Shape input_shape;

  void validate() const;  // shape chaining, head placement
  Head& head();
  const Head& head() const;
  std::size_t class_count() const { return head().classes(); }

  std::vector<Tensor*> all_params();
  // Seeds raw parameters and brings every cached bound/effective weight to a
  // converged state, so frozen paths are valid immediately.
  void init(std::mt19937_64& rng);
  void refresh_train_step();
  void refresh_converged();

  Tensor forward_eval(const Tensor& x) const;
  NodeId build_frozen(Tape& t, NodeId x) const;

  struct BuiltGraph {
    NodeId logits;
    // one leaf per parameter, grouped per layer in params() order
    std::vector<std::vector<NodeId>> pids;
  };
  BuiltGraph build_train(Tape& t, NodeId x);

  // Product ({1} node) of the parametric backbone bounds (head excluded);
  // constant 1 when the backbone is fully constrained.
  NodeId build_backbone_lip(Tape& t,
                            const std::vector<std::vector<NodeId>>& pids);
};

struct LipReport {
  std::vector<double> per_layer;
  double backbone_product;  // product over all layers except the head
  double head_norm;
};

LipReport network_lipschitz(const Network& net);

std::unique_ptr<Layer> make_layer_from_spec(const std::string& line);

}  // namespace lipcert::layers
