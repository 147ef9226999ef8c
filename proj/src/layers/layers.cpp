#include "lipcert/layers/layers.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "lipcert/errors.hpp"
#include "lipcert/layers/conv_ops.hpp"
#include "lipcert/layers/ortho.hpp"
#include "lipcert/numerics/linalg.hpp"

namespace lipcert::layers {

namespace {

constexpr double kPiTol = 1e-6;
constexpr std::size_t kDenseEvalIters = 100;
constexpr std::size_t kConvEvalIters = 500;
// Conv operators routinely have clustered top singular values
// (sigma_2/sigma_1 above 0.999 for ordinary random kernels), where the
// single-vector iteration stalls and its stop rule fires early with an
// O(tol / spectral gap) residual. Certification-time conv refreshes
// therefore use the block variant (rate sigma_9/sigma_1) with a tighter
// tolerance; per-train-step warm updates stay single-vector.
constexpr double kConvEvalTol = 1e-9;
constexpr std::size_t kConvBlock = 8;

void uniform_init(Tensor& t, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(-bound, bound);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = d(rng);
}

NodeId affine(Tape& t, NodeId x, NodeId w, NodeId b) {
  return t.add_rowvec(t.matmul(x, t.transpose(w)), b);
}

// u^T W v with the iteration vectors held as constants (detached).
NodeId bilinear_bound(Tape& t, NodeId w, const numerics::SpectralEstimate& pi) {
  if (pi.fresh())
    throw Error("lip_node: power-iteration state not initialized");
  const Matrix u({1, pi.u.size()}, pi.u);
  const Matrix v({pi.v.size(), 1}, pi.v);
  return t.reshape(t.matmul(t.matmul(t.constant(u), w), t.constant(v)), {1});
}

Tensor vec_tensor(const std::vector<double>& v, const Shape& shape) {
  return Tensor(shape, v);
}

std::size_t batch_of(const Tape& t, NodeId x) { return t.value(x).dim(0); }

}  // namespace

const char* kind_name(Kind k) {
  switch (k) {
    case Kind::kDenseGloro: return "dense_gloro";
    case Kind::kDenseCayley: return "dense_cayley";
    case Kind::kDenseMatexp: return "dense_matexp";
    case Kind::kDenseCholeskyResidual: return "dense_cholesky_residual";
    case Kind::kDenseLot: return "dense_lot";
    case Kind::kAol: return "aol";
    case Kind::kSll: return "sll";
    case Kind::kSandwich: return "sandwich";
    case Kind::kResidualDenseGloro: return "residual_dense_gloro";
    case Kind::kMinMax: return "minmax";
    case Kind::kConvGloro: return "conv_gloro";
    case Kind::kLiresnetBlock: return "liresnet_block";
    case Kind::kSpatialMlp: return "spatial_mlp";
    case Kind::kFlatten: return "flatten";
    case Kind::kHead: return "head";
  }
  throw Error("kind_name: unknown kind");
}

Kind kind_from_name(const std::string& name) {
  static const std::map<std::string, Kind> table = {
      {"dense_gloro", Kind::kDenseGloro},
      {"dense_cayley", Kind::kDenseCayley},
      {"dense_matexp", Kind::kDenseMatexp},
      {"dense_cholesky_residual", Kind::kDenseCholeskyResidual},
      {"dense_lot", Kind::kDenseLot},
      {"aol", Kind::kAol},
      {"sll", Kind::kSll},
      {"sandwich", Kind::kSandwich},
      {"residual_dense_gloro", Kind::kResidualDenseGloro},
      {"minmax", Kind::kMinMax},
      {"conv_gloro", Kind::kConvGloro},
      {"liresnet_block", Kind::kLiresnetBlock},
      {"spatial_mlp", Kind::kSpatialMlp},
      {"flatten", Kind::kFlatten},
      {"head", Kind::kHead},
  };
  auto it = table.find(name);
  if (it == table.end()) throw ConfigError("unknown layer kind: " + name);
  return it->second;
}

NodeId Layer::lip_node(Tape&, const std::vector<NodeId>&) {
  throw Error("lip_node: layer bound is not parametric");
}

Tensor Layer::forward_eval(const Tensor& x) const {
  Tape t;
  const NodeId in = t.constant(x);
  return t.value(build_frozen(t, in));
}

// ---------------------------------------------------------------------------
// DenseGloro

DenseGloro::DenseGloro(std::size_t in, std::size_t out)
    : in_(in), out_(out), w_({out, in}), b_({out}) {
  if (in == 0 || out == 0) throw ShapeMismatch("dense_gloro: zero dimension");
}

void DenseGloro::init(std::mt19937_64& rng) {
  uniform_init(w_, 1.0 / std::sqrt(static_cast<double>(in_)), rng);
  b_ = Tensor({out_});
  pi_ = {};
}

std::string DenseGloro::spec_line() const {
  std::ostringstream os;
  os << "dense_gloro in=" << in_ << " out=" << out_;
  return os.str();
}

NodeId DenseGloro::build(Tape& t, NodeId x, const std::vector<NodeId>& pids) {
  return affine(t, x, pids[0], pids[1]);
}

NodeId DenseGloro::build_frozen(Tape& t, NodeId x) const {
  return affine(t, x, t.constant(w_), t.constant(b_));
}

void DenseGloro::refresh_train_step() {
  numerics::power_iteration(numerics::LinearOperator::from_matrix(w_), pi_, 1,
                            kPiTol);
}

void DenseGloro::refresh_converged() {
  numerics::power_iteration(numerics::LinearOperator::from_matrix(w_), pi_,
                            kDenseEvalIters, kPiTol);
}

double DenseGloro::lip_bound() const { return pi_.sigma; }

NodeId DenseGloro::lip_node(Tape& t, const std::vector<NodeId>& pids) {
  return bilinear_bound(t, pids[0], pi_);
}

// ---------------------------------------------------------------------------
// ResidualDenseGloro

ResidualDenseGloro::ResidualDenseGloro(std::size_t n)
    : n_(n), w_({n, n}), b_({n}) {
  if (n == 0) throw ShapeMismatch("residual_dense_gloro: zero dimension");
}

void ResidualDenseGloro::init(std::mt19937_64& rng) {
  uniform_init(w_, 1.0 / std::sqrt(static_cast<double>(n_)), rng);
  b_ = Tensor({n_});
  pi_ = {};
}

std::string ResidualDenseGloro::spec_line() const {
  std::ostringstream os;
  os << "residual_dense_gloro n=" << n_;
  return os.str();
}

NodeId ResidualDenseGloro::build(Tape& t, NodeId x,
                                 const std::vector<NodeId>& pids) {
  return t.add_rowvec(t.add(x, t.matmul(x, t.transpose(pids[0]))), pids[1]);
}

NodeId ResidualDenseGloro::build_frozen(Tape& t, NodeId x) const {
  const NodeId w = t.constant(w_);
  return t.add_rowvec(t.add(x, t.matmul(x, t.transpose(w))), t.constant(b_));
}

void ResidualDenseGloro::refresh_train_step() {
  const Matrix eff = numerics::add(w_, Tensor::identity(n_));
  numerics::power_iteration(numerics::LinearOperator::from_matrix(eff), pi_, 1,
                            kPiTol);
}

void ResidualDenseGloro::refresh_converged() {
  const Matrix eff = numerics::add(w_, Tensor::identity(n_));
  numerics::power_iteration(numerics::LinearOperator::from_matrix(eff), pi_,
                            kDenseEvalIters, kPiTol);
}

double ResidualDenseGloro::lip_bound() const { return pi_.sigma; }

NodeId ResidualDenseGloro::lip_node(Tape& t,
                                    const std::vector<NodeId>& pids) {
  const NodeId eff = t.add(pids[0], t.constant(Tensor::identity(n_)));
  return bilinear_bound(t, eff, pi_);
}

// ---------------------------------------------------------------------------
// ConvGloro

ConvGloro::ConvGloro(std::size_t in_ch, std::size_t out_ch, std::size_t h,
                     std::size_t w, std::size_t k)
    : c_(in_ch), o_(out_ch), h_(h), w_dim_(w), k_(k),
      w_({out_ch, in_ch, k, k}), b_({out_ch}) {
  if (k % 2 == 0) throw ShapeMismatch("conv_gloro: kernel must be odd");
}

void ConvGloro::init(std::mt19937_64& rng) {
  uniform_init(w_, 1.0 / std::sqrt(static_cast<double>(c_ * k_ * k_)), rng);
  b_ = Tensor({o_});
  pi_ = {};
}

std::string ConvGloro::spec_line() const {
  std::ostringstream os;
  os << "conv_gloro in_c=" << c_ << " out_c=" << o_ << " h=" << h_
     << " w=" << w_dim_ << " k=" << k_;
  return os.str();
}

NodeId ConvGloro::build(Tape& t, NodeId x, const std::vector<NodeId>& pids) {
  return t.add_chanvec(t.conv2d(x, pids[0]), pids[1]);
}

NodeId ConvGloro::build_frozen(Tape& t, NodeId x) const {
  return t.add_chanvec(t.conv2d(x, t.constant(w_)), t.constant(b_));
}

numerics::LinearOperator ConvGloro::op() const {
  numerics::LinearOperator lin;
  lin.out_dim = o_ * h_ * w_dim_;
  lin.in_dim = c_ * h_ * w_dim_;
  lin.apply = [this](std::span<const double> in, std::span<double> out) {
    conv_apply(w_, in, out, c_, h_, w_dim_);
  };
  lin.apply_transpose = [this](std::span<const double> in,
                               std::span<double> out) {
    conv_apply_adjoint(w_, in, out, c_, h_, w_dim_);
  };
  return lin;
}

void ConvGloro::refresh_train_step() {
  numerics::power_iteration(op(), pi_, 1, kPiTol);
}

void ConvGloro::refresh_converged() {
  numerics::power_iteration_block(op(), pi_, kConvBlock, kConvEvalIters,
                                  kConvEvalTol);
}

double ConvGloro::lip_bound() const { return pi_.sigma; }

NodeId ConvGloro::lip_node(Tape& t, const std::vector<NodeId>& pids) {
  if (pi_.fresh())
    throw Error("lip_node: power-iteration state not initialized");
  const NodeId v = t.constant(vec_tensor(pi_.v, {1, c_, h_, w_dim_}));
  const NodeId u = t.constant(vec_tensor(pi_.u, {1, o_, h_, w_dim_}));
  return t.reduce_sum(t.mul(t.conv2d(v, pids[0]), u));
}

// ---------------------------------------------------------------------------
// LiresnetBlock

LiresnetBlock::LiresnetBlock(std::size_t ch, std::size_t h, std::size_t w,
                             std::size_t k)
    : c_(ch), h_(h), w_dim_(w), k_(k), w_({ch, ch, k, k}), b_({ch}) {
  if (k % 2 == 0) throw ShapeMismatch("liresnet_block: kernel must be odd");
}

void LiresnetBlock::init(std::mt19937_64& rng) {
  uniform_init(w_, 1.0 / std::sqrt(static_cast<double>(c_ * k_ * k_)), rng);
  b_ = Tensor({c_});
  pi_ = {};
}

std::string LiresnetBlock::spec_line() const {
  std::ostringstream os;
  os << "liresnet_block c=" << c_ << " h=" << h_ << " w=" << w_dim_
     << " k=" << k_;
  return os.str();
}

NodeId LiresnetBlock::build(Tape& t, NodeId x,
                            const std::vector<NodeId>& pids) {
  return t.add_chanvec(t.add(x, t.conv2d(x, pids[0])), pids[1]);
}

NodeId LiresnetBlock::build_frozen(Tape& t, NodeId x) const {
  return t.add_chanvec(t.add(x, t.conv2d(x, t.constant(w_))),
                       t.constant(b_));
}

numerics::LinearOperator LiresnetBlock::op() const {
  numerics::LinearOperator lin;
  lin.out_dim = c_ * h_ * w_dim_;
  lin.in_dim = lin.out_dim;
  lin.apply = [this](std::span<const double> in, std::span<double> out) {
    conv_apply(w_, in, out, c_, h_, w_dim_);
    for (std::size_t i = 0; i < in.size(); ++i) out[i] += in[i];
  };
  lin.apply_transpose = [this](std::span<const double> in,
                               std::span<double> out) {
    conv_apply_adjoint(w_, in, out, c_, h_, w_dim_);
    for (std::size_t i = 0; i < in.size(); ++i) out[i] += in[i];
  };
  return lin;
}

void LiresnetBlock::refresh_train_step() {
  numerics::power_iteration(op(), pi_, 1, kPiTol);
}

void LiresnetBlock::refresh_converged() {
  numerics::power_iteration_block(op(), pi_, kConvBlock, kConvEvalIters,
                                  kConvEvalTol);
}

double LiresnetBlock::lip_bound() const { return pi_.sigma; }

NodeId LiresnetBlock::lip_node(Tape& t, const std::vector<NodeId>& pids) {
  if (pi_.fresh())
    throw Error("lip_node: power-iteration state not initialized");
  const NodeId v = t.constant(vec_tensor(pi_.v, {1, c_, h_, w_dim_}));
  const NodeId u = t.constant(vec_tensor(pi_.u, {1, c_, h_, w_dim_}));
  return t.reduce_sum(t.mul(t.add(v, t.conv2d(v, pids[0])), u));
}

// ---------------------------------------------------------------------------
// SpatialMlp

SpatialMlp::SpatialMlp(std::size_t ch, std::size_t s, std::size_t groups)
    : c_(ch), s_(s), g_(groups), b_({ch}) {
  if (groups == 0 || ch % groups != 0)
    throw ShapeMismatch("spatial_mlp: channels must divide into groups");
  w_.reserve(g_);
  for (std::size_t k = 0; k < g_; ++k) w_.emplace_back(Shape{s * s, s * s});
  pi_.resize(g_);
}

std::vector<Tensor*> SpatialMlp::params() {
  std::vector<Tensor*> out;
  for (Tensor& w : w_) out.push_back(&w);
  out.push_back(&b_);
  return out;
}

void SpatialMlp::init(std::mt19937_64& rng) {
  for (Tensor& w : w_)
    uniform_init(w, 1.0 / static_cast<double>(s_), rng);  // 1/sqrt(s^2)
  b_ = Tensor({c_});
  pi_.assign(g_, {});
}

std::string SpatialMlp::spec_line() const {
  std::ostringstream os;
  os << "spatial_mlp c=" << c_ << " s=" << s_ << " groups=" << g_;
  return os.str();
}

NodeId SpatialMlp::build(Tape& t, NodeId x, const std::vector<NodeId>& pids) {
  const std::size_t batch = batch_of(t, x), cg = c_ / g_, s2 = s_ * s_;
  std::vector<NodeId> parts;
  for (std::size_t k = 0; k < g_; ++k) {
    const NodeId xs = t.slice_channels(x, k * cg, (k + 1) * cg);
    const NodeId flat = t.reshape(xs, {batch * cg, s2});
    const NodeId z = t.add(flat, t.matmul(flat, t.transpose(pids[k])));
    parts.push_back(t.reshape(z, {batch, cg, s_, s_}));
  }
  return t.add_chanvec(t.concat_channels(parts), pids[g_]);
}

NodeId SpatialMlp::build_frozen(Tape& t, NodeId x) const {
  const std::size_t batch = batch_of(t, x), cg = c_ / g_, s2 = s_ * s_;
  std::vector<NodeId> parts;
  for (std::size_t k = 0; k < g_; ++k) {
    const NodeId xs = t.slice_channels(x, k * cg, (k + 1) * cg);
    const NodeId flat = t.reshape(xs, {batch * cg, s2});
    const NodeId z =
        t.add(flat, t.matmul(flat, t.transpose(t.constant(w_[k]))));
    parts.push_back(t.reshape(z, {batch, cg, s_, s_}));
  }
  return t.add_chanvec(t.concat_channels(parts), t.constant(b_));
}

void SpatialMlp::refresh(std::size_t iters, double tol) {
  const Matrix id = Tensor::identity(s_ * s_);
  for (std::size_t k = 0; k < g_; ++k) {
    const Matrix eff = numerics::add(w_[k], id);
    numerics::power_iteration(numerics::LinearOperator::from_matrix(eff),
                              pi_[k], iters, tol);
  }
}

void SpatialMlp::refresh_train_step() { refresh(1, kPiTol); }

void SpatialMlp::refresh_converged() { refresh(kDenseEvalIters, kPiTol); }

double SpatialMlp::lip_bound() const {
  double best = 0.0;
  for (const auto& p : pi_) best = std::max(best, p.sigma);
  return best;
}

NodeId SpatialMlp::lip_node(Tape& t, const std::vector<NodeId>& pids) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < g_; ++k)
    if (pi_[k].sigma > pi_[best].sigma) best = k;
  const NodeId eff =
      t.add(pids[best], t.constant(Tensor::identity(s_ * s_)));
  return bilinear_bound(t, eff, pi_[best]);
}

// ---------------------------------------------------------------------------
// Head

Head::Head(std::size_t in, std::size_t classes)
    : in_(in), classes_(classes), w_({classes, in}), b_({classes}) {
  if (classes < 2) throw ShapeMismatch("head: needs at least two classes");
}

void Head::init(std::mt19937_64& rng) {
  uniform_init(w_, 1.0 / std::sqrt(static_cast<double>(in_)), rng);
  b_ = Tensor({classes_});
  pi_ = {};
}

std::string Head::spec_line() const {
  std::ostringstream os;
  os << "head in=" << in_ << " classes=" << classes_;
  return os.str();
}

NodeId Head::build(Tape& t, NodeId x, const std::vector<NodeId>& pids) {
  return affine(t, x, pids[0], pids[1]);
}

NodeId Head::build_frozen(Tape& t, NodeId x) const {
  return affine(t, x, t.constant(w_), t.constant(b_));
}

void Head::refresh_train_step() {
  numerics::power_iteration(numerics::LinearOperator::from_matrix(w_), pi_, 1,
                            kPiTol);
}

void Head::refresh_converged() {
  numerics::power_iteration(numerics::LinearOperator::from_matrix(w_), pi_,
                            kDenseEvalIters, kPiTol);
}

double Head::lip_bound() const { return pi_.sigma; }

NodeId Head::lip_node(Tape& t, const std::vector<NodeId>& pids) {
  return bilinear_bound(t, pids[0], pi_);
}

// ---------------------------------------------------------------------------
// DenseOrtho

DenseOrtho::DenseOrtho(Kind mechanism, std::size_t in, std::size_t out,
                       std::size_t newton_iters)
    : mech_(mechanism), in_(in), out_(out), core_n_(std::min(in, out)),
      newton_iters_(newton_iters) {
  if (mech_ != Kind::kDenseCayley && mech_ != Kind::kDenseMatexp &&
      mech_ != Kind::kDenseCholeskyResidual && mech_ != Kind::kDenseLot)
    throw ConfigError("dense ortho: unsupported mechanism");
  if (in == 0 || out == 0) throw ShapeMismatch("dense ortho: zero dimension");
  v_ = Tensor({core_n_, core_n_});
  b_ = Tensor({out_});
}

void DenseOrtho::init(std::mt19937_64& rng) {
  uniform_init(v_, 1.0 / std::sqrt(static_cast<double>(core_n_)), rng);
  b_ = Tensor({out_});
  w_eff_ = Tensor{};
}

std::string DenseOrtho::spec_line() const {
  std::ostringstream os;
  os << kind_name(mech_) << " in=" << in_ << " out=" << out_;
  if (mech_ == Kind::kDenseLot) os << " iters=" << newton_iters_;
  return os.str();
}

Matrix DenseOrtho::core() const {
  switch (mech_) {
    case Kind::kDenseCayley:
      return orthogonalize_cayley(v_);
    case Kind::kDenseMatexp:
      return orthogonalize_matexp(v_);
    case Kind::kDenseCholeskyResidual:
      return orthogonalize_cholesky(
          numerics::add(Tensor::identity(core_n_), v_));
    case Kind::kDenseLot:
      return orthogonalize_lot(numerics::add(Tensor::identity(core_n_), v_),
                               newton_iters_);
    default:
      throw Error("dense ortho: bad mechanism");
  }
}

NodeId DenseOrtho::build_core(Tape& t, NodeId v) const {
  switch (mech_) {
    case Kind::kDenseCayley:
      return build_cayley(t, v);
    case Kind::kDenseMatexp:
      return build_matexp_ortho(t, v);
    case Kind::kDenseCholeskyResidual:
      return build_cholesky_ortho(
          t, t.add(t.constant(Tensor::identity(core_n_)), v));
    case Kind::kDenseLot:
      return build_lot_ortho(
          t, t.add(t.constant(Tensor::identity(core_n_)), v), newton_iters_);
    default:
      throw Error("dense ortho: bad mechanism");
  }
}

void DenseOrtho::refresh_train_step() {
  const Matrix wc = core();
  if (core_n_ == in_ && core_n_ == out_) {
    w_eff_ = wc;
    return;
  }
  Tensor padded({out_, in_});
  for (std::size_t i = 0; i < core_n_; ++i)
    std::copy_n(wc.data() + i * core_n_, core_n_, padded.data() + i * in_);
  w_eff_ = std::move(padded);
}

NodeId DenseOrtho::build(Tape& t, NodeId x, const std::vector<NodeId>& pids) {
  NodeId w = build_core(t, pids[0]);
  if (core_n_ != in_ || core_n_ != out_) w = t.pad_matrix(w, out_, in_);
  return affine(t, x, w, pids[1]);
}

NodeId DenseOrtho::build_frozen(Tape& t, NodeId x) const {
  if (w_eff_.size() == 0)
    throw Error("dense ortho: frozen forward before refresh");
  return affine(t, x, t.constant(w_eff_), t.constant(b_));
}

// ---------------------------------------------------------------------------
// AolDense

AolDense::AolDense(std::size_t in, std::size_t out, double exponent)
    : in_(in), out_(out), exponent_(exponent), v_({out, in}), b_({out}) {
  if (exponent != -1.0 && exponent != -0.5)
    throw ConfigError("aol: exponent must be -1 or -1/2");
}

void AolDense::init(std::mt19937_64& rng) {
  uniform_init(v_, 1.0 / std::sqrt(static_cast<double>(in_)), rng);
  b_ = Tensor({out_});
  w_eff_ = Tensor{};
}

std::string AolDense::spec_line() const {
  std::ostringstream os;
  os << "aol in=" << in_ << " out=" << out_ << " exponent=" << exponent_;
  return os.str();
}

void AolDense::refresh_train_step() {
  const Matrix g = numerics::matmul_tn(v_, v_);
  std::vector<double> d(in_);
  for (std::size_t i = 0; i < in_; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < in_; ++j) s += std::abs(g(i, j));
    d[i] = s > 0.0 ? std::pow(s, exponent_) : 0.0;
  }
  Tensor w({out_, in_});
  for (std::size_t i = 0; i < out_; ++i)
    for (std::size_t j = 0; j < in_; ++j) w(i, j) = v_(i, j) * d[j];
  w_eff_ = std::move(w);
}

NodeId AolDense::build(Tape& t, NodeId x, const std::vector<NodeId>& pids) {
  const NodeId g = t.matmul(t.transpose(pids[0]), pids[0]);
  const NodeId d = t.pow_nonneg(t.row_sum(t.abs(g)), exponent_);
  const NodeId w = t.col_scale(pids[0], d);
  return affine(t, x, w, pids[1]);
}

NodeId AolDense::build_frozen(Tape& t, NodeId x) const {
  if (w_eff_.size() == 0) throw Error("aol: frozen forward before refresh");
  return affine(t, x, t.constant(w_eff_), t.constant(b_));
}

// ---------------------------------------------------------------------------
// SllBlock

SllBlock::SllBlock(std::size_t n)
    : n_(n), w_({n, n}), q_log_({n}), b_({n}) {}

void SllBlock::init(std::mt19937_64& rng) {
  uniform_init(w_, 1.0 / std::sqrt(static_cast<double>(n_)), rng);
  q_log_ = Tensor({n_});
  b_ = Tensor({n_});
  dinv_ = Tensor{};
}

std::string SllBlock::spec_line() const {
  std::ostringstream os;
  os << "sll n=" << n_;
  return os.str();
}

void SllBlock::set_weight(const Tensor& w, const Tensor& q_log,
                          const Tensor& b) {
  if (!w.same_shape(w_) || !q_log.same_shape(q_log_) || !b.same_shape(b_))
    throw ShapeMismatch("sll: set_weight shape mismatch");
  w_ = w;
  q_log_ = q_log;
  b_ = b;
  refresh_train_step();
}

void SllBlock::refresh_train_step() {
  const Matrix gram = numerics::matmul_nt(w_, w_);
  Tensor dinv({n_});
  for (std::size_t i = 0; i < n_; ++i) {
    double num = 0.0;
    for (std::size_t j = 0; j < n_; ++j)
      num += std::abs(gram(i, j)) * std::exp(q_log_[j]);
    const double d = num / std::exp(q_log_[i]);
    dinv[i] = d > 0.0 ? 1.0 / d : 0.0;
  }
  dinv_ = std::move(dinv);
}

NodeId SllBlock::build(Tape& t, NodeId x, const std::vector<NodeId>& pids) {
  const NodeId w = pids[0];
  const NodeId q = t.exp(pids[1]);
  const NodeId g = t.abs(t.matmul(w, t.transpose(w)));
  const NodeId num = t.row_sum(t.col_scale(g, q));
  const NodeId d = t.mul(num, t.pow_nonneg(q, -1.0));
  const NodeId dinv = t.pow_nonneg(d, -1.0);
  const NodeId z = t.relu(affine(t, x, w, pids[2]));
  return t.sub(x, t.scale(t.matmul(t.col_scale(z, dinv), w), 2.0));
}

NodeId SllBlock::build_frozen(Tape& t, NodeId x) const {
  if (dinv_.size() == 0) throw Error("sll: frozen forward before refresh");
  const NodeId w = t.constant(w_);
  const NodeId z = t.relu(affine(t, x, w, t.constant(b_)));
  return t.sub(
      x, t.scale(t.matmul(t.col_scale(z, t.constant(dinv_)), w), 2.0));
}

// ---------------------------------------------------------------------------
// SandwichBlock

SandwichBlock::SandwichBlock(std::size_t n)
    : n_(n), pu_({n, n}), pv_({n, n}), psi_log_({n}), b_({n}) {}

void SandwichBlock::init(std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(n_));
  uniform_init(pu_, bound, rng);
  uniform_init(pv_, bound, rng);
  psi_log_ = Tensor({n_});
  b_ = Tensor({n_});
  q1_ = q2t_ = psi_ = psi_inv_ = Tensor{};
}

std::string SandwichBlock::spec_line() const {
  std::ostringstream os;
  os << "sandwich n=" << n_;
  return os.str();
}

void SandwichBlock::refresh_train_step() {
  const Matrix id = Tensor::identity(n_);
  const Matrix z = numerics::add(numerics::sub(pu_, numerics::transpose(pu_)),
                                 numerics::matmul_tn(pv_, pv_));
  const Matrix a1 = numerics::add(id, z);
  q1_ = numerics::solve_general(a1, numerics::sub(id, z));
  q2t_ = numerics::solve_general(numerics::transpose(a1),
                                 numerics::scale(numerics::transpose(pv_), -2.0));
  Tensor psi({n_}), psi_inv({n_});
  for (std::size_t i = 0; i < n_; ++i) {
    psi[i] = std::exp(psi_log_[i]);
    psi_inv[i] = std::exp(-psi_log_[i]);
  }
  psi_ = std::move(psi);
  psi_inv_ = std::move(psi_inv);
}

NodeId SandwichBlock::build(Tape& t, NodeId x,
                            const std::vector<NodeId>& pids) {
  const NodeId ic = t.constant(Tensor::identity(n_));
  const NodeId z = t.add(t.sub(pids[0], t.transpose(pids[0])),
                         t.matmul(t.transpose(pids[1]), pids[1]));
  const NodeId a1 = t.add(ic, z);
  const NodeId q1 = t.solve_general(a1, t.sub(ic, z));
  const NodeId q2t = t.solve_general(t.transpose(a1),
                                     t.scale(t.transpose(pids[1]), -2.0));
  const NodeId psi = t.exp(pids[2]);
  const NodeId psi_inv = t.exp(t.scale(pids[2], -1.0));
  const NodeId pre = t.add_rowvec(
      t.col_scale(t.matmul(x, t.transpose(q2t)), psi_inv), pids[3]);
  const NodeId s = t.col_scale(t.relu(pre), psi);
  return t.scale(t.matmul(s, t.transpose(q1)), std::sqrt(2.0));
}

NodeId SandwichBlock::build_frozen(Tape& t, NodeId x) const {
  if (q1_.size() == 0) throw Error("sandwich: frozen forward before refresh");
  const NodeId pre = t.add_rowvec(
      t.col_scale(t.matmul(x, t.transpose(t.constant(q2t_))),
                  t.constant(psi_inv_)),
      t.constant(b_));
  const NodeId s = t.col_scale(t.relu(pre), t.constant(psi_));
  return t.scale(t.matmul(s, t.transpose(t.constant(q1_))), std::sqrt(2.0));
}

// ---------------------------------------------------------------------------
// MinMaxLayer / Flatten

MinMaxLayer::MinMaxLayer(Shape feature_shape) : shape_(std::move(feature_shape)) {
  if (shape_.size() != 1 && shape_.size() != 3)
    throw ShapeMismatch("minmax: feature shape must be {n} or {c,h,w}");
  if (shape_[0] % 2 != 0)
    throw OddWidth("minmax: paired dimension must be even");
}

std::string MinMaxLayer::spec_line() const {
  std::ostringstream os;
  os << "minmax shape=";
  for (std::size_t i = 0; i < shape_.size(); ++i)
    os << (i ? "," : "") << shape_[i];
  return os.str();
}

NodeId MinMaxLayer::build(Tape& t, NodeId x, const std::vector<NodeId>&) {
  return t.minmax(x);
}

NodeId MinMaxLayer::build_frozen(Tape& t, NodeId x) const {
  return t.minmax(x);
}

Flatten::Flatten(std::size_t ch, std::size_t h, std::size_t w)
    : c_(ch), h_(h), w_dim_(w) {}

std::string Flatten::spec_line() const {
  std::ostringstream os;
  os << "flatten c=" << c_ << " h=" << h_ << " w=" << w_dim_;
  return os.str();
}

NodeId Flatten::build(Tape& t, NodeId x, const std::vector<NodeId>&) {
  return t.reshape(x, {batch_of(t, x), c_ * h_ * w_dim_});
}

NodeId Flatten::build_frozen(Tape& t, NodeId x) const {
  return t.reshape(x, {batch_of(t, x), c_ * h_ * w_dim_});
}

// ---------------------------------------------------------------------------
// Network

void Network::validate() const {
  if (layers.empty()) throw ShapeMismatch("network: no layers");
  if (layers.back()->kind() != Kind::kHead)
    throw ShapeMismatch("network: last layer must be the head");
  Shape cur = input_shape;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i + 1 < layers.size() && layers[i]->kind() == Kind::kHead)
      throw ShapeMismatch("network: head must be last");
    if (layers[i]->in_shape() != cur)
      throw ShapeMismatch("network: layer " + std::to_string(i) +
                          " input shape mismatch");
    cur = layers[i]->out_shape();
  }
}

Head& Network::head() {
  if (layers.empty() || layers.back()->kind() != Kind::kHead)
    throw ShapeMismatch("network: missing head");
  return static_cast<Head&>(*layers.back());
}

const Head& Network::head() const {
  if (layers.empty() || layers.back()->kind() != Kind::kHead)
    throw ShapeMismatch("network: missing head");
  return static_cast<const Head&>(*layers.back());
}

std::vector<Tensor*> Network::all_params() {
  std::vector<Tensor*> out;
  for (auto& l : layers)
    for (Tensor* p : l->params()) out.push_back(p);
  return out;
}

void Network::init(std::mt19937_64& rng) {
  validate();
  for (auto& l : layers) l->init(rng);
  refresh_converged();
}

void Network::refresh_train_step() {
  for (auto& l : layers) l->refresh_train_step();
}

void Network::refresh_converged() {
  for (auto& l : layers) l->refresh_converged();
}

Tensor Network::forward_eval(const Tensor& x) const {
  Tape t;
  return t.value(build_frozen(t, t.constant(x)));
}

NodeId Network::build_frozen(Tape& t, NodeId x) const {
  NodeId cur = x;
  for (const auto& l : layers) cur = l->build_frozen(t, cur);
  return cur;
}

Network::BuiltGraph Network::build_train(Tape& t, NodeId x) {
  BuiltGraph g;
  NodeId cur = x;
  for (auto& l : layers) {
    std::vector<NodeId> pids;
    for (Tensor* p : l->params()) pids.push_back(t.leaf(*p));
    cur = l->build(t, cur, pids);
    g.pids.push_back(std::move(pids));
  }
  g.logits = cur;
  return g;
}

NodeId Network::build_backbone_lip(
    Tape& t, const std::vector<std::vector<NodeId>>& pids) {
  NodeId prod = 0;
  bool have = false;
  for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
    if (!layers[i]->bound_is_parametric()) continue;
    const NodeId n = layers[i]->lip_node(t, pids[i]);
    prod = have ? t.mul(prod, n) : n;
    have = true;
  }
  if (!have) prod = t.constant(Tensor::full({1}, 1.0));
  return prod;
}

LipReport network_lipschitz(const Network& net) {
  LipReport r;
  r.backbone_product = 1.0;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const double b = net.layers[i]->lip_bound();
    r.per_layer.push_back(b);
    if (i + 1 < net.layers.size()) r.backbone_product *= b;
  }
  r.head_norm = r.per_layer.back();
  return r;
}

// ---------------------------------------------------------------------------
// layer spec parsing (checkpoint manifests)

namespace {

std::map<std::string, std::string> parse_kv(std::istringstream& is) {
  std::map<std::string, std::string> kv;
  std::string tok;
  while (is >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos)
      throw ConfigError("layer spec: expected key=value, got '" + tok + "'");
    kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return kv;
}

std::size_t get_size(const std::map<std::string, std::string>& kv,
                     const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end())
    throw ConfigError("layer spec: missing key '" + key + "'");
  return static_cast<std::size_t>(std::stoull(it->second));
}

}  // namespace

std::unique_ptr<Layer> make_layer_from_spec(const std::string& line) {
  std::istringstream is(line);
  std::string name;
  if (!(is >> name)) throw ConfigError("layer spec: empty line");
  const Kind kind = kind_from_name(name);
  const auto kv = parse_kv(is);
  switch (kind) {
    case Kind::kDenseGloro:
      return std::make_unique<DenseGloro>(get_size(kv, "in"),
                                          get_size(kv, "out"));
    case Kind::kDenseCayley:
    case Kind::kDenseMatexp:
    case Kind::kDenseCholeskyResidual:
      return std::make_unique<DenseOrtho>(kind, get_size(kv, "in"),
                                          get_size(kv, "out"));
    case Kind::kDenseLot:
      return std::make_unique<DenseOrtho>(kind, get_size(kv, "in"),
                                          get_size(kv, "out"),
                                          get_size(kv, "iters"));
    case Kind::kAol:
      return std::make_unique<AolDense>(get_size(kv, "in"),
                                        get_size(kv, "out"),
                                        std::stod(kv.at("exponent")));
    case Kind::kSll:
      return std::make_unique<SllBlock>(get_size(kv, "n"));
    case Kind::kSandwich:
      return std::make_unique<SandwichBlock>(get_size(kv, "n"));
    case Kind::kResidualDenseGloro:
      return std::make_unique<ResidualDenseGloro>(get_size(kv, "n"));
    case Kind::kMinMax: {
      Shape shape;
      std::istringstream ss(kv.at("shape"));
      std::string part;
      while (std::getline(ss, part, ','))
        shape.push_back(static_cast<std::size_t>(std::stoull(part)));
      return std::make_unique<MinMaxLayer>(shape);
    }
    case Kind::kConvGloro:
      return std::make_unique<ConvGloro>(get_size(kv, "in_c"),
                                         get_size(kv, "out_c"),
                                         get_size(kv, "h"), get_size(kv, "w"),
                                         get_size(kv, "k"));
    case Kind::kLiresnetBlock:
      return std::make_unique<LiresnetBlock>(get_size(kv, "c"),
                                             get_size(kv, "h"),
                                             get_size(kv, "w"),
                                             get_size(kv, "k"));
    case Kind::kSpatialMlp:
      return std::make_unique<SpatialMlp>(get_size(kv, "c"),
                                          get_size(kv, "s"),
                                          get_size(kv, "groups"));
    case Kind::kFlatten:
      return std::make_unique<Flatten>(get_size(kv, "c"), get_size(kv, "h"),
                                       get_size(kv, "w"));
    case Kind::kHead:
      return std::make_unique<Head>(get_size(kv, "in"),
                                    get_size(kv, "classes"));
  }
  throw ConfigError("layer spec: unknown kind");
}

}  // namespace lipcert::layers
