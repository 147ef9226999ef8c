#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "lipcert/autodiff/checks.hpp"
#include "lipcert/errors.hpp"
#include "lipcert/layers/conv_ops.hpp"
#include "lipcert/layers/layers.hpp"
#include "lipcert/layers/ortho.hpp"
#include "lipcert/numerics/linalg.hpp"
#include "lipcert/numerics/power_iteration.hpp"

using namespace lipcert;
using namespace lipcert::layers;
using lipcert::autodiff::FiniteDiffReport;
using lipcert::autodiff::NodeId;
using lipcert::autodiff::Tape;
using lipcert::autodiff::TapeBuilder;
using lipcert::autodiff::finite_diff_check;

namespace {

Tensor random_tensor(const std::vector<std::size_t>& shape, std::uint64_t seed,
                     double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

Matrix diag2(double a, double b) {
  return Tensor::matrix({{a, 0.0}, {0.0, b}});
}

void set_param(Layer& l, std::size_t idx, const Tensor& v) {
  Tensor* p = l.params().at(idx);
  REQUIRE(p->same_shape(v));
  std::copy_n(v.data(), v.size(), p->data());
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.same_shape(b));
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::size_t count_of(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

Shape batch_shape(std::size_t b, const Shape& feat) {
  Shape s{b};
  s.insert(s.end(), feat.begin(), feat.end());
  return s;
}

// Largest ||f(x)-f(y)|| / ||x-y|| over random pairs.
double max_displacement_ratio(const Layer& l, std::size_t pairs,
                              std::uint64_t seed, double span = 1.0) {
  const Shape in = l.in_shape();
  const std::size_t d_in = count_of(in), d_out = count_of(l.out_shape());
  const Tensor x = random_tensor(batch_shape(pairs, in), seed, -span, span);
  const Tensor y = random_tensor(batch_shape(pairs, in), seed + 1, -span, span);
  const Tensor fx = l.forward_eval(x);
  const Tensor fy = l.forward_eval(y);
  double worst = 0.0;
  for (std::size_t r = 0; r < pairs; ++r) {
    double dn = 0.0, on = 0.0;
    for (std::size_t j = 0; j < d_in; ++j) {
      const double d = x[r * d_in + j] - y[r * d_in + j];
      dn += d * d;
    }
    for (std::size_t j = 0; j < d_out; ++j) {
      const double d = fx[r * d_out + j] - fy[r * d_out + j];
      on += d * d;
    }
    if (dn > 0.0) worst = std::max(worst, std::sqrt(on / dn));
  }
  return worst;
}

// Textbook modified Gram-Schmidt on the rows, positive-diagonal convention.
Matrix mgs_rows(const Matrix& a) {
  Matrix q = a;
  const std::size_t r = a.rows(), c = a.cols();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < c; ++k) dot += q(i, k) * q(j, k);
      for (std::size_t k = 0; k < c; ++k) q(i, k) -= dot * q(j, k);
    }
    double norm = 0.0;
    for (std::size_t k = 0; k < c; ++k) norm += q(i, k) * q(i, k);
    norm = std::sqrt(norm);
    REQUIRE(norm > 0.0);
    for (std::size_t k = 0; k < c; ++k) q(i, k) /= norm;
  }
  return q;
}

Matrix materialize_operator(const numerics::LinearOperator& op) {
  Matrix dense({op.out_dim, op.in_dim});
  std::vector<double> e(op.in_dim, 0.0), y(op.out_dim, 0.0);
  for (std::size_t j = 0; j < op.in_dim; ++j) {
    e[j] = 1.0;
    op.apply(e, y);
    for (std::size_t i = 0; i < op.out_dim; ++i) dense(i, j) = y[i];
    e[j] = 0.0;
  }
  return dense;
}

FiniteDiffReport fd_layer(Layer& l, std::size_t batch, std::uint64_t seed,
                          double h = 1e-5) {
  std::vector<Tensor> params;
  params.push_back(random_tensor(batch_shape(batch, l.in_shape()), seed));
  for (Tensor* p : l.params()) params.push_back(*p);
  const Tensor r =
      random_tensor(batch_shape(batch, l.out_shape()), seed + 999);
  TapeBuilder build = [&](Tape& t, const std::vector<NodeId>& leaves) {
    std::vector<NodeId> pids(leaves.begin() + 1, leaves.end());
    const NodeId out = l.build(t, leaves[0], pids);
    return t.reduce_sum(t.mul(out, t.constant(r)));
  };
  return finite_diff_check(build, params, h);
}

}  // namespace

// ---------------------------------------------------------------------------
// orthogonalization mechanisms

TEST_CASE("ortho: skew of a matrix") {
  const Matrix v = Tensor::matrix({{1.0, 2.0}, {0.0, 1.0}});
  const Matrix s = skew(v);
  CHECK(s(0, 0) == 0.0);
  CHECK(s(0, 1) == 1.0);
  CHECK(s(1, 0) == -1.0);
  CHECK(s(1, 1) == 0.0);

  const Matrix sym = Tensor::matrix({{2.0, 5.0}, {5.0, -1.0}});
  for (std::size_t i = 0; i < 4; ++i) CHECK(skew(sym)[i] == 0.0);

  const Matrix anti = Tensor::matrix({{0.0, 3.0}, {-3.0, 0.0}});
  for (std::size_t i = 0; i < 4; ++i) CHECK(skew(anti)[i] == anti[i]);

  CHECK_THROWS_AS(skew(Tensor({2, 3})), ShapeMismatch);
}

TEST_CASE("ortho: cayley transform") {
  const Matrix id = orthogonalize_cayley(Tensor({3, 3}));
  CHECK(max_abs_diff(id, Tensor::identity(3)) == 0.0);

  const Matrix v = Tensor::matrix({{0.0, 1.0}, {-1.0, 0.0}});
  const Matrix w = orthogonalize_cayley(v);
  const Matrix want = Tensor::matrix({{0.0, -1.0}, {1.0, 0.0}});
  CHECK(max_abs_diff(w, want) <= 1e-15);

  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Matrix r = random_tensor({32, 32}, 100 + seed);
    CHECK(numerics::orthogonality_residual(orthogonalize_cayley(r)) <= 1e-9);
  }
}

TEST_CASE("ortho: matrix exponential of the skew part") {
  const Matrix id = orthogonalize_matexp(Tensor({4, 4}));
  CHECK(max_abs_diff(id, Tensor::identity(4)) == 0.0);

  const double th = 0.3;
  const Matrix v = Tensor::matrix({{0.0, -th}, {th, 0.0}});
  const Matrix w = orthogonalize_matexp(v);
  CHECK(w(0, 0) == doctest::Approx(std::cos(th)).epsilon(1e-12));
  CHECK(w(0, 1) == doctest::Approx(-std::sin(th)).epsilon(1e-12));
  CHECK(w(1, 0) == doctest::Approx(std::sin(th)).epsilon(1e-12));
  CHECK(w(1, 1) == doctest::Approx(std::cos(th)).epsilon(1e-12));

  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const Matrix r = random_tensor({64, 64}, 200 + seed);
    CHECK(numerics::orthogonality_residual(orthogonalize_matexp(r)) <= 1e-9);
  }
}

TEST_CASE("ortho: cholesky orthogonalization") {
  const Matrix w = orthogonalize_cholesky(diag2(2.0, 3.0));
  CHECK(max_abs_diff(w, Tensor::identity(2)) == 0.0);

  // an orthogonal input is a fixed point
  const Matrix q = orthogonalize_cayley(random_tensor({8, 8}, 42));
  CHECK(max_abs_diff(orthogonalize_cholesky(q), q) <= 1e-13);

  // duplicated rows make the row Gram singular
  Matrix bad = random_tensor({4, 4}, 7);
  for (std::size_t j = 0; j < 4; ++j) bad(3, j) = bad(2, j);
  CHECK_THROWS_AS(orthogonalize_cholesky(bad), RankDeficient);
}

TEST_CASE("ortho: cholesky orthogonalization equals modified Gram-Schmidt") {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Matrix a = random_tensor({16, 16}, 300 + seed);
    worst = std::max(worst, max_abs_diff(orthogonalize_cholesky(a), mgs_rows(a)));
  }
  CHECK(worst <= 1e-7);
}

TEST_CASE("ortho: newton-schulz inverse square root") {
  const Matrix w = orthogonalize_lot(diag2(2.0, 0.5), 12);
  CHECK(max_abs_diff(w, Tensor::identity(2)) <= 1e-6);

  const Matrix q = orthogonalize_cayley(random_tensor({16, 16}, 55));
  CHECK(max_abs_diff(orthogonalize_lot(q, 12), q) <= 1e-6);

  // well-conditioned random input
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Matrix q1 = orthogonalize_cayley(random_tensor({32, 32}, 400 + seed));
    const Matrix q2 = orthogonalize_cayley(random_tensor({32, 32}, 500 + seed));
    Matrix m = Tensor({32, 32});
    const Tensor d = random_tensor({32}, 600 + seed, 0.5, 2.0);
    for (std::size_t i = 0; i < 32; ++i)
      for (std::size_t j = 0; j < 32; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < 32; ++k)
          acc += q1(i, k) * d[k] * q2(k, j);
        m(i, j) = acc;
      }
    CHECK(numerics::orthogonality_residual(orthogonalize_lot(m, 12)) <= 1e-6);
  }

  CHECK_THROWS_AS(orthogonalize_lot(diag2(1.0, 1e-6), 12), NonConvergence);
  CHECK_THROWS_AS(orthogonalize_lot(Tensor({3, 3}), 12), RankDeficient);
}

TEST_CASE("ortho: tape builders match the numeric mechanisms") {
  const Matrix v = random_tensor({8, 8}, 77, -0.4, 0.4);
  const Matrix a = numerics::add(Tensor::identity(8), v);

  Tape t;
  const NodeId vn = t.leaf(v);
  const NodeId an = t.leaf(a);
  CHECK(max_abs_diff(t.value(build_cayley(t, vn)), orthogonalize_cayley(v)) <=
        1e-13);
  CHECK(max_abs_diff(t.value(build_matexp_ortho(t, vn)),
                     orthogonalize_matexp(v)) <= 1e-13);
  CHECK(max_abs_diff(t.value(build_cholesky_ortho(t, an)),
                     orthogonalize_cholesky(a)) <= 1e-13);
  CHECK(max_abs_diff(t.value(build_lot_ortho(t, an, 16)),
                     orthogonalize_lot(a, 16)) <= 1e-12);
}

// ---------------------------------------------------------------------------
// layer-level orthogonality

TEST_CASE("layers: every orthogonal mechanism yields orthogonal weights") {
  const Kind mechs[] = {Kind::kDenseCayley, Kind::kDenseMatexp,
                        Kind::kDenseCholeskyResidual, Kind::kDenseLot};
  std::mt19937_64 rng(2024);
  for (Kind mech : mechs) {
    for (std::size_t n : {4, 16, 64}) {
      double worst = 0.0;
      for (int draw = 0; draw < 25; ++draw) {
        DenseOrtho layer(mech, n, n);
        layer.init(rng);
        layer.refresh_converged();
        worst = std::max(
            worst, numerics::orthogonality_residual(layer.effective_weight()));
      }
      INFO(kind_name(mech) << " n=" << n);
      CHECK(worst <= 1e-6);
    }
  }
}

TEST_CASE("layers: rectangular orthogonal layers embed a square core") {
  std::mt19937_64 rng(11);

  // expanding: columns stay orthonormal, so norms are preserved exactly
  DenseOrtho up(Kind::kDenseCayley, 3, 7);
  up.init(rng);
  up.refresh_converged();
  const Matrix wu = up.effective_weight();
  REQUIRE(wu.rows() == 7);
  REQUIRE(wu.cols() == 3);
  CHECK(numerics::orthogonality_residual(wu) <= 1e-9);
  for (std::size_t i = 3; i < 7; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(wu(i, j) == 0.0);

  // contracting: rows orthonormal, never expansive
  DenseOrtho down(Kind::kDenseCholeskyResidual, 7, 3);
  down.init(rng);
  down.refresh_converged();
  const Matrix wd = down.effective_weight();
  const Matrix gram = numerics::gram_rows(wd);
  CHECK(max_abs_diff(gram, Tensor::identity(3)) <= 1e-9);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 3; j < 7; ++j) CHECK(wd(i, j) == 0.0);

  CHECK(max_displacement_ratio(up, 100, 9000) <= 1.0 + 1e-9);
  CHECK(max_displacement_ratio(down, 100, 9001) <= 1.0 + 1e-9);
}

// ---------------------------------------------------------------------------
// worked examples

TEST_CASE("layers: aol rescaling") {
  AolDense half(3, 3, -1.0);
  set_param(half, 0, numerics::scale(Tensor::identity(3), 2.0));
  half.refresh_converged();
  const Tensor x = Tensor::from_values({1, 3}, {1.0, 2.0, 3.0});
  const Tensor y = half.forward_eval(x);
  CHECK(y[0] == doctest::Approx(0.5));
  CHECK(y[1] == doctest::Approx(1.0));
  CHECK(y[2] == doctest::Approx(1.5));

  AolDense iso(3, 3, -0.5);
  set_param(iso, 0, numerics::scale(Tensor::identity(3), 2.0));
  iso.refresh_converged();
  CHECK(max_abs_diff(iso.forward_eval(x), x) <= 1e-12);

  // zero-sum columns of |V^T V| get scale zero instead of dividing by zero
  AolDense zero(2, 2, -0.5);
  set_param(zero, 0, Tensor({2, 2}));
  zero.refresh_converged();
  CHECK(max_abs_diff(zero.forward_eval(Tensor::from_values({1, 2}, {1.0, 2.0})),
                     Tensor({1, 2})) == 0.0);

  CHECK_THROWS_AS(AolDense(3, 3, -0.25), ConfigError);
}

TEST_CASE("layers: sll scalar example flips the positive half-line") {
  SllBlock sll(1);
  sll.set_weight(Tensor::from_values({1, 1}, {1.0}),
                 Tensor::from_values({1}, {0.7}), Tensor({1}));
  const Tensor plus = sll.forward_eval(Tensor::from_values({1, 1}, {3.0}));
  CHECK(plus[0] == doctest::Approx(-3.0));
  const Tensor minus = sll.forward_eval(Tensor::from_values({1, 1}, {-3.0}));
  CHECK(minus[0] == doctest::Approx(-3.0));
}

TEST_CASE("layers: sandwich factors are two halves of an orthonormal frame") {
  std::mt19937_64 rng(31);
  SandwichBlock sw(6);
  sw.init(rng);
  sw.refresh_converged();

  const Matrix gram =
      numerics::add(numerics::matmul_tn(sw.q1(), sw.q1()),
                    numerics::matmul_nt(sw.q2t(), sw.q2t()));
  CHECK(max_abs_diff(gram, Tensor::identity(6)) <= 1e-9);

  // zero input with zero bias maps to zero
  CHECK(max_abs_diff(sw.forward_eval(Tensor({2, 6})), Tensor({2, 6})) == 0.0);

  // psi is identity after init, so the layer is sqrt(2) Q1 relu(Q2^T x)
  const Tensor x = random_tensor({1, 6}, 88);
  const Tensor got = sw.forward_eval(x);
  std::vector<double> u(6, 0.0);
  for (std::size_t i = 0; i < 6; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < 6; ++j) acc += sw.q2t()(i, j) * x[j];
    u[i] = std::max(acc, 0.0);
  }
  for (std::size_t i = 0; i < 6; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < 6; ++j) acc += sw.q1()(i, j) * u[j];
    CHECK(got[i] == doctest::Approx(std::sqrt(2.0) * acc).epsilon(1e-12));
  }
}

TEST_CASE("layers: spatial mixer per-group behavior and bound") {
  SpatialMlp sp(2, 2, 2);
  set_param(sp, 1, Tensor::identity(4));  // group 1 mixes with identity
  sp.refresh_converged();

  const Tensor x = random_tensor({1, 2, 2, 2}, 12);
  const Tensor y = sp.forward_eval(x);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(y[i] == x[i]);                                  // channel 0 unchanged
    CHECK(y[4 + i] == doctest::Approx(2.0 * x[4 + i]));   // channel 1 doubled
  }
  CHECK(sp.lip_bound() == doctest::Approx(2.0).epsilon(1e-9));

  CHECK_THROWS_AS(SpatialMlp(3, 2, 2), ShapeMismatch);
}

TEST_CASE("layers: residual dense spectral bound") {
  ResidualDenseGloro rd(2);
  set_param(rd, 0, diag2(1.0, -0.5));
  rd.refresh_converged();
  CHECK(rd.lip_bound() == doctest::Approx(2.0).epsilon(1e-9));

  const Tensor x = Tensor::from_values({1, 2}, {3.0, 4.0});
  const Tensor y = rd.forward_eval(x);
  CHECK(y[0] == doctest::Approx(6.0));
  CHECK(y[1] == doctest::Approx(2.0));
}

TEST_CASE("layers: stacked spectral bounds multiply") {
  Network net;
  net.input_shape = {2};
  net.layers.push_back(std::make_unique<DenseGloro>(2, 2));
  net.layers.push_back(std::make_unique<DenseGloro>(2, 2));
  net.layers.push_back(std::make_unique<Head>(2, 2));
  set_param(*net.layers[0], 0, diag2(2.0, 1.0));
  set_param(*net.layers[1], 0, diag2(3.0, 1.0));
  set_param(*net.layers[2], 0, Tensor::identity(2));
  net.refresh_converged();

  // The successive-difference stop leaves an O(tol) residual in each factor,
  // so these are 1e-5 checks, not exact ones.
  const LipReport rep = network_lipschitz(net);
  REQUIRE(rep.per_layer.size() == 3);
  CHECK(rep.per_layer[0] == doctest::Approx(2.0).epsilon(1e-5));
  CHECK(rep.per_layer[1] == doctest::Approx(3.0).epsilon(1e-5));
  CHECK(rep.backbone_product == doctest::Approx(6.0).epsilon(1e-5));
  CHECK(rep.head_norm == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("layers: minmax sorts adjacent pairs") {
  MinMaxLayer mm(Shape{4});
  const Tensor x = Tensor::from_values({1, 4}, {3.0, 1.0, 2.0, 2.0});
  const Tensor y = mm.forward_eval(x);
  CHECK(y[0] == 1.0);
  CHECK(y[1] == 3.0);
  CHECK(y[2] == 2.0);
  CHECK(y[3] == 2.0);
  CHECK(max_abs_diff(mm.forward_eval(y), y) == 0.0);  // idempotent

  MinMaxLayer chan(Shape{2, 2, 2});
  const Tensor xc = random_tensor({2, 2, 2, 2}, 5);
  const Tensor yc = chan.forward_eval(xc);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 4; ++i) {
      const double a = xc[b * 8 + i], c = xc[b * 8 + 4 + i];
      CHECK(yc[b * 8 + i] == std::min(a, c));
      CHECK(yc[b * 8 + 4 + i] == std::max(a, c));
    }

  CHECK_THROWS_AS(MinMaxLayer(Shape{3}), OddWidth);
  CHECK_THROWS_AS(MinMaxLayer(Shape{3, 4, 4}), OddWidth);
}

// ---------------------------------------------------------------------------
// Lipschitz properties

TEST_CASE("layers: constrained layers never expand distances") {
  std::mt19937_64 rng(71);
  std::vector<std::unique_ptr<Layer>> zoo;
  zoo.push_back(std::make_unique<DenseOrtho>(Kind::kDenseCayley, 8, 8));
  zoo.push_back(std::make_unique<DenseOrtho>(Kind::kDenseMatexp, 8, 8));
  zoo.push_back(std::make_unique<DenseOrtho>(Kind::kDenseCholeskyResidual, 8, 8));
  zoo.push_back(std::make_unique<DenseOrtho>(Kind::kDenseLot, 8, 8));
  zoo.push_back(std::make_unique<DenseOrtho>(Kind::kDenseCayley, 4, 9));
  zoo.push_back(std::make_unique<AolDense>(8, 6, -0.5));
  zoo.push_back(std::make_unique<AolDense>(8, 8, -1.0));
  zoo.push_back(std::make_unique<SllBlock>(8));
  zoo.push_back(std::make_unique<SandwichBlock>(8));
  zoo.push_back(std::make_unique<MinMaxLayer>(Shape{8}));
  for (auto& l : zoo) l->init(rng);
  // the -1 exponent is only sound when the scale sums are >= 1, so give that
  // config weights of natural size instead of the small fan-in init
  {
    std::normal_distribution<double> n01;
    Tensor v({8, 8});
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = n01(rng);
    set_param(*zoo[6], 0, v);
  }
  for (auto& l : zoo) l->refresh_converged();

  std::uint64_t seed = 40000;
  for (auto& l : zoo) {
    INFO(kind_name(l->kind()) << " in=" << count_of(l->in_shape()));
    CHECK(max_displacement_ratio(*l, 200, seed++) <= 1.0 + 1e-9);
    CHECK(l->lip_bound() == 1.0);
  }
}

TEST_CASE("layers: spectral bounds dominate empirical displacement") {
  std::mt19937_64 rng(72);
  std::vector<std::unique_ptr<Layer>> zoo;
  zoo.push_back(std::make_unique<DenseGloro>(8, 5));
  zoo.push_back(std::make_unique<ResidualDenseGloro>(6));
  zoo.push_back(std::make_unique<ConvGloro>(2, 3, 6, 6, 3));
  zoo.push_back(std::make_unique<LiresnetBlock>(2, 5, 5, 3));
  zoo.push_back(std::make_unique<SpatialMlp>(2, 3, 2));
  zoo.push_back(std::make_unique<Head>(7, 4));
  std::uint64_t seed = 50000;
  for (auto& l : zoo) {
    l->init(rng);
    l->refresh_converged();
    INFO(kind_name(l->kind()));
    CHECK(max_displacement_ratio(*l, 300, seed++) <= l->lip_bound() + 1e-6);
    CHECK(l->bound_is_parametric());
  }
}

TEST_CASE("layers: composite backbone bound dominates input jacobians") {
  std::mt19937_64 rng(73);
  Network net;
  net.input_shape = {1, 5, 5};
  net.layers.push_back(std::make_unique<ConvGloro>(1, 2, 5, 5, 3));
  net.layers.push_back(std::make_unique<LiresnetBlock>(2, 5, 5, 3));
  net.layers.push_back(std::make_unique<MinMaxLayer>(Shape{2, 5, 5}));
  net.layers.push_back(std::make_unique<Flatten>(2, 5, 5));
  net.layers.push_back(std::make_unique<Head>(50, 3));
  net.init(rng);

  const LipReport rep = network_lipschitz(net);
  const double bound = rep.backbone_product * rep.head_norm;

  for (std::uint64_t pt = 0; pt < 10; ++pt) {
    const Tensor x = random_tensor({1, 1, 5, 5}, 7000 + pt);
    Tape t;
    const NodeId xin = t.leaf(x);
    const NodeId logits = net.build_frozen(t, xin);
    Matrix jac({3, 25});
    for (std::size_t c = 0; c < 3; ++c) {
      Tensor seed_grad({1, 3});
      seed_grad[c] = 1.0;
      t.backward(logits, seed_grad);
      const Tensor& gx = t.grad(xin);
      for (std::size_t j = 0; j < 25; ++j) jac(c, j) = gx[j];
    }
    CHECK(numerics::spectral_norm_oracle(jac) <= bound + 1e-6);
  }
}

TEST_CASE("layers: conv power iteration matches a dense materialization") {
  // Seeds 71/74/78 draw kernels whose top two singular values agree to
  // ~1e-3 relative; the single-vector iteration stalls on those, the block
  // refresh does not.
  for (std::uint64_t seed : {71ull, 74ull, 78ull, 1ull}) {
    CAPTURE(seed);
    std::mt19937_64 rng(seed);
    ConvGloro conv(4, 4, 8, 8, 3);
    conv.init(rng);
    conv.refresh_converged();

    numerics::LinearOperator op;
    op.out_dim = 4 * 64;
    op.in_dim = 4 * 64;
    op.apply = [&](std::span<const double> in, std::span<double> out) {
      conv_apply(conv.kernel(), in, out, 4, 8, 8);
    };
    const Matrix dense = materialize_operator(op);
    const double oracle = numerics::spectral_norm_oracle(dense);
    CHECK(std::abs(conv.lip_bound() - oracle) <= 1e-4 * oracle);
  }
}

TEST_CASE("layers: conv_apply agrees with the tape convolution") {
  std::mt19937_64 rng(75);
  ConvGloro conv(3, 2, 5, 4, 3);
  conv.init(rng);
  set_param(conv, 1, Tensor({2}));  // zero bias
  conv.refresh_converged();

  const Tensor x = random_tensor({1, 3, 5, 4}, 4242);
  const Tensor via_tape = conv.forward_eval(x);
  std::vector<double> direct(2 * 5 * 4, 0.0);
  conv_apply(conv.kernel(), std::span<const double>(x.data(), x.size()),
             direct, 3, 5, 4);
  for (std::size_t i = 0; i < direct.size(); ++i)
    CHECK(via_tape[i] == doctest::Approx(direct[i]).epsilon(1e-13));
}

// ---------------------------------------------------------------------------
// gradients

TEST_CASE("layers: gradients agree with finite differences") {
  std::mt19937_64 rng(76);
  std::vector<std::unique_ptr<Layer>> zoo;
  zoo.push_back(std::make_unique<DenseGloro>(3, 4));
  zoo.push_back(std::make_unique<ResidualDenseGloro>(4));
  zoo.push_back(std::make_unique<DenseOrtho>(Kind::kDenseCayley, 4, 4));
  zoo.push_back(std::make_unique<DenseOrtho>(Kind::kDenseMatexp, 4, 4));
  zoo.push_back(std::make_unique<DenseOrtho>(Kind::kDenseCholeskyResidual, 4, 4));
  zoo.push_back(std::make_unique<DenseOrtho>(Kind::kDenseLot, 4, 4, 16));
  zoo.push_back(std::make_unique<DenseOrtho>(Kind::kDenseCayley, 3, 5));
  zoo.push_back(std::make_unique<AolDense>(3, 4, -0.5));
  zoo.push_back(std::make_unique<AolDense>(4, 4, -1.0));
  zoo.push_back(std::make_unique<SllBlock>(4));
  zoo.push_back(std::make_unique<SandwichBlock>(4));
  zoo.push_back(std::make_unique<MinMaxLayer>(Shape{4}));
  zoo.push_back(std::make_unique<ConvGloro>(2, 2, 4, 4, 3));
  zoo.push_back(std::make_unique<LiresnetBlock>(2, 3, 3, 3));
  zoo.push_back(std::make_unique<SpatialMlp>(2, 2, 2));
  zoo.push_back(std::make_unique<Head>(5, 3));

  std::uint64_t seed = 60000;
  for (auto& l : zoo) {
    l->init(rng);
    const FiniteDiffReport rep = fd_layer(*l, 2, seed++);
    INFO(kind_name(l->kind()) << " checked=" << rep.checked);
    CHECK(rep.checked > 0);
    CHECK(rep.max_rel_error <= 1e-5);
  }
}

TEST_CASE("layers: bound nodes evaluate to the warm estimate") {
  std::mt19937_64 rng(77);
  DenseGloro dense(5, 4);
  dense.init(rng);
  dense.refresh_converged();

  Tape t;
  std::vector<NodeId> pids;
  for (Tensor* p : dense.params()) pids.push_back(t.leaf(*p));
  const NodeId bound = dense.lip_node(t, pids);
  // converged power iteration: u^T W v equals sigma to tight tolerance
  CHECK(t.value(bound)[0] ==
        doctest::Approx(dense.lip_bound()).epsilon(1e-9));

  // gradient of u^T W v with constant u, v is the rank-one matrix u v^T
  t.backward(bound, Tensor::full({1}, 1.0));
  const Tensor& gw = t.grad(pids[0]);
  CHECK(gw.same_shape(*dense.params()[0]));
  double total = 0.0;
  for (std::size_t i = 0; i < gw.size(); ++i) total += gw[i] * gw[i];
  CHECK(std::sqrt(total) == doctest::Approx(1.0).epsilon(1e-9));
}

// ---------------------------------------------------------------------------
// assembly

TEST_CASE("layers: train graph equals the frozen forward") {
  std::mt19937_64 rng(78);
  Network net;
  net.input_shape = {6};
  net.layers.push_back(std::make_unique<DenseOrtho>(Kind::kDenseCayley, 6, 6));
  net.layers.push_back(std::make_unique<AolDense>(6, 6, -0.5));
  net.layers.push_back(std::make_unique<SllBlock>(6));
  net.layers.push_back(std::make_unique<SandwichBlock>(6));
  net.layers.push_back(std::make_unique<MinMaxLayer>(Shape{6}));
  net.layers.push_back(std::make_unique<Head>(6, 3));
  net.init(rng);

  const Tensor x = random_tensor({4, 6}, 91);
  Tape t;
  Network::BuiltGraph g = net.build_train(t, t.constant(x));
  const Tensor train_logits = t.value(g.logits);
  const Tensor frozen_logits = net.forward_eval(x);
  CHECK(max_abs_diff(train_logits, frozen_logits) <= 1e-10);

  // constrained layers report a bound of exactly one
  const LipReport rep = network_lipschitz(net);
  for (std::size_t i = 0; i + 1 < rep.per_layer.size(); ++i)
    CHECK(rep.per_layer[i] == 1.0);

  // fully-constrained backbone collapses the product node to one
  Tape t2;
  Network::BuiltGraph g2 = net.build_train(t2, t2.constant(x));
  const NodeId lip = net.build_backbone_lip(t2, g2.pids);
  CHECK(t2.value(lip)[0] == 1.0);
}

TEST_CASE("layers: network validation") {
  Network bad;
  bad.input_shape = {4};
  bad.layers.push_back(std::make_unique<DenseGloro>(4, 5));
  bad.layers.push_back(std::make_unique<DenseGloro>(6, 2));
  bad.layers.push_back(std::make_unique<Head>(2, 2));
  CHECK_THROWS_AS(bad.validate(), ShapeMismatch);

  Network headless;
  headless.input_shape = {4};
  headless.layers.push_back(std::make_unique<DenseGloro>(4, 2));
  CHECK_THROWS_AS(headless.validate(), ShapeMismatch);

  Network good;
  good.input_shape = {4};
  good.layers.push_back(std::make_unique<DenseGloro>(4, 6));
  good.layers.push_back(std::make_unique<MinMaxLayer>(Shape{6}));
  good.layers.push_back(std::make_unique<Head>(6, 2));
  CHECK_NOTHROW(good.validate());
  CHECK(good.class_count() == 2);
}

TEST_CASE("layers: spec lines round trip") {
  std::vector<std::unique_ptr<Layer>> zoo;
  zoo.push_back(std::make_unique<DenseGloro>(2, 64));
  zoo.push_back(std::make_unique<DenseOrtho>(Kind::kDenseCayley, 4, 9));
  zoo.push_back(std::make_unique<DenseOrtho>(Kind::kDenseMatexp, 8, 8));
  zoo.push_back(std::make_unique<DenseOrtho>(Kind::kDenseCholeskyResidual, 16, 8));
  zoo.push_back(std::make_unique<DenseOrtho>(Kind::kDenseLot, 8, 8, 24));
  zoo.push_back(std::make_unique<AolDense>(5, 7, -1.0));
  zoo.push_back(std::make_unique<SllBlock>(12));
  zoo.push_back(std::make_unique<SandwichBlock>(10));
  zoo.push_back(std::make_unique<ResidualDenseGloro>(6));
  zoo.push_back(std::make_unique<MinMaxLayer>(Shape{8}));
  zoo.push_back(std::make_unique<MinMaxLayer>(Shape{4, 3, 3}));
  zoo.push_back(std::make_unique<ConvGloro>(3, 8, 6, 6, 5));
  zoo.push_back(std::make_unique<LiresnetBlock>(4, 5, 5, 3));
  zoo.push_back(std::make_unique<SpatialMlp>(6, 4, 3));
  zoo.push_back(std::make_unique<Flatten>(4, 5, 5));
  zoo.push_back(std::make_unique<Head>(32, 10));
  for (auto& l : zoo) {
    auto clone = make_layer_from_spec(l->spec_line());
    CHECK(clone->spec_line() == l->spec_line());
    CHECK(clone->kind() == l->kind());
    CHECK(clone->in_shape() == l->in_shape());
    CHECK(clone->out_shape() == l->out_shape());
    CHECK(clone->params().size() == l->params().size());
  }
  CHECK_THROWS_AS(make_layer_from_spec("dense_gloro in=3"), ConfigError);
  CHECK_THROWS_AS(make_layer_from_spec("warp n=3"), ConfigError);
}

TEST_CASE("layers: frozen paths demand a refresh first") {
  DenseOrtho d(Kind::kDenseCayley, 4, 4);
  CHECK_THROWS_AS(d.forward_eval(Tensor({1, 4})), Error);

  DenseGloro g(4, 4);
  Tape t;
  std::vector<NodeId> pids;
  for (Tensor* p : g.params()) pids.push_back(t.leaf(*p));
  CHECK_THROWS_AS(g.lip_node(t, pids), Error);
}
