#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "lipcert/autodiff/checks.hpp"
#include "lipcert/autodiff/tape.hpp"
#include "lipcert/errors.hpp"
#include "lipcert/numerics/linalg.hpp"

using namespace lipcert;
using namespace lipcert::autodiff;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, std::uint64_t seed,
                     double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

// scalar objective sum(x .* C) with a fixed random weighting C, so adjoints
// are exercised with non-uniform upstream gradients
NodeId weighted_sum(Tape& t, NodeId x, std::uint64_t seed) {
  Tensor c = random_tensor(t.value(x).shape(), seed);
  return t.reduce_sum(t.mul(x, t.constant(c)));
}

double fd(const TapeBuilder& build, const std::vector<Tensor>& params,
          double h = 1e-5) {
  return finite_diff_check(build, params, h).max_rel_error;
}

}  // namespace

TEST_CASE("evaluate: constants, identity matmul, zero residual") {
  Tape t;
  Tensor c = random_tensor({3, 2}, 1);
  NodeId k = t.constant(c);
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(t.value(k)[i] == c[i]);

  Tensor x = random_tensor({4, 4}, 2);
  NodeId xm = t.constant(x);
  NodeId ident = t.constant(Tensor::identity(4));
  NodeId ix = t.matmul(ident, xm);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(t.value(ix)[i] == x[i]);

  // (W + I) x with W = 0 is the identity
  NodeId w = t.leaf(Tensor({4, 4}));
  NodeId res = t.matmul(t.add(w, ident), xm);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(t.value(res)[i] == x[i]);
}

TEST_CASE("evaluate: forward replay is bit-identical") {
  Tape t;
  NodeId a = t.leaf(random_tensor({4, 4}, 3));
  NodeId b = t.constant(random_tensor({4, 4}, 4));
  NodeId out = t.row_lse(t.matmul(t.minmax(t.add(a, b)), b));
  Tensor first = t.value(out);
  t.forward();
  for (std::size_t i = 0; i < first.size(); ++i)
    CHECK(t.value(out)[i] == first[i]);
}

TEST_CASE("backward: x^T x and sum(W v)") {
  {
    Tape t;
    NodeId x = t.leaf(Tensor::from_values({1, 2}, {1.0, 2.0}));
    NodeId y = t.reduce_sum(t.mul(x, x));
    CHECK(t.value(y)[0] == 5.0);
    Tensor seed({1});
    seed[0] = 1.0;
    t.backward(y, seed);
    CHECK(t.grad(x)[0] == 2.0);
    CHECK(t.grad(x)[1] == 4.0);
  }
  {
    Tape t;
    Tensor v = Tensor::from_values({3, 1}, {2.0, -1.0, 0.5});
    NodeId w = t.leaf(random_tensor({4, 3}, 5));
    NodeId y = t.reduce_sum(t.matmul(w, t.constant(v)));
    Tensor seed({1});
    seed[0] = 1.0;
    t.backward(y, seed);
    // gradient of sum(Wv) is the outer product 1 v^T: every row equals v^T
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 3; ++j) CHECK(t.grad(w)(i, j) == v[j]);
  }
}

TEST_CASE("backward guards: seed shape, scalar-node rules") {
  Tape t;
  NodeId x = t.leaf(random_tensor({2, 2}, 6));
  NodeId y = t.reduce_sum(x);
  CHECK_THROWS_AS(t.backward(y, Tensor({2})), ShapeMismatch);
  CHECK_THROWS_AS(t.set_value(x, Tensor({3, 3})), ShapeMismatch);
  CHECK_THROWS_AS(t.set_value(y, Tensor({1})), Error);
  CHECK_THROWS_AS(t.mul_scalar(x, x), ShapeMismatch);
}

TEST_CASE("detach: zero gradient through detached values") {
  Tape t;
  Tensor xv = random_tensor({3, 3}, 7);
  NodeId x = t.leaf(xv);
  NodeId d = t.detach(x);
  NodeId y = t.reduce_sum(t.mul(x, d));
  Tensor seed({1});
  seed[0] = 1.0;
  t.backward(y, seed);
  // d carries the value of x but no gradient: d(sum(x.*stop(x)))/dx = x
  for (std::size_t i = 0; i < xv.size(); ++i) CHECK(t.grad(x)[i] == xv[i]);

  Tape t2;
  NodeId x2 = t2.leaf(xv);
  NodeId y2 = t2.reduce_sum(t2.detach(x2));
  t2.backward(y2, seed);
  for (std::size_t i = 0; i < xv.size(); ++i) CHECK(t2.grad(x2)[i] == 0.0);
}

TEST_CASE("backward is linear in the objective") {
  Tape t;
  Tensor av = random_tensor({4, 4}, 8);
  Tensor bv = random_tensor({4, 4}, 9);
  NodeId a = t.leaf(av);
  NodeId b = t.constant(bv);
  NodeId f = t.reduce_sum(t.mul(a, a));
  NodeId g = t.reduce_sum(t.matmul(a, b));
  const double ca = 0.7, cb = -1.3;
  NodeId combo = t.add(t.scale(f, ca), t.scale(g, cb));

  Tensor seed({1});
  seed[0] = 1.0;
  t.backward(f, seed);
  Tensor gf = t.grad(a);
  t.backward(g, seed);
  Tensor gg = t.grad(a);
  t.backward(combo, seed);
  Tensor gc = t.grad(a);
  for (std::size_t i = 0; i < gc.size(); ++i)
    CHECK(std::abs(gc[i] - (ca * gf[i] + cb * gg[i])) <= 1e-12);
}

TEST_CASE("forward oracles: conv2d against a naive loop and by hand") {
  // 3x3 all-ones kernel on the 1..9 image: each output is its padded
  // 3x3 neighborhood sum
  Tape t;
  Tensor x({1, 1, 3, 3});
  for (std::size_t i = 0; i < 9; ++i) x[i] = static_cast<double>(i + 1);
  NodeId out = t.conv2d(t.constant(x), t.constant(Tensor::full({1, 1, 3, 3}, 1.0)));
  const Tensor& o = t.value(out);
  CHECK(o[0] == 12.0);  // 1+2+4+5
  CHECK(o[1] == 21.0);  // 1+2+3+4+5+6
  CHECK(o[4] == 45.0);  // full sum
  CHECK(o[8] == 28.0);  // 5+6+8+9

  // naive loop oracle on random shapes
  Tensor xr = random_tensor({2, 3, 5, 4}, 10);
  Tensor wr = random_tensor({4, 3, 3, 3}, 11);
  Tape t2;
  const Tensor& got = t2.value(t2.conv2d(t2.constant(xr), t2.constant(wr)));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t oc = 0; oc < 4; ++oc)
      for (std::ptrdiff_t y = 0; y < 5; ++y)
        for (std::ptrdiff_t xx = 0; xx < 4; ++xx) {
          double acc = 0.0;
          for (std::size_t c = 0; c < 3; ++c)
            for (std::ptrdiff_t dy = -1; dy <= 1; ++dy)
              for (std::ptrdiff_t dx = -1; dx <= 1; ++dx) {
                std::ptrdiff_t sy = y + dy, sx = xx + dx;
                if (sy < 0 || sy >= 5 || sx < 0 || sx >= 4) continue;
                acc += wr[((oc * 3 + c) * 3 + (dy + 1)) * 3 + (dx + 1)] *
                       xr[((b * 3 + c) * 5 + sy) * 4 + sx];
              }
          const double v = got[((b * 4 + oc) * 5 + y) * 4 + xx];
          CHECK(std::abs(v - acc) <= 1e-12);
        }
}

TEST_CASE("forward oracles: minmax, row_lse, head_pair_bounds") {
  Tape t;
  Tensor x = Tensor::matrix({{3, 1, -2, 5}, {0, 0, 7, -7}});
  const Tensor& mm = t.value(t.minmax(t.constant(x)));
  CHECK(mm(0, 0) == 1.0);
  CHECK(mm(0, 1) == 3.0);
  CHECK(mm(0, 2) == -2.0);
  CHECK(mm(0, 3) == 5.0);
  CHECK(mm(1, 0) == 0.0);  // tie: min slot keeps the first element
  CHECK(mm(1, 1) == 0.0);
  CHECK(mm(1, 2) == -7.0);
  CHECK(mm(1, 3) == 7.0);

  // rank-4 minmax pairs channels at each position
  Tensor xc({1, 2, 1, 2});
  xc[0] = 4.0; xc[1] = -1.0;  // channel 0
  xc[2] = 2.0; xc[3] = 3.0;   // channel 1
  const Tensor& mc = t.value(t.minmax(t.constant(xc)));
  CHECK(mc[0] == 2.0);
  CHECK(mc[1] == -1.0);
  CHECK(mc[2] == 4.0);
  CHECK(mc[3] == 3.0);

  CHECK_THROWS_AS(t.minmax(t.constant(Tensor({2, 3}))), OddWidth);

  Tensor f = random_tensor({3, 5}, 12, -3.0, 3.0);
  const Tensor& lse = t.value(t.row_lse(t.constant(f)));
  for (std::size_t i = 0; i < 3; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 5; ++j) s += std::exp(f(i, j));
    CHECK(std::abs(lse[i] - std::log(s)) <= 1e-12);
  }

  Tensor w = Tensor::matrix({{0, 0}, {3, 4}, {1, 1}});
  const Tensor& d = t.value(t.head_pair_bounds(t.constant(w), {1, 0}));
  CHECK(d(0, 0) == 5.0);                      // ||w1 - w0||
  CHECK(d(0, 1) == 0.0);                      // self distance
  CHECK(std::abs(d(0, 2) - std::sqrt(13.0)) <= 1e-12);
  CHECK(d(1, 1) == 5.0);
  CHECK(d(1, 0) == 0.0);
}

TEST_CASE("forward oracles: bookkeeping ops") {
  Tape t;
  Tensor f = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  NodeId fid = t.constant(f);
  const Tensor& picked = t.value(t.pick_per_row(fid, {2, 0}));
  CHECK(picked[0] == 3.0);
  CHECK(picked[1] == 4.0);

  const Tensor& rex = t.value(t.row_max_excluding(fid, {2, 1}));
  CHECK(rex[0] == 2.0);  // max of {1,2}
  CHECK(rex[1] == 6.0);  // max of {4,6}

  NodeId s = t.constant(Tensor::from_values({2}, {9.0, 10.0}));
  const Tensor& app = t.value(t.append_col(fid, s));
  CHECK(app.cols() == 4);
  CHECK(app(0, 3) == 9.0);
  CHECK(app(1, 3) == 10.0);
  CHECK(app(1, 2) == 6.0);

  Tensor x4 = random_tensor({2, 6, 2, 2}, 13);
  NodeId xid = t.constant(x4);
  NodeId lo = t.slice_channels(xid, 0, 2);
  NodeId hi = t.slice_channels(xid, 2, 6);
  const Tensor& back = t.value(t.concat_channels({lo, hi}));
  for (std::size_t i = 0; i < x4.size(); ++i) CHECK(back[i] == x4[i]);
}

TEST_CASE("finite differences: every primitive, 20 random instances") {
  Tensor seed1({1});
  seed1[0] = 1.0;
  for (std::uint64_t rep = 0; rep < 20; ++rep) {
    const std::uint64_t s = 1000 + rep * 37;

    // dense/elementwise group
    CHECK(fd([&](Tape& t, const std::vector<NodeId>& p) {
            return weighted_sum(t, t.matmul(p[0], p[1]), s);
          },
          {random_tensor({3, 5}, s + 1), random_tensor({5, 4}, s + 2)}) <= 1e-5);
    CHECK(fd([&](Tape& t, const std::vector<NodeId>& p) {
            return weighted_sum(t, t.transpose(p[0]), s);
          },
          {random_tensor({4, 6}, s + 3)}) <= 1e-5);
    CHECK(fd([&](Tape& t, const std::vector<NodeId>& p) {
            return weighted_sum(t, t.sub(t.add(p[0], p[1]), p[1]), s);
          },
          {random_tensor({3, 3}, s + 4), random_tensor({3, 3}, s + 5)}) <= 1e-5);
    CHECK(fd([&](Tape& t, const std::vector<NodeId>& p) {
            return weighted_sum(t, t.scale(p[0], -1.7), s);
          },
          {random_tensor({2, 7}, s + 6)}) <= 1e-5);
    CHECK(fd([&](Tape& t, const std::vector<NodeId>& p) {
            return weighted_sum(t, t.mul(p[0], p[1]), s);
          },
          {random_tensor({4, 4}, s + 7), random_tensor({4, 4}, s + 8)}) <= 1e-5);
    CHECK(fd([&](Tape& t, const std::vector<NodeId>& p) {
            return weighted_sum(t, t.mul_scalar(p[0], p[1]), s);
          },
          {random_tensor({3, 4}, s + 9), random_tensor({1}, s + 10)}) <= 1e-5);
    CHECK(fd([&](Tape& t, const std::vector<NodeId>& p) {
            return weighted_sum(t, t.add_rowvec(p[0], p[1]), s);
          },
          {random_tensor({5, 3}, s + 11), random_tensor({3}, s + 12)}) <= 1e-5);
    CHECK(fd([&](Tape& t, const std::vector<NodeId>& p) {
            return weighted_sum(t, t.add_chanvec(p[0], p[1]), s);
          },
          {random_tensor({2, 4, 3, 3}, s + 13), random_tensor({4}, s + 14)}) <=
          1e-5);
    CHECK(fd([&](Tape& t, const std::vector<NodeId>& p) {
            return weighted_sum(t, t.row_scale(p[0], p[1]), s);
          },
          {random_tensor({4, 5}, s + 15), random_tensor({4}, s + 16)}) <= 1e-5);
    CHECK(fd([&](Tape& t, const std::vector<NodeId>& p) {
            return weighted_sum(t, t.col_scale(p[0], p[1]), s);
          },
          {random_tensor({4, 5}, s + 17), random_tensor({5}, s + 18)}) <= 1e-5);

    // nonlinear elementwise, sampled away from kinks/poles
    CHECK(fd([&](Tape& t, const std::vector<NodeId>& p) {
            return weighted_sum(t, t.exp(p[0]), s);
          },
          {random_tensor({3, 4}, s + 19)}) <= 1e-5);
    CHECK(fd([&](Tape& t, const std::vector<NodeId>& p) {
            return weighted_sum(t, t.log(p[0]), s);
          },
          {random_tensor({3, 4}, s + 20, 0.5, 2.0)}) <= 1e-5);
    {
      Tensor a = random_tensor({4, 4}, s + 21);
      for (std::size_t i = 0; i < a.size(); ++i)
        a[i] += a[i] >= 0.0 ? 0.2 : -0.2;  // keep |a| >= 0.2
      CHECK(fd([&](Tape& t, const std::vector<NodeId>& p) {
              return weighted_sum(t, t.abs(p[0]), s);
            },
            {a}) <= 1e-5);
      CHECK(fd([&](Tape& t, const std::vector<NodeId>& p) {
              return weighted_sum(t, t.relu(p[0]), s);
            },
            {a}) <= 1e-5);
    }
    for (double pexp : {-1.0, -0.5, 0.5}) {
      CHECK(fd([&](Tape& t, const std::vector<NodeId>& p) {
              return weighted_sum(t, t.pow_nonneg(p[0], pexp), s);
            },
            {random_tensor({3, 3}, s + 22, 0.5, 2.0)}) <= 1e-5);
    }
    CHECK(fd([&](Tape& t, const std::vector<NodeId>& p) {
            return weighted_sum(t, t.div_or_zero(p[0], p[1]), s);
          },
          {random_tensor({3, 4}, s + 23),
           random_tensor({3, 4}, s + 24, 0.5, 2.0)}) <= 1e-5);

    // reductions
    CHECK(fd([&](Tape& t, const std::vector<NodeId>& p) {
            return weighted_sum(t, t.row_sum(p[0]), s);
          },
          {random_tensor({5, 6}, s + 25)}) <= 1e-5);
    CHECK(fd([&](Tape& t, const std::vector<NodeId>& p) {
            return t.reduce_sum(p[0]);
          },
          {random_tensor({4, 3}, s + 26)}) <= 1e-5);

    // factorizations and solves
    CHECK(fd([&](Tape& t, const std::vector<NodeId>& p) {
            NodeId gram = t.matmul(p[0], t.transpose(p[0]));
            NodeId spd = t.add(gram, t.constant(Tensor::identity(4)));
            return weighted_sum(t, t.cholesky(spd), s);
          },
          {random_tensor({4, 4}, s + 27)}) <= 1e-5);
    CHECK(fd([&](Tape& t, const std::vector<NodeId>& p) {
            NodeId gram = t.matmul(p[0], t.transpose(p[0]));
            NodeId spd = t.add(gram, t.constant(Tensor::identity(4)));
            return weighted_sum(t, t.solve_triangular(t.cholesky(spd), p[1]), s);
          },
          {random_tensor({4, 4}, s + 28), random_tensor({4, 3}, s + 29)}) <=
          1e-5);
    CHECK(fd([&](Tape& t, const std::vector<NodeId>& p) {
            NodeId shifted =
                t.add(p[0], t.constant(numerics::scale(Tensor::identity(4), 3.0)));
            return weighted_sum(t, t.solve_general(shifted, p[1]), s);
          },
          {random_tensor({4, 4}, s + 30), random_tensor({4, 2}, s + 31)}) <=
          1e-5);

    // conv and structural ops
    CHECK(fd([&](Tape& t, const std::vector<NodeId>& p) {
            return weighted_sum(t, t.conv2d(p[0], p[1]), s);
          },
          {random_tensor({2, 2, 4, 3}, s + 32),
           random_tensor({3, 2, 3, 3}, s + 33)}) <= 1e-5);
    {
      // spread pair members so no tie flips inside the FD step
      Tensor a = random_tensor({3, 6}, s + 34, -1.0, 1.0);
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t tpair = 0; tpair < 3; ++tpair) {
          double& lo = a(i, 2 * tpair);
          double& hi = a(i, 2 * tpair + 1);
          if (std::abs(lo - hi) < 0.1) hi += 0.25;
        }
      CHECK(fd([&](Tape& t, const std::vector<NodeId>& p) {
              return weighted_sum(t, t.minmax(p[0]), s);
            },
            {a}) <= 1e-6);
    }
    CHECK(fd([&](Tape& t, const std::vector<NodeId>& p) {
            return weighted_sum(t, t.append_col(p[0], p[1]), s);
          },
          {random_tensor({4, 3}, s + 35), random_tensor({4}, s + 36)}) <= 1e-5);
    CHECK(fd([&](Tape& t, const std::vector<NodeId>& p) {
            return weighted_sum(t, t.pick_per_row(p[0], {1, 3, 0, 2}), s);
          },
          {random_tensor({4, 4}, s + 37)}) <= 1e-5);
    {
      // gaps > 0.1 between top candidates keep the argmax stable under FD
      Tensor a({3, 4});
      std::mt19937_64 rng(s + 38);
      std::uniform_real_distribution<double> u(0.0, 1.0);
      for (std::size_t i = 0; i < 3; ++i) {
        std::vector<double> vals{3.0, 2.0, 1.0, 0.0};
        std::shuffle(vals.begin(), vals.end(), rng);
        for (std::size_t j = 0; j < 4; ++j) a(i, j) = vals[j] + 0.05 * u(rng);
      }
      CHECK(fd([&](Tape& t, const std::vector<NodeId>& p) {
              return weighted_sum(t, t.row_max_excluding(p[0], {0, 1, 2}), s);
            },
            {a}) <= 1e-5);
    }
    CHECK(fd([&](Tape& t, const std::vector<NodeId>& p) {
            return weighted_sum(t, t.row_lse(p[0]), s);
          },
          {random_tensor({3, 5}, s + 39)}) <= 1e-5);
    {
      // rows spaced apart so distances stay > 0.1
      Tensor w({4, 3});
      std::mt19937_64 rng(s + 40);
      std::uniform_real_distribution<double> u(-0.1, 0.1);
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j)
          w(i, j) = static_cast<double>(i) + u(rng);
      CHECK(fd([&](Tape& t, const std::vector<NodeId>& p) {
              return weighted_sum(t, t.head_pair_bounds(p[0], {2, 0, 1}), s);
            },
            {w}) <= 1e-5);
    }
    CHECK(fd([&](Tape& t, const std::vector<NodeId>& p) {
            NodeId lo = t.slice_channels(p[0], 0, 2);
            NodeId hi = t.slice_channels(p[0], 2, 5);
            return weighted_sum(t, t.concat_channels({hi, lo}), s);
          },
          {random_tensor({2, 5, 2, 3}, s + 41)}) <= 1e-5);
    CHECK(fd([&](Tape& t, const std::vector<NodeId>& p) {
            return weighted_sum(t, t.reshape(p[0], {6, 2}), s);
          },
          {random_tensor({3, 4}, s + 42)}) <= 1e-5);
  }
}

TEST_CASE("finite differences: quadratic form is clean to 1e-9") {
  Tensor x = random_tensor({6}, 50);
  double err = fd(
      [](Tape& t, const std::vector<NodeId>& p) {
        return t.reduce_sum(t.mul(p[0], p[0]));
      },
      {x}, 1e-5);
  CHECK(err <= 1e-9);
}

TEST_CASE("finite differences: cholesky-orthogonalized residual composition") {
  // f(V) = sum over entries of solve(chol((I+V)(I+V)^T), I+V)
  Tensor v = random_tensor({4, 4}, 51, -0.3, 0.3);
  double err = fd(
      [](Tape& t, const std::vector<NodeId>& p) {
        NodeId a = t.add(p[0], t.constant(Tensor::identity(4)));
        NodeId gram = t.matmul(a, t.transpose(a));
        NodeId w = t.solve_triangular(t.cholesky(gram), a);
        return t.reduce_sum(w);
      },
      {v}, 1e-5);
  CHECK(err <= 1e-5);
}

TEST_CASE("finite differences: two-layer margin loss end to end") {
  // dense -> minmax -> head, cross-entropy over classes plus a bottom logit
  // built from the spectral bound and head row distances — the same graph the
  // trainer records.
  const std::size_t batch = 4, in = 3, hidden = 6, classes = 3;
  Tensor x = random_tensor({batch, in}, 60);
  Tensor w1 = random_tensor({in, hidden}, 61);
  Tensor b1 = random_tensor({hidden}, 62);
  Tensor wh = random_tensor({classes, hidden}, 63);
  Tensor bh = random_tensor({classes}, 64);
  std::vector<std::size_t> labels{0, 2, 1, 1};
  Tensor u1 = random_tensor({1, hidden}, 65);
  Tensor v1 = random_tensor({in, 1}, 66);

  auto build = [&](Tape& t, const std::vector<NodeId>& p) {
    NodeId z = t.minmax(t.add_rowvec(t.matmul(t.constant(x), p[0]), p[1]));
    NodeId f = t.add_rowvec(t.matmul(z, t.transpose(p[2])), p[3]);
    // detached-direction spectral estimate of the first layer
    NodeId s1 = t.reshape(
        t.matmul(t.matmul(t.constant(u1), t.transpose(p[0])), t.constant(v1)),
        {1});
    const Tensor& fv = t.value(f);
    std::vector<std::size_t> top(batch);
    for (std::size_t i = 0; i < batch; ++i) {
      std::size_t arg = 0;
      for (std::size_t j = 1; j < classes; ++j)
        if (fv(i, j) > fv(i, arg)) arg = j;
      top[i] = arg;
    }
    NodeId dists = t.head_pair_bounds(p[2], top);
    NodeId margin_scores =
        t.add(f, t.mul_scalar(dists, t.scale(s1, 0.15)));
    NodeId bot = t.row_max_excluding(margin_scores, top);
    NodeId z_ext = t.append_col(f, bot);
    NodeId nll = t.sub(t.row_lse(z_ext), t.pick_per_row(z_ext, labels));
    return t.scale(t.reduce_sum(nll), 1.0 / static_cast<double>(batch));
  };
  double err = fd(build, {w1, b1, wh, bh}, 1e-5);
  CHECK(err <= 1e-4);
}

TEST_CASE("finite_diff_check reports skipped flat coordinates") {
  // second parameter never reaches the objective: zero gradient both ways
  auto report = finite_diff_check(
      [](Tape& t, const std::vector<NodeId>& p) {
        (void)p;
        return t.reduce_sum(t.mul(p[0], p[0]));
      },
      {random_tensor({3}, 70), random_tensor({4}, 71)}, 1e-5);
  CHECK(report.skipped >= 4);
  CHECK(report.max_rel_error <= 1e-9);
}
