#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <random>

#include "lipcert/certify/certify.hpp"
#include "lipcert/data/tasks.hpp"
#include "lipcert/errors.hpp"
#include "lipcert/layers/layers.hpp"
#include "lipcert/numerics/power_iteration.hpp"

using namespace lipcert;
using namespace lipcert::certify;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Network whose only layer is the head: an explicit linear classifier with
// backbone product exactly 1, so tight radii reduce to plain geometry.
layers::Network linear_net(const Tensor& w, const Tensor& b) {
  layers::Network net;
  net.input_shape = {w.cols()};
  auto head = std::make_unique<layers::Head>(w.cols(), w.rows());
  auto ps = head->params();
  *ps[0] = w;
  *ps[1] = b;
  net.layers.push_back(std::move(head));
  net.validate();
  net.refresh_converged();
  return net;
}

// The slab classifier used throughout: f1 - f0 = (x + y) - 1, i.e. the
// decision boundary is the moons separator x + y = 1 and the overall
// Lipschitz constant is exactly 1.
layers::Network moons_net() {
  return linear_net(Tensor::matrix({{-0.5, -0.5}, {0.5, 0.5}}),
                    Tensor::vector({1.0, 0.0}));
}

layers::Network mixed_net(std::uint64_t seed) {
  layers::Network net;
  net.input_shape = {2};
  net.layers.push_back(std::make_unique<layers::DenseOrtho>(
      layers::Kind::kDenseCayley, 2, 8));
  net.layers.push_back(std::make_unique<layers::MinMaxLayer>(layers::Shape{8}));
  net.layers.push_back(std::make_unique<layers::Head>(8, 2));
  net.validate();
  std::mt19937_64 rng(seed);
  net.init(rng);
  return net;
}

int predict_flat(const layers::Network& net, const Tensor& x) {
  Tensor batched({1, x.size()});
  for (std::size_t i = 0; i < x.size(); ++i) batched[i] = x[i];
  const Tensor logits = net.forward_eval(batched);
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return static_cast<int>(best);
}

double dist(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("method names round-trip") {
  CHECK(method_from_name("naive") == Method::kNaive);
  CHECK(method_from_name("tight") == Method::kTight);
  CHECK(std::string(method_name(Method::kNaive)) == "naive");
  CHECK(std::string(method_name(Method::kTight)) == "tight");
  CHECK_THROWS_AS(method_from_name("loose"), ConfigError);
}

TEST_CASE("certify_naive: worked examples") {
  const Tensor logits = Tensor::vector({2.0, 0.5});

  CertResult r = certify_naive(logits, 1.0, 0.1);
  CHECK(r.predicted == 0);
  CHECK(r.margin == doctest::Approx(1.5).epsilon(1e-15));
  CHECK(r.certified_radius ==
        doctest::Approx(1.5 / std::numbers::sqrt2).epsilon(1e-15));
  CHECK(r.certified_at);
  CHECK(r.method == Method::kNaive);

  // doubling k halves the radius, bit-exactly
  CertResult r2 = certify_naive(logits, 2.0, 0.1);
  CHECK(r2.certified_radius == r.certified_radius / 2.0);

  // a tie certifies nothing, not even at epsilon 0
  CertResult tie = certify_naive(Tensor::vector({1.0, 1.0}), 1.0, 0.0);
  CHECK(tie.margin == 0.0);
  CHECK(tie.certified_radius == 0.0);
  CHECK_FALSE(tie.certified_at);

  // any strict margin certifies at epsilon 0
  CHECK(certify_naive(Tensor::vector({0.1, 0.0999}), 1.0, 0.0).certified_at);

  // a single logit has no rival: infinite radius
  CertResult solo = certify_naive(Tensor::vector({3.0}), 1.0, 1e12);
  CHECK(solo.margin == kInf);
  CHECK(solo.certified_at);
}

TEST_CASE("certify_naive: rejections") {
  const Tensor logits = Tensor::vector({2.0, 0.5});
  CHECK_THROWS_AS(certify_naive(logits, 0.0, 0.1), ConfigError);
  CHECK_THROWS_AS(certify_naive(logits, -1.0, 0.1), ConfigError);
  CHECK_THROWS_AS(certify_naive(Tensor::matrix({{1.0, 2.0}}), 1.0, 0.1),
                  ShapeMismatch);
  CHECK_THROWS_AS(certify_naive(Tensor({0}), 1.0, 0.1), ShapeMismatch);
}

TEST_CASE("certify_tight: worked examples") {
  // identity head: logits equal the penultimate features
  CertResult r = certify_tight(Tensor::vector({2.0, 0.5}),
                               Tensor::identity(2), Tensor({2}), 1.0, 0.5);
  CHECK(r.predicted == 0);
  CHECK(r.margin == doctest::Approx(1.5).epsilon(1e-15));
  // ||e_0 - e_1|| = sqrt(2), so this coincides with the naive radius
  CHECK(r.certified_radius ==
        doctest::Approx(1.5 / std::numbers::sqrt2).epsilon(1e-15));
  CHECK(r.certified_at);
  CHECK(r.method == Method::kTight);

  // three classes: the binding pair need not involve the runner-up
  const Matrix w3 = Tensor::matrix({{1, 0}, {0, 1}, {-1, 0}});
  CertResult r3 =
      certify_tight(Tensor::vector({3.0, 1.0}), w3, Tensor({3}), 1.0, 1.0);
  CHECK(r3.predicted == 0);
  CHECK(r3.margin == doctest::Approx(2.0).epsilon(1e-15));
  // pair (0,1): 2/sqrt(2) = sqrt(2); pair (0,2): 6/2 = 3 -> min is sqrt(2)
  CHECK(r3.certified_radius ==
        doctest::Approx(std::numbers::sqrt2).epsilon(1e-14));
  CHECK(r3.certified_at);

  // doubling the backbone bound halves the radius
  CertResult rh =
      certify_tight(Tensor::vector({3.0, 1.0}), w3, Tensor({3}), 2.0, 1.0);
  CHECK(rh.certified_radius == doctest::Approx(r3.certified_radius / 2.0)
                                   .epsilon(1e-15));
}

TEST_CASE("certify_tight: identical head rows") {
  const Matrix dup = Tensor::matrix({{1.0, 1.0}, {1.0, 1.0}});
  const Tensor p = Tensor::vector({0.3, 0.4});

  // same bias: the logits tie forever, radius is pinned to zero
  CertResult tie = certify_tight(p, dup, Tensor({2}), 1.0, 0.0);
  CHECK(tie.certified_radius == 0.0);
  CHECK_FALSE(tie.certified_at);

  // differing bias: the gap is constant under any perturbation, so the
  // pair never binds and the radius is unbounded
  CertResult open = certify_tight(p, dup, Tensor::vector({1.0, 0.0}), 1.0,
                                  1e9);
  CHECK(open.predicted == 0);
  CHECK(open.certified_radius == kInf);
  CHECK(open.certified_at);
}

TEST_CASE("certify_tight: rejections") {
  const Matrix w = Tensor::identity(2);
  const Tensor p = Tensor::vector({1.0, 0.0});
  CHECK_THROWS_AS(certify_tight(p, w, Tensor({2}), 0.0, 0.1), ConfigError);
  CHECK_THROWS_AS(certify_tight(p, w, Tensor({2}), -2.0, 0.1), ConfigError);
  CHECK_THROWS_AS(certify_tight(Tensor::vector({1.0, 2.0, 3.0}), w,
                                Tensor({2}), 1.0, 0.1),
                  ShapeMismatch);
  CHECK_THROWS_AS(certify_tight(p, w, Tensor({3}), 1.0, 0.1), ShapeMismatch);
  CHECK_THROWS_AS(certify_tight(Tensor::matrix({{1.0, 0.0}}), w, Tensor({2}),
                                1.0, 0.1),
                  ShapeMismatch);
}

TEST_CASE("tight radius dominates the naive radius") {
  // ||w_j - w_i|| <= sqrt(2) ||W||_2, so the pairwise radius can never fall
  // below the global one when the naive k uses the true head norm.
  std::mt19937_64 rng(20240817);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t d = 2 + static_cast<std::size_t>(unif(rng) * 5);
    const std::size_t classes = 2 + static_cast<std::size_t>(unif(rng) * 4);
    const double kb = std::exp(gauss(rng) * 0.5);

    Matrix w({classes, d});
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = gauss(rng);
    Tensor b({classes});
    for (std::size_t i = 0; i < classes; ++i) b[i] = gauss(rng);
    Tensor p({d});
    for (std::size_t i = 0; i < d; ++i) p[i] = gauss(rng);

    Tensor logits({classes});
    for (std::size_t c = 0; c < classes; ++c) {
      double s = b[c];
      for (std::size_t i = 0; i < d; ++i) s += w(c, i) * p[i];
      logits[c] = s;
    }

    const double head_norm = numerics::spectral_norm_oracle(w);
    const double eps = unif(rng);
    CAPTURE(trial);
    const CertResult naive = certify_naive(logits, kb * head_norm, eps);
    const CertResult tight = certify_tight(p, w, b, kb, eps);

    CHECK(naive.predicted == tight.predicted);
    CHECK(naive.margin == doctest::Approx(tight.margin).epsilon(1e-12));
    CHECK(tight.certified_radius >= naive.certified_radius - 1e-12);
    // the certification flag is a pure function of radius vs epsilon
    CHECK(naive.certified_at == (naive.certified_radius > eps));
    CHECK(tight.certified_at == (tight.certified_radius > eps));
  }
}

TEST_CASE("radii are invariant under joint logit/constant rescaling") {
  std::mt19937_64 rng(99);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix w({3, 4});
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = gauss(rng);
  Tensor b({3}), p({4});
  for (std::size_t i = 0; i < 3; ++i) b[i] = gauss(rng);
  for (std::size_t i = 0; i < 4; ++i) p[i] = gauss(rng);

  const CertResult base = certify_tight(p, w, b, 1.3, 0.2);
  for (double c : {2.0, 3.0}) {
    Matrix wc = w;
    Tensor bc = b;
    for (std::size_t i = 0; i < wc.size(); ++i) wc[i] *= c;
    for (std::size_t i = 0; i < bc.size(); ++i) bc[i] *= c;
    const CertResult scaled = certify_tight(p, wc, bc, 1.3, 0.2);
    // scaling the map scales margins and row gaps alike
    if (c == 2.0) {
      CHECK(scaled.certified_radius == base.certified_radius);
    } else {
      CHECK(scaled.certified_radius ==
            doctest::Approx(base.certified_radius).epsilon(1e-12));
    }
    CHECK(scaled.predicted == base.predicted);
  }
}

TEST_CASE("certify_point agrees with the primitives") {
  layers::Network net = mixed_net(7);
  net.refresh_converged();
  const layers::LipReport lip = layers::network_lipschitz(net);
  const Tensor x = Tensor::vector({0.3, 0.7});

  // naive path: whole-network logits with the global constant
  Tensor batched({1, 2});
  batched[0] = x[0];
  batched[1] = x[1];
  const Tensor logits_b = net.forward_eval(batched);
  Tensor logits({logits_b.size()});
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = logits_b[i];

  const CertResult vn = certify_point(net, lip, x, Method::kNaive, 0.05);
  const CertResult mn = certify_naive(
      logits, lip.backbone_product * lip.head_norm, 0.05);
  CHECK(vn.predicted == mn.predicted);
  CHECK(vn.margin == mn.margin);
  CHECK(vn.certified_radius == mn.certified_radius);
  CHECK(vn.certified_at == mn.certified_at);

  // tight path: features below the head with the backbone constant
  Tensor h = batched;
  for (std::size_t i = 0; i + 1 < net.layers.size(); ++i)
    h = net.layers[i]->forward_eval(h);
  Tensor penult({h.size()});
  for (std::size_t i = 0; i < h.size(); ++i) penult[i] = h[i];

  const CertResult vt = certify_point(net, lip, x, Method::kTight, 0.05);
  const CertResult mt = certify_tight(penult, net.head().weight(),
                                      net.head().bias(),
                                      lip.backbone_product, 0.05);
  CHECK(vt.predicted == mt.predicted);
  CHECK(vt.certified_radius == mt.certified_radius);

  // on the same point the tight certificate is never worse
  CHECK(vt.certified_radius >= vn.certified_radius - 1e-12);
}

TEST_CASE("vra on the slab classifier over two moons") {
  layers::Network net = moons_net();
  const data::Dataset moons = data::make_two_moons(200, 3);

  // the head norm is exactly 1 (singular values 1 and 0)
  const layers::LipReport lip = layers::network_lipschitz(net);
  CHECK(lip.backbone_product == 1.0);
  CHECK(lip.head_norm == doctest::Approx(1.0).epsilon(1e-9));

  // every moon point sits at least 0.3/sqrt(2) ~ 0.187 from x + y = 1, and
  // the tight radius equals that distance exactly
  const double v0 = vra(net, moons, 0.0, Method::kTight);
  const double v1 = vra(net, moons, 36.0 / 255.0, Method::kTight);
  const double v2 = vra(net, moons, 72.0 / 255.0, Method::kTight);
  const double v3 = vra(net, moons, 108.0 / 255.0, Method::kTight);
  CHECK(v0 == 1.0);
  CHECK(v1 == 1.0);
  CHECK(v1 >= v2);
  CHECK(v2 >= v3);
  CHECK(v3 < 1.0);  // the arcs reach within 108/255 of the separator
  CHECK(v3 > 0.0);  // ...but not everywhere
  CHECK(vra(net, moons, 100.0, Method::kTight) == 0.0);

  // for this head the pairwise and global bounds coincide
  CHECK(vra(net, moons, 36.0 / 255.0, Method::kNaive) == 1.0);

  CHECK_THROWS_AS(vra(net, data::Dataset{}, 0.1, Method::kTight),
                  EmptyDataset);
}

TEST_CASE("pgd_attack: closed-form threshold on a linear classifier") {
  // f0 - f1 = 2(x + y - 1): the boundary is x + y = 1, and from (0.8, 0.8)
  // the nearest misclassified point lies at distance 0.6/sqrt(2)
  layers::Network net = linear_net(Tensor::matrix({{1, 1}, {-1, -1}}),
                                   Tensor::vector({-1.0, 1.0}));
  const Tensor x = Tensor::vector({0.8, 0.8});
  const double threshold = 0.6 / std::numbers::sqrt2;
  REQUIRE(predict_flat(net, x) == 0);

  // strictly inside the certified ball: no adversarial point exists
  AttackResult fail = pgd_attack(net, x, 0, 0.98 * threshold, 40, 2);
  CHECK_FALSE(fail.success);
  CHECK(fail.norm == 0.0);

  // a little beyond the threshold the attack must land
  const double eps = 1.05 * threshold;
  AttackResult hit = pgd_attack(net, x, 0, eps, 40, 2);
  CHECK(hit.success);
  CHECK(hit.norm <= eps + 1e-9);
  // any misclassified point is at least `threshold` away
  CHECK(hit.norm >= threshold - 1e-9);
  CHECK(predict_flat(net, hit.adversarial) != 0);
  CHECK(hit.norm == doctest::Approx(dist(hit.adversarial, x)).epsilon(1e-12));
}

TEST_CASE("pgd_attack: degenerate budgets never succeed") {
  layers::Network net = linear_net(Tensor::matrix({{1, 1}, {-1, -1}}),
                                   Tensor::vector({-1.0, 1.0}));
  const Tensor x = Tensor::vector({0.8, 0.8});

  CHECK_FALSE(pgd_attack(net, x, 0, 0.0, 40, 2).success);
  CHECK_FALSE(pgd_attack(net, x, 0, -1.0, 40, 2).success);
  CHECK_FALSE(pgd_attack(net, x, 0, 0.5, 0, 2).success);
  CHECK_FALSE(pgd_attack(net, x, 0, 0.5, 40, 0).success);

  // a point the classifier already gets wrong is not attackable
  const Tensor wrong = Tensor::vector({0.2, 0.2});
  REQUIRE(predict_flat(net, wrong) == 1);
  AttackResult r = pgd_attack(net, wrong, 0, 0.5, 40, 2);
  CHECK_FALSE(r.success);
  CHECK(r.norm == 0.0);
  for (std::size_t i = 0; i < wrong.size(); ++i)
    CHECK(r.adversarial[i] == wrong[i]);

  CHECK_THROWS_AS(pgd_attack(net, x, 2, 0.1, 5, 1), ConfigError);
  CHECK_THROWS_AS(pgd_attack(net, x, -1, 0.1, 5, 1), ConfigError);
}

TEST_CASE("pgd_attack: success invariants and determinism on a random net") {
  layers::Network net = mixed_net(11);
  const data::Dataset pts = data::make_two_moons(40, 9);
  const double eps = 0.25;

  std::size_t successes = 0;
  for (const data::Sample& s : pts) {
    const int label = predict_flat(net, s.input);
    const AttackResult r = pgd_attack(net, s.input, label, eps, 15, 2);
    if (!r.success) continue;
    ++successes;
    CHECK(r.norm <= eps + 1e-9);
    CHECK(r.norm == doctest::Approx(dist(r.adversarial, s.input))
                        .epsilon(1e-12));
    CHECK(predict_flat(net, r.adversarial) != label);
    // inputs stay in the box
    for (std::size_t i = 0; i < r.adversarial.size(); ++i) {
      CHECK(r.adversarial[i] >= 0.0);
      CHECK(r.adversarial[i] <= 1.0);
    }
  }
  MESSAGE("pgd successes: ", successes, " / ", pts.size());

  // repeated runs produce byte-identical output
  const Tensor& x0 = pts.front().input;
  const int l0 = predict_flat(net, x0);
  const AttackResult a = pgd_attack(net, x0, l0, eps, 15, 2);
  const AttackResult b = pgd_attack(net, x0, l0, eps, 15, 2);
  CHECK(a.success == b.success);
  CHECK(a.norm == b.norm);
  for (std::size_t i = 0; i < a.adversarial.size(); ++i)
    CHECK(a.adversarial[i] == b.adversarial[i]);
}

TEST_CASE("certified points resist the attack") {
  // the slab classifier certifies every moon point at 0.15; the attack must
  // fail on all of them
  layers::Network net = moons_net();
  const data::Dataset moons = data::make_two_moons(60, 5);
  const layers::LipReport lip = layers::network_lipschitz(net);
  const double eps = 0.15;

  for (const data::Sample& s : moons) {
    const CertResult c = certify_point(net, lip, s.input, Method::kTight, eps);
    REQUIRE(c.certified_at);
    REQUIRE(c.predicted == s.label);
    CHECK_FALSE(pgd_attack(net, s.input, s.label, eps, 30, 2).success);
  }

  // same soundness claim on an arbitrary net, wherever its certificates land
  layers::Network rnd = mixed_net(13);
  rnd.refresh_converged();
  const layers::LipReport rlip = layers::network_lipschitz(rnd);
  std::size_t certified = 0;
  for (std::size_t i = 0; i < 30; ++i) {
    const Tensor& x = moons[i].input;
    const CertResult c = certify_point(rnd, rlip, x, Method::kTight, 0.05);
    if (!c.certified_at) continue;
    ++certified;
    CHECK_FALSE(pgd_attack(rnd, x, c.predicted, 0.05, 30, 2).success);
  }
  MESSAGE("random-net certified points: ", certified, " / 30");
}
