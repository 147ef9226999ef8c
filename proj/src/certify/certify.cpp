#include "lipcert/certify/certify.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "lipcert/autodiff/tape.hpp"
#include "lipcert/errors.hpp"

namespace lipcert::certify {

using autodiff::NodeId;
using autodiff::Tape;

const char* method_name(Method m) {
  return m == Method::kNaive ? "naive" : "tight";
}

Method method_from_name(const std::string& name) {
  if (name == "naive") return Method::kNaive;
  if (name == "tight") return Method::kTight;
  throw ConfigError("unknown certification method '" + name + "'");
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::size_t argmax_index(const Tensor& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

double runner_up(const Tensor& v, std::size_t j) {
  double best = -kInf;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (i != j) best = std::max(best, v[i]);
  return best;
}

Tensor with_batch_dim(const Tensor& x) {
  std::vector<std::size_t> shape{1};
  shape.insert(shape.end(), x.shape().begin(), x.shape().end());
  Tensor out(shape);
  std::copy_n(x.data(), x.size(), out.data());
  return out;
}

Tensor drop_batch_dim(const Tensor& x) {
  std::vector<std::size_t> shape(x.shape().begin() + 1, x.shape().end());
  Tensor out(shape.empty() ? std::vector<std::size_t>{1} : shape);
  std::copy_n(x.data(), x.size(), out.data());
  return out;
}

// forward through everything except the head, batch dimension handled
Tensor penultimate_features(const layers::Network& net, const Tensor& x) {
  Tensor h = with_batch_dim(x);
  for (std::size_t i = 0; i + 1 < net.layers.size(); ++i)
    h = net.layers[i]->forward_eval(h);
  return drop_batch_dim(h);
}

}  // namespace

CertResult certify_naive(const Tensor& logits, double k, double epsilon) {
  if (logits.rank() != 1 || logits.size() == 0)
    throw ShapeMismatch("certify_naive: logits must be a nonempty vector");
  if (!(k > 0.0)) throw ConfigError("certify_naive: k must be positive");

  CertResult r;
  r.method = Method::kNaive;
  const std::size_t j = argmax_index(logits);
  r.predicted = static_cast<int>(j);
  r.margin = logits.size() == 1 ? kInf : logits[j] - runner_up(logits, j);
  r.certified_radius = r.margin / (std::numbers::sqrt2 * k);
  r.certified_at = r.certified_radius > epsilon;
  return r;
}

CertResult certify_tight(const Tensor& penultimate, const Matrix& head_w,
                         const Tensor& head_b, double k_backbone,
                         double epsilon) {
  if (penultimate.rank() != 1)
    throw ShapeMismatch("certify_tight: penultimate must be a vector");
  if (head_w.rank() != 2 || head_w.cols() != penultimate.size() ||
      head_b.size() != head_w.rows() || head_w.rows() == 0)
    throw ShapeMismatch("certify_tight: head shapes do not match");
  if (!(k_backbone > 0.0))
    throw ConfigError("certify_tight: k_backbone must be positive");

  const std::size_t classes = head_w.rows(), d = penultimate.size();
  Tensor logits({classes});
  for (std::size_t c = 0; c < classes; ++c) {
    double s = head_b[c];
    for (std::size_t i = 0; i < d; ++i) s += head_w(c, i) * penultimate[i];
    logits[c] = s;
  }

  CertResult r;
  r.method = Method::kTight;
  const std::size_t j = argmax_index(logits);
  r.predicted = static_cast<int>(j);
  r.margin = classes == 1 ? kInf : logits[j] - runner_up(logits, j);

  double radius = kInf;
  for (std::size_t i = 0; i < classes; ++i) {
    if (i == j) continue;
    const double diff = logits[j] - logits[i];
    double wnorm = 0.0;
    for (std::size_t p = 0; p < d; ++p) {
      const double dw = head_w(j, p) - head_w(i, p);
      wnorm += dw * dw;
    }
    wnorm = std::sqrt(wnorm);
    if (wnorm == 0.0) {
      // identical rows differ by a constant logit offset forever
      if (diff <= 0.0) radius = 0.0;
      continue;
    }
    radius = std::min(radius, diff / (k_backbone * wnorm));
  }
  r.certified_radius = radius;
  r.certified_at = r.certified_radius > epsilon;
  return r;
}

CertResult certify_point(const layers::Network& net,
                         const layers::LipReport& lip, const Tensor& x,
                         Method method, double epsilon) {
  if (method == Method::kNaive) {
    const Tensor logits = drop_batch_dim(net.forward_eval(with_batch_dim(x)));
    return certify_naive(logits, lip.backbone_product * lip.head_norm,
                         epsilon);
  }
  const Tensor penult = penultimate_features(net, x);
  return certify_tight(penult, net.head().weight(), net.head().bias(),
                       lip.backbone_product, epsilon);
}

double vra(layers::Network& net, const data::Dataset& set, double epsilon,
           Method method) {
  if (set.empty()) throw EmptyDataset("vra: empty dataset");
  net.refresh_converged();
  const layers::LipReport lip = layers::network_lipschitz(net);

  std::size_t verified = 0;
  for (const data::Sample& s : set) {
    const CertResult r = certify_point(net, lip, s.input, method, epsilon);
    if (r.predicted == s.label && r.certified_at) ++verified;
  }
  return static_cast<double>(verified) / static_cast<double>(set.size());
}

namespace {

double l2_norm(const Tensor& t) {
  double s = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) s += t[i] * t[i];
  return std::sqrt(s);
}

// clamp to [0,1] after pulling back into the epsilon-ball around x0; both
// projections shrink per-coordinate distance to x0, so the result satisfies
// both constraints
void project(const Tensor& x0, double epsilon, Tensor& x) {
  Tensor delta(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) delta[i] = x[i] - x0[i];
  const double n = l2_norm(delta);
  if (n > epsilon && n > 0.0) {
    const double s = epsilon / n;
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = x0[i] + delta[i] * s;
  }
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::clamp(x[i], 0.0, 1.0);
}

int predict(const layers::Network& net, const Tensor& x) {
  const Tensor logits = net.forward_eval(with_batch_dim(x));
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return static_cast<int>(best);
}

}  // namespace

AttackResult pgd_attack(const layers::Network& net, const Tensor& x, int label,
                        double epsilon, std::size_t steps,
                        std::size_t restarts) {
  AttackResult result;
  result.adversarial = x;
  if (label < 0 || static_cast<std::size_t>(label) >= net.class_count())
    throw ConfigError("pgd_attack: label out of range");
  // only a correctly-predicted clean point can be attacked
  if (predict(net, x) != label) return result;
  if (epsilon <= 0.0 || steps == 0 || restarts == 0) return result;

  const double alpha = 2.5 * epsilon / static_cast<double>(steps);
  const std::size_t d = x.size();

  for (std::size_t restart = 0; restart < restarts; ++restart) {
    std::mt19937_64 rng(0x9e3779b97f4a7c15ull ^ (restart * 0xbf58476d1ce4e5b9ull + 1));
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    // uniform draw from the epsilon-ball, then into the box
    Tensor adv = x;
    {
      Tensor dir(x.shape());
      for (std::size_t i = 0; i < d; ++i) dir[i] = gauss(rng);
      const double n = l2_norm(dir);
      const double radius =
          epsilon * std::pow(unit(rng), 1.0 / static_cast<double>(d));
      if (n > 0.0)
        for (std::size_t i = 0; i < d; ++i) adv[i] = x[i] + dir[i] * radius / n;
      project(x, epsilon, adv);
    }

    for (std::size_t step = 0; step <= steps; ++step) {
      Tape t;
      const NodeId xin = t.leaf(with_batch_dim(adv));
      const NodeId logits_node = net.build_frozen(t, xin);
      const Tensor& logits = t.value(logits_node);

      std::size_t pred = 0, rival = label == 0 ? 1 : 0;
      for (std::size_t i = 0; i < logits.size(); ++i) {
        if (logits[i] > logits[pred]) pred = i;
        if (i != static_cast<std::size_t>(label) && logits[i] > logits[rival])
          rival = i;
      }
      if (pred != static_cast<std::size_t>(label)) {
        result.success = true;
        result.adversarial = adv;
        Tensor delta(adv.shape());
        for (std::size_t i = 0; i < d; ++i) delta[i] = adv[i] - x[i];
        result.norm = l2_norm(delta);
        return result;
      }
      if (step == steps) break;

      // ascend the margin loss f_rival - f_label
      Tensor seed({1, logits.size()});
      seed[rival] = 1.0;
      seed[static_cast<std::size_t>(label)] = -1.0;
      t.backward(logits_node, seed);
      const Tensor& g = t.grad(xin);
      double gnorm = 0.0;
      for (std::size_t i = 0; i < d; ++i) gnorm += g[i] * g[i];
      gnorm = std::sqrt(gnorm);
      if (gnorm == 0.0) break;  // flat: this restart is done
      for (std::size_t i = 0; i < d; ++i) adv[i] += alpha * g[i] / gnorm;
      project(x, epsilon, adv);
    }
  }
  return result;
}

}  // namespace lipcert::certify
