#pragma once

#include <string>

#include "lipcert/data/data.hpp"
#include "lipcert/layers/layers.hpp"
#include "lipcert/tensor.hpp"

namespace lipcert::certify {

enum class Method { kNaive, kTight };

const char* method_name(Method m);
Method method_from_name(const std::string& name);

// Per-input certification record. certified_at <=> certified_radius >
// epsilon, strictly: a margin exactly on the boundary does not certify.
struct CertResult {
  int predicted = 0;
  double margin = 0.0;          // f_j - max_{i != j} f_i
  double certified_radius = 0.0;
  bool certified_at = false;
  Method method = Method::kNaive;
};

// Global-bound certificate: radius = margin / (sqrt(2) * k), where k bounds
// the whole network (backbone product * head norm). logits is rank-1.
// Throws ConfigError for k <= 0.
CertResult certify_naive(const Tensor& logits, double k, double epsilon);

// Pairwise certificate: radius = min_{i != j} (f_j - f_i) /
// (k_backbone * ||w_j - w_i||) with f = head_w * penultimate + head_b and
// j = argmax f. A pair with w_i == w_j never limits the radius unless the
// logits tie, which pins the radius to 0. Throws ConfigError for
// k_backbone <= 0.
CertResult certify_tight(const Tensor& penultimate, const Matrix& head_w,
                         const Tensor& head_b, double k_backbone,
                         double epsilon);

// One point through a frozen network whose bounds `lip` were already
// refreshed. Input x carries no batch dimension.
CertResult certify_point(const layers::Network& net,
                         const layers::LipReport& lip, const Tensor& x,
                         Method method, double epsilon);

// Verified-robust accuracy: the fraction of points that are BOTH predicted
// correctly AND certified at epsilon. Re-converges the network's bounds
// before evaluating. Throws EmptyDataset.
double vra(layers::Network& net, const data::Dataset& set, double epsilon,
           Method method);

struct AttackResult {
  bool success = false;
  Tensor adversarial;  // the attacked input (clean copy when unsuccessful)
  double norm = 0.0;   // ||adversarial - x||_2
};

// l2 PGD ascent on the margin loss: `restarts` random starts in the
// epsilon-ball, `steps` moves of 2.5*epsilon/steps along the normalized
// input gradient, each projected back into the ball and clamped to [0,1].
// Success means the clean point was predicted as `label` and some evaluated
// point inside the ball is not. Deterministic.
AttackResult pgd_attack(const layers::Network& net, const Tensor& x, int label,
                        double epsilon, std::size_t steps,
                        std::size_t restarts);

}  // namespace lipcert::certify
