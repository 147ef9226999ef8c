#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lipcert/autodiff/tape.hpp"
#include "lipcert/certify/certify.hpp"
#include "lipcert/data/data.hpp"
#include "lipcert/layers/layers.hpp"
#include "lipcert/tensor.hpp"

namespace lipcert::train {

using autodiff::NodeId;
using autodiff::Tape;

struct TrainConfig {
  double epsilon_train = 108.0 / 255.0;
  std::size_t epochs = 20;
  data::MixSpec mix;
  // Base rate; the effective step size is learning_rate * batch/256 with a
  // cosine decay over the whole run.
  double learning_rate = 0.1;
  double momentum = 0.9;
  // Part of the run spent ramping epsilon linearly from 0 to epsilon_train.
  double ramp_fraction = 0.5;
  certify::Method method = certify::Method::kTight;
  std::uint64_t seed = 0;
  // Radii the per-epoch robust-accuracy columns are evaluated at.
  std::vector<double> eval_epsilons = {36.0 / 255.0, 72.0 / 255.0,
                                       108.0 / 255.0};

  void validate() const;  // ConfigError on out-of-range fields
};

struct EpochRecord {
  std::size_t epoch = 0;
  double clean_acc = 0.0;
  std::vector<double> vra;  // parallel to TrainConfig::eval_epsilons
  double loss = 0.0;
  double lip_product = 0.0;  // converged backbone bound after the epoch
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<double> eval_epsilons;
  std::vector<EpochRecord> records;
  // Columns: epoch, clean_acc, one vra@<eps> per grid point, loss,
  // lip_product, seconds. Doubles are written with 17 significant digits so
  // a reread is bit-exact.
  std::string csv() const;
};

// ---------------------------------------------------------------------------
// Loss pieces. The extended logit vector appends one entry ("bottom") that
// upper-bounds what any competitor logit could reach within radius epsilon;
// cross-entropy against it realizes certification-aware training.

// Single-sample form, tight pairwise bounds: bottom = max over i != j of
// f_i + epsilon * k_backbone * ||w_j - w_i||, j = argmax f. Throws
// ConfigError for epsilon < 0 or k_backbone <= 0.
Tensor gloro_augmented_logits(const Tensor& logits, const Matrix& head_w,
                              double k_backbone, double epsilon);

// Single-sample form, one global constant: every pairwise bound collapses to
// sqrt(2) * k.
Tensor gloro_augmented_logits_naive(const Tensor& logits, double k,
                                    double epsilon);

// Cross-entropy over the extended logits; the appended entry acts as an
// always-wrong class, so the label must index a real class.
double loss(const Tensor& extended_logits, int label);

// Batched tape forms. The argmax rows are read off the recorded logit
// values and baked in as constants: the surrogate is piecewise constant in
// the prediction, exact wherever the argmax is stable.
NodeId build_augmented_logits(Tape& t, NodeId logits, NodeId head_w,
                              NodeId k_backbone, double epsilon);
NodeId build_augmented_logits_naive(Tape& t, NodeId logits, NodeId k_total,
                                    double epsilon);
// Mean cross-entropy over the batch; labels must index real classes.
NodeId build_mean_ce(Tape& t, NodeId extended, const
                     std::vector<std::size_t>& labels);

// Linear ramp 0 -> epsilon_train over the first ramp_fraction of the run,
// constant afterwards; non-decreasing in epoch. Throws ConfigError when
// epoch >= epochs.
double eps_schedule(std::size_t epoch, const TrainConfig& cfg);

// SGD-with-momentum loop over mixed real/generated batches. Per step: layer
// state refresh (one power-iteration step / re-orthogonalization), forward,
// augmented-logit loss, backward, update. Per epoch: converged bound
// refresh, accuracy/VRA evaluation on eval_set, one log record. Throws
// DivergedLoss when the loss goes non-finite, with the epoch recorded.
// Setting LIPCERT_REPRO in the environment zeroes the seconds column so
// fixed-seed reruns produce byte-identical logs.
TrainLog train(layers::Network& net, const data::Dataset& train_set,
               const data::Dataset& eval_set, const data::Dataset& generated,
               const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Ablation driver: same data, seed, schedule and layout; only the hidden
// dense mechanism changes.

// [cayley lift to width] -> depth x hidden(width). For plain-dense
// mechanisms the hidden unit is the layer followed by MinMax; sll and
// sandwich blocks carry their own activation and stand alone. Mechanisms:
// gloro-regularized, cayley, matexp, cholesky-residual, lot, aol, sll,
// sandwich.
void append_dense_stack(layers::Network& net, const std::string& mechanism,
                        std::size_t in_dim, std::size_t width,
                        std::size_t depth);

// input -> dense stack -> head, with the layout above.
layers::Network make_dense_backbone(const std::string& mechanism,
                                    std::size_t input_dim, std::size_t width,
                                    std::size_t depth, std::size_t classes);

struct AblationRow {
  std::string mechanism;
  double clean_acc = 0.0;
  std::vector<double> vra;
  double loss = 0.0;
  double lip_product = 0.0;
  double seconds_per_epoch = 0.0;
};

struct AblationTable {
  std::vector<double> eval_epsilons;
  std::vector<AblationRow> rows;
  std::string csv() const;
};

struct AblationConfig {
  TrainConfig base;
  std::size_t input_dim = 2;
  std::size_t width = 16;
  std::size_t depth = 2;
  std::size_t classes = 2;
};

// One full training run per mechanism, final-epoch metrics per row. Errors
// from train propagate. Throws ConfigError on an empty mechanism list.
AblationTable ablate_dense_mechanism(const AblationConfig& cfg,
                                     const std::vector<std::string>& mechanisms,
                                     const data::Dataset& train_set,
                                     const data::Dataset& eval_set,
                                     const data::Dataset& generated);

}  // namespace lipcert::train
