#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "lipcert/tensor.hpp"

namespace lipcert::data {

enum class Origin { kReal, kGenerated };

const char* origin_name(Origin o);
Origin origin_from_name(const std::string& name);

// One labeled input. Inputs live in [0,1]; score is the scoring classifier's
// probability of the pseudo-label and exists only for generated samples.
struct Sample {
  Tensor input;
  int label = 0;
  Origin origin = Origin::kReal;
  std::optional<double> score;
};

using Dataset = std::vector<Sample>;

// Real:generated ratio for one training batch, e.g. {1, 3, 1024} puts 256
// real and 768 generated samples in every batch.
struct MixSpec {
  std::size_t real_parts = 1;
  std::size_t generated_parts = 0;
  std::size_t batch_size = 128;

  void validate() const;  // ConfigError on a ratio the batch cannot honor
  std::size_t real_count() const;
  std::size_t generated_count() const;
};

// Drops exactly floor(fraction * N) lowest-scoring samples; equal scores drop
// the earlier index first. Survivors keep their input order. All samples must
// be scored. Throws EmptySet on an empty input, ConfigError on a bad fraction
// or an unscored sample.
Dataset filter_bottom_scores(const Dataset& samples, double fraction);

// Exact-count batch assembly: uniform draws with replacement from each pool.
// Throws EmptyPool when a required origin has no samples. Real block first,
// then generated; deterministic under a fixed rng state.
Dataset mix_batch(const Dataset& real_pool, const Dataset& gen_pool,
                  const MixSpec& spec, std::mt19937_64& rng);

// Stand-in generator: per-class Gaussian fitted to the real training set.
// Draws x = mean_c + L_c z with z ~ N(0, I), clipped to [0,1], pseudo-label c
// drawn uniformly over classes. Deterministic per seed.
class SynthGenerator {
 public:
  // Throws ConfigError for class_count < 2 or an out-of-range label,
  // EmptySet when the fit set is empty or a class has no samples.
  SynthGenerator(const Dataset& real, std::size_t class_count,
                 std::uint64_t seed);

  Sample next();
  Dataset draw(std::size_t count);

  std::size_t class_count() const { return mean_.size(); }
  const Tensor& class_mean(std::size_t c) const { return mean_.at(c); }

 private:
  std::vector<Tensor> mean_;   // flattened, one per class
  std::vector<Matrix> chol_;   // covariance factor; all-zero = point mass
  std::vector<std::size_t> shape_;
  std::mt19937_64 rng_;
};

// Maps an input to a probability vector over classes.
using Scorer = std::function<Tensor(const Tensor&)>;

// Sets score = P(pseudo-label) on every generated sample; real samples pass
// through untouched.
Dataset score_samples(const Scorer& scorer, Dataset samples);

// LCDS tensor blob: magic "LCDS", u32 count, u32 ndim, ndim x u32 dims, then
// count * prod(dims) little-endian doubles. All tensors share one shape.
void save_lcds(const std::string& path, const std::vector<Tensor>& tensors);
std::vector<Tensor> load_lcds(const std::string& path);

// Dataset directory: samples.bin (LCDS blob of the inputs, in order) plus
// index.csv with columns offset,label,origin,score (offset = sample index in
// the blob; score empty for real samples). Round-trips bit-exactly.
void save_dataset(const std::string& dir, const Dataset& set);
Dataset load_dataset(const std::string& dir);

}  // namespace lipcert::data
