#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lipcert/certify/certify.hpp"
#include "lipcert/layers/layers.hpp"
#include "lipcert/train/train.hpp"

namespace lipcert::cli {

// [model] section. Desk-scale defaults; `preset = paper` switches to the
// 12-block / 512-channel / 8x2048 configuration.
struct ModelConfig {
  std::string arch = "dense";  // dense | liresnet
  std::string mechanism = "cholesky-residual";
  std::size_t blocks = 4;       // residual conv blocks (liresnet)
  std::size_t channels = 64;    // conv channels (liresnet)
  std::size_t dense_depth = 8;
  std::size_t dense_width = 256;
  std::size_t classes = 2;
  layers::Shape input_shape = {2};  // "2" or "1x8x8" in the file
};

// [data] section: which built-in task feeds training and how the generated
// pool is produced.
struct DataConfig {
  std::string task = "two-moons";  // two-moons | synth-images
  std::size_t train_count = 256;
  std::size_t eval_count = 128;
  std::uint64_t seed = 0;
  std::size_t gen_count = 0;  // generated pool size before filtering
  double filter_fraction = 0.2;
  std::size_t scorer_epochs = 5;
};

struct RunConfig {
  ModelConfig model;
  train::TrainConfig train;
  DataConfig data;
  certify::Method certify_method = certify::Method::kTight;
  std::vector<double> certify_epsilons = {0.0, 36.0 / 255.0, 72.0 / 255.0,
                                          108.0 / 255.0};

  void validate() const;  // cross-field checks; ConfigError
};

// "36/255" stays an exact integer ratio until the one final division;
// plain decimals are accepted too. Throws ConfigError on anything else.
double parse_epsilon(const std::string& token);
std::vector<double> parse_epsilon_list(const std::string& csv);

// key = value sections ([model], [train], [data], [certify]); '#' and ';'
// start comments; unknown sections and keys are rejected, later keys win.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);  // IoError if unreadable

// Instantiates the architecture the [model] section describes (weights
// uninitialized).
layers::Network build_network(const ModelConfig& m);

}  // namespace lipcert::cli
