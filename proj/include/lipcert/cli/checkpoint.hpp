#pragma once

#include <cstdint>
#include <string>

#include "lipcert/layers/layers.hpp"

namespace lipcert::cli {

// On-disk layout: <dir>/manifest.txt + <dir>/weights.bin. The manifest is
// line-oriented: a lipcert-ckpt-v1 tag, key = value pairs (seed, input,
// param_count, one `layer = ...` per layer in order) and the run config
// echoed verbatim between config_begin/config_end. weights.bin is the raw
// little-endian f64 stream in all_params() order.

struct Checkpoint {
  layers::Network net;
  std::string config_echo;
  std::uint64_t seed = 0;
};

void save_checkpoint(const std::string& dir, layers::Network& net,
                     const std::string& config_echo, std::uint64_t seed);

// Rebuilds the architecture from the manifest, checks the weight blob size
// against param_count before touching any tensor, then restores weights and
// re-derives cached state. Throws IoError on missing/corrupt files.
Checkpoint load_checkpoint(const std::string& dir);

}  // namespace lipcert::cli
