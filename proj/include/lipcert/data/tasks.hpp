#pragma once

#include <cstdint>

#include "lipcert/data/data.hpp"

namespace lipcert::data {

// Two crescent-shaped point sets in [0,1]^2, labels alternating 0/1.
// Geometry: radius-0.16 (+-0.02 jitter) semicircular arcs around (0.24,0.24)
// facing up and (0.76,0.76) facing down, so the closest approach between the
// classes is ||(0.52,0.52)|| - 2*0.18 = 0.375 -- every draw keeps an
// inter-class l2 margin above 0.3. Deterministic per seed.
Dataset make_two_moons(std::size_t count, std::uint64_t seed);

// 8x8 single-channel images ({1,8,8}, values in [0,1]): one Gaussian bump per
// class at a distinct grid position plus clipped N(0, 0.05) pixel noise.
// Supports 2..4 classes; labels cycle round-robin. Deterministic per seed.
Dataset make_synth_images(std::size_t count, std::size_t classes,
                          std::uint64_t seed);

}  // namespace lipcert::data
