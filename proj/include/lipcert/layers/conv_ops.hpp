#pragma once

#include <cstddef>
#include <span>

#include "lipcert/tensor.hpp"

namespace lipcert::layers {

// Single-sample stride-1 same-padded convolution, y (O,H,W) from x (C,H,W)
// with kernel w (O,C,k,k), k odd; and its adjoint (transposed convolution).
// Matches the tape conv primitive; used for power iteration on conv
// operators and for materializing them densely in oracles.
void conv_apply(const Tensor& w, std::span<const double> x,
                std::span<double> y, std::size_t c, std::size_t h,
                std::size_t wd);
void conv_apply_adjoint(const Tensor& w, std::span<const double> gy,
                        std::span<double> gx, std::size_t c, std::size_t h,
                        std::size_t wd);

}  // namespace lipcert::layers
