#pragma once

#include <functional>

#include "lipcert/autodiff/tape.hpp"

namespace lipcert::autodiff {

// Builds a scalar-valued (shape {1}) expression from parameter leaves.
using TapeBuilder =
    std::function<NodeId(Tape&, const std::vector<NodeId>& params)>;

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // coordinates where both gradients were < 1e-10
};

// Central-difference comparison of the tape gradient, coordinate by
// coordinate: error = |analytic - numeric| / max(|analytic|, |numeric|, 1e-8),
// skipping coordinates where both magnitudes are below 1e-10.
FiniteDiffReport finite_diff_check(const TapeBuilder& build,
                                   const std::vector<Tensor>& params, double h);

}  // namespace lipcert::autodiff
