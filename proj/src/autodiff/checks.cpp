#include "lipcert/autodiff/checks.hpp"

#include <cmath>

#include "lipcert/errors.hpp"

namespace lipcert::autodiff {

FiniteDiffReport finite_diff_check(const TapeBuilder& build,
                                   const std::vector<Tensor>& params,
                                   double h) {
  Tape tape;
  std::vector<NodeId> ids;
  ids.reserve(params.size());
  for (const Tensor& p : params) ids.push_back(tape.leaf(p));
  NodeId root = build(tape, ids);
  if (tape.value(root).size() != 1)
    throw ShapeMismatch("finite_diff_check: builder must return a scalar node");

  Tensor seed({1});
  seed[0] = 1.0;
  tape.backward(root, seed);
  std::vector<Tensor> analytic;
  analytic.reserve(ids.size());
  for (NodeId id : ids) analytic.push_back(tape.grad(id));

  FiniteDiffReport report;
  for (std::size_t p = 0; p < ids.size(); ++p) {
    Tensor work = params[p];
    for (std::size_t c = 0; c < work.size(); ++c) {
      const double base = work[c];
      work[c] = base + h;
      tape.set_value(ids[p], work);
      tape.forward();
      const double f_plus = tape.value(root)[0];
      work[c] = base - h;
      tape.set_value(ids[p], work);
      tape.forward();
      const double f_minus = tape.value(root)[0];
      work[c] = base;
      tape.set_value(ids[p], work);

      const double numeric = (f_plus - f_minus) / (2.0 * h);
      const double a = analytic[p][c];
      if (std::abs(a) < 1e-10 && std::abs(numeric) < 1e-10) {
        ++report.skipped;
        continue;
      }
      const double rel = std::abs(a - numeric) /
                         std::max({std::abs(a), std::abs(numeric), 1e-8});
      report.max_rel_error = std::max(report.max_rel_error, rel);
      ++report.checked;
    }
  }
  tape.forward();  // leave the tape evaluated at the unperturbed point
  return report;
}

}  // namespace lipcert::autodiff
