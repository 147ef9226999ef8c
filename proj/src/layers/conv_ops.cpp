#include "lipcert/layers/conv_ops.hpp"

#include <algorithm>

#include "lipcert/errors.hpp"

namespace lipcert::layers {

void conv_apply(const Tensor& w, std::span<const double> x,
                std::span<double> y, std::size_t c, std::size_t h,
                std::size_t wd) {
  const std::size_t o = w.dim(0), k = w.dim(2);
  if (w.rank() != 4 || w.dim(1) != c || w.dim(3) != k || k % 2 == 0)
    throw ShapeMismatch("conv_apply: bad kernel");
  if (x.size() != c * h * wd || y.size() != o * h * wd)
    throw ShapeMismatch("conv_apply: bad buffer size");
  const std::size_t pad = (k - 1) / 2;
  std::fill(y.begin(), y.end(), 0.0);
  for (std::size_t oc = 0; oc < o; ++oc)
    for (std::size_t ic = 0; ic < c; ++ic)
      for (std::size_t dy = 0; dy < k; ++dy)
        for (std::size_t dx = 0; dx < k; ++dx) {
          const double wv = w[oc * c * k * k + (ic * k + dy) * k + dx];
          if (wv == 0.0) continue;
          for (std::size_t yy = 0; yy < h; ++yy) {
            const std::size_t sy = yy + dy;
            if (sy < pad || sy - pad >= h) continue;
            const double* xrow = x.data() + (ic * h + (sy - pad)) * wd;
            double* yrow = y.data() + (oc * h + yy) * wd;
            for (std::size_t xx = 0; xx < wd; ++xx) {
              const std::size_t sx = xx + dx;
              if (sx < pad || sx - pad >= wd) continue;
              yrow[xx] += wv * xrow[sx - pad];
            }
          }
        }
}

void conv_apply_adjoint(const Tensor& w, std::span<const double> gy,
                        std::span<double> gx, std::size_t c, std::size_t h,
                        std::size_t wd) {
  const std::size_t o = w.dim(0), k = w.dim(2);
  if (w.rank() != 4 || w.dim(1) != c || w.dim(3) != k || k % 2 == 0)
    throw ShapeMismatch("conv_apply_adjoint: bad kernel");
  if (gy.size() != o * h * wd || gx.size() != c * h * wd)
    throw ShapeMismatch("conv_apply_adjoint: bad buffer size");
  const std::size_t pad = (k - 1) / 2;
  std::fill(gx.begin(), gx.end(), 0.0);
  for (std::size_t oc = 0; oc < o; ++oc)
    for (std::size_t ic = 0; ic < c; ++ic)
      for (std::size_t dy = 0; dy < k; ++dy)
        for (std::size_t dx = 0; dx < k; ++dx) {
          const double wv = w[oc * c * k * k + (ic * k + dy) * k + dx];
          if (wv == 0.0) continue;
          for (std::size_t yy = 0; yy < h; ++yy) {
            const std::size_t sy = yy + dy;
            if (sy < pad || sy - pad >= h) continue;
            double* xrow = gx.data() + (ic * h + (sy - pad)) * wd;
            const double* yrow = gy.data() + (oc * h + yy) * wd;
            for (std::size_t xx = 0; xx < wd; ++xx) {
              const std::size_t sx = xx + dx;
              if (sx < pad || sx - pad >= wd) continue;
              xrow[sx - pad] += wv * yrow[xx];
            }
          }
        }
}

}  // namespace lipcert::layers
