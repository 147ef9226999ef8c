#pragma once

#include <cstddef>
#include <string_view>

namespace lipcert::kernels {

// Data-parallel inner loops behind all dense arithmetic. Each entry has a
// scalar reference implementation and, where the CPU supports it, an AVX2+FMA
// variant. The two are equivalence-tested; the active table is chosen once at
// runtime (override with LIPCERT_SIMD=scalar|avx2 or force_backend()).
struct Ops {
  const char* name;

  double (*dot)(const double* a, const double* b, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // x *= alpha
  void (*scal)(double alpha, double* x, std::size_t n);
  void (*vadd)(const double* a, const double* b, double* out, std::size_t n);
  void (*vsub)(const double* a, const double* b, double* out, std::size_t n);
  void (*vmul)(const double* a, const double* b, double* out, std::size_t n);
  double (*sum)(const double* a, std::size_t n);
  double (*sumsq)(const double* a, std::size_t n);
  // C += A * B, row-major with leading dimensions.
  void (*gemm_acc)(std::size_t m, std::size_t n, std::size_t k,
                   const double* a, std::size_t lda, const double* b,
                   std::size_t ldb, double* c, std::size_t ldc);
};

const Ops& scalar_ops();

// Null when the binary was built without AVX2 support or the CPU lacks it.
const Ops* avx2_ops();

// The active table. First call resolves: LIPCERT_SIMD env override if set,
// otherwise the widest supported variant.
const Ops& active();

// Test hook: force a backend by name ("scalar", "avx2", "auto").
// Returns false if the requested backend is unavailable.
bool force_backend(std::string_view name);

}  // namespace lipcert::kernels
