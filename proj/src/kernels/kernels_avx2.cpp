// AVX2+FMA kernel variants. This translation unit is compiled with
// -mavx2 -mfma; callers must go through the dispatch table, which only
// selects these after a runtime cpuid check.

#include "lipcert/kernels/kernels.hpp"

#if defined(__AVX2__) && defined(__FMA__)

#include <immintrin.h>

namespace lipcert::kernels {
namespace {

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d shuf = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, shuf));
}

double dot_avx2(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  __m256d acc2 = _mm256_setzero_pd();
  __m256d acc3 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
    acc2 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 8), _mm256_loadu_pd(b + i + 8), acc2);
    acc3 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 12), _mm256_loadu_pd(b + i + 12), acc3);
  }
  for (; i + 4 <= n; i += 4)
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  double s = hsum(_mm256_add_pd(_mm256_add_pd(acc0, acc1), _mm256_add_pd(acc2, acc3)));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256d y0 = _mm256_loadu_pd(y + i);
    __m256d y1 = _mm256_loadu_pd(y + i + 4);
    y0 = _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), y0);
    y1 = _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i + 4), y1);
    _mm256_storeu_pd(y + i, y0);
    _mm256_storeu_pd(y + i + 4, y1);
  }
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i),
                                            _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void scal_avx2(double alpha, double* x, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(x + i, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
  for (; i < n; ++i) x[i] *= alpha;
}

void vadd_avx2(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i,
                     _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void vsub_avx2(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i,
                     _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

void vmul_avx2(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i,
                     _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

double sum_avx2(const double* a, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_add_pd(acc0, _mm256_loadu_pd(a + i));
    acc1 = _mm256_add_pd(acc1, _mm256_loadu_pd(a + i + 4));
  }
  for (; i + 4 <= n; i += 4) acc0 = _mm256_add_pd(acc0, _mm256_loadu_pd(a + i));
  double s = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) s += a[i];
  return s;
}

double sumsq_avx2(const double* a, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256d x0 = _mm256_loadu_pd(a + i);
    __m256d x1 = _mm256_loadu_pd(a + i + 4);
    acc0 = _mm256_fmadd_pd(x0, x0, acc0);
    acc1 = _mm256_fmadd_pd(x1, x1, acc1);
  }
  for (; i + 4 <= n; i += 4) {
    __m256d x0 = _mm256_loadu_pd(a + i);
    acc0 = _mm256_fmadd_pd(x0, x0, acc0);
  }
  double s = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) s += a[i] * a[i];
  return s;
}

// Cache blocking: a jb-wide C tile of 4 rows stays in L1 while a kb-deep
// B panel is swept from L2. Rank-1 updates broadcast A entries.
constexpr std::size_t kBlockK = 128;
constexpr std::size_t kBlockJ = 512;

void gemm_tile4(std::size_t j0, std::size_t j1, std::size_t l0, std::size_t l1,
                std::size_t i0, const double* a, std::size_t lda,
                const double* b, std::size_t ldb, double* c, std::size_t ldc) {
  double* c0 = c + i0 * ldc;
  double* c1 = c0 + ldc;
  double* c2 = c1 + ldc;
  double* c3 = c2 + ldc;
  for (std::size_t l = l0; l < l1; ++l) {
    const __m256d a0 = _mm256_set1_pd(a[(i0 + 0) * lda + l]);
    const __m256d a1 = _mm256_set1_pd(a[(i0 + 1) * lda + l]);
    const __m256d a2 = _mm256_set1_pd(a[(i0 + 2) * lda + l]);
    const __m256d a3 = _mm256_set1_pd(a[(i0 + 3) * lda + l]);
    const double* brow = b + l * ldb;
    std::size_t j = j0;
    for (; j + 4 <= j1; j += 4) {
      const __m256d bv = _mm256_loadu_pd(brow + j);
      _mm256_storeu_pd(c0 + j, _mm256_fmadd_pd(a0, bv, _mm256_loadu_pd(c0 + j)));
      _mm256_storeu_pd(c1 + j, _mm256_fmadd_pd(a1, bv, _mm256_loadu_pd(c1 + j)));
      _mm256_storeu_pd(c2 + j, _mm256_fmadd_pd(a2, bv, _mm256_loadu_pd(c2 + j)));
      _mm256_storeu_pd(c3 + j, _mm256_fmadd_pd(a3, bv, _mm256_loadu_pd(c3 + j)));
    }
    for (; j < j1; ++j) {
      const double bj = brow[j];
      c0[j] += a[(i0 + 0) * lda + l] * bj;
      c1[j] += a[(i0 + 1) * lda + l] * bj;
      c2[j] += a[(i0 + 2) * lda + l] * bj;
      c3[j] += a[(i0 + 3) * lda + l] * bj;
    }
  }
}

void gemm_tile1(std::size_t j0, std::size_t j1, std::size_t l0, std::size_t l1,
                std::size_t i, const double* a, std::size_t lda,
                const double* b, std::size_t ldb, double* c, std::size_t ldc) {
  double* crow = c + i * ldc;
  for (std::size_t l = l0; l < l1; ++l) {
    const double ail = a[i * lda + l];
    if (ail == 0.0) continue;
    const __m256d av = _mm256_set1_pd(ail);
    const double* brow = b + l * ldb;
    std::size_t j = j0;
    for (; j + 4 <= j1; j += 4)
      _mm256_storeu_pd(crow + j, _mm256_fmadd_pd(av, _mm256_loadu_pd(brow + j),
                                                 _mm256_loadu_pd(crow + j)));
    for (; j < j1; ++j) crow[j] += ail * brow[j];
  }
}

void gemm_acc_avx2(std::size_t m, std::size_t n, std::size_t k,
                   const double* a, std::size_t lda, const double* b,
                   std::size_t ldb, double* c, std::size_t ldc) {
  for (std::size_t jb = 0; jb < n; jb += kBlockJ) {
    const std::size_t j1 = jb + kBlockJ < n ? jb + kBlockJ : n;
    for (std::size_t lb = 0; lb < k; lb += kBlockK) {
      const std::size_t l1 = lb + kBlockK < k ? lb + kBlockK : k;
      std::size_t i = 0;
      for (; i + 4 <= m; i += 4)
        gemm_tile4(jb, j1, lb, l1, i, a, lda, b, ldb, c, ldc);
      for (; i < m; ++i) gemm_tile1(jb, j1, lb, l1, i, a, lda, b, ldb, c, ldc);
    }
  }
}

}  // namespace

const Ops* avx2_ops() {
  static const Ops table = {
      "avx2",    dot_avx2,  axpy_avx2, scal_avx2,  vadd_avx2,
      vsub_avx2, vmul_avx2, sum_avx2,  sumsq_avx2, gemm_acc_avx2,
  };
  return &table;
}

}  // namespace lipcert::kernels

#else

namespace lipcert::kernels {
const Ops* avx2_ops() { return nullptr; }
}  // namespace lipcert::kernels

#endif
