#include "increcap/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)
#define ICAP_HAVE_AVX2_TU 1
#include <immintrin.h>
#else
#define ICAP_HAVE_AVX2_TU 0
#endif

namespace icap::kernels::avx2 {

#if ICAP_HAVE_AVX2_TU

#define ICAP_AVX2 __attribute__((target("avx2,fma")))

ICAP_AVX2 static inline void axpy_row(double alpha, const double* x, double* y,
                                      std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) {
    __m256d vy = _mm256_loadu_pd(y + j);
    __m256d vx = _mm256_loadu_pd(x + j);
    vy = _mm256_fmadd_pd(va, vx, vy);
    _mm256_storeu_pd(y + j, vy);
  }
  for (; j < n; ++j) y[j] += alpha * x[j];
}

ICAP_AVX2 void gemm_acc(const double* a, const double* b, double* c,
                        std::size_t m, std::size_t k, std::size_t n) {
  // Rank-1 update form: stream rows of B into row i of C with 4-way unroll
  // over p to keep FMA ports busy.
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    std::size_t p = 0;
    for (; p + 4 <= k; p += 4) {
      const __m256d a0 = _mm256_set1_pd(arow[p + 0]);
      const __m256d a1 = _mm256_set1_pd(arow[p + 1]);
      const __m256d a2 = _mm256_set1_pd(arow[p + 2]);
      const __m256d a3 = _mm256_set1_pd(arow[p + 3]);
      const double* b0 = b + (p + 0) * n;
      const double* b1 = b + (p + 1) * n;
      const double* b2 = b + (p + 2) * n;
      const double* b3 = b + (p + 3) * n;
      std::size_t j = 0;
      for (; j + 4 <= n; j += 4) {
        __m256d vc = _mm256_loadu_pd(crow + j);
        vc = _mm256_fmadd_pd(a0, _mm256_loadu_pd(b0 + j), vc);
        vc = _mm256_fmadd_pd(a1, _mm256_loadu_pd(b1 + j), vc);
        vc = _mm256_fmadd_pd(a2, _mm256_loadu_pd(b2 + j), vc);
        vc = _mm256_fmadd_pd(a3, _mm256_loadu_pd(b3 + j), vc);
        _mm256_storeu_pd(crow + j, vc);
      }
      for (; j < n; ++j) {
        crow[j] += arow[p] * b0[j] + arow[p + 1] * b1[j] + arow[p + 2] * b2[j] +
                   arow[p + 3] * b3[j];
      }
    }
    for (; p < k; ++p) axpy_row(arow[p], b + p * n, crow, n);
  }
}

ICAP_AVX2 void gemm_at_acc(const double* a, const double* b, double* c,
                           std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      if (arow[i] != 0.0) axpy_row(arow[i], brow, c + i * n, n);
    }
  }
}

ICAP_AVX2 static inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d sh = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

ICAP_AVX2 double dot(const double* a, const double* b, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    acc = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc);
  double s = hsum(acc);
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

ICAP_AVX2 void gemm_bt_acc(const double* a, const double* b, double* c,
                           std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j)
      c[i * n + j] += dot(arow, b + j * k, k);
  }
}

ICAP_AVX2 void axpy(double alpha, const double* x, double* y, std::size_t n) {
  axpy_row(alpha, x, y, n);
}

ICAP_AVX2 void relu(const double* x, double* y, std::size_t n) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_max_pd(_mm256_loadu_pd(x + i), zero));
  for (; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

ICAP_AVX2 void relu_backward(const double* x, const double* dy, double* dx,
                             std::size_t n) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d mask = _mm256_cmp_pd(_mm256_loadu_pd(x + i), zero, _CMP_GT_OQ);
    __m256d add = _mm256_and_pd(mask, _mm256_loadu_pd(dy + i));
    _mm256_storeu_pd(dx + i, _mm256_add_pd(_mm256_loadu_pd(dx + i), add));
  }
  for (; i < n; ++i)
    if (x[i] > 0.0) dx[i] += dy[i];
}

ICAP_AVX2 void add(const double* a, const double* b, double* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i,
                     _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) y[i] = a[i] + b[i];
}

ICAP_AVX2 void mul(const double* a, const double* b, double* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i,
                     _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) y[i] = a[i] * b[i];
}

ICAP_AVX2 void scale(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
  for (; i < n; ++i) y[i] = alpha * x[i];
}

bool available() { return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma"); }

#else  // !ICAP_HAVE_AVX2_TU

bool available() { return false; }
void gemm_acc(const double*, const double*, double*, std::size_t, std::size_t, std::size_t) {}
void gemm_at_acc(const double*, const double*, double*, std::size_t, std::size_t, std::size_t) {}
void gemm_bt_acc(const double*, const double*, double*, std::size_t, std::size_t, std::size_t) {}
double dot(const double*, const double*, std::size_t) { return 0.0; }
void axpy(double, const double*, double*, std::size_t) {}
void relu(const double*, double*, std::size_t) {}
void relu_backward(const double*, const double*, double*, std::size_t) {}
void add(const double*, const double*, double*, std::size_t) {}
void mul(const double*, const double*, double*, std::size_t) {}
void scale(double, const double*, double*, std::size_t) {}

#endif

}  // namespace icap::kernels::avx2
