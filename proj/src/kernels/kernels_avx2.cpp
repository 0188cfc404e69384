#include "ctsl/kernels.hpp"

#if defined(CTSL_HAVE_AVX2_TU)

#include <immintrin.h>

#include <algorithm>
#include <cstdlib>
#include <vector>

namespace ctsl::kernels {
namespace {

inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

double dot_avx2(const double* a, const double* b, std::size_t n) {
  __m256d s0 = _mm256_setzero_pd();
  __m256d s1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    s0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), s0);
    s1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), s1);
  }
  for (; i + 4 <= n; i += 4) {
    s0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), s0);
  }
  double s = hsum(_mm256_add_pd(s0, s1));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void sq_dist_avx2(const double* queries, std::size_t nq, const double* entries, std::size_t ne,
                  std::size_t dim, double* out) {
  for (std::size_t i = 0; i < nq; ++i) {
    const double* q = queries + i * dim;
    for (std::size_t j = 0; j < ne; ++j) {
      const double* e = entries + j * dim;
      __m256d acc = _mm256_setzero_pd();
      std::size_t d = 0;
      for (; d + 4 <= dim; d += 4) {
        const __m256d diff = _mm256_sub_pd(_mm256_loadu_pd(q + d), _mm256_loadu_pd(e + d));
        acc = _mm256_fmadd_pd(diff, diff, acc);
      }
      double s = hsum(acc);
      for (; d < dim; ++d) {
        const double diff = q[d] - e[d];
        s += diff * diff;
      }
      out[i * ne + j] = s;
    }
  }
}

// Packed GEMM: 6x8 register tile, B packed into k x 8 panels, A into k x 6 panels.
constexpr std::size_t kMR = 6;
constexpr std::size_t kNR = 8;
constexpr std::size_t kKC = 256;
constexpr std::size_t kMC = 96;
constexpr std::size_t kNC = 1024;

void pack_a(bool trans_a, const double* a, std::size_t lda, std::size_t i0, std::size_t mc,
            std::size_t p0, std::size_t kc, double* dst) {
  for (std::size_t ir = 0; ir < mc; ir += kMR) {
    const std::size_t mr = std::min(kMR, mc - ir);
    for (std::size_t p = 0; p < kc; ++p) {
      for (std::size_t r = 0; r < kMR; ++r) {
        double v = 0.0;
        if (r < mr) {
          const std::size_t i = i0 + ir + r;
          const std::size_t pp = p0 + p;
          v = trans_a ? a[pp * lda + i] : a[i * lda + pp];
        }
        *dst++ = v;
      }
    }
  }
}

void pack_b(bool trans_b, const double* b, std::size_t ldb, std::size_t p0, std::size_t kc,
            std::size_t j0, std::size_t nc, double* dst) {
  for (std::size_t jr = 0; jr < nc; jr += kNR) {
    const std::size_t nr = std::min(kNR, nc - jr);
    for (std::size_t p = 0; p < kc; ++p) {
      const std::size_t pp = p0 + p;
      if (!trans_b && nr == kNR) {
        const double* src = b + pp * ldb + j0 + jr;
        for (std::size_t c = 0; c < kNR; ++c) dst[c] = src[c];
        dst += kNR;
        continue;
      }
      for (std::size_t c = 0; c < kNR; ++c) {
        double v = 0.0;
        if (c < nr) {
          const std::size_t j = j0 + jr + c;
          v = trans_b ? b[j * ldb + pp] : b[pp * ldb + j];
        }
        *dst++ = v;
      }
    }
  }
}

inline void micro_kernel(std::size_t kc, const double* ap, const double* bp, double* c,
                         std::size_t ldc, std::size_t mr, std::size_t nr) {
  __m256d c00 = _mm256_setzero_pd(), c01 = _mm256_setzero_pd();
  __m256d c10 = _mm256_setzero_pd(), c11 = _mm256_setzero_pd();
  __m256d c20 = _mm256_setzero_pd(), c21 = _mm256_setzero_pd();
  __m256d c30 = _mm256_setzero_pd(), c31 = _mm256_setzero_pd();
  __m256d c40 = _mm256_setzero_pd(), c41 = _mm256_setzero_pd();
  __m256d c50 = _mm256_setzero_pd(), c51 = _mm256_setzero_pd();
  for (std::size_t p = 0; p < kc; ++p) {
    const __m256d b0 = _mm256_load_pd(bp);
    const __m256d b1 = _mm256_load_pd(bp + 4);
    __m256d a = _mm256_broadcast_sd(ap + 0);
    c00 = _mm256_fmadd_pd(a, b0, c00);
    c01 = _mm256_fmadd_pd(a, b1, c01);
    a = _mm256_broadcast_sd(ap + 1);
    c10 = _mm256_fmadd_pd(a, b0, c10);
    c11 = _mm256_fmadd_pd(a, b1, c11);
    a = _mm256_broadcast_sd(ap + 2);
    c20 = _mm256_fmadd_pd(a, b0, c20);
    c21 = _mm256_fmadd_pd(a, b1, c21);
    a = _mm256_broadcast_sd(ap + 3);
    c30 = _mm256_fmadd_pd(a, b0, c30);
    c31 = _mm256_fmadd_pd(a, b1, c31);
    a = _mm256_broadcast_sd(ap + 4);
    c40 = _mm256_fmadd_pd(a, b0, c40);
    c41 = _mm256_fmadd_pd(a, b1, c41);
    a = _mm256_broadcast_sd(ap + 5);
    c50 = _mm256_fmadd_pd(a, b0, c50);
    c51 = _mm256_fmadd_pd(a, b1, c51);
    ap += kMR;
    bp += kNR;
  }
  alignas(32) double tile[kMR][kNR];
  _mm256_store_pd(tile[0], c00);
  _mm256_store_pd(tile[0] + 4, c01);
  _mm256_store_pd(tile[1], c10);
  _mm256_store_pd(tile[1] + 4, c11);
  _mm256_store_pd(tile[2], c20);
  _mm256_store_pd(tile[2] + 4, c21);
  _mm256_store_pd(tile[3], c30);
  _mm256_store_pd(tile[3] + 4, c31);
  _mm256_store_pd(tile[4], c40);
  _mm256_store_pd(tile[4] + 4, c41);
  _mm256_store_pd(tile[5], c50);
  _mm256_store_pd(tile[5] + 4, c51);
  if (nr == kNR) {
    for (std::size_t r = 0; r < mr; ++r) {
      double* crow = c + r * ldc;
      _mm256_storeu_pd(crow, _mm256_add_pd(_mm256_loadu_pd(crow), _mm256_load_pd(tile[r])));
      _mm256_storeu_pd(crow + 4,
                       _mm256_add_pd(_mm256_loadu_pd(crow + 4), _mm256_load_pd(tile[r] + 4)));
    }
  } else {
    for (std::size_t r = 0; r < mr; ++r) {
      for (std::size_t q = 0; q < nr; ++q) c[r * ldc + q] += tile[r][q];
    }
  }
}

struct AlignedBuffer {
  double* ptr = nullptr;
  std::size_t cap = 0;
  ~AlignedBuffer() { std::free(ptr); }
  double* get(std::size_t n) {
    if (n > cap) {
      std::free(ptr);
      cap = n;
      ptr = static_cast<double*>(std::aligned_alloc(64, ((n * sizeof(double) + 63) / 64) * 64));
    }
    return ptr;
  }
};

void gemm_avx2(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
               const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta,
               double* c, std::size_t ldc) {
  if (m == 0 || n == 0) return;
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * ldc;
    if (beta == 0.0) {
      std::fill(crow, crow + n, 0.0);
    } else if (beta != 1.0) {
      for (std::size_t j = 0; j < n; ++j) crow[j] *= beta;
    }
  }
  if (k == 0) return;

  thread_local AlignedBuffer a_buf;
  thread_local AlignedBuffer b_buf;

  for (std::size_t jc = 0; jc < n; jc += kNC) {
    const std::size_t nc = std::min(kNC, n - jc);
    const std::size_t nc_pad = (nc + kNR - 1) / kNR * kNR;
    for (std::size_t pc = 0; pc < k; pc += kKC) {
      const std::size_t kc = std::min(kKC, k - pc);
      double* bp = b_buf.get(nc_pad * kc);
      pack_b(trans_b, b, ldb, pc, kc, jc, nc, bp);
      for (std::size_t ic = 0; ic < m; ic += kMC) {
        const std::size_t mc = std::min(kMC, m - ic);
        const std::size_t mc_pad = (mc + kMR - 1) / kMR * kMR;
        double* ap = a_buf.get(mc_pad * kc);
        pack_a(trans_a, a, lda, ic, mc, pc, kc, ap);
        for (std::size_t jr = 0; jr < nc; jr += kNR) {
          const std::size_t nr = std::min(kNR, nc - jr);
          for (std::size_t ir = 0; ir < mc; ir += kMR) {
            const std::size_t mr = std::min(kMR, mc - ir);
            micro_kernel(kc, ap + ir * kc, bp + jr * kc, c + (ic + ir) * ldc + jc + jr, ldc, mr,
                         nr);
          }
        }
      }
    }
  }
}

}  // namespace

const KernelTable* avx2_table() {
  static const KernelTable table{Isa::avx2, dot_avx2, axpy_avx2, gemm_avx2, sq_dist_avx2};
  return &table;
}

}  // namespace ctsl::kernels

#else

namespace ctsl::kernels {
const KernelTable* avx2_table() { return nullptr; }
}  // namespace ctsl::kernels

#endif
