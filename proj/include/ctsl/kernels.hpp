#pragma once

// Data-parallel inner loops shared by every numeric module.
//
// Each kernel has a scalar reference implementation and an AVX2/FMA variant.
// The variant is selected once at runtime from CPUID; setting the environment
// variable CTSL_ISA=scalar forces the reference path. All matrices are
// row-major doubles.

#include <cstddef>
#include <string_view>

namespace ctsl::kernels {

enum class Isa { scalar, avx2 };

struct KernelTable {
  Isa isa;
  double (*dot)(const double* a, const double* b, std::size_t n);
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // C = beta * C + op(A) * op(B); op(A) is m x k, op(B) is k x n.
  void (*gemm)(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
               const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta,
               double* c, std::size_t ldc);
  // out[i * ne + j] = || q_i - e_j ||^2
  void (*sq_dist)(const double* queries, std::size_t nq, const double* entries, std::size_t ne,
                  std::size_t dim, double* out);
};

const KernelTable& scalar_table();
// Returns nullptr when the AVX2 variant was not compiled in.
const KernelTable* avx2_table();

bool cpu_supports_avx2();

// The table used by the library. Resolved on first call.
const KernelTable& active();
// Overrides the active table (tests and benchmarking). Throws if the ISA is
// not available on this machine.
void set_active(Isa isa);

std::string_view isa_name(Isa isa);

inline double dot(const double* a, const double* b, std::size_t n) { return active().dot(a, b, n); }
inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  active().axpy(alpha, x, y, n);
}
inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                 const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta,
                 double* c, std::size_t ldc) {
  active().gemm(trans_a, trans_b, m, n, k, a, lda, b, ldb, beta, c, ldc);
}
inline void sq_dist(const double* queries, std::size_t nq, const double* entries, std::size_t ne,
                    std::size_t dim, double* out) {
  active().sq_dist(queries, nq, entries, ne, dim, out);
}

}  // namespace ctsl::kernels
