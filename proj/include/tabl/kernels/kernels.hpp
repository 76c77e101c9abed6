#pragma once

// Data-parallel inner loops behind the tensor library.
//
// Every kernel exists as a scalar reference implementation and, on x86-64, an
// AVX2+FMA variant. The active table is chosen once at first use from the CPU
// feature bits; setting TABL_SIMD=scalar in the environment forces the
// reference path. All matrices are row-major with explicit leading dimensions.

#include <cstddef>
#include <string_view>

namespace tabl::kernels {

struct AdamWStep {
  double lr;
  double beta1;
  double beta2;
  double eps;
  double weight_decay;
  double bias_correction1;  // 1 - beta1^t
  double bias_correction2;  // 1 - beta2^t
};

struct KernelTable {
  std::string_view name;

  // C[M,N] (+)= A[M,K] * B[K,N]
  void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                  const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);
  // C[M,N] (+)= A[M,K] * B[N,K]^T
  void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                  const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);

  double (*dot)(const double* x, const double* y, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  void (*add)(const double* x, const double* y, double* out, std::size_t n);
  void (*mul)(const double* x, const double* y, double* out, std::size_t n);
  void (*scale)(double alpha, const double* x, double* out, std::size_t n);
  void (*adamw)(const AdamWStep& step, double* param, const double* grad, double* m, double* v,
                std::size_t n);
};

const KernelTable& scalar_table();
#if defined(TABL_HAVE_AVX2)
const KernelTable& avx2_table();
#endif

// The table used by the tensor library; resolved once, then fixed.
const KernelTable& active();

// True when the CPU reports AVX2 and FMA.
bool cpu_has_avx2();

}  // namespace tabl::kernels
