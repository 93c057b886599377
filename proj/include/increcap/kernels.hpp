#pragma once
// Low-level array kernels used by the tensor core. Every kernel has a scalar
// reference implementation and, on x86-64 with AVX2+FMA, a vectorized variant.
// The active implementation is chosen once at startup; see kernels::backend_name().
// Scalar and SIMD variants are equivalence-tested against each other.

#include <cstddef>

namespace icap::kernels {

// C[m x n] += A[m x k] * B[k x n], row-major, no aliasing.
void gemm_acc(const double* a, const double* b, double* c,
              std::size_t m, std::size_t k, std::size_t n);

// C[m x n] += A^T[m x k] * B[k x n] where A is stored k x m row-major.
void gemm_at_acc(const double* a, const double* b, double* c,
                 std::size_t m, std::size_t k, std::size_t n);

// C[m x n] += A[m x k] * B^T[k x n] where B is stored n x k row-major.
void gemm_bt_acc(const double* a, const double* b, double* c,
                 std::size_t m, std::size_t k, std::size_t n);

double dot(const double* a, const double* b, std::size_t n);

// y += alpha * x
void axpy(double alpha, const double* x, double* y, std::size_t n);

// y = max(x, 0)
void relu(const double* x, double* y, std::size_t n);

// dx += dy where x > 0
void relu_backward(const double* x, const double* dy, double* dx, std::size_t n);

void add(const double* a, const double* b, double* y, std::size_t n);
void mul(const double* a, const double* b, double* y, std::size_t n);
void scale(double alpha, const double* x, double* y, std::size_t n);

// Name of the selected backend: "scalar" or "avx2".
const char* backend_name();

// Force a backend for testing ("scalar" or "avx2"); returns false if the
// requested backend is unavailable on this machine.
bool force_backend(const char* name);

}  // namespace icap::kernels
