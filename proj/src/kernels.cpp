#include "increcap/kernels.hpp"

#include <cstring>

namespace icap::kernels {

namespace scalar {
void gemm_acc(const double*, const double*, double*, std::size_t, std::size_t, std::size_t);
void gemm_at_acc(const double*, const double*, double*, std::size_t, std::size_t, std::size_t);
void gemm_bt_acc(const double*, const double*, double*, std::size_t, std::size_t, std::size_t);
double dot(const double*, const double*, std::size_t);
void axpy(double, const double*, double*, std::size_t);
void relu(const double*, double*, std::size_t);
void relu_backward(const double*, const double*, double*, std::size_t);
void add(const double*, const double*, double*, std::size_t);
void mul(const double*, const double*, double*, std::size_t);
void scale(double, const double*, double*, std::size_t);
}  // namespace scalar

namespace avx2 {
bool available();
void gemm_acc(const double*, const double*, double*, std::size_t, std::size_t, std::size_t);
void gemm_at_acc(const double*, const double*, double*, std::size_t, std::size_t, std::size_t);
void gemm_bt_acc(const double*, const double*, double*, std::size_t, std::size_t, std::size_t);
double dot(const double*, const double*, std::size_t);
void axpy(double, const double*, double*, std::size_t);
void relu(const double*, double*, std::size_t);
void relu_backward(const double*, const double*, double*, std::size_t);
void add(const double*, const double*, double*, std::size_t);
void mul(const double*, const double*, double*, std::size_t);
void scale(double, const double*, double*, std::size_t);
}  // namespace avx2

namespace {

struct Dispatch {
  const char* name;
  decltype(&scalar::gemm_acc) gemm_acc;
  decltype(&scalar::gemm_at_acc) gemm_at_acc;
  decltype(&scalar::gemm_bt_acc) gemm_bt_acc;
  decltype(&scalar::dot) dot;
  decltype(&scalar::axpy) axpy;
  decltype(&scalar::relu) relu;
  decltype(&scalar::relu_backward) relu_backward;
  decltype(&scalar::add) add;
  decltype(&scalar::mul) mul;
  decltype(&scalar::scale) scale;
};

constexpr Dispatch kScalar = {
    "scalar",        scalar::gemm_acc, scalar::gemm_at_acc, scalar::gemm_bt_acc,
    scalar::dot,     scalar::axpy,     scalar::relu,        scalar::relu_backward,
    scalar::add,     scalar::mul,      scalar::scale};

constexpr Dispatch kAvx2 = {
    "avx2",        avx2::gemm_acc, avx2::gemm_at_acc, avx2::gemm_bt_acc,
    avx2::dot,     avx2::axpy,     avx2::relu,        avx2::relu_backward,
    avx2::add,     avx2::mul,      avx2::scale};

const Dispatch* select_default() {
  return avx2::available() ? &kAvx2 : &kScalar;
}

const Dispatch* g_active = select_default();

}  // namespace

const char* backend_name() { return g_active->name; }

bool force_backend(const char* name) {
  if (std::strcmp(name, "scalar") == 0) {
    g_active = &kScalar;
    return true;
  }
  if (std::strcmp(name, "avx2") == 0 && avx2::available()) {
    g_active = &kAvx2;
    return true;
  }
  return false;
}

void gemm_acc(const double* a, const double* b, double* c, std::size_t m,
              std::size_t k, std::size_t n) {
  g_active->gemm_acc(a, b, c, m, k, n);
}
void gemm_at_acc(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n) {
  g_active->gemm_at_acc(a, b, c, m, k, n);
}
void gemm_bt_acc(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n) {
  g_active->gemm_bt_acc(a, b, c, m, k, n);
}
double dot(const double* a, const double* b, std::size_t n) {
  return g_active->dot(a, b, n);
}
void axpy(double alpha, const double* x, double* y, std::size_t n) {
  g_active->axpy(alpha, x, y, n);
}
void relu(const double* x, double* y, std::size_t n) { g_active->relu(x, y, n); }
void relu_backward(const double* x, const double* dy, double* dx, std::size_t n) {
  g_active->relu_backward(x, dy, dx, n);
}
void add(const double* a, const double* b, double* y, std::size_t n) {
  g_active->add(a, b, y, n);
}
void mul(const double* a, const double* b, double* y, std::size_t n) {
  g_active->mul(a, b, y, n);
}
void scale(double alpha, const double* x, double* y, std::size_t n) {
  g_active->scale(alpha, x, y, n);
}

}  // namespace icap::kernels
