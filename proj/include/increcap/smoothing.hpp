#pragma once
// Gaussian blur kernels, the sigma annealing curriculum, and the 1D
// conv + blur + LayerNorm + ReLU input layer used at the encoder front.

#include <vector>

#include "increcap/nn.hpp"
#include "increcap/tensor.hpp"

namespace icap::smoothing {

// Below this sigma the blur stage is bypassed entirely (identity); the
// curriculum is considered finished.
constexpr double kSigmaFloor = 0.05;

struct GaussianKernel {
  std::vector<double> taps;  // length S (1D) or S*S row-major (2D)
  double sigma = 1.0;
  int size = 3;
  int dims = 1;
};

// Truncated, renormalized Gaussian taps; 2D kernel is the outer product of
// the 1D taps with themselves.
GaussianKernel gaussian_kernel(double sigma, int size, int dims);

// Odd kernel size covering the useful support of the given sigma.
int default_kernel_size(double sigma);

struct SigmaSchedule {
  double sigma0 = 1.0;
  double decay = 0.9;
  int period = 2;
  double floor = kSigmaFloor;
};

// max(floor, sigma0 * decay^(epoch / period))
double anneal_sigma(const SigmaSchedule& schedule, int epoch);

// Depthwise blur with reflection padding. 2D kernels expect {N,C,H,W}
// features; 1D kernels expect a 2D row matrix (blur along each row).
Tensor cbs_apply(const Tensor& features, const GaussianKernel& kernel);

// y = ReLU(LayerNorm(G_sigma conv (theta_w conv x))) per region row.
// At or below the sigma floor the Gaussian stage is skipped.
Tensor cbs1d_layer(const Tensor& regions, const Tensor& learned_taps, double sigma,
                   const nn::LayerNorm& norm);

}  // namespace icap::smoothing
