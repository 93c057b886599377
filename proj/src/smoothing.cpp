#include "increcap/smoothing.hpp"

#include <cmath>
#include <stdexcept>

namespace icap::smoothing {

GaussianKernel gaussian_kernel(double sigma, int size, int dims) {
  if (sigma <= 0.0) throw std::invalid_argument("gaussian_kernel: sigma must be positive");
  if (size < 1 || size % 2 == 0)
    throw std::invalid_argument("gaussian_kernel: size must be odd and >= 1");
  if (dims != 1 && dims != 2)
    throw std::invalid_argument("gaussian_kernel: dims must be 1 or 2");

  const int c = (size - 1) / 2;
  std::vector<double> taps1(size);
  double sum = 0.0;
  for (int i = 0; i < size; ++i) {
    const double x = i - c;
    taps1[i] = std::exp(-x * x / (2.0 * sigma * sigma));
    sum += taps1[i];
  }
  for (double& t : taps1) t /= sum;

  GaussianKernel k;
  k.sigma = sigma;
  k.size = size;
  k.dims = dims;
  if (dims == 1) {
    k.taps = std::move(taps1);
  } else {
    k.taps.resize(static_cast<std::size_t>(size) * size);
    for (int i = 0; i < size; ++i)
      for (int j = 0; j < size; ++j) k.taps[i * size + j] = taps1[i] * taps1[j];
  }
  return k;
}

int default_kernel_size(double sigma) {
  if (sigma <= 1.0) return 3;
  int s = 2 * static_cast<int>(std::ceil(2.0 * sigma)) + 1;
  return s;
}

double anneal_sigma(const SigmaSchedule& schedule, int epoch) {
  if (epoch < 0) throw std::invalid_argument("anneal_sigma: epoch must be >= 0");
  const double s = schedule.sigma0 * std::pow(schedule.decay, epoch / schedule.period);
  return std::max(schedule.floor, s);
}

Tensor cbs_apply(const Tensor& features, const GaussianKernel& kernel) {
  if (kernel.dims == 2) {
    if (features.ndim() != 4)
      throw std::invalid_argument("cbs_apply: 2D kernel expects {N,C,H,W} features");
    return blur2d(features, kernel.taps, kernel.size);
  }
  if (features.ndim() != 2)
    throw std::invalid_argument("cbs_apply: 1D kernel expects a 2D row matrix");
  return blur1d_rows(features, kernel.taps);
}

Tensor cbs1d_layer(const Tensor& regions, const Tensor& learned_taps, double sigma,
                   const nn::LayerNorm& norm) {
  if (regions.ndim() != 2 || regions.rows() < 1)
    throw std::invalid_argument("cbs1d_layer: empty region set");
  if (sigma <= 0.0) throw std::invalid_argument("cbs1d_layer: sigma must be positive");
  Tensor y = conv1d_rows(regions, learned_taps);
  if (sigma > kSigmaFloor) {
    GaussianKernel g = gaussian_kernel(sigma, default_kernel_size(sigma), 1);
    y = blur1d_rows(y, g.taps);
  }
  return relu(norm.forward(y));
}

}  // namespace icap::smoothing
