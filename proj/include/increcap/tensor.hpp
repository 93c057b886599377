#pragma once
// Reverse-mode autodiff over dense double tensors. Tape-free: each tensor
// node stores its parents and a backward closure; backward() runs a reverse
// topological sweep from the loss. Single-threaded by design — determinism
// matters more than parallel speed here. Heavy inner loops go through the
// runtime-dispatched kernels in kernels.hpp.

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace icap {

using Shape = std::vector<int>;

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;  // leaf flag: gradient is wanted here
  bool needs_grad = false;     // this or some ancestor requires grad
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void()> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

  static Tensor zeros(const Shape& s, bool requires_grad = false);
  static Tensor full(const Shape& s, double v, bool requires_grad = false);
  static Tensor from_data(const Shape& s, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor randn(const Shape& s, std::mt19937_64& rng, double stddev,
                      bool requires_grad = false);
  static Tensor uniform(const Shape& s, std::mt19937_64& rng, double lo, double hi,
                        bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int rows() const { return node_->shape.at(0); }
  int cols() const { return node_->shape.at(1); }

  std::vector<double>& data() { return node_->value; }
  const std::vector<double>& data() const { return node_->value; }
  std::vector<double>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool requires_grad() const { return node_->requires_grad; }
  bool needs_grad() const { return node_->needs_grad; }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  double item() const {
    if (node_->value.size() != 1) throw std::invalid_argument("item(): tensor not scalar");
    return node_->value[0];
  }

  // Leaf copy of the current value with gradient tracking severed.
  Tensor detach() const;

  std::shared_ptr<TensorNode> node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

// Runs reverse-mode accumulation from a scalar loss (seed gradient 1).
void backward(const Tensor& loss);

// ---- elementwise / scalar --------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor square(const Tensor& a);

// ---- reductions ------------------------------------------------------------
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
// Mean over rows of a 2D tensor -> shape {1, cols}.
Tensor mean_rows(const Tensor& a);

// ---- 2D linear algebra -----------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]x[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a * b^T, b is [n,k]
Tensor transpose(const Tensor& a);
// x[m,in] * w[out,in]^T + b[out]; bias optional (pass undefined Tensor).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
// Broadcast-add a {1,n} (or {n}) row vector over the rows of a 2D tensor.
Tensor add_rowvec(const Tensor& a, const Tensor& v);

// ---- shape -----------------------------------------------------------------
Tensor reshape(const Tensor& a, const Shape& s);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, int r0, int r1);  // [r0, r1)
Tensor slice_cols(const Tensor& a, int c0, int c1);  // [c0, c1)

// ---- rowwise nonlinear -----------------------------------------------------
Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
// y = (x - mean)/sqrt(var + eps) * gamma + beta, per row; gamma/beta {cols}.
Tensor layer_norm_rows(const Tensor& a, const Tensor& gamma, const Tensor& beta,
                       double eps = 1e-5);
// Row-wise L2 normalization; rows with norm < eps_floor get eps_floor added
// to the norm (and the event is counted in *flagged if non-null).
Tensor l2_normalize_rows(const Tensor& a, double eps_floor = 1e-12,
                         int* flagged = nullptr);
// Picks a[i, ids[i]] for each row -> {rows, 1}.
Tensor gather_rowwise(const Tensor& a, const std::vector<int>& ids);
// Rows of weight indexed by ids -> {ids.size(), cols}.
Tensor embedding(const Tensor& weight, const std::vector<int>& ids);

// ---- dropout ---------------------------------------------------------------
Tensor dropout(const Tensor& a, double p, std::mt19937_64& rng, bool train);

// ---- convolution -----------------------------------------------------------
// x: {N, C, H, W}; w: {Cout, Cin, kh, kw}; b: {Cout} or undefined.
// Zero padding `pad`, stride `stride`.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int pad);
// Reflection padding (no edge duplication) on H and W of {N,C,H,W}.
Tensor pad_reflect2d(const Tensor& x, int p);
// Depthwise blur of {N,C,H,W} with a fixed (non-learnable) SxS kernel,
// reflection padding, output shape = input shape.
Tensor blur2d(const Tensor& x, const std::vector<double>& taps, int S);
// Per-row 1D convolution of a 2D tensor with a fixed kernel, reflection pad.
Tensor blur1d_rows(const Tensor& x, const std::vector<double>& taps);
// Per-row learnable 1D convolution (same kernel for every row), reflection pad.
Tensor conv1d_rows(const Tensor& x, const Tensor& taps);

// Mean over the spatial cells of {N,C,H,W} -> {N, C}.
Tensor spatial_mean(const Tensor& x);
// {N,C,H,W} -> {N*H*W, C}: one row per spatial cell in raster order.
Tensor regions_from_map(const Tensor& x);
// Inverse of regions_from_map: {N*H*W, C} rows -> {N,C,H,W}.
Tensor rows_to_map(const Tensor& rows, int n, int c, int h, int w);

}  // namespace icap
