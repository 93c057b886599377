#include "increcap/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "increcap/kernels.hpp"

namespace icap {

namespace {

std::shared_ptr<TensorNode> make_leaf(const Shape& s, bool requires_grad) {
  auto n = std::make_shared<TensorNode>();
  n->shape = s;
  n->value.assign(shape_size(s), 0.0);
  n->requires_grad = requires_grad;
  n->needs_grad = requires_grad;
  return n;
}

std::shared_ptr<TensorNode> make_op(const Shape& s,
                                    std::vector<std::shared_ptr<TensorNode>> parents) {
  auto n = std::make_shared<TensorNode>();
  n->shape = s;
  n->value.assign(shape_size(s), 0.0);
  for (const auto& p : parents)
    if (p->needs_grad) n->needs_grad = true;
  n->parents = std::move(parents);
  return n;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

int reflect_index(int i, int n) {
  // reflect without edge duplication: -1 -> 1, n -> n-2
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

}  // namespace

Tensor Tensor::zeros(const Shape& s, bool requires_grad) {
  return Tensor(make_leaf(s, requires_grad));
}

Tensor Tensor::full(const Shape& s, double v, bool requires_grad) {
  auto n = make_leaf(s, requires_grad);
  std::fill(n->value.begin(), n->value.end(), v);
  return Tensor(n);
}

Tensor Tensor::from_data(const Shape& s, std::vector<double> data, bool requires_grad) {
  if (data.size() != shape_size(s))
    throw std::invalid_argument("from_data: size mismatch");
  auto n = make_leaf(s, requires_grad);
  n->value = std::move(data);
  return Tensor(n);
}

Tensor Tensor::randn(const Shape& s, std::mt19937_64& rng, double stddev,
                     bool requires_grad) {
  auto n = make_leaf(s, requires_grad);
  std::normal_distribution<double> d(0.0, stddev);
  for (auto& v : n->value) v = d(rng);
  return Tensor(n);
}

Tensor Tensor::uniform(const Shape& s, std::mt19937_64& rng, double lo, double hi,
                       bool requires_grad) {
  auto n = make_leaf(s, requires_grad);
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : n->value) v = d(rng);
  return Tensor(n);
}

Tensor Tensor::detach() const {
  auto n = make_leaf(node_->shape, false);
  n->value = node_->value;
  return Tensor(n);
}

void backward(const Tensor& loss) {
  auto root = loss.node();
  if (root->value.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar");
  root->ensure_grad();
  root->grad[0] += 1.0;

  // iterative post-order DFS
  std::vector<std::shared_ptr<TensorNode>> order;
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<std::shared_ptr<TensorNode>, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      auto child = node->parents[idx++];
      if (child->needs_grad && seen.insert(child.get()).second)
        stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  // order is post-order (parents before dependents); run dependents first
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn();
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  auto n = make_op(a.shape(), {a.node(), b.node()});
  kernels::add(a.data().data(), b.data().data(), n->value.data(), n->value.size());
  if (n->needs_grad) {
    auto an = a.node(), bn = b.node();
    TensorNode* self = n.get();
    n->backward_fn = [an, bn, self]() {
      if (an->needs_grad) {
        an->ensure_grad();
        kernels::axpy(1.0, self->grad.data(), an->grad.data(), self->grad.size());
      }
      if (bn->needs_grad) {
        bn->ensure_grad();
        kernels::axpy(1.0, self->grad.data(), bn->grad.data(), self->grad.size());
      }
    };
  }
  return Tensor(n);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  auto n = make_op(a.shape(), {a.node(), b.node()});
  for (std::size_t i = 0; i < n->value.size(); ++i)
    n->value[i] = a.data()[i] - b.data()[i];
  if (n->needs_grad) {
    auto an = a.node(), bn = b.node();
    TensorNode* self = n.get();
    n->backward_fn = [an, bn, self]() {
      if (an->needs_grad) {
        an->ensure_grad();
        kernels::axpy(1.0, self->grad.data(), an->grad.data(), self->grad.size());
      }
      if (bn->needs_grad) {
        bn->ensure_grad();
        kernels::axpy(-1.0, self->grad.data(), bn->grad.data(), self->grad.size());
      }
    };
  }
  return Tensor(n);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  auto n = make_op(a.shape(), {a.node(), b.node()});
  kernels::mul(a.data().data(), b.data().data(), n->value.data(), n->value.size());
  if (n->needs_grad) {
    auto an = a.node(), bn = b.node();
    TensorNode* self = n.get();
    n->backward_fn = [an, bn, self]() {
      const std::size_t m = self->grad.size();
      if (an->needs_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          an->grad[i] += self->grad[i] * bn->value[i];
      }
      if (bn->needs_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          bn->grad[i] += self->grad[i] * an->value[i];
      }
    };
  }
  return Tensor(n);
}

Tensor scale(const Tensor& a, double s) {
  auto n = make_op(a.shape(), {a.node()});
  kernels::scale(s, a.data().data(), n->value.data(), n->value.size());
  if (n->needs_grad) {
    auto an = a.node();
    TensorNode* self = n.get();
    n->backward_fn = [an, self, s]() {
      an->ensure_grad();
      kernels::axpy(s, self->grad.data(), an->grad.data(), self->grad.size());
    };
  }
  return Tensor(n);
}

Tensor add_scalar(const Tensor& a, double s) {
  auto n = make_op(a.shape(), {a.node()});
  for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = a.data()[i] + s;
  if (n->needs_grad) {
    auto an = a.node();
    TensorNode* self = n.get();
    n->backward_fn = [an, self]() {
      an->ensure_grad();
      kernels::axpy(1.0, self->grad.data(), an->grad.data(), self->grad.size());
    };
  }
  return Tensor(n);
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor relu(const Tensor& a) {
  auto n = make_op(a.shape(), {a.node()});
  kernels::relu(a.data().data(), n->value.data(), n->value.size());
  if (n->needs_grad) {
    auto an = a.node();
    TensorNode* self = n.get();
    n->backward_fn = [an, self]() {
      an->ensure_grad();
      kernels::relu_backward(an->value.data(), self->grad.data(), an->grad.data(),
                             self->grad.size());
    };
  }
  return Tensor(n);
}

Tensor sigmoid(const Tensor& a) {
  auto n = make_op(a.shape(), {a.node()});
  for (std::size_t i = 0; i < n->value.size(); ++i)
    n->value[i] = 1.0 / (1.0 + std::exp(-a.data()[i]));
  if (n->needs_grad) {
    auto an = a.node();
    TensorNode* self = n.get();
    n->backward_fn = [an, self]() {
      an->ensure_grad();
      for (std::size_t i = 0; i < self->grad.size(); ++i) {
        const double y = self->value[i];
        an->grad[i] += self->grad[i] * y * (1.0 - y);
      }
    };
  }
  return Tensor(n);
}

Tensor square(const Tensor& a) {
  auto n = make_op(a.shape(), {a.node()});
  for (std::size_t i = 0; i < n->value.size(); ++i)
    n->value[i] = a.data()[i] * a.data()[i];
  if (n->needs_grad) {
    auto an = a.node();
    TensorNode* self = n.get();
    n->backward_fn = [an, self]() {
      an->ensure_grad();
      for (std::size_t i = 0; i < self->grad.size(); ++i)
        an->grad[i] += 2.0 * an->value[i] * self->grad[i];
    };
  }
  return Tensor(n);
}

// ---- reductions ------------------------------------------------------------

Tensor sum_all(const Tensor& a) {
  auto n = make_op({1}, {a.node()});
  double s = 0.0;
  for (double v : a.data()) s += v;
  n->value[0] = s;
  if (n->needs_grad) {
    auto an = a.node();
    TensorNode* self = n.get();
    n->backward_fn = [an, self]() {
      an->ensure_grad();
      const double g = self->grad[0];
      for (auto& gv : an->grad) gv += g;
    };
  }
  return Tensor(n);
}

Tensor mean_all(const Tensor& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

Tensor mean_rows(const Tensor& a) {
  const int r = a.rows(), c = a.cols();
  auto n = make_op({1, c}, {a.node()});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) n->value[j] += a.data()[i * c + j];
  for (int j = 0; j < c; ++j) n->value[j] /= r;
  if (n->needs_grad) {
    auto an = a.node();
    TensorNode* self = n.get();
    n->backward_fn = [an, self, r, c]() {
      an->ensure_grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) an->grad[i * c + j] += self->grad[j] / r;
    };
  }
  return Tensor(n);
}

// ---- 2D linear algebra -----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows())
    throw std::invalid_argument("matmul: incompatible shapes");
  const int m = a.rows(), k = a.cols(), nn = b.cols();
  auto n = make_op({m, nn}, {a.node(), b.node()});
  kernels::gemm_acc(a.data().data(), b.data().data(), n->value.data(), m, k, nn);
  if (n->needs_grad) {
    auto an = a.node(), bn = b.node();
    TensorNode* self = n.get();
    n->backward_fn = [an, bn, self, m, k, nn]() {
      if (an->needs_grad) {
        an->ensure_grad();
        // da += dy * b^T
        kernels::gemm_bt_acc(self->grad.data(), bn->value.data(), an->grad.data(),
                             m, nn, k);
      }
      if (bn->needs_grad) {
        bn->ensure_grad();
        // db += a^T * dy
        kernels::gemm_at_acc(an->value.data(), self->grad.data(), bn->grad.data(),
                             k, m, nn);
      }
    };
  }
  return Tensor(n);
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.cols())
    throw std::invalid_argument("matmul_nt: incompatible shapes");
  const int m = a.rows(), k = a.cols(), nn = b.rows();
  auto n = make_op({m, nn}, {a.node(), b.node()});
  kernels::gemm_bt_acc(a.data().data(), b.data().data(), n->value.data(), m, k, nn);
  if (n->needs_grad) {
    auto an = a.node(), bn = b.node();
    TensorNode* self = n.get();
    n->backward_fn = [an, bn, self, m, k, nn]() {
      if (an->needs_grad) {
        an->ensure_grad();
        // da += dy * b
        kernels::gemm_acc(self->grad.data(), bn->value.data(), an->grad.data(), m,
                          nn, k);
      }
      if (bn->needs_grad) {
        bn->ensure_grad();
        // db += dy^T * a
        kernels::gemm_at_acc(self->grad.data(), an->value.data(), bn->grad.data(),
                             nn, m, k);
      }
    };
  }
  return Tensor(n);
}

Tensor transpose(const Tensor& a) {
  const int r = a.rows(), c = a.cols();
  auto n = make_op({c, r}, {a.node()});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) n->value[j * r + i] = a.data()[i * c + j];
  if (n->needs_grad) {
    auto an = a.node();
    TensorNode* self = n.get();
    n->backward_fn = [an, self, r, c]() {
      an->ensure_grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) an->grad[i * c + j] += self->grad[j * r + i];
    };
  }
  return Tensor(n);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul_nt(x, w);
  if (b.defined()) y = add_rowvec(y, b);
  return y;
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  const int r = a.rows(), c = a.cols();
  if (static_cast<int>(v.size()) != c)
    throw std::invalid_argument("add_rowvec: length mismatch");
  auto n = make_op(a.shape(), {a.node(), v.node()});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) n->value[i * c + j] = a.data()[i * c + j] + v.data()[j];
  if (n->needs_grad) {
    auto an = a.node(), vn = v.node();
    TensorNode* self = n.get();
    n->backward_fn = [an, vn, self, r, c]() {
      if (an->needs_grad) {
        an->ensure_grad();
        kernels::axpy(1.0, self->grad.data(), an->grad.data(), self->grad.size());
      }
      if (vn->needs_grad) {
        vn->ensure_grad();
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) vn->grad[j] += self->grad[i * c + j];
      }
    };
  }
  return Tensor(n);
}

// ---- shape -----------------------------------------------------------------

Tensor reshape(const Tensor& a, const Shape& s) {
  if (shape_size(s) != a.size()) throw std::invalid_argument("reshape: size mismatch");
  auto n = make_op(s, {a.node()});
  n->value = a.data();
  if (n->needs_grad) {
    auto an = a.node();
    TensorNode* self = n.get();
    n->backward_fn = [an, self]() {
      an->ensure_grad();
      kernels::axpy(1.0, self->grad.data(), an->grad.data(), self->grad.size());
    };
  }
  return Tensor(n);
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  const int c = parts[0].cols();
  int r = 0;
  std::vector<std::shared_ptr<TensorNode>> ps;
  for (const auto& p : parts) {
    if (p.cols() != c) throw std::invalid_argument("concat_rows: column mismatch");
    r += p.rows();
    ps.push_back(p.node());
  }
  auto n = make_op({r, c}, ps);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), n->value.begin() + off);
    off += p.size();
  }
  if (n->needs_grad) {
    TensorNode* self = n.get();
    n->backward_fn = [self]() {
      std::size_t off2 = 0;
      for (auto& p : self->parents) {
        if (p->needs_grad) {
          p->ensure_grad();
          kernels::axpy(1.0, self->grad.data() + off2, p->grad.data(),
                        p->value.size());
        }
        off2 += p->value.size();
      }
    };
  }
  return Tensor(n);
}

Tensor slice_rows(const Tensor& a, int r0, int r1) {
  const int c = a.cols();
  if (r0 < 0 || r1 > a.rows() || r0 >= r1)
    throw std::invalid_argument("slice_rows: bad range");
  auto n = make_op({r1 - r0, c}, {a.node()});
  std::copy(a.data().begin() + static_cast<std::size_t>(r0) * c,
            a.data().begin() + static_cast<std::size_t>(r1) * c, n->value.begin());
  if (n->needs_grad) {
    auto an = a.node();
    TensorNode* self = n.get();
    n->backward_fn = [an, self, r0, c]() {
      an->ensure_grad();
      kernels::axpy(1.0, self->grad.data(),
                    an->grad.data() + static_cast<std::size_t>(r0) * c,
                    self->grad.size());
    };
  }
  return Tensor(n);
}

Tensor slice_cols(const Tensor& a, int c0, int c1) {
  const int r = a.rows(), c = a.cols();
  if (c0 < 0 || c1 > c || c0 >= c1) throw std::invalid_argument("slice_cols: bad range");
  const int w = c1 - c0;
  auto n = make_op({r, w}, {a.node()});
  for (int i = 0; i < r; ++i)
    std::copy(a.data().begin() + i * c + c0, a.data().begin() + i * c + c1,
              n->value.begin() + static_cast<std::size_t>(i) * w);
  if (n->needs_grad) {
    auto an = a.node();
    TensorNode* self = n.get();
    n->backward_fn = [an, self, r, c, c0, w]() {
      an->ensure_grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < w; ++j)
          an->grad[i * c + c0 + j] += self->grad[static_cast<std::size_t>(i) * w + j];
    };
  }
  return Tensor(n);
}

// ---- rowwise nonlinear -----------------------------------------------------

Tensor softmax_rows(const Tensor& a) {
  const int r = a.rows(), c = a.cols();
  auto n = make_op(a.shape(), {a.node()});
  for (int i = 0; i < r; ++i) {
    const double* x = a.data().data() + static_cast<std::size_t>(i) * c;
    double* y = n->value.data() + static_cast<std::size_t>(i) * c;
    double mx = x[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    double s = 0.0;
    for (int j = 0; j < c; ++j) {
      y[j] = std::exp(x[j] - mx);
      s += y[j];
    }
    for (int j = 0; j < c; ++j) y[j] /= s;
  }
  if (n->needs_grad) {
    auto an = a.node();
    TensorNode* self = n.get();
    n->backward_fn = [an, self, r, c]() {
      an->ensure_grad();
      for (int i = 0; i < r; ++i) {
        const double* y = self->value.data() + static_cast<std::size_t>(i) * c;
        const double* dy = self->grad.data() + static_cast<std::size_t>(i) * c;
        double* dx = an->grad.data() + static_cast<std::size_t>(i) * c;
        double dotv = 0.0;
        for (int j = 0; j < c; ++j) dotv += dy[j] * y[j];
        for (int j = 0; j < c; ++j) dx[j] += y[j] * (dy[j] - dotv);
      }
    };
  }
  return Tensor(n);
}

Tensor log_softmax_rows(const Tensor& a) {
  const int r = a.rows(), c = a.cols();
  auto n = make_op(a.shape(), {a.node()});
  for (int i = 0; i < r; ++i) {
    const double* x = a.data().data() + static_cast<std::size_t>(i) * c;
    double* y = n->value.data() + static_cast<std::size_t>(i) * c;
    double mx = x[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    double s = 0.0;
    for (int j = 0; j < c; ++j) s += std::exp(x[j] - mx);
    const double lse = mx + std::log(s);
    for (int j = 0; j < c; ++j) y[j] = x[j] - lse;
  }
  if (n->needs_grad) {
    auto an = a.node();
    TensorNode* self = n.get();
    n->backward_fn = [an, self, r, c]() {
      an->ensure_grad();
      for (int i = 0; i < r; ++i) {
        const double* y = self->value.data() + static_cast<std::size_t>(i) * c;
        const double* dy = self->grad.data() + static_cast<std::size_t>(i) * c;
        double* dx = an->grad.data() + static_cast<std::size_t>(i) * c;
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += dy[j];
        for (int j = 0; j < c; ++j) dx[j] += dy[j] - std::exp(y[j]) * s;
      }
    };
  }
  return Tensor(n);
}

Tensor layer_norm_rows(const Tensor& a, const Tensor& gamma, const Tensor& beta,
                       double eps) {
  const int r = a.rows(), c = a.cols();
  if (static_cast<int>(gamma.size()) != c || static_cast<int>(beta.size()) != c)
    throw std::invalid_argument("layer_norm_rows: affine size mismatch");
  auto n = make_op(a.shape(), {a.node(), gamma.node(), beta.node()});
  auto xhat = std::make_shared<std::vector<double>>(a.size());
  auto invstd = std::make_shared<std::vector<double>>(r);
  for (int i = 0; i < r; ++i) {
    const double* x = a.data().data() + static_cast<std::size_t>(i) * c;
    double mu = 0.0;
    for (int j = 0; j < c; ++j) mu += x[j];
    mu /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= c;
    const double is = 1.0 / std::sqrt(var + eps);
    (*invstd)[i] = is;
    double* xh = xhat->data() + static_cast<std::size_t>(i) * c;
    double* y = n->value.data() + static_cast<std::size_t>(i) * c;
    for (int j = 0; j < c; ++j) {
      xh[j] = (x[j] - mu) * is;
      y[j] = xh[j] * gamma.data()[j] + beta.data()[j];
    }
  }
  if (n->needs_grad) {
    auto an = a.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    TensorNode* self = n.get();
    n->backward_fn = [an, gn, bn, self, xhat, invstd, r, c]() {
      if (gn->needs_grad) gn->ensure_grad();
      if (bn->needs_grad) bn->ensure_grad();
      if (an->needs_grad) an->ensure_grad();
      for (int i = 0; i < r; ++i) {
        const double* dy = self->grad.data() + static_cast<std::size_t>(i) * c;
        const double* xh = xhat->data() + static_cast<std::size_t>(i) * c;
        if (gn->needs_grad)
          for (int j = 0; j < c; ++j) gn->grad[j] += dy[j] * xh[j];
        if (bn->needs_grad)
          for (int j = 0; j < c; ++j) bn->grad[j] += dy[j];
        if (an->needs_grad) {
          double s1 = 0.0, s2 = 0.0;
          for (int j = 0; j < c; ++j) {
            const double dxh = dy[j] * gn->value[j];
            s1 += dxh;
            s2 += dxh * xh[j];
          }
          double* dx = an->grad.data() + static_cast<std::size_t>(i) * c;
          const double is = (*invstd)[i];
          for (int j = 0; j < c; ++j) {
            const double dxh = dy[j] * gn->value[j];
            dx[j] += is * (dxh - s1 / c - xh[j] * s2 / c);
          }
        }
      }
    };
  }
  return Tensor(n);
}

Tensor l2_normalize_rows(const Tensor& a, double eps_floor, int* flagged) {
  const int r = a.rows(), c = a.cols();
  auto n = make_op(a.shape(), {a.node()});
  auto norms = std::make_shared<std::vector<double>>(r);
  for (int i = 0; i < r; ++i) {
    const double* x = a.data().data() + static_cast<std::size_t>(i) * c;
    double s = kernels::dot(x, x, static_cast<std::size_t>(c));
    double nr = std::sqrt(s);
    if (nr < eps_floor) {
      nr += eps_floor;
      if (flagged) ++(*flagged);
    }
    (*norms)[i] = nr;
    double* y = n->value.data() + static_cast<std::size_t>(i) * c;
    for (int j = 0; j < c; ++j) y[j] = x[j] / nr;
  }
  if (n->needs_grad) {
    auto an = a.node();
    TensorNode* self = n.get();
    n->backward_fn = [an, self, norms, r, c]() {
      an->ensure_grad();
      for (int i = 0; i < r; ++i) {
        const double* y = self->value.data() + static_cast<std::size_t>(i) * c;
        const double* dy = self->grad.data() + static_cast<std::size_t>(i) * c;
        double* dx = an->grad.data() + static_cast<std::size_t>(i) * c;
        double dotv = 0.0;
        for (int j = 0; j < c; ++j) dotv += y[j] * dy[j];
        const double nr = (*norms)[i];
        for (int j = 0; j < c; ++j) dx[j] += (dy[j] - y[j] * dotv) / nr;
      }
    };
  }
  return Tensor(n);
}

Tensor gather_rowwise(const Tensor& a, const std::vector<int>& ids) {
  const int r = a.rows(), c = a.cols();
  if (static_cast<int>(ids.size()) != r)
    throw std::invalid_argument("gather_rowwise: ids size mismatch");
  for (int id : ids)
    if (id < 0 || id >= c) throw std::invalid_argument("gather_rowwise: id out of range");
  auto n = make_op({r, 1}, {a.node()});
  for (int i = 0; i < r; ++i) n->value[i] = a.data()[i * c + ids[i]];
  if (n->needs_grad) {
    auto an = a.node();
    TensorNode* self = n.get();
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    n->backward_fn = [an, self, ids_copy, c]() {
      an->ensure_grad();
      for (std::size_t i = 0; i < ids_copy->size(); ++i)
        an->grad[i * c + (*ids_copy)[i]] += self->grad[i];
    };
  }
  return Tensor(n);
}

Tensor embedding(const Tensor& weight, const std::vector<int>& ids) {
  const int v = weight.rows(), c = weight.cols();
  for (int id : ids)
    if (id < 0 || id >= v) throw std::invalid_argument("embedding: id out of range");
  auto n = make_op({static_cast<int>(ids.size()), c}, {weight.node()});
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy(weight.data().begin() + static_cast<std::size_t>(ids[i]) * c,
              weight.data().begin() + static_cast<std::size_t>(ids[i] + 1) * c,
              n->value.begin() + i * c);
  if (n->needs_grad) {
    auto wn = weight.node();
    TensorNode* self = n.get();
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    n->backward_fn = [wn, self, ids_copy, c]() {
      wn->ensure_grad();
      for (std::size_t i = 0; i < ids_copy->size(); ++i)
        kernels::axpy(1.0, self->grad.data() + i * c,
                      wn->grad.data() + static_cast<std::size_t>((*ids_copy)[i]) * c,
                      static_cast<std::size_t>(c));
    };
  }
  return Tensor(n);
}

Tensor dropout(const Tensor& a, double p, std::mt19937_64& rng, bool train) {
  if (!train || p <= 0.0) return a;
  auto n = make_op(a.shape(), {a.node()});
  auto mask = std::make_shared<std::vector<double>>(a.size());
  std::uniform_real_distribution<double> d(0.0, 1.0);
  const double keep = 1.0 - p;
  for (std::size_t i = 0; i < a.size(); ++i) {
    (*mask)[i] = d(rng) < p ? 0.0 : 1.0 / keep;
    n->value[i] = a.data()[i] * (*mask)[i];
  }
  if (n->needs_grad) {
    auto an = a.node();
    TensorNode* self = n.get();
    n->backward_fn = [an, self, mask]() {
      an->ensure_grad();
      for (std::size_t i = 0; i < self->grad.size(); ++i)
        an->grad[i] += self->grad[i] * (*mask)[i];
    };
  }
  return Tensor(n);
}

// ---- convolution -----------------------------------------------------------

namespace {

void im2col(const double* x, int C, int H, int W, int kh, int kw, int stride,
            int pad, int Ho, int Wo, double* col) {
  // col is [C*kh*kw, Ho*Wo]
  const int cols = Ho * Wo;
  for (int ch = 0; ch < C; ++ch) {
    for (int u = 0; u < kh; ++u) {
      for (int v = 0; v < kw; ++v) {
        double* crow = col + (static_cast<std::size_t>(ch) * kh * kw + u * kw + v) * cols;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride + u - pad;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride + v - pad;
            crow[oy * Wo + ox] = (iy >= 0 && iy < H && ix >= 0 && ix < W)
                                     ? x[(static_cast<std::size_t>(ch) * H + iy) * W + ix]
                                     : 0.0;
          }
        }
      }
    }
  }
}

void col2im_acc(const double* col, int C, int H, int W, int kh, int kw, int stride,
                int pad, int Ho, int Wo, double* dx) {
  const int cols = Ho * Wo;
  for (int ch = 0; ch < C; ++ch) {
    for (int u = 0; u < kh; ++u) {
      for (int v = 0; v < kw; ++v) {
        const double* crow =
            col + (static_cast<std::size_t>(ch) * kh * kw + u * kw + v) * cols;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride + u - pad;
          if (iy < 0 || iy >= H) continue;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride + v - pad;
            if (ix < 0 || ix >= W) continue;
            dx[(static_cast<std::size_t>(ch) * H + iy) * W + ix] += crow[oy * Wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int pad) {
  if (x.ndim() != 4 || w.ndim() != 4)
    throw std::invalid_argument("conv2d: expects 4D input and weight");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = w.dim(0), Cin = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (Cin != C) throw std::invalid_argument("conv2d: channel mismatch");
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  const int K = Cin * kh * kw;
  const int cols = Ho * Wo;

  std::vector<std::shared_ptr<TensorNode>> parents = {x.node(), w.node()};
  if (b.defined()) parents.push_back(b.node());
  auto n = make_op({N, Cout, Ho, Wo}, parents);

  auto colbuf = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(N) * K * cols);
  for (int i = 0; i < N; ++i) {
    double* col = colbuf->data() + static_cast<std::size_t>(i) * K * cols;
    im2col(x.data().data() + static_cast<std::size_t>(i) * C * H * W, C, H, W, kh,
           kw, stride, pad, Ho, Wo, col);
    double* y = n->value.data() + static_cast<std::size_t>(i) * Cout * cols;
    kernels::gemm_acc(w.data().data(), col, y, Cout, K, cols);
    if (b.defined())
      for (int oc = 0; oc < Cout; ++oc)
        for (int j = 0; j < cols; ++j) y[oc * cols + j] += b.data()[oc];
  }

  if (n->needs_grad) {
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.defined() ? b.node() : nullptr;
    TensorNode* self = n.get();
    n->backward_fn = [xn, wn, bn, self, colbuf, N, C, H, W, Cout, kh, kw, stride,
                      pad, Ho, Wo, K, cols]() {
      std::vector<double> dcol(static_cast<std::size_t>(K) * cols);
      if (wn->needs_grad) wn->ensure_grad();
      if (xn->needs_grad) xn->ensure_grad();
      if (bn && bn->needs_grad) bn->ensure_grad();
      for (int i = 0; i < N; ++i) {
        const double* dy = self->grad.data() + static_cast<std::size_t>(i) * Cout * cols;
        const double* col = colbuf->data() + static_cast<std::size_t>(i) * K * cols;
        if (wn->needs_grad)
          // dW[Cout,K] += dy[Cout,cols] * col^T[cols,K]
          kernels::gemm_bt_acc(dy, col, wn->grad.data(), Cout, cols, K);
        if (bn && bn->needs_grad)
          for (int oc = 0; oc < Cout; ++oc) {
            double s = 0.0;
            for (int j = 0; j < cols; ++j) s += dy[oc * cols + j];
            bn->grad[oc] += s;
          }
        if (xn->needs_grad) {
          std::fill(dcol.begin(), dcol.end(), 0.0);
          // dcol[K,cols] += W^T[K,Cout] * dy[Cout,cols]
          kernels::gemm_at_acc(wn->value.data(), dy, dcol.data(), K, Cout, cols);
          col2im_acc(dcol.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                     xn->grad.data() + static_cast<std::size_t>(i) * C * H * W);
        }
      }
    };
  }
  return Tensor(n);
}

Tensor blur2d(const Tensor& x, const std::vector<double>& taps, int S) {
  if (x.ndim() != 4) throw std::invalid_argument("blur2d: expects 4D input");
  if (static_cast<int>(taps.size()) != S * S)
    throw std::invalid_argument("blur2d: taps size mismatch");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int c0 = (S - 1) / 2;
  auto n = make_op(x.shape(), {x.node()});
  auto tp = std::make_shared<std::vector<double>>(taps);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (int nc = 0; nc < N * C; ++nc) {
    const double* xp = x.data().data() + nc * plane;
    double* yp = n->value.data() + nc * plane;
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        double s = 0.0;
        for (int u = 0; u < S; ++u) {
          const int iy = reflect_index(i + u - c0, H);
          for (int v = 0; v < S; ++v)
            s += taps[u * S + v] * xp[iy * W + reflect_index(j + v - c0, W)];
        }
        yp[i * W + j] = s;
      }
  }
  if (n->needs_grad) {
    auto xn = x.node();
    TensorNode* self = n.get();
    n->backward_fn = [xn, self, tp, N, C, H, W, S, c0, plane]() {
      xn->ensure_grad();
      for (int nc = 0; nc < N * C; ++nc) {
        const double* dy = self->grad.data() + nc * plane;
        double* dx = xn->grad.data() + nc * plane;
        for (int i = 0; i < H; ++i)
          for (int j = 0; j < W; ++j) {
            const double g = dy[i * W + j];
            for (int u = 0; u < S; ++u) {
              const int iy = reflect_index(i + u - c0, H);
              for (int v = 0; v < S; ++v)
                dx[iy * W + reflect_index(j + v - c0, W)] += (*tp)[u * S + v] * g;
            }
          }
      }
    };
  }
  return Tensor(n);
}

Tensor blur1d_rows(const Tensor& x, const std::vector<double>& taps) {
  const int r = x.rows(), c = x.cols();
  const int S = static_cast<int>(taps.size());
  const int c0 = (S - 1) / 2;
  auto n = make_op(x.shape(), {x.node()});
  auto tp = std::make_shared<std::vector<double>>(taps);
  for (int i = 0; i < r; ++i) {
    const double* xp = x.data().data() + static_cast<std::size_t>(i) * c;
    double* yp = n->value.data() + static_cast<std::size_t>(i) * c;
    for (int j = 0; j < c; ++j) {
      double s = 0.0;
      for (int u = 0; u < S; ++u) s += taps[u] * xp[reflect_index(j + u - c0, c)];
      yp[j] = s;
    }
  }
  if (n->needs_grad) {
    auto xn = x.node();
    TensorNode* self = n.get();
    n->backward_fn = [xn, self, tp, r, c, S, c0]() {
      xn->ensure_grad();
      for (int i = 0; i < r; ++i) {
        const double* dy = self->grad.data() + static_cast<std::size_t>(i) * c;
        double* dx = xn->grad.data() + static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j)
          for (int u = 0; u < S; ++u)
            dx[reflect_index(j + u - c0, c)] += (*tp)[u] * dy[j];
      }
    };
  }
  return Tensor(n);
}

Tensor conv1d_rows(const Tensor& x, const Tensor& taps) {
  const int r = x.rows(), c = x.cols();
  const int S = static_cast<int>(taps.size());
  if (S % 2 == 0) throw std::invalid_argument("conv1d_rows: kernel size must be odd");
  const int c0 = (S - 1) / 2;
  auto n = make_op(x.shape(), {x.node(), taps.node()});
  for (int i = 0; i < r; ++i) {
    const double* xp = x.data().data() + static_cast<std::size_t>(i) * c;
    double* yp = n->value.data() + static_cast<std::size_t>(i) * c;
    for (int j = 0; j < c; ++j) {
      double s = 0.0;
      for (int u = 0; u < S; ++u)
        s += taps.data()[u] * xp[reflect_index(j + u - c0, c)];
      yp[j] = s;
    }
  }
  if (n->needs_grad) {
    auto xn = x.node();
    auto tn = taps.node();
    TensorNode* self = n.get();
    n->backward_fn = [xn, tn, self, r, c, S, c0]() {
      if (xn->needs_grad) xn->ensure_grad();
      if (tn->needs_grad) tn->ensure_grad();
      for (int i = 0; i < r; ++i) {
        const double* dy = self->grad.data() + static_cast<std::size_t>(i) * c;
        const double* xp = xn->value.data() + static_cast<std::size_t>(i) * c;
        double* dx = xn->needs_grad ? xn->grad.data() + static_cast<std::size_t>(i) * c
                                    : nullptr;
        for (int j = 0; j < c; ++j)
          for (int u = 0; u < S; ++u) {
            const int jj = reflect_index(j + u - c0, c);
            if (dx) dx[jj] += tn->value[u] * dy[j];
            if (tn->needs_grad) tn->grad[u] += xp[jj] * dy[j];
          }
      }
    };
  }
  return Tensor(n);
}

Tensor spatial_mean(const Tensor& x) {
  if (x.ndim() != 4) throw std::invalid_argument("spatial_mean: expects 4D input");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int plane = H * W;
  auto n = make_op({N, C}, {x.node()});
  for (int i = 0; i < N; ++i)
    for (int ch = 0; ch < C; ++ch) {
      const double* xp = x.data().data() + (static_cast<std::size_t>(i) * C + ch) * plane;
      double s = 0.0;
      for (int j = 0; j < plane; ++j) s += xp[j];
      n->value[i * C + ch] = s / plane;
    }
  if (n->needs_grad) {
    auto xn = x.node();
    TensorNode* self = n.get();
    n->backward_fn = [xn, self, N, C, plane]() {
      xn->ensure_grad();
      for (int i = 0; i < N * C; ++i) {
        const double g = self->grad[i] / plane;
        double* dx = xn->grad.data() + static_cast<std::size_t>(i) * plane;
        for (int j = 0; j < plane; ++j) dx[j] += g;
      }
    };
  }
  return Tensor(n);
}

Tensor regions_from_map(const Tensor& x) {
  if (x.ndim() != 4) throw std::invalid_argument("regions_from_map: expects 4D input");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int plane = H * W;
  auto n = make_op({N * plane, C}, {x.node()});
  for (int i = 0; i < N; ++i)
    for (int p = 0; p < plane; ++p)
      for (int ch = 0; ch < C; ++ch)
        n->value[(static_cast<std::size_t>(i) * plane + p) * C + ch] =
            x.data()[(static_cast<std::size_t>(i) * C + ch) * plane + p];
  if (n->needs_grad) {
    auto xn = x.node();
    TensorNode* self = n.get();
    n->backward_fn = [xn, self, N, C, plane]() {
      xn->ensure_grad();
      for (int i = 0; i < N; ++i)
        for (int p = 0; p < plane; ++p)
          for (int ch = 0; ch < C; ++ch)
            xn->grad[(static_cast<std::size_t>(i) * C + ch) * plane + p] +=
                self->grad[(static_cast<std::size_t>(i) * plane + p) * C + ch];
    };
  }
  return Tensor(n);
}

Tensor rows_to_map(const Tensor& rows, int n, int c, int h, int w) {
  const int plane = h * w;
  if (rows.ndim() != 2 || rows.rows() != n * plane || rows.cols() != c)
    throw std::invalid_argument("rows_to_map: shape mismatch");
  auto out = make_op({n, c, h, w}, {rows.node()});
  for (int i = 0; i < n; ++i)
    for (int p = 0; p < plane; ++p)
      for (int ch = 0; ch < c; ++ch)
        out->value[(static_cast<std::size_t>(i) * c + ch) * plane + p] =
            rows.data()[(static_cast<std::size_t>(i) * plane + p) * c + ch];
  if (out->needs_grad) {
    auto rn = rows.node();
    TensorNode* self = out.get();
    out->backward_fn = [rn, self, n, c, plane]() {
      rn->ensure_grad();
      for (int i = 0; i < n; ++i)
        for (int p = 0; p < plane; ++p)
          for (int ch = 0; ch < c; ++ch)
            rn->grad[(static_cast<std::size_t>(i) * plane + p) * c + ch] +=
                self->grad[(static_cast<std::size_t>(i) * c + ch) * plane + p];
    };
  }
  return Tensor(out);
}

}  // namespace icap
