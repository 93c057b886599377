#pragma once
// Parameterized layers over the autodiff core, a flat parameter registry for
// checkpointing, and the SGD/Adam optimizers used by the two training stages.

#include <map>
#include <string>
#include <vector>

#include "increcap/tensor.hpp"

namespace icap::nn {

// Ordered name -> parameter map. Order is registration order; names must be
// unique (used as checkpoint keys).
class ParamMap {
 public:
  void add(const std::string& name, const Tensor& t);
  void merge(const std::string& prefix, const ParamMap& other);
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  Tensor at(const std::string& name) const;
  std::vector<Tensor> tensors() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

struct Linear {
  Tensor w;  // {out, in}
  Tensor b;  // {out}

  Linear() = default;
  Linear(int in, int out, std::mt19937_64& rng, bool bias = true);
  Tensor forward(const Tensor& x) const { return linear(x, w, b); }
  void collect(const std::string& prefix, ParamMap& out) const;
};

struct Conv2d {
  Tensor w;  // {Cout, Cin, kh, kw}
  Tensor b;  // {Cout}
  int stride = 1;
  int pad = 1;

  Conv2d() = default;
  Conv2d(int cin, int cout, int ksize, int stride, int pad, std::mt19937_64& rng);
  Tensor forward(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }
  void collect(const std::string& prefix, ParamMap& out) const;
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  LayerNorm() = default;
  explicit LayerNorm(int dim);
  Tensor forward(const Tensor& x) const { return layer_norm_rows(x, gamma, beta); }
  void collect(const std::string& prefix, ParamMap& out) const;
};

struct Embedding {
  Tensor w;  // {vocab, dim}

  Embedding() = default;
  Embedding(int vocab, int dim, std::mt19937_64& rng);
  Tensor forward(const std::vector<int>& ids) const { return embedding(w, ids); }
  void collect(const std::string& prefix, ParamMap& out) const;
};

// Plain SGD with momentum and decoupled-from-nothing classic L2 weight decay
// (decay folded into the gradient, as in standard SGD implementations).
class SGD {
 public:
  SGD(std::vector<Tensor> params, double lr, double momentum, double weight_decay);
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  void step();
  void zero_grad();

  std::vector<std::vector<double>>& velocity() { return velocity_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  double lr_, momentum_, weight_decay_;
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, double lr, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8);
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  void step();
  void zero_grad();

  std::vector<std::vector<double>>& m() { return m_; }
  std::vector<std::vector<double>>& v() { return v_; }
  long step_count() const { return t_; }
  void set_step_count(long t) { t_ = t; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

// lr schedule used by both stages: initial * factor^(epoch / period).
double step_decay_lr(double initial, double factor, int period, int epoch);

}  // namespace icap::nn
