#include "increcap/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace icap::nn {

void ParamMap::add(const std::string& name, const Tensor& t) {
  for (const auto& [n, _] : entries_)
    if (n == name) throw std::invalid_argument("ParamMap: duplicate name " + name);
  entries_.emplace_back(name, t);
}

void ParamMap::merge(const std::string& prefix, const ParamMap& other) {
  for (const auto& [n, t] : other.entries_) add(prefix + n, t);
}

Tensor ParamMap::at(const std::string& name) const {
  for (const auto& [n, t] : entries_)
    if (n == name) return t;
  throw std::out_of_range("ParamMap: no parameter " + name);
}

std::vector<Tensor> ParamMap::tensors() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const auto& [_, t] : entries_) out.push_back(t);
  return out;
}

void ParamMap::zero_grad() {
  for (auto& [_, t] : entries_) t.zero_grad();
}

Linear::Linear(int in, int out, std::mt19937_64& rng, bool bias) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  w = Tensor::uniform({out, in}, rng, -bound, bound, true);
  if (bias) b = Tensor::zeros({out}, true);
}

void Linear::collect(const std::string& prefix, ParamMap& out) const {
  out.add(prefix + ".w", w);
  if (b.defined()) out.add(prefix + ".b", b);
}

Conv2d::Conv2d(int cin, int cout, int ksize, int stride_, int pad_,
               std::mt19937_64& rng)
    : stride(stride_), pad(pad_) {
  // He initialization for ReLU nets
  const double std = std::sqrt(2.0 / (cin * ksize * ksize));
  w = Tensor::randn({cout, cin, ksize, ksize}, rng, std, true);
  b = Tensor::zeros({cout}, true);
}

void Conv2d::collect(const std::string& prefix, ParamMap& out) const {
  out.add(prefix + ".w", w);
  out.add(prefix + ".b", b);
}

LayerNorm::LayerNorm(int dim) {
  gamma = Tensor::full({dim}, 1.0, true);
  beta = Tensor::zeros({dim}, true);
}

void LayerNorm::collect(const std::string& prefix, ParamMap& out) const {
  out.add(prefix + ".gamma", gamma);
  out.add(prefix + ".beta", beta);
}

Embedding::Embedding(int vocab, int dim, std::mt19937_64& rng) {
  w = Tensor::randn({vocab, dim}, rng, 0.02, true);
}

void Embedding::collect(const std::string& prefix, ParamMap& out) const {
  out.add(prefix + ".w", w);
}

SGD::SGD(std::vector<Tensor> params, double lr, double momentum, double weight_decay)
    : params_(std::move(params)), lr_(lr), momentum_(momentum),
      weight_decay_(weight_decay) {
  for (auto& p : params_) velocity_.emplace_back(p.size(), 0.0);
}

void SGD::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& val = params_[i].data();
    auto& g = params_[i].grad();
    auto& v = velocity_[i];
    for (std::size_t j = 0; j < val.size(); ++j) {
      const double grad = g[j] + weight_decay_ * val[j];
      v[j] = momentum_ * v[j] + grad;
      val[j] -= lr_ * v[j];
    }
  }
}

void SGD::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

Adam::Adam(std::vector<Tensor> params, double lr, double beta1, double beta2,
           double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (auto& p : params_) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, t_);
  const double bc2 = 1.0 - std::pow(beta2_, t_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& val = params_[i].data();
    auto& g = params_[i].grad();
    for (std::size_t j = 0; j < val.size(); ++j) {
      m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
      v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j];
      val[j] -= lr_ * (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + eps_);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double step_decay_lr(double initial, double factor, int period, int epoch) {
  return initial * std::pow(factor, epoch / period);
}

}  // namespace icap::nn
