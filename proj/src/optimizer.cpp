#include "questmf/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace questmf {

AdamW::AdamW(AdamWConfig cfg, std::vector<Tensor*> params)
    : cfg_(cfg), params_(std::move(params)) {
  if (cfg_.lr < 0.0 || cfg_.beta1 < 0.0 || cfg_.beta1 >= 1.0 || cfg_.beta2 < 0.0 ||
      cfg_.beta2 >= 1.0 || cfg_.eps <= 0.0 || cfg_.weight_decay < 0.0)
    throw std::invalid_argument("adamw: hyperparameters out of range");
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (Tensor* p : params_) {
    m_.emplace_back(p->shape());
    v_.emplace_back(p->shape());
  }
}

void AdamW::step(const std::vector<const Tensor*>& grads) {
  if (grads.size() != params_.size())
    throw std::invalid_argument("adamw: gradient list does not match parameter list");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const double decay = 1.0 - cfg_.lr * cfg_.weight_decay;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = *params_[k];
    const Tensor& g = *grads[k];
    if (!p.same_shape(g)) throw std::invalid_argument("adamw: gradient shape mismatch");
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g.at(i);
      m.at(i) = cfg_.beta1 * m.at(i) + (1.0 - cfg_.beta1) * gi;
      v.at(i) = cfg_.beta2 * v.at(i) + (1.0 - cfg_.beta2) * gi * gi;
      const double m_hat = m.at(i) / bc1;
      const double v_hat = v.at(i) / bc2;
      p.at(i) = p.at(i) * decay - cfg_.lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
    }
  }
}

}  // namespace questmf
