#pragma once

#include <cstddef>
#include <vector>

#include "questmf/tensor.hpp"

namespace questmf {

struct AdamWConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Decoupled weight decay:
//   theta <- theta * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)
// Moments update before bias correction each step.
class AdamW {
 public:
  AdamW(AdamWConfig cfg, std::vector<Tensor*> params);

  // grads aligned index-for-index with the params this state was built on.
  void step(const std::vector<const Tensor*>& grads);

  std::size_t steps_taken() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }
  const Tensor& first_moment(std::size_t i) const { return m_[i]; }
  const Tensor& second_moment(std::size_t i) const { return v_[i]; }

 private:
  AdamWConfig cfg_;
  std::vector<Tensor*> params_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace questmf
