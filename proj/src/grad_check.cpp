#include "questmf/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace questmf {

double grad_check(std::span<Tensor* const> params,
                  const std::function<Value(Tape&)>& forward, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("grad_check: eps must be positive");

  Tape tape;
  Value loss = forward(tape);
  GradientMap grads = reverse_sweep(tape, loss);

  const auto eval = [&forward]() {
    Tape t;
    return forward(t).item();
  };

  double worst = 0.0;
  for (Tensor* p : params) {
    const Tensor& analytic = grads.at_storage(p);
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double saved = p->at(i);
      p->at(i) = saved + eps;
      const double up = eval();
      p->at(i) = saved - eps;
      const double down = eval();
      p->at(i) = saved;
      const double central = (up - down) / (2.0 * eps);
      const double err = std::abs(analytic.at(i) - central) / std::max(1.0, std::abs(central));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace questmf
