#pragma once

#include <functional>
#include <span>

#include "questmf/autodiff.hpp"

namespace questmf {

// Compares reverse-mode gradients against central differences.
//
// `forward` must build a scalar loss on the tape it is given, lifting each
// tensor in `params` as a trainable leaf (by address), and must be
// deterministic across calls: fixed data, eval-mode layers, no fresh
// randomness. Elements are perturbed in place by +/- eps.
//
// Returns max over elements of |analytic - central| / max(1, |central|).
double grad_check(std::span<Tensor* const> params,
                  const std::function<Value(Tape&)>& forward, double eps = 1e-6);

}  // namespace questmf
