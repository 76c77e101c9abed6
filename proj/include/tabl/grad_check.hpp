#pragma once

#include <functional>

#include "tabl/tensor.hpp"

namespace tabl {

// Largest relative error between reverse-mode gradients of a scalar function
// and central differences with step `eps`, over every coordinate of `x`.
// Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps
// coordinates whose true gradient is ~0 from dividing noise by noise.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double eps = 1e-5, double floor = 1e-3);

}  // namespace tabl
