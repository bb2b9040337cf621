#pragma once

// Central-difference verification of reverse-mode gradients. Every autodiff
// op gets checked against this oracle before anything is built on top of it.

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "doctest.h"
#include "higru/tensor.hpp"

namespace higru::testing {

// `fn` must rebuild the same single-value loss from `params` on every call
// (fix random seeds inside fn if it draws any). For each parameter entry the
// analytic gradient is compared against (f(x+h) - f(x-h)) / 2h.
inline void check_gradients(std::vector<Tensor> params,
                            const std::function<Tensor()>& fn,
                            double step = 1e-5) {
  zero_grads(params);
  Tensor loss = fn();
  REQUIRE(loss.numel() == 1);
  backward(loss);

  auto eval = [&fn]() {
    NoGradGuard no_grad;
    return fn().value();
  };

  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& param = params[p];
    REQUIRE(param.requires_grad());
    std::vector<double> analytic =
        param.has_grad() ? param.grad()
                         : std::vector<double>(param.numel(), 0.0);
    for (std::size_t i = 0; i < param.numel(); ++i) {
      double saved = param.data()[i];
      param.data()[i] = saved + step;
      double up = eval();
      param.data()[i] = saved - step;
      double down = eval();
      param.data()[i] = saved;
      double numeric = (up - down) / (2.0 * step);
      double tol = std::max(1e-4 * std::abs(numeric), 1e-8);
      CAPTURE(p);
      CAPTURE(i);
      CAPTURE(analytic[i]);
      CAPTURE(numeric);
      CHECK(std::abs(analytic[i] - numeric) <= tol);
    }
  }
  zero_grads(params);
}

}  // namespace higru::testing
