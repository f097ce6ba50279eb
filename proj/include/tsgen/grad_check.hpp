#pragma once

#include <functional>
#include <limits>
#include <vector>

#include "tsgen/tape.hpp"

namespace tsgen {

// Central-finite-difference validation of the recorded-graph gradients.
// `build` constructs the scalar loss on a fresh tape from the current
// parameter values. Returns the max over all parameter elements of
//   |analytic - fd| / (|analytic| + |fd| + eps)
// Intended for double precision; float loses too many digits to the stencil.
template <typename T, typename BuildFn>
double grad_check(BuildFn build, const std::vector<Tensor<T>*>& params, double fd_step = 1e-5) {
  // analytic pass
  std::vector<Tensor<T>> analytic;
  {
    Tape<T> tape(/*grad_enabled=*/true);
    Var loss = build(tape);
    tape.backward(loss);
    for (Tensor<T>* p : params) {
      const Tensor<T>* g = tape.param_grad(*p);
      analytic.push_back(g ? *g : Tensor<T>::zeros(p->shape));
    }
  }

  auto eval = [&]() -> double {
    Tape<T> tape(/*grad_enabled=*/false);
    Var loss = build(tape);
    return static_cast<double>(tape.val(loss).data[0]);
  };

  double max_rel = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<T>& p = *params[pi];
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const T saved = p.data[i];
      p.data[i] = saved + static_cast<T>(fd_step);
      const double up = eval();
      p.data[i] = saved - static_cast<T>(fd_step);
      const double down = eval();
      p.data[i] = saved;
      const double fd = (up - down) / (2.0 * fd_step);
      const double an = static_cast<double>(analytic[pi].data[i]);
      if (!std::isfinite(an) || !std::isfinite(fd))
        return std::numeric_limits<double>::infinity();
      const double rel = std::abs(an - fd) / (std::abs(an) + std::abs(fd) + 1e-10);
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace tsgen
