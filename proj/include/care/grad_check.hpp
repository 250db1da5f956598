#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "care/tensor.hpp"

namespace care {

struct GradCheckResult {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::size_t checked = 0;
};

/// Relative error with a floor of 1e-3 on the denominator, so gradients that
/// are numerically zero are judged by absolute error instead of noise ratios.
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-3});
}

/// Compares backward() gradients of the scalar `f()` with respect to every
/// entry of `inputs` against central differences with step `h`. `f` must be
/// deterministic (freeze any sampling noise inside it).
inline GradCheckResult grad_check(const std::function<Tensor()>& f, std::span<Tensor> inputs, double h = 1e-5) {
  for (auto& t : inputs) t.zero_grad();
  const Tensor loss = f();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs) {
    analytic.emplace_back(t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                       : std::vector<double>(t.size(), 0.0));
  }

  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto values = inputs[k].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + h;
      const double up = f().item();
      values[i] = original - h;
      const double down = f().item();
      values[i] = original;
      const double numeric = (up - down) / (2 * h);
      result.max_relative_error = std::max(result.max_relative_error, relative_error(analytic[k][i], numeric));
      result.max_absolute_error = std::max(result.max_absolute_error, std::abs(analytic[k][i] - numeric));
      ++result.checked;
    }
  }
  for (auto& t : inputs) t.zero_grad();
  return result;
}

/// Single-input form: `f` maps the tensor to a scalar.
inline GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h = 1e-5) {
  Tensor inputs[] = {x};
  return grad_check([&] { return f(x); }, inputs, h);
}

}  // namespace care
