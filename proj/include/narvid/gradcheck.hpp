#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "narvid/tensor.hpp"

namespace narvid {

struct GradCheckReport {
  std::vector<double> per_tensor;  // max relative error for each parameter tensor
  double max_rel_error = 0.0;
};

// Relative error with an absolute floor so gradients that are zero in exact
// arithmetic do not divide by round-off.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

// Compares analytic gradients of `loss_fn` w.r.t. `params` against central
// differences (f(p+h) - f(p-h)) / 2h, element by element. `loss_fn` must build
// a fresh graph on each call. Parameter gradients are reset before and after.
inline GradCheckReport finite_diff_check(const std::function<Tensor()>& loss_fn,
                                         std::vector<Tensor> params, double h,
                                         double floor = 1e-6) {
  for (auto& p : params) p.zero_grad();
  backward(loss_fn());
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.grad());

  GradCheckReport report;
  NoGradGuard no_grad;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto& values = params[t].mutable_data();
    double worst = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + h;
      const double up = loss_fn().item();
      values[i] = orig - h;
      const double down = loss_fn().item();
      values[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      worst = std::max(worst, relative_error(analytic[t][i], numeric, floor));
    }
    report.per_tensor.push_back(worst);
    report.max_rel_error = std::max(report.max_rel_error, worst);
  }
  for (auto& p : params) p.zero_grad();
  return report;
}

}  // namespace narvid
