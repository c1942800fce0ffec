#pragma once

#include <functional>
#include <vector>

#include "tulip/autograd.hpp"

namespace tulip {

struct GradCheckReport {
  Tensor<double> analytic;
  Tensor<double> numeric;
  std::vector<double> rel_errors;
  double max_rel_error = 0.0;
  bool passed = false;
};

using ScalarFunction = std::function<Var<double>(Tape<double>&, Var<double>)>;

// Compares the tape gradient of a scalar function against central
// differences with step h. Per-element error is
// |analytic - numeric| / max(|analytic|, |numeric|, abs_floor).
GradCheckReport grad_check(const ScalarFunction& f, const Tensor<double>& x, double h, double tol,
                           double abs_floor = 1e-6);

}  // namespace tulip
