#include "tulip/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "tulip/error.hpp"

namespace tulip {

namespace {
double evaluate(const ScalarFunction& f, const Tensor<double>& x) {
  Tape<double> tape(false);
  const Var<double> out = f(tape, tape.constant(x));
  return out.value().item();
}
}  // namespace

GradCheckReport grad_check(const ScalarFunction& f, const Tensor<double>& x, double h, double tol,
                           double abs_floor) {
  require(h > 0.0, Errc::kInvalidArgument, "finite-difference step must be positive");
  GradCheckReport report;
  {
    Tape<double> tape;
    const Var<double> in = tape.input(x);
    const Var<double> out = f(tape, in);
    tape.backward(out);
    report.analytic = tape.grad(in).empty() ? Tensor<double>(x.shape()) : tape.grad(in);
  }
  report.numeric = Tensor<double>(x.shape());
  report.rel_errors.resize(x.size());
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = evaluate(f, probe);
    probe[i] = orig - h;
    const double down = evaluate(f, probe);
    probe[i] = orig;
    report.numeric[i] = (up - down) / (2.0 * h);
    const double a = report.analytic[i];
    const double n = report.numeric[i];
    const double denom = std::max({std::abs(a), std::abs(n), abs_floor});
    report.rel_errors[i] = std::abs(a - n) / denom;
    report.max_rel_error = std::max(report.max_rel_error, report.rel_errors[i]);
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

}  // namespace tulip
