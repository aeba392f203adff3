#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "cksp/tape.hpp"
#include "cksp/tensor.hpp"

namespace cksp {

struct GradCheckFailure {
  std::string tensor;  // parameter label, or empty for single-point checks
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::vector<GradCheckFailure> failures;

  bool passed() const { return failures.empty(); }
};

/// Relative error with a floor on the denominator so that pairs of
/// near-zero gradients compare on an absolute scale.
inline double gradient_rel_error(double analytic, double numeric, double floor = 1e-6) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace detail {

inline void grad_check_record(GradCheckReport& report, const std::string& label, std::size_t index, double analytic,
                              double numeric, double tol) {
  const double rel = gradient_rel_error(analytic, numeric);
  ++report.checked;
  report.max_rel_error = std::max(report.max_rel_error, rel);
  report.max_abs_error = std::max(report.max_abs_error, std::abs(analytic - numeric));
  if (!(rel < tol)) report.failures.push_back({label, index, analytic, numeric, rel});
}

}  // namespace detail

using ScalarFunction = std::function<Var(Tape&, const Var&)>;

/// Compare the tape gradient of a scalar function at `point` against
/// central differences with the given step.
inline GradCheckReport grad_check(const ScalarFunction& f, const Tensor& point, double step = 1e-5, double tol = 1e-4) {
  std::vector<double> analytic;
  {
    Tape tape;
    Var x = tape.variable(point);
    Var y = f(tape, x);
    tape.backward(y);
    auto g = x.grad();
    analytic.assign(g.begin(), g.end());
  }
  auto eval = [&](const Tensor& at) {
    Tape tape;
    Var x = tape.constant(at);
    return f(tape, x).value().item();
  };
  GradCheckReport report;
  Tensor probe = point;
  for (std::size_t i = 0; i < point.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = eval(probe);
    probe[i] = orig - step;
    const double down = eval(probe);
    probe[i] = orig;
    detail::grad_check_record(report, "", i, analytic[i], (up - down) / (2.0 * step), tol);
  }
  return report;
}

struct NamedParam {
  std::string name;
  Tensor* tensor;
};

/// Check gradients of a loss with respect to a set of parameter tensors.
/// `loss_fn` must build the loss on the provided tape from the current
/// parameter values (via Tape::leaf). Parameter grads are zeroed first and
/// hold the analytic gradient afterwards.
inline GradCheckReport grad_check_params(const std::function<Var(Tape&)>& loss_fn, const std::vector<NamedParam>& params,
                                         double step = 1e-5, double tol = 1e-4) {
  for (const auto& p : params) {
    p.tensor->set_requires_grad(true);
    p.tensor->zero_grad();
  }
  {
    Tape tape;
    Var loss = loss_fn(tape);
    tape.backward(loss);
  }
  auto eval = [&] {
    Tape tape;
    return loss_fn(tape).value().item();
  };
  GradCheckReport report;
  for (const auto& p : params) {
    Tensor& t = *p.tensor;
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double orig = t[i];
      t[i] = orig + step;
      const double up = eval();
      t[i] = orig - step;
      const double down = eval();
      t[i] = orig;
      detail::grad_check_record(report, p.name, i, t.grad()[i], (up - down) / (2.0 * step), tol);
    }
  }
  return report;
}

}  // namespace cksp
