// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference gradient checks shared by the unit tests and the
// acceptance binary.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "s2meta/autodiff.hpp"

namespace s2meta::testing {

/// Builds a scalar on `tape` from one leaf per input tensor.
using ScalarFn = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

struct GradCheck {
  double worst_rel = 0.0;  // over entries with max(|analytic|, |numeric|) > floor
  double worst_abs = 0.0;  // over the remaining entries
  std::size_t checked = 0;
  std::string where;       // entry with the worst relative error
};

inline double eval_scalar(const ScalarFn& f, const std::vector<ad::Tensor>& inputs) {
  ad::Tape tape;
  std::vector<ad::Var> leaves;
  for (const ad::Tensor& t : inputs) leaves.push_back(tape.leaf(t));
  return f(tape, leaves).value().item();
}

/// Compares reverse-mode gradients with central differences of step h.
inline GradCheck check_gradients(const ScalarFn& f, const std::vector<ad::Tensor>& inputs,
                                 double h = 1e-5, double floor = 1e-6) {
  std::vector<ad::Tensor> analytic;
  {
    ad::Tape tape;
    std::vector<ad::Var> leaves;
    for (const ad::Tensor& t : inputs) leaves.push_back(tape.leaf(t));
    const ad::Gradients g = tape.backward(f(tape, leaves));
    for (const ad::Var& v : leaves) analytic.push_back(g.wrt(v));
  }
  GradCheck out;
  std::vector<ad::Tensor> x = inputs;
  for (std::size_t k = 0; k < x.size(); ++k) {
    for (std::size_t i = 0; i < x[k].size(); ++i) {
      const double x0 = x[k].values[i];
      x[k].values[i] = x0 + h;
      const double up = eval_scalar(f, x);
      x[k].values[i] = x0 - h;
      const double down = eval_scalar(f, x);
      x[k].values[i] = x0;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k].values[i];
      const double mag = std::max(std::abs(a), std::abs(numeric));
      const double err = std::abs(a - numeric);
      ++out.checked;
      if (mag > floor) {
        if (err / mag > out.worst_rel) {
          out.worst_rel = err / mag;
          out.where = "input " + std::to_string(k) + " entry " + std::to_string(i) +
                      " analytic " + std::to_string(a) + " numeric " + std::to_string(numeric);
        }
      } else {
        out.worst_abs = std::max(out.worst_abs, err);
      }
    }
  }
  return out;
}

/// Reduces any tensor to a scalar with fixed random weights, so every output
/// entry contributes a distinct coefficient.
inline ad::Var weighted_sum(ad::Tape& tape, const ad::Var& v, const ad::Tensor& weights) {
  return ad::sum(ad::elementwise_mul(v, tape.constant(weights)));
}

}  // namespace s2meta::testing
