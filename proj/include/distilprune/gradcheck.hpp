// Copyright 2026 The distilprune Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "distilprune/autograd.hpp"

namespace distilprune {

struct GradCheckReport {
  std::vector<double> analytic;
  std::vector<double> numeric;
  double max_abs_error = 0.0;
  double max_rel_error = 0.0;
  bool non_finite = false;
};

/// Relative error with a floor on the denominator so that gradients that are
/// zero on both sides do not blow up the ratio.
inline double relative_error(double analytic, double numeric,
                             double floor = 1e-6) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace detail {
inline void finish_report(GradCheckReport& r) {
  for (std::size_t i = 0; i < r.analytic.size(); ++i) {
    const double a = r.analytic[i];
    const double n = r.numeric[i];
    if (!std::isfinite(a) || !std::isfinite(n)) {
      r.non_finite = true;
      continue;
    }
    r.max_abs_error = std::max(r.max_abs_error, std::abs(a - n));
    r.max_rel_error = std::max(r.max_rel_error, relative_error(a, n));
  }
}
}  // namespace detail

/// Compares d f / d x from the tape with central differences of step `eps`.
/// `f` must rebuild its graph from scratch on the tape it is given and be
/// deterministic (stochastic pieces use frozen noise).
using GraphBuilder =
    std::function<Var<double>(Tape<double>&, Var<double>)>;

inline GradCheckReport check_gradients(const GraphBuilder& f,
                                       const Tensor<double>& x,
                                       double eps = 1e-5) {
  GradCheckReport r;
  {
    Tape<double> tape(false);
    Var<double> xv = tape.leaf(x, true);
    Var<double> loss = f(tape, xv);
    tape.backward(loss);
    r.analytic = tape.grad(xv).data;
  }
  auto eval = [&](const Tensor<double>& point) {
    Tape<double> tape(false);
    return f(tape, tape.constant(point)).item();
  };
  r.numeric.resize(x.size());
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + eps;
    const double up = eval(probe);
    probe[i] = x[i] - eps;
    const double down = eval(probe);
    probe[i] = x[i];
    r.numeric[i] = (up - down) / (2.0 * eps);
  }
  detail::finish_report(r);
  return r;
}

/// Same check for a parameter consumed through Tape::param(). `build` records
/// the full scalar objective on the given tape.
inline GradCheckReport check_parameter_gradients(
    const std::function<Var<double>(Tape<double>&)>& build,
    Parameter<double>& p, double eps = 1e-5) {
  GradCheckReport r;
  p.zero_grad();
  {
    Tape<double> tape(false);
    tape.backward(build(tape));
  }
  r.analytic = p.grad.data;
  auto eval = [&] {
    Tape<double> tape(false);
    return build(tape).item();
  };
  r.numeric.resize(p.value.size());
  for (std::size_t i = 0; i < p.value.size(); ++i) {
    const double orig = p.value[i];
    p.value[i] = orig + eps;
    const double up = eval();
    p.value[i] = orig - eps;
    const double down = eval();
    p.value[i] = orig;
    r.numeric[i] = (up - down) / (2.0 * eps);
  }
  detail::finish_report(r);
  return r;
}

}  // namespace distilprune
