#pragma once

// Central finite-difference gradient oracle, independent of the tape: it
// only perturbs raw parameter data and re-runs the supplied forward closure.

#include <cmath>
#include <functional>
#include <string>

#include "seqattr/tensor.hpp"

namespace seqattr::testing {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  int64_t worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
  int64_t checked = 0;
};

// forward() must rebuild the loss from current parameter values each call.
inline GradCheckReport gradient_check(ParamStore& params,
                                      const std::function<double()>& forward,
                                      const std::function<Tensor()>& make_loss,
                                      double h = 1e-4) {
  params.zero_grad();
  Tensor loss = make_loss();
  backward(loss);

  GradCheckReport rep;
  for (size_t p = 0; p < params.count(); ++p) {
    Tensor& t = params.tensor(p);
    auto& data = t.data();
    const auto& grad = t.grad();
    for (size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = forward();
      data[i] = saved - h;
      const double down = forward();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = grad[i];
      const double denom =
          std::max({std::fabs(analytic), std::fabs(numeric), 1e-6});
      const double rel = std::fabs(analytic - numeric) / denom;
      ++rep.checked;
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_param = params.name(p);
        rep.worst_index = static_cast<int64_t>(i);
        rep.analytic = analytic;
        rep.numeric = numeric;
      }
    }
  }
  return rep;
}

}  // namespace seqattr::testing
