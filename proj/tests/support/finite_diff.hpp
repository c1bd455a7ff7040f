// Central finite-difference gradient oracle for the test suites. Recomputes
// the forward pass from scratch per probe, so it stays independent of the
// tape's backward path.
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "mole/tensor.hpp"

namespace mole::testing {

/// Loss value from a fresh non-recording forward pass.
inline double forward_value(const std::function<Tensor(Tape&)>& builder) {
  Tape tape;
  NoGradGuard guard(tape);
  return builder(tape).scalar_value();
}

/// d(loss)/d(param[index]) by central differences.
inline double central_difference(Tensor param, std::size_t index,
                                 const std::function<Tensor(Tape&)>& builder, double h = 1e-5) {
  double& slot = param.values()[index];
  const double saved = slot;
  slot = saved + h;
  const double up = forward_value(builder);
  slot = saved - h;
  const double down = forward_value(builder);
  slot = saved;
  return (up - down) / (2.0 * h);
}

/// |a - n| <= tol * max(1, |a|, |n|).
inline bool grad_close(double analytic, double numeric, double tol) {
  const double scale = std::max({1.0, std::abs(analytic), std::abs(numeric)});
  return std::abs(analytic - numeric) <= tol * scale;
}

struct GradCheckFailure {
  std::string what;
  bool ok = true;
};

/// Backpropagates `builder`'s loss once, then compares the analytic gradient
/// of every listed parameter against central differences. `stride` subsamples
/// coordinates (stride 1 checks all of them).
inline GradCheckFailure check_gradients(const std::vector<Tensor>& params,
                                        const std::function<Tensor(Tape&)>& builder,
                                        double tol = 1e-4, double h = 1e-5,
                                        std::size_t stride = 1) {
  for (const Tensor& p : params) {
    Tensor t = p;
    t.zero_grad();
  }
  Tape tape;
  Tensor loss = builder(tape);
  tape.backward(loss);

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor param = params[pi];
    for (std::size_t i = 0; i < param.size(); i += stride) {
      const double analytic = param.has_grad() ? param.grad()[i] : 0.0;
      const double numeric = central_difference(param, i, builder, h);
      if (!grad_close(analytic, numeric, tol)) {
        return {"param " + std::to_string(pi) + " coord " + std::to_string(i) + ": analytic " +
                    std::to_string(analytic) + " vs numeric " + std::to_string(numeric),
                false};
      }
    }
  }
  return {};
}

}  // namespace mole::testing
