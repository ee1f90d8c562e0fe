#pragma once

#include <functional>
#include <string>
#include <vector>

#include "wassalign/tape.hpp"

namespace wassalign {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst;  // "param[i]: analytic=..., fd=..." for the largest error

  bool pass(double tol) const { return max_rel_err < tol; }
};

// Central finite differences over every entry of every parameter.
// `build` must reconstruct the scalar loss on the given tape from the
// current parameter values. Relative error uses
//   |fd - analytic| / max(|fd|, |analytic|, floor)
// so tiny gradients are compared absolutely against `floor`.
GradCheckResult check_gradients(const std::function<Var(Tape&)>& build,
                                const std::vector<Parameter*>& params, double h = 1e-6,
                                double floor = 1e-2);

}  // namespace wassalign
