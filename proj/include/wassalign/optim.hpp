#pragma once

#include <cstdint>
#include <vector>

#include "wassalign/tape.hpp"
#include "wassalign/tensor.hpp"

namespace wassalign {

enum class OptimKind { Sgd, Adam };

struct OptimConfig {
  OptimKind kind = OptimKind::Adam;
  double lr = 1e-3;
  double momentum = 0.0;  // SGD only
  double beta1 = 0.9;     // Adam first-moment decay
  double beta2 = 0.999;   // Adam second-moment decay
  double eps = 1e-8;      // Adam denominator guard

  bool operator==(const OptimConfig&) const = default;
};

// First-order optimizer over a fixed parameter list. State buffers are kept
// in float64 regardless of the parameter dtype; updates are computed in
// double and cast on write-back.
class Optimizer {
 public:
  Optimizer(OptimConfig cfg, std::vector<Parameter*> params);

  // Applies one update from the gradients currently stored on the
  // parameters. A non-finite gradient entry raises NumericError naming the
  // offending parameter.
  void step();

  void zero_grad();
  std::int64_t steps() const { return steps_; }
  const OptimConfig& config() const { return cfg_; }

 private:
  OptimConfig cfg_;
  std::vector<Parameter*> params_;
  std::vector<Tensor> m_;  // SGD velocity / Adam first moment
  std::vector<Tensor> v_;  // Adam second moment
  std::int64_t steps_ = 0;
};

}  // namespace wassalign
