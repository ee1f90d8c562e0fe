#include "wassalign/optim.hpp"

#include <cmath>
#include <string>

#include "wassalign/common.hpp"

namespace wassalign {

Optimizer::Optimizer(OptimConfig cfg, std::vector<Parameter*> params)
    : cfg_(cfg), params_(std::move(params)) {
  if (!(cfg_.lr > 0.0)) throw ValueError("optimizer: learning rate must be positive");
  if (cfg_.momentum < 0.0 || cfg_.momentum >= 1.0)
    throw ValueError("optimizer: momentum must lie in [0, 1)");
  if (cfg_.beta1 < 0.0 || cfg_.beta1 >= 1.0 || cfg_.beta2 < 0.0 || cfg_.beta2 >= 1.0)
    throw ValueError("optimizer: betas must lie in [0, 1)");
  if (!(cfg_.eps > 0.0)) throw ValueError("optimizer: eps must be positive");
  for (const Parameter* p : params_) {
    if (p == nullptr) throw ValueError("optimizer: null parameter");
    m_.push_back(Tensor::zeros(p->value.shape(), DType::Float64));
    if (cfg_.kind == OptimKind::Adam)
      v_.push_back(Tensor::zeros(p->value.shape(), DType::Float64));
  }
}

void Optimizer::step() {
  ++steps_;
  const double bias1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
  const double bias2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
  for (std::size_t pi = 0; pi < params_.size(); ++pi) {
    Parameter& p = *params_[pi];
    if (!p.grad.same_shape(p.value))
      throw ShapeError("optimizer: gradient shape mismatch for '" + p.name + "'");
    if (!p.grad.all_finite())
      throw NumericError("optimizer: non-finite gradient for parameter '" + p.name + "'");
    const std::int64_t n = p.value.numel();
    auto mom = m_[pi].data<double>();
    for (std::int64_t i = 0; i < n; ++i) {
      const double g = p.grad.at(i);
      double delta = 0.0;
      if (cfg_.kind == OptimKind::Sgd) {
        mom[static_cast<std::size_t>(i)] = cfg_.momentum * mom[static_cast<std::size_t>(i)] + g;
        delta = cfg_.lr * mom[static_cast<std::size_t>(i)];
      } else {
        auto sq = v_[pi].data<double>();
        mom[static_cast<std::size_t>(i)] =
            cfg_.beta1 * mom[static_cast<std::size_t>(i)] + (1.0 - cfg_.beta1) * g;
        sq[static_cast<std::size_t>(i)] =
            cfg_.beta2 * sq[static_cast<std::size_t>(i)] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = mom[static_cast<std::size_t>(i)] / bias1;
        const double vhat = sq[static_cast<std::size_t>(i)] / bias2;
        delta = cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
      p.value.set(i, p.value.at(i) - delta);
    }
  }
}

void Optimizer::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

}  // namespace wassalign
