#pragma once

#include "tdaf/core/parameter.hpp"

namespace tdaf {

/// Classic momentum SGD: v <- m*v + g + wd*w; w <- w - lr*v. Parameters whose
/// grad was never populated by the sweep (unreachable from the loss) are left
/// untouched. Calling step with no populated grads at all is an error.
template <typename Scalar>
class SgdOptimizer {
 public:
  explicit SgdOptimizer(const ParameterStore<Scalar>& params) {
    velocity_.reserve(params.items().size());
    for (const auto& p : params.items())
      velocity_.push_back(ArrayX<Scalar>::Zero(p.tensor->values.size()));
  }

  void step(ParameterStore<Scalar>& params, Scalar lr, Scalar momentum, Scalar weight_decay) {
    bool any = false;
    for (const auto& p : params.items())
      if (p.tensor->has_grad()) {
        any = true;
        break;
      }
    require(any, "SgdOptimizer::step: no parameter has a gradient (update before backward?)");
    for (std::size_t i = 0; i < params.items().size(); ++i) {
      auto& t = *params.items()[i].tensor;
      if (!t.has_grad()) continue;
      velocity_[i] = momentum * velocity_[i] + t.grad + weight_decay * t.values;
      t.values -= lr * velocity_[i];
      t.clear_grad();
    }
  }

 private:
  std::vector<ArrayX<Scalar>> velocity_;
};

}  // namespace tdaf
