#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "tdaf/core/rng.hpp"
#include "tdaf/core/tensor.hpp"

namespace tdaf {

/// A named learnable tensor. Shared parameters (weights reused across flows
/// or recursive steps) are registered exactly once and referenced from every
/// use site.
template <typename Scalar>
struct Parameter {
  std::string name;
  TensorPtr<Scalar> tensor;
};

template <typename Scalar>
class ParameterStore {
 public:
  TensorPtr<Scalar> add(const std::string& name, Shape shape) {
    require(index_.find(name) == index_.end(), "ParameterStore: duplicate parameter name '",
            name, "'");
    auto t = make_tensor<Scalar>(shape, Scalar(0), /*requires_grad=*/true);
    index_[name] = params_.size();
    params_.push_back({name, t});
    return t;
  }

  const std::vector<Parameter<Scalar>>& items() const { return params_; }
  std::vector<Parameter<Scalar>>& items() { return params_; }

  TensorPtr<Scalar> find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].tensor;
  }

  std::int64_t total_count() const {
    std::int64_t total = 0;
    for (const auto& p : params_) total += p.tensor->shape.numel();
    return total;
  }

  void clear_grads() {
    for (auto& p : params_) p.tensor->clear_grad();
  }

 private:
  std::vector<Parameter<Scalar>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Fan-in-scaled normal init: w ~ N(0, 2 / fan_in). Each parameter draws
/// from its own (seed, name) stream, so values do not depend on the order
/// parameters are created in — models that share a subset of parameter names
/// initialize that subset identically.
template <typename Scalar>
void init_kaiming(const TensorPtr<Scalar>& w, std::int64_t fan_in, std::uint64_t seed,
                  const std::string& name) {
  Rng rng = Rng::stream(seed, name);
  const double stddev = std::sqrt(2.0 / double(fan_in));
  for (std::int64_t i = 0; i < w->values.size(); ++i)
    w->values[i] = Scalar(rng.normal() * stddev);
}

template <typename Scalar>
void init_constant(const TensorPtr<Scalar>& w, Scalar value) {
  w->values.setConstant(value);
}

}  // namespace tdaf
