#pragma once

#include <functional>
#include <limits>
#include <vector>

#include "tdaf/core/tensor.hpp"

namespace tdaf {

/// Record of one forward pass. Ops append a backward rule as they execute;
/// the backward sweep runs the rules in strict reverse append order, which
/// matches reverse topological order because append order equals execution
/// order. One tape per forward pass; cleared after the sweep.
template <typename Scalar>
class Tape {
 public:
  void record(std::function<void()> backward_rule) { nodes_.push_back(std::move(backward_rule)); }

  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }

  /// Seeds d(loss)/d(loss) = 1 and sweeps. Empty tape is a no-op.
  void backward(const TensorPtr<Scalar>& loss) {
    if (nodes_.empty()) return;
    require(loss->shape.numel() == 1, "backward: loss must be scalar, got ", loss->shape.str());
    loss->ensure_grad();
    loss->grad[0] = Scalar(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  void clear() {
    nodes_.clear();
    kink_margin = std::numeric_limits<double>::infinity();
  }

  /// Minimum distance of any relu input to 0 / any max-pool window to a tie,
  /// tracked when enabled. Finite-difference probes use it to confirm the
  /// perturbation cannot cross a non-differentiable point.
  bool track_kink_margin = false;
  double kink_margin = std::numeric_limits<double>::infinity();
  void note_kink_margin(double m) {
    if (m < kink_margin) kink_margin = m;
  }

 private:
  std::vector<std::function<void()>> nodes_;
};

}  // namespace tdaf
