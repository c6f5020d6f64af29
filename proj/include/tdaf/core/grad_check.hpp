#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "tdaf/core/parameter.hpp"
#include "tdaf/core/tape.hpp"

namespace tdaf {

struct GradCheckOptions {
  double h_scale = 1e-4;        // step is h_scale * max(1, |w_i|)
  double tolerance = 1e-6;
  int max_probes_per_block = 0;  // 0 = probe every coordinate
  std::uint64_t seed = 0;        // probe-subset selection
};

struct GradCheckBlock {
  std::string name;
  double rel_err = 0.0;
  std::int64_t probes = 0;
};

struct GradCheckReport {
  std::vector<GradCheckBlock> blocks;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  std::string failure;  // non-empty on non-finite probe values etc.
};

/// Central-difference check of analytic gradients, in double precision.
/// `loss_fn(tape)` must rebuild the same forward pass each call; it is called
/// once with a tape for the analytic sweep and twice per probed coordinate
/// without one. Per-block relative error is ||a-f||_2 / max(||a||_2, ||f||_2),
/// falling back to the absolute difference when both norms are ~0.
inline GradCheckReport grad_check(
    const std::function<TensorPtr<double>(Tape<double>*)>& loss_fn,
    const std::vector<Parameter<double>>& blocks, const GradCheckOptions& opt = {}) {
  GradCheckReport report;
  report.tolerance = opt.tolerance;

  Tape<double> tape;
  auto loss = loss_fn(&tape);
  if (!std::isfinite(loss->values[0])) {
    report.failure = "non-finite loss in unperturbed forward";
    return report;
  }
  tape.backward(loss);

  std::vector<ArrayX<double>> analytic;
  analytic.reserve(blocks.size());
  for (const auto& b : blocks) {
    b.tensor->ensure_grad();
    analytic.push_back(b.tensor->grad);
  }
  for (const auto& b : blocks) b.tensor->clear_grad();

  for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
    const auto& block = blocks[bi];
    auto& w = block.tensor->values;
    const std::int64_t n = w.size();

    std::vector<std::int64_t> probe_idx;
    if (opt.max_probes_per_block > 0 && n > opt.max_probes_per_block) {
      Rng rng = Rng::stream(opt.seed, "gradcheck." + block.name);
      std::vector<std::int64_t> all(n);
      for (std::int64_t i = 0; i < n; ++i) all[i] = i;
      rng.shuffle(all);
      probe_idx.assign(all.begin(), all.begin() + opt.max_probes_per_block);
    } else {
      probe_idx.resize(n);
      for (std::int64_t i = 0; i < n; ++i) probe_idx[i] = i;
    }

    double a2 = 0.0, f2 = 0.0, d2 = 0.0;
    for (std::int64_t i : probe_idx) {
      const double orig = w[i];
      const double h = opt.h_scale * std::max(1.0, std::abs(orig));
      w[i] = orig + h;
      const double lp = loss_fn(nullptr)->values[0];
      w[i] = orig - h;
      const double lm = loss_fn(nullptr)->values[0];
      w[i] = orig;
      if (!std::isfinite(lp) || !std::isfinite(lm)) {
        report.failure = "non-finite value while probing " + block.name + "[" +
                         std::to_string(i) + "]";
        return report;
      }
      const double fd = (lp - lm) / (2.0 * h);
      const double an = analytic[bi][i];
      a2 += an * an;
      f2 += fd * fd;
      d2 += (an - fd) * (an - fd);
    }
    const double denom = std::max(std::sqrt(a2), std::sqrt(f2));
    GradCheckBlock out;
    out.name = block.name;
    out.probes = std::int64_t(probe_idx.size());
    out.rel_err = denom > 1e-7 ? std::sqrt(d2) / denom : std::sqrt(d2);
    report.blocks.push_back(out);
    report.max_rel_err = std::max(report.max_rel_err, out.rel_err);
  }
  report.pass = report.failure.empty() && report.max_rel_err < opt.tolerance;
  return report;
}

}  // namespace tdaf
