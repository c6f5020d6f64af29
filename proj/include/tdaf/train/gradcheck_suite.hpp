#pragma once

#include <string>
#include <vector>

namespace tdaf {

struct GradSuiteBlock {
  std::string name;
  double rel_err = 0;
  double tolerance = 0;
  std::int64_t probes = 0;
  bool pass = false;
  std::string failure;
};

struct GradSuiteReport {
  std::vector<GradSuiteBlock> blocks;
  bool pass = false;
  double worst_rel_err = 0;
};

/// Double-precision central-difference checks for every op and the composed
/// model (two stages, two flows, 32 channels). `filter` limits the run to
/// blocks whose name contains any of the given substrings; empty runs all.
GradSuiteReport run_gradient_suite(const std::vector<std::string>& filter = {});

}  // namespace tdaf
