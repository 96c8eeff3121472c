#pragma once

// Finite-difference verification of the tape's backward functions. Each case
// builds a small graph whose analytic gradient is exact for every perturbed
// scalar (in particular, nothing routes a checked parameter through the
// detached attention-score path), computes gradients once, then sweeps every
// trainable scalar with central differences.

#include <cstdint>
#include <string>
#include <vector>

namespace s2a {

struct GradCheckCase {
  std::string name;
  double max_rel_err = 0.0;
  int64_t scalars_checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckCase> cases;
  double worst() const;
  bool pass(double tol) const;
};

const std::vector<std::string>& gradcheck_targets();  // flag vocabulary incl. "all"

// target must come from gradcheck_targets(). "all" runs every case plus the
// model-level composites.
GradCheckReport run_gradcheck(const std::string& target, uint64_t seed);

}  // namespace s2a
