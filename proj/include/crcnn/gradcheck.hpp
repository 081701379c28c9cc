#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace crcnn {

// Finite-difference audit of every backward rule. The numeric side uses
// forward evaluations only, so it stays independent of the gradient code it
// checks. Runs in 64-bit throughout; central differences at h = 1e-5 with
// relative error |a - n| / max(|a|, |n|, 1e-8).

struct GradCheckCase {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t checks = 0;
  // Deep-composition probes whose central difference failed its own h vs h/2
  // convergence test (a ReLU kink inside the window); no evidence either way.
  std::size_t skipped = 0;
};

struct GradCheckReport {
  std::vector<GradCheckCase> cases;
  double max_rel_err = 0.0;
  bool passed(double tolerance = 1e-4) const { return max_rel_err < tolerance; }
};

/// samples_per_tensor bounds the probed coordinates of each parameter tensor
/// in the full-cascade case (small op-level cases are probed exhaustively).
GradCheckReport run_gradient_checks(std::uint64_t seed, int samples_per_tensor = 4,
                                    int threads = 1);

}  // namespace crcnn
