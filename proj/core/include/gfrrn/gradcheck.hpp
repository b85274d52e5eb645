#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gfrrn/autodiff.hpp"

namespace gfrrn {

struct GradCheckOptions {
  double step = 1e-5;
  /// Entries probed per tensor; 0 probes every entry.
  std::size_t samples_per_tensor = 0;
  /// Total entries probed across all tensors; 0 means no global cap.
  std::size_t total_samples = 0;
  /// Denominator floor. Central differences at step 1e-5 carry roundoff of
  /// roughly 1e-10 on O(10) losses, so gradients below this are compared
  /// in absolute terms instead.
  double abs_floor = 1e-5;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "name[index]" of the largest relative error
};

struct NamedVar {
  std::string name;
  Var var;
};

/// Compares analytic gradients of a scalar `loss` against central finite
/// differences, perturbing the values of each listed leaf in place.
/// rel = |analytic - numeric| / max(|analytic|, |numeric|, abs_floor).
GradCheckReport gradient_check(const std::function<Var()>& loss, const std::vector<NamedVar>& inputs,
                               const GradCheckOptions& options = {});

}  // namespace gfrrn
