#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "omniflux/tensor.hpp"

namespace omniflux {

// Builds a fresh graph and returns a scalar loss. Must be deterministic:
// any randomness inside has to be reseeded on every call.
using LossFn = std::function<Tensor(Graph&)>;

struct GradCheckOptions {
  double eps = 1e-4;
  // Entries checked per parameter tensor; 0 checks every entry. When
  // sampling, the largest-|analytic| entries are always included.
  std::size_t max_entries_per_tensor = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  // max |analytic - numeric| / max(1, |numeric|)
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  std::size_t entries_checked = 0;
};

/// Compares reverse-mode gradients of `fn` against central differences.
/// Parameter gradients are reset before and after the check.
GradCheckResult grad_check(const LossFn& fn, std::vector<Tensor> params, const GradCheckOptions& options = {});

}  // namespace omniflux
