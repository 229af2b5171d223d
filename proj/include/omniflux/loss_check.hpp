#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "omniflux/grad_check.hpp"
#include "omniflux/model.hpp"

namespace omniflux {

// Names accepted by check_loss_gradients besides "all".
inline constexpr const char* kCheckedLosses[] = {"mlm", "mim-fr", "mim-kl", "itc", "itm", "omni"};

struct LossCheckConfig {
  ModelConfig model;
  std::size_t batch_size = 8;
  std::size_t entries_per_tensor = 3;
  double eps = 1e-4;
  double tolerance = 1e-3;
  std::uint64_t seed = 0;
};

struct LossCheckResult {
  std::string loss;
  GradCheckResult result;
  std::string worst_parameter;
  double seconds = 0.0;
  bool passed = false;
};

/// Finite-difference check of one loss (or "all") through the full model
/// on an in-memory batch drawn from the corpus distribution. Unknown names
/// are a ConfigError.
std::vector<LossCheckResult> check_loss_gradients(const std::string& which, const LossCheckConfig& config);

}  // namespace omniflux
