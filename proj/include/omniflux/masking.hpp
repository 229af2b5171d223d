#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "omniflux/model.hpp"
#include "omniflux/random.hpp"

namespace omniflux {

inline constexpr double kTextMaskRatio = 0.15;
inline constexpr double kImageMaskRatio = 0.5;
inline constexpr double kGreyPixel = 0.5;

enum class MaskDomain { Text, Image };

/// Positions chosen for masking. Text indices address content tokens
/// (sequence position = index + 1, so [CLS] is never selected); image
/// indices address patches in row-major patch order.
struct MaskPlan {
  std::vector<std::size_t> indices;  // sorted, unique
  double ratio = 0.0;
  MaskDomain domain = MaskDomain::Text;

  bool empty() const { return indices.empty(); }
};

// max(1, round(ratio * length)) for ratio > 0 and length > 0, else 0.
std::size_t mask_count(double ratio, std::size_t length);

// Uniform sample of mask_count(ratio, length) distinct positions, sorted.
std::vector<std::size_t> sample_mask_indices(std::size_t length, double ratio, Rng& rng);

struct MaskedText {
  TokenIds tokens;   // corrupted copy
  TokenIds targets;  // original ids at plan.indices
  MaskPlan plan;
};

MaskedText mask_text(const TokenIds& tokens, double ratio, Rng& rng);

struct MaskedImage {
  std::vector<double> pixels;
  MaskPlan plan;
};

// pixels: image_side^2 values; selected patches become kGreyPixel.
MaskedImage mask_image(std::span<const double> pixels, const ModelConfig& config, double ratio, Rng& rng);

}  // namespace omniflux
