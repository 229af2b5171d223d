#include "omniflux/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "omniflux/errors.hpp"

namespace omniflux {

std::size_t mask_count(double ratio, std::size_t length) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ContractError("mask ratio must lie in [0, 1]");
  if (ratio == 0.0 || length == 0) return 0;
  const auto n = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(length)));
  return std::clamp<std::size_t>(n, 1, length);
}

std::vector<std::size_t> sample_mask_indices(std::size_t length, double ratio, Rng& rng) {
  const std::size_t n = mask_count(ratio, length);
  std::vector<std::size_t> pool(length);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  // Partial Fisher-Yates: the first n slots are a uniform n-subset.
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + uniform_index(rng, length - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(n);
  std::sort(pool.begin(), pool.end());
  return pool;
}

MaskedText mask_text(const TokenIds& tokens, double ratio, Rng& rng) {
  MaskedText out;
  out.tokens = tokens;
  out.plan.ratio = ratio;
  out.plan.domain = MaskDomain::Text;
  out.plan.indices = sample_mask_indices(tokens.size(), ratio, rng);
  for (auto i : out.plan.indices) {
    out.targets.push_back(tokens[i]);
    out.tokens[i] = kMaskToken;
  }
  return out;
}

MaskedImage mask_image(std::span<const double> pixels, const ModelConfig& config, double ratio, Rng& rng) {
  if (pixels.size() != config.pixel_count()) {
    throw ConfigError("mask_image: expected " + std::to_string(config.pixel_count()) + " pixels, got " +
                      std::to_string(pixels.size()));
  }
  MaskedImage out;
  out.pixels.assign(pixels.begin(), pixels.end());
  out.plan.ratio = ratio;
  out.plan.domain = MaskDomain::Image;
  out.plan.indices = sample_mask_indices(config.num_patches(), ratio, rng);

  const std::size_t side = config.image_side, ps = config.image_patch_size, per_side = config.patches_per_side();
  for (auto p : out.plan.indices) {
    const std::size_t r0 = (p / per_side) * ps, c0 = (p % per_side) * ps;
    for (std::size_t y = 0; y < ps; ++y) {
      std::fill_n(out.pixels.begin() + static_cast<std::ptrdiff_t>((r0 + y) * side + c0), ps, kGreyPixel);
    }
  }
  return out;
}

}  // namespace omniflux
