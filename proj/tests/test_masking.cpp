#include <doctest.h>

#include <array>
#include <cmath>

#include "omniflux/errors.hpp"
#include "omniflux/masking.hpp"

using namespace omniflux;

namespace {

TokenIds iota_tokens(std::size_t n) {
  TokenIds t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<TokenId>(kFirstContentToken + i);
  return t;
}

std::vector<double> ramp_image(const ModelConfig& c) {
  std::vector<double> px(c.pixel_count());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<double>(i % 97) / 97.0;
  return px;
}

}  // namespace

TEST_CASE("mask_text examples") {
  Rng rng(1);
  TokenIds tokens = iota_tokens(20);
  MaskedText m = mask_text(tokens, kTextMaskRatio, rng);
  CHECK(m.plan.indices.size() == 3);
  CHECK(m.tokens.size() == 20);
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(m.tokens[m.plan.indices[k]] == kMaskToken);
    CHECK(m.targets[k] == tokens[m.plan.indices[k]]);
  }
  std::size_t untouched = 0;
  for (std::size_t i = 0; i < 20; ++i) untouched += m.tokens[i] == tokens[i];
  CHECK(untouched == 17);

  MaskedText none = mask_text(tokens, 0.0, rng);
  CHECK(none.plan.empty());
  CHECK(none.tokens == tokens);

  MaskedText empty = mask_text({}, kTextMaskRatio, rng);
  CHECK(empty.plan.empty());

  Rng a(42), b(42);
  CHECK(mask_text(tokens, 0.15, a).plan.indices == mask_text(tokens, 0.15, b).plan.indices);
  CHECK_THROWS_AS(mask_text(tokens, 1.5, a), ContractError);
}

TEST_CASE("mask_image examples") {
  ModelConfig c;
  auto px = ramp_image(c);
  Rng rng(2);
  MaskedImage m = mask_image(px, c, kImageMaskRatio, rng);
  REQUIRE(m.plan.indices.size() == 8);
  CHECK(m.pixels.size() == px.size());

  std::array<bool, 16> masked{};
  for (auto p : m.plan.indices) masked[p] = true;
  for (std::size_t y = 0; y < 32; ++y) {
    for (std::size_t x = 0; x < 32; ++x) {
      const std::size_t patch = (y / 8) * 4 + x / 8;
      const double v = m.pixels[y * 32 + x];
      if (masked[patch]) {
        CHECK(v == kGreyPixel);
      } else {
        CHECK(v == px[y * 32 + x]);
      }
    }
  }

  MaskedImage all = mask_image(px, c, 1.0, rng);
  for (double v : all.pixels) CHECK(v == 0.5);
  CHECK_THROWS_AS(mask_image(std::vector<double>(10), c, 0.5, rng), ConfigError);
}

TEST_CASE("mask counts follow round(ratio * len) with a minimum of one") {
  Rng rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t len = 1 + uniform_index(rng, 64);
    const double ratio = uniform01(rng);
    const std::size_t expected = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(ratio * len)));
    auto idx = sample_mask_indices(len, ratio, rng);
    CHECK(idx.size() == std::min(expected, len));
    CHECK(std::is_sorted(idx.begin(), idx.end()));
    CHECK(std::adjacent_find(idx.begin(), idx.end()) == idx.end());
    CHECK(idx.back() < len);
  }
  CHECK(mask_count(0.01, 5) == 1);
  CHECK(mask_count(0.5, 0) == 0);
}

TEST_CASE("patch selection is uniform") {
  Rng rng(4);
  std::array<int, 16> hits{};
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    for (auto p : sample_mask_indices(16, 0.5, rng)) ++hits[p];
  }
  for (int h : hits) {
    const double freq = static_cast<double>(h) / draws;
    CHECK(freq >= 0.47);
    CHECK(freq <= 0.53);
  }
}
