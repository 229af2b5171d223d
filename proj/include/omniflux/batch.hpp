#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "omniflux/model.hpp"

namespace omniflux {

enum class Modality { Text = 0, Image = 1, Multi = 2 };

/// δ indicators for one side of a cross pair. Multimodal requires both.
struct ModalityFlags {
  bool has_text = true;
  bool has_image = true;

  bool multimodal() const { return has_text && has_image; }
  bool has(Modality m) const {
    switch (m) {
      case Modality::Text: return has_text;
      case Modality::Image: return has_image;
      case Modality::Multi: return multimodal();
    }
    return false;
  }
};

struct PairBatch {
  std::vector<std::uint64_t> record_ids;
  std::vector<int> concept_ids;
  std::vector<TokenIds> tokens;
  Tensor pixels;  // [B, image_side^2]

  std::size_t size() const { return tokens.size(); }
};

enum class Relation { QueryClick, Tag, ProductView };

struct CrossPairBatch {
  std::vector<std::uint64_t> record_ids;
  std::vector<int> concept_ids;
  std::vector<Relation> relations;
  // Missing source modalities are already replaced by placeholders:
  // an empty token list or an all-grey image.
  std::vector<TokenIds> source_tokens;
  Tensor source_pixels;
  std::vector<ModalityFlags> source_flags;
  std::vector<TokenIds> target_tokens;
  Tensor target_pixels;

  std::size_t size() const { return source_tokens.size(); }
};

}  // namespace omniflux
