#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "omniflux/key_value.hpp"
#include "omniflux/tensor.hpp"

namespace omniflux {

using TokenId = std::uint32_t;
using TokenIds = std::vector<TokenId>;

// Reserved vocabulary slots. Content tokens start at kFirstContentToken.
inline constexpr TokenId kPadToken = 0;
inline constexpr TokenId kMaskToken = 1;
inline constexpr TokenId kFirstContentToken = 4;

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t hidden_dim = 64;
  std::size_t num_heads = 4;
  std::size_t total_layers = 4;
  std::size_t text_layers = 2;  // K; fusion layers M = total_layers - K
  std::size_t image_layers = 2;  // vision backbone depth, outside the K/M budget
  std::size_t image_patch_size = 8;
  std::size_t image_side = 32;
  std::size_t proj_dim = 32;
  std::size_t max_text_len = 32;
  std::size_t mlp_ratio = 4;
  std::size_t teacher_feature_dim = 32;
  std::size_t teacher_clusters = 16;
  std::uint64_t init_seed = 0;

  std::size_t fusion_layers() const { return total_layers - text_layers; }
  std::size_t patches_per_side() const { return image_side / image_patch_size; }
  std::size_t num_patches() const { return patches_per_side() * patches_per_side(); }
  std::size_t pixel_count() const { return image_side * image_side; }
  std::size_t patch_pixels() const { return image_patch_size * image_patch_size; }

  // Throws ConfigError on any violated invariant.
  void validate() const;

  KeyValues to_key_values() const;
  // Unknown keys are a ConfigError.
  static ModelConfig from_key_values(const KeyValues& kv, const std::string& context);
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
};

struct TransformerBlock {
  Linear query, key, value, attn_out;
  LayerNormParams attn_norm;
  Linear mlp_in, mlp_out;
  LayerNormParams mlp_norm;
};

/// Every trainable parameter of the tri-encoder. `blocks` are role-agnostic:
/// [0, K) run as the text encoder and [K, total) as the fusion encoder.
struct ModelState {
  ModelConfig config;

  Tensor token_embedding;  // [vocab, hidden]; also the MLM output matrix
  Tensor text_cls;         // [1, hidden]
  Tensor text_position;    // [max_text_len + 1, hidden]
  LayerNormParams text_embed_norm;

  Linear patch_embedding;  // [patch_pixels, hidden]
  Tensor image_cls;        // [1, hidden]
  Tensor image_position;   // [num_patches + 1, hidden]
  LayerNormParams image_embed_norm;
  std::vector<TransformerBlock> image_blocks;

  std::vector<TransformerBlock> blocks;

  Linear text_proj;        // f
  Linear image_proj;       // g
  Linear fused_proj;       // h
  Linear itm_head;         // [hidden, 1]
  Linear mim_feature_head; // [hidden, teacher_feature_dim]
  Linear mim_cluster_head; // [hidden, teacher_clusters]
  Tensor log_temperature;  // [1]

  std::size_t text_layers() const { return config.text_layers; }

  // Stable (name, tensor) listing used by the optimizer and checkpoints.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
  void zero_grad() const;
  // Deep copy: the clone shares no storage with this state.
  ModelState clone() const;
};

inline constexpr double kInitialTemperature = 0.07;
inline constexpr double kMinTemperature = 1e-3;
inline constexpr double kMaxTemperature = 1.0;

ModelState init_model(const ModelConfig& config);

/// Reassigns the first K blocks to the text encoder and the rest to fusion.
/// Parameter values are untouched.
void split_layers(ModelState& state, std::size_t text_layers);

// Keeps log_temperature inside [log 1e-3, log 1].
void clamp_temperature(ModelState& state);

/// A batch of sequences packed row-wise into one [rows, hidden] tensor.
struct SeqBatch {
  Tensor seq;
  std::vector<Segment> segments;
  std::size_t size() const { return segments.size(); }
};

/// Fused sequences; text_lengths[i] = T_i + 1 locates the image [CLS]
/// inside segment i.
struct FusedBatch {
  SeqBatch packed;
  std::vector<std::size_t> text_lengths;
};

struct EncoderOutputs {
  SeqBatch textual;
  SeqBatch visual;
  FusedBatch fused;
  Tensor text_embedding;   // f(w)   [B, proj], unit rows
  Tensor image_embedding;  // g(v)   [B, proj], unit rows
  Tensor fused_embedding;  // h(w,v) [B, proj], unit rows
};

// Optional sink for attention probabilities (see Graph::attention).
using AttentionTrace = std::vector<std::vector<double>>;

Tensor linear(Graph& g, const Linear& layer, const Tensor& x);

SeqBatch encode_text(Graph& g, const ModelState& state, std::span<const TokenIds> batch,
                     AttentionTrace* trace = nullptr);

// pixels: [B, image_side^2] in [0,1].
SeqBatch embed_image(Graph& g, const ModelState& state, const Tensor& pixels);
SeqBatch encode_image(Graph& g, const ModelState& state, const Tensor& pixels, AttentionTrace* trace = nullptr);

/// Fuses text row text_index[i] with image row image_index[i].
FusedBatch fuse(Graph& g, const ModelState& state, const SeqBatch& textual, const SeqBatch& visual,
                std::span<const std::size_t> text_index, std::span<const std::size_t> image_index,
                AttentionTrace* trace = nullptr);
// Pairs row i with row i.
FusedBatch fuse(Graph& g, const ModelState& state, const SeqBatch& textual, const SeqBatch& visual,
                AttentionTrace* trace = nullptr);

// Row at each segment start: [B, hidden].
Tensor cls_rows(Graph& g, const SeqBatch& batch);
Tensor fused_text_cls(Graph& g, const FusedBatch& fused);
Tensor fused_image_cls(Graph& g, const FusedBatch& fused);

Tensor project_text(Graph& g, const ModelState& state, const SeqBatch& textual);
Tensor project_image(Graph& g, const ModelState& state, const SeqBatch& visual);
Tensor project_fused(Graph& g, const ModelState& state, const FusedBatch& fused);

EncoderOutputs forward_pairs(Graph& g, const ModelState& state, std::span<const TokenIds> tokens,
                             const Tensor& pixels);

// [1] tensor holding 1/τ = exp(-log_temperature), differentiable.
Tensor inverse_temperature(Graph& g, const ModelState& state);

}  // namespace omniflux
