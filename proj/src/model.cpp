#include "omniflux/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "omniflux/errors.hpp"

namespace omniflux {

namespace {

constexpr double kInitStd = 0.02;
constexpr double kNormEps = 1e-5;

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Tensor gaussian(Shape shape) {
    std::normal_distribution<double> dist(0.0, kInitStd);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = dist(rng_);
    return Tensor::from(std::move(shape), std::move(v), true);
  }

  Linear linear(std::size_t in, std::size_t out) { return {gaussian({in, out}), Tensor::zeros({out}, true)}; }

  static LayerNormParams norm(std::size_t d) { return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true)}; }

  TransformerBlock block(std::size_t d, std::size_t mlp) {
    TransformerBlock b;
    b.query = linear(d, d);
    b.key = linear(d, d);
    b.value = linear(d, d);
    b.attn_out = linear(d, d);
    b.attn_norm = norm(d);
    b.mlp_in = linear(d, mlp);
    b.mlp_out = linear(mlp, d);
    b.mlp_norm = norm(d);
    return b;
  }

 private:
  std::mt19937_64 rng_;
};

void push_linear(std::vector<std::pair<std::string, Tensor>>& out, const std::string& name, const Linear& l) {
  out.emplace_back(name + ".weight", l.weight);
  out.emplace_back(name + ".bias", l.bias);
}

void push_norm(std::vector<std::pair<std::string, Tensor>>& out, const std::string& name, const LayerNormParams& n) {
  out.emplace_back(name + ".gamma", n.gamma);
  out.emplace_back(name + ".beta", n.beta);
}

void push_block(std::vector<std::pair<std::string, Tensor>>& out, const std::string& name, const TransformerBlock& b) {
  push_linear(out, name + ".query", b.query);
  push_linear(out, name + ".key", b.key);
  push_linear(out, name + ".value", b.value);
  push_linear(out, name + ".attn_out", b.attn_out);
  push_norm(out, name + ".attn_norm", b.attn_norm);
  push_linear(out, name + ".mlp_in", b.mlp_in);
  push_linear(out, name + ".mlp_out", b.mlp_out);
  push_norm(out, name + ".mlp_norm", b.mlp_norm);
}

// Post-norm transformer layer over packed sequences.
Tensor run_block(Graph& g, const TransformerBlock& b, const Tensor& x, std::span<const Segment> segments,
                 std::size_t heads, AttentionTrace* trace) {
  std::vector<double> probs;
  Tensor attn = g.attention(linear(g, b.query, x), linear(g, b.key, x), linear(g, b.value, x), segments, heads,
                            trace ? &probs : nullptr);
  if (trace) trace->push_back(std::move(probs));
  Tensor h = g.layer_norm(g.add(x, linear(g, b.attn_out, attn)), b.attn_norm.gamma, b.attn_norm.beta, kNormEps);
  Tensor m = linear(g, b.mlp_out, g.gelu(linear(g, b.mlp_in, h)));
  return g.layer_norm(g.add(h, m), b.mlp_norm.gamma, b.mlp_norm.beta, kNormEps);
}

Tensor run_blocks(Graph& g, std::span<const TransformerBlock> blocks, Tensor x, std::span<const Segment> segments,
                  std::size_t heads, AttentionTrace* trace) {
  for (const auto& b : blocks) x = run_block(g, b, x, segments, heads, trace);
  return x;
}

std::vector<Segment> segments_from_lengths(std::span<const std::size_t> lengths) {
  std::vector<Segment> segs;
  segs.reserve(lengths.size());
  std::size_t off = 0;
  for (auto len : lengths) {
    segs.push_back({off, len});
    off += len;
  }
  return segs;
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (vocab_size <= kFirstContentToken) fail("vocab_size must exceed the reserved token ids");
  if (hidden_dim == 0 || num_heads == 0) fail("hidden_dim and num_heads must be positive");
  if (hidden_dim % num_heads != 0) fail("hidden_dim must be divisible by num_heads");
  if (text_layers > total_layers) fail("text_layers (K) must not exceed total_layers");
  if (image_patch_size == 0 || image_side == 0) fail("image_side and image_patch_size must be positive");
  if (image_side % image_patch_size != 0) fail("image_side must be divisible by image_patch_size");
  if (proj_dim == 0 || max_text_len == 0 || mlp_ratio == 0) fail("proj_dim, max_text_len, mlp_ratio must be positive");
  if (teacher_feature_dim == 0 || teacher_clusters == 0) fail("teacher dimensions must be positive");
}

std::vector<std::pair<std::string, Tensor>> ModelState::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("text.token_embedding", token_embedding);
  out.emplace_back("text.cls", text_cls);
  out.emplace_back("text.position", text_position);
  push_norm(out, "text.embed_norm", text_embed_norm);
  push_linear(out, "image.patch_embedding", patch_embedding);
  out.emplace_back("image.cls", image_cls);
  out.emplace_back("image.position", image_position);
  push_norm(out, "image.embed_norm", image_embed_norm);
  for (std::size_t i = 0; i < image_blocks.size(); ++i) push_block(out, "image.block" + std::to_string(i), image_blocks[i]);
  for (std::size_t i = 0; i < blocks.size(); ++i) push_block(out, "block" + std::to_string(i), blocks[i]);
  push_linear(out, "head.text_proj", text_proj);
  push_linear(out, "head.image_proj", image_proj);
  push_linear(out, "head.fused_proj", fused_proj);
  push_linear(out, "head.itm", itm_head);
  push_linear(out, "head.mim_feature", mim_feature_head);
  push_linear(out, "head.mim_cluster", mim_cluster_head);
  out.emplace_back("log_temperature", log_temperature);
  return out;
}

std::vector<Tensor> ModelState::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

std::size_t ModelState::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : parameters()) n += t.numel();
  return n;
}

void ModelState::zero_grad() const {
  for (const auto& t : parameters()) t.zero_grad();
}

ModelState ModelState::clone() const {
  ModelState copy = *this;
  auto deep = [](Tensor& t) { t = t.clone(t.requires_grad()); };
  deep(copy.token_embedding);
  deep(copy.text_cls);
  deep(copy.text_position);
  auto deep_norm = [&](LayerNormParams& n) { deep(n.gamma); deep(n.beta); };
  auto deep_linear = [&](Linear& l) { deep(l.weight); deep(l.bias); };
  auto deep_block = [&](TransformerBlock& b) {
    deep_linear(b.query);
    deep_linear(b.key);
    deep_linear(b.value);
    deep_linear(b.attn_out);
    deep_norm(b.attn_norm);
    deep_linear(b.mlp_in);
    deep_linear(b.mlp_out);
    deep_norm(b.mlp_norm);
  };
  deep_norm(copy.text_embed_norm);
  deep_linear(copy.patch_embedding);
  deep(copy.image_cls);
  deep(copy.image_position);
  deep_norm(copy.image_embed_norm);
  for (auto& b : copy.image_blocks) deep_block(b);
  for (auto& b : copy.blocks) deep_block(b);
  deep_linear(copy.text_proj);
  deep_linear(copy.image_proj);
  deep_linear(copy.fused_proj);
  deep_linear(copy.itm_head);
  deep_linear(copy.mim_feature_head);
  deep_linear(copy.mim_cluster_head);
  deep(copy.log_temperature);
  return copy;
}

ModelState init_model(const ModelConfig& config) {
  config.validate();
  Initializer init(config.init_seed);
  const std::size_t d = config.hidden_dim;
  ModelState s;
  s.config = config;
  s.token_embedding = init.gaussian({config.vocab_size, d});
  s.text_cls = init.gaussian({1, d});
  s.text_position = init.gaussian({config.max_text_len + 1, d});
  s.text_embed_norm = Initializer::norm(d);
  s.patch_embedding = init.linear(config.patch_pixels(), d);
  s.image_cls = init.gaussian({1, d});
  s.image_position = init.gaussian({config.num_patches() + 1, d});
  s.image_embed_norm = Initializer::norm(d);
  for (std::size_t i = 0; i < config.image_layers; ++i) s.image_blocks.push_back(init.block(d, d * config.mlp_ratio));
  for (std::size_t i = 0; i < config.total_layers; ++i) s.blocks.push_back(init.block(d, d * config.mlp_ratio));
  s.text_proj = init.linear(d, config.proj_dim);
  s.image_proj = init.linear(d, config.proj_dim);
  s.fused_proj = init.linear(d, config.proj_dim);
  s.itm_head = init.linear(d, 1);
  s.mim_feature_head = init.linear(d, config.teacher_feature_dim);
  s.mim_cluster_head = init.linear(d, config.teacher_clusters);
  s.log_temperature = Tensor::scalar(std::log(kInitialTemperature), true);
  return s;
}

void split_layers(ModelState& state, std::size_t text_layers) {
  if (text_layers > state.config.total_layers) {
    throw ConfigError("split_layers: K=" + std::to_string(text_layers) + " exceeds total_layers=" +
                      std::to_string(state.config.total_layers));
  }
  state.config.text_layers = text_layers;
}

void clamp_temperature(ModelState& state) {
  auto v = state.log_temperature.data();
  v[0] = std::clamp(v[0], std::log(kMinTemperature), std::log(kMaxTemperature));
}

Tensor linear(Graph& g, const Linear& layer, const Tensor& x) {
  return g.add_bias(g.matmul(x, layer.weight), layer.bias);
}

SeqBatch encode_text(Graph& g, const ModelState& state, std::span<const TokenIds> batch, AttentionTrace* trace) {
  const auto& cfg = state.config;
  if (batch.empty()) throw InputError("encode_text: empty batch");
  std::vector<std::size_t> token_ids;
  std::vector<std::size_t> lengths;
  for (const auto& tokens : batch) {
    if (tokens.size() > cfg.max_text_len) {
      throw InputError("encode_text: sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_text_len " +
                       std::to_string(cfg.max_text_len));
    }
    for (auto id : tokens) {
      if (id >= cfg.vocab_size) {
        throw InputError("encode_text: token id " + std::to_string(id) + " outside vocabulary of " +
                         std::to_string(cfg.vocab_size));
      }
      token_ids.push_back(id);
    }
    lengths.push_back(tokens.size() + 1);
  }

  // Row 0 of `table` is [CLS]; row 1 + j is the j-th token overall.
  Tensor table = state.text_cls;
  if (!token_ids.empty()) table = g.concat({state.text_cls, g.gather_rows(state.token_embedding, token_ids)}, 0);
  std::vector<std::size_t> order, positions;
  std::size_t next = 1;
  for (const auto& tokens : batch) {
    order.push_back(0);
    positions.push_back(0);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      order.push_back(next++);
      positions.push_back(t + 1);
    }
  }
  Tensor x = g.add(g.gather_rows(table, order), g.gather_rows(state.text_position, positions));
  x = g.layer_norm(x, state.text_embed_norm.gamma, state.text_embed_norm.beta, kNormEps);

  SeqBatch out;
  out.segments = segments_from_lengths(lengths);
  out.seq = run_blocks(g, std::span(state.blocks).first(cfg.text_layers), x, out.segments, cfg.num_heads, trace);
  return out;
}

SeqBatch embed_image(Graph& g, const ModelState& state, const Tensor& pixels) {
  const auto& cfg = state.config;
  const std::size_t side = cfg.image_side, ps = cfg.image_patch_size, per_side = cfg.patches_per_side();
  const std::size_t n_patches = cfg.num_patches();
  if (pixels.rank() != 2 || pixels.dim(1) != cfg.pixel_count()) {
    throw ConfigError("encode_image: expected [B, " + std::to_string(cfg.pixel_count()) + "] pixels, got " +
                      shape_str(pixels.shape()));
  }
  const std::size_t batch = pixels.dim(0);

  std::vector<std::size_t> patch_index;
  patch_index.reserve(batch * cfg.pixel_count());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t pr = 0; pr < per_side; ++pr) {
      for (std::size_t pc = 0; pc < per_side; ++pc) {
        for (std::size_t y = 0; y < ps; ++y) {
          for (std::size_t x = 0; x < ps; ++x) {
            patch_index.push_back(b * side * side + (pr * ps + y) * side + pc * ps + x);
          }
        }
      }
    }
  }
  Tensor patches = g.gather_elements(pixels, patch_index, {batch * n_patches, cfg.patch_pixels()});
  Tensor table = g.concat({state.image_cls, linear(g, state.patch_embedding, patches)}, 0);

  std::vector<std::size_t> order, positions;
  for (std::size_t b = 0; b < batch; ++b) {
    order.push_back(0);
    positions.push_back(0);
    for (std::size_t p = 0; p < n_patches; ++p) {
      order.push_back(1 + b * n_patches + p);
      positions.push_back(p + 1);
    }
  }
  Tensor x = g.add(g.gather_rows(table, order), g.gather_rows(state.image_position, positions));
  x = g.layer_norm(x, state.image_embed_norm.gamma, state.image_embed_norm.beta, kNormEps);

  SeqBatch out;
  out.seq = x;
  out.segments = segments_from_lengths(std::vector<std::size_t>(batch, n_patches + 1));
  return out;
}

SeqBatch encode_image(Graph& g, const ModelState& state, const Tensor& pixels, AttentionTrace* trace) {
  SeqBatch out = embed_image(g, state, pixels);
  out.seq = run_blocks(g, state.image_blocks, out.seq, out.segments, state.config.num_heads, trace);
  return out;
}

FusedBatch fuse(Graph& g, const ModelState& state, const SeqBatch& textual, const SeqBatch& visual,
                std::span<const std::size_t> text_index, std::span<const std::size_t> image_index,
                AttentionTrace* trace) {
  const auto& cfg = state.config;
  if (text_index.size() != image_index.size() || text_index.empty()) {
    throw DimensionError("fuse: pairing index lists must be non-empty and of equal length");
  }
  if (textual.seq.last_dim() != cfg.hidden_dim || visual.seq.last_dim() != cfg.hidden_dim) {
    throw DimensionError("fuse: sequence width does not match hidden_dim");
  }
  const std::size_t text_rows = textual.seq.dim(0);
  std::vector<std::size_t> order, lengths, text_lengths;
  for (std::size_t i = 0; i < text_index.size(); ++i) {
    if (text_index[i] >= textual.size() || image_index[i] >= visual.size()) {
      throw DimensionError("fuse: pairing index out of range");
    }
    const Segment& ts = textual.segments[text_index[i]];
    const Segment& vs = visual.segments[image_index[i]];
    for (std::size_t r = 0; r < ts.length; ++r) order.push_back(ts.offset + r);
    for (std::size_t r = 0; r < vs.length; ++r) order.push_back(text_rows + vs.offset + r);
    lengths.push_back(ts.length + vs.length);
    text_lengths.push_back(ts.length);
  }
  Tensor x = g.gather_rows(g.concat({textual.seq, visual.seq}, 0), order);

  FusedBatch out;
  out.text_lengths = std::move(text_lengths);
  out.packed.segments = segments_from_lengths(lengths);
  out.packed.seq = run_blocks(g, std::span(state.blocks).subspan(cfg.text_layers), x, out.packed.segments,
                              cfg.num_heads, trace);
  return out;
}

FusedBatch fuse(Graph& g, const ModelState& state, const SeqBatch& textual, const SeqBatch& visual,
                AttentionTrace* trace) {
  if (textual.size() != visual.size()) throw DimensionError("fuse: text and image batch sizes differ");
  std::vector<std::size_t> idx(textual.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return fuse(g, state, textual, visual, idx, idx, trace);
}

Tensor cls_rows(Graph& g, const SeqBatch& batch) {
  std::vector<std::size_t> idx;
  for (const auto& s : batch.segments) idx.push_back(s.offset);
  return g.gather_rows(batch.seq, idx);
}

Tensor fused_text_cls(Graph& g, const FusedBatch& fused) { return cls_rows(g, fused.packed); }

Tensor fused_image_cls(Graph& g, const FusedBatch& fused) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < fused.packed.segments.size(); ++i) {
    idx.push_back(fused.packed.segments[i].offset + fused.text_lengths[i]);
  }
  return g.gather_rows(fused.packed.seq, idx);
}

Tensor project_text(Graph& g, const ModelState& state, const SeqBatch& textual) {
  return g.l2_normalize(linear(g, state.text_proj, cls_rows(g, textual)), 1);
}

Tensor project_image(Graph& g, const ModelState& state, const SeqBatch& visual) {
  return g.l2_normalize(linear(g, state.image_proj, cls_rows(g, visual)), 1);
}

Tensor project_fused(Graph& g, const ModelState& state, const FusedBatch& fused) {
  return g.l2_normalize(linear(g, state.fused_proj, fused_text_cls(g, fused)), 1);
}

EncoderOutputs forward_pairs(Graph& g, const ModelState& state, std::span<const TokenIds> tokens,
                             const Tensor& pixels) {
  if (tokens.size() != pixels.dim(0)) throw DimensionError("forward_pairs: token and image batch sizes differ");
  EncoderOutputs out;
  out.textual = encode_text(g, state, tokens);
  out.visual = encode_image(g, state, pixels);
  out.fused = fuse(g, state, out.textual, out.visual);
  out.text_embedding = project_text(g, state, out.textual);
  out.image_embedding = project_image(g, state, out.visual);
  out.fused_embedding = project_fused(g, state, out.fused);
  return out;
}

Tensor inverse_temperature(Graph& g, const ModelState& state) {
  return g.exp(g.scale(state.log_temperature, -1.0));
}

}  // namespace omniflux

namespace omniflux {

KeyValues ModelConfig::to_key_values() const {
  return {
      {"vocab_size", std::to_string(vocab_size)},
      {"hidden_dim", std::to_string(hidden_dim)},
      {"num_heads", std::to_string(num_heads)},
      {"total_layers", std::to_string(total_layers)},
      {"text_layers", std::to_string(text_layers)},
      {"image_layers", std::to_string(image_layers)},
      {"image_patch_size", std::to_string(image_patch_size)},
      {"image_side", std::to_string(image_side)},
      {"proj_dim", std::to_string(proj_dim)},
      {"max_text_len", std::to_string(max_text_len)},
      {"mlp_ratio", std::to_string(mlp_ratio)},
      {"teacher_feature_dim", std::to_string(teacher_feature_dim)},
      {"teacher_clusters", std::to_string(teacher_clusters)},
      {"init_seed", std::to_string(init_seed)},
  };
}

ModelConfig ModelConfig::from_key_values(const KeyValues& kv, const std::string& context) {
  ModelConfig c;
  for (const auto& [key, value] : kv) {
    const std::size_t v = static_cast<std::size_t>(parse_u64(value, context + ": " + key));
    if (key == "vocab_size") c.vocab_size = v;
    else if (key == "hidden_dim") c.hidden_dim = v;
    else if (key == "num_heads") c.num_heads = v;
    else if (key == "total_layers") c.total_layers = v;
    else if (key == "text_layers") c.text_layers = v;
    else if (key == "image_layers") c.image_layers = v;
    else if (key == "image_patch_size") c.image_patch_size = v;
    else if (key == "image_side") c.image_side = v;
    else if (key == "proj_dim") c.proj_dim = v;
    else if (key == "max_text_len") c.max_text_len = v;
    else if (key == "mlp_ratio") c.mlp_ratio = v;
    else if (key == "teacher_feature_dim") c.teacher_feature_dim = v;
    else if (key == "teacher_clusters") c.teacher_clusters = v;
    else if (key == "init_seed") c.init_seed = v;
    else throw ConfigError(context + ": unknown key '" + key + "'");
  }
  return c;
}

}  // namespace omniflux
