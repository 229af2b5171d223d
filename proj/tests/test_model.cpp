#include <doctest.h>

#include <cmath>
#include <random>

#include "omniflux/errors.hpp"
#include "omniflux/model.hpp"
#include "test_util.hpp"

using namespace omniflux;
using omniflux::testing::random_tensor;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.init_seed = 3;
  return c;
}

Tensor random_images(std::size_t n, const ModelConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_tensor({n, c.pixel_count()}, rng, false, 0.0, 1.0);
}

std::vector<TokenIds> sample_tokens() { return {{5, 9, 12, 40}, {100, 7}, {}}; }

double row_norm(const Tensor& t, std::size_t r) {
  double ss = 0;
  for (std::size_t c = 0; c < t.last_dim(); ++c) ss += t.at(r, c) * t.at(r, c);
  return std::sqrt(ss);
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c;
  c.validate();
  c.hidden_dim = 66;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.image_side = 30;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.text_layers = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("encode_image shapes and locality") {
  ModelState s = init_model(small_config());
  Graph g;
  SeqBatch v = encode_image(g, s, random_images(2, s.config, 1));
  REQUIRE(v.size() == 2);
  CHECK(v.segments[0].length == 17);
  CHECK(v.seq.dim(0) == 34);

  CHECK_THROWS_AS(encode_image(g, s, Tensor::zeros({1, 100})), ConfigError);

  // Zero image: each row depends only on CLS/position/bias.
  SeqBatch zero = embed_image(g, s, Tensor::zeros({1, s.config.pixel_count()}));
  Tensor expect_in = g.add(g.concat({s.image_cls, g.gather_rows(g.reshape(s.patch_embedding.bias, {1, 64}),
                                                                  std::vector<std::size_t>(16, 0))},
                                    0),
                           s.image_position);
  Tensor expect = g.layer_norm(expect_in, s.image_embed_norm.gamma, s.image_embed_norm.beta, 1e-5);
  for (std::size_t i = 0; i < expect.numel(); ++i) CHECK(zero.seq.at(i) == doctest::Approx(expect.at(i)).epsilon(1e-12));

  // Change one pixel inside patch 5 (row 1, col 1): only sequence row 6 moves.
  Tensor a = random_images(1, s.config, 2);
  Tensor b = a.clone();
  b.data()[(8 + 3) * 32 + 8 + 2] += 0.3;
  SeqBatch ea = embed_image(g, s, a), eb = embed_image(g, s, b);
  for (std::size_t r = 0; r < 17; ++r) {
    bool same = true;
    for (std::size_t c = 0; c < 64; ++c) same = same && ea.seq.at(r, c) == eb.seq.at(r, c);
    CHECK(same == (r != 6));
  }
}

TEST_CASE("encode_text shapes and validation") {
  ModelState s = init_model(small_config());
  Graph g;
  auto toks = sample_tokens();
  SeqBatch t = encode_text(g, s, toks);
  CHECK(t.segments[0].length == 5);
  CHECK(t.segments[1].length == 3);
  CHECK(t.segments[2].length == 1);

  std::vector<TokenIds> bad{{5, 300}};
  CHECK_THROWS_AS(encode_text(g, s, bad), InputError);
  std::vector<TokenIds> too_long{TokenIds(33, 5)};
  CHECK_THROWS_AS(encode_text(g, s, too_long), InputError);

  std::vector<TokenIds> swapped{{9, 5, 12, 40}};
  SeqBatch a = encode_text(g, s, std::span(toks).first(1));
  SeqBatch b = encode_text(g, s, swapped);
  CHECK(a.seq.shape() == b.seq.shape());
  CHECK(a.seq.to_vector() != b.seq.to_vector());
}

TEST_CASE("K=0 text encoder applies no transformer blocks") {
  ModelState s = init_model(small_config());
  split_layers(s, 0);
  auto toks = sample_tokens();
  Graph g;
  auto before = encode_text(g, s, toks).seq.to_vector();
  for (auto& b : s.blocks) b.mlp_in.weight.data()[0] += 1.0;
  auto after = encode_text(g, s, toks).seq.to_vector();
  CHECK(before == after);
}

TEST_CASE("fuse layout and gradient flow") {
  ModelState s = init_model(small_config());
  auto toks = sample_tokens();
  Tensor pixels = random_images(3, s.config, 4);

  SUBCASE("M=0 is plain concatenation") {
    split_layers(s, s.config.total_layers);
    Graph g;
    SeqBatch t = encode_text(g, s, toks);
    SeqBatch v = encode_image(g, s, pixels);
    FusedBatch f = fuse(g, s, t, v);
    for (std::size_t i = 0; i < 3; ++i) {
      const auto& seg = f.packed.segments[i];
      CHECK(seg.length == t.segments[i].length + 17);
      for (std::size_t r = 0; r < seg.length; ++r) {
        const bool is_text = r < t.segments[i].length;
        const std::size_t src = is_text ? t.segments[i].offset + r : v.segments[i].offset + r - t.segments[i].length;
        const Tensor& from = is_text ? t.seq : v.seq;
        for (std::size_t c = 0; c < 64; ++c) CHECK(f.packed.seq.at(seg.offset + r, c) == from.at(src, c));
      }
    }
  }

  SUBCASE("fused text CLS reaches the pixels") {
    pixels.set_requires_grad(true);
    Graph g;
    EncoderOutputs out = forward_pairs(g, s, toks, pixels);
    CHECK(out.fused.packed.segments[0].length == 5 + 17);
    g.backward(g.sum(fused_text_cls(g, out.fused)));
    double mag = 0;
    for (double v : pixels.grad()) mag += std::abs(v);
    CHECK(mag > 0.0);
  }
}

TEST_CASE("forward_pairs contracts") {
  ModelState s = init_model(small_config());
  auto toks = sample_tokens();
  Tensor pixels = random_images(3, s.config, 5);
  Graph g;
  EncoderOutputs a = forward_pairs(g, s, toks, pixels);
  EncoderOutputs b = forward_pairs(g, s, toks, pixels);
  CHECK(a.fused_embedding.to_vector() == b.fused_embedding.to_vector());
  for (std::size_t r = 0; r < 3; ++r) {
    CHECK(std::abs(row_norm(a.text_embedding, r) - 1.0) < 1e-6);
    CHECK(std::abs(row_norm(a.image_embedding, r) - 1.0) < 1e-6);
    CHECK(std::abs(row_norm(a.fused_embedding, r) - 1.0) < 1e-6);
  }

  EncoderOutputs c = forward_pairs(g, s, toks, random_images(3, s.config, 6));
  CHECK(c.text_embedding.to_vector() == a.text_embedding.to_vector());
  CHECK(c.image_embedding.to_vector() != a.image_embedding.to_vector());
  CHECK(c.fused_embedding.to_vector() != a.fused_embedding.to_vector());
}

TEST_CASE("split_layers reassigns roles only") {
  ModelConfig cfg = small_config();
  cfg.total_layers = 6;
  cfg.text_layers = 3;
  ModelState s = init_model(cfg);
  CHECK(s.config.text_layers == 3);
  CHECK(s.config.fusion_layers() == 3);
  const auto count = s.parameter_count();
  auto snapshot = s.clone();

  split_layers(s, 3);
  split_layers(s, 3);
  auto p1 = s.parameters(), p2 = snapshot.parameters();
  for (std::size_t i = 0; i < p1.size(); ++i) CHECK(p1[i].to_vector() == p2[i].to_vector());

  split_layers(s, 0);
  CHECK(s.config.fusion_layers() == 6);
  CHECK(s.parameter_count() == count);
  CHECK_THROWS_AS(split_layers(s, 7), ConfigError);
}

TEST_CASE("output shapes are K-independent and restoring K is bit-exact") {
  ModelState s = init_model(small_config());
  auto toks = sample_tokens();
  Tensor pixels = random_images(3, s.config, 7);
  Graph g;
  EncoderOutputs ref = forward_pairs(g, s, toks, pixels);
  for (std::size_t k = 0; k <= s.config.total_layers; ++k) {
    split_layers(s, k);
    EncoderOutputs o = forward_pairs(g, s, toks, pixels);
    CHECK(o.fused.packed.seq.shape() == ref.fused.packed.seq.shape());
    CHECK(o.text_embedding.shape() == ref.text_embedding.shape());
  }
  split_layers(s, 2);
  EncoderOutputs back = forward_pairs(g, s, toks, pixels);
  CHECK(back.text_embedding.to_vector() == ref.text_embedding.to_vector());
  CHECK(back.fused_embedding.to_vector() == ref.fused_embedding.to_vector());
}

TEST_CASE("attention rows inside the encoders sum to one") {
  ModelState s = init_model(small_config());
  auto toks = sample_tokens();
  Graph g;
  AttentionTrace text_trace, image_trace, fused_trace;
  SeqBatch t = encode_text(g, s, toks, &text_trace);
  SeqBatch v = encode_image(g, s, random_images(3, s.config, 8), &image_trace);
  FusedBatch f = fuse(g, s, t, v, &fused_trace);
  CHECK(text_trace.size() == 2);
  CHECK(image_trace.size() == 2);
  CHECK(fused_trace.size() == 2);

  auto check_rows = [&](const AttentionTrace& trace, const std::vector<Segment>& segs) {
    for (const auto& layer : trace) {
      std::size_t off = 0;
      for (const auto& seg : segs) {
        for (std::size_t h = 0; h < s.config.num_heads; ++h) {
          for (std::size_t r = 0; r < seg.length; ++r) {
            double total = 0;
            for (std::size_t c = 0; c < seg.length; ++c) total += layer[off + r * seg.length + c];
            CHECK(std::abs(total - 1.0) < 1e-6);
          }
          off += seg.length * seg.length;
        }
      }
      CHECK(off == layer.size());
    }
  };
  check_rows(text_trace, t.segments);
  check_rows(image_trace, v.segments);
  check_rows(fused_trace, f.packed.segments);
}

TEST_CASE("clone shares no storage") {
  ModelState s = init_model(small_config());
  ModelState c = s.clone();
  c.token_embedding.data()[0] += 1.0;
  CHECK(s.token_embedding.at(0) != c.token_embedding.at(0));
  auto a = s.named_parameters(), b = c.named_parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK_FALSE(a[i].second.same_storage(b[i].second));
  }
}
