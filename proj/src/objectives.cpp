#include "omniflux/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "omniflux/errors.hpp"

namespace omniflux {

namespace {

constexpr double kUnitTolerance = 1e-6;

void require_unit_rows(const Tensor& x, const char* what) {
  if (x.rank() != 2) throw DimensionError(std::string(what) + " must be rank 2");
  const std::size_t n = x.dim(0), d = x.dim(1);
  auto v = x.data();
  for (std::size_t r = 0; r < n; ++r) {
    double ss = 0;
    for (std::size_t c = 0; c < d; ++c) ss += v[r * d + c] * v[r * d + c];
    if (std::abs(std::sqrt(ss) - 1.0) > kUnitTolerance) {
      throw ContractError(std::string(what) + " row " + std::to_string(r) + " is not unit norm");
    }
  }
}

Tensor pixels_from_rows(const std::vector<std::vector<double>>& rows) {
  const std::size_t n = rows.size(), p = rows.empty() ? 0 : rows.front().size();
  Tensor out = Tensor::zeros({n, p});
  auto o = out.data();
  for (std::size_t i = 0; i < n; ++i) std::copy(rows[i].begin(), rows[i].end(), o.begin() + i * p);
  return out;
}

Tensor stack_rows(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) throw DimensionError("stack_rows: width mismatch");
  Tensor out = Tensor::zeros({a.dim(0) + b.dim(0), a.dim(1)});
  auto o = out.data();
  std::copy(a.data().begin(), a.data().end(), o.begin());
  std::copy(b.data().begin(), b.data().end(), o.begin() + a.numel());
  return out;
}

// Accumulates weight * term into total, creating it on first use.
void accumulate(Graph& g, std::optional<Tensor>& total, const Tensor& term, double weight) {
  Tensor weighted = weight == 1.0 ? term : g.scale(term, weight);
  total = total ? g.add(*total, weighted) : weighted;
}

}  // namespace

std::string omni_term_name(std::size_t index) {
  if (index >= kOmniTerms) throw ContractError("omni term index out of range");
  static constexpr char kLetters[] = {'t', 'i', 'm'};
  return std::string("omni_") + kLetters[index / 3] + kLetters[index % 3];
}

TaskWeights TaskWeights::zeros() {
  TaskWeights w;
  w.mlm = w.mim_kl = w.mim_fr = w.itc = w.itm = 0.0;
  w.omni.fill(0.0);
  return w;
}

void TaskWeights::validate() const {
  auto bad = [](double v) { return !(v >= 0.0) || !std::isfinite(v); };
  if (bad(mlm) || bad(mim_kl) || bad(mim_fr) || bad(itc) || bad(itm) || std::any_of(omni.begin(), omni.end(), bad)) {
    throw ConfigError("task weights must be finite and nonnegative");
  }
}

Tensor token_nll(Graph& g, const Tensor& logits, std::span<const TokenId> targets) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) throw DimensionError("token_nll: one row per target");
  const std::size_t vocab = logits.dim(1);
  std::vector<std::size_t> picks(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] >= vocab) throw InputError("token_nll: target id out of vocabulary");
    picks[i] = i * vocab + targets[i];
  }
  Tensor logp = g.gather_elements(g.log_softmax(logits, 1), picks, {targets.size()});
  return g.scale(g.mean(logp), -1.0);
}

Tensor mlm_loss(Graph& g, const ModelState& state, const FusedBatch& fused, std::span<const MaskedText> masked) {
  if (masked.size() != fused.packed.size()) throw DimensionError("mlm_loss: one mask per fused sequence");
  std::vector<std::size_t> rows;
  TokenIds targets;
  for (std::size_t i = 0; i < masked.size(); ++i) {
    const auto& seg = fused.packed.segments[i];
    for (std::size_t k = 0; k < masked[i].plan.indices.size(); ++k) {
      const std::size_t pos = masked[i].plan.indices[k] + 1;  // skip [CLS]
      if (pos >= fused.text_lengths[i]) throw ContractError("mlm_loss: mask index outside the text segment");
      rows.push_back(seg.offset + pos);
      targets.push_back(masked[i].targets[k]);
    }
  }
  if (rows.empty()) return Tensor::scalar(0.0);
  Tensor hidden = g.gather_rows(fused.packed.seq, rows);
  return token_nll(g, g.matmul_nt(hidden, state.token_embedding), targets);
}

Tensor feature_regression(Graph& g, const Tensor& prediction, const Tensor& target) {
  if (prediction.shape() != target.shape()) throw ConfigError("feature regression: prediction/target dims differ");
  Tensor diff = g.sub(prediction, target);
  return g.mean(g.multiply(diff, diff));
}

Tensor distribution_kl(Graph& g, const Tensor& logits, const Tensor& teacher) {
  if (logits.shape() != teacher.shape() || logits.rank() != 2) throw ConfigError("KL: logits/teacher dims differ");
  const double batch = static_cast<double>(logits.dim(0));
  // Σ c ln c is a constant of the teacher; 0 ln 0 = 0.
  double neg_entropy = 0;
  for (double c : teacher.data()) {
    if (c > 0) neg_entropy += c * std::log(c);
  }
  Tensor cross = g.sum(g.multiply(teacher, g.log_softmax(logits, 1)));
  return g.add_scalar(g.scale(cross, -1.0 / batch), neg_entropy / batch);
}

Tensor mim_fr_loss(Graph& g, const ModelState& state, const Tensor& fused_image_cls, const Tensor& teacher_features) {
  return feature_regression(g, linear(g, state.mim_feature_head, fused_image_cls), teacher_features);
}

Tensor mim_kl_loss(Graph& g, const ModelState& state, const Tensor& fused_image_cls,
                   const Tensor& teacher_distributions) {
  return distribution_kl(g, linear(g, state.mim_cluster_head, fused_image_cls), teacher_distributions);
}

Tensor contrastive_sum(Graph& g, const Tensor& similarity, const Tensor& inverse_tau, std::span<const double> weights) {
  if (similarity.rank() != 2 || similarity.dim(0) != similarity.dim(1)) {
    throw DimensionError("contrastive_sum: similarity must be square");
  }
  const std::size_t n = similarity.dim(0);
  if (n == 0) return Tensor::scalar(0.0);
  if (!weights.empty() && weights.size() != n) throw DimensionError("contrastive_sum: one weight per row");

  Tensor z = g.mul_scalar(similarity, inverse_tau);
  std::vector<std::size_t> diag(n);
  for (std::size_t i = 0; i < n; ++i) diag[i] = i * n + i;
  Tensor row = g.gather_elements(g.log_softmax(z, 1), diag, {n});
  Tensor col = g.gather_elements(g.log_softmax(z, 0), diag, {n});
  Tensor both = g.add(row, col);
  if (!weights.empty()) both = g.multiply(both, Tensor::from({n}, {weights.begin(), weights.end()}));
  return g.scale(g.sum(both), -1.0);
}

ContrastiveResult itc_loss(Graph& g, const Tensor& text_embedding, const Tensor& image_embedding,
                           const Tensor& inverse_tau) {
  require_unit_rows(text_embedding, "itc text embedding");
  require_unit_rows(image_embedding, "itc image embedding");
  if (text_embedding.shape() != image_embedding.shape()) throw DimensionError("itc: embedding shapes differ");
  Tensor sim = g.matmul_nt(text_embedding, image_embedding);
  return {contrastive_sum(g, sim, inverse_tau), sim};
}

HardNegatives itm_hard_negatives(const Tensor& similarity, double tau, Rng& rng) {
  if (similarity.rank() != 2 || similarity.dim(0) != similarity.dim(1)) {
    throw DimensionError("itm_hard_negatives: similarity must be square");
  }
  const std::size_t n = similarity.dim(0);
  if (n < 2) throw ContractError("itm_hard_negatives: need at least 2 pairs");
  if (!(tau > 0)) throw ContractError("itm_hard_negatives: tau must be positive");

  std::vector<double> w(n);
  auto draw = [&](auto&& score, std::size_t exclude) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != exclude) best = std::max(best, score(j));
    }
    double total = 0;
    for (std::size_t j = 0; j < n; ++j) total += w[j] = j == exclude ? 0.0 : std::exp((score(j) - best) / tau);
    double u = uniform01(rng) * total;
    std::size_t last = exclude;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == exclude) continue;
      last = j;
      if (u < w[j]) return j;
      u -= w[j];
    }
    return last;
  };

  HardNegatives out;
  auto s = similarity.data();
  for (std::size_t i = 0; i < n; ++i) {
    out.image_for_text.push_back(draw([&](std::size_t j) { return s[i * n + j]; }, i));
  }
  for (std::size_t i = 0; i < n; ++i) {
    out.text_for_image.push_back(draw([&](std::size_t j) { return s[j * n + i]; }, i));
  }
  return out;
}

Tensor itm_loss(Graph& g, const ModelState& state, const Tensor& fused_text_cls, std::span<const double> labels) {
  return g.bce_with_logits(linear(g, state.itm_head, fused_text_cls), labels);
}

const Tensor& OmniEmbeddings::get(Modality m) const {
  switch (m) {
    case Modality::Text: return text;
    case Modality::Image: return image;
    case Modality::Multi: return fused;
  }
  throw ContractError("bad modality");
}

OmniResult omni_loss(Graph& g, const OmniEmbeddings& source, std::span<const ModalityFlags> source_flags,
                     const OmniEmbeddings& target, const Tensor& inverse_tau,
                     const std::array<double, kOmniTerms>& weights) {
  const std::size_t n = source_flags.size();
  OmniResult out;
  if (n == 0) {
    out.loss = Tensor::scalar(0.0);
    for (auto& t : out.terms) t = Tensor::scalar(0.0);
    return out;
  }
  static constexpr std::array<Modality, 3> kAll{Modality::Text, Modality::Image, Modality::Multi};
  for (Modality m : kAll) {
    require_unit_rows(source.get(m), "omni source embedding");
    require_unit_rows(target.get(m), "omni target embedding");
    if (source.get(m).dim(0) != n || target.get(m).dim(0) != n) throw DimensionError("omni: batch size mismatch");
  }

  std::optional<Tensor> total;
  for (Modality u : kAll) {
    std::vector<double> delta(n);
    for (std::size_t i = 0; i < n; ++i) delta[i] = source_flags[i].has(u) ? 1.0 : 0.0;
    for (Modality v : kAll) {
      const std::size_t k = omni_index(u, v);
      out.similarities[k] = g.matmul_nt(source.get(u), target.get(v));
      out.terms[k] = contrastive_sum(g, out.similarities[k], inverse_tau, delta);
      if (weights[k] != 0.0) accumulate(g, total, out.terms[k], weights[k]);
    }
  }
  out.loss = total ? *total : Tensor::scalar(0.0);
  return out;
}

ImageTextStepLoss image_text_step_loss(Graph& g, const ModelState& state, const PairBatch& batch,
                                       const Teachers& teachers, const TaskWeights& weights, Rng& rng) {
  weights.validate();
  const std::size_t n = batch.size();
  if (batch.pixels.rank() != 2 || batch.pixels.dim(0) != n) throw DimensionError("pair batch: pixel rows != pairs");
  ImageTextStepLoss out;
  std::optional<Tensor> total;

  const bool want_itc = weights.itc != 0.0, want_itm = weights.itm != 0.0;
  const bool want_mlm = weights.mlm != 0.0, want_mim = weights.mim_fr != 0.0 || weights.mim_kl != 0.0;
  if (!(want_itc || want_itm || want_mlm || want_mim)) {
    out.total = Tensor::scalar(0.0);
    return out;
  }

  // Intact encodings, shared by ITC, ITM and as the unmasked context of MLM/MIM.
  SeqBatch textual = encode_text(g, state, batch.tokens);
  SeqBatch visual = encode_image(g, state, batch.pixels);

  if (want_itc || want_itm) {
    Tensor f = project_text(g, state, textual);
    Tensor gv = project_image(g, state, visual);
    Tensor inv_tau = inverse_temperature(g, state);
    ContrastiveResult itc = itc_loss(g, f, gv, inv_tau);
    if (want_itc) {
      out.components.emplace_back("itc", itc.loss.item());
      accumulate(g, total, itc.loss, weights.itc);
    }
    if (want_itm) {
      if (n < 2) throw ContractError("image-text step: ITM needs at least 2 pairs per batch");
      const double tau = std::exp(state.log_temperature.item());
      out.negatives = itm_hard_negatives(itc.similarity, tau, rng);
      std::vector<std::size_t> text_index(3 * n), image_index(3 * n);
      std::vector<double> labels(3 * n, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        text_index[i] = image_index[i] = i;
        labels[i] = 1.0;
        text_index[n + i] = i;
        image_index[n + i] = out.negatives->image_for_text[i];
        text_index[2 * n + i] = out.negatives->text_for_image[i];
        image_index[2 * n + i] = i;
      }
      FusedBatch pairs = fuse(g, state, textual, visual, text_index, image_index);
      Tensor itm = itm_loss(g, state, fused_text_cls(g, pairs), labels);
      out.components.emplace_back("itm", itm.item());
      accumulate(g, total, itm, weights.itm);
    }
  }

  if (want_mlm) {
    std::vector<MaskedText> masked;
    std::vector<TokenIds> corrupted;
    for (const auto& t : batch.tokens) {
      masked.push_back(mask_text(t, kTextMaskRatio, rng));
      corrupted.push_back(masked.back().tokens);
    }
    SeqBatch masked_text = encode_text(g, state, corrupted);
    Tensor mlm = mlm_loss(g, state, fuse(g, state, masked_text, visual), masked);
    out.components.emplace_back("mlm", mlm.item());
    accumulate(g, total, mlm, weights.mlm);
  }

  if (want_mim) {
    // Teachers read the intact pixels; only the student sees the masked copy.
    out.teacher_features = teachers.feature.features(batch.pixels);
    out.teacher_distributions = teachers.cluster.distributions(batch.pixels);
    const std::size_t p = batch.pixels.dim(1);
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < n; ++i) {
      rows.push_back(mask_image(batch.pixels.data().subspan(i * p, p), state.config, kImageMaskRatio, rng).pixels);
    }
    SeqBatch masked_visual = encode_image(g, state, pixels_from_rows(rows));
    Tensor v_cls = fused_image_cls(g, fuse(g, state, textual, masked_visual));
    if (weights.mim_kl != 0.0) {
      Tensor kl = mim_kl_loss(g, state, v_cls, out.teacher_distributions);
      out.components.emplace_back("mim_kl", kl.item());
      accumulate(g, total, kl, weights.mim_kl);
    }
    if (weights.mim_fr != 0.0) {
      Tensor fr = mim_fr_loss(g, state, v_cls, out.teacher_features);
      out.components.emplace_back("mim_fr", fr.item());
      accumulate(g, total, fr, weights.mim_fr);
    }
  }

  out.total = *total;
  return out;
}

StepLoss omni_step_loss(Graph& g, const ModelState& state, const CrossPairBatch& batch, const TaskWeights& weights) {
  weights.validate();
  const std::size_t n = batch.size();
  StepLoss out;
  if (n == 0 || std::all_of(weights.omni.begin(), weights.omni.end(), [](double w) { return w == 0.0; })) {
    out.total = Tensor::scalar(0.0);
    return out;
  }
  // Sources and targets go through one batched forward, then split.
  std::vector<TokenIds> tokens = batch.source_tokens;
  tokens.insert(tokens.end(), batch.target_tokens.begin(), batch.target_tokens.end());
  EncoderOutputs enc = forward_pairs(g, state, tokens, stack_rows(batch.source_pixels, batch.target_pixels));
  auto half = [&](const Tensor& t, bool second) { return g.slice_rows(t, second ? n : 0, second ? 2 * n : n); };
  OmniEmbeddings source{half(enc.text_embedding, false), half(enc.image_embedding, false),
                        half(enc.fused_embedding, false)};
  OmniEmbeddings target{half(enc.text_embedding, true), half(enc.image_embedding, true),
                        half(enc.fused_embedding, true)};

  OmniResult omni = omni_loss(g, source, batch.source_flags, target, inverse_temperature(g, state), weights.omni);
  for (std::size_t k = 0; k < kOmniTerms; ++k) {
    if (weights.omni[k] != 0.0) out.components.emplace_back(omni_term_name(k), omni.terms[k].item());
  }
  out.total = omni.loss;
  return out;
}

}  // namespace omniflux
