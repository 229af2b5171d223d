#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "omniflux/batch.hpp"
#include "omniflux/masking.hpp"
#include "omniflux/model.hpp"
#include "omniflux/random.hpp"
#include "omniflux/teachers.hpp"

namespace omniflux {

inline constexpr std::size_t kOmniTerms = 9;

// Term index for source modality u and target modality v.
constexpr std::size_t omni_index(Modality u, Modality v) {
  return 3 * static_cast<std::size_t>(u) + static_cast<std::size_t>(v);
}
// "omni_ti" = text source against image target, etc.
std::string omni_term_name(std::size_t index);

struct TaskWeights {
  double mlm = 0.5;
  double mim_kl = 1.0;
  double mim_fr = 1.0;
  double itc = 1.0;
  double itm = 1.0;
  std::array<double, kOmniTerms> omni{1, 1, 1, 1, 1, 1, 1, 1, 1};

  static TaskWeights zeros();
  // Throws ConfigError on a negative weight.
  void validate() const;
};

// Mean negative log-likelihood of targets under softmax(logits) rows.
Tensor token_nll(Graph& g, const Tensor& logits, std::span<const TokenId> targets);

/// Cross-entropy at masked text positions of the fused sequences, logits
/// tied to the token embedding. masked[i] describes segment i. Returns a
/// constant 0 when nothing is masked.
Tensor mlm_loss(Graph& g, const ModelState& state, const FusedBatch& fused, std::span<const MaskedText> masked);

// Mean over batch and feature dims of (prediction - target)^2.
Tensor feature_regression(Graph& g, const Tensor& prediction, const Tensor& target);
// Mean over batch of KL(teacher || softmax(logits)).
Tensor distribution_kl(Graph& g, const Tensor& logits, const Tensor& teacher);

Tensor mim_fr_loss(Graph& g, const ModelState& state, const Tensor& fused_image_cls, const Tensor& teacher_features);
Tensor mim_kl_loss(Graph& g, const ModelState& state, const Tensor& fused_image_cls,
                   const Tensor& teacher_distributions);

/// -Σ_i weight_i [ln softmax_row(s/τ)_ii + ln softmax_col(s/τ)_ii] with
/// s = a·bᵀ. Empty weights mean all ones.
Tensor contrastive_sum(Graph& g, const Tensor& similarity, const Tensor& inverse_tau,
                       std::span<const double> weights = {});

struct ContrastiveResult {
  Tensor loss;
  Tensor similarity;  // [N, N], s_ij = a_i · b_j
};

// Rows of f and g must be unit norm (ContractError otherwise).
ContrastiveResult itc_loss(Graph& g, const Tensor& text_embedding, const Tensor& image_embedding,
                           const Tensor& inverse_tau);

struct HardNegatives {
  std::vector<std::size_t> image_for_text;  // row-wise draw
  std::vector<std::size_t> text_for_image;  // column-wise draw
};

// Samples j != i with probability ∝ exp(s_ij / τ). N < 2 is a ContractError.
HardNegatives itm_hard_negatives(const Tensor& similarity, double tau, Rng& rng);

// Mean BCE of sigmoid(itm_head(w_cls)) against labels.
Tensor itm_loss(Graph& g, const ModelState& state, const Tensor& fused_text_cls, std::span<const double> labels);

struct OmniEmbeddings {
  Tensor text;   // f(w)   [N, proj]
  Tensor image;  // g(v)
  Tensor fused;  // h(w,v)

  const Tensor& get(Modality m) const;
};

struct OmniResult {
  Tensor loss;
  std::array<Tensor, kOmniTerms> terms;         // unweighted
  std::array<Tensor, kOmniTerms> similarities;  // s^{u<->v}
};

/// Σ_{u,v} weight_uv · (-Σ_i δ^u_i [row + column log-softmax terms]),
/// δ read from the source side only.
OmniResult omni_loss(Graph& g, const OmniEmbeddings& source, std::span<const ModalityFlags> source_flags,
                     const OmniEmbeddings& target, const Tensor& inverse_tau,
                     const std::array<double, kOmniTerms>& weights = TaskWeights{}.omni);

using LossComponents = std::vector<std::pair<std::string, double>>;

struct StepLoss {
  Tensor total;
  LossComponents components;  // unweighted values of every active loss
};

struct ImageTextStepLoss : StepLoss {
  Tensor teacher_features;       // computed from the intact pixels
  Tensor teacher_distributions;
  std::optional<HardNegatives> negatives;
};

/// One intact forward (ITC, then ITM on the same encodings plus 2N hard
/// negatives), one masked-text forward (MLM) and one masked-image forward
/// (both MIM losses). Zero-weight losses are skipped.
ImageTextStepLoss image_text_step_loss(Graph& g, const ModelState& state, const PairBatch& batch,
                                       const Teachers& teachers, const TaskWeights& weights, Rng& rng);

StepLoss omni_step_loss(Graph& g, const ModelState& state, const CrossPairBatch& batch, const TaskWeights& weights);

}  // namespace omniflux
