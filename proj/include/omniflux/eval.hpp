#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "omniflux/data.hpp"
#include "omniflux/model.hpp"

namespace omniflux {

// Fine-tuned task states. T2I also serves I2T, I2P also serves I2Pi.
enum class FinetuneTask { CC, MPC, T2I, Q2P, I2P };
inline constexpr FinetuneTask kFinetuneTasks[] = {FinetuneTask::CC, FinetuneTask::MPC, FinetuneTask::T2I,
                                                  FinetuneTask::Q2P, FinetuneTask::I2P};
std::string finetune_task_name(FinetuneTask task);
// ConfigError on an unknown name.
FinetuneTask parse_finetune_task(const std::string& name);

struct FinetuneConfig {
  double learning_rate = 1e-4;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  std::size_t eval_pool = 200;
  double clip_norm = 5.0;
  // Overrides the checkpoint's text/fusion split K for this fine-tune.
  std::optional<std::size_t> text_layers;

  KeyValues to_key_values() const;
  static FinetuneConfig from_key_values(const KeyValues& kv, const std::string& context);
  void validate() const;
};

/// Fraction of queries whose true candidate is among the k highest dot
/// products; ties rank the lower candidate index first.
double recall_at_k(const Tensor& queries, const Tensor& candidates, std::span<const std::size_t> ground_truth,
                   std::size_t k);

/// A fine-tuned backbone plus, for classification, a linear head on the
/// fused text [CLS].
struct TaskState {
  FinetuneTask task = FinetuneTask::CC;
  ModelState model;
  Linear head;  // classification only
  std::size_t n_classes = 0;
  int label_offset = 0;  // concept id of class 0
  std::vector<double> epoch_losses;
  KeyValues config;  // fine-tune settings and provenance
};

inline constexpr char kTaskStateMagic[] = "CMMFT001";
inline constexpr std::uint32_t kTaskStateVersion = 1;
void save_task_state(const std::filesystem::path& path, const TaskState& state);
TaskState load_task_state(const std::filesystem::path& path);

// Label of a record for a classification state; DataError when it falls
// outside [0, n_classes).
std::size_t class_label(const TaskState& state, const PairRecord& record);

Tensor classifier_logits(Graph& g, const TaskState& state, const PairBatch& batch);
std::vector<std::size_t> predict_classes(const TaskState& state, const Corpus& corpus,
                                         std::span<const PairRecord> records);
double classification_accuracy(const TaskState& state, const Corpus& corpus, std::span<const PairRecord> records);

/// Trains head and backbone end to end with cross-entropy on `train`.
TaskState finetune_classifier(const ModelState& pretrained, const Corpus& corpus,
                              std::span<const PairRecord> train, std::size_t n_classes, int label_offset,
                              const FinetuneConfig& config, FinetuneTask task = FinetuneTask::CC);

/// Contrastive fine-tuning: T2I aligns f(text) with g(image), Q2P f(query)
/// with h(target pair), I2P g(query image) with h(target pair).
TaskState finetune_retrieval(const ModelState& pretrained, const Corpus& corpus, FinetuneTask task,
                             const FinetuneConfig& config);

// Fine-tunes `task` on its training split of the corpus.
TaskState finetune_task(const ModelState& pretrained, const Corpus& corpus, FinetuneTask task,
                        const FinetuneConfig& config);

// Embeddings in chunks without keeping a graph alive; rows are unit norm.
Tensor embed_texts(const ModelState& model, std::span<const TokenIds> texts);
Tensor embed_images(const ModelState& model, const Tensor& pixels);
Tensor embed_pairs(const ModelState& model, std::span<const TokenIds> texts, const Tensor& pixels);

struct RetrievalScores {
  double forward = 0.0;  // t2i, q2p or i2p
  double reverse = 0.0;  // i2t for T2I, i2pi for I2P; unused for Q2P
  std::vector<std::uint64_t> query_ids;
};
RetrievalScores evaluate_retrieval(const TaskState& state, const Corpus& corpus, std::size_t pool);

struct EvalReport {
  double cc = 0, mpc = 0, t2i = 0, i2t = 0, q2p = 0, i2p = 0, i2pi = 0;
  std::uint64_t seed = 0;
  std::string checkpoint;

  double meta_average() const;
  std::string to_json() const;
};

class MissingTaskError : public std::runtime_error {
 public:
  explicit MissingTaskError(std::vector<std::string> missing);
  const std::vector<std::string>& missing() const { return missing_; }

 private:
  std::vector<std::string> missing_;
};

std::filesystem::path task_state_path(const std::filesystem::path& dir, FinetuneTask task);

/// Scores the five task states found in `dir` (cc.state, mpc.state, ...) on
/// the held-out splits. Throws MissingTaskError listing absent states.
EvalReport evaluate_suite(const std::filesystem::path& dir, const Corpus& corpus, std::size_t pool);

/// In-memory variant: fine-tune every task from `pretrained` and score.
EvalReport finetune_and_evaluate(const ModelState& pretrained, const Corpus& corpus, const FinetuneConfig& config);

/// One row per record: concept id, then f, g and h (3·proj_dim columns).
void export_embeddings(const ModelState& model, const Corpus& corpus, std::span<const PairRecord> records,
                       const std::filesystem::path& out);

}  // namespace omniflux
