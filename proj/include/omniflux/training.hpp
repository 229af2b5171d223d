#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "omniflux/binary_io.hpp"
#include "omniflux/data.hpp"
#include "omniflux/objectives.hpp"
#include "omniflux/random.hpp"
#include "omniflux/teachers.hpp"

namespace omniflux {

enum class TaskSet { ImageText5, Omni9 };
std::string task_set_name(TaskSet t);

// Bernoulli(p) choice of ImageText5.
TaskSet round_robin_pick(Rng& rng, double p_image_text);

struct TrainConfig {
  double learning_rate = 3e-4;
  std::size_t batch_size = 32;
  std::size_t total_steps = 2000;
  std::size_t stage2_steps = 500;
  std::uint64_t seed = 0;
  double p_image_text = 0.5;
  double clip_norm = 5.0;
  std::size_t checkpoint_every = 0;  // 0: only at the end

  KeyValues to_key_values() const;
  static TrainConfig from_key_values(const KeyValues& kv, const std::string& context);
  void validate() const;
};

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  static AdamState for_params(std::span<const Tensor> params);
};

// Standard bias-corrected Adam; gradients are zeroed afterwards.
void adam_update(std::span<const Tensor> params, AdamState& state, double lr);

// Scales gradients so their global L2 norm is at most max_norm; returns the
// norm before clipping.
double clip_grad_norm(std::span<const Tensor> params, double max_norm);

struct StepMetrics {
  std::size_t step = 0;
  TaskSet task_set = TaskSet::ImageText5;
  LossComponents losses;
  double total = 0.0;
  double lr = 0.0;
  std::size_t text_layers = 0;

  std::string to_json() const;
};

struct StepContext {
  const Teachers& teachers;
  const TaskWeights& weights;
  double lr = 3e-4;
  double clip_norm = 5.0;
};

/// One forward set, one backward, one Adam update. Non-finite losses throw
/// NumericError naming the step, task set and components.
StepMetrics pretrain_step(ModelState& state, const PairBatch& batch, AdamState& optimizer, const StepContext& ctx,
                          Rng& rng, std::size_t step);
StepMetrics pretrain_step(ModelState& state, const CrossPairBatch& batch, AdamState& optimizer,
                          const StepContext& ctx, std::size_t step);

struct LoaderState {
  std::string rng;
  std::uint64_t epoch = 0;
  std::uint64_t cursor = 0;
  std::vector<std::uint64_t> order;
};

/// Everything needed to continue training bit-identically.
struct TrainingState {
  ModelState model;
  AdamState optimizer;
  std::string rng;  // serialized training engine
  std::optional<LoaderState> pair_loader;
  std::optional<LoaderState> cross_loader;
  int stage = 1;
  std::uint64_t step = 0;          // completed steps within the stage
  std::size_t base_text_layers = 0;  // K restored after stage 2
  KeyValues config;                // provenance echo
};

inline constexpr char kCheckpointMagic[] = "CMMCK001";
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Tensor section shared by checkpoints and fine-tuned task states: u32
// count, then name, rank, u32 dims and f64 values per tensor. Reading fills
// the given tensors in place and requires matching names and shapes.
void write_tensors(ByteWriter& w, std::span<const std::pair<std::string, Tensor>> tensors);
void read_tensors(ByteReader& r, std::span<const std::pair<std::string, Tensor>> tensors);

void save_checkpoint(const std::filesystem::path& path, const TrainingState& state);
// Throws FormatError (with byte offset) on any corruption; never returns a
// partially read state.
TrainingState load_checkpoint(const std::filesystem::path& path);

struct PretrainOptions {
  int stage = 1;
  TrainConfig train;
  TaskWeights weights;
  TeacherConfig teachers;
  std::optional<std::filesystem::path> checkpoint_path;
  std::optional<std::filesystem::path> metrics_path;
  // Stop early after this many steps of the stage (simulated interruption).
  std::optional<std::size_t> stop_at;
  std::function<void(const StepMetrics&)> on_step;
};

TrainingState fresh_training_state(const ModelConfig& model, const TrainConfig& train);

/// Stage 1 keeps K fixed and mixes both task sets. Stage 2 resamples K
/// uniformly from {0..total_layers} before every step and uses the 5
/// image-text tasks only; it starts from a completed stage-1 state (or
/// resumes a stage-2 one).
TrainingState run_pretraining(const Corpus& corpus, TrainingState state, const PretrainOptions& options);

}  // namespace omniflux
