#include "omniflux/training.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "omniflux/binary_io.hpp"
#include "omniflux/errors.hpp"

namespace omniflux {

namespace {

constexpr std::uint64_t kPairLoaderStream = 101;
constexpr std::uint64_t kCrossLoaderStream = 102;
constexpr std::uint64_t kStageStream = 200;

bool finite(double v) { return std::isfinite(v); }

std::string describe(const LossComponents& losses) {
  std::string out;
  for (const auto& [name, value] : losses) out += (out.empty() ? "" : ", ") + name + "=" + std::to_string(value);
  return out;
}

template <class StepLossT>
void check_finite(const StepLossT& loss, TaskSet task, std::size_t step) {
  bool ok = finite(loss.total.item());
  for (const auto& c : loss.components) ok = ok && finite(c.second);
  if (!ok) {
    throw NumericError("non-finite loss at step " + std::to_string(step) + " (task set " + task_set_name(task) +
                       "): total=" + std::to_string(loss.total.item()) + "; " + describe(loss.components));
  }
}

template <class StepLossT>
StepMetrics finish_step(ModelState& state, const StepLossT& loss, TaskSet task, AdamState& optimizer,
                        const StepContext& ctx, std::size_t step, Graph& g) {
  check_finite(loss, task, step);
  const auto params = state.parameters();
  for (const auto& p : params) p.zero_grad();
  if (loss.total.requires_grad()) g.backward(loss.total);
  g.clear();
  if (ctx.clip_norm > 0) clip_grad_norm(params, ctx.clip_norm);
  adam_update(params, optimizer, ctx.lr);
  clamp_temperature(state);

  StepMetrics m;
  m.step = step;
  m.task_set = task;
  m.losses = loss.components;
  m.total = loss.total.item();
  m.lr = ctx.lr;
  m.text_layers = state.config.text_layers;
  return m;
}

}  // namespace

std::string task_set_name(TaskSet t) { return t == TaskSet::ImageText5 ? "image_text" : "omni"; }

TaskSet round_robin_pick(Rng& rng, double p_image_text) {
  if (!(p_image_text >= 0.0 && p_image_text <= 1.0)) throw ContractError("round_robin_pick: p must lie in [0, 1]");
  return uniform01(rng) < p_image_text ? TaskSet::ImageText5 : TaskSet::Omni9;
}

// ---------------------------------------------------------------- config

KeyValues TrainConfig::to_key_values() const {
  auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  return {
      {"learning_rate", num(learning_rate)},
      {"batch_size", std::to_string(batch_size)},
      {"total_steps", std::to_string(total_steps)},
      {"stage2_steps", std::to_string(stage2_steps)},
      {"seed", std::to_string(seed)},
      {"p_image_text", num(p_image_text)},
      {"clip_norm", num(clip_norm)},
      {"checkpoint_every", std::to_string(checkpoint_every)},
  };
}

TrainConfig TrainConfig::from_key_values(const KeyValues& kv, const std::string& context) {
  TrainConfig c;
  for (const auto& [key, value] : kv) {
    const std::string what = context + ": " + key;
    if (key == "learning_rate") c.learning_rate = parse_double(value, what);
    else if (key == "batch_size") c.batch_size = parse_u64(value, what);
    else if (key == "total_steps") c.total_steps = parse_u64(value, what);
    else if (key == "stage2_steps") c.stage2_steps = parse_u64(value, what);
    else if (key == "seed") c.seed = parse_u64(value, what);
    else if (key == "p_image_text") c.p_image_text = parse_double(value, what);
    else if (key == "clip_norm") c.clip_norm = parse_double(value, what);
    else if (key == "checkpoint_every") c.checkpoint_every = parse_u64(value, what);
    else throw ConfigError(context + ": unknown key '" + key + "'");
  }
  return c;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("train config: " + msg); };
  if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) fail("learning_rate must be finite and nonnegative");
  if (batch_size < 2) fail("batch_size must be at least 2 (ITM needs in-batch negatives)");
  if (!(p_image_text >= 0 && p_image_text <= 1)) fail("p_image_text must lie in [0, 1]");
  if (!(clip_norm >= 0)) fail("clip_norm must be nonnegative");
}

// ---------------------------------------------------------------- optimizer

AdamState AdamState::for_params(std::span<const Tensor> params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.numel(), 0.0);
    s.v.emplace_back(p.numel(), 0.0);
  }
  return s;
}

void adam_update(std::span<const Tensor> params, AdamState& state, double lr) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("adam_update: optimizer state does not match the parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].numel() || state.v[i].size() != params[i].numel()) {
      throw DimensionError("adam_update: moment shape mismatch for parameter " + std::to_string(i));
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    auto w = p.data();
    // A parameter the step never touched has a zero gradient; whether a grad
    // buffer happens to exist must not change the update (resume relies on it).
    const bool has = p.has_grad();
    std::span<const double> g = has ? p.grad() : std::span<const double>{};
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = has ? g[k] : 0.0;
      m[k] = state.beta1 * m[k] + (1 - state.beta1) * gk;
      v[k] = state.beta2 * v[k] + (1 - state.beta2) * gk * gk;
      const double mh = m[k] / c1, vh = v[k] / c2;
      w[k] -= lr * mh / (std::sqrt(vh) + state.eps);
    }
    if (has) p.zero_grad();
  }
}

double clip_grad_norm(std::span<const Tensor> params, double max_norm) {
  double ss = 0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) ss += g * g;
  }
  const double norm = std::sqrt(ss);
  if (norm > max_norm && norm > 0) {
    const double s = max_norm / norm;
    for (const auto& p : params) {
      if (!p.has_grad()) continue;
      for (double& g : p.grad()) g *= s;
    }
  }
  return norm;
}

// ---------------------------------------------------------------- steps

std::string StepMetrics::to_json() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["task_set"] = task_set_name(task_set);
  nlohmann::ordered_json l = nlohmann::ordered_json::object();
  for (const auto& [name, value] : losses) l[name] = value;
  j["losses"] = l;
  j["total"] = total;
  j["lr"] = lr;
  j["K"] = text_layers;
  return j.dump();
}

StepMetrics pretrain_step(ModelState& state, const PairBatch& batch, AdamState& optimizer, const StepContext& ctx,
                          Rng& rng, std::size_t step) {
  Graph g;
  ImageTextStepLoss loss = image_text_step_loss(g, state, batch, ctx.teachers, ctx.weights, rng);
  return finish_step(state, loss, TaskSet::ImageText5, optimizer, ctx, step, g);
}

StepMetrics pretrain_step(ModelState& state, const CrossPairBatch& batch, AdamState& optimizer,
                          const StepContext& ctx, std::size_t step) {
  Graph g;
  StepLoss loss = omni_step_loss(g, state, batch, ctx.weights);
  return finish_step(state, loss, TaskSet::Omni9, optimizer, ctx, step, g);
}

// ---------------------------------------------------------------- checkpoints

namespace {

void write_loader(ByteWriter& w, const std::optional<LoaderState>& s) {
  w.u32(s ? 1 : 0);
  if (!s) return;
  w.str(s->rng);
  w.u64(s->epoch);
  w.u64(s->cursor);
  w.u64(s->order.size());
  for (auto v : s->order) w.u64(v);
}

std::optional<LoaderState> read_loader(ByteReader& r) {
  const auto present = r.u32();
  if (present > 1) r.fail("bad loader presence flag");
  if (!present) return std::nullopt;
  LoaderState s;
  s.rng = r.str();
  s.epoch = r.u64();
  s.cursor = r.u64();
  const auto n = r.u64();
  if (n > (1u << 28)) r.fail("implausible loader order length");
  s.order.resize(n);
  for (auto& v : s.order) v = r.u64();
  return s;
}

}  // namespace

void write_tensors(ByteWriter& w, std::span<const std::pair<std::string, Tensor>> tensors) {
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t.data()) w.f64(v);
  }
}

void read_tensors(ByteReader& r, std::span<const std::pair<std::string, Tensor>> tensors) {
  if (r.u32() != tensors.size()) r.fail("tensor count does not match the model config");
  for (auto [name, t] : tensors) {
    if (r.str() != name) r.fail("unexpected tensor (wanted '" + name + "')");
    if (r.u32() != t.rank()) r.fail("rank mismatch for " + name);
    for (auto d : t.shape()) {
      if (r.u32() != d) r.fail("shape mismatch for " + name);
    }
    for (double& v : t.data()) v = r.f64();
  }
}

void save_checkpoint(const std::filesystem::path& path, const TrainingState& state) {
  ByteWriter w;
  w.bytes(std::string_view(kCheckpointMagic, 8));
  w.u32(kCheckpointVersion);

  KeyValues block = state.config;
  for (const auto& [k, v] : state.model.config.to_key_values()) block["model." + k] = v;
  w.str(format_key_values(block));

  const auto named = state.model.named_parameters();
  write_tensors(w, named);

  const AdamState& opt = state.optimizer;
  if (opt.m.size() != named.size() || opt.v.size() != named.size()) {
    throw ContractError("save_checkpoint: optimizer state does not match the model");
  }
  w.u64(opt.step);
  w.f64(opt.beta1);
  w.f64(opt.beta2);
  w.f64(opt.eps);
  for (std::size_t i = 0; i < named.size(); ++i) {
    w.u64(opt.m[i].size());
    for (double v : opt.m[i]) w.f64(v);
    for (double v : opt.v[i]) w.f64(v);
  }

  w.str(state.rng);
  write_loader(w, state.pair_loader);
  write_loader(w, state.cross_loader);
  w.u32(static_cast<std::uint32_t>(state.stage));
  w.u64(state.step);
  w.u32(static_cast<std::uint32_t>(state.model.config.text_layers));
  w.u32(static_cast<std::uint32_t>(state.base_text_layers));
  write_file_atomic(path, w.buffer());
}

TrainingState load_checkpoint(const std::filesystem::path& path) {
  const std::string data = read_file(path);
  ByteReader r(data, path.string());
  if (r.bytes(std::min<std::size_t>(8, data.size())) != std::string_view(kCheckpointMagic, 8)) {
    throw FormatError(path.string() + ": not a checkpoint (magic mismatch, expected CMMCK001)");
  }
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }

  KeyValues block;
  try {
    block = parse_key_values(r.str(), path.string() + " config block");
  } catch (const ConfigError& e) {
    r.fail(e.what());
  }
  KeyValues model_kv, rest;
  for (const auto& [k, v] : block) (k.starts_with("model.") ? model_kv[k.substr(6)] : rest[k]) = v;

  TrainingState s;
  try {
    s.model = init_model(ModelConfig::from_key_values(model_kv, path.string()));
  } catch (const ConfigError& e) {
    r.fail(std::string("invalid model config: ") + e.what());
  }
  s.config = rest;

  auto named = s.model.named_parameters();
  read_tensors(r, named);

  s.optimizer.step = r.u64();
  s.optimizer.beta1 = r.f64();
  s.optimizer.beta2 = r.f64();
  s.optimizer.eps = r.f64();
  for (const auto& [name, t] : named) {
    if (r.u64() != t.numel()) r.fail("optimizer moment size mismatch for " + name);
    s.optimizer.m.emplace_back(t.numel());
    s.optimizer.v.emplace_back(t.numel());
    for (double& v : s.optimizer.m.back()) v = r.f64();
    for (double& v : s.optimizer.v.back()) v = r.f64();
  }

  s.rng = r.str();
  s.pair_loader = read_loader(r);
  s.cross_loader = read_loader(r);
  s.stage = static_cast<int>(r.u32());
  if (s.stage != 1 && s.stage != 2) r.fail("bad stage");
  s.step = r.u64();
  const auto k = r.u32();
  s.base_text_layers = r.u32();
  if (k > s.model.config.total_layers || s.base_text_layers > s.model.config.total_layers) r.fail("K out of range");
  split_layers(s.model, k);
  if (!r.at_end()) r.fail("trailing bytes");
  return s;
}

// ---------------------------------------------------------------- driver

TrainingState fresh_training_state(const ModelConfig& model, const TrainConfig& train) {
  train.validate();
  TrainingState s;
  s.model = init_model(model);
  s.optimizer = AdamState::for_params(s.model.parameters());
  s.rng = rng_state(derive_rng(train.seed, 100));
  s.base_text_layers = model.text_layers;
  return s;
}

namespace {

template <class Loader>
LoaderState capture(Loader& loader) {
  LoaderState s;
  s.rng = rng_state(loader.rng());
  s.epoch = loader.epoch();
  s.cursor = loader.cursor();
  s.order.assign(loader.order().begin(), loader.order().end());
  return s;
}

template <class Loader>
void restore(Loader& loader, const LoaderState& s) {
  Rng rng;
  restore_rng_state(rng, s.rng);
  loader.restore(rng, s.epoch, s.cursor, std::vector<std::size_t>(s.order.begin(), s.order.end()));
}

// Keeps the first `keep` lines of an existing metrics log.
void truncate_metrics(const std::filesystem::path& path, std::uint64_t keep) {
  std::string kept;
  if (keep > 0 && std::filesystem::exists(path)) {
    std::istringstream in(read_file(path));
    std::string line;
    for (std::uint64_t i = 0; i < keep && std::getline(in, line); ++i) kept += line + "\n";
  }
  write_file_atomic(path, kept);
}

}  // namespace

TrainingState run_pretraining(const Corpus& corpus, TrainingState state, const PretrainOptions& options) {
  const TrainConfig& tc = options.train;
  tc.validate();
  options.weights.validate();
  if (options.stage != 1 && options.stage != 2) throw ConfigError("stage must be 1 or 2");
  if (corpus.config().vocab_size > state.model.config.vocab_size ||
      corpus.config().image_side != state.model.config.image_side) {
    throw ConfigError("corpus vocabulary/image size does not fit the model config");
  }

  Rng rng;
  restore_rng_state(rng, state.rng);
  if (options.stage == 2) {
    if (state.stage == 1) {
      if (state.step < tc.total_steps) {
        throw ContractError("stage 2 needs a completed stage-1 checkpoint (have " + std::to_string(state.step) + "/" +
                            std::to_string(tc.total_steps) + " steps)");
      }
      state.stage = 2;
      state.step = 0;
      rng = derive_rng(tc.seed, kStageStream);
    }
  } else if (state.stage != 1) {
    throw ContractError("cannot continue stage 1 from a stage-2 checkpoint");
  }

  const std::size_t target = options.stage == 1 ? tc.total_steps : tc.stage2_steps;
  const std::size_t stop = std::min<std::size_t>(target, options.stop_at.value_or(target));

  PairLoader pairs =
      load_pair_batches(corpus, corpus_files::kPairs, tc.batch_size, derive_rng(tc.seed, kPairLoaderStream), true);
  CrossPairLoader cross = load_crosspair_batches(corpus, corpus_files::kCrossPairs, tc.batch_size,
                                                 derive_rng(tc.seed, kCrossLoaderStream), true);
  if (state.pair_loader) restore(pairs, *state.pair_loader);
  if (state.cross_loader) restore(cross, *state.cross_loader);

  Teachers teachers(options.teachers);
  StepContext ctx{teachers, options.weights, tc.learning_rate, tc.clip_norm};

  std::ofstream metrics;
  if (options.metrics_path) {
    truncate_metrics(*options.metrics_path, state.step);
    metrics.open(*options.metrics_path, std::ios::app);
    if (!metrics) throw IoError("cannot open metrics log " + options.metrics_path->string());
  }

  auto snapshot = [&] {
    state.rng = rng_state(rng);
    state.pair_loader = capture(pairs);
    state.cross_loader = capture(cross);
  };

  while (state.step < stop) {
    const std::size_t step = state.step + 1;
    TaskSet task = TaskSet::ImageText5;
    if (options.stage == 2) {
      split_layers(state.model, uniform_index(rng, state.model.config.total_layers + 1));
    } else {
      task = round_robin_pick(rng, tc.p_image_text);
    }
    StepMetrics m = task == TaskSet::ImageText5
                        ? pretrain_step(state.model, pairs.next(), state.optimizer, ctx, rng, step)
                        : pretrain_step(state.model, cross.next(), state.optimizer, ctx, step);
    if (metrics.is_open()) {
      metrics << m.to_json() << "\n";
      metrics.flush();
      if (!metrics) throw IoError("write failed: " + options.metrics_path->string());
    }
    if (options.on_step) options.on_step(m);
    state.step = step;
    if (options.checkpoint_path && tc.checkpoint_every > 0 && step % tc.checkpoint_every == 0 && step < target) {
      snapshot();
      save_checkpoint(*options.checkpoint_path, state);
    }
  }
  snapshot();
  if (state.step >= target) {
    if (options.stage == 2) split_layers(state.model, state.base_text_layers);
    if (options.checkpoint_path) save_checkpoint(*options.checkpoint_path, state);
  }
  return state;
}

}  // namespace omniflux
