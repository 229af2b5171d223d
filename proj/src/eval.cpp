#include "omniflux/eval.hpp"

#include <cmath>
#include <json.hpp>
#include <sstream>

#include "omniflux/binary_io.hpp"
#include "omniflux/errors.hpp"
#include "omniflux/objectives.hpp"
#include "omniflux/training.hpp"

namespace omniflux {

namespace {

constexpr std::size_t kEmbedChunk = 64;
constexpr std::uint64_t kHeadStream = 300;
constexpr std::uint64_t kLoaderStream = 301;

std::string number(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

std::string finetune_task_name(FinetuneTask task) {
  switch (task) {
    case FinetuneTask::CC: return "cc";
    case FinetuneTask::MPC: return "mpc";
    case FinetuneTask::T2I: return "t2i";
    case FinetuneTask::Q2P: return "q2p";
    case FinetuneTask::I2P: return "i2p";
  }
  return "?";
}

FinetuneTask parse_finetune_task(const std::string& name) {
  for (auto t : kFinetuneTasks) {
    if (finetune_task_name(t) == name) return t;
  }
  throw ConfigError("unknown task '" + name + "' (expected cc, mpc, t2i, q2p or i2p)");
}

// ---------------------------------------------------------------- config

KeyValues FinetuneConfig::to_key_values() const {
  KeyValues kv{
      {"learning_rate", number(learning_rate)}, {"epochs", std::to_string(epochs)},
      {"batch_size", std::to_string(batch_size)}, {"seed", std::to_string(seed)},
      {"eval_pool", std::to_string(eval_pool)},   {"clip_norm", number(clip_norm)},
  };
  if (text_layers) kv["text_layers"] = std::to_string(*text_layers);
  return kv;
}

FinetuneConfig FinetuneConfig::from_key_values(const KeyValues& kv, const std::string& context) {
  FinetuneConfig c;
  for (const auto& [key, value] : kv) {
    const std::string what = context + ": " + key;
    if (key == "learning_rate") c.learning_rate = parse_double(value, what);
    else if (key == "epochs") c.epochs = parse_u64(value, what);
    else if (key == "batch_size") c.batch_size = parse_u64(value, what);
    else if (key == "seed") c.seed = parse_u64(value, what);
    else if (key == "eval_pool") c.eval_pool = parse_u64(value, what);
    else if (key == "clip_norm") c.clip_norm = parse_double(value, what);
    else if (key == "text_layers") c.text_layers = parse_u64(value, what);
    else throw ConfigError(context + ": unknown key '" + key + "'");
  }
  return c;
}

void FinetuneConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("finetune config: " + msg); };
  if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) fail("learning_rate must be finite and nonnegative");
  if (batch_size == 0) fail("batch_size must be positive");
  if (eval_pool == 0) fail("eval_pool must be positive");
  if (!(clip_norm >= 0)) fail("clip_norm must be nonnegative");
}

// ---------------------------------------------------------------- recall

double recall_at_k(const Tensor& queries, const Tensor& candidates, std::span<const std::size_t> ground_truth,
                   std::size_t k) {
  if (queries.rank() != 2 || candidates.rank() != 2 || queries.dim(1) != candidates.dim(1)) {
    throw DimensionError("recall_at_k: need [Q,d] queries and [C,d] candidates, got " + shape_str(queries.shape()) +
                         " and " + shape_str(candidates.shape()));
  }
  const std::size_t q = queries.dim(0), c = candidates.dim(0), d = queries.dim(1);
  if (ground_truth.size() != q) throw ContractError("recall_at_k: one ground-truth index per query");
  if (k == 0 || k > c) {
    throw ContractError("recall_at_k: k=" + std::to_string(k) + " outside [1, " + std::to_string(c) + "]");
  }
  if (q == 0) return 0.0;
  auto qd = queries.data(), cd = candidates.data();
  std::size_t hits = 0;
  std::vector<double> scores(c);
  for (std::size_t i = 0; i < q; ++i) {
    const std::size_t truth = ground_truth[i];
    if (truth >= c) throw ContractError("recall_at_k: ground-truth index out of range");
    for (std::size_t j = 0; j < c; ++j) {
      double s = 0;
      for (std::size_t x = 0; x < d; ++x) s += qd[i * d + x] * cd[j * d + x];
      scores[j] = s;
    }
    // Rank of the true candidate under (score desc, index asc).
    std::size_t ahead = 0;
    for (std::size_t j = 0; j < c && ahead < k; ++j) {
      ahead += scores[j] > scores[truth] || (scores[j] == scores[truth] && j < truth);
    }
    hits += ahead < k;
  }
  return static_cast<double>(hits) / static_cast<double>(q);
}

// ---------------------------------------------------------------- task states

void save_task_state(const std::filesystem::path& path, const TaskState& state) {
  ByteWriter w;
  w.bytes(std::string_view(kTaskStateMagic, 8));
  w.u32(kTaskStateVersion);
  KeyValues block = state.config;
  block["task"] = finetune_task_name(state.task);
  block["n_classes"] = std::to_string(state.n_classes);
  block["label_offset"] = std::to_string(state.label_offset);
  for (const auto& [k, v] : state.model.config.to_key_values()) block["model." + k] = v;
  w.str(format_key_values(block));
  auto tensors = state.model.named_parameters();
  if (state.n_classes > 0) {
    tensors.emplace_back("head.weight", state.head.weight);
    tensors.emplace_back("head.bias", state.head.bias);
  }
  write_tensors(w, tensors);
  w.u32(static_cast<std::uint32_t>(state.epoch_losses.size()));
  for (double v : state.epoch_losses) w.f64(v);
  write_file_atomic(path, w.buffer());
}

TaskState load_task_state(const std::filesystem::path& path) {
  const std::string data = read_file(path);
  ByteReader r(data, path.string());
  if (r.bytes(std::min<std::size_t>(8, data.size())) != std::string_view(kTaskStateMagic, 8)) {
    throw FormatError(path.string() + ": not a fine-tuned task state (magic mismatch, expected CMMFT001)");
  }
  if (const auto v = r.u32(); v != kTaskStateVersion) {
    throw FormatError(path.string() + ": unsupported task state version " + std::to_string(v));
  }
  TaskState s;
  KeyValues model_kv;
  try {
    for (const auto& [k, v] : parse_key_values(r.str(), path.string() + " config block")) {
      if (k.starts_with("model.")) model_kv[k.substr(6)] = v;
      else if (k == "task") s.task = parse_finetune_task(v);
      else if (k == "n_classes") s.n_classes = parse_u64(v, k);
      else if (k == "label_offset") s.label_offset = static_cast<int>(parse_u64(v, k));
      else s.config[k] = v;
    }
    s.model = init_model(ModelConfig::from_key_values(model_kv, path.string()));
  } catch (const ConfigError& e) {
    r.fail(e.what());
  }
  auto tensors = s.model.named_parameters();
  if (s.n_classes > 0) {
    s.head = {Tensor::zeros({s.model.config.hidden_dim, s.n_classes}, true), Tensor::zeros({s.n_classes}, true)};
    tensors.emplace_back("head.weight", s.head.weight);
    tensors.emplace_back("head.bias", s.head.bias);
  }
  read_tensors(r, tensors);
  const auto n = r.u32();
  if (n > 1000000) r.fail("implausible loss history length");
  for (std::uint32_t i = 0; i < n; ++i) s.epoch_losses.push_back(r.f64());
  if (!r.at_end()) r.fail("trailing bytes");
  return s;
}

// ---------------------------------------------------------------- classification

std::size_t class_label(const TaskState& state, const PairRecord& record) {
  const long label = static_cast<long>(record.concept_id) - state.label_offset;
  if (label < 0 || static_cast<std::size_t>(label) >= state.n_classes) {
    throw DataError("record " + std::to_string(record.record_id) + ": label " + std::to_string(label) +
                    " outside [0, " + std::to_string(state.n_classes) + ")");
  }
  return static_cast<std::size_t>(label);
}

Tensor classifier_logits(Graph& g, const TaskState& state, const PairBatch& batch) {
  if (state.n_classes == 0) throw ContractError("classifier_logits: state has no classification head");
  SeqBatch t = encode_text(g, state.model, batch.tokens);
  SeqBatch v = encode_image(g, state.model, batch.pixels);
  return linear(g, state.head, fused_text_cls(g, fuse(g, state.model, t, v)));
}

std::vector<std::size_t> predict_classes(const TaskState& state, const Corpus& corpus,
                                         std::span<const PairRecord> records) {
  std::vector<std::size_t> out;
  for (std::size_t b = 0; b < records.size(); b += kEmbedChunk) {
    auto chunk = records.subspan(b, std::min(kEmbedChunk, records.size() - b));
    Graph g;
    Tensor logits = classifier_logits(g, state, corpus.make_batch(chunk));
    const std::size_t n = state.n_classes;
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      auto row = logits.data().subspan(i * n, n);
      out.push_back(static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  return out;
}

double classification_accuracy(const TaskState& state, const Corpus& corpus, std::span<const PairRecord> records) {
  if (records.empty()) return 0.0;
  const auto predicted = predict_classes(state, corpus, records);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < records.size(); ++i) correct += predicted[i] == class_label(state, records[i]);
  return static_cast<double>(correct) / static_cast<double>(records.size());
}

namespace {

TaskState start_state(const ModelState& pretrained, FinetuneTask task, const FinetuneConfig& config) {
  config.validate();
  TaskState s;
  s.task = task;
  s.model = pretrained.clone();
  if (config.text_layers) split_layers(s.model, *config.text_layers);
  s.config = config.to_key_values();
  return s;
}

// Runs `epochs` passes of Adam over the loader; loss_fn builds the scalar loss.
template <class Loader, class LossFn>
void fit(TaskState& s, std::vector<Tensor> params, Loader& loader, const FinetuneConfig& config, LossFn loss_fn) {
  AdamState opt = AdamState::for_params(params);
  const std::size_t per_epoch = loader.batches_per_epoch();
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double sum = 0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      Graph g;
      Tensor loss = loss_fn(g, loader.next());
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw NumericError("non-finite " + finetune_task_name(s.task) + " fine-tuning loss at epoch " +
                           std::to_string(epoch) + ", batch " + std::to_string(b));
      }
      sum += value;
      for (const auto& p : params) p.zero_grad();
      if (loss.requires_grad()) g.backward(loss);
      if (config.clip_norm > 0) clip_grad_norm(params, config.clip_norm);
      adam_update(params, opt, config.learning_rate);
      clamp_temperature(s.model);
    }
    s.epoch_losses.push_back(sum / static_cast<double>(per_epoch));
  }
}

}  // namespace

TaskState finetune_classifier(const ModelState& pretrained, const Corpus& corpus,
                              std::span<const PairRecord> train, std::size_t n_classes, int label_offset,
                              const FinetuneConfig& config, FinetuneTask task) {
  if (n_classes == 0) throw ConfigError("finetune_classifier: n_classes must be positive");
  if (train.empty()) throw DataError("finetune_classifier: empty training split");
  TaskState s = start_state(pretrained, task, config);
  s.n_classes = n_classes;
  s.label_offset = label_offset;
  for (const auto& r : train) class_label(s, r);

  Rng init = derive_rng(config.seed, kHeadStream);
  std::normal_distribution<double> normal(0.0, 0.02);
  std::vector<double> w(pretrained.config.hidden_dim * n_classes);
  for (double& x : w) x = normal(init);
  s.head = {Tensor::from({pretrained.config.hidden_dim, n_classes}, std::move(w), true),
            Tensor::zeros({n_classes}, true)};

  std::vector<Tensor> params = s.model.parameters();
  params.push_back(s.head.weight);
  params.push_back(s.head.bias);
  PairLoader loader(corpus, {train.begin(), train.end()}, config.batch_size, derive_rng(config.seed, kLoaderStream));
  fit(s, params, loader, config, [&](Graph& g, const PairBatch& batch) {
    TokenIds labels;
    for (int c : batch.concept_ids) labels.push_back(static_cast<TokenId>(c - label_offset));
    return token_nll(g, classifier_logits(g, s, batch), labels);
  });
  return s;
}

TaskState finetune_retrieval(const ModelState& pretrained, const Corpus& corpus, FinetuneTask task,
                             const FinetuneConfig& config) {
  TaskState s = start_state(pretrained, task, config);
  const ModelState& m = s.model;
  const Rng rng = derive_rng(config.seed, kLoaderStream);
  switch (task) {
    case FinetuneTask::T2I: {
      PairLoader loader = load_pair_batches(corpus, corpus_files::kT2iTrain, config.batch_size, rng);
      fit(s, m.parameters(), loader, config, [&](Graph& g, const PairBatch& b) {
        Tensor f = project_text(g, m, encode_text(g, m, b.tokens));
        Tensor v = project_image(g, m, encode_image(g, m, b.pixels));
        return contrastive_sum(g, g.matmul_nt(f, v), inverse_temperature(g, m));
      });
      break;
    }
    case FinetuneTask::Q2P:
    case FinetuneTask::I2P: {
      const char* file = task == FinetuneTask::Q2P ? corpus_files::kQ2pTrain : corpus_files::kI2pTrain;
      CrossPairLoader loader = load_crosspair_batches(corpus, file, config.batch_size, rng);
      fit(s, m.parameters(), loader, config, [&](Graph& g, const CrossPairBatch& b) {
        Tensor query = task == FinetuneTask::Q2P ? project_text(g, m, encode_text(g, m, b.source_tokens))
                                                 : project_image(g, m, encode_image(g, m, b.source_pixels));
        SeqBatch tt = encode_text(g, m, b.target_tokens);
        SeqBatch tv = encode_image(g, m, b.target_pixels);
        Tensor h = project_fused(g, m, fuse(g, m, tt, tv));
        return contrastive_sum(g, g.matmul_nt(query, h), inverse_temperature(g, m));
      });
      break;
    }
    default:
      throw ContractError("finetune_retrieval: " + finetune_task_name(task) + " is a classification task");
  }
  return s;
}

TaskState finetune_task(const ModelState& pretrained, const Corpus& corpus, FinetuneTask task,
                        const FinetuneConfig& config) {
  const GenConfig& gc = corpus.config();
  switch (task) {
    case FinetuneTask::CC:
      return finetune_classifier(pretrained, corpus, corpus.read_pairs(corpus_files::kCcTrain), gc.n_concepts, 0,
                                 config, task);
    case FinetuneTask::MPC:
      if (gc.mpc_concepts == 0) throw ConfigError("corpus has no MPC concepts");
      return finetune_classifier(pretrained, corpus, corpus.read_pairs(corpus_files::kMpcTrain), gc.mpc_concepts,
                                 static_cast<int>(gc.n_concepts), config, task);
    default:
      return finetune_retrieval(pretrained, corpus, task, config);
  }
}

// ---------------------------------------------------------------- embeddings

namespace {

template <class Fn>
Tensor embed_chunks(std::size_t n, std::size_t width, Fn fn) {
  std::vector<double> out;
  out.reserve(n * width);
  for (std::size_t b = 0; b < n; b += kEmbedChunk) {
    Graph g;
    Tensor e = fn(g, b, std::min(n, b + kEmbedChunk));
    out.insert(out.end(), e.data().begin(), e.data().end());
  }
  return Tensor::from({n, width}, std::move(out));
}

Tensor pixel_rows(const Tensor& pixels, std::size_t begin, std::size_t end) {
  const std::size_t p = pixels.dim(1);
  auto d = pixels.data().subspan(begin * p, (end - begin) * p);
  return Tensor::from({end - begin, p}, std::vector<double>(d.begin(), d.end()));
}

}  // namespace

Tensor embed_texts(const ModelState& model, std::span<const TokenIds> texts) {
  return embed_chunks(texts.size(), model.config.proj_dim, [&](Graph& g, std::size_t b, std::size_t e) {
    return project_text(g, model, encode_text(g, model, texts.subspan(b, e - b)));
  });
}

Tensor embed_images(const ModelState& model, const Tensor& pixels) {
  return embed_chunks(pixels.dim(0), model.config.proj_dim, [&](Graph& g, std::size_t b, std::size_t e) {
    return project_image(g, model, encode_image(g, model, pixel_rows(pixels, b, e)));
  });
}

Tensor embed_pairs(const ModelState& model, std::span<const TokenIds> texts, const Tensor& pixels) {
  if (texts.size() != pixels.dim(0)) throw DimensionError("embed_pairs: one image per text");
  return embed_chunks(texts.size(), model.config.proj_dim, [&](Graph& g, std::size_t b, std::size_t e) {
    SeqBatch t = encode_text(g, model, texts.subspan(b, e - b));
    SeqBatch v = encode_image(g, model, pixel_rows(pixels, b, e));
    return project_fused(g, model, fuse(g, model, t, v));
  });
}

// ---------------------------------------------------------------- scoring

RetrievalScores evaluate_retrieval(const TaskState& state, const Corpus& corpus, std::size_t pool) {
  const ModelState& m = state.model;
  RetrievalScores out;
  auto identity = [](std::size_t n) {
    std::vector<std::size_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = i;
    return v;
  };
  switch (state.task) {
    case FinetuneTask::T2I: {
      auto recs = corpus.read_pairs(corpus_files::kT2iEval);
      recs.resize(std::min(pool, recs.size()));
      const PairBatch b = corpus.make_batch(recs);
      const auto truth = identity(recs.size());
      Tensor f = embed_texts(m, b.tokens), v = embed_images(m, b.pixels);
      out.forward = recall_at_k(f, v, truth, 1);
      out.reverse = recall_at_k(v, f, truth, 1);
      out.query_ids = b.record_ids;
      break;
    }
    case FinetuneTask::Q2P:
    case FinetuneTask::I2P: {
      const bool q2p = state.task == FinetuneTask::Q2P;
      auto recs = corpus.read_crosspairs(q2p ? corpus_files::kQ2pEval : corpus_files::kI2pEval);
      recs.resize(std::min(pool, recs.size()));
      const CrossPairBatch b = corpus.make_batch(recs);
      const auto truth = identity(recs.size());
      Tensor query = q2p ? embed_texts(m, b.source_tokens) : embed_images(m, b.source_pixels);
      out.forward = recall_at_k(query, embed_pairs(m, b.target_tokens, b.target_pixels), truth, 1);
      // I2Pi: the same queries against target images only.
      if (!q2p) out.reverse = recall_at_k(query, embed_images(m, b.target_pixels), truth, 1);
      out.query_ids = b.record_ids;
      break;
    }
    default:
      throw ContractError("evaluate_retrieval: " + finetune_task_name(state.task) + " is a classification task");
  }
  return out;
}

double EvalReport::meta_average() const { return (cc + mpc + t2i + i2t + q2p + i2p + i2pi) / 7.0; }

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["cc"] = cc;
  j["mpc"] = mpc;
  j["t2i"] = t2i;
  j["i2t"] = i2t;
  j["q2p"] = q2p;
  j["i2p"] = i2p;
  j["i2pi"] = i2pi;
  j["meta_avg"] = meta_average();
  j["seed"] = seed;
  j["checkpoint"] = checkpoint;
  return j.dump(2);
}

namespace {

std::string join(const std::vector<std::string>& parts) {
  std::string out;
  for (const auto& p : parts) out += (out.empty() ? "" : ", ") + p;
  return out;
}

void score(EvalReport& report, const TaskState& state, const Corpus& corpus, std::size_t pool) {
  switch (state.task) {
    case FinetuneTask::CC:
      report.cc = classification_accuracy(state, corpus, corpus.read_pairs(corpus_files::kCcEval));
      break;
    case FinetuneTask::MPC:
      report.mpc = classification_accuracy(state, corpus, corpus.read_pairs(corpus_files::kMpcEval));
      break;
    case FinetuneTask::T2I: {
      const auto r = evaluate_retrieval(state, corpus, pool);
      report.t2i = r.forward, report.i2t = r.reverse;
      break;
    }
    case FinetuneTask::Q2P:
      report.q2p = evaluate_retrieval(state, corpus, pool).forward;
      break;
    case FinetuneTask::I2P: {
      const auto r = evaluate_retrieval(state, corpus, pool);
      report.i2p = r.forward, report.i2pi = r.reverse;
      break;
    }
  }
}

}  // namespace

MissingTaskError::MissingTaskError(std::vector<std::string> missing)
    : std::runtime_error("missing fine-tuned task states: " + join(missing)), missing_(std::move(missing)) {}

std::filesystem::path task_state_path(const std::filesystem::path& dir, FinetuneTask task) {
  return dir / (finetune_task_name(task) + ".state");
}

EvalReport evaluate_suite(const std::filesystem::path& dir, const Corpus& corpus, std::size_t pool) {
  std::vector<std::string> missing;
  for (auto t : kFinetuneTasks) {
    if (!std::filesystem::exists(task_state_path(dir, t))) missing.push_back(finetune_task_name(t));
  }
  if (!missing.empty()) throw MissingTaskError(missing);
  EvalReport report;
  for (auto t : kFinetuneTasks) {
    TaskState s = load_task_state(task_state_path(dir, t));
    if (s.task != t) throw FormatError(task_state_path(dir, t).string() + ": holds a different task");
    if (t == FinetuneTask::CC) {
      if (auto it = s.config.find("seed"); it != s.config.end()) report.seed = parse_u64(it->second, "seed");
      if (auto it = s.config.find("checkpoint"); it != s.config.end()) report.checkpoint = it->second;
    }
    score(report, s, corpus, pool);
  }
  return report;
}

EvalReport finetune_and_evaluate(const ModelState& pretrained, const Corpus& corpus, const FinetuneConfig& config) {
  EvalReport report;
  report.seed = config.seed;
  for (auto t : kFinetuneTasks) score(report, finetune_task(pretrained, corpus, t, config), corpus, config.eval_pool);
  return report;
}

void export_embeddings(const ModelState& model, const Corpus& corpus, std::span<const PairRecord> records,
                       const std::filesystem::path& out) {
  const PairBatch b = corpus.make_batch(records);
  const Tensor f = embed_texts(model, b.tokens), v = embed_images(model, b.pixels);
  const Tensor h = embed_pairs(model, b.tokens, b.pixels);
  const std::size_t d = model.config.proj_dim;
  std::ostringstream os;
  os.precision(9);
  for (std::size_t i = 0; i < records.size(); ++i) {
    os << records[i].concept_id;
    for (const Tensor* t : {&f, &v, &h}) {
      for (std::size_t x = 0; x < d; ++x) os << '\t' << t->at(i, x);
    }
    os << '\n';
  }
  write_file_atomic(out, os.str());
}

}  // namespace omniflux
