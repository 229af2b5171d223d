#include <CLI11.hpp>

#include <cstdio>
#ifdef __GLIBC__
#include <malloc.h>
#endif
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>

#include "omniflux/binary_io.hpp"
#include "omniflux/data.hpp"
#include "omniflux/errors.hpp"
#include "omniflux/eval.hpp"
#include "omniflux/loss_check.hpp"
#include "omniflux/training.hpp"

using namespace omniflux;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kFailed = 1, kUsage = 2, kIo = 3, kNumeric = 4, kMissing = 5 };

// Every knob a command can read: defaults < config file < flags.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  GenConfig gen;
  FinetuneConfig finetune;
  TaskWeights weights;
  TeacherConfig teacher;
  KeyValues effective;
};

TaskWeights weights_from(const KeyValues& kv, const std::string& context) {
  TaskWeights w;
  for (const auto& [key, value] : kv) {
    const double v = parse_double(value, context + ": " + key);
    if (key == "mlm") w.mlm = v;
    else if (key == "mim_kl") w.mim_kl = v;
    else if (key == "mim_fr") w.mim_fr = v;
    else if (key == "itc") w.itc = v;
    else if (key == "itm") w.itm = v;
    else if (key == "omni") w.omni.fill(v);
    else {
      bool found = false;
      for (std::size_t i = 0; i < kOmniTerms; ++i) {
        if (key == omni_term_name(i)) w.omni[i] = v, found = true;
      }
      if (!found) throw ConfigError(context + ": unknown key '" + key + "'");
    }
  }
  w.validate();
  return w;
}

TeacherConfig teacher_from(const KeyValues& kv, const ModelConfig& model, const std::string& context) {
  TeacherConfig t;
  for (const auto& [key, value] : kv) {
    if (key == "seed") t.seed = parse_u64(value, context + ": " + key);
    else if (key == "temperature") t.temperature = parse_double(value, context + ": " + key);
    else throw ConfigError(context + ": unknown key '" + key + "'");
  }
  t.pixel_count = model.pixel_count();
  t.feature_dim = model.teacher_feature_dim;
  t.clusters = model.teacher_clusters;
  return t;
}

std::optional<std::uint64_t> env_seed() {
  const char* v = std::getenv("OMNIFLUX_SEED");
  if (!v || !*v) return std::nullopt;
  return parse_u64(v, "OMNIFLUX_SEED");
}

RunConfig load_run_config(const std::string& file, const std::vector<std::string>& overrides,
                          std::optional<std::uint64_t> seed_flag) {
  KeyValues kv;
  if (!file.empty()) kv = parse_key_values(read_file(file), file);
  for (const auto& o : overrides) {
    KeyValues one = parse_key_values(o, "--set " + o);
    for (auto& [k, v] : one) kv[k] = v;
  }

  // A single seed feeds every section that does not pin its own.
  std::optional<std::uint64_t> seed = seed_flag;
  if (!seed && kv.contains("seed")) seed = parse_u64(kv.at("seed"), "seed");
  if (!seed) seed = env_seed();
  kv.erase("seed");
  const std::string s = std::to_string(seed.value_or(0));
  for (const char* key : {"gen.seed", "train.seed", "finetune.seed", "model.init_seed"}) {
    if (seed_flag || !kv.contains(key)) kv[key] = s;
  }

  std::map<std::string, KeyValues> sections;
  for (const auto& [k, v] : kv) {
    const auto dot = k.find('.');
    const std::string prefix = dot == std::string::npos ? "" : k.substr(0, dot);
    if (prefix != "model" && prefix != "train" && prefix != "gen" && prefix != "finetune" && prefix != "weights" &&
        prefix != "teacher") {
      throw ConfigError("unknown config key '" + k + "' (sections: model, train, gen, finetune, weights, teacher)");
    }
    sections[prefix][k.substr(dot + 1)] = v;
  }
  RunConfig rc;
  rc.model = ModelConfig::from_key_values(sections["model"], "model");
  rc.model.validate();
  rc.train = TrainConfig::from_key_values(sections["train"], "train");
  rc.gen = GenConfig::from_key_values(sections["gen"], "gen");
  rc.finetune = FinetuneConfig::from_key_values(sections["finetune"], "finetune");
  rc.weights = weights_from(sections["weights"], "weights");
  rc.teacher = teacher_from(sections["teacher"], rc.model, "teacher");

  auto echo = [&](const std::string& prefix, const KeyValues& section) {
    for (const auto& [k, v] : section) rc.effective[prefix + "." + k] = v;
  };
  echo("model", rc.model.to_key_values());
  echo("train", rc.train.to_key_values());
  echo("gen", rc.gen.to_key_values());
  echo("finetune", rc.finetune.to_key_values());
  for (const auto& [k, v] : sections["weights"]) rc.effective["weights." + k] = v;
  rc.effective["teacher.seed"] = std::to_string(rc.teacher.seed);
  rc.effective["teacher.temperature"] = std::to_string(rc.teacher.temperature);
  return rc;
}

void echo_config(const fs::path& dir, const KeyValues& kv) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_file_atomic(dir / "effective_config.txt", format_key_values(kv));
}

// Options shared by every subcommand that reads a run config.
struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config, "key=value config file")->check(CLI::ExistingFile);
    cmd->add_option("--set", overrides, "override one config key (key=value), repeatable");
    cmd->add_option("--seed", seed, "seed for every section (falls back to OMNIFLUX_SEED)");
  }
  RunConfig load() const { return load_run_config(config, overrides, seed); }
};

int cmd_gen_data(const Common& common, const std::string& out) {
  RunConfig rc = common.load();
  const std::string manifest = generate_corpus(rc.gen, out);
  Corpus check(out);  // the written corpus must pass loader validation
  check.read_pairs(corpus_files::kPairs);
  check.read_crosspairs(corpus_files::kCrossPairs);
  echo_config(out, rc.effective);
  std::cout << manifest;
  return kOk;
}

int cmd_pretrain(const Common& common, const std::string& data, int stage, const std::string& resume,
                 const std::string& out, std::optional<std::size_t> stop_at) {
  if (stage != 1 && stage != 2) throw ConfigError("--stage must be 1 or 2");
  if (stage == 2 && resume.empty()) throw ConfigError("--stage 2 requires --resume <stage-1 checkpoint>");
  RunConfig rc = common.load();
  Corpus corpus(data);
  TrainingState state = resume.empty() ? fresh_training_state(rc.model, rc.train) : load_checkpoint(resume);
  for (const auto& [k, v] : rc.effective) {
    if (!k.starts_with("model.")) state.config[k] = v;
  }
  state.config["data"] = fs::absolute(data).string();
  echo_config(out, rc.effective);

  PretrainOptions o;
  o.stage = stage;
  o.train = rc.train;
  o.weights = rc.weights;
  o.teachers = teacher_from({}, state.model.config, "teacher");
  o.teachers.seed = rc.teacher.seed;
  o.teachers.temperature = rc.teacher.temperature;
  o.checkpoint_path = fs::path(out) / "checkpoint.bin";
  o.metrics_path = fs::path(out) / "metrics.jsonl";
  o.stop_at = stop_at;
  StepMetrics last;
  o.on_step = [&](const StepMetrics& m) { last = m; };
  state = run_pretraining(corpus, std::move(state), o);
  std::cout << "stage " << stage << ": " << state.step << " steps";
  if (last.step > 0) std::cout << ", last total loss " << last.total << " (" << task_set_name(last.task_set) << ")";
  std::cout << "\n";
  return kOk;
}

int cmd_finetune(const Common& common, const std::string& task_name, const std::string& checkpoint,
                 bool from_scratch, const std::string& data, const std::string& out,
                 std::optional<std::size_t> k) {
  const FinetuneTask task = parse_finetune_task(task_name);
  if (checkpoint.empty() == !from_scratch) throw ConfigError("give exactly one of --checkpoint or --from-scratch");
  RunConfig rc = common.load();
  if (k) rc.finetune.text_layers = k;
  Corpus corpus(data);
  const ModelState model = from_scratch ? init_model(rc.model) : load_checkpoint(checkpoint).model;
  TaskState s = finetune_task(model, corpus, task, rc.finetune);
  for (const auto& [key, v] : rc.effective) {
    if (key.starts_with("finetune.")) s.config[key.substr(9)] = v;
  }
  s.config["checkpoint"] = from_scratch ? "none" : fs::absolute(checkpoint).string();
  echo_config(out, rc.effective);
  save_task_state(task_state_path(out, task), s);
  std::cout << task_name << ": " << s.epoch_losses.size() << " epochs";
  if (!s.epoch_losses.empty()) {
    std::cout << ", loss " << s.epoch_losses.front() << " -> " << s.epoch_losses.back();
  }
  std::cout << "\n";
  return kOk;
}

int cmd_eval(const Common& common, const std::string& suite, const std::string& data, std::string out) {
  RunConfig rc = common.load();
  Corpus corpus(data);
  EvalReport report = evaluate_suite(suite, corpus, rc.finetune.eval_pool);
  if (out.empty()) out = (fs::path(suite) / "report.json").string();
  echo_config(fs::path(out).parent_path().empty() ? fs::path(".") : fs::path(out).parent_path(), rc.effective);
  write_file_atomic(out, report.to_json() + "\n");
  std::cout << report.to_json() << "\n";
  return kOk;
}

int cmd_embed(const Common& common, const std::string& checkpoint, const std::string& data, const std::string& out,
              const std::string& split) {
  RunConfig rc = common.load();
  Corpus corpus(data);
  const ModelState model = load_checkpoint(checkpoint).model;
  const auto records = corpus.read_pairs(split);
  export_embeddings(model, corpus, records, out);
  const fs::path dir = fs::path(out).parent_path();
  echo_config(dir.empty() ? fs::path(".") : dir, rc.effective);
  std::cout << records.size() << " rows written to " << out << "\n";
  return kOk;
}

int cmd_grad_check(const Common& common, const std::string& loss, std::size_t batch, std::size_t entries) {
  RunConfig rc = common.load();
  LossCheckConfig c;
  c.model = rc.model;
  c.batch_size = batch;
  c.entries_per_tensor = entries;
  c.seed = rc.train.seed;
  bool ok = true;
  for (const auto& r : check_loss_gradients(loss, c)) {
    std::printf("%-7s max_rel_error=%.3e  worst=%s[%zu]  entries=%zu  %.1fs  %s\n", r.loss.c_str(),
                r.result.max_rel_error, r.worst_parameter.c_str(), r.result.worst_index, r.result.entries_checked,
                r.seconds, r.passed ? "PASS" : "FAIL");
    ok = ok && r.passed;
  }
  return ok ? kOk : kFailed;
}

// Keep freed tensor buffers in the heap instead of returning them to the
// kernel after every step; mmap/trim churn otherwise costs about a fifth of
// the run time in system calls.
void keep_heap() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace

int main(int argc, char** argv) {
  keep_heap();
  CLI::App app{"omniflux: multimodal pre-training, fine-tuning and retrieval evaluation"};
  app.require_subcommand(1);

  Common common;
  std::string out, data, resume, checkpoint, task, suite, split = corpus_files::kT2iEval, loss = "all";
  int stage = 1;
  bool from_scratch = false;
  std::optional<std::size_t> stop_at, k;
  std::size_t batch = 8, entries = 3;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpus");
  common.attach(gen);
  gen->add_option("--out", out, "output directory")->required();

  auto* pre = app.add_subcommand("pretrain", "run stage-1 or stage-2 pre-training");
  common.attach(pre);
  pre->add_option("--data", data, "corpus directory")->required();
  pre->add_option("--stage", stage, "1 or 2");
  pre->add_option("--resume", resume, "checkpoint to continue from (required for stage 2)");
  pre->add_option("--out", out, "output directory")->required();
  pre->add_option("--stop-at", stop_at, "stop after this many steps of the stage");

  auto* fine = app.add_subcommand("finetune", "fine-tune one downstream task");
  common.attach(fine);
  fine->add_option("--task", task, "cc, mpc, t2i, q2p or i2p")->required();
  fine->add_option("--checkpoint", checkpoint, "pre-trained checkpoint");
  fine->add_flag("--from-scratch", from_scratch, "start from a fresh initialisation instead");
  fine->add_option("--data", data, "corpus directory")->required();
  fine->add_option("--out", out, "directory for <task>.state")->required();
  fine->add_option("--k", k, "text layers K for this fine-tune");

  auto* ev = app.add_subcommand("eval", "score a directory of fine-tuned task states");
  common.attach(ev);
  ev->add_option("--suite", suite, "directory holding cc/mpc/t2i/q2p/i2p states")->required();
  ev->add_option("--data", data, "corpus directory")->required();
  ev->add_option("--out", out, "report path (default <suite>/report.json)");

  auto* emb = app.add_subcommand("embed", "export f, g and h embeddings");
  common.attach(emb);
  emb->add_option("--checkpoint", checkpoint, "checkpoint")->required();
  emb->add_option("--data", data, "corpus directory")->required();
  emb->add_option("--out", out, "output TSV")->required();
  emb->add_option("--split", split, "pair file inside the corpus");

  auto* gc = app.add_subcommand("grad-check", "finite-difference check of every loss");
  common.attach(gc);
  gc->add_option("--loss", loss, "all, mlm, mim-fr, mim-kl, itc, itm or omni");
  gc->add_option("--batch", batch, "batch size");
  gc->add_option("--entries", entries, "entries sampled per parameter tensor");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*gen) return cmd_gen_data(common, out);
    if (*pre) return cmd_pretrain(common, data, stage, resume, out, stop_at);
    if (*fine) return cmd_finetune(common, task, checkpoint, from_scratch, data, out, k);
    if (*ev) return cmd_eval(common, suite, data, out);
    if (*emb) return cmd_embed(common, checkpoint, data, out, split);
    if (*gc) return cmd_grad_check(common, loss, batch, entries);
  } catch (const MissingTaskError& e) {
    std::cerr << "error: " << e.what() << "\n";
    for (const auto& m : e.missing()) std::cerr << "  missing: " << m << "\n";
    return kMissing;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumeric;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const ContractError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIo;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kIo;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailed;
  }
  return kUsage;
}
