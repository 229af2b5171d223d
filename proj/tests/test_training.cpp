#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include <json.hpp>

#include "omniflux/binary_io.hpp"
#include "omniflux/errors.hpp"
#include "omniflux/training.hpp"

using namespace omniflux;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("omniflux_test_training_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ModelConfig small_model() {
  ModelConfig c;
  c.hidden_dim = 16;
  c.num_heads = 2;
  c.total_layers = 4;
  c.text_layers = 2;
  c.image_layers = 1;
  c.image_side = 16;
  c.image_patch_size = 8;
  c.proj_dim = 8;
  c.max_text_len = 24;
  c.mlp_ratio = 2;
  c.teacher_feature_dim = 8;
  c.teacher_clusters = 4;
  c.init_seed = 5;
  return c;
}

TeacherConfig small_teachers() {
  TeacherConfig t;
  t.pixel_count = 256;
  t.feature_dim = 8;
  t.clusters = 4;
  return t;
}

GenConfig small_gen() {
  GenConfig g;
  g.seed = 9;
  g.image_side = 16;
  g.n_pairs = 64;
  g.n_crosspairs = 48;
  g.cc_train = g.cc_eval = 10;
  g.mpc_train = g.mpc_eval = 10;
  g.retrieval_train = g.retrieval_eval = 10;
  return g;
}

PretrainOptions small_options(const fs::path& dir) {
  PretrainOptions o;
  o.train.batch_size = 8;
  o.train.total_steps = 12;
  o.train.stage2_steps = 10;
  o.train.learning_rate = 1e-3;
  o.train.seed = 21;
  o.teachers = small_teachers();
  o.checkpoint_path = dir / "ckpt.bin";
  o.metrics_path = dir / "metrics.jsonl";
  return o;
}

bool same_parameters(const ModelState& a, const ModelState& b) {
  auto pa = a.named_parameters(), pb = b.named_parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].first != pb[i].first) return false;
    auto x = pa[i].second.data(), y = pb[i].second.data();
    if (!std::equal(x.begin(), x.end(), y.begin(), y.end())) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("round-robin pick") {
  Rng a(1), b(1);
  int image_text = 0;
  for (int i = 0; i < 10000; ++i) {
    const TaskSet t = round_robin_pick(a, 0.5);
    CHECK(t == round_robin_pick(b, 0.5));
    image_text += t == TaskSet::ImageText5;
  }
  CHECK(image_text / 10000.0 >= 0.47);
  CHECK(image_text / 10000.0 <= 0.53);
  for (int i = 0; i < 100; ++i) CHECK(round_robin_pick(a, 1.0) == TaskSet::ImageText5);
  for (int i = 0; i < 100; ++i) CHECK(round_robin_pick(a, 0.0) == TaskSet::Omni9);
  CHECK_THROWS_AS(round_robin_pick(a, 1.5), ContractError);
}

TEST_CASE("adam") {
  std::vector<Tensor> params{Tensor::from({3}, {1.0, -2.0, 0.5}, true)};
  AdamState s = AdamState::for_params(params);
  auto g = params[0].ensure_grad();
  g[0] = 0.3, g[1] = -7.0, g[2] = 0.0;
  adam_update(params, s, 0.01);
  CHECK(std::abs(params[0].data()[0] - (1.0 - 0.01)) < 1e-6);
  CHECK(std::abs(params[0].data()[1] - (-2.0 + 0.01)) < 1e-6);
  CHECK(params[0].data()[2] == 0.5);
  for (double v : params[0].grad()) CHECK(v == 0.0);

  // Zero gradient: parameters fixed, moments decay.
  const double m0 = s.m[0][0];
  const std::vector<double> before = params[0].to_vector();
  adam_update(params, s, 0.01);
  CHECK(s.m[0][0] == doctest::Approx(0.9 * m0));
  // Bias-corrected moments of a decayed gradient still move the weight, so
  // only the untouched coordinate is pinned exactly.
  CHECK(params[0].data()[2] == before[2]);

  std::vector<Tensor> fresh{Tensor::from({2}, {1.0, 1.0}, true)};
  AdamState z = AdamState::for_params(fresh);
  fresh[0].ensure_grad();
  adam_update(fresh, z, 0.01);
  CHECK(fresh[0].to_vector() == std::vector<double>{1.0, 1.0});

  std::vector<Tensor> wrong{Tensor::from({4}, {0, 0, 0, 0}, true)};
  CHECK_THROWS_AS(adam_update(wrong, s, 0.01), DimensionError);
}

TEST_CASE("gradient clipping") {
  std::vector<Tensor> params{Tensor::from({2}, {0, 0}, true)};
  auto g = params[0].ensure_grad();
  g[0] = 3, g[1] = 4;
  CHECK(clip_grad_norm(params, 1.0) == doctest::Approx(5.0));
  CHECK(params[0].grad()[0] == doctest::Approx(0.6));
  CHECK(params[0].grad()[1] == doctest::Approx(0.8));
  CHECK(clip_grad_norm(params, 10.0) == doctest::Approx(1.0));
  CHECK(params[0].grad()[1] == doctest::Approx(0.8));
}

TEST_CASE("pretrain steps") {
  auto dir = scratch("steps");
  generate_corpus(small_gen(), dir / "data");
  Corpus corpus(dir / "data");
  PairLoader pairs = load_pair_batches(corpus, corpus_files::kPairs, 32, Rng(3));
  const PairBatch batch = pairs.next();
  Teachers teachers(small_teachers());
  TaskWeights weights;

  SUBCASE("zero learning rate leaves parameters unchanged") {
    ModelState s = init_model(small_model());
    ModelState ref = init_model(small_model());
    AdamState opt = AdamState::for_params(s.parameters());
    StepContext ctx{teachers, weights, 0.0, 5.0};
    Rng rng(1);
    StepMetrics m = pretrain_step(s, batch, opt, ctx, rng, 1);
    CHECK(same_parameters(s, ref));
    CHECK(m.losses.size() == 5);

    CrossPairLoader cross = load_crosspair_batches(corpus, corpus_files::kCrossPairs, 8, Rng(3));
    StepMetrics o = pretrain_step(s, cross.next(), opt, ctx, 2);
    CHECK(same_parameters(s, ref));
    CHECK(o.losses.size() == 9);
    CHECK(o.task_set == TaskSet::Omni9);

    auto j = nlohmann::json::parse(m.to_json());
    for (const char* key : {"step", "task_set", "losses", "total", "lr", "K"}) CHECK(j.contains(key));
    CHECK(j["losses"].size() == 5);
    double weighted = 0;
    for (const auto& [name, value] : m.losses) {
      const double w = name == "mlm" ? weights.mlm : 1.0;
      weighted += w * value;
    }
    CHECK(std::abs(weighted - m.total) < 1e-6);
  }

  SUBCASE("overfit on a fixed batch") {
    ModelState s = init_model(small_model());
    AdamState opt = AdamState::for_params(s.parameters());
    StepContext ctx{teachers, weights, 1e-3, 5.0};
    Rng rng(2);
    std::vector<double> totals;
    for (std::size_t step = 1; step <= 200; ++step) totals.push_back(pretrain_step(s, batch, opt, ctx, rng, step).total);
    CHECK(totals.back() < totals.front());
    // Window means fall steadily.
    auto window = [&](std::size_t w) {
      double sum = 0;
      for (std::size_t i = 20 * w; i < 20 * (w + 1); ++i) sum += totals[i];
      return sum / 20;
    };
    for (std::size_t w = 1; w < 10; w += 3) CHECK(window(w) < window(0));
    CHECK(window(9) < window(4));
  }
  fs::remove_all(dir);
}

TEST_CASE("non-finite loss aborts with a diagnostic") {
  auto dir = scratch("nan");
  generate_corpus(small_gen(), dir / "data");
  Corpus corpus(dir / "data");
  PairLoader pairs = load_pair_batches(corpus, corpus_files::kPairs, 8, Rng(3));
  ModelState s = init_model(small_model());
  s.text_proj.weight.data()[0] = std::nan("");
  AdamState opt = AdamState::for_params(s.parameters());
  Teachers teachers(small_teachers());
  TaskWeights weights;
  StepContext ctx{teachers, weights, 1e-3, 5.0};
  Rng rng(1);
  try {
    pretrain_step(s, pairs.next(), opt, ctx, rng, 17);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const std::string what = e.what();
    CHECK(what.find("step 17") != std::string::npos);
    CHECK(what.find("image_text") != std::string::npos);
    CHECK(what.find("itc=") != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("checkpoint round-trip and corruption") {
  auto dir = scratch("ckpt");
  TrainConfig tc;
  TrainingState s = fresh_training_state(small_model(), tc);
  s.optimizer.step = 7;
  s.optimizer.m[3][0] = 0.25;
  s.pair_loader = LoaderState{"garbage-free", 2, 3, {4, 5, 6}};
  s.config["train.seed"] = "21";
  s.step = 12;
  const fs::path path = dir / "c.bin";
  save_checkpoint(path, s);

  const std::string bytes = read_file(path);
  CHECK(bytes.substr(0, 8) == "CMMCK001");

  TrainingState t = load_checkpoint(path);
  CHECK(same_parameters(s.model, t.model));
  CHECK(t.optimizer.step == 7);
  CHECK(t.optimizer.m == s.optimizer.m);
  CHECK(t.optimizer.v == s.optimizer.v);
  CHECK(t.rng == s.rng);
  REQUIRE(t.pair_loader.has_value());
  CHECK(t.pair_loader->order == std::vector<std::uint64_t>{4, 5, 6});
  CHECK_FALSE(t.cross_loader.has_value());
  CHECK(t.step == 12);
  CHECK(t.config.at("train.seed") == "21");
  CHECK(t.model.config.text_layers == 2);

  for (std::size_t cut : {std::size_t{4}, std::size_t{40}, bytes.size() / 2, bytes.size() - 1}) {
    write_file_atomic(path, bytes.substr(0, cut));
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  }
  std::string bad = bytes;
  bad[7] = '9';
  write_file_atomic(path, bad);
  try {
    load_checkpoint(path);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("magic") != std::string::npos);
  }
  write_file_atomic(path, bytes + "x");
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  CHECK_THROWS_AS(load_checkpoint(dir / "absent.bin"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("runs are deterministic and resume bit-exactly") {
  auto dir = scratch("resume");
  generate_corpus(small_gen(), dir / "data");
  Corpus corpus(dir / "data");

  PretrainOptions full = small_options(dir / "full");
  fs::create_directories(dir / "full");
  TrainingState a = run_pretraining(corpus, fresh_training_state(small_model(), full.train), full);

  PretrainOptions again = small_options(dir / "again");
  fs::create_directories(dir / "again");
  TrainingState b = run_pretraining(corpus, fresh_training_state(small_model(), again.train), again);
  CHECK(read_file(*full.metrics_path) == read_file(*again.metrics_path));
  CHECK(same_parameters(a.model, b.model));

  // Interrupt after step 7 with checkpoints every 5 steps, then resume.
  PretrainOptions cut = small_options(dir / "cut");
  fs::create_directories(dir / "cut");
  cut.train.checkpoint_every = 5;
  cut.stop_at = 7;
  run_pretraining(corpus, fresh_training_state(small_model(), cut.train), cut);
  TrainingState mid = load_checkpoint(*cut.checkpoint_path);
  CHECK(mid.step == 5);
  cut.stop_at.reset();
  TrainingState c = run_pretraining(corpus, mid, cut);
  CHECK(c.step == 12);
  CHECK(same_parameters(a.model, c.model));
  CHECK(read_file(*full.metrics_path) == read_file(*cut.metrics_path));

  std::set<std::string> tasks;
  std::istringstream lines(read_file(*full.metrics_path));
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    auto j = nlohmann::json::parse(line);
    CHECK(j["step"] == ++n);
    CHECK(j["K"] == 2);
    tasks.insert(j["task_set"].get<std::string>());
  }
  CHECK(n == 12);
  CHECK(tasks.size() == 2);
  fs::remove_all(dir);
}

TEST_CASE("stage 2 randomizes K") {
  auto dir = scratch("stage2");
  generate_corpus(small_gen(), dir / "data");
  Corpus corpus(dir / "data");
  PretrainOptions o = small_options(dir);
  o.train.total_steps = 2;

  TrainingState fresh = fresh_training_state(small_model(), o.train);
  PretrainOptions early = o;
  early.stage = 2;
  CHECK_THROWS_AS(run_pretraining(corpus, fresh, early), ContractError);

  TrainingState s1 = run_pretraining(corpus, fresh, o);
  const std::size_t params = s1.model.parameters().size();
  PretrainOptions o2 = o;
  o2.stage = 2;
  o2.train.stage2_steps = 40;
  o2.metrics_path = dir / "stage2.jsonl";
  std::set<std::size_t> ks;
  o2.on_step = [&](const StepMetrics& m) {
    ks.insert(m.text_layers);
    CHECK(m.task_set == TaskSet::ImageText5);
  };
  TrainingState s2 = run_pretraining(corpus, s1, o2);
  CHECK(ks == std::set<std::size_t>{0, 1, 2, 3, 4});
  CHECK(s2.model.parameters().size() == params);
  CHECK(s2.model.config.text_layers == 2);
  CHECK(s2.stage == 2);
  CHECK(load_checkpoint(*o2.checkpoint_path).stage == 2);
  fs::remove_all(dir);
}
