#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "omniflux/binary_io.hpp"
#include "omniflux/errors.hpp"
#include "omniflux/eval.hpp"

using namespace omniflux;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("omniflux_test_eval_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ModelConfig small_model() {
  ModelConfig c;
  c.hidden_dim = 16;
  c.num_heads = 2;
  c.total_layers = 2;
  c.text_layers = 1;
  c.image_layers = 1;
  c.image_side = 16;
  c.image_patch_size = 8;
  c.proj_dim = 8;
  c.max_text_len = 24;
  c.mlp_ratio = 2;
  c.teacher_feature_dim = 8;
  c.teacher_clusters = 4;
  c.init_seed = 2;
  return c;
}

GenConfig small_gen() {
  GenConfig g;
  g.seed = 4;
  g.image_side = 16;
  g.n_pairs = 20;
  g.n_crosspairs = 12;
  g.cc_train = 64;
  g.cc_eval = 100;
  g.mpc_train = 12;
  g.mpc_eval = 12;
  g.retrieval_train = 16;
  g.retrieval_eval = 12;
  return g;
}

FinetuneConfig quick(std::size_t epochs = 1) {
  FinetuneConfig c;
  c.epochs = epochs;
  c.batch_size = 8;
  c.seed = 3;
  c.eval_pool = 12;
  return c;
}

Tensor random_unit_rows(std::size_t n, std::size_t d, Rng& rng) {
  std::normal_distribution<double> normal;
  std::vector<double> v(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0;
    for (std::size_t x = 0; x < d; ++x) ss += (v[i * d + x] = normal(rng)) * v[i * d + x];
    for (std::size_t x = 0; x < d; ++x) v[i * d + x] /= std::sqrt(ss);
  }
  return Tensor::from({n, d}, std::move(v));
}

// Full sort of every candidate by (score desc, index asc).
double brute_force_recall(const Tensor& q, const Tensor& c, const std::vector<std::size_t>& truth, std::size_t k) {
  const std::size_t nq = q.dim(0), nc = c.dim(0), d = q.dim(1);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < nq; ++i) {
    std::vector<std::pair<double, std::size_t>> ranked;
    for (std::size_t j = 0; j < nc; ++j) {
      double s = 0;
      for (std::size_t x = 0; x < d; ++x) s += q.at(i, x) * c.at(j, x);
      ranked.emplace_back(-s, j);
    }
    std::sort(ranked.begin(), ranked.end());
    for (std::size_t r = 0; r < k; ++r) hits += ranked[r].second == truth[i];
  }
  return static_cast<double>(hits) / static_cast<double>(nq);
}

double row_norm(const Tensor& t, std::size_t i) {
  double ss = 0;
  for (std::size_t x = 0; x < t.dim(1); ++x) ss += t.at(i, x) * t.at(i, x);
  return std::sqrt(ss);
}

}  // namespace

TEST_CASE("recall_at_k constructions") {
  Tensor e = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  std::vector<std::size_t> truth{0, 1, 2};
  CHECK(recall_at_k(e, e, truth, 1) == 1.0);

  // The true candidate sits at rank 2 for every query.
  Tensor q = Tensor::from({1, 2}, {1, 0});
  Tensor c = Tensor::from({6, 2}, {0, 1, 0.9, 0.1, 1, 0, 0.5, 0.5, -1, 0, 0, -1});
  std::vector<std::size_t> second{1};
  CHECK(recall_at_k(q, c, second, 1) == 0.0);
  CHECK(recall_at_k(q, c, second, 2) == 1.0);
  CHECK(recall_at_k(q, c, second, 5) == 1.0);

  // Ties go to the lower candidate index.
  Tensor tied = Tensor::from({2, 2}, {1, 0, 1, 0});
  std::vector<std::size_t> first{0}, later{1};
  CHECK(recall_at_k(q, tied, first, 1) == 1.0);
  CHECK(recall_at_k(q, tied, later, 1) == 0.0);

  CHECK_THROWS_AS(recall_at_k(e, e, truth, 4), ContractError);
  CHECK_THROWS_AS(recall_at_k(e, e, truth, 0), ContractError);
  std::vector<std::size_t> bad{0, 1, 3};
  CHECK_THROWS_AS(recall_at_k(e, e, bad, 1), ContractError);
}

TEST_CASE("recall_at_k matches a full-sort oracle") {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t nq = 5 + trial % 17, nc = 12 + trial % 23, d = 2 + trial % 5;
    Tensor q = random_unit_rows(nq, d, rng), c = random_unit_rows(nc, d, rng);
    if (trial % 10 == 0) c = Tensor::from({nc, d}, std::vector<double>(nc * d, 0.5));  // all tied
    std::vector<std::size_t> truth(nq);
    for (auto& t : truth) t = uniform_index(rng, nc);
    double previous = 0;
    for (std::size_t k : {1, 5, 10}) {
      const double r = recall_at_k(q, c, truth, k);
      CHECK(r == brute_force_recall(q, c, truth, k));
      CHECK(r >= previous);
      previous = r;
    }
    // A common positive rescale of one side leaves rankings unchanged.
    std::vector<double> scaled = q.to_vector();
    for (double& v : scaled) v *= 3.5;
    CHECK(recall_at_k(Tensor::from({nq, d}, scaled), c, truth, 1) == recall_at_k(q, c, truth, 1));
  }
}

TEST_CASE("report contract") {
  EvalReport r;
  r.cc = r.mpc = r.t2i = r.i2t = r.q2p = r.i2p = r.i2pi = 1.0;
  CHECK(r.meta_average() == 1.0);
  r.cc = 0.3, r.mpc = 0.5, r.t2i = 0.1;
  CHECK(std::abs(r.meta_average() - (0.3 + 0.5 + 0.1 + 4.0) / 7) < 1e-9);
  r.seed = 8;
  r.checkpoint = "x.ckpt";
  auto j = nlohmann::json::parse(r.to_json());
  CHECK(j.size() == 10);
  for (const char* key : {"cc", "mpc", "t2i", "i2t", "q2p", "i2p", "i2pi", "meta_avg", "seed", "checkpoint"}) {
    CHECK(j.contains(key));
  }
  CHECK(parse_finetune_task("q2p") == FinetuneTask::Q2P);
  CHECK_THROWS_AS(parse_finetune_task("vqa"), ConfigError);
}

TEST_CASE("classification fine-tuning") {
  auto dir = scratch("cls");
  generate_corpus(small_gen(), dir);
  Corpus corpus(dir);
  const ModelState model = init_model(small_model());
  auto train = corpus.read_pairs(corpus_files::kCcTrain);
  auto eval = corpus.read_pairs(corpus_files::kCcEval);

  SUBCASE("untrained head is near chance") {
    TaskState s = finetune_classifier(model, corpus, train, 10, 0, quick(0));
    const double acc = classification_accuracy(s, corpus, eval);
    CHECK(acc >= 0.05);
    CHECK(acc <= 0.15);
  }

  SUBCASE("overfits a 64-example split and is deterministic") {
    FinetuneConfig c = quick(50);
    c.learning_rate = 1e-3;
    TaskState s = finetune_classifier(model, corpus, train, 10, 0, c);
    CHECK(classification_accuracy(s, corpus, train) == 1.0);
    CHECK(s.epoch_losses.back() < s.epoch_losses.front());
    TaskState again = finetune_classifier(model, corpus, std::span(train).first(16), 10, 0, quick(2));
    TaskState twice = finetune_classifier(model, corpus, std::span(train).first(16), 10, 0, quick(2));
    CHECK(again.epoch_losses == twice.epoch_losses);
  }

  SUBCASE("labels outside the head are data errors") {
    CHECK_THROWS_AS(finetune_classifier(model, corpus, train, 5, 0, quick()), DataError);
    auto mpc = corpus.read_pairs(corpus_files::kMpcTrain);
    CHECK_THROWS_AS(finetune_classifier(model, corpus, mpc, 10, 0, quick()), DataError);
    CHECK_NOTHROW(finetune_classifier(model, corpus, mpc, 6, 10, quick()));
  }

  SUBCASE("task states round-trip") {
    TaskState s = finetune_classifier(model, corpus, std::span(train).first(8), 10, 0, quick());
    s.config["checkpoint"] = "pre.ckpt";
    save_task_state(dir / "cc.state", s);
    TaskState t = load_task_state(dir / "cc.state");
    CHECK(t.task == FinetuneTask::CC);
    CHECK(t.n_classes == 10);
    CHECK(t.config.at("checkpoint") == "pre.ckpt");
    CHECK(t.head.weight.to_vector() == s.head.weight.to_vector());
    CHECK(predict_classes(t, corpus, eval) == predict_classes(s, corpus, eval));
    const std::string bytes = read_file(dir / "cc.state");
    write_file_atomic(dir / "cc.state", bytes.substr(0, bytes.size() - 3));
    CHECK_THROWS_AS(load_task_state(dir / "cc.state"), FormatError);
  }
  fs::remove_all(dir);
}

TEST_CASE("retrieval fine-tuning") {
  auto dir = scratch("ret");
  generate_corpus(small_gen(), dir);
  Corpus corpus(dir);
  const ModelState model = init_model(small_model());

  SUBCASE("contrastive loss decreases on a fixed batch") {
    FinetuneConfig c = quick(15);
    c.batch_size = 16;
    c.learning_rate = 1e-3;
    for (auto task : {FinetuneTask::T2I, FinetuneTask::Q2P, FinetuneTask::I2P}) {
      TaskState s = finetune_retrieval(model, corpus, task, c);
      CHECK(s.epoch_losses.back() < s.epoch_losses.front());
    }
  }

  SUBCASE("query paths avoid the fusion encoder") {
    ModelState m = model.clone();
    const auto records = corpus.read_crosspairs(corpus_files::kQ2pEval);
    const CrossPairBatch q = corpus.make_batch(std::span(records));
    Tensor before = embed_texts(m, q.source_tokens);
    Tensor images_before = embed_images(m, q.target_pixels);
    Tensor fused_before = embed_pairs(m, q.target_tokens, q.target_pixels);
    for (auto& b : std::span(m.blocks).subspan(m.config.text_layers)) {
      auto w = b.mlp_in.weight.data();
      for (std::size_t i = 0; i < w.size(); ++i) w[i] += 0.1 * static_cast<double>(i % 7);
    }
    CHECK(embed_texts(m, q.source_tokens).to_vector() == before.to_vector());
    CHECK(embed_images(m, q.target_pixels).to_vector() == images_before.to_vector());
    CHECK(embed_pairs(m, q.target_tokens, q.target_pixels).to_vector() != fused_before.to_vector());
  }

  SUBCASE("I2P and I2Pi share one query set") {
    TaskState s = finetune_retrieval(model, corpus, FinetuneTask::I2P, quick());
    RetrievalScores r = evaluate_retrieval(s, corpus, 12);
    CHECK(r.query_ids.size() == 12);
    auto recs = corpus.read_crosspairs(corpus_files::kI2pEval);
    for (std::size_t i = 0; i < 12; ++i) CHECK(r.query_ids[i] == recs[i].record_id);
    CHECK((r.forward >= 0 && r.forward <= 1 && r.reverse >= 0 && r.reverse <= 1));
  }
  fs::remove_all(dir);
}

TEST_CASE("suite evaluation and embedding export") {
  auto dir = scratch("suite");
  generate_corpus(small_gen(), dir / "data");
  Corpus corpus(dir / "data");
  const ModelState model = init_model(small_model());
  const FinetuneConfig c = quick();

  fs::create_directories(dir / "states");
  try {
    evaluate_suite(dir / "states", corpus, 12);
    FAIL("expected MissingTaskError");
  } catch (const MissingTaskError& e) {
    CHECK(e.missing().size() == 5);
  }
  for (auto t : kFinetuneTasks) {
    if (t != FinetuneTask::MPC) save_task_state(task_state_path(dir / "states", t), finetune_task(model, corpus, t, c));
  }
  try {
    evaluate_suite(dir / "states", corpus, 12);
    FAIL("expected MissingTaskError");
  } catch (const MissingTaskError& e) {
    CHECK(e.missing() == std::vector<std::string>{"mpc"});
  }
  save_task_state(task_state_path(dir / "states", FinetuneTask::MPC), finetune_task(model, corpus, FinetuneTask::MPC, c));
  EvalReport a = evaluate_suite(dir / "states", corpus, 12);
  EvalReport b = evaluate_suite(dir / "states", corpus, 12);
  CHECK(a.to_json() == b.to_json());
  CHECK(a.seed == 3);
  for (double m : {a.cc, a.mpc, a.t2i, a.i2t, a.q2p, a.i2p, a.i2pi}) CHECK((m >= 0 && m <= 1));
  CHECK(finetune_and_evaluate(model, corpus, c).to_json() == a.to_json());

  auto records = corpus.read_pairs(corpus_files::kT2iEval);
  export_embeddings(model, corpus, records, dir / "emb.tsv");
  const std::string text = read_file(dir / "emb.tsv");
  export_embeddings(model, corpus, records, dir / "emb2.tsv");
  CHECK(read_file(dir / "emb2.tsv") == text);
  std::istringstream lines(text);
  std::string line;
  std::size_t rows = 0;
  while (std::getline(lines, line)) {
    std::istringstream fields(line);
    std::vector<double> cols;
    for (double v; fields >> v;) cols.push_back(v);
    REQUIRE(cols.size() == 1 + 3 * 8);
    CHECK(cols[0] == records[rows].concept_id);
    for (std::size_t part = 0; part < 3; ++part) {
      double ss = 0;
      for (std::size_t x = 0; x < 8; ++x) ss += cols[1 + part * 8 + x] * cols[1 + part * 8 + x];
      CHECK(std::abs(std::sqrt(ss) - 1.0) < 1e-5);
    }
    ++rows;
  }
  CHECK(rows == records.size());
  CHECK(row_norm(embed_texts(model, std::vector<TokenIds>{{5, 6}}), 0) == doctest::Approx(1.0));
  fs::remove_all(dir);
}
