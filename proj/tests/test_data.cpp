#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "omniflux/binary_io.hpp"
#include "omniflux/data.hpp"
#include "omniflux/errors.hpp"
#include "omniflux/masking.hpp"
#include "omniflux/teachers.hpp"

using namespace omniflux;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("omniflux_test_data_" + name);
  fs::remove_all(p);
  return p;
}

GenConfig small_gen(std::uint64_t seed = 3) {
  GenConfig c;
  c.seed = seed;
  c.n_pairs = 1000;
  c.n_crosspairs = 300;
  c.cc_train = 80;
  c.cc_eval = 40;
  c.mpc_train = 30;
  c.mpc_eval = 30;
  c.retrieval_train = 60;
  c.retrieval_eval = 50;
  return c;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ab += a[i] * b[i], aa += a[i] * a[i], bb += b[i] * b[i];
  return ab / std::sqrt(aa * bb);
}

}  // namespace

TEST_CASE("generation is deterministic and balanced") {
  auto a = scratch("det_a"), b = scratch("det_b");
  generate_corpus(small_gen(), a);
  generate_corpus(small_gen(), b);
  std::size_t files = 0;
  for (const auto& entry : fs::directory_iterator(a)) {
    ++files;
    CHECK(read_file(entry.path()) == read_file(b / entry.path().filename()));
  }
  CHECK(files == 13);

  Corpus corpus(a);
  auto pairs = corpus.read_pairs(corpus_files::kPairs);
  REQUIRE(pairs.size() == 1000);
  std::map<int, int> counts;
  for (const auto& r : pairs) ++counts[r.concept_id];
  CHECK(counts.size() == 10);
  for (const auto& [c, n] : counts) {
    CHECK(n >= 80);
    CHECK(n <= 120);
  }

  auto c = scratch("det_c");
  generate_corpus(small_gen(4), c);
  CHECK(read_file(a / corpus_files::kPairs) != read_file(c / corpus_files::kPairs));
  fs::remove_all(a), fs::remove_all(b), fs::remove_all(c);
}

TEST_CASE("manifest contract") {
  auto dir = scratch("manifest");
  const std::string text = generate_corpus(small_gen(), dir);
  KeyValues kv = parse_key_values(text, "manifest");
  for (const char* key : {"version", "seed", "n_concepts", "n_pairs", "n_crosspairs", "vocab_size", "image_side"}) {
    CHECK(kv.contains(key));
  }
  CHECK(kv["version"] == "1");

  // Evaluation ids never overlap training ids.
  Corpus corpus(dir);
  std::set<std::uint64_t> train_ids;
  for (const auto& r : corpus.read_pairs(corpus_files::kPairs)) train_ids.insert(r.record_id);
  for (const auto& r : corpus.read_crosspairs(corpus_files::kCrossPairs)) train_ids.insert(r.record_id);
  for (const char* f : {corpus_files::kCcEval, corpus_files::kT2iEval, corpus_files::kMpcEval}) {
    for (const auto& r : corpus.read_pairs(f)) CHECK_FALSE(train_ids.contains(r.record_id));
  }
  for (const char* f : {corpus_files::kQ2pEval, corpus_files::kI2pEval}) {
    for (const auto& r : corpus.read_crosspairs(f)) CHECK_FALSE(train_ids.contains(r.record_id));
  }

  std::string bumped = text;
  bumped.replace(bumped.find("version=1"), 9, "version=2");
  write_file_atomic(dir / corpus_files::kManifest, bumped);
  CHECK_THROWS_AS(Corpus{dir}, FormatError);
  fs::remove_all(dir);
}

TEST_CASE("records round-trip through their line formats") {
  PairRecord p{42, 3, ImageSeed{3, 2, 0, 12345}.pack(), {4, 9, 200}};
  PairRecord q = parse_pair(format_pair(p), "t");
  CHECK(q.record_id == 42);
  CHECK(q.concept_id == 3);
  CHECK(q.image_seed == p.image_seed);
  CHECK(q.tokens == p.tokens);

  CrossPairRecord c;
  c.record_id = 7;
  c.relation = Relation::QueryClick;
  c.source.tokens = TokenIds{5, 6};
  c.target_tokens = {5, 6, 7};
  c.target_image_seed = ImageSeed{1, 0, 0, 99}.pack();
  const std::string line = format_crosspair(c);
  CHECK(line.find("\tt-\t") != std::string::npos);
  CrossPairRecord d = parse_crosspair(line, "t");
  CHECK(d.source.tokens == c.source.tokens);
  CHECK_FALSE(d.source.image_seed.has_value());
  CHECK(d.concept_id() == 1);
  CHECK(format_crosspair(d) == line);

  CHECK_THROWS_AS(parse_pair("1\t2\t3", "t"), FormatError);
  CHECK_THROWS_AS(parse_crosspair("1\ttag\t--\t-\t-\t4\t5", "t"), FormatError);
  CHECK_THROWS_AS(parse_crosspair("1\tbogus\tti\t4\t5\t4\t5", "t"), FormatError);

  ImageSeed s{9, 7, 200, (std::uint64_t{1} << 40) - 1};
  ImageSeed u = ImageSeed::unpack(s.pack());
  CHECK(u.concept_id == 9);
  CHECK(u.variant == 7);
  CHECK(u.view == 200);
  CHECK(u.instance == s.instance);
}

TEST_CASE("concepts, images and texts") {
  ConceptBank bank(small_gen());
  CHECK(bank.size() == 16);
  const auto seed = ImageSeed{2, 1, 0, 777}.pack();
  auto a = bank.materialize(seed), b = bank.materialize(seed);
  CHECK(a == b);
  CHECK(a.size() == 1024);
  for (double v : a) CHECK((v >= 0.0 && v <= 1.0));

  ImageSeed other_view = ImageSeed::unpack(seed);
  other_view.view = 5;
  CHECK(bank.materialize(other_view.pack()) != a);

  for (std::size_t x = 0; x < bank.size(); ++x) {
    for (std::size_t y = x + 1; y < bank.size(); ++y) {
      CHECK(bank.prototype(x) != bank.prototype(y));
      std::set<TokenId> top(bank.theme(x).begin(), bank.theme(x).begin() + 8);
      std::size_t shared = 0;
      for (std::size_t k = 0; k < 8; ++k) shared += top.contains(bank.theme(y)[k]);
      CHECK(shared < 4);
    }
  }

  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const std::uint64_t seed = ImageSeed{static_cast<std::uint32_t>(i % 16), static_cast<std::uint32_t>(i % 8), 0,
                                         static_cast<std::uint64_t>(1000 + 7 * i)}.pack();
    TokenIds t = bank.sample_tokens(seed, rng);
    CHECK(t.size() >= 8);
    CHECK(t.size() <= 24);
    CHECK(std::count(t.begin(), t.end(), bank.variant_token(i % 8)) >= 1);
    CHECK(bank.brand_of(seed) == (1000 + 7 * i) % 32);
    CHECK(std::count(t.begin(), t.end(), bank.brand_token(bank.brand_of(seed))) >= 1);
    for (auto id : t) CHECK((id >= kFirstContentToken && id < 256));
  }
}

TEST_CASE("queries name the clicked product's variant and brand") {
  auto dir = scratch("queries");
  const GenConfig gen = small_gen();
  generate_corpus(gen, dir);
  Corpus corpus(dir);
  ConceptBank bank(gen);
  for (const auto& r : corpus.read_crosspairs(corpus_files::kQ2pEval)) {
    REQUIRE(r.source.tokens.has_value());
    const TokenIds& q = *r.source.tokens;
    const ImageSeed target = ImageSeed::unpack(r.target_image_seed);
    CHECK(std::count(q.begin(), q.end(), bank.variant_token(target.variant)) >= 1);
    CHECK(std::count(q.begin(), q.end(), bank.brand_token(bank.brand_of(r.target_image_seed))) >= 1);
    CHECK(std::count(r.target_tokens.begin(), r.target_tokens.end(),
                     bank.brand_token(bank.brand_of(r.target_image_seed))) >= 1);
  }
}

TEST_CASE("loaders") {
  auto dir = scratch("loaders");
  GenConfig cfg = small_gen();
  cfg.n_pairs = 80;
  generate_corpus(cfg, dir);
  Corpus corpus(dir);

  PairLoader a = load_pair_batches(corpus, corpus_files::kPairs, 8, Rng(5));
  PairLoader b = load_pair_batches(corpus, corpus_files::kPairs, 8, Rng(5));
  CHECK(a.batches_per_epoch() == 10);
  for (int i = 0; i < 25; ++i) {
    PairBatch x = a.next(), y = b.next();
    CHECK(x.record_ids == y.record_ids);
    CHECK(x.size() == 8);
    CHECK(x.pixels.shape() == Shape{8, 1024});
    for (const auto& toks : x.tokens) {
      CHECK_FALSE(toks.empty());
      for (auto t : toks) CHECK(t < 256);
    }
  }
  CHECK(a.epoch() == 2);

  // One epoch visits every record once.
  PairLoader c = load_pair_batches(corpus, corpus_files::kPairs, 8, Rng(6));
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 10; ++i) {
    for (auto id : c.next().record_ids) seen.insert(id);
  }
  CHECK(seen.size() == 80);

  CrossPairLoader cross = load_crosspair_batches(corpus, corpus_files::kCrossPairs, 30, Rng(7));
  CrossPairBatch batch = cross.next();
  std::set<Relation> relations;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    relations.insert(batch.relations[i]);
    const ModalityFlags f = batch.source_flags[i];
    auto src = batch.source_pixels.data().subspan(i * 1024, 1024);
    switch (batch.relations[i]) {
      case Relation::QueryClick: {
        CHECK((f.has_text && !f.has_image && !f.multimodal()));
        CHECK(std::all_of(src.begin(), src.end(), [](double v) { return v == kGreyPixel; }));
        // Query tokens are an ordered subset of the target text.
        const auto& q = batch.source_tokens[i];
        const auto& t = batch.target_tokens[i];
        std::size_t k = 0;
        for (auto tok : t) k += k < q.size() && q[k] == tok;
        CHECK(k == q.size());
        CHECK((q.size() >= 3 && q.size() <= 6));
        break;
      }
      case Relation::Tag:
        CHECK((f.has_text && f.has_image && f.multimodal()));
        break;
      case Relation::ProductView:
        CHECK((!f.has_text && f.has_image && !f.multimodal()));
        CHECK(batch.source_tokens[i].empty());
        break;
    }
  }
  CHECK(relations.size() == 3);
  fs::remove_all(dir);
}

TEST_CASE("corrupt records are rejected with context") {
  auto dir = scratch("corrupt");
  GenConfig cfg = small_gen();
  cfg.n_pairs = 20;
  generate_corpus(cfg, dir);
  Corpus corpus(dir);
  std::string text = read_file(dir / corpus_files::kPairs);
  write_file_atomic(dir / corpus_files::kPairs, text + "99999\t0\t0\t4 999\n");
  CHECK_THROWS_AS(corpus.read_pairs(corpus_files::kPairs), DataError);
  write_file_atomic(dir / corpus_files::kPairs, text + "99999\t1\t0\t4\n");
  CHECK_THROWS_AS(corpus.read_pairs(corpus_files::kPairs), DataError);
  CHECK_THROWS_AS(corpus.read_pairs("missing.tsv"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("concepts are separable and teachers discriminate them") {
  auto dir = scratch("separable");
  generate_corpus(small_gen(), dir);
  Corpus corpus(dir);
  auto pairs = corpus.read_pairs(corpus_files::kPairs);
  CHECK(nearest_centroid_accuracy(corpus, pairs) > 0.9);

  FeatureTeacher teacher(TeacherConfig{});
  std::vector<std::vector<double>> feats;
  std::vector<int> labels;
  for (std::size_t i = 0; i < 100; ++i) {
    feats.push_back(teacher.feature(corpus.bank().materialize(pairs[i].image_seed)));
    labels.push_back(pairs[i].concept_id);
  }
  double same = 0, cross = 0;
  int n_same = 0, n_cross = 0;
  for (std::size_t i = 0; i < feats.size(); ++i) {
    for (std::size_t j = i + 1; j < feats.size(); ++j) {
      const double c = cosine(feats[i], feats[j]);
      if (labels[i] == labels[j]) same += c, ++n_same;
      else cross += c, ++n_cross;
    }
  }
  CHECK(cross / n_cross < same / n_same);
  fs::remove_all(dir);
}
