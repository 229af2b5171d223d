#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "omniflux/batch.hpp"
#include "omniflux/key_value.hpp"
#include "omniflux/random.hpp"

namespace omniflux {

inline constexpr int kCorpusVersion = 1;

struct GenConfig {
  std::uint64_t seed = 0;
  std::size_t n_concepts = 10;    // pretraining / CC concepts
  std::size_t mpc_concepts = 6;   // disjoint set used only by MPC
  std::size_t n_pairs = 2000;
  std::size_t n_crosspairs = 1000;
  std::size_t vocab_size = 256;
  std::size_t image_side = 32;
  std::size_t n_variants = 8;     // per-instance attribute shared by image mark and text token
  std::size_t n_brands = 32;      // per-instance attribute named in text only
  std::size_t theme_size = 12;
  std::size_t min_tokens = 8;
  std::size_t max_tokens = 24;
  double token_noise = 0.1;
  double pixel_noise = 0.1;
  double view_noise = 0.05;
  // Downstream split sizes.
  std::size_t cc_train = 200;
  std::size_t cc_eval = 200;
  std::size_t mpc_train = 120;
  std::size_t mpc_eval = 120;
  std::size_t retrieval_train = 100;
  std::size_t retrieval_eval = 200;

  KeyValues to_key_values() const;
  // Unknown keys are a ConfigError.
  static GenConfig from_key_values(const KeyValues& kv, const std::string& context);
  void validate() const;
  std::size_t total_concepts() const { return n_concepts + mpc_concepts; }
};

/// An image seed packs everything needed to materialize pixels:
/// concept (8 bits) | variant (8) | view (8) | instance key (40).
struct ImageSeed {
  std::uint32_t concept_id = 0;
  std::uint32_t variant = 0;
  std::uint32_t view = 0;  // 0 is the canonical view
  std::uint64_t instance = 0;

  std::uint64_t pack() const;
  static ImageSeed unpack(std::uint64_t packed);
};

/// Concept prototypes and token themes, regenerated from the corpus seed.
class ConceptBank {
 public:
  explicit ConceptBank(const GenConfig& config);

  std::size_t size() const { return prototypes_.size(); }
  const std::vector<double>& prototype(std::size_t concept_id) const { return prototypes_.at(concept_id); }
  const std::vector<TokenId>& theme(std::size_t concept_id) const { return themes_.at(concept_id); }
  TokenId variant_token(std::size_t variant) const;
  TokenId brand_token(std::size_t brand) const;
  // Brand of the product an image seed shows; the image itself does not carry it.
  std::size_t brand_of(std::uint64_t image_seed) const;

  // prototype + variant mark + instance noise (+ view noise), clamped to [0,1].
  std::vector<double> materialize(std::uint64_t image_seed) const;
  // A title for the product behind `image_seed`: theme tokens with noise,
  // plus its variant and brand tokens at random positions.
  TokenIds sample_tokens(std::uint64_t image_seed, Rng& rng) const;

  const GenConfig& config() const { return config_; }

 private:
  GenConfig config_;
  std::vector<std::vector<double>> prototypes_;
  std::vector<std::vector<TokenId>> themes_;
};

struct PairRecord {
  std::uint64_t record_id = 0;
  int concept_id = 0;
  std::uint64_t image_seed = 0;
  TokenIds tokens;
};

struct CrossSide {
  std::optional<TokenIds> tokens;
  std::optional<std::uint64_t> image_seed;

  ModalityFlags flags() const { return {tokens.has_value(), image_seed.has_value()}; }
};

struct CrossPairRecord {
  std::uint64_t record_id = 0;
  Relation relation = Relation::Tag;
  CrossSide source;
  TokenIds target_tokens;
  std::uint64_t target_image_seed = 0;

  int concept_id() const { return static_cast<int>(ImageSeed::unpack(target_image_seed).concept_id); }
};

std::string relation_name(Relation r);
Relation parse_relation(const std::string& name);

// Line formats of the pairs and crosspairs files.
std::string format_pair(const PairRecord& r);
PairRecord parse_pair(const std::string& line, const std::string& context);
std::string format_crosspair(const CrossPairRecord& r);
CrossPairRecord parse_crosspair(const std::string& line, const std::string& context);

// File names inside a corpus directory.
namespace corpus_files {
inline constexpr const char* kManifest = "manifest.txt";
inline constexpr const char* kPairs = "pairs.tsv";
inline constexpr const char* kCrossPairs = "crosspairs.tsv";
inline constexpr const char* kCcTrain = "cc_train.tsv";
inline constexpr const char* kCcEval = "cc_eval.tsv";
inline constexpr const char* kMpcTrain = "mpc_train.tsv";
inline constexpr const char* kMpcEval = "mpc_eval.tsv";
inline constexpr const char* kT2iTrain = "t2i_train.tsv";
inline constexpr const char* kT2iEval = "t2i_eval.tsv";
inline constexpr const char* kQ2pTrain = "q2p_train.tsv";
inline constexpr const char* kQ2pEval = "q2p_eval.tsv";
inline constexpr const char* kI2pTrain = "i2p_train.tsv";
inline constexpr const char* kI2pEval = "i2p_eval.tsv";
}  // namespace corpus_files

// Writes every corpus file plus the manifest; returns the manifest text.
std::string generate_corpus(const GenConfig& config, const std::filesystem::path& out_dir);

// In-memory records with the corpus distribution (ids count from 0), for
// checks that need no files.
std::vector<PairRecord> sample_pair_records(const ConceptBank& bank, std::size_t n, Rng rng);
std::vector<CrossPairRecord> sample_crosspair_records(const ConceptBank& bank, std::size_t n, Rng rng);

PairBatch make_pair_batch(const ConceptBank& bank, std::span<const PairRecord> records);
// Missing source text -> empty list; missing source image -> all grey.
CrossPairBatch make_crosspair_batch(const ConceptBank& bank, std::span<const CrossPairRecord> records);

/// Read access to a generated corpus. Validates the manifest version and
/// every record on load.
class Corpus {
 public:
  explicit Corpus(std::filesystem::path dir);

  const GenConfig& config() const { return config_; }
  const KeyValues& manifest() const { return manifest_; }
  const ConceptBank& bank() const { return bank_; }
  const std::filesystem::path& dir() const { return dir_; }

  std::vector<PairRecord> read_pairs(const std::string& file) const;
  std::vector<CrossPairRecord> read_crosspairs(const std::string& file) const;

  PairBatch make_batch(std::span<const PairRecord> records) const;
  // Missing source text -> empty list; missing source image -> all grey.
  CrossPairBatch make_batch(std::span<const CrossPairRecord> records) const;

 private:
  std::filesystem::path dir_;
  KeyValues manifest_;
  GenConfig config_;
  ConceptBank bank_;
};

/// Endless shuffled batches over one file; each epoch is a fresh
/// permutation drawn from the loader's own engine.
template <class Record, class Batch>
class BatchLoader {
 public:
  BatchLoader(const Corpus& corpus, std::vector<Record> records, std::size_t batch_size, Rng rng,
              bool drop_last = false);

  Batch next();
  std::size_t batches_per_epoch() const;
  std::size_t epoch() const { return epoch_; }
  const std::vector<Record>& records() const { return records_; }
  // The current permutation; exposed for determinism tests.
  const std::vector<std::size_t>& order() const { return order_; }

  Rng& rng() { return rng_; }
  std::size_t cursor() const { return cursor_; }
  // Restores position for checkpoint resume.
  void restore(const Rng& rng, std::size_t epoch, std::size_t cursor, std::vector<std::size_t> order);

 private:
  void reshuffle();

  const Corpus* corpus_;
  std::vector<Record> records_;
  std::size_t batch_size_;
  Rng rng_;
  bool drop_last_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
};

using PairLoader = BatchLoader<PairRecord, PairBatch>;
using CrossPairLoader = BatchLoader<CrossPairRecord, CrossPairBatch>;

PairLoader load_pair_batches(const Corpus& corpus, const std::string& file, std::size_t batch_size, Rng rng,
                             bool drop_last = false);
CrossPairLoader load_crosspair_batches(const Corpus& corpus, const std::string& file, std::size_t batch_size, Rng rng,
                                       bool drop_last = false);

// Fraction of records whose nearest concept prototype mean (estimated from
// the records themselves) is their own concept.
double nearest_centroid_accuracy(const Corpus& corpus, std::span<const PairRecord> records);

}  // namespace omniflux
