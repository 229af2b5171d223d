#include "omniflux/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "omniflux/binary_io.hpp"
#include "omniflux/errors.hpp"
#include "omniflux/masking.hpp"

namespace omniflux {

namespace {

constexpr std::uint64_t kInstanceBits = 40;
constexpr std::uint64_t kInstanceMask = (std::uint64_t{1} << kInstanceBits) - 1;
constexpr std::size_t kMaxVariants = 8;

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string format_tokens(const TokenIds& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(tokens[i]);
  }
  return out;
}

std::uint64_t field_u64(const std::string& s, const std::string& where) {
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) throw FormatError(where + ": bad integer '" + s + "'");
  return v;
}

TokenIds parse_tokens(const std::string& s, const std::string& where) {
  TokenIds out;
  if (s.empty()) return out;
  for (const auto& part : split(s, ' ')) {
    const auto v = field_u64(part, where);
    if (v > std::numeric_limits<TokenId>::max()) throw FormatError(where + ": token id overflow");
    out.push_back(static_cast<TokenId>(v));
  }
  return out;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    auto nl = text.find('\n', start);
    if (nl == std::string::npos) nl = text.size();
    lines.push_back(text.substr(start, nl - start));
    start = nl + 1;
  }
  return lines;
}

void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  std::string text;
  for (const auto& l : lines) text += l + "\n";
  write_file_atomic(path, text);
}

// Balanced label assignment: every label appears floor or ceil of n/k times.
std::vector<std::size_t> balanced_labels(std::size_t n, std::size_t first, std::size_t count, Rng& rng) {
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = first + i % count;
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

std::uint64_t random_instance(Rng& rng) { return rng() & kInstanceMask; }

}  // namespace

// ---------------------------------------------------------------- config

KeyValues GenConfig::to_key_values() const {
  return {
      {"seed", std::to_string(seed)},
      {"n_concepts", std::to_string(n_concepts)},
      {"mpc_concepts", std::to_string(mpc_concepts)},
      {"n_pairs", std::to_string(n_pairs)},
      {"n_crosspairs", std::to_string(n_crosspairs)},
      {"vocab_size", std::to_string(vocab_size)},
      {"image_side", std::to_string(image_side)},
      {"n_variants", std::to_string(n_variants)},
      {"n_brands", std::to_string(n_brands)},
      {"theme_size", std::to_string(theme_size)},
      {"min_tokens", std::to_string(min_tokens)},
      {"max_tokens", std::to_string(max_tokens)},
      {"token_noise", format_double(token_noise)},
      {"pixel_noise", format_double(pixel_noise)},
      {"view_noise", format_double(view_noise)},
      {"cc_train", std::to_string(cc_train)},
      {"cc_eval", std::to_string(cc_eval)},
      {"mpc_train", std::to_string(mpc_train)},
      {"mpc_eval", std::to_string(mpc_eval)},
      {"retrieval_train", std::to_string(retrieval_train)},
      {"retrieval_eval", std::to_string(retrieval_eval)},
  };
}

GenConfig GenConfig::from_key_values(const KeyValues& kv, const std::string& context) {
  GenConfig c;
  for (const auto& [key, value] : kv) {
    const std::string what = context + ": " + key;
    auto size = [&] { return static_cast<std::size_t>(parse_u64(value, what)); };
    if (key == "seed") c.seed = parse_u64(value, what);
    else if (key == "n_concepts") c.n_concepts = size();
    else if (key == "mpc_concepts") c.mpc_concepts = size();
    else if (key == "n_pairs") c.n_pairs = size();
    else if (key == "n_crosspairs") c.n_crosspairs = size();
    else if (key == "vocab_size") c.vocab_size = size();
    else if (key == "image_side") c.image_side = size();
    else if (key == "n_variants") c.n_variants = size();
    else if (key == "n_brands") c.n_brands = size();
    else if (key == "theme_size") c.theme_size = size();
    else if (key == "min_tokens") c.min_tokens = size();
    else if (key == "max_tokens") c.max_tokens = size();
    else if (key == "token_noise") c.token_noise = parse_double(value, what);
    else if (key == "pixel_noise") c.pixel_noise = parse_double(value, what);
    else if (key == "view_noise") c.view_noise = parse_double(value, what);
    else if (key == "cc_train") c.cc_train = size();
    else if (key == "cc_eval") c.cc_eval = size();
    else if (key == "mpc_train") c.mpc_train = size();
    else if (key == "mpc_eval") c.mpc_eval = size();
    else if (key == "retrieval_train") c.retrieval_train = size();
    else if (key == "retrieval_eval") c.retrieval_eval = size();
    else throw ConfigError(context + ": unknown key '" + key + "'");
  }
  return c;
}

void GenConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("generator config: " + msg); };
  if (n_concepts < 2) fail("n_concepts must be at least 2");
  if (total_concepts() > 255) fail("at most 255 concepts");
  if (n_variants == 0 || n_variants > kMaxVariants) fail("n_variants must lie in [1, 8]");
  if (image_side < 16) fail("image_side must be at least 16");
  if (min_tokens == 0 || min_tokens > max_tokens) fail("need 1 <= min_tokens <= max_tokens");
  if (theme_size == 0) fail("theme_size must be positive");
  if (n_brands > 0 && min_tokens < 2) fail("min_tokens must be at least 2 when brands are named");
  if (kFirstContentToken + n_variants + n_brands + total_concepts() * theme_size > vocab_size) {
    fail("vocab_size too small for the concept themes");
  }
  if (!(token_noise >= 0 && token_noise <= 1)) fail("token_noise must lie in [0, 1]");
  if (!(pixel_noise >= 0) || !(view_noise >= 0)) fail("noise levels must be nonnegative");
  if (mpc_concepts == 1) fail("mpc_concepts must be 0 or at least 2");
}

// ---------------------------------------------------------------- seeds

std::uint64_t ImageSeed::pack() const {
  return (std::uint64_t{concept_id & 0xff} << 56) | (std::uint64_t{variant & 0xff} << 48) |
         (std::uint64_t{view & 0xff} << 40) | (instance & kInstanceMask);
}

ImageSeed ImageSeed::unpack(std::uint64_t packed) {
  return {static_cast<std::uint32_t>(packed >> 56), static_cast<std::uint32_t>((packed >> 48) & 0xff),
          static_cast<std::uint32_t>((packed >> 40) & 0xff), packed & kInstanceMask};
}

// ---------------------------------------------------------------- concepts

ConceptBank::ConceptBank(const GenConfig& config) : config_(config) {
  config.validate();
  const std::size_t side = config.image_side;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t c = 0; c < config.total_concepts(); ++c) {
    Rng rng = derive_rng(config.seed, 1000 + c);
    const double base = 0.25 + 0.2 * unit(rng);
    struct Blob {
      double cx, cy, sigma, amp;
    };
    std::vector<Blob> blobs(3);
    for (auto& b : blobs) {
      b.cx = unit(rng) * side;
      b.cy = unit(rng) * side;
      b.sigma = side * (0.1 + 0.15 * unit(rng));
      b.amp = (unit(rng) < 0.5 ? -1.0 : 1.0) * (0.3 + 0.3 * unit(rng));
    }
    const double fx = 1 + static_cast<double>(rng() % 4), fy = 1 + static_cast<double>(rng() % 4);
    const double phase = 2 * std::numbers::pi * unit(rng);

    std::vector<double> img(side * side);
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        double v = base + 0.12 * std::sin(2 * std::numbers::pi * (fx * x + fy * y) / side + phase);
        for (const auto& b : blobs) {
          const double dx = x - b.cx, dy = y - b.cy;
          v += b.amp * std::exp(-(dx * dx + dy * dy) / (2 * b.sigma * b.sigma));
        }
        img[y * side + x] = std::clamp(v, 0.0, 1.0);
      }
    }
    prototypes_.push_back(std::move(img));
  }

  std::vector<TokenId> pool;
  for (std::size_t t = kFirstContentToken + config.n_variants + config.n_brands; t < config.vocab_size; ++t) {
    pool.push_back(static_cast<TokenId>(t));
  }
  Rng rng = derive_rng(config.seed, 2);
  std::shuffle(pool.begin(), pool.end(), rng);
  for (std::size_t c = 0; c < config.total_concepts(); ++c) {
    themes_.emplace_back(pool.begin() + static_cast<std::ptrdiff_t>(c * config.theme_size),
                         pool.begin() + static_cast<std::ptrdiff_t>((c + 1) * config.theme_size));
  }
}

TokenId ConceptBank::variant_token(std::size_t variant) const {
  if (variant >= config_.n_variants) throw ContractError("variant out of range");
  return static_cast<TokenId>(kFirstContentToken + variant);
}

std::vector<double> ConceptBank::materialize(std::uint64_t image_seed) const {
  const ImageSeed s = ImageSeed::unpack(image_seed);
  if (s.concept_id >= size()) throw DataError("image seed names unknown concept " + std::to_string(s.concept_id));
  if (s.variant >= config_.n_variants) throw DataError("image seed names unknown variant " + std::to_string(s.variant));
  const std::size_t side = config_.image_side;
  std::vector<double> img = prototypes_[s.concept_id];

  // Variant mark: a bright square at one of 8 border locations.
  const std::size_t mark = side * 3 / 16;
  const std::size_t lo = side / 16, mid = side * 7 / 16, hi = side * 13 / 16;
  static constexpr std::size_t kSlots[8][2] = {{0, 0}, {0, 1}, {0, 2}, {1, 0}, {1, 2}, {2, 0}, {2, 1}, {2, 2}};
  const std::size_t where[3] = {lo, mid, hi};
  const std::size_t r0 = where[kSlots[s.variant][0]], c0 = where[kSlots[s.variant][1]];
  for (std::size_t y = r0; y < r0 + mark; ++y) {
    for (std::size_t x = c0; x < c0 + mark; ++x) img[y * side + x] = 0.95;
  }

  ImageSeed canonical = s;
  canonical.view = 0;
  Rng instance = derive_rng(canonical.pack(), 0x1a5e);
  std::normal_distribution<double> noise(0.0, config_.pixel_noise);
  for (double& v : img) v += noise(instance);
  if (s.view != 0) {
    Rng view = derive_rng(image_seed, 0x7e3);
    std::normal_distribution<double> jitter(0.0, config_.view_noise);
    for (double& v : img) v += jitter(view);
  }
  for (double& v : img) v = std::clamp(v, 0.0, 1.0);
  return img;
}

TokenId ConceptBank::brand_token(std::size_t brand) const {
  if (brand >= config_.n_brands) throw ContractError("brand out of range");
  return static_cast<TokenId>(kFirstContentToken + config_.n_variants + brand);
}

std::size_t ConceptBank::brand_of(std::uint64_t image_seed) const {
  if (config_.n_brands == 0) throw ContractError("corpus has no brands");
  // Instances are uniform 40-bit keys, so their residues are uniform too.
  return static_cast<std::size_t>(ImageSeed::unpack(image_seed).instance % config_.n_brands);
}

TokenIds ConceptBank::sample_tokens(std::uint64_t image_seed, Rng& rng) const {
  const ImageSeed product = ImageSeed::unpack(image_seed);
  const auto& theme = themes_.at(product.concept_id);
  std::vector<double> weights(theme.size());
  for (std::size_t r = 0; r < theme.size(); ++r) weights[r] = 1.0 / static_cast<double>(r + 1);
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  std::uniform_int_distribution<std::size_t> length(config_.min_tokens, config_.max_tokens);
  std::uniform_int_distribution<TokenId> noise_token(kFirstContentToken, static_cast<TokenId>(config_.vocab_size - 1));

  TokenIds out(length(rng));
  for (auto& t : out) t = uniform01(rng) < config_.token_noise ? noise_token(rng) : theme[pick(rng)];
  const std::size_t at = uniform_index(rng, out.size());
  out[at] = variant_token(product.variant);
  if (config_.n_brands > 0) out[(at + 1 + uniform_index(rng, out.size() - 1)) % out.size()] = brand_token(brand_of(image_seed));
  return out;
}

// ---------------------------------------------------------------- records

std::string relation_name(Relation r) {
  switch (r) {
    case Relation::QueryClick: return "query-click";
    case Relation::Tag: return "tag";
    case Relation::ProductView: return "product-view";
  }
  return "?";
}

Relation parse_relation(const std::string& name) {
  if (name == "query-click") return Relation::QueryClick;
  if (name == "tag") return Relation::Tag;
  if (name == "product-view") return Relation::ProductView;
  throw FormatError("unknown relation '" + name + "'");
}

std::string format_pair(const PairRecord& r) {
  return std::to_string(r.record_id) + "\t" + std::to_string(r.concept_id) + "\t" + std::to_string(r.image_seed) +
         "\t" + format_tokens(r.tokens);
}

PairRecord parse_pair(const std::string& line, const std::string& context) {
  auto f = split(line, '\t');
  if (f.size() != 4) throw FormatError(context + ": expected 4 tab-separated fields, got " + std::to_string(f.size()));
  PairRecord r;
  r.record_id = field_u64(f[0], context);
  r.concept_id = static_cast<int>(field_u64(f[1], context));
  r.image_seed = field_u64(f[2], context);
  r.tokens = parse_tokens(f[3], context);
  return r;
}

std::string format_crosspair(const CrossPairRecord& r) {
  const ModalityFlags fl = r.source.flags();
  std::string flags{fl.has_text ? 't' : '-', fl.has_image ? 'i' : '-'};
  return std::to_string(r.record_id) + "\t" + relation_name(r.relation) + "\t" + flags + "\t" +
         (r.source.tokens ? format_tokens(*r.source.tokens) : "-") + "\t" +
         (r.source.image_seed ? std::to_string(*r.source.image_seed) : "-") + "\t" + format_tokens(r.target_tokens) +
         "\t" + std::to_string(r.target_image_seed);
}

CrossPairRecord parse_crosspair(const std::string& line, const std::string& context) {
  auto f = split(line, '\t');
  if (f.size() != 7) throw FormatError(context + ": expected 7 tab-separated fields, got " + std::to_string(f.size()));
  CrossPairRecord r;
  r.record_id = field_u64(f[0], context);
  r.relation = parse_relation(f[1]);
  if (f[2].size() != 2 || (f[2][0] != 't' && f[2][0] != '-') || (f[2][1] != 'i' && f[2][1] != '-')) {
    throw FormatError(context + ": bad source flags '" + f[2] + "'");
  }
  const bool has_text = f[2][0] == 't', has_image = f[2][1] == 'i';
  if (!has_text && !has_image) throw FormatError(context + ": source has no modality");
  if (has_text) r.source.tokens = parse_tokens(f[3] == "-" ? "" : f[3], context);
  else if (f[3] != "-") throw FormatError(context + ": text flag off but tokens present");
  if (has_image) r.source.image_seed = field_u64(f[4], context);
  else if (f[4] != "-") throw FormatError(context + ": image flag off but image seed present");
  r.target_tokens = parse_tokens(f[5], context);
  r.target_image_seed = field_u64(f[6], context);
  return r;
}

// ---------------------------------------------------------------- generation

namespace {

struct Generator {
  const GenConfig& cfg;
  const ConceptBank& bank;
  std::uint64_t next_id = 0;

  PairRecord pair(std::size_t concept_id, Rng& rng) {
    PairRecord r;
    r.record_id = next_id++;
    r.concept_id = static_cast<int>(concept_id);
    const auto variant = static_cast<std::uint32_t>(uniform_index(rng, cfg.n_variants));
    r.image_seed = ImageSeed{static_cast<std::uint32_t>(concept_id), variant, 0, random_instance(rng)}.pack();
    r.tokens = bank.sample_tokens(r.image_seed, rng);
    return r;
  }

  std::vector<PairRecord> pairs(std::size_t n, std::size_t first_concept, std::size_t n_concepts, Rng rng) {
    std::vector<PairRecord> out;
    for (auto c : balanced_labels(n, first_concept, n_concepts, rng)) out.push_back(pair(c, rng));
    return out;
  }

  CrossPairRecord crosspair(Relation rel, std::size_t concept_id, Rng& rng) {
    PairRecord target = pair(concept_id, rng);
    CrossPairRecord r;
    r.record_id = target.record_id;
    r.relation = rel;
    r.target_tokens = target.tokens;
    r.target_image_seed = target.image_seed;
    ImageSeed view = ImageSeed::unpack(target.image_seed);
    view.view = static_cast<std::uint32_t>(1 + uniform_index(rng, 255));
    switch (rel) {
      case Relation::QueryClick: {
        // The query is an ordered subset of the clicked product's title that
        // always names its variant and brand.
        const auto& t = target.tokens;
        std::vector<bool> chosen(t.size(), false);
        auto choose = [&](TokenId tok) { chosen[static_cast<std::size_t>(std::find(t.begin(), t.end(), tok) - t.begin())] = true; };
        choose(bank.variant_token(view.variant));
        if (cfg.n_brands > 0) choose(bank.brand_token(bank.brand_of(target.image_seed)));
        std::vector<std::size_t> rest;
        for (std::size_t i = 0; i < t.size(); ++i) {
          if (!chosen[i]) rest.push_back(i);
        }
        const std::size_t keep = std::min<std::size_t>(rest.size(), 1 + uniform_index(rng, 4));
        if (keep > 0) {
          for (auto i : sample_mask_indices(rest.size(), static_cast<double>(keep) / static_cast<double>(rest.size()), rng)) {
            chosen[rest[i]] = true;
          }
        }
        TokenIds q;
        for (std::size_t i = 0; i < t.size(); ++i) {
          if (chosen[i]) q.push_back(t[i]);
        }
        r.source.tokens = q;
        break;
      }
      case Relation::Tag:
        r.source.tokens = bank.sample_tokens(target.image_seed, rng);
        r.source.image_seed = view.pack();
        break;
      case Relation::ProductView:
        r.source.image_seed = view.pack();
        break;
    }
    return r;
  }

  std::vector<CrossPairRecord> crosspairs(std::size_t n, std::optional<Relation> only, Rng rng) {
    std::vector<CrossPairRecord> out;
    auto concepts = balanced_labels(n, 0, cfg.n_concepts, rng);
    auto relations = balanced_labels(n, 0, 3, rng);
    for (std::size_t i = 0; i < n; ++i) {
      const Relation rel = only ? *only : static_cast<Relation>(relations[i]);
      out.push_back(crosspair(rel, concepts[i], rng));
    }
    return out;
  }
};

template <class Record, class Fmt>
std::vector<std::string> to_lines(const std::vector<Record>& records, Fmt fmt) {
  std::vector<std::string> out;
  for (const auto& r : records) out.push_back(fmt(r));
  return out;
}

std::string id_range(std::uint64_t first, std::size_t count) {
  return std::to_string(first) + ":" + std::to_string(first + count);
}

}  // namespace

std::vector<PairRecord> sample_pair_records(const ConceptBank& bank, std::size_t n, Rng rng) {
  Generator gen{bank.config(), bank};
  return gen.pairs(n, 0, bank.config().n_concepts, rng);
}

std::vector<CrossPairRecord> sample_crosspair_records(const ConceptBank& bank, std::size_t n, Rng rng) {
  Generator gen{bank.config(), bank};
  return gen.crosspairs(n, std::nullopt, rng);
}

std::string generate_corpus(const GenConfig& config, const std::filesystem::path& out_dir) {
  config.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  ConceptBank bank(config);
  Generator gen{config, bank};
  KeyValues manifest = config.to_key_values();
  manifest["version"] = std::to_string(kCorpusVersion);

  namespace cf = corpus_files;
  auto emit_pairs = [&](const char* file, std::size_t n, std::size_t first, std::size_t count, std::uint64_t stream) {
    const auto start = gen.next_id;
    write_lines(out_dir / file, to_lines(gen.pairs(n, first, count, derive_rng(config.seed, stream)), format_pair));
    manifest[std::string("split.") + file] = id_range(start, n);
  };
  auto emit_cross = [&](const char* file, std::size_t n, std::optional<Relation> only, std::uint64_t stream) {
    const auto start = gen.next_id;
    write_lines(out_dir / file, to_lines(gen.crosspairs(n, only, derive_rng(config.seed, stream)), format_crosspair));
    manifest[std::string("split.") + file] = id_range(start, n);
  };

  emit_pairs(cf::kPairs, config.n_pairs, 0, config.n_concepts, 10);
  emit_cross(cf::kCrossPairs, config.n_crosspairs, std::nullopt, 11);
  emit_pairs(cf::kCcTrain, config.cc_train, 0, config.n_concepts, 12);
  emit_pairs(cf::kCcEval, config.cc_eval, 0, config.n_concepts, 13);
  if (config.mpc_concepts > 0) {
    emit_pairs(cf::kMpcTrain, config.mpc_train, config.n_concepts, config.mpc_concepts, 14);
    emit_pairs(cf::kMpcEval, config.mpc_eval, config.n_concepts, config.mpc_concepts, 15);
  }
  emit_pairs(cf::kT2iTrain, config.retrieval_train, 0, config.n_concepts, 16);
  emit_pairs(cf::kT2iEval, config.retrieval_eval, 0, config.n_concepts, 17);
  emit_cross(cf::kQ2pTrain, config.retrieval_train, Relation::QueryClick, 18);
  emit_cross(cf::kQ2pEval, config.retrieval_eval, Relation::QueryClick, 19);
  emit_cross(cf::kI2pTrain, config.retrieval_train, Relation::ProductView, 20);
  emit_cross(cf::kI2pEval, config.retrieval_eval, Relation::ProductView, 21);

  const std::string text = format_key_values(manifest);
  write_file_atomic(out_dir / cf::kManifest, text);
  return text;
}

// ---------------------------------------------------------------- loading

namespace {

GenConfig config_from_manifest(const KeyValues& manifest, const std::string& context) {
  auto version = manifest.find("version");
  if (version == manifest.end()) throw FormatError(context + ": missing version");
  if (version->second != std::to_string(kCorpusVersion)) {
    throw FormatError(context + ": unsupported corpus version " + version->second);
  }
  for (const char* key : {"seed", "n_concepts", "n_pairs", "n_crosspairs", "vocab_size", "image_side"}) {
    if (!manifest.contains(key)) throw FormatError(context + ": missing mandatory key '" + key + "'");
  }
  KeyValues gen;
  for (const auto& [k, v] : manifest) {
    if (k != "version" && !k.starts_with("split.")) gen.emplace(k, v);
  }
  try {
    return GenConfig::from_key_values(gen, context);
  } catch (const ConfigError& e) {
    throw FormatError(e.what());
  }
}

}  // namespace

Corpus::Corpus(std::filesystem::path dir)
    : dir_(std::move(dir)),
      manifest_(parse_key_values(read_file(dir_ / corpus_files::kManifest), (dir_ / corpus_files::kManifest).string())),
      config_(config_from_manifest(manifest_, (dir_ / corpus_files::kManifest).string())),
      bank_(config_) {}

std::vector<PairRecord> Corpus::read_pairs(const std::string& file) const {
  const auto path = dir_ / file;
  std::vector<PairRecord> out;
  std::size_t line_no = 0;
  for (const auto& line : read_lines(path)) {
    const std::string where = path.string() + ":" + std::to_string(++line_no);
    PairRecord r = parse_pair(line, where);
    if (static_cast<std::size_t>(r.concept_id) >= bank_.size()) throw DataError(where + ": concept id out of range");
    if (ImageSeed::unpack(r.image_seed).concept_id != static_cast<std::uint32_t>(r.concept_id)) {
      throw DataError(where + ": image seed belongs to a different concept");
    }
    for (auto t : r.tokens) {
      if (t >= config_.vocab_size) throw DataError(where + ": token id " + std::to_string(t) + " >= vocab_size");
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<CrossPairRecord> Corpus::read_crosspairs(const std::string& file) const {
  const auto path = dir_ / file;
  std::vector<CrossPairRecord> out;
  std::size_t line_no = 0;
  for (const auto& line : read_lines(path)) {
    const std::string where = path.string() + ":" + std::to_string(++line_no);
    CrossPairRecord r = parse_crosspair(line, where);
    auto check_tokens = [&](const TokenIds& toks) {
      for (auto t : toks) {
        if (t >= config_.vocab_size) throw DataError(where + ": token id " + std::to_string(t) + " >= vocab_size");
      }
    };
    check_tokens(r.target_tokens);
    if (r.source.tokens) check_tokens(*r.source.tokens);
    if (static_cast<std::size_t>(r.concept_id()) >= bank_.size()) throw DataError(where + ": concept id out of range");
    if (r.source.image_seed && ImageSeed::unpack(*r.source.image_seed).concept_id != ImageSeed::unpack(r.target_image_seed).concept_id) {
      throw DataError(where + ": source and target concepts differ");
    }
    out.push_back(std::move(r));
  }
  return out;
}

PairBatch make_pair_batch(const ConceptBank& bank, std::span<const PairRecord> records) {
  PairBatch b;
  const std::size_t side = bank.config().image_side, p = side * side;
  b.pixels = Tensor::zeros({records.size(), p});
  auto px = b.pixels.data();
  for (std::size_t i = 0; i < records.size(); ++i) {
    b.record_ids.push_back(records[i].record_id);
    b.concept_ids.push_back(records[i].concept_id);
    b.tokens.push_back(records[i].tokens);
    auto img = bank.materialize(records[i].image_seed);
    std::copy(img.begin(), img.end(), px.begin() + i * p);
  }
  return b;
}

CrossPairBatch make_crosspair_batch(const ConceptBank& bank, std::span<const CrossPairRecord> records) {
  CrossPairBatch b;
  const std::size_t side = bank.config().image_side, p = side * side;
  b.source_pixels = Tensor::full({records.size(), p}, kGreyPixel);
  b.target_pixels = Tensor::zeros({records.size(), p});
  auto sp = b.source_pixels.data(), tp = b.target_pixels.data();
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    b.record_ids.push_back(r.record_id);
    b.concept_ids.push_back(r.concept_id());
    b.relations.push_back(r.relation);
    b.source_flags.push_back(r.source.flags());
    b.source_tokens.push_back(r.source.tokens.value_or(TokenIds{}));
    if (r.source.image_seed) {
      auto img = bank.materialize(*r.source.image_seed);
      std::copy(img.begin(), img.end(), sp.begin() + i * p);
    }
    b.target_tokens.push_back(r.target_tokens);
    auto img = bank.materialize(r.target_image_seed);
    std::copy(img.begin(), img.end(), tp.begin() + i * p);
  }
  return b;
}

PairBatch Corpus::make_batch(std::span<const PairRecord> records) const { return make_pair_batch(bank_, records); }

CrossPairBatch Corpus::make_batch(std::span<const CrossPairRecord> records) const {
  return make_crosspair_batch(bank_, records);
}

template <class Record, class Batch>
BatchLoader<Record, Batch>::BatchLoader(const Corpus& corpus, std::vector<Record> records, std::size_t batch_size,
                                        Rng rng, bool drop_last)
    : corpus_(&corpus), records_(std::move(records)), batch_size_(batch_size), rng_(rng), drop_last_(drop_last) {
  if (batch_size_ == 0) throw ConfigError("batch size must be positive");
  if (records_.empty() || (drop_last_ && records_.size() < batch_size_)) {
    throw DataError("not enough records for batch size " + std::to_string(batch_size_));
  }
  reshuffle();
}

template <class Record, class Batch>
void BatchLoader<Record, Batch>::reshuffle() {
  order_.resize(records_.size());
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  std::shuffle(order_.begin(), order_.end(), rng_);
  cursor_ = 0;
}

template <class Record, class Batch>
std::size_t BatchLoader<Record, Batch>::batches_per_epoch() const {
  return drop_last_ ? records_.size() / batch_size_ : (records_.size() + batch_size_ - 1) / batch_size_;
}

template <class Record, class Batch>
Batch BatchLoader<Record, Batch>::next() {
  const std::size_t remaining = records_.size() - cursor_;
  if (remaining == 0 || (drop_last_ && remaining < batch_size_)) {
    ++epoch_;
    reshuffle();
  }
  const std::size_t n = std::min(batch_size_, records_.size() - cursor_);
  std::vector<Record> picked;
  for (std::size_t i = 0; i < n; ++i) picked.push_back(records_[order_[cursor_ + i]]);
  cursor_ += n;
  return corpus_->make_batch(std::span<const Record>(picked));
}

template <class Record, class Batch>
void BatchLoader<Record, Batch>::restore(const Rng& rng, std::size_t epoch, std::size_t cursor,
                                         std::vector<std::size_t> order) {
  if (order.size() != records_.size() || cursor > order.size()) throw FormatError("loader state does not fit the corpus");
  rng_ = rng;
  epoch_ = epoch;
  cursor_ = cursor;
  order_ = std::move(order);
}

template class BatchLoader<PairRecord, PairBatch>;
template class BatchLoader<CrossPairRecord, CrossPairBatch>;

PairLoader load_pair_batches(const Corpus& corpus, const std::string& file, std::size_t batch_size, Rng rng,
                             bool drop_last) {
  return PairLoader(corpus, corpus.read_pairs(file), batch_size, rng, drop_last);
}

CrossPairLoader load_crosspair_batches(const Corpus& corpus, const std::string& file, std::size_t batch_size, Rng rng,
                                       bool drop_last) {
  return CrossPairLoader(corpus, corpus.read_crosspairs(file), batch_size, rng, drop_last);
}

double nearest_centroid_accuracy(const Corpus& corpus, std::span<const PairRecord> records) {
  const std::size_t k = corpus.bank().size(), p = corpus.config().image_side * corpus.config().image_side;
  std::vector<std::vector<double>> images;
  std::vector<std::vector<double>> centroid(k, std::vector<double>(p, 0.0));
  std::vector<std::size_t> counts(k, 0);
  for (const auto& r : records) {
    images.push_back(corpus.bank().materialize(r.image_seed));
    for (std::size_t i = 0; i < p; ++i) centroid[r.concept_id][i] += images.back()[i];
    ++counts[r.concept_id];
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (counts[c]) {
      for (double& v : centroid[c]) v /= static_cast<double>(counts[c]);
    }
  }
  std::size_t correct = 0;
  for (std::size_t n = 0; n < records.size(); ++n) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t c = 0; c < k; ++c) {
      if (!counts[c]) continue;
      double d = 0;
      for (std::size_t i = 0; i < p; ++i) d += (images[n][i] - centroid[c][i]) * (images[n][i] - centroid[c][i]);
      if (d < best) best = d, arg = c;
    }
    correct += static_cast<int>(arg) == records[n].concept_id;
  }
  return records.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(records.size());
}

}  // namespace omniflux
