#include "omniflux/loss_check.hpp"

#include <algorithm>
#include <chrono>

#include "omniflux/data.hpp"
#include "omniflux/errors.hpp"
#include "omniflux/objectives.hpp"
#include "omniflux/teachers.hpp"

namespace omniflux {

namespace {

TaskWeights only(const std::string& loss) {
  TaskWeights w = TaskWeights::zeros();
  if (loss == "mlm") w.mlm = 1;
  else if (loss == "mim-fr") w.mim_fr = 1;
  else if (loss == "mim-kl") w.mim_kl = 1;
  else if (loss == "itc") w.itc = 1;
  else if (loss == "itm") w.itm = 1;
  else w.omni.fill(1.0);
  return w;
}

// Shortens texts that the model's position table cannot hold.
void clip_tokens(std::vector<TokenIds>& texts, std::size_t max_len) {
  for (auto& t : texts) {
    if (t.size() > max_len) t.resize(max_len);
  }
}

}  // namespace

std::vector<LossCheckResult> check_loss_gradients(const std::string& which, const LossCheckConfig& config) {
  std::vector<std::string> losses;
  if (which == "all") losses.assign(std::begin(kCheckedLosses), std::end(kCheckedLosses));
  else if (std::find(std::begin(kCheckedLosses), std::end(kCheckedLosses), which) != std::end(kCheckedLosses)) {
    losses.push_back(which);
  } else {
    throw ConfigError("unknown loss '" + which + "' (expected all, mlm, mim-fr, mim-kl, itc, itm or omni)");
  }
  config.model.validate();
  if (config.batch_size < 2) throw ConfigError("grad-check needs a batch of at least 2");

  GenConfig gen;
  gen.seed = config.seed;
  gen.image_side = config.model.image_side;
  gen.vocab_size = config.model.vocab_size;
  ConceptBank bank(gen);
  const auto pair_records = sample_pair_records(bank, config.batch_size, derive_rng(config.seed, 1));
  const auto cross_records = sample_crosspair_records(bank, config.batch_size, derive_rng(config.seed, 2));
  PairBatch pairs = make_pair_batch(bank, pair_records);
  CrossPairBatch cross = make_crosspair_batch(bank, cross_records);
  clip_tokens(pairs.tokens, config.model.max_text_len);
  clip_tokens(cross.source_tokens, config.model.max_text_len);
  clip_tokens(cross.target_tokens, config.model.max_text_len);

  TeacherConfig tc;
  tc.pixel_count = config.model.pixel_count();
  tc.feature_dim = config.model.teacher_feature_dim;
  tc.clusters = config.model.teacher_clusters;
  const Teachers teachers(tc);
  const ModelState state = init_model(config.model);
  std::vector<std::string> names;
  for (const auto& [name, t] : state.named_parameters()) names.push_back(name);

  std::vector<LossCheckResult> out;
  for (const auto& loss : losses) {
    const auto start = std::chrono::steady_clock::now();
    const TaskWeights weights = only(loss);
    LossFn fn;
    if (loss == "omni") {
      fn = [&](Graph& g) { return omni_step_loss(g, state, cross, weights).total; };
    } else {
      fn = [&](Graph& g) {
        Rng rng = derive_rng(config.seed, 3);  // same masks and negatives on every call
        return image_text_step_loss(g, state, pairs, teachers, weights, rng).total;
      };
    }
    GradCheckOptions opt;
    opt.eps = config.eps;
    opt.max_entries_per_tensor = config.entries_per_tensor;
    opt.seed = config.seed;
    LossCheckResult r;
    r.loss = loss;
    r.result = grad_check(fn, state.parameters(), opt);
    r.worst_parameter = names.at(r.result.worst_tensor);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    r.passed = r.result.max_rel_error < config.tolerance;
    out.push_back(r);
  }
  return out;
}

}  // namespace omniflux
