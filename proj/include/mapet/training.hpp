#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "mapet/config.hpp"
#include "mapet/dataset.hpp"
#include "mapet/encoder.hpp"
#include "mapet/metrics.hpp"
#include "mapet/objectives.hpp"
#include "mapet/optim.hpp"
#include "mapet/params.hpp"
#include "mapet/tokenizer.hpp"

namespace mapet {

// Seed streams derived from the run seed.
enum SeedStream : std::uint64_t {
  kSeedModel = 1,
  kSeedOrder = 2,
  kSeedMasks = 3,
  kSeedAugment = 4,
  kSeedEval = 5,
  kSeedTokenizer = 6,
  kSeedHead = 7,
};

// ---------------------------------------------------------------------------
// Data preparation.

struct Splits {
  Dataset train;
  Dataset eval;
};

inline Splits synthetic_splits(const RunConfig& c) {
  SyntheticGenerator gen(synthetic_spec(c));
  return {gen.generate(c.data.train_images, derive_seed(c.data.seed, 100), "train"),
          gen.generate(c.data.eval_images, derive_seed(c.data.seed, 200), "eval")};
}

inline std::string feature_file_for(const std::string& dir, const std::string& source) {
  std::string stem = std::filesystem::path(source).stem().string();
  if (source.starts_with("synthetic:")) {
    stem = source;
    std::replace(stem.begin(), stem.end(), ':', '_');
  }
  return (std::filesystem::path(dir) / (stem + ".kcfg")).string();
}

inline std::unique_ptr<FeatureExtractor> make_extractor(const RunConfig& c) {
  if (!c.tokenizer.features.empty())
    return std::make_unique<FeatureFileExtractor>(GridShape{c.model.num_patches(), c.tokenizer.feature_dim});
  return std::make_unique<ToyExtractor>(c.model.patch_size, c.model.channels, c.tokenizer.feature_dim,
                                        derive_seed(c.seed, kSeedTokenizer));
}

inline FeatureGrid features_of(const RunConfig& c, const FeatureExtractor& ex, const LabeledImage& item) {
  const std::string source = c.tokenizer.features.empty() ? item.source : feature_file_for(c.tokenizer.features, item.source);
  auto grid = extract_features(item.image, ex, source);
  if (grid.cells() != c.model.num_patches())
    throw DataError("features for " + item.source + " have " + std::to_string(grid.cells()) + " cells, model has " +
                    std::to_string(c.model.num_patches()) + " patches");
  return grid;
}

inline std::vector<FeatureGrid> extract_all(const RunConfig& c, const FeatureExtractor& ex, const Dataset& ds) {
  std::vector<FeatureGrid> out;
  out.reserve(ds.size());
  for (const auto& item : ds.items) out.push_back(features_of(c, ex, item));
  return out;
}

inline Codebook fit_codebook(const RunConfig& c, const Dataset& ds) {
  const auto ex = make_extractor(c);
  const auto grids = extract_all(c, *ex, ds);
  Rng rng(derive_seed(c.seed, kSeedTokenizer));
  const auto sample = sample_features(grids, c.tokenizer.sample_rate, rng);
  KMeansOptions opts;
  opts.k = c.tokenizer.vocab_size;
  opts.max_iters = c.tokenizer.max_iters;
  auto cb = fit_kmeans(sample, opts, rng);
  cb.extractor = ex->id();
  return cb;
}

inline TokenCache tokenize_dataset(const RunConfig& c, const Dataset& ds, const Codebook& cb) {
  const auto ex = make_extractor(c);
  TokenCache cache;
  cache.tokens_per_image = c.model.num_patches();
  for (const auto& item : ds.items) cache.images.push_back(tokenize(features_of(c, *ex, item), cb));
  return cache;
}

inline void check_tokens(const TokenCache& cache, const Dataset& ds, std::size_t num_patches, std::size_t vocab) {
  if (cache.images.size() != ds.size())
    throw DataError("token cache holds " + std::to_string(cache.images.size()) + " images, dataset has " +
                    std::to_string(ds.size()));
  if (cache.tokens_per_image != num_patches)
    throw DataError("token cache has " + std::to_string(cache.tokens_per_image) + " tokens per image, model has " +
                    std::to_string(num_patches) + " patches");
  for (const auto& g : cache.images)
    for (auto t : g)
      if (t >= vocab)
        throw InvalidToken("token id " + std::to_string(t) + " outside vocabulary of " + std::to_string(vocab));
}

// ---------------------------------------------------------------------------
// Checkpoints.

inline Checkpoint checkpoint_of(const Encoder<float>& model, const RunConfig& c) {
  return make_checkpoint(model.params(), json(c).dump());
}

// Builds a model for `c` and copies the checkpoint tensors selected by `keep`.
// The architecture recorded in the checkpoint must match.
template <typename Keep>
Encoder<float> encoder_from_checkpoint(const RunConfig& c, const Checkpoint& ck, Keep&& keep) {
  json stored;
  try {
    stored = json::parse(ck.config_json);
  } catch (const json::exception&) {
    throw IncompatibleCheckpoint("checkpoint: config block is not valid JSON");
  }
  if (stored.contains("model")) {
    const json want = c.model;
    for (const auto& [key, value] : want.items())
      if (key != "drop_path" && stored["model"].contains(key) && stored["model"][key] != value)
        throw IncompatibleCheckpoint("checkpoint: model." + key + " is " + stored["model"][key].dump() +
                                     " but the config asks for " + value.dump());
  }
  Encoder<float> model(c.encoder(), derive_seed(c.seed, kSeedModel));
  load_parameters(model.params(), ck, keep);
  return model;
}

// ---------------------------------------------------------------------------
// Shared pieces.

struct EpochSampler {
  std::size_t n;
  Rng rng;
  std::vector<std::size_t> order;
  std::size_t pos = 0;
  std::size_t epoch = 0;

  EpochSampler(std::size_t count, std::uint64_t seed) : n(count), rng(seed) { reshuffle(); }

  void reshuffle() {
    order.resize(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_index(i + 1)]);
    pos = 0;
  }

  std::size_t next() {
    if (pos == n) {
      ++epoch;
      reshuffle();
    }
    return order[pos++];
  }

  double progress() const { return double(epoch) + double(pos) / double(n); }
};

inline std::vector<Matrix<float>> patch_all(const Dataset& ds, std::size_t patch_size) {
  std::vector<Matrix<float>> out;
  out.reserve(ds.size());
  for (const auto& item : ds.items) out.push_back(patchify<float>(item.image, patch_size).patches);
  return out;
}

template <typename S>
std::size_t argmax_row(const Matrix<S>& m, std::size_t row) {
  const auto r = m.row(row);
  return static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
}

// 1 if `label` is among the k largest entries of the row (ties favor lower index).
template <typename S>
bool in_top_k(const Matrix<S>& m, std::size_t row, std::size_t label, std::size_t k) {
  const auto r = m.row(row);
  std::size_t better = 0;
  for (std::size_t j = 0; j < r.size(); ++j)
    if (r[j] > r[label] || (r[j] == r[label] && j < label)) ++better;
  return better < k;
}

template <typename S>
void accumulate(Gradients<S>& into, const Tape<S>& tape, S scale) {
  tape.parameter_grads([&](std::size_t idx, const Matrix<S>& g) {
    auto* dst = into.grads[idx].data();
    for (std::size_t k = 0; k < g.size(); ++k) dst[k] += scale * g.data()[k];
  });
}

inline void guard_finite(double loss, double grad_norm, const std::string& phase, std::size_t step, double lr) {
  if (!std::isfinite(loss) || !std::isfinite(grad_norm))
    throw DivergenceError(phase + ": loss " + std::to_string(loss) + ", gradient norm " + std::to_string(grad_norm) +
                          " at step " + std::to_string(step) + " (lr " + std::to_string(lr) + ")");
}

// ---------------------------------------------------------------------------
// Pre-training.

struct PretrainEval {
  double loss = 0.0;
  double top1 = 0.0;
  std::size_t predictions = 0;
};

struct PretrainResult {
  Encoder<float> model;
  std::size_t steps = 0;
  PretrainEval initial;
  PretrainEval final;
};

// Builds the per-sample graph; returns logits and the target token ids.
inline std::pair<Var<float>, std::vector<std::size_t>> pretrain_graph(const Encoder<float>& model, Binder<float>& b,
                                                                      Objective obj, const RunConfig& c,
                                                                      const Matrix<float>& patches,
                                                                      const TokenGrid& tokens, Rng& rng,
                                                                      const ForwardOptions& opts) {
  auto emb = model.embed(b, b.tape().constant(patches));
  std::vector<std::size_t> ids;
  const std::size_t n = patches.rows();
  if (obj == Objective::kMim) {
    const auto set = sample_mim_mask(n, c.pretrain.mim_ratio, rng);
    for (auto i : set) ids.push_back(tokens[i]);
    return {model.mim_logits(b, emb, model.positions(b), set, opts), ids};
  }
  const auto perm = sample_permutation(n, c.pretrain.cut, rng);
  for (std::size_t t = perm.cut; t < n; ++t) ids.push_back(tokens[perm.order[t]]);
  return {model.pretrain_logits(b, emb, model.positions(b), perm, obj, nullptr, opts), ids};
}

// Mean target loss and top-1 over a dataset, with permutations / mask sets
// drawn from a fixed seed so that repeated evaluations are comparable.
inline PretrainEval evaluate_pretrain(const Encoder<float>& model, const RunConfig& c,
                                      const std::vector<Matrix<float>>& patches, const TokenCache& tokens) {
  Rng rng(derive_seed(c.seed, kSeedEval));
  const auto obj = c.objective();
  PretrainEval ev;
  double total = 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < patches.size(); ++i) {
    Tape<float> tape;
    Binder<float> b(tape, model.params(), false);
    auto [logits, ids] = pretrain_graph(model, b, obj, c, patches[i], tokens.images[i], rng, {});
    const auto& lv = logits.value();
    TargetBatch<double> batch{lv.cast<double>(), ids, {}};
    total += loss_for(obj, batch) * double(ids.size());
    for (std::size_t r = 0; r < ids.size(); ++r) correct += argmax_row(lv, r) == ids[r];
    ev.predictions += ids.size();
  }
  ev.loss = total / double(ev.predictions);
  ev.top1 = double(correct) / double(ev.predictions);
  return ev;
}

struct PretrainInputs {
  const Dataset* train = nullptr;
  const TokenCache* train_tokens = nullptr;
  const Dataset* eval = nullptr;  // optional
  const TokenCache* eval_tokens = nullptr;
  const Codebook* codebook = nullptr;  // enables per-epoch cache spot checks
  std::string checkpoint_path;         // empty = no checkpoint files
};

inline PretrainResult pretrain(const RunConfig& c, const PretrainInputs& in, MetricsLogger& log) {
  detail::check(in.train && in.train_tokens, "pretrain: training data and tokens are required");
  const auto obj = c.objective();
  const std::size_t n = c.model.num_patches();
  check_tokens(*in.train_tokens, *in.train, n, c.tokenizer.vocab_size);
  if (in.eval) check_tokens(*in.eval_tokens, *in.eval, n, c.tokenizer.vocab_size);

  PretrainResult res{Encoder<float>(c.encoder(), derive_seed(c.seed, kSeedModel)), 0, {}, {}};
  auto& model = res.model;
  const auto train_patches = patch_all(*in.train, c.model.patch_size);
  std::vector<Matrix<float>> eval_patches;
  if (in.eval) {
    eval_patches = patch_all(*in.eval, c.model.patch_size);
    res.initial = evaluate_pretrain(model, c, eval_patches, *in.eval_tokens);
    log.log({"pretrain_eval", 0, 0.0, res.initial.loss, 0.0, res.initial.top1, std::nullopt});
  }

  const std::size_t batch = c.pretrain.batch_size;
  const std::size_t steps_per_epoch = (in.train->size() + batch - 1) / batch;
  const std::size_t total = steps_for(c.pretrain.epochs, in.train->size(), batch, c.pretrain.max_steps);
  const auto sched = make_schedule(c.pretrain.optim, total, steps_per_epoch);
  AdamW<float> opt(model.params(), c.pretrain.optim.adamw());
  EpochSampler sampler(in.train->size(), derive_seed(c.seed, kSeedOrder));
  Rng mask_rng(derive_seed(c.seed, kSeedMasks)), aug_rng(derive_seed(c.seed, kSeedAugment));
  const auto extractor = in.codebook ? make_extractor(c) : nullptr;
  std::size_t checked_epoch = SIZE_MAX;

  Gradients<float> grads(model.params());
  double window_loss = 0.0, window_correct = 0.0, window_preds = 0.0;
  std::size_t window_steps = 0;
  for (std::size_t step = 0; step < total; ++step) {
    if (in.codebook && sampler.epoch != checked_epoch) {
      // Cached tokens must match a fresh tokenization.
      checked_epoch = sampler.epoch;
      const std::size_t probe = sampler.epoch % in.train->size();
      if (tokenize(features_of(c, *extractor, in.train->items[probe]), *in.codebook) != in.train_tokens->images[probe])
        throw DataError("token cache disagrees with the codebook for " + in.train->items[probe].source);
    }
    const double lr = sched.at(step);
    grads.set_zero();
    double batch_loss = 0.0;
    std::size_t correct = 0, preds = 0;
    for (std::size_t k = 0; k < batch; ++k) {
      const std::size_t idx = sampler.next();
      Matrix<float> jittered;
      const Matrix<float>* patches = &train_patches[idx];
      if (c.pretrain.color_jitter > 0.0) {
        ImageTensor img = in.train->items[idx].image;
        color_jitter(img, c.pretrain.color_jitter, aug_rng);
        jittered = patchify<float>(img, c.model.patch_size).patches;
        patches = &jittered;
      }
      Tape<float> tape;
      Binder<float> b(tape, model.params(), true);
      ForwardOptions opts{true, &mask_rng};
      auto [logits, ids] = pretrain_graph(model, b, obj, c, *patches, in.train_tokens->images[idx], mask_rng, opts);
      auto loss = cross_entropy_loss<float>(logits, ids);
      tape.backward(loss);
      accumulate(grads, tape, 1.0f / float(batch));
      batch_loss += double(loss.value()(0, 0));
      for (std::size_t r = 0; r < ids.size(); ++r) correct += argmax_row(logits.value(), r) == ids[r];
      preds += ids.size();
    }
    batch_loss /= double(batch);
    const double norm = clip_grad_norm(grads, c.pretrain.optim.clip);
    guard_finite(batch_loss, norm, "pretrain", step, lr);
    opt.step(model.params(), grads, lr);
    window_loss += batch_loss;
    window_correct += double(correct);
    window_preds += double(preds);
    ++window_steps;
    const bool last = step + 1 == total;
    if ((step + 1) % std::max<std::size_t>(c.pretrain.log_every, 1) == 0 || last) {
      log.log({"pretrain", step + 1, sampler.progress(), window_loss / double(window_steps), lr,
               window_correct / window_preds, std::nullopt});
      window_loss = window_correct = window_preds = 0.0;
      window_steps = 0;
    }
    if (!in.checkpoint_path.empty() && c.pretrain.checkpoint_every > 0 && (step + 1) % c.pretrain.checkpoint_every == 0)
      save_checkpoint(in.checkpoint_path + ".step" + std::to_string(step + 1), checkpoint_of(model, c));
  }
  res.steps = total;
  if (in.eval) {
    res.final = evaluate_pretrain(model, c, eval_patches, *in.eval_tokens);
    log.log({"pretrain_eval", total, sampler.progress(), res.final.loss, 0.0, res.final.top1, std::nullopt});
  }
  if (!in.checkpoint_path.empty()) save_checkpoint(in.checkpoint_path, checkpoint_of(model, c));
  return res;
}

// ---------------------------------------------------------------------------
// Classification: fine-tuning and linear probing.

struct Accuracy {
  double top1 = 0.0;
  double top5 = 0.0;
  double loss = 0.0;
};

template <typename S>
Accuracy accuracy_of(const std::vector<Matrix<S>>& logits, const std::vector<std::size_t>& labels) {
  Accuracy a;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    a.top1 += in_top_k(logits[i], 0, labels[i], 1);
    a.top5 += in_top_k(logits[i], 0, labels[i], 5);
    TargetBatch<double> b{logits[i].template cast<double>(), {labels[i]}, {}};
    a.loss += detail::mean_cross_entropy(b);
  }
  const double n = double(std::max<std::size_t>(logits.size(), 1));
  a.top1 /= n;
  a.top5 /= n;
  a.loss /= n;
  return a;
}

inline std::vector<std::size_t> labels_of(const Dataset& ds) {
  std::vector<std::size_t> out;
  for (const auto& item : ds.items) out.push_back(item.label);
  return out;
}

inline Accuracy evaluate_classifier(const Encoder<float>& model, const Dataset& ds, std::size_t patch_size) {
  std::vector<Matrix<float>> logits;
  for (const auto& item : ds.items) {
    const auto seq = model.embed_patches(patchify<float>(item.image, patch_size).patches);
    logits.push_back(classify(forward_finetune(seq, model), model.classifier()));
  }
  return accuracy_of(logits, labels_of(ds));
}

struct FinetuneResult {
  Encoder<float> model;
  std::size_t steps = 0;
  Accuracy eval;
};

// Backbone from `ck` (null = random init), fresh classification head, all
// parameters trained with label-smoothed cross-entropy.
inline FinetuneResult finetune(const RunConfig& c, const Checkpoint* ck, const Dataset& train, const Dataset& eval,
                               MetricsLogger& log) {
  const auto& fc = c.finetune;
  FinetuneResult res{ck ? encoder_from_checkpoint(c, *ck, &Encoder<float>::is_backbone)
                        : Encoder<float>(c.encoder(), derive_seed(c.seed, kSeedModel)),
                     0,
                     {}};
  auto& model = res.model;
  Rng head_rng(derive_seed(c.seed, kSeedHead));
  model.add_classifier(train.num_classes, head_rng);
  const std::size_t batch = fc.batch_size;
  const std::size_t steps_per_epoch = (train.size() + batch - 1) / batch;
  const std::size_t total = steps_for(fc.epochs, train.size(), batch, fc.max_steps);
  const auto sched = make_schedule(fc.optim, total, steps_per_epoch);
  const auto scales = layer_decay_scales(model.params(), fc.optim.layer_decay);
  // The vocabulary head and mask token take no part in classification.
  std::vector<bool> frozen;
  for (const auto& p : model.params()) frozen.push_back(p.name == "mask_token" || p.name.starts_with("vocab_head"));
  AdamW<float> opt(model.params(), fc.optim.adamw());
  EpochSampler sampler(train.size(), derive_seed(c.seed, kSeedOrder));
  Rng aug(derive_seed(c.seed, kSeedAugment)), drop_rng(derive_seed(c.seed, kSeedMasks));
  const std::size_t classes = train.num_classes;
  Gradients<float> grads(model.params());
  double window = 0.0;
  std::size_t window_steps = 0;
  for (std::size_t step = 0; step < total; ++step) {
    const double lr = sched.at(step);
    grads.set_zero();
    double batch_loss = 0.0;
    for (std::size_t k = 0; k < batch; ++k) {
      const auto& item = train.items[sampler.next()];
      ImageTensor img = item.image;
      std::vector<std::size_t> label{item.label};
      Matrix<float> target = ad::one_hot<float>(label, classes, float(fc.label_smoothing));
      const bool use_mix = fc.mixup > 0.0, use_cut = fc.cutmix > 0.0;
      if (use_mix || use_cut) {
        const auto& other = train.items[aug.uniform_index(train.size())];
        const bool cut = use_cut && (!use_mix || aug.bernoulli(0.5));
        const double lam = cut ? cutmix(img, other.image, fc.cutmix, aug) : mixup(img, other.image, fc.mixup, aug);
        std::vector<std::size_t> other_label{other.label};
        const auto t2 = ad::one_hot<float>(other_label, classes, float(fc.label_smoothing));
        for (std::size_t j = 0; j < classes; ++j) target(0, j) = float(lam * target(0, j) + (1 - lam) * t2(0, j));
      }
      random_erase(img, fc.erasing, aug);
      Tape<float> tape;
      Binder<float> b(tape, model.params(), true);
      auto emb = model.embed(b, tape.constant(patchify<float>(img, c.model.patch_size).patches));
      auto feats = model.content_stream(b, emb, nullptr, {true, &drop_rng});
      auto loss = ad::cross_entropy(model.classifier_logits(b, feats), target);
      tape.backward(loss);
      accumulate(grads, tape, 1.0f / float(batch));
      batch_loss += double(loss.value()(0, 0));
    }
    batch_loss /= double(batch);
    const double norm = clip_grad_norm(grads, fc.optim.clip);
    guard_finite(batch_loss, norm, "finetune", step, lr);
    opt.step(model.params(), grads, lr, scales, frozen);
    window += batch_loss;
    ++window_steps;
    if ((step + 1) % std::max<std::size_t>(fc.log_every, 1) == 0 || step + 1 == total) {
      log.log({"finetune", step + 1, sampler.progress(), window / double(window_steps), lr, std::nullopt, std::nullopt});
      window = 0.0;
      window_steps = 0;
    }
  }
  res.steps = total;
  res.eval = evaluate_classifier(model, eval, c.model.patch_size);
  log.log({"finetune_eval", total, sampler.progress(), res.eval.loss, 0.0, res.eval.top1, res.eval.top5});
  return res;
}

// Mean-pooled final features per image.
inline Matrix<float> pooled_features(const Encoder<float>& model, const Dataset& ds, std::size_t patch_size) {
  Matrix<float> out(ds.size(), model.config().dim);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto seq = model.embed_patches(patchify<float>(ds.items[i].image, patch_size).patches);
    const auto f = forward_finetune(seq, model);
    for (std::size_t r = 0; r < f.rows(); ++r)
      for (std::size_t d = 0; d < f.cols(); ++d) out(i, d) += f(r, d) / float(f.rows());
  }
  return out;
}

struct ProbeResult {
  Accuracy eval;
  Accuracy train;
  std::size_t steps = 0;
  std::uint64_t backbone_hash_before = 0;
  std::uint64_t backbone_hash_after = 0;
};

// Linear head on frozen, standardized pooled features (per-dimension mean and
// variance from the training split, no learned affine).
inline ProbeResult linear_probe(const RunConfig& c, const Encoder<float>& backbone, const Dataset& train,
                                const Dataset& eval, MetricsLogger& log) {
  const auto& pc = c.probe;
  ProbeResult res;
  res.backbone_hash_before = parameter_hash(backbone.params());
  auto xtr = pooled_features(backbone, train, c.model.patch_size);
  auto xev = pooled_features(backbone, eval, c.model.patch_size);
  const std::size_t d = xtr.cols(), classes = train.num_classes;
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 0; i < xtr.rows(); ++i) mean += xtr(i, j);
    mean /= double(xtr.rows());
    for (std::size_t i = 0; i < xtr.rows(); ++i) var += (xtr(i, j) - mean) * (xtr(i, j) - mean);
    const double inv = 1.0 / std::sqrt(var / double(xtr.rows()) + 1e-6);
    for (auto* x : {&xtr, &xev})
      for (std::size_t i = 0; i < x->rows(); ++i) (*x)(i, j) = float(((*x)(i, j) - mean) * inv);
  }
  ParameterSet<float> head;
  Rng rng(derive_seed(c.seed, kSeedHead));
  Matrix<float> w(d, classes);
  for (auto& v : w.values()) v = float(rng.truncated_normal(0.01));
  head.add("head.weight", w, true, 0);
  head.add("head.bias", Matrix<float>(1, classes), false, 0);
  const std::size_t batch = std::min(pc.batch_size, train.size());
  const std::size_t steps_per_epoch = (train.size() + batch - 1) / batch;
  const std::size_t total = steps_for(pc.epochs, train.size(), batch);
  const auto sched = make_schedule(pc.optim, total, steps_per_epoch);
  AdamW<float> opt(head, pc.optim.adamw());
  EpochSampler sampler(train.size(), derive_seed(c.seed, kSeedOrder));
  Gradients<float> grads(head);
  double window = 0.0;
  std::size_t window_steps = 0;
  for (std::size_t step = 0; step < total; ++step) {
    const double lr = sched.at(step);
    std::vector<std::size_t> idx(batch), labels(batch);
    for (std::size_t k = 0; k < batch; ++k) {
      idx[k] = sampler.next();
      labels[k] = train.items[idx[k]].label;
    }
    Tape<float> tape;
    auto x = tape.constant(gather_rows(xtr, std::span<const std::size_t>(idx)));
    auto logits = ad::add_row(ad::matmul(x, tape.parameter(head[0].value, 0)), tape.parameter(head[1].value, 1));
    auto loss = ad::cross_entropy(logits, ad::one_hot<float>(labels, classes));
    tape.backward(loss);
    grads.set_zero();
    accumulate(grads, tape, 1.0f);
    const double norm = clip_grad_norm(grads, pc.optim.clip);
    guard_finite(double(loss.value()(0, 0)), norm, "probe", step, lr);
    opt.step(head, grads, lr);
    window += double(loss.value()(0, 0));
    ++window_steps;
    if ((step + 1) % std::max<std::size_t>(pc.log_every, 1) == 0 || step + 1 == total) {
      log.log({"probe", step + 1, sampler.progress(), window / double(window_steps), lr, std::nullopt, std::nullopt});
      window = 0.0;
      window_steps = 0;
    }
  }
  const Linear<float> lin{head[0].value, head[1].value};
  auto score = [&](const Matrix<float>& x, const Dataset& ds) {
    std::vector<Matrix<float>> logits;
    for (std::size_t i = 0; i < x.rows(); ++i) {
      Matrix<float> row(1, d);
      std::copy(x.row(i).begin(), x.row(i).end(), row.data());
      logits.push_back(lin.apply(row));
    }
    return accuracy_of(logits, labels_of(ds));
  };
  res.train = score(xtr, train);
  res.eval = score(xev, eval);
  res.steps = total;
  res.backbone_hash_after = parameter_hash(backbone.params());
  if (res.backbone_hash_after != res.backbone_hash_before)
    throw std::logic_error("linear probe modified the frozen backbone");
  log.log({"probe_eval", total, sampler.progress(), res.eval.loss, 0.0, res.eval.top1, res.eval.top5});
  return res;
}

// ---------------------------------------------------------------------------
// Token-input classifier: embedding -> linear(hidden) -> ReLU -> average pool
// -> linear(classes).

struct TokenSet {
  std::vector<TokenGrid> tokens;
  std::vector<std::size_t> labels;
};

// correlated: every token of an image comes from its class's own disjoint
// slice of the vocabulary. random: uniform tokens, uniform labels.
inline TokenSet synthetic_token_set(const std::string& kind, std::size_t count, std::size_t n, std::size_t vocab,
                                    std::size_t classes, std::uint64_t seed) {
  Rng rng(seed);
  TokenSet s;
  const std::size_t slice = std::max<std::size_t>(vocab / classes, 1);
  if (kind == "correlated" && vocab < classes)
    throw ConfigError("correlated tokens need a vocabulary of at least one token per class");
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t label = kind == "random" ? rng.uniform_index(classes) : i % classes;
    TokenGrid g(n);
    for (auto& t : g)
      t = static_cast<std::uint32_t>(kind == "random" ? rng.uniform_index(vocab) : label * slice + rng.uniform_index(slice));
    s.tokens.push_back(std::move(g));
    s.labels.push_back(label);
  }
  if (kind != "random" && kind != "correlated") throw ConfigError("unknown synthetic token source '" + kind + "'");
  return s;
}

struct TokenEvalResult {
  Accuracy eval;
  Accuracy train;
  std::size_t steps = 0;
};

inline TokenEvalResult eval_tokens(const RunConfig& c, const TokenSet& train, const TokenSet& eval, std::size_t vocab,
                                   std::size_t classes, MetricsLogger& log) {
  const auto& ec = c.eval_tokens;
  for (const auto* set : {&train, &eval})
    for (const auto& g : set->tokens)
      for (auto t : g)
        if (t >= vocab)
          throw InvalidToken("eval-tokens: token id " + std::to_string(t) + " does not fit an embedding table of " +
                             std::to_string(vocab));
  detail::check(!train.tokens.empty() && !eval.tokens.empty(), "eval-tokens: empty token set");
  const std::size_t h = ec.hidden, n = train.tokens.front().size();
  Rng rng(derive_seed(c.seed, kSeedHead));
  auto init = [&](std::size_t r, std::size_t cols) {
    Matrix<float> m(r, cols);
    for (auto& v : m.values()) v = float(rng.truncated_normal(0.02));
    return m;
  };
  ParameterSet<float> p;
  p.add("embed", init(vocab, h), true, 0);
  p.add("fc.weight", init(h, h), true, 0);
  p.add("fc.bias", Matrix<float>(1, h), false, 0);
  p.add("head.weight", init(h, classes), true, 0);
  p.add("head.bias", Matrix<float>(1, classes), false, 0);

  // Batched graph: B*N token rows, average pooling as a constant matmul.
  auto forward = [&](Tape<float>& tape, const std::vector<const TokenGrid*>& grids, bool track) {
    std::vector<Var<float>> vars;
    for (std::size_t i = 0; i < p.size(); ++i)
      vars.push_back(track ? tape.parameter(p[i].value, i) : tape.constant(p[i].value));
    std::vector<std::size_t> ids;
    for (const auto* g : grids) ids.insert(ids.end(), g->begin(), g->end());
    Matrix<float> pool(grids.size(), grids.size() * n);
    for (std::size_t b = 0; b < grids.size(); ++b)
      for (std::size_t t = 0; t < n; ++t) pool(b, b * n + t) = 1.0f / float(n);
    auto e = ad::gather_rows(vars[0], ids);
    auto hdn = ad::relu(ad::add_row(ad::matmul(e, vars[1]), vars[2]));
    auto pooled = ad::matmul(tape.constant(pool), hdn);
    return ad::add_row(ad::matmul(pooled, vars[3]), vars[4]);
  };

  const std::size_t batch = std::min(ec.batch_size, train.tokens.size());
  const std::size_t steps_per_epoch = (train.tokens.size() + batch - 1) / batch;
  const std::size_t total = steps_for(ec.epochs, train.tokens.size(), batch);
  const auto sched = make_schedule(ec.optim, total, steps_per_epoch);
  AdamW<float> opt(p, ec.optim.adamw());
  EpochSampler sampler(train.tokens.size(), derive_seed(c.seed, kSeedOrder));
  Gradients<float> grads(p);
  double window = 0.0;
  std::size_t window_steps = 0;
  for (std::size_t step = 0; step < total; ++step) {
    const double lr = sched.at(step);
    std::vector<const TokenGrid*> grids;
    std::vector<std::size_t> labels;
    for (std::size_t k = 0; k < batch; ++k) {
      const auto i = sampler.next();
      grids.push_back(&train.tokens[i]);
      labels.push_back(train.labels[i]);
    }
    Tape<float> tape;
    auto loss = ad::cross_entropy(forward(tape, grids, true), ad::one_hot<float>(labels, classes));
    tape.backward(loss);
    grads.set_zero();
    accumulate(grads, tape, 1.0f);
    const double norm = clip_grad_norm(grads, ec.optim.clip);
    guard_finite(double(loss.value()(0, 0)), norm, "eval_tokens", step, lr);
    opt.step(p, grads, lr);
    window += double(loss.value()(0, 0));
    ++window_steps;
    if ((step + 1) % std::max<std::size_t>(ec.log_every, 1) == 0 || step + 1 == total) {
      log.log({"eval_tokens", step + 1, sampler.progress(), window / double(window_steps), lr, std::nullopt, std::nullopt});
      window = 0.0;
      window_steps = 0;
    }
  }
  auto score = [&](const TokenSet& s) {
    std::vector<Matrix<float>> logits;
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
      Tape<float> tape;
      logits.push_back(forward(tape, {&s.tokens[i]}, false).value());
    }
    return accuracy_of(logits, s.labels);
  };
  TokenEvalResult res;
  res.train = score(train);
  res.eval = score(eval);
  res.steps = total;
  log.log({"eval_tokens_eval", total, sampler.progress(), res.eval.loss, 0.0, res.eval.top1, res.eval.top5});
  return res;
}

}  // namespace mapet
