#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mapet/encoder.hpp"
#include "mapet/errors.hpp"
#include "mapet/optim.hpp"

namespace mapet {

using nlohmann::json;

struct ModelSection {
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t channels = 3;
  std::size_t dim = 32;
  std::size_t heads = 2;
  std::size_t ffn_dim = 128;
  std::size_t layers = 2;
  double layer_scale = 0.1;
  double drop_path = 0.1;
  double init_std = 0.02;

  std::size_t num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
};

struct TokenizerSection {
  std::size_t vocab_size = 16;
  std::size_t feature_dim = 16;  // toy extractor output width
  double sample_rate = 0.02;
  std::size_t max_iters = 100;
  std::string codebook;     // path; empty = fit on the fly
  std::string token_cache;  // path; empty = tokenize on the fly
  std::string features;     // directory of precomputed .kcfg grids; empty = toy extractor
};

struct DataSection {
  std::string source = "synthetic";  // synthetic | folder
  std::string train_path;
  std::string eval_path;
  std::size_t train_images = 2000;
  std::size_t eval_images = 400;
  std::size_t num_classes = 8;
  double noise = 0.05;
  double swap_prob = 0.05;
  std::uint64_t seed = 1234;  // prototypes and class layouts
};

struct OptimSection {
  double lr = 1.5e-3;
  double min_lr = 1e-5;
  double warmup_lr = 1e-6;
  double warmup_epochs = 10;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip = 3.0;  // 0 = no clipping
  double layer_decay = 1.0;

  AdamWConfig adamw() const { return {beta1, beta2, eps, weight_decay}; }
};

struct PretrainSection {
  std::string objective = "mapet";
  std::size_t cut = 5;
  double mim_ratio = 0.4;
  double epochs = 300;
  std::size_t max_steps = 0;  // > 0 overrides epochs
  std::size_t batch_size = 32;
  double color_jitter = 0.0;
  std::size_t log_every = 10;
  std::size_t checkpoint_every = 0;
  OptimSection optim;
};

struct FinetuneSection {
  double epochs = 100;
  std::size_t max_steps = 0;
  std::size_t batch_size = 32;
  double label_smoothing = 0.1;
  double mixup = 0.0;
  double cutmix = 0.0;
  double erasing = 0.0;
  std::size_t log_every = 10;
  OptimSection optim;
};

struct ProbeSection {
  double epochs = 50;
  std::size_t batch_size = 64;
  std::size_t log_every = 10;
  OptimSection optim;
};

struct EvalTokensSection {
  std::string source = "cache";  // cache | correlated | random
  std::size_t hidden = 192;
  double epochs = 20;
  std::size_t batch_size = 32;
  std::size_t log_every = 10;
  OptimSection optim;
};

struct RunConfig {
  std::string preset = "desk";
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  ModelSection model;
  TokenizerSection tokenizer;
  DataSection data;
  PretrainSection pretrain;
  FinetuneSection finetune;
  ProbeSection probe;
  EvalTokensSection eval_tokens;

  EncoderConfig encoder() const {
    EncoderConfig e;
    e.num_patches = model.num_patches();
    e.patch_dim = model.patch_dim();
    e.dim = model.dim;
    e.heads = model.heads;
    e.ffn_dim = model.ffn_dim;
    e.layers = model.layers;
    e.vocab_size = tokenizer.vocab_size;
    e.layer_scale_init = model.layer_scale;
    e.drop_path = model.drop_path;
    e.init_std = model.init_std;
    return e;
  }

  Objective objective() const { return objective_from_string(pretrain.objective); }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ModelSection, image_size, patch_size, channels, dim, heads, ffn_dim, layers,
                                   layer_scale, drop_path, init_std)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(TokenizerSection, vocab_size, feature_dim, sample_rate, max_iters, codebook,
                                   token_cache, features)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(DataSection, source, train_path, eval_path, train_images, eval_images, num_classes,
                                   noise, swap_prob, seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(OptimSection, lr, min_lr, warmup_lr, warmup_epochs, weight_decay, beta1, beta2, eps,
                                   clip, layer_decay)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(PretrainSection, objective, cut, mim_ratio, epochs, max_steps, batch_size,
                                   color_jitter, log_every, checkpoint_every, optim)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(FinetuneSection, epochs, max_steps, batch_size, label_smoothing, mixup, cutmix,
                                   erasing, log_every, optim)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ProbeSection, epochs, batch_size, log_every, optim)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(EvalTokensSection, source, hidden, epochs, batch_size, log_every, optim)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(RunConfig, preset, seed, output_dir, model, tokenizer, data, pretrain, finetune,
                                   probe, eval_tokens)

namespace detail {

inline OptimSection finetune_optim(double lr, double layer_decay) {
  OptimSection o;
  o.lr = lr;
  o.min_lr = 1e-6;
  o.warmup_lr = 1e-6;
  o.warmup_epochs = 20;
  o.weight_decay = 0.05;
  o.clip = 0.0;
  o.layer_decay = layer_decay;
  return o;
}

inline OptimSection probe_optim() {
  OptimSection o;
  o.lr = 4e-3;
  o.min_lr = 0.0;
  o.warmup_lr = 0.0;
  o.warmup_epochs = 0;
  o.weight_decay = 1e-4;
  o.clip = 0.0;
  return o;
}

}  // namespace detail

// desk: the laptop-scale configuration used by tests and the synthetic
// benchmark. tiny/small/base: the standard ViT-Ti/S/B sizes at 224 px.
inline RunConfig preset_config(const std::string& name) {
  RunConfig c;
  c.preset = name;
  c.probe.optim = detail::probe_optim();
  c.eval_tokens.optim = detail::probe_optim();
  c.eval_tokens.optim.lr = 1e-3;
  c.eval_tokens.optim.weight_decay = 0.05;
  if (name == "desk") {
    c.pretrain.max_steps = 2000;
    c.pretrain.optim.lr = 1e-3;
    c.pretrain.optim.warmup_epochs = 0;
    c.pretrain.optim.min_lr = 1e-5;
    c.finetune.optim = detail::finetune_optim(1e-3, 1.0);
    c.finetune.optim.warmup_epochs = 0;
    c.finetune.epochs = 10;
    c.probe.epochs = 50;
    return c;
  }
  std::size_t dim = 0, heads = 0, cut = 0;
  double ft_lr = 0, ft_decay = 1.0, ft_epochs = 0;
  if (name == "tiny") {
    dim = 192, heads = 3, cut = 50, ft_lr = 2.5e-4, ft_decay = 1.0, ft_epochs = 300;
  } else if (name == "small") {
    dim = 384, heads = 6, cut = 50, ft_lr = 5e-3, ft_decay = 0.65, ft_epochs = 200;
  } else if (name == "base") {
    dim = 768, heads = 12, cut = 60, ft_lr = 5e-4, ft_decay = 0.65, ft_epochs = 100;
  } else {
    throw ConfigError("unknown preset '" + name + "' (expected desk, tiny, small or base)");
  }
  c.model = {224, 16, 3, dim, heads, 4 * dim, 12, 0.1, 0.1, 0.02};
  c.tokenizer.vocab_size = 8192;
  c.tokenizer.feature_dim = 4096;
  c.data.source = "folder";
  c.pretrain.cut = cut;
  c.pretrain.epochs = 300;
  c.pretrain.batch_size = 2048;
  c.pretrain.color_jitter = 0.4;
  c.pretrain.optim = OptimSection{};
  c.finetune.epochs = ft_epochs;
  c.finetune.batch_size = 1024;
  c.finetune.erasing = 0.25;
  c.finetune.mixup = 0.8;
  c.finetune.cutmix = 1.0;
  c.finetune.optim = detail::finetune_optim(ft_lr, ft_decay);
  c.probe.batch_size = 1024;
  return c;
}

namespace detail {

// Overlay `patch` onto `base`; every key in patch must already exist.
inline void merge_strict(json& base, const json& patch, const std::string& prefix = "") {
  if (!patch.is_object()) throw ConfigError("config: expected an object at '" + prefix + "'");
  for (const auto& [key, value] : patch.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) throw ConfigError("config: unknown key '" + path + "'");
    if (base[key].is_object())
      merge_strict(base[key], value, path);
    else
      base[key] = value;
  }
}

inline json parse_scalar(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return text;  // bare string
  }
}

}  // namespace detail

// key=value with a dotted key; the value is parsed as JSON when possible.
inline void apply_override(json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  json* node = &cfg;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw ConfigError("--set: unknown key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object()) throw ConfigError("--set: '" + key + "' is a section, not a value");
  *node = detail::parse_scalar(assignment.substr(eq + 1));
}

inline void validate(const RunConfig& c) {
  auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
  const auto& m = c.model;
  if (m.patch_size == 0 || m.image_size == 0 || m.image_size % m.patch_size != 0)
    fail("model.image_size must be a positive multiple of model.patch_size");
  if (m.channels == 0) fail("model.channels must be positive");
  c.encoder().validate();
  const std::size_t n = m.num_patches();
  const auto obj = c.objective();
  if (obj != Objective::kMim && (c.pretrain.cut < 1 || c.pretrain.cut >= n))
    fail("pretrain.cut must be in [1, " + std::to_string(n - 1) + "] for " + c.pretrain.objective);
  if (obj == Objective::kMim && (c.pretrain.mim_ratio <= 0.0 || c.pretrain.mim_ratio > 1.0 ||
                                 std::floor(c.pretrain.mim_ratio * double(n) + 1e-9) < 1))
    fail("pretrain.mim_ratio must mask at least one of " + std::to_string(n) + " patches");
  if (c.tokenizer.vocab_size < 1 || c.tokenizer.vocab_size > 65536) fail("tokenizer.vocab_size must be in [1, 65536]");
  if (c.tokenizer.sample_rate <= 0.0 || c.tokenizer.sample_rate > 1.0) fail("tokenizer.sample_rate must be in (0, 1]");
  if (c.data.source != "synthetic" && c.data.source != "folder") fail("data.source must be synthetic or folder");
  if (c.data.num_classes < 2) fail("data.num_classes must be at least 2");
  for (auto b : {c.pretrain.batch_size, c.finetune.batch_size, c.probe.batch_size, c.eval_tokens.batch_size})
    if (b == 0) fail("batch sizes must be positive");
  for (double e : {c.pretrain.epochs, c.finetune.epochs, c.probe.epochs, c.eval_tokens.epochs})
    if (e < 0) fail("epochs must be non-negative");
  for (const auto* o : {&c.pretrain.optim, &c.finetune.optim, &c.probe.optim, &c.eval_tokens.optim}) {
    if (o->lr < 0 || o->min_lr < 0 || o->warmup_lr < 0 || o->weight_decay < 0 || o->clip < 0) fail("negative optimizer value");
    if (o->beta1 < 0 || o->beta1 >= 1 || o->beta2 < 0 || o->beta2 >= 1) fail("optimizer betas must be in [0, 1)");
    if (o->layer_decay <= 0 || o->layer_decay > 1) fail("layer_decay must be in (0, 1]");
  }
  if (c.pretrain.color_jitter < 0 || c.pretrain.color_jitter >= 1) fail("pretrain.color_jitter must be in [0, 1)");
  if (c.finetune.label_smoothing < 0 || c.finetune.label_smoothing >= 1) fail("finetune.label_smoothing must be in [0, 1)");
  const auto& et = c.eval_tokens.source;
  if (et != "cache" && et != "correlated" && et != "random") fail("eval_tokens.source must be cache, correlated or random");
}

// Input paths named in the config must exist.
inline void validate_paths(const RunConfig& c) {
  auto need = [](const std::string& p, const std::string& what) {
    if (!p.empty() && !std::filesystem::exists(p)) throw ConfigError("config: " + what + " '" + p + "' does not exist");
  };
  need(c.tokenizer.codebook, "tokenizer.codebook");
  need(c.tokenizer.token_cache, "tokenizer.token_cache");
  need(c.tokenizer.features, "tokenizer.features");
  if (c.data.source == "folder") {
    if (c.data.train_path.empty()) throw ConfigError("config: data.train_path is required for folder datasets");
    need(c.data.train_path, "data.train_path");
    need(c.data.eval_path, "data.eval_path");
  }
}

inline RunConfig config_from_json(const json& j) {
  try {
    return j.get<RunConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

// Preset (from the file's "preset" key or an override) + file + overrides.
inline RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  json file = json::object();
  if (!path.empty()) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path);
    try {
      file = json::parse(is);
    } catch (const json::exception& e) {
      throw ConfigError("config: " + path + " is not valid JSON (" + e.what() + ")");
    }
  }
  std::string preset = file.value("preset", std::string("desk"));
  for (const auto& o : overrides)
    if (o.starts_with("preset=")) preset = detail::parse_scalar(o.substr(7)).get<std::string>();
  json merged = preset_config(preset);
  detail::merge_strict(merged, file);
  for (const auto& o : overrides) apply_override(merged, o);
  auto cfg = config_from_json(merged);
  validate(cfg);
  return cfg;
}

// Total optimizer steps for `epochs` passes over `items` at `batch`.
inline std::size_t steps_for(double epochs, std::size_t items, std::size_t batch, std::size_t max_steps = 0) {
  if (max_steps > 0) return max_steps;
  const std::size_t per_epoch = (items + batch - 1) / batch;
  return static_cast<std::size_t>(std::llround(epochs * double(per_epoch)));
}

inline CosineSchedule make_schedule(const OptimSection& o, std::size_t total_steps, std::size_t steps_per_epoch) {
  CosineSchedule s;
  s.base_lr = o.lr;
  s.min_lr = o.min_lr;
  s.warmup_lr = o.warmup_lr;
  s.warmup_steps = std::min(total_steps, static_cast<std::size_t>(std::llround(o.warmup_epochs * double(steps_per_epoch))));
  s.total_steps = std::max<std::size_t>(total_steps, 1);
  return s;
}

}  // namespace mapet
