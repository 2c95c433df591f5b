#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mapet/attention_masks.hpp"
#include "mapet/training.hpp"
#include "png_io.hpp"

namespace fs = std::filesystem;
using namespace mapet;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string output_dir;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "JSON config file (overlays the preset)");
  cmd->add_option("--set", c.overrides, "Dotted override, e.g. pretrain.cut=4 (repeatable)");
  cmd->add_option("--seed", c.seed, "Run seed");
  cmd->add_option("-o,--output-dir", c.output_dir, "Output directory (default: config output_dir)");
}

RunConfig resolve(const Common& c) {
  auto overrides = c.overrides;
  if (c.seed) overrides.push_back("seed=" + std::to_string(*c.seed));
  if (!c.output_dir.empty()) overrides.push_back("output_dir=\"" + c.output_dir + "\"");
  auto cfg = load_config(c.config_path, overrides);
  validate_paths(cfg);
  fs::create_directories(cfg.output_dir);
  std::ofstream(fs::path(cfg.output_dir) / "config.json") << json(cfg).dump(2) << '\n';
  return cfg;
}

std::string out_path(const RunConfig& cfg, const std::string& name) { return (fs::path(cfg.output_dir) / name).string(); }

Splits load_splits(const RunConfig& cfg) {
  if (cfg.data.source == "synthetic") return synthetic_splits(cfg);
  Splits s;
  s.train = load_folder_dataset(cfg.data.train_path, tools::load_image, cfg.model.image_size, cfg.model.channels);
  if (cfg.data.eval_path.empty()) throw ConfigError("config: data.eval_path is required for folder datasets");
  s.eval = load_folder_dataset(cfg.data.eval_path, tools::load_image, cfg.model.image_size, cfg.model.channels,
                               s.train.class_names);
  return s;
}

// Codebook from tokenizer.codebook, or fitted on the training split and saved.
Codebook obtain_codebook(const RunConfig& cfg, const Dataset& train) {
  if (!cfg.tokenizer.codebook.empty()) {
    auto cb = load_codebook(cfg.tokenizer.codebook);
    const auto want = make_extractor(cfg)->id();
    if (cb.extractor != want)
      throw DataError("codebook " + cfg.tokenizer.codebook + " was fit on '" + cb.extractor + "' features, config uses '" +
                      want + "'");
    if (cb.size() != cfg.tokenizer.vocab_size)
      throw DataError("codebook has " + std::to_string(cb.size()) + " centroids, tokenizer.vocab_size is " +
                      std::to_string(cfg.tokenizer.vocab_size));
    return cb;
  }
  auto cb = fit_codebook(cfg, train);
  save_codebook(out_path(cfg, "codebook.kccb"), cb);
  std::cerr << "fitted codebook: " << cb.size() << " tokens, " << cb.iterations << " iterations\n";
  return cb;
}

TokenCache train_tokens(const RunConfig& cfg, const Dataset& train, const Codebook& cb) {
  if (!cfg.tokenizer.token_cache.empty()) return load_token_cache(cfg.tokenizer.token_cache);
  return tokenize_dataset(cfg, train, cb);
}

std::optional<Checkpoint> maybe_checkpoint(const std::string& path) {
  if (path.empty()) return std::nullopt;
  if (!fs::exists(path)) throw ConfigError("checkpoint '" + path + "' does not exist");
  return load_checkpoint(path);
}

void print_accuracy(const std::string& what, const Accuracy& a) {
  std::cout << json{{"phase", what}, {"top1", a.top1}, {"top5", a.top5}, {"loss", a.loss}}.dump() << '\n';
}

int cmd_pretrain(const Common& common) {
  const auto cfg = resolve(common);
  const auto splits = load_splits(cfg);
  const auto cb = obtain_codebook(cfg, splits.train);
  const auto tr = train_tokens(cfg, splits.train, cb);
  const auto ev = tokenize_dataset(cfg, splits.eval, cb);
  MetricsLogger log(out_path(cfg, "pretrain.metrics.ndjson"));
  PretrainInputs in{&splits.train, &tr, &splits.eval, &ev, &cb, out_path(cfg, "pretrain.mpck")};
  const auto res = pretrain(cfg, in, log);
  std::cout << json{{"phase", "pretrain"},
                    {"steps", res.steps},
                    {"initial_loss", res.initial.loss},
                    {"final_loss", res.final.loss},
                    {"initial_top1", res.initial.top1},
                    {"final_top1", res.final.top1},
                    {"checkpoint", in.checkpoint_path}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_finetune(const Common& common, const std::string& ckpt) {
  const auto cfg = resolve(common);
  const auto splits = load_splits(cfg);
  const auto ck = maybe_checkpoint(ckpt);
  MetricsLogger log(out_path(cfg, "finetune.metrics.ndjson"));
  auto res = finetune(cfg, ck ? &*ck : nullptr, splits.train, splits.eval, log);
  save_checkpoint(out_path(cfg, "finetune.mpck"), checkpoint_of(res.model, cfg));
  print_accuracy("finetune", res.eval);
  return 0;
}

int cmd_probe(const Common& common, const std::string& ckpt) {
  const auto cfg = resolve(common);
  const auto splits = load_splits(cfg);
  const auto ck = maybe_checkpoint(ckpt);
  const auto backbone = ck ? encoder_from_checkpoint(cfg, *ck, &Encoder<float>::is_backbone)
                           : Encoder<float>(cfg.encoder(), derive_seed(cfg.seed, kSeedModel));
  MetricsLogger log(out_path(cfg, "probe.metrics.ndjson"));
  const auto res = linear_probe(cfg, backbone, splits.train, splits.eval, log);
  print_accuracy("probe", res.eval);
  return 0;
}

int cmd_fit_codebook(const Common& common, std::string out) {
  const auto cfg = resolve(common);
  const auto splits = load_splits(cfg);
  const auto cb = fit_codebook(cfg, splits.train);
  if (out.empty()) out = out_path(cfg, "codebook.kccb");
  save_codebook(out, cb);
  const auto ex = make_extractor(cfg);
  auto report = report_codebook(cb, extract_all(cfg, *ex, splits.train)).to_json();
  report["path"] = out;
  report["iterations"] = cb.iterations;
  report["converged"] = cb.converged;
  std::cout << report.dump() << '\n';
  return 0;
}

int cmd_tokenize(const Common& common, std::string codebook, const std::string& split, std::string out) {
  auto cfg = resolve(common);
  if (codebook.empty()) codebook = cfg.tokenizer.codebook;
  if (codebook.empty()) throw ConfigError("tokenize: pass --codebook or set tokenizer.codebook");
  cfg.tokenizer.codebook = codebook;
  const auto splits = load_splits(cfg);
  if (split != "train" && split != "eval") throw ConfigError("tokenize: --split must be train or eval");
  const auto& ds = split == "train" ? splits.train : splits.eval;
  const auto cb = obtain_codebook(cfg, ds);
  const auto cache = tokenize_dataset(cfg, ds, cb);
  if (out.empty()) out = out_path(cfg, split + ".kctk");
  save_token_cache(out, cache);
  std::cout << json{{"path", out}, {"images", cache.images.size()}, {"tokens_per_image", cache.tokens_per_image}}.dump()
            << '\n';
  return 0;
}

int cmd_eval_tokens(const Common& common) {
  const auto cfg = resolve(common);
  const auto& src = cfg.eval_tokens.source;
  const std::size_t vocab = cfg.tokenizer.vocab_size;
  TokenSet train, eval;
  std::size_t classes = cfg.data.num_classes;
  if (src == "cache") {
    const auto splits = load_splits(cfg);
    const auto cb = obtain_codebook(cfg, splits.train);
    const auto tr = train_tokens(cfg, splits.train, cb);
    check_tokens(tr, splits.train, cfg.model.num_patches(), vocab);
    train = {tr.images, labels_of(splits.train)};
    eval = {tokenize_dataset(cfg, splits.eval, cb).images, labels_of(splits.eval)};
    classes = splits.train.num_classes;
  } else {
    const std::size_t n = cfg.model.num_patches();
    train = synthetic_token_set(src, cfg.data.train_images, n, vocab, classes, derive_seed(cfg.data.seed, 300));
    eval = synthetic_token_set(src, cfg.data.eval_images, n, vocab, classes, derive_seed(cfg.data.seed, 400));
  }
  MetricsLogger log(out_path(cfg, "eval_tokens.metrics.ndjson"));
  const auto res = eval_tokens(cfg, train, eval, vocab, classes, log);
  print_accuracy("eval_tokens:" + src, res.eval);
  return 0;
}

ImageTensor crop_cell(const ImageTensor& img, std::size_t cell, std::size_t p) {
  const std::size_t cols = img.width / p, y0 = (cell / cols) * p, x0 = (cell % cols) * p;
  ImageTensor out(p, p, img.channels);
  for (std::size_t y = 0; y < p; ++y)
    for (std::size_t x = 0; x < p; ++x)
      for (std::size_t ch = 0; ch < img.channels; ++ch) out.at(y, x, ch) = img.at(y0 + y, x0 + x, ch);
  return out;
}

int cmd_report_codebook(const Common& common, std::string codebook, const std::string& crops) {
  auto cfg = resolve(common);
  if (!codebook.empty()) cfg.tokenizer.codebook = codebook;
  if (cfg.tokenizer.codebook.empty()) throw ConfigError("report-codebook: pass --codebook or set tokenizer.codebook");
  const auto splits = load_splits(cfg);
  const auto cb = obtain_codebook(cfg, splits.train);
  const auto ex = make_extractor(cfg);
  const auto report = report_codebook(cb, extract_all(cfg, *ex, splits.train));
  if (!crops.empty()) {
    // token<id>_<rank>.png: the patches closest to each centroid.
    fs::create_directories(crops);
    for (std::size_t k = 0; k < report.nearest.size(); ++k)
      for (std::size_t r = 0; r < report.nearest[k].size(); ++r) {
        const auto& ref = report.nearest[k][r];
        const auto patch = crop_cell(splits.train.items[ref.image].image, ref.cell, cfg.model.patch_size);
        tools::write_png((fs::path(crops) / ("token" + std::to_string(k) + "_" + std::to_string(r) + ".png")).string(),
                         patch);
      }
  }
  std::cout << report.to_json().dump(2) << '\n';
  return 0;
}

int cmd_dump_masks(const std::string& text, const std::string& rule, bool pim) {
  MaskRowRule r = MaskRowRule::kMasksOnly;
  if (rule == "query-visibility")
    r = MaskRowRule::kQueryVisibility;
  else if (rule != "masks-only")
    throw ConfigError("dump-masks: --rule must be masks-only or query-visibility");
  Permutation perm;
  try {
    perm = parse_permutation(text);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("dump-masks: ") + e.what());
  }
  const auto masks = pim ? build_pim_masks(perm) : build_masks(perm, r);
  std::cout << "permutation " << format_permutation(perm) << "\ncontent\n"
            << mask_to_ascii(masks.content) << "query\n"
            << mask_to_ascii(masks.query);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked and permuted ViT pre-training"};
  app.require_subcommand(1);
  Common common;
  std::string ckpt, codebook, out, split = "train", perm_text, rule = "masks-only";
  bool pim = false;

  auto* pre = app.add_subcommand("pretrain", "Pre-train an encoder on visual tokens");
  add_common(pre, common);
  auto* ft = app.add_subcommand("finetune", "Fine-tune a classifier (from a checkpoint or from scratch)");
  add_common(ft, common);
  ft->add_option("--checkpoint", ckpt, "Pre-trained checkpoint");
  auto* probe = app.add_subcommand("probe", "Linear probe on a frozen backbone");
  add_common(probe, common);
  probe->add_option("--checkpoint", ckpt, "Backbone checkpoint (omit for random init)");
  auto* fit = app.add_subcommand("fit-codebook", "Fit the k-means tokenizer on the training split");
  add_common(fit, common);
  fit->add_option("--out", out, "Codebook path");
  auto* tok = app.add_subcommand("tokenize", "Write a token cache for a split");
  add_common(tok, common);
  tok->add_option("--codebook", codebook, "Codebook path");
  tok->add_option("--split", split, "train or eval");
  tok->add_option("--out", out, "Token cache path");
  auto* evt = app.add_subcommand("eval-tokens", "Classify images from their visual tokens");
  add_common(evt, common);
  auto* rep = app.add_subcommand("report-codebook", "Codebook usage statistics");
  add_common(rep, common);
  rep->add_option("--codebook", codebook, "Codebook path");
  std::string crops;
  rep->add_option("--crops", crops, "Directory for PNG crops of the nearest patches per token");
  auto* dump = app.add_subcommand("dump-masks", "Print the attention masks of a permutation");
  dump->add_option("--perm", perm_text, "Permutation as \"c;z1,...,zN\" (1-based)")->required();
  dump->add_option("--rule", rule, "Mask-row rule: masks-only or query-visibility");
  dump->add_flag("--pim", pim, "Masks without mask tokens");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*pre) return cmd_pretrain(common);
    if (*ft) return cmd_finetune(common, ckpt);
    if (*probe) return cmd_probe(common, ckpt);
    if (*fit) return cmd_fit_codebook(common, out);
    if (*tok) return cmd_tokenize(common, codebook, split, out);
    if (*evt) return cmd_eval_tokens(common);
    if (*rep) return cmd_report_codebook(common, codebook, crops);
    if (*dump) return cmd_dump_masks(perm_text, rule, pim);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const InvalidToken& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
