#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "mapet/training.hpp"

using namespace mapet;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_run() {
  auto c = preset_config("desk");
  c.data.train_images = 48;
  c.data.eval_images = 24;
  c.pretrain.max_steps = 6;
  c.tokenizer.sample_rate = 0.5;
  c.pretrain.batch_size = 8;
  c.pretrain.log_every = 2;
  c.finetune.max_steps = 4;
  c.finetune.batch_size = 8;
  c.probe.epochs = 3;
  c.probe.batch_size = 16;
  c.eval_tokens.epochs = 3;
  c.eval_tokens.hidden = 16;
  return c;
}

struct Prepared {
  Splits splits;
  Codebook cb;
  TokenCache train, eval;
};

Prepared prepare(const RunConfig& c) {
  auto s = synthetic_splits(c);
  auto cb = fit_codebook(c, s.train);
  auto tr = tokenize_dataset(c, s.train, cb), ev = tokenize_dataset(c, s.eval, cb);
  return {std::move(s), std::move(cb), std::move(tr), std::move(ev)};
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path tmp(const std::string& name) {
  const auto d = fs::temp_directory_path() / "mapet_training";
  fs::create_directories(d);
  return d / name;
}

}  // namespace

TEST(TokenPipeline, DeterministicAndInRange) {
  const auto c = tiny_run();
  const auto a = prepare(c), b = prepare(c);
  EXPECT_EQ(a.cb.centroids, b.cb.centroids);
  EXPECT_EQ(a.train.images, b.train.images);
  EXPECT_NO_THROW(check_tokens(a.train, a.splits.train, 16, 16));
  EXPECT_EQ(a.cb.size(), 16u);
}

TEST(TokenPipeline, FeatureFilesMatchInMemoryExtraction) {
  auto c = tiny_run();
  const auto s = synthetic_splits(c);
  const auto toy = make_extractor(c);
  const auto dir = tmp("features");
  fs::create_directories(dir);
  for (const auto& item : s.train.items)
    save_feature_grid(feature_file_for(dir.string(), item.source), extract_features(item.image, *toy, item.source));
  auto from_files = c;
  from_files.tokenizer.features = dir.string();
  const auto ex = make_extractor(from_files);
  for (std::size_t i = 0; i < 5; ++i)
    EXPECT_EQ(features_of(from_files, *ex, s.train.items[i]).values, extract_features(s.train.items[i].image, *toy, "").values);
  fs::remove(feature_file_for(dir.string(), s.train.items[0].source));
  EXPECT_THROW(features_of(from_files, *ex, s.train.items[0]), DataError);
}

TEST(TokenCheck, RejectsMismatchedCaches) {
  const auto c = tiny_run();
  auto p = prepare(c);
  auto wrong_count = p.train;
  wrong_count.images.pop_back();
  EXPECT_THROW(check_tokens(wrong_count, p.splits.train, 16, 16), DataError);
  auto wrong_len = p.train;
  wrong_len.tokens_per_image = 9;
  EXPECT_THROW(check_tokens(wrong_len, p.splits.train, 16, 16), DataError);
  auto bad_id = p.train;
  bad_id.images[3][2] = 16;
  EXPECT_THROW(check_tokens(bad_id, p.splits.train, 16, 16), InvalidToken);
}

TEST(Pretrain, CorruptedCacheIsDetected) {
  const auto c = tiny_run();
  auto p = prepare(c);
  p.train.images[0][0] = (p.train.images[0][0] + 1) % 16;
  MetricsLogger log;
  PretrainInputs in{&p.splits.train, &p.train, nullptr, nullptr, &p.cb, ""};
  EXPECT_THROW(pretrain(c, in, log), DataError);
}

TEST(Pretrain, LogsAreByteIdenticalAcrossRuns) {
  const auto c = tiny_run();
  const auto p = prepare(c);
  std::vector<std::string> logs;
  for (int run = 0; run < 2; ++run) {
    const auto path = tmp("repro" + std::to_string(run) + ".ndjson").string();
    MetricsLogger log(path);
    PretrainInputs in{&p.splits.train, &p.train, &p.splits.eval, &p.eval, &p.cb, ""};
    pretrain(c, in, log);
    logs.push_back(slurp(path));
  }
  EXPECT_FALSE(logs[0].empty());
  EXPECT_EQ(logs[0], logs[1]);
  auto other = c;
  other.seed = c.seed + 1;
  const auto path = tmp("repro_other.ndjson").string();
  MetricsLogger log(path);
  PretrainInputs in{&p.splits.train, &p.train, &p.splits.eval, &p.eval, nullptr, ""};
  pretrain(other, in, log);
  EXPECT_NE(slurp(path), logs[0]);
}

TEST(Pretrain, AllObjectivesTrain) {
  for (const char* obj : {"mapet", "pim", "mim"}) {
    auto c = tiny_run();
    c.pretrain.objective = obj;
    const auto p = prepare(c);
    MetricsLogger log;
    PretrainInputs in{&p.splits.train, &p.train, &p.splits.eval, &p.eval, nullptr, ""};
    const auto r = pretrain(c, in, log);
    EXPECT_EQ(r.steps, 6u);
    EXPECT_TRUE(std::isfinite(r.final.loss)) << obj;
    EXPECT_NEAR(r.initial.loss, std::log(16.0), 0.6) << obj;
    EXPECT_GT(log.count(), 3u);
  }
}

TEST(Pretrain, DivergenceIsReported) {
  auto c = tiny_run();
  c.pretrain.optim.lr = 1e9;
  c.pretrain.optim.clip = 0;
  c.pretrain.max_steps = 30;
  const auto p = prepare(c);
  MetricsLogger log;
  PretrainInputs in{&p.splits.train, &p.train, nullptr, nullptr, nullptr, ""};
  EXPECT_THROW(pretrain(c, in, log), DivergenceError);
}

TEST(Checkpoint, RoundTripRestoresModel) {
  const auto c = tiny_run();
  const auto p = prepare(c);
  MetricsLogger log;
  const auto path = tmp("pre.mpck").string();
  PretrainInputs in{&p.splits.train, &p.train, nullptr, nullptr, nullptr, path};
  const auto r = pretrain(c, in, log);
  const auto ck = load_checkpoint(path);
  const auto back = encoder_from_checkpoint(c, ck, [](const std::string&) { return true; });
  EXPECT_EQ(parameter_hash(back.params()), parameter_hash(r.model.params()));
  const auto patches = patch_all(p.splits.eval, c.model.patch_size);
  const auto e1 = evaluate_pretrain(r.model, c, patches, p.eval), e2 = evaluate_pretrain(back, c, patches, p.eval);
  EXPECT_EQ(e1.loss, e2.loss);
  EXPECT_EQ(e1.top1, e2.top1);
  const auto stored = json::parse(ck.config_json);
  EXPECT_EQ(stored["pretrain"]["cut"], c.pretrain.cut);
}

TEST(Checkpoint, ArchitectureMismatchIsRejected) {
  const auto c = tiny_run();
  Encoder<float> model(c.encoder(), 1);
  const auto ck = checkpoint_of(model, c);
  auto other = c;
  other.model.dim = 16;
  other.model.ffn_dim = 64;
  EXPECT_THROW(encoder_from_checkpoint(other, ck, &Encoder<float>::is_backbone), IncompatibleCheckpoint);
  auto drop = c;
  drop.model.drop_path = 0.0;
  EXPECT_NO_THROW(encoder_from_checkpoint(drop, ck, &Encoder<float>::is_backbone));
}

TEST(Finetune, StartsFromBackboneWithFreshHead) {
  const auto c = tiny_run();
  const auto p = prepare(c);
  Encoder<float> pre(c.encoder(), 77);
  const auto ck = checkpoint_of(pre, c);
  auto eval_only = c;
  eval_only.finetune.max_steps = 0;
  eval_only.finetune.epochs = 0;
  MetricsLogger log;
  const auto r0 = finetune(eval_only, &ck, p.splits.train, p.splits.eval, log);
  EXPECT_EQ(r0.steps, 0u);
  const auto idx = r0.model.params().find("pos_embed");
  ASSERT_TRUE(idx);
  EXPECT_EQ(r0.model.params()[*idx].value, pre.params()[*pre.params().find("pos_embed")].value);
  EXPECT_LE(r0.eval.top1, r0.eval.top5);
  EXPECT_EQ(r0.model.num_classes(), 8u);

  const auto r = finetune(c, &ck, p.splits.train, p.splits.eval, log);
  EXPECT_EQ(r.steps, 4u);
  EXPECT_NE(r.model.params()[*idx].value, pre.params()[*pre.params().find("pos_embed")].value);
  const auto vh = r.model.params().find("vocab_head.weight");
  // Not part of the backbone and not trained.
  EXPECT_EQ(r.model.params()[*vh].value, r0.model.params()[*vh].value);
  EXPECT_NE(r.model.params()[*vh].value, pre.params()[*vh].value);
}

TEST(Finetune, AugmentationsRun) {
  auto c = tiny_run();
  c.finetune.mixup = 0.8;
  c.finetune.cutmix = 1.0;
  c.finetune.erasing = 0.25;
  c.finetune.optim.layer_decay = 0.65;
  const auto s = synthetic_splits(c);
  MetricsLogger log;
  const auto r = finetune(c, nullptr, s.train, s.eval, log);
  EXPECT_TRUE(std::isfinite(r.eval.loss));
}

TEST(Probe, BackboneStaysFrozen) {
  const auto c = tiny_run();
  const auto s = synthetic_splits(c);
  Encoder<float> backbone(c.encoder(), 5);
  const auto before = parameter_hash(backbone.params());
  MetricsLogger log;
  const auto r = linear_probe(c, backbone, s.train, s.eval, log);
  EXPECT_EQ(r.backbone_hash_before, before);
  EXPECT_EQ(r.backbone_hash_after, before);
  EXPECT_EQ(r.steps, 9u);
  EXPECT_GE(r.eval.top5, r.eval.top1);
}

TEST(EvalTokens, SyntheticSourcesAndVocabularyCheck) {
  const auto corr = synthetic_token_set("correlated", 40, 16, 16, 8, 1);
  for (std::size_t i = 0; i < corr.tokens.size(); ++i)
    for (auto t : corr.tokens[i]) EXPECT_EQ(t / 2, corr.labels[i]);
  EXPECT_THROW(synthetic_token_set("correlated", 4, 16, 4, 8, 1), ConfigError);
  EXPECT_THROW(synthetic_token_set("files", 4, 16, 16, 8, 1), ConfigError);

  const auto c = tiny_run();
  MetricsLogger log;
  const auto r = eval_tokens(c, corr, corr, 16, 8, log);
  EXPECT_EQ(r.steps, 6u);
  EXPECT_THROW(eval_tokens(c, corr, corr, 8, 8, log), InvalidToken);
}
