#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "mapet/attention_masks.hpp"
#include "mapet/autodiff.hpp"
#include "mapet/params.hpp"
#include "mapet/patching.hpp"
#include "mapet/permutation.hpp"
#include "mapet/random.hpp"

namespace mapet {

enum class Objective { kMim, kPim, kMapet };

inline std::string to_string(Objective o) {
  switch (o) {
    case Objective::kMim: return "mim";
    case Objective::kPim: return "pim";
    case Objective::kMapet: return "mapet";
  }
  return "?";
}

inline Objective objective_from_string(const std::string& s) {
  if (s == "mim") return Objective::kMim;
  if (s == "pim") return Objective::kPim;
  if (s == "mapet") return Objective::kMapet;
  throw ConfigError("unknown objective '" + s + "' (expected mim, pim or mapet)");
}

struct EncoderConfig {
  std::size_t num_patches = 16;
  std::size_t patch_dim = 48;  // P * P * C
  std::size_t dim = 32;
  std::size_t heads = 2;
  std::size_t ffn_dim = 128;
  std::size_t layers = 2;
  std::size_t vocab_size = 16;
  double layer_scale_init = 0.1;
  double drop_path = 0.1;
  double init_std = 0.02;
  double ln_eps = 1e-6;

  std::size_t head_dim() const { return dim / heads; }

  void validate() const {
    if (num_patches < 1 || patch_dim < 1 || dim < 1 || heads < 1 || ffn_dim < 1 || vocab_size < 1)
      throw ConfigError("encoder: all sizes must be positive");
    if (dim % heads != 0)
      throw ConfigError("encoder: heads (" + std::to_string(heads) + ") must divide width (" + std::to_string(dim) + ")");
    if (drop_path < 0.0 || drop_path >= 1.0) throw ConfigError("encoder: drop_path must be in [0, 1)");
  }
};

struct ForwardOptions {
  bool train = false;   // enables stochastic depth
  Rng* rng = nullptr;   // required when train is set and drop_path > 0
};

// Binds parameters onto a tape on first use. With track = false the values are
// pushed as constants and no parameter gradients are produced.
template <typename S>
class Binder {
 public:
  Binder(Tape<S>& tape, const ParameterSet<S>& params, bool track = true)
      : tape_(tape), params_(params), track_(track), vars_(params.size()) {}

  Var<S> operator()(std::size_t idx) {
    if (!vars_[idx]) {
      vars_[idx] = track_ ? tape_.parameter(params_[idx].value, idx) : tape_.constant(params_[idx].value);
    }
    return *vars_[idx];
  }

  Tape<S>& tape() { return tape_; }

 private:
  Tape<S>& tape_;
  const ParameterSet<S>& params_;
  bool track_;
  std::vector<std::optional<Var<S>>> vars_;
};

template <typename S>
struct StreamVars {
  Var<S> h;
  std::optional<Var<S>> g;
};

// Per-layer residual branch multipliers (0 when dropped, 1/(1-p) when kept).
// One plan per sample and layer, shared by both streams.
template <typename S>
struct DropPlan {
  S attn = S(1);
  S mlp = S(1);
};

template <typename S>
struct StreamStates {
  Matrix<S> h;  // content stream rows
  Matrix<S> g;  // query stream rows (may be empty)
};

// Pre-norm ViT encoder with shared-weight content and query streams, a
// position-aware mask token, a pre-training vocabulary head, and an optional
// classification head added for fine-tuning.
template <typename S>
class Encoder {
 public:
  struct LayerIndex {
    std::size_t norm1_w, norm1_b, q_w, q_b, k_w, k_b, v_w, v_b, proj_w, proj_b, ls1;
    std::size_t norm2_w, norm2_b, fc1_w, fc1_b, fc2_w, fc2_b, ls2;
  };

  Encoder(EncoderConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    build(&rng);
  }

  // Zero-initialized; callers fill it (e.g. from a checkpoint).
  explicit Encoder(EncoderConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build(nullptr);
  }

  const EncoderConfig& config() const { return cfg_; }
  ParameterSet<S>& params() { return params_; }
  const ParameterSet<S>& params() const { return params_; }

  void add_classifier(std::size_t num_classes, Rng& rng) {
    detail::check(num_classes >= 1, "classifier needs at least one class");
    if (head_w_) throw std::logic_error("classifier already attached");
    head_w_ = params_.add("head.weight", init_weight(cfg_.dim, num_classes, &rng), true, int(cfg_.layers) + 1);
    head_b_ = params_.add("head.bias", Matrix<S>(1, num_classes), false, int(cfg_.layers) + 1);
  }
  bool has_classifier() const { return head_w_.has_value(); }
  std::size_t num_classes() const { return head_w_ ? params_[*head_w_].value.cols() : 0; }

  // Backbone = everything the fine-tuned content stream uses.
  static bool is_backbone(const std::string& name) {
    return name.starts_with("patch_embed.") || name == "pos_embed" || name.starts_with("blocks.");
  }

  Linear<S> patch_projection() const { return {params_[patch_w_].value, params_[patch_b_].value}; }
  const Matrix<S>& pos_table() const { return params_[pos_].value; }
  const Matrix<S>& mask_token() const { return params_[mask_].value; }
  Linear<S> classifier() const {
    detail::check(has_classifier(), "no classifier attached");
    return {params_[*head_w_].value, params_[*head_b_].value};
  }

  EmbeddedSequence<S> embed_patches(const Matrix<S>& patches) const {
    PatchGrid<S> grid;
    grid.patches = patches;
    return mapet::embed(grid, patch_projection(), pos_table());
  }

  // ---- graph builders -------------------------------------------------------

  Var<S> embed(Binder<S>& b, Var<S> patches) const {
    detail::check_shape(patches.rows() == cfg_.num_patches && patches.cols() == cfg_.patch_dim,
                        "embed: patches are " + shape_string(patches.rows(), patches.cols()) + ", model expects " +
                            shape_string(cfg_.num_patches, cfg_.patch_dim));
    auto x = ad::add_row(ad::matmul(patches, b(patch_w_)), b(patch_b_));
    return ad::add(x, b(pos_));
  }

  Var<S> positions(Binder<S>& b) const { return b(pos_); }

  DropPlan<S> draw_drop(std::size_t layer, const ForwardOptions& opts) const {
    DropPlan<S> plan;
    if (!opts.train) return plan;
    const double rate = cfg_.layers > 1 ? cfg_.drop_path * double(layer) / double(cfg_.layers - 1) : cfg_.drop_path;
    if (rate <= 0.0) return plan;
    detail::check(opts.rng != nullptr, "stochastic depth needs an rng");
    const S keep_scale = S(1.0 / (1.0 - rate));
    plan.attn = opts.rng->bernoulli(rate) ? S(0) : keep_scale;
    plan.mlp = opts.rng->bernoulli(rate) ? S(0) : keep_scale;
    return plan;
  }

  // One transformer block over both streams. Keys and values come from the
  // normalized content-stream input for both streams. A null mask means full
  // visibility (plain softmax).
  StreamVars<S> layer(Binder<S>& b, std::size_t l, StreamVars<S> in, const BoolMatrix* content_mask,
                      const BoolMatrix* query_mask, DropPlan<S> drop = {}) const {
    const auto& ix = layers_[l];
    const S eps = S(cfg_.ln_eps);
    StreamVars<S> out = in;
    if (drop.attn != S(0)) {
      auto hn = ad::layer_norm(in.h, b(ix.norm1_w), b(ix.norm1_b), eps);
      const auto kv = project_kv(b, ix, hn);
      out.h = residual(b, in.h, attend(b, ix, hn, kv, content_mask), ix.ls1, drop.attn);
      if (in.g) {
        auto gn = ad::layer_norm(*in.g, b(ix.norm1_w), b(ix.norm1_b), eps);
        out.g = residual(b, *in.g, attend(b, ix, gn, kv, query_mask), ix.ls1, drop.attn);
      }
    }
    if (drop.mlp != S(0)) {
      out.h = residual(b, out.h, mlp(b, ix, out.h), ix.ls2, drop.mlp);
      if (out.g) out.g = residual(b, *out.g, mlp(b, ix, *out.g), ix.ls2, drop.mlp);
    }
    return out;
  }

  // Pre-training head: layer norm then the linear map to vocabulary logits.
  Var<S> vocab_logits(Binder<S>& b, Var<S> rows) const {
    auto n = ad::layer_norm(rows, b(head_norm_w_), b(head_norm_b_), S(cfg_.ln_eps));
    return ad::add_row(ad::matmul(n, b(vocab_w_)), b(vocab_b_));
  }

  // Average pooling over patches followed by the classification head.
  Var<S> classifier_logits(Binder<S>& b, Var<S> features) const {
    detail::check(has_classifier(), "no classifier attached");
    return ad::add_row(ad::matmul(ad::mean_rows(features), b(*head_w_)), b(*head_b_));
  }

  // Content stream only; a null mask is the standard ViT encoder.
  Var<S> content_stream(Binder<S>& b, Var<S> h0, const BoolMatrix* mask, const ForwardOptions& opts = {}) const {
    StreamVars<S> s{h0, std::nullopt};
    for (std::size_t l = 0; l < cfg_.layers; ++l) s = layer(b, l, s, mask, nullptr, draw_drop(l, opts));
    return s.h;
  }

  // Two-stream pass. `emb` holds raster-order embeddings (positional rows
  // already added) and `pos` the positional table. Returns the (N - c) x K
  // logits, row j predicting the token of patch order[c + j]. For kPim the
  // mask-token rows and columns are left out entirely.
  Var<S> pretrain_logits(Binder<S>& b, Var<S> emb, Var<S> pos, const Permutation& perm, Objective variant,
                         const MaskPair* masks_override = nullptr, const ForwardOptions& opts = {}) const {
    detail::check(variant != Objective::kMim, "pretrain_logits: use mim_logits for masked image modeling");
    validate(perm);
    detail::check_shape(perm.size() == emb.rows(), "pretrain_logits: permutation covers " + std::to_string(perm.size()) +
                                                       " patches but the sequence has " + std::to_string(emb.rows()));
    const auto split = split_targets(perm);
    auto permuted = ad::gather_rows(emb, perm.order);
    auto mask_tokens = ad::add_row(ad::gather_rows(pos, split.targets), b(mask_));
    MaskPair masks = masks_override ? *masks_override
                                    : (variant == Objective::kMapet ? build_masks(perm) : build_pim_masks(perm));
    StreamVars<S> s;
    if (variant == Objective::kMapet) {
      std::vector<Var<S>> parts{permuted, mask_tokens};
      s.h = ad::concat_rows<S>(parts);
    } else {
      s.h = permuted;
    }
    s.g = mask_tokens;
    detail::check_shape(masks.content.rows() == s.h.rows() && masks.content.cols() == s.h.rows() &&
                            masks.query.rows() == perm.num_targets() && masks.query.cols() == s.h.rows(),
                        "pretrain_logits: mask shapes do not match the stream layout");
    for (std::size_t l = 0; l < cfg_.layers; ++l) s = layer(b, l, s, &masks.content, &masks.query, draw_drop(l, opts));
    return vocab_logits(b, *s.g);
  }

  // Masked image modeling: rows in mask_set are replaced by mask token +
  // positional row, the full-visibility encoder runs, and the vocabulary head
  // is applied at the masked rows (in mask_set order).
  Var<S> mim_logits(Binder<S>& b, Var<S> emb, Var<S> pos, std::span<const std::size_t> mask_set,
                    const ForwardOptions& opts = {}) const {
    detail::check(!mask_set.empty(), "mim_logits: empty mask set");
    std::vector<std::uint8_t> pick(emb.rows(), 0);
    for (auto i : mask_set) {
      if (i >= emb.rows()) throw std::out_of_range("mim_logits: mask index out of range");
      pick[i] = 1;
    }
    auto masked = ad::add_row(pos, b(mask_));
    auto h0 = ad::where_rows(emb, masked, std::move(pick));
    auto features = content_stream(b, h0, nullptr, opts);
    return vocab_logits(b, ad::gather_rows(features, std::vector<std::size_t>(mask_set.begin(), mask_set.end())));
  }

  const LayerIndex& layer_index(std::size_t l) const { return layers_[l]; }

 private:
  struct KeyValue {
    std::vector<Var<S>> k, v;  // per head
  };

  Matrix<S> init_weight(std::size_t r, std::size_t c, Rng* rng) const {
    Matrix<S> m(r, c);
    if (rng)
      for (auto& v : m.values()) v = S(rng->truncated_normal(cfg_.init_std));
    return m;
  }

  void build(Rng* rng) {
    const std::size_t d = cfg_.dim;
    auto ones = [](std::size_t n) { return Matrix<S>(1, n, S(1)); };
    auto zeros = [](std::size_t n) { return Matrix<S>(1, n); };
    patch_w_ = params_.add("patch_embed.weight", init_weight(cfg_.patch_dim, d, rng), true, 0);
    patch_b_ = params_.add("patch_embed.bias", zeros(d), false, 0);
    pos_ = params_.add("pos_embed", init_weight(cfg_.num_patches, d, rng), false, 0);
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const std::string p = "blocks." + std::to_string(l) + ".";
      const int depth = int(l) + 1;
      LayerIndex ix{};
      ix.norm1_w = params_.add(p + "norm1.weight", ones(d), false, depth);
      ix.norm1_b = params_.add(p + "norm1.bias", zeros(d), false, depth);
      ix.q_w = params_.add(p + "attn.q.weight", init_weight(d, d, rng), true, depth);
      ix.q_b = params_.add(p + "attn.q.bias", zeros(d), false, depth);
      ix.k_w = params_.add(p + "attn.k.weight", init_weight(d, d, rng), true, depth);
      ix.k_b = params_.add(p + "attn.k.bias", zeros(d), false, depth);
      ix.v_w = params_.add(p + "attn.v.weight", init_weight(d, d, rng), true, depth);
      ix.v_b = params_.add(p + "attn.v.bias", zeros(d), false, depth);
      ix.proj_w = params_.add(p + "attn.proj.weight", init_weight(d, d, rng), true, depth);
      ix.proj_b = params_.add(p + "attn.proj.bias", zeros(d), false, depth);
      ix.ls1 = params_.add(p + "ls1", Matrix<S>(1, d, rng ? S(cfg_.layer_scale_init) : S(0)), false, depth);
      ix.norm2_w = params_.add(p + "norm2.weight", ones(d), false, depth);
      ix.norm2_b = params_.add(p + "norm2.bias", zeros(d), false, depth);
      ix.fc1_w = params_.add(p + "mlp.fc1.weight", init_weight(d, cfg_.ffn_dim, rng), true, depth);
      ix.fc1_b = params_.add(p + "mlp.fc1.bias", zeros(cfg_.ffn_dim), false, depth);
      ix.fc2_w = params_.add(p + "mlp.fc2.weight", init_weight(cfg_.ffn_dim, d, rng), true, depth);
      ix.fc2_b = params_.add(p + "mlp.fc2.bias", zeros(d), false, depth);
      ix.ls2 = params_.add(p + "ls2", Matrix<S>(1, d, rng ? S(cfg_.layer_scale_init) : S(0)), false, depth);
      layers_.push_back(ix);
    }
    const int top = int(cfg_.layers) + 1;
    mask_ = params_.add("mask_token", init_weight(1, d, rng), false, 0);
    head_norm_w_ = params_.add("vocab_head.norm.weight", ones(d), false, top);
    head_norm_b_ = params_.add("vocab_head.norm.bias", zeros(d), false, top);
    vocab_w_ = params_.add("vocab_head.weight", init_weight(d, cfg_.vocab_size, rng), true, top);
    vocab_b_ = params_.add("vocab_head.bias", zeros(cfg_.vocab_size), false, top);
  }

  KeyValue project_kv(Binder<S>& b, const LayerIndex& ix, Var<S> hn) const {
    auto k = ad::add_row(ad::matmul(hn, b(ix.k_w)), b(ix.k_b));
    auto v = ad::add_row(ad::matmul(hn, b(ix.v_w)), b(ix.v_b));
    KeyValue kv;
    const std::size_t dh = cfg_.head_dim();
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      kv.k.push_back(ad::slice_cols(k, h * dh, dh));
      kv.v.push_back(ad::slice_cols(v, h * dh, dh));
    }
    return kv;
  }

  Var<S> attend(Binder<S>& b, const LayerIndex& ix, Var<S> xn, const KeyValue& kv, const BoolMatrix* mask) const {
    auto q = ad::add_row(ad::matmul(xn, b(ix.q_w)), b(ix.q_b));
    const std::size_t dh = cfg_.head_dim();
    const S inv_sqrt = S(1) / std::sqrt(S(dh));
    std::vector<Var<S>> heads;
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      auto qh = cfg_.heads == 1 ? q : ad::slice_cols(q, h * dh, dh);
      auto scores = ad::scale(ad::matmul_nt(qh, kv.k[h]), inv_sqrt);
      auto probs = ad::softmax_rows(scores, mask);
      heads.push_back(ad::matmul(probs, kv.v[h]));
    }
    auto merged = cfg_.heads == 1 ? heads[0] : ad::concat_cols<S>(heads);
    return ad::add_row(ad::matmul(merged, b(ix.proj_w)), b(ix.proj_b));
  }

  Var<S> mlp(Binder<S>& b, const LayerIndex& ix, Var<S> x) const {
    auto xn = ad::layer_norm(x, b(ix.norm2_w), b(ix.norm2_b), S(cfg_.ln_eps));
    auto hidden = ad::gelu(ad::add_row(ad::matmul(xn, b(ix.fc1_w)), b(ix.fc1_b)));
    return ad::add_row(ad::matmul(hidden, b(ix.fc2_w)), b(ix.fc2_b));
  }

  Var<S> residual(Binder<S>& b, Var<S> x, Var<S> branch, std::size_t layer_scale, S keep) const {
    auto scaled = ad::mul_row(branch, b(layer_scale));
    if (keep != S(1)) scaled = ad::scale(scaled, keep);
    return ad::add(x, scaled);
  }

  EncoderConfig cfg_;
  ParameterSet<S> params_;
  std::vector<LayerIndex> layers_;
  std::size_t patch_w_ = 0, patch_b_ = 0, pos_ = 0, mask_ = 0;
  std::size_t head_norm_w_ = 0, head_norm_b_ = 0, vocab_w_ = 0, vocab_b_ = 0;
  std::optional<std::size_t> head_w_, head_b_;
};

// ---------------------------------------------------------------------------
// Evaluation-mode entry points over plain matrices.

// One block applied to explicit stream states. g may be empty.
template <typename S>
StreamStates<S> two_stream_layer(const StreamStates<S>& states, const MaskPair& masks, const Encoder<S>& model,
                                 std::size_t layer) {
  detail::check(layer < model.config().layers, "two_stream_layer: layer index out of range");
  detail::check_shape(masks.content.rows() == states.h.rows() && masks.content.cols() == states.h.rows(),
                      "two_stream_layer: content mask does not match content stream");
  if (!states.g.empty())
    detail::check_shape(masks.query.rows() == states.g.rows() && masks.query.cols() == states.h.rows(),
                        "two_stream_layer: query mask does not match query stream");
  Tape<S> tape;
  Binder<S> b(tape, model.params(), false);
  StreamVars<S> in{tape.constant(states.h), std::nullopt};
  if (!states.g.empty()) in.g = tape.constant(states.g);
  auto out = model.layer(b, layer, in, &masks.content, states.g.empty() ? nullptr : &masks.query);
  return {out.h.value(), out.g ? out.g->value() : Matrix<S>()};
}

// (N - c) x K vocabulary logits for the targets of `perm`.
template <typename S>
Matrix<S> forward_pretrain(const EmbeddedSequence<S>& seq, const Permutation& perm, const Encoder<S>& model,
                           Objective variant = Objective::kMapet, const MaskPair* masks_override = nullptr) {
  detail::check_shape(perm.size() == seq.length(), "forward_pretrain: permutation size " + std::to_string(perm.size()) +
                                                       " does not match sequence length " + std::to_string(seq.length()));
  Tape<S> tape;
  Binder<S> b(tape, model.params(), false);
  auto logits = model.pretrain_logits(b, tape.constant(seq.embeddings), tape.constant(seq.pos_table), perm, variant,
                                      masks_override);
  return logits.value();
}

// Standard ViT pass: content stream only, raster order, full visibility.
template <typename S>
Matrix<S> forward_finetune(const EmbeddedSequence<S>& seq, const Encoder<S>& model) {
  detail::check_shape(seq.width() == model.config().dim, "forward_finetune: embedding width does not match model");
  Tape<S> tape;
  Binder<S> b(tape, model.params(), false);
  return model.content_stream(b, tape.constant(seq.embeddings), nullptr).value();
}

// Mean over the patch axis, then the linear head. Returns 1 x classes.
template <typename S>
Matrix<S> classify(const Matrix<S>& features, const Linear<S>& head) {
  detail::check_shape(features.cols() == head.in_dim(), "classify: feature width does not match head");
  detail::check_shape(features.rows() > 0, "classify: no features");
  Matrix<S> mean(1, features.cols());
  for (std::size_t i = 0; i < features.rows(); ++i)
    for (std::size_t j = 0; j < features.cols(); ++j) mean(0, j) += features(i, j);
  for (auto& v : mean.values()) v /= S(features.rows());
  return head.apply(mean);
}

}  // namespace mapet
