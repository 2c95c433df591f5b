#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "mapet/autodiff.hpp"
#include "mapet/encoder.hpp"
#include "mapet/matrix.hpp"

namespace mapet {

// Logits at the predicted positions and the token ids they should recover.
template <typename S>
struct TargetBatch {
  Matrix<S> logits;                 // num_targets x K
  std::vector<std::size_t> token_ids;
  std::vector<S> weights;           // empty = all ones

  std::size_t size() const { return token_ids.size(); }
  std::size_t vocab() const { return logits.cols(); }
};

class InvalidToken : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

namespace detail {

template <typename S>
void validate_batch(const TargetBatch<S>& batch) {
  if (batch.token_ids.empty()) throw std::invalid_argument("loss: no targets");
  check_shape(batch.logits.rows() == batch.token_ids.size(), "loss: logits rows do not match target count");
  check_shape(batch.weights.empty() || batch.weights.size() == batch.token_ids.size(), "loss: weight count mismatch");
  for (auto id : batch.token_ids)
    if (id >= batch.vocab())
      throw InvalidToken("loss: token id " + std::to_string(id) + " outside vocabulary of " +
                         std::to_string(batch.vocab()));
}

// Row-wise log-sum-exp with max subtraction.
template <typename S>
S log_sum_exp(std::span<const S> row) {
  S mx = row[0];
  for (auto v : row) mx = std::max(mx, v);
  S sum = 0;
  for (auto v : row) sum += std::exp(v - mx);
  return mx + std::log(sum);
}

// Weighted mean of per-target negative log-likelihoods.
template <typename S>
S mean_cross_entropy(const TargetBatch<S>& batch) {
  validate_batch(batch);
  S total = 0, wsum = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const S w = batch.weights.empty() ? S(1) : batch.weights[i];
    const auto row = batch.logits.row(i);
    total += w * (log_sum_exp<S>(row) - row[batch.token_ids[i]]);
    wsum += w;
  }
  return total / wsum;
}

}  // namespace detail

// Permuted prediction with position-aware mask tokens.
template <typename S>
S loss_mapet(const TargetBatch<S>& batch) {
  return detail::mean_cross_entropy(batch);
}

// Permuted prediction without mask tokens. The reduction is the same as
// loss_mapet; the objectives differ only in how the logits were produced.
template <typename S>
S loss_pim(const TargetBatch<S>& batch) {
  return detail::mean_cross_entropy(batch);
}

// Masked image modeling: cross-entropy over masked positions only.
template <typename S>
S loss_mim(const TargetBatch<S>& batch) {
  if (batch.token_ids.empty()) throw std::invalid_argument("loss_mim: empty mask set, nothing to predict");
  return detail::mean_cross_entropy(batch);
}

template <typename S>
S loss_for(Objective o, const TargetBatch<S>& batch) {
  switch (o) {
    case Objective::kMim: return loss_mim(batch);
    case Objective::kPim: return loss_pim(batch);
    case Objective::kMapet: return loss_mapet(batch);
  }
  throw std::logic_error("unreachable");
}

// d loss / d logits in closed form: w_i (softmax(row_i) - onehot_i) / sum(w).
template <typename S>
Matrix<S> loss_logit_gradient(const TargetBatch<S>& batch) {
  detail::validate_batch(batch);
  Matrix<S> g(batch.logits.rows(), batch.logits.cols());
  S wsum = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) wsum += batch.weights.empty() ? S(1) : batch.weights[i];
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const S w = batch.weights.empty() ? S(1) : batch.weights[i];
    const auto row = batch.logits.row(i);
    const S lse = detail::log_sum_exp<S>(row);
    for (std::size_t k = 0; k < batch.vocab(); ++k) g(i, k) = w * std::exp(row[k] - lse) / wsum;
    g(i, batch.token_ids[i]) -= w / wsum;
  }
  return g;
}

// The same loss as a tape node, for training.
template <typename S>
Var<S> cross_entropy_loss(Var<S> logits, std::span<const std::size_t> token_ids, std::span<const S> weights = {}) {
  detail::check_shape(logits.rows() == token_ids.size(), "cross_entropy_loss: logits rows do not match target count");
  if (token_ids.empty()) throw std::invalid_argument("cross_entropy_loss: no targets");
  for (auto id : token_ids)
    if (id >= logits.cols()) throw InvalidToken("cross_entropy_loss: token id " + std::to_string(id) + " out of range");
  auto target = ad::one_hot<S>(token_ids, logits.cols());
  if (!weights.empty()) {
    detail::check_shape(weights.size() == token_ids.size(), "cross_entropy_loss: weight count mismatch");
    S wsum = 0;
    for (auto w : weights) wsum += w;
    for (std::size_t i = 0; i < target.rows(); ++i)
      for (std::size_t k = 0; k < target.cols(); ++k) target(i, k) *= weights[i] * S(token_ids.size()) / wsum;
  }
  return ad::cross_entropy(logits, target);
}

}  // namespace mapet
