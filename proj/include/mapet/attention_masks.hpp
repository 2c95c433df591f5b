#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <compare>
#include <cstddef>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "mapet/autodiff.hpp"
#include "mapet/errors.hpp"
#include "mapet/patching.hpp"
#include "mapet/permutation.hpp"
#include "mapet/random.hpp"

namespace mapet {

// Augmented sequence layout: N patch slots in permuted order (slot t holds
// patch order[t]), followed by N - c position-aware mask-token slots; mask
// slot j stands in for target position c + j and carries the positional
// embedding of patch order[c + j].
struct AugmentedLayout {
  std::size_t num_patches = 0;
  std::size_t cut = 0;

  explicit AugmentedLayout(const Permutation& perm) : num_patches(perm.size()), cut(perm.cut) {}

  std::size_t num_masks() const { return num_patches - cut; }
  std::size_t total() const { return 2 * num_patches - cut; }
  std::size_t mask_column(std::size_t j) const { return num_patches + j; }
  std::size_t mask_position(std::size_t j) const { return cut + j; }
};

// Row = attender, column = attended, 1 = visible.
struct MaskPair {
  BoolMatrix content;  // rows x rows over the (augmented) sequence
  BoolMatrix query;    // one row per target position
};

// What the content rows of mask tokens may attend to. kMasksOnly (default):
// mask columns j' >= j and no patches, so mask-token states stay a function of
// positions alone. kQueryVisibility: the query rule of position c + j (patches
// before it plus mask columns j' >= j); a later mask token then carries target
// content into earlier query rows from the second layer on.
enum class MaskRowRule { kMasksOnly, kQueryVisibility };

// content row t < N (patch slot): patches at positions <= t, mask slots whose
// position is > t. Content row N + j (mask slot) follows `rule`.
inline BoolMatrix build_content_mask(const Permutation& perm, MaskRowRule rule = MaskRowRule::kMasksOnly) {
  validate(perm);
  const AugmentedLayout lay(perm);
  const std::size_t n = lay.num_patches;
  BoolMatrix m(lay.total(), lay.total(), 0);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t s = 0; s <= t; ++s) m(t, s) = 1;
    for (std::size_t j = 0; j < lay.num_masks(); ++j)
      if (lay.mask_position(j) > t) m(t, lay.mask_column(j)) = 1;
  }
  for (std::size_t j = 0; j < lay.num_masks(); ++j) {
    const std::size_t row = lay.mask_column(j);
    if (rule == MaskRowRule::kQueryVisibility)
      for (std::size_t s = 0; s < lay.mask_position(j); ++s) m(row, s) = 1;
    for (std::size_t k = j; k < lay.num_masks(); ++k) m(row, lay.mask_column(k)) = 1;
  }
  return m;
}

// query row j (target position c + j): patches at positions < c + j and mask
// slots k >= j, so each query row sees its own mask token but never its own
// patch content.
inline BoolMatrix build_query_mask(const Permutation& perm) {
  validate(perm);
  const AugmentedLayout lay(perm);
  BoolMatrix m(lay.num_masks(), lay.total(), 0);
  for (std::size_t j = 0; j < lay.num_masks(); ++j) {
    for (std::size_t s = 0; s < lay.mask_position(j); ++s) m(j, s) = 1;
    for (std::size_t k = j; k < lay.num_masks(); ++k) m(j, lay.mask_column(k)) = 1;
  }
  return m;
}

inline MaskPair build_masks(const Permutation& perm, MaskRowRule rule = MaskRowRule::kMasksOnly) {
  return {build_content_mask(perm, rule), build_query_mask(perm)};
}

// Permuted-modeling masks without position-aware mask tokens: the MaPeT masks
// restricted to the patch block (content N x N, query (N - c) x N).
inline MaskPair build_pim_masks(const Permutation& perm) {
  const auto full = build_masks(perm);
  const std::size_t n = perm.size();
  MaskPair out{BoolMatrix(n, n), BoolMatrix(perm.num_targets(), n)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out.content(i, j) = full.content(i, j);
  for (std::size_t i = 0; i < perm.num_targets(); ++i)
    for (std::size_t j = 0; j < n; ++j) out.query(i, j) = full.query(i, j);
  return out;
}

// Hides every mask-token column from patch rows and query rows. Mask rows keep
// their own block so they still have a visible column; nothing reads them.
inline MaskPair hide_mask_columns(MaskPair masks, std::size_t num_patches) {
  for (std::size_t i = 0; i < std::min(num_patches, masks.content.rows()); ++i)
    for (std::size_t j = num_patches; j < masks.content.cols(); ++j) masks.content(i, j) = 0;
  for (std::size_t i = 0; i < masks.query.rows(); ++i)
    for (std::size_t j = num_patches; j < masks.query.cols(); ++j) masks.query(i, j) = 0;
  return masks;
}

inline BoolMatrix all_visible(std::size_t rows, std::size_t cols) { return BoolMatrix(rows, cols, 1); }

// ---------------------------------------------------------------------------
// Independent oracle. Works from patch identities and the index-range
// definition of the mask-token subsets (M_{z>=t} = {M_i : i >= max(1, t - c)}
// with 1-based t and i), then maps the result onto layout columns. Shares no
// code with the builders above.

enum class Stream { kContent, kQuery };

struct Slot {
  enum class Kind { kPatch, kMask };
  Kind kind = Kind::kPatch;
  std::size_t index = 0;  // permuted position for patches, mask number j for masks (0-based)

  auto operator<=>(const Slot&) const = default;
};

inline Slot patch_slot(std::size_t t) { return {Slot::Kind::kPatch, t}; }
inline Slot mask_slot(std::size_t j) { return {Slot::Kind::kMask, j}; }

class UnknownRow : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Content rows: patch_slot(t) or mask_slot(j). Query rows: patch_slot(t) for a
// target position t >= c (the row that predicts order[t]).
inline std::set<Slot> visibility_oracle(const Permutation& perm, Stream stream, Slot row,
                                       MaskRowRule rule = MaskRowRule::kMasksOnly) {
  validate(perm);
  const std::size_t n = perm.size(), c = perm.cut;
  // 1-based helpers mirroring the set notation.
  auto patches_before = [&](std::size_t t1, bool inclusive) {  // ids {z_1..z_{t-1}} or {z_1..z_t}
    std::set<std::size_t> ids;
    for (std::size_t s1 = 1; s1 < t1 + (inclusive ? 1 : 0); ++s1) ids.insert(perm.order[s1 - 1]);
    return ids;
  };
  auto masks_from = [&](std::size_t t1) {  // M_{z>=t}: i in [max(1, t - c), N - c]
    std::set<std::size_t> is;
    const long lo = std::max<long>(1, static_cast<long>(t1) - static_cast<long>(c));
    for (long i = lo; i <= static_cast<long>(n - c); ++i) is.insert(static_cast<std::size_t>(i));
    return is;
  };
  auto to_columns = [&](const std::set<std::size_t>& patch_ids, const std::set<std::size_t>& mask_ids) {
    std::set<Slot> cols;
    for (auto id : patch_ids) {
      const auto it = std::find(perm.order.begin(), perm.order.end(), id);
      cols.insert(patch_slot(static_cast<std::size_t>(it - perm.order.begin())));
    }
    for (auto i : mask_ids) cols.insert(mask_slot(i - 1));
    return cols;
  };

  std::size_t t1 = 0;  // 1-based position whose visibility is requested
  bool query_rule = false;
  bool patches_hidden = false;
  if (stream == Stream::kQuery) {
    if (row.kind != Slot::Kind::kPatch || row.index < c || row.index >= n)
      throw UnknownRow("query stream has rows only for target positions [" + std::to_string(c) + ", " +
                       std::to_string(n) + ")");
    t1 = row.index + 1;
    query_rule = true;
  } else if (row.kind == Slot::Kind::kPatch) {
    if (row.index >= n) throw UnknownRow("content patch row " + std::to_string(row.index) + " out of range");
    t1 = row.index + 1;
  } else {
    if (row.index >= n - c) throw UnknownRow("content mask row " + std::to_string(row.index) + " out of range");
    t1 = c + row.index + 1;
    query_rule = true;
    patches_hidden = rule == MaskRowRule::kMasksOnly;
  }
  if (patches_hidden) return to_columns({}, masks_from(t1));
  if (query_rule) return to_columns(patches_before(t1, false), masks_from(t1));
  return to_columns(patches_before(t1, true), masks_from(t1 + 1));
}

inline std::set<Slot> visible_columns(const BoolMatrix& mask, std::size_t row, std::size_t num_patches) {
  std::set<Slot> cols;
  for (std::size_t j = 0; j < mask.cols(); ++j)
    if (mask(row, j)) cols.insert(j < num_patches ? patch_slot(j) : mask_slot(j - num_patches));
  return cols;
}

// ---------------------------------------------------------------------------
// Masked image modeling input corruption.

// floor(ratio * N) distinct indices, sorted.
inline std::vector<std::size_t> sample_mim_mask(std::size_t n, double ratio, Rng& rng) {
  detail::check(ratio >= 0.0 && ratio <= 1.0, "sample_mim_mask: ratio must be in [0, 1]");
  const auto count = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + rng.uniform_index(n - i)]);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// Rows in mask_set become mask_token + pos_table[i]; all others are unchanged.
template <typename S>
EmbeddedSequence<S> corrupt_input_mim(const EmbeddedSequence<S>& seq, std::span<const std::size_t> mask_set,
                                      const Matrix<S>& mask_token) {
  detail::check_shape(mask_token.rows() == 1 && mask_token.cols() == seq.width(), "corrupt_input_mim: mask token width");
  EmbeddedSequence<S> out = seq;
  for (auto i : mask_set) {
    if (i >= seq.length())
      throw std::out_of_range("corrupt_input_mim: index " + std::to_string(i) + " outside sequence of " +
                              std::to_string(seq.length()));
    for (std::size_t d = 0; d < seq.width(); ++d) out.embeddings(i, d) = mask_token(0, d) + seq.pos_table(i, d);
  }
  return out;
}

inline std::string mask_to_ascii(const BoolMatrix& m) {
  std::string s;
  s.reserve(m.rows() * (m.cols() + 1));
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) s += m(i, j) ? '1' : '.';
    s += '\n';
  }
  return s;
}

}  // namespace mapet
