#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mapet/errors.hpp"
#include "mapet/random.hpp"

namespace mapet {

// A permuted order over N patches plus the cutting point. order[t] is the
// raster index of the patch placed at permuted position t (both 0-based);
// positions [0, cut) are non-targets and [cut, N) are targets.
struct Permutation {
  std::vector<std::size_t> order;
  std::size_t cut = 0;

  std::size_t size() const { return order.size(); }
  std::size_t num_targets() const { return order.size() - cut; }

  friend bool operator==(const Permutation&, const Permutation&) = default;
};

class InvalidCuttingPoint : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline void validate_cut(std::size_t n, std::size_t cut) {
  if (n < 2) throw InvalidCuttingPoint("permutation needs at least 2 patches, got " + std::to_string(n));
  if (cut < 1 || cut > n - 1)
    throw InvalidCuttingPoint("cutting point " + std::to_string(cut) + " outside [1, " + std::to_string(n - 1) + "]");
}

inline void validate(const Permutation& perm) {
  validate_cut(perm.size(), perm.cut);
  std::vector<bool> seen(perm.size(), false);
  for (auto i : perm.order) {
    detail::check(i < perm.size() && !seen[i], "permutation is not a bijection on its index set");
    seen[i] = true;
  }
}

inline Permutation make_permutation(std::vector<std::size_t> order, std::size_t cut) {
  Permutation p{std::move(order), cut};
  validate(p);
  return p;
}

inline Permutation identity_permutation(std::size_t n, std::size_t cut) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  return make_permutation(std::move(order), cut);
}

// Fisher-Yates over [0, n).
inline Permutation sample_permutation(std::size_t n, std::size_t cut, Rng& rng) {
  validate_cut(n, cut);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_index(i + 1)]);
  return Permutation{std::move(order), cut};
}

struct TargetSplit {
  std::vector<std::size_t> non_targets;
  std::vector<std::size_t> targets;
};

inline TargetSplit split_targets(const Permutation& perm) {
  TargetSplit s;
  s.non_targets.assign(perm.order.begin(), perm.order.begin() + static_cast<std::ptrdiff_t>(perm.cut));
  s.targets.assign(perm.order.begin() + static_cast<std::ptrdiff_t>(perm.cut), perm.order.end());
  return s;
}

// Fraction of patches whose tokens are predicted, (N - c) / N.
inline double reconstruction_ratio(std::size_t n, std::size_t cut) {
  validate_cut(n, cut);
  return static_cast<double>(n - cut) / static_cast<double>(n);
}

// Percentage rounded to the nearest multiple of 5, as ablation tables report it.
inline int ratio_percent_rounded(double ratio) { return 5 * static_cast<int>(std::lround(ratio * 100.0 / 5.0)); }

// Text form "c;z_1,...,z_N" with 1-based indices.
inline std::string format_permutation(const Permutation& perm) {
  std::ostringstream os;
  os << perm.cut << ';';
  for (std::size_t t = 0; t < perm.size(); ++t) os << (t ? "," : "") << perm.order[t] + 1;
  return os.str();
}

inline Permutation parse_permutation(const std::string& text) {
  const auto semi = text.find(';');
  if (semi == std::string::npos) throw std::invalid_argument("permutation text lacks ';': " + text);
  auto parse_int = [&](const std::string& s) -> std::size_t {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != s.size() || s.empty() || s[0] == '-') throw std::invalid_argument("bad integer in permutation: '" + s + "'");
    return static_cast<std::size_t>(v);
  };
  Permutation perm;
  perm.cut = parse_int(text.substr(0, semi));
  std::stringstream body(text.substr(semi + 1));
  std::string item;
  while (std::getline(body, item, ',')) {
    const auto v = parse_int(item);
    if (v == 0) throw std::invalid_argument("permutation indices are 1-based");
    perm.order.push_back(v - 1);
  }
  validate(perm);
  return perm;
}

}  // namespace mapet
