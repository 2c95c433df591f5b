#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mapet/errors.hpp"
#include "mapet/matrix.hpp"
#include "mapet/patching.hpp"
#include "mapet/random.hpp"

namespace mapet {

// N_c x D_c feature matrix for one image, cells in raster order.
struct FeatureGrid {
  Matrix<float> values;

  std::size_t cells() const { return values.rows(); }
  std::size_t dim() const { return values.cols(); }
};

struct GridShape {
  std::size_t cells = 0;
  std::size_t dim = 0;
};

// Pluggable feature source. `source` identifies the image (a file path or a
// dataset index rendered as text); extractors that compute from pixels ignore it.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::string id() const = 0;
  virtual GridShape output_shape(const ImageTensor& image) const = 0;
  virtual Matrix<float> compute(const ImageTensor& image, const std::string& source) const = 0;
};

class ExtractorError : public DataError {
 public:
  using DataError::DataError;
};

inline FeatureGrid extract_features(const ImageTensor& image, const FeatureExtractor& extractor,
                                    const std::string& source = {}) {
  const auto shape = extractor.output_shape(image);
  FeatureGrid grid{extractor.compute(image, source)};
  if (grid.cells() != shape.cells || grid.dim() != shape.dim)
    throw ShapeError("extractor " + extractor.id() + " produced " + shape_string(grid.cells(), grid.dim()) +
                     " but declared " + shape_string(shape.cells, shape.dim));
  for (float v : grid.values.values())
    if (!std::isfinite(v)) throw ExtractorError("extractor " + extractor.id() + " produced a non-finite feature");
  return grid;
}

// Patchwise linear projection of pixels with fixed seeded weights.
class ToyExtractor : public FeatureExtractor {
 public:
  ToyExtractor(std::size_t patch_size, std::size_t channels, std::size_t dim, std::uint64_t seed)
      : patch_size_(patch_size) {
    Rng rng(seed);
    const std::size_t in = patch_size * patch_size * channels;
    projection_.weight = Matrix<float>(in, dim);
    for (auto& v : projection_.weight.values()) v = float(rng.normal() / std::sqrt(double(in)));
    projection_.bias = Matrix<float>(1, dim);
  }

  ToyExtractor(std::size_t patch_size, Linear<float> projection)
      : patch_size_(patch_size), projection_(std::move(projection)) {}

  std::string id() const override {
    return "toy-linear-p" + std::to_string(patch_size_) + "-d" + std::to_string(projection_.out_dim());
  }

  GridShape output_shape(const ImageTensor& image) const override {
    validate_image(image, patch_size_);
    return {(image.height / patch_size_) * (image.width / patch_size_), projection_.out_dim()};
  }

  Matrix<float> compute(const ImageTensor& image, const std::string&) const override {
    const auto grid = patchify<float>(image, patch_size_);
    if (grid.patch_dim() != projection_.in_dim())
      throw ShapeError("toy extractor expects patches of length " + std::to_string(projection_.in_dim()) + ", got " +
                       std::to_string(grid.patch_dim()));
    return projection_.apply(grid.patches);
  }

  const Linear<float>& projection() const { return projection_; }

 private:
  std::size_t patch_size_;
  Linear<float> projection_;
};

// ---------------------------------------------------------------------------
// Feature file: "KCFG" | version u32 | N_c u32 | D_c u32 | float32 row-major.

inline constexpr char kFeatureMagic[5] = "KCFG";
inline constexpr std::uint32_t kFeatureVersion = 1;

inline void write_feature_grid(std::ostream& os, const FeatureGrid& grid) {
  io::write_magic(os, kFeatureMagic);
  io::write_u32(os, kFeatureVersion);
  io::write_u32(os, static_cast<std::uint32_t>(grid.cells()));
  io::write_u32(os, static_cast<std::uint32_t>(grid.dim()));
  for (float v : grid.values.values()) io::write_f32(os, v);
}

inline FeatureGrid read_feature_grid(std::istream& is) {
  const std::string what = "feature file";
  io::expect_magic(is, kFeatureMagic, what);
  const auto version = io::read_u32(is, what);
  if (version != kFeatureVersion) throw DataError(what + ": unsupported version " + std::to_string(version));
  const auto n = io::read_u32(is, what), d = io::read_u32(is, what);
  FeatureGrid grid{Matrix<float>(n, d)};
  for (auto& v : grid.values.values()) v = io::read_f32(is, what);
  io::expect_eof(is, what);
  return grid;
}

inline void save_feature_grid(const std::string& path, const FeatureGrid& grid) {
  auto os = io::open_out(path, "feature file");
  write_feature_grid(os, grid);
}

inline FeatureGrid load_feature_grid(const std::string& path) {
  auto is = io::open_in(path, "feature file");
  return read_feature_grid(is);
}

// Reads precomputed grids: the source id is a path to a .kcfg file. The
// declared shape is fixed at construction (e.g. 196 x 4096 for CLIP grids).
class FeatureFileExtractor : public FeatureExtractor {
 public:
  explicit FeatureFileExtractor(GridShape shape) : shape_(shape) {}

  std::string id() const override {
    return "feature-file-" + std::to_string(shape_.cells) + "x" + std::to_string(shape_.dim);
  }
  GridShape output_shape(const ImageTensor&) const override { return shape_; }
  Matrix<float> compute(const ImageTensor&, const std::string& source) const override {
    if (source.empty()) throw ExtractorError("feature-file extractor needs a source path");
    return load_feature_grid(source).values;
  }

 private:
  GridShape shape_;
};

// ---------------------------------------------------------------------------
// Sampling and k-means.

struct FeatureSample {
  Matrix<double> rows;
  std::size_t count() const { return rows.rows(); }
};

// Each row of every grid is kept independently with probability `rate`,
// visiting grids and rows in order.
inline FeatureSample sample_features(const std::vector<FeatureGrid>& grids, double rate, Rng& rng) {
  if (!(rate > 0.0 && rate <= 1.0)) throw ConfigError("sample_features: rate must be in (0, 1]");
  if (grids.empty()) throw DataError("sample_features: no feature grids");
  const std::size_t d = grids.front().dim();
  std::vector<double> kept;
  std::size_t count = 0;
  for (const auto& g : grids) {
    detail::check_shape(g.dim() == d, "sample_features: grids disagree on feature dimension");
    for (std::size_t i = 0; i < g.cells(); ++i) {
      if (rate < 1.0 && !rng.bernoulli(rate)) continue;
      for (float v : g.values.row(i)) kept.push_back(v);
      ++count;
    }
  }
  if (count == 0) throw DataError("sample_features: no rows sampled at rate " + std::to_string(rate));
  FeatureSample s{Matrix<double>(count, d)};
  std::copy(kept.begin(), kept.end(), s.rows.data());
  return s;
}

struct Codebook {
  static constexpr std::uint32_t kVersion = 1;

  Matrix<double> centroids;  // K x D_c
  std::string extractor;
  std::size_t sample_count = 0;
  std::vector<double> inertia;  // per Lloyd iteration
  std::size_t iterations = 0;
  bool converged = false;

  std::size_t size() const { return centroids.rows(); }
  std::size_t dim() const { return centroids.cols(); }
};

struct KMeansOptions {
  std::size_t k = 8192;
  std::size_t max_iters = 100;
  std::optional<Matrix<double>> initial_centroids;  // replaces k-means++ when set
};

class InsufficientSamples : public DataError {
 public:
  using DataError::DataError;
};

namespace detail {

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// Nearest centroid, ties to the lowest index.
inline std::pair<std::size_t, double> nearest(std::span<const double> x, const Matrix<double>& centroids) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < centroids.rows(); ++k) {
    const double d = squared_distance(x, centroids.row(k));
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return {best, best_d};
}

inline Matrix<double> kmeans_plus_plus(const Matrix<double>& x, std::size_t k, Rng& rng) {
  const std::size_t n = x.rows();
  Matrix<double> c(k, x.cols());
  auto first = x.row(rng.uniform_index(n));
  std::copy(first.begin(), first.end(), c.row(0).begin());
  std::vector<double> dist(n);
  for (std::size_t i = 0; i < n; ++i) dist[i] = squared_distance(x.row(i), c.row(0));
  for (std::size_t j = 1; j < k; ++j) {
    double total = 0.0;
    for (double d : dist) total += d;
    std::size_t pick = 0;
    if (total > 0.0) {
      double r = rng.uniform() * total;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        r -= dist[i];
        if (r < 0.0 && dist[i] > 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.uniform_index(n);
    }
    std::copy(x.row(pick).begin(), x.row(pick).end(), c.row(j).begin());
    for (std::size_t i = 0; i < n; ++i) dist[i] = std::min(dist[i], squared_distance(x.row(i), c.row(j)));
  }
  return c;
}

}  // namespace detail

// Lloyd iterations from k-means++ seeds. inertia[i] is the objective of the
// i-th assignment against the centroids it was computed from.
inline Codebook fit_kmeans(const FeatureSample& samples, const KMeansOptions& opts, Rng& rng,
                           Matrix<double>* initial_out = nullptr) {
  const auto& x = samples.rows;
  const std::size_t n = x.rows(), k = opts.k, d = x.cols();
  if (k < 1) throw ConfigError("fit_kmeans: K must be at least 1");
  if (n < k)
    throw InsufficientSamples("fit_kmeans: " + std::to_string(n) + " samples cannot seed " + std::to_string(k) +
                              " centroids");
  Matrix<double> c = opts.initial_centroids ? *opts.initial_centroids : detail::kmeans_plus_plus(x, k, rng);
  detail::check_shape(c.rows() == k && c.cols() == d, "fit_kmeans: initial centroids have the wrong shape");
  if (initial_out) *initial_out = c;

  Codebook cb;
  cb.sample_count = n;
  std::vector<std::size_t> assign(n, k), prev;
  std::vector<double> dist(n);
  for (std::size_t it = 0; it < opts.max_iters; ++it) {
    prev = assign;
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::tie(assign[i], dist[i]) = detail::nearest(x.row(i), c);
      inertia += dist[i];
    }
    cb.inertia.push_back(inertia);
    cb.iterations = it + 1;
    if (assign == prev) {
      cb.converged = true;
      break;
    }
    Matrix<double> sum(k, d);
    std::vector<std::size_t> members(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++members[assign[i]];
      auto dst = sum.row(assign[i]);
      auto src = x.row(i);
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
    std::vector<std::uint8_t> taken(n, 0);
    for (std::size_t j = 0; j < k; ++j) {
      if (members[j] > 0) {
        for (std::size_t e = 0; e < d; ++e) c(j, e) = sum(j, e) / double(members[j]);
        continue;
      }
      // Empty cluster: move it onto the sample farthest from its centroid.
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i)
        if (!taken[i] && dist[i] > far_d) {
          far_d = dist[i];
          far = i;
        }
      taken[far] = 1;
      dist[far] = 0.0;
      std::copy(x.row(far).begin(), x.row(far).end(), c.row(j).begin());
    }
  }
  cb.centroids = std::move(c);
  return cb;
}

inline Codebook fit_kmeans(const FeatureSample& samples, std::size_t k, std::size_t max_iters, Rng& rng) {
  KMeansOptions opts;
  opts.k = k;
  opts.max_iters = max_iters;
  return fit_kmeans(samples, opts, rng);
}

using TokenGrid = std::vector<std::uint32_t>;

inline TokenGrid tokenize(const FeatureGrid& grid, const Codebook& cb) {
  if (grid.dim() != cb.dim())
    throw ShapeError("tokenize: features have dimension " + std::to_string(grid.dim()) + ", codebook has " +
                     std::to_string(cb.dim()));
  TokenGrid tokens(grid.cells());
  std::vector<double> row(grid.dim());
  for (std::size_t i = 0; i < grid.cells(); ++i) {
    const auto src = grid.values.row(i);
    std::copy(src.begin(), src.end(), row.begin());
    tokens[i] = static_cast<std::uint32_t>(detail::nearest(row, cb.centroids).first);
  }
  return tokens;
}

// ---------------------------------------------------------------------------
// Codebook file: "KCCB" | version u32 | K u32 | D_c u32 | metadata length u32 |
// metadata JSON | centroids float32 row-major.

inline constexpr char kCodebookMagic[5] = "KCCB";

inline nlohmann::json codebook_metadata(const Codebook& cb) {
  return {{"extractor", cb.extractor},
          {"sample_count", cb.sample_count},
          {"iterations", cb.iterations},
          {"converged", cb.converged},
          {"inertia", cb.inertia}};
}

inline void write_codebook(std::ostream& os, const Codebook& cb) {
  io::write_magic(os, kCodebookMagic);
  io::write_u32(os, Codebook::kVersion);
  io::write_u32(os, static_cast<std::uint32_t>(cb.size()));
  io::write_u32(os, static_cast<std::uint32_t>(cb.dim()));
  const auto meta = codebook_metadata(cb).dump();
  io::write_u32(os, static_cast<std::uint32_t>(meta.size()));
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  for (double v : cb.centroids.values()) io::write_f32(os, static_cast<float>(v));
}

inline Codebook read_codebook(std::istream& is) {
  const std::string what = "codebook";
  io::expect_magic(is, kCodebookMagic, what);
  const auto version = io::read_u32(is, what);
  if (version != Codebook::kVersion)
    throw DataError(what + ": version " + std::to_string(version) + " is not supported (expected " +
                    std::to_string(Codebook::kVersion) + ")");
  const auto k = io::read_u32(is, what), d = io::read_u32(is, what);
  if (k == 0) throw DataError(what + ": empty codebook");
  std::string meta(io::read_u32(is, what), '\0');
  if (!io::read_exact(is, meta.data(), meta.size())) throw DataError(what + ": truncated metadata");
  Codebook cb;
  try {
    const auto j = nlohmann::json::parse(meta);
    cb.extractor = j.value("extractor", "");
    cb.sample_count = j.value("sample_count", std::size_t{0});
    cb.iterations = j.value("iterations", std::size_t{0});
    cb.converged = j.value("converged", false);
    cb.inertia = j.value("inertia", std::vector<double>{});
  } catch (const nlohmann::json::exception& e) {
    throw DataError(what + ": corrupt metadata (" + e.what() + ")");
  }
  cb.centroids = Matrix<double>(k, d);
  for (auto& v : cb.centroids.values()) v = io::read_f32(is, what);
  io::expect_eof(is, what);
  return cb;
}

inline void save_codebook(const std::string& path, const Codebook& cb) {
  auto os = io::open_out(path, "codebook");
  write_codebook(os, cb);
}

inline Codebook load_codebook(const std::string& path) {
  auto is = io::open_in(path, "codebook");
  return read_codebook(is);
}

// ---------------------------------------------------------------------------
// Token cache: "KCTK" | version u32 | image count u32 | N u16 | u16 tokens.

inline constexpr char kTokenCacheMagic[5] = "KCTK";
inline constexpr std::uint32_t kTokenCacheVersion = 1;

struct TokenCache {
  std::size_t tokens_per_image = 0;
  std::vector<TokenGrid> images;
};

inline void write_token_cache(std::ostream& os, const TokenCache& cache) {
  detail::check(cache.tokens_per_image < 65536, "token cache: too many tokens per image");
  io::write_magic(os, kTokenCacheMagic);
  io::write_u32(os, kTokenCacheVersion);
  io::write_u32(os, static_cast<std::uint32_t>(cache.images.size()));
  io::write_u16(os, static_cast<std::uint16_t>(cache.tokens_per_image));
  for (const auto& grid : cache.images) {
    detail::check_shape(grid.size() == cache.tokens_per_image, "token cache: grid length mismatch");
    for (auto t : grid) {
      if (t > 65535) throw std::out_of_range("token cache: token id " + std::to_string(t) + " does not fit in 16 bits");
      io::write_u16(os, static_cast<std::uint16_t>(t));
    }
  }
}

inline TokenCache read_token_cache(std::istream& is) {
  const std::string what = "token cache";
  io::expect_magic(is, kTokenCacheMagic, what);
  const auto version = io::read_u32(is, what);
  if (version != kTokenCacheVersion) throw DataError(what + ": unsupported version " + std::to_string(version));
  TokenCache cache;
  const auto count = io::read_u32(is, what);
  cache.tokens_per_image = io::read_u16(is, what);
  cache.images.assign(count, TokenGrid(cache.tokens_per_image));
  for (auto& grid : cache.images)
    for (auto& t : grid) t = io::read_u16(is, what);
  io::expect_eof(is, what);
  return cache;
}

inline void save_token_cache(const std::string& path, const TokenCache& cache) {
  auto os = io::open_out(path, "token cache");
  write_token_cache(os, cache);
}

inline TokenCache load_token_cache(const std::string& path) {
  auto is = io::open_in(path, "token cache");
  return read_token_cache(is);
}

// ---------------------------------------------------------------------------
// Codebook report: usage histogram, entropy, unused ids, and for each token
// the top-k cells (image, cell) closest to its centroid among cells assigned
// to it.

struct CellRef {
  std::size_t image = 0;
  std::size_t cell = 0;
  double distance = 0.0;
};

struct CodebookReport {
  std::vector<std::size_t> usage;
  std::size_t total = 0;
  double entropy = 0.0;  // natural log
  std::vector<std::size_t> unused;
  std::vector<std::vector<CellRef>> nearest;

  nlohmann::json to_json() const {
    nlohmann::json tokens = nlohmann::json::array();
    for (std::size_t k = 0; k < usage.size(); ++k) {
      nlohmann::json refs = nlohmann::json::array();
      for (const auto& r : nearest[k]) refs.push_back({{"image", r.image}, {"cell", r.cell}, {"distance", r.distance}});
      tokens.push_back({{"id", k},
                        {"count", usage[k]},
                        {"fraction", total ? double(usage[k]) / double(total) : 0.0},
                        {"nearest", refs}});
    }
    return {{"vocab_size", usage.size()},
            {"total_cells", total},
            {"entropy", entropy},
            {"max_entropy", std::log(double(usage.size()))},
            {"unused", unused},
            {"tokens", tokens}};
  }
};

inline CodebookReport report_codebook(const Codebook& cb, const std::vector<FeatureGrid>& grids, std::size_t top_k = 5) {
  CodebookReport rep;
  rep.usage.assign(cb.size(), 0);
  rep.nearest.resize(cb.size());
  std::vector<double> row;
  for (std::size_t img = 0; img < grids.size(); ++img) {
    const auto& g = grids[img];
    if (g.dim() != cb.dim()) throw ShapeError("report_codebook: feature dimension mismatch");
    row.resize(g.dim());
    for (std::size_t i = 0; i < g.cells(); ++i) {
      std::copy(g.values.row(i).begin(), g.values.row(i).end(), row.begin());
      const auto [tok, dist] = detail::nearest(row, cb.centroids);
      ++rep.usage[tok];
      ++rep.total;
      auto& list = rep.nearest[tok];
      list.push_back({img, i, dist});
      std::stable_sort(list.begin(), list.end(), [](const CellRef& a, const CellRef& b) { return a.distance < b.distance; });
      if (list.size() > top_k) list.pop_back();
    }
  }
  for (std::size_t k = 0; k < cb.size(); ++k) {
    if (rep.usage[k] == 0) {
      rep.unused.push_back(k);
      continue;
    }
    const double p = double(rep.usage[k]) / double(rep.total);
    rep.entropy -= p * std::log(p);
  }
  return rep;
}

}  // namespace mapet
