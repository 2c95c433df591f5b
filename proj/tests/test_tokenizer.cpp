#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "mapet/tokenizer.hpp"
#include "test_util.hpp"

using namespace mapet;

namespace {

FeatureGrid random_grid(std::size_t n, std::size_t d, Rng& rng, double scale = 1.0) {
  return {test::random_matrix<float>(n, d, rng, scale)};
}

FeatureSample as_sample(const Matrix<double>& m) { return {m}; }

// Exhaustive nearest-centroid scan, written independently of tokenize().
std::vector<std::uint32_t> brute_force_tokens(const FeatureGrid& g, const Matrix<double>& c) {
  std::vector<std::uint32_t> out;
  for (std::size_t i = 0; i < g.cells(); ++i) {
    std::vector<double> d(c.rows());
    for (std::size_t k = 0; k < c.rows(); ++k)
      for (std::size_t e = 0; e < c.cols(); ++e) d[k] += std::pow(double(g.values(i, e)) - c(k, e), 2);
    out.push_back(static_cast<std::uint32_t>(std::min_element(d.begin(), d.end()) - d.begin()));
  }
  return out;
}

class BadExtractor : public FeatureExtractor {
 public:
  explicit BadExtractor(float fill) : fill_(fill) {}
  std::string id() const override { return "bad"; }
  GridShape output_shape(const ImageTensor&) const override { return {4, 3}; }
  Matrix<float> compute(const ImageTensor&, const std::string&) const override {
    return std::isfinite(fill_) ? Matrix<float>(4, 2, fill_) : Matrix<float>(4, 3, fill_);
  }

 private:
  float fill_;
};

}  // namespace

TEST(Extractor, ToyProjectionMatchesPatchMatmul) {
  Rng rng(1);
  ImageTensor image(8, 8, 3);
  for (auto& v : image.pixels) v = float(rng.uniform());
  ToyExtractor ex(4, 3, 6, 7);
  const auto grid = extract_features(image, ex);
  ASSERT_EQ(grid.cells(), 4u);
  ASSERT_EQ(grid.dim(), 6u);
  const auto& w = ex.projection().weight;
  for (std::size_t cell = 0; cell < 4; ++cell) {
    const std::size_t gy = cell / 2, gx = cell % 2;
    for (std::size_t o = 0; o < 6; ++o) {
      double acc = 0.0;
      std::size_t k = 0;
      for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x)
          for (std::size_t ch = 0; ch < 3; ++ch) acc += double(image.at(gy * 4 + y, gx * 4 + x, ch)) * w(k++, o);
      EXPECT_NEAR(grid.values(cell, o), acc, 1e-5);
    }
  }
}

TEST(Extractor, DeclaredShapeAndFiniteValuesAreEnforced) {
  ImageTensor image(4, 4, 1);
  EXPECT_THROW(extract_features(image, BadExtractor(1.0f)), ShapeError);
  EXPECT_THROW(extract_features(image, BadExtractor(NAN)), ExtractorError);
}

TEST(Extractor, FeatureFileRoundTripAndClipShape) {
  Rng rng(2);
  const auto grid = random_grid(196, 4096, rng);
  const std::string path = ::testing::TempDir() + "/clip_grid.kcfg";
  save_feature_grid(path, grid);
  EXPECT_EQ(load_feature_grid(path).values, grid.values);
  FeatureFileExtractor ex({196, 4096});
  const auto loaded = extract_features(ImageTensor(224, 224, 3), ex, path);
  EXPECT_EQ(loaded.cells(), 196u);
  EXPECT_EQ(loaded.dim(), 4096u);
  FeatureFileExtractor wrong({196, 768});
  EXPECT_THROW(extract_features(ImageTensor(224, 224, 3), wrong, path), ShapeError);
  EXPECT_THROW(ex.compute(ImageTensor(1, 1, 1), ""), ExtractorError);
}

TEST(Extractor, TruncatedFeatureFileIsRejected) {
  Rng rng(3);
  std::stringstream ss;
  write_feature_grid(ss, random_grid(3, 2, rng));
  const auto bytes = ss.str();
  std::stringstream cut(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_feature_grid(cut), DataError);
}

TEST(Sampling, FullRateKeepsAllRowsInOrder) {
  Rng rng(4);
  std::vector<FeatureGrid> grids{random_grid(3, 2, rng), random_grid(2, 2, rng)};
  const auto s = sample_features(grids, 1.0, rng);
  ASSERT_EQ(s.count(), 5u);
  EXPECT_EQ(s.rows(0, 0), double(grids[0].values(0, 0)));
  EXPECT_EQ(s.rows(4, 1), double(grids[1].values(1, 1)));
}

TEST(Sampling, TwoPercentIsBinomial) {
  std::vector<FeatureGrid> grids(1000, FeatureGrid{Matrix<float>(1000, 1)});
  Rng rng(5);
  const auto s = sample_features(grids, 0.02, rng);
  const double mean = 1e6 * 0.02, sd = std::sqrt(1e6 * 0.02 * 0.98);
  EXPECT_LE(std::abs(double(s.count()) - mean), 3 * sd);
}

TEST(Sampling, Errors) {
  Rng rng(6);
  std::vector<FeatureGrid> one{FeatureGrid{Matrix<float>(1, 2)}};
  EXPECT_THROW(sample_features(one, 1e-12, rng), DataError);
  EXPECT_THROW(sample_features(one, 0.0, rng), ConfigError);
  EXPECT_THROW(sample_features(one, 1.5, rng), ConfigError);
}

TEST(KMeans, SingleCentroidIsTheMean) {
  Rng rng(7);
  auto x = test::random_matrix<double>(500, 4, rng, 3.0);
  const auto cb = fit_kmeans(as_sample(x), 1, 100, rng);
  for (std::size_t e = 0; e < 4; ++e) {
    double mean = 0.0;
    for (std::size_t i = 0; i < 500; ++i) mean += x(i, e);
    EXPECT_NEAR(cb.centroids(0, e), mean / 500.0, 1e-9);
  }
}

TEST(KMeans, TwoBlobsMatchExhaustiveOptimum) {
  Rng rng(8);
  Matrix<double> x(12, 2);
  for (std::size_t i = 0; i < 12; ++i) {
    const double cx = i < 6 ? -5.0 : 5.0;
    x(i, 0) = cx + rng.uniform(-0.5, 0.5);
    x(i, 1) = 2.0 + rng.uniform(-0.5, 0.5);
  }
  // Best 2-partition over all 2^12 labelings.
  double best = INFINITY;
  std::array<std::array<double, 2>, 2> best_c{};
  for (unsigned mask = 1; mask + 1 < (1u << 12); ++mask) {
    std::array<std::array<double, 2>, 2> c{};
    std::array<int, 2> cnt{};
    for (std::size_t i = 0; i < 12; ++i) {
      const int g = (mask >> i) & 1;
      ++cnt[g];
      c[g][0] += x(i, 0);
      c[g][1] += x(i, 1);
    }
    for (int g = 0; g < 2; ++g) c[g][0] /= cnt[g], c[g][1] /= cnt[g];
    double cost = 0.0;
    for (std::size_t i = 0; i < 12; ++i) {
      const int g = (mask >> i) & 1;
      cost += std::pow(x(i, 0) - c[g][0], 2) + std::pow(x(i, 1) - c[g][1], 2);
    }
    if (cost < best) best = cost, best_c = c;
  }
  const auto cb = fit_kmeans(as_sample(x), 2, 100, rng);
  EXPECT_NEAR(cb.inertia.back(), best, 1e-9);
  for (std::size_t k = 0; k < 2; ++k) {
    const auto& want = best_c[0][0] * cb.centroids(k, 0) > 0 ? best_c[0] : best_c[1];
    EXPECT_NEAR(cb.centroids(k, 0), want[0], 1e-9);
    EXPECT_NEAR(cb.centroids(k, 1), want[1], 1e-9);
  }
}

TEST(KMeans, EverySampleItsOwnCentroid) {
  Rng rng(9);
  auto x = test::random_matrix<double>(10, 3, rng);
  const auto cb = fit_kmeans(as_sample(x), 10, 100, rng);
  EXPECT_EQ(cb.inertia.back(), 0.0);
  EXPECT_THROW(fit_kmeans(as_sample(x), 11, 100, rng), InsufficientSamples);
}

TEST(KMeans, InertiaIsNonIncreasingAndConvergenceIsAFixpoint) {
  Rng rng(10);
  auto x = test::random_matrix<double>(1000, 2, rng);
  const auto cb = fit_kmeans(as_sample(x), 8, 100, rng);
  ASSERT_GE(cb.inertia.size(), 2u);
  for (std::size_t i = 1; i < cb.inertia.size(); ++i) EXPECT_LE(cb.inertia[i], cb.inertia[i - 1]);
  ASSERT_TRUE(cb.converged);
  // Fixpoint: centroids are the means of their own assignments.
  Matrix<double> sum(8, 2);
  std::vector<int> cnt(8);
  for (std::size_t i = 0; i < 1000; ++i) {
    const auto k = detail::nearest(x.row(i), cb.centroids).first;
    ++cnt[k];
    sum(k, 0) += x(i, 0);
    sum(k, 1) += x(i, 1);
  }
  for (std::size_t k = 0; k < 8; ++k) {
    ASSERT_GT(cnt[k], 0);
    EXPECT_NEAR(sum(k, 0) / cnt[k], cb.centroids(k, 0), 1e-12);
    EXPECT_NEAR(sum(k, 1) / cnt[k], cb.centroids(k, 1), 1e-12);
  }
}

TEST(KMeans, DeterministicPerSeed) {
  Rng data(11);
  auto x = test::random_matrix<double>(300, 3, data);
  Rng a(12), b(12);
  EXPECT_EQ(fit_kmeans(as_sample(x), 5, 50, a).centroids, fit_kmeans(as_sample(x), 5, 50, b).centroids);
}

TEST(KMeans, SampleOrderIrrelevantWithReplayedInitialization) {
  Rng rng(13);
  auto x = test::random_matrix<double>(400, 2, rng);
  KMeansOptions opts;
  opts.k = 6;
  Matrix<double> init;
  const auto first = fit_kmeans(as_sample(x), opts, rng, &init);
  std::vector<std::size_t> order(400);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = 399; i > 0; --i) std::swap(order[i], order[rng.uniform_index(i + 1)]);
  opts.initial_centroids = init;
  const auto second = fit_kmeans(as_sample(gather_rows(x, std::span<const std::size_t>(order))), opts, rng);
  EXPECT_LT(test::max_rel_diff(first.centroids, second.centroids), 1e-12);
}

TEST(KMeans, EmptyClusterIsReseeded) {
  Matrix<double> x{{0.0}, {0.1}, {10.0}, {10.1}};
  KMeansOptions opts;
  opts.k = 2;
  opts.initial_centroids = Matrix<double>{{0.0}, {100.0}};  // second starts far from everything
  Rng rng(14);
  const auto cb = fit_kmeans(as_sample(x), opts, rng);
  EXPECT_NE(cb.centroids(0, 0), cb.centroids(1, 0));
  EXPECT_NEAR(cb.inertia.back(), 2 * 0.05 * 0.05 * 2, 1e-12);
}

TEST(Tokenize, MatchesExhaustiveScan) {
  Rng rng(15);
  for (int trial = 0; trial < 10; ++trial) {
    Codebook cb;
    cb.centroids = test::random_matrix<double>(4, 3, rng);
    const auto g = random_grid(5, 3, rng);
    EXPECT_EQ(tokenize(g, cb), brute_force_tokens(g, cb.centroids));
    EXPECT_EQ(tokenize(g, cb), tokenize(g, cb));
  }
}

TEST(Tokenize, DegenerateCases) {
  Rng rng(16);
  Codebook one;
  one.centroids = Matrix<double>(1, 2, 0.5);
  EXPECT_EQ(tokenize(random_grid(6, 2, rng), one), TokenGrid(6, 0));
  Codebook cb;
  cb.centroids = Matrix<double>{{0, 0}, {1, 0}, {0, 1}};
  FeatureGrid at{Matrix<float>{{0, 1}, {1, 0}, {0, 0}}};
  EXPECT_EQ(tokenize(at, cb), (TokenGrid{2, 1, 0}));
  FeatureGrid tie{Matrix<float>{{0.5f, 0.0f}}};  // equidistant from 0 and 1
  EXPECT_EQ(tokenize(tie, cb), TokenGrid{0});
  EXPECT_THROW(tokenize(FeatureGrid{Matrix<float>(2, 3)}, cb), ShapeError);
}

TEST(Tokenize, NoStrictlyCloserCentroid) {
  Rng rng(17);
  Codebook cb;
  cb.centroids = test::random_matrix<double>(16, 4, rng);
  const auto g = random_grid(50, 4, rng);
  const auto tokens = tokenize(g, cb);
  for (std::size_t i = 0; i < 50; ++i) {
    std::vector<double> row(g.values.row(i).begin(), g.values.row(i).end());
    const double mine = detail::squared_distance(row, cb.centroids.row(tokens[i]));
    for (std::size_t k = 0; k < 16; ++k) EXPECT_GE(detail::squared_distance(row, cb.centroids.row(k)), mine);
  }
}

TEST(CodebookFile, RoundTripAtStoredPrecision) {
  Rng rng(18);
  auto x = test::random_matrix<double>(200, 3, rng);
  auto cb = fit_kmeans(as_sample(x), 4, 100, rng);
  cb.extractor = "toy";
  const std::string path = ::testing::TempDir() + "/cb.kccb";
  save_codebook(path, cb);
  const auto back = load_codebook(path);
  EXPECT_EQ(back.centroids, cb.centroids.cast<float>().cast<double>());
  EXPECT_EQ(back.extractor, "toy");
  EXPECT_EQ(back.inertia, cb.inertia);
  EXPECT_EQ(back.sample_count, 200u);
  // A second round trip is exact.
  save_codebook(path, back);
  EXPECT_EQ(load_codebook(path).centroids, back.centroids);
}

TEST(CodebookFile, HeaderFieldsAtFullVocabularySize) {
  Codebook cb;
  cb.centroids = Matrix<double>(8192, 4);
  std::stringstream ss;
  write_codebook(ss, cb);
  ss.seekg(4);
  EXPECT_EQ(io::read_u32(ss, "t"), Codebook::kVersion);
  EXPECT_EQ(io::read_u32(ss, "t"), 8192u);
  EXPECT_EQ(io::read_u32(ss, "t"), 4u);
}

TEST(CodebookFile, CorruptAndVersionErrors) {
  Codebook cb;
  cb.centroids = Matrix<double>(2, 2, 1.0);
  std::stringstream ss;
  write_codebook(ss, cb);
  const auto bytes = ss.str();
  std::stringstream truncated(bytes.substr(0, bytes.size() - 1));
  EXPECT_THROW(read_codebook(truncated), DataError);
  auto bumped = bytes;
  bumped[4] = 9;
  std::stringstream future(bumped);
  EXPECT_THROW(read_codebook(future), DataError);
  std::stringstream junk("KCCQ....");
  EXPECT_THROW(read_codebook(junk), DataError);
}

TEST(TokenCacheFile, RoundTripAndLimits) {
  TokenCache cache{4, {{0, 1, 2, 65535}, {3, 3, 3, 3}}};
  std::stringstream ss;
  write_token_cache(ss, cache);
  const auto back = read_token_cache(ss);
  EXPECT_EQ(back.tokens_per_image, 4u);
  EXPECT_EQ(back.images, cache.images);
  TokenCache wide{1, {{65536}}};
  std::stringstream out;
  EXPECT_THROW(write_token_cache(out, wide), std::out_of_range);
}

TEST(Report, SingleTokenHasFullUsage) {
  Rng rng(19);
  Codebook cb;
  cb.centroids = Matrix<double>(1, 2);
  const auto rep = report_codebook(cb, {random_grid(7, 2, rng)});
  EXPECT_EQ(rep.usage, std::vector<std::size_t>{7});
  EXPECT_EQ(rep.entropy, 0.0);
  EXPECT_TRUE(rep.unused.empty());
  EXPECT_EQ(rep.to_json()["tokens"][0]["fraction"].get<double>(), 1.0);
}

TEST(Report, BalancedBlobsHaveNearMaximalEntropyAndUnusedAreListed) {
  Rng rng(20);
  Codebook cb;
  cb.centroids = Matrix<double>{{0, 0}, {10, 0}, {0, 10}, {10, 10}, {100, 100}};
  std::vector<FeatureGrid> grids;
  for (int img = 0; img < 10; ++img) {
    FeatureGrid g{Matrix<float>(40, 2)};
    for (std::size_t i = 0; i < 40; ++i) {
      g.values(i, 0) = float(10 * ((i / 2) % 2) + rng.uniform(-1, 1));
      g.values(i, 1) = float(10 * (i % 2) + rng.uniform(-1, 1));
    }
    grids.push_back(g);
  }
  const auto rep = report_codebook(cb, grids, 3);
  EXPECT_EQ(rep.unused, std::vector<std::size_t>{4});
  EXPECT_NEAR(rep.entropy, std::log(4.0), 1e-12);
  EXPECT_EQ(rep.nearest[0].size(), 3u);
  EXPECT_LE(rep.nearest[0][0].distance, rep.nearest[0][1].distance);
  const auto j = rep.to_json();
  EXPECT_EQ(j["unused"].size(), 1u);
  EXPECT_EQ(j["total_cells"].get<std::size_t>(), 400u);
}
