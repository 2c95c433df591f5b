#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <sstream>

#include "mapet/patching.hpp"
#include "test_util.hpp"

using namespace mapet;

namespace {

ImageTensor random_image(std::size_t h, std::size_t w, std::size_t c, Rng& rng) {
  ImageTensor img(h, w, c);
  for (auto& v : img.pixels) v = float(rng.uniform(-1.0, 1.0));
  return img;
}

// Nested-loop extractor written against the definition, used as the oracle.
std::vector<float> reference_patch(const ImageTensor& img, std::size_t p, std::size_t index) {
  const std::size_t per_row = img.width / p;
  const std::size_t y0 = (index / per_row) * p, x0 = (index % per_row) * p;
  std::vector<float> out;
  for (std::size_t y = y0; y < y0 + p; ++y)
    for (std::size_t x = x0; x < x0 + p; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) out.push_back(img.at(y, x, c));
  return out;
}

}  // namespace

TEST(Patchify, Imagenet224GivesNinetySixPatches) {
  ImageTensor img(224, 224, 3);
  auto grid = patchify(img, 16);
  EXPECT_EQ(grid.count(), 196u);
  EXPECT_EQ(grid.patch_dim(), 768u);
  EXPECT_EQ(grid.grid_h, 14u);
  EXPECT_EQ(grid.grid_w, 14u);
}

TEST(Patchify, SinglePatchIsWholeImage) {
  Rng rng(1);
  auto img = random_image(4, 4, 3, rng);
  auto grid = patchify(img, 4);
  ASSERT_EQ(grid.count(), 1u);
  for (std::size_t k = 0; k < img.pixels.size(); ++k) EXPECT_EQ(grid.patches(0, k), img.pixels[k]);
}

TEST(Patchify, RasterIndexImageMatchesNestedLoopExtractor) {
  ImageTensor img(8, 8, 1);
  std::iota(img.pixels.begin(), img.pixels.end(), 0.0f);
  auto grid = patchify(img, 4);
  ASSERT_EQ(grid.count(), 4u);
  // patch 0 covers rows 0-3, cols 0-3
  const std::vector<float> expected0 = {0, 1, 2, 3, 8, 9, 10, 11, 16, 17, 18, 19, 24, 25, 26, 27};
  for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(grid.patches(0, k), expected0[k]);
  for (std::size_t i = 0; i < 4; ++i) {
    auto ref = reference_patch(img, 4, i);
    for (std::size_t k = 0; k < ref.size(); ++k) EXPECT_EQ(grid.patches(i, k), ref[k]) << "patch " << i;
  }
}

TEST(Patchify, RejectsIndivisibleDimensionsNamingTheAxis) {
  ImageTensor tall(10, 8, 1);
  try {
    patchify(tall, 4);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("height"), std::string::npos);
  }
  ImageTensor wide(8, 10, 1);
  try {
    patchify(wide, 4);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("width"), std::string::npos);
  }
}

TEST(Patchify, RoundTripAndMultisetPreservedOnRandomImages) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t p = 1 + rng.uniform_index(4);
    const std::size_t h = p * (1 + rng.uniform_index(5)), w = p * (1 + rng.uniform_index(5));
    const std::size_t c = 1 + rng.uniform_index(3);
    auto img = random_image(h, w, c, rng);
    auto grid = patchify(img, p);
    EXPECT_EQ(grid.count(), (h / p) * (w / p));
    EXPECT_EQ(unpatchify(grid), img);
    auto a = img.pixels;
    auto b = grid.patches.values();
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    EXPECT_EQ(a, b);
  }
}

TEST(Embed, ZeroProjectionYieldsPositionalRows) {
  Rng rng(3);
  auto grid = patchify<double>(random_image(8, 8, 2, rng), 4);
  Linear<double> proj{Matrix<double>(32, 5), Matrix<double>(1, 5)};
  auto pos = test::random_matrix<double>(4, 5, rng);
  auto seq = embed(grid, proj, pos);
  EXPECT_EQ(seq.embeddings, pos);
  EXPECT_EQ(seq.pos_table, pos);
}

TEST(Embed, IdentityProjectionOnSinglePatch) {
  Rng rng(4);
  auto grid = patchify<double>(random_image(2, 2, 1, rng), 2);
  Linear<double> proj{Matrix<double>(4, 4), Matrix<double>(1, 4)};
  for (std::size_t i = 0; i < 4; ++i) proj.weight(i, i) = 1.0;
  auto pos = test::random_matrix<double>(1, 4, rng);
  auto seq = embed(grid, proj, pos);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(seq.embeddings(0, j), grid.patches(0, j) + pos(0, j));
}

TEST(Embed, MatchesDenseMatmulOracle) {
  Rng rng(5);
  auto grid = patchify<double>(random_image(8, 8, 3, rng), 4);
  Linear<double> proj{test::random_matrix<double>(48, 6, rng), test::random_matrix<double>(1, 6, rng)};
  auto pos = test::random_matrix<double>(4, 6, rng);
  auto seq = embed(grid, proj, pos);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t d = 0; d < 6; ++d) {
      double acc = proj.bias(0, d) + pos(i, d);
      for (std::size_t k = 0; k < 48; ++k) acc += grid.patches(i, k) * proj.weight(k, d);
      EXPECT_NEAR(seq.embeddings(i, d), acc, 1e-12);
    }
}

TEST(Embed, RejectsMismatchedProjection) {
  Rng rng(6);
  auto grid = patchify<double>(random_image(8, 8, 1, rng), 4);
  Linear<double> proj{Matrix<double>(15, 3), Matrix<double>(1, 3)};
  EXPECT_THROW(embed(grid, proj, Matrix<double>(4, 3)), ShapeError);
  Linear<double> ok{Matrix<double>(16, 3), Matrix<double>(1, 3)};
  EXPECT_THROW(embed(grid, ok, Matrix<double>(5, 3)), ShapeError);
}

TEST(Embed, PermutationEquivariantWithPermutedPositions) {
  Rng rng(8);
  auto grid = patchify<double>(random_image(12, 12, 1, rng), 4);
  Linear<double> proj{test::random_matrix<double>(16, 4, rng), test::random_matrix<double>(1, 4, rng)};
  auto pos = test::random_matrix<double>(9, 4, rng);
  auto base = embed(grid, proj, pos);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<std::size_t> sigma(9);
    std::iota(sigma.begin(), sigma.end(), 0u);
    for (std::size_t i = 8; i > 0; --i) std::swap(sigma[i], sigma[rng.uniform_index(i + 1)]);
    PatchGrid<double> permuted = grid;
    permuted.patches = gather_rows(grid.patches, std::span<const std::size_t>(sigma));
    auto seq = embed(permuted, proj, gather_rows(pos, std::span<const std::size_t>(sigma)));
    EXPECT_EQ(seq.embeddings, gather_rows(base.embeddings, std::span<const std::size_t>(sigma)));
  }
}

TEST(RawImage, RoundTripAndCorruption) {
  Rng rng(9);
  auto img = random_image(4, 6, 3, rng);
  std::stringstream ss;
  write_raw_image(ss, img);
  const auto bytes = ss.str();
  EXPECT_EQ(bytes.size(), 16u + 4 * 72);
  EXPECT_EQ(bytes.substr(0, 4), "MPIT");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 4);  // H, little-endian
  std::stringstream in(bytes);
  EXPECT_EQ(read_raw_image(in), img);
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_raw_image(truncated), DataError);
}

TEST(Normalize, PerChannelMeanStd) {
  ImageTensor img(1, 2, 2);
  img.pixels = {1, 10, 3, 30};
  const float mean[] = {2, 20}, sd[] = {1, 10};
  normalize_channels(img, mean, sd);
  EXPECT_EQ(img.pixels, (std::vector<float>{-1, -1, 1, 1}));
}
