#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "mapet/errors.hpp"
#include "mapet/matrix.hpp"

namespace mapet {

// H x W x C image, interleaved channels, row-major.
struct ImageTensor {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<float> pixels;

  ImageTensor() = default;
  ImageTensor(std::size_t h, std::size_t w, std::size_t c, float fill = 0.0f)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

  float& at(std::size_t y, std::size_t x, std::size_t ch) { return pixels[(y * width + x) * channels + ch]; }
  float at(std::size_t y, std::size_t x, std::size_t ch) const { return pixels[(y * width + x) * channels + ch]; }

  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;
};

template <typename S>
struct PatchGrid {
  std::size_t patch_size = 0;
  std::size_t grid_h = 0;  // patches per column
  std::size_t grid_w = 0;  // patches per row
  std::size_t channels = 0;
  Matrix<S> patches;  // N x (P*P*C), raster order

  std::size_t count() const { return patches.rows(); }
  std::size_t patch_dim() const { return patches.cols(); }
};

template <typename S>
struct EmbeddedSequence {
  Matrix<S> embeddings;  // N x D, raster order
  Matrix<S> pos_table;   // N x D

  std::size_t length() const { return embeddings.rows(); }
  std::size_t width() const { return embeddings.cols(); }
};

// Affine map in -> out, weight stored in x out so that y = x W + b.
template <typename S>
struct Linear {
  Matrix<S> weight;
  Matrix<S> bias;  // 1 x out

  std::size_t in_dim() const { return weight.rows(); }
  std::size_t out_dim() const { return weight.cols(); }

  Matrix<S> apply(const Matrix<S>& x) const {
    auto y = matmul(x, weight);
    for (std::size_t i = 0; i < y.rows(); ++i)
      for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += bias(0, j);
    return y;
  }
};

inline void validate_image(const ImageTensor& image, std::size_t patch_size) {
  detail::check(patch_size > 0, "patchify: patch size must be positive");
  detail::check(image.channels >= 1, "image must have at least one channel");
  detail::check_shape(image.pixels.size() == image.height * image.width * image.channels,
                      "image pixel buffer does not match its declared shape");
  if (image.height % patch_size != 0)
    throw ShapeError("patchify: height " + std::to_string(image.height) + " is not divisible by patch size " +
                     std::to_string(patch_size));
  if (image.width % patch_size != 0)
    throw ShapeError("patchify: width " + std::to_string(image.width) + " is not divisible by patch size " +
                     std::to_string(patch_size));
}

template <typename S = float>
PatchGrid<S> patchify(const ImageTensor& image, std::size_t patch_size) {
  validate_image(image, patch_size);
  const std::size_t p = patch_size, c = image.channels;
  PatchGrid<S> grid;
  grid.patch_size = p;
  grid.grid_h = image.height / p;
  grid.grid_w = image.width / p;
  grid.channels = c;
  grid.patches = Matrix<S>(grid.grid_h * grid.grid_w, p * p * c);
  for (std::size_t gy = 0; gy < grid.grid_h; ++gy) {
    for (std::size_t gx = 0; gx < grid.grid_w; ++gx) {
      auto dst = grid.patches.row(gy * grid.grid_w + gx);
      std::size_t k = 0;
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x)
          for (std::size_t ch = 0; ch < c; ++ch) dst[k++] = static_cast<S>(image.at(gy * p + y, gx * p + x, ch));
    }
  }
  return grid;
}

template <typename S>
ImageTensor unpatchify(const PatchGrid<S>& grid) {
  const std::size_t p = grid.patch_size, c = grid.channels;
  detail::check_shape(grid.patches.rows() == grid.grid_h * grid.grid_w && grid.patches.cols() == p * p * c,
                      "unpatchify: grid shape is inconsistent");
  ImageTensor image(grid.grid_h * p, grid.grid_w * p, c);
  for (std::size_t gy = 0; gy < grid.grid_h; ++gy) {
    for (std::size_t gx = 0; gx < grid.grid_w; ++gx) {
      auto src = grid.patches.row(gy * grid.grid_w + gx);
      std::size_t k = 0;
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x)
          for (std::size_t ch = 0; ch < c; ++ch) image.at(gy * p + y, gx * p + x, ch) = static_cast<float>(src[k++]);
    }
  }
  return image;
}

// embeddings[i] = projection(patch_i) + pos_table[i]
template <typename S>
EmbeddedSequence<S> embed(const PatchGrid<S>& grid, const Linear<S>& projection, const Matrix<S>& pos_table) {
  if (projection.in_dim() != grid.patch_dim())
    throw ShapeError("embed: projection expects input dimension " + std::to_string(projection.in_dim()) +
                     " but patches have length " + std::to_string(grid.patch_dim()));
  detail::check_shape(projection.bias.rows() == 1 && projection.bias.cols() == projection.out_dim(),
                      "embed: bias shape mismatch");
  if (pos_table.rows() != grid.count() || pos_table.cols() != projection.out_dim())
    throw ShapeError("embed: positional table is " + shape_string(pos_table.rows(), pos_table.cols()) + ", expected " +
                     shape_string(grid.count(), projection.out_dim()));
  EmbeddedSequence<S> seq;
  seq.embeddings = projection.apply(grid.patches);
  for (std::size_t i = 0; i < seq.embeddings.size(); ++i) seq.embeddings.data()[i] += pos_table.data()[i];
  seq.pos_table = pos_table;
  return seq;
}

// Per-channel (x - mean) / std, in place.
inline void normalize_channels(ImageTensor& image, std::span<const float> mean, std::span<const float> stddev) {
  detail::check(mean.size() == image.channels && stddev.size() == image.channels,
                "normalize_channels: statistics must have one entry per channel");
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    const std::size_t ch = i % image.channels;
    image.pixels[i] = (image.pixels[i] - mean[ch]) / stddev[ch];
  }
}

// ---------------------------------------------------------------------------
// Little-endian binary helpers shared by every file format in the library.

namespace io {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  std::array<unsigned char, 4> b{static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                 static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b.data()), 4);
}

inline void write_u16(std::ostream& os, std::uint16_t v) {
  std::array<unsigned char, 2> b{static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<const char*>(b.data()), 2);
}

inline void write_f32(std::ostream& os, float v) { write_u32(os, std::bit_cast<std::uint32_t>(v)); }

inline bool read_exact(std::istream& is, void* dst, std::size_t n) {
  is.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  return static_cast<std::size_t>(is.gcount()) == n;
}

inline std::uint32_t read_u32(std::istream& is, const std::string& what) {
  std::array<unsigned char, 4> b{};
  if (!read_exact(is, b.data(), 4)) throw DataError(what + ": truncated file");
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

inline std::uint16_t read_u16(std::istream& is, const std::string& what) {
  std::array<unsigned char, 2> b{};
  if (!read_exact(is, b.data(), 2)) throw DataError(what + ": truncated file");
  return static_cast<std::uint16_t>(b[0] | b[1] << 8);
}

inline float read_f32(std::istream& is, const std::string& what) { return std::bit_cast<float>(read_u32(is, what)); }

inline void write_magic(std::ostream& os, const char (&magic)[5]) { os.write(magic, 4); }

inline void expect_magic(std::istream& is, const char (&magic)[5], const std::string& what) {
  char got[4] = {};
  if (!read_exact(is, got, 4)) throw DataError(what + ": truncated file");
  if (std::memcmp(got, magic, 4) != 0) throw DataError(what + ": bad magic, expected " + std::string(magic, 4));
}

inline std::ifstream open_in(const std::string& path, const std::string& what) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError(what + ": cannot open " + path);
  return is;
}

inline std::ofstream open_out(const std::string& path, const std::string& what) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError(what + ": cannot create " + path);
  return os;
}

inline void expect_eof(std::istream& is, const std::string& what) {
  if (is.peek() != std::char_traits<char>::eof()) throw DataError(what + ": trailing bytes after payload");
}

}  // namespace io

// Raw tensor image: magic "MPIT", H, W, C (u32 LE), then H*W*C float32 LE.
inline constexpr char kRawImageMagic[5] = "MPIT";

inline void write_raw_image(std::ostream& os, const ImageTensor& image) {
  io::write_magic(os, kRawImageMagic);
  io::write_u32(os, static_cast<std::uint32_t>(image.height));
  io::write_u32(os, static_cast<std::uint32_t>(image.width));
  io::write_u32(os, static_cast<std::uint32_t>(image.channels));
  for (float v : image.pixels) io::write_f32(os, v);
}

inline ImageTensor read_raw_image(std::istream& is) {
  const std::string what = "raw image";
  io::expect_magic(is, kRawImageMagic, what);
  const auto h = io::read_u32(is, what), w = io::read_u32(is, what), c = io::read_u32(is, what);
  if (h == 0 || w == 0 || c == 0) throw DataError(what + ": zero-sized dimension");
  ImageTensor image(h, w, c);
  for (auto& v : image.pixels) v = io::read_f32(is, what);
  return image;
}

inline void save_raw_image(const std::string& path, const ImageTensor& image) {
  auto os = io::open_out(path, "raw image");
  write_raw_image(os, image);
}

inline ImageTensor load_raw_image(const std::string& path) {
  auto is = io::open_in(path, "raw image");
  return read_raw_image(is);
}

}  // namespace mapet
