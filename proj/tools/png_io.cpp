#include "png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

#include "mapet/errors.hpp"
#include "mapet/image_io.hpp"

namespace mapet::tools {

namespace {

struct File {
  std::FILE* f;
  ~File() {
    if (f) std::fclose(f);
  }
};

[[noreturn]] void png_fail(png_structp, png_const_charp msg) { throw DataError(std::string("png: ") + msg); }
void png_warn(png_structp, png_const_charp) {}

}  // namespace

ImageTensor read_png(const std::string& path) {
  File file{std::fopen(path.c_str(), "rb")};
  if (!file.f) throw DataError("png: cannot open " + path);
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, file.f) != 8 || png_sig_cmp(sig, 0, 8)) throw DataError("png: " + path + " is not a PNG file");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  std::unique_ptr<png_struct, void (*)(png_structp)> guard(png, [](png_structp p) { png_destroy_read_struct(&p, nullptr, nullptr); });
  std::vector<png_bytep> rows;
  std::vector<unsigned char> buf;
  ImageTensor img;
  try {
    png_init_io(png, file.f);
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    const auto w = png_get_image_width(png, info), h = png_get_image_height(png, info);
    const auto ch = png_get_channels(png, info);
    if (ch != 1 && ch != 3) throw DataError("png: " + path + " has " + std::to_string(ch) + " channels");
    buf.resize(std::size_t(w) * h * ch);
    for (std::size_t y = 0; y < h; ++y) rows.push_back(buf.data() + y * w * ch);
    png_read_image(png, rows.data());
    img = ImageTensor(h, w, ch);
    std::transform(buf.begin(), buf.end(), img.pixels.begin(), [](unsigned char b) { return float(b) / 255.0f; });
  } catch (...) {
    png_destroy_info_struct(png, &info);
    throw;
  }
  png_destroy_info_struct(png, &info);
  return img;
}

void write_png(const std::string& path, const ImageTensor& img) {
  if (img.channels != 1 && img.channels != 3) throw DataError("png: can only write 1 or 3 channels");
  File file{std::fopen(path.c_str(), "wb")};
  if (!file.f) throw DataError("png: cannot create " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  std::vector<unsigned char> buf(img.pixels.size());
  std::transform(img.pixels.begin(), img.pixels.end(), buf.begin(),
                 [](float v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); });
  std::vector<png_bytep> rows;
  for (std::size_t y = 0; y < img.height; ++y) rows.push_back(buf.data() + y * img.width * img.channels);
  try {
    png_init_io(png, file.f);
    png_set_IHDR(png, info, png_uint_32(img.width), png_uint_32(img.height), 8,
                 img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
}

std::optional<ImageTensor> load_image(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return char(std::tolower(c)); });
  if (ext == ".png") return read_png(p.string());
  return load_builtin_image(p);
}

}  // namespace mapet::tools
