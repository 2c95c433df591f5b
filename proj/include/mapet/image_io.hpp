#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include "mapet/errors.hpp"
#include "mapet/patching.hpp"

namespace mapet {

// Binary PNM: P5 (gray) and P6 (RGB), maxval up to 65535. Pixels map to [0, 1].

namespace detail {

inline std::size_t pnm_field(std::istream& is, const std::string& path) {
  int ch = is.get();
  while (true) {
    while (ch != EOF && std::isspace(ch)) ch = is.get();
    if (ch != '#') break;
    while (ch != EOF && ch != '\n') ch = is.get();
  }
  if (ch == EOF || !std::isdigit(ch)) throw DataError("pnm: malformed header in " + path);
  std::size_t v = 0;
  while (ch != EOF && std::isdigit(ch)) {
    v = v * 10 + std::size_t(ch - '0');
    ch = is.get();
  }
  return v;  // the single whitespace after the field is consumed
}

}  // namespace detail

inline ImageTensor read_pnm(const std::string& path) {
  auto is = io::open_in(path, "pnm");
  char magic[2] = {};
  if (!io::read_exact(is, magic, 2) || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6'))
    throw DataError("pnm: " + path + " is not a binary P5/P6 file");
  const std::size_t c = magic[1] == '5' ? 1 : 3;
  const auto w = detail::pnm_field(is, path), h = detail::pnm_field(is, path), maxval = detail::pnm_field(is, path);
  if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) throw DataError("pnm: bad dimensions in " + path);
  ImageTensor img(h, w, c);
  const bool wide = maxval > 255;
  for (auto& v : img.pixels) {
    unsigned char b[2] = {};
    if (!io::read_exact(is, b, wide ? 2 : 1)) throw DataError("pnm: truncated pixel data in " + path);
    const unsigned raw = wide ? (unsigned(b[0]) << 8 | b[1]) : b[0];
    v = float(raw) / float(maxval);
  }
  return img;
}

inline void write_pnm(const std::string& path, const ImageTensor& img) {
  detail::check(img.channels == 1 || img.channels == 3, "pnm: only 1 or 3 channels can be written");
  auto os = io::open_out(path, "pnm");
  os << (img.channels == 1 ? "P5" : "P6") << "\n" << img.width << " " << img.height << "\n255\n";
  for (float v : img.pixels) {
    const auto b = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
    os.put(static_cast<char>(b));
  }
}

// Decodes .pgm/.ppm/.pnm and raw .mpit tensors; other extensions -> nullopt.
inline std::optional<ImageTensor> load_builtin_image(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  for (auto& ch : ext) ch = char(std::tolower(static_cast<unsigned char>(ch)));
  if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") return read_pnm(p.string());
  if (ext == ".mpit") return load_raw_image(p.string());
  return std::nullopt;
}

}  // namespace mapet
