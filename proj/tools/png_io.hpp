#pragma once

#include <optional>
#include <filesystem>
#include <string>

#include "mapet/patching.hpp"

namespace mapet::tools {

// 8-bit gray or RGB PNG. Palettes are expanded, alpha is dropped and 16-bit
// samples are reduced to 8 bits.
ImageTensor read_png(const std::string& path);
void write_png(const std::string& path, const ImageTensor& img);

// PNG plus the formats handled by load_builtin_image.
std::optional<ImageTensor> load_image(const std::filesystem::path& p);

}  // namespace mapet::tools
