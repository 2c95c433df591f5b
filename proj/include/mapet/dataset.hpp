#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <array>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "mapet/config.hpp"
#include "mapet/errors.hpp"
#include "mapet/patching.hpp"
#include "mapet/random.hpp"

namespace mapet {

struct LabeledImage {
  ImageTensor image;
  std::size_t label = 0;
  std::string source;  // file path, or "synthetic:<split>:<index>"
};

struct Dataset {
  std::vector<LabeledImage> items;
  std::size_t num_classes = 0;
  std::vector<std::string> class_names;

  std::size_t size() const { return items.size(); }
};

// Synthetic benchmark. A fixed bank of random prototype patches (one per grid
// position) is laid out by a class-specific permutation, so every class uses
// the same multiset of patches and only their arrangement carries the label.
// Images get pixel noise and occasional pairwise patch swaps.
struct SyntheticSpec {
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t channels = 3;
  std::size_t num_classes = 8;
  double noise = 0.05;
  double swap_prob = 0.05;
  std::uint64_t layout_seed = 1234;
};

class SyntheticGenerator {
 public:
  explicit SyntheticGenerator(SyntheticSpec spec) : spec_(spec) {
    detail::check(spec.patch_size > 0 && spec.image_size % spec.patch_size == 0,
                  "synthetic: image size must be a multiple of the patch size");
    detail::check(spec.num_classes >= 1, "synthetic: need at least one class");
    grid_ = spec.image_size / spec.patch_size;
    const std::size_t n = grid_ * grid_, dim = spec.patch_size * spec.patch_size * spec.channels;
    Rng rng(spec.layout_seed);
    prototypes_.assign(n, std::vector<float>(dim));
    for (auto& p : prototypes_) {
      // A base color plus texture, so prototypes differ in mean and pattern.
      std::vector<float> base(spec.channels);
      for (auto& b : base) b = float(rng.uniform(0.1, 0.9));
      for (std::size_t k = 0; k < dim; ++k) p[k] = base[k % spec.channels] + float(rng.uniform(-0.1, 0.1));
    }
    layouts_.resize(spec.num_classes);
    for (auto& layout : layouts_) {
      layout.resize(n);
      std::iota(layout.begin(), layout.end(), std::size_t{0});
      for (std::size_t i = n - 1; i > 0; --i) std::swap(layout[i], layout[rng.uniform_index(i + 1)]);
    }
  }

  const SyntheticSpec& spec() const { return spec_; }
  std::size_t num_patches() const { return grid_ * grid_; }
  const std::vector<std::size_t>& layout(std::size_t label) const { return layouts_.at(label); }

  ImageTensor render(std::size_t label, Rng& rng) const {
    auto layout = layouts_.at(label);
    const std::size_t n = layout.size();
    for (std::size_t i = 0; i < n; ++i)
      if (rng.bernoulli(spec_.swap_prob)) std::swap(layout[i], layout[rng.uniform_index(n)]);
    const std::size_t p = spec_.patch_size, c = spec_.channels;
    ImageTensor img(spec_.image_size, spec_.image_size, c);
    for (std::size_t cell = 0; cell < n; ++cell) {
      const auto& proto = prototypes_[layout[cell]];
      const std::size_t gy = cell / grid_, gx = cell % grid_;
      std::size_t k = 0;
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x)
          for (std::size_t ch = 0; ch < c; ++ch)
            img.at(gy * p + y, gx * p + x, ch) = proto[k++] + float(spec_.noise * rng.normal());
    }
    return img;
  }

  // Balanced labels (i mod classes), rendered from a split-specific stream.
  Dataset generate(std::size_t count, std::uint64_t seed, const std::string& split) const {
    Dataset ds;
    ds.num_classes = spec_.num_classes;
    for (std::size_t k = 0; k < spec_.num_classes; ++k) ds.class_names.push_back("class" + std::to_string(k));
    Rng rng(seed);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t label = i % spec_.num_classes;
      ds.items.push_back({render(label, rng), label, "synthetic:" + split + ":" + std::to_string(i)});
    }
    return ds;
  }

 private:
  SyntheticSpec spec_;
  std::size_t grid_ = 0;
  std::vector<std::vector<float>> prototypes_;
  std::vector<std::vector<std::size_t>> layouts_;
};

inline SyntheticSpec synthetic_spec(const RunConfig& c) {
  return {c.model.image_size, c.model.patch_size, c.model.channels, c.data.num_classes,
          c.data.noise,       c.data.swap_prob,   c.data.seed};
}

// Directory of class folders: root/<class>/<image>. Classes are the sorted
// sub-directory names; files are visited in sorted order. `loader` decodes a
// file (returning std::nullopt for files it does not recognize).
using ImageLoader = std::function<std::optional<ImageTensor>(const std::filesystem::path&)>;

inline Dataset load_folder_dataset(const std::string& root, const ImageLoader& loader, std::size_t image_size,
                                   std::size_t channels, const std::vector<std::string>& classes = {}) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw DataError("dataset: " + root + " is not a directory");
  Dataset ds;
  if (classes.empty()) {
    for (const auto& e : fs::directory_iterator(root))
      if (e.is_directory()) ds.class_names.push_back(e.path().filename().string());
    std::sort(ds.class_names.begin(), ds.class_names.end());
  } else {
    ds.class_names = classes;
  }
  if (ds.class_names.empty()) throw DataError("dataset: no class folders under " + root);
  ds.num_classes = ds.class_names.size();
  for (std::size_t label = 0; label < ds.class_names.size(); ++label) {
    const fs::path dir = fs::path(root) / ds.class_names[label];
    if (!fs::is_directory(dir)) throw DataError("dataset: missing class folder " + dir.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      auto img = loader(f);
      if (!img) continue;
      if (img->height != image_size || img->width != image_size || img->channels != channels)
        throw DataError("dataset: " + f.string() + " is " + std::to_string(img->height) + "x" +
                        std::to_string(img->width) + "x" + std::to_string(img->channels) + ", expected " +
                        std::to_string(image_size) + "x" + std::to_string(image_size) + "x" + std::to_string(channels));
      ds.items.push_back({std::move(*img), label, f.string()});
    }
  }
  if (ds.items.empty()) throw DataError("dataset: no readable images under " + root);
  return ds;
}

// ---------------------------------------------------------------------------
// Augmentations. All operate in place on [0, 1]-range pixels.

// Brightness, contrast and (for 3 channels) saturation factors drawn from
// [1 - s, 1 + s], applied in random order. Geometry is untouched so cached
// tokens stay aligned with their patches.
inline void color_jitter(ImageTensor& img, double strength, Rng& rng) {
  if (strength <= 0.0) return;
  const std::size_t c = img.channels, pixels = img.height * img.width;
  auto gray = [&](std::size_t px) {
    if (c != 3) return double(img.pixels[px * c]);
    return 0.299 * img.pixels[px * 3] + 0.587 * img.pixels[px * 3 + 1] + 0.114 * img.pixels[px * 3 + 2];
  };
  std::array<int, 3> order{0, 1, 2};
  for (std::size_t i = 2; i > 0; --i) std::swap(order[i], order[rng.uniform_index(i + 1)]);
  const std::array<double, 3> factor{rng.uniform(1 - strength, 1 + strength), rng.uniform(1 - strength, 1 + strength),
                                     rng.uniform(1 - strength, 1 + strength)};
  for (int op : order) {
    const double f = factor[op];
    if (op == 0) {
      for (auto& v : img.pixels) v = float(v * f);
    } else if (op == 1) {
      double mean = 0.0;
      for (std::size_t px = 0; px < pixels; ++px) mean += gray(px);
      mean /= double(pixels);
      for (auto& v : img.pixels) v = float((v - mean) * f + mean);
    } else if (c == 3) {
      for (std::size_t px = 0; px < pixels; ++px) {
        const double g = gray(px);
        for (std::size_t ch = 0; ch < 3; ++ch) img.pixels[px * 3 + ch] = float((img.pixels[px * 3 + ch] - g) * f + g);
      }
    }
    for (auto& v : img.pixels) v = std::clamp(v, 0.0f, 1.0f);
  }
}

// Random erasing: with probability p, one rectangle covering 2-33% of the area
// (aspect 0.3-3.3) is filled with standard-normal noise.
inline void random_erase(ImageTensor& img, double p, Rng& rng) {
  if (p <= 0.0 || !rng.bernoulli(p)) return;
  const double area = double(img.height * img.width);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(0.02, 1.0 / 3.0);
    const double aspect = std::exp(rng.uniform(std::log(0.3), std::log(1.0 / 0.3)));
    const auto h = static_cast<std::size_t>(std::lround(std::sqrt(target * aspect)));
    const auto w = static_cast<std::size_t>(std::lround(std::sqrt(target / aspect)));
    if (h == 0 || w == 0 || h >= img.height || w >= img.width) continue;
    const std::size_t y0 = rng.uniform_index(img.height - h + 1), x0 = rng.uniform_index(img.width - w + 1);
    for (std::size_t y = y0; y < y0 + h; ++y)
      for (std::size_t x = x0; x < x0 + w; ++x)
        for (std::size_t ch = 0; ch < img.channels; ++ch) img.at(y, x, ch) = float(rng.normal());
    return;
  }
}

// Beta(a, a) via two gamma draws (Marsaglia-Tsang), portable across platforms.
inline double sample_gamma(double shape, Rng& rng) {
  if (shape < 1.0) return sample_gamma(shape + 1.0, rng) * std::pow(rng.uniform() + 1e-300, 1.0 / shape);
  const double d = shape - 1.0 / 3.0, c = 1.0 / std::sqrt(9.0 * d);
  while (true) {
    double x, v;
    do {
      x = rng.normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = rng.uniform();
    if (std::log(u + 1e-300) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
  }
}

inline double sample_beta(double a, Rng& rng) {
  const double x = sample_gamma(a, rng), y = sample_gamma(a, rng);
  return x / (x + y);
}

// Mixup: a <- lam a + (1 - lam) b. Returns lam.
inline double mixup(ImageTensor& a, const ImageTensor& b, double alpha, Rng& rng) {
  const double lam = sample_beta(alpha, rng);
  for (std::size_t i = 0; i < a.pixels.size(); ++i) a.pixels[i] = float(lam * a.pixels[i] + (1 - lam) * b.pixels[i]);
  return lam;
}

// CutMix: a box from b is pasted into a. Returns the area fraction kept from a.
inline double cutmix(ImageTensor& a, const ImageTensor& b, double alpha, Rng& rng) {
  const double lam = sample_beta(alpha, rng);
  const double r = std::sqrt(1.0 - lam);
  const auto h = static_cast<std::size_t>(double(a.height) * r), w = static_cast<std::size_t>(double(a.width) * r);
  const std::size_t cy = rng.uniform_index(a.height), cx = rng.uniform_index(a.width);
  const std::size_t y0 = cy >= h / 2 ? cy - h / 2 : 0, y1 = std::min(a.height, cy + h / 2);
  const std::size_t x0 = cx >= w / 2 ? cx - w / 2 : 0, x1 = std::min(a.width, cx + w / 2);
  for (std::size_t y = y0; y < y1; ++y)
    for (std::size_t x = x0; x < x1; ++x)
      for (std::size_t ch = 0; ch < a.channels; ++ch) a.at(y, x, ch) = b.at(y, x, ch);
  return 1.0 - double((y1 - y0) * (x1 - x0)) / double(a.height * a.width);
}

}  // namespace mapet
