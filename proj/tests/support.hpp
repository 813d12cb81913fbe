#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include "omnimix/dataset.hpp"
#include "omnimix/trainer.hpp"

namespace omnimix::testing {

inline double psnr(const Tensor<float>& a, const Tensor<float>& b) {
  double se = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = (static_cast<double>(a[i]) - b[i]) / 2.0;  // [-1,1] → unit range
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.size());
  return mse == 0 ? 1e9 : 10 * std::log10(1.0 / mse);
}

template <typename T>
Tensor<T> uniform(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(v));
}

/// Smooth, horizontally periodic test panorama [3, h, 2h]; `phase` varies
/// the content, `cls` the colour balance.
template <typename T>
Tensor<T> synthetic_panorama(std::size_t h, double phase, std::size_t cls = 0) {
  const std::size_t w = 2 * h;
  std::vector<T> v(3 * h * w);
  const double pi = 3.14159265358979323846;
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < h; ++i) {
      const double lat = (i + 0.5) / h * pi;
      for (std::size_t j = 0; j < w; ++j) {
        const double lon = (j + 0.5) / w * 2 * pi;
        const double val = 0.5 * std::sin(lon * (1 + c) + phase) * std::sin(lat) +
                           0.3 * std::cos(2 * lat + 0.7 * c) + (cls ? 0.2 : -0.2) * (c == cls % 3);
        v[(c * h + i) * w + j] = static_cast<T>(std::clamp(val, -1.0, 1.0));
      }
    }
  }
  return Tensor<T>(Shape{3, h, w}, std::move(v));
}

/// In-memory dataset of synthetic panoramas, `per_class` per class.
inline Dataset<float> synthetic_dataset(std::size_t classes, std::size_t per_class,
                                        std::size_t h) {
  Dataset<float> ds;
  for (std::size_t c = 0; c < classes; ++c) {
    ds.class_names.push_back("class" + std::to_string(c));
    for (std::size_t k = 0; k < per_class; ++k) {
      ds.entries.push_back({"synthetic", c, synthetic_panorama<float>(h, 0.9 * k + 2.1 * c, c)});
    }
  }
  return ds;
}

/// Writes a dataset directory (class subdirectories of PNGs).
inline void write_dataset(const std::filesystem::path& root, const Dataset<float>& ds) {
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto dir = root / ds.class_names[ds.entries[i].label];
    std::filesystem::create_directories(dir);
    write_png((dir / ("img" + std::to_string(i) + ".png")).string(), ds.entries[i].image);
  }
}

/// Fast configuration for trainer and CLI tests: 16×32 canvases, 2 classes.
inline RunConfig small_run() {
  RunConfig c;
  auto& g = c.model.gen;
  g.blocks = 3;
  g.base_patch = 4;
  g.widths = {16, 8, 4};
  g.z_dim = 4;
  g.num_classes = 2;
  g.height = 16;
  g.layers_per_block = 1;
  c.model.disc.width = 8;
  c.model.disc.layers = 1;
  c.model.disc.patch = 4;
  c.train.batch_size = 2;
  c.train.iterations = 4;
  c.train.seed = 7;
  return c;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("omnimix_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

}  // namespace omnimix::testing
