#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "omnimix/config.hpp"
#include "omnimix/geometry.hpp"
#include "omnimix/image_io.hpp"

// Dataset directory layout:
//
//   root/
//     classes.txt        optional: one class name per line, fixes label order
//     manifest.txt       optional: "<relative png path> <class name>" per line
//     <class name>/*.png equirectangular images, width = 2 · height
//
// Without classes.txt, labels follow the sorted subdirectory names. Without
// manifest.txt, every *.png inside a class directory is used, sorted by name.

namespace omnimix {

template <typename T>
struct DatasetEntry {
  std::string path;
  std::size_t label = 0;
  Tensor<T> image;  // [3, H, 2H] in [-1, 1], already at the configured size
};

template <typename T>
struct Dataset {
  std::vector<std::string> class_names;
  std::vector<DatasetEntry<T>> entries;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
};

namespace detail {

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(f, line)) {
    line = trim(line);
    if (!line.empty() && line[0] != '#') lines.push_back(line);
  }
  return lines;
}

}  // namespace detail

/// Loads an equirectangular PNG and resizes it to [3, height, 2·height].
template <typename T>
Tensor<T> load_equirect(const std::string& path, std::size_t height) {
  auto image = read_png<T>(path);
  if (image.dim(2) != 2 * image.dim(1)) {
    throw DataError(path + " is " + std::to_string(image.dim(2)) + "x" +
                    std::to_string(image.dim(1)) + ", expected a 2:1 equirectangular image");
  }
  return resize_canvas(image, height, 2 * height);
}

template <typename T>
Dataset<T> load_dataset(const std::string& root_dir, std::size_t height) {
  namespace fs = std::filesystem;
  const fs::path root(root_dir);
  if (!fs::is_directory(root)) throw DataError("dataset directory " + root_dir + " not found");

  Dataset<T> ds;
  if (fs::exists(root / "classes.txt")) {
    ds.class_names = detail::read_lines(root / "classes.txt");
  } else {
    for (const auto& e : fs::directory_iterator(root)) {
      if (e.is_directory()) ds.class_names.push_back(e.path().filename().string());
    }
    std::sort(ds.class_names.begin(), ds.class_names.end());
  }
  auto label_of = [&](const std::string& name) {
    auto it = std::find(ds.class_names.begin(), ds.class_names.end(), name);
    if (it == ds.class_names.end()) throw DataError("unknown class '" + name + "'");
    return static_cast<std::size_t>(it - ds.class_names.begin());
  };

  std::vector<std::pair<std::string, std::size_t>> files;
  if (fs::exists(root / "manifest.txt")) {
    for (const auto& line : detail::read_lines(root / "manifest.txt")) {
      std::istringstream ss(line);
      std::string rel, cls;
      if (!(ss >> rel >> cls)) throw DataError("malformed manifest line: " + line);
      files.emplace_back((root / rel).string(), label_of(cls));
    }
  } else {
    for (std::size_t label = 0; label < ds.class_names.size(); ++label) {
      const fs::path dir = root / ds.class_names[label];
      if (!fs::is_directory(dir)) continue;
      std::vector<std::string> pngs;
      for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".png") pngs.push_back(e.path().string());
      }
      std::sort(pngs.begin(), pngs.end());
      for (auto& p : pngs) files.emplace_back(std::move(p), label);
    }
  }
  for (auto& [path, label] : files) {
    ds.entries.push_back({path, label, load_equirect<T>(path, height)});
  }
  return ds;
}

}  // namespace omnimix
