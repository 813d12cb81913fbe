#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <string>
#include <vector>

#include "omnimix/ops.hpp"

// Equirectangular conventions used throughout:
//   canvas pixel (row i, col j) has its centre at
//     longitude = ((j + 0.5) / W) · 360° − 180°
//     latitude  = 90° − ((i + 0.5) / H) · 180°
//   so longitude 0 sits at the seam-free middle of the image and the left and
//   right edges meet at ±180°.
//   Directions are (x right, y up, z forward at longitude 0).
// A camera looks along `forward` built from yaw (about +y) and pitch; at pitch
// ±90° the up vector is still derived from yaw, so yaw acts as a roll there.

namespace omnimix {

struct CameraPose {
  double yaw = 0;      // degrees, normalized to [-180, 180)
  double pitch = 0;    // degrees, [-90, 90]
  double fov_h = 90;   // degrees, (0, 180)
  double fov_v = 90;

  static CameraPose make(double yaw, double pitch, double fov_h = 90, double fov_v = 90) {
    if (!(fov_h > 0 && fov_h < 180) || !(fov_v > 0 && fov_v < 180)) {
      throw ConfigError("field of view must lie strictly inside (0, 180) degrees");
    }
    if (!(pitch >= -90 && pitch <= 90)) {
      throw ConfigError("pitch must lie in [-90, 90] degrees");
    }
    double y = std::fmod(yaw + 180.0, 360.0);
    if (y < 0) y += 360.0;
    return CameraPose{y - 180.0, pitch, fov_h, fov_v};
  }
};

template <typename T>
struct EquirectCanvas {
  Tensor<T> pixels;  // [3, H, 2H]
};

template <typename T>
struct Mask {
  Tensor<T> values;  // [1, H, 2H], entries 0 or 1
};

template <typename T>
struct Embedding {
  EquirectCanvas<T> canvas;
  Mask<T> mask;
};

namespace detail {

using Vec3 = std::array<double, 3>;

inline double radians(double deg) { return deg * std::numbers::pi / 180.0; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

struct CameraBasis {
  Vec3 forward, right, up;
  double tan_h, tan_v;
};

inline CameraBasis camera_basis(const CameraPose& pose) {
  const double yaw = radians(pose.yaw), pitch = radians(pose.pitch);
  const double cy = std::cos(yaw), sy = std::sin(yaw);
  const double cp = std::cos(pitch), sp = std::sin(pitch);
  CameraBasis b;
  b.forward = {cp * sy, sp, cp * cy};
  b.right = {cy, 0.0, -sy};
  b.up = {-sp * sy, cp, -sp * cy};
  b.tan_h = std::tan(radians(pose.fov_h) / 2);
  b.tan_v = std::tan(radians(pose.fov_v) / 2);
  return b;
}

inline Vec3 direction(double lon_deg, double lat_deg) {
  const double lon = radians(lon_deg), lat = radians(lat_deg);
  return {std::cos(lat) * std::sin(lon), std::sin(lat), std::cos(lat) * std::cos(lon)};
}

inline void check_pose_for_extraction(const CameraPose& pose) {
  constexpr double kPoleMargin = 1e-3;
  if (std::abs(std::abs(pose.pitch) - 90.0) < 1e-12 && pose.fov_v >= 180.0 - kPoleMargin) {
    throw ConfigError("vertical field of view too wide for a polar view");
  }
  if (!(pose.fov_h > 0 && pose.fov_h < 180) || !(pose.fov_v > 0 && pose.fov_v < 180)) {
    throw ConfigError("field of view must lie strictly inside (0, 180) degrees");
  }
}

// Bilinear sample of plane [rows × cols] at continuous pixel coords (x, y),
// where integer coords are pixel centres. Columns optionally wrap.
template <typename T>
double bilinear(const T* plane, std::size_t rows, std::size_t cols, double x, double y,
                bool wrap_x) {
  y = std::clamp(y, 0.0, static_cast<double>(rows - 1));
  const double fy = std::floor(y);
  const double ty = y - fy;
  const std::size_t y0 = static_cast<std::size_t>(fy);
  const std::size_t y1 = std::min(y0 + 1, rows - 1);
  std::size_t x0, x1;
  double tx;
  if (wrap_x) {
    const double w = static_cast<double>(cols);
    double xm = std::fmod(x, w);
    if (xm < 0) xm += w;
    const double fx = std::floor(xm);
    tx = xm - fx;
    x0 = static_cast<std::size_t>(fx) % cols;
    x1 = (x0 + 1) % cols;
  } else {
    x = std::clamp(x, 0.0, static_cast<double>(cols - 1));
    const double fx = std::floor(x);
    tx = x - fx;
    x0 = static_cast<std::size_t>(fx);
    x1 = std::min(x0 + 1, cols - 1);
  }
  const double a = plane[y0 * cols + x0], b = plane[y0 * cols + x1];
  const double c = plane[y1 * cols + x0], d = plane[y1 * cols + x1];
  return (1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * c + tx * d);
}

}  // namespace detail

/// Places a perspective snapshot [3,h,w] on a zero [3,H,2H] canvas by inverse
/// gnomonic projection. A canvas pixel belongs to the mask iff its centre ray
/// passes through the snapshot's image rectangle; everything else stays 0.
template <typename T>
Embedding<T> embed_snapshot(const Tensor<T>& snapshot, const CameraPose& pose,
                            std::size_t height) {
  if (snapshot.rank() != 3) throw ShapeError("snapshot must be [C, h, w]");
  if (!(pose.fov_h > 0 && pose.fov_h < 180) || !(pose.fov_v > 0 && pose.fov_v < 180)) {
    throw ConfigError("field of view must lie strictly inside (0, 180) degrees");
  }
  const std::size_t channels = snapshot.dim(0), h = snapshot.dim(1), w = snapshot.dim(2);
  const std::size_t H = height, W = 2 * height;
  const auto basis = detail::camera_basis(pose);
  std::vector<T> canvas(channels * H * W, T(0));
  std::vector<T> mask(H * W, T(0));
  const T* src = snapshot.data().data();
  for (std::size_t i = 0; i < H; ++i) {
    const double lat = 90.0 - (i + 0.5) / H * 180.0;
    for (std::size_t j = 0; j < W; ++j) {
      const double lon = (j + 0.5) / W * 360.0 - 180.0;
      const auto d = detail::direction(lon, lat);
      const double zc = detail::dot(d, basis.forward);
      if (zc <= 0) continue;
      const double un = detail::dot(d, basis.right) / zc / basis.tan_h;
      const double vn = detail::dot(d, basis.up) / zc / basis.tan_v;
      if (std::abs(un) > 1 || std::abs(vn) > 1) continue;
      const double px = (un + 1) / 2 * w - 0.5;
      const double py = (1 - vn) / 2 * h - 0.5;
      mask[i * W + j] = T(1);
      for (std::size_t c = 0; c < channels; ++c) {
        canvas[(c * H + i) * W + j] =
            static_cast<T>(detail::bilinear(src + c * h * w, h, w, px, py, false));
      }
    }
  }
  Embedding<T> out;
  out.canvas.pixels = Tensor<T>(Shape{channels, H, W}, std::move(canvas));
  out.mask.values = Tensor<T>(Shape{1, H, W}, std::move(mask));
  return out;
}

/// Gnomonic view [C,h,w] of an equirectangular canvas [C,H,W], bilinear, with
/// columns wrapping across the seam.
template <typename T>
Tensor<T> extract_snapshot(const Tensor<T>& canvas, const CameraPose& pose, std::size_t h,
                           std::size_t w) {
  detail::check_pose_for_extraction(pose);
  if (canvas.rank() != 3) throw ShapeError("canvas must be [C, H, W]");
  const std::size_t channels = canvas.dim(0), H = canvas.dim(1), W = canvas.dim(2);
  const auto basis = detail::camera_basis(pose);
  std::vector<T> out(channels * h * w);
  const T* src = canvas.data().data();
  for (std::size_t a = 0; a < h; ++a) {
    const double vn = 1 - 2 * (a + 0.5) / h;
    for (std::size_t b = 0; b < w; ++b) {
      const double un = 2 * (b + 0.5) / w - 1;
      detail::Vec3 d;
      for (int k = 0; k < 3; ++k) {
        d[k] = basis.forward[k] + un * basis.tan_h * basis.right[k] +
               vn * basis.tan_v * basis.up[k];
      }
      const double norm = std::sqrt(detail::dot(d, d));
      const double lon = std::atan2(d[0], d[2]) * 180.0 / std::numbers::pi;
      const double lat = std::asin(std::clamp(d[1] / norm, -1.0, 1.0)) * 180.0 / std::numbers::pi;
      const double col = (lon + 180.0) / 360.0 * W - 0.5;
      const double row = (90.0 - lat) / 180.0 * H - 0.5;
      for (std::size_t c = 0; c < channels; ++c) {
        out[(c * h + a) * w + b] =
            static_cast<T>(detail::bilinear(src + c * H * W, H, W, col, row, true));
      }
    }
  }
  return Tensor<T>(Shape{channels, h, w}, std::move(out));
}

/// Horizontal circular shift of a [C,H,W] canvas (differentiable).
template <typename T>
Tensor<T> roll_canvas(const Tensor<T>& canvas, long shift_px) {
  if (canvas.rank() != 3) throw ShapeError("canvas must be [C, H, W]");
  auto batched = reshape(canvas, Shape{1, canvas.dim(0), canvas.dim(1), canvas.dim(2)});
  return reshape(roll(batched, 3, shift_px), canvas.shape());
}

struct ViewSpec {
  double pitch;
  double yaw;
  std::string name;  // e.g. "e+90_y000"
};

inline constexpr std::array<double, 5> kEvalElevations{90, 45, 0, -45, -90};
inline constexpr std::size_t kEvalYaws = 10;

/// Elevation-major list of the 50 evaluation poses: yaws 0°, 36°, …, 324°.
inline std::vector<ViewSpec> eval_view_specs() {
  std::vector<ViewSpec> specs;
  for (double e : kEvalElevations) {
    for (std::size_t k = 0; k < kEvalYaws; ++k) {
      const double yaw = 360.0 * static_cast<double>(k) / kEvalYaws;
      char name[32];
      std::snprintf(name, sizeof(name), "e%+03d_y%03d", static_cast<int>(e),
                    static_cast<int>(yaw));
      specs.push_back({e, yaw, name});
    }
  }
  return specs;
}

template <typename T>
std::vector<Tensor<T>> eval_views(const Tensor<T>& canvas, std::size_t h, std::size_t w,
                                  double fov = 90.0) {
  std::vector<Tensor<T>> views;
  for (const auto& spec : eval_view_specs()) {
    views.push_back(extract_snapshot(canvas, CameraPose::make(spec.yaw, spec.pitch, fov, fov), h, w));
  }
  return views;
}

/// Bilinear resize of a [C,H,W] canvas, wrapping columns.
template <typename T>
Tensor<T> resize_canvas(const Tensor<T>& canvas, std::size_t height, std::size_t width) {
  const std::size_t C = canvas.dim(0), H = canvas.dim(1), W = canvas.dim(2);
  if (H == height && W == width) return canvas;
  std::vector<T> out(C * height * width);
  const T* src = canvas.data().data();
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < height; ++i) {
      const double y = (i + 0.5) * H / height - 0.5;
      for (std::size_t j = 0; j < width; ++j) {
        const double x = (j + 0.5) * W / width - 0.5;
        out[(c * height + i) * width + j] =
            static_cast<T>(detail::bilinear(src + c * H * W, H, W, x, y, true));
      }
    }
  }
  return Tensor<T>(Shape{C, height, width}, std::move(out));
}

}  // namespace omnimix
