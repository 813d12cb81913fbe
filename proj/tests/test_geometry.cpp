#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>

#include "omnimix/geometry.hpp"
#include "omnimix/image_io.hpp"
#include "support.hpp"

using namespace omnimix;
using omnimix::testing::psnr;
using omnimix::testing::synthetic_panorama;

namespace {

constexpr long double kPi = 3.141592653589793238462643383279502884L;

// Reference gnomonic resampler: camera rays are rotated by explicit pitch
// (about x) and yaw (about y) matrices, sampled bilinearly with integer
// modular wrap in long double.
std::vector<long double> reference_extract(const Tensor<float>& canvas, double yaw, double pitch,
                                           double fov, std::size_t h, std::size_t w) {
  const std::size_t C = canvas.dim(0), H = canvas.dim(1), W = canvas.dim(2);
  const long double t = std::tan((long double)fov * kPi / 360);
  const long double cy = std::cos(yaw * kPi / 180), sy = std::sin(yaw * kPi / 180);
  const long double cp = std::cos(pitch * kPi / 180), sp = std::sin(pitch * kPi / 180);
  std::vector<long double> out(C * h * w);
  for (std::size_t a = 0; a < h; ++a) {
    for (std::size_t b = 0; b < w; ++b) {
      const long double x = (2 * (b + 0.5L) / w - 1) * t, y = (1 - 2 * (a + 0.5L) / h) * t, z = 1;
      // pitch: rotate (y, z) so that +z tilts towards +y
      const long double y1 = y * cp + z * sp, z1 = -y * sp + z * cp;
      const long double x2 = x * cy + z1 * sy, z2 = -x * sy + z1 * cy;
      const long double n = std::sqrt(x2 * x2 + y1 * y1 + z2 * z2);
      const long double lon = std::atan2(x2, z2), lat = std::asin(y1 / n);
      long double col = (lon + kPi) / (2 * kPi) * W - 0.5L;
      long double row = std::clamp((kPi / 2 - lat) / kPi * H - 0.5L, 0.0L, (long double)H - 1);
      const long c0 = (long)std::floor(col), r0 = (long)std::floor(row);
      const long double tx = col - c0, ty = row - r0;
      const long r1 = std::min<long>(r0 + 1, H - 1);
      auto wrap = [&](long c) { return (std::size_t)(((c % (long)W) + W) % W); };
      for (std::size_t ch = 0; ch < C; ++ch) {
        auto px = [&](long r, long c) { return (long double)canvas[(ch * H + r) * W + wrap(c)]; };
        out[(ch * h + a) * w + b] = (1 - ty) * ((1 - tx) * px(r0, c0) + tx * px(r0, c0 + 1)) +
                                    ty * ((1 - tx) * px(r1, c0) + tx * px(r1, c0 + 1));
      }
    }
  }
  return out;
}

Tensor<float> smooth_snapshot(std::size_t n) {
  std::vector<float> v(3 * n * n);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        v[(c * n + i) * n + j] = 0.8f * std::sin(0.11f * i + 0.07f * j * (c + 1) + c);
  return Tensor<float>(Shape{3, n, n}, std::move(v));
}

}  // namespace

TEST(Pose, NormalizesYawAndValidatesRanges) {
  EXPECT_DOUBLE_EQ(CameraPose::make(190, 0).yaw, -170);
  EXPECT_DOUBLE_EQ(CameraPose::make(-540, 0).yaw, -180);
  EXPECT_THROW(CameraPose::make(0, 91), ConfigError);
  EXPECT_THROW(CameraPose::make(0, 0, 180, 90), ConfigError);
  EXPECT_THROW(CameraPose::make(0, 0, 90, 0), ConfigError);
}

TEST(Embed, CentrePixelAndZeroOutsideMask) {
  auto snap = smooth_snapshot(16);
  auto emb = embed_snapshot(snap, CameraPose::make(0, 0), 64);
  const std::size_t H = 64, W = 128;
  std::size_t ones = 0;
  for (std::size_t i = 0; i < H * W; ++i) {
    const float m = emb.mask.values[i];
    ASSERT_TRUE(m == 0 || m == 1);
    ones += m == 1;
    if (m == 0) {
      for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(emb.canvas.pixels[c * H * W + i], 0);
    }
  }
  EXPECT_GT(ones, 0u);
  // the centre ray lands between the four central snapshot pixels
  const float centre = emb.canvas.pixels[(H / 2) * W + W / 2];
  const float s = (snap[7 * 16 + 7] + snap[7 * 16 + 8] + snap[8 * 16 + 7] + snap[8 * 16 + 8]) / 4;
  EXPECT_NEAR(centre, s, 0.05);
}

TEST(Embed, MaskIsIdempotentUnderReembedding) {
  auto snap = smooth_snapshot(32);
  auto a = embed_snapshot(snap, CameraPose::make(0, 0), 32);
  auto b = embed_snapshot(snap, CameraPose::make(0, 0), 32);
  EXPECT_EQ(a.mask.values.vec(), b.mask.values.vec());
}

TEST(Embed, RejectsStraightAngleFov) {
  CameraPose p{0, 0, 180, 90};
  EXPECT_THROW(embed_snapshot(smooth_snapshot(4), p, 8), ConfigError);
}

TEST(Extract, RoundTripPsnrAbove30dB) {
  auto snap = smooth_snapshot(64);
  const auto pose = CameraPose::make(0, 0, 90, 90);
  auto emb = embed_snapshot(snap, pose, 256);
  auto back = extract_snapshot(emb.canvas.pixels, pose, 64, 64);
  EXPECT_GT(psnr(back, snap), 30.0);
}

TEST(Extract, MatchesReferenceResampler) {
  auto canvas = synthetic_panorama<float>(32, 0.4);
  for (auto [yaw, pitch] : std::vector<std::pair<double, double>>{
           {0, 0}, {37, 20}, {-150, -60}, {179, 89}, {90, 90}, {0, -90}}) {
    auto view = extract_snapshot(canvas, CameraPose::make(yaw, pitch, 75, 75), 12, 12);
    auto ref = reference_extract(canvas, yaw, pitch, 75, 12, 12);
    for (std::size_t i = 0; i < ref.size(); ++i) {
      ASSERT_NEAR(view[i], (double)ref[i], 1e-5) << "yaw " << yaw << " pitch " << pitch;
    }
  }
}

TEST(Extract, ConstantCanvasGivesConstantView) {
  auto canvas = Tensor<float>::full(Shape{3, 16, 32}, 0.25f);
  auto v = extract_snapshot(canvas, CameraPose::make(20, 70), 9, 9);
  for (float x : v.data()) EXPECT_FLOAT_EQ(x, 0.25f);
}

TEST(Extract, SeamIsContinuous) {
  // a vertical stripe straddling the seam; extraction at yaw 180 must match
  // extraction at yaw 0 of the canvas rolled by half a turn.
  const std::size_t H = 32, W = 64;
  std::vector<float> v(3 * H * W, -1.f);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j : {W - 2, W - 1, std::size_t{0}, std::size_t{1}})
        v[(c * H + i) * W + j] = 0.3f * c + 0.01f * i;
  Tensor<float> canvas(Shape{3, H, W}, std::move(v));
  auto rolled = roll_canvas(canvas, static_cast<long>(W / 2));
  for (double pitch : {0.0, 30.0, -45.0}) {
    auto a = extract_snapshot(canvas, CameraPose::make(180, pitch, 60, 60), 16, 16);
    auto b = extract_snapshot(rolled, CameraPose::make(0, pitch, 60, 60), 16, 16);
    double diff = 0;
    for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, (double)std::abs(a[i] - b[i]));
    EXPECT_LT(diff, 1e-6) << "pitch " << pitch;
  }
}

TEST(Extract, RejectsPolarViewWithFullVerticalFov) {
  CameraPose p{0, 90, 90, 179.9995};
  EXPECT_THROW(extract_snapshot(Tensor<float>::zeros(Shape{3, 8, 16}), p, 4, 4), ConfigError);
}

TEST(Roll, GroupPropertiesAndGradient) {
  auto canvas = synthetic_panorama<float>(8, 1.0);
  EXPECT_EQ(roll_canvas(canvas, 16).vec(), canvas.vec());
  EXPECT_EQ(roll_canvas(roll_canvas(canvas, 3), 5).vec(), roll_canvas(canvas, 8).vec());
  EXPECT_EQ(roll_canvas(canvas, -3).vec(), roll_canvas(canvas, 13).vec());
  auto sorted = [](std::vector<float> x) { std::sort(x.begin(), x.end()); return x; };
  EXPECT_EQ(sorted(roll_canvas(canvas, 7).vec()), sorted(canvas.vec()));
  Tensor<double> x = synthetic_panorama<double>(4, 0.2);
  x.set_requires_grad(true);
  auto g = grad<double>(sum(roll_canvas(x, 3)), {x})[0];
  for (double v : g.data()) EXPECT_EQ(v, 1.0);
}

TEST(EvalViews, FiftyViewsElevationMajor) {
  auto specs = eval_view_specs();
  ASSERT_EQ(specs.size(), 50u);
  const double elevations[] = {90, 45, 0, -45, -90};
  for (std::size_t i = 0; i < 50; ++i) {
    EXPECT_EQ(specs[i].pitch, elevations[i / 10]);
    EXPECT_DOUBLE_EQ(specs[i].yaw, 36.0 * (i % 10));
  }
  EXPECT_EQ(specs.front().name, "e+90_y000");
  EXPECT_EQ(specs[13].name, "e+45_y108");
  EXPECT_EQ(specs[20].name, "e+00_y000");
  EXPECT_EQ(specs.back().name, "e-90_y324");
  std::set<std::string> names;
  for (const auto& s : specs) names.insert(s.name);
  EXPECT_EQ(names.size(), 50u);
}

TEST(EvalViews, HalfTurnRollPermutesHorizonViews) {
  auto canvas = synthetic_panorama<float>(32, 0.0);
  auto rolled = roll_canvas(canvas, 32);
  auto a = eval_views(canvas, 8, 8);
  auto b = eval_views(rolled, 8, 8);
  for (std::size_t k = 0; k < 10; ++k) {
    const auto& va = a[20 + k];
    const auto& vb = b[20 + (k + 5) % 10];
    for (std::size_t i = 0; i < va.size(); ++i) ASSERT_NEAR(va[i], vb[i], 1e-6);
  }
}

TEST(EvalViews, MatchesGoldenBytes) {
  // Golden bytes were produced once by the reference resampler above from the
  // same synthetic canvas (8×8 views, fov 90).
  const std::string path = std::string(OMNIMIX_TEST_DATA) + "/eval_views_8x8.bin";
  if (std::getenv("OMNIMIX_REGEN_GOLDEN")) {
    auto canvas = synthetic_panorama<float>(32, 0.4);
    std::ofstream out(path, std::ios::binary);
    for (const auto& spec : eval_view_specs()) {
      auto ref = reference_extract(canvas, spec.yaw, spec.pitch, 90, 8, 8);
      for (std::size_t p = 0; p < 64; ++p)
        for (std::size_t c = 0; c < 3; ++c) out.put(static_cast<char>(quantize((double)ref[c * 64 + p])));
    }
  }
  std::ifstream f(path, std::ios::binary);
  ASSERT_TRUE(f) << "missing golden file";
  std::vector<std::uint8_t> golden((std::istreambuf_iterator<char>(f)), {});
  auto canvas = synthetic_panorama<float>(32, 0.4);
  auto views = eval_views(canvas, 8, 8);
  std::vector<std::uint8_t> bytes;
  for (const auto& v : views) {
    auto b = to_rgb_bytes(v);
    bytes.insert(bytes.end(), b.begin(), b.end());
  }
  ASSERT_EQ(bytes.size(), golden.size());
  EXPECT_EQ(bytes, golden);
}

TEST(Resize, IdentityAndConstant) {
  auto canvas = synthetic_panorama<float>(8, 0.3);
  EXPECT_EQ(resize_canvas(canvas, 8, 16).vec(), canvas.vec());
  auto c = resize_canvas(Tensor<float>::full(Shape{3, 8, 16}, -0.5f), 4, 8);
  for (float v : c.data()) EXPECT_FLOAT_EQ(v, -0.5f);
}

TEST(ImageIo, PngRoundTripIsExactAfterQuantization) {
  auto dir = omnimix::testing::scratch_dir("png");
  auto img = synthetic_panorama<float>(8, 0.1);
  write_png((dir / "a.png").string(), img);
  auto back = read_png<float>((dir / "a.png").string());
  ASSERT_EQ(back.shape(), img.shape());
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(back[i], img[i], 1.0 / 255 + 1e-6);
  write_png((dir / "b.png").string(), back);
  EXPECT_EQ(omnimix::testing::read_file(dir / "a.png"), omnimix::testing::read_file(dir / "b.png"));
  EXPECT_THROW(read_png<float>((dir / "missing.png").string()), DataError);
}
