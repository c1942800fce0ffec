#include "tulip/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "tulip/error.hpp"

namespace tulip {

namespace {
constexpr double kTwoPi = 2.0 * std::numbers::pi;

Projection project_unchecked(const Point3& p, const SensorIntrinsics& intr) {
  const double planar = std::sqrt(p.x * p.x + p.y * p.y);
  const double w = intr.width;
  const double h = intr.height;
  Projection out;
  out.u = 0.5 * w - w / kTwoPi * std::atan2(p.y, p.x);
  out.v = h / intr.vertical_fov() * (double(intr.theta_max) - std::atan2(p.z, planar));
  out.r = std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z);
  return out;
}

// Row 0 is centred on theta_max, so back-projected points of that row land at
// v = 0 up to atan2 rounding. Accept that rounding noise.
constexpr double kFovSlack = 1e-9;

bool in_fov(const Projection& proj, const SensorIntrinsics& intr) {
  return proj.v >= -kFovSlack && proj.v < double(intr.height);
}
}  // namespace

void SensorIntrinsics::validate() const {
  require(width >= 1 && height >= 1, Errc::kInvalidArgument,
          "sensor dimensions must be positive");
  require(theta_max > theta_min, Errc::kInvalidArgument, "theta_max must exceed theta_min");
  require(max_range > 0.0f, Errc::kInvalidArgument, "max_range must be positive");
}

SensorIntrinsics SensorIntrinsics::symmetric(int height, int width, double fov_deg,
                                             double max_range) {
  SensorIntrinsics intr;
  intr.height = height;
  intr.width = width;
  const double half = 0.5 * fov_deg * std::numbers::pi / 180.0;
  intr.theta_max = static_cast<float>(half);
  intr.theta_min = static_cast<float>(-half);
  intr.max_range = static_cast<float>(max_range);
  intr.validate();
  return intr;
}

RangeImage::RangeImage(const SensorIntrinsics& intrinsics)
    : intrinsics_(intrinsics),
      pixels_(static_cast<std::size_t>(intrinsics.height) *
                  static_cast<std::size_t>(intrinsics.width),
              0.0f) {
  intrinsics_.validate();
}

RangeImage::RangeImage(const SensorIntrinsics& intrinsics, std::vector<float> pixels)
    : intrinsics_(intrinsics), pixels_(std::move(pixels)) {
  intrinsics_.validate();
  require(pixels_.size() == static_cast<std::size_t>(intrinsics.height) *
                                static_cast<std::size_t>(intrinsics.width),
          Errc::kShapeMismatch, "pixel count does not match intrinsics");
}

void RangeImage::validate() const {
  intrinsics_.validate();
  for (float r : pixels_) {
    require(std::isfinite(r) && r >= 0.0f && r <= intrinsics_.max_range, Errc::kInvalidArgument,
            "range value outside [0, max_range]: " + std::to_string(r));
  }
}

Projection project_point(const Point3& p, const SensorIntrinsics& intr) {
  require(p.x != 0.0 || p.y != 0.0 || p.z != 0.0, Errc::kZeroPoint,
          "cannot project the sensor origin");
  const Projection out = project_unchecked(p, intr);
  if (!in_fov(out, intr)) {
    fail(Errc::kOutOfFov, "elevation outside vertical field of view (v=" +
                              std::to_string(out.v) + ")");
  }
  return out;
}

PixelIndex pixel_of(const Projection& proj, const SensorIntrinsics& intr) {
  const auto w = static_cast<long long>(intr.width);
  long long col = static_cast<long long>(std::floor(proj.u + 0.5)) % w;
  if (col < 0) col += w;
  long long row = static_cast<long long>(std::floor(proj.v + 0.5));
  row = std::clamp<long long>(row, 0, intr.height - 1);
  return {static_cast<int>(row), static_cast<int>(col)};
}

double row_elevation(int row, const SensorIntrinsics& intr) {
  return double(intr.theta_max) - double(row) * intr.vertical_fov() / double(intr.height);
}

double column_azimuth(int col, const SensorIntrinsics& intr) {
  return (0.5 * intr.width - double(col)) * kTwoPi / double(intr.width);
}

Point3 pixel_direction(int row, int col, const SensorIntrinsics& intr) {
  const double elev = row_elevation(row, intr);
  const double azim = column_azimuth(col, intr);
  const double c = std::cos(elev);
  return {c * std::cos(azim), c * std::sin(azim), std::sin(elev)};
}

BinningResult pointcloud_to_range_image(const PointCloud& pc, const SensorIntrinsics& intr) {
  BinningResult out{RangeImage(intr), 0};
  auto& pixels = out.image.pixels();
  for (const Point3& p : pc.points) {
    const Projection proj = project_unchecked(p, intr);
    if (!(proj.r > 0.0) || proj.r > intr.max_range || !in_fov(proj, intr)) {
      ++out.dropped;
      continue;
    }
    const PixelIndex px = pixel_of(proj, intr);
    float& slot = pixels[static_cast<std::size_t>(px.row) * intr.width + px.col];
    const auto range = static_cast<float>(proj.r);
    if (slot == 0.0f || range < slot) slot = range;
  }
  return out;
}

PointCloud range_image_to_pointcloud(const RangeImage& img) {
  const SensorIntrinsics& intr = img.intrinsics();
  PointCloud pc;
  for (int row = 0; row < intr.height; ++row) {
    for (int col = 0; col < intr.width; ++col) {
      const double r = img.at(row, col);
      if (r <= 0.0) continue;
      const Point3 d = pixel_direction(row, col, intr);
      pc.points.push_back({r * d.x, r * d.y, r * d.z});
    }
  }
  return pc;
}

RangeImage downsample_rows(const RangeImage& img, int beta, int phase) {
  require(beta >= 1, Errc::kInvalidArgument, "beta must be >= 1");
  require(phase >= 0 && phase < beta, Errc::kInvalidArgument, "phase must lie in [0, beta)");
  require(img.height() % beta == 0, Errc::kIndivisibleHeight,
          "height " + std::to_string(img.height()) + " not divisible by " + std::to_string(beta));
  SensorIntrinsics low = img.intrinsics();
  low.height = img.height() / beta;
  RangeImage out(low);
  const auto w = static_cast<std::size_t>(img.width());
  for (int i = 0; i < low.height; ++i) {
    const auto src = img.pixels().begin() + static_cast<std::ptrdiff_t>((i * beta + phase) * w);
    std::copy(src, src + static_cast<std::ptrdiff_t>(w),
              out.pixels().begin() + static_cast<std::ptrdiff_t>(i * w));
  }
  return out;
}

UpsampleSpec UpsampleSpec::from_high(const SensorIntrinsics& high, int beta) {
  require(beta >= 1, Errc::kInvalidArgument, "beta must be >= 1");
  require(high.height % beta == 0, Errc::kIndivisibleHeight,
          "high-resolution height not divisible by beta");
  UpsampleSpec spec;
  spec.beta = beta;
  spec.high = high;
  spec.low = high;
  spec.low.height = high.height / beta;
  spec.validate();
  return spec;
}

void UpsampleSpec::validate() const {
  low.validate();
  high.validate();
  require(high.height == beta * low.height && high.width == low.width, Errc::kShapeMismatch,
          "high resolution must be beta x low resolution vertically");
  require(low.theta_min == high.theta_min && low.theta_max == high.theta_max,
          Errc::kInvalidArgument, "low and high resolution must share the field of view");
}

}  // namespace tulip
