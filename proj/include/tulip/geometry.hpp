#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace tulip {

// Spherical sensor model of a rotating LiDAR. Row 0 looks up at theta_max;
// azimuth wraps around the width.
struct SensorIntrinsics {
  int height = 64;
  int width = 256;
  float theta_min = -0.26179939f;  // -15 deg
  float theta_max = 0.26179939f;   // +15 deg
  float max_range = 80.0f;

  void validate() const;
  double vertical_fov() const { return double(theta_max) - double(theta_min); }

  // Uniform elevation spacing, symmetric about the horizon.
  static SensorIntrinsics symmetric(int height, int width, double fov_deg, double max_range);

  bool operator==(const SensorIntrinsics&) const = default;
};

struct Point3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  bool operator==(const Point3&) const = default;
};

struct PointCloud {
  std::vector<Point3> points;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

// Range values in meters, row-major, 0 meaning "no return".
class RangeImage {
 public:
  RangeImage() = default;
  explicit RangeImage(const SensorIntrinsics& intrinsics);
  RangeImage(const SensorIntrinsics& intrinsics, std::vector<float> pixels);

  const SensorIntrinsics& intrinsics() const { return intrinsics_; }
  int height() const { return intrinsics_.height; }
  int width() const { return intrinsics_.width; }
  std::size_t size() const { return pixels_.size(); }

  float at(int row, int col) const { return pixels_[index(row, col)]; }
  float& at(int row, int col) { return pixels_[index(row, col)]; }

  const std::vector<float>& pixels() const { return pixels_; }
  std::vector<float>& pixels() { return pixels_; }

  // Throws unless every pixel lies in [0, max_range].
  void validate() const;

  bool operator==(const RangeImage&) const = default;

 private:
  std::size_t index(int row, int col) const {
    return static_cast<std::size_t>(row) * static_cast<std::size_t>(intrinsics_.width) +
           static_cast<std::size_t>(col);
  }

  SensorIntrinsics intrinsics_;
  std::vector<float> pixels_;
};

// Real-valued image coordinates of a point.
struct Projection {
  double u = 0.0;
  double v = 0.0;
  double r = 0.0;
};

struct PixelIndex {
  int row = 0;
  int col = 0;

  bool operator==(const PixelIndex&) const = default;
};

// u = W/2 - W/(2 pi) atan2(y, x),
// v = H/(theta_max - theta_min) * (theta_max - atan2(z, sqrt(x^2 + y^2))).
// Throws ZeroPoint for the origin and OutOfFov when v is outside [0, H).
Projection project_point(const Point3& p, const SensorIntrinsics& intr);

// Round-half-up on both axes; the column wraps modulo W and the row is
// clamped to [0, H-1].
PixelIndex pixel_of(const Projection& proj, const SensorIntrinsics& intr);

// Elevation / azimuth of a pixel center, the exact inverse of pixel_of's rounding.
double row_elevation(int row, const SensorIntrinsics& intr);
double column_azimuth(int col, const SensorIntrinsics& intr);
Point3 pixel_direction(int row, int col, const SensorIntrinsics& intr);

struct BinningResult {
  RangeImage image;
  std::size_t dropped = 0;  // origin, out-of-FoV or beyond max_range
};

// Nearest return wins on bin collisions.
BinningResult pointcloud_to_range_image(const PointCloud& pc, const SensorIntrinsics& intr);

PointCloud range_image_to_pointcloud(const RangeImage& img);

// Keeps rows phase, phase + beta, ...; intrinsics keep the FoV.
RangeImage downsample_rows(const RangeImage& img, int beta, int phase = 0);

struct UpsampleSpec {
  int beta = 4;
  SensorIntrinsics low;
  SensorIntrinsics high;

  static UpsampleSpec from_high(const SensorIntrinsics& high, int beta);
  void validate() const;
};

}  // namespace tulip
