#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "tulip/geometry.hpp"

namespace tulip {

// Mean |pred - gt| over all pixels in meters, invalid pixels included.
double mae(const RangeImage& pred, const RangeImage& gt);

// 0.5 * (mean_a min_b |a - b| + mean_b min_a |b - a|), Euclidean. Nearest
// neighbours come from a uniform grid and are exact. Throws EmptyCloud.
double chamfer(const PointCloud& a, const PointCloud& b);

// Exact nearest-neighbour distance queries against a fixed cloud.
class NearestNeighborGrid {
 public:
  explicit NearestNeighborGrid(const PointCloud& cloud);
  double nearest_distance(const Point3& q) const;
  double cell_size() const { return cell_; }

 private:
  std::int64_t flat(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return (i * dims_[1] + j) * dims_[2] + k;
  }
  double scan_cell(std::int64_t i, std::int64_t j, std::int64_t k, const Point3& q,
                   double best) const;

  std::vector<Point3> points_;  // bucketed by cell
  std::vector<std::uint32_t> start_;  // cell -> first index in points_, size cells + 1
  Point3 origin_;
  double cell_ = 1.0;
  std::int64_t dims_[3] = {1, 1, 1};
};

struct VoxelKey {
  std::int64_t i = 0, j = 0, k = 0;
  auto operator<=>(const VoxelKey&) const = default;
};

// Sorted, unique cells floor(coordinate / voxel_size) holding at least one point.
std::vector<VoxelKey> occupied_voxels(const PointCloud& pc, double voxel_size);

// |occ(a) & occ(b)| / |occ(a) | occ(b)|, 1 when both are empty.
double voxel_iou(const PointCloud& a, const PointCloud& b, double voxel_size = 0.1);

inline constexpr double kDefaultVoxelSize = 0.1;
inline const std::vector<double> kDefaultBinEdges{0.0, 10.0, 20.0, 30.0};

// Bin i covers [edges[i], edges[i+1]); the last bin is open-ended. Absent
// metrics (no pixels, or an empty cloud on either side) stay empty.
struct BinMetrics {
  double lo = 0.0;
  double hi = std::numeric_limits<double>::infinity();
  std::size_t pixels = 0;
  std::size_t pred_points = 0;
  std::size_t gt_points = 0;
  std::optional<double> mae, chamfer, iou;
};

std::vector<BinMetrics> range_binned_eval(const PointCloud& pred_cloud, const PointCloud& gt_cloud,
                                          const RangeImage& pred_img, const RangeImage& gt_img,
                                          const std::vector<double>& edges,
                                          double voxel_size = kDefaultVoxelSize);

struct FrameMetrics {
  std::string name;
  double mae = 0.0;
  std::optional<double> chamfer;  // absent when either cloud is empty
  double iou = 1.0;
  std::vector<BinMetrics> bins;
};

struct EvalOptions {
  double voxel_size = kDefaultVoxelSize;
  std::vector<double> bin_edges = kDefaultBinEdges;

  void validate() const;
};

FrameMetrics evaluate_frame(const RangeImage& pred, const RangeImage& gt,
                            const EvalOptions& opts = {});

struct BinSummary {
  double lo = 0.0, hi = 0.0;
  std::optional<double> mae, chamfer, iou;  // mean over frames where present
};

struct EvalReport {
  double mae = 0.0;
  double chamfer = 0.0;  // mean over frames with a defined distance
  double iou = 0.0;
  std::vector<BinSummary> per_bin;
  std::size_t frame_count = 0;
  std::vector<FrameMetrics> frames;
};

// Averages in frame order, so the result does not depend on how the frames
// were evaluated.
EvalReport summarize(std::vector<FrameMetrics> frames, const EvalOptions& opts);

// Pairs pred and gt frames by file name; the .rimg name sets must match.
EvalReport evaluate_frames(const std::filesystem::path& pred_dir,
                           const std::vector<std::filesystem::path>& gt_frames,
                           const EvalOptions& opts = {});
EvalReport evaluate_directories(const std::filesystem::path& pred_dir,
                                const std::filesystem::path& gt_dir,
                                const EvalOptions& opts = {});

void write_report_csv(const std::filesystem::path& path, const EvalReport& report);
void write_bins_csv(const std::filesystem::path& path, const EvalReport& report);
std::string report_summary(const EvalReport& report);

// Vertical-only upsampling to beta * H rows; low row i sits on high row
// i * beta. Bilinear blends the two neighbouring rows with the last row
// clamped; nearest repeats rows.
RangeImage bilinear_upsample(const RangeImage& img, int beta);
RangeImage nearest_upsample(const RangeImage& img, int beta);

}  // namespace tulip
