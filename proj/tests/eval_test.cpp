#include "tulip/eval.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "test_util.hpp"
#include "tulip/error.hpp"
#include "tulip/io.hpp"
#include "tulip/parallel.hpp"
#include "tulip/rng.hpp"
#include "tulip/synthdata.hpp"

using namespace tulip;
namespace tt = tulip::testing;

namespace {

double brute_nearest(const Point3& q, const PointCloud& c) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& p : c.points)
    best = std::min(best, std::sqrt((q.x - p.x) * (q.x - p.x) + (q.y - p.y) * (q.y - p.y) +
                                    (q.z - p.z) * (q.z - p.z)));
  return best;
}

double brute_chamfer(const PointCloud& a, const PointCloud& b) {
  double sa = 0, sb = 0;
  for (const auto& p : a.points) sa += brute_nearest(p, b);
  for (const auto& p : b.points) sb += brute_nearest(p, a);
  return 0.5 * (sa / double(a.size()) + sb / double(b.size()));
}

// Uniform box, flat sheet, thin line or tight cluster with a far outlier.
PointCloud random_cloud(CounterRng& rng, std::size_t n, int shape) {
  PointCloud pc;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = rng.uniform(-20, 20), y = rng.uniform(-20, 20), z = rng.uniform(-3, 3);
    switch (shape) {
      case 0: pc.points.push_back({x, y, z}); break;
      case 1: pc.points.push_back({x, y, -1.7}); break;
      case 2: pc.points.push_back({x, 2.0, 0.5}); break;
      default: pc.points.push_back({x * 0.01, y * 0.01, z * 0.01}); break;
    }
  }
  if (shape == 3) pc.points.push_back({150, -90, 12});
  return pc;
}

PointCloud cloud(std::initializer_list<Point3> pts) { return PointCloud{std::vector<Point3>(pts)}; }

SensorIntrinsics sensor() { return SensorIntrinsics::symmetric(16, 64, 30.0, 80.0); }

RangeImage synthetic_frame(std::uint64_t i) {
  SceneTemplate t;
  t.intrinsics = sensor();
  return raycast_frame(random_scene(t, 21, i));
}

}  // namespace

TEST(Mae, IdentityOffsetAndOracle) {
  auto gt = tt::random_image(sensor(), 1);
  // Quarter-metre steps keep the offset exact in float.
  for (auto& r : gt.pixels()) r = std::floor(r * 4.0f) / 4.0f;
  EXPECT_EQ(mae(gt, gt), 0.0);
  RangeImage off = gt;
  for (auto& r : off.pixels()) r += 1.5f;
  EXPECT_NEAR(mae(off, gt), 1.5, 1e-12);
  const auto pred = tt::random_image(sensor(), 2);
  double sum = 0;
  for (int v = 0; v < gt.height(); ++v)
    for (int u = 0; u < gt.width(); ++u) sum += std::fabs(double(pred.at(v, u)) - double(gt.at(v, u)));
  EXPECT_NEAR(mae(pred, gt), sum / double(gt.size()), 1e-12);
}

TEST(Mae, ShapeMismatch) {
  const auto a = tt::random_image(sensor(), 1);
  const auto b = tt::random_image(SensorIntrinsics::symmetric(8, 64, 30, 80), 1);
  try {
    mae(a, b);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kShapeMismatch);
  }
}

TEST(Chamfer, TrivialCases) {
  const auto a = cloud({{1, 2, 3}, {4, 5, 6}, {-1, 0, 2}});
  EXPECT_EQ(chamfer(a, a), 0.0);
  EXPECT_DOUBLE_EQ(chamfer(cloud({{0, 0, 0}}), cloud({{3, 4, 0}})), 5.0);
  EXPECT_DOUBLE_EQ(chamfer(cloud({{3, 4, 0}}), cloud({{0, 0, 0}})), 5.0);
  try {
    chamfer(PointCloud{}, a);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kEmptyCloud);
  }
  EXPECT_THROW(chamfer(a, PointCloud{}), Error);
}

TEST(Chamfer, FiveHundredVsSevenHundredMatchesBruteForce) {
  CounterRng rng(3, rng_purpose::kTest);
  const auto a = random_cloud(rng, 500, 0);
  const auto b = random_cloud(rng, 700, 0);
  EXPECT_NEAR(chamfer(a, b), brute_chamfer(a, b), 1e-9);
}

TEST(Chamfer, GridEqualsBruteForceOnVariedClouds) {
  CounterRng rng(4, rng_purpose::kTest);
  for (int trial = 0; trial < 40; ++trial) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(1, 600));
    const auto m = static_cast<std::size_t>(rng.uniform_int(1, 600));
    const auto a = random_cloud(rng, n, trial % 4);
    const auto b = random_cloud(rng, m, (trial / 4) % 4);
    EXPECT_NEAR(chamfer(a, b), brute_chamfer(a, b), 1e-9) << "trial " << trial;
    EXPECT_EQ(chamfer(a, b), chamfer(b, a));
  }
}

TEST(Chamfer, NearestNeighborExactForFarQueries) {
  CounterRng rng(5, rng_purpose::kTest);
  const auto c = random_cloud(rng, 300, 1);
  const NearestNeighborGrid grid(c);
  for (int i = 0; i < 200; ++i) {
    const Point3 q{rng.uniform(-500, 500), rng.uniform(-500, 500), rng.uniform(-100, 100)};
    EXPECT_EQ(grid.nearest_distance(q), brute_nearest(q, c));
  }
  const NearestNeighborGrid single(cloud({{1, 1, 1}}));
  EXPECT_DOUBLE_EQ(single.nearest_distance({1, 1, 4}), 3.0);
}

TEST(Chamfer, ZeroExactlyForEqualPointSets) {
  const auto a = cloud({{1, 0, 0}, {2, 0, 0}, {2, 0, 0}});
  const auto b = cloud({{2, 0, 0}, {1, 0, 0}});
  EXPECT_EQ(chamfer(a, b), 0.0);
  EXPECT_GT(chamfer(a, cloud({{1, 0, 0}})), 0.0);
}

TEST(VoxelIou, TrivialCases) {
  const auto a = cloud({{0.05, 0.05, 0.05}, {1.23, -0.4, 2.0}});
  EXPECT_EQ(voxel_iou(a, a), 1.0);
  EXPECT_EQ(voxel_iou(a, cloud({{5, 5, 5}})), 0.0);
  EXPECT_EQ(voxel_iou(PointCloud{}, PointCloud{}), 1.0);
  EXPECT_EQ(voxel_iou(a, PointCloud{}), 0.0);
  EXPECT_THROW(voxel_iou(a, a, 0.0), Error);
}

TEST(VoxelIou, HandEnumeratedCells) {
  // a occupies (0,0,0), (1,0,0), (0,1,0), (-1,0,0); b occupies (0,0,0), (1,0,0), (5,5,5), (0,0,-1).
  // Union has 6 cells, 2 shared.
  const auto a = cloud({{0.01, 0.02, 0.03}, {0.15, 0.01, 0.0}, {0.05, 0.12, 0.09}, {-0.05, 0.0, 0.0},
                        {0.19, 0.09, 0.09}});
  const auto b = cloud({{0.09, 0.09, 0.09}, {0.11, 0.0, 0.0}, {0.55, 0.55, 0.55}, {0.0, 0.0, -0.01},
                        {0.0, 0.0, 0.0}});
  const auto va = occupied_voxels(a, 0.1);
  const std::vector<VoxelKey> expect_a{{-1, 0, 0}, {0, 0, 0}, {0, 1, 0}, {1, 0, 0}};
  EXPECT_EQ(va, expect_a);
  EXPECT_DOUBLE_EQ(voxel_iou(a, b, 0.1), 2.0 / 6.0);
}

TEST(VoxelIou, PermutationAndDuplicationInvariant) {
  CounterRng rng(6, rng_purpose::kTest);
  const auto a = random_cloud(rng, 200, 0);
  const auto b = random_cloud(rng, 150, 0);
  const double base = voxel_iou(a, b, 0.5);
  auto shuffled = a;
  std::reverse(shuffled.points.begin(), shuffled.points.end());
  std::rotate(shuffled.points.begin(), shuffled.points.begin() + 37, shuffled.points.end());
  auto doubled = b;
  doubled.points.insert(doubled.points.end(), b.points.begin(), b.points.end());
  EXPECT_EQ(voxel_iou(shuffled, doubled, 0.5), base);
}

TEST(RangeBins, SingleOpenBinReproducesGlobalMetrics) {
  const auto gt = synthetic_frame(0);
  auto pred = gt;
  CounterRng rng(7, rng_purpose::kTest);
  for (auto& r : pred.pixels())
    if (r > 0) r = std::max(0.1f, r + static_cast<float>(rng.uniform(-0.3, 0.3)));
  const auto pc = range_image_to_pointcloud(pred);
  const auto gc = range_image_to_pointcloud(gt);
  const auto bins = range_binned_eval(pc, gc, pred, gt, {0.0});
  ASSERT_EQ(bins.size(), 1u);
  EXPECT_EQ(bins[0].mae.value(), mae(pred, gt));
  EXPECT_EQ(bins[0].chamfer.value(), chamfer(pc, gc));
  EXPECT_EQ(bins[0].iou.value(), voxel_iou(pc, gc, 0.1));
  EXPECT_EQ(bins[0].pixels, gt.size());
  const auto f = evaluate_frame(pred, gt, {0.1, {0.0}});
  EXPECT_EQ(f.mae, bins[0].mae.value());
  EXPECT_EQ(f.chamfer.value(), bins[0].chamfer.value());
}

TEST(RangeBins, EmptySideIsAbsentNotZero) {
  RangeImage img(sensor());
  const auto gt_cloud = cloud({{5, 0, 0}, {0, 6, 0}});     // bin [0, 10)
  const auto pred_cloud = cloud({{15, 0, 0}, {0, 12, 0}});  // bin [10, 20)
  const auto bins = range_binned_eval(pred_cloud, gt_cloud, img, img, {0, 10, 20, 30});
  ASSERT_EQ(bins.size(), 4u);
  EXPECT_FALSE(bins[0].chamfer.has_value());
  EXPECT_FALSE(bins[1].chamfer.has_value());
  EXPECT_EQ(bins[0].iou.value(), 0.0);
  EXPECT_FALSE(bins[2].chamfer.has_value());
  EXPECT_FALSE(bins[2].iou.has_value());
  EXPECT_FALSE(bins[3].mae.has_value());  // every pixel of the blank image is in bin 0
  EXPECT_EQ(bins[0].pixels, img.size());
  EXPECT_TRUE(std::isinf(bins[3].hi));
}

TEST(RangeBins, PixelCountsMatchScalarFilter) {
  const auto gt = synthetic_frame(1);
  const auto pred = synthetic_frame(2);
  const std::vector<double> edges{0, 10, 20, 30};
  const auto bins = range_binned_eval(range_image_to_pointcloud(pred), range_image_to_pointcloud(gt),
                                      pred, gt, edges);
  std::size_t counts[4] = {0, 0, 0, 0};
  double sums[4] = {0, 0, 0, 0};
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const float g = gt.pixels()[i];
    const int b = g < 10 ? 0 : g < 20 ? 1 : g < 30 ? 2 : 3;
    ++counts[b];
    sums[b] += std::fabs(double(pred.pixels()[i]) - double(g));
  }
  std::size_t total = 0;
  for (int b = 0; b < 4; ++b) {
    EXPECT_EQ(bins[b].pixels, counts[b]) << b;
    total += bins[b].pixels;
    if (counts[b]) EXPECT_NEAR(bins[b].mae.value(), sums[b] / double(counts[b]), 1e-12);
  }
  EXPECT_EQ(total, gt.size());
}

TEST(RangeBins, EdgesValidated) {
  RangeImage img(sensor());
  EXPECT_THROW(range_binned_eval({}, {}, img, img, {}), Error);
  EXPECT_THROW(range_binned_eval({}, {}, img, img, {0, 10, 10}), Error);
  EXPECT_THROW(range_binned_eval({}, {}, img, img, {5, 1}), Error);
}

TEST(Upsample, BetaOneIsIdentity) {
  const auto img = tt::random_image(sensor(), 8);
  EXPECT_EQ(bilinear_upsample(img, 1), img);
  EXPECT_EQ(nearest_upsample(img, 1), img);
  EXPECT_THROW(bilinear_upsample(img, 0), Error);
}

TEST(Upsample, BilinearClosedForm) {
  RangeImage low(SensorIntrinsics::symmetric(2, 4, 30, 80));
  for (int u = 0; u < 4; ++u) {
    low.at(0, u) = 0.0f;
    low.at(1, u) = 4.0f;
  }
  const auto up = bilinear_upsample(low, 4);
  ASSERT_EQ(up.height(), 8);
  const float expected[8] = {0, 1, 2, 3, 4, 4, 4, 4};
  for (int y = 0; y < 8; ++y)
    for (int u = 0; u < 4; ++u) EXPECT_EQ(up.at(y, u), expected[y]) << y;
  EXPECT_EQ(up.intrinsics(), SensorIntrinsics::symmetric(8, 4, 30, 80));
}

TEST(Upsample, NearestThenDownsampleIsIdentity) {
  const auto img = tt::random_image(sensor(), 9);
  EXPECT_EQ(downsample_rows(nearest_upsample(img, 4), 4, 0), img);
  EXPECT_EQ(downsample_rows(bilinear_upsample(img, 4), 4, 0), img);
}

TEST(Upsample, NearestBaselineExactOnlyForPeriodicRows) {
  const auto gt = synthetic_frame(3);
  const double err = mae(nearest_upsample(downsample_rows(gt, 4, 0), 4), gt);
  EXPECT_GT(err, 0.0);
  RangeImage periodic(gt.intrinsics());
  for (int v = 0; v < gt.height(); ++v)
    for (int u = 0; u < gt.width(); ++u) periodic.at(v, u) = gt.at(v - v % 4, u);
  EXPECT_EQ(mae(nearest_upsample(downsample_rows(periodic, 4, 0), 4), periodic), 0.0);
}

TEST(Directories, IdenticalSetsScorePerfectly) {
  const auto dir = tt::scratch_dir("eval_same");
  for (int i = 0; i < 3; ++i)
    io::write_rimg(dir / ("f" + std::to_string(i) + ".rimg"), synthetic_frame(10 + i));
  const auto report = evaluate_directories(dir, dir);
  EXPECT_EQ(report.frame_count, 3u);
  for (const auto& f : report.frames) {
    EXPECT_EQ(f.mae, 0.0);
    EXPECT_EQ(f.chamfer.value(), 0.0);
    EXPECT_EQ(f.iou, 1.0);
  }
  EXPECT_EQ(report.mae, 0.0);
  EXPECT_EQ(report.chamfer, 0.0);
  EXPECT_EQ(report.iou, 1.0);
  ASSERT_EQ(report.per_bin.size(), kDefaultBinEdges.size());

  write_report_csv(dir / "report.csv", report);
  write_bins_csv(dir / "bins.csv", report);
  const auto bytes = io::read_file_bytes(dir / "report.csv");
  const std::string text(bytes.begin(), bytes.end());
  EXPECT_EQ(text, "frame,mae,chamfer,iou\nf0.rimg,0,0,1\nf1.rimg,0,0,1\nf2.rimg,0,0,1\nmean,0,0,1\n");
  EXPECT_FALSE(report_summary(report).empty());
}

TEST(Directories, MismatchedFrameSetsRejected) {
  const auto a = tt::scratch_dir("eval_a");
  const auto b = tt::scratch_dir("eval_b");
  io::write_rimg(a / "x.rimg", synthetic_frame(0));
  io::write_rimg(b / "y.rimg", synthetic_frame(0));
  try {
    evaluate_directories(a, b);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kInvalidArgument);
  }
  EXPECT_THROW(evaluate_directories(a / "missing", b), Error);
}

TEST(Directories, ReportIndependentOfThreadCount) {
  const auto gt = tt::scratch_dir("eval_gt");
  const auto pred = tt::scratch_dir("eval_pred");
  for (int i = 0; i < 5; ++i) {
    const auto name = "f" + std::to_string(i) + ".rimg";
    const auto frame = synthetic_frame(20 + i);
    io::write_rimg(gt / name, frame);
    io::write_rimg(pred / name, bilinear_upsample(downsample_rows(frame, 4, 0), 4));
  }
  set_thread_count(1);
  const auto r1 = evaluate_directories(pred, gt);
  set_thread_count(3);
  const auto r3 = evaluate_directories(pred, gt);
  set_thread_count(0);
  EXPECT_EQ(r1.mae, r3.mae);
  EXPECT_EQ(r1.chamfer, r3.chamfer);
  EXPECT_EQ(r1.iou, r3.iou);
  EXPECT_GT(r1.mae, 0.0);
  EXPECT_LT(r1.iou, 1.0);
}
