#include "tulip/experiment.hpp"

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "tulip/error.hpp"
#include "tulip/io.hpp"
#include "tulip/parallel.hpp"
#include "tulip/synthdata.hpp"

using namespace tulip;
namespace tt = tulip::testing;

namespace {

NetworkConfig small_config() {
  NetworkConfig cfg;
  cfg.input_height = 4;
  cfg.input_width = 128;
  cfg.embed_dim = 8;
  cfg.num_stages = 2;
  cfg.heads_per_stage = {2, 4};
  cfg.mlp_ratio = 2;
  return cfg;
}

}  // namespace

TEST(Ablation, GridRowsInOrder) {
  const auto grid = ablation_grid();
  ASSERT_EQ(grid.size(), 6u);
  EXPECT_EQ(grid[0].patch, "4x4");
  EXPECT_EQ(grid[0].window, WindowMode::kSquare);
  EXPECT_EQ(grid[1].patch, "2x2");
  EXPECT_EQ(grid[2].patch, "1x4");
  EXPECT_EQ(grid[2].window, WindowMode::kSquare);
  EXPECT_EQ(grid[3].window, WindowMode::kRect);
  EXPECT_FALSE(grid[3].range_adaptations);
  EXPECT_TRUE(grid[4].range_adaptations);
  EXPECT_FALSE(grid[4].mc);
  EXPECT_TRUE(grid[5].mc);
  for (const auto& v : grid) EXPECT_NO_THROW(apply_variant(NetworkConfig{}, v).validate()) << v.name;
}

TEST(Ablation, SquareAndRectWindowsHoldTheSameTokenCount) {
  NetworkConfig a, b;
  set_window_mode(a, WindowMode::kRect);
  set_window_mode(b, WindowMode::kSquare);
  EXPECT_EQ(a.window_h * a.window_w, b.window_h * b.window_w);
  EXPECT_GT(a.window_w, a.window_h);
  EXPECT_EQ(b.window_w, b.window_h);
  EXPECT_FALSE(b.rectangular);
  EXPECT_NO_THROW(a.validate());
  EXPECT_NO_THROW(b.validate());
}

TEST(Ablation, LargeAddsOneStage) {
  NetworkConfig cfg;
  set_large(cfg);
  EXPECT_EQ(cfg.num_stages, 4);
  EXPECT_EQ(cfg.heads_per_stage, (std::vector<int>{2, 4, 8, 8}));
  EXPECT_EQ(cfg, NetworkConfig::tulip_large());
  set_large(cfg);
  EXPECT_EQ(cfg.num_stages, 4);
}

TEST(Ablation, PatchParsing) {
  NetworkConfig cfg;
  set_patch(cfg, "2x2");
  EXPECT_EQ(cfg.patch_h, 2);
  EXPECT_EQ(cfg.patch_w, 2);
  EXPECT_THROW(set_patch(cfg, "3x3"), Error);
}

TEST(EvaluateBilinear, MatchesPerFrameComposition) {
  const auto dir = tt::scratch_dir("exp_bilinear");
  SceneTemplate tmpl;
  tmpl.intrinsics = SensorIntrinsics::symmetric(16, 128, 30.0, 80.0);
  const auto m = generate_dataset(4, tmpl, 3, dir, 0.5);
  const auto test = m.paths("test");
  const auto report = evaluate_bilinear(test, 4);
  ASSERT_EQ(report.frame_count, 2u);
  double mae_sum = 0;
  for (const auto& p : test) {
    const RangeImage gt = io::read_rimg(p);
    mae_sum += mae(bilinear_upsample(downsample_rows(gt, 4), 4), gt);
  }
  EXPECT_DOUBLE_EQ(report.mae, mae_sum / 2);
}

TEST(EvaluateModel, MatchesDirectInferenceAndIsThreadInvariant) {
  const auto dir = tt::scratch_dir("exp_model");
  SceneTemplate tmpl;
  tmpl.intrinsics = SensorIntrinsics::symmetric(16, 128, 30.0, 80.0);
  const auto m = generate_dataset(3, tmpl, 4, dir, 0.0);
  const auto test = m.paths("test");
  const TulipModel<float> model(small_config(), 5);
  InferenceConfig icfg;
  icfg.mc_passes = 3;
  icfg.seed = 2;
  set_thread_count(1);
  const auto r1 = evaluate_model(model, test, icfg);
  set_thread_count(3);
  const auto r3 = evaluate_model(model, test, icfg);
  set_thread_count(0);
  EXPECT_EQ(r1.mae, r3.mae);
  EXPECT_EQ(r1.chamfer, r3.chamfer);
  EXPECT_EQ(r1.iou, r3.iou);

  const RangeImage gt = io::read_rimg(test[1]);
  const auto direct = mc_dropout_infer(model, downsample_rows(gt, 4), icfg).filtered_image();
  EXPECT_EQ(r1.frames[1].mae, mae(direct, gt));
}
