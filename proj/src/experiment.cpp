#include "tulip/experiment.hpp"

#include "tulip/error.hpp"
#include "tulip/io.hpp"
#include "tulip/parallel.hpp"

namespace tulip {

void set_window_mode(NetworkConfig& cfg, WindowMode mode) {
  if (mode == WindowMode::kSquare) {
    cfg.window_h = 4;
    cfg.window_w = 4;
    cfg.rectangular = false;
  } else {
    cfg.window_h = 2;
    cfg.window_w = 8;
    cfg.rectangular = true;
  }
}

void set_patch(NetworkConfig& cfg, std::string_view patch) {
  if (patch == "1x4") {
    cfg.patch_h = 1;
    cfg.patch_w = 4;
  } else if (patch == "2x2") {
    cfg.patch_h = 2;
    cfg.patch_w = 2;
  } else if (patch == "4x4") {
    cfg.patch_h = 4;
    cfg.patch_w = 4;
  } else {
    fail(Errc::kInvalidArgument, "patch must be 1x4, 2x2 or 4x4, got " + std::string(patch));
  }
}

void set_large(NetworkConfig& cfg) {
  while (cfg.num_stages < 4) {
    cfg.heads_per_stage.push_back(cfg.heads_per_stage.empty() ? 2 : cfg.heads_per_stage.back());
    ++cfg.num_stages;
  }
}

std::vector<AblationVariant> ablation_grid() {
  return {
      {"baseline", "4x4", WindowMode::kSquare, false, false},
      {"model1", "2x2", WindowMode::kSquare, false, false},
      {"model2", "1x4", WindowMode::kSquare, false, false},
      {"model3", "1x4", WindowMode::kRect, false, false},
      {"model4", "1x4", WindowMode::kRect, true, false},
      {"tulip", "1x4", WindowMode::kRect, true, true},
  };
}

NetworkConfig apply_variant(NetworkConfig cfg, const AblationVariant& v) {
  set_patch(cfg, v.patch);
  set_window_mode(cfg, v.window);
  cfg.range_adaptations = v.range_adaptations;
  cfg.mc_inference = v.mc;
  return cfg;
}

EvalReport evaluate_model(const TulipModel<float>& model,
                          const std::vector<std::filesystem::path>& gt_frames,
                          const InferenceConfig& icfg, const EvalOptions& opts) {
  opts.validate();
  icfg.validate();
  require(!gt_frames.empty(), Errc::kInvalidArgument, "no frames to evaluate");
  const int beta = model.config().beta;
  std::vector<FrameMetrics> frames(gt_frames.size());
  parallel_for(gt_frames.size(), [&](std::size_t i) {
    const RangeImage gt = io::read_rimg(gt_frames[i]);
    const McResult res = mc_dropout_infer(model, downsample_rows(gt, beta), icfg);
    const RangeImage pred = icfg.mc_enabled ? res.filtered_image() : res.mean_image();
    frames[i] = evaluate_frame(pred, gt, opts);
    frames[i].name = gt_frames[i].filename().string();
  });
  return summarize(std::move(frames), opts);
}

EvalReport evaluate_bilinear(const std::vector<std::filesystem::path>& gt_frames, int beta,
                             const EvalOptions& opts) {
  opts.validate();
  require(!gt_frames.empty(), Errc::kInvalidArgument, "no frames to evaluate");
  std::vector<FrameMetrics> frames(gt_frames.size());
  parallel_for(gt_frames.size(), [&](std::size_t i) {
    const RangeImage gt = io::read_rimg(gt_frames[i]);
    frames[i] = evaluate_frame(bilinear_upsample(downsample_rows(gt, beta), beta), gt, opts);
    frames[i].name = gt_frames[i].filename().string();
  });
  return summarize(std::move(frames), opts);
}

}  // namespace tulip
