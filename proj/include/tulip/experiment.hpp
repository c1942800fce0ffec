#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "tulip/eval.hpp"
#include "tulip/network.hpp"

namespace tulip {

// Ablation axes of the network configuration.
enum class WindowMode { kRect, kSquare };

// Square windows are 4x4 tokens, the same token count as the default 2x8.
void set_window_mode(NetworkConfig& cfg, WindowMode mode);
// "1x4", "2x2" or "4x4" (rows x cols).
void set_patch(NetworkConfig& cfg, std::string_view patch);
// Four encoder stages; the extra stage repeats the last head count.
void set_large(NetworkConfig& cfg);

struct AblationVariant {
  std::string name;
  std::string patch;  // as accepted by set_patch
  WindowMode window = WindowMode::kRect;
  bool range_adaptations = true;
  bool mc = true;
};

// Baseline, Model 1-4 and TULIP, in ablation order.
std::vector<AblationVariant> ablation_grid();
NetworkConfig apply_variant(NetworkConfig cfg, const AblationVariant& v);

// Runs the model on every ground-truth frame (rows decimated by beta) and
// scores the prediction. MC-filtered output when icfg.mc_enabled.
EvalReport evaluate_model(const TulipModel<float>& model,
                          const std::vector<std::filesystem::path>& gt_frames,
                          const InferenceConfig& icfg, const EvalOptions& opts = {});
// Same protocol with vertical bilinear upsampling in place of the model.
EvalReport evaluate_bilinear(const std::vector<std::filesystem::path>& gt_frames, int beta,
                             const EvalOptions& opts = {});

}  // namespace tulip
