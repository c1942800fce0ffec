#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "tulip/autograd.hpp"
#include "tulip/geometry.hpp"
#include "tulip/ops.hpp"
#include "tulip/rng.hpp"

namespace tulip {

struct NetworkConfig {
  // Low-resolution input the model is built for. The width may grow at
  // inference time in multiples of width_multiple(); the height may not.
  int input_height = 16;
  int input_width = 256;
  int patch_h = 1;
  int patch_w = 4;
  int embed_dim = 32;
  int num_stages = 3;
  int blocks_per_stage = 2;
  int bottleneck_blocks = 2;
  int window_h = 2;
  int window_w = 8;
  bool rectangular = true;
  std::vector<int> heads_per_stage{2, 4, 8};
  double mlp_ratio = 4.0;
  double dropout_p = 0.1;
  int beta = 4;
  // Circular horizontal padding, patch unmerging and the pixel-shuffle head.
  // When off: the horizontal seam is masked like the vertical one, decoder
  // upsampling duplicates tokens, and the head is a per-pixel patch expansion.
  bool range_adaptations = true;
  double ln_eps = 1e-5;
  // Whether inference defaults to MC dropout. Training ignores it.
  bool mc_inference = true;

  void validate() const;
  int output_height() const { return beta * input_height; }
  int channels(int stage) const { return embed_dim << stage; }
  int width_multiple() const { return patch_w * window_w * (1 << num_stages); }

  // key=value lines; unknown keys are rejected.
  std::string to_text() const;
  static NetworkConfig from_text(std::string_view text);

  static NetworkConfig tulip();
  static NetworkConfig tulip_large();
  bool operator==(const NetworkConfig&) const = default;
};

// Token grid and attention geometry of one encoder stage; the last entry is
// the bottleneck. Windows are clamped to the grid so small inputs stay valid.
struct StageGeometry {
  int grid_h = 0;
  int grid_w = 0;
  int channels = 0;
  int heads = 0;
  int window_h = 0;
  int window_w = 0;
  int merge_fh = 2;  // vertical merge factor; 1 once the grid is a single row
};
std::vector<StageGeometry> stage_geometry(const NetworkConfig& cfg);

// Index bookkeeping for (shifted) window attention on an h x w token grid,
// repeated for `batch` grids stacked row-wise. Window-ordered position
// p = window * T + t, windows row-major over each grid, t row-major inside
// the window.
struct WindowPlan {
  int grid_h = 0;
  int grid_w = 0;
  int window_h = 0;
  int window_w = 0;
  int shift_h = 0;
  int shift_w = 0;
  ops::RowIndex partition;  // window-ordered position -> grid token
  ops::RowIndex restore;    // grid token -> window-ordered position
  // blocked[w * T * T + i * T + j] != 0 when token i may not attend to j.
  std::vector<std::uint8_t> blocked;
  bool masked = false;
  int batch = 1;  // samples stacked row-wise, each grid_h x grid_w

  int windows() const { return batch * (grid_h / window_h) * (grid_w / window_w); }
  int tokens_per_window() const { return window_h * window_w; }
};

// Cyclic shift is (window_h/2, window_w/2) per dimension, or 0 where the
// window already spans the grid. Pairs of tokens wrapped across the vertical
// seam are masked; the horizontal seam is masked only if requested.
WindowPlan make_window_plan(int grid_h, int grid_w, int window_h, int window_w, bool shift,
                            bool mask_horizontal_seam, int batch = 1);

// Index into a [(2*window_h-1)*(2*window_w-1), heads] bias table for every
// (query, key) pair of one window, row-major over T x T.
ops::RowIndex relative_position_index(int window_h, int window_w);

struct DropoutContext {
  double p = 0.0;
  bool active = false;
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;

  CounterRng rng(std::string_view site) const {
    return CounterRng(seed, rng_purpose::kDropout, hash_combine(stream, fnv1a(site)));
  }
};

template <typename T>
struct AttentionWeights {
  Var<T> qkv_w, qkv_b, proj_w, proj_b;
  Var<T> rel_bias;  // [(2wh-1)(2ww-1), heads]
};

template <typename T>
struct BlockWeights {
  Var<T> norm1_g, norm1_b;
  AttentionWeights<T> attn;
  Var<T> norm2_g, norm2_b;
  Var<T> fc1_w, fc1_b, fc2_w, fc2_b;
};

// img [H, W] -> tokens [(H/ph)*(W/pw), C], patches row-major.
template <typename T>
Var<T> patch_embed(Var<T> img, int patch_h, int patch_w, Var<T> weight, Var<T> bias);

// Multi-head self-attention inside each window of x [h*w, C]; output has the
// grid order of x. Dropout is applied to the projection output.
template <typename T>
Var<T> window_attention(Var<T> x, const WindowPlan& plan, int heads,
                        const AttentionWeights<T>& w, const DropoutContext& drop,
                        std::string_view site);

// Pre-norm: x + attn(LN(x)), then + MLP(LN(.)) with GELU.
template <typename T>
Var<T> swin_block(Var<T> x, const WindowPlan& plan, int heads, const BlockWeights<T>& w, T eps,
                  const DropoutContext& drop, std::string_view site);

// [h*w, C] -> [(h/fh)*(w/fw), fh*fw*C], each fh x fw neighbourhood
// concatenated in row-major order.
template <typename T>
Var<T> space_to_channels(Var<T> x, int h, int w, int fh, int fw);
// Inverse of space_to_channels: [h*w, fh*fw*K] -> [(h*fh)*(w*fw), K].
template <typename T>
Var<T> channels_to_space(Var<T> x, int h, int w, int fh, int fw);

// 2x2 (or 1x2 on a single-row grid) concat, LN, bias-free linear to 2C.
// h is the per-sample grid height of `batch` row-stacked samples.
template <typename T>
Var<T> patch_merge(Var<T> x, int h, int w, Var<T> norm_g, Var<T> norm_b, Var<T> reduction,
                   T eps, int batch = 1);
// Linear C -> fh*2*(C/2), then channels_to_space into an fh x 2 block.
template <typename T>
Var<T> patch_unmerge(Var<T> x, int h, int w, int fh, Var<T> expand);
// Upsampling used without range adaptations: each token is duplicated into
// its fh x 2 block and projected C -> C/2.
template <typename T>
Var<T> token_duplicate(Var<T> x, int h, int w, int fh, Var<T> project);

// concat([decoder, encoder], channels) then linear 2C -> C.
template <typename T>
Var<T> skip_fuse(Var<T> decoder, Var<T> encoder, Var<T> weight, Var<T> bias);

// tokens [hg*wg, C] -> image [hg*rv, wg*rh]: 1x1 expansion to rv*rh channels,
// leaky ReLU(0.01), pixel shuffle (row-major inside each block), then a
// scalar 1x1 convolution.
template <typename T>
Var<T> projection_head(Var<T> x, int hg, int wg, int rv, int rh, Var<T> expand_w,
                       Var<T> expand_b, Var<T> out_w, Var<T> out_b);
// Head used without range adaptations: linear C -> rv*rh*C, rearrange to
// pixels, LN, linear C -> 1.
template <typename T>
Var<T> patch_expand_head(Var<T> x, int hg, int wg, int rv, int rh, Var<T> expand_w,
                         Var<T> norm_g, Var<T> norm_b, Var<T> out_w, Var<T> out_b, T eps);

template <typename T>
class TulipModel {
 public:
  explicit TulipModel(NetworkConfig cfg, std::uint64_t init_seed = 0);

  const NetworkConfig& config() const { return cfg_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }
  std::size_t parameter_count() const { return params_.scalar_count(); }

  // image [H_l, W] in normalized range units -> unclamped [beta*H_l, W].
  // B images stacked row-wise ([B*H_l, W]) run as one batch and come back
  // stacked the same way. Gradients of the weights go to sinks
  // (ParameterSet order) when given.
  Var<T> forward(Tape<T>& tape, Var<T> image, const DropoutContext& drop,
                 std::vector<Tensor<T>>* sinks = nullptr) const;

  // Eval-mode forward clamped to [0, 1].
  Tensor<T> predict(const Tensor<T>& image) const;
  // Forward with dropout forced active on the given stream, clamped.
  Tensor<T> predict_stochastic(const Tensor<T>& image, std::uint64_t seed,
                               std::uint64_t stream) const;

 private:
  void init_parameters(std::uint64_t seed);

  NetworkConfig cfg_;
  std::vector<StageGeometry> geometry_;
  ParameterSet<T> params_;
};

struct InferenceConfig {
  int mc_passes = 8;
  double mc_threshold = 0.5;  // meters
  bool mc_enabled = true;
  std::uint64_t seed = 0;

  void validate() const;
};

struct McResult {
  SensorIntrinsics intrinsics;
  std::vector<double> mean;    // meters
  std::vector<double> stddev;  // meters, population std-dev over passes
  std::vector<std::uint8_t> valid;
  std::vector<std::vector<double>> passes;  // meters, only when requested

  RangeImage mean_image() const;
  RangeImage std_image() const;
  // Mean with pixels whose std exceeds the threshold set to 0.
  RangeImage filtered_image() const;
  std::size_t valid_count() const;
};

// Normalised tensor [H, W] of a range image and back (clamped to the valid
// range on the way out).
template <typename T>
Tensor<T> image_to_tensor(const RangeImage& img);
template <typename T>
RangeImage tensor_to_image(const Tensor<T>& t, const SensorIntrinsics& intr);

// Output intrinsics of the model for a low-resolution input.
SensorIntrinsics upsampled_intrinsics(const SensorIntrinsics& low, int beta);

// N stochastic passes with distinct dropout streams, or a single
// deterministic pass when MC is disabled (std 0, all valid).
template <typename T>
McResult mc_dropout_infer(const TulipModel<T>& model, const RangeImage& low,
                          const InferenceConfig& icfg, bool keep_passes = false);

extern template class TulipModel<float>;
extern template class TulipModel<double>;

}  // namespace tulip
