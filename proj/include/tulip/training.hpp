#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "tulip/autograd.hpp"
#include "tulip/geometry.hpp"
#include "tulip/network.hpp"
#include "tulip/synthdata.hpp"

namespace tulip {

struct TrainConfig {
  double learning_rate = 5e-4;
  double weight_decay = 0.05;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 8;
  int max_steps = 2000;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // 0: only the final checkpoint
  int warmup_steps = 0;      // linear warmup; 0 keeps the rate constant
  double grad_clip = 0.0;    // global L2 norm cap; 0 disables
  // Samples per forward/backward chunk. Chunks may run on different threads;
  // their gradients are summed in chunk order, so results depend on this
  // value but never on the thread count. 0 puts the whole batch in one chunk.
  int micro_batch = 0;

  void validate() const;
  double rate_at(int step) const;
};

// Network and training keys in one key=value file. Unknown keys are rejected.
struct ExperimentConfig {
  NetworkConfig network;
  TrainConfig train;

  std::string to_text() const;
  static ExperimentConfig from_text(std::string_view text);
  static ExperimentConfig read(const std::filesystem::path& file);
};

// Mean absolute difference over all elements.
template <typename T>
double l1_loss(const Tensor<T>& pred, const Tensor<T>& target);
template <typename T>
Var<T> l1_loss(Var<T> pred, Var<T> target);

template <typename T>
struct AdamState {
  std::int64_t step = 0;
  std::vector<Tensor<T>> m, v;

  void reset(const ParameterSet<T>& params);
};

// Decoupled AdamW on every parameter, with the given learning rate.
template <typename T>
void adamw_step(ParameterSet<T>& params, const std::vector<Tensor<T>>& grads,
                AdamState<T>& state, const TrainConfig& cfg, double learning_rate);

// Low-resolution input and ground truth of one frame, normalized.
struct TrainingPair {
  Tensor<float> input;   // [H/beta, W]
  Tensor<float> target;  // [H, W]
};
TrainingPair make_training_pair(const RangeImage& gt, int beta);
std::vector<TrainingPair> load_pairs(const std::vector<std::filesystem::path>& frames, int beta);

// Concatenated per-epoch permutations of [0, n); epoch e is a Fisher-Yates
// shuffle keyed by (seed, e).
class EpochSampler {
 public:
  EpochSampler(std::size_t n, std::uint64_t seed);
  std::vector<std::size_t> next_batch(std::size_t size);
  std::uint64_t epoch() const { return epoch_; }

  static std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed,
                                              std::uint64_t epoch);

 private:
  std::size_t n_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::size_t pos_ = 0;
  std::vector<std::size_t> order_;
};

struct TrainOutputs {
  std::filesystem::path checkpoint;  // final checkpoint; empty skips writing
  std::filesystem::path loss_csv;    // empty skips writing
  // Called after each step with (step, loss); may be empty.
  std::function<void(int, double)> on_step;
};

struct TrainResult {
  std::vector<double> losses;  // loss of step s, computed before its update
  int steps = 0;
};

// Trains on the given pairs. Throws NumericalFailure on a non-finite loss.
TrainResult train(TulipModel<float>& model, const std::vector<TrainingPair>& data,
                  const TrainConfig& cfg, const TrainOutputs& out = {});
// Loads the manifest's train split first.
TrainResult train(TulipModel<float>& model, const DatasetManifest& manifest,
                  const TrainConfig& cfg, const TrainOutputs& out = {});

// Eval-mode mean L1 over the pairs (normalized units).
double dataset_l1(const TulipModel<float>& model, const std::vector<TrainingPair>& data);

void write_loss_csv(const std::filesystem::path& path, const std::vector<double>& losses);

// Model from a checkpoint carrying its configuration record.
TulipModel<float> load_model(const std::filesystem::path& checkpoint);
void save_model(const std::filesystem::path& checkpoint, const TulipModel<float>& model);

// Path of the intermediate checkpoint written after `step` steps.
std::filesystem::path step_checkpoint_path(const std::filesystem::path& final_path, int step);

}  // namespace tulip
