#include "tulip/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "tulip/checkpoint.hpp"
#include "tulip/error.hpp"
#include "tulip/io.hpp"
#include "tulip/kv_text.hpp"
#include "tulip/ops.hpp"
#include "tulip/parallel.hpp"
#include "tulip/rng.hpp"

namespace tulip {

void TrainConfig::validate() const {
  require(learning_rate >= 0.0 && std::isfinite(learning_rate), Errc::kInvalidArgument,
          "learning_rate must be finite and non-negative");
  require(weight_decay >= 0.0, Errc::kInvalidArgument, "weight_decay must be non-negative");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0,
          Errc::kInvalidArgument, "Adam betas must lie in [0, 1)");
  require(adam_eps > 0.0, Errc::kInvalidArgument, "adam_eps must be positive");
  require(batch_size >= 1, Errc::kInvalidArgument, "batch_size must be at least 1");
  require(max_steps >= 0, Errc::kInvalidArgument, "max_steps must be non-negative");
  require(checkpoint_every >= 0, Errc::kInvalidArgument, "checkpoint_every must be non-negative");
  require(warmup_steps >= 0, Errc::kInvalidArgument, "warmup_steps must be non-negative");
  require(grad_clip >= 0.0, Errc::kInvalidArgument, "grad_clip must be non-negative");
  require(micro_batch >= 0, Errc::kInvalidArgument, "micro_batch must be non-negative");
}

double TrainConfig::rate_at(int step) const {
  if (warmup_steps > 0 && step < warmup_steps)
    return learning_rate * double(step + 1) / double(warmup_steps);
  return learning_rate;
}

// ---------------------------------------------------------------------------
// Experiment config file

std::string ExperimentConfig::to_text() const {
  std::ostringstream out;
  out << network.to_text();
  out << "learning_rate=" << kv::format_double(train.learning_rate) << "\n";
  out << "weight_decay=" << kv::format_double(train.weight_decay) << "\n";
  out << "adam_beta1=" << kv::format_double(train.adam_beta1) << "\n";
  out << "adam_beta2=" << kv::format_double(train.adam_beta2) << "\n";
  out << "adam_eps=" << kv::format_double(train.adam_eps) << "\n";
  out << "batch_size=" << train.batch_size << "\n";
  out << "max_steps=" << train.max_steps << "\n";
  out << "seed=" << train.seed << "\n";
  out << "checkpoint_every=" << train.checkpoint_every << "\n";
  out << "warmup_steps=" << train.warmup_steps << "\n";
  out << "grad_clip=" << kv::format_double(train.grad_clip) << "\n";
  out << "micro_batch=" << train.micro_batch << "\n";
  return out.str();
}

ExperimentConfig ExperimentConfig::from_text(std::string_view text) {
  ExperimentConfig cfg;
  std::string network_text;
  for (const auto& [key, v] : kv::parse_lines(text)) {
    auto& t = cfg.train;
    if (key == "learning_rate") t.learning_rate = kv::parse_double(key, v);
    else if (key == "weight_decay") t.weight_decay = kv::parse_double(key, v);
    else if (key == "adam_beta1") t.adam_beta1 = kv::parse_double(key, v);
    else if (key == "adam_beta2") t.adam_beta2 = kv::parse_double(key, v);
    else if (key == "adam_eps") t.adam_eps = kv::parse_double(key, v);
    else if (key == "batch_size") t.batch_size = kv::parse_int(key, v);
    else if (key == "max_steps") t.max_steps = kv::parse_int(key, v);
    else if (key == "seed") t.seed = kv::parse_u64(key, v);
    else if (key == "checkpoint_every") t.checkpoint_every = kv::parse_int(key, v);
    else if (key == "warmup_steps") t.warmup_steps = kv::parse_int(key, v);
    else if (key == "grad_clip") t.grad_clip = kv::parse_double(key, v);
    else if (key == "micro_batch") t.micro_batch = kv::parse_int(key, v);
    else network_text += key + "=" + v + "\n";
  }
  cfg.network = NetworkConfig::from_text(network_text);
  cfg.train.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::read(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  require(in.is_open(), Errc::kIoFailure, "cannot open config: " + file.string());
  std::ostringstream text;
  text << in.rdbuf();
  return from_text(text.str());
}

// ---------------------------------------------------------------------------
// Loss and optimizer

template <typename T>
double l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  require(pred.shape() == target.shape(), Errc::kShapeMismatch,
          "l1_loss shapes " + to_string(pred.shape()) + " vs " + to_string(target.shape()));
  require(pred.size() > 0, Errc::kShapeMismatch, "l1_loss of an empty tensor");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    sum += std::abs(double(pred[i]) - double(target[i]));
  return sum / double(pred.size());
}

template <typename T>
Var<T> l1_loss(Var<T> pred, Var<T> target) {
  require(pred.shape() == target.shape(), Errc::kShapeMismatch,
          "l1_loss shapes " + to_string(pred.shape()) + " vs " + to_string(target.shape()));
  return ops::mean(ops::abs(ops::sub(pred, target)));
}

template <typename T>
void AdamState<T>::reset(const ParameterSet<T>& params) {
  step = 0;
  m = params.make_gradient_buffer();
  v = params.make_gradient_buffer();
}

template <typename T>
void adamw_step(ParameterSet<T>& params, const std::vector<Tensor<T>>& grads,
                AdamState<T>& state, const TrainConfig& cfg, double learning_rate) {
  require(grads.size() == params.size(), Errc::kShapeMismatch,
          "gradient count does not match parameters");
  if (state.m.size() != params.size()) state.reset(params);
  ++state.step;
  const T b1 = static_cast<T>(cfg.adam_beta1), b2 = static_cast<T>(cfg.adam_beta2);
  const T nb1 = T(1) - b1, nb2 = T(1) - b2;
  // Bias corrections folded into two scalars: m_hat / (sqrt(v_hat) + eps).
  const T inv_c1 = static_cast<T>(1.0 / (1.0 - std::pow(cfg.adam_beta1, double(state.step))));
  const T inv_sqrt_c2 =
      static_cast<T>(1.0 / std::sqrt(1.0 - std::pow(cfg.adam_beta2, double(state.step))));
  const T eps = static_cast<T>(cfg.adam_eps);
  const T lr = static_cast<T>(learning_rate);
  const T wd = static_cast<T>(cfg.weight_decay);
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor<T>& theta = params.at(p).value;
    const Tensor<T>& g = grads[p];
    require(g.size() == theta.size() && state.m[p].size() == theta.size(), Errc::kShapeMismatch,
            "gradient shape mismatch for " + params.at(p).name);
    T* th = theta.ptr();
    T* m = state.m[p].ptr();
    T* v = state.v[p].ptr();
    const T* gp = g.ptr();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const T gi = gp[i];
      m[i] = b1 * m[i] + nb1 * gi;
      v[i] = b2 * v[i] + nb2 * gi * gi;
      const T update = (m[i] * inv_c1) / (std::sqrt(v[i]) * inv_sqrt_c2 + eps) + wd * th[i];
      th[i] -= lr * update;
    }
  }
}

// ---------------------------------------------------------------------------
// Data

TrainingPair make_training_pair(const RangeImage& gt, int beta) {
  return {image_to_tensor<float>(downsample_rows(gt, beta, 0)), image_to_tensor<float>(gt)};
}

std::vector<TrainingPair> load_pairs(const std::vector<std::filesystem::path>& frames, int beta) {
  std::vector<TrainingPair> pairs(frames.size());
  parallel_for(frames.size(), [&](std::size_t i) {
    pairs[i] = make_training_pair(io::read_rimg(frames[i]), beta);
  });
  return pairs;
}

EpochSampler::EpochSampler(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {
  require(n >= 1, Errc::kInvalidArgument, "sampler needs at least one item");
  order_ = permutation(n_, seed_, 0);
}

std::vector<std::size_t> EpochSampler::permutation(std::size_t n, std::uint64_t seed,
                                                   std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  CounterRng rng(seed, rng_purpose::kShuffle, epoch);
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

std::vector<std::size_t> EpochSampler::next_batch(std::size_t size) {
  std::vector<std::size_t> batch;
  batch.reserve(size);
  while (batch.size() < size) {
    if (pos_ == n_) {
      ++epoch_;
      order_ = permutation(n_, seed_, epoch_);
      pos_ = 0;
    }
    batch.push_back(order_[pos_++]);
  }
  return batch;
}

namespace {

Tensor<float> stack_rows(const std::vector<const Tensor<float>*>& parts) {
  const auto rows = parts.front()->shape()[0];
  const auto cols = parts.front()->shape()[1];
  Tensor<float> out({rows * static_cast<std::int64_t>(parts.size()), cols});
  float* dst = out.ptr();
  for (const auto* p : parts) {
    std::copy(p->ptr(), p->ptr() + p->size(), dst);
    dst += p->size();
  }
  return out;
}

void check_pairs(const TulipModel<float>& model, const std::vector<TrainingPair>& data) {
  require(!data.empty(), Errc::kInvalidArgument, "training set is empty");
  const auto& cfg = model.config();
  const Shape in = data.front().input.shape();
  const Shape out = data.front().target.shape();
  require(in.size() == 2 && in[0] == cfg.input_height, Errc::kShapeMismatch,
          "input " + to_string(in) + " does not match model height " +
              std::to_string(cfg.input_height));
  require(out.size() == 2 && out[0] == cfg.output_height() && out[1] == in[1],
          Errc::kShapeMismatch,
          "target " + to_string(out) + " does not match model output for input " + to_string(in));
  for (const auto& p : data)
    require(p.input.shape() == in && p.target.shape() == out, Errc::kShapeMismatch,
            "training frames differ in shape");
}

}  // namespace

// ---------------------------------------------------------------------------
// Loop

std::filesystem::path step_checkpoint_path(const std::filesystem::path& final_path, int step) {
  char suffix[32];
  std::snprintf(suffix, sizeof suffix, "_step%06d", step);
  return final_path.parent_path() /
         (final_path.stem().string() + suffix + final_path.extension().string());
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<double>& losses) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.is_open(), Errc::kIoFailure, "cannot open for writing: " + path.string());
  out << "step,loss\n";
  for (std::size_t s = 0; s < losses.size(); ++s)
    out << s << "," << kv::format_double(losses[s]) << "\n";
  require(!out.fail(), Errc::kIoFailure, "failed writing " + path.string());
}

TrainResult train(TulipModel<float>& model, const std::vector<TrainingPair>& data,
                  const TrainConfig& cfg, const TrainOutputs& out) {
  cfg.validate();
  check_pairs(model, data);
  auto& params = model.params();
  AdamState<float> state;
  state.reset(params);
  EpochSampler sampler(data.size(), cfg.seed);
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t micro = cfg.micro_batch == 0 ? batch : static_cast<std::size_t>(cfg.micro_batch);
  const std::size_t chunks = (batch + micro - 1) / micro;
  auto save = [&](const std::filesystem::path& path) {
    write_checkpoint(path, params, model.config().to_text());
  };

  TrainResult result;
  for (int step = 0; step < cfg.max_steps; ++step) {
    const auto idx = sampler.next_batch(batch);
    std::vector<std::vector<Tensor<float>>> sinks(chunks);
    std::vector<double> chunk_loss(chunks, 0.0);
    parallel_for(chunks, [&](std::size_t c) {
      const std::size_t lo = c * micro, hi = std::min(batch, lo + micro);
      std::vector<const Tensor<float>*> xs, ys;
      for (std::size_t k = lo; k < hi; ++k) {
        xs.push_back(&data[idx[k]].input);
        ys.push_back(&data[idx[k]].target);
      }
      Tape<float> tape;
      sinks[c] = params.make_gradient_buffer();
      DropoutContext drop;
      drop.active = true;
      drop.seed = cfg.seed;
      drop.stream = hash_combine(static_cast<std::uint64_t>(step), c);
      auto pred = model.forward(tape, tape.constant(stack_rows(xs)), drop, &sinks[c]);
      auto loss = l1_loss(pred, tape.constant(stack_rows(ys)));
      chunk_loss[c] = loss.value().item();
      if (std::isfinite(chunk_loss[c])) tape.backward(loss);
    });

    // The batch loss is the pixel mean, so chunk c carries weight n_c / B.
    double loss = 0.0;
    std::vector<Tensor<float>>& grads = sinks[0];
    for (std::size_t c = 0; c < chunks; ++c) {
      const std::size_t n = std::min(batch, (c + 1) * micro) - c * micro;
      const double w = double(n) / double(batch);
      loss += w * chunk_loss[c];
      if (chunks == 1) break;
      for (std::size_t p = 0; p < grads.size(); ++p) {
        float* dst = grads[p].ptr();
        const float* src = sinks[c][p].ptr();
        for (std::size_t i = 0; i < grads[p].size(); ++i)
          dst[i] = c == 0 ? static_cast<float>(w * src[i]) : dst[i] + static_cast<float>(w * src[i]);
      }
    }
    if (!std::isfinite(loss))
      fail(Errc::kNumericalFailure, "non-finite loss " + kv::format_double(loss) + " at step " +
                                        std::to_string(step));
    if (cfg.grad_clip > 0.0) {
      double sq = 0.0;
      for (const auto& g : grads)
        for (float x : g.data()) sq += double(x) * double(x);
      const double norm = std::sqrt(sq);
      if (norm > cfg.grad_clip) {
        const auto s = static_cast<float>(cfg.grad_clip / norm);
        for (auto& g : grads)
          for (float& x : g.data()) x *= s;
      }
    }
    adamw_step(params, grads, state, cfg, cfg.rate_at(step));
    result.losses.push_back(loss);
    result.steps = step + 1;
    if (out.on_step) out.on_step(step, loss);
    if (cfg.checkpoint_every > 0 && !out.checkpoint.empty() &&
        (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.max_steps)
      save(step_checkpoint_path(out.checkpoint, step + 1));
  }
  if (!out.checkpoint.empty()) save(out.checkpoint);
  if (!out.loss_csv.empty()) write_loss_csv(out.loss_csv, result.losses);
  return result;
}

TrainResult train(TulipModel<float>& model, const DatasetManifest& manifest,
                  const TrainConfig& cfg, const TrainOutputs& out) {
  manifest.validate();
  const auto frames = manifest.paths("train");
  require(!frames.empty(), Errc::kInvalidArgument, "manifest has no train frames");
  return train(model, load_pairs(frames, model.config().beta), cfg, out);
}

TulipModel<float> load_model(const std::filesystem::path& checkpoint) {
  const CheckpointData data = read_checkpoint(checkpoint);
  require(!data.config_text.empty(), Errc::kFormatError,
          "checkpoint has no configuration record: " + checkpoint.string());
  TulipModel<float> model(NetworkConfig::from_text(data.config_text));
  load_parameters(data, model.params());
  return model;
}

void save_model(const std::filesystem::path& checkpoint, const TulipModel<float>& model) {
  write_checkpoint(checkpoint, model.params(), model.config().to_text());
}

double dataset_l1(const TulipModel<float>& model, const std::vector<TrainingPair>& data) {
  check_pairs(model, data);
  constexpr std::size_t kChunk = 8;
  const std::size_t chunks = (data.size() + kChunk - 1) / kChunk;
  std::vector<double> sums(chunks, 0.0);
  parallel_for(chunks, [&](std::size_t c) {
    std::vector<const Tensor<float>*> xs, ys;
    for (std::size_t k = c * kChunk; k < std::min(data.size(), (c + 1) * kChunk); ++k) {
      xs.push_back(&data[k].input);
      ys.push_back(&data[k].target);
    }
    Tape<float> tape(false);
    auto pred = model.forward(tape, tape.constant(stack_rows(xs)), DropoutContext{});
    const Tensor<float> target = stack_rows(ys);
    sums[c] = l1_loss(pred.value(), target) * double(target.size());
  });
  double total = 0.0;
  for (double s : sums) total += s;
  return total / (double(data.size()) * double(data.front().target.size()));
}

template double l1_loss<float>(const Tensor<float>&, const Tensor<float>&);
template double l1_loss<double>(const Tensor<double>&, const Tensor<double>&);
template Var<float> l1_loss<float>(Var<float>, Var<float>);
template Var<double> l1_loss<double>(Var<double>, Var<double>);
template struct AdamState<float>;
template struct AdamState<double>;
template void adamw_step<float>(ParameterSet<float>&, const std::vector<Tensor<float>>&,
                                AdamState<float>&, const TrainConfig&, double);
template void adamw_step<double>(ParameterSet<double>&, const std::vector<Tensor<double>>&,
                                 AdamState<double>&, const TrainConfig&, double);

}  // namespace tulip
