// tulip: data generation, training, inference, evaluation and file conversion.

#include <malloc.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tulip/error.hpp"
#include "tulip/eval.hpp"
#include "tulip/experiment.hpp"
#include "tulip/io.hpp"
#include "tulip/kv_text.hpp"
#include "tulip/parallel.hpp"
#include "tulip/synthdata.hpp"
#include "tulip/training.hpp"

namespace fs = std::filesystem;
using namespace tulip;

namespace {

enum ExitCode { kOk = 0, kUsage = 2, kIo = 3, kNumerical = 4 };

int exit_code_for(Errc code) {
  switch (code) {
    case Errc::kIoFailure:
    case Errc::kFormatError:
      return kIo;
    case Errc::kNumericalFailure:
      return kNumerical;
    default:
      return kUsage;
  }
}

void require_file(const fs::path& p, const std::string& what) {
  require(fs::is_regular_file(p), Errc::kIoFailure, what + " not found: " + p.string());
}

void prepare_output(const fs::path& p) {
  const fs::path parent = p.parent_path();
  if (parent.empty()) return;
  std::error_code ec;
  fs::create_directories(parent, ec);
  require(!ec && fs::is_directory(parent), Errc::kIoFailure,
          "cannot create directory " + parent.string());
}

fs::path with_suffix(const fs::path& p, const std::string& suffix, const std::string& ext) {
  return p.parent_path() / (p.stem().string() + suffix + ext);
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(kv::parse_double("bins", kv::trim(item)));
  return out;
}

// Ground-truth frames named by a manifest (its test split) or a directory.
std::vector<fs::path> gt_frames(const fs::path& p) {
  if (fs::is_regular_file(p)) return DatasetManifest::read(p).paths("test");
  require(fs::is_directory(p), Errc::kIoFailure, "not found: " + p.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(p))
    if (e.is_regular_file() && e.path().extension() == ".rimg") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

// Input size follows the dataset frames.
void fit_to_manifest(NetworkConfig& cfg, const DatasetManifest& m) {
  const int h = kv::parse_int("height", m.param("height"));
  const int w = kv::parse_int("width", m.param("width"));
  require(h % cfg.beta == 0, Errc::kInvalidArgument,
          "frame height " + std::to_string(h) + " not divisible by beta " + std::to_string(cfg.beta));
  cfg.input_height = h / cfg.beta;
  cfg.input_width = w;
}

void print_progress(int step, double loss, int total) {
  if (step % 100 == 0 || step + 1 == total)
    std::fprintf(stderr, "step %d/%d loss %.6f\n", step, total, loss);
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  int frames = 0;
  std::uint64_t seed = 0;
  fs::path out;
  int height = 64, width = 256;
  double fov_deg = 30.0, max_range = 80.0, split = 0.8, jitter = 0.0;
};

int run_gen_data(const GenDataArgs& a) {
  require(a.frames >= 1, Errc::kInvalidArgument, "--frames must be at least 1");
  SceneTemplate tmpl;
  tmpl.intrinsics = SensorIntrinsics::symmetric(a.height, a.width, a.fov_deg, a.max_range);
  tmpl.range_jitter = a.jitter;
  const auto m = generate_dataset(a.frames, tmpl, a.seed, a.out, a.split);
  std::printf("wrote %zu train + %zu test frames to %s\n", m.paths("train").size(),
              m.paths("test").size(), a.out.string().c_str());
  return kOk;
}

struct TrainArgs {
  fs::path config, data, out, loss_csv;
  std::string arch = "tulip";
  std::optional<std::string> window, patch;
  bool no_circular_pad = false, no_mc = false, quiet = false;
};

int run_train(const TrainArgs& a) {
  ExperimentConfig cfg;
  if (!a.config.empty()) {
    require_file(a.config, "config");
    cfg = ExperimentConfig::read(a.config);
  }
  require_file(a.data, "manifest");
  const auto manifest = DatasetManifest::read(a.data);
  manifest.validate();
  auto& net = cfg.network;
  if (a.arch == "tulip-l") set_large(net);
  if (a.window) set_window_mode(net, *a.window == "square" ? WindowMode::kSquare : WindowMode::kRect);
  if (a.patch) set_patch(net, *a.patch);
  if (a.no_circular_pad) net.range_adaptations = false;
  if (a.no_mc) net.mc_inference = false;
  fit_to_manifest(net, manifest);
  net.validate();
  prepare_output(a.out);

  TulipModel<float> model(net, cfg.train.seed);
  TrainOutputs out;
  out.checkpoint = a.out;
  out.loss_csv = a.loss_csv.empty() ? with_suffix(a.out, "_loss", ".csv") : a.loss_csv;
  prepare_output(out.loss_csv);
  const int total = cfg.train.max_steps;
  if (!a.quiet) out.on_step = [total](int s, double l) { print_progress(s, l, total); };
  std::fprintf(stderr, "training %zu parameters on %zu frames\n", model.parameter_count(),
               manifest.paths("train").size());
  const auto res = train(model, manifest, cfg.train, out);
  std::printf("trained %d steps, final loss %.6f, checkpoint %s\n", res.steps,
              res.losses.empty() ? 0.0 : res.losses.back(), a.out.string().c_str());
  return kOk;
}

struct InferArgs {
  fs::path ckpt, in, out;
  std::optional<int> mc_passes;
  double mc_threshold = 0.5;
  std::uint64_t seed = 0;
  bool no_mc = false;
};

struct InferJob {
  fs::path out;
  RangeImage low;
};

// Single-file output puts the std image and mask next to the prediction;
// directory output puts them in std/ and mask/ so the .rimg set stays clean.
void write_mc_outputs(const McResult& res, const fs::path& out, bool mc, bool in_dir) {
  io::write_rimg(out, mc ? res.filtered_image() : res.mean_image());
  if (!mc) return;
  const fs::path dir = out.parent_path();
  const std::string stem = out.stem().string();
  const fs::path std_path = in_dir ? dir / "std" / (stem + ".rimg") : with_suffix(out, "_std", ".rimg");
  const fs::path mask_path = in_dir ? dir / "mask" / (stem + ".png") : with_suffix(out, "_mask", ".png");
  prepare_output(std_path);
  prepare_output(mask_path);
  io::write_rimg(std_path, res.std_image());
  SensorIntrinsics mask_intr = res.intrinsics;
  mask_intr.max_range = 1.0f;
  RangeImage mask(mask_intr);
  for (std::size_t i = 0; i < res.valid.size(); ++i) mask.pixels()[i] = res.valid[i] ? 1.0f : 0.0f;
  io::write_png(mask_path, mask);
}

int run_infer(const InferArgs& a) {
  require_file(a.ckpt, "checkpoint");
  const TulipModel<float> model = load_model(a.ckpt);
  const auto& cfg = model.config();
  InferenceConfig icfg;
  icfg.mc_enabled = cfg.mc_inference;
  if (a.mc_passes) {
    icfg.mc_enabled = true;
    icfg.mc_passes = *a.mc_passes;
  }
  if (a.no_mc) icfg.mc_enabled = false;
  icfg.mc_threshold = a.mc_threshold;
  icfg.seed = a.seed;
  icfg.validate();

  // A single .rimg in, a single .rimg out; a directory of low-resolution
  // frames or a manifest (test split, rows decimated here) writes a directory.
  std::vector<InferJob> jobs;
  bool in_dir = true;
  if (fs::is_directory(a.in)) {
    for (const auto& p : gt_frames(a.in)) jobs.push_back({a.out / p.filename(), io::read_rimg(p)});
  } else if (a.in.extension() == ".rimg") {
    require_file(a.in, "input");
    jobs.push_back({a.out, io::read_rimg(a.in)});
    in_dir = false;
  } else {
    require_file(a.in, "input");
    for (const auto& p : gt_frames(a.in))
      jobs.push_back({a.out / p.filename(), downsample_rows(io::read_rimg(p), cfg.beta)});
  }
  require(!jobs.empty(), Errc::kInvalidArgument, "no input frames in " + a.in.string());
  for (const auto& j : jobs)
    require(j.low.height() == cfg.input_height, Errc::kShapeMismatch,
            "input height " + std::to_string(j.low.height()) + " does not match checkpoint (" +
                std::to_string(cfg.input_height) + ")");
  for (const auto& j : jobs) prepare_output(j.out);
  for (const auto& j : jobs) write_mc_outputs(mc_dropout_infer(model, j.low, icfg), j.out, icfg.mc_enabled, in_dir);
  std::printf("wrote %zu frame(s), MC %s\n", jobs.size(),
              icfg.mc_enabled ? ("on, " + std::to_string(icfg.mc_passes) + " passes").c_str() : "off");
  return kOk;
}

struct EvalArgs {
  fs::path pred, gt, out;
  std::string bins = "0,10,20,30";
  double voxel_size = kDefaultVoxelSize;
};

int run_eval(const EvalArgs& a) {
  EvalOptions opts;
  opts.bin_edges = parse_list(a.bins);
  opts.voxel_size = a.voxel_size;
  opts.validate();
  const auto report = evaluate_frames(a.pred, gt_frames(a.gt), opts);
  prepare_output(a.out);
  write_report_csv(a.out, report);
  write_bins_csv(with_suffix(a.out, "_bins", ".csv"), report);
  std::printf("%s", report_summary(report).c_str());
  return kOk;
}

struct AblateArgs {
  fs::path config, data, out;
  int mc_passes = 8;
  double mc_threshold = 0.5;
  bool quiet = false;
};

int run_ablate(const AblateArgs& a) {
  ExperimentConfig base;
  if (!a.config.empty()) {
    require_file(a.config, "config");
    base = ExperimentConfig::read(a.config);
  }
  require_file(a.data, "manifest");
  const auto manifest = DatasetManifest::read(a.data);
  manifest.validate();
  const auto test = manifest.paths("test");
  require(!test.empty(), Errc::kInvalidArgument, "manifest has no test frames");
  fit_to_manifest(base.network, manifest);
  const auto grid = ablation_grid();
  for (const auto& v : grid) apply_variant(base.network, v).validate();
  std::error_code ec;
  fs::create_directories(a.out, ec);
  require(!ec && fs::is_directory(a.out), Errc::kIoFailure, "cannot create " + a.out.string());

  const auto pairs = load_pairs(manifest.paths("train"), base.network.beta);
  std::ostringstream csv;
  csv << "model,patch,window,cp_pu_ps,mc,parameters,mae,iou,chamfer\n";
  auto row = [&](const std::string& name, const std::string& patch, const std::string& window,
                 const std::string& cp, const std::string& mc, const std::string& params,
                 const EvalReport& r) {
    csv << name << "," << patch << "," << window << "," << cp << "," << mc << "," << params << ","
        << kv::format_double(r.mae) << "," << kv::format_double(r.iou) << ","
        << kv::format_double(r.chamfer) << "\n";
    std::printf("%-9s MAE %.4f  IoU %.4f  CD %.4f\n", name.c_str(), r.mae, r.iou, r.chamfer);
    std::fflush(stdout);
  };
  row("bilinear", "", "", "", "", "0", evaluate_bilinear(test, base.network.beta));

  // Variants differing only in the MC flag share one trained network.
  std::optional<TulipModel<float>> model;
  NetworkConfig trained;
  for (const auto& v : grid) {
    NetworkConfig net = apply_variant(base.network, v);
    NetworkConfig key = net;
    key.mc_inference = trained.mc_inference;
    if (!model || !(key == trained)) {
      std::fprintf(stderr, "training %s\n", v.name.c_str());
      model.emplace(net, base.train.seed);
      TrainOutputs out;
      out.checkpoint = a.out / (v.name + ".tckpt");
      out.loss_csv = a.out / (v.name + "_loss.csv");
      const int total = base.train.max_steps;
      if (!a.quiet) out.on_step = [total](int s, double l) { print_progress(s, l, total); };
      train(*model, pairs, base.train, out);
      trained = net;
    }
    InferenceConfig icfg;
    icfg.mc_enabled = v.mc;
    icfg.mc_passes = a.mc_passes;
    icfg.mc_threshold = a.mc_threshold;
    icfg.seed = base.train.seed;
    row(v.name, v.patch, v.window == WindowMode::kSquare ? "square" : "rect",
        v.range_adaptations ? "1" : "0", v.mc ? "1" : "0",
        std::to_string(model->parameter_count()), evaluate_model(*model, test, icfg));
  }
  const fs::path csv_path = a.out / "ablation.csv";
  std::ofstream f(csv_path, std::ios::binary | std::ios::trunc);
  require(f.is_open(), Errc::kIoFailure, "cannot write " + csv_path.string());
  f << csv.str();
  require(!f.fail(), Errc::kIoFailure, "failed writing " + csv_path.string());
  std::printf("wrote %s\n", csv_path.string().c_str());
  return kOk;
}

struct ConvertArgs {
  std::string from, to;
  fs::path in, out;
  int height = 64, width = 256;
  double fov_deg = 30.0, max_range = 80.0;
};

int run_convert(const ConvertArgs& a) {
  require_file(a.in, "input");
  prepare_output(a.out);
  const auto intr = SensorIntrinsics::symmetric(a.height, a.width, a.fov_deg, a.max_range);
  RangeImage img;
  if (a.from == "raw-f32") img = io::read_raw_f32(a.in, intr);
  else if (a.from == "rimg") img = io::read_rimg(a.in);
  else {
    const auto binned = pointcloud_to_range_image(io::read_ply(a.in), intr);
    if (binned.dropped) std::fprintf(stderr, "%zu points outside the sensor model\n", binned.dropped);
    img = binned.image;
  }
  if (a.to == "rimg") io::write_rimg(a.out, img);
  else if (a.to == "raw-f32") io::write_raw_f32(a.out, img);
  else io::write_ply(a.out, range_image_to_pointcloud(img));
  return kOk;
}

int run_export(const fs::path& in, const fs::path& out, bool ply) {
  require_file(in, "input");
  prepare_output(out);
  const RangeImage img = io::read_rimg(in);
  if (ply) {
    const auto pc = range_image_to_pointcloud(img);
    io::write_ply(out, pc);
    std::printf("wrote %zu points to %s\n", pc.size(), out.string().c_str());
  } else {
    io::write_png(out, img);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  // Tape buffers are freed and reallocated every step; keep them off mmap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"LiDAR range-image upsampling toolkit"};
  app.require_subcommand(1);
  std::size_t threads = 0;
  app.add_option("--threads", threads, "worker cap (default: $TULIP_THREADS or all cores)");

  std::function<int()> action;

  GenDataArgs gen;
  auto* g = app.add_subcommand("gen-data", "ray-cast a synthetic dataset");
  g->add_option("--frames", gen.frames, "number of frames")->required();
  g->add_option("--seed", gen.seed);
  g->add_option("--out", gen.out, "output directory")->required();
  g->add_option("--height", gen.height, "rows of the full-resolution sensor");
  g->add_option("--width", gen.width);
  g->add_option("--fov-deg", gen.fov_deg, "vertical field of view, symmetric about the horizon");
  g->add_option("--max-range", gen.max_range);
  g->add_option("--split", gen.split, "train fraction");
  g->add_option("--jitter", gen.jitter, "range noise std-dev in meters");
  g->callback([&] { action = [&] { return run_gen_data(gen); }; });

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model on a manifest's train split");
  t->add_option("--config", tr.config, "key=value experiment config");
  t->add_option("--data", tr.data, "dataset manifest")->required();
  t->add_option("--out", tr.out, "checkpoint path")->required();
  t->add_option("--loss-csv", tr.loss_csv, "default: <out stem>_loss.csv");
  t->add_option("--arch", tr.arch)->check(CLI::IsMember({"tulip", "tulip-l"}));
  t->add_option("--window", tr.window)->check(CLI::IsMember({"rect", "square"}));
  t->add_option("--patch", tr.patch)->check(CLI::IsMember({"1x4", "2x2", "4x4"}));
  t->add_flag("--no-circular-pad", tr.no_circular_pad,
              "disable circular padding, patch unmerging and the pixel-shuffle head");
  t->add_flag("--no-mc", tr.no_mc, "checkpoint defaults to deterministic inference");
  t->add_flag("--quiet", tr.quiet);
  t->callback([&] { action = [&] { return run_train(tr); }; });

  InferArgs inf;
  auto* in = app.add_subcommand("infer", "upsample range images");
  in->add_option("--ckpt", inf.ckpt)->required();
  in->add_option("--in", inf.in, ".rimg, directory of low-res frames, or manifest")->required();
  in->add_option("--out", inf.out, ".rimg, or a directory for multi-frame input")->required();
  in->add_option("--mc-passes", inf.mc_passes, "enable MC dropout with N >= 2 passes");
  in->add_option("--mc-threshold", inf.mc_threshold, "std-dev cut in meters");
  in->add_option("--seed", inf.seed);
  in->add_flag("--no-mc", inf.no_mc);
  in->callback([&] { action = [&] { return run_infer(inf); }; });

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "score predictions against ground truth");
  e->add_option("--pred", ev.pred)->required();
  e->add_option("--gt", ev.gt, "directory or manifest (test split)")->required();
  e->add_option("--out", ev.out, "per-frame CSV; bins go to <stem>_bins.csv")->required();
  e->add_option("--bins", ev.bins, "range bin edges in meters");
  e->add_option("--voxel-size", ev.voxel_size);
  e->callback([&] { action = [&] { return run_eval(ev); }; });

  AblateArgs ab;
  auto* a = app.add_subcommand("ablate", "train and score the ablation grid");
  a->add_option("--config", ab.config);
  a->add_option("--data", ab.data, "dataset manifest")->required();
  a->add_option("--out", ab.out, "output directory")->required();
  a->add_option("--mc-passes", ab.mc_passes);
  a->add_option("--mc-threshold", ab.mc_threshold);
  a->add_flag("--quiet", ab.quiet);
  a->callback([&] { action = [&] { return run_ablate(ab); }; });

  ConvertArgs cv;
  auto* c = app.add_subcommand("convert", "convert between raw-f32, rimg and ply");
  c->add_option("--from", cv.from)->required()->check(CLI::IsMember({"raw-f32", "rimg", "ply"}));
  c->add_option("--to", cv.to)->required()->check(CLI::IsMember({"raw-f32", "rimg", "ply"}));
  c->add_option("--in", cv.in)->required();
  c->add_option("--out", cv.out)->required();
  c->add_option("--height", cv.height, "sensor model for raw-f32 and ply input");
  c->add_option("--width", cv.width);
  c->add_option("--fov-deg", cv.fov_deg);
  c->add_option("--max-range", cv.max_range);
  c->callback([&] { action = [&] { return run_convert(cv); }; });

  fs::path ex_in, ex_out;
  auto* ply = app.add_subcommand("export-ply", "range image to point cloud");
  ply->add_option("--in", ex_in)->required();
  ply->add_option("--out", ex_out)->required();
  ply->callback([&] { action = [&] { return run_export(ex_in, ex_out, true); }; });
  auto* png = app.add_subcommand("export-png", "range image to 8-bit grayscale");
  png->add_option("--in", ex_in)->required();
  png->add_option("--out", ex_out)->required();
  png->callback([&] { action = [&] { return run_export(ex_in, ex_out, false); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (threads > 0) set_thread_count(threads);
    return action();
  } catch (const Error& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return exit_code_for(err.code());
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 1;
  }
}
