#include "tulip/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "tulip/error.hpp"
#include "tulip/io.hpp"
#include "tulip/kv_text.hpp"
#include "tulip/network.hpp"
#include "tulip/parallel.hpp"

namespace tulip {

double mae(const RangeImage& pred, const RangeImage& gt) {
  require(pred.height() == gt.height() && pred.width() == gt.width(), Errc::kShapeMismatch,
          "mae: " + std::to_string(pred.height()) + "x" + std::to_string(pred.width()) + " vs " +
              std::to_string(gt.height()) + "x" + std::to_string(gt.width()));
  require(gt.size() > 0, Errc::kShapeMismatch, "mae of an empty image");
  double sum = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i)
    sum += std::abs(double(pred.pixels()[i]) - double(gt.pixels()[i]));
  return sum / double(gt.size());
}

// ---------------------------------------------------------------------------
// Nearest neighbours

namespace {

double sq_dist(const Point3& a, const Point3& b) {
  const double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
  return dx * dx + dy * dy + dz * dz;
}

std::int64_t cell_coord(double x, double origin, double cell) {
  const double c = std::floor((x - origin) / cell);
  return static_cast<std::int64_t>(std::clamp(c, -1e12, 1e12));
}

}  // namespace

NearestNeighborGrid::NearestNeighborGrid(const PointCloud& cloud) {
  require(!cloud.empty(), Errc::kEmptyCloud, "nearest-neighbour grid over an empty cloud");
  Point3 lo = cloud.points.front(), hi = lo;
  for (const auto& p : cloud.points) {
    lo = {std::min(lo.x, p.x), std::min(lo.y, p.y), std::min(lo.z, p.z)};
    hi = {std::max(hi.x, p.x), std::max(hi.y, p.y), std::max(hi.z, p.z)};
  }
  origin_ = lo;
  const double n = double(cloud.size());
  double ext[3] = {hi.x - lo.x, hi.y - lo.y, hi.z - lo.z};
  std::sort(ext, ext + 3);
  // About one point per cell for a cloud filling its box; flat and linear
  // clouds size cells from their area or length instead.
  if (ext[0] > 0) cell_ = std::cbrt(ext[0] * ext[1] * ext[2] / n);
  else if (ext[1] > 0) cell_ = std::sqrt(ext[1] * ext[2] / n);
  else if (ext[2] > 0) cell_ = ext[2] / n;
  else cell_ = 1.0;
  const double max_cells = 4.0 * n + 64.0;
  for (;;) {
    dims_[0] = static_cast<std::int64_t>(std::floor((hi.x - lo.x) / cell_)) + 1;
    dims_[1] = static_cast<std::int64_t>(std::floor((hi.y - lo.y) / cell_)) + 1;
    dims_[2] = static_cast<std::int64_t>(std::floor((hi.z - lo.z) / cell_)) + 1;
    if (double(dims_[0]) * double(dims_[1]) * double(dims_[2]) <= max_cells) break;
    cell_ *= 1.25;
  }

  const auto cells = static_cast<std::size_t>(dims_[0] * dims_[1] * dims_[2]);
  std::vector<std::uint32_t> cell_of(cloud.size());
  start_.assign(cells + 1, 0);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.points[i];
    const auto ci = std::min(cell_coord(p.x, origin_.x, cell_), dims_[0] - 1);
    const auto cj = std::min(cell_coord(p.y, origin_.y, cell_), dims_[1] - 1);
    const auto ck = std::min(cell_coord(p.z, origin_.z, cell_), dims_[2] - 1);
    cell_of[i] = static_cast<std::uint32_t>(flat(ci, cj, ck));
    ++start_[cell_of[i] + 1];
  }
  for (std::size_t c = 0; c < cells; ++c) start_[c + 1] += start_[c];
  points_.resize(cloud.size());
  std::vector<std::uint32_t> fill(start_.begin(), start_.end() - 1);
  for (std::size_t i = 0; i < cloud.size(); ++i) points_[fill[cell_of[i]]++] = cloud.points[i];
}

double NearestNeighborGrid::scan_cell(std::int64_t i, std::int64_t j, std::int64_t k,
                                      const Point3& q, double best) const {
  const auto c = static_cast<std::size_t>(flat(i, j, k));
  for (std::uint32_t p = start_[c]; p < start_[c + 1]; ++p) best = std::min(best, sq_dist(q, points_[p]));
  return best;
}

double NearestNeighborGrid::nearest_distance(const Point3& q) const {
  const std::int64_t c[3] = {cell_coord(q.x, origin_.x, cell_), cell_coord(q.y, origin_.y, cell_),
                             cell_coord(q.z, origin_.z, cell_)};
  std::int64_t r_min = 0, r_max = 0;
  for (int a = 0; a < 3; ++a) {
    const std::int64_t top = dims_[a] - 1;
    r_min = std::max(r_min, c[a] < 0 ? -c[a] : (c[a] > top ? c[a] - top : std::int64_t{0}));
    r_max = std::max(r_max, std::max(std::abs(c[a]), std::abs(c[a] - top)));
  }
  double best = std::numeric_limits<double>::infinity();
  for (std::int64_t r = r_min; r <= r_max; ++r) {
    // Points in ring r are at least (r - 1) cells away along some axis.
    if (r > 0) {
      const double bound = double(r - 1) * cell_;
      if (best <= bound * bound) break;
    }
    const std::int64_t i0 = std::max<std::int64_t>(0, c[0] - r);
    const std::int64_t i1 = std::min(dims_[0] - 1, c[0] + r);
    const std::int64_t j0 = std::max<std::int64_t>(0, c[1] - r);
    const std::int64_t j1 = std::min(dims_[1] - 1, c[1] + r);
    const std::int64_t k0 = std::max<std::int64_t>(0, c[2] - r);
    const std::int64_t k1 = std::min(dims_[2] - 1, c[2] + r);
    for (std::int64_t i = i0; i <= i1; ++i) {
      for (std::int64_t j = j0; j <= j1; ++j) {
        if (std::abs(i - c[0]) == r || std::abs(j - c[1]) == r) {
          for (std::int64_t k = k0; k <= k1; ++k) best = scan_cell(i, j, k, q, best);
        } else {
          if (c[2] - r >= 0 && c[2] - r < dims_[2]) best = scan_cell(i, j, c[2] - r, q, best);
          if (r > 0 && c[2] + r >= 0 && c[2] + r < dims_[2]) best = scan_cell(i, j, c[2] + r, q, best);
        }
      }
    }
  }
  return std::sqrt(best);
}

namespace {

double mean_nearest(const PointCloud& from, const NearestNeighborGrid& to) {
  std::vector<double> d(from.size());
  constexpr std::size_t kChunk = 1024;
  parallel_for((from.size() + kChunk - 1) / kChunk, [&](std::size_t c) {
    for (std::size_t i = c * kChunk; i < std::min(from.size(), (c + 1) * kChunk); ++i)
      d[i] = to.nearest_distance(from.points[i]);
  });
  double sum = 0.0;
  for (double x : d) sum += x;
  return sum / double(from.size());
}

}  // namespace

double chamfer(const PointCloud& a, const PointCloud& b) {
  require(!a.empty() && !b.empty(), Errc::kEmptyCloud, "chamfer distance needs two non-empty clouds");
  const NearestNeighborGrid ga(a), gb(b);
  return 0.5 * (mean_nearest(a, gb) + mean_nearest(b, ga));
}

// ---------------------------------------------------------------------------
// Voxels

std::vector<VoxelKey> occupied_voxels(const PointCloud& pc, double voxel_size) {
  require(voxel_size > 0.0, Errc::kInvalidArgument, "voxel size must be positive");
  std::vector<VoxelKey> keys;
  keys.reserve(pc.size());
  for (const auto& p : pc.points) {
    keys.push_back({static_cast<std::int64_t>(std::floor(p.x / voxel_size)),
                    static_cast<std::int64_t>(std::floor(p.y / voxel_size)),
                    static_cast<std::int64_t>(std::floor(p.z / voxel_size))});
  }
  std::sort(keys.begin(), keys.end());
  keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
  return keys;
}

double voxel_iou(const PointCloud& a, const PointCloud& b, double voxel_size) {
  const auto va = occupied_voxels(a, voxel_size);
  const auto vb = occupied_voxels(b, voxel_size);
  if (va.empty() && vb.empty()) return 1.0;
  std::size_t inter = 0;
  for (std::size_t i = 0, j = 0; i < va.size() && j < vb.size();) {
    if (va[i] < vb[j]) ++i;
    else if (vb[j] < va[i]) ++j;
    else {
      ++inter;
      ++i;
      ++j;
    }
  }
  return double(inter) / double(va.size() + vb.size() - inter);
}

// ---------------------------------------------------------------------------
// Range bins

namespace {

void check_edges(const std::vector<double>& edges) {
  require(!edges.empty(), Errc::kInvalidArgument, "at least one bin edge is required");
  for (std::size_t i = 0; i < edges.size(); ++i) {
    require(std::isfinite(edges[i]), Errc::kInvalidArgument, "bin edges must be finite");
    require(i == 0 || edges[i] > edges[i - 1], Errc::kInvalidArgument,
            "bin edges must be strictly increasing");
  }
}

PointCloud select_range(const PointCloud& pc, double lo, double hi) {
  PointCloud out;
  for (const auto& p : pc.points) {
    const double d = std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z);
    if (d >= lo && d < hi) out.points.push_back(p);
  }
  return out;
}

}  // namespace

std::vector<BinMetrics> range_binned_eval(const PointCloud& pred_cloud, const PointCloud& gt_cloud,
                                          const RangeImage& pred_img, const RangeImage& gt_img,
                                          const std::vector<double>& edges, double voxel_size) {
  check_edges(edges);
  require(pred_img.height() == gt_img.height() && pred_img.width() == gt_img.width(),
          Errc::kShapeMismatch, "binned eval images differ in shape");
  std::vector<BinMetrics> bins(edges.size());
  for (std::size_t b = 0; b < edges.size(); ++b) {
    BinMetrics& m = bins[b];
    m.lo = edges[b];
    m.hi = b + 1 < edges.size() ? edges[b + 1] : std::numeric_limits<double>::infinity();
    double sum = 0.0;
    for (std::size_t i = 0; i < gt_img.size(); ++i) {
      const double g = gt_img.pixels()[i];
      if (g < m.lo || g >= m.hi) continue;
      sum += std::abs(double(pred_img.pixels()[i]) - g);
      ++m.pixels;
    }
    if (m.pixels > 0) m.mae = sum / double(m.pixels);
    const PointCloud p = select_range(pred_cloud, m.lo, m.hi);
    const PointCloud g = select_range(gt_cloud, m.lo, m.hi);
    m.pred_points = p.size();
    m.gt_points = g.size();
    if (!p.empty() && !g.empty()) m.chamfer = chamfer(p, g);
    if (!p.empty() || !g.empty()) m.iou = voxel_iou(p, g, voxel_size);
  }
  return bins;
}

// ---------------------------------------------------------------------------
// Frames and reports

void EvalOptions::validate() const {
  require(voxel_size > 0.0, Errc::kInvalidArgument, "voxel size must be positive");
  check_edges(bin_edges);
}

FrameMetrics evaluate_frame(const RangeImage& pred, const RangeImage& gt, const EvalOptions& opts) {
  opts.validate();
  FrameMetrics f;
  f.mae = mae(pred, gt);
  const PointCloud pc = range_image_to_pointcloud(pred);
  const PointCloud gc = range_image_to_pointcloud(gt);
  if (!pc.empty() && !gc.empty()) f.chamfer = chamfer(pc, gc);
  f.iou = voxel_iou(pc, gc, opts.voxel_size);
  f.bins = range_binned_eval(pc, gc, pred, gt, opts.bin_edges, opts.voxel_size);
  return f;
}

namespace {

struct MeanAcc {
  double sum = 0.0;
  std::size_t n = 0;
  void add(const std::optional<double>& v) {
    if (v) {
      sum += *v;
      ++n;
    }
  }
  std::optional<double> mean() const {
    return n ? std::optional<double>(sum / double(n)) : std::nullopt;
  }
};

}  // namespace

EvalReport summarize(std::vector<FrameMetrics> frames, const EvalOptions& opts) {
  opts.validate();
  EvalReport r;
  r.frame_count = frames.size();
  MeanAcc mae_acc, cd_acc, iou_acc;
  std::vector<MeanAcc> bm(opts.bin_edges.size()), bc(opts.bin_edges.size()), bi(opts.bin_edges.size());
  for (const auto& f : frames) {
    mae_acc.add(f.mae);
    cd_acc.add(f.chamfer);
    iou_acc.add(f.iou);
    require(f.bins.size() == opts.bin_edges.size(), Errc::kShapeMismatch,
            "frame bins do not match the bin edges");
    for (std::size_t b = 0; b < f.bins.size(); ++b) {
      bm[b].add(f.bins[b].mae);
      bc[b].add(f.bins[b].chamfer);
      bi[b].add(f.bins[b].iou);
    }
  }
  r.mae = mae_acc.mean().value_or(0.0);
  r.chamfer = cd_acc.mean().value_or(0.0);
  r.iou = iou_acc.mean().value_or(0.0);
  for (std::size_t b = 0; b < opts.bin_edges.size(); ++b) {
    BinSummary s;
    s.lo = opts.bin_edges[b];
    s.hi = b + 1 < opts.bin_edges.size() ? opts.bin_edges[b + 1]
                                         : std::numeric_limits<double>::infinity();
    s.mae = bm[b].mean();
    s.chamfer = bc[b].mean();
    s.iou = bi[b].mean();
    r.per_bin.push_back(s);
  }
  r.frames = std::move(frames);
  return r;
}

namespace {

std::set<std::string> rimg_names(const std::filesystem::path& dir) {
  require(std::filesystem::is_directory(dir), Errc::kIoFailure, "not a directory: " + dir.string());
  std::set<std::string> names;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".rimg") names.insert(e.path().filename().string());
  return names;
}

std::string fmt(const std::optional<double>& v) { return v ? kv::format_double(*v) : std::string(); }

std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.is_open(), Errc::kIoFailure, "cannot open for writing: " + path.string());
  return out;
}

}  // namespace

EvalReport evaluate_frames(const std::filesystem::path& pred_dir,
                           const std::vector<std::filesystem::path>& gt_frames,
                           const EvalOptions& opts) {
  opts.validate();
  require(!gt_frames.empty(), Errc::kInvalidArgument, "no ground-truth frames");
  std::set<std::string> gt_names;
  for (const auto& p : gt_frames) gt_names.insert(p.filename().string());
  require(gt_names.size() == gt_frames.size(), Errc::kInvalidArgument,
          "duplicate ground-truth frame names");
  const auto pred_names = rimg_names(pred_dir);
  require(pred_names == gt_names, Errc::kInvalidArgument,
          "prediction and ground-truth frame sets differ (" + std::to_string(pred_names.size()) +
              " vs " + std::to_string(gt_names.size()) + " files)");
  std::vector<std::filesystem::path> gt_sorted(gt_frames);
  std::sort(gt_sorted.begin(), gt_sorted.end(),
            [](const auto& a, const auto& b) { return a.filename() < b.filename(); });
  std::vector<FrameMetrics> frames(gt_sorted.size());
  parallel_for(gt_sorted.size(), [&](std::size_t i) {
    const std::string name = gt_sorted[i].filename().string();
    frames[i] = evaluate_frame(io::read_rimg(pred_dir / name), io::read_rimg(gt_sorted[i]), opts);
    frames[i].name = name;
  });
  return summarize(std::move(frames), opts);
}

EvalReport evaluate_directories(const std::filesystem::path& pred_dir,
                                const std::filesystem::path& gt_dir, const EvalOptions& opts) {
  const auto gt_names = rimg_names(gt_dir);
  require(!gt_names.empty(), Errc::kInvalidArgument, "no .rimg frames in " + gt_dir.string());
  std::vector<std::filesystem::path> gt;
  for (const auto& n : gt_names) gt.push_back(gt_dir / n);
  return evaluate_frames(pred_dir, gt, opts);
}

void write_report_csv(const std::filesystem::path& path, const EvalReport& report) {
  auto out = open_csv(path);
  out << "frame,mae,chamfer,iou\n";
  for (const auto& f : report.frames)
    out << f.name << "," << kv::format_double(f.mae) << "," << fmt(f.chamfer) << ","
        << kv::format_double(f.iou) << "\n";
  out << "mean," << kv::format_double(report.mae) << "," << kv::format_double(report.chamfer) << ","
      << kv::format_double(report.iou) << "\n";
  require(!out.fail(), Errc::kIoFailure, "failed writing " + path.string());
}

void write_bins_csv(const std::filesystem::path& path, const EvalReport& report) {
  auto out = open_csv(path);
  out << "frame,lo,hi,pixels,pred_points,gt_points,mae,chamfer,iou\n";
  for (const auto& f : report.frames)
    for (const auto& b : f.bins)
      out << f.name << "," << kv::format_double(b.lo) << "," << kv::format_double(b.hi) << ","
          << b.pixels << "," << b.pred_points << "," << b.gt_points << "," << fmt(b.mae) << ","
          << fmt(b.chamfer) << "," << fmt(b.iou) << "\n";
  for (const auto& b : report.per_bin)
    out << "mean," << kv::format_double(b.lo) << "," << kv::format_double(b.hi) << ",,,,"
        << fmt(b.mae) << "," << fmt(b.chamfer) << "," << fmt(b.iou) << "\n";
  require(!out.fail(), Errc::kIoFailure, "failed writing " + path.string());
}

std::string report_summary(const EvalReport& report) {
  std::ostringstream out;
  out << "frames  " << report.frame_count << "\n";
  out << "MAE     " << report.mae << " m\n";
  out << "CD      " << report.chamfer << " m\n";
  out << "IoU     " << report.iou << "\n";
  for (const auto& b : report.per_bin) {
    out << "  [" << b.lo << ", " << b.hi << ") m:";
    out << "  MAE " << (b.mae ? std::to_string(*b.mae) : "-");
    out << "  CD " << (b.chamfer ? std::to_string(*b.chamfer) : "-");
    out << "  IoU " << (b.iou ? std::to_string(*b.iou) : "-") << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Interpolation baselines

RangeImage bilinear_upsample(const RangeImage& img, int beta) {
  require(beta >= 1, Errc::kInvalidArgument, "beta must be >= 1");
  RangeImage out(upsampled_intrinsics(img.intrinsics(), beta));
  const int h = img.height();
  for (int y = 0; y < out.height(); ++y) {
    const int i0 = y / beta;
    const int i1 = std::min(i0 + 1, h - 1);
    const double t = double(y - i0 * beta) / double(beta);
    for (int u = 0; u < img.width(); ++u)
      out.at(y, u) = static_cast<float>((1.0 - t) * img.at(i0, u) + t * img.at(i1, u));
  }
  return out;
}

RangeImage nearest_upsample(const RangeImage& img, int beta) {
  require(beta >= 1, Errc::kInvalidArgument, "beta must be >= 1");
  RangeImage out(upsampled_intrinsics(img.intrinsics(), beta));
  for (int y = 0; y < out.height(); ++y)
    for (int u = 0; u < img.width(); ++u) out.at(y, u) = img.at(y / beta, u);
  return out;
}

}  // namespace tulip
