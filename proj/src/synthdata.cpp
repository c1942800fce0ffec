#include "tulip/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "tulip/error.hpp"
#include "tulip/io.hpp"
#include "tulip/kv_text.hpp"
#include "tulip/parallel.hpp"
#include "tulip/rng.hpp"

namespace tulip {

ScenePrimitive ScenePrimitive::ground(double z) {
  ScenePrimitive p;
  p.kind = PrimitiveKind::kGroundPlane;
  p.ground_z = z;
  return p;
}

ScenePrimitive ScenePrimitive::box(const Point3& lo, const Point3& hi) {
  ScenePrimitive p;
  p.kind = PrimitiveKind::kBox;
  p.box_min = lo;
  p.box_max = hi;
  return p;
}

ScenePrimitive ScenePrimitive::cylinder(double cx, double cy, double radius, double z_min,
                                        double z_max) {
  ScenePrimitive p;
  p.kind = PrimitiveKind::kCylinder;
  p.cx = cx;
  p.cy = cy;
  p.radius = radius;
  p.z_min = z_min;
  p.z_max = z_max;
  return p;
}

void ScenePrimitive::validate() const {
  switch (kind) {
    case PrimitiveKind::kGroundPlane:
      require(std::isfinite(ground_z), Errc::kInvalidArgument, "ground height must be finite");
      break;
    case PrimitiveKind::kBox:
      require(box_max.x > box_min.x && box_max.y > box_min.y && box_max.z > box_min.z,
              Errc::kInvalidArgument, "box extents must be positive");
      break;
    case PrimitiveKind::kCylinder:
      require(radius > 0.0, Errc::kInvalidArgument, "cylinder radius must be positive");
      require(z_max > z_min, Errc::kInvalidArgument, "cylinder height must be positive");
      break;
  }
}

namespace {

double axis(const Point3& p, int a) { return a == 0 ? p.x : (a == 1 ? p.y : p.z); }

// Checks every face plane and keeps hits that land inside the face rectangle.
double intersect_box(const ScenePrimitive& b, const Point3& d) {
  double best = kNoHit;
  for (int a = 0; a < 3; ++a) {
    const double da = axis(d, a);
    if (da == 0.0) continue;
    for (double plane : {axis(b.box_min, a), axis(b.box_max, a)}) {
      const double t = plane / da;
      if (!(t > 0.0) || t >= best) continue;
      bool inside = true;
      for (int o = 0; o < 3 && inside; ++o) {
        if (o == a) continue;
        const double c = t * axis(d, o);
        inside = c >= axis(b.box_min, o) && c <= axis(b.box_max, o);
      }
      if (inside) best = t;
    }
  }
  return best;
}

double intersect_cylinder(const ScenePrimitive& c, const Point3& d) {
  double best = kNoHit;
  const double a = d.x * d.x + d.y * d.y;
  if (a > 0.0) {
    const double b = -2.0 * (c.cx * d.x + c.cy * d.y);
    const double k = c.cx * c.cx + c.cy * c.cy - c.radius * c.radius;
    const double disc = b * b - 4.0 * a * k;
    if (disc >= 0.0) {
      const double s = std::sqrt(disc);
      for (double t : {(-b - s) / (2.0 * a), (-b + s) / (2.0 * a)}) {
        const double z = t * d.z;
        if (t > 0.0 && t < best && z >= c.z_min && z <= c.z_max) best = t;
      }
    }
  }
  if (d.z != 0.0) {
    for (double zc : {c.z_min, c.z_max}) {
      const double t = zc / d.z;
      if (!(t > 0.0) || t >= best) continue;
      const double px = t * d.x - c.cx;
      const double py = t * d.y - c.cy;
      if (px * px + py * py <= c.radius * c.radius) best = t;
    }
  }
  return best;
}

}  // namespace

double intersect(const ScenePrimitive& prim, const Point3& dir) {
  switch (prim.kind) {
    case PrimitiveKind::kGroundPlane: {
      if (dir.z == 0.0) return kNoHit;
      const double t = prim.ground_z / dir.z;
      return t > 0.0 ? t : kNoHit;
    }
    case PrimitiveKind::kBox: return intersect_box(prim, dir);
    case PrimitiveKind::kCylinder: return intersect_cylinder(prim, dir);
  }
  return kNoHit;
}

void SceneSpec::validate() const {
  intrinsics.validate();
  require(!primitives.empty(), Errc::kInvalidArgument, "scene needs at least one primitive");
  require(range_jitter >= 0.0, Errc::kInvalidArgument, "range jitter must be non-negative");
  for (const auto& p : primitives) p.validate();
}

RangeImage raycast_frame(const SceneSpec& spec) {
  spec.validate();
  const auto& intr = spec.intrinsics;
  RangeImage img(intr);
  const CounterRng jitter(spec.seed, rng_purpose::kScene, fnv1a("jitter"));
  const double max_range = intr.max_range;
  for (int v = 0; v < intr.height; ++v) {
    for (int u = 0; u < intr.width; ++u) {
      const Point3 dir = pixel_direction(v, u, intr);
      double t = kNoHit;
      for (const auto& p : spec.primitives) t = std::min(t, intersect(p, dir));
      if (t > max_range) continue;
      if (spec.range_jitter > 0.0) {
        // Two draws per pixel, addressed by pixel index.
        CounterRng px(spec.seed, rng_purpose::kScene,
                      jitter.bits_at(static_cast<std::uint64_t>(v) * intr.width + u));
        t = std::clamp(t + spec.range_jitter * px.normal(), 0.0, max_range);
      }
      img.at(v, u) = static_cast<float>(t);
    }
  }
  return img;
}

void SceneTemplate::validate() const {
  intrinsics.validate();
  require(sensor_height > 0.0, Errc::kInvalidArgument, "sensor height must be positive");
  require(placement_radius > clear_radius && clear_radius >= 0.0, Errc::kInvalidArgument,
          "placement radius must exceed the clear radius");
  require(min_boxes >= 0 && max_boxes >= min_boxes, Errc::kInvalidArgument, "bad box count range");
  require(min_cylinders >= 0 && max_cylinders >= min_cylinders, Errc::kInvalidArgument,
          "bad cylinder count range");
  require(range_jitter >= 0.0, Errc::kInvalidArgument, "range jitter must be non-negative");
}

SceneSpec random_scene(const SceneTemplate& tmpl, std::uint64_t seed, std::uint64_t frame_index) {
  tmpl.validate();
  CounterRng rng(seed, rng_purpose::kScene, frame_index);
  SceneSpec spec;
  spec.seed = hash_combine(seed, frame_index);
  spec.intrinsics = tmpl.intrinsics;
  spec.range_jitter = tmpl.range_jitter;
  const double ground = -tmpl.sensor_height;
  spec.primitives.push_back(ScenePrimitive::ground(ground));

  const double c2 = tmpl.clear_radius * tmpl.clear_radius;
  const double r2 = tmpl.placement_radius * tmpl.placement_radius;
  auto place = [&](double& x, double& y) {
    // Uniform over the annulus area.
    const double r = std::sqrt(c2 + rng.uniform() * (r2 - c2));
    const double phi = rng.uniform(-std::numbers::pi, std::numbers::pi);
    x = r * std::cos(phi);
    y = r * std::sin(phi);
  };

  const auto boxes = rng.uniform_int(tmpl.min_boxes, tmpl.max_boxes);
  for (std::int64_t i = 0; i < boxes; ++i) {
    double x = 0, y = 0;
    place(x, y);
    const double hx = rng.uniform(0.5, 3.0);
    const double hy = rng.uniform(0.5, 3.0);
    const double h = rng.uniform(1.0, 4.0);
    spec.primitives.push_back(
        ScenePrimitive::box({x - hx, y - hy, ground}, {x + hx, y + hy, ground + h}));
  }
  const auto cylinders = rng.uniform_int(tmpl.min_cylinders, tmpl.max_cylinders);
  for (std::int64_t i = 0; i < cylinders; ++i) {
    double x = 0, y = 0;
    place(x, y);
    const double radius = rng.uniform(0.2, 1.2);
    const double h = rng.uniform(2.0, 8.0);
    spec.primitives.push_back(ScenePrimitive::cylinder(x, y, radius, ground, ground + h));
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Manifest

std::vector<std::filesystem::path> DatasetManifest::paths(const std::string& split) const {
  std::vector<std::filesystem::path> out;
  for (const auto& e : entries)
    if (e.split == split) out.push_back(root / e.path);
  return out;
}

std::string DatasetManifest::param(const std::string& key) const {
  for (const auto& [k, v] : params)
    if (k == key) return v;
  fail(Errc::kFormatError, "manifest has no parameter " + key);
}

void DatasetManifest::validate() const {
  std::set<std::string> train, test;
  for (const auto& e : entries) {
    require(e.split == "train" || e.split == "test", Errc::kFormatError,
            "unknown split tag: " + e.split);
    (e.split == "train" ? train : test).insert(e.path);
    require(std::filesystem::is_regular_file(root / e.path), Errc::kIoFailure,
            "manifest references a missing file: " + (root / e.path).string());
  }
  for (const auto& p : train)
    require(!test.contains(p), Errc::kFormatError, "frame in both splits: " + p);
}

std::string DatasetManifest::to_text() const {
  std::ostringstream out;
  for (const auto& [k, v] : params) out << "# " << k << "=" << v << "\n";
  for (const auto& e : entries) out << e.split << "\t" << e.path << "\n";
  return out.str();
}

void DatasetManifest::write(const std::filesystem::path& file) const {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  require(out.is_open(), Errc::kIoFailure, "cannot open for writing: " + file.string());
  out << to_text();
  require(!out.fail(), Errc::kIoFailure, "failed writing " + file.string());
}

DatasetManifest DatasetManifest::read(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  require(in.is_open(), Errc::kIoFailure, "cannot open manifest: " + file.string());
  DatasetManifest m;
  m.root = file.parent_path();
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      const std::string body = kv::trim(std::string_view(line).substr(1));
      const auto eq = body.find('=');
      if (eq == std::string::npos) continue;
      m.params.emplace_back(body.substr(0, eq), body.substr(eq + 1));
      continue;
    }
    const auto tab = line.find('\t');
    require(tab != std::string::npos, Errc::kFormatError, "bad manifest line: " + line);
    m.entries.push_back({line.substr(0, tab), line.substr(tab + 1)});
  }
  return m;
}

DatasetManifest generate_dataset(int n_frames, const SceneTemplate& tmpl, std::uint64_t seed,
                                 const std::filesystem::path& out_dir, double train_fraction) {
  require(n_frames >= 1, Errc::kInvalidArgument, "n_frames must be at least 1");
  require(train_fraction >= 0.0 && train_fraction <= 1.0, Errc::kInvalidArgument,
          "train fraction must lie in [0, 1]");
  tmpl.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  require(!ec && std::filesystem::is_directory(out_dir), Errc::kIoFailure,
          "cannot create output directory " + out_dir.string());

  const int n_train = static_cast<int>(std::floor(n_frames * train_fraction + 0.5));
  DatasetManifest m;
  m.root = out_dir;
  const auto& intr = tmpl.intrinsics;
  m.params = {
      {"format", "tulip-manifest-1"},
      {"frames", std::to_string(n_frames)},
      {"seed", std::to_string(seed)},
      {"train_fraction", kv::format_double(train_fraction)},
      {"height", std::to_string(intr.height)},
      {"width", std::to_string(intr.width)},
      {"theta_min", kv::format_double(intr.theta_min)},
      {"theta_max", kv::format_double(intr.theta_max)},
      {"max_range", kv::format_double(intr.max_range)},
      {"sensor_height", kv::format_double(tmpl.sensor_height)},
      {"placement_radius", kv::format_double(tmpl.placement_radius)},
      {"boxes", std::to_string(tmpl.min_boxes) + "-" + std::to_string(tmpl.max_boxes)},
      {"cylinders", std::to_string(tmpl.min_cylinders) + "-" + std::to_string(tmpl.max_cylinders)},
      {"range_jitter", kv::format_double(tmpl.range_jitter)},
  };
  for (int i = 0; i < n_frames; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%06d.rimg", i);
    m.entries.push_back({i < n_train ? "train" : "test", name});
  }
  parallel_for(static_cast<std::size_t>(n_frames), [&](std::size_t i) {
    const RangeImage img = raycast_frame(random_scene(tmpl, seed, i));
    io::write_rimg(out_dir / m.entries[i].path, img);
  });
  m.write(out_dir / kManifestName);
  return m;
}

}  // namespace tulip
