#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "tulip/geometry.hpp"

namespace tulip {

enum class PrimitiveKind { kGroundPlane, kBox, kCylinder };

// Sensor sits at the origin; all quantities in meters.
struct ScenePrimitive {
  PrimitiveKind kind = PrimitiveKind::kGroundPlane;
  double ground_z = -1.73;      // plane z = ground_z
  Point3 box_min, box_max;      // axis-aligned box corners
  double cx = 0.0, cy = 0.0;    // cylinder axis
  double radius = 0.0;
  double z_min = 0.0, z_max = 0.0;  // cylinder extent, caps included

  static ScenePrimitive ground(double z);
  static ScenePrimitive box(const Point3& lo, const Point3& hi);
  static ScenePrimitive cylinder(double cx, double cy, double radius, double z_min, double z_max);

  void validate() const;
};

inline constexpr double kNoHit = std::numeric_limits<double>::infinity();

// Smallest t > 0 with t * dir on the primitive surface, or kNoHit. dir need
// not be normalized; t is then in units of |dir|.
double intersect(const ScenePrimitive& prim, const Point3& dir);

struct SceneSpec {
  std::vector<ScenePrimitive> primitives;
  std::uint64_t seed = 0;
  SensorIntrinsics intrinsics;
  double range_jitter = 0.0;  // std-dev in meters of optional Gaussian noise

  void validate() const;
};

// One bin-centred ray per pixel; nearest hit, 0 beyond max_range or on a miss.
RangeImage raycast_frame(const SceneSpec& spec);

// Randomized scene layout used for dataset generation.
struct SceneTemplate {
  SensorIntrinsics intrinsics;
  double sensor_height = 1.73;
  double placement_radius = 40.0;
  double clear_radius = 3.0;  // no object centre closer than this to the sensor
  int min_boxes = 3, max_boxes = 10;
  int min_cylinders = 1, max_cylinders = 4;
  double range_jitter = 0.0;

  void validate() const;
};

// Deterministic in (tmpl, seed, frame_index).
SceneSpec random_scene(const SceneTemplate& tmpl, std::uint64_t seed, std::uint64_t frame_index);

struct ManifestEntry {
  std::string split;  // "train" or "test"
  std::string path;   // relative to the manifest directory

  bool operator==(const ManifestEntry&) const = default;
};

// Text layout: "# key=value" header lines, then "<split>\t<relative path>".
struct DatasetManifest {
  std::vector<std::pair<std::string, std::string>> params;
  std::vector<ManifestEntry> entries;
  std::filesystem::path root;  // directory relative paths resolve against

  std::vector<std::filesystem::path> paths(const std::string& split) const;
  std::string param(const std::string& key) const;

  // Splits are disjoint, tags known and every file exists.
  void validate() const;

  std::string to_text() const;
  void write(const std::filesystem::path& file) const;
  static DatasetManifest read(const std::filesystem::path& file);
};

inline constexpr const char* kManifestName = "manifest.txt";

// Writes n_frames .rimg files and manifest.txt into out_dir. The first
// round(n_frames * train_fraction) frames are tagged train, the rest test.
DatasetManifest generate_dataset(int n_frames, const SceneTemplate& tmpl, std::uint64_t seed,
                                 const std::filesystem::path& out_dir,
                                 double train_fraction = 0.8);

}  // namespace tulip
