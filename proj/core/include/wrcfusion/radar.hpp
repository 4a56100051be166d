#pragma once
#include <filesystem>
#include <vector>

#include "wrcfusion/box.hpp"
#include "wrcfusion/tensor.hpp"

namespace wrc {

// Dense 4D amplitude grid over (range, azimuth, elevation, Doppler) with
// physical axis coordinates. Amplitudes are linear power units, >= 0.
struct RadarCube {
  Tensor amp;  // [R x A x E x D]
  std::vector<double> range_m;
  std::vector<double> azimuth_rad;
  std::vector<double> elevation_rad;
  std::vector<double> doppler_mps;

  std::size_t r() const { return amp.shape()[0]; }
  std::size_t a() const { return amp.shape()[1]; }
  std::size_t e() const { return amp.shape()[2]; }
  std::size_t d() const { return amp.shape()[3]; }
};

void validate_cube(const RadarCube& cube);

enum class View { RA, EA };

// channel order within a ViewMap
enum ViewChannel : std::size_t {
  kAmpMax = 0,
  kAmpMedian = 1,
  kAmpVar = 2,
  kDopMax = 3,
  kDopMedian = 4,
  kDopVar = 5,
};

struct ViewMap {
  View view = View::RA;
  Tensor channels;  // [6 x H x W]
  std::vector<double> axis_h;  // range (RA) or elevation (EA) coordinates
  std::vector<double> axis_w;  // azimuth coordinates
};

// Statistics of one collapsed slab: plain amplitude stats plus
// amplitude-weighted Doppler stats. Exposed for direct testing.
struct SlabStats {
  double amp_max = 0, amp_median = 0, amp_var = 0;
  double dop_max = 0, dop_median = 0, dop_var = 0;
};
SlabStats compute_slab_stats(std::span<const double> amps,
                             std::span<const double> dops);

// Collapses the cube onto the requested plane. For EA the first and last
// three range bins are dropped before collapsing. When `normalize` is set
// (the default) every channel is z-scored over the map.
ViewMap project(const RadarCube& cube, View view, bool normalize = true);

// ---- synthetic scenes ----

struct SceneTarget {
  double x = 0, y = 0, z = 0;    // center, meters
  double w = 1, l = 1, h = 1;    // size, meters
  double yaw = 0;
  double radial_velocity = 0;    // m/s
  double reflectivity = 1;       // > 0
  int class_id = 0;
};

struct SyntheticScene {
  std::vector<SceneTarget> targets;
  double noise_floor = 0.0;
  std::uint64_t seed = 0;
};

struct CubeDims {
  std::size_t r = 32, a = 32, e = 8, d = 16;
};

// Field of view and axis extents shared by synthesis and box decoding.
struct SceneGeometry {
  double range_min = 0.0, range_max = 48.0;
  double azimuth_max = 0.5;    // +/- rad
  double elevation_max = 0.2;  // +/- rad
  double doppler_max = 8.0;    // +/- m/s
  std::size_t image_h = 64, image_w = 64;
};

struct SceneSample {
  RadarCube cube;
  Tensor image;  // [3 x H x W]
  std::vector<GroundTruthBox> boxes;
};

// Deposits one Gaussian blob per target (Doppler energy concentrated at the
// bin nearest its radial velocity), adds Rayleigh noise, renders the paired
// image with shaded pinhole-projected rectangles, and returns exact boxes.
SceneSample synthesize(const SyntheticScene& scene, const CubeDims& dims,
                       const SceneGeometry& geom);

// Draws a random scene with `max_targets` at most; class prototypes fix
// sizes and reflectivity so classes stay separable at desk scale.
SyntheticScene random_scene(std::uint64_t seed, const SceneGeometry& geom,
                            std::size_t max_targets = 2, double noise_floor = 0.03);

// ---- cube file format ----
// magic "WRCC", version u32, dims 4x u64, axes f64, payload f64 (LE).
inline constexpr std::uint32_t kCubeVersion = 1;
void write_cube(const std::filesystem::path& path, const RadarCube& cube);
RadarCube read_cube(const std::filesystem::path& path);

// image tensor file: magic "WRCI", version u32, rank u32, dims u64, f64 payload
void write_image(const std::filesystem::path& path, const Tensor& image);
Tensor read_image(const std::filesystem::path& path);

// boxes.txt: one `class x y z w l h yaw vr` line per box
void write_boxes(const std::filesystem::path& path,
                 const std::vector<GroundTruthBox>& boxes);
std::vector<GroundTruthBox> read_boxes(const std::filesystem::path& path);

}  // namespace wrc
