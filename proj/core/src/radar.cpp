#include "wrcfusion/radar.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "wrcfusion/error.hpp"
#include "wrcfusion/rng.hpp"

namespace wrc {

namespace {

std::vector<double> linear_axis(double lo, double hi, std::size_t n) {
  std::vector<double> a(n);
  const double step = (hi - lo) / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) a[i] = lo + step * static_cast<double>(i);
  return a;
}

void check_axis(const std::vector<double>& axis, std::size_t dim, const char* name) {
  if (axis.size() != dim)
    throw DimensionError(std::string("cube: ") + name + " axis length " +
                         std::to_string(axis.size()) + " != dimension " +
                         std::to_string(dim));
  for (std::size_t i = 1; i < axis.size(); ++i)
    if (!(axis[i] > axis[i - 1]))
      throw DimensionError(std::string("cube: ") + name +
                           " axis is not strictly increasing");
}

}  // namespace

void validate_cube(const RadarCube& cube) {
  if (!cube.amp.defined() || cube.amp.rank() != 4)
    throw DimensionError("cube: amp must be [R x A x E x D]");
  check_axis(cube.range_m, cube.r(), "range");
  check_axis(cube.azimuth_rad, cube.a(), "azimuth");
  check_axis(cube.elevation_rad, cube.e(), "elevation");
  check_axis(cube.doppler_mps, cube.d(), "doppler");
  for (double v : cube.amp.data()) {
    if (!std::isfinite(v)) throw NumericError("cube: non-finite amplitude");
    if (v < 0.0) throw NumericError("cube: negative amplitude");
  }
}

SlabStats compute_slab_stats(std::span<const double> amps,
                             std::span<const double> dops) {
  if (amps.size() != dops.size() || amps.empty())
    throw DimensionError("slab stats: amplitude/doppler sample count mismatch");
  const std::size_t n = amps.size();
  SlabStats st;

  // plain amplitude stats
  std::vector<double> sorted_amp(amps.begin(), amps.end());
  std::sort(sorted_amp.begin(), sorted_amp.end());
  st.amp_max = sorted_amp.back();
  st.amp_median = (n % 2 == 1)
                      ? sorted_amp[n / 2]
                      : 0.5 * (sorted_amp[n / 2 - 1] + sorted_amp[n / 2]);
  double mu = std::accumulate(sorted_amp.begin(), sorted_amp.end(), 0.0) /
              static_cast<double>(n);
  double var = 0.0;
  for (double v : sorted_amp) var += (v - mu) * (v - mu);
  st.amp_var = var / static_cast<double>(n);

  // amplitude-weighted Doppler stats over (coordinate, weight) pairs.
  // Sorting by coordinate makes every statistic independent of sample order.
  std::vector<std::pair<double, double>> samples(n);
  for (std::size_t i = 0; i < n; ++i) samples[i] = {dops[i], amps[i]};
  std::sort(samples.begin(), samples.end());
  double mass = 0.0;
  for (auto& [v, a] : samples) mass += a;
  if (mass <= 0.0) return st;  // empty cell: Doppler stats stay 0

  double best_amp = -1.0;
  for (auto& [v, a] : samples)
    if (a > best_amp) {
      best_amp = a;
      st.dop_max = v;
    }
  double cum = 0.0;
  for (auto& [v, a] : samples) {
    cum += a;
    if (cum >= 0.5 * mass) {
      st.dop_median = v;
      break;
    }
  }
  double wmean = 0.0;
  for (auto& [v, a] : samples) wmean += a * v;
  wmean /= mass;
  double wvar = 0.0;
  for (auto& [v, a] : samples) wvar += a * (v - wmean) * (v - wmean);
  st.dop_var = wvar / mass;
  return st;
}

ViewMap project(const RadarCube& cube, View view, bool normalize) {
  validate_cube(cube);
  const std::size_t r = cube.r(), a = cube.a(), e = cube.e(), d = cube.d();
  auto amp = cube.amp.data();
  const auto at = [&](std::size_t ri, std::size_t ai, std::size_t ei,
                      std::size_t di) {
    return amp[((ri * a + ai) * e + ei) * d + di];
  };

  ViewMap map;
  map.view = view;
  std::size_t h, w;
  if (view == View::RA) {
    h = r;
    w = a;
    map.axis_h = cube.range_m;
    map.axis_w = cube.azimuth_rad;
  } else {
    if (r <= 6)
      throw ConfigError("EA projection needs more than 6 range bins, got " +
                        std::to_string(r));
    h = e;
    w = a;
    map.axis_h = cube.elevation_rad;
    map.axis_w = cube.azimuth_rad;
  }

  std::vector<double> out(6 * h * w);
  std::vector<double> amps, dops;
  if (view == View::RA) {
    amps.resize(e * d);
    dops.resize(e * d);
    for (std::size_t ri = 0; ri < r; ++ri)
      for (std::size_t ai = 0; ai < a; ++ai) {
        std::size_t k = 0;
        for (std::size_t ei = 0; ei < e; ++ei)
          for (std::size_t di = 0; di < d; ++di, ++k) {
            amps[k] = at(ri, ai, ei, di);
            dops[k] = cube.doppler_mps[di];
          }
        SlabStats st = compute_slab_stats(amps, dops);
        const std::size_t cell = ri * w + ai;
        out[kAmpMax * h * w + cell] = st.amp_max;
        out[kAmpMedian * h * w + cell] = st.amp_median;
        out[kAmpVar * h * w + cell] = st.amp_var;
        out[kDopMax * h * w + cell] = st.dop_max;
        out[kDopMedian * h * w + cell] = st.dop_median;
        out[kDopVar * h * w + cell] = st.dop_var;
      }
  } else {
    const std::size_t r0 = 3, r1 = r - 3;  // drop 3 range bins at each end
    amps.resize((r1 - r0) * d);
    dops.resize((r1 - r0) * d);
    for (std::size_t ei = 0; ei < e; ++ei)
      for (std::size_t ai = 0; ai < a; ++ai) {
        std::size_t k = 0;
        for (std::size_t ri = r0; ri < r1; ++ri)
          for (std::size_t di = 0; di < d; ++di, ++k) {
            amps[k] = at(ri, ai, ei, di);
            dops[k] = cube.doppler_mps[di];
          }
        SlabStats st = compute_slab_stats(amps, dops);
        const std::size_t cell = ei * w + ai;
        out[kAmpMax * h * w + cell] = st.amp_max;
        out[kAmpMedian * h * w + cell] = st.amp_median;
        out[kAmpVar * h * w + cell] = st.amp_var;
        out[kDopMax * h * w + cell] = st.dop_max;
        out[kDopMedian * h * w + cell] = st.dop_median;
        out[kDopVar * h * w + cell] = st.dop_var;
      }
  }

  if (normalize) {
    for (std::size_t ch = 0; ch < 6; ++ch) {
      double* plane = out.data() + ch * h * w;
      const double n = static_cast<double>(h * w);
      double mu = 0.0;
      for (std::size_t i = 0; i < h * w; ++i) mu += plane[i];
      mu /= n;
      double var = 0.0;
      for (std::size_t i = 0; i < h * w; ++i) var += (plane[i] - mu) * (plane[i] - mu);
      var /= n;
      const double sd = std::sqrt(var);
      if (sd < 1e-12) {
        for (std::size_t i = 0; i < h * w; ++i) plane[i] = 0.0;
      } else {
        for (std::size_t i = 0; i < h * w; ++i) plane[i] = (plane[i] - mu) / sd;
      }
    }
  }

  map.channels = Tensor(Shape{6, h, w}, std::move(out));
  return map;
}

// ---- synthesis ----

SceneSample synthesize(const SyntheticScene& scene, const CubeDims& dims,
                       const SceneGeometry& geom) {
  if (dims.r < 4 || dims.a < 4 || dims.e < 4 || dims.d < 4)
    throw ConfigError("synthesize: every cube dimension must be >= 4");

  RadarCube cube;
  cube.range_m = linear_axis(geom.range_min, geom.range_max, dims.r);
  cube.azimuth_rad = linear_axis(-geom.azimuth_max, geom.azimuth_max, dims.a);
  cube.elevation_rad = linear_axis(-geom.elevation_max, geom.elevation_max, dims.e);
  cube.doppler_mps = linear_axis(-geom.doppler_max, geom.doppler_max, dims.d);
  std::vector<double> amp(dims.r * dims.a * dims.e * dims.d, 0.0);

  const double dr = cube.range_m[1] - cube.range_m[0];
  const double daz = cube.azimuth_rad[1] - cube.azimuth_rad[0];
  const double del = cube.elevation_rad[1] - cube.elevation_rad[0];
  const double ddop = cube.doppler_mps[1] - cube.doppler_mps[0];
  const double sig_r = 1.2 * dr, sig_az = 1.2 * daz, sig_el = 1.2 * del;
  const double sig_dop = 0.5 * ddop;

  std::vector<GroundTruthBox> boxes;
  for (std::size_t ti = 0; ti < scene.targets.size(); ++ti) {
    const SceneTarget& t = scene.targets[ti];
    if (!(t.reflectivity > 0.0))
      throw SceneError("target " + std::to_string(ti) + " has non-positive reflectivity");
    const double range = std::sqrt(t.x * t.x + t.y * t.y + t.z * t.z);
    const double azimuth = std::atan2(t.y, t.x);
    const double elevation = std::asin(range > 0.0 ? t.z / range : 0.0);
    auto outside = [](double v, const std::vector<double>& axis) {
      return v < axis.front() || v > axis.back();
    };
    if (range <= 0.0 || outside(range, cube.range_m) ||
        outside(azimuth, cube.azimuth_rad) ||
        outside(elevation, cube.elevation_rad) ||
        outside(t.radial_velocity, cube.doppler_mps)) {
      std::ostringstream os;
      os << "target " << ti << " at (" << t.x << ", " << t.y << ", " << t.z
         << ") with vr " << t.radial_velocity << " is outside the cube extent";
      throw SceneError(os.str());
    }

    // Doppler energy centered on the bin nearest the radial velocity
    std::size_t dbin = 0;
    for (std::size_t di = 1; di < dims.d; ++di)
      if (std::fabs(cube.doppler_mps[di] - t.radial_velocity) <
          std::fabs(cube.doppler_mps[dbin] - t.radial_velocity))
        dbin = di;
    const double dop_center = cube.doppler_mps[dbin];

    for (std::size_t ri = 0; ri < dims.r; ++ri) {
      const double zr = (cube.range_m[ri] - range) / sig_r;
      if (std::fabs(zr) > 3.5) continue;
      for (std::size_t ai = 0; ai < dims.a; ++ai) {
        const double za = (cube.azimuth_rad[ai] - azimuth) / sig_az;
        if (std::fabs(za) > 3.5) continue;
        for (std::size_t ei = 0; ei < dims.e; ++ei) {
          const double ze = (cube.elevation_rad[ei] - elevation) / sig_el;
          if (std::fabs(ze) > 3.5) continue;
          for (std::size_t di = 0; di < dims.d; ++di) {
            const double zd = (cube.doppler_mps[di] - dop_center) / sig_dop;
            if (std::fabs(zd) > 3.5) continue;
            amp[((ri * dims.a + ai) * dims.e + ei) * dims.d + di] +=
                t.reflectivity *
                std::exp(-0.5 * (zr * zr + za * za + ze * ze + zd * zd));
          }
        }
      }
    }

    GroundTruthBox gt;
    gt.class_id = t.class_id;
    gt.box = Box3D{t.x, t.y, t.z, t.w, t.l, t.h, t.yaw};
    gt.radial_velocity = t.radial_velocity;
    boxes.push_back(gt);
  }

  if (scene.noise_floor > 0.0) {
    Rng rng(scene.seed * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL);
    for (double& v : amp) v += rng.rayleigh(scene.noise_floor);
  }
  cube.amp = Tensor(Shape{dims.r, dims.a, dims.e, dims.d}, std::move(amp));

  // paired image: shaded class-tinted rectangles via pinhole projection,
  // painted far to near
  const std::size_t ih = geom.image_h, iw = geom.image_w;
  std::vector<double> img(3 * ih * iw, 0.0);
  Rng img_rng(scene.seed * 0x2545f4914f6cdd1dULL + 0x9e3779b97f4a7c15ULL);
  for (double& v : img) v = 0.02 * img_rng.uniform();

  const double fx = (static_cast<double>(iw) / 2.0) / std::tan(geom.azimuth_max);
  const double fy = (static_cast<double>(ih) / 2.0) / std::tan(geom.elevation_max);
  std::vector<std::size_t> order(scene.targets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a_, std::size_t b_) {
    return scene.targets[a_].x > scene.targets[b_].x;  // far first
  });
  static const double kTint[2][3] = {{0.95, 0.45, 0.25}, {0.25, 0.5, 0.95}};
  for (std::size_t oi : order) {
    const SceneTarget& t = scene.targets[oi];
    if (t.x <= 0.5) continue;
    const double uc = static_cast<double>(iw) / 2.0 - fx * (t.y / t.x);
    const double vc = static_cast<double>(ih) / 2.0 - fy * (t.z / t.x);
    const double eu = fx * (std::max(t.w, t.l) * 0.5) / t.x;
    const double ev = fy * (t.h * 0.5) / t.x;
    const double shade = std::min(1.0, 0.35 + 0.25 * t.reflectivity);
    const int tint = t.class_id % 2;
    const long u0 = std::lround(std::floor(uc - eu)), u1 = std::lround(std::ceil(uc + eu));
    const long v0 = std::lround(std::floor(vc - ev)), v1 = std::lround(std::ceil(vc + ev));
    for (long vv = std::max(0L, v0); vv <= std::min<long>(ih - 1, v1); ++vv)
      for (long uu = std::max(0L, u0); uu <= std::min<long>(iw - 1, u1); ++uu)
        for (std::size_t ch = 0; ch < 3; ++ch)
          img[(ch * ih + static_cast<std::size_t>(vv)) * iw +
              static_cast<std::size_t>(uu)] = shade * kTint[tint][ch];
  }

  SceneSample sample;
  sample.cube = std::move(cube);
  sample.image = Tensor(Shape{3, ih, iw}, std::move(img));
  sample.boxes = std::move(boxes);
  return sample;
}

SyntheticScene random_scene(std::uint64_t seed, const SceneGeometry& geom,
                            std::size_t max_targets, double noise_floor) {
  // class prototypes: (w, l, h, reflectivity)
  static const double kProto[2][4] = {{1.9, 4.2, 1.6, 1.0}, {2.6, 8.0, 3.0, 2.4}};
  Rng rng(seed);
  SyntheticScene scene;
  scene.seed = seed;
  scene.noise_floor = noise_floor;
  const std::size_t count = 1 + rng.index(std::max<std::size_t>(1, max_targets));
  for (std::size_t i = 0; i < count; ++i) {
    for (int attempt = 0; attempt < 20; ++attempt) {
      SceneTarget t;
      t.class_id = static_cast<int>(rng.index(2));
      const double* proto = kProto[t.class_id];
      const double jitter = 0.9 + 0.2 * rng.uniform();
      t.w = proto[0] * jitter;
      t.l = proto[1] * jitter;
      t.h = proto[2] * jitter;
      t.reflectivity = proto[3] * (0.9 + 0.2 * rng.uniform());
      const double range = rng.uniform(10.0, 0.85 * geom.range_max);
      const double azimuth = rng.uniform(-0.8, 0.8) * geom.azimuth_max;
      const double zmax = std::min(1.2, 0.8 * range * std::sin(geom.elevation_max));
      t.z = rng.uniform(0.2, std::max(0.25, zmax));
      const double elevation = std::asin(t.z / range);
      t.x = range * std::cos(elevation) * std::cos(azimuth);
      t.y = range * std::cos(elevation) * std::sin(azimuth);
      t.yaw = rng.uniform(-0.35, 0.35);
      t.radial_velocity = rng.uniform(-0.75, 0.75) * geom.doppler_max;
      bool clear = true;
      for (const SceneTarget& other : scene.targets) {
        const double dx = other.x - t.x, dy = other.y - t.y;
        if (std::sqrt(dx * dx + dy * dy) < 8.0) clear = false;
      }
      if (clear) {
        scene.targets.push_back(t);
        break;
      }
    }
  }
  return scene;
}

// ---- file I/O ----

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}
void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}
void put_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(os, bits);
}

struct BinReader {
  std::ifstream in;
  std::size_t offset = 0;
  std::string path;

  void read(void* dst, std::size_t n, const char* what) {
    in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n)
      throw FormatError(path + ": truncated while reading " + std::string(what) +
                        " at byte offset " + std::to_string(offset));
    offset += n;
  }
  std::uint32_t u32(const char* what) {
    unsigned char b[4];
    read(b, 4, what);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  std::uint64_t u64(const char* what) {
    unsigned char b[8];
    read(b, 8, what);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  double f64(const char* what) {
    std::uint64_t bits = u64(what);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  void expect_magic(const char* magic) {
    char m[4];
    read(m, 4, "magic");
    if (std::memcmp(m, magic, 4) != 0)
      throw FormatError(path + ": bad magic at byte offset 0, expected \"" +
                        std::string(magic) + "\"");
  }
  std::uint32_t expect_version(std::uint32_t supported) {
    const std::size_t at = offset;
    const std::uint32_t v = u32("version");
    if (v != supported)
      throw FormatError(path + ": version " + std::to_string(v) +
                        " at byte offset " + std::to_string(at) +
                        " does not match supported version " +
                        std::to_string(supported));
    return v;
  }
};

}  // namespace

void write_cube(const std::filesystem::path& path, const RadarCube& cube) {
  validate_cube(cube);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open cube file for writing: " + path.string());
  os.write("WRCC", 4);
  put_u32(os, kCubeVersion);
  put_u64(os, cube.r());
  put_u64(os, cube.a());
  put_u64(os, cube.e());
  put_u64(os, cube.d());
  for (double v : cube.range_m) put_f64(os, v);
  for (double v : cube.azimuth_rad) put_f64(os, v);
  for (double v : cube.elevation_rad) put_f64(os, v);
  for (double v : cube.doppler_mps) put_f64(os, v);
  for (double v : cube.amp.data()) put_f64(os, v);
  if (!os) throw IoError("write failed: " + path.string());
}

RadarCube read_cube(const std::filesystem::path& path) {
  BinReader r;
  r.path = path.string();
  r.in.open(path, std::ios::binary);
  if (!r.in) throw IoError("cannot open cube file: " + path.string());
  r.expect_magic("WRCC");
  r.expect_version(kCubeVersion);
  RadarCube cube;
  const std::size_t R = r.u64("range dim"), A = r.u64("azimuth dim");
  const std::size_t E = r.u64("elevation dim"), D = r.u64("doppler dim");
  cube.range_m.resize(R);
  cube.azimuth_rad.resize(A);
  cube.elevation_rad.resize(E);
  cube.doppler_mps.resize(D);
  for (auto& v : cube.range_m) v = r.f64("range axis");
  for (auto& v : cube.azimuth_rad) v = r.f64("azimuth axis");
  for (auto& v : cube.elevation_rad) v = r.f64("elevation axis");
  for (auto& v : cube.doppler_mps) v = r.f64("doppler axis");
  std::vector<double> amp(R * A * E * D);
  for (auto& v : amp) v = r.f64("amplitude payload");
  cube.amp = Tensor(Shape{R, A, E, D}, std::move(amp));
  validate_cube(cube);
  return cube;
}

void write_image(const std::filesystem::path& path, const Tensor& image) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open image file for writing: " + path.string());
  os.write("WRCI", 4);
  put_u32(os, 1);
  put_u32(os, static_cast<std::uint32_t>(image.rank()));
  for (std::size_t d : image.shape()) put_u64(os, d);
  for (double v : image.data()) put_f64(os, v);
  if (!os) throw IoError("write failed: " + path.string());
}

Tensor read_image(const std::filesystem::path& path) {
  BinReader r;
  r.path = path.string();
  r.in.open(path, std::ios::binary);
  if (!r.in) throw IoError("cannot open image file: " + path.string());
  r.expect_magic("WRCI");
  r.expect_version(1);
  const std::uint32_t rank = r.u32("rank");
  Shape shape(rank);
  std::size_t numel = 1;
  for (auto& d : shape) {
    d = r.u64("dim");
    numel *= d;
  }
  std::vector<double> data(numel);
  for (auto& v : data) v = r.f64("payload");
  return Tensor(std::move(shape), std::move(data));
}

void write_boxes(const std::filesystem::path& path,
                 const std::vector<GroundTruthBox>& boxes) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open boxes file for writing: " + path.string());
  os.precision(17);
  for (const GroundTruthBox& b : boxes)
    os << b.class_id << ' ' << b.box.x << ' ' << b.box.y << ' ' << b.box.z << ' '
       << b.box.w << ' ' << b.box.l << ' ' << b.box.h << ' ' << b.box.yaw << ' '
       << b.radial_velocity << '\n';
  if (!os) throw IoError("write failed: " + path.string());
}

std::vector<GroundTruthBox> read_boxes(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open boxes file: " + path.string());
  std::vector<GroundTruthBox> boxes;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    GroundTruthBox b;
    if (!(ls >> b.class_id >> b.box.x >> b.box.y >> b.box.z >> b.box.w >>
          b.box.l >> b.box.h >> b.box.yaw >> b.radial_velocity))
      throw FormatError(path.string() + ": malformed box on line " +
                        std::to_string(line_no));
    boxes.push_back(b);
  }
  return boxes;
}

}  // namespace wrc
