#include "boxseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "boxseg/parallel.hpp"
#include "boxseg/volume_io.hpp"

namespace boxseg {

namespace fs = std::filesystem;

void PhantomSpec::validate() const {
  shape.validate();
  if (shape.slices % 8 || shape.rows % 8 || shape.cols % 8)
    throw VolumeError("phantom: shape " + to_string(shape) + " must be divisible by 8 in every dim");
  if (n_blobs != 1 && n_blobs != 2) throw VolumeError("phantom: n_blobs must be 1 or 2");
  if (organ_intensity_hu.std < 0 || background_intensity_hu.std < 0 || noise_std_hu < 0)
    throw VolumeError("phantom: standard deviations must be >= 0");
  if (!(hole_probability >= 0.0 && hole_probability <= 1.0)) throw VolumeError("phantom: hole_probability must lie in [0,1]");
  if (!(hole_radius_px.first > 0.0 && hole_radius_px.first <= hole_radius_px.second))
    throw VolumeError("phantom: hole_radius_px must satisfy 0 < min <= max");
  const double spread = std::max(std::hypot(organ_intensity_hu.std, noise_std_hu), std::hypot(background_intensity_hu.std, noise_std_hu));
  if (std::abs(organ_intensity_hu.mean - background_intensity_hu.mean) < 3.0 * spread)
    throw VolumeError("phantom: organ and background means must differ by at least 3x the larger std");
}

nlohmann::json PhantomSpec::to_json() const {
  return {{"shape", {shape.slices, shape.rows, shape.cols}},
          {"organ_intensity_hu", {organ_intensity_hu.mean, organ_intensity_hu.std}},
          {"background_intensity_hu", {background_intensity_hu.mean, background_intensity_hu.std}},
          {"n_blobs", n_blobs},
          {"hole_probability", hole_probability},
          {"hole_radius_px", {hole_radius_px.first, hole_radius_px.second}},
          {"noise_std_hu", noise_std_hu},
          {"seed", seed}};
}

PhantomSpec PhantomSpec::from_json(const nlohmann::json& j, const PhantomSpec& base) {
  PhantomSpec s = base;
  auto pair = [&](const char* key) {
    const auto& v = j.at(key);
    if (!v.is_array() || v.size() != 2) throw VolumeError(std::string("phantom: '") + key + "' must be [a, b]");
    return std::pair<double, double>{v[0].get<double>(), v[1].get<double>()};
  };
  if (j.contains("shape")) {
    const auto d = j.at("shape").get<std::vector<std::size_t>>();
    if (d.size() != 3) throw VolumeError("phantom: 'shape' must be [S, H, W]");
    s.shape = {d[0], d[1], d[2]};
  }
  if (j.contains("organ_intensity_hu")) {
    const auto p = pair("organ_intensity_hu");
    s.organ_intensity_hu = {p.first, p.second};
  }
  if (j.contains("background_intensity_hu")) {
    const auto p = pair("background_intensity_hu");
    s.background_intensity_hu = {p.first, p.second};
  }
  if (j.contains("hole_radius_px")) s.hole_radius_px = pair("hole_radius_px");
  s.n_blobs = j.value("n_blobs", s.n_blobs);
  s.hole_probability = j.value("hole_probability", s.hole_probability);
  s.noise_std_hu = j.value("noise_std_hu", s.noise_std_hu);
  s.seed = j.value("seed", s.seed);
  s.validate();
  return s;
}

PhantomSpec PhantomSpec::from_json(const nlohmann::json& overrides) { return from_json(overrides, PhantomSpec{}); }

namespace {

struct Ellipsoid {
  double c[3];
  double a[3];
  bool contains(double s, double r, double col) const {
    const double ds = (s - c[0]) / a[0], dr = (r - c[1]) / a[1], dc = (col - c[2]) / a[2];
    return ds * ds + dr * dr + dc * dc <= 1.0;
  }
};

struct Sphere {
  double c[3];
  double radius;
  bool contains(double s, double r, double col) const {
    const double ds = s - c[0], dr = r - c[1], dc = col - c[2];
    return ds * ds + dr * dr + dc * dc <= radius * radius;
  }
};

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// Semi-axis drawn as a fraction of `extent`, centre placed so the blob stays
// at least one voxel away from [lo, hi).
void place_axis(std::mt19937_64& rng, double lo, double hi, double frac_lo, double frac_hi, double extent, double& centre,
                double& axis) {
  axis = uniform(rng, frac_lo, frac_hi) * extent;
  const double cmin = lo + 1.0 + axis, cmax = hi - 2.0 - axis;
  if (axis < 1.0 || cmin > cmax) throw VolumeError("phantom: blobs cannot fit within margins");
  centre = uniform(rng, cmin, cmax);
}

}  // namespace

Phantom generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  const auto& sh = spec.shape;
  const double S = static_cast<double>(sh.slices), R = static_cast<double>(sh.rows), C = static_cast<double>(sh.cols);
  std::mt19937_64 rng(spec.seed);

  std::vector<Ellipsoid> blobs;
  for (std::size_t b = 0; b < spec.n_blobs; ++b) {
    Ellipsoid e{};
    place_axis(rng, 0.0, S, 0.2, 0.35, S, e.c[0], e.a[0]);
    place_axis(rng, 0.0, R, 0.2, 0.35, R, e.c[1], e.a[1]);
    if (spec.n_blobs == 1) {
      place_axis(rng, 0.0, C, 0.2, 0.35, C, e.c[2], e.a[2]);
    } else {
      // Left blob ends before column C/2 - 1, right blob starts at C/2 + 1.
      const double half = std::floor(C / 2.0);
      if (b == 0) place_axis(rng, 0.0, half - 1.0, 0.1, 0.18, C, e.c[2], e.a[2]);
      else place_axis(rng, half, C, 0.1, 0.18, C, e.c[2], e.a[2]);
    }
    blobs.push_back(e);
  }

  // A hole must lie strictly inside its blob, including a one-voxel rim.
  std::vector<Sphere> holes;
  for (const auto& e : blobs) {
    if (uniform(rng, 0.0, 1.0) >= spec.hole_probability) continue;
    const double radius = uniform(rng, spec.hole_radius_px.first, spec.hole_radius_px.second);
    const double shrink = std::min({e.a[0], e.a[1], e.a[2]}) - radius - 1.0;
    if (shrink <= 0.0) continue;
    Sphere h{{e.c[0], e.c[1], e.c[2]}, radius};
    for (int d = 0; d < 3; ++d) h.c[d] += uniform(rng, -0.5, 0.5) * shrink;
    const Ellipsoid inner{{e.c[0], e.c[1], e.c[2]}, {e.a[0] - radius - 1.0, e.a[1] - radius - 1.0, e.a[2] - radius - 1.0}};
    if (inner.a[0] > 0 && inner.a[1] > 0 && inner.a[2] > 0 && inner.contains(h.c[0], h.c[1], h.c[2])) holes.push_back(h);
  }

  std::normal_distribution<double> organ(spec.organ_intensity_hu.mean, spec.organ_intensity_hu.std);
  std::normal_distribution<double> background(spec.background_intensity_hu.mean, spec.background_intensity_hu.std);
  std::normal_distribution<double> noise(0.0, spec.noise_std_hu);
  auto draw = [&](std::normal_distribution<double>& d, double sd) { return sd > 0.0 ? d(rng) : d.mean(); };

  std::vector<int16_t> hu(sh.voxels());
  std::vector<uint8_t> gt(sh.voxels(), 0);
  for (std::size_t s = 0; s < sh.slices; ++s)
    for (std::size_t r = 0; r < sh.rows; ++r)
      for (std::size_t c = 0; c < sh.cols; ++c) {
        const double fs_ = static_cast<double>(s), fr = static_cast<double>(r), fc = static_cast<double>(c);
        bool inside = std::any_of(blobs.begin(), blobs.end(), [&](const Ellipsoid& e) { return e.contains(fs_, fr, fc); });
        if (inside && std::any_of(holes.begin(), holes.end(), [&](const Sphere& h) { return h.contains(fs_, fr, fc); }))
          inside = false;
        double v = inside ? draw(organ, spec.organ_intensity_hu.std) : draw(background, spec.background_intensity_hu.std);
        v += draw(noise, spec.noise_std_hu);
        const std::size_t i = sh.index(s, r, c);
        hu[i] = static_cast<int16_t>(std::clamp(std::lround(v), -32768L, 32767L));
        gt[i] = inside ? 1 : 0;
      }
  return {Volume::hu(sh, std::move(hu)), Volume::labels(sh, std::move(gt))};
}

nlohmann::json generate_corpus(std::size_t n, const PhantomSpec& spec, const fs::path& out_dir) {
  spec.validate();
  fs::create_directories(out_dir);
  nlohmann::json cases = nlohmann::json::array();
  std::vector<std::string> ids(n);
  for (std::size_t i = 0; i < n; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "case_%03zu", i);
    ids[i] = buf;
  }
  parallel_for(n, [&](std::size_t i) {
    PhantomSpec s = spec;
    s.seed = spec.seed + i;
    const auto p = generate_phantom(s);
    save_volume(p.image, out_dir / (ids[i] + "_image.json"));
    save_volume(p.gt, out_dir / (ids[i] + "_gt.json"));
  });
  for (const auto& id : ids) cases.push_back({{"id", id}, {"image", id + "_image.json"}, {"gt", id + "_gt.json"}});
  nlohmann::json manifest{{"cases", cases}};
  write_json(manifest, out_dir / "manifest.json");
  return manifest;
}

}  // namespace boxseg
