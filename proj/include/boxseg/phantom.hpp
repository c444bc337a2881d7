#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>

#include <json.hpp>

#include "boxseg/volume.hpp"

namespace boxseg {

struct IntensityStats {
  double mean = 0.0;
  double std = 0.0;
};

struct PhantomSpec {
  VolumeShape shape{16, 32, 32};
  IntensityStats organ_intensity_hu{60.0, 10.0};
  IntensityStats background_intensity_hu{-80.0, 15.0};
  std::size_t n_blobs = 1;
  double hole_probability = 0.3;  // per blob
  std::pair<double, double> hole_radius_px{1.0, 2.0};
  double noise_std_hu = 5.0;
  uint64_t seed = 0;

  // Throws unless the means are separated by 3x the larger spread and every
  // dim is a positive multiple of 8.
  void validate() const;
  nlohmann::json to_json() const;
  // Fields absent from `overrides` keep the values of `base`.
  static PhantomSpec from_json(const nlohmann::json& overrides, const PhantomSpec& base);
  static PhantomSpec from_json(const nlohmann::json& overrides);
};

struct Phantom {
  Volume image;  // int16 HU
  Volume gt;     // uint8 labels
};

/// Ellipsoid organ(s) on a uniform background with optional spherical holes
/// (holes take background statistics and are not part of the truth). Two
/// blobs sit in the left and right halves with at least two empty columns
/// between them. Deterministic per seed.
Phantom generate_phantom(const PhantomSpec& spec);

/// Phantoms with seeds spec.seed .. spec.seed + n - 1 written as
/// `case_NNN_image` / `case_NNN_gt` containers plus `manifest.json`
/// {"cases":[{"id","image","gt"}]}; file names in the manifest are relative
/// to out_dir. Returns the manifest.
nlohmann::json generate_corpus(std::size_t n, const PhantomSpec& spec, const std::filesystem::path& out_dir);

}  // namespace boxseg
