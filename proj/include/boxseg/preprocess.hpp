#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "boxseg/volume.hpp"

namespace boxseg {

struct HuWindow {
  double low = -60.0;
  double high = 140.0;
};

/// Per-organ preprocessing preset: intensity window, the two cluster counts
/// used for pseudo masks, and the resize target.
struct OrganProfile {
  std::string name;
  HuWindow hu_window;
  std::vector<int> kmeans_ks;
  VolumeShape target_shape;

  void validate() const;
};

OrganProfile organ_profile(const std::string& name);  // liver | spleen | kidneys
// Applies {"hu_window":[lo,hi], "ks":[a,b], "target_shape":[S,H,W]} overrides.
OrganProfile apply_overrides(OrganProfile profile, const nlohmann::json& overrides);

/// Clips HU to the window and rescales linearly onto [0,1].
Volume window_normalize(const Volume& hu, HuWindow window);

struct SliceRange {
  std::size_t first = 0;
  std::size_t last = 0;  // inclusive

  std::size_t count() const { return last - first + 1; }
  friend bool operator==(const SliceRange&, const SliceRange&) = default;
};

// Smallest contiguous slice range that holds every foreground voxel / box.
SliceRange organ_slice_range(const Volume& labels);
SliceRange organ_slice_range(const SliceBoxSet& boxes);

std::pair<Volume, SliceRange> extract_organ_slab(const Volume& vol, const Volume& labels);
std::pair<Volume, SliceRange> extract_organ_slab(const Volume& vol, const SliceBoxSet& boxes);
Volume crop_slices(const Volume& vol, SliceRange range);

// Places a slab back into a zero-filled volume of `full` shape.
Volume embed_slab(const Volume& slab, SliceRange range, const VolumeShape& full);

enum class ResizeMode { Trilinear, Nearest };

/// Resamples with half-pixel (align_corners=false) coordinates. Trilinear is
/// rejected for label volumes.
Volume resize_volume(const Volume& vol, const VolumeShape& target, ResizeMode mode);

/// Per-slice tight foreground rectangle grown by `margin_px` and clipped to
/// the image. With `split_lr`, left and right foreground are boxed separately.
SliceBoxSet make_bounding_boxes(const Volume& gt, std::size_t margin_px, bool split_lr);

}  // namespace boxseg
