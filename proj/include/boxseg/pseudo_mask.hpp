#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "boxseg/volume.hpp"

namespace boxseg {

struct KMeansResult {
  int k = 0;
  Image2D<int> assignments;
  std::vector<double> centroids;
  double wcss = 0.0;

  std::vector<std::size_t> cluster_sizes() const;
};

/// Scalar-intensity k-means on one slice: k-means++ seeding, Lloyd updates
/// until assignments stop changing (or `max_iters`), best-of-`restarts` by
/// WCSS. Throws if the slice has fewer than k distinct values.
KMeansResult kmeans_slice(const Slice2D& slice, int k, int restarts, int max_iters, uint64_t seed);

// Sum of squared distances of every pixel to its assigned centroid.
double wcss(const Slice2D& slice, const Image2D<int>& assignments, std::span<const double> centroids);

/// Zeroes every pixel outside the union of `boxes`.
Slice2D mask_outside_boxes(const Slice2D& slice, std::span<const SliceBox> boxes);

// 1 inside the union of `boxes`.
Mask2D box_union_mask(std::size_t rows, std::size_t cols, std::span<const SliceBox> boxes);

/// Marks the cluster with the second-largest pixel count as foreground
/// (ties go to the brighter centroid), keeping only pixels inside `boxes`.
Mask2D select_foreground(const KMeansResult& result, std::span<const SliceBox> boxes);

// Square structuring element of side 2r+1; pixels beyond the border are
// background for both operations.
Mask2D dilate(const Mask2D& mask, int radius);
Mask2D erode(const Mask2D& mask, int radius);
/// Dilation then erosion with a (2r+1)x(2r+1) square; r = 0 is the identity.
/// Computed as the closing of the mask seen as a subset of the unbounded
/// plane, then cropped, so foreground touching the border is preserved.
Mask2D morphological_closing(const Mask2D& mask, int radius);

/// Background components (4-connected) smaller than `hole_area_max` become
/// foreground.
Mask2D fill_holes(const Mask2D& mask, std::size_t hole_area_max);

/// Erases foreground components (8-connected) whose area is below
/// `min_frac` times the largest component's area.
Mask2D remove_small_components(const Mask2D& mask, double min_frac);

/// Per-pixel vote of two binary masks: agree -> that value, disagree -> 0.5.
Image2D<float> fuse_masks(const Mask2D& a, const Mask2D& b);

struct PseudoMaskParams {
  std::vector<int> ks{3, 4};
  std::size_t hole_area_max = 10;
  double fg_component_min_frac = 0.01;
  int closing_radius = 1;
  int kmeans_restarts = 5;
  int kmeans_max_iters = 100;
  uint64_t seed = 0;

  void validate() const;
};

struct StageRecord {
  std::size_t slice = 0;
  std::size_t box = 0;
  int k = 0;
  std::vector<std::size_t> cluster_sizes;
  std::vector<std::string> warnings;
};

struct PseudoMaskReport {
  std::vector<StageRecord> stages;
  nlohmann::json to_json() const;
};

// Seed used for the k-means runs of one (slice, box, k) triple.
uint64_t stage_seed(uint64_t base, std::size_t slice, std::size_t box, int k);

/// Binary foreground for one k on one box: the full per-k stage chain.
Mask2D box_foreground(const Slice2D& slice, const SliceBox& box, int k, const PseudoMaskParams& params,
                      uint64_t seed, StageRecord* record = nullptr);

/// Trinary {0, 0.5, 1} mask of one slice. Boxes are processed independently
/// and merged with a per-pixel maximum.
Image2D<float> pseudo_mask_slice(const Slice2D& slice, std::span<const SliceBox> boxes, std::size_t slice_index,
                                 const PseudoMaskParams& params, PseudoMaskReport* report = nullptr);

SoftLabelVolume generate_pseudo_mask(const Volume& normalized, const SliceBoxSet& boxes, const PseudoMaskParams& params,
                                     PseudoMaskReport* report = nullptr);

}  // namespace boxseg
