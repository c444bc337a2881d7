#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace boxseg {

// Thrown for contract violations on volume data (bad shapes, out-of-range
// values, mismatched inputs). Message names the offending field.
class VolumeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct VolumeShape {
  std::size_t slices = 1;
  std::size_t rows = 1;
  std::size_t cols = 1;

  std::size_t voxels() const { return slices * rows * cols; }
  std::size_t slice_size() const { return rows * cols; }
  std::size_t index(std::size_t s, std::size_t r, std::size_t c) const {
    return (s * rows + r) * cols + c;
  }
  void validate() const;

  friend bool operator==(const VolumeShape&, const VolumeShape&) = default;
};

std::string to_string(const VolumeShape& shape);

enum class DType { Int16HU, Float32Normalized, Uint8Label, Float32Soft };

std::string dtype_name(DType dtype);
DType parse_dtype(const std::string& name);
std::size_t dtype_size(DType dtype);

// (z, y, x) voxel spacing in millimetres.
using Spacing = std::array<double, 3>;

/// A 3D scalar grid with (slice, row, col) layout, slice-major.
///
/// The dtype decides both storage and value constraints: normalized and
/// soft volumes hold floats in [0,1], label volumes hold {0,1}. Instances are
/// immutable once built; factories validate their input.
class Volume {
 public:
  static Volume hu(VolumeShape shape, std::vector<int16_t> data, Spacing spacing = {1, 1, 1});
  static Volume normalized(VolumeShape shape, std::vector<float> data, Spacing spacing = {1, 1, 1});
  static Volume soft(VolumeShape shape, std::vector<float> data, Spacing spacing = {1, 1, 1});
  // Accepts 255 as foreground and stores it as 1.
  static Volume labels(VolumeShape shape, std::vector<uint8_t> data, Spacing spacing = {1, 1, 1});

  const VolumeShape& shape() const { return shape_; }
  DType dtype() const { return dtype_; }
  const Spacing& spacing() const { return spacing_; }

  std::span<const int16_t> hu_data() const;
  std::span<const float> float_data() const;  // normalized or soft
  std::span<const uint8_t> label_data() const;

  bool is_float() const { return dtype_ == DType::Float32Normalized || dtype_ == DType::Float32Soft; }

  // Value at a voxel converted to double regardless of dtype.
  double value(std::size_t index) const;

  friend bool operator==(const Volume&, const Volume&) = default;

 private:
  Volume(VolumeShape shape, DType dtype, Spacing spacing);

  VolumeShape shape_;
  DType dtype_ = DType::Float32Normalized;
  Spacing spacing_{1, 1, 1};
  std::variant<std::vector<int16_t>, std::vector<float>, std::vector<uint8_t>> data_;
};

/// Voxel grid of soft labels in [0,1]: fresh pseudo masks ({0, 0.5, 1}) and
/// the running ensemble labels.
struct SoftLabelVolume {
  VolumeShape shape;
  std::vector<float> data;

  SoftLabelVolume() = default;
  SoftLabelVolume(VolumeShape shape, std::vector<float> data);
  explicit SoftLabelVolume(VolumeShape shape) : shape(shape), data(shape.voxels(), 0.0f) {}

  static SoftLabelVolume from_volume(const Volume& vol);
  Volume to_volume(Spacing spacing = {1, 1, 1}) const;

  friend bool operator==(const SoftLabelVolume&, const SoftLabelVolume&) = default;
};

/// Output voxel is 1 iff the soft value is strictly greater than threshold.
Volume binarize(const SoftLabelVolume& vol, double threshold, Spacing spacing = {1, 1, 1});

/// Inclusive pixel rectangle on one slice.
struct SliceBox {
  std::size_t slice_index = 0;
  std::size_t row_min = 0;
  std::size_t col_min = 0;
  std::size_t row_max = 0;
  std::size_t col_max = 0;

  bool contains(std::size_t r, std::size_t c) const {
    return r >= row_min && r <= row_max && c >= col_min && c <= col_max;
  }
  bool overlaps(const SliceBox& other) const;

  friend bool operator==(const SliceBox&, const SliceBox&) = default;
};

/// Per-slice bounding boxes; zero, one or two disjoint boxes per slice.
class SliceBoxSet {
 public:
  SliceBoxSet() = default;
  explicit SliceBoxSet(VolumeShape shape) : shape_(shape) {}

  void add(const SliceBox& box);

  const VolumeShape& shape() const { return shape_; }
  const std::map<std::size_t, std::vector<SliceBox>>& boxes() const { return boxes_; }
  std::span<const SliceBox> on_slice(std::size_t slice) const;
  bool empty() const { return boxes_.empty(); }
  std::size_t box_count() const;

  friend bool operator==(const SliceBoxSet&, const SliceBoxSet&) = default;

 private:
  VolumeShape shape_;
  std::map<std::size_t, std::vector<SliceBox>> boxes_;
};

/// Row-major 2D grid used for per-slice processing.
template <typename T>
struct Image2D {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Image2D() = default;
  Image2D(std::size_t rows, std::size_t cols, T fill = T{}) : rows(rows), cols(cols), data(rows * cols, fill) {}
  Image2D(std::size_t rows, std::size_t cols, std::vector<T> values) : rows(rows), cols(cols), data(std::move(values)) {
    if (data.size() != rows * cols) throw VolumeError("Image2D: data length does not match rows*cols");
  }

  T& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::size_t size() const { return data.size(); }

  friend bool operator==(const Image2D&, const Image2D&) = default;
};

using Mask2D = Image2D<uint8_t>;
using Slice2D = Image2D<float>;

// Copies one slice out of a float volume (normalized or soft).
Slice2D extract_slice(const Volume& vol, std::size_t slice);
Mask2D extract_label_slice(const Volume& vol, std::size_t slice);

struct ComponentLabels {
  Image2D<int> labels;             // 0 = background, ids dense from 1
  std::vector<std::size_t> sizes;  // sizes[id]; sizes[0] unused (0)

  std::size_t count() const { return sizes.empty() ? 0 : sizes.size() - 1; }
};

/// Labels the 1-pixels of a binary grid. Ids follow raster order of each
/// component's first pixel.
ComponentLabels connected_components(const Mask2D& mask, int connectivity);

}  // namespace boxseg
